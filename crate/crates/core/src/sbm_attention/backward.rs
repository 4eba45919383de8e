use super::forward::{HeadForwardTrace, MlpCache};
use super::AttentionHead;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{axpy, dot, Matrix};

/// Gradients of one head with respect to its parameters and input.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub mlp_w1: Matrix,
    pub mlp_b1: Matrix,
    pub mlp_w2: Matrix,
    pub mlp_b2: Matrix,
    pub clusters: Matrix,
    /// `∂L/∂X` for the `n × d` head input.
    pub input: Matrix,
    /// `∂L/∂pᵢⱼ` per edge, straight-through part plus density term.
    pub edge_prob_grad: Vec<f64>,
    /// `∂L/∂Aᵢⱼ` per edge.
    pub edge_logit_grad: Vec<f64>,
}

impl HeadGradients {
    /// Parameter gradients in `HEAD_PARAM_NAMES` order.
    pub fn params(&self) -> [&Matrix; 8] {
        [&self.w_q, &self.w_k, &self.w_v, &self.mlp_w1, &self.mlp_b1, &self.mlp_w2, &self.mlp_b2, &self.clusters]
    }
}

struct MlpGrads {
    w1: Matrix,
    b1: Matrix,
    w2: Matrix,
    b2: Matrix,
    input: Matrix,
}

fn mlp_backward(head: &AttentionHead, input: &Matrix, cache: &MlpCache, d_out: &Matrix) -> Result<MlpGrads> {
    let act = cache.hidden_pre.map(|v| v.max(0.0));
    let w2 = act.t_matmul(d_out)?;
    let b2 = d_out.col_sums();
    let mut d_hidden = d_out.matmul_t(&head.mlp_w2)?;
    for (g, &h) in d_hidden.data_mut().iter_mut().zip(cache.hidden_pre.data()) {
        if h <= 0.0 {
            *g = 0.0;
        }
    }
    let w1 = input.t_matmul(&d_hidden)?;
    let b1 = d_hidden.col_sums();
    let input = d_hidden.matmul_t(&head.mlp_w1)?;
    Ok(MlpGrads { w1, b1, w2, b2, input })
}

/// Backward of [`super::head_forward`].
///
/// `density_weight` is the coefficient on the density regularizer as seen by
/// this example; each present edge adds `density_weight / (n_heads_total ·
/// pair_count)` to `∂L/∂pᵢⱼ`. Only edges with `pᵢⱼ < 1` pass gradient to the
/// memberships.
pub fn head_backward(
    trace: &HeadForwardTrace,
    head: &AttentionHead,
    grad_output: &Matrix,
    density_weight: f64,
    n_heads_total: usize,
) -> Result<HeadGradients> {
    let (n, dh) = trace.output.shape();
    if grad_output.shape() != (n, dh) {
        return shape_err("head_backward grad", grad_output.shape(), (n, dh));
    }
    let m = trace.num_edges();
    if trace.edge_prob.len() != m {
        return Err(Error::Consistency("head_backward needs a trace with edge probabilities".into()));
    }
    if n_heads_total == 0 {
        return Err(Error::Domain("n_heads_total must be positive".into()));
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let cols = trace.mask.cols();

    // Pooling and masked softmax.
    let mut dv = Matrix::zeros(n, dh);
    let mut edge_logit_grad = vec![0.0; m];
    for i in 0..n {
        let range = trace.mask.row_range(i);
        if range.is_empty() {
            continue;
        }
        let g = grad_output.row(i);
        let mut weighted = 0.0;
        for e in range.clone() {
            let j = cols[e] as usize;
            let drop = trace.edge_dropout.as_ref().map_or(1.0, |d| d[e]);
            axpy(trace.edge_weights[e] * drop, g, dv.row_mut(j));
            let dw = drop * dot(g, trace.v.row(j));
            edge_logit_grad[e] = dw;
            weighted += trace.edge_weights[e] * dw;
        }
        for e in range {
            edge_logit_grad[e] = trace.edge_weights[e] * (edge_logit_grad[e] - weighted);
        }
    }

    // Edge dot products.
    let mut dq = Matrix::zeros(n, dh);
    let mut dk = Matrix::zeros(n, dh);
    for (e, (i, j)) in trace.mask.edges().enumerate() {
        let g = edge_logit_grad[e] * scale;
        axpy(g, trace.k.row(j), dq.row_mut(i));
        axpy(g, trace.q.row(i), dk.row_mut(j));
    }

    // Straight-through branch: ∂L/∂p = ∂L/∂A · A on present edges.
    let density_term =
        if trace.pair_count == 0 { 0.0 } else { density_weight / (n_heads_total * trace.pair_count) as f64 };
    let edge_prob_grad: Vec<f64> = (0..m)
        .map(|e| if trace.edge_prob[e] < 1.0 { edge_logit_grad[e] * trace.edge_logits[e] + density_term } else { 0.0 })
        .collect();

    let kc = head.num_clusters();
    let mut gk = Matrix::zeros(n, kc);
    let mut gtq = Matrix::zeros(n, kc);
    for (e, (i, j)) in trace.mask.edges().enumerate() {
        let g = edge_prob_grad[e];
        if g != 0.0 {
            axpy(g, trace.k_hat.row(j), gk.row_mut(i));
            axpy(g, trace.q_hat.row(i), gtq.row_mut(j));
        }
    }
    let d_q_hat = gk.matmul_t(&trace.s_hat)?;
    let d_k_hat = gtq.matmul(&trace.s_hat)?;
    let d_s_hat = trace.q_hat.t_matmul(&gk)?;

    // Sigmoid memberships.
    let sigmoid_back = |d_hat: &Matrix, hat: &Matrix| {
        let mut dz = d_hat.clone();
        for (g, &s) in dz.data_mut().iter_mut().zip(hat.data()) {
            *g *= s * (1.0 - s);
        }
        if let Some(valid) = &trace.valid {
            for (r, &ok) in valid.iter().enumerate() {
                if !ok {
                    dz.row_mut(r).fill(0.0);
                }
            }
        }
        dz
    };
    let dzq = sigmoid_back(&d_q_hat, &trace.q_hat);
    let dzk = sigmoid_back(&d_k_hat, &trace.k_hat);
    let mut d_clusters = dzq.t_matmul(&trace.mlp_q.output)?;
    d_clusters.add_assign(&dzk.t_matmul(&trace.mlp_k.output)?)?;
    let d_emb_q = dzq.matmul(&head.clusters)?;
    let d_emb_k = dzk.matmul(&head.clusters)?;

    // Block matrix: softmax over all entries of C Cᵀ.
    let inner: f64 = dot(d_s_hat.data(), trace.s_hat.data());
    let mut d_logits = Matrix::zeros(kc, kc);
    for ((g, &ds), &s) in d_logits.data_mut().iter_mut().zip(d_s_hat.data()).zip(trace.s_hat.data()) {
        *g = s * (ds - inner);
    }
    let sym = d_logits.add(&d_logits.transpose())?;
    d_clusters.add_assign(&sym.matmul(&head.clusters)?)?;

    // Shared MLP.
    let mq = mlp_backward(head, &trace.q, &trace.mlp_q, &d_emb_q)?;
    let mk = mlp_backward(head, &trace.k, &trace.mlp_k, &d_emb_k)?;
    dq.add_assign(&mq.input)?;
    dk.add_assign(&mk.input)?;

    // Projections.
    let x = &trace.input;
    let mut input = dq.matmul_t(&head.w_q)?;
    input.add_assign(&dk.matmul_t(&head.w_k)?)?;
    input.add_assign(&dv.matmul_t(&head.w_v)?)?;

    Ok(HeadGradients {
        w_q: x.t_matmul(&dq)?,
        w_k: x.t_matmul(&dk)?,
        w_v: x.t_matmul(&dv)?,
        mlp_w1: mq.w1.add(&mk.w1)?,
        mlp_b1: mq.b1.add(&mk.b1)?,
        mlp_w2: mq.w2.add(&mk.w2)?,
        mlp_b2: mq.b2.add(&mk.b2)?,
        clusters: d_clusters,
        input,
        edge_prob_grad,
        edge_logit_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use crate::rng::substream;
    use crate::sbm_attention::{head_forward, HeadForwardOptions};
    use crate::sbm_sampler::EdgeMask;

    fn setup() -> (AttentionHead, Matrix, Matrix) {
        let mut h = AttentionHead::new_random(5, 3, 2, 0.0, false, &mut substream(21, &[0])).unwrap();
        h.w_q.scale(30.0);
        h.w_k.scale(30.0);
        h.w_v.scale(30.0);
        let x = Matrix::random_normal(6, 5, 1.0, &mut substream(22, &[0]));
        let r = Matrix::random_normal(6, 3, 1.0, &mut substream(23, &[0]));
        (h, x, r)
    }

    // Anchored at the forward's own edge probabilities, the surrogate loss has
    // exactly the straight-through gradient, so every parameter can be checked.
    #[test]
    fn anchored_fixed_mask_gradients() {
        let (h, x, r) = setup();
        let mask = EdgeMask::from_edges(6, 6, [(0, 0), (0, 2), (1, 1), (1, 4), (1, 5), (3, 0), (4, 4), (5, 1), (5, 3)])
            .unwrap();
        let opts = HeadForwardOptions { injected_mask: Some(&mask), ..Default::default() };
        let tr = head_forward(&h, &x, &mut substream(0, &[0]), opts).unwrap();
        let anchor = tr.edge_prob.clone();
        let lambda = 0.3;
        let loss = |h: &AttentionHead, x: &Matrix| {
            let opts = HeadForwardOptions { injected_mask: Some(&mask), ste_anchor: Some(&anchor), ..Default::default() };
            let tr = head_forward(h, x, &mut substream(0, &[0]), opts).unwrap();
            let p_sum: f64 = tr.edge_prob.iter().sum();
            dot(tr.output.data(), r.data()) + lambda * p_sum / tr.pair_count as f64
        };
        let g = head_backward(&tr, &h, &r, lambda, 1).unwrap();

        for idx in 0..8 {
            let report = finite_diff_check(
                |p| {
                    let mut hh = h.clone();
                    *hh.params_mut()[idx] = p.clone();
                    loss(&hh, &x)
                },
                h.params()[idx],
                g.params()[idx],
                1e-6,
                1e-5,
            );
            assert!(report.passed, "param {idx}: {report:?}");
        }
        let report = finite_diff_check(|p| loss(&h, p), &x, &g.input, 1e-6, 1e-5);
        assert!(report.passed, "input: {report:?}");
    }

    #[test]
    fn density_term_reaches_every_edge() {
        let (h, x, _) = setup();
        let tr = head_forward(&h, &x, &mut substream(3, &[0]), Default::default()).unwrap();
        let zero = Matrix::zeros(6, 3);
        let g = head_backward(&tr, &h, &zero, 2.0, 4).unwrap();
        for (&gp, &p) in g.edge_prob_grad.iter().zip(&tr.edge_prob) {
            assert!(p >= 1.0 || (gp - 2.0 / (4.0 * 36.0)).abs() < 1e-15);
        }
        assert!(g.w_v.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_inference_trace_and_bad_shapes() {
        let (h, x, r) = setup();
        let opts = HeadForwardOptions { inference_only: true, ..Default::default() };
        let tr = head_forward(&h, &x, &mut substream(3, &[0]), opts).unwrap();
        if tr.num_edges() > 0 {
            assert!(head_backward(&tr, &h, &r, 0.0, 1).is_err());
        }
        let tr = head_forward(&h, &x, &mut substream(3, &[0]), Default::default()).unwrap();
        assert!(head_backward(&tr, &h, &Matrix::zeros(6, 2), 0.0, 1).is_err());
        assert!(head_backward(&tr, &h, &r, 0.0, 0).is_err());
    }
}
