use rand::Rng;

use super::AttentionHead;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{axpy, dot, sigmoid_scalar, softmax_all, softmax_rows, Matrix};
use crate::sbm_sampler::{add_self_loops, sample_mask_with_stats, with_exploration, EdgeMask, SbmParams};

/// Forward switches for [`head_forward`].
#[derive(Debug, Clone, Copy, Default)]
pub struct HeadForwardOptions<'a> {
    /// Enables exploration and attention dropout.
    pub training: bool,
    pub attn_dropout: f64,
    /// Use this mask instead of sampling (test and debugging hook).
    pub injected_mask: Option<&'a EdgeMask>,
    /// Per-position validity; invalid (padding) positions get zero
    /// memberships and never appear in the mask.
    pub valid: Option<&'a [bool]>,
    /// Frozen per-edge probabilities `p̄`. When set, each edge logit is scaled
    /// by `1 + pᵢⱼ − p̄ᵢⱼ`, which equals 1 at the anchor and whose derivative
    /// is the straight-through gradient. Used only by gradient checks.
    pub ste_anchor: Option<&'a [f64]>,
    /// Skip the straight-through bookkeeping (`edge_prob`); the trace can then
    /// not be passed to `head_backward`.
    pub inference_only: bool,
    pub count_ops: bool,
}

/// Hidden pre-activation and output of the shared node MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpCache {
    pub hidden_pre: Matrix,
    pub output: Matrix,
}

/// Instrumented work counters of one head forward. MAC = multiply-add.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounters {
    pub membership_macs: u64,
    pub block_macs: u64,
    pub sampling_ops: u64,
    pub dot_products: u64,
    pub dot_product_macs: u64,
    pub softmax_ops: u64,
    pub pooling_macs: u64,
    pub peak_live_floats: u64,
}

/// Everything the backward pass needs from one head forward.
#[derive(Debug, Clone)]
pub struct HeadForwardTrace {
    pub input: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub mlp_q: MlpCache,
    pub mlp_k: MlpCache,
    pub q_hat: Matrix,
    pub k_hat: Matrix,
    pub s_hat: Matrix,
    pub mask: EdgeMask,
    /// `pᵢⱼ = Q̂ᵢ Ŝ K̂ⱼᵀ` per edge, before exploration. Empty for
    /// inference-only traces.
    pub edge_prob: Vec<f64>,
    /// Logits `Aᵢⱼ` per edge.
    pub edge_logits: Vec<f64>,
    /// Masked-softmax weights per edge (before attention dropout).
    pub edge_weights: Vec<f64>,
    /// Attention-dropout multipliers per edge (`0` or `1/(1−rate)`).
    pub edge_dropout: Option<Vec<f64>>,
    pub output: Matrix,
    /// `|edges| / (valid_q · valid_k)`.
    pub density: f64,
    /// Number of valid query–key pairs (the density denominator).
    pub pair_count: usize,
    pub valid: Option<Vec<bool>>,
    pub counters: Option<OpCounters>,
}

impl HeadForwardTrace {
    pub fn num_edges(&self) -> usize {
        self.mask.num_edges()
    }
}

pub(crate) fn mlp_forward(head: &AttentionHead, input: &Matrix) -> Result<MlpCache> {
    let mut hidden_pre = input.matmul(&head.mlp_w1)?;
    hidden_pre.add_row_broadcast(&head.mlp_b1)?;
    let mut output = hidden_pre.map(|v| v.max(0.0)).matmul(&head.mlp_w2)?;
    output.add_row_broadcast(&head.mlp_b2)?;
    Ok(MlpCache { hidden_pre, output })
}

fn memberships(node: &Matrix, clusters: &Matrix, valid: Option<&[bool]>) -> Result<Matrix> {
    let mut hat = node.matmul_t(clusters)?;
    for r in 0..hat.rows() {
        let keep = valid.is_none_or(|v| v[r]);
        for x in hat.row_mut(r) {
            *x = if keep { sigmoid_scalar(*x) } else { 0.0 };
        }
    }
    Ok(hat)
}

/// Node memberships and block matrix for given queries and keys:
/// `Ŝ = softmax_all(C Cᵀ)`, `Q̂ = σ(MLP(Q) Cᵀ)`, `K̂ = σ(MLP(K) Cᵀ)`.
pub fn infer_sbm(head: &AttentionHead, q: &Matrix, k: &Matrix) -> Result<SbmParams> {
    let dh = head.head_dim();
    if q.cols() != dh {
        return shape_err("infer_sbm queries", q.shape(), head.mlp_w1.shape());
    }
    if k.cols() != dh {
        return shape_err("infer_sbm keys", k.shape(), head.mlp_w1.shape());
    }
    let q_hat = memberships(&mlp_forward(head, q)?.output, &head.clusters, None)?;
    let k_hat = memberships(&mlp_forward(head, k)?.output, &head.clusters, None)?;
    let s_hat = softmax_all(&head.clusters.matmul_t(&head.clusters)?);
    SbmParams::new(q_hat, s_hat, k_hat)
}

/// Dense full attention `softmax(Q Kᵀ / √d_h) V`; the reference the sampled
/// head reduces to under an all-ones mask.
pub fn full_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    let mut scores = q.matmul_t(k)?;
    scores.scale(1.0 / (q.cols() as f64).sqrt());
    softmax_rows(&scores).matmul(v)
}

/// One head forward on a single sequence `x` (`n × d`).
pub fn head_forward<R: Rng + ?Sized>(
    head: &AttentionHead,
    x: &Matrix,
    rng: &mut R,
    opts: HeadForwardOptions<'_>,
) -> Result<HeadForwardTrace> {
    head.check_shapes()?;
    let (n, d, dh, kc) = (x.rows(), head.d_model(), head.head_dim(), head.num_clusters());
    if x.cols() != d {
        return shape_err("head_forward input", x.shape(), head.w_q.shape());
    }
    if let Some(valid) = opts.valid {
        if valid.len() != n {
            return Err(Error::Input(format!("validity mask has {} entries for {n} positions", valid.len())));
        }
    }
    let is_valid = |i: usize| opts.valid.is_none_or(|v| v[i]);
    let mut counters = OpCounters::default();

    let q = x.matmul(&head.w_q)?;
    let k = x.matmul(&head.w_k)?;
    let v = x.matmul(&head.w_v)?;

    let mlp_q = mlp_forward(head, &q)?;
    let mlp_k = mlp_forward(head, &k)?;
    let q_hat = memberships(&mlp_q.output, &head.clusters, opts.valid)?;
    let k_hat = memberships(&mlp_k.output, &head.clusters, opts.valid)?;
    counters.membership_macs = 2 * (2 * n * dh * dh + n * dh * kc) as u64;
    let s_hat = softmax_all(&head.clusters.matmul_t(&head.clusters)?);
    counters.block_macs = (kc * kc * dh) as u64;

    let mask = match opts.injected_mask {
        Some(m) => {
            if (m.n_q(), m.n_k()) != (n, n) {
                return Err(Error::Shape { op: "injected mask", lhs: (m.n_q(), m.n_k()), rhs: (n, n) });
            }
            m.clone()
        }
        None => {
            let base = SbmParams { y: q_hat.clone(), b: s_hat.clone(), z: k_hat.clone() };
            let params = if opts.training && head.exploration > 0.0 {
                let mut aug = with_exploration(&base, head.exploration)?;
                if let Some(valid) = opts.valid {
                    for (r, &ok) in valid.iter().enumerate() {
                        if !ok {
                            aug.y.row_mut(r).fill(0.0);
                            aug.z.row_mut(r).fill(0.0);
                        }
                    }
                }
                aug
            } else {
                base
            };
            let (mask, stats) = sample_mask_with_stats(&params, rng)?;
            counters.sampling_ops = stats.ops;
            mask
        }
    };
    let mask = if head.self_loops { add_self_loops(&mask)? } else { mask };
    let mask = if opts.valid.is_some() { mask.retain(|i, j| is_valid(i) && is_valid(j)) } else { mask };
    let m = mask.num_edges();

    let edge_prob = if opts.inference_only {
        Vec::new()
    } else {
        let qs = q_hat.matmul(&s_hat)?;
        mask.edges().map(|(i, j)| dot(qs.row(i), k_hat.row(j))).collect::<Vec<_>>()
    };
    if let Some(anchor) = opts.ste_anchor {
        if anchor.len() != m || edge_prob.len() != m {
            return Err(Error::Consistency(format!("STE anchor has {} entries for {m} edges", anchor.len())));
        }
    }

    let scale = 1.0 / (dh as f64).sqrt();
    let mut edge_logits = Vec::with_capacity(m);
    for (e, (i, j)) in mask.edges().enumerate() {
        let mut a = dot(q.row(i), k.row(j)) * scale;
        if let Some(anchor) = opts.ste_anchor {
            a *= 1.0 + edge_prob[e].min(1.0) - anchor[e];
        }
        edge_logits.push(a);
    }
    counters.dot_products = m as u64;
    counters.dot_product_macs = (m * dh) as u64;

    let mut edge_weights = edge_logits.clone();
    for i in 0..n {
        let r = mask.row_range(i);
        let row = &mut edge_weights[r];
        if row.is_empty() {
            continue;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for w in row.iter_mut() {
            *w = (*w - max).exp();
            sum += *w;
        }
        for w in row.iter_mut() {
            *w /= sum;
        }
    }
    counters.softmax_ops = 5 * m as u64;

    let edge_dropout = if opts.training && opts.attn_dropout > 0.0 {
        let keep = 1.0 - opts.attn_dropout;
        Some((0..m).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect::<Vec<_>>())
    } else {
        None
    };

    let mut output = Matrix::zeros(n, dh);
    let cols = mask.cols();
    for i in 0..n {
        let out_row = output.row_mut(i);
        for e in mask.row_range(i) {
            let w = edge_weights[e] * edge_dropout.as_ref().map_or(1.0, |d| d[e]);
            axpy(w, v.row(cols[e] as usize), out_row);
        }
    }
    counters.pooling_macs = (m * dh) as u64;

    let n_valid = opts.valid.map_or(n, |v| v.iter().filter(|&&b| b).count());
    let pair_count = n_valid * n_valid;
    let density = if pair_count == 0 { 0.0 } else { m as f64 / pair_count as f64 };

    counters.peak_live_floats = (edge_logits.len()
        + edge_weights.len()
        + mlp_q.output.len()
        + mlp_k.output.len()
        + q_hat.len()
        + k_hat.len()
        + head.clusters.len()
        + s_hat.len()
        + head.mlp_w1.len()
        + head.mlp_w2.len()
        + head.mlp_b1.len()
        + head.mlp_b2.len()) as u64;

    Ok(HeadForwardTrace {
        input: x.clone(),
        q,
        k,
        v,
        mlp_q,
        mlp_k,
        q_hat,
        k_hat,
        s_hat,
        mask,
        edge_prob,
        edge_logits,
        edge_weights,
        edge_dropout,
        output,
        density,
        pair_count,
        valid: opts.valid.map(<[bool]>::to_vec),
        counters: opts.count_ops.then_some(counters),
    })
}
