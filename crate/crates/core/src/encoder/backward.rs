use rayon::prelude::*;

use super::forward::{ExampleCache, ModelOutput};
use super::layer_norm::layer_norm_backward;
use super::{EncoderModel, Pooling};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{axpy, Matrix};
use crate::sbm_attention::head_backward;

/// Gradients with the same layout as the model they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub grads: EncoderModel,
}

impl ModelGradients {
    pub fn zeros(model: &EncoderModel) -> Self {
        Self { grads: model.zeros_like() }
    }

    /// In [`EncoderModel::params`] order.
    pub fn params(&self) -> Vec<&Matrix> {
        self.grads.params()
    }

    pub fn named(&self) -> Vec<(String, &Matrix)> {
        self.grads.param_names().into_iter().zip(self.grads.params()).collect()
    }

    pub fn add_assign(&mut self, other: &ModelGradients) -> Result<()> {
        for (a, b) in self.grads.params_mut().into_iter().zip(other.grads.params()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.params().iter().map(|p| p.max_abs()).fold(0.0, f64::max)
    }
}

fn mask_in_place(x: &mut Matrix, mask: &Option<Matrix>) {
    if let Some(m) = mask {
        for (v, k) in x.data_mut().iter_mut().zip(m.data()) {
            *v *= k;
        }
    }
}

/// Backward of [`super::model_forward`] for `dlogits = ∂L/∂logits` (shaped like
/// [`ModelOutput::logits`]) plus the density regularizer `λ · mean density`.
///
/// Examples are differentiated in parallel and summed in batch order.
pub fn model_backward(
    model: &EncoderModel,
    output: &ModelOutput,
    dlogits: &Matrix,
    density_weight: f64,
) -> Result<ModelGradients> {
    let batch = output.examples.len();
    let expected = output.logits().shape();
    if dlogits.shape() != expected {
        return shape_err("model_backward dlogits", dlogits.shape(), expected);
    }
    if batch == 0 {
        return Ok(ModelGradients::zeros(model));
    }
    let per_example_weight = density_weight / batch as f64;
    let parts = output
        .examples
        .par_iter()
        .enumerate()
        .map(|(e, ex)| {
            let g = Matrix::from_vec(dlogits.cols(), 1, dlogits.row(e).to_vec())?;
            example_backward(model, ex, &g, per_example_weight)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = ModelGradients::zeros(model);
    for part in &parts {
        total.add_assign(part)?;
    }
    Ok(total)
}

fn example_backward(
    model: &EncoderModel,
    ex: &ExampleCache,
    dlogits: &Matrix,
    density_weight: f64,
) -> Result<ModelGradients> {
    let cfg = &model.config;
    let n_heads_total = cfg.total_heads();
    let dh = cfg.head_dim();
    let n = ex.tokens.len();
    if ex.layers.len() != model.layers.len() {
        return Err(Error::Consistency("cache layer count differs from model".into()));
    }
    let mut out = ModelGradients::zeros(model);
    let g = &mut out.grads;

    let hidden = ex.final_hidden();
    g.classifier_b.data_mut()[0] = dlogits.sum();
    let mut dh_mat = match (cfg.pooling, &ex.pooled) {
        (Pooling::None, _) => {
            g.classifier_w = hidden.t_matmul(dlogits)?;
            dlogits.matmul_t(&model.classifier_w)?
        }
        (Pooling::Mean, Some(pooled)) => {
            g.classifier_w = pooled.t_matmul(dlogits)?;
            let dpooled = dlogits.matmul_t(&model.classifier_w)?;
            let count = ex.valid.iter().filter(|&&v| v).count().max(1) as f64;
            let mut d = Matrix::zeros(n, cfg.d_model);
            for t in (0..n).filter(|&t| ex.valid[t]) {
                axpy(1.0 / count, dpooled.row(0), d.row_mut(t));
            }
            d
        }
        (Pooling::Mean, None) => return Err(Error::Consistency("mean pooling cache has no pooled vector".into())),
    };

    for (l, (layer, cache)) in model.layers.iter().zip(&ex.layers).enumerate().rev() {
        let lg = &mut g.layers[l];

        // Second residual block: LN2(after_attention + FFN).
        let (dres2, dgain2, dbias2) = layer_norm_backward(&dh_mat, &layer.ln2_gain, &cache.ln2);
        lg.ln2_gain = dgain2;
        lg.ln2_bias = dbias2;
        let mut d_after = dres2.clone();
        let mut dffn = dres2;
        mask_in_place(&mut dffn, &cache.ffn_dropout);
        let act = cache.ffn_pre.map(|v| v.max(0.0));
        lg.ffn_w2 = act.t_matmul(&dffn)?;
        lg.ffn_b2 = dffn.col_sums();
        let mut dpre = dffn.matmul_t(&layer.ffn_w2)?;
        for (gv, &p) in dpre.data_mut().iter_mut().zip(cache.ffn_pre.data()) {
            if p <= 0.0 {
                *gv = 0.0;
            }
        }
        lg.ffn_w1 = cache.after_attention.t_matmul(&dpre)?;
        lg.ffn_b1 = dpre.col_sums();
        d_after.add_assign(&dpre.matmul_t(&layer.ffn_w1)?)?;

        // First residual block: LN1(input + attention W_O).
        let (dres1, dgain1, dbias1) = layer_norm_backward(&d_after, &layer.ln1_gain, &cache.ln1);
        lg.ln1_gain = dgain1;
        lg.ln1_bias = dbias1;
        let mut d_input = dres1.clone();
        let mut dproj = dres1;
        mask_in_place(&mut dproj, &cache.proj_dropout);
        lg.w_o = cache.attention.t_matmul(&dproj)?;
        lg.b_o = dproj.col_sums();
        let d_attention = dproj.matmul_t(&layer.w_o)?;

        for (hi, (head, trace)) in layer.heads.iter().zip(&cache.traces).enumerate() {
            let grad_out = Matrix::from_fn(n, dh, |t, c| d_attention[(t, hi * dh + c)]);
            let hg = head_backward(trace, head, &grad_out, density_weight, n_heads_total)?;
            d_input.add_assign(&hg.input)?;
            for (dst, src) in lg.heads[hi].params_mut().into_iter().zip(hg.params()) {
                dst.add_assign(src)?;
            }
        }
        dh_mat = d_input;
    }

    mask_in_place(&mut dh_mat, &ex.embed_dropout);
    for (t, &tok) in ex.tokens.iter().enumerate() {
        axpy(1.0, dh_mat.row(t), g.token_embedding.row_mut(tok as usize));
        axpy(1.0, dh_mat.row(t), g.position_embedding.row_mut(t));
    }
    Ok(out)
}
