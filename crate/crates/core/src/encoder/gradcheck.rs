use super::backward::model_backward;
use super::forward::{model_forward, ForwardContext, FrozenMasks, MaskPlan};
use super::{EncoderModel, ModelOutput, Pooling};
use crate::duplicate_task::{LabeledBatch, PAD_TOKEN};
use crate::error::Result;
use crate::numerics::{bce_loss, finite_diff_check, GradCheckReport, Matrix};
use crate::rng::purpose;

/// Per-parameter finite-difference reports for a whole model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradCheck {
    pub reports: Vec<(String, GradCheckReport)>,
    pub passed: bool,
    pub max_rel_error: f64,
    /// Smallest |pre-activation| over every ReLU (head MLPs and FFNs) at the
    /// evaluation point. Central differences are only meaningful when this is
    /// well above the step `h` times the input scale.
    pub relu_margin: f64,
}

impl ModelGradCheck {
    pub fn failing(&self) -> impl Iterator<Item = &str> {
        self.reports.iter().filter(|(_, r)| !r.passed).map(|(n, _)| n.as_str())
    }
}

/// Checks every parameter of `model` by central differences on one batch.
///
/// Masks are sampled once (dropout and exploration off) and then frozen
/// together with their edge probabilities as straight-through anchors, so
/// the checked loss is
/// `BCE + λ · mean_examples[(1/H) Σ_heads Σ_edges pₑ / pairs]`
/// with each edge logit scaled by `1 + pₑ − p̄ₑ`. Its gradient at the
/// evaluation point is exactly the straight-through gradient.
pub fn gradcheck_model(model: &EncoderModel, batch: &LabeledBatch, seed: u64, h: f64, tol: f64) -> Result<ModelGradCheck> {
    let lambda = model.config.density_weight;
    let sample_ctx = ForwardContext {
        seed,
        step: 0,
        training: false,
        plan: MaskPlan::Sample,
        sample_purpose: purpose::SAMPLE,
        inference_only: false,
    };
    let sampled = model_forward(model, &batch.tokens, &sample_ctx)?;
    let frozen = FrozenMasks::from_output(&sampled, true);
    let ctx = sample_ctx.with_plan(MaskPlan::Frozen(&frozen));
    let per_token = model.config.pooling == Pooling::None;
    let mask = (per_token && batch.tokens.iter().flatten().any(|&t| t == PAD_TOKEN)).then(|| {
        Matrix::from_fn(batch.len(), batch.seq_len(), |r, c| f64::from(u8::from(batch.tokens[r][c] != PAD_TOKEN)))
    });

    let loss = |m: &EncoderModel| -> Result<(f64, Matrix, ModelOutput)> {
        let out = model_forward(m, &batch.tokens, &ctx)?;
        let (bce, dlogits) = bce_loss(&out.logits(), &batch.targets, mask.as_ref())?;
        let surrogate =
            out.examples.iter().map(|e| e.surrogate_density()).sum::<f64>() / out.examples.len() as f64;
        Ok((bce + lambda * surrogate, dlogits, out))
    };
    let (_, dlogits, out) = loss(model)?;
    let relu_margin = out
        .examples
        .iter()
        .flat_map(|e| &e.layers)
        .flat_map(|l| {
            let heads = l.traces.iter().flat_map(|t| t.mlp_q.hidden_pre.data().iter().chain(t.mlp_k.hidden_pre.data()));
            heads.chain(l.ffn_pre.data())
        })
        .fold(f64::INFINITY, |m, v| m.min(v.abs()));
    let grads = model_backward(model, &out, &dlogits, lambda)?;

    let mut reports = Vec::new();
    for (i, (name, analytic)) in grads.named().into_iter().enumerate() {
        let f = |p: &Matrix| {
            let mut probe = model.clone();
            *probe.params_mut()[i] = p.clone();
            loss(&probe).map_or(f64::NAN, |r| r.0)
        };
        reports.push((name, finite_diff_check(f, model.params()[i], analytic, h, tol)));
    }
    let passed = reports.iter().all(|(_, r)| r.passed);
    let max_rel_error = reports.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    Ok(ModelGradCheck { reports, passed, max_rel_error, relu_margin })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 6,
            clusters: 2,
            vocab_size: 7,
            max_seq_len: 6,
            density_weight: 0.3,
            self_loops: true,
            seed: 12,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn two_layer_model_with_padding() {
        let m = EncoderModel::new(cfg()).unwrap();
        let batch = LabeledBatch::from_sequences(vec![vec![1, 2, 3, 2, 5, 0], vec![6, 6, 1, 4, 0, 0]]).unwrap();
        let report = gradcheck_model(&m, &batch, 2, 1e-5, 1e-4).unwrap();
        assert!(report.relu_margin > 1e-4);
        assert!(report.passed, "{:#?}", report.reports.iter().filter(|r| !r.1.passed).map(|r| (&r.0, r.1.max_rel_error, r.1.failures.first())).collect::<Vec<_>>());
    }

    #[test]
    fn mean_pooling_classifier() {
        let m = EncoderModel::new(ModelConfig { pooling: Pooling::Mean, n_layers: 1, ..cfg() }).unwrap();
        let mut batch = LabeledBatch::from_sequences(vec![vec![1, 2, 3, 4, 5, 6], vec![3, 3, 1, 0, 0, 0]]).unwrap();
        batch.targets = Matrix::from_rows(&[[0.0], [1.0]]);
        let report = gradcheck_model(&m, &batch, 5, 1e-5, 1e-4).unwrap();
        assert!(report.passed, "{:#?}", report.reports.iter().filter(|r| !r.1.passed).map(|r| (&r.0, r.1.max_rel_error, r.1.failures.first())).collect::<Vec<_>>());
    }
}
