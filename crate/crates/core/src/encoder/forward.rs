use rand::Rng;
use rayon::prelude::*;

use super::layer_norm::{layer_norm, LayerNormCache};
use super::{EncoderModel, Pooling};
use crate::duplicate_task::PAD_TOKEN;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng::{purpose, substream, StreamRng};
use crate::sbm_attention::{head_forward, HeadForwardOptions, HeadForwardTrace};
use crate::sbm_sampler::EdgeMask;

/// Where each head's mask comes from.
#[derive(Debug, Clone, Copy, Default)]
pub enum MaskPlan<'a> {
    #[default]
    Sample,
    /// All-ones masks: every head computes full attention.
    Full,
    /// Each token attends only to itself.
    Identity,
    /// Replay masks (and optionally STE anchors) from an earlier forward.
    Frozen(&'a FrozenMasks),
}

/// Masks indexed `[example][layer][head]`, with optional per-edge anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenMasks {
    pub masks: Vec<Vec<Vec<EdgeMask>>>,
    pub anchors: Option<Vec<Vec<Vec<Vec<f64>>>>>,
}

impl FrozenMasks {
    pub fn from_output(output: &ModelOutput, with_anchors: bool) -> Self {
        let masks = output
            .examples
            .iter()
            .map(|ex| ex.layers.iter().map(|l| l.traces.iter().map(|t| t.mask.clone()).collect()).collect())
            .collect();
        let anchors = with_anchors.then(|| {
            output
                .examples
                .iter()
                .map(|ex| ex.layers.iter().map(|l| l.traces.iter().map(|t| t.edge_prob.clone()).collect()).collect())
                .collect()
        });
        Self { masks, anchors }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardContext<'a> {
    pub seed: u64,
    pub step: u64,
    /// Enables dropout, attention dropout and exploration.
    pub training: bool,
    pub plan: MaskPlan<'a>,
    /// Substream purpose for mask sampling.
    pub sample_purpose: u64,
    /// Skip bookkeeping only needed by the backward pass.
    pub inference_only: bool,
}

impl<'a> ForwardContext<'a> {
    pub fn train(seed: u64, step: u64) -> Self {
        Self { seed, step, training: true, plan: MaskPlan::Sample, sample_purpose: purpose::SAMPLE, inference_only: false }
    }

    pub fn eval(seed: u64, step: u64) -> Self {
        Self {
            seed,
            step,
            training: false,
            plan: MaskPlan::Sample,
            sample_purpose: purpose::EVAL_SAMPLE,
            inference_only: true,
        }
    }

    pub fn with_plan(self, plan: MaskPlan<'a>) -> Self {
        Self { plan, ..self }
    }
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    pub input: Matrix,
    pub traces: Vec<HeadForwardTrace>,
    /// Concatenated head outputs, `n × d`.
    pub attention: Matrix,
    pub(crate) proj_dropout: Option<Matrix>,
    pub(crate) ln1: LayerNormCache,
    pub after_attention: Matrix,
    pub(crate) ffn_pre: Matrix,
    pub(crate) ffn_dropout: Option<Matrix>,
    pub(crate) ln2: LayerNormCache,
    pub output: Matrix,
}

#[derive(Debug, Clone)]
pub struct ExampleCache {
    pub tokens: Vec<u32>,
    pub valid: Vec<bool>,
    pub(crate) embed_dropout: Option<Matrix>,
    pub layers: Vec<LayerCache>,
    /// `1 × d` mean of valid final hidden rows (mean pooling only).
    pub pooled: Option<Matrix>,
    /// `n × 1` per-token logits, or `1 × 1` under mean pooling.
    pub logits: Matrix,
}

impl ExampleCache {
    pub fn final_hidden(&self) -> &Matrix {
        &self.layers.last().expect("at least one layer").output
    }

    /// Mask density per `[layer][head]`.
    pub fn densities(&self) -> Vec<Vec<f64>> {
        self.layers.iter().map(|l| l.traces.iter().map(|t| t.density).collect()).collect()
    }

    pub fn mean_density(&self) -> f64 {
        let d = self.densities();
        let count: usize = d.iter().map(Vec::len).sum();
        d.iter().flatten().sum::<f64>() / count as f64
    }

    /// `(1/H) Σ_heads Σ_edges pₑ / pairs`: the continuous stand-in for the
    /// mean density whose gradient is the density-regularizer gradient.
    pub fn surrogate_density(&self) -> f64 {
        let heads: usize = self.layers.iter().map(|l| l.traces.len()).sum();
        let total: f64 = self
            .layers
            .iter()
            .flat_map(|l| &l.traces)
            .filter(|t| t.pair_count > 0)
            .map(|t| t.edge_prob.iter().sum::<f64>() / t.pair_count as f64)
            .sum();
        total / heads as f64
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub examples: Vec<ExampleCache>,
}

impl ModelOutput {
    /// `batch × n` (per-token) or `batch × 1` (pooled).
    pub fn logits(&self) -> Matrix {
        let cols = self.examples.first().map_or(0, |e| e.logits.rows());
        Matrix::from_fn(self.examples.len(), cols, |r, c| self.examples[r].logits[(c, 0)])
    }

    /// Per-example densities `[example][layer][head]`.
    pub fn densities(&self) -> Vec<Vec<Vec<f64>>> {
        self.examples.iter().map(ExampleCache::densities).collect()
    }

    /// Mean over examples and heads.
    pub fn mean_density(&self) -> f64 {
        self.examples.iter().map(ExampleCache::mean_density).sum::<f64>() / self.examples.len() as f64
    }

    pub fn max_abs_logit(&self) -> f64 {
        self.examples.iter().map(|e| e.logits.max_abs()).fold(0.0, f64::max)
    }
}

pub(crate) fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Matrix {
    let keep = 1.0 - rate;
    Matrix::from_fn(rows, cols, |_, _| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
}

fn apply_mask(x: &mut Matrix, mask: &Option<Matrix>) {
    if let Some(m) = mask {
        for (v, k) in x.data_mut().iter_mut().zip(m.data()) {
            *v *= k;
        }
    }
}

/// Forward pass over a batch of equal-length token sequences (0 = padding).
/// Examples run in parallel; the result does not depend on thread count.
pub fn model_forward(model: &EncoderModel, tokens: &[Vec<u32>], ctx: &ForwardContext<'_>) -> Result<ModelOutput> {
    let len = tokens.first().map_or(0, Vec::len);
    if tokens.iter().any(|s| s.len() != len) {
        return Err(Error::Input("sequences in a batch must share one length".into()));
    }
    if let MaskPlan::Frozen(f) = ctx.plan {
        if f.masks.len() != tokens.len() {
            return Err(Error::Consistency(format!("{} frozen mask sets for {} examples", f.masks.len(), tokens.len())));
        }
    }
    let examples =
        tokens.par_iter().enumerate().map(|(e, seq)| example_forward(model, seq, e, ctx)).collect::<Result<Vec<_>>>()?;
    Ok(ModelOutput { examples })
}

fn example_forward(model: &EncoderModel, tokens: &[u32], example: usize, ctx: &ForwardContext<'_>) -> Result<ExampleCache> {
    let cfg = &model.config;
    let n = tokens.len();
    if n == 0 {
        return Err(Error::Input("empty sequence".into()));
    }
    if n > cfg.max_seq_len {
        return Err(Error::Input(format!("sequence length {n} exceeds max_seq_len {}", cfg.max_seq_len)));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!("token id {t} outside vocabulary of size {}", cfg.vocab_size)));
    }
    let valid: Vec<bool> = tokens.iter().map(|&t| t != PAD_TOKEN).collect();
    let all_valid = valid.iter().all(|&v| v);
    let dropout_on = ctx.training && cfg.dropout > 0.0;
    let mut drop_rng: StreamRng = substream(ctx.seed, &[purpose::DROPOUT, ctx.step, example as u64]);

    let (d, dh) = (cfg.d_model, cfg.head_dim());
    let mut h = Matrix::from_fn(n, d, |t, c| {
        model.token_embedding[(tokens[t] as usize, c)] + model.position_embedding[(t, c)]
    });
    let embed_dropout = dropout_on.then(|| dropout_mask(n, d, cfg.dropout, &mut drop_rng));
    apply_mask(&mut h, &embed_dropout);

    let full = matches!(ctx.plan, MaskPlan::Full).then(|| EdgeMask::full(n, n));
    let identity = matches!(ctx.plan, MaskPlan::Identity).then(|| EdgeMask::identity(n));

    let mut layers = Vec::with_capacity(model.layers.len());
    for (l, layer) in model.layers.iter().enumerate() {
        let input = h;
        let mut traces = Vec::with_capacity(layer.heads.len());
        let mut attention = Matrix::zeros(n, d);
        for (hi, head) in layer.heads.iter().enumerate() {
            let (injected, anchor) = match ctx.plan {
                MaskPlan::Sample => (None, None),
                MaskPlan::Full => (full.as_ref(), None),
                MaskPlan::Identity => (identity.as_ref(), None),
                MaskPlan::Frozen(f) => (
                    Some(&f.masks[example][l][hi]),
                    f.anchors.as_ref().map(|a| a[example][l][hi].as_slice()),
                ),
            };
            let opts = HeadForwardOptions {
                training: ctx.training,
                attn_dropout: cfg.attn_dropout,
                injected_mask: injected,
                valid: (!all_valid).then_some(valid.as_slice()),
                ste_anchor: anchor,
                inference_only: ctx.inference_only,
                count_ops: false,
            };
            let mut rng = substream(ctx.seed, &[ctx.sample_purpose, ctx.step, example as u64, l as u64, hi as u64]);
            let trace = head_forward(head, &input, &mut rng, opts)?;
            for t in 0..n {
                attention.row_mut(t)[hi * dh..(hi + 1) * dh].copy_from_slice(trace.output.row(t));
            }
            traces.push(trace);
        }

        let mut proj = attention.matmul(&layer.w_o)?;
        proj.add_row_broadcast(&layer.b_o)?;
        let proj_dropout = dropout_on.then(|| dropout_mask(n, d, cfg.dropout, &mut drop_rng));
        apply_mask(&mut proj, &proj_dropout);
        let residual = input.add(&proj)?;
        let (after_attention, ln1) = layer_norm(&residual, &layer.ln1_gain, &layer.ln1_bias);

        let mut ffn_pre = after_attention.matmul(&layer.ffn_w1)?;
        ffn_pre.add_row_broadcast(&layer.ffn_b1)?;
        let mut ffn = ffn_pre.map(|v| v.max(0.0)).matmul(&layer.ffn_w2)?;
        ffn.add_row_broadcast(&layer.ffn_b2)?;
        let ffn_dropout = dropout_on.then(|| dropout_mask(n, d, cfg.dropout, &mut drop_rng));
        apply_mask(&mut ffn, &ffn_dropout);
        let residual = after_attention.add(&ffn)?;
        let (output, ln2) = layer_norm(&residual, &layer.ln2_gain, &layer.ln2_bias);

        h = output.clone();
        layers.push(LayerCache {
            input,
            traces,
            attention,
            proj_dropout,
            ln1,
            after_attention,
            ffn_pre,
            ffn_dropout,
            ln2,
            output,
        });
    }

    let (pooled, mut logits) = match cfg.pooling {
        Pooling::None => (None, h.matmul(&model.classifier_w)?),
        Pooling::Mean => {
            let count = valid.iter().filter(|&&v| v).count().max(1) as f64;
            let pooled =
                Matrix::from_fn(1, d, |_, c| (0..n).filter(|&t| valid[t]).map(|t| h[(t, c)]).sum::<f64>() / count);
            let logits = pooled.matmul(&model.classifier_w)?;
            (Some(pooled), logits)
        }
    };
    logits.add_row_broadcast(&model.classifier_b)?;

    Ok(ExampleCache { tokens: tokens.to_vec(), valid, embed_dropout, layers, pooled, logits })
}
