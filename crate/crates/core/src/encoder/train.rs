use std::fmt::Write as _;
use std::time::Instant;

use super::backward::{model_backward, ModelGradients};
use super::forward::{model_forward, ForwardContext, ModelOutput};
use super::EncoderModel;
use crate::costing::{density_report, flops_attention, DensityRow};
use crate::duplicate_task::{generate_batch, LabeledBatch, TaskConfig, PAD_TOKEN};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{adam_update, bce_loss, AdamState, Matrix};
use crate::rng::{purpose, substream};

/// One Adam state per parameter, in [`EncoderModel::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub states: Vec<AdamState>,
}

impl OptimizerState {
    pub fn new(model: &EncoderModel, lr: f64) -> Self {
        Self { lr, states: model.params().into_iter().map(|p| AdamState::for_param(p, lr)).collect() }
    }

    pub fn step(&mut self, model: &mut EncoderModel, grads: &ModelGradients) -> Result<()> {
        let params = model.params_mut();
        if params.len() != self.states.len() {
            return Err(Error::Consistency(format!(
                "{} optimizer states for {} parameters",
                self.states.len(),
                params.len()
            )));
        }
        for ((p, g), s) in params.into_iter().zip(grads.params()).zip(&mut self.states) {
            adam_update(p, g, s)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    /// `task_loss + λ · density_loss`.
    pub loss: f64,
    pub task_loss: f64,
    /// Mean sampled mask density over heads and examples.
    pub density_loss: f64,
    pub accuracy: f64,
    pub mean_density: f64,
    /// `[layer][head]` mean over the batch.
    pub head_density: Vec<Vec<f64>>,
    /// `[layer][head]` population std over the batch.
    pub head_density_std: Vec<Vec<f64>>,
    pub max_abs_logit: f64,
    /// Modelled attention FLOPs of this forward, summed over heads and examples.
    pub attention_flops: u64,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainMetrics {
    pub steps: Vec<StepMetrics>,
}

impl TrainMetrics {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// `step,loss,task_loss,accuracy,mean_density,flops,density_l{l}_h{h}…`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,task_loss,accuracy,mean_density,attention_flops");
        if let Some(first) = self.steps.first() {
            for (l, heads) in first.head_density.iter().enumerate() {
                for h in 0..heads.len() {
                    let _ = write!(out, ",density_l{l}_h{h}");
                }
            }
        }
        out.push('\n');
        for s in &self.steps {
            let _ = write!(
                out,
                "{},{},{},{},{},{}",
                s.step, s.loss, s.task_loss, s.accuracy, s.mean_density, s.attention_flops
            );
            for d in s.head_density.iter().flatten() {
                let _ = write!(out, ",{d}");
            }
            out.push('\n');
        }
        out
    }
}

/// Loss mask over the logits: valid tokens for per-token targets, everything
/// for pooled targets.
fn loss_mask(batch: &LabeledBatch, logits: &Matrix) -> Result<Option<Matrix>> {
    if logits.shape() != batch.targets.shape() {
        return shape_err("targets", batch.targets.shape(), logits.shape());
    }
    if logits.cols() != batch.tokens.first().map_or(0, Vec::len) {
        return Ok(None);
    }
    let any_pad = batch.tokens.iter().flatten().any(|&t| t == PAD_TOKEN);
    Ok(any_pad.then(|| {
        Matrix::from_fn(batch.len(), logits.cols(), |r, c| f64::from(u8::from(batch.tokens[r][c] != PAD_TOKEN)))
    }))
}

fn accuracy(logits: &Matrix, targets: &Matrix, mask: Option<&Matrix>) -> (usize, usize) {
    let mut correct = 0;
    let mut total = 0;
    for (i, (&x, &t)) in logits.data().iter().zip(targets.data()).enumerate() {
        if mask.is_some_and(|m| m.data()[i] == 0.0) {
            continue;
        }
        total += 1;
        correct += usize::from((x > 0.0) == (t > 0.5));
    }
    (correct, total)
}

fn attention_flops(model: &EncoderModel, output: &ModelOutput) -> u64 {
    let (k, d) = (model.config.clusters as u64, model.config.head_dim() as u64);
    output
        .examples
        .iter()
        .flat_map(|e| e.layers.iter().flat_map(|l| &l.traces))
        .map(|t| flops_attention(t.output.rows() as u64, t.num_edges() as u64, k, d).total())
        .sum()
}

/// `[layer][head]` table.
type PerHead = Vec<Vec<f64>>;

fn head_stats(densities: &[PerHead]) -> Result<(PerHead, PerHead)> {
    let rows = density_report(densities)?;
    let shape = &densities[0];
    let mut mean: Vec<Vec<f64>> = shape.iter().map(|h| vec![0.0; h.len()]).collect();
    let mut std = mean.clone();
    for r in rows {
        mean[r.layer][r.head] = r.mean;
        std[r.layer][r.head] = r.std;
    }
    Ok((mean, std))
}

fn max_abs_param(model: &EncoderModel) -> f64 {
    model.params().iter().flat_map(|p| p.data()).fold(0.0, |m, v| m.max(v.abs()))
}

/// Forward, loss, backward and one Adam update on `batch`.
///
/// Loss is the masked token-level BCE plus `λ` times the mean sampled density.
/// A non-finite loss aborts before the update with a diagnostic.
pub fn train_step(
    model: &mut EncoderModel,
    opt: &mut OptimizerState,
    batch: &LabeledBatch,
    seed: u64,
    step: u64,
) -> Result<StepMetrics> {
    let start = Instant::now();
    let lambda = model.config.density_weight;
    // With finite inputs the forward only hits a domain error when
    // activations overflowed, so it is reported as divergence.
    let output = model_forward(model, &batch.tokens, &ForwardContext::train(seed, step)).map_err(|e| match e {
        Error::Domain(msg) => Error::NonFinite {
            step,
            diagnostic: format!("forward failed ({msg}); max|param|={:e}", max_abs_param(model)),
        },
        other => other,
    })?;
    let logits = output.logits();
    let mask = loss_mask(batch, &logits)?;
    let (task_loss, dlogits) = bce_loss(&logits, &batch.targets, mask.as_ref())?;
    let density_loss = output.mean_density();
    let loss = task_loss + lambda * density_loss;
    let densities = output.densities();
    let (head_density, head_density_std) = head_stats(&densities)?;
    let max_abs_logit = output.max_abs_logit();
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            step,
            diagnostic: format!(
                "task_loss={task_loss} density={density_loss} head_density={head_density:?} max|logit|={max_abs_logit}"
            ),
        });
    }
    let grads = model_backward(model, &output, &dlogits, lambda)?;
    opt.step(model, &grads)?;
    if !model.is_finite() {
        return Err(Error::NonFinite {
            step,
            diagnostic: format!(
                "parameters left the finite range after the update (loss={loss} max|grad|={} lr={})",
                grads.max_abs(),
                opt.lr
            ),
        });
    }
    let (correct, total) = accuracy(&logits, &batch.targets, mask.as_ref());
    Ok(StepMetrics {
        step,
        loss,
        task_loss,
        density_loss,
        accuracy: correct as f64 / total.max(1) as f64,
        mean_density: density_loss,
        head_density,
        head_density_std,
        max_abs_logit,
        attention_flops: attention_flops(model, &output),
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

/// `steps` training steps on fresh duplicate-task batches drawn from the
/// `DATA` substream of `task.seed`. `on_step` sees each step's metrics and the
/// updated model; returning an error stops training.
pub fn train_loop(
    model: &mut EncoderModel,
    opt: &mut OptimizerState,
    task: &TaskConfig,
    steps: u64,
    mut on_step: impl FnMut(&StepMetrics, &EncoderModel) -> Result<()>,
) -> Result<TrainMetrics> {
    let mut metrics = TrainMetrics::default();
    for step in 0..steps {
        let batch = generate_batch(task, &mut substream(task.seed, &[purpose::DATA, step]));
        let m = train_step(model, opt, &batch, task.seed, step)?;
        on_step(&m, model)?;
        metrics.steps.push(m);
    }
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    /// Scored positions.
    pub count: usize,
    /// Per-head mean and std of density over every evaluated example.
    pub density: Vec<DensityRow>,
    pub mean_density: f64,
}

/// Loss, accuracy and density statistics with dropout and exploration off.
/// Masks come from the `EVAL_SAMPLE` substream, one step index per batch.
pub fn evaluate(model: &EncoderModel, batches: &[LabeledBatch], seed: u64) -> Result<EvalMetrics> {
    if batches.is_empty() {
        return Err(Error::Domain("evaluate needs at least one batch".into()));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let mut count = 0;
    let mut densities = Vec::new();
    for (b, batch) in batches.iter().enumerate() {
        let output = model_forward(model, &batch.tokens, &ForwardContext::eval(seed, b as u64))?;
        let logits = output.logits();
        let mask = loss_mask(batch, &logits)?;
        let (loss, _) = bce_loss(&logits, &batch.targets, mask.as_ref())?;
        let (c, t) = accuracy(&logits, &batch.targets, mask.as_ref());
        loss_sum += loss * t as f64;
        correct += c;
        count += t;
        densities.extend(output.densities());
    }
    let density = density_report(&densities)?;
    let mean_density = density.iter().map(|r| r.mean).sum::<f64>() / density.len() as f64;
    Ok(EvalMetrics {
        loss: loss_sum / count.max(1) as f64,
        accuracy: correct as f64 / count.max(1) as f64,
        count,
        density,
        mean_density,
    })
}
