//! A small post-norm Transformer encoder built on SBM attention heads, with
//! hand-written backpropagation, Adam training and f32 checkpoints.

mod backward;
mod checkpoint;
mod forward;
mod gradcheck;
mod layer_norm;
mod train;

pub use backward::{model_backward, ModelGradients};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use forward::{model_forward, ExampleCache, ForwardContext, FrozenMasks, MaskPlan, ModelOutput};
pub use gradcheck::{gradcheck_model, ModelGradCheck};
pub use train::{evaluate, train_loop, train_step, EvalMetrics, OptimizerState, StepMetrics, TrainMetrics};

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng::{purpose, substream};
use crate::sbm_attention::{AttentionHead, HEAD_PARAM_NAMES};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    /// One logit per token.
    #[default]
    None,
    /// One logit per sequence from the mean of valid positions.
    Mean,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::None => "none",
            Pooling::Mean => "mean",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Pooling::None),
            "mean" => Ok(Pooling::Mean),
            _ => Err(Error::InvalidValue { key: "pooling".into(), value: s.into() }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub clusters: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub attn_dropout: f64,
    /// Exploration probability `δ` (training only).
    pub exploration: f64,
    /// Density-regularizer weight `λ`.
    pub density_weight: f64,
    pub self_loops: bool,
    pub pooling: Pooling,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Synthetic-task setting: 1 layer, 1 head, width 32, 128 clusters,
    /// sequences of 256 tokens over `{1, …, 256}`.
    fn default() -> Self {
        Self {
            n_layers: 1,
            n_heads: 1,
            d_model: 32,
            d_ff: 32,
            clusters: 128,
            vocab_size: 257,
            max_seq_len: 256,
            dropout: 0.0,
            attn_dropout: 0.0,
            exploration: 0.01,
            density_weight: 0.0,
            self_loops: false,
            pooling: Pooling::None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("clusters", self.clusters),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidValue { key: (*name).into(), value: "0".into() });
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidValue {
                key: "n_heads".into(),
                value: format!("{} does not divide d_model={}", self.n_heads, self.d_model),
            });
        }
        for (name, rate) in [("dropout", self.dropout), ("attn_dropout", self.attn_dropout)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::InvalidValue { key: name.into(), value: rate.to_string() });
            }
        }
        if !(0.0..=1.0).contains(&self.exploration) {
            return Err(Error::InvalidValue { key: "exploration".into(), value: self.exploration.to_string() });
        }
        if !(self.density_weight.is_finite() && self.density_weight >= 0.0) {
            return Err(Error::InvalidValue { key: "density_weight".into(), value: self.density_weight.to_string() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub heads: Vec<AttentionHead>,
    pub w_o: Matrix,
    pub b_o: Matrix,
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub ffn_w1: Matrix,
    pub ffn_b1: Matrix,
    pub ffn_w2: Matrix,
    pub ffn_b2: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
}

const LAYER_PARAM_NAMES: [&str; 10] =
    ["w_o", "b_o", "ln1_gain", "ln1_bias", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "ln2_gain", "ln2_bias"];

impl EncoderLayer {
    fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let heads = (0..cfg.n_heads)
            .map(|_| AttentionHead::new_random(d, cfg.head_dim(), cfg.clusters, cfg.exploration, cfg.self_loops, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            heads,
            w_o: Matrix::random_normal(d, d, (1.0 / d as f64).sqrt(), rng),
            b_o: Matrix::zeros(1, d),
            ln1_gain: Matrix::filled(1, d, 1.0),
            ln1_bias: Matrix::zeros(1, d),
            ffn_w1: Matrix::random_normal(d, f, (1.0 / d as f64).sqrt(), rng),
            ffn_b1: Matrix::zeros(1, f),
            ffn_w2: Matrix::random_normal(f, d, (1.0 / f as f64).sqrt(), rng),
            ffn_b2: Matrix::zeros(1, d),
            ln2_gain: Matrix::filled(1, d, 1.0),
            ln2_bias: Matrix::zeros(1, d),
        })
    }

    fn own_params(&self) -> [&Matrix; 10] {
        [
            &self.w_o,
            &self.b_o,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ffn_w1,
            &self.ffn_b1,
            &self.ffn_w2,
            &self.ffn_b2,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: ModelConfig,
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub layers: Vec<EncoderLayer>,
    pub classifier_w: Matrix,
    pub classifier_b: Matrix,
}

impl EncoderModel {
    /// Fresh model; all initial values come from the `INIT` substream of
    /// `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(config.seed, &[purpose::INIT]);
        let d = config.d_model;
        let token_embedding = Matrix::random_normal(config.vocab_size, d, 1.0, &mut rng);
        let position_embedding = Matrix::random_normal(config.max_seq_len, d, 1.0, &mut rng);
        let layers = (0..config.n_layers).map(|_| EncoderLayer::new(&config, &mut rng)).collect::<Result<_>>()?;
        let classifier_w = Matrix::random_normal(d, 1, (1.0 / d as f64).sqrt(), &mut rng);
        Ok(Self { config, token_embedding, position_embedding, layers, classifier_w, classifier_b: Matrix::zeros(1, 1) })
    }

    /// Same shapes as `self` with every parameter zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.fill(0.0);
        }
        z
    }

    /// Parameters in a fixed order: embeddings, then per layer the heads
    /// followed by the layer's own weights, then the classifier.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for layer in &self.layers {
            for head in &layer.heads {
                out.extend(head.params());
            }
            out.extend(layer.own_params());
        }
        out.push(&self.classifier_w);
        out.push(&self.classifier_b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            let EncoderLayer {
                heads,
                w_o,
                b_o,
                ln1_gain,
                ln1_bias,
                ffn_w1,
                ffn_b1,
                ffn_w2,
                ffn_b2,
                ln2_gain,
                ln2_bias,
            } = layer;
            for head in heads.iter_mut() {
                out.extend(head.params_mut());
            }
            out.extend([w_o, b_o, ln1_gain, ln1_bias, ffn_w1, ffn_b1, ffn_w2, ffn_b2, ln2_gain, ln2_bias]);
        }
        out.push(&mut self.classifier_w);
        out.push(&mut self.classifier_b);
        out
    }

    /// Names matching [`EncoderModel::params`] order.
    pub fn param_names(&self) -> Vec<String> {
        let mut out = vec!["token_embedding".to_string(), "position_embedding".to_string()];
        for (l, layer) in self.layers.iter().enumerate() {
            for h in 0..layer.heads.len() {
                out.extend(HEAD_PARAM_NAMES.iter().map(|p| format!("layer{l}.head{h}.{p}")));
            }
            out.extend(LAYER_PARAM_NAMES.iter().map(|p| format!("layer{l}.{p}")));
        }
        out.push("classifier_w".into());
        out.push("classifier_b".into());
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 12,
            clusters: 3,
            vocab_size: 7,
            max_seq_len: 6,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn names_align_with_params() {
        let mut m = EncoderModel::new(tiny()).unwrap();
        let names = m.param_names();
        assert_eq!(names.len(), m.params().len());
        assert_eq!(names.len(), m.params_mut().len());
        assert_eq!(names.len(), 2 + 2 * (2 * 8 + 10) + 2);
        assert_eq!(names[2], "layer0.head0.w_q");
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }

    #[test]
    fn init_is_seeded() {
        let a = EncoderModel::new(tiny()).unwrap();
        let b = EncoderModel::new(tiny()).unwrap();
        assert_eq!(a, b);
        let c = EncoderModel::new(ModelConfig { seed: 1, ..tiny() }).unwrap();
        assert_ne!(a, c);
        assert!(a.zeros_like().params().iter().all(|p| p.max_abs() == 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { n_heads: 3, ..tiny() }.validate().is_err());
        assert!(ModelConfig { dropout: 1.0, ..tiny() }.validate().is_err());
        assert!(ModelConfig { clusters: 0, ..tiny() }.validate().is_err());
        assert!(ModelConfig { density_weight: -1.0, ..tiny() }.validate().is_err());
        assert_eq!("mean".parse::<Pooling>().unwrap(), Pooling::Mean);
        assert!("max".parse::<Pooling>().is_err());
    }
}
