//! One attention head whose mask is sampled from a learned SBM.
//!
//! Forward: `Q, K, V = X W^Q, X W^K, X W^V`; a shared two-layer MLP maps `Q`
//! and `K` to node embeddings; memberships are `Q̂ = σ(MLP(Q) Cᵀ)`,
//! `K̂ = σ(MLP(K) Cᵀ)` and the block matrix is `Ŝ = softmax_all(C Cᵀ)`. A mask
//! is drawn from `SBM(Q̂, Ŝ, K̂)` and attention logits are computed only on
//! its edges, followed by a per-row softmax over each row's edges.
//!
//! Backward: ordinary backprop through pooling, softmax and the edge dot
//! products, plus a straight-through branch that treats each present edge as
//! if its logit had been multiplied by the continuous mask value
//! `pᵢⱼ = Q̂ᵢ Ŝ K̂ⱼᵀ`, giving `∂L/∂pᵢⱼ = ∂L/∂Aᵢⱼ · Aᵢⱼ` on present edges and 0
//! elsewhere.

mod backward;
mod forward;

pub use backward::{head_backward, HeadGradients};
pub use forward::{full_attention, head_forward, infer_sbm, HeadForwardOptions, HeadForwardTrace, MlpCache, OpCounters};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::sbm_sampler::EdgeMask;

/// Learnable parameters of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    /// `d × d_h` projections.
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    /// Shared node-embedding MLP, `d_h → d_h → d_h` with ReLU in between.
    pub mlp_w1: Matrix,
    pub mlp_b1: Matrix,
    pub mlp_w2: Matrix,
    pub mlp_b2: Matrix,
    /// `k × d_h` cluster embeddings.
    pub clusters: Matrix,
    /// Background edge intensity added while training.
    pub exploration: f64,
    /// Force `Mᵢᵢ = 1` after sampling.
    pub self_loops: bool,
}

pub const HEAD_PARAM_NAMES: [&str; 8] = ["w_q", "w_k", "w_v", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "clusters"];

impl AttentionHead {
    /// Fresh head: projections `N(0, 0.02²)`, MLP weights and cluster
    /// embeddings Kaiming-normal (`std = √(2/d_h)`), MLP biases zero.
    pub fn new_random<R: Rng + ?Sized>(
        d_model: usize,
        d_head: usize,
        clusters: usize,
        exploration: f64,
        self_loops: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if d_model == 0 || d_head == 0 || clusters == 0 {
            return Err(Error::Domain(format!(
                "head dimensions must be positive (d={d_model}, d_h={d_head}, k={clusters})"
            )));
        }
        if !(0.0..=1.0).contains(&exploration) {
            return Err(Error::Domain(format!("exploration {exploration} outside [0, 1]")));
        }
        let kaiming = (2.0 / d_head as f64).sqrt();
        Ok(Self {
            w_q: Matrix::random_normal(d_model, d_head, 0.02, rng),
            w_k: Matrix::random_normal(d_model, d_head, 0.02, rng),
            w_v: Matrix::random_normal(d_model, d_head, 0.02, rng),
            mlp_w1: Matrix::random_normal(d_head, d_head, kaiming, rng),
            mlp_b1: Matrix::zeros(1, d_head),
            mlp_w2: Matrix::random_normal(d_head, d_head, kaiming, rng),
            mlp_b2: Matrix::zeros(1, d_head),
            clusters: Matrix::random_normal(clusters, d_head, kaiming, rng),
            exploration,
            self_loops,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.w_q.cols()
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.rows()
    }

    /// Parameters in [`HEAD_PARAM_NAMES`] order.
    pub fn params(&self) -> [&Matrix; 8] {
        [&self.w_q, &self.w_k, &self.w_v, &self.mlp_w1, &self.mlp_b1, &self.mlp_w2, &self.mlp_b2, &self.clusters]
    }

    pub fn params_mut(&mut self) -> [&mut Matrix; 8] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
            &mut self.clusters,
        ]
    }

    pub(crate) fn check_shapes(&self) -> Result<()> {
        let (d, dh, k) = (self.d_model(), self.head_dim(), self.num_clusters());
        let expected = [(d, dh), (d, dh), (d, dh), (dh, dh), (1, dh), (dh, dh), (1, dh), (k, dh)];
        for ((name, m), want) in HEAD_PARAM_NAMES.iter().zip(self.params()).zip(expected) {
            if m.shape() != want {
                return Err(Error::Consistency(format!("head parameter {name} is {:?}, expected {want:?}", m.shape())));
            }
        }
        Ok(())
    }
}

/// Mean of per-head mask densities (the sparsity regularizer `L_s`).
pub fn density_loss(masks: &[&EdgeMask]) -> Result<f64> {
    if masks.is_empty() {
        return Err(Error::Domain("density loss needs at least one mask".into()));
    }
    Ok(masks.iter().map(|m| m.density()).sum::<f64>() / masks.len() as f64)
}
