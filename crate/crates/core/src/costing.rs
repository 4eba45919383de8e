//! Cost model of one SBM attention head and its instrumented counterpart.
//!
//! Convention: one multiply-add counts as 2 FLOPs; sampler and softmax
//! elementary operations count as 1 FLOP each. Memory is counted in live
//! `f64` values (8 bytes each), excluding allocator overhead and the
//! `Q`/`K`/`V` projections shared with dense attention.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::sbm_attention::HeadForwardTrace;

pub const FLOP_CONVENTION: &str = "1 multiply-add = 2 FLOPs";
pub const BYTES_PER_FLOAT: u64 = 8;

/// FLOP and memory breakdown of one head forward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostReport {
    pub n: u64,
    pub m: u64,
    pub k: u64,
    pub d: u64,
    /// Shared MLP on `Q` and `K` plus the membership products with `Cᵀ`.
    pub memberships: u64,
    /// `C Cᵀ`.
    pub block_matrix: u64,
    /// Normalization, alias tables and edge draws.
    pub sampling: u64,
    /// One `d`-dimensional dot product per edge.
    pub masked_dot_products: u64,
    /// Masked softmax plus weighted value pooling.
    pub softmax_pool: u64,
    pub peak_memory_floats: u64,
    /// `m / n²` when known.
    pub observed_density: Option<f64>,
}

impl CostReport {
    pub fn masked_attention(&self) -> u64 {
        self.masked_dot_products + self.softmax_pool
    }

    pub fn total(&self) -> u64 {
        self.memberships + self.block_matrix + self.sampling + self.masked_attention()
    }

    /// `(component, flops, bytes)` rows; the byte column splits the peak
    /// memory estimate across components and sums to it.
    pub fn rows(&self) -> Vec<(&'static str, u64, u64)> {
        let (n, m, k, d) = (self.n, self.m, self.k, self.d);
        let b = BYTES_PER_FLOAT;
        let rows = vec![
            ("memberships", self.memberships, (2 * n * d + 2 * n * k + 2 * d * d + 2 * d) * b),
            ("block_matrix", self.block_matrix, (k * d + k * k) * b),
            ("sampling", self.sampling, 0),
            ("masked_dot_products", self.masked_dot_products, m * b),
            ("softmax_pool", self.softmax_pool, m * b),
        ];
        let total_bytes = self.peak_memory_floats * b;
        let mut rows = rows;
        rows.push(("total", self.total(), total_bytes));
        rows
    }
}

/// Closed-form costs for `n` tokens, `m` edges, `k` clusters and head
/// dimension `d`.
///
/// | component | FLOPs |
/// |---|---|
/// | memberships | `2·2·(2nd² + ndk)` |
/// | block matrix | `2k²d` |
/// | sampling | `4m + 4nk + 2k² + n` |
/// | masked dot products | `2md` |
/// | softmax + pool | `2md + 5m` |
///
/// Peak memory: `2m + 2nd + 2nk + kd + k² + 2d² + 2d` floats.
pub fn flops_attention(n: u64, m: u64, k: u64, d: u64) -> CostReport {
    CostReport {
        n,
        m,
        k,
        d,
        memberships: 2 * 2 * (2 * n * d * d + n * d * k),
        block_matrix: 2 * k * k * d,
        sampling: 4 * m + 4 * n * k + 2 * k * k + n,
        masked_dot_products: 2 * m * d,
        softmax_pool: 2 * m * d + 5 * m,
        peak_memory_floats: 2 * m + 2 * n * d + 2 * n * k + k * d + k * k + 2 * d * d + 2 * d,
        observed_density: None,
    }
}

/// Counted costs of one head forward run with `count_ops` enabled.
pub fn instrument_forward(trace: &HeadForwardTrace) -> Result<CostReport> {
    let c = trace.counters.ok_or_else(|| Error::Unavailable("head forward ran without op counters".into()))?;
    Ok(CostReport {
        n: trace.q.rows() as u64,
        m: trace.num_edges() as u64,
        k: trace.s_hat.rows() as u64,
        d: trace.q.cols() as u64,
        memberships: 2 * c.membership_macs,
        block_matrix: 2 * c.block_macs,
        sampling: c.sampling_ops,
        masked_dot_products: 2 * c.dot_product_macs,
        softmax_pool: c.softmax_ops + 2 * c.pooling_macs,
        peak_memory_floats: c.peak_live_floats,
        observed_density: Some(trace.density),
    })
}

pub fn cost_csv(report: &CostReport) -> String {
    let mut out = String::from("component,flops,bytes\n");
    for (name, flops, bytes) in report.rows() {
        let _ = writeln!(out, "{name},{flops},{bytes}");
    }
    out
}

/// Mean and population standard deviation of one head's density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityRow {
    pub layer: usize,
    pub head: usize,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Aggregates observations shaped `layers × heads` into one row per head.
pub fn density_report(observations: &[Vec<Vec<f64>>]) -> Result<Vec<DensityRow>> {
    let first = observations.first().ok_or_else(|| Error::Domain("density history is empty".into()))?;
    let shape: Vec<usize> = first.iter().map(Vec::len).collect();
    if observations.iter().any(|o| o.iter().map(Vec::len).ne(shape.iter().copied())) {
        return Err(Error::Input("density observations disagree on layer/head shape".into()));
    }
    let count = observations.len();
    let mut rows = Vec::new();
    for (layer, &heads) in shape.iter().enumerate() {
        for head in 0..heads {
            let values = observations.iter().map(|o| o[layer][head]);
            let mean = values.clone().sum::<f64>() / count as f64;
            let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
            rows.push(DensityRow { layer, head, mean, std: var.sqrt(), count });
        }
    }
    Ok(rows)
}

pub fn density_csv(rows: &[DensityRow]) -> String {
    let mut out = String::from("layer,head,metric,value\n");
    for r in rows {
        let _ = writeln!(out, "{},{},mean,{}", r.layer, r.head, r.mean);
        let _ = writeln!(out, "{},{},std,{}", r.layer, r.head, r.std);
    }
    out
}
