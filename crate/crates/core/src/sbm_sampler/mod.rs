//! Linear-time sampling of binary bipartite masks from a stochastic block
//! model `SBM(Y, B, Z)`.
//!
//! The sampler draws a Poisson multigraph whose expected edge multiplicity for
//! the pair `(i, j)` is `λᵢⱼ = Yᵢ B Zⱼᵀ`, then collapses repeated edges. The
//! presence probability of a pair is therefore `1 − exp(−λᵢⱼ)`, which matches
//! `λᵢⱼ` only to first order. Work is `O(m + (n_q + n_k)·k + k²)` for `m`
//! sampled edges and never touches an `n_q × n_k` array.

mod alias;
mod mask;
mod poisson;

pub use alias::AliasTable;
pub use mask::EdgeMask;
pub use poisson::sample_poisson;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{dot, Matrix};

/// Node memberships `Y` (`n_q × k`), `Z` (`n_k × k`) and block matrix `B`
/// (`k × k`), all nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct SbmParams {
    pub y: Matrix,
    pub b: Matrix,
    pub z: Matrix,
}

impl SbmParams {
    pub fn new(y: Matrix, b: Matrix, z: Matrix) -> Result<Self> {
        let params = Self { y, b, z };
        params.validate()?;
        Ok(params)
    }

    fn validate(&self) -> Result<()> {
        let k = self.b.rows();
        if self.b.cols() != k {
            return shape_err("sbm block matrix", self.b.shape(), (k, k));
        }
        if self.y.cols() != k {
            return shape_err("sbm query memberships", self.y.shape(), self.b.shape());
        }
        if self.z.cols() != k {
            return shape_err("sbm key memberships", self.z.shape(), self.b.shape());
        }
        for (name, m) in [("Y", &self.y), ("B", &self.b), ("Z", &self.z)] {
            if let Some(v) = m.data().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(Error::Domain(format!("SBM {name} has entry {v}; entries must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn n_q(&self) -> usize {
        self.y.rows()
    }

    pub fn n_k(&self) -> usize {
        self.z.rows()
    }

    pub fn num_clusters(&self) -> usize {
        self.b.rows()
    }

    /// `λᵢⱼ = Yᵢ B Zⱼᵀ`.
    pub fn intensity(&self, i: usize, j: usize) -> f64 {
        let k = self.num_clusters();
        let yi = self.y.row(i);
        let zj = self.z.row(j);
        (0..k).map(|u| yi[u] * dot(self.b.row(u), zj)).sum()
    }

    /// Dense `Y B Zᵀ`; quadratic, for inspection and small fixtures.
    pub fn expected_dense(&self) -> Matrix {
        let yb = self.y.matmul(&self.b).expect("validated shapes");
        yb.matmul_t(&self.z).expect("validated shapes")
    }
}

/// Column-normalized form used by the sampler.
#[derive(Debug, Clone)]
pub struct NormalizedSbm {
    /// `Y` with every nonempty column scaled to sum 1.
    pub y_bar: Matrix,
    /// `Z` with every nonempty column scaled to sum 1.
    pub z_bar: Matrix,
    /// `B̄ᵤᵥ = colsum_Y(u) · Bᵤᵥ · colsum_Z(v)`.
    pub b_bar: Matrix,
    /// `Σᵢⱼ (Y B Zᵀ)ᵢⱼ = Σᵤᵥ B̄ᵤᵥ`.
    pub total_intensity: f64,
    pub empty_y_clusters: Vec<bool>,
    pub empty_z_clusters: Vec<bool>,
}

fn column_normalize(m: &Matrix) -> (Matrix, Vec<f64>) {
    let sums = m.col_sums().into_vec();
    let mut out = m.clone();
    for r in 0..out.rows() {
        for (v, &s) in out.row_mut(r).iter_mut().zip(&sums) {
            *v = if s > 0.0 { *v / s } else { 0.0 };
        }
    }
    (out, sums)
}

pub fn normalize(params: &SbmParams) -> Result<NormalizedSbm> {
    params.validate()?;
    let (y_bar, y_sums) = column_normalize(&params.y);
    let (z_bar, z_sums) = column_normalize(&params.z);
    let k = params.num_clusters();
    let b_bar = Matrix::from_fn(k, k, |u, v| y_sums[u] * params.b[(u, v)] * z_sums[v]);
    let total_intensity = b_bar.sum();
    Ok(NormalizedSbm {
        y_bar,
        z_bar,
        b_bar,
        total_intensity,
        empty_y_clusters: y_sums.iter().map(|&s| s <= 0.0).collect(),
        empty_z_clusters: z_sums.iter().map(|&s| s <= 0.0).collect(),
    })
}

/// Work counters of one sampling call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SampleStats {
    /// Edge draws before collapsing duplicates (the Poisson count).
    pub raw_edges: u64,
    /// Elementary operations: normalization, alias-table construction, three
    /// categorical draws per raw edge and the row bucketing pass.
    pub ops: u64,
}

/// Samples a mask; see the module docs for the law.
pub fn sample_mask<R: Rng + ?Sized>(params: &SbmParams, rng: &mut R) -> Result<EdgeMask> {
    sample_mask_with_stats(params, rng).map(|(m, _)| m)
}

pub fn sample_mask_with_stats<R: Rng + ?Sized>(params: &SbmParams, rng: &mut R) -> Result<(EdgeMask, SampleStats)> {
    let norm = normalize(params)?;
    let (n_q, n_k, k) = (params.n_q(), params.n_k(), params.num_clusters());
    let mut stats = SampleStats { raw_edges: 0, ops: ((n_q + n_k) * k + k * k) as u64 };
    if !(norm.total_intensity > 0.0) {
        return Ok((EdgeMask::empty(n_q, n_k), stats));
    }

    let pair_table = AliasTable::new(norm.b_bar.data())?;
    stats.ops += (k * k) as u64;
    let live_rows: Vec<bool> = (0..k).map(|u| norm.b_bar.row(u).iter().any(|&w| w > 0.0)).collect();
    let live_cols: Vec<bool> = (0..k).map(|v| (0..k).any(|u| norm.b_bar[(u, v)] > 0.0)).collect();
    let y_tables = column_tables(&norm.y_bar, &live_rows, &mut stats)?;
    let z_tables = column_tables(&norm.z_bar, &live_cols, &mut stats)?;

    let m = sample_poisson(norm.total_intensity, rng);
    stats.raw_edges = m;
    let mut pairs = Vec::with_capacity(m as usize);
    for _ in 0..m {
        let uv = pair_table.sample(rng);
        let (u, v) = (uv / k, uv % k);
        let (Some(yt), Some(zt)) = (&y_tables[u], &z_tables[v]) else {
            return Err(Error::Consistency(format!("cluster pair ({u}, {v}) drawn with zero weight")));
        };
        pairs.push((yt.sample(rng) as u32, zt.sample(rng) as u32));
    }
    stats.ops += 3 * m + m + n_q as u64;
    Ok((EdgeMask::from_raw_pairs(n_q, n_k, &pairs), stats))
}

fn column_tables(bar: &Matrix, live: &[bool], stats: &mut SampleStats) -> Result<Vec<Option<AliasTable>>> {
    let mut column = vec![0.0; bar.rows()];
    (0..bar.cols())
        .map(|c| {
            if !live[c] {
                return Ok(None);
            }
            for (r, slot) in column.iter_mut().enumerate() {
                *slot = bar[(r, c)];
            }
            stats.ops += bar.rows() as u64;
            AliasTable::new(&column).map(Some)
        })
        .collect()
}

/// Sets `Mᵢᵢ = 1` for every `i`; other edges are untouched.
pub fn add_self_loops(mask: &EdgeMask) -> Result<EdgeMask> {
    if mask.n_q() != mask.n_k() {
        return Err(Error::Domain(format!(
            "self-loops need a square mask, got {}x{}",
            mask.n_q(),
            mask.n_k()
        )));
    }
    mask.union(&EdgeMask::identity(mask.n_q()))
}

/// Adds a background cluster so every pair's intensity grows by exactly `δ`:
/// `Y` and `Z` gain a column of ones, `B` a row/column that is zero except the
/// new diagonal entry `δ`.
pub fn with_exploration(params: &SbmParams, delta: f64) -> Result<SbmParams> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Domain(format!("exploration probability {delta} outside [0, 1]")));
    }
    let k = params.num_clusters();
    let extend = |m: &Matrix| Matrix::from_fn(m.rows(), k + 1, |r, c| if c < k { m[(r, c)] } else { 1.0 });
    let b = Matrix::from_fn(k + 1, k + 1, |u, v| match (u < k, v < k) {
        (true, true) => params.b[(u, v)],
        (false, false) => delta,
        _ => 0.0,
    });
    Ok(SbmParams { y: extend(&params.y), b, z: extend(&params.z) })
}

pub fn mask_density(mask: &EdgeMask) -> f64 {
    mask.density()
}
