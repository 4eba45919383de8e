use std::fmt::Write as _;
use std::ops::Range;

use crate::error::{Error, Result};

/// Binary bipartite query→key adjacency stored as a deduplicated, row-sorted
/// edge list (CSR). Edge ids `0..num_edges()` follow ascending `(i, j)` order
/// and index every per-edge array produced by the attention head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMask {
    n_q: usize,
    n_k: usize,
    row_offsets: Vec<usize>,
    cols: Vec<u32>,
}

impl EdgeMask {
    pub fn empty(n_q: usize, n_k: usize) -> Self {
        Self { n_q, n_k, row_offsets: vec![0; n_q + 1], cols: Vec::new() }
    }

    pub fn full(n_q: usize, n_k: usize) -> Self {
        let cols = (0..n_q).flat_map(|_| 0..n_k as u32).collect();
        let row_offsets = (0..=n_q).map(|i| i * n_k).collect();
        Self { n_q, n_k, row_offsets, cols }
    }

    pub fn identity(n: usize) -> Self {
        Self { n_q: n, n_k: n, row_offsets: (0..=n).collect(), cols: (0..n as u32).collect() }
    }

    /// Builds a mask from arbitrary (possibly repeated, unordered) pairs.
    pub fn from_edges<I>(n_q: usize, n_k: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut pairs = Vec::new();
        for (i, j) in edges {
            if i >= n_q || j >= n_k {
                return Err(Error::Domain(format!("edge ({i}, {j}) outside {n_q}x{n_k} mask")));
            }
            pairs.push((i as u32, j as u32));
        }
        Ok(Self::from_raw_pairs(n_q, n_k, &pairs))
    }

    /// Bucket pairs by row in O(m + n_q), then sort and dedup within rows.
    /// Pairs must already be in range.
    pub(crate) fn from_raw_pairs(n_q: usize, n_k: usize, pairs: &[(u32, u32)]) -> Self {
        let mut counts = vec![0usize; n_q + 1];
        for &(i, _) in pairs {
            counts[i as usize + 1] += 1;
        }
        for i in 0..n_q {
            counts[i + 1] += counts[i];
        }
        let mut cursor = counts.clone();
        let mut bucketed = vec![0u32; pairs.len()];
        for &(i, j) in pairs {
            let slot = &mut cursor[i as usize];
            bucketed[*slot] = j;
            *slot += 1;
        }
        let mut row_offsets = Vec::with_capacity(n_q + 1);
        let mut cols = Vec::with_capacity(pairs.len());
        row_offsets.push(0);
        for i in 0..n_q {
            let row = &mut bucketed[counts[i]..counts[i + 1]];
            row.sort_unstable();
            let mut last = None;
            for &j in row.iter() {
                if last != Some(j) {
                    cols.push(j);
                    last = Some(j);
                }
            }
            row_offsets.push(cols.len());
        }
        Self { n_q, n_k, row_offsets, cols }
    }

    #[inline]
    pub fn n_q(&self) -> usize {
        self.n_q
    }

    #[inline]
    pub fn n_k(&self) -> usize {
        self.n_k
    }

    #[inline]
    pub fn num_edges(&self) -> usize {
        self.cols.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    /// Key indices of all edges, in edge-id order.
    pub fn cols(&self) -> &[u32] {
        &self.cols
    }

    /// Edge-id range of query row `i`.
    #[inline]
    pub fn row_range(&self, i: usize) -> Range<usize> {
        self.row_offsets[i]..self.row_offsets[i + 1]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[u32] {
        &self.cols[self.row_range(i)]
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i < self.n_q && self.row(i).binary_search(&(j as u32)).is_ok()
    }

    /// `(query, key)` pairs in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_q).flat_map(move |i| self.row(i).iter().map(move |&j| (i, j as usize)))
    }

    /// Fraction of the `n_q · n_k` possible pairs that are present.
    pub fn density(&self) -> f64 {
        let total = self.n_q * self.n_k;
        if total == 0 {
            0.0
        } else {
            self.num_edges() as f64 / total as f64
        }
    }

    pub fn retain(&self, mut keep: impl FnMut(usize, usize) -> bool) -> EdgeMask {
        let mut row_offsets = Vec::with_capacity(self.n_q + 1);
        let mut cols = Vec::with_capacity(self.cols.len());
        row_offsets.push(0);
        for i in 0..self.n_q {
            cols.extend(self.row(i).iter().copied().filter(|&j| keep(i, j as usize)));
            row_offsets.push(cols.len());
        }
        EdgeMask { n_q: self.n_q, n_k: self.n_k, row_offsets, cols }
    }

    pub fn union(&self, other: &EdgeMask) -> Result<EdgeMask> {
        if (self.n_q, self.n_k) != (other.n_q, other.n_k) {
            return Err(Error::Shape { op: "mask union", lhs: (self.n_q, self.n_k), rhs: (other.n_q, other.n_k) });
        }
        EdgeMask::from_edges(self.n_q, self.n_k, self.edges().chain(other.edges()))
    }

    /// Text dump: header `n_q n_k num_edges`, then one `i j` line per edge in
    /// ascending order.
    pub fn to_dump_string(&self) -> String {
        let mut out = String::with_capacity(16 + self.num_edges() * 8);
        let _ = writeln!(out, "{} {} {}", self.n_q, self.n_k, self.num_edges());
        for (i, j) in self.edges() {
            let _ = writeln!(out, "{i} {j}");
        }
        out
    }

    pub fn parse_dump(text: &str) -> Result<EdgeMask> {
        let bad = |detail: String| Error::Format { what: "mask dump", detail };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
        let nums: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad(format!("bad header token `{t}`"))))
            .collect::<Result<_>>()?;
        let [n_q, n_k, m] = nums[..] else {
            return Err(bad(format!("header needs 3 fields, got `{header}`")));
        };
        let mut edges = Vec::with_capacity(m);
        for line in lines {
            let mut it = line.split_whitespace().map(|t| t.parse::<usize>());
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(i)), Some(Ok(j)), None) => edges.push((i, j)),
                _ => return Err(bad(format!("bad edge line `{line}`"))),
            }
        }
        if edges.len() != m {
            return Err(bad(format!("header declares {m} edges, found {}", edges.len())));
        }
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("edges not strictly ascending".into()));
        }
        EdgeMask::from_edges(n_q, n_k, edges)
    }
}
