//! Sparsity patterns behind the universal-approximation argument, executable
//! checks of its three graph conditions, and the Hamiltonian-cycle count of a
//! directed Erdős–Rényi graph.
//!
//! A pattern is an [`EdgeMask`] where `(i, j)` means token `i` attends to
//! token `j`, i.e. `j ∈ Aᵢ`. Indices are 0-based; the relay tokens are the
//! last `k`.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::sbm_sampler::{add_self_loops, sample_mask, EdgeMask, SbmParams};

/// Per-edge intensity used by the hard SBM realizations:
/// `P(edge present) = 1 − e^{−14} > 1 − 1e-6`.
pub const HARD_INTENSITY: f64 = 14.0;

/// Largest `n` for which condition 2 falls back to an exact DP search.
pub const EXACT_PATH_LIMIT: usize = 20;

/// Largest `n` accepted by [`monte_carlo_cycles`].
pub const MONTE_CARLO_MAX_N: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternKind {
    /// Equal-size clusters `⌊ik/n⌋`, complete within each cluster.
    A1,
    /// Every token attends to itself and the relays.
    A2,
    /// Relays attend to everything, other tokens only to themselves.
    A3,
    Union,
    Custom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityPattern {
    pub kind: PatternKind,
    /// Cluster / relay count for the constructed patterns.
    pub k: Option<usize>,
    pub mask: EdgeMask,
}

impl SparsityPattern {
    pub fn custom(mask: EdgeMask) -> Result<Self> {
        if mask.n_q() != mask.n_k() {
            return Err(Error::Domain(format!("pattern must be square, got {}x{}", mask.n_q(), mask.n_k())));
        }
        Ok(Self { kind: PatternKind::Custom, k: None, mask })
    }

    pub fn n(&self) -> usize {
        self.mask.n_q()
    }

    pub fn num_edges(&self) -> usize {
        self.mask.num_edges()
    }

    /// `j ∈ Aᵢ`.
    pub fn attends(&self, i: usize, j: usize) -> bool {
        self.mask.contains(i, j)
    }
}

/// An SBM whose samples contain a pattern with probability `≥ 1 − 1e-6` per
/// edge and never leave it.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternRealization {
    pub params: SbmParams,
    pub self_loops: bool,
}

impl PatternRealization {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<EdgeMask> {
        let mask = sample_mask(&self.params, rng)?;
        if self.self_loops {
            add_self_loops(&mask)
        } else {
            Ok(mask)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternSet {
    pub n: usize,
    pub k: usize,
    pub a1: SparsityPattern,
    pub a2: SparsityPattern,
    pub a3: SparsityPattern,
    pub realizations: [PatternRealization; 3],
}

impl PatternSet {
    pub fn patterns(&self) -> [&SparsityPattern; 3] {
        [&self.a1, &self.a2, &self.a3]
    }

    pub fn to_vec(&self) -> Vec<SparsityPattern> {
        vec![self.a1.clone(), self.a2.clone(), self.a3.clone()]
    }
}

/// Builds the clustered pattern and the two relay patterns together with
/// their hard SBM realizations. Requires `k ≥ 2`, `n > k` and `k | n`.
pub fn build_patterns(n: usize, k: usize) -> Result<PatternSet> {
    if k < 2 {
        return Err(Error::Domain(format!("need at least 2 clusters, got {k}")));
    }
    if n <= k {
        return Err(Error::Domain(format!("need n > k, got n={n}, k={k}")));
    }
    if !n.is_multiple_of(k) {
        return Err(Error::Domain(format!("k={k} does not divide n={n}")));
    }
    let group = |i: usize| i * k / n;
    let relay_start = n - k;
    let is_relay = |i: usize| i >= relay_start;

    let all = (0..n).flat_map(|i| (0..n).map(move |j| (i, j)));
    let a1 = EdgeMask::from_edges(n, n, all.clone().filter(|&(i, j)| group(i) == group(j)))?;
    let a2 = EdgeMask::from_edges(n, n, all.clone().filter(|&(i, j)| i == j || is_relay(j)))?;
    let a3 = EdgeMask::from_edges(n, n, all.filter(|&(i, j)| i == j || is_relay(i)))?;

    let one_hot = Matrix::from_fn(n, k, |i, u| f64::from(u8::from(group(i) == u)));
    let mut block = Matrix::identity(k);
    block.scale(HARD_INTENSITY);
    let ones = Matrix::filled(n, 1, 1.0);
    let relays = Matrix::from_fn(n, 1, |i, _| f64::from(u8::from(is_relay(i))));
    let hard = Matrix::filled(1, 1, HARD_INTENSITY);

    let realizations = [
        PatternRealization { params: SbmParams::new(one_hot.clone(), block, one_hot)?, self_loops: false },
        PatternRealization { params: SbmParams::new(ones.clone(), hard.clone(), relays.clone())?, self_loops: true },
        PatternRealization { params: SbmParams::new(relays, hard, ones)?, self_loops: true },
    ];
    let pat = |kind, mask| SparsityPattern { kind, k: Some(k), mask };
    Ok(PatternSet {
        n,
        k,
        a1: pat(PatternKind::A1, a1),
        a2: pat(PatternKind::A2, a2),
        a3: pat(PatternKind::A3, a3),
        realizations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathMethod {
    Constructive,
    ExactSearch,
    BudgetedSearch,
}

impl fmt::Display for PathMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PathMethod::Constructive => "constructive",
            PathMethod::ExactSearch => "exact-search",
            PathMethod::BudgetedSearch => "budgeted-search",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub n: usize,
    pub edge_counts: Vec<usize>,
    /// Every pattern contains every self-loop.
    pub condition1: bool,
    /// A permutation `γ` with `γ(t) ∈ ∪ₗ Aˡ_{γ(t+1)}` exists.
    pub condition2: bool,
    /// Verified witness for condition 2.
    pub witness: Option<Vec<usize>>,
    pub path_method: Option<PathMethod>,
    /// The search ran out of budget without finding a path; `condition2` is
    /// then false but not proven false.
    pub path_inconclusive: bool,
    /// Some ordering of the patterns makes the reachability closure complete.
    pub condition3: bool,
    /// Smallest closure depth over all pattern orderings.
    pub s: Option<usize>,
    /// Pattern ordering achieving `s` (indices into the input list).
    pub s_order: Option<Vec<usize>>,
    /// Closure depth for the patterns in the given order.
    pub s_given_order: Option<usize>,
}

impl AssumptionReport {
    pub fn all_pass(&self) -> bool {
        self.condition1 && self.condition2 && self.condition3
    }
}

impl fmt::Display for AssumptionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<usize>| v.map_or_else(|| "none".to_string(), |s| s.to_string());
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        writeln!(f, "n = {}", self.n)?;
        writeln!(f, "edge_counts = {}", list(&self.edge_counts))?;
        writeln!(f, "condition1 = {}", self.condition1)?;
        writeln!(f, "condition2 = {}", self.condition2)?;
        if let Some(m) = self.path_method {
            writeln!(f, "condition2_method = {m}")?;
        }
        if self.path_inconclusive {
            writeln!(f, "condition2_inconclusive = true")?;
        }
        if let Some(w) = &self.witness {
            writeln!(f, "witness = {}", list(w))?;
        }
        writeln!(f, "condition3 = {}", self.condition3)?;
        writeln!(f, "s = {}", opt(self.s))?;
        if let Some(o) = &self.s_order {
            writeln!(f, "s_order = {}", list(o))?;
        }
        writeln!(f, "s_given_order = {}", opt(self.s_given_order))?;
        write!(f, "result = {}", if self.all_pass() { "PASS" } else { "FAIL" })
    }
}

/// Checks the three graph conditions on a family of patterns over one `[n]`.
pub fn verify_assumption1(patterns: &[SparsityPattern]) -> Result<AssumptionReport> {
    let first = patterns.first().ok_or_else(|| Error::Domain("need at least one pattern".into()))?;
    let n = first.n();
    if let Some(p) = patterns.iter().find(|p| p.n() != n || p.mask.n_k() != n) {
        return Err(Error::Domain(format!("patterns disagree on n: {n} vs {}x{}", p.mask.n_q(), p.mask.n_k())));
    }

    let condition1 = patterns.iter().all(|p| (0..n).all(|i| p.attends(i, i)));

    let mut union = EdgeMask::empty(n, n);
    for p in patterns {
        union = union.union(&p.mask)?;
    }
    let hop_ok = |a: usize, b: usize| union.contains(b, a);
    let mut path_method = None;
    let mut witness = None;
    let mut path_inconclusive = false;
    if let Some(k) = relay_layout(patterns) {
        let w = lemma2_path(n, k);
        if is_hamiltonian_path(&w, n, hop_ok) {
            witness = Some(w);
            path_method = Some(PathMethod::Constructive);
        }
    }
    if witness.is_none() && n <= EXACT_PATH_LIMIT {
        path_method = Some(PathMethod::ExactSearch);
        witness = exact_hamiltonian_path(n, &union);
    } else if witness.is_none() {
        path_method = Some(PathMethod::BudgetedSearch);
        let (found, exhausted) = budgeted_hamiltonian_path(n, &union, 1_000_000);
        path_inconclusive = found.is_none() && !exhausted;
        witness = found;
    }
    // Witnesses are trusted only after an edge-by-edge re-check.
    let witness = witness.filter(|w| is_hamiltonian_path(w, n, hop_ok));
    let condition2 = witness.is_some();

    let s_given_order = closure_depth(patterns.iter().collect::<Vec<_>>().as_slice());
    let mut best: Option<(usize, Vec<usize>)> = None;
    for order in permutations(patterns.len()) {
        let ordered: Vec<&SparsityPattern> = order.iter().map(|&i| &patterns[i]).collect();
        if let Some(s) = closure_depth(&ordered) {
            if best.as_ref().is_none_or(|(b, _)| s < *b) {
                best = Some((s, order));
            }
        }
    }

    Ok(AssumptionReport {
        n,
        edge_counts: patterns.iter().map(SparsityPattern::num_edges).collect(),
        condition1,
        condition2,
        witness,
        path_method,
        path_inconclusive,
        condition3: best.is_some(),
        s: best.as_ref().map(|b| b.0),
        s_order: best.map(|b| b.1),
        s_given_order,
    })
}

/// `Some(k)` when the family contains the three constructed patterns for one `k`.
fn relay_layout(patterns: &[SparsityPattern]) -> Option<usize> {
    let k = patterns.iter().find_map(|p| p.k)?;
    let has = |kind| patterns.iter().any(|p| p.kind == kind && p.k == Some(k));
    (has(PatternKind::A1) && has(PatternKind::A2) && has(PatternKind::A3)).then_some(k)
}

/// Non-relay tokens cluster by cluster, a relay between consecutive clusters,
/// leftover relays at the end.
fn lemma2_path(n: usize, k: usize) -> Vec<usize> {
    let relay_start = n - k;
    let mut relays = relay_start..n;
    let mut path = Vec::with_capacity(n);
    for g in 0..k {
        let members: Vec<usize> = (0..relay_start).filter(|&i| i * k / n == g).collect();
        if members.is_empty() {
            continue;
        }
        if !path.is_empty() {
            if let Some(r) = relays.next() {
                path.push(r);
            }
        }
        path.extend(members);
    }
    path.extend(relays);
    path
}

pub fn is_hamiltonian_path(path: &[usize], n: usize, hop_ok: impl Fn(usize, usize) -> bool) -> bool {
    let mut seen = vec![false; n];
    if path.len() != n {
        return false;
    }
    for &v in path {
        if v >= n || std::mem::replace(&mut seen[v], true) {
            return false;
        }
    }
    path.windows(2).all(|w| hop_ok(w[0], w[1]))
}

/// Held–Karp reachability DP over subsets; `O(2ⁿ n²)`.
fn exact_hamiltonian_path(n: usize, union: &EdgeMask) -> Option<Vec<usize>> {
    if n == 0 {
        return Some(Vec::new());
    }
    // succ[a] = bitmask of b with a hop a → b (a ∈ A_b).
    let mut succ = vec![0u32; n];
    for (b, a) in union.edges() {
        if a != b {
            succ[a] |= 1 << b;
        }
    }
    let full = (1usize << n) - 1;
    // ends[mask] = bitmask of nodes v such that a path covering `mask` ends at v.
    let mut ends = vec![0u32; full + 1];
    for v in 0..n {
        ends[1 << v] = 1 << v;
    }
    for mask in 1..=full {
        let e = ends[mask];
        if e == 0 {
            continue;
        }
        for v in 0..n {
            if e >> v & 1 == 1 {
                let mut next = succ[v] & !(mask as u32);
                while next != 0 {
                    let b = next.trailing_zeros() as usize;
                    next &= next - 1;
                    ends[mask | 1 << b] |= 1 << b;
                }
            }
        }
    }
    if ends[full] == 0 {
        return None;
    }
    let mut path = Vec::with_capacity(n);
    let mut mask = full;
    let mut v = ends[full].trailing_zeros() as usize;
    loop {
        path.push(v);
        let prev_mask = mask & !(1 << v);
        if prev_mask == 0 {
            break;
        }
        let candidates = (0..n).find(|&u| ends[prev_mask] >> u & 1 == 1 && succ[u] >> v & 1 == 1)?;
        mask = prev_mask;
        v = candidates;
    }
    path.reverse();
    Some(path)
}

/// Depth-first search with a node-expansion budget. Returns the path if found
/// and whether the search space was exhausted.
fn budgeted_hamiltonian_path(n: usize, union: &EdgeMask, budget: usize) -> (Option<Vec<usize>>, bool) {
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (b, a) in union.edges() {
        if a != b {
            succ[a].push(b);
        }
    }
    let mut expansions = 0usize;
    let mut path = Vec::with_capacity(n);
    let mut used = vec![false; n];
    fn dfs(
        succ: &[Vec<usize>],
        path: &mut Vec<usize>,
        used: &mut [bool],
        expansions: &mut usize,
        budget: usize,
    ) -> Option<bool> {
        if path.len() == used.len() {
            return Some(true);
        }
        *expansions += 1;
        if *expansions > budget {
            return None;
        }
        let last = *path.last().expect("nonempty");
        for &b in &succ[last] {
            if !used[b] {
                used[b] = true;
                path.push(b);
                match dfs(succ, path, used, expansions, budget) {
                    Some(true) => return Some(true),
                    None => return None,
                    Some(false) => {}
                }
                path.pop();
                used[b] = false;
            }
        }
        Some(false)
    }
    for start in 0..n {
        used[start] = true;
        path.push(start);
        match dfs(&succ, &mut path, &mut used, &mut expansions, budget) {
            Some(true) => return (Some(path), true),
            None => return (None, false),
            Some(false) => {}
        }
        path.clear();
        used[start] = false;
    }
    (None, true)
}

/// Smallest `s` with `Sˢᵢ = [n]` for all `i`, where `S¹ᵢ = A^{l₁}ᵢ` and
/// `Sᵗᵢ = ∪_{j ∈ A^{lₜ}ᵢ} S^{t−1}ⱼ`, cycling through the patterns in order.
fn closure_depth(patterns: &[&SparsityPattern]) -> Option<usize> {
    let p = patterns.len();
    let n = patterns.first()?.n();
    let words = n.div_ceil(64);
    let to_sets = |mask: &EdgeMask| -> Vec<Vec<u64>> {
        (0..n)
            .map(|i| {
                let mut s = vec![0u64; words];
                for &j in mask.row(i) {
                    s[j as usize / 64] |= 1 << (j % 64);
                }
                s
            })
            .collect()
    };
    let is_full = |s: &[u64]| (0..n).all(|j| s[j / 64] >> (j % 64) & 1 == 1);
    let mut sets = to_sets(&patterns[0].mask);
    let mut history: Vec<Vec<Vec<u64>>> = Vec::new();
    for t in 1..=p * (n + 1) {
        if sets.iter().all(|s| is_full(s)) {
            return Some(t);
        }
        // The update depends only on the state and t mod p, so a repeat one
        // period apart means the closure cycles without ever filling up.
        if t > p && history[t - 1 - p] == sets {
            return None;
        }
        history.push(sets.clone());
        let pat = &patterns[t % p].mask;
        sets = (0..n)
            .map(|i| {
                let mut s = vec![0u64; words];
                for &j in pat.row(i) {
                    for (w, x) in s.iter_mut().zip(&sets[j as usize]) {
                        *w |= x;
                    }
                }
                s
            })
            .collect();
    }
    None
}

fn permutations(p: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..p).collect();
    fn rec(k: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == current.len() {
            out.push(current.clone());
            return;
        }
        for i in k..current.len() {
            current.swap(k, i);
            rec(k + 1, current, out);
            current.swap(k, i);
        }
    }
    if p <= 6 {
        rec(0, &mut current, &mut out);
    } else {
        out.push(current);
    }
    out
}

/// Expected number of directed Hamiltonian cycles in a directed G(n, p):
/// `pⁿ (n−1)!`.
pub fn hamiltonian_cycle_expectation(n: usize, p: f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::Domain(format!("need n >= 2, got {n}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("edge probability {p} outside [0, 1]")));
    }
    let factorial: f64 = (1..n).map(|i| i as f64).product();
    Ok(p.powi(n as i32) * factorial)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdProbability {
    /// `(e/n) · n^{1/n}`; exceeds 1 for small `n`.
    pub raw: f64,
    /// `min(raw, 1)`.
    pub clamped: f64,
}

/// Edge probability `(e/n)·n^{1/n}` from Stirling's bound
/// `(n−1)! ≥ (n/e)ⁿ / n`: at or above it the expected Hamiltonian-cycle
/// count is at least 1.
pub fn threshold_probability(n: usize) -> Result<ThresholdProbability> {
    if n < 2 {
        return Err(Error::Domain(format!("need n >= 2, got {n}")));
    }
    let nf = n as f64;
    let raw = std::f64::consts::E / nf * nf.powf(1.0 / nf);
    Ok(ThresholdProbability { raw, clamped: raw.min(1.0) })
}

/// Exact directed Hamiltonian-cycle count of a digraph on `adjacency.len()`
/// nodes given as out-neighbour bitmasks. Each cycle is counted once.
pub fn count_hamiltonian_cycles(adjacency: &[u32]) -> u64 {
    let n = adjacency.len();
    if n < 2 {
        return 0;
    }
    fn walk(adj: &[u32], v: usize, visited: u32, depth: usize) -> u64 {
        if depth == adj.len() {
            return u64::from(adj[v] & 1);
        }
        let mut next = adj[v] & !visited;
        let mut total = 0;
        while next != 0 {
            let b = next.trailing_zeros() as usize;
            next &= next - 1;
            total += walk(adj, b, visited | 1 << b, depth + 1);
        }
        total
    }
    walk(adjacency, 0, 1, 1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub trials: usize,
}

/// Mean Hamiltonian-cycle count over `trials` directed G(n, p) samples
/// (no self-loops). `n ≤ 9`.
pub fn monte_carlo_cycles<R: Rng + ?Sized>(n: usize, p: f64, trials: usize, rng: &mut R) -> Result<MonteCarloEstimate> {
    if !(2..=MONTE_CARLO_MAX_N).contains(&n) {
        return Err(Error::Domain(format!("monte carlo cycle counting needs 2 <= n <= {MONTE_CARLO_MAX_N}, got {n}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("edge probability {p} outside [0, 1]")));
    }
    if trials == 0 {
        return Err(Error::Domain("need at least one trial".into()));
    }
    let mut adjacency = vec![0u32; n];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..trials {
        for (a, row) in adjacency.iter_mut().enumerate() {
            *row = 0;
            for b in (0..n).filter(|&b| b != a) {
                if rng.random::<f64>() < p {
                    *row |= 1 << b;
                }
            }
        }
        let c = count_hamiltonian_cycles(&adjacency) as f64;
        sum += c;
        sum_sq += c * c;
    }
    let t = trials as f64;
    let mean = sum / t;
    let var = if trials > 1 { ((sum_sq - t * mean * mean) / (t - 1.0)).max(0.0) } else { 0.0 };
    Ok(MonteCarloEstimate { mean, std_error: (var / t).sqrt(), trials })
}
