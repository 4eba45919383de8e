//! Synthetic duplicate-token task: each sequence holds `N` tokens drawn
//! uniformly from `{1, …, N}`; a position is labelled 1 iff its token occurs at
//! least twice in the sequence. Token 0 is reserved for padding.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const PAD_TOKEN: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskConfig {
    /// Sequence length, equal to the alphabet size.
    pub seq_len: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TaskConfig {
    pub fn new(seq_len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if seq_len < 2 {
            return Err(Error::Domain(format!("sequence length must be at least 2, got {seq_len}")));
        }
        if batch_size == 0 {
            return Err(Error::Domain("batch size must be positive".into()));
        }
        Ok(Self { seq_len, batch_size, seed })
    }
}

/// A batch of token sequences with per-token binary targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub tokens: Vec<Vec<u32>>,
    /// `batch × seq_len`, entries in {0, 1}.
    pub targets: Matrix,
}

impl LabeledBatch {
    pub fn from_sequences(tokens: Vec<Vec<u32>>) -> Result<Self> {
        let len = tokens.first().map_or(0, Vec::len);
        if tokens.iter().any(|s| s.len() != len) {
            return Err(Error::Input("sequences in a batch must share one length".into()));
        }
        let mut targets = Matrix::zeros(tokens.len(), len);
        for (r, seq) in tokens.iter().enumerate() {
            for (t, l) in duplicate_labels(seq).into_iter().enumerate() {
                targets.row_mut(r)[t] = f64::from(l);
            }
        }
        Ok(Self { tokens, targets })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.targets.cols()
    }
}

/// 1 where the token occurs at least twice in `seq`, else 0. Padding tokens are
/// never labelled.
pub fn duplicate_labels(seq: &[u32]) -> Vec<u8> {
    let max = seq.iter().copied().max().unwrap_or(0) as usize;
    let mut counts = vec![0u32; max + 1];
    for &t in seq {
        counts[t as usize] += 1;
    }
    seq.iter().map(|&t| u8::from(t != PAD_TOKEN && counts[t as usize] >= 2)).collect()
}

/// Fresh batch of i.i.d. uniform sequences.
pub fn generate_batch<R: Rng + ?Sized>(cfg: &TaskConfig, rng: &mut R) -> LabeledBatch {
    let n = cfg.seq_len as u32;
    let tokens = (0..cfg.batch_size).map(|_| (0..n).map(|_| rng.random_range(1..=n)).collect()).collect();
    LabeledBatch::from_sequences(tokens).expect("generated sequences share one length")
}

/// Probability that a given position is a duplicate: `1 − (1 − 1/N)^(N−1)`.
pub fn duplicate_rate(seq_len: usize) -> f64 {
    let n = seq_len as f64;
    1.0 - (1.0 - 1.0 / n).powf(n - 1.0)
}

/// One line per sequence: tokens, ` | `, labels.
pub fn to_dump_string(batch: &LabeledBatch) -> String {
    let mut out = String::new();
    for (r, seq) in batch.tokens.iter().enumerate() {
        let toks: Vec<String> = seq.iter().map(u32::to_string).collect();
        let labels: Vec<String> = batch.targets.row(r).iter().map(|&v| (v as u8).to_string()).collect();
        let _ = writeln!(out, "{} | {}", toks.join(" "), labels.join(" "));
    }
    out
}

/// Parses [`to_dump_string`] output. Labels are recomputed and must agree.
pub fn parse_dump(text: &str) -> Result<LabeledBatch> {
    let mut tokens = Vec::new();
    for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |what: &str| Error::Format { what: "dataset dump", detail: format!("line {}: {what}", lineno + 1) };
        let (seq, labels) = line.split_once('|').ok_or_else(|| bad("missing '|'"))?;
        let seq: Vec<u32> =
            seq.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad token"))?;
        let labels: Vec<u8> = labels
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad label"))?;
        if labels.len() != seq.len() {
            return Err(bad("label count differs from token count"));
        }
        if labels != duplicate_labels(&seq) {
            return Err(bad("labels disagree with the duplicate rule"));
        }
        tokens.push(seq);
    }
    LabeledBatch::from_sequences(tokens)
}

/// Token sequences from a whitespace-separated file, one sequence per line.
/// Anything after a `|` is ignored.
pub fn parse_sequences(text: &str) -> Result<Vec<Vec<u32>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| {
            let body = l.split('|').next().unwrap_or("");
            body.split_whitespace().map(str::parse::<u32>).collect::<std::result::Result<Vec<_>, _>>().map_err(|e| {
                Error::Format { what: "sequence file", detail: format!("sequence {}: {e}", n + 1) }
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn worked_example() {
        assert_eq!(duplicate_labels(&[1, 4, 3, 7, 3, 2, 3, 1]), vec![1, 0, 1, 0, 1, 0, 1, 1]);
        assert_eq!(duplicate_labels(&[1, 2, 3, 4]), vec![0; 4]);
        assert_eq!(duplicate_labels(&[5, 5, 5]), vec![1; 3]);
        assert_eq!(duplicate_labels(&[0, 0, 2]), vec![0, 0, 0]);
    }

    #[test]
    fn rate_closed_form() {
        assert_eq!(duplicate_rate(2), 0.5);
        assert!((duplicate_rate(256) - 0.631_400_4).abs() < 1e-7);
    }

    #[test]
    fn generator_range_and_determinism() {
        let cfg = TaskConfig::new(16, 8, 3).unwrap();
        let a = generate_batch(&cfg, &mut substream(3, &[2]));
        let b = generate_batch(&cfg, &mut substream(3, &[2]));
        assert_eq!(a, b);
        assert!(a.tokens.iter().flatten().all(|&t| (1..=16).contains(&t)));
        assert_eq!(a.targets.shape(), (8, 16));
    }

    #[test]
    fn dump_round_trip() {
        let cfg = TaskConfig::new(6, 3, 1).unwrap();
        let batch = generate_batch(&cfg, &mut substream(1, &[2]));
        let text = to_dump_string(&batch);
        assert_eq!(parse_dump(&text).unwrap(), batch);
        assert!(parse_dump("1 1 | 0 1\n").is_err());
        assert!(parse_dump("1 2 3\n").is_err());
        assert_eq!(parse_sequences(&text).unwrap(), batch.tokens);
    }

    #[test]
    fn config_validation() {
        assert!(TaskConfig::new(1, 4, 0).is_err());
        assert!(TaskConfig::new(4, 0, 0).is_err());
    }
}
