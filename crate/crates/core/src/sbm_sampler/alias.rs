use rand::Rng;

use crate::error::{Error, Result};

/// Walker alias table (Vose's construction) for O(1) categorical draws.
#[derive(Debug, Clone)]
pub struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<u32>,
}

impl AliasTable {
    /// Builds the table in O(len). Weights must be finite, nonnegative and not
    /// all zero; they need not be normalized.
    pub fn new(weights: &[f64]) -> Result<Self> {
        let n = weights.len();
        if n == 0 {
            return Err(Error::Domain("alias table needs at least one outcome".into()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::Domain(format!("alias weight {w} is not a finite nonnegative number")));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Domain("alias weights sum to zero".into()));
        }

        let scale = n as f64 / total;
        let mut prob: Vec<f64> = weights.iter().map(|w| w * scale).collect();
        let mut alias: Vec<u32> = (0..n as u32).collect();
        let (mut small, mut large): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| prob[i] < 1.0);

        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            alias[s] = l as u32;
            prob[l] -= 1.0 - prob[s];
            if prob[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        // Leftovers are within rounding of 1.
        for i in large.into_iter().chain(small) {
            prob[i] = 1.0;
        }
        Ok(Self { prob, alias })
    }

    pub fn len(&self) -> usize {
        self.prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prob.is_empty()
    }

    /// One draw, consuming a single uniform variate.
    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let x = rng.random::<f64>() * self.prob.len() as f64;
        let i = (x as usize).min(self.prob.len() - 1);
        if x - (i as f64) < self.prob[i] {
            i
        } else {
            self.alias[i] as usize
        }
    }

    /// The exact distribution encoded by the table.
    pub fn probabilities(&self) -> Vec<f64> {
        let n = self.prob.len() as f64;
        let mut out = vec![0.0; self.prob.len()];
        for (i, (&p, &a)) in self.prob.iter().zip(&self.alias).enumerate() {
            out[i] += p / n;
            out[a as usize] += (1.0 - p) / n;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_weights() {
        assert!(AliasTable::new(&[]).is_err());
        assert!(AliasTable::new(&[0.0, 0.0]).is_err());
        assert!(AliasTable::new(&[1.0, -0.5]).is_err());
        assert!(AliasTable::new(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn zero_weight_never_drawn() {
        let t = AliasTable::new(&[0.0, 3.0, 0.0, 1.0]).unwrap();
        let mut rng = substream(1, &[99]);
        for _ in 0..20_000 {
            let s = t.sample(&mut rng);
            assert!(s == 1 || s == 3);
        }
    }

    #[test]
    fn empirical_frequencies() {
        let w = [0.1, 0.4, 0.2, 0.3];
        let t = AliasTable::new(&w).unwrap();
        let mut rng = substream(2, &[99]);
        let trials = 200_000;
        let mut counts = [0usize; 4];
        for _ in 0..trials {
            counts[t.sample(&mut rng)] += 1;
        }
        for (c, p) in counts.iter().zip(w) {
            let se = (p * (1.0 - p) / trials as f64).sqrt();
            assert!((*c as f64 / trials as f64 - p).abs() < 4.0 * se);
        }
    }

    proptest! {
        #[test]
        fn encodes_input_distribution(w in proptest::collection::vec(0.0f64..10.0, 1..40)) {
            prop_assume!(w.iter().sum::<f64>() > 1e-6);
            let total: f64 = w.iter().sum();
            let t = AliasTable::new(&w).unwrap();
            for (got, want) in t.probabilities().iter().zip(&w) {
                prop_assert!((got - want / total).abs() < 1e-12);
            }
        }
    }
}
