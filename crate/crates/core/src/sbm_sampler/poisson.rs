use rand::Rng;

/// Means below this use sequential inversion; above, transformed rejection.
const INVERSION_LIMIT: f64 = 30.0;

/// `ln(k!)`: exact summation below 20, Stirling series (error < 1e-14) above.
pub(crate) fn ln_factorial(k: u64) -> f64 {
    if k < 20 {
        return (2..=k).map(|i| (i as f64).ln()).sum();
    }
    let x = k as f64;
    let x2 = x * x;
    x * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI * x).ln() + 1.0 / (12.0 * x) - 1.0 / (360.0 * x * x2)
        + 1.0 / (1260.0 * x2 * x2 * x)
}

/// Draws from Poisson(`mean`). `mean` must be finite and nonnegative.
pub fn sample_poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    debug_assert!(mean.is_finite() && mean >= 0.0);
    if mean <= 0.0 {
        0
    } else if mean < INVERSION_LIMIT {
        inversion(mean, rng)
    } else {
        ptrs(mean, rng)
    }
}

fn inversion<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    let u: f64 = rng.random();
    let mut k = 0u64;
    let mut p = (-mean).exp();
    let mut cdf = p;
    // The cap guards against u landing in the rounding gap at the top of the cdf.
    while u > cdf && k < 1000 {
        k += 1;
        p *= mean / k as f64;
        cdf += p;
    }
    k
}

/// Hörmann's PTRS transformed rejection with squeeze.
fn ptrs<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    let smu = mean.sqrt();
    let b = 0.931 + 2.53 * smu;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let v_r = 0.9277 - 3.6224 / (b - 2.0);
    let log_mean = mean.ln();
    loop {
        let u = rng.random::<f64>() - 0.5;
        let v: f64 = rng.random();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + mean + 0.43).floor();
        if us >= 0.07 && v <= v_r {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        let lhs = v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln();
        let rhs = -mean + k * log_mean - ln_factorial(k as u64);
        if lhs <= rhs {
            return k as u64;
        }
    }
}
