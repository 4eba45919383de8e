use super::Matrix;

/// Denominator floor for the relative error, so entries whose true gradient is
/// zero are judged on absolute error instead of amplified rounding noise.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradFailure {
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Outcome of a central-difference check on one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    pub checked: usize,
    pub failures: Vec<GradFailure>,
}

/// `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic_grad` against central differences of `f` around `param`,
/// entry by entry, with step `h`.
pub fn finite_diff_check<F>(f: F, param: &Matrix, analytic_grad: &Matrix, h: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&Matrix) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    assert_eq!(param.shape(), analytic_grad.shape(), "gradient shape must match parameter");
    let mut probe = param.clone();
    let mut report = GradCheckReport { passed: true, max_rel_error: 0.0, checked: 0, failures: Vec::new() };
    for idx in 0..param.len() {
        let orig = probe.data()[idx];
        probe.data_mut()[idx] = orig + h;
        let up = f(&probe);
        probe.data_mut()[idx] = orig - h;
        let down = f(&probe);
        probe.data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = analytic_grad.data()[idx];
        let rel = relative_error(analytic, numeric);
        report.checked += 1;
        report.max_rel_error = report.max_rel_error.max(rel);
        if !(rel <= tol) {
            report.passed = false;
            report.failures.push(GradFailure {
                row: idx / param.cols(),
                col: idx % param.cols(),
                analytic,
                numeric,
                rel_error: rel,
            });
        }
    }
    report
}
