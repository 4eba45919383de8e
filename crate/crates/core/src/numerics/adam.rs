use super::Matrix;
use crate::error::{shape_err, Result};

/// Adam moments and hyperparameters for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Matrix,
    pub second_moment: Matrix,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    /// Fresh state with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(rows: usize, cols: usize, lr: f64) -> Self {
        Self {
            first_moment: Matrix::zeros(rows, cols),
            second_moment: Matrix::zeros(rows, cols),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }

    pub fn for_param(param: &Matrix, lr: f64) -> Self {
        Self::new(param.rows(), param.cols(), lr)
    }
}

/// One bias-corrected Adam step applied to `param` in place.
pub fn adam_update(param: &mut Matrix, grad: &Matrix, state: &mut AdamState) -> Result<()> {
    if param.shape() != grad.shape() {
        return shape_err("adam_update", param.shape(), grad.shape());
    }
    if state.first_moment.shape() != param.shape() {
        return shape_err("adam_update state", param.shape(), state.first_moment.shape());
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    for (((p, &g), mi), vi) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *mi = b1 * *mi + (1.0 - b1) * g;
        *vi = b2 * *vi + (1.0 - b2) * g * g;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Matrix::from_rows(&[[1.5, -2.0]]);
        let before = p.clone();
        let mut st = AdamState::for_param(&p, 1e-3);
        adam_update(&mut p, &Matrix::zeros(1, 2), &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let g = Matrix::from_rows(&[[0.3, -4.0, 1e-3]]);
        let mut p = Matrix::zeros(1, 3);
        let mut st = AdamState::for_param(&p, 1e-3);
        adam_update(&mut p, &g, &mut st).unwrap();
        for (pv, gv) in p.data().iter().zip(g.data()) {
            let want = -1e-3 * gv / (gv.abs() + 1e-8);
            assert!((pv - want).abs() < 1e-15, "{pv} vs {want}");
        }
    }

    #[test]
    fn repeated_steps_move_monotonically() {
        let g = Matrix::from_rows(&[[0.5, -0.5]]);
        let mut p = Matrix::zeros(1, 2);
        let mut st = AdamState::for_param(&p, 1e-2);
        adam_update(&mut p, &g, &mut st).unwrap();
        let after_one = p.clone();
        adam_update(&mut p, &g, &mut st).unwrap();
        assert!(p[(0, 0)] < after_one[(0, 0)] && after_one[(0, 0)] < 0.0);
        assert!(p[(0, 1)] > after_one[(0, 1)] && after_one[(0, 1)] > 0.0);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Matrix::zeros(2, 2);
        let mut st = AdamState::for_param(&p, 1e-3);
        assert!(adam_update(&mut p, &Matrix::zeros(1, 2), &mut st).is_err());
    }
}
