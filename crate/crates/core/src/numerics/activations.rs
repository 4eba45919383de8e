use super::Matrix;

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(a: &Matrix) -> Matrix {
    a.map(sigmoid_scalar)
}

pub fn relu(a: &Matrix) -> Matrix {
    a.map(|v| v.max(0.0))
}

/// In-place softmax of a slice with max subtraction.
pub fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return;
    }
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax.
pub fn softmax_rows(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Softmax over every entry of the matrix jointly.
pub fn softmax_all(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    softmax_in_place(out.data_mut());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_rows_examples() {
        let out = softmax_rows(&Matrix::from_rows(&[[0.0, 0.0, 0.0], [1000.0, 0.0, 0.0], [1.0, 2.0, 3.0]]));
        for v in out.row(0) {
            assert!(close(*v, 1.0 / 3.0, 1e-15));
        }
        assert!(close(out[(1, 0)], 1.0, 1e-12));
        assert!(out[(1, 1)] < 1e-12 && out[(1, 2)] < 1e-12);
        // exp(k - 3) / (e^-2 + e^-1 + 1)
        let z = (-2.0f64).exp() + (-1.0f64).exp() + 1.0;
        let expected = [(-2.0f64).exp() / z, (-1.0f64).exp() / z, 1.0 / z];
        for (got, want) in out.row(2).iter().zip(expected) {
            assert!(close(*got, want, 1e-15));
        }
        assert!(close(out[(2, 0)], 0.09003, 5e-6));
        assert!(close(out[(2, 1)], 0.24473, 5e-6));
        assert!(close(out[(2, 2)], 0.66524, 5e-6));
    }

    #[test]
    fn softmax_all_examples() {
        let out = softmax_all(&Matrix::zeros(2, 2));
        assert!(out.data().iter().all(|&v| v == 0.25));
        assert_eq!(softmax_all(&Matrix::from_rows(&[[-7.5]])).data(), &[1.0]);
        let out = softmax_all(&Matrix::from_rows(&[[0.0, 3.0f64.ln()], [0.0, 0.0]]));
        let want = [1.0 / 6.0, 0.5, 1.0 / 6.0, 1.0 / 6.0];
        for (g, w) in out.data().iter().zip(want) {
            assert!(close(*g, w, 1e-15));
        }
    }

    #[test]
    fn sigmoid_relu_examples() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!(close(sigmoid_scalar(3.0f64.ln()), 0.75, 1e-15));
        let r = relu(&Matrix::from_rows(&[[-2.0, 3.0]]));
        assert_eq!(r.data(), &[0.0, 3.0]);
        let s = sigmoid(&Matrix::from_rows(&[[-800.0, 800.0]]));
        assert!(s[(0, 0)] >= 0.0 && s[(0, 1)] <= 1.0 && s.is_finite());
    }

    proptest! {
        #[test]
        fn rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let out = softmax_rows(&Matrix::from_vec(3, 4, vals).unwrap());
            for r in 0..3 {
                let s: f64 = out.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(out.row(r).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn all_sums_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 16)) {
            let m = Matrix::from_vec(4, 4, vals).unwrap();
            let out = softmax_all(&m);
            prop_assert!((out.sum() - 1.0).abs() < 1e-12);
            // deterministic: bit-identical on recomputation
            prop_assert_eq!(out, softmax_all(&m));
        }
    }
}
