use crate::numerics::Matrix;

use super::LAYER_NORM_EPS;

#[derive(Debug, Clone)]
pub(crate) struct LayerNormCache {
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
}

/// Row-wise `gain ⊙ (x − μ)/√(σ² + ε) + bias`.
pub(crate) fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix) -> (Matrix, LayerNormCache) {
    let (n, d) = x.shape();
    let mut normalized = Matrix::zeros(n, d);
    let mut out = Matrix::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        let (nr, or) = (normalized.row_mut(r), out.row_mut(r));
        for c in 0..d {
            nr[c] = (row[c] - mean) * is;
            or[c] = gain.data()[c] * nr[c] + bias.data()[c];
        }
    }
    (out, LayerNormCache { normalized, inv_std })
}

/// Returns `(∂x, ∂gain, ∂bias)`.
pub(crate) fn layer_norm_backward(grad: &Matrix, gain: &Matrix, cache: &LayerNormCache) -> (Matrix, Matrix, Matrix) {
    let (n, d) = grad.shape();
    let mut dx = Matrix::zeros(n, d);
    let mut dgain = Matrix::zeros(1, d);
    let mut dbias = Matrix::zeros(1, d);
    let mut dxhat = vec![0.0; d];
    for r in 0..n {
        let g = grad.row(r);
        let xh = cache.normalized.row(r);
        for c in 0..d {
            dgain.data_mut()[c] += g[c] * xh[c];
            dbias.data_mut()[c] += g[c];
            dxhat[c] = g[c] * gain.data()[c];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xh = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[r];
        for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
            *out = is * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xh);
        }
    }
    (dx, dgain, dbias)
}
