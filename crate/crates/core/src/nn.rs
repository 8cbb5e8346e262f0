//! Double-precision neural primitives with explicit backward passes.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Row-wise softmax with max subtraction, so finite inputs always produce
/// finite, normalized rows.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Backward through a row-wise softmax given its output `p` and `dL/dp`.
pub fn softmax_rows_backward(p: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(p.raw_dim());
    for ((mut drow, prow), grow) in out
        .rows_mut()
        .into_iter()
        .zip(p.rows())
        .zip(grad.rows())
    {
        let dot: f64 = prow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
        for ((d, &pv), &gv) in drow.iter_mut().zip(prow.iter()).zip(grow.iter()) {
            *d = pv * (gv - dot);
        }
    }
    out
}

/// Softmax over a single vector (used for the classifier logits).
pub fn softmax_vec(x: &Array1<f64>) -> Array1<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = x.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out.mapv_inplace(|v| v / sum);
    out
}

/// Per-row layer normalization state needed by the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    /// (x - mean) / sqrt(var + eps), per row.
    pub normalized: Array2<f64>,
    /// 1 / sqrt(var + eps), per row.
    pub inv_std: Array1<f64>,
}

pub fn layer_norm(
    x: &Array2<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    eps: f64,
) -> (Array2<f64>, LayerNormCache) {
    let rows = x.shape()[0];
    let dim = x.shape()[1] as f64;
    let mut normalized = Array2::zeros(x.raw_dim());
    let mut inv_std = Array1::zeros(rows);
    let mut out = Array2::zeros(x.raw_dim());
    for i in 0..rows {
        let row = x.row(i);
        let mean = row.sum() / dim;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[i] = istd;
        for j in 0..x.shape()[1] {
            let n = (x[[i, j]] - mean) * istd;
            normalized[[i, j]] = n;
            out[[i, j]] = gamma[j] * n + beta[j];
        }
    }
    (out, LayerNormCache { normalized, inv_std })
}

/// Backward through layer norm. Returns `dx` and accumulates `dgamma`,
/// `dbeta`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Array1<f64>,
    grad: &Array2<f64>,
    dgamma: &mut Array1<f64>,
    dbeta: &mut Array1<f64>,
) -> Array2<f64> {
    let rows = grad.shape()[0];
    let dim = grad.shape()[1];
    let dimf = dim as f64;
    let mut dx = Array2::zeros(grad.raw_dim());
    for i in 0..rows {
        let mut sum_g = 0.0;
        let mut sum_gn = 0.0;
        for j in 0..dim {
            let g = grad[[i, j]] * gamma[j];
            sum_g += g;
            sum_gn += g * cache.normalized[[i, j]];
            dgamma[j] += grad[[i, j]] * cache.normalized[[i, j]];
            dbeta[j] += grad[[i, j]];
        }
        let istd = cache.inv_std[i];
        for j in 0..dim {
            let g = grad[[i, j]] * gamma[j];
            dx[[i, j]] =
                istd * (g - sum_g / dimf - cache.normalized[[i, j]] * sum_gn / dimf);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximation GELU.
pub fn gelu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| {
        let u = GELU_C * (v + GELU_A * v * v * v);
        0.5 * v * (1.0 + u.tanh())
    })
}

/// Exact derivative of the tanh-approximation GELU.
pub fn gelu_backward(x: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
    let mut out = grad.clone();
    out.zip_mut_with(x, |g, &v| {
        let u = GELU_C * (v + GELU_A * v * v * v);
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
        *g *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
    });
    out
}

/// `x @ w + b` for row-major inputs.
pub fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = x.dot(w);
    out += b;
    out
}

/// Backward through `linear`, accumulating parameter gradients.
pub fn linear_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    grad: &Array2<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dw += &x.t().dot(grad);
    *db += &grad.sum_axis(Axis(0));
    grad.dot(&w.t())
}

/// Gaussian init with standard deviation `std`.
pub fn normal_init<R: Rng>(shape: (usize, usize), std: f64, rng: &mut R) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn(shape, |_| dist.sample(rng))
}

pub fn normal_init_1d<R: Rng>(len: usize, std: f64, rng: &mut R) -> Array1<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array1::from_shape_fn(len, |_| dist.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn softmax_rows_are_normalized_and_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = random_matrix(&mut rng, 6, 9);
        x[[0, 0]] = 1e6; // must not overflow thanks to max subtraction
        let p = softmax_rows(&x);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    /// Central finite differences on a scalar function of a matrix.
    fn fd_grad<F: Fn(&Array2<f64>) -> f64>(
        f: F,
        x: &Array2<f64>,
        step: f64,
    ) -> Array2<f64> {
        let mut g = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.shape()[1], idx % x.shape()[1]);
            let mut xp = x.clone();
            xp[[r, c]] += step;
            let mut xm = x.clone();
            xm[[r, c]] -= step;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * step);
        }
        g
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_matrix(&mut rng, 4, 5);
        let weights = random_matrix(&mut rng, 4, 5);
        let f = |m: &Array2<f64>| (softmax_rows(m) * &weights).sum();
        let analytic = softmax_rows_backward(&softmax_rows(&x), &weights);
        let numeric = fd_grad(f, &x, 1e-6);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-7, "{a} vs {n}");
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 3, 8);
        let gamma = Array1::from_shape_fn(8, |_| rng.random_range(0.5..1.5));
        let beta = Array1::from_shape_fn(8, |_| rng.random_range(-0.5..0.5));
        let weights = random_matrix(&mut rng, 3, 8);
        let f = |m: &Array2<f64>| (layer_norm(m, &gamma, &beta, 1e-6).0 * &weights).sum();
        let (_, cache) = layer_norm(&x, &gamma, &beta, 1e-6);
        let mut dgamma = Array1::zeros(8);
        let mut dbeta = Array1::zeros(8);
        let analytic = layer_norm_backward(&cache, &gamma, &weights, &mut dgamma, &mut dbeta);
        let numeric = fd_grad(f, &x, 1e-6);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn gelu_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_matrix(&mut rng, 5, 4);
        let weights = random_matrix(&mut rng, 5, 4);
        let f = |m: &Array2<f64>| (gelu(m) * &weights).sum();
        let analytic = gelu_backward(&x, &weights);
        let numeric = fd_grad(f, &x, 1e-6);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-7, "{a} vs {n}");
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_matrix(&mut rng, 4, 6);
        let w = random_matrix(&mut rng, 6, 3);
        let b = Array1::from_shape_fn(3, |_| rng.random_range(-0.5..0.5));
        let weights = random_matrix(&mut rng, 4, 3);
        let f = |m: &Array2<f64>| (linear(m, &w, &b) * &weights).sum();
        let mut dw = Array2::zeros((6, 3));
        let mut db = Array1::zeros(3);
        let dx = linear_backward(&x, &w, &weights, &mut dw, &mut db);
        let numeric = fd_grad(f, &x, 1e-6);
        for (a, n) in dx.iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-7, "{a} vs {n}");
        }
        // Weight gradient by finite differences too.
        for r in 0..6 {
            for c in 0..3 {
                let mut wp = w.clone();
                wp[[r, c]] += 1e-6;
                let mut wm = w.clone();
                wm[[r, c]] -= 1e-6;
                let n = ((linear(&x, &wp, &b) * &weights).sum()
                    - (linear(&x, &wm, &b) * &weights).sum())
                    / 2e-6;
                assert!((dw[[r, c]] - n).abs() < 1e-6);
            }
        }
    }
}
