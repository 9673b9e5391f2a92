//! Fused residual-add + LayerNorm/RMSNorm forward and backward.
//!
//! The forward fuses `v = x + residual`, per-row statistics, normalization,
//! and the affine transform, returning `v` unchanged as `residual_out` and
//! the per-row statistics needed by the backward. Row statistics use
//! single-pass Welford accumulation combined strictly left to right, so
//! results are bit-deterministic.

use crate::error::NumError;
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    LayerNorm,
    RmsNorm,
}

/// Per-row statistics saved by the forward pass for the backward.
#[derive(Debug, Clone)]
pub struct NormSaved<T> {
    pub mode: NormMode,
    pub epsilon: T,
    /// Per-row mean; present only in LayerNorm mode.
    pub mu: Option<Vec<T>>,
    /// Per-row `1/sqrt(var + eps)` (LayerNorm) or `1/sqrt(mean_sq + eps)` (RMSNorm).
    pub inv_std: Vec<T>,
}

impl<T: Scalar> NormSaved<T> {
    /// Recompute the normalized rows `v̂` from the pre-norm values `v`.
    pub fn vhat(&self, v: &Matrix<T>) -> Matrix<T> {
        let mut out = v.clone();
        for i in 0..v.rows() {
            let inv = self.inv_std[i];
            let mu = self.mu.as_ref().map_or(T::zero(), |m| m[i]);
            for e in out.row_mut(i) {
                *e = (*e - mu) * inv;
            }
        }
        out
    }
}

/// Fused forward: `v = x + residual`, then normalize and apply the affine.
///
/// Returns `(y, residual_out, saved)` where `residual_out` is exactly `v`.
#[allow(clippy::type_complexity)]
pub fn norm_forward<T: Scalar>(
    x: &Matrix<T>,
    residual: &Matrix<T>,
    gamma: &[T],
    beta: &[T],
    epsilon: T,
    mode: NormMode,
) -> Result<(Matrix<T>, Matrix<T>, NormSaved<T>), NumError> {
    if x.shape() != residual.shape() {
        return Err(NumError::Shape {
            op: "norm_forward",
            detail: format!("x {:?} vs residual {:?}", x.shape(), residual.shape()),
        });
    }
    let n = x.cols();
    if gamma.len() != n || beta.len() != n {
        return Err(NumError::Shape {
            op: "norm_forward",
            detail: format!(
                "gamma/beta length {}/{} vs cols {n}",
                gamma.len(),
                beta.len()
            ),
        });
    }
    if epsilon <= T::zero() {
        return Err(NumError::BadEpsilon(epsilon.to_f64().unwrap_or(f64::NAN)));
    }

    let v = x.add(residual)?;
    let mut y = Matrix::zeros(x.rows(), n);
    let mut mu = Vec::with_capacity(x.rows());
    let mut inv_std = Vec::with_capacity(x.rows());
    let count_inv = |k: usize| T::from_f64_lossy(1.0 / k as f64);

    for i in 0..v.rows() {
        let row = v.row(i);
        let (row_mu, denom_arg) = match mode {
            NormMode::LayerNorm => {
                // Welford, strictly left to right.
                let mut mean = T::zero();
                let mut m2 = T::zero();
                for (k, &val) in row.iter().enumerate() {
                    let delta = val - mean;
                    mean += delta * count_inv(k + 1);
                    m2 += delta * (val - mean);
                }
                (mean, m2 * count_inv(n))
            }
            NormMode::RmsNorm => {
                let mut sum_sq = T::zero();
                for &val in row {
                    sum_sq += val * val;
                }
                (T::zero(), sum_sq * count_inv(n))
            }
        };
        let inv = (denom_arg + epsilon).sqrt().recip();
        mu.push(row_mu);
        inv_std.push(inv);
        for (j, &val) in row.iter().enumerate() {
            y.set(i, j, gamma[j] * ((val - row_mu) * inv) + beta[j]);
        }
    }

    let saved = NormSaved {
        mode,
        epsilon,
        mu: match mode {
            NormMode::LayerNorm => Some(mu),
            NormMode::RmsNorm => None,
        },
        inv_std,
    };
    Ok((y, v, saved))
}

/// Backward of [`norm_forward`].
///
/// For each row, with `S1 = Σ gᵢγᵢ` and `S2 = Σ (gᵢγᵢ)·v̂ᵢ`:
/// `dvᵢ = (inv_std/N)·(N·gᵢγᵢ − S1 − v̂ᵢ·S2)` (the `S1` term drops out in
/// RMSNorm mode). Because `v = x + residual`, `dv` is the gradient with
/// respect to both `x` and `residual`. Parameter gradients are the standard
/// column reductions `dγⱼ = Σₜ gₜⱼ·v̂ₜⱼ` and `dβⱼ = Σₜ gₜⱼ`.
#[allow(clippy::needless_range_loop, clippy::type_complexity)]
pub fn norm_backward<T: Scalar>(
    g: &Matrix<T>,
    saved: &NormSaved<T>,
    vhat: &Matrix<T>,
    gamma: &[T],
) -> Result<(Matrix<T>, Vec<T>, Vec<T>), NumError> {
    if g.shape() != vhat.shape() {
        return Err(NumError::Shape {
            op: "norm_backward",
            detail: format!("g {:?} vs vhat {:?}", g.shape(), vhat.shape()),
        });
    }
    if g.rows() != saved.inv_std.len() || gamma.len() != g.cols() {
        return Err(NumError::Shape {
            op: "norm_backward",
            detail: "saved statistics do not match gradient shape".into(),
        });
    }
    let n = g.cols();
    let n_t = T::from_f64_lossy(n as f64);
    let mut dx = Matrix::zeros(g.rows(), n);
    let mut dgamma = vec![T::zero(); n];
    let mut dbeta = vec![T::zero(); n];

    for i in 0..g.rows() {
        let inv = saved.inv_std[i];
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for j in 0..n {
            let gg = g.get(i, j) * gamma[j];
            s1 += gg;
            s2 += gg * vhat.get(i, j);
        }
        if saved.mode == NormMode::RmsNorm {
            s1 = T::zero();
        }
        for j in 0..n {
            let gg = g.get(i, j) * gamma[j];
            dx.set(i, j, inv / n_t * (n_t * gg - s1 - vhat.get(i, j) * s2));
            dgamma[j] += g.get(i, j) * vhat.get(i, j);
            dbeta[j] += g.get(i, j);
        }
    }
    Ok((dx, dgamma, dbeta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::finite_diff_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ones(n: usize) -> Vec<f64> {
        vec![1.0; n]
    }

    fn zeros_v(n: usize) -> Vec<f64> {
        vec![0.0; n]
    }

    #[test]
    fn constant_row_layernorm_is_zero() {
        let x = Matrix::from_rows(&[vec![2.0, 2.0, 2.0]]).unwrap();
        let r = Matrix::zeros(1, 3);
        let (y, _, _) =
            norm_forward(&x, &r, &ones(3), &zeros_v(3), 1e-6, NormMode::LayerNorm).unwrap();
        assert!(y.as_slice().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn two_point_row_layernorm_exact() {
        let x = Matrix::from_rows(&[vec![1.0, 3.0]]).unwrap();
        let r = Matrix::zeros(1, 2);
        let (y, v, saved) =
            norm_forward(&x, &r, &ones(2), &zeros_v(2), 1e-14, NormMode::LayerNorm).unwrap();
        assert_eq!(saved.mu.as_ref().unwrap()[0], 2.0);
        // Welford on [1,3]: variance is exactly 1, so inv_std is bitwise
        // 1/sqrt(1 + eps).
        assert_eq!(saved.inv_std[0], (1.0f64 + 1e-14).sqrt().recip());
        assert!((y.get(0, 0) + 1.0).abs() < 1e-9);
        assert!((y.get(0, 1) - 1.0).abs() < 1e-9);
        assert!(v.bits_eq(&x));
    }

    #[test]
    fn rmsnorm_row_exact() {
        let x = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let r = Matrix::zeros(1, 2);
        let (y, _, _) =
            norm_forward(&x, &r, &ones(2), &zeros_v(2), 1e-14, NormMode::RmsNorm).unwrap();
        // rms = sqrt(12.5)
        assert!((y.get(0, 0) - 3.0 / 12.5f64.sqrt()).abs() < 1e-9);
        assert!((y.get(0, 1) - 4.0 / 12.5f64.sqrt()).abs() < 1e-9);
        assert!((y.get(0, 0) - 0.84853).abs() < 1e-5);
        assert!((y.get(0, 1) - 1.13137).abs() < 1e-5);
    }

    #[test]
    fn residual_out_is_exact_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::<f64>::random_normal(4, 8, &mut rng);
        let r = Matrix::<f64>::random_normal(4, 8, &mut rng);
        let (_, v, _) =
            norm_forward(&x, &r, &ones(8), &zeros_v(8), 1e-6, NormMode::LayerNorm).unwrap();
        assert!(v.bits_eq(&x.add(&r).unwrap()));
    }

    #[test]
    fn normalized_rows_have_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Matrix::<f64>::random_normal(6, 16, &mut rng);
        let r = Matrix::zeros(6, 16);
        let eps = 1e-10;
        let (y, _, _) =
            norm_forward(&x, &r, &ones(16), &zeros_v(16), eps, NormMode::LayerNorm).unwrap();
        for i in 0..6 {
            let row = y.row(i);
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-12, "row mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "row var {var}");
        }
    }

    #[test]
    fn zero_gradient_gives_zero_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Matrix::<f64>::random_normal(3, 5, &mut rng);
        let r = Matrix::zeros(3, 5);
        let (_, v, saved) =
            norm_forward(&x, &r, &ones(5), &zeros_v(5), 1e-6, NormMode::LayerNorm).unwrap();
        let vhat = saved.vhat(&v);
        let g = Matrix::zeros(3, 5);
        let (dx, dgamma, dbeta) = norm_backward(&g, &saved, &vhat, &ones(5)).unwrap();
        assert!(dx.as_slice().iter().all(|v| *v == 0.0));
        assert!(dgamma.iter().chain(&dbeta).all(|v| *v == 0.0));
    }

    fn fd_check(mode: NormMode, rows: usize, cols: usize, seed: u64, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::<f64>::random_normal(rows, cols, &mut rng);
        let residual = Matrix::<f64>::random_normal(rows, cols, &mut rng);
        let gamma: Vec<f64> = (0..cols).map(|_| rng.gen_range(0.5..1.5)).collect();
        let beta: Vec<f64> = (0..cols).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let g = Matrix::<f64>::random_normal(rows, cols, &mut rng);
        let eps = 1e-5;

        let (_, v, saved) = norm_forward(&x, &residual, &gamma, &beta, eps, mode).unwrap();
        let vhat = saved.vhat(&v);
        let (dx, dgamma, dbeta) = norm_backward(&g, &saved, &vhat, &gamma).unwrap();

        // Oracle: scalar loss  L(x) = <g, norm_forward(x).y>.
        let loss = |xp: &Matrix<f64>| {
            let (y, _, _) = norm_forward(xp, &residual, &gamma, &beta, eps, mode).unwrap();
            y.as_slice()
                .iter()
                .zip(g.as_slice())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let fd = finite_diff_grad(loss, &x, 1e-6).unwrap();
        let scale = fd.frobenius_norm().max(1.0);
        assert!(
            dx.max_abs_diff(&fd) / scale < tol,
            "{mode:?} dx mismatch: {}",
            dx.max_abs_diff(&fd) / scale
        );

        // dgamma / dbeta against finite differences over the parameters.
        for j in 0..cols {
            let mut gp = gamma.clone();
            gp[j] += 1e-6;
            let (yu, _, _) = norm_forward(&x, &residual, &gp, &beta, eps, mode).unwrap();
            gp[j] -= 2e-6;
            let (yd, _, _) = norm_forward(&x, &residual, &gp, &beta, eps, mode).unwrap();
            let fd_g: f64 = yu
                .as_slice()
                .iter()
                .zip(yd.as_slice())
                .zip(g.as_slice())
                .map(|((u, d), gv)| (u - d) / 2e-6 * gv)
                .sum();
            assert!((dgamma[j] - fd_g).abs() < 1e-5, "dgamma[{j}]");
            let fd_b: f64 = (0..rows).map(|i| g.get(i, j)).sum();
            assert!((dbeta[j] - fd_b).abs() < 1e-12, "dbeta[{j}]");
        }
    }

    #[test]
    fn backward_matches_finite_differences_layernorm() {
        for seed in 0..5 {
            fd_check(NormMode::LayerNorm, 4, 8, seed, 1e-6);
        }
    }

    #[test]
    fn backward_matches_finite_differences_rmsnorm() {
        for seed in 0..5 {
            fd_check(NormMode::RmsNorm, 4, 8, 100 + seed, 1e-6);
        }
    }

    #[test]
    fn single_output_gradient_matches_fd() {
        // Upstream picks out y[0,0] only; dx must match d y00 / dx.
        let x = Matrix::from_rows(&[vec![1.0, 3.0]]).unwrap();
        let r = Matrix::zeros(1, 2);
        let eps = 1e-8;
        let (_, v, saved) =
            norm_forward(&x, &r, &ones(2), &zeros_v(2), eps, NormMode::LayerNorm).unwrap();
        let vhat = saved.vhat(&v);
        let g = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let (dx, _, _) = norm_backward(&g, &saved, &vhat, &ones(2)).unwrap();
        let fd = finite_diff_grad(
            |xp| {
                let (y, _, _) =
                    norm_forward(xp, &r, &ones(2), &zeros_v(2), eps, NormMode::LayerNorm).unwrap();
                y.get(0, 0)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(dx.max_abs_diff(&fd) < 1e-6);
    }

    #[test]
    fn sum_loss_gradient_cross_checks_unit_upstream() {
        // d(sum y)/dx computed by finite differences equals norm_backward
        // with an all-ones upstream.
        for mode in [NormMode::LayerNorm, NormMode::RmsNorm] {
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            let x = Matrix::<f64>::random_normal(4, 8, &mut rng);
            let r = Matrix::<f64>::random_normal(4, 8, &mut rng);
            let eps = 1e-5;
            let (_, v, saved) = norm_forward(&x, &r, &ones(8), &zeros_v(8), eps, mode).unwrap();
            let vhat = saved.vhat(&v);
            let g = Matrix::from_fn(4, 8, |_, _| 1.0);
            let (dx, _, _) = norm_backward(&g, &saved, &vhat, &ones(8)).unwrap();
            let fd = finite_diff_grad(
                |xp| {
                    let (y, _, _) = norm_forward(xp, &r, &ones(8), &zeros_v(8), eps, mode).unwrap();
                    y.as_slice().iter().sum()
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(dx.max_abs_diff(&fd) < 1e-6, "{mode:?}");
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let x: Matrix<f64> = Matrix::zeros(2, 3);
        let r: Matrix<f64> = Matrix::zeros(3, 2);
        assert!(norm_forward(&x, &r, &ones(3), &zeros_v(3), 1e-6, NormMode::LayerNorm).is_err());
        let r: Matrix<f64> = Matrix::zeros(2, 3);
        assert!(matches!(
            norm_forward(&x, &r, &ones(3), &zeros_v(3), 0.0, NormMode::LayerNorm),
            Err(NumError::BadEpsilon(_))
        ));
        assert!(norm_forward(&x, &r, &ones(2), &zeros_v(3), 1e-6, NormMode::LayerNorm).is_err());
    }

    #[test]
    fn fp32_path_with_bf16_io_stays_close_to_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x64 = Matrix::<f64>::random_normal(4, 16, &mut rng);
        let x32 = Matrix::<f32>::from_fn(4, 16, |i, j| x64.get(i, j) as f32).to_bf16_view();
        let r32 = Matrix::<f32>::zeros(4, 16);
        let (y32, _, _) = norm_forward(
            &x32,
            &r32,
            &[1.0f32; 16],
            &[0.0f32; 16],
            1e-5,
            NormMode::RmsNorm,
        )
        .unwrap();
        let r64 = Matrix::<f64>::zeros(4, 16);
        let (y64, _, _) = norm_forward(
            &x64,
            &r64,
            &[1.0f64; 16],
            &[0.0f64; 16],
            1e-5,
            NormMode::RmsNorm,
        )
        .unwrap();
        for (a, b) in y32.as_slice().iter().zip(y64.as_slice()) {
            assert!(
                (*a as f64 - b).abs() < 0.05,
                "bf16 path drifted: {a} vs {b}"
            );
        }
    }
}
