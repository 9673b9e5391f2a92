//! Muon optimizer building blocks: the momentum pass, Newton-Schulz
//! orthogonalization built on a symmetric Gram-matrix multiply, and the
//! decoupled weight-decay update, plus an AdamW step for non-2D parameters.

use crate::error::NumError;
use crate::matrix::{gemm, Matrix};
use crate::scalar::Scalar;

/// Standard quintic coefficients for the Newton-Schulz iteration.
pub const DEFAULT_NS_COEFFS: (f64, f64, f64) = (3.4445, -4.7750, 2.0315);

/// Configuration for the Muon update.
#[derive(Debug, Clone)]
pub struct MuonConfig {
    /// Momentum coefficient, in `[0, 1)`.
    pub mu: f64,
    /// Nesterov-style momentum for the orthogonalization input.
    pub nesterov: bool,
    /// Base learning rate shared with AdamW-optimized parameters.
    pub eta: f64,
    /// Decoupled weight decay.
    pub delta: f64,
    /// Newton-Schulz iteration count.
    pub ns_steps: usize,
    /// Quintic coefficients `(a, b, c)`.
    pub ns_coeffs: (f64, f64, f64),
    /// RMS-matching constant applied as `eta * c * sqrt(max(rows, cols))`.
    pub rms_match_constant: f64,
    /// Divide the NS input by its Frobenius norm (+1e-7) before iterating.
    pub normalize_input: bool,
    /// Transpose tall matrices (rows > cols) before NS, back after.
    pub transpose_rect: bool,
    /// Output-tile edge for the symmetric Gram multiply.
    pub gram_tile: usize,
}

impl Default for MuonConfig {
    fn default() -> Self {
        Self {
            mu: 0.95,
            nesterov: true,
            eta: 0.02,
            delta: 0.0,
            ns_steps: 5,
            ns_coeffs: DEFAULT_NS_COEFFS,
            rms_match_constant: 0.2,
            normalize_input: true,
            transpose_rect: true,
            gram_tile: 16,
        }
    }
}

/// High-precision per-parameter Muon state.
#[derive(Debug, Clone)]
pub struct MuonState<T> {
    pub momentum: Matrix<T>,
    pub master: Matrix<T>,
}

impl<T: Scalar> MuonState<T> {
    pub fn new(initial: Matrix<T>) -> Self {
        Self {
            momentum: Matrix::zeros(initial.rows(), initial.cols()),
            master: initial,
        }
    }
}

/// Update the momentum buffer in place and return the NS input:
/// `m ← μ·m + g`, then `m` (plain) or `g + μ·m` (Nesterov).
pub fn momentum_pass<T: Scalar>(
    momentum: &mut Matrix<T>,
    g: &Matrix<T>,
    cfg: &MuonConfig,
) -> Result<Matrix<T>, NumError> {
    if momentum.shape() != g.shape() {
        return Err(NumError::Shape {
            op: "momentum_pass",
            detail: format!("momentum {:?} vs grad {:?}", momentum.shape(), g.shape()),
        });
    }
    if !g.all_finite() {
        return Err(NumError::NonFinite("momentum_pass gradient"));
    }
    let mu = T::from_f64_lossy(cfg.mu);
    for (m, gv) in momentum.as_mut_slice().iter_mut().zip(g.as_slice()) {
        *m = mu * *m + *gv;
    }
    if cfg.nesterov {
        g.zip_with(momentum, "momentum_pass", |gv, m| gv + mu * m)
    } else {
        Ok(momentum.clone())
    }
}

/// `A = X·Xᵀ`, computed by evaluating only upper-triangular output tiles and
/// mirroring them, so `A[i][j]` is bitwise identical to `A[j][i]`.
///
/// Each entry accumulates the row dot product left to right, matching
/// `gemm(X, Xᵀ)` exactly; results are independent of `tile`.
pub fn symmetric_gram<T: Scalar>(x: &Matrix<T>, tile: usize) -> Matrix<T> {
    let m = x.rows();
    let bs = tile.max(1);
    let mut out = Matrix::zeros(m, m);
    let mut ti = 0;
    while ti < m {
        let i_end = (ti + bs).min(m);
        let mut tj = ti;
        while tj < m {
            let j_end = (tj + bs).min(m);
            for i in ti..i_end {
                // Inside the diagonal tile only the upper half is computed.
                let j_start = if ti == tj { i.max(tj) } else { tj };
                for j in j_start..j_end {
                    let mut acc = T::zero();
                    for k in 0..x.cols() {
                        acc += x.get(i, k) * x.get(j, k);
                    }
                    out.set(i, j, acc);
                    out.set(j, i, acc);
                }
            }
            tj = j_end;
        }
        ti = i_end;
    }
    out
}

/// Newton-Schulz orthogonalization: `X ← aX + b(XXᵀ)X + c(XXᵀ)²X`, with the
/// Gram matrix and its square both produced by [`symmetric_gram`]
/// (`A² = A·Aᵀ` because `A` is symmetric).
pub fn newton_schulz<T: Scalar>(x: &Matrix<T>, cfg: &MuonConfig) -> Result<Matrix<T>, NumError> {
    if x.as_slice().iter().all(|v| *v == T::zero()) {
        return Err(NumError::ZeroInput("newton_schulz"));
    }
    if !x.all_finite() {
        return Err(NumError::NonFinite("newton_schulz input"));
    }
    let transpose = cfg.transpose_rect && x.rows() > x.cols();
    let mut cur = if transpose { x.transposed() } else { x.clone() };
    if cfg.normalize_input {
        let norm = cur.frobenius_norm() + T::from_f64_lossy(1e-7);
        cur = cur.scale(norm.recip());
    }
    let (a, b, c) = cfg.ns_coeffs;
    let (a, b, c) = (
        T::from_f64_lossy(a),
        T::from_f64_lossy(b),
        T::from_f64_lossy(c),
    );
    for _ in 0..cfg.ns_steps {
        let gram = symmetric_gram(&cur, cfg.gram_tile);
        let gram_sq = symmetric_gram(&gram, cfg.gram_tile);
        let poly = gram.zip_with(&gram_sq, "newton_schulz", |g, g2| b * g + c * g2)?;
        let update = gemm(&poly, &cur, false, false)?;
        cur = cur.zip_with(&update, "newton_schulz", |xv, uv| a * xv + uv)?;
    }
    Ok(if transpose { cur.transposed() } else { cur })
}

/// RMS-matching factor `c · sqrt(max(rows, cols))`.
pub fn rms_match_factor(rows: usize, cols: usize, constant: f64) -> f64 {
    constant * (rows.max(cols) as f64).sqrt()
}

/// Apply decoupled weight decay then the orthogonalized update to the master
/// weights: `w ← (1 − ηδ)·w`, `w ← w − λ·NS_out` with
/// `λ = η · c · sqrt(max(rows, cols))`.
pub fn weight_update<T: Scalar>(
    master: &mut Matrix<T>,
    ns_out: &Matrix<T>,
    cfg: &MuonConfig,
) -> Result<(), NumError> {
    if master.shape() != ns_out.shape() {
        return Err(NumError::Shape {
            op: "weight_update",
            detail: format!("master {:?} vs ns_out {:?}", master.shape(), ns_out.shape()),
        });
    }
    if !ns_out.all_finite() {
        return Err(NumError::NonFinite("weight_update ns_out"));
    }
    let decay = T::from_f64_lossy(1.0 - cfg.eta * cfg.delta);
    let lambda = T::from_f64_lossy(
        cfg.eta * rms_match_factor(master.rows(), master.cols(), cfg.rms_match_constant),
    );
    for (w, u) in master.as_mut_slice().iter_mut().zip(ns_out.as_slice()) {
        *w = decay * *w;
        *w -= lambda * *u;
    }
    Ok(())
}

/// One full single-rank Muon step: momentum, orthogonalization, update.
pub fn muon_step<T: Scalar>(
    state: &mut MuonState<T>,
    g: &Matrix<T>,
    cfg: &MuonConfig,
) -> Result<(), NumError> {
    let ns_in = momentum_pass(&mut state.momentum, g, cfg)?;
    let ns_out = newton_schulz(&ns_in, cfg)?;
    weight_update(&mut state.master, &ns_out, cfg)
}

/// AdamW moment buffers for a flat parameter group.
#[derive(Debug, Clone)]
pub struct AdamWState<T> {
    pub m1: Vec<T>,
    pub m2: Vec<T>,
    pub step: u64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m1: vec![T::zero(); len],
            m2: vec![T::zero(); len],
            step: 0,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }

    pub fn with_betas(len: usize, betas: (f64, f64), eps: f64) -> Self {
        Self {
            m1: vec![T::zero(); len],
            m2: vec![T::zero(); len],
            step: 0,
            betas,
            eps,
        }
    }
}

/// Elementwise AdamW over flat slices: decoupled decay, bias-corrected
/// moments. `w` and `g` must match the state length.
pub fn adamw_step_slice<T: Scalar>(
    state: &mut AdamWState<T>,
    w: &mut [T],
    g: &[T],
    eta: f64,
    delta: f64,
) -> Result<(), NumError> {
    if w.len() != g.len() || w.len() != state.m1.len() {
        return Err(NumError::Shape {
            op: "adamw_step",
            detail: format!("w {} / g {} / state {}", w.len(), g.len(), state.m1.len()),
        });
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(NumError::NonFinite("adamw_step gradient"));
    }
    state.step += 1;
    let (b1, b2) = state.betas;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    let (b1, b2) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
    let (ob1, ob2) = (T::one() - b1, T::one() - b2);
    let (bc1, bc2) = (T::from_f64_lossy(bc1), T::from_f64_lossy(bc2));
    let eps = T::from_f64_lossy(state.eps);
    let eta_t = T::from_f64_lossy(eta);
    let decay = T::from_f64_lossy(1.0 - eta * delta);
    for i in 0..w.len() {
        w[i] = decay * w[i];
        state.m1[i] = b1 * state.m1[i] + ob1 * g[i];
        state.m2[i] = b2 * state.m2[i] + ob2 * g[i] * g[i];
        let mhat = state.m1[i] / bc1;
        let vhat = state.m2[i] / bc2;
        w[i] -= eta_t * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Matrix-shaped wrapper over [`adamw_step_slice`].
pub fn adamw_step<T: Scalar>(
    state: &mut AdamWState<T>,
    w: &mut Matrix<T>,
    g: &Matrix<T>,
    eta: f64,
    delta: f64,
) -> Result<(), NumError> {
    if w.shape() != g.shape() {
        return Err(NumError::Shape {
            op: "adamw_step",
            detail: format!("w {:?} vs g {:?}", w.shape(), g.shape()),
        });
    }
    adamw_step_slice(state, w.as_mut_slice(), g.as_slice(), eta, delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> MuonConfig {
        MuonConfig::default()
    }

    #[test]
    fn momentum_mu_zero_passes_gradient_through() {
        let g = Matrix::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let mut m = Matrix::zeros(1, 2);
        let mut c = cfg();
        c.mu = 0.0;
        c.nesterov = false;
        let ns_in = momentum_pass(&mut m, &g, &c).unwrap();
        assert!(ns_in.bits_eq(&g));
        assert!(m.bits_eq(&g));
    }

    #[test]
    fn momentum_recurrence_unrolled() {
        let mut c = cfg();
        c.mu = 0.9;
        c.nesterov = false;
        let g = Matrix::<f64>::from_rows(&[vec![1.0]]).unwrap();
        let mut m = Matrix::zeros(1, 1);
        let first = momentum_pass(&mut m, &g, &c).unwrap();
        assert_eq!(first.get(0, 0), 1.0);
        let second = momentum_pass(&mut m, &g, &c).unwrap();
        assert!((second.get(0, 0) - 1.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_nesterov_emits_g_plus_mu_m() {
        let mut c = cfg();
        c.mu = 0.9;
        c.nesterov = true;
        let g = Matrix::<f64>::from_rows(&[vec![1.0]]).unwrap();
        // Seed momentum so the post-update buffer is exactly 1.0.
        let mut m = Matrix::from_rows(&[vec![0.0]]).unwrap();
        let ns_in = momentum_pass(&mut m, &g, &c).unwrap();
        assert_eq!(m.get(0, 0), 1.0);
        assert!((ns_in.get(0, 0) - 1.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_rejects_non_finite() {
        let g = Matrix::from_rows(&[vec![f64::NAN]]).unwrap();
        let mut m = Matrix::zeros(1, 1);
        assert!(matches!(
            momentum_pass(&mut m, &g, &cfg()),
            Err(NumError::NonFinite(_))
        ));
    }

    #[test]
    fn gram_of_identity_is_identity() {
        let i3 = Matrix::<f64>::identity(3);
        assert!(symmetric_gram(&i3, 16).bits_eq(&i3));
    }

    #[test]
    fn gram_hand_computed() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let a = symmetric_gram(&x, 16);
        assert_eq!(a.as_slice(), &[5.0, 11.0, 11.0, 25.0]);
    }

    #[test]
    fn gram_matches_gemm_exactly_and_is_bitwise_symmetric() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = rng.gen_range(1..=64);
            let k = rng.gen_range(1..=64);
            let x = Matrix::<f64>::random_normal(m, k, &mut rng);
            let tile = *[1usize, 3, 16, 64].get((seed % 4) as usize).unwrap();
            let a = symmetric_gram(&x, tile);
            let oracle = gemm(&x, &x, false, true).unwrap();
            assert!(a.bits_eq(&oracle), "seed {seed} tile {tile}");
            for i in 0..m {
                for j in 0..m {
                    assert_eq!(a.get(i, j).to_bits(), a.get(j, i).to_bits());
                }
            }
        }
    }

    #[test]
    fn ns_identity_single_step_scales_by_quintic_sum() {
        let mut c = cfg();
        c.ns_steps = 1;
        c.normalize_input = false;
        let i4 = Matrix::<f64>::identity(4);
        let out = newton_schulz(&i4, &c).unwrap();
        let (a, b, cc) = c.ns_coeffs;
        let expected = a + b + cc;
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { expected } else { 0.0 };
                assert!((out.get(i, j) - want).abs() < 1e-12);
            }
        }
        // For the standard coefficients the sum is 0.7010.
        assert!((expected - 0.7010).abs() < 1e-12);
    }

    #[test]
    fn ns_zero_input_is_error() {
        let z = Matrix::<f64>::zeros(3, 3);
        assert!(matches!(
            newton_schulz(&z, &cfg()),
            Err(NumError::ZeroInput(_))
        ));
    }

    /// Scalar oracle: the NS step maps each singular value through
    /// `p(s) = a·s + b·s³ + c·s⁵` independently.
    fn quintic_iterate(mut s: f64, steps: usize, (a, b, c): (f64, f64, f64)) -> f64 {
        for _ in 0..steps {
            s = a * s + b * s.powi(3) + c * s.powi(5);
        }
        s
    }

    #[test]
    fn ns_diagonal_matches_scalar_recurrence() {
        // diag(1, 0.5), Frobenius-normalized, 5 steps: both singular values
        // follow the scalar quintic exactly. The oscillatory iterate lands
        // at ~0.689 and ~1.114 on step 5.
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.5]]).unwrap();
        let out = newton_schulz(&x, &cfg()).unwrap();
        let norm = (1.0f64 + 0.25).sqrt() + 1e-7;
        for (idx, s0) in [1.0 / norm, 0.5 / norm].into_iter().enumerate() {
            let want = quintic_iterate(s0, 5, DEFAULT_NS_COEFFS);
            let got = out.get(idx, idx);
            assert!((got - want).abs() < 1e-9, "sv {idx}: {got} vs {want}");
            assert!((0.6..=1.4).contains(&got), "sv {idx} out of band: {got}");
        }
    }

    #[test]
    fn ns_orthogonal_input_stays_in_its_span() {
        // One step on an orthogonal matrix returns a scalar multiple of it.
        let theta = 0.3f64;
        let q = Matrix::from_rows(&[
            vec![theta.cos(), -theta.sin()],
            vec![theta.sin(), theta.cos()],
        ])
        .unwrap();
        let mut c = cfg();
        c.ns_steps = 1;
        let out = newton_schulz(&q, &c).unwrap();
        let s = out
            .as_slice()
            .iter()
            .zip(q.as_slice())
            .map(|(o, qq)| o * qq)
            .sum::<f64>()
            / q.as_slice().iter().map(|v| v * v).sum::<f64>();
        let diff = out
            .zip_with(&q.scale(s), "test", |a, b| a - b)
            .unwrap()
            .frobenius_norm();
        assert!(diff <= 1e-6, "Frobenius distance to span {diff}");
    }

    #[test]
    fn ns_rectangular_transposes_and_restores_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tall = Matrix::<f64>::random_normal(12, 4, &mut rng);
        let out = newton_schulz(&tall, &cfg()).unwrap();
        assert_eq!(out.shape(), (12, 4));
        // Wide input takes the direct path; both orientations agree up to
        // transposition.
        let wide = tall.transposed();
        let out_wide = newton_schulz(&wide, &cfg()).unwrap();
        assert!(out_wide.transposed().max_abs_diff(&out) < 1e-12);
    }

    #[test]
    fn ns_bulk_singular_values_of_gaussian_land_near_one() {
        // The bulk of a Frobenius-normalized Gaussian (sv ~ 0.12..0.25)
        // contracts into the oscillation band of the quintic. The smallest
        // singular values do NOT recover in 5 steps; see the acceptance
        // suite for the measured distribution.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Matrix::<f64>::random_normal(64, 64, &mut rng);
        let out = newton_schulz(&x, &cfg()).unwrap();
        let na = nalgebra::DMatrix::from_fn(64, 64, |i, j| out.get(i, j));
        let svs = na.singular_values();
        let max = svs.iter().cloned().fold(0.0f64, f64::max);
        assert!((0.6..=1.4).contains(&max), "max sv {max}");
    }

    #[test]
    fn weight_update_noop_when_rates_zero() {
        let mut c = cfg();
        c.eta = 0.0;
        c.delta = 0.0;
        let mut w = Matrix::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let orig = w.clone();
        weight_update(&mut w, &Matrix::from_rows(&[vec![5.0, 5.0]]).unwrap(), &c).unwrap();
        assert!(w.bits_eq(&orig));
    }

    #[test]
    fn rms_match_factor_closed_forms() {
        assert!((rms_match_factor(25, 25, 0.2) - 1.0).abs() < 1e-15);
        assert!((rms_match_factor(2048, 2048, 0.2) - 9.050966799187809).abs() < 1e-12);
        assert!((rms_match_factor(2048, 2048, 0.2) - 9.0510).abs() < 1e-4);
    }

    #[test]
    fn weight_update_applies_decay_then_update() {
        let mut c = cfg();
        c.eta = 0.1;
        c.delta = 0.5;
        c.rms_match_constant = 0.2;
        let mut w = Matrix::<f64>::from_rows(&[vec![1.0]]).unwrap();
        let ns_out = Matrix::from_rows(&[vec![2.0]]).unwrap();
        weight_update(&mut w, &ns_out, &c).unwrap();
        // lambda = 0.1 * 0.2 * sqrt(1) = 0.02; w = (1 - 0.05)*1 - 0.02*2
        assert!((w.get(0, 0) - (0.95 - 0.04)).abs() < 1e-15);
    }

    #[test]
    fn adamw_zero_gradient_only_decays() {
        let mut st = AdamWState::<f64>::new(1);
        let mut w = vec![1.0];
        adamw_step_slice(&mut st, &mut w, &[0.0], 0.1, 0.1).unwrap();
        assert!((w[0] - 0.99).abs() < 1e-15);
        // and with delta = 0 nothing moves at all
        let mut st = AdamWState::<f64>::new(1);
        let mut w = vec![1.0];
        adamw_step_slice(&mut st, &mut w, &[0.0], 0.1, 0.0).unwrap();
        assert_eq!(w[0], 1.0);
    }

    #[test]
    fn adamw_first_step_moves_by_learning_rate() {
        let mut st = AdamWState::<f64>::new(1);
        let mut w = vec![0.0];
        adamw_step_slice(&mut st, &mut w, &[1.0], 0.1, 0.0).unwrap();
        // Bias correction makes the first update eta * g/|g| up to eps.
        assert!((w[0] + 0.1).abs() < 1e-6, "w = {}", w[0]);
    }

    #[test]
    fn full_muon_step_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let w0 = Matrix::<f64>::random_normal(8, 6, &mut rng);
            let mut state = MuonState::new(w0);
            let mut c = cfg();
            c.eta = 0.05;
            c.delta = 0.1;
            for step in 0..3 {
                let mut grng = ChaCha8Rng::seed_from_u64(1000 + step);
                let g = Matrix::<f64>::random_normal(8, 6, &mut grng);
                muon_step(&mut state, &g, &c).unwrap();
            }
            state.master
        };
        assert!(run().bits_eq(&run()));
    }
}
