//! Expert router: down-projection, depth-aware mixing of the previous
//! layer's representation, a three-layer GeLU MLP over an RMS-normalized
//! latent, softmax scores, and biased top-k selection. The selection bias is
//! steered toward uniform expert load by a PID controller with Adam-style
//! smoothing.

use super::ModelError;
use crate::matrix::{gemm, Matrix};
use crate::norm::{norm_backward, norm_forward, NormMode, NormSaved};
use crate::scalar::Scalar;

const RMS_EPS: f64 = 1e-6;

/// Router parameters and cross-layer state.
#[derive(Debug, Clone)]
pub struct RouterState<T> {
    /// hidden × router_dim down-projection.
    pub w_down: Matrix<T>,
    /// router_dim × router_dim hidden layers.
    pub mlp1: Matrix<T>,
    pub mlp2: Matrix<T>,
    /// router_dim × experts output layer.
    pub logits_w: Matrix<T>,
    /// Learned coefficient mixing in the previous layer's representation.
    pub gamma: T,
    /// Previous layer's down-projected representation; `None` on layer 0.
    pub prev_r: Option<Matrix<T>>,
    /// Per-expert selection bias (load balancing only).
    pub bias: Vec<T>,
}

impl<T: Scalar> RouterState<T> {
    pub fn new(
        w_down: Matrix<T>,
        mlp1: Matrix<T>,
        mlp2: Matrix<T>,
        logits_w: Matrix<T>,
        gamma: T,
    ) -> Self {
        let experts = logits_w.cols();
        Self {
            w_down,
            mlp1,
            mlp2,
            logits_w,
            gamma,
            prev_r: None,
            bias: vec![T::zero(); experts],
        }
    }

    pub fn experts(&self) -> usize {
        self.logits_w.cols()
    }

    pub fn param_count(&self) -> usize {
        self.w_down.numel() + self.mlp1.numel() + self.mlp2.numel() + self.logits_w.numel()
    }
}

/// Routing decision for a batch of tokens.
#[derive(Debug, Clone)]
pub struct RouterOutput<T> {
    /// tokens × experts softmax scores (rows sum to 1).
    pub scores: Matrix<T>,
    /// Top-k expert ids per token, selected on `scores + bias`.
    pub chosen: Vec<Vec<usize>>,
    /// Softmax scores of the chosen experts (bias never enters the weight).
    pub probs: Vec<Vec<T>>,
    /// Post-mixing latent, tokens × router_dim.
    pub r: Matrix<T>,
}

impl<T: Scalar> RouterOutput<T> {
    /// Fraction of routed slots landing on each expert.
    pub fn expert_loads(&self, experts: usize) -> Vec<T> {
        let mut counts = vec![0usize; experts];
        let mut total = 0usize;
        for token in &self.chosen {
            for &e in token {
                counts[e] += 1;
                total += 1;
            }
        }
        counts
            .into_iter()
            .map(|c| T::from_f64_lossy(c as f64 / total.max(1) as f64))
            .collect()
    }
}

/// Intermediates retained for the backward pass.
pub struct RouterTrace<T> {
    pub x: Matrix<T>,
    /// Representation mixed in from the previous layer, if any.
    pub prev_r: Option<Matrix<T>>,
    /// Representation after depth mixing (what `prev_r` becomes).
    pub r: Matrix<T>,
    pub rms_saved: NormSaved<T>,
    pub z: Matrix<T>,
    pub h1_pre: Matrix<T>,
    pub h1: Matrix<T>,
    pub h2_pre: Matrix<T>,
    pub h2: Matrix<T>,
    pub scores: Matrix<T>,
}

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    half * x * (T::one() + Scalar::erf(x * inv_sqrt2))
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt2pi = T::from_f64_lossy(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    half * (T::one() + Scalar::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * (-x * x * half).exp()
}

fn softmax_rows<T: Scalar>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
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

/// Top-k indices of `scores[i] + bias`, ties broken toward the lower index.
fn select_top_k<T: Scalar>(scores: &Matrix<T>, bias: &[T], k: usize) -> Vec<Vec<usize>> {
    (0..scores.rows())
        .map(|i| {
            let mut idx: Vec<usize> = (0..scores.cols()).collect();
            idx.sort_by(|&a, &b| {
                let va = scores.get(i, a) + bias[a];
                let vb = scores.get(i, b) + bias[b];
                vb.partial_cmp(&va).unwrap().then(a.cmp(&b))
            });
            idx.truncate(k);
            idx
        })
        .collect()
}

/// Forward pass over a token batch, advancing the cross-layer state.
pub fn router_forward<T: Scalar>(
    x: &Matrix<T>,
    state: &mut RouterState<T>,
    k: usize,
) -> Result<RouterOutput<T>, ModelError> {
    let (out, trace) = router_forward_trace(x, state, k)?;
    drop(trace);
    Ok(out)
}

/// Forward pass that also returns the intermediates for [`router_backward`].
pub fn router_forward_trace<T: Scalar>(
    x: &Matrix<T>,
    state: &mut RouterState<T>,
    k: usize,
) -> Result<(RouterOutput<T>, RouterTrace<T>), ModelError> {
    if !x.all_finite() {
        return Err(ModelError::NonFinite("router input"));
    }
    if x.cols() != state.w_down.rows() {
        return Err(ModelError::Shape {
            op: "router_forward",
            detail: format!("x {:?} vs w_down {:?}", x.shape(), state.w_down.shape()),
        });
    }
    let prev_r_in = state.prev_r.clone();
    let mut r = gemm(x, &state.w_down, false, false)?;
    if let Some(prev) = &prev_r_in {
        if prev.shape() != r.shape() {
            return Err(ModelError::Shape {
                op: "router_forward",
                detail: format!("prev_r {:?} vs r {:?}", prev.shape(), r.shape()),
            });
        }
        // A zero coefficient must leave the representation bitwise intact
        // (adding 0·p would flip the sign of -0.0 entries).
        if state.gamma != T::zero() {
            r = r.zip_with(prev, "router eda", |cur, p| cur + state.gamma * p)?;
        }
    }

    let zeros = Matrix::zeros(r.rows(), r.cols());
    let ones = vec![T::one(); r.cols()];
    let betas = vec![T::zero(); r.cols()];
    let (z, _, rms_saved) = norm_forward(
        &r,
        &zeros,
        &ones,
        &betas,
        T::from_f64_lossy(RMS_EPS),
        NormMode::RmsNorm,
    )?;

    let h1_pre = gemm(&z, &state.mlp1, false, false)?;
    let h1 = h1_pre.map(gelu);
    let h2_pre = gemm(&h1, &state.mlp2, false, false)?;
    let h2 = h2_pre.map(gelu);
    let logits = gemm(&h2, &state.logits_w, false, false)?;
    if !logits.all_finite() {
        return Err(ModelError::NonFinite("router logits"));
    }
    let scores = softmax_rows(&logits);
    let chosen = select_top_k(&scores, &state.bias, k.min(state.experts()));
    let probs = chosen
        .iter()
        .enumerate()
        .map(|(i, picks)| picks.iter().map(|&e| scores.get(i, e)).collect())
        .collect();

    state.prev_r = Some(r.clone());
    let out = RouterOutput {
        scores: scores.clone(),
        chosen,
        probs,
        r: r.clone(),
    };
    let trace = RouterTrace {
        x: x.clone(),
        prev_r: prev_r_in,
        r,
        rms_saved,
        z,
        h1_pre,
        h1,
        h2_pre,
        h2,
        scores,
    };
    Ok((out, trace))
}

/// Gradients of the router parameters and input.
pub struct RouterGrads<T> {
    pub dx: Matrix<T>,
    pub dw_down: Matrix<T>,
    pub dmlp1: Matrix<T>,
    pub dmlp2: Matrix<T>,
    pub dlogits_w: Matrix<T>,
    pub dgamma: T,
}

/// Backward pass from a gradient on the softmax scores. The previous layer's
/// representation is treated as a constant input.
pub fn router_backward<T: Scalar>(
    trace: &RouterTrace<T>,
    state: &RouterState<T>,
    dscores: &Matrix<T>,
) -> Result<RouterGrads<T>, ModelError> {
    // Softmax backward per row: dlogits = s ⊙ (ds − <ds, s>).
    let mut dlogits = trace.scores.clone();
    for i in 0..dlogits.rows() {
        let mut dot = T::zero();
        for j in 0..dlogits.cols() {
            dot += dscores.get(i, j) * trace.scores.get(i, j);
        }
        for j in 0..dlogits.cols() {
            let s = trace.scores.get(i, j);
            dlogits.set(i, j, s * (dscores.get(i, j) - dot));
        }
    }

    let dlogits_w = gemm(&trace.h2, &dlogits, true, false)?;
    let dh2 = gemm(&dlogits, &state.logits_w, false, true)?;
    let dh2_pre = dh2.zip_with(&trace.h2_pre, "router bwd", |g, pre| g * gelu_grad(pre))?;
    let dmlp2 = gemm(&trace.h1, &dh2_pre, true, false)?;
    let dh1 = gemm(&dh2_pre, &state.mlp2, false, true)?;
    let dh1_pre = dh1.zip_with(&trace.h1_pre, "router bwd", |g, pre| g * gelu_grad(pre))?;
    let dmlp1 = gemm(&trace.z, &dh1_pre, true, false)?;
    let dz = gemm(&dh1_pre, &state.mlp1, false, true)?;

    let ones = vec![T::one(); dz.cols()];
    let vhat = trace.rms_saved.vhat(&trace.r);
    let (dr, _, _) = norm_backward(&dz, &trace.rms_saved, &vhat, &ones)?;

    // Depth mixing: r = x·W_down + γ·prev_r.
    let dgamma = match &trace.prev_r {
        Some(prev) => dr
            .as_slice()
            .iter()
            .zip(prev.as_slice())
            .map(|(&g, &p)| g * p)
            .fold(T::zero(), |acc, v| acc + v),
        None => T::zero(),
    };
    let dw_down = gemm(&trace.x, &dr, true, false)?;
    let dx = gemm(&dr, &state.w_down, false, true)?;
    Ok(RouterGrads {
        dx,
        dw_down,
        dmlp1,
        dmlp2,
        dlogits_w,
        dgamma,
    })
}

/// PID controller state for the per-expert selection bias.
#[derive(Debug, Clone)]
pub struct PidBalancer<T> {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Bias step size.
    pub lr: f64,
    pub integral: Vec<T>,
    pub prev_error: Vec<T>,
    m1: Vec<T>,
    m2: Vec<T>,
    step: u64,
    betas: (f64, f64),
    eps: f64,
}

impl<T: Scalar> PidBalancer<T> {
    pub fn new(experts: usize) -> Self {
        Self {
            kp: 0.01,
            ki: 0.001,
            kd: 0.001,
            lr: 0.01,
            integral: vec![T::zero(); experts],
            prev_error: vec![T::zero(); experts],
            m1: vec![T::zero(); experts],
            m2: vec![T::zero(); experts],
            step: 0,
            betas: (0.9, 0.95),
            eps: 1e-8,
        }
    }

    /// One balancing update from the observed per-expert load fractions.
    ///
    /// The control `u = kp·e + ki·∫e + kd·Δe` is smoothed through internal
    /// Adam-style moment estimates before it moves the bias, so an expert
    /// receiving more than its share has its selection bias lowered.
    pub fn update(&mut self, loads: &[T], bias: &mut [T]) -> Result<(), ModelError> {
        let experts = self.integral.len();
        if loads.len() != experts || bias.len() != experts {
            return Err(ModelError::Shape {
                op: "pid_bias_update",
                detail: format!(
                    "loads {} / bias {} vs experts {experts}",
                    loads.len(),
                    bias.len()
                ),
            });
        }
        let sum = loads
            .iter()
            .fold(T::zero(), |acc, &v| acc + v)
            .to_f64()
            .unwrap_or(f64::NAN);
        if !(sum - 1.0).abs().is_finite() || (sum - 1.0).abs() > 1e-9 {
            return Err(ModelError::NotADistribution(sum));
        }
        self.step += 1;
        let target = T::from_f64_lossy(1.0 / experts as f64);
        let (b1, b2) = (
            T::from_f64_lossy(self.betas.0),
            T::from_f64_lossy(self.betas.1),
        );
        let bc1 = T::from_f64_lossy(1.0 - self.betas.0.powi(self.step as i32));
        let bc2 = T::from_f64_lossy(1.0 - self.betas.1.powi(self.step as i32));
        let eps = T::from_f64_lossy(self.eps);
        let (kp, ki, kd, lr) = (
            T::from_f64_lossy(self.kp),
            T::from_f64_lossy(self.ki),
            T::from_f64_lossy(self.kd),
            T::from_f64_lossy(self.lr),
        );
        for i in 0..experts {
            let e = loads[i] - target;
            self.integral[i] += e;
            let u = kp * e + ki * self.integral[i] + kd * (e - self.prev_error[i]);
            self.prev_error[i] = e;
            self.m1[i] = b1 * self.m1[i] + (T::one() - b1) * u;
            self.m2[i] = b2 * self.m2[i] + (T::one() - b2) * u * u;
            let mhat = self.m1[i] / bc1;
            let vhat = self.m2[i] / bc2;
            bias[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Deterministic closed-loop balancing experiment: a stream of synthetic
/// softmax scores where `skew_fraction` of each step's tokens carry a logit
/// boost on expert 0, routed top-1 on `scores + bias` with the PID balancer
/// adjusting the bias after every step. Returns the max per-expert load
/// fraction observed at each step.
pub fn run_balance_experiment(
    experts: usize,
    tokens_per_step: usize,
    steps: usize,
    skew_fraction: f64,
    boost: f64,
    seed: u64,
) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut balancer = PidBalancer::<f64>::new(experts);
    let mut bias = vec![0.0f64; experts];
    let mut history = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut logits = Matrix::from_fn(tokens_per_step, experts, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        for i in 0..tokens_per_step {
            if rng.gen_range(0.0..1.0) < skew_fraction {
                logits.set(i, 0, logits.get(i, 0) + boost);
            }
        }
        let scores = softmax_rows(&logits);
        let chosen = select_top_k(&scores, &bias, 1);
        let mut counts = vec![0usize; experts];
        for picks in &chosen {
            counts[picks[0]] += 1;
        }
        let loads: Vec<f64> = counts
            .iter()
            .map(|&c| c as f64 / tokens_per_step as f64)
            .collect();
        history.push(loads.iter().cloned().fold(0.0, f64::max));
        balancer.update(&loads, &mut bias).expect("valid loads");
    }
    history
}

/// Elementwise gate and shift: `y = α ⊙ x + b`, one coefficient pair per
/// hidden channel.
#[derive(Debug, Clone)]
pub struct ResidualScaleParams<T> {
    pub alpha: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ResidualScaleParams<T> {
    /// Identity at initialization: gate 1, shift 0.
    pub fn identity(width: usize) -> Self {
        Self {
            alpha: vec![T::one(); width],
            bias: vec![T::zero(); width],
        }
    }

    pub fn param_count(&self) -> usize {
        self.alpha.len() + self.bias.len()
    }
}

pub fn residual_scale<T: Scalar>(
    x: &Matrix<T>,
    params: &ResidualScaleParams<T>,
) -> Result<Matrix<T>, ModelError> {
    if x.cols() != params.alpha.len() || x.cols() != params.bias.len() {
        return Err(ModelError::Shape {
            op: "residual_scale",
            detail: format!("x cols {} vs params {}", x.cols(), params.alpha.len()),
        });
    }
    Ok(Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        params.alpha[j] * x.get(i, j) + params.bias[j]
    }))
}

/// Backward of [`residual_scale`]: returns `(dx, dalpha, dbias)`.
#[allow(clippy::type_complexity)]
pub fn residual_scale_backward<T: Scalar>(
    x: &Matrix<T>,
    params: &ResidualScaleParams<T>,
    dy: &Matrix<T>,
) -> Result<(Matrix<T>, Vec<T>, Vec<T>), ModelError> {
    if dy.shape() != x.shape() {
        return Err(ModelError::Shape {
            op: "residual_scale_backward",
            detail: format!("dy {:?} vs x {:?}", dy.shape(), x.shape()),
        });
    }
    let dx = Matrix::from_fn(x.rows(), x.cols(), |i, j| params.alpha[j] * dy.get(i, j));
    let mut dalpha = vec![T::zero(); x.cols()];
    let mut dbias = vec![T::zero(); x.cols()];
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            dalpha[j] += dy.get(i, j) * x.get(i, j);
            dbias[j] += dy.get(i, j);
        }
    }
    Ok((dx, dalpha, dbias))
}
