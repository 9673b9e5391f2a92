//! Analytical planners: mesh bandwidth, α–β fits and fusion-buffer sizing,
//! GEMM work estimates, model-sizing lint rules, expert tuning bands, and
//! the storage/IOPS planner. All pure calculators.

use crate::fabric::topology::{xgmi_per_gpu_bw, FabricMode};
use crate::model::ModelConfig;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("mesh mode supports 1..=8 participating GPUs, got {0}")]
    MeshSize(usize),
    #[error("need at least two distinct message sizes to fit, got {0:?}")]
    DegenerateSamples(Vec<f64>),
    #[error("saturation fraction must satisfy 0 < eps < 1, got {0}")]
    BadEpsilon(f64),
}

/// Achievable per-GPU intra-node bandwidth: `(n−1)·B_link` on a
/// point-to-point mesh, the switched maximum otherwise. An optional cap
/// models a fabric ceiling below the mesh scaling.
pub fn xgmi_bw(
    n: usize,
    link_bw: f64,
    mode: FabricMode,
    bw_max: Option<f64>,
) -> Result<f64, PlanError> {
    match mode {
        FabricMode::Xgmi => {
            if !(1..=8).contains(&n) {
                return Err(PlanError::MeshSize(n));
            }
            let raw = xgmi_per_gpu_bw(n, link_bw);
            Ok(bw_max.map_or(raw, |cap| raw.min(cap)))
        }
        FabricMode::Switched => Ok(bw_max.unwrap_or(link_bw)),
    }
}

/// `(message bytes, seconds)` measurements of one collective/scope.
#[derive(Debug, Clone)]
pub struct CostSamples {
    pub points: Vec<(f64, f64)>,
}

/// Result of an α–β fit, with the raw (possibly negative) intercept kept for
/// diagnosis.
#[derive(Debug, Clone, Serialize)]
pub struct AlphaBetaFit {
    /// Per-message latency, seconds, clamped non-negative.
    pub alpha: f64,
    /// Asymptotic bandwidth, bytes/s.
    pub beta: f64,
    /// True when the unclamped intercept was negative (bad samples).
    pub negative_intercept: bool,
}

/// Least-squares fit of `T = α + m/β` over the samples.
pub fn fit_alpha_beta(samples: &CostSamples) -> Result<AlphaBetaFit, PlanError> {
    let n = samples.points.len() as f64;
    let sizes: Vec<f64> = samples.points.iter().map(|p| p.0).collect();
    let first = sizes.first().copied().unwrap_or(0.0);
    if samples.points.len() < 2 || sizes.iter().all(|&s| s == first) {
        return Err(PlanError::DegenerateSamples(sizes));
    }
    let mean_m = sizes.iter().sum::<f64>() / n;
    let mean_t = samples.points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (m, t) in &samples.points {
        cov += (m - mean_m) * (t - mean_t);
        var += (m - mean_m) * (m - mean_m);
    }
    let slope = cov / var;
    let intercept = mean_t - slope * mean_m;
    Ok(AlphaBetaFit {
        alpha: intercept.max(0.0),
        beta: 1.0 / slope,
        negative_intercept: intercept < 0.0,
    })
}

/// Smallest message that achieves `(1−eps)·β` bandwidth under the α–β model:
/// `m* = α·β·(1−eps)/eps`.
pub fn fusion_buffer_size(alpha: f64, beta: f64, eps: f64) -> Result<f64, PlanError> {
    if !(0.0..1.0).contains(&eps) || eps == 0.0 {
        return Err(PlanError::BadEpsilon(eps));
    }
    Ok(alpha * beta * (1.0 - eps) / eps)
}

/// Numeric inversion of the achieved-bandwidth curve by bisection, used to
/// cross-check the closed form.
pub fn fusion_buffer_size_numeric(alpha: f64, beta: f64, eps: f64) -> Result<f64, PlanError> {
    if !(0.0..1.0).contains(&eps) || eps == 0.0 {
        return Err(PlanError::BadEpsilon(eps));
    }
    if alpha == 0.0 {
        return Ok(0.0);
    }
    let achieved = |m: f64| m / (alpha + m / beta);
    let target = (1.0 - eps) * beta;
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    while achieved(hi) < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if achieved(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// `2·M·N·K` floating-point operations of one matrix product, plus whether
/// the problem is large enough to reach peak throughput (≥ 2×10¹¹ FLOPs).
pub fn gemm_flops(m: u64, n: u64, k: u64) -> (f64, bool) {
    let flops = 2.0 * m as f64 * n as f64 * k as f64;
    (flops, flops >= 2e11)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LintSeverity {
    Violation,
    Advisory,
}

#[derive(Debug, Clone, Serialize)]
pub struct LintFinding {
    pub severity: LintSeverity,
    pub rule: &'static str,
    pub detail: String,
}

fn divisible_by_64(label: &'static str, value: usize, findings: &mut Vec<LintFinding>) {
    if value.is_multiple_of(64) {
        return;
    }
    // Smaller powers of two still help; report them as advisories rather
    // than violations since the benefit plateaus at 64.
    let best_pow2 = [32usize, 16, 8]
        .iter()
        .copied()
        .find(|p| value.is_multiple_of(*p));
    match best_pow2 {
        Some(p) => findings.push(LintFinding {
            severity: LintSeverity::Advisory,
            rule: label,
            detail: format!("{value} is divisible by {p} but not 64"),
        }),
        None => findings.push(LintFinding {
            severity: LintSeverity::Violation,
            rule: label,
            detail: format!("{value} % 64 != 0"),
        }),
    }
}

/// Check the kernel-sizing divisibility rules against a model configuration
/// and tensor-parallel degree.
pub fn sizing_lint(cfg: &ModelConfig, t: usize) -> Vec<LintFinding> {
    let mut findings = Vec::new();
    if !cfg.vocab_size.is_multiple_of(64) {
        findings.push(LintFinding {
            severity: LintSeverity::Violation,
            rule: "vocab % 64",
            detail: format!("v = {} is not divisible by 64", cfg.vocab_size),
        });
    }
    divisible_by_64(
        "microbatch x seq divisibility",
        cfg.microbatch * cfg.seq_len,
        &mut findings,
    );
    if !cfg.hidden_size.is_multiple_of(cfg.attn_heads) {
        findings.push(LintFinding {
            severity: LintSeverity::Violation,
            rule: "h/a integral",
            detail: format!(
                "hidden {} not divisible by heads {}",
                cfg.hidden_size, cfg.attn_heads
            ),
        });
    } else {
        divisible_by_64(
            "head dim divisibility",
            cfg.hidden_size / cfg.attn_heads,
            &mut findings,
        );
    }
    if t == 0 || !cfg.hidden_size.is_multiple_of(t.max(1)) {
        findings.push(LintFinding {
            severity: LintSeverity::Violation,
            rule: "h/t integral",
            detail: format!("hidden {} vs tensor-parallel {}", cfg.hidden_size, t),
        });
    } else {
        divisible_by_64("h/t divisibility", cfg.hidden_size / t, &mut findings);
    }
    if t == 0 || !(cfg.microbatch * cfg.attn_heads).is_multiple_of(t.max(1)) {
        findings.push(LintFinding {
            severity: LintSeverity::Violation,
            rule: "(b·a)/t integral",
            detail: format!(
                "microbatch {} x heads {} not divisible by t={t}",
                cfg.microbatch, cfg.attn_heads
            ),
        });
    }
    findings
}

/// Expected per-expert token band: a balanced router sends `s/E` tokens to
/// each expert; GEMM tuning targets `center·(1±band)`.
pub fn moe_bands(seq_len: usize, experts: usize, band_frac: f64) -> (f64, f64, f64) {
    let center = seq_len as f64 / experts.max(1) as f64;
    (
        center,
        center * (1.0 - band_frac),
        center * (1.0 + band_frac),
    )
}

/// Inputs of the dataset-read storage planner.
#[derive(Debug, Clone, Serialize)]
pub struct StoragePlan {
    /// Global batch, sequences per iteration.
    pub global_batch: u64,
    /// Tokens per sequence.
    pub seq_len: u64,
    /// Bytes per token.
    pub bytes_per_token: u64,
    /// Storage page size, bytes.
    pub page_bytes: u64,
    /// Iteration time, seconds.
    pub iter_seconds: f64,
    /// Sustainable IOPS budget.
    pub iops_budget: f64,
    /// Scatter factor σ ≥ 1 (metadata, fragmented reads).
    pub sigma: f64,
    /// Extra page faults per sample, for the σ estimate.
    pub extra_faults_per_sample: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StorageReport {
    pub bytes_per_iter: f64,
    pub pages_per_iter: f64,
    pub io_ops_per_iter: f64,
    pub iops_needed: f64,
    /// Break-even iteration time under the IOPS budget, seconds.
    pub t_break: f64,
    /// σ estimated from the extra-fault count: `1 + m·P/(s·b)`.
    pub sigma_est: f64,
}

/// Dataset-read planner: each iteration reads `G·s·b` bytes across
/// `⌈G·s·b/P⌉` pages; the scatter factor multiplies the effective I/O count.
pub fn storage_plan(plan: &StoragePlan) -> StorageReport {
    let bytes = (plan.global_batch * plan.seq_len * plan.bytes_per_token) as f64;
    let pages = (bytes / plan.page_bytes as f64).ceil();
    let io_ops = plan.sigma * pages;
    StorageReport {
        bytes_per_iter: bytes,
        pages_per_iter: pages,
        io_ops_per_iter: io_ops,
        iops_needed: io_ops / plan.iter_seconds,
        t_break: io_ops / plan.iops_budget,
        sigma_est: 1.0
            + plan.extra_faults_per_sample * plan.page_bytes as f64
                / (plan.seq_len * plan.bytes_per_token) as f64,
    }
}
