//! Single executable exposing the planners, the fabric simulator, the toy
//! distributed trainer, checkpoint tooling, and a local memory benchmark.
//! All outputs are CSV (or JSON with `--format json`) with explicit unit
//! suffixes in the column names; every subcommand is deterministic for a
//! fixed `--seed`.

mod config;
mod stream;
mod table;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fabsim_core::ckpt;
use fabsim_core::cpar;
use fabsim_core::fabric::collective::{run_collective, CollectiveKind};
use fabsim_core::fabric::run_fabric;
use fabsim_core::fabric::topology::{predict_time, FabricMode, FabricTopology};
use fabsim_core::matrix::Matrix;
use fabsim_core::model::cca::{
    attention_backward, attention_forward, shift_right, shift_right_backward, DepthwiseConv,
    GroupedConv,
};
use fabsim_core::plan;
use fabsim_core::trainer::{self, ToyModelSpec};
use fabsim_core::zero::{self, DistOptConfig, Strategy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::process::ExitCode;
use table::{emit, f, out_line, Format, Table};

#[derive(Parser)]
#[command(
    name = "fabsim",
    about = "Deterministic desk-scale lab for distributed-training systems",
    version
)]
struct Cli {
    /// Output format for all tables.
    #[arg(long, global = true, default_value = "csv")]
    format: Format,
    /// Directory to also write each table into (env: FABSIM_OUT).
    #[arg(long, global = true, env = "FABSIM_OUT")]
    out: Option<PathBuf>,
    /// Seed fixing all randomness end to end.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analytical planners (pure calculators).
    #[command(subcommand)]
    Plan(PlanCmd),
    /// Configuration lint rules.
    #[command(subcommand)]
    Lint(LintCmd),
    /// Fabric simulations.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Toy distributed training.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Checkpoint tooling.
    #[command(subcommand)]
    Ckpt(CkptCmd),
    /// Local microbenchmarks.
    #[command(subcommand)]
    Bench(BenchCmd),
}

#[derive(Subcommand)]
enum PlanCmd {
    /// Per-GPU intra-node bandwidth of a point-to-point mesh.
    Xgmi(XgmiArgs),
    /// Gradient fusion-buffer sizing from an α–β model.
    Fusion(FusionArgs),
    /// Dataset-read IOPS planner.
    Storage(StorageArgs),
    /// Checkpoint size model.
    Checkpoint(CheckpointArgs),
    /// Kernel-sizing lint (same as `lint sizing`).
    Sizing(SizingArgs),
    /// Balanced per-expert token bands for GEMM tuning.
    Bands(BandsArgs),
    /// Matrix-product work estimate.
    Gemm(GemmArgs),
}

#[derive(Subcommand)]
enum LintCmd {
    /// Kernel-sizing divisibility rules.
    Sizing(SizingArgs),
}

#[derive(Subcommand)]
enum SimCmd {
    /// Run ring collectives on the simulated fabric and check them against
    /// central oracles, with predicted timings from the topology model.
    Collective(CollectiveArgs),
    /// Context-parallel operators vs their serial implementations.
    Cp(CpArgs),
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Train the toy MLP with the sharded distributed optimizer.
    Toy(TrainToyArgs),
}

#[derive(Subcommand)]
enum CkptCmd {
    /// Checkpoint size model (same as `plan checkpoint`).
    Plan(CheckpointArgs),
    /// Rewrite a checkpoint for a different data-parallel degree.
    Reshape(ReshapeArgs),
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Streaming memory-bandwidth kernels.
    Memory(BenchMemoryArgs),
}

#[derive(Args)]
struct XgmiArgs {
    /// Participating GPUs (1..=8 in mesh mode).
    #[arg(long)]
    n: usize,
    /// Per-link bandwidth, GB/s.
    #[arg(long = "link-gbs", default_value_t = 64.0)]
    link_gbs: f64,
    /// Model a switched fabric instead of a mesh.
    #[arg(long)]
    switched: bool,
    /// Optional bandwidth ceiling, GB/s.
    #[arg(long = "bmax-gbs")]
    bmax_gbs: Option<f64>,
}

#[derive(Args)]
struct FusionArgs {
    /// Per-message latency, seconds.
    #[arg(long)]
    alpha: f64,
    /// Asymptotic bandwidth, bytes/s.
    #[arg(long)]
    beta: f64,
    /// Saturation tolerance (buffer reaches (1-eps)·beta).
    #[arg(long, default_value_t = 0.05)]
    eps: f64,
}

#[derive(Args)]
struct StorageArgs {
    /// Global batch size, sequences.
    #[arg(long = "G")]
    global_batch: u64,
    /// Sequence length, tokens.
    #[arg(long = "s")]
    seq_len: u64,
    /// Bytes per token.
    #[arg(long = "b")]
    bytes_per_token: u64,
    /// Page size, bytes.
    #[arg(long, default_value_t = 4096)]
    page: u64,
    /// Iteration time, seconds.
    #[arg(long = "t")]
    iter_seconds: f64,
    /// IOPS budget.
    #[arg(long)]
    iops: f64,
    /// Scatter factor σ ≥ 1.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Extra page faults per sample (σ estimate input).
    #[arg(long = "m", default_value_t = 0.0)]
    extra_faults: f64,
}

#[derive(Args)]
struct CheckpointArgs {
    /// Parameters under the matrix optimizer.
    #[arg(long)]
    pm: u64,
    /// Parameters under the elementwise optimizer.
    #[arg(long)]
    pa: u64,
    /// Bytes per low-precision weight.
    #[arg(long, default_value_t = 2)]
    blp: u64,
    /// Bytes per high-precision value.
    #[arg(long, default_value_t = 4)]
    bhp: u64,
    /// Data-parallel degree.
    #[arg(long)]
    dp: u64,
    /// Per-rank metadata bytes, comma separated (defaults to zeros).
    #[arg(long, value_delimiter = ',')]
    meta: Vec<u64>,
}

#[derive(Args)]
struct SizingArgs {
    /// Named preset (zaya1-base, tiny).
    #[arg(long)]
    preset: Option<String>,
    /// Model config TOML with a [model] section.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Tensor-parallel degree.
    #[arg(long, default_value_t = 1)]
    t: usize,
}

#[derive(Args)]
struct BandsArgs {
    /// Sequence length, tokens.
    #[arg(long = "s")]
    seq_len: usize,
    /// Experts per layer.
    #[arg(long = "E")]
    experts: usize,
    /// Band half-width as a fraction of the center.
    #[arg(long, default_value_t = 0.5)]
    band: f64,
}

#[derive(Args)]
struct GemmArgs {
    #[arg(long)]
    m: u64,
    #[arg(long)]
    n: u64,
    #[arg(long)]
    k: u64,
}

#[derive(Args)]
struct CollectiveArgs {
    /// Group size.
    #[arg(long, default_value_t = 8)]
    ranks: usize,
    /// Per-rank payload bytes (rounded to whole f64 elements per peer).
    #[arg(long, default_value_t = 1_048_576)]
    bytes: usize,
    /// Collective kind or `all`.
    #[arg(long, default_value = "all")]
    kind: String,
    /// Topology TOML with a [topology] section.
    #[arg(long)]
    topo: Option<PathBuf>,
}

#[derive(Args)]
struct CpArgs {
    /// Context-parallel degree.
    #[arg(long)]
    cp: usize,
    /// Sequence length, tokens.
    #[arg(long)]
    seq: usize,
}

#[derive(Args)]
struct TrainToyArgs {
    /// Data-parallel degree.
    #[arg(long, default_value_t = 1)]
    dp: usize,
    /// Optimizer steps.
    #[arg(long, default_value_t = 10)]
    steps: u64,
    /// Reconstruction strategy: sendrecv or allgather.
    #[arg(long, default_value = "sendrecv")]
    strategy: String,
    /// Save a checkpoint into this directory after training.
    #[arg(long)]
    save: Option<PathBuf>,
    /// Resume from a checkpoint directory instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct ReshapeArgs {
    /// Source checkpoint directory.
    #[arg(long)]
    input: PathBuf,
    /// Destination directory.
    #[arg(long)]
    output: PathBuf,
    /// New data-parallel degree.
    #[arg(long)]
    dp: usize,
}

#[derive(Args)]
struct BenchMemoryArgs {
    /// Buffer size, MiB (each of the three arrays).
    #[arg(long, default_value_t = 64)]
    mib: usize,
    /// Timed repeats after one discarded warm-up pass.
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Kernels to run, comma separated, or `all`.
    #[arg(long, default_value = "all")]
    kernels: String,
    /// Worker threads (synchronized on a barrier before timing).
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help/version requests are successful exits; anything else is
            // a usage error.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_class(&err))
        }
    }
}

/// 1 for input-validation failures, 2 for runtime/internal errors.
fn exit_class(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<plan::PlanError>().is_some()
        || err.downcast_ref::<cpar::CparError>().is_some()
        || err
            .downcast_ref::<fabsim_core::model::ModelError>()
            .is_some()
    {
        return 1;
    }
    let text = format!("{err:#}");
    let validation = text.contains("unknown")
        || text.contains("must be")
        || text.contains("invalid")
        || text.contains("mutually exclusive")
        || text.contains("pass --");
    if validation {
        1
    } else {
        2
    }
}

fn run(cli: Cli) -> Result<()> {
    let format = cli.format;
    let out = cli.out.as_deref();
    let seed = cli.seed;
    match cli.command {
        Command::Plan(cmd) => match cmd {
            PlanCmd::Xgmi(a) => cmd_xgmi(a, format, out),
            PlanCmd::Fusion(a) => cmd_fusion(a, format, out),
            PlanCmd::Storage(a) => cmd_storage(a, format, out),
            PlanCmd::Checkpoint(a) => cmd_checkpoint_plan(a, format, out),
            PlanCmd::Sizing(a) => cmd_sizing(a, format, out),
            PlanCmd::Bands(a) => cmd_bands(a, format, out),
            PlanCmd::Gemm(a) => cmd_gemm(a, format, out),
        },
        Command::Lint(LintCmd::Sizing(a)) => cmd_sizing(a, format, out),
        Command::Sim(cmd) => match cmd {
            SimCmd::Collective(a) => cmd_sim_collective(a, format, out, seed),
            SimCmd::Cp(a) => cmd_sim_cp(a, format, out, seed),
        },
        Command::Train(TrainCmd::Toy(a)) => cmd_train_toy(a, format, out, seed),
        Command::Ckpt(cmd) => match cmd {
            CkptCmd::Plan(a) => cmd_checkpoint_plan(a, format, out),
            CkptCmd::Reshape(a) => cmd_reshape(a, format, out),
        },
        Command::Bench(BenchCmd::Memory(a)) => cmd_bench_memory(a, format, out),
    }
}

fn cmd_xgmi(a: XgmiArgs, format: Format, out: Option<&std::path::Path>) -> Result<()> {
    let mode = if a.switched {
        FabricMode::Switched
    } else {
        FabricMode::Xgmi
    };
    let bw = plan::xgmi_bw(a.n, a.link_gbs * 1e9, mode, a.bmax_gbs.map(|g| g * 1e9))?;
    let mut t = Table::new(
        "xgmi",
        &[
            "n",
            "link_bw_bytes_per_s",
            "mode",
            "per_gpu_bw_bytes_per_s",
            "per_gpu_bw_gbs",
        ],
    );
    t.row(vec![
        a.n.to_string(),
        f(a.link_gbs * 1e9),
        if a.switched { "switched" } else { "xgmi" }.into(),
        f(bw),
        f(bw / 1e9),
    ]);
    emit(&[t], format, out)
}

fn cmd_fusion(a: FusionArgs, format: Format, out: Option<&std::path::Path>) -> Result<()> {
    let analytic = plan::fusion_buffer_size(a.alpha, a.beta, a.eps)?;
    let numeric = plan::fusion_buffer_size_numeric(a.alpha, a.beta, a.eps)?;
    let mut t = Table::new(
        "fusion",
        &[
            "alpha_s",
            "beta_bytes_per_s",
            "eps",
            "buffer_bytes",
            "numeric_check_bytes",
        ],
    );
    t.row(vec![
        f(a.alpha),
        f(a.beta),
        f(a.eps),
        f(analytic),
        f(numeric),
    ]);
    emit(&[t], format, out)
}

fn cmd_storage(a: StorageArgs, format: Format, out: Option<&std::path::Path>) -> Result<()> {
    let report = plan::storage_plan(&plan::StoragePlan {
        global_batch: a.global_batch,
        seq_len: a.seq_len,
        bytes_per_token: a.bytes_per_token,
        page_bytes: a.page,
        iter_seconds: a.iter_seconds,
        iops_budget: a.iops,
        sigma: a.sigma,
        extra_faults_per_sample: a.extra_faults,
    });
    let mut t = Table::new(
        "storage",
        &[
            "bytes_per_iter",
            "pages_per_iter",
            "io_ops_per_iter",
            "iops_needed",
            "t_break_s",
            "sigma_est",
        ],
    );
    t.row(vec![
        f(report.bytes_per_iter),
        f(report.pages_per_iter),
        f(report.io_ops_per_iter),
        f(report.iops_needed),
        f(report.t_break),
        f(report.sigma_est),
    ]);
    emit(&[t], format, out)
}

fn cmd_checkpoint_plan(
    a: CheckpointArgs,
    format: Format,
    out: Option<&std::path::Path>,
) -> Result<()> {
    let meta = if a.meta.is_empty() {
        vec![0; a.dp as usize]
    } else {
        a.meta.clone()
    };
    let sizes = ckpt::checkpoint_sizes(a.pm, a.pa, a.blp, a.bhp, a.dp, &meta);
    let mut t = Table::new("checkpoint_sizes", &["rank", "bytes", "includes_weights"]);
    t.row(vec!["total".into(), f(sizes.total), "true".into()]);
    t.row(vec!["0".into(), f(sizes.rank0), "true".into()]);
    for (i, b) in sizes.other_ranks.iter().enumerate() {
        t.row(vec![(i + 1).to_string(), f(*b), "false".into()]);
    }
    emit(&[t], format, out)
}

fn cmd_sizing(a: SizingArgs, format: Format, out: Option<&std::path::Path>) -> Result<()> {
    let cfg = config::resolve_model(a.preset.as_deref(), a.model.as_deref())?;
    let findings = plan::sizing_lint(&cfg, a.t);
    let mut t = Table::new("sizing_lint", &["severity", "rule", "detail"]);
    for finding in &findings {
        t.row(vec![
            format!("{:?}", finding.severity).to_lowercase(),
            finding.rule.into(),
            finding.detail.clone(),
        ]);
    }
    emit(&[t], format, out)?;
    let violations = findings
        .iter()
        .filter(|fnd| fnd.severity == plan::LintSeverity::Violation)
        .count();
    let advisories = findings.len() - violations;
    out_line(&format!(
        "{violations} violations, {advisories} advisories\n"
    ));
    Ok(())
}

fn cmd_bands(a: BandsArgs, format: Format, out: Option<&std::path::Path>) -> Result<()> {
    let (center, low, high) = plan::moe_bands(a.seq_len, a.experts, a.band);
    let mut t = Table::new(
        "moe_bands",
        &[
            "seq_tokens",
            "experts",
            "band_frac",
            "center_tokens",
            "low_tokens",
            "high_tokens",
        ],
    );
    t.row(vec![
        a.seq_len.to_string(),
        a.experts.to_string(),
        f(a.band),
        f(center),
        f(low),
        f(high),
    ]);
    emit(&[t], format, out)
}

fn cmd_gemm(a: GemmArgs, format: Format, out: Option<&std::path::Path>) -> Result<()> {
    let (flops, ready) = plan::gemm_flops(a.m, a.n, a.k);
    let mut t = Table::new("gemm", &["m", "n", "k", "flops", "peak_ready"]);
    t.row(vec![
        a.m.to_string(),
        a.n.to_string(),
        a.k.to_string(),
        f(flops),
        ready.to_string(),
    ]);
    emit(&[t], format, out)
}

fn cmd_sim_collective(
    a: CollectiveArgs,
    format: Format,
    out: Option<&std::path::Path>,
    seed: u64,
) -> Result<()> {
    let topo = match &a.topo {
        Some(path) => config::load_topology(path)?,
        None => FabricTopology::default(),
    };
    let kinds: Vec<CollectiveKind> = if a.kind == "all" {
        CollectiveKind::ALL.to_vec()
    } else {
        vec![match a.kind.as_str() {
            "allreduce" => CollectiveKind::AllReduce,
            "allgather" => CollectiveKind::AllGather,
            "reducescatter" => CollectiveKind::ReduceScatter,
            "alltoall" => CollectiveKind::AllToAll,
            "broadcast" => CollectiveKind::Broadcast,
            other => anyhow::bail!("unknown collective kind {other:?}"),
        }]
    };
    let n = a.ranks;
    anyhow::ensure!(n >= 1, "ranks must be at least 1");
    let elems = (a.bytes / 8).max(1).div_ceil(n) * n;
    let group: Vec<usize> = (0..n).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let payloads: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..elems).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();

    let mut t = Table::new(
        "collective",
        &[
            "kind",
            "ranks",
            "bytes",
            "predicted_s",
            "algbw_bytes_per_s",
            "busbw_bytes_per_s",
            "measured_equivalence",
        ],
    );
    for kind in kinds {
        let run = run_fabric::<Vec<f64>, _, _>(n, |ctx| {
            run_collective(ctx, kind, &group, &payloads[ctx.rank()], 0).unwrap()
        })
        .map_err(|e| anyhow::anyhow!("fabric: {e}"))?;
        let ok = check_against_oracle(kind, &payloads, &run.results);
        let p = predict_time(&topo, kind, (elems * 8) as f64, n);
        t.row(vec![
            kind.name().into(),
            n.to_string(),
            (elems * 8).to_string(),
            f(p.seconds),
            f(p.alg_bw),
            f(p.bus_bw),
            ok.to_string(),
        ]);
    }
    emit(&[t], format, out)
}

fn check_against_oracle(kind: CollectiveKind, inputs: &[Vec<f64>], outputs: &[Vec<f64>]) -> bool {
    let n = inputs.len();
    let len = inputs[0].len();
    let sum: Vec<f64> = (0..len)
        .map(|i| inputs.iter().map(|p| p[i]).sum())
        .collect();
    let close = |a: &[f64], b: &[f64]| {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9)
    };
    let chunk_range = |i: usize| {
        let q = len / n;
        let r = len % n;
        let start = i * q + i.min(r);
        start..start + q + usize::from(i < r)
    };
    outputs.iter().enumerate().all(|(rank, got)| match kind {
        CollectiveKind::AllReduce => close(got, &sum),
        CollectiveKind::AllGather => {
            let concat: Vec<f64> = inputs.iter().flatten().copied().collect();
            close(got, &concat)
        }
        CollectiveKind::ReduceScatter => close(got, &sum[chunk_range(rank)]),
        CollectiveKind::AllToAll => {
            let chunk = len / n;
            let want: Vec<f64> = (0..n)
                .flat_map(|src| inputs[src][rank * chunk..(rank + 1) * chunk].to_vec())
                .collect();
            close(got, &want)
        }
        CollectiveKind::Broadcast => close(got, &inputs[0]),
    })
}

fn cmd_sim_cp(a: CpArgs, format: Format, out: Option<&std::path::Path>, seed: u64) -> Result<()> {
    let layout = cpar::cp_layout(a.seq, a.cp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = 6;
    let groups = 3;
    let heads_q = 2;
    let heads_kv = 1;
    let head_dim = 3;
    let v_dim = 2;

    let mut conv0 = DepthwiseConv::identity(channels, 2);
    conv0.weights = Matrix::random_normal(channels, 2, &mut rng);
    let mut conv1 = GroupedConv::identity(groups, channels / groups, 2);
    conv1.weights = (0..groups * 2)
        .map(|_| Matrix::random_normal(channels / groups, channels / groups, &mut rng))
        .collect();
    let x = Matrix::<f64>::random_normal(a.seq, channels, &mut rng);
    let dx_up = Matrix::<f64>::random_normal(a.seq, channels, &mut rng);
    let v2 = Matrix::<f64>::random_normal(a.seq, v_dim, &mut rng);
    let dv_up = Matrix::<f64>::random_normal(a.seq, v_dim, &mut rng);
    let q = Matrix::<f64>::random_normal(a.seq, heads_q * head_dim, &mut rng);
    let k = Matrix::<f64>::random_normal(a.seq, heads_kv * head_dim, &mut rng);
    let v = Matrix::<f64>::random_normal(a.seq, heads_kv * v_dim, &mut rng);
    let dout = Matrix::<f64>::random_normal(a.seq, heads_q * v_dim, &mut rng);

    let mut t = Table::new(
        "cp_equivalence",
        &[
            "op",
            "cp",
            "seq_tokens",
            "fwd_max_abs_err",
            "bwd_max_abs_err",
            "messages",
            "message_bytes",
        ],
    );

    // Convolution halo exchange.
    {
        let serial_out = conv1.apply(&conv0.apply(&x).unwrap()).unwrap();
        let mid = conv0.apply(&x).unwrap();
        let (dmid, _) = conv1.backward(&mid, &dx_up).unwrap();
        let (serial_dx, _) = conv0.backward(&x, &dmid).unwrap();
        let run = run_fabric::<Vec<f64>, _, _>(a.cp, |ctx| {
            let local = layout.shard(&x, ctx.rank());
            let dlocal = layout.shard(&dx_up, ctx.rank());
            let (outs, saved) =
                cpar::halo_exchange_conv(ctx, &layout, &local, &conv0, &conv1).unwrap();
            let (dxs, _, _) =
                cpar::halo_exchange_conv_backward(ctx, &layout, &saved, &conv0, &conv1, &dlocal)
                    .unwrap();
            (outs, dxs)
        })
        .map_err(|e| anyhow::anyhow!("fabric: {e}"))?;
        let fwd: Vec<_> = run.results.iter().map(|r| r.0.clone()).collect();
        let bwd: Vec<_> = run.results.iter().map(|r| r.1.clone()).collect();
        t.row(vec![
            "conv_halo".into(),
            a.cp.to_string(),
            a.seq.to_string(),
            f(layout.unshard(&fwd).max_abs_diff(&serial_out)),
            f(layout.unshard(&bwd).max_abs_diff(&serial_dx)),
            run.transcript.len().to_string(),
            run.transcript.total_bytes().to_string(),
        ]);
    }

    // Value shift.
    {
        let serial_out = shift_right(&v2);
        let serial_dx = shift_right_backward(&dv_up);
        let run = run_fabric::<Vec<f64>, _, _>(a.cp, |ctx| {
            let local = layout.shard(&v2, ctx.rank());
            let dlocal = layout.shard(&dv_up, ctx.rank());
            let shifted = cpar::value_shift_dist(ctx, &layout, &local).unwrap();
            let dxs = cpar::value_shift_dist_backward(ctx, &layout, &dlocal).unwrap();
            (shifted, dxs)
        })
        .map_err(|e| anyhow::anyhow!("fabric: {e}"))?;
        let fwd: Vec<_> = run.results.iter().map(|r| r.0.clone()).collect();
        let bwd: Vec<_> = run.results.iter().map(|r| r.1.clone()).collect();
        t.row(vec![
            "value_shift".into(),
            a.cp.to_string(),
            a.seq.to_string(),
            f(layout.unshard(&fwd).max_abs_diff(&serial_out)),
            f(layout.unshard(&bwd).max_abs_diff(&serial_dx)),
            run.transcript.len().to_string(),
            run.transcript.total_bytes().to_string(),
        ]);
    }

    // Ring attention.
    {
        let (serial_out, serial_lse) =
            attention_forward(&q, &k, &v, heads_q, heads_kv).map_err(|e| anyhow::anyhow!("{e}"))?;
        let (sdq, sdk, sdv) = attention_backward(
            &q,
            &k,
            &v,
            &serial_out,
            &serial_lse,
            &dout,
            heads_q,
            heads_kv,
        )
        .map_err(|e| anyhow::anyhow!("{e}"))?;
        let run = run_fabric::<Vec<f64>, _, _>(a.cp, |ctx| {
            let lq = layout.shard(&q, ctx.rank());
            let lk = layout.shard(&k, ctx.rank());
            let lv = layout.shard(&v, ctx.rank());
            let ld = layout.shard(&dout, ctx.rank());
            let fwd = cpar::ring_attention(ctx, &layout, &lq, &lk, &lv, heads_q, heads_kv).unwrap();
            let (dq, dk, dv) = cpar::ring_attention_backward(
                ctx, &layout, &lq, &lk, &lv, &fwd, &ld, heads_q, heads_kv,
            )
            .unwrap();
            (fwd.outputs, dq, dk, dv)
        })
        .map_err(|e| anyhow::anyhow!("fabric: {e}"))?;
        let fwd: Vec<_> = run.results.iter().map(|r| r.0.clone()).collect();
        let fwd_err = layout.unshard(&fwd).max_abs_diff(&serial_out);
        let mut bwd_err: f64 = 0.0;
        for (idx, serial) in [&sdq, &sdk, &sdv].into_iter().enumerate() {
            let grads: Vec<_> = run
                .results
                .iter()
                .map(|r| match idx {
                    0 => r.1.clone(),
                    1 => r.2.clone(),
                    _ => r.3.clone(),
                })
                .collect();
            bwd_err = bwd_err.max(layout.unshard(&grads).max_abs_diff(serial));
        }
        t.row(vec![
            "ring_attention".into(),
            a.cp.to_string(),
            a.seq.to_string(),
            f(fwd_err),
            f(bwd_err),
            run.transcript.len().to_string(),
            run.transcript.total_bytes().to_string(),
        ]);
    }

    emit(&[t], format, out)
}

fn cmd_train_toy(
    a: TrainToyArgs,
    format: Format,
    out: Option<&std::path::Path>,
    seed: u64,
) -> Result<()> {
    let strategy = match a.strategy.as_str() {
        "sendrecv" => Strategy::SendRecv,
        "allgather" => Strategy::AllGather,
        other => anyhow::bail!("unknown strategy {other:?} (sendrecv|allgather)"),
    };
    let spec = ToyModelSpec::default();
    let cfg = DistOptConfig {
        strategy,
        ..Default::default()
    };
    let (states, seed) = match &a.resume {
        Some(dir) => {
            let (manifest, states) = ckpt::load_checkpoint::<f64>(dir)
                .with_context(|| format!("loading checkpoint from {}", dir.display()))?;
            anyhow::ensure!(
                manifest.dp_degree == a.dp,
                "checkpoint has dp={}, requested dp={} (reshape it first)",
                manifest.dp_degree,
                a.dp
            );
            let seed = manifest.ranks[0].meta.seed;
            (states, seed)
        }
        None => (trainer::init_states::<f64>(&spec, a.dp, 1, seed), seed),
    };
    let report = trainer::train_toy(&spec, states, a.steps, &cfg, seed)
        .map_err(|e| anyhow::anyhow!("fabric: {e}"))?;

    let start_step = report.states[0].step_index - a.steps;
    let mut loss = Table::new("loss", &["step", "loss"]);
    for (i, l) in report.losses.iter().enumerate() {
        loss.row(vec![(start_step + i as u64).to_string(), f(*l)]);
    }

    let mut transcript = Table::new(
        "transcript",
        &["step", "transient_bytes", "peak_param_transient_bytes"],
    );
    for (i, st) in report.step_stats.iter().enumerate() {
        transcript.row(vec![
            i.to_string(),
            st.transient_bytes.to_string(),
            st.peak_param_transient_bytes.to_string(),
        ]);
    }

    let mut memory = Table::new(
        "memory",
        &[
            "group",
            "strategy",
            "rank",
            "persistent_bytes",
            "transient_bytes",
        ],
    );
    for (group_name, layout, copies) in [
        ("muon", &report.states[0].muon.layout, 2usize),
        ("adamw", &report.states[0].adamw.layout, 3usize),
    ] {
        for st in [Strategy::SendRecv, Strategy::AllGather] {
            for m in zero::peak_memory_estimate(layout, st, copies, 8) {
                memory.row(vec![
                    group_name.into(),
                    st.name().into(),
                    m.rank.to_string(),
                    m.persistent_bytes.to_string(),
                    m.transient_bytes.to_string(),
                ]);
            }
        }
    }

    emit(&[loss, transcript, memory], format, out)?;

    if let Some(dir) = &a.save {
        ckpt::save_checkpoint(dir, &report.states, seed)
            .with_context(|| format!("saving checkpoint to {}", dir.display()))?;
        out_line(&format!("checkpoint saved to {}\n", dir.display()));
    }
    Ok(())
}

fn cmd_reshape(a: ReshapeArgs, format: Format, out: Option<&std::path::Path>) -> Result<()> {
    let manifest = ckpt::reshape_checkpoint(&a.input, &a.output, a.dp)
        .with_context(|| format!("reshaping {}", a.input.display()))?;
    let mut t = Table::new("reshape", &["rank", "file", "payload_bytes", "crc64"]);
    for entry in &manifest.ranks {
        t.row(vec![
            entry.rank.to_string(),
            entry.file.clone(),
            entry.payload_bytes.to_string(),
            format!("{:016x}", entry.crc64),
        ]);
    }
    emit(&[t], format, out)
}

fn cmd_bench_memory(
    a: BenchMemoryArgs,
    format: Format,
    out: Option<&std::path::Path>,
) -> Result<()> {
    let kernels: Vec<stream::StreamKernel> = if a.kernels == "all" {
        stream::StreamKernel::ALL.to_vec()
    } else {
        a.kernels
            .split(',')
            .map(stream::StreamKernel::parse)
            .collect::<Result<_>>()?
    };
    let results = stream::bench_memory(a.mib, &kernels, a.repeats, a.threads)?;
    let mut t = Table::new(
        "bench_memory",
        &[
            "kernel",
            "elements",
            "bytes_moved",
            "best_seconds",
            "bandwidth_bytes_per_s",
            "bandwidth_gbs",
        ],
    );
    for r in results {
        t.row(vec![
            r.kernel.name().into(),
            r.elements.to_string(),
            r.bytes_moved.to_string(),
            f(r.best_seconds),
            f(r.bytes_per_second),
            f(r.bytes_per_second / 1e9),
        ]);
    }
    emit(&[t], format, out)
}
