//! A small MLP trained with the distributed optimizer over the simulated
//! fabric, used to validate sharding strategies, checkpointing, and resume
//! behavior against a single-rank oracle.

use crate::fabric::{run_fabric, FabricError, Transcript};
use crate::matrix::{gemm, Matrix};
use crate::muon::{adamw_step_slice, muon_step, AdamWState, MuonState};
use crate::scalar::Scalar;
use crate::zero::{
    build_shards, distributed_muon_step, AdamwGroupShard, DistOptConfig, MuonGroupShard,
    ParamShape, StepStats,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Mutex;

/// Three-matrix tanh MLP with optional biases on the two hidden layers.
#[derive(Debug, Clone)]
pub struct ToyModelSpec {
    /// Layer widths input → h1 → h2 → output.
    pub dims: [usize; 4],
    pub with_biases: bool,
    pub batch: usize,
}

impl Default for ToyModelSpec {
    fn default() -> Self {
        Self {
            dims: [2, 3, 2, 2],
            with_biases: true,
            batch: 4,
        }
    }
}

impl ToyModelSpec {
    pub fn matrix_shapes(&self) -> Vec<(String, ParamShape)> {
        let [n0, n1, n2, n3] = self.dims;
        vec![
            ("w1".into(), ParamShape::Matrix(n0, n1)),
            ("w2".into(), ParamShape::Matrix(n1, n2)),
            ("w3".into(), ParamShape::Matrix(n2, n3)),
        ]
    }

    pub fn bias_shapes(&self) -> Vec<(String, ParamShape)> {
        if !self.with_biases {
            return Vec::new();
        }
        let [_, n1, n2, _] = self.dims;
        vec![
            ("b1".into(), ParamShape::Vector(n1)),
            ("b2".into(), ParamShape::Vector(n2)),
        ]
    }

    /// Deterministic initial weights, identical on every rank.
    pub fn init_weights<T: Scalar>(&self, seed: u64) -> ToyWeights<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [n0, n1, n2, n3] = self.dims;
        let mats = vec![
            Matrix::random_normal(n0, n1, &mut rng).scale(T::from_f64_lossy(0.5)),
            Matrix::random_normal(n1, n2, &mut rng).scale(T::from_f64_lossy(0.5)),
            Matrix::random_normal(n2, n3, &mut rng).scale(T::from_f64_lossy(0.5)),
        ];
        let biases = if self.with_biases {
            vec![vec![T::zero(); n1], vec![T::zero(); n2]]
        } else {
            Vec::new()
        };
        ToyWeights { mats, biases }
    }

    /// Synthetic regression batch for one step, identical on every rank.
    pub fn batch_for_step<T: Scalar>(&self, seed: u64, step: u64) -> (Matrix<T>, Matrix<T>) {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(step + 1)));
        let x = Matrix::random_normal(self.batch, self.dims[0], &mut rng);
        let t = Matrix::random_normal(self.batch, self.dims[3], &mut rng);
        (x, t)
    }
}

#[derive(Debug, Clone)]
pub struct ToyWeights<T> {
    pub mats: Vec<Matrix<T>>,
    pub biases: Vec<Vec<T>>,
}

impl<T: Scalar> ToyWeights<T> {
    pub fn flatten_mats(&self) -> Vec<T> {
        self.mats
            .iter()
            .flat_map(|m| m.as_slice().iter().copied())
            .collect()
    }

    pub fn flatten_biases(&self) -> Vec<T> {
        self.biases.iter().flatten().copied().collect()
    }

    pub fn load_mats_flat(&mut self, flat: &[T]) {
        let mut off = 0;
        for m in &mut self.mats {
            let n = m.numel();
            m.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn load_biases_flat(&mut self, flat: &[T]) {
        let mut off = 0;
        for b in &mut self.biases {
            let n = b.len();
            b.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

/// Loss and full gradients of the toy MLP on one batch.
pub fn toy_forward_backward<T: Scalar>(
    spec: &ToyModelSpec,
    w: &ToyWeights<T>,
    x: &Matrix<T>,
    target: &Matrix<T>,
) -> (T, ToyWeights<T>) {
    let add_bias = |m: &Matrix<T>, b: Option<&Vec<T>>| match b {
        Some(b) => Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) + b[j]),
        None => m.clone(),
    };
    let b1 = w.biases.first();
    let b2 = w.biases.get(1);
    let z1 = add_bias(&gemm(x, &w.mats[0], false, false).unwrap(), b1);
    let h1 = z1.map(|v| v.tanh());
    let z2 = add_bias(&gemm(&h1, &w.mats[1], false, false).unwrap(), b2);
    let h2 = z2.map(|v| v.tanh());
    let y = gemm(&h2, &w.mats[2], false, false).unwrap();

    let batch_inv = T::from_f64_lossy(1.0 / spec.batch as f64);
    let diff = y.sub(target).unwrap();
    let half = T::from_f64_lossy(0.5);
    let loss = diff
        .as_slice()
        .iter()
        .fold(T::zero(), |acc, &v| acc + v * v)
        * half
        * batch_inv;

    let dy = diff.scale(batch_inv);
    let dw3 = gemm(&h2, &dy, true, false).unwrap();
    let dh2 = gemm(&dy, &w.mats[2], false, true).unwrap();
    let dz2 = dh2
        .zip_with(&h2, "toy backward", |g, h| g * (T::one() - h * h))
        .unwrap();
    let dw2 = gemm(&h1, &dz2, true, false).unwrap();
    let dh1 = gemm(&dz2, &w.mats[1], false, true).unwrap();
    let dz1 = dh1
        .zip_with(&h1, "toy backward", |g, h| g * (T::one() - h * h))
        .unwrap();
    let dw1 = gemm(x, &dz1, true, false).unwrap();

    let col_sum = |m: &Matrix<T>| {
        (0..m.cols())
            .map(|j| (0..m.rows()).fold(T::zero(), |acc, i| acc + m.get(i, j)))
            .collect::<Vec<T>>()
    };
    let grads = ToyWeights {
        mats: vec![dw1, dw2, dw3],
        biases: if spec.with_biases {
            vec![col_sum(&dz1), col_sum(&dz2)]
        } else {
            Vec::new()
        },
    };
    (loss, grads)
}

/// Per-rank persistent training state.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub muon: MuonGroupShard<T>,
    pub adamw: AdamwGroupShard<T>,
    pub step_index: u64,
}

/// Build the per-rank states for a fresh run.
pub fn init_states<T: Scalar>(
    spec: &ToyModelSpec,
    dp: usize,
    alignment: usize,
    seed: u64,
) -> Vec<TrainState<T>> {
    let weights = spec.init_weights::<T>(seed);
    let muon_layout = build_shards(&spec.matrix_shapes(), dp, alignment);
    let adamw_layout = build_shards(&spec.bias_shapes(), dp, alignment);
    let muon_flat = muon_layout.pad(&weights.flatten_mats());
    let adamw_flat = adamw_layout.pad(&weights.flatten_biases());
    (0..dp)
        .map(|rank| TrainState {
            muon: MuonGroupShard {
                layout: muon_layout.clone(),
                master: muon_layout.shard_of(&muon_flat, rank),
                momentum: vec![T::zero(); muon_layout.shard_size()],
            },
            adamw: AdamwGroupShard {
                layout: adamw_layout.clone(),
                master: adamw_layout.shard_of(&adamw_flat, rank),
                state: AdamWState::new(adamw_layout.shard_size()),
            },
            step_index: 0,
        })
        .collect()
}

/// Outcome of a (possibly resumed) training run.
#[derive(Debug)]
pub struct TrainReport<T> {
    pub losses: Vec<f64>,
    pub final_weights: ToyWeights<T>,
    pub states: Vec<TrainState<T>>,
    pub step_stats: Vec<StepStats>,
    pub transcript: Transcript,
}

/// Run `steps` optimizer steps over the fabric starting from `states`.
///
/// Gradients are computed identically on every rank from the deterministic
/// synthetic batch (data-parallel pre-averaged semantics), so ranks differ
/// only in which optimizer shard they own.
pub fn train_toy<T: Scalar>(
    spec: &ToyModelSpec,
    states: Vec<TrainState<T>>,
    steps: u64,
    cfg: &DistOptConfig,
    seed: u64,
) -> Result<TrainReport<T>, FabricError> {
    let dp = states.len();
    let slot: Mutex<Vec<Option<TrainState<T>>>> =
        Mutex::new(states.into_iter().map(Some).collect());
    let run = run_fabric::<Vec<T>, _, _>(dp, |ctx| {
        let mut state = slot.lock().unwrap()[ctx.rank()].take().expect("state slot");
        let mut weights = spec.init_weights::<T>(seed);
        // Materialize working weights from the current shards.
        let muon_full = crate::fabric::collective::allgather(
            ctx,
            &(0..dp).collect::<Vec<_>>(),
            &state.muon.master,
            90,
        )
        .unwrap();
        weights.load_mats_flat(&state.muon.layout.unpad(&muon_full));
        if !weights.biases.is_empty() {
            let adamw_full = crate::fabric::collective::allgather(
                ctx,
                &(0..dp).collect::<Vec<_>>(),
                &state.adamw.master,
                95,
            )
            .unwrap();
            weights.load_biases_flat(&state.adamw.layout.unpad(&adamw_full));
        }

        let mut losses = Vec::new();
        let mut stats = Vec::new();
        for _ in 0..steps {
            let (x, target) = spec.batch_for_step::<T>(seed, state.step_index);
            let (loss, grads) = toy_forward_backward(spec, &weights, &x, &target);
            losses.push(loss.to_f64().unwrap());
            let (muon_full, adamw_full, st) = distributed_muon_step(
                ctx,
                &mut state.muon,
                &mut state.adamw,
                &grads.flatten_mats(),
                &grads.flatten_biases(),
                cfg,
            )
            .unwrap();
            weights.load_mats_flat(&state.muon.layout.unpad(&muon_full));
            if !weights.biases.is_empty() {
                weights.load_biases_flat(&state.adamw.layout.unpad(&adamw_full));
            }
            stats.push(st);
            state.step_index += 1;
        }
        (losses, weights, state, stats)
    })?;

    let mut losses = Vec::new();
    let mut final_weights = None;
    let mut out_states = Vec::new();
    let mut step_stats = Vec::new();
    for (rank, (l, w, s, st)) in run.results.into_iter().enumerate() {
        if rank == 0 {
            losses = l;
            final_weights = Some(w);
            step_stats = st;
        }
        out_states.push(s);
    }
    Ok(TrainReport {
        losses,
        final_weights: final_weights.unwrap(),
        states: out_states,
        step_stats,
        transcript: run.transcript,
    })
}

/// Single-rank oracle: the same schedule driven through the plain matrix
/// optimizer ops, no sharding, no fabric.
pub fn train_toy_single_rank<T: Scalar>(
    spec: &ToyModelSpec,
    steps: u64,
    cfg: &DistOptConfig,
    seed: u64,
) -> (Vec<f64>, ToyWeights<T>) {
    let mut weights = spec.init_weights::<T>(seed);
    let mut muon_states: Vec<MuonState<T>> = weights
        .mats
        .iter()
        .map(|m| MuonState::new(m.clone()))
        .collect();
    let mut adamw_states: Vec<AdamWState<T>> = weights
        .biases
        .iter()
        .map(|b| AdamWState::new(b.len()))
        .collect();
    let mut losses = Vec::new();
    for step in 0..steps {
        let (x, target) = spec.batch_for_step::<T>(seed, step);
        let (loss, grads) = toy_forward_backward(spec, &weights, &x, &target);
        losses.push(loss.to_f64().unwrap());
        for (state, g) in muon_states.iter_mut().zip(&grads.mats) {
            muon_step(state, g, &cfg.muon).unwrap();
        }
        for ((state, w), g) in adamw_states
            .iter_mut()
            .zip(weights.biases.iter_mut())
            .zip(&grads.biases)
        {
            adamw_step_slice(state, w, g, cfg.adamw_eta, cfg.adamw_delta).unwrap();
        }
        for (w, s) in weights.mats.iter_mut().zip(&muon_states) {
            *w = s.master.clone();
        }
    }
    (losses, weights)
}

/// The flattened optimizer state of a rank group, for equality checks.
pub fn flat_master<T: Scalar>(states: &[TrainState<T>], muon: bool) -> Vec<T> {
    let mut out = Vec::new();
    for s in states {
        if muon {
            out.extend_from_slice(&s.muon.master);
        } else {
            out.extend_from_slice(&s.adamw.master);
        }
    }
    out
}

/// Convenience spec used across equivalence and acceptance tests: three
/// matrices with mixed whole/split sharding at dp ∈ {1, 2, 4}.
pub fn three_param_spec() -> ToyModelSpec {
    ToyModelSpec {
        dims: [2, 3, 2, 2],
        with_biases: false,
        batch: 4,
    }
}
