//! Optimizer-state sharding over data-parallel ranks: parameters are
//! flattened, concatenated, padded, and divided into equal contiguous chunks
//! (one per rank). The distributed Muon step reconstructs whole 2-D
//! orthogonalization inputs either through neighbor SendRecv exchanges of the
//! split boundary parameters or through one all-gather of the flat buffer,
//! then applies updates to the local shard slice only.

use crate::fabric::collective::{allgather, CollectiveError};
use crate::fabric::{RankCtx, Tag};
use crate::matrix::Matrix;
use crate::muon::{adamw_step_slice, newton_schulz, rms_match_factor, AdamWState, MuonConfig};
use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamShape {
    Matrix(usize, usize),
    Vector(usize),
}

impl ParamShape {
    pub fn numel(&self) -> usize {
        match *self {
            ParamShape::Matrix(r, c) => r * c,
            ParamShape::Vector(n) => n,
        }
    }

    pub fn is_matrix(&self) -> bool {
        matches!(self, ParamShape::Matrix(_, _))
    }
}

#[derive(Debug, Clone)]
pub struct ParamDesc {
    pub id: usize,
    pub name: String,
    pub shape: ParamShape,
    /// Offset into the flattened, concatenated parameter vector.
    pub offset: usize,
}

impl ParamDesc {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.shape.numel()
    }
}

/// Contiguous-chunk assignment of the flattened parameter vector to ranks.
#[derive(Debug, Clone)]
pub struct ShardLayout {
    pub params: Vec<ParamDesc>,
    pub dp_degree: usize,
    pub alignment: usize,
    pub total: usize,
    pub padded_total: usize,
}

impl ShardLayout {
    pub fn shard_size(&self) -> usize {
        self.padded_total / self.dp_degree
    }

    pub fn rank_range(&self, rank: usize) -> std::ops::Range<usize> {
        let s = self.shard_size();
        rank * s..(rank + 1) * s
    }

    /// Ranks whose shard overlaps the parameter.
    pub fn owners(&self, param_id: usize) -> Vec<usize> {
        let range = self.params[param_id].range();
        (0..self.dp_degree)
            .filter(|&r| {
                let rr = self.rank_range(r);
                rr.start < range.end && range.start < rr.end
            })
            .collect()
    }

    /// Pad `flat` (the unpadded concatenation) with zeros to the padded total.
    pub fn pad<T: Scalar>(&self, flat: &[T]) -> Vec<T> {
        assert_eq!(flat.len(), self.total, "flat vector length mismatch");
        let mut out = flat.to_vec();
        out.resize(self.padded_total, T::zero());
        out
    }

    /// Strip padding back off.
    pub fn unpad<T: Scalar>(&self, padded: &[T]) -> Vec<T> {
        assert_eq!(padded.len(), self.padded_total);
        padded[..self.total].to_vec()
    }

    pub fn shard_of<T: Scalar>(&self, padded: &[T], rank: usize) -> Vec<T> {
        padded[self.rank_range(rank)].to_vec()
    }
}

/// Flatten parameters in declaration order, pad so the shard size is a
/// multiple of `alignment` and every rank gets an equal contiguous range.
pub fn build_shards(
    shapes: &[(String, ParamShape)],
    dp_degree: usize,
    alignment: usize,
) -> ShardLayout {
    assert!(dp_degree >= 1, "dp_degree must be at least 1");
    assert!(alignment >= 1, "alignment must be at least 1");
    let mut params = Vec::with_capacity(shapes.len());
    let mut offset = 0usize;
    for (id, (name, shape)) in shapes.iter().enumerate() {
        params.push(ParamDesc {
            id,
            name: name.clone(),
            shape: *shape,
            offset,
        });
        offset += shape.numel();
    }
    let granule = dp_degree * alignment;
    let padded_total = offset.div_ceil(granule).max(1) * granule;
    ShardLayout {
        params,
        dp_degree,
        alignment,
        total: offset,
        padded_total,
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ZeroError {
    #[error("rank {rank} does not own any part of parameter {param}")]
    NotOwner { rank: usize, param: usize },
    #[error(
        "parameter {param} spans {owners} ranks; the neighbor exchange supports at most 2 \
         (enable the all-gather fallback or use the allgather strategy)"
    )]
    UnsupportedSpan { param: usize, owners: usize },
    #[error("local shard length {got} does not match layout shard size {want}")]
    ShardLength { got: usize, want: usize },
    #[error(transparent)]
    Collective(#[from] CollectiveError),
    #[error(transparent)]
    Num(#[from] crate::error::NumError),
}

/// How whole orthogonalization inputs are assembled from shards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Exchange only split boundary parameters with immediate neighbors.
    SendRecv,
    /// All-gather the whole flat buffer on every rank.
    AllGather,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::SendRecv => "sendrecv",
            Strategy::AllGather => "allgather",
        }
    }
}

/// Reassemble the full flat values of one parameter from this rank's shard
/// slice, exchanging the incomplete portions with the single neighboring
/// owner when the parameter is split. The lower-ranked process sends first,
/// then receives; the higher-ranked does the reverse.
///
/// Returns the flat parameter values plus the number of received elements
/// (the transient reconstruction buffer).
pub fn reconstruct_param_flat<T: Scalar>(
    ctx: &mut RankCtx<Vec<T>>,
    layout: &ShardLayout,
    local: &[T],
    param_id: usize,
    tag_base: Tag,
) -> Result<(Vec<T>, usize), ZeroError> {
    if local.len() != layout.shard_size() {
        return Err(ZeroError::ShardLength {
            got: local.len(),
            want: layout.shard_size(),
        });
    }
    let rank = ctx.rank();
    let prange = layout.params[param_id].range();
    let rrange = layout.rank_range(rank);
    let overlap = prange.start.max(rrange.start)..prange.end.min(rrange.end);
    if overlap.is_empty() {
        return Err(ZeroError::NotOwner {
            rank,
            param: param_id,
        });
    }
    // Wholly contained: reshape directly, zero communication.
    if prange.start >= rrange.start && prange.end <= rrange.end {
        let start = prange.start - rrange.start;
        return Ok((local[start..start + prange.len()].to_vec(), 0));
    }
    let owners = layout.owners(param_id);
    if owners.len() > 2 {
        return Err(ZeroError::UnsupportedSpan {
            param: param_id,
            owners: owners.len(),
        });
    }
    let starts_before = prange.start < rrange.start;
    let neighbor = if starts_before { rank - 1 } else { rank + 1 };
    let mine: Vec<T> = local[overlap.start - rrange.start..overlap.end - rrange.start].to_vec();
    let tag = tag_base + param_id as Tag;
    let theirs = if rank < neighbor {
        ctx.send(neighbor, tag, mine.clone());
        ctx.recv(neighbor, tag)
    } else {
        let theirs = ctx.recv(neighbor, tag);
        ctx.send(neighbor, tag, mine.clone());
        theirs
    };
    let received = theirs.len();
    let full = if starts_before {
        // Their portion covers the head of the parameter.
        let mut v = theirs;
        v.extend_from_slice(&mine);
        v
    } else {
        let mut v = mine;
        v.extend_from_slice(&theirs);
        v
    };
    debug_assert_eq!(full.len(), prange.len());
    Ok((full, received))
}

/// As [`reconstruct_param_flat`], reshaped to the parameter's 2-D shape
/// (vector parameters come back as one row).
pub fn reconstruct_param<T: Scalar>(
    ctx: &mut RankCtx<Vec<T>>,
    layout: &ShardLayout,
    local: &[T],
    param_id: usize,
    tag_base: Tag,
) -> Result<Matrix<T>, ZeroError> {
    let (flat, _) = reconstruct_param_flat(ctx, layout, local, param_id, tag_base)?;
    let m = match layout.params[param_id].shape {
        ParamShape::Matrix(r, c) => Matrix::new(r, c, flat)?,
        ParamShape::Vector(n) => Matrix::new(1, n, flat)?,
    };
    Ok(m)
}

/// All-gather fallback for parameters spanning more than two ranks: every
/// owner exchanges its portion with every other owner pairwise (lower rank
/// sends first within each pair).
pub fn reconstruct_param_gather<T: Scalar>(
    ctx: &mut RankCtx<Vec<T>>,
    layout: &ShardLayout,
    local: &[T],
    param_id: usize,
    tag_base: Tag,
) -> Result<(Vec<T>, usize), ZeroError> {
    let rank = ctx.rank();
    let prange = layout.params[param_id].range();
    let rrange = layout.rank_range(rank);
    let overlap = prange.start.max(rrange.start)..prange.end.min(rrange.end);
    if overlap.is_empty() {
        return Err(ZeroError::NotOwner {
            rank,
            param: param_id,
        });
    }
    let owners = layout.owners(param_id);
    let mut full = vec![T::zero(); prange.len()];
    let mine = &local[overlap.start - rrange.start..overlap.end - rrange.start];
    full[overlap.start - prange.start..overlap.end - prange.start].copy_from_slice(mine);
    let mut received = 0usize;
    for i in 0..owners.len() {
        for j in i + 1..owners.len() {
            let (a, b) = (owners[i], owners[j]);
            if rank != a && rank != b {
                continue;
            }
            let peer = if rank == a { b } else { a };
            let tag = tag_base + (param_id * layout.dp_degree + peer.min(rank)) as Tag;
            let theirs = if rank < peer {
                ctx.send(peer, tag, mine.to_vec());
                ctx.recv(peer, tag)
            } else {
                let theirs = ctx.recv(peer, tag);
                ctx.send(peer, tag, mine.to_vec());
                theirs
            };
            received += theirs.len();
            let peer_range = {
                let rr = layout.rank_range(peer);
                prange.start.max(rr.start)..prange.end.min(rr.end)
            };
            full[peer_range.start - prange.start..peer_range.end - prange.start]
                .copy_from_slice(&theirs);
        }
    }
    Ok((full, received))
}

/// Per-rank shard of the Muon-optimized parameter group.
#[derive(Debug, Clone)]
pub struct MuonGroupShard<T> {
    pub layout: ShardLayout,
    pub master: Vec<T>,
    pub momentum: Vec<T>,
}

/// Per-rank shard of the AdamW-optimized parameter group.
#[derive(Debug, Clone)]
pub struct AdamwGroupShard<T> {
    pub layout: ShardLayout,
    pub master: Vec<T>,
    pub state: AdamWState<T>,
}

/// Step options for the distributed optimizer.
#[derive(Debug, Clone)]
pub struct DistOptConfig {
    pub muon: MuonConfig,
    pub strategy: Strategy,
    /// Reconstruct >2-rank spans with the per-parameter gather instead of
    /// failing, in SendRecv mode.
    pub wide_span_fallback: bool,
    pub adamw_eta: f64,
    pub adamw_delta: f64,
}

impl Default for DistOptConfig {
    fn default() -> Self {
        Self {
            muon: MuonConfig::default(),
            strategy: Strategy::SendRecv,
            wide_span_fallback: false,
            adamw_eta: 0.02,
            adamw_delta: 0.0,
        }
    }
}

/// Communication/memory accounting of one distributed step on one rank.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepStats {
    /// Bytes of reconstruction buffers received or gathered this step.
    pub transient_bytes: usize,
    /// Peak single-parameter reconstruction buffer, bytes.
    pub peak_param_transient_bytes: usize,
}

mod tags {
    use crate::fabric::Tag;
    pub const NSIN_EXCHANGE: Tag = 10_000;
    pub const WIDE_GATHER: Tag = 20_000;
    pub const GATHER_NSIN: Tag = 100;
    pub const GATHER_MUON: Tag = 110;
    pub const GATHER_ADAMW: Tag = 120;
}

/// One data-parallel optimizer step. Gradients arrive pre-averaged and
/// identical on every rank (data-parallel semantics); each rank updates only
/// its own shard slices and a final all-gather materializes the updated
/// working weights of both groups.
#[allow(clippy::too_many_arguments)]
pub fn distributed_muon_step<T: Scalar>(
    ctx: &mut RankCtx<Vec<T>>,
    muon: &mut MuonGroupShard<T>,
    adamw: &mut AdamwGroupShard<T>,
    grad_muon: &[T],
    grad_adamw: &[T],
    cfg: &DistOptConfig,
) -> Result<(Vec<T>, Vec<T>, StepStats), ZeroError> {
    let rank = ctx.rank();
    let group: Vec<usize> = (0..muon.layout.dp_degree).collect();
    let mut stats = StepStats::default();

    // Momentum and the orthogonalization input are elementwise in the flat
    // space, so they stay sharded.
    let g_pad = muon.layout.pad(grad_muon);
    let rrange = muon.layout.rank_range(rank);
    let g_local = &g_pad[rrange.clone()];
    let mu = T::from_f64_lossy(cfg.muon.mu);
    let mut ns_in_local = vec![T::zero(); muon.momentum.len()];
    for i in 0..muon.momentum.len() {
        muon.momentum[i] = mu * muon.momentum[i] + g_local[i];
        ns_in_local[i] = if cfg.muon.nesterov {
            g_local[i] + mu * muon.momentum[i]
        } else {
            muon.momentum[i]
        };
    }

    // Whole-matrix inputs for every parameter this rank (at least partly)
    // owns, assembled per strategy.
    let gathered_full = match cfg.strategy {
        Strategy::AllGather => {
            let full = allgather(ctx, &group, &ns_in_local, tags::GATHER_NSIN)?;
            stats.transient_bytes += full.len() * T::BYTES;
            stats.peak_param_transient_bytes =
                stats.peak_param_transient_bytes.max(full.len() * T::BYTES);
            Some(full)
        }
        Strategy::SendRecv => None,
    };

    let decay = T::from_f64_lossy(1.0 - cfg.muon.eta * cfg.muon.delta);
    for param in &muon.layout.params {
        let prange = param.range();
        let overlap = prange.start.max(rrange.start)..prange.end.min(rrange.end);
        if overlap.is_empty() {
            continue;
        }
        let ParamShape::Matrix(rows, cols) = param.shape else {
            return Err(ZeroError::Num(crate::error::NumError::NotTwoDim(
                "muon group parameter",
            )));
        };
        let flat = match &gathered_full {
            Some(full) => full[prange.clone()].to_vec(),
            None => {
                let result = reconstruct_param_flat(
                    ctx,
                    &muon.layout,
                    &ns_in_local,
                    param.id,
                    tags::NSIN_EXCHANGE,
                );
                let (flat, received) = match result {
                    Err(ZeroError::UnsupportedSpan { .. }) if cfg.wide_span_fallback => {
                        reconstruct_param_gather(
                            ctx,
                            &muon.layout,
                            &ns_in_local,
                            param.id,
                            tags::WIDE_GATHER,
                        )?
                    }
                    other => other?,
                };
                stats.transient_bytes += received * T::BYTES;
                stats.peak_param_transient_bytes =
                    stats.peak_param_transient_bytes.max(received * T::BYTES);
                flat
            }
        };
        let ns_in = Matrix::new(rows, cols, flat)?;
        let ns_out = newton_schulz(&ns_in, &cfg.muon)?;
        let lambda = T::from_f64_lossy(
            cfg.muon.eta * rms_match_factor(rows, cols, cfg.muon.rms_match_constant),
        );
        let ns_flat = ns_out.as_slice();
        for i in overlap.clone() {
            let w = &mut muon.master[i - rrange.start];
            *w = decay * *w;
            *w -= lambda * ns_flat[i - prange.start];
        }
    }

    // Non-2D parameters: plain elementwise AdamW on the shard.
    let ga_pad = adamw.layout.pad(grad_adamw);
    let ga_local = adamw.layout.shard_of(&ga_pad, rank);
    adamw_step_slice(
        &mut adamw.state,
        &mut adamw.master,
        &ga_local,
        cfg.adamw_eta,
        cfg.adamw_delta,
    )?;

    // Redistribute updated weights so every rank again holds full copies.
    let muon_full = allgather(ctx, &group, &muon.master, tags::GATHER_MUON)?;
    let adamw_full = allgather(ctx, &group, &adamw.master, tags::GATHER_ADAMW)?;
    Ok((muon_full, adamw_full, stats))
}

/// Analytic per-rank memory accounting for one sharded parameter group.
///
/// Persistent bytes cover the shard state copies (`state_copies` high
/// precision vectors of the shard size: master + momentum for Muon, master +
/// two moments for AdamW). Transient bytes are the reconstruction buffers of
/// the chosen strategy: the whole padded flat vector under all-gather, the
/// received missing portions of split parameters under SendRecv.
pub fn peak_memory_estimate(
    layout: &ShardLayout,
    strategy: Strategy,
    state_copies: usize,
    elem_bytes: usize,
) -> Vec<RankMemory> {
    (0..layout.dp_degree)
        .map(|rank| {
            let rrange = layout.rank_range(rank);
            let persistent = layout.shard_size() * state_copies * elem_bytes;
            let transient = match strategy {
                Strategy::AllGather => layout.padded_total * elem_bytes,
                Strategy::SendRecv => layout
                    .params
                    .iter()
                    .filter_map(|p| {
                        let prange = p.range();
                        let overlap = prange.start.max(rrange.start)..prange.end.min(rrange.end);
                        if overlap.is_empty() || overlap.len() == prange.len() {
                            None
                        } else {
                            Some((prange.len() - overlap.len()) * elem_bytes)
                        }
                    })
                    .sum(),
            };
            RankMemory {
                rank,
                persistent_bytes: persistent,
                transient_bytes: transient,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankMemory {
    pub rank: usize,
    pub persistent_bytes: usize,
    pub transient_bytes: usize,
}

/// Share of optimizer memory taken by the all-gather reconstruction buffer.
pub fn allgather_overhead_share(estimate: &[RankMemory]) -> f64 {
    let persistent: usize = estimate.iter().map(|m| m.persistent_bytes).sum();
    let transient: usize = estimate.iter().map(|m| m.transient_bytes).sum();
    transient as f64 / (transient + persistent).max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::run_fabric;

    fn mat(name: &str, r: usize, c: usize) -> (String, ParamShape) {
        (name.into(), ParamShape::Matrix(r, c))
    }

    #[test]
    fn single_param_single_rank() {
        let layout = build_shards(&[mat("w", 2, 5)], 1, 1);
        assert_eq!(layout.total, 10);
        assert_eq!(layout.padded_total, 10);
        assert_eq!(layout.rank_range(0), 0..10);
        assert_eq!(layout.owners(0), vec![0]);
    }

    #[test]
    fn two_params_four_ranks() {
        let layout = build_shards(&[mat("a", 2, 3), mat("b", 3, 2)], 4, 1);
        assert_eq!(layout.padded_total, 12);
        assert_eq!(layout.shard_size(), 3);
        assert_eq!(layout.owners(0), vec![0, 1]);
        assert_eq!(layout.owners(1), vec![2, 3]);
    }

    #[test]
    fn alignment_rounds_shard_size() {
        let layout = build_shards(&[mat("a", 1, 7), mat("b", 1, 5)], 4, 4);
        assert_eq!(layout.total, 12);
        assert_eq!(layout.padded_total, 16);
        assert_eq!(layout.shard_size(), 4);
        // Both params split across a shard edge; rank 3 holds pure padding.
        assert_eq!(layout.owners(0), vec![0, 1]);
        assert_eq!(layout.owners(1), vec![1, 2]);
    }

    #[test]
    fn ranges_partition_padded_total() {
        let layout = build_shards(&[mat("a", 3, 5), mat("b", 4, 4), mat("c", 1, 9)], 5, 8);
        assert_eq!(layout.padded_total % 5, 0);
        assert_eq!(layout.padded_total % 8, 0);
        let mut covered = 0;
        for r in 0..5 {
            let rr = layout.rank_range(r);
            assert_eq!(rr.start, covered);
            covered = rr.end;
        }
        assert_eq!(covered, layout.padded_total);
    }

    #[test]
    fn pad_unpad_round_trip() {
        let layout = build_shards(&[mat("a", 2, 3)], 4, 1);
        let flat: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let padded = layout.pad(&flat);
        assert_eq!(padded.len(), 8);
        assert_eq!(&layout.unpad(&padded), &flat);
    }

    #[test]
    fn reconstruct_whole_param_needs_no_messages() {
        let layout = build_shards(&[mat("a", 2, 3), mat("b", 3, 2)], 2, 1);
        let full: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let layout2 = layout.clone();
        let run = run_fabric::<Vec<f64>, _, _>(2, move |ctx| {
            let local = layout2.shard_of(&full, ctx.rank());
            let id = ctx.rank(); // rank 0 owns param 0 wholly, rank 1 param 1
            reconstruct_param(ctx, &layout2, &local, id, 0)
                .unwrap()
                .into_data()
        })
        .unwrap();
        assert!(run.transcript.is_empty(), "no communication expected");
        assert_eq!(run.results[0], (0..6).map(|i| i as f64).collect::<Vec<_>>());
        assert_eq!(
            run.results[1],
            (6..12).map(|i| i as f64).collect::<Vec<_>>()
        );
    }

    #[test]
    fn reconstruct_split_param_exchanges_lower_sends_first() {
        // [6,6] over dp=4: param 0 spans ranks {0,1}, param 1 spans {2,3}.
        let layout = build_shards(&[mat("a", 2, 3), mat("b", 2, 3)], 4, 1);
        let full: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let layout2 = layout.clone();
        let run = run_fabric::<Vec<f64>, _, _>(4, move |ctx| {
            let local = layout2.shard_of(&full, ctx.rank());
            let id = if ctx.rank() < 2 { 0 } else { 1 };
            reconstruct_param(ctx, &layout2, &local, id, 1000)
                .unwrap()
                .into_data()
        })
        .unwrap();
        for rank in 0..2 {
            assert_eq!(
                run.results[rank],
                (0..6).map(|i| i as f64).collect::<Vec<_>>()
            );
        }
        for rank in 2..4 {
            assert_eq!(
                run.results[rank],
                (6..12).map(|i| i as f64).collect::<Vec<_>>()
            );
        }
        // One send + one recv per rank; within each pair the lower rank's
        // send comes first in the global order.
        assert_eq!(run.transcript.len(), 4);
        for (lo, hi) in [(0usize, 1usize), (2, 3)] {
            let lo_seq = run
                .transcript
                .messages
                .iter()
                .find(|m| m.from == lo && m.to == hi)
                .unwrap()
                .seq;
            let hi_seq = run
                .transcript
                .messages
                .iter()
                .find(|m| m.from == hi && m.to == lo)
                .unwrap()
                .seq;
            assert!(lo_seq < hi_seq, "lower rank must send first");
        }
    }

    #[test]
    fn reconstruct_round_trips_random_layouts() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for trial in 0..50 {
            let dp = rng.gen_range(1..=4);
            // Keep every parameter within two shards: sizes below shard size.
            let n_params = rng.gen_range(1..=4);
            let shapes: Vec<(String, ParamShape)> = (0..n_params)
                .map(|i| {
                    (
                        format!("p{i}"),
                        ParamShape::Matrix(rng.gen_range(1..=3), rng.gen_range(1..=3)),
                    )
                })
                .collect();
            let total: usize = shapes.iter().map(|(_, s)| s.numel()).sum();
            let alignment = rng.gen_range(1..=2);
            let layout = build_shards(&shapes, dp, alignment);
            if layout.params.iter().any(|p| layout.owners(p.id).len() > 2) {
                continue;
            }
            let full: Vec<f64> = (0..total).map(|i| i as f64 + trial as f64).collect();
            let padded = layout.pad(&full);
            let layout2 = layout.clone();
            let padded2 = padded.clone();
            let run = run_fabric::<Vec<f64>, _, _>(dp, move |ctx| {
                let local = layout2.shard_of(&padded2, ctx.rank());
                let mut out = Vec::new();
                for p in &layout2.params {
                    if layout2.owners(p.id).contains(&ctx.rank()) {
                        let m = reconstruct_param(ctx, &layout2, &local, p.id, 1000).unwrap();
                        out.push((p.id, m.into_data()));
                    }
                }
                out
            })
            .unwrap();
            for per_rank in run.results {
                for (id, data) in per_rank {
                    let want = &full[layout.params[id].range()];
                    let got_bits: Vec<u64> = data.iter().map(|v| v.to_bits()).collect();
                    let want_bits: Vec<u64> = want.iter().map(|v| v.to_bits()).collect();
                    assert_eq!(got_bits, want_bits, "trial {trial} param {id}");
                }
            }
        }
    }

    #[test]
    fn wide_span_rejected_then_gathered_by_fallback() {
        // One 16-element param over dp=4 spans all four ranks.
        let layout = build_shards(&[mat("wide", 4, 4)], 4, 1);
        let full: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let layout2 = layout.clone();
        let run = run_fabric::<Vec<f64>, _, _>(4, move |ctx| {
            let local = layout2.shard_of(&full, ctx.rank());
            let direct = reconstruct_param_flat(ctx, &layout2, &local, 0, 1000);
            let fallback = reconstruct_param_gather(ctx, &layout2, &local, 0, 2000).unwrap();
            (direct.unwrap_err(), fallback.0)
        })
        .unwrap();
        for (err, gathered) in run.results {
            assert!(matches!(err, ZeroError::UnsupportedSpan { owners: 4, .. }));
            assert_eq!(gathered, (0..16).map(|i| i as f64).collect::<Vec<_>>());
        }
    }

    #[test]
    fn one_dim_parameter_in_matrix_group_is_rejected() {
        // The matrix optimizer only applies to 2-D parameters.
        let layout = build_shards(&[("v".to_string(), ParamShape::Vector(6))], 2, 1);
        let adamw_layout = build_shards(&[], 2, 1);
        let run = run_fabric::<Vec<f64>, _, _>(2, move |ctx| {
            let mut muon = MuonGroupShard {
                master: vec![0.5; layout.shard_size()],
                momentum: vec![0.0; layout.shard_size()],
                layout: layout.clone(),
            };
            let mut adamw = AdamwGroupShard {
                master: vec![0.0; adamw_layout.shard_size()],
                state: crate::muon::AdamWState::new(adamw_layout.shard_size()),
                layout: adamw_layout.clone(),
            };
            distributed_muon_step(
                ctx,
                &mut muon,
                &mut adamw,
                &[1.0; 6],
                &[],
                &DistOptConfig::default(),
            )
            .err()
        })
        .unwrap();
        for r in run.results {
            assert!(matches!(
                r,
                Some(ZeroError::Num(crate::error::NumError::NotTwoDim(_)))
            ));
        }
    }

    #[test]
    fn memory_estimate_matches_spec_examples() {
        // dp=1: no transient for sendrecv.
        let layout = build_shards(&[mat("a", 2, 3)], 1, 1);
        let est = peak_memory_estimate(&layout, Strategy::SendRecv, 2, 8);
        assert_eq!(est[0].transient_bytes, 0);

        // AllGather: padded_total x elem bytes on every rank.
        let layout = build_shards(&[mat("a", 2, 3), mat("b", 2, 3)], 4, 1);
        let est = peak_memory_estimate(&layout, Strategy::AllGather, 2, 8);
        for m in &est {
            assert_eq!(m.transient_bytes, 12 * 8);
        }

        // SendRecv on the [6,6]/dp=4 layout: one 3-element boundary exchange.
        let est = peak_memory_estimate(&layout, Strategy::SendRecv, 2, 8);
        for m in &est {
            assert_eq!(m.transient_bytes, 3 * 8, "rank {}", m.rank);
        }
    }
}
