//! Ring collectives built on fabric point-to-point messaging.
//!
//! Every collective first circulates the per-rank payload length around the
//! ring (one scalar per hop) so shape mismatches surface as a consistent
//! error on every rank instead of corrupting data or deadlocking. Each
//! collective consumes a small contiguous block of tags starting at `tag`.

use super::{RankCtx, Tag};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollectiveKind {
    AllReduce,
    AllGather,
    ReduceScatter,
    AllToAll,
    Broadcast,
}

impl CollectiveKind {
    pub const ALL: [CollectiveKind; 5] = [
        CollectiveKind::AllReduce,
        CollectiveKind::AllGather,
        CollectiveKind::ReduceScatter,
        CollectiveKind::AllToAll,
        CollectiveKind::Broadcast,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CollectiveKind::AllReduce => "allreduce",
            CollectiveKind::AllGather => "allgather",
            CollectiveKind::ReduceScatter => "reducescatter",
            CollectiveKind::AllToAll => "alltoall",
            CollectiveKind::Broadcast => "broadcast",
        }
    }

    /// Standard ring byte multiplier relating algorithmic to bus bandwidth.
    pub fn bus_multiplier(&self, n: usize) -> f64 {
        let n = n as f64;
        match self {
            CollectiveKind::AllReduce => 2.0 * (n - 1.0) / n,
            CollectiveKind::AllGather
            | CollectiveKind::ReduceScatter
            | CollectiveKind::AllToAll => (n - 1.0) / n,
            CollectiveKind::Broadcast => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CollectiveError {
    #[error("collective over an empty group")]
    EmptyGroup,
    #[error("rank {rank} called a collective for group {group:?} it is not part of")]
    NotInGroup { rank: usize, group: Vec<usize> },
    #[error("group {0:?} contains duplicate ranks")]
    DuplicateRanks(Vec<usize>),
    #[error("payload lengths disagree across the group: {0:?}")]
    ShapeMismatch(Vec<usize>),
    #[error("alltoall payload of {len} elements is not divisible into {n} chunks")]
    ChunkIndivisible { len: usize, n: usize },
    #[error("broadcast root {root} is not in group {group:?}")]
    RootNotInGroup { root: usize, group: Vec<usize> },
}

struct Ring<'g> {
    group: &'g [usize],
    pos: usize,
}

impl<'g> Ring<'g> {
    fn new<M: super::Wire>(ctx: &RankCtx<M>, group: &'g [usize]) -> Result<Self, CollectiveError> {
        if group.is_empty() {
            return Err(CollectiveError::EmptyGroup);
        }
        let mut sorted = group.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != group.len() {
            return Err(CollectiveError::DuplicateRanks(group.to_vec()));
        }
        let pos =
            group
                .iter()
                .position(|&r| r == ctx.rank())
                .ok_or(CollectiveError::NotInGroup {
                    rank: ctx.rank(),
                    group: group.to_vec(),
                })?;
        Ok(Self { group, pos })
    }

    fn len(&self) -> usize {
        self.group.len()
    }

    fn next(&self) -> usize {
        self.group[(self.pos + 1) % self.len()]
    }

    fn prev(&self) -> usize {
        self.group[(self.pos + self.len() - 1) % self.len()]
    }
}

/// Circulate payload lengths so every rank agrees on the shape (or errors).
fn check_uniform_len<T: Scalar>(
    ctx: &mut RankCtx<Vec<T>>,
    ring: &Ring,
    len: usize,
    tag: Tag,
) -> Result<(), CollectiveError> {
    let n = ring.len();
    let mut lens = vec![0usize; n];
    lens[ring.pos] = len;
    let mut carry = len;
    for step in 0..n.saturating_sub(1) {
        ctx.send(ring.next(), tag, vec![T::from_f64_lossy(carry as f64)]);
        let got = ctx.recv(ring.prev(), tag);
        carry = got[0].to_f64().unwrap_or(0.0) as usize;
        let src_pos = (ring.pos + n - step - 1) % n;
        lens[src_pos] = carry;
    }
    if lens.iter().any(|&l| l != len) {
        return Err(CollectiveError::ShapeMismatch(lens));
    }
    Ok(())
}

/// Even split of `len` into `n` contiguous ranges (remainder spread left).
fn chunk_range(len: usize, n: usize, i: usize) -> std::ops::Range<usize> {
    let q = len / n;
    let r = len % n;
    let start = i * q + i.min(r);
    let size = q + usize::from(i < r);
    start..start + size
}

/// Ring all-gather: concatenation of every rank's payload in group order.
pub fn allgather<T: Scalar>(
    ctx: &mut RankCtx<Vec<T>>,
    group: &[usize],
    data: &[T],
    tag: Tag,
) -> Result<Vec<T>, CollectiveError> {
    let ring = Ring::new(ctx, group)?;
    check_uniform_len(ctx, &ring, data.len(), tag)?;
    let n = ring.len();
    let mut out = vec![T::zero(); n * data.len()];
    let slot = |i: usize| i * data.len()..(i + 1) * data.len();
    out[slot(ring.pos)].copy_from_slice(data);
    let mut cur = ring.pos;
    for _ in 0..n - 1 {
        let block = out[slot(cur)].to_vec();
        ctx.send(ring.next(), tag + 1, block);
        let got = ctx.recv(ring.prev(), tag + 1);
        cur = (cur + n - 1) % n;
        out[slot(cur)].copy_from_slice(&got);
    }
    Ok(out)
}

/// Ring reduce-scatter: rank at group position `i` ends with the elementwise
/// sum of everyone's chunk `i` (chunks are the even split of the payload).
pub fn reducescatter<T: Scalar>(
    ctx: &mut RankCtx<Vec<T>>,
    group: &[usize],
    data: &[T],
    tag: Tag,
) -> Result<Vec<T>, CollectiveError> {
    let ring = Ring::new(ctx, group)?;
    check_uniform_len(ctx, &ring, data.len(), tag)?;
    let n = ring.len();
    let mut buf = data.to_vec();
    let p = ring.pos;
    for step in 0..n - 1 {
        let send_c = (p + n - step + n - 1) % n;
        let recv_c = (p + n - step + n - 2) % n;
        ctx.send(
            ring.next(),
            tag + 1,
            buf[chunk_range(data.len(), n, send_c)].to_vec(),
        );
        let got = ctx.recv(ring.prev(), tag + 1);
        for (dst, src) in buf[chunk_range(data.len(), n, recv_c)].iter_mut().zip(&got) {
            *dst += *src;
        }
    }
    Ok(buf[chunk_range(data.len(), n, p)].to_vec())
}

/// Ring all-reduce (reduce-scatter followed by all-gather of the reduced
/// chunks): every rank ends with the full elementwise sum.
pub fn allreduce<T: Scalar>(
    ctx: &mut RankCtx<Vec<T>>,
    group: &[usize],
    data: &[T],
    tag: Tag,
) -> Result<Vec<T>, CollectiveError> {
    let ring = Ring::new(ctx, group)?;
    let reduced = reducescatter(ctx, group, data, tag)?;
    let n = ring.len();
    let p = ring.pos;
    // All-gather of uneven chunks: circulate each reduced chunk n-1 hops.
    let mut out = data.to_vec();
    out[chunk_range(data.len(), n, p)].copy_from_slice(&reduced);
    let mut cur = p;
    for _ in 0..n - 1 {
        let block = out[chunk_range(data.len(), n, cur)].to_vec();
        ctx.send(ring.next(), tag + 2, block);
        let got = ctx.recv(ring.prev(), tag + 2);
        cur = (cur + n - 1) % n;
        out[chunk_range(data.len(), n, cur)].copy_from_slice(&got);
    }
    Ok(out)
}

/// All-to-all of equal per-peer chunks: the `j`-th chunk of the payload goes
/// to the rank at group position `j`; the result holds chunk `pos` from every
/// rank, in group order.
pub fn alltoall<T: Scalar>(
    ctx: &mut RankCtx<Vec<T>>,
    group: &[usize],
    data: &[T],
    tag: Tag,
) -> Result<Vec<T>, CollectiveError> {
    let ring = Ring::new(ctx, group)?;
    check_uniform_len(ctx, &ring, data.len(), tag)?;
    let n = ring.len();
    if !data.len().is_multiple_of(n) {
        return Err(CollectiveError::ChunkIndivisible { len: data.len(), n });
    }
    let chunk = data.len() / n;
    let mut out = vec![T::zero(); data.len()];
    for j in 0..n {
        if j == ring.pos {
            out[j * chunk..(j + 1) * chunk]
                .copy_from_slice(&data[ring.pos * chunk..(ring.pos + 1) * chunk]);
        } else {
            ctx.send(
                ring.group[j],
                tag + 1,
                data[j * chunk..(j + 1) * chunk].to_vec(),
            );
        }
    }
    for j in 0..n {
        if j != ring.pos {
            let got = ctx.recv(ring.group[j], tag + 1);
            out[j * chunk..(j + 1) * chunk].copy_from_slice(&got);
        }
    }
    Ok(out)
}

/// Ring broadcast from `root`: the payload hops around the ring until every
/// rank holds the root's data.
pub fn broadcast<T: Scalar>(
    ctx: &mut RankCtx<Vec<T>>,
    group: &[usize],
    data: &[T],
    root: usize,
    tag: Tag,
) -> Result<Vec<T>, CollectiveError> {
    let ring = Ring::new(ctx, group)?;
    let root_pos =
        ring.group
            .iter()
            .position(|&r| r == root)
            .ok_or(CollectiveError::RootNotInGroup {
                root,
                group: group.to_vec(),
            })?;
    check_uniform_len(ctx, &ring, data.len(), tag)?;
    let n = ring.len();
    if n == 1 {
        return Ok(data.to_vec());
    }
    let owned = if ring.pos == root_pos {
        ctx.send(ring.next(), tag + 1, data.to_vec());
        data.to_vec()
    } else {
        let got = ctx.recv(ring.prev(), tag + 1);
        if (ring.pos + 1) % n != root_pos {
            ctx.send(ring.next(), tag + 1, got.clone());
        }
        got
    };
    Ok(owned)
}

/// Dispatch a collective by kind. `AllToAll` interprets the payload as
/// per-peer chunks; `Broadcast` uses the first group member as root.
pub fn run_collective<T: Scalar>(
    ctx: &mut RankCtx<Vec<T>>,
    kind: CollectiveKind,
    group: &[usize],
    data: &[T],
    tag: Tag,
) -> Result<Vec<T>, CollectiveError> {
    match kind {
        CollectiveKind::AllReduce => allreduce(ctx, group, data, tag),
        CollectiveKind::AllGather => allgather(ctx, group, data, tag),
        CollectiveKind::ReduceScatter => reducescatter(ctx, group, data, tag),
        CollectiveKind::AllToAll => alltoall(ctx, group, data, tag),
        CollectiveKind::Broadcast => broadcast(ctx, group, data, group[0], tag),
    }
}
