//! Context parallelism for the compressed-attention block: load-balanced
//! sequence sharding (two chunks per rank, zig-zag paired), halo exchange for
//! the causal convolutions, a distributed one-token value shift, and ring
//! attention with online softmax renormalization. Backward passes transpose
//! the communication pattern: halo sends become receives, the value-shift
//! all-gather becomes a reduce-scatter, and the k/v ring runs in reverse.

use crate::fabric::collective::{allgather, reducescatter};
use crate::fabric::{RankCtx, Tag};
use crate::matrix::Matrix;
use crate::model::cca::{DepthwiseConv, GroupedConv};
use crate::model::ModelError;
use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CparError {
    #[error("sequence length {seq} is not divisible by 2 x cp degree {cp}")]
    Indivisible { seq: usize, cp: usize },
    #[error("chunk of {chunk} tokens is shorter than the conv halo of {halo}")]
    ChunkTooShort { chunk: usize, halo: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Collective(#[from] crate::fabric::collective::CollectiveError),
}

/// Sequence sharding: `2·cp_degree` contiguous chunks, rank `r` holding
/// chunks `{r, 2·cp−1−r}` so per-rank causal-attention work is equal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CpLayout {
    pub cp_degree: usize,
    pub seq_len: usize,
    pub chunk_len: usize,
}

pub fn cp_layout(seq_len: usize, cp_degree: usize) -> Result<CpLayout, CparError> {
    if cp_degree == 0 || !seq_len.is_multiple_of(2 * cp_degree) {
        return Err(CparError::Indivisible {
            seq: seq_len,
            cp: cp_degree,
        });
    }
    Ok(CpLayout {
        cp_degree,
        seq_len,
        chunk_len: seq_len / (2 * cp_degree),
    })
}

impl CpLayout {
    pub fn n_chunks(&self) -> usize {
        2 * self.cp_degree
    }

    pub fn chunk_range(&self, chunk: usize) -> std::ops::Range<usize> {
        chunk * self.chunk_len..(chunk + 1) * self.chunk_len
    }

    pub fn owner(&self, chunk: usize) -> usize {
        chunk.min(self.n_chunks() - 1 - chunk)
    }

    /// The two chunks of a rank, ascending.
    pub fn chunks_of(&self, rank: usize) -> [usize; 2] {
        [rank, self.n_chunks() - 1 - rank]
    }

    /// Split a full sequence into this rank's chunk matrices.
    pub fn shard<T: Scalar>(&self, full: &Matrix<T>, rank: usize) -> Vec<Matrix<T>> {
        self.chunks_of(rank)
            .iter()
            .map(|&c| {
                let r = self.chunk_range(c);
                Matrix::from_fn(self.chunk_len, full.cols(), |i, j| full.get(r.start + i, j))
            })
            .collect()
    }

    /// Reassemble per-rank chunk lists into the full sequence.
    pub fn unshard<T: Scalar>(&self, per_rank: &[Vec<Matrix<T>>]) -> Matrix<T> {
        let cols = per_rank[0][0].cols();
        let mut full = Matrix::zeros(self.seq_len, cols);
        for (rank, chunks) in per_rank.iter().enumerate() {
            for (slot, &c) in self.chunks_of(rank).iter().enumerate() {
                let r = self.chunk_range(c);
                for i in 0..self.chunk_len {
                    for j in 0..cols {
                        full.set(r.start + i, j, chunks[slot].get(i, j));
                    }
                }
            }
        }
        full
    }
}

mod tags {
    use crate::fabric::Tag;
    pub const HALO: Tag = 3000;
    pub const HALO_BWD: Tag = 3100;
    pub const VSHIFT: Tag = 3200;
    pub const VSHIFT_BWD: Tag = 3230;
    pub const RING_FWD: Tag = 3400;
    pub const RING_BWD: Tag = 3500;
}

fn last_rows<T: Scalar>(m: &Matrix<T>, n: usize) -> Matrix<T> {
    Matrix::from_fn(n, m.cols(), |i, j| m.get(m.rows() - n + i, j))
}

fn vstack<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    Matrix::from_fn(a.rows() + b.rows(), b.cols(), |i, j| {
        if i < a.rows() {
            a.get(i, j)
        } else {
            b.get(i - a.rows(), j)
        }
    })
}

fn rows_range<T: Scalar>(m: &Matrix<T>, range: std::ops::Range<usize>) -> Matrix<T> {
    Matrix::from_fn(range.len(), m.cols(), |i, j| m.get(range.start + i, j))
}

fn to_vec<T: Scalar>(m: &Matrix<T>) -> Vec<T> {
    m.as_slice().to_vec()
}

fn from_vec<T: Scalar>(v: Vec<T>, rows: usize, cols: usize) -> Matrix<T> {
    Matrix::new(rows, cols, v).expect("message shape")
}

/// Forward halo exchange + local convolutions. Each chunk owner receives the
/// trailing `overhang` pre-conv tokens of the preceding chunk (zeros for
/// chunk 0), then evaluates both convolutions locally; the concatenated
/// outputs equal the serial convolution of the full sequence. Returns the
/// per-chunk outputs plus the extended inputs saved for the backward.
#[allow(clippy::type_complexity)]
pub fn halo_exchange_conv<T: Scalar>(
    ctx: &mut RankCtx<Vec<T>>,
    layout: &CpLayout,
    local: &[Matrix<T>],
    conv0: &DepthwiseConv<T>,
    conv1: &GroupedConv<T>,
) -> Result<(Vec<Matrix<T>>, Vec<Matrix<T>>), CparError> {
    let overhang = (conv0.width() - 1) + (conv1.width - 1);
    if layout.chunk_len < overhang {
        return Err(CparError::ChunkTooShort {
            chunk: layout.chunk_len,
            halo: overhang,
        });
    }
    let me = ctx.rank();
    let my_chunks = layout.chunks_of(me);

    // Send trailing tokens toward each successor chunk owned elsewhere.
    for (slot, &c) in my_chunks.iter().enumerate() {
        if c + 1 < layout.n_chunks() && layout.owner(c + 1) != me {
            let halo = last_rows(&local[slot], overhang);
            ctx.send(
                layout.owner(c + 1),
                tags::HALO + (c + 1) as Tag,
                to_vec(&halo),
            );
        }
    }

    let mut outputs = Vec::with_capacity(my_chunks.len());
    let mut saved_ext = Vec::with_capacity(my_chunks.len());
    for (slot, &c) in my_chunks.iter().enumerate() {
        let cols = local[slot].cols();
        let halo = if c == 0 {
            Matrix::zeros(overhang, cols)
        } else if layout.owner(c - 1) == me {
            let prev_slot = my_chunks.iter().position(|&x| x == c - 1).unwrap();
            last_rows(&local[prev_slot], overhang)
        } else {
            from_vec(
                ctx.recv(layout.owner(c - 1), tags::HALO + c as Tag),
                overhang,
                cols,
            )
        };
        let ext = vstack(&halo, &local[slot]);
        let out = conv_on_extended(&ext, conv0, conv1, layout.chunk_len)?;
        outputs.push(out);
        saved_ext.push(ext);
    }
    Ok((outputs, saved_ext))
}

/// Both convolutions over a halo-extended chunk; returns the rows belonging
/// to the chunk itself.
fn conv_on_extended<T: Scalar>(
    ext: &Matrix<T>,
    conv0: &DepthwiseConv<T>,
    conv1: &GroupedConv<T>,
    chunk_len: usize,
) -> Result<Matrix<T>, CparError> {
    let mid = conv0.apply(ext)?;
    // Rows below conv0's own lookback are boundary-polluted; conv1 only
    // needs outputs from (overhang of conv1) before the chunk.
    let mid_needed = rows_range(&mid, conv0.width() - 1..mid.rows());
    let out = conv1.apply(&mid_needed)?;
    Ok(rows_range(&out, out.rows() - chunk_len..out.rows()))
}

/// Backward of [`halo_exchange_conv`]: local VJPs, with halo-gradient
/// contributions sent back to each predecessor chunk's owner (the forward
/// sends reversed). Returns per-chunk input gradients plus this rank's
/// partial weight gradients (sum across ranks for the full gradient).
#[allow(clippy::type_complexity)]
pub fn halo_exchange_conv_backward<T: Scalar>(
    ctx: &mut RankCtx<Vec<T>>,
    layout: &CpLayout,
    saved_ext: &[Matrix<T>],
    conv0: &DepthwiseConv<T>,
    conv1: &GroupedConv<T>,
    dout: &[Matrix<T>],
) -> Result<(Vec<Matrix<T>>, Matrix<T>, Vec<Matrix<T>>), CparError> {
    let overhang = (conv0.width() - 1) + (conv1.width - 1);
    let me = ctx.rank();
    let my_chunks = layout.chunks_of(me);
    let mut dw0 = Matrix::zeros(conv0.weights.rows(), conv0.weights.cols());
    let mut dw1: Vec<Matrix<T>> = conv1
        .weights
        .iter()
        .map(|w| Matrix::zeros(w.rows(), w.cols()))
        .collect();

    // Local VJP per chunk over the extended inputs.
    let mut dext_all = Vec::with_capacity(my_chunks.len());
    for (slot, &_c) in my_chunks.iter().enumerate() {
        let ext = &saved_ext[slot];
        let mid = conv0.apply(ext)?;
        let mid_needed = rows_range(&mid, conv0.width() - 1..mid.rows());
        let out_full_rows = mid_needed.rows();
        // Upstream covers only the trailing chunk rows of conv1's output.
        let mut dout_full = Matrix::zeros(out_full_rows, dout[slot].cols());
        for i in 0..layout.chunk_len {
            for j in 0..dout[slot].cols() {
                dout_full.set(
                    out_full_rows - layout.chunk_len + i,
                    j,
                    dout[slot].get(i, j),
                );
            }
        }
        let (dmid_needed, dw1_part) = conv1.backward(&mid_needed, &dout_full)?;
        for (acc, part) in dw1.iter_mut().zip(&dw1_part) {
            *acc = acc.add(part).expect("conv1 grad shapes");
        }
        let mut dmid = Matrix::zeros(mid.rows(), mid.cols());
        for i in 0..dmid_needed.rows() {
            for j in 0..dmid.cols() {
                dmid.set(conv0.width() - 1 + i, j, dmid_needed.get(i, j));
            }
        }
        let (dext, dw0_part) = conv0.backward(ext, &dmid)?;
        dw0 = dw0.add(&dw0_part).expect("conv0 grad shapes");
        dext_all.push(dext);
    }

    // Halo gradients travel backward: successor chunk owners return the
    // gradient of the trailing tokens they borrowed.
    for (slot, &c) in my_chunks.iter().enumerate() {
        if c > 0 && layout.owner(c - 1) != me {
            let dhalo = rows_range(&dext_all[slot], 0..overhang);
            ctx.send(
                layout.owner(c - 1),
                tags::HALO_BWD + c as Tag,
                to_vec(&dhalo),
            );
        }
    }

    let mut dx = Vec::with_capacity(my_chunks.len());
    for (slot, &c) in my_chunks.iter().enumerate() {
        let cols = saved_ext[slot].cols();
        let mut grad = rows_range(&dext_all[slot], overhang..overhang + layout.chunk_len);
        // Contributions from the successor chunk's halo rows.
        if c + 1 < layout.n_chunks() {
            let dhalo = if layout.owner(c + 1) == me {
                let succ_slot = my_chunks.iter().position(|&x| x == c + 1).unwrap();
                rows_range(&dext_all[succ_slot], 0..overhang)
            } else {
                from_vec(
                    ctx.recv(layout.owner(c + 1), tags::HALO_BWD + (c + 1) as Tag),
                    overhang,
                    cols,
                )
            };
            for i in 0..overhang {
                let row = layout.chunk_len - overhang + i;
                for j in 0..cols {
                    grad.set(row, j, grad.get(row, j) + dhalo.get(i, j));
                }
            }
        }
        dx.push(grad);
    }
    Ok((dx, dw0, dw1))
}

/// Distributed one-token delay: all-gather the compressed stream along the
/// sequence, shift right with zero fill, re-shard to the same layout.
pub fn value_shift_dist<T: Scalar>(
    ctx: &mut RankCtx<Vec<T>>,
    layout: &CpLayout,
    local: &[Matrix<T>],
) -> Result<Vec<Matrix<T>>, CparError> {
    let cols = local[0].cols();
    let group: Vec<usize> = (0..layout.cp_degree).collect();
    let mine: Vec<T> = local.iter().flat_map(|m| m.as_slice().to_vec()).collect();
    let gathered = allgather(ctx, &group, &mine, tags::VSHIFT)?;

    // Rank-major chunk order -> sequence order.
    let mut full = Matrix::zeros(layout.seq_len, cols);
    let chunk_vals = layout.chunk_len * cols;
    for rank in 0..layout.cp_degree {
        for (slot, &c) in layout.chunks_of(rank).iter().enumerate() {
            let base = rank * 2 * chunk_vals + slot * chunk_vals;
            let r = layout.chunk_range(c);
            for i in 0..layout.chunk_len {
                for j in 0..cols {
                    full.set(r.start + i, j, gathered[base + i * cols + j]);
                }
            }
        }
    }
    let shifted = crate::model::cca::shift_right(&full);
    Ok(layout.shard(&shifted, ctx.rank()))
}

/// Backward of the distributed delay: the all-gather becomes a
/// reduce-scatter of the shift-adjoint contributions.
pub fn value_shift_dist_backward<T: Scalar>(
    ctx: &mut RankCtx<Vec<T>>,
    layout: &CpLayout,
    dlocal: &[Matrix<T>],
) -> Result<Vec<Matrix<T>>, CparError> {
    let cols = dlocal[0].cols();
    let me = ctx.rank();
    // Place my upstream gradients into the full sequence, zeros elsewhere.
    let mut dfull = Matrix::zeros(layout.seq_len, cols);
    for (slot, &c) in layout.chunks_of(me).iter().enumerate() {
        let r = layout.chunk_range(c);
        for i in 0..layout.chunk_len {
            for j in 0..cols {
                dfull.set(r.start + i, j, dlocal[slot].get(i, j));
            }
        }
    }
    let dinput_full = crate::model::cca::shift_right_backward(&dfull);
    // Rank-major chunk ordering so the reduce-scatter hands each rank its own
    // two chunks.
    let chunk_vals = layout.chunk_len * cols;
    let mut rank_major = vec![T::zero(); layout.seq_len * cols];
    for rank in 0..layout.cp_degree {
        for (slot, &c) in layout.chunks_of(rank).iter().enumerate() {
            let base = rank * 2 * chunk_vals + slot * chunk_vals;
            let r = layout.chunk_range(c);
            for i in 0..layout.chunk_len {
                for j in 0..cols {
                    rank_major[base + i * cols + j] = dinput_full.get(r.start + i, j);
                }
            }
        }
    }
    let group: Vec<usize> = (0..layout.cp_degree).collect();
    let mine = reducescatter(ctx, &group, &rank_major, tags::VSHIFT_BWD)?;
    Ok(vec![
        from_vec(mine[..chunk_vals].to_vec(), layout.chunk_len, cols),
        from_vec(mine[chunk_vals..].to_vec(), layout.chunk_len, cols),
    ])
}

/// Per-chunk attention accumulators and results.
#[derive(Debug, Clone)]
pub struct RingAttnOut<T> {
    /// Attention outputs per owned chunk.
    pub outputs: Vec<Matrix<T>>,
    /// Log-sum-exp per owned chunk (rows × query heads).
    pub lse: Vec<Matrix<T>>,
}

struct KvPackage<T> {
    k: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Scalar> KvPackage<T> {
    fn pack(&self) -> Vec<T> {
        self.k
            .iter()
            .chain(self.v.iter())
            .flat_map(|m| m.as_slice().to_vec())
            .collect()
    }

    fn unpack(data: &[T], chunk_len: usize, k_cols: usize, v_cols: usize) -> Self {
        let kn = chunk_len * k_cols;
        let vn = chunk_len * v_cols;
        Self {
            k: vec![
                from_vec(data[0..kn].to_vec(), chunk_len, k_cols),
                from_vec(data[kn..2 * kn].to_vec(), chunk_len, k_cols),
            ],
            v: vec![
                from_vec(data[2 * kn..2 * kn + vn].to_vec(), chunk_len, v_cols),
                from_vec(data[2 * kn + vn..].to_vec(), chunk_len, v_cols),
            ],
        }
    }
}

/// Online-softmax accumulator for one query chunk.
struct OnlineAcc<T> {
    m: Matrix<T>,
    l: Matrix<T>,
    acc: Matrix<T>,
}

#[allow(clippy::too_many_arguments)]
fn fold_block<T: Scalar>(
    state: &mut OnlineAcc<T>,
    q: &Matrix<T>,
    q_start: usize,
    k: &Matrix<T>,
    v: &Matrix<T>,
    kv_start: usize,
    heads_q: usize,
    heads_kv: usize,
) {
    let d = q.cols() / heads_q;
    let dv = v.cols() / heads_kv;
    let group = heads_q / heads_kv;
    let scale = T::from_f64_lossy(1.0 / (d as f64).sqrt());
    for hq in 0..heads_q {
        let hkv = hq / group;
        for i in 0..q.rows() {
            let gi = q_start + i;
            let visible = (gi + 1).saturating_sub(kv_start).min(k.rows());
            if visible == 0 {
                continue;
            }
            let mut logits = vec![T::zero(); visible];
            let mut block_max = T::neg_infinity();
            for (j, logit) in logits.iter_mut().enumerate() {
                let mut acc = T::zero();
                for e in 0..d {
                    acc += q.get(i, hq * d + e) * k.get(j, hkv * d + e);
                }
                *logit = acc * scale;
                block_max = block_max.max(*logit);
            }
            let m_old = state.m.get(i, hq);
            let m_new = m_old.max(block_max);
            let corr = if m_old == T::neg_infinity() {
                T::zero()
            } else {
                (m_old - m_new).exp()
            };
            let mut psum = T::zero();
            let mut pv = vec![T::zero(); dv];
            for (j, logit) in logits.iter().enumerate() {
                let p = (*logit - m_new).exp();
                psum += p;
                for (e, acc) in pv.iter_mut().enumerate() {
                    *acc += p * v.get(j, hkv * dv + e);
                }
            }
            state.m.set(i, hq, m_new);
            state.l.set(i, hq, state.l.get(i, hq) * corr + psum);
            for (e, add) in pv.iter().enumerate() {
                let idx = hq * dv + e;
                state.acc.set(i, idx, state.acc.get(i, idx) * corr + *add);
            }
        }
    }
}

/// Ring attention forward: k/v shards circulate around the rank ring while
/// each rank folds visiting blocks into running max/denominator/accumulator
/// per query row. `cp − 1` forwarding sends per rank.
pub fn ring_attention<T: Scalar>(
    ctx: &mut RankCtx<Vec<T>>,
    layout: &CpLayout,
    q: &[Matrix<T>],
    k: &[Matrix<T>],
    v: &[Matrix<T>],
    heads_q: usize,
    heads_kv: usize,
) -> Result<RingAttnOut<T>, CparError> {
    let me = ctx.rank();
    let cp = layout.cp_degree;
    let my_chunks = layout.chunks_of(me);
    let k_cols = k[0].cols();
    let v_cols = v[0].cols();
    let dv = v_cols / heads_kv;

    let mut states: Vec<OnlineAcc<T>> = (0..2)
        .map(|_| OnlineAcc {
            m: Matrix::from_fn(layout.chunk_len, heads_q, |_, _| T::neg_infinity()),
            l: Matrix::zeros(layout.chunk_len, heads_q),
            acc: Matrix::zeros(layout.chunk_len, heads_q * dv),
        })
        .collect();

    let mut visiting = KvPackage {
        k: k.to_vec(),
        v: v.to_vec(),
    };
    for step in 0..cp {
        let source_rank = (me + cp - step) % cp;
        let kv_chunks = layout.chunks_of(source_rank);
        for (slot, &qc) in my_chunks.iter().enumerate() {
            for (kslot, &kc) in kv_chunks.iter().enumerate() {
                if kc > qc {
                    continue;
                }
                fold_block(
                    &mut states[slot],
                    &q[slot],
                    layout.chunk_range(qc).start,
                    &visiting.k[kslot],
                    &visiting.v[kslot],
                    layout.chunk_range(kc).start,
                    heads_q,
                    heads_kv,
                );
            }
        }
        if step + 1 < cp {
            ctx.send((me + 1) % cp, tags::RING_FWD + step as Tag, visiting.pack());
            let data = ctx.recv((me + cp - 1) % cp, tags::RING_FWD + step as Tag);
            visiting = KvPackage::unpack(&data, layout.chunk_len, k_cols, v_cols);
        }
    }

    let mut outputs = Vec::with_capacity(2);
    let mut lse = Vec::with_capacity(2);
    for state in states {
        let out = Matrix::from_fn(layout.chunk_len, heads_q * dv, |i, j| {
            state.acc.get(i, j) / state.l.get(i, j / dv)
        });
        let l = Matrix::from_fn(layout.chunk_len, heads_q, |i, h| {
            state.m.get(i, h) + state.l.get(i, h).ln()
        });
        outputs.push(out);
        lse.push(l);
    }
    Ok(RingAttnOut { outputs, lse })
}

struct KvGradPackage<T> {
    kv: KvPackage<T>,
    dk: Vec<Matrix<T>>,
    dv: Vec<Matrix<T>>,
}

impl<T: Scalar> KvGradPackage<T> {
    fn pack(&self) -> Vec<T> {
        let mut out = self.kv.pack();
        for m in self.dk.iter().chain(self.dv.iter()) {
            out.extend_from_slice(m.as_slice());
        }
        out
    }

    fn unpack(data: &[T], chunk_len: usize, k_cols: usize, v_cols: usize) -> Self {
        let half = 2 * chunk_len * (k_cols + v_cols);
        let kv = KvPackage::unpack(&data[..half], chunk_len, k_cols, v_cols);
        let grads = KvPackage::unpack(&data[half..], chunk_len, k_cols, v_cols);
        Self {
            kv,
            dk: grads.k,
            dv: grads.v,
        }
    }
}

/// Ring attention backward: k/v shards travel the reverse ring bundled with
/// their gradient accumulators (forward sends become receives and vice
/// versa); each rank adds its dK/dV contributions as packages pass through
/// and accumulates dQ locally.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub fn ring_attention_backward<T: Scalar>(
    ctx: &mut RankCtx<Vec<T>>,
    layout: &CpLayout,
    q: &[Matrix<T>],
    k: &[Matrix<T>],
    v: &[Matrix<T>],
    fwd: &RingAttnOut<T>,
    dout: &[Matrix<T>],
    heads_q: usize,
    heads_kv: usize,
) -> Result<(Vec<Matrix<T>>, Vec<Matrix<T>>, Vec<Matrix<T>>), CparError> {
    let me = ctx.rank();
    let cp = layout.cp_degree;
    let my_chunks = layout.chunks_of(me);
    let k_cols = k[0].cols();
    let v_cols = v[0].cols();
    let d = q[0].cols() / heads_q;
    let dv_w = v_cols / heads_kv;
    let group = heads_q / heads_kv;
    let scale = T::from_f64_lossy(1.0 / (d as f64).sqrt());

    // Per-row <dout, out>, fixed for the whole pass.
    let dsum: Vec<Matrix<T>> = (0..2)
        .map(|slot| {
            Matrix::from_fn(layout.chunk_len, heads_q, |i, h| {
                let mut acc = T::zero();
                for e in 0..dv_w {
                    acc += dout[slot].get(i, h * dv_w + e) * fwd.outputs[slot].get(i, h * dv_w + e);
                }
                acc
            })
        })
        .collect();

    let mut dq: Vec<Matrix<T>> = (0..2)
        .map(|_| Matrix::zeros(layout.chunk_len, q[0].cols()))
        .collect();

    // Launch my package onto the reverse ring.
    let own = KvGradPackage {
        kv: KvPackage {
            k: k.to_vec(),
            v: v.to_vec(),
        },
        dk: (0..2)
            .map(|_| Matrix::zeros(layout.chunk_len, k_cols))
            .collect(),
        dv: (0..2)
            .map(|_| Matrix::zeros(layout.chunk_len, v_cols))
            .collect(),
    };
    ctx.send((me + cp - 1) % cp, tags::RING_BWD, own.pack());

    let mut result = None;
    for step in 0..cp {
        let data = ctx.recv((me + 1) % cp, tags::RING_BWD + step as Tag);
        let mut pkg = KvGradPackage::unpack(&data, layout.chunk_len, k_cols, v_cols);
        let source_rank = (me + step + 1) % cp;
        let kv_chunks = layout.chunks_of(source_rank);
        for (slot, &qc) in my_chunks.iter().enumerate() {
            let q_start = layout.chunk_range(qc).start;
            let dq_blk = &mut dq[slot];
            for (kslot, &kc) in kv_chunks.iter().enumerate() {
                if kc > qc {
                    continue;
                }
                let kv_start = layout.chunk_range(kc).start;
                let k_blk = &pkg.kv.k[kslot];
                let v_blk = &pkg.kv.v[kslot];
                let mut dk_blk = std::mem::replace(&mut pkg.dk[kslot], Matrix::zeros(0, 0));
                let mut dv_blk = std::mem::replace(&mut pkg.dv[kslot], Matrix::zeros(0, 0));
                for hq in 0..heads_q {
                    let hkv = hq / group;
                    for i in 0..layout.chunk_len {
                        let gi = q_start + i;
                        let visible = (gi + 1).saturating_sub(kv_start).min(layout.chunk_len);
                        for j in 0..visible {
                            let mut logit = T::zero();
                            for e in 0..d {
                                logit += q[slot].get(i, hq * d + e) * k_blk.get(j, hkv * d + e);
                            }
                            let p = (logit * scale - fwd.lse[slot].get(i, hq)).exp();
                            let mut dp = T::zero();
                            for e in 0..dv_w {
                                dp +=
                                    dout[slot].get(i, hq * dv_w + e) * v_blk.get(j, hkv * dv_w + e);
                            }
                            let ds = p * (dp - dsum[slot].get(i, hq)) * scale;
                            for e in 0..d {
                                let qi = hq * d + e;
                                dq_blk.set(
                                    i,
                                    qi,
                                    dq_blk.get(i, qi) + ds * k_blk.get(j, hkv * d + e),
                                );
                                let ki = hkv * d + e;
                                dk_blk.set(j, ki, dk_blk.get(j, ki) + ds * q[slot].get(i, qi));
                            }
                            for e in 0..dv_w {
                                let vi = hkv * dv_w + e;
                                dv_blk.set(
                                    j,
                                    vi,
                                    dv_blk.get(j, vi) + p * dout[slot].get(i, hq * dv_w + e),
                                );
                            }
                        }
                    }
                }
                pkg.dk[kslot] = dk_blk;
                pkg.dv[kslot] = dv_blk;
            }
        }
        if source_rank == me {
            result = Some(pkg);
        } else {
            ctx.send(
                (me + cp - 1) % cp,
                tags::RING_BWD + (step + 1) as Tag,
                pkg.pack(),
            );
        }
    }
    let home = result.expect("own package returns on the last step");
    Ok((dq, home.dk, home.dv))
}
