//! Distributed checkpointing: each rank persists its own optimizer shard,
//! the root rank additionally writes the consolidated bf16 weights, and a
//! completion marker lands last. Shards carry enough layout metadata that an
//! offline unpad–remap–repad pass can rewrite the checkpoint for a different
//! data-parallel degree without touching the weights file.
//!
//! Shard file layout (little-endian): magic `ZCKP`, version u32 = 1,
//! dp_degree u32, rank u32, payload length u64, then payload segments in
//! parameter-table order — the rank's owned portion of (master, momentum)
//! for Muon parameters and (master, m1, m2) for AdamW parameters. Padding is
//! never written; it is regenerated as zeros on load. The weights file is a
//! raw bf16 dump of every parameter in table order.

use crate::muon::AdamWState;
use crate::scalar::{bf16_bits_from_f32, Scalar};
use crate::trainer::TrainState;
use crate::zero::{build_shards, AdamwGroupShard, MuonGroupShard, ParamShape, ShardLayout};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"ZCKP";
const VERSION: u32 = 1;
const MARKER: &str = "COMPLETE";
const CRC: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_XZ);

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("checkpoint directory has no completion marker (partial write?)")]
    MissingMarker,
    #[error("digest mismatch in {file}: manifest {want:016x}, computed {got:016x}")]
    DigestMismatch { file: String, want: u64, got: u64 },
    #[error("bad shard magic in {0}")]
    BadMagic(String),
    #[error("unsupported shard version {0}")]
    BadVersion(u32),
    #[error("shard header disagrees with manifest in {0}")]
    HeaderMismatch(String),
    #[error("checkpoint stores {stored}-byte elements, requested scalar has {requested}")]
    ElementSize { stored: usize, requested: usize },
    #[error("new dp degree must be at least 1")]
    BadDp,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ManifestShape {
    Matrix { rows: usize, cols: usize },
    Vector { len: usize },
}

impl From<ParamShape> for ManifestShape {
    fn from(s: ParamShape) -> Self {
        match s {
            ParamShape::Matrix(rows, cols) => ManifestShape::Matrix { rows, cols },
            ParamShape::Vector(len) => ManifestShape::Vector { len },
        }
    }
}

impl From<&ManifestShape> for ParamShape {
    fn from(s: &ManifestShape) -> Self {
        match *s {
            ManifestShape::Matrix { rows, cols } => ParamShape::Matrix(rows, cols),
            ManifestShape::Vector { len } => ParamShape::Vector(len),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestParam {
    pub name: String,
    pub shape: ManifestShape,
    pub offset: usize,
    /// `muon` (master + momentum) or `adamw` (master + two moments).
    pub optimizer: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankFileEntry {
    pub rank: usize,
    pub file: String,
    pub payload_bytes: u64,
    pub crc64: u64,
    /// Per-rank metadata blob (RNG seed, step counters); its serialized
    /// length is the `m_r` term of the size model.
    pub meta: RankMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RankMeta {
    pub seed: u64,
    pub step_index: u64,
    pub adamw_step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub dp_degree: usize,
    pub alignment: usize,
    pub element_bytes: usize,
    pub muon_params: Vec<ManifestParam>,
    pub adamw_params: Vec<ManifestParam>,
    pub ranks: Vec<RankFileEntry>,
    pub weights_file: String,
    pub weights_bytes: u64,
    pub weights_crc64: u64,
}

impl CheckpointManifest {
    pub fn muon_layout(&self) -> ShardLayout {
        let shapes: Vec<(String, ParamShape)> = self
            .muon_params
            .iter()
            .map(|p| (p.name.clone(), ParamShape::from(&p.shape)))
            .collect();
        build_shards(&shapes, self.dp_degree, self.alignment)
    }

    pub fn adamw_layout(&self) -> ShardLayout {
        let shapes: Vec<(String, ParamShape)> = self
            .adamw_params
            .iter()
            .map(|p| (p.name.clone(), ParamShape::from(&p.shape)))
            .collect();
        build_shards(&shapes, self.dp_degree, self.alignment)
    }
}

/// Closed-form checkpoint sizes in bytes.
///
/// `total = P·b_lp + P_M·2·b_hp + P_A·3·b_hp + Σ m_r`; rank 0 additionally
/// carries the consolidated low-precision weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointSizes {
    pub total: f64,
    pub rank0: f64,
    /// Size of rank `r` (r ≠ 0) for each provided `m_r`.
    pub other_ranks: Vec<f64>,
}

pub fn checkpoint_sizes(
    p_muon: u64,
    p_adamw: u64,
    b_lp: u64,
    b_hp: u64,
    dp_degree: u64,
    meta_bytes: &[u64],
) -> CheckpointSizes {
    let p_total = p_muon + p_adamw;
    let meta_sum: u64 = meta_bytes.iter().sum();
    let opt_bytes = (2 * p_muon + 3 * p_adamw) * b_hp;
    let shard = opt_bytes as f64 / dp_degree.max(1) as f64;
    let m = |r: usize| meta_bytes.get(r).copied().unwrap_or(0) as f64;
    CheckpointSizes {
        total: (p_total * b_lp) as f64 + opt_bytes as f64 + meta_sum as f64,
        rank0: (p_total * b_lp) as f64 + shard + m(0),
        other_ranks: (1..dp_degree.max(1) as usize)
            .map(|r| shard + m(r))
            .collect(),
    }
}

fn shard_file_name(rank: usize) -> String {
    format!("shard_{rank:04}.bin")
}

/// Serialize one rank's payload: owned per-parameter state slices in table
/// order. `states_per_param` distinguishes Muon (master, momentum) from
/// AdamW (master, m1, m2).
fn rank_payload<T: Scalar>(layout: &ShardLayout, buffers: &[&[T]], rank: usize) -> Vec<u8> {
    let rrange = layout.rank_range(rank);
    let mut out = Vec::new();
    for param in &layout.params {
        let prange = param.range();
        let overlap = prange.start.max(rrange.start)..prange.end.min(rrange.end);
        if overlap.is_empty() {
            continue;
        }
        for buf in buffers {
            for idx in overlap.clone() {
                buf[idx - rrange.start].write_le(&mut out);
            }
        }
    }
    out
}

/// Write one rank's optimizer shard file; returns (payload bytes, crc64).
pub fn write_rank_shard<T: Scalar>(
    dir: &Path,
    state: &TrainState<T>,
    rank: usize,
) -> Result<(u64, u64), CkptError> {
    let mut payload = rank_payload(
        &state.muon.layout,
        &[&state.muon.master, &state.muon.momentum],
        rank,
    );
    payload.extend(rank_payload(
        &state.adamw.layout,
        &[
            &state.adamw.master,
            &state.adamw.state.m1,
            &state.adamw.state.m2,
        ],
        rank,
    ));
    let crc64 = CRC.checksum(&payload);
    let mut file = fs::File::create(dir.join(shard_file_name(rank)))?;
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(state.muon.layout.dp_degree as u32).to_le_bytes())?;
    file.write_all(&(rank as u32).to_le_bytes())?;
    file.write_all(&(payload.len() as u64).to_le_bytes())?;
    file.write_all(&payload)?;
    Ok((payload.len() as u64, crc64))
}

/// Write the consolidated bf16 weights (every parameter in table order).
pub fn write_weights_file<T: Scalar>(
    dir: &Path,
    name: &str,
    masters: &[&[T]],
) -> Result<(u64, u64), CkptError> {
    let mut bytes = Vec::new();
    for flat in masters {
        for v in flat.iter() {
            let b = bf16_bits_from_f32(v.to_f64().unwrap_or(f64::NAN) as f32);
            bytes.extend_from_slice(&b.to_le_bytes());
        }
    }
    let crc64 = CRC.checksum(&bytes);
    fs::write(dir.join(name), &bytes)?;
    Ok((bytes.len() as u64, crc64))
}

/// Save a complete checkpoint from all ranks' states (the out-of-fabric
/// convenience path: shards, weights, manifest, then the marker last).
pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    states: &[TrainState<T>],
    seed: u64,
) -> Result<CheckpointManifest, CkptError> {
    fs::create_dir_all(dir)?;
    let dp = states.len();
    let mut ranks = Vec::with_capacity(dp);
    for (rank, state) in states.iter().enumerate() {
        let (payload_bytes, crc64) = write_rank_shard(dir, state, rank)?;
        ranks.push(RankFileEntry {
            rank,
            file: shard_file_name(rank),
            payload_bytes,
            crc64,
            meta: RankMeta {
                seed,
                step_index: state.step_index,
                adamw_step: state.adamw.state.step,
            },
        });
    }

    // Consolidated weights from the assembled shards.
    let muon_layout = &states[0].muon.layout;
    let adamw_layout = &states[0].adamw.layout;
    let muon_full = assemble_full(muon_layout, states.iter().map(|s| s.muon.master.as_slice()));
    let adamw_full = assemble_full(
        adamw_layout,
        states.iter().map(|s| s.adamw.master.as_slice()),
    );
    let muon_unpadded = muon_layout.unpad(&muon_full);
    let adamw_unpadded = adamw_layout.unpad(&adamw_full);
    let (weights_bytes, weights_crc64) =
        write_weights_file(dir, "weights.bin", &[&muon_unpadded, &adamw_unpadded])?;

    let to_manifest = |layout: &ShardLayout, optimizer: &str| {
        layout
            .params
            .iter()
            .map(|p| ManifestParam {
                name: p.name.clone(),
                shape: p.shape.into(),
                offset: p.offset,
                optimizer: optimizer.into(),
            })
            .collect::<Vec<_>>()
    };
    let manifest = CheckpointManifest {
        version: VERSION,
        dp_degree: dp,
        alignment: muon_layout.alignment,
        element_bytes: T::BYTES,
        muon_params: to_manifest(muon_layout, "muon"),
        adamw_params: to_manifest(adamw_layout, "adamw"),
        ranks,
        weights_file: "weights.bin".into(),
        weights_bytes,
        weights_crc64,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    fs::write(dir.join(MARKER), b"ok\n")?;
    Ok(manifest)
}

fn assemble_full<'a, T: Scalar>(
    layout: &ShardLayout,
    shards: impl Iterator<Item = &'a [T]>,
) -> Vec<T> {
    let mut full = Vec::with_capacity(layout.padded_total);
    for shard in shards {
        full.extend_from_slice(shard);
    }
    assert_eq!(full.len(), layout.padded_total);
    full
}

fn read_payload(dir: &Path, entry: &RankFileEntry, dp: usize) -> Result<Vec<u8>, CkptError> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path)?;
    let name = entry.file.clone();
    if bytes.len() < 24 || &bytes[0..4] != MAGIC {
        return Err(CkptError::BadMagic(name));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CkptError::BadVersion(version));
    }
    let dp_file = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let rank_file = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let payload_len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    if dp_file != dp || rank_file != entry.rank || bytes.len() != 24 + payload_len {
        return Err(CkptError::HeaderMismatch(name));
    }
    let payload = bytes[24..].to_vec();
    let got = CRC.checksum(&payload);
    if got != entry.crc64 {
        return Err(CkptError::DigestMismatch {
            file: name,
            want: entry.crc64,
            got,
        });
    }
    Ok(payload)
}

/// Check marker + manifest and verify every digest.
pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest, CkptError> {
    if !dir.join(MARKER).exists() {
        return Err(CkptError::MissingMarker);
    }
    let manifest: CheckpointManifest =
        serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    Ok(manifest)
}

/// Byte ranges of one rank's payload, walked in table order. Yields
/// `(param_index, state_index, overlap_range_in_param)` tuples.
fn payload_walk(
    layout: &ShardLayout,
    rank: usize,
    copies: usize,
) -> Vec<(usize, usize, std::ops::Range<usize>)> {
    let rrange = layout.rank_range(rank);
    let mut segs = Vec::new();
    for (pi, param) in layout.params.iter().enumerate() {
        let prange = param.range();
        let overlap = prange.start.max(rrange.start)..prange.end.min(rrange.end);
        if overlap.is_empty() {
            continue;
        }
        for copy in 0..copies {
            segs.push((
                pi,
                copy,
                overlap.start - prange.start..overlap.end - prange.start,
            ));
        }
    }
    segs
}

/// Restore per-rank training states; `T` must match the stored element size.
pub fn load_checkpoint<T: Scalar>(
    dir: &Path,
) -> Result<(CheckpointManifest, Vec<TrainState<T>>), CkptError> {
    let manifest = read_manifest(dir)?;
    if manifest.element_bytes != T::BYTES {
        return Err(CkptError::ElementSize {
            stored: manifest.element_bytes,
            requested: T::BYTES,
        });
    }
    let muon_layout = manifest.muon_layout();
    let adamw_layout = manifest.adamw_layout();
    let mut states = Vec::with_capacity(manifest.dp_degree);
    for entry in &manifest.ranks {
        let payload = read_payload(dir, entry, manifest.dp_degree)?;
        let mut cursor = 0usize;
        let mut take = |n: usize| {
            let vals: Vec<T> = (0..n)
                .map(|i| T::read_le(&payload[cursor + i * T::BYTES..cursor + (i + 1) * T::BYTES]))
                .collect();
            cursor += n * T::BYTES;
            vals
        };

        let rank = entry.rank;
        let mut master = vec![T::zero(); muon_layout.shard_size()];
        let mut momentum = vec![T::zero(); muon_layout.shard_size()];
        let rrange = muon_layout.rank_range(rank);
        for (pi, copy, prange_local) in payload_walk(&muon_layout, rank, 2) {
            let param = &muon_layout.params[pi];
            let vals = take(prange_local.len());
            let dst = if copy == 0 {
                &mut master
            } else {
                &mut momentum
            };
            let start = param.offset + prange_local.start - rrange.start;
            dst[start..start + vals.len()].copy_from_slice(&vals);
        }
        let mut a_master = vec![T::zero(); adamw_layout.shard_size()];
        let mut m1 = vec![T::zero(); adamw_layout.shard_size()];
        let mut m2 = vec![T::zero(); adamw_layout.shard_size()];
        let arange = adamw_layout.rank_range(rank);
        for (pi, copy, prange_local) in payload_walk(&adamw_layout, rank, 3) {
            let param = &adamw_layout.params[pi];
            let vals = take(prange_local.len());
            let dst = match copy {
                0 => &mut a_master,
                1 => &mut m1,
                _ => &mut m2,
            };
            let start = param.offset + prange_local.start - arange.start;
            dst[start..start + vals.len()].copy_from_slice(&vals);
        }
        let mut adamw_state = AdamWState::new(adamw_layout.shard_size());
        adamw_state.m1 = m1;
        adamw_state.m2 = m2;
        adamw_state.step = entry.meta.adamw_step;
        states.push(TrainState {
            muon: MuonGroupShard {
                layout: muon_layout.clone(),
                master,
                momentum,
            },
            adamw: AdamwGroupShard {
                layout: adamw_layout.clone(),
                master: a_master,
                state: adamw_state,
            },
            step_index: entry.meta.step_index,
        });
    }
    Ok((manifest, states))
}

/// Offline unpad–remap–repad: rewrite the optimizer shards for a different
/// data-parallel degree. Works purely on bytes; the weights file is copied
/// unchanged.
pub fn reshape_checkpoint(
    dir: &Path,
    out_dir: &Path,
    new_dp: usize,
) -> Result<CheckpointManifest, CkptError> {
    if new_dp == 0 {
        return Err(CkptError::BadDp);
    }
    let manifest = read_manifest(dir)?;
    let eb = manifest.element_bytes;
    let old_muon = manifest.muon_layout();
    let old_adamw = manifest.adamw_layout();

    // Unpad/remap: collect the full logical byte vector of every state copy.
    let mut muon_state: Vec<Vec<u8>> = (0..2).map(|_| vec![0u8; old_muon.total * eb]).collect();
    let mut adamw_state: Vec<Vec<u8>> = (0..3).map(|_| vec![0u8; old_adamw.total * eb]).collect();
    for entry in &manifest.ranks {
        let payload = read_payload(dir, entry, manifest.dp_degree)?;
        let mut cursor = 0usize;
        for (pi, copy, prange_local) in payload_walk(&old_muon, entry.rank, 2) {
            let param = &old_muon.params[pi];
            let n = prange_local.len() * eb;
            let dst_start = (param.offset + prange_local.start) * eb;
            muon_state[copy][dst_start..dst_start + n]
                .copy_from_slice(&payload[cursor..cursor + n]);
            cursor += n;
        }
        for (pi, copy, prange_local) in payload_walk(&old_adamw, entry.rank, 3) {
            let param = &old_adamw.params[pi];
            let n = prange_local.len() * eb;
            let dst_start = (param.offset + prange_local.start) * eb;
            adamw_state[copy][dst_start..dst_start + n]
                .copy_from_slice(&payload[cursor..cursor + n]);
            cursor += n;
        }
    }

    // Repad: new layouts at the new degree, same alignment.
    let muon_shapes: Vec<(String, ParamShape)> = manifest
        .muon_params
        .iter()
        .map(|p| (p.name.clone(), ParamShape::from(&p.shape)))
        .collect();
    let adamw_shapes: Vec<(String, ParamShape)> = manifest
        .adamw_params
        .iter()
        .map(|p| (p.name.clone(), ParamShape::from(&p.shape)))
        .collect();
    let new_muon = build_shards(&muon_shapes, new_dp, manifest.alignment);
    let new_adamw = build_shards(&adamw_shapes, new_dp, manifest.alignment);

    fs::create_dir_all(out_dir)?;
    let mut ranks = Vec::with_capacity(new_dp);
    for rank in 0..new_dp {
        let mut payload = Vec::new();
        for (pi, copy, prange_local) in payload_walk(&new_muon, rank, 2) {
            let param = &new_muon.params[pi];
            let start = (param.offset + prange_local.start) * eb;
            payload.extend_from_slice(&muon_state[copy][start..start + prange_local.len() * eb]);
        }
        for (pi, copy, prange_local) in payload_walk(&new_adamw, rank, 3) {
            let param = &new_adamw.params[pi];
            let start = (param.offset + prange_local.start) * eb;
            payload.extend_from_slice(&adamw_state[copy][start..start + prange_local.len() * eb]);
        }
        let crc64 = CRC.checksum(&payload);
        let mut file = fs::File::create(out_dir.join(shard_file_name(rank)))?;
        file.write_all(MAGIC)?;
        file.write_all(&VERSION.to_le_bytes())?;
        file.write_all(&(new_dp as u32).to_le_bytes())?;
        file.write_all(&(rank as u32).to_le_bytes())?;
        file.write_all(&(payload.len() as u64).to_le_bytes())?;
        file.write_all(&payload)?;
        // Every new rank inherits the (replicated) run metadata of rank 0.
        ranks.push(RankFileEntry {
            rank,
            file: shard_file_name(rank),
            payload_bytes: payload.len() as u64,
            crc64,
            meta: manifest.ranks[0].meta.clone(),
        });
    }

    fs::copy(
        dir.join(&manifest.weights_file),
        out_dir.join(&manifest.weights_file),
    )?;
    let new_manifest = CheckpointManifest {
        dp_degree: new_dp,
        ranks,
        ..manifest
    };
    fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_vec_pretty(&new_manifest)?,
    )?;
    fs::write(out_dir.join(MARKER), b"ok\n")?;
    Ok(new_manifest)
}

/// Full logical optimizer byte vector (every state copy, unpadded, in table
/// order) — the quantity a reshape must preserve bitwise.
pub fn logical_state_bytes(dir: &Path) -> Result<Vec<u8>, CkptError> {
    let manifest = read_manifest(dir)?;
    let eb = manifest.element_bytes;
    let muon = manifest.muon_layout();
    let adamw = manifest.adamw_layout();
    let mut muon_state: Vec<Vec<u8>> = (0..2).map(|_| vec![0u8; muon.total * eb]).collect();
    let mut adamw_state: Vec<Vec<u8>> = (0..3).map(|_| vec![0u8; adamw.total * eb]).collect();
    for entry in &manifest.ranks {
        let payload = read_payload(dir, entry, manifest.dp_degree)?;
        let mut cursor = 0usize;
        for (pi, copy, prange_local) in payload_walk(&muon, entry.rank, 2) {
            let param = &muon.params[pi];
            let n = prange_local.len() * eb;
            let dst = (param.offset + prange_local.start) * eb;
            muon_state[copy][dst..dst + n].copy_from_slice(&payload[cursor..cursor + n]);
            cursor += n;
        }
        for (pi, copy, prange_local) in payload_walk(&adamw, entry.rank, 3) {
            let param = &adamw.params[pi];
            let n = prange_local.len() * eb;
            let dst = (param.offset + prange_local.start) * eb;
            adamw_state[copy][dst..dst + n].copy_from_slice(&payload[cursor..cursor + n]);
            cursor += n;
        }
    }
    Ok(muon_state
        .into_iter()
        .chain(adamw_state)
        .flatten()
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{init_states, three_param_spec, train_toy, ToyModelSpec};
    use crate::zero::DistOptConfig;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn sizes_toy_case_exact() {
        let s = checkpoint_sizes(100, 50, 2, 4, 4, &[0, 0, 0, 0]);
        assert_eq!(s.total, 1700.0);
        assert_eq!(s.rank0, 650.0);
        assert_eq!(s.other_ranks, vec![350.0, 350.0, 350.0]);
    }

    #[test]
    fn sizes_degenerate_zero() {
        let s = checkpoint_sizes(0, 0, 2, 4, 1, &[]);
        assert_eq!(s.total, 0.0);
        assert_eq!(s.rank0, 0.0);
    }

    #[test]
    fn save_load_round_trip_is_lossless() {
        let spec = ToyModelSpec::default();
        let cfg = DistOptConfig::default();
        let report = train_toy(&spec, init_states::<f64>(&spec, 2, 1, 42), 3, &cfg, 42).unwrap();
        let dir = tmp();
        save_checkpoint(dir.path(), &report.states, 42).unwrap();
        let (manifest, loaded) = load_checkpoint::<f64>(dir.path()).unwrap();
        assert_eq!(manifest.dp_degree, 2);
        for (orig, back) in report.states.iter().zip(&loaded) {
            let eq =
                |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(eq(&orig.muon.master, &back.muon.master));
            assert!(eq(&orig.muon.momentum, &back.muon.momentum));
            assert!(eq(&orig.adamw.master, &back.adamw.master));
            assert!(eq(&orig.adamw.state.m1, &back.adamw.state.m1));
            assert!(eq(&orig.adamw.state.m2, &back.adamw.state.m2));
            assert_eq!(orig.adamw.state.step, back.adamw.state.step);
            assert_eq!(orig.step_index, back.step_index);
        }
    }

    #[test]
    fn loader_refuses_directory_without_marker() {
        let spec = ToyModelSpec::default();
        let states = init_states::<f64>(&spec, 2, 1, 1);
        let dir = tmp();
        // Simulate a crash between the shard writes and the marker.
        std::fs::create_dir_all(dir.path()).unwrap();
        for (rank, state) in states.iter().enumerate() {
            write_rank_shard(dir.path(), state, rank).unwrap();
        }
        assert!(matches!(
            load_checkpoint::<f64>(dir.path()),
            Err(CkptError::MissingMarker)
        ));
    }

    #[test]
    fn corrupt_shard_digest_detected() {
        let spec = ToyModelSpec::default();
        let states = init_states::<f64>(&spec, 2, 1, 2);
        let dir = tmp();
        save_checkpoint(dir.path(), &states, 2).unwrap();
        let path = dir.path().join("shard_0001.bin");
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(dir.path()),
            Err(CkptError::DigestMismatch { .. })
        ));
    }

    #[test]
    fn shard_payload_bytes_match_size_model() {
        // Zero-padding layout: muon 10x10 = 100 elems, adamw 48, dp = 4.
        let spec = ToyModelSpec {
            dims: [10, 10, 4, 4],
            with_biases: false,
            batch: 2,
        };
        // Construct the states manually to hit exactly P_M = 100, P_A = 48.
        let mut states = init_states::<f64>(&spec, 4, 1, 3);
        for s in &mut states {
            let bias_shapes = vec![
                ("b1".to_string(), ParamShape::Vector(16)),
                ("b2".to_string(), ParamShape::Vector(32)),
            ];
            let layout = build_shards(&bias_shapes, 4, 1);
            s.adamw = AdamwGroupShard {
                master: vec![0.0; layout.shard_size()],
                state: AdamWState::new(layout.shard_size()),
                layout,
            };
        }
        // Keep only the 10x10 muon param.
        for s in &mut states {
            let layout = build_shards(&[("w".to_string(), ParamShape::Matrix(10, 10))], 4, 1);
            s.muon = MuonGroupShard {
                master: vec![0.5; layout.shard_size()],
                momentum: vec![0.0; layout.shard_size()],
                layout,
            };
        }
        let dir = tmp();
        let manifest = save_checkpoint(dir.path(), &states, 3).unwrap();
        let sizes = checkpoint_sizes(100, 48, 2, 8, 4, &[0; 4]);
        let per_rank = (2 * 100 + 3 * 48) * 8 / 4;
        for entry in &manifest.ranks {
            assert_eq!(entry.payload_bytes, per_rank as u64);
        }
        let expect_rank_r = per_rank as f64;
        assert_eq!(sizes.other_ranks[0], expect_rank_r);
        // Weights file: P_total x 2 bytes of bf16.
        assert_eq!(manifest.weights_bytes, (100 + 48) * 2);
        let weights_len = std::fs::metadata(dir.path().join("weights.bin"))
            .unwrap()
            .len();
        assert_eq!(weights_len, manifest.weights_bytes);
    }

    #[test]
    fn reshape_identity_preserves_logical_bytes() {
        let spec = three_param_spec();
        let report = train_toy(
            &spec,
            init_states::<f64>(&spec, 4, 1, 7),
            2,
            &DistOptConfig::default(),
            7,
        )
        .unwrap();
        let dir = tmp();
        save_checkpoint(dir.path(), &report.states, 7).unwrap();
        let out = tmp();
        reshape_checkpoint(dir.path(), out.path(), 4).unwrap();
        assert_eq!(
            logical_state_bytes(dir.path()).unwrap(),
            logical_state_bytes(out.path()).unwrap()
        );
    }

    #[test]
    fn reshape_8_3_8_round_trip_bitwise() {
        let spec = ToyModelSpec {
            dims: [4, 6, 5, 3],
            with_biases: true,
            batch: 4,
        };
        let report = train_toy(
            &spec,
            init_states::<f64>(&spec, 8, 1, 13),
            2,
            &DistOptConfig {
                strategy: crate::zero::Strategy::AllGather,
                ..Default::default()
            },
            13,
        )
        .unwrap();
        let d8 = tmp();
        save_checkpoint(d8.path(), &report.states, 13).unwrap();
        let d3 = tmp();
        reshape_checkpoint(d8.path(), d3.path(), 3).unwrap();
        let d8b = tmp();
        reshape_checkpoint(d3.path(), d8b.path(), 8).unwrap();
        let orig = logical_state_bytes(d8.path()).unwrap();
        let back = logical_state_bytes(d8b.path()).unwrap();
        assert_eq!(
            orig, back,
            "8 -> 3 -> 8 must restore the flat vector bitwise"
        );
        // The weights file never changes.
        assert_eq!(
            std::fs::read(d8.path().join("weights.bin")).unwrap(),
            std::fs::read(d8b.path().join("weights.bin")).unwrap()
        );
    }

    #[test]
    fn reshape_commutes_with_load() {
        // load(reshape(ckpt, d)) holds exactly the re-sliced state of
        // load(ckpt).
        let spec = ToyModelSpec::default();
        let report = train_toy(
            &spec,
            init_states::<f64>(&spec, 4, 1, 23),
            2,
            &DistOptConfig::default(),
            23,
        )
        .unwrap();
        let d4 = tmp();
        save_checkpoint(d4.path(), &report.states, 23).unwrap();
        let d2 = tmp();
        reshape_checkpoint(d4.path(), d2.path(), 2).unwrap();
        let (_, via_reshape) = load_checkpoint::<f64>(d2.path()).unwrap();

        // Manual reshard of the directly loaded dp=4 states.
        let (_, loaded4) = load_checkpoint::<f64>(d4.path()).unwrap();
        let muon_layout2 = build_shards(&spec.matrix_shapes(), 2, 1);
        let full_master: Vec<f64> = loaded4.iter().flat_map(|s| s.muon.master.clone()).collect();
        let unpadded = loaded4[0].muon.layout.unpad(&full_master);
        let repadded = muon_layout2.pad(&unpadded);
        for (rank, state) in via_reshape.iter().enumerate() {
            let want = muon_layout2.shard_of(&repadded, rank);
            let got: Vec<u64> = state.muon.master.iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = want.iter().map(|v| v.to_bits()).collect();
            assert_eq!(got, want, "rank {rank} master mismatch after reshape");
        }
    }

    #[test]
    fn resume_after_reshape_matches_unreshaped_run() {
        let spec = ToyModelSpec::default();
        let cfg = DistOptConfig::default();
        let seed = 31;

        // Run A: dp=4 for 3 steps, reshape to dp=2, resume 5 steps.
        let a = train_toy(&spec, init_states::<f64>(&spec, 4, 1, seed), 3, &cfg, seed).unwrap();
        let d4 = tmp();
        save_checkpoint(d4.path(), &a.states, seed).unwrap();
        let d2 = tmp();
        reshape_checkpoint(d4.path(), d2.path(), 2).unwrap();
        let (_, resumed) = load_checkpoint::<f64>(d2.path()).unwrap();
        let a_cont = train_toy(&spec, resumed, 5, &cfg, seed).unwrap();

        // Run B: dp=2 from scratch for 3 steps, then 5 more (no reshape).
        let b = train_toy(&spec, init_states::<f64>(&spec, 2, 1, seed), 3, &cfg, seed).unwrap();
        let b_cont = train_toy(&spec, b.states, 5, &cfg, seed).unwrap();

        for (x, y) in a_cont.losses.iter().zip(&b_cont.losses) {
            assert!(
                (x - y).abs() <= 1e-12,
                "post-reshape trajectory diverged: {x} vs {y}"
            );
        }
    }

    #[test]
    fn bf16_weights_round_deterministically() {
        let spec = three_param_spec();
        let states = init_states::<f64>(&spec, 2, 1, 17);
        let d1 = tmp();
        let d2 = tmp();
        let m1 = save_checkpoint(d1.path(), &states, 17).unwrap();
        let m2 = save_checkpoint(d2.path(), &states, 17).unwrap();
        assert_eq!(m1.weights_crc64, m2.weights_crc64);
        assert_eq!(
            std::fs::read(d1.path().join("weights.bin")).unwrap(),
            std::fs::read(d2.path().join("weights.bin")).unwrap()
        );
    }
}
