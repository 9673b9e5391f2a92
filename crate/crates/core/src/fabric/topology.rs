//! Fabric topology description and the α–β transfer-time model.

use super::collective::CollectiveKind;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FabricMode {
    /// Switched intra-node fabric: full bandwidth at any participant count.
    Switched,
    /// Point-to-point mesh links: per-GPU bandwidth scales with participants.
    Xgmi,
}

/// Per-GPU achievable intra-node bandwidth over a point-to-point mesh:
/// `(n - 1) · B_link` for `n` participating GPUs.
pub fn xgmi_per_gpu_bw(n: usize, link_bw: f64) -> f64 {
    (n.saturating_sub(1)) as f64 * link_bw
}

/// Asymptotic bandwidth per scope, with optional per-collective overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BetaTable {
    pub intra: f64,
    pub inter: f64,
    #[serde(default)]
    pub intra_by_kind: std::collections::HashMap<CollectiveKind, f64>,
    #[serde(default)]
    pub inter_by_kind: std::collections::HashMap<CollectiveKind, f64>,
}

impl BetaTable {
    pub fn uniform(intra: f64, inter: f64) -> Self {
        Self {
            intra,
            inter,
            intra_by_kind: Default::default(),
            inter_by_kind: Default::default(),
        }
    }

    /// Scope default unless a per-kind override is configured.
    pub fn get(&self, kind: CollectiveKind, scope: Scope) -> f64 {
        match scope {
            Scope::Intra => self.intra_by_kind.get(&kind).copied().unwrap_or(self.intra),
            Scope::Inter => self.inter_by_kind.get(&kind).copied().unwrap_or(self.inter),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Intra,
    Inter,
}

/// Node/rank/link description used by the simulator and planners.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FabricTopology {
    pub ranks_per_node: usize,
    pub nodes: usize,
    /// Per-link bandwidth of the intra-node mesh, bytes/s.
    pub link_bw_intra: f64,
    /// Switched-fabric ceiling, bytes/s.
    pub bw_max_intra: f64,
    /// Per-rank NIC bandwidth, bytes/s.
    pub nic_bw: f64,
    pub mode: FabricMode,
    /// Fixed per-message latency, seconds.
    pub alpha: f64,
    /// Asymptotic bandwidths by scope.
    pub beta: BetaTable,
}

impl Default for FabricTopology {
    fn default() -> Self {
        Self {
            ranks_per_node: 8,
            nodes: 1,
            link_bw_intra: 64e9,
            bw_max_intra: 450e9,
            nic_bw: 50e9, // 400 Gbps
            mode: FabricMode::Xgmi,
            alpha: 10e-6,
            beta: BetaTable::uniform(400e9, 45e9),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("xgmi mode supports 1..=8 ranks per node, got {0}")]
    BadMeshSize(usize),
    #[error("bandwidths must be positive ({0})")]
    BadBandwidth(&'static str),
}

impl FabricTopology {
    pub fn validate(&self) -> Result<(), TopologyError> {
        if self.mode == FabricMode::Xgmi && !(1..=8).contains(&self.ranks_per_node) {
            return Err(TopologyError::BadMeshSize(self.ranks_per_node));
        }
        for (v, name) in [
            (self.link_bw_intra, "link_bw_intra"),
            (self.bw_max_intra, "bw_max_intra"),
            (self.nic_bw, "nic_bw"),
            (self.beta.intra, "beta.intra"),
            (self.beta.inter, "beta.inter"),
        ] {
            if v <= 0.0 {
                return Err(TopologyError::BadBandwidth(name));
            }
        }
        Ok(())
    }

    /// Effective bandwidth ceiling for a collective spanning `n_ranks`.
    pub fn beta_eff(&self, kind: CollectiveKind, scope: Scope, n_ranks: usize) -> f64 {
        let base = self.beta.get(kind, scope);
        match scope {
            Scope::Intra => {
                let fabric_cap = match self.mode {
                    FabricMode::Switched => self.bw_max_intra,
                    FabricMode::Xgmi => {
                        xgmi_per_gpu_bw(n_ranks.min(self.ranks_per_node), self.link_bw_intra)
                    }
                };
                base.min(fabric_cap)
            }
            Scope::Inter => base.min(self.nic_bw),
        }
    }

    pub fn scope_for(&self, n_ranks: usize) -> Scope {
        if n_ranks <= self.ranks_per_node {
            Scope::Intra
        } else {
            Scope::Inter
        }
    }
}

/// Predicted transfer time and bandwidth figures for one collective call.
#[derive(Debug, Clone, Serialize)]
pub struct TimePrediction {
    pub seconds: f64,
    pub alg_bw: f64,
    pub bus_bw: f64,
    pub beta_eff: f64,
    pub scope: Scope,
}

/// α–β transfer-time prediction: `T = α + m_eff/β_eff` where `m_eff` is the
/// per-rank message size scaled by the ring byte multiplier, and `β_eff` is
/// capped by the fabric (mesh ceiling or switched maximum intra-node, NIC
/// bandwidth inter-node). Small messages are latency-bound; as `m → ∞` the
/// achieved bus bandwidth approaches `β_eff`.
pub fn predict_time(
    topo: &FabricTopology,
    kind: CollectiveKind,
    msg_bytes: f64,
    n_ranks: usize,
) -> TimePrediction {
    let scope = topo.scope_for(n_ranks);
    let beta_eff = topo.beta_eff(kind, scope, n_ranks);
    let mult = kind.bus_multiplier(n_ranks.max(1));
    let m_eff = msg_bytes * mult;
    let seconds = if m_eff == 0.0 || beta_eff <= 0.0 {
        topo.alpha
    } else {
        topo.alpha + m_eff / beta_eff
    };
    let alg_bw = if seconds > 0.0 {
        msg_bytes / seconds
    } else {
        0.0
    };
    TimePrediction {
        seconds,
        alg_bw,
        bus_bw: alg_bw * mult,
        beta_eff,
        scope,
    }
}

/// Point-to-point transfer time; cross-rail traffic on a rails-only fabric
/// pays one extra α for the spine hop.
pub fn predict_p2p_time(topo: &FabricTopology, msg_bytes: f64, cross_rail: bool) -> f64 {
    let alpha = if cross_rail {
        2.0 * topo.alpha
    } else {
        topo.alpha
    };
    alpha + msg_bytes / topo.beta.inter.min(topo.nic_bw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topo() -> FabricTopology {
        FabricTopology::default()
    }

    #[test]
    fn zero_bytes_is_pure_latency() {
        let p = predict_time(&topo(), CollectiveKind::AllReduce, 0.0, 8);
        assert_eq!(p.seconds, topo().alpha);
    }

    #[test]
    fn mesh_ceiling_matches_link_scaling() {
        assert_eq!(xgmi_per_gpu_bw(8, 64e9), 448e9);
        assert_eq!(xgmi_per_gpu_bw(2, 64e9), 64e9);
        assert_eq!(xgmi_per_gpu_bw(1, 64e9), 0.0);
    }

    #[test]
    fn beta_capped_by_mesh_for_small_groups() {
        let t = topo();
        // Two-rank mesh collective is limited to one link.
        assert_eq!(t.beta_eff(CollectiveKind::AllReduce, Scope::Intra, 2), 64e9);
        // Full node approaches 448 GB/s, below the configured beta of 400.
        assert_eq!(
            t.beta_eff(CollectiveKind::AllReduce, Scope::Intra, 8),
            400e9
        );
    }

    #[test]
    fn inter_scope_capped_by_nic() {
        let mut t = topo();
        t.nodes = 4;
        assert_eq!(t.scope_for(32), Scope::Inter);
        assert_eq!(
            t.beta_eff(CollectiveKind::AllReduce, Scope::Inter, 32),
            45e9
        );
        t.beta.inter = 100e9;
        assert_eq!(
            t.beta_eff(CollectiveKind::AllReduce, Scope::Inter, 32),
            50e9
        );
    }

    #[test]
    fn prediction_monotone_in_bytes() {
        let t = topo();
        let mut last = 0.0;
        for bytes in [0.0, 1e3, 1e5, 1e7, 1e9] {
            let p = predict_time(&t, CollectiveKind::AllGather, bytes, 8);
            assert!(p.seconds >= last);
            last = p.seconds;
        }
    }

    #[test]
    fn busbw_approaches_beta_for_large_messages() {
        let t = topo();
        for kind in CollectiveKind::ALL {
            let beta = t.beta_eff(kind, Scope::Intra, 8);
            let m = 100.0 * t.alpha * beta;
            let p = predict_time(&t, kind, m, 8);
            assert!(
                (p.bus_bw - beta).abs() / beta < 0.05,
                "{kind:?}: busbw {} vs beta {beta}",
                p.bus_bw
            );
        }
    }

    #[test]
    fn per_kind_beta_override_applies() {
        let mut t = topo();
        t.beta.intra_by_kind.insert(CollectiveKind::AllToAll, 100e9);
        assert_eq!(t.beta_eff(CollectiveKind::AllToAll, Scope::Intra, 8), 100e9);
        assert_eq!(
            t.beta_eff(CollectiveKind::AllReduce, Scope::Intra, 8),
            400e9
        );
    }

    #[test]
    fn cross_rail_pays_extra_alpha() {
        let t = topo();
        let same = predict_p2p_time(&t, 0.0, false);
        let cross = predict_p2p_time(&t, 0.0, true);
        assert_eq!(cross, 2.0 * same);
    }

    #[test]
    fn validation_catches_bad_mesh() {
        let mut t = topo();
        t.ranks_per_node = 9;
        assert!(matches!(t.validate(), Err(TopologyError::BadMeshSize(9))));
        t.mode = FabricMode::Switched;
        assert!(t.validate().is_ok());
    }
}
