//! Toy-scale MoE transformer components: the MLP router with depth mixing
//! and PID bias balancing, residual scaling, compressed-attention sequence
//! mixing, and SwiGLU experts.

pub mod cca;
pub mod moe;
pub mod router;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite activations in {0}")]
    NonFinite(&'static str),
    #[error("expert index {index} out of range for {experts} experts")]
    ExpertOutOfRange { index: usize, experts: usize },
    #[error("loads must form a distribution (sum {0})")]
    NotADistribution(f64),
    #[error("sequence of {seq} tokens is shorter than the receptive field {field}")]
    SequenceTooShort { seq: usize, field: usize },
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Num(#[from] crate::error::NumError),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub attn_heads: usize,
    /// Query heads used by compressed attention.
    pub query_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub layers: usize,
    pub vocab_size: usize,
    pub experts: usize,
    pub top_k: usize,
    pub router_dim: usize,
    /// Expert FFN width before the gated activation.
    pub ffn_width: usize,
    /// Expert width after the gated activation (half of `ffn_width`).
    pub ffn_out_width: usize,
    /// Widths of the two causal sequence-mixing convolutions.
    pub conv0_width: usize,
    pub conv1_width: usize,
    pub seq_len: usize,
    pub microbatch: usize,
}

impl ModelConfig {
    /// Base-model preset.
    pub fn zaya1_base() -> Self {
        Self {
            hidden_size: 2048,
            attn_heads: 16,
            query_heads: 8,
            kv_heads: 2,
            head_dim: 128,
            layers: 40,
            vocab_size: 262_272,
            experts: 16,
            top_k: 1,
            router_dim: 256,
            ffn_width: 4096,
            ffn_out_width: 2048,
            conv0_width: 2,
            conv1_width: 2,
            seq_len: 4096,
            microbatch: 5,
        }
    }

    /// A small configuration for tests and the toy trainer.
    pub fn tiny() -> Self {
        Self {
            hidden_size: 16,
            attn_heads: 4,
            query_heads: 2,
            kv_heads: 1,
            head_dim: 4,
            layers: 2,
            vocab_size: 64,
            experts: 4,
            top_k: 1,
            router_dim: 8,
            ffn_width: 12,
            ffn_out_width: 6,
            conv0_width: 2,
            conv1_width: 2,
            seq_len: 8,
            microbatch: 1,
        }
    }

    pub fn by_preset(name: &str) -> Option<Self> {
        match name {
            "zaya1-base" => Some(Self::zaya1_base()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.head_dim * self.attn_heads != self.hidden_size {
            return Err(ModelError::BadConfig(format!(
                "head_dim {} x attn_heads {} != hidden_size {}",
                self.head_dim, self.attn_heads, self.hidden_size
            )));
        }
        if self.ffn_out_width * 2 != self.ffn_width {
            return Err(ModelError::BadConfig(format!(
                "gated activation needs ffn_width {} = 2 x ffn_out_width {}",
                self.ffn_width, self.ffn_out_width
            )));
        }
        if self.top_k < 1 || self.experts < self.top_k {
            return Err(ModelError::BadConfig(format!(
                "need experts {} >= top_k {} >= 1",
                self.experts, self.top_k
            )));
        }
        if self.query_heads == 0
            || self.kv_heads == 0
            || !self.query_heads.is_multiple_of(self.kv_heads)
            || self.query_heads > self.attn_heads
        {
            return Err(ModelError::BadConfig(format!(
                "query_heads {} must be a nonzero multiple of kv_heads {}",
                self.query_heads, self.kv_heads
            )));
        }
        Ok(())
    }

    /// Parameters added per layer by the router:
    /// `hidden·router_dim + 2·router_dim² + router_dim·experts`.
    pub fn router_param_overhead(&self) -> usize {
        self.hidden_size * self.router_dim
            + 2 * self.router_dim * self.router_dim
            + self.router_dim * self.experts
    }

    /// Scalars added model-wide by residual scaling: two instances per layer
    /// (residual path and layer-input path), each a gate and a bias vector of
    /// the hidden width.
    pub fn residual_scale_param_count(&self) -> usize {
        2 * self.layers * (2 * self.hidden_size)
    }

    /// The 2-D parameter shapes of one full model, in declaration order.
    /// Used by sharding layouts and the optimizer memory report.
    pub fn matrix_param_shapes(&self) -> Vec<(String, usize, usize)> {
        let h = self.hidden_size;
        let d = self.head_dim;
        let mut shapes = Vec::new();
        for l in 0..self.layers {
            shapes.push((format!("layer{l}.attn.wq"), h, self.query_heads * d));
            shapes.push((format!("layer{l}.attn.wk"), h, self.kv_heads * d));
            shapes.push((format!("layer{l}.attn.wv1"), h, self.kv_heads * d / 2));
            shapes.push((format!("layer{l}.attn.wv2"), h, self.kv_heads * d / 2));
            shapes.push((format!("layer{l}.attn.wo"), self.query_heads * d, h));
            shapes.push((format!("layer{l}.router.down"), h, self.router_dim));
            shapes.push((
                format!("layer{l}.router.mlp1"),
                self.router_dim,
                self.router_dim,
            ));
            shapes.push((
                format!("layer{l}.router.mlp2"),
                self.router_dim,
                self.router_dim,
            ));
            shapes.push((
                format!("layer{l}.router.logits"),
                self.router_dim,
                self.experts,
            ));
            for e in 0..self.experts {
                shapes.push((format!("layer{l}.expert{e}.fc1"), h, self.ffn_width));
                shapes.push((format!("layer{l}.expert{e}.fc2"), self.ffn_out_width, h));
            }
        }
        shapes.push(("lm_head".into(), h, self.vocab_size));
        shapes
    }
}
