//! The word-correctness classifier trained on top of frozen features.
//!
//! Per word `i`, the fused vector is
//! `z_i = [W_d d_i; W_loc r_i^loc; W_glob g; e_s]` (blocks present according
//! to the [`FusionMode`]), followed by LayerNorm → Linear → GELU → Dropout →
//! Linear → sigmoid.

mod checkpoint;
mod features;
mod model;
mod optim;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignpool::{PoolError, DEFAULT_TOP_K};
use crate::featio::FeatError;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC};
pub use features::{build_features, Batch, UtteranceFeatures};
pub use model::{
    backward, forward, gelu, gelu_grad, loss_and_gradients, masked_bce_logits, masked_bce_probs, sentence_score,
    Forward, Gradients, InputGradients,
};
pub use optim::{adamw_step, clip_global_norm, lr_at, AdamWConfig, OptimizerState, StepStats};
pub use params::{FusionParams, ParamView};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("mode {0} needs cross-attention but the bundle has none")]
    MissingAttention(FusionMode),
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),
    #[error("no valid words in batch")]
    NoValidWords,
    #[error("feature dims {found} do not match configured {expected} for {what}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Io(#[from] FeatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    DecoderOnly,
    Local,
    Global,
    Joint,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::DecoderOnly,
        FusionMode::Local,
        FusionMode::Global,
        FusionMode::Joint,
    ];

    pub fn uses_local(self) -> bool {
        matches!(self, FusionMode::Local | FusionMode::Joint)
    }

    pub fn uses_global(self) -> bool {
        matches!(self, FusionMode::Global | FusionMode::Joint)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::DecoderOnly => "decoder",
            FusionMode::Local => "local",
            FusionMode::Global => "global",
            FusionMode::Joint => "joint",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "decoder" | "decoder_only" => Ok(FusionMode::DecoderOnly),
            "local" => Ok(FusionMode::Local),
            "global" => Ok(FusionMode::Global),
            "joint" => Ok(FusionMode::Joint),
            other => Err(format!("unknown mode {other:?} (joint|local|global|decoder)")),
        }
    }
}

/// How layer-head pairs are chosen for local pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPolicy {
    /// The `k` sharpest pairs per utterance.
    TopK(usize),
    /// Every pair, averaged.
    All,
}

impl FromStr for HeadPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "all" {
            return Ok(HeadPolicy::All);
        }
        match s.parse::<usize>() {
            Ok(k) if k > 0 => Ok(HeadPolicy::TopK(k)),
            _ => Err(format!("head selection must be a positive integer or \"all\", got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// `D_h` of the decoder states.
    pub decoder_dim: usize,
    /// `D_e` of the encoder states.
    pub encoder_dim: usize,
    pub proj_dim: usize,
    pub severity_dim: usize,
    pub hidden_dim: usize,
    pub dropout_rate: f64,
    pub layernorm_epsilon: f64,
    pub head_selection: HeadPolicy,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Joint,
            decoder_dim: 768,
            encoder_dim: 768,
            proj_dim: 256,
            severity_dim: 128,
            hidden_dim: 256,
            dropout_rate: 0.1,
            layernorm_epsilon: 1e-5,
            head_selection: HeadPolicy::TopK(DEFAULT_TOP_K),
        }
    }
}

impl FusionConfig {
    /// Width of the fused vector `z_i`.
    pub fn fused_dim(&self) -> usize {
        let blocks = 1 + usize::from(self.mode.uses_local()) + usize::from(self.mode.uses_global());
        blocks * self.proj_dim + self.severity_dim
    }

    /// Column offsets of each block inside `z_i`: `(decoder, local, global, severity)`.
    pub fn block_offsets(&self) -> (usize, Option<usize>, Option<usize>, usize) {
        let mut cursor = self.proj_dim;
        let local = self.mode.uses_local().then(|| {
            let o = cursor;
            cursor += self.proj_dim;
            o
        });
        let global = self.mode.uses_global().then(|| {
            let o = cursor;
            cursor += self.proj_dim;
            o
        });
        (0, local, global, cursor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fused_width_per_mode() {
        let mut c = FusionConfig::default();
        let widths: Vec<usize> = FusionMode::ALL
            .iter()
            .map(|m| {
                c.mode = *m;
                c.fused_dim()
            })
            .collect();
        assert_eq!(widths, vec![384, 640, 640, 896]);
        c.mode = FusionMode::Global;
        assert_eq!(c.block_offsets(), (0, None, Some(256), 512));
    }

    #[test]
    fn parse_modes_and_policies() {
        assert_eq!("decoder".parse::<FusionMode>().unwrap(), FusionMode::DecoderOnly);
        assert!("both".parse::<FusionMode>().is_err());
        assert_eq!("all".parse::<HeadPolicy>().unwrap(), HeadPolicy::All);
        assert_eq!("10".parse::<HeadPolicy>().unwrap(), HeadPolicy::TopK(10));
        assert!("0".parse::<HeadPolicy>().is_err());
    }
}
