//! The registration network.
//!
//! Source and target streams are stacked along the batch axis and run through
//! one shared set of feature-drift layers. Each layer moves every source
//! feature by one shared offset; the offsets regress the translation. The
//! translation-removed coordinates and the per-layer feature gaps then feed an
//! attention classifier whose inlier weights drive a weighted SVD for the
//! rotation.

mod forward;
mod layers;
mod params;
#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

pub use forward::{
    forward, forward_graph, infer, logit_weights, svd_rotation, ForwardVars, NetOutput, PcfdTrace,
};
pub use layers::{
    ceu_features, cfd_layer, CfdOut, classify, cn_block, drift_heads, global_interaction, sca_block, translation_head, Net,
};
pub use params::{BnRunning, ModelParams, ParamInit, ParamSpec, BN_MOMENTUM};

/// How the translation is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum THead {
    /// Regressed from the concatenated drift offsets.
    Regress,
    /// Weighted Kabsch on the classifier weights (ablation).
    Svd,
}

/// How the rotation is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RHead {
    /// Weighted Procrustes on the translation-removed targets.
    Svd,
    /// Axis-angle regressed from pooled classifier features (ablation).
    Regress,
}

/// Residual block type of the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Sca,
    Cn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetarConfig {
    pub k_cfd: usize,
    pub m_sca: usize,
    pub channels: usize,
    pub groups: usize,
    pub n_corr: usize,
    pub t_head: THead,
    pub r_head: RHead,
    /// `false` replaces the consensus encoding with a plain embedding of the
    /// raw coordinate pair.
    pub use_ceu: bool,
    pub blocks: BlockKind,
}

impl Default for DetarConfig {
    fn default() -> Self {
        DetarConfig {
            k_cfd: 10,
            m_sca: 4,
            channels: 128,
            groups: 8,
            n_corr: 2560,
            t_head: THead::Regress,
            r_head: RHead::Svd,
            use_ceu: true,
            blocks: BlockKind::Sca,
        }
    }
}

impl DetarConfig {
    /// Reduced width and set size for single-CPU training.
    pub fn desk() -> Self {
        DetarConfig { channels: 64, n_corr: 512, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_cfd == 0 {
            bail!(Config, "k_cfd must be at least 1");
        }
        if self.m_sca == 0 {
            bail!(Config, "m_sca must be at least 1");
        }
        if self.channels == 0 || self.groups == 0 || self.channels % self.groups != 0 {
            bail!(Config, "channels ({}) must be a positive multiple of groups ({})", self.channels, self.groups);
        }
        if self.n_corr < 3 {
            bail!(Config, "n_corr must be at least 3, got {}", self.n_corr);
        }
        Ok(())
    }

    /// Width of the classifier input.
    pub fn feature_width(&self) -> usize {
        if self.use_ceu {
            2 * self.channels
        } else {
            self.channels
        }
    }
}
