//! Embeddings, masked autoencoder and multi-modal forecasting heads.

use alloc::format;

use crate::{Error, Result};

pub mod autoencoder;
pub mod embedding;
pub mod forecasting;
pub(crate) mod layers;

pub use autoencoder::{MaeLoss, MaeModel, MaeOutput, ReconTargets};
pub use embedding::{TokenSet, TokenSource};
pub use forecasting::{Forecast, ForecastModel, WtaLoss};

/// Architecture hyperparameters shared by the pre-training and fine-tuning
/// models.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub modes: usize,
    pub dropout: f64,
    pub mlp_ratio: usize,
    /// Neighborhood-attention kernel per pyramid scale, finest first.
    pub fpn_kernels: [usize; 3],
    pub fpn_blocks: usize,
    /// History, future and lane reconstruction weights.
    pub loss_weights: [f64; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            encoder_depth: 4,
            decoder_depth: 4,
            heads: 8,
            modes: 6,
            dropout: 0.2,
            mlp_ratio: 4,
            fpn_kernels: [3, 5, 7],
            fpn_blocks: 1,
            loss_weights: [1.0, 1.0, 0.35],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.modes == 0 {
            return bad("modes must be at least 1".into());
        }
        if self.encoder_depth == 0 {
            return bad("encoder_depth must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be at least 1".into());
        }
        if let Some(k) = self.fpn_kernels.iter().find(|k| *k % 2 == 0) {
            return bad(format!("neighborhood kernel {k} must be odd"));
        }
        if self.fpn_blocks == 0 {
            return bad("fpn_blocks must be at least 1".into());
        }
        if self.loss_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return bad(format!("loss weights {:?} must be non-negative", self.loss_weights));
        }
        Ok(())
    }
}
