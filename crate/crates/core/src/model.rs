//! Model configuration and weights: a feature pyramid plus attention stack.

use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionConfig};
use crate::error::{Error, Result};
use crate::features::{self, FeatureMode, PyramidConfig};
use crate::params::Params;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub pyramid: PyramidConfig,
    pub attention: AttentionConfig,
    /// Multiplies the `1/sqrt(C_l)` correspondence-map temperature.
    pub logit_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Full-size depths, heads and module counts.
    pub fn paper() -> Self {
        ModelConfig {
            pyramid: PyramidConfig::paper(),
            attention: AttentionConfig::default(),
            logit_gain: 1.0,
        }
    }

    /// Sized to train in minutes on one CPU core: narrow pyramid, one
    /// dense module, beam modules at scales 4 and 3 only.
    pub fn desk() -> Self {
        ModelConfig {
            pyramid: PyramidConfig {
                levels: 5,
                channels: vec![16, 16, 16, 32, 32],
                mode: FeatureMode::Learnable,
            },
            attention: AttentionConfig {
                heads: vec![2; 5],
                dense_modules: 1,
                beam_modules: vec![1, 1, 0, 0],
                ffn_kernel: 3,
            },
            logit_gain: 1.0,
        }
    }

    /// Frozen handcrafted features, no attention. Unit-norm features give
    /// logits in `[-gain/sqrt(C), gain/sqrt(C)]`, so a large gain is needed
    /// for peaked maps.
    pub fn handcrafted(levels: usize, logit_gain: f64) -> Self {
        ModelConfig {
            pyramid: PyramidConfig::handcrafted(levels),
            attention: AttentionConfig::disabled(levels),
            logit_gain,
        }
    }

    /// Small learnable network used by the desk-scale experiments.
    pub fn tiny(levels: usize, channels: usize) -> Self {
        ModelConfig {
            pyramid: PyramidConfig {
                levels,
                channels: vec![channels; levels],
                mode: FeatureMode::Learnable,
            },
            attention: AttentionConfig {
                heads: vec![2; levels],
                dense_modules: 1,
                beam_modules: vec![1; levels - 1],
                ffn_kernel: 3,
            },
            logit_gain: 1.0,
        }
    }

    pub fn levels(&self) -> usize {
        self.pyramid.levels
    }

    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        self.attention.validate(&self.pyramid)?;
        if !(self.logit_gain.is_finite() && self.logit_gain > 0.0) {
            return Err(Error::Config(format!("logit gain must be positive, got {}", self.logit_gain)));
        }
        Ok(())
    }
}

/// Configuration plus `f32` weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params<f32>,
}

impl Model {
    /// Fresh weights, deterministic per seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut params = Params::new();
        features::init_weights(&config.pyramid, seed, &mut params)?;
        attention::init_weights(&config.attention, &config.pyramid, seed ^ 0xa77e_0000, &mut params)?;
        Ok(Model { config, params })
    }

    pub fn is_trainable(&self) -> bool {
        !self.params.is_empty()
    }
}
