//! Experiment configuration.
//!
//! A config file (TOML or JSON) may set any subset of fields; everything
//! else comes from the profile named by `profile` (default `desk`). The
//! fully resolved config is embedded in every checkpoint and report.
//!
//! ```toml
//! profile = "desk"
//! seed = 7
//! [model]
//! dim = 32
//! [masking]
//! alpha = 0.5
//! [train]
//! pretrain_epochs = 4
//! [data.generator]
//! max_agents = 6
//! ```

use std::path::Path;

use motion_mae_core::model::ModelConfig;
use motion_mae_core::scene::{GenConfig, SHIFT_CITIES, TRAIN_CITIES};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingConfig {
    /// Fraction of agents whose history is masked.
    pub alpha: f64,
    /// Fraction of lane segments masked.
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub warmup_epochs: usize,
    /// Validation metrics are computed every this many fine-tuning epochs
    /// and after the last one.
    pub eval_every: usize,
}

/// Generator fields that override the per-city presets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_agents: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_agents: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub road_half_length: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partial_observation_prob: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub behavior_mix: Option<[f64; 3]>,
}

impl GeneratorOverrides {
    pub fn apply(&self, mut g: GenConfig) -> GenConfig {
        if let Some(v) = self.min_agents {
            g.min_agents = v;
        }
        if let Some(v) = self.max_agents {
            g.max_agents = v;
        }
        if let Some(v) = self.road_half_length {
            g.road_half_length = v;
        }
        if let Some(v) = self.noise_sigma {
            g.noise_sigma = v;
        }
        if let Some(v) = self.partial_observation_prob {
            g.partial_observation_prob = v;
        }
        if let Some(v) = self.behavior_mix {
            g.behavior_mix = v;
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Seed of the corpus; independent of the training seed.
    pub seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Scenes from `shift_cities`, for evaluation under distribution shift.
    pub shift_scenes: usize,
    pub train_cities: Vec<String>,
    pub shift_cities: Vec<String>,
    #[serde(default)]
    pub generator: GeneratorOverrides,
}

impl DataConfig {
    pub fn generator_for(&self, city: &str) -> GenConfig {
        self.generator.apply(GenConfig::for_city(city))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: String,
    /// Seed of initialisation, masking, shuffling and dropout.
    pub seed: u64,
    pub model: ModelConfig,
    pub masking: MaskingConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn cities(list: &[&str]) -> Vec<String> {
    list.iter().map(|c| c.to_string()).collect()
}

impl ExperimentConfig {
    /// Reference hyperparameters at the full data scale.
    pub fn full() -> Self {
        Self {
            profile: "full".into(),
            seed: 0,
            model: ModelConfig::default(),
            masking: MaskingConfig { alpha: 0.4, beta: 0.5 },
            train: TrainConfig {
                lr: 1e-3,
                weight_decay: 1e-4,
                batch_size: 128,
                pretrain_epochs: 60,
                finetune_epochs: 60,
                warmup_epochs: 10,
                eval_every: 1,
            },
            data: DataConfig {
                seed: 0,
                train_scenes: 200_000,
                val_scenes: 25_000,
                shift_scenes: 25_000,
                train_cities: cities(&TRAIN_CITIES),
                shift_cities: cities(&SHIFT_CITIES),
                generator: GeneratorOverrides::default(),
            },
        }
    }

    /// Scaled down to run on a single CPU core in minutes.
    pub fn desk() -> Self {
        let full = Self::full();
        Self {
            profile: "desk".into(),
            model: ModelConfig {
                dim: 32,
                encoder_depth: 2,
                decoder_depth: 2,
                heads: 4,
                mlp_ratio: 2,
                dropout: 0.0,
                ..full.model
            },
            train: TrainConfig {
                lr: 3e-3,
                batch_size: 32,
                pretrain_epochs: 4,
                finetune_epochs: 4,
                warmup_epochs: 1,
                eval_every: 4,
                ..full.train
            },
            data: DataConfig {
                train_scenes: 2000,
                val_scenes: 400,
                shift_scenes: 400,
                generator: GeneratorOverrides {
                    max_agents: Some(6),
                    road_half_length: Some(40.0),
                    ..Default::default()
                },
                ..full.data
            },
            ..full
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected desk or full)"))),
        }
    }

    /// Profile defaults overlaid with the fields present in `text`.
    pub fn parse(text: &str, format: ConfigFormat) -> Result<Self> {
        let overlay: serde_json::Value = match format {
            ConfigFormat::Json => serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?,
            ConfigFormat::Toml => {
                let v: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
                serde_json::to_value(v).map_err(|e| Error::Config(e.to_string()))?
            }
        };
        let profile = overlay.get("profile").and_then(|p| p.as_str()).unwrap_or("desk");
        let mut base = serde_json::to_value(Self::profile(profile)?).expect("config serializes");
        merge(&mut base, overlay);
        let cfg: Self = crate::scenario_json::parse_located(&base.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let format = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => ConfigFormat::Json,
            _ => ConfigFormat::Toml,
        };
        Self::parse(&text, format)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if !(t.lr > 0.0 && t.lr.is_finite() && t.weight_decay >= 0.0) {
            return Err(Error::Config(format!("lr {} / weight_decay {} out of range", t.lr, t.weight_decay)));
        }
        for (name, r) in [("alpha", self.masking.alpha), ("beta", self.masking.beta)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} = {r} must lie in [0, 1]")));
            }
        }
        let d = &self.data;
        if d.train_cities.is_empty() || d.shift_cities.is_empty() {
            return Err(Error::Config("city lists must be non-empty".into()));
        }
        if d.train_cities.iter().any(|c| d.shift_cities.contains(c)) {
            return Err(Error::Config("train and shift cities must be disjoint".into()));
        }
        for c in d.train_cities.iter().chain(&d.shift_cities) {
            d.generator_for(c).validate()?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_string(self).expect("config serializes")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfigFormat {
    Json,
    Toml,
}

/// Recursive object merge; non-object values in `overlay` replace `base`.
fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_settings() {
        let p = ExperimentConfig::full();
        assert_eq!((p.model.dim, p.model.encoder_depth, p.model.decoder_depth, p.model.modes), (128, 4, 4, 6));
        assert_eq!((p.masking.alpha, p.masking.beta), (0.4, 0.5));
        assert_eq!((p.train.lr, p.train.weight_decay, p.model.dropout), (1e-3, 1e-4, 0.2));
        assert_eq!(p.model.loss_weights, [1.0, 1.0, 0.35]);
        p.validate().unwrap();
        ExperimentConfig::desk().validate().unwrap();
    }

    #[test]
    fn partial_files_overlay_the_profile() {
        let c = ExperimentConfig::parse(
            "seed = 9\n[model]\ndim = 16\n[data.generator]\nmax_agents = 4\n",
            ConfigFormat::Toml,
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.model.dim, 16);
        assert_eq!(c.model.heads, ExperimentConfig::desk().model.heads);
        assert_eq!(c.data.generator.max_agents, Some(4));
        let p = ExperimentConfig::parse(r#"{"profile": "full"}"#, ConfigFormat::Json).unwrap();
        assert_eq!(p, ExperimentConfig::full());
    }

    #[test]
    fn bad_fields_are_rejected() {
        assert!(ExperimentConfig::parse("[model]\nwidth = 3\n", ConfigFormat::Toml).is_err());
        assert!(ExperimentConfig::parse("[masking]\nalpha = 1.5\n", ConfigFormat::Toml).is_err());
        assert!(ExperimentConfig::parse("profile = \"huge\"\n", ConfigFormat::Toml).is_err());
    }

    #[test]
    fn round_trip_and_hash() {
        let c = ExperimentConfig::desk();
        let back = ExperimentConfig::parse(&c.to_json(), ConfigFormat::Json).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let other = ExperimentConfig { seed: 1, ..c.clone() };
        assert_ne!(other.hash(), c.hash());
    }
}
