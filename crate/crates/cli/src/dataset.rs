//! Synthetic corpora: generation, on-disk layout and loading.
//!
//! A dataset directory holds `manifest.json` and one scenario file per scene
//! under `train/`, `val/` and `shift/`. Train and val draw from the training
//! cities, shift from the held-out cities. Scene `i` of a split depends only
//! on `(data seed, split, i)`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use motion_mae_core::numerics::RngStream;
use motion_mae_core::scene::{generate_synthetic_scenario, normalize_to_focal, ProcessedScene, RawScenario};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{io_err, Error, Result};
use crate::scenario_json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Shift,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Shift];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Shift => "shift",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }

    fn label(self) -> u64 {
        self as u64 + 1
    }
}

fn split_size(cfg: &ExperimentConfig, split: Split) -> (usize, &[String]) {
    let d = &cfg.data;
    match split {
        Split::Train => (d.train_scenes, &d.train_cities),
        Split::Val => (d.val_scenes, &d.train_cities),
        Split::Shift => (d.shift_scenes, &d.shift_cities),
    }
}

/// Raw scenes of one split; cities are assigned round-robin.
pub fn generate_split(cfg: &ExperimentConfig, split: Split) -> Result<Vec<RawScenario>> {
    let (n, cities) = split_size(cfg, split);
    let root = RngStream::new(cfg.data.seed).derive(split.label());
    let gens: Vec<_> = cities.iter().map(|c| cfg.data.generator_for(c)).collect();
    (0..n)
        .map(|i| {
            let mut rng = root.derive(i as u64);
            Ok(generate_synthetic_scenario(&gens[i % gens.len()], &mut rng)?)
        })
        .collect()
}

pub fn process(raws: &[RawScenario]) -> Result<Vec<ProcessedScene>> {
    raws.iter().map(|r| Ok(normalize_to_focal(r)?)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub count: usize,
    pub cities: BTreeMap<String, usize>,
    /// Paths relative to the dataset directory.
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub splits: BTreeMap<Split, SplitManifest>,
    /// SHA-256 over the scenario files in split and file order.
    pub content_hash: String,
}

impl Manifest {
    pub fn total_scenes(&self) -> usize {
        self.splits.values().map(|s| s.count).sum()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// SHA-256 of the serialized manifest.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json()))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        scenario_json::parse_located(&text)
    }
}

/// Writes every split and the manifest into `dir`.
pub fn write_dataset(cfg: &ExperimentConfig, dir: &Path) -> Result<Manifest> {
    let mut splits = BTreeMap::new();
    let mut content = Sha256::new();
    for split in Split::ALL {
        let sub = dir.join(split.name());
        std::fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        let mut cities = BTreeMap::new();
        let mut files = Vec::new();
        for (i, raw) in generate_split(cfg, split)?.iter().enumerate() {
            let rel = format!("{}/{i:06}.json", split.name());
            let text = scenario_json::to_json(raw)?;
            let path = dir.join(&rel);
            std::fs::write(&path, &text).map_err(io_err(&path))?;
            content.update(text.as_bytes());
            *cities.entry(raw.city_tag.clone()).or_insert(0) += 1;
            files.push(rel);
        }
        splits.insert(split, SplitManifest { count: files.len(), cities, files });
    }
    let manifest = Manifest {
        seed: cfg.data.seed,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        splits,
        content_hash: hex::encode(content.finalize()),
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, manifest.to_json()).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn load_split(dir: &Path, split: Split) -> Result<Vec<RawScenario>> {
    let manifest = Manifest::load(dir)?;
    let entry = manifest.splits.get(&split).ok_or_else(|| Error::Document {
        pointer: format!("/splits/{}", split.name()),
        message: "split missing from manifest".into(),
    })?;
    entry.files.iter().map(|f| scenario_json::load(&PathBuf::from(dir).join(f))).collect()
}
