//! TOML run configuration with `[data]`, `[networks]`, `[losses]` and `[trainer]` sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::{ClassCatalog, Domain, DomainTag, Image, LabelMap};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::NetworkConfig;
use crate::synthdata::{generate_dataset, load_images, load_labeled_dataset};
use crate::trainer::{TrainConfig, TrainingData};

/// Seed offsets keeping generated splits disjoint.
pub const TARGET_SEED_OFFSET: u64 = 1_000_000;
pub const EVAL_SEED_OFFSET: u64 = 2_000_000;

/// Where training data comes from. Directories take precedence; any split
/// without one is generated procedurally.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    /// Labeled target-domain images held out for evaluation.
    pub eval: Option<PathBuf>,
    pub resolution: usize,
    pub source_count: usize,
    pub target_count: usize,
    pub eval_count: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: None,
            target: None,
            eval: None,
            resolution: 64,
            source_count: 200,
            target_count: 200,
            eval_count: 100,
            seed: 0,
        }
    }
}

/// Training data plus an optional labeled target evaluation split.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub train: TrainingData,
    pub eval: Vec<(Image, LabelMap)>,
}

impl DataConfig {
    fn seeds(&self, offset: u64, count: usize) -> std::ops::Range<u64> {
        let start = self.seed + offset;
        start..start + count as u64
    }

    pub fn load(&self, catalog: &ClassCatalog) -> Result<LoadedData> {
        let r = self.resolution;
        let source = match &self.source {
            Some(dir) => load_labeled_dataset(dir, catalog, DomainTag::Source)?,
            None => generate_dataset(self.seeds(0, self.source_count), r, r, Domain::Source)?,
        };
        let target = match &self.target {
            Some(dir) => load_images(dir, DomainTag::Target)?
                .into_iter()
                .map(|(_, i)| i)
                .collect(),
            None => generate_dataset(
                self.seeds(TARGET_SEED_OFFSET, self.target_count),
                r,
                r,
                Domain::Target,
            )?
            .into_iter()
            .map(|(i, _)| i)
            .collect(),
        };
        let eval = match &self.eval {
            Some(dir) => load_labeled_dataset(dir, catalog, DomainTag::Target)?,
            None => generate_dataset(
                self.seeds(EVAL_SEED_OFFSET, self.eval_count),
                r,
                r,
                Domain::Target,
            )?,
        };
        Ok(LoadedData {
            train: TrainingData { source, target },
            eval,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub networks: NetworkConfig,
    pub losses: LossWeights,
    pub trainer: TrainConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a file; relative data paths are resolved against its directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.data.source,
            &mut cfg.data.target,
            &mut cfg.data.eval,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.resolution < 8 || !self.data.resolution.is_multiple_of(2) {
            return Err(Error::Config(
                "data.resolution must be even and at least 8".into(),
            ));
        }
        self.networks.validate()?;
        self.losses.validate()?;
        self.trainer.validate()
    }
}
