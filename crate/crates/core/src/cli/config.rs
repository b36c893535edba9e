use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_synthetic, load_csv_inferred, Dataset, SplitRatios, SyntheticSpec, DEFAULT_EMBEDDING_DIM};
use crate::models::{Arch, Mode, ModelConfig};
use crate::params::hex;
use crate::training::TrainConfig;
use crate::{Error, Result};

/// Where rows come from and how they are split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// CSV file; relative paths resolve against the config file's directory.
    pub csv: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    pub embedding_dim: usize,
    pub split: SplitRatios,
    /// Weight domains by training-split rather than test-split proportions.
    pub train_weights: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { csv: None, synthetic: None, embedding_dim: DEFAULT_EMBEDDING_DIM, split: SplitRatios::default(), train_weights: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub archs: Vec<Arch>,
    pub modes: Vec<Mode>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self { archs: vec![Arch::Mlp], modes: vec![Mode::Plain, Mode::Mlora, Mode::Moe] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub archs: Vec<Arch>,
    /// Total experts per layer; each must be a multiple of the domain count.
    pub expert_counts: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { archs: vec![Arch::Mlp], expert_counts: vec![2, 4, 6, 8] }
    }
}

/// Everything a `train`, `compare` or `sweep-experts` run needs.
///
/// Every field has a default, so a minimal file only names the data source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub compare: CompareConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seeds: vec![0],
            compare: CompareConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses `path` and resolves a relative CSV path against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(csv), Some(dir)) = (&cfg.data.csv, path.parent()) {
            if csv.is_relative() {
                cfg.data.csv = Some(dir.join(csv));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.csv, &self.data.synthetic) {
            (Some(_), None) => {}
            (None, Some(spec)) => spec.validate().map_err(|e| Error::Config(e.to_string()))?,
            _ => return Err(Error::Config("set exactly one of data.csv and data.synthetic".into())),
        }
        if self.data.embedding_dim == 0 {
            return Err(Error::Config("data.embedding_dim must be positive".into()));
        }
        self.data.split.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Short SHA-256 prefix of the resolved configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(canonical.as_bytes()))[..16].to_string()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Loads or generates the full dataset with the configured embedding width.
    pub fn dataset(&self) -> Result<Dataset> {
        let ds = match (&self.data.csv, &self.data.synthetic) {
            (Some(path), _) => load_csv_inferred(path, self.data.embedding_dim)?,
            (None, Some(spec)) => generate_synthetic(spec)?,
            (None, None) => return Err(Error::Config("no data source".into())),
        };
        let mut schema = ds.schema().clone();
        schema.embedding_dim = self.data.embedding_dim;
        ds.with_schema(schema)
    }
}
