//! Run configuration, loaded from TOML, and the seeded random streams.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bitsearch::SearchConfig;
use crate::data::{self, Dataset, LabeledSet, SplitFractions};
use crate::error::{Error, Result};
use crate::importance::ScoringConfig;
use crate::quantizer::CalibrationSource;
use crate::refine::KdConfig;
use crate::tensor::{parse_architecture, LayerSpec};
use crate::train::TrainConfig;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "CLASSQUANT_OUTPUT_DIR";

pub const GLYPH_ARCHITECTURE: &str = "conv:8:3:1:1,relu,conv:16:3:2:1,relu,conv:16:3:2:1,relu,flatten,dense:64,relu,dense:10";
pub const BLOB_ARCHITECTURE: &str = "dense:64,relu,dense:32,relu,dense:10";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Bundled 16x16 digit glyphs.
    #[default]
    Glyphs,
    /// Bundled Gaussian blobs.
    Blobs,
    /// `label,f1,...,fn` rows read from `path`.
    Csv,
    /// IDX images at `path` with IDX labels at `labels`.
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub num_classes: usize,
    /// Feature shape of CSV rows; defaults to a flat vector.
    pub input_shape: Option<Vec<usize>>,
    /// Sample count of the bundled generators.
    pub samples: usize,
    pub noise: f64,
    pub blob_dim: usize,
    pub blob_spread: f64,
    pub splits: SplitFractions,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Glyphs,
            path: None,
            labels: None,
            num_classes: 10,
            input_shape: None,
            samples: 6000,
            noise: 0.3,
            blob_dim: 16,
            blob_spread: 0.1,
            splits: SplitFractions::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Comma-separated layer list, e.g. `dense:64,relu,dense:10`. Defaults
    /// to a small CNN for glyphs and an MLP otherwise.
    pub architecture: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub target_bits: f64,
    pub max_bits: u8,
    pub step: Option<f64>,
    pub initial_target: f64,
    pub decay: f64,
    /// Global activation bit-width; defaults to `target_bits` rounded into
    /// `1..=max_bits`.
    pub act_bits: Option<u8>,
    /// Validation samples used to measure accuracy during the search.
    pub search_samples: usize,
    /// Calibration samples used for activation ranges.
    pub calib_samples: usize,
    pub calibration: CalibrationSource,
}

impl Default for QuantConfig {
    fn default() -> Self {
        let s = SearchConfig::default();
        Self {
            target_bits: s.target_bits,
            max_bits: s.max_bits,
            step: s.step,
            initial_target: s.initial_target,
            decay: s.decay,
            act_bits: None,
            search_samples: 1000,
            calib_samples: 256,
            calibration: CalibrationSource::Quantized,
        }
    }
}

impl QuantConfig {
    pub fn search(&self) -> SearchConfig {
        SearchConfig {
            target_bits: self.target_bits,
            max_bits: self.max_bits,
            step: self.step,
            initial_target: self.initial_target,
            decay: self.decay,
        }
    }

    pub fn activation_bits(&self) -> u8 {
        self.act_bits.unwrap_or_else(|| self.target_bits.round().clamp(1.0, self.max_bits.max(1) as f64) as u8)
    }

    pub fn validate(&self) -> Result<()> {
        self.search().validate()?;
        if self.act_bits == Some(0) || self.act_bits.is_some_and(|b| b > 16) {
            return Err(Error::Config("act_bits must be in 1..=16".into()));
        }
        if self.search_samples == 0 || self.calib_samples == 0 {
            return Err(Error::Config("search_samples and calib_samples must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub scoring: ScoringConfig,
    #[serde(default)]
    pub quant: QuantConfig,
    #[serde(default)]
    pub refine: KdConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("run")
}

impl RunConfig {
    /// Defaults for everything but the seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            output_dir: default_output_dir(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            scoring: ScoringConfig::default(),
            quant: QuantConfig::default(),
            refine: KdConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Read a config file and apply the output-directory environment override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.apply_env();
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
    }

    pub fn architecture(&self) -> Result<Vec<LayerSpec>> {
        match &self.model.architecture {
            Some(a) => parse_architecture(a),
            None => parse_architecture(match self.data.source {
                DataSource::Glyphs => GLYPH_ARCHITECTURE,
                _ => BLOB_ARCHITECTURE,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.refine.validate()?;
        self.quant.validate()?;
        if !(self.scoring.epsilon >= 0.0) || self.scoring.samples_per_class == 0 {
            return Err(Error::Config(format!("bad scoring settings {:?}", self.scoring)));
        }
        self.architecture()?;
        let d = &self.data;
        if d.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        match d.source {
            DataSource::Glyphs | DataSource::Blobs => {
                if d.num_classes != 10 {
                    return Err(Error::Config("bundled datasets have 10 classes".into()));
                }
                if d.samples == 0 || (d.source == DataSource::Blobs && d.blob_dim == 0) {
                    return Err(Error::Config("bundled dataset needs samples and a positive dimension".into()));
                }
            }
            DataSource::Csv => require_file("data.path", d.path.as_deref())?,
            DataSource::Idx => {
                require_file("data.path", d.path.as_deref())?;
                require_file("data.labels", d.labels.as_deref())?;
            }
        }
        Ok(())
    }

    /// Load or generate the data and split it; deterministic in the seed.
    pub fn dataset(&self) -> Result<Dataset> {
        let d = &self.data;
        let mut rng = stream(self.seed, "data");
        let all: LabeledSet = match d.source {
            DataSource::Glyphs => data::synthetic_glyphs(d.samples, d.noise, &mut rng)?,
            DataSource::Blobs => data::synthetic_blobs(d.samples, d.blob_dim, d.blob_spread, &mut rng)?,
            DataSource::Csv => {
                let path = d.path.as_deref().ok_or_else(|| Error::Config("data.path is required for csv".into()))?;
                let shape = d.input_shape.clone().unwrap_or_default();
                data::ingest_csv(path, d.num_classes, &shape)?
            }
            DataSource::Idx => {
                let missing = || Error::Config("data.path and data.labels are required for idx".into());
                data::ingest_idx(d.path.as_deref().ok_or_else(missing)?, d.labels.as_deref().ok_or_else(missing)?, d.num_classes)?
            }
        };
        Dataset::split(all, d.num_classes, d.splits, &mut rng)
    }
}

fn require_file(key: &str, path: Option<&Path>) -> Result<()> {
    match path {
        None => Err(Error::Config(format!("{key} is required for this data source"))),
        Some(p) if !p.is_file() => Err(Error::Config(format!("{key}: {} does not exist", p.display()))),
        Some(_) => Ok(()),
    }
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Independent random stream `name` derived from the run seed.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}
