//! Run configuration file (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{PairConfig, RateDistribution};
use crate::error::{Error, Result};
use crate::model::VfeConfig;
use crate::train::TrainConfig;

/// Output directory override; the only setting read from the environment.
pub const OUT_DIR_ENV: &str = "FLOWSR_OUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Default,
    Toy,
    Tiny,
}

impl Preset {
    pub fn config(self) -> VfeConfig {
        match self {
            Preset::Default => VfeConfig::default(),
            Preset::Toy => VfeConfig::toy(),
            Preset::Tiny => VfeConfig::tiny(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// JSON-lines manifest; relative paths resolve against the config file.
    pub manifest: PathBuf,
    /// Training segment length in samples at 48 kHz.
    pub segment_len: usize,
    pub rates: RateDistribution,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.jsonl"),
            segment_len: 130_560,
            rates: RateDistribution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            checkpoint_every: 1000,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub preset: Preset,
    /// Full architecture; replaces the preset when present.
    pub model: Option<VfeConfig>,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.data.manifest.is_relative() {
            cfg.data.manifest = base.join(&cfg.data.manifest);
        }
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            cfg.output.dir = PathBuf::from(dir);
        } else if cfg.output.dir.is_relative() {
            cfg.output.dir = base.join(&cfg.output.dir);
        }
        Ok(cfg)
    }

    pub fn vfe(&self) -> VfeConfig {
        self.model.clone().unwrap_or_else(|| self.preset.config())
    }

    pub fn pair_config(&self) -> PairConfig {
        let v = self.vfe();
        PairConfig {
            alpha: self.train.alpha,
            segment_len: self.data.segment_len,
            layout_total_bins: v.total_bins,
            min_cutoff_bins: v.min_cutoff_bins,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vfe();
        v.validate()?;
        self.train.validate()?;
        self.data.rates.validate(v.total_bins)?;
        if self.data.rates.rates != v.rates {
            return Err(Error::Config(format!(
                "data rates {:?} differ from model rates {:?}",
                self.data.rates.rates, v.rates
            )));
        }
        if self.data.segment_len < crate::dsp::N_FFT {
            return Err(Error::Config(format!(
                "segment_len {} is shorter than one frame",
                self.data.segment_len
            )));
        }
        let frames = self.pair_config().frames();
        if frames % v.resolution_multiple() != 0 {
            log::debug!(
                "{frames} frames get padded to a multiple of {}",
                v.resolution_multiple()
            );
        }
        Ok(())
    }

    /// Every setting with defaults filled in, as TOML.
    pub fn to_toml(&self) -> Result<String> {
        let mut explicit = self.clone();
        explicit.model = Some(self.vfe());
        toml::to_string_pretty(&explicit).map_err(|e| Error::Config(e.to_string()))
    }
}
