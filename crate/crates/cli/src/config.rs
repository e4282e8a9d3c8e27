//! Run configuration, read from a sectioned TOML file.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use jointflow::calibration::{SigmaProfile, DEFAULT_SIGMA};
use jointflow::features::FeatureConfig;
use jointflow::neural::{Activation, TileGeometry, DEFAULT_EMA_DECAY, DEFAULT_HIDDEN};
use jointflow::odesolve::{Method, SolverConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSection {
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop_len: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for FeatureSection {
    fn default() -> Self {
        let f = FeatureConfig::default();
        Self {
            sample_rate: 48_000,
            window_len: f.window_len,
            hop_len: f.hop_len,
            alpha: f.alpha,
            beta: f.beta,
        }
    }
}

impl FeatureSection {
    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            window_len: self.window_len,
            hop_len: self.hop_len,
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}

/// Noise scale used when no calibrated profile is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SigmaSection {
    pub value: f64,
}

impl Default for SigmaSection {
    fn default() -> Self {
        Self { value: DEFAULT_SIGMA }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub ema_decay: f64,
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub tile_margin: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let tile = TileGeometry::default();
        Self {
            hidden: DEFAULT_HIDDEN.to_vec(),
            activation: Activation::Silu,
            ema_decay: DEFAULT_EMA_DECAY,
            tile_rows: tile.rows,
            tile_cols: tile.cols,
            tile_margin: tile.margin,
        }
    }
}

impl ModelSection {
    pub fn tile(&self) -> TileGeometry {
        TileGeometry {
            rows: self.tile_rows,
            cols: self.tile_cols,
            margin: self.tile_margin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub holdout_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            iterations: 5000,
            batch_size: 128,
            holdout_size: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub solver: Method,
    pub nfe: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            solver: Method::Midpoint,
            nfe: 6,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub features: FeatureSection,
    pub sigma: SigmaSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sampler: SamplerSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.sample_rate == 0 {
            bail!("features.sample_rate must be positive");
        }
        self.features.feature_config().validate()?;
        SigmaProfile::scalar(self.sigma.value)?;
        self.model.tile().validate()?;
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            bail!("model.hidden needs at least one non-zero width");
        }
        self.solver(None, None)?;
        Ok(())
    }

    /// Sampler settings with optional command-line overrides.
    pub fn solver(&self, method: Option<Method>, nfe: Option<usize>) -> Result<SolverConfig> {
        let method = method.unwrap_or(self.sampler.solver);
        Ok(SolverConfig::from_nfe(method, nfe.unwrap_or(self.sampler.nfe))?)
    }
}
