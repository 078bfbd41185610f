//! The TOML run configuration.
//!
//! ```toml
//! schema_version = 1
//! [model]
//! latent_dims = [2, 2]
//! [prior_sampler]
//! steps = 40
//! [posterior_sampler]
//! steps = 20
//! [trainer]
//! mode = "two_stage"
//! [data]
//! source = "mixture"
//! ```

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{gen_mixture, gen_pinwheel, gen_rings, load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::stream;
use crate::samplers::LangevinConfig;
use crate::training::TrainerConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Mixture,
    Pinwheel,
    Rings,
    File,
}

/// The `[data]` section: a synthetic generator or a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub n: usize,
    pub centers: Vec<Vec<f64>>,
    pub std: f64,
    pub arms: usize,
    pub radii: Vec<f64>,
    pub path: Option<PathBuf>,
    /// Drop examples with this label before training.
    pub exclude_label: Option<u32>,
    /// Generator seed; the trainer seed when unset.
    pub seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Mixture,
            n: 2000,
            centers: vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
            std: 0.3,
            arms: 5,
            radii: vec![1.0, 2.0],
            path: None,
            exclude_label: None,
            seed: None,
        }
    }
}

impl DataConfig {
    pub fn build(&self, default_seed: u64) -> Result<Dataset> {
        let mut rng = stream(self.seed.unwrap_or(default_seed), "data", 0);
        let ds = match self.source {
            DataSource::Mixture => gen_mixture(self.n, &self.centers, self.std, &mut rng)?,
            DataSource::Pinwheel => gen_pinwheel(self.n, self.arms, &mut rng)?,
            DataSource::Rings => gen_rings(self.n, &self.radii, &mut rng)?,
            DataSource::File => {
                let p = self
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Config("data.source = \"file\" needs data.path".into()))?;
                load_dataset(p)?
            }
        };
        Ok(match self.exclude_label {
            Some(l) => {
                if ds.labels().is_none() {
                    return Err(Error::Config("exclude_label needs a labeled dataset".into()));
                }
                ds.filter(|_, label| label != Some(l))
            }
            None => ds,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub prior_sampler: LangevinConfig,
    #[serde(default = "default_posterior_sampler")]
    pub posterior_sampler: LangevinConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub data: DataConfig,
}

pub fn default_posterior_sampler() -> LangevinConfig {
    LangevinConfig::new(20, 0.05)
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            model: ModelConfig::default(),
            prior_sampler: LangevinConfig::default(),
            posterior_sampler: default_posterior_sampler(),
            trainer: TrainerConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates; parse errors carry the line and column.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {})",
                self.schema_version, SCHEMA_VERSION
            )));
        }
        self.trainer.validate()?;
        self.prior_sampler.validate()?;
        self.posterior_sampler.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = RunConfig::from_toml_str("schema_version = 1\n").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap(), c);
    }

    #[test]
    fn errors_name_the_location() {
        let e = RunConfig::from_toml_str("schema_version = 1\n[trainer]\nbatch_size = \"x\"\n").unwrap_err();
        assert!(e.to_string().contains("line 3"), "{}", e);
        assert!(RunConfig::from_toml_str("schema_version = 2\n").is_err());
        assert!(RunConfig::from_toml_str("schema_version = 1\n[trainer]\nbogus = 1\n").is_err());
    }
}
