use std::path::Path;

use cyten_core::models::{AdcNetConfig, DwiNetConfig, EnsembleConfig};
use cyten_core::phantom::PhantomParams;
use cyten_core::preprocess::PreprocessConfig;
use cyten_core::trainer::{SplitSpec, TrainConfig};
use cyten_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Every tunable of a pipeline run. Sections left out take their defaults;
/// unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub phantom: PhantomParams,
    pub preprocess: PreprocessConfig,
    pub split: SplitSpec,
    pub train: TrainConfig,
    pub ensemble: EnsembleConfig,
    pub dwinet: DwiNetConfig,
    pub adcnet: AdcNetConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                RunConfig::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.preprocess.validate()?;
        self.split.validate()?;
        self.train.validate()?;
        if self.ensemble.grid.is_empty()
            || !self.ensemble.grid.iter().chain([&self.ensemble.w]).all(|w| (0.0..=1.0).contains(w))
        {
            return Err(Error::Config(
                "ensemble weight and grid values must lie in [0,1] and the grid must be non-empty".into(),
            ));
        }
        Ok(())
    }
}
