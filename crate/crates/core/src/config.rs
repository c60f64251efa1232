//! Campaign configuration file (TOML). One file fixes every input of a run.

use crate::campaign::{Budget, BudgetError, CampaignHeader};
use crate::device::DeviceSpec;
use crate::machine::FaultModel;
use crate::rail::{GlitchPulse, RailConfig, RailConfigError};
use crate::rig::{RigConfig, RigConfigError};
use crate::search::{Narrowing, ParamGrid, SearchError, Strategy};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Where the target image comes from: a bundle on disk or a generator spec.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageSection {
    pub path: Option<PathBuf>,
    pub device: Option<DeviceSpec>,
}

/// Length sweep run by the feasibility command.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeasibilitySection {
    pub offset_ns: u64,
    pub min_length_ns: u64,
    pub max_length_ns: u64,
    pub step_ns: u64,
    pub trials: u32,
}

impl Default for FeasibilitySection {
    fn default() -> Self {
        FeasibilitySection {
            offset_ns: 20_000,
            min_length_ns: 9_000,
            max_length_ns: 14_000,
            step_ns: 100,
            trials: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub seed: u64,
    pub workers: u32,
    pub rail: RailConfig,
    pub rig: RigConfig,
    pub image: ImageSection,
    pub grid: ParamGrid,
    pub strategy: Strategy,
    pub budget: Budget,
    pub fault_model: FaultModel,
    pub feasibility: FeasibilitySection,
}

/// Boot-window grid over the three lengths that work on the default rail.
pub fn default_grid() -> ParamGrid {
    ParamGrid::new(0, 4_420_000, 20, vec![11_300, 11_320, 11_340])
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            seed: 0,
            workers: 1,
            rail: RailConfig::default(),
            rig: RigConfig::default(),
            image: ImageSection::default(),
            grid: default_grid(),
            strategy: Strategy::narrowing(Narrowing::default()),
            budget: Budget::default(),
            fault_model: FaultModel::default(),
            feasibility: FeasibilitySection::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {message}")]
    Parse { path: String, message: String },
    #[error("rail: {0}")]
    Rail(#[from] RailConfigError),
    #[error("rig: {0}")]
    Rig(#[from] RigConfigError),
    #[error("grid/strategy: {0}")]
    Search(#[from] SearchError),
    #[error("budget: {0}")]
    Budget(#[from] BudgetError),
    #[error("workers must be at least 1")]
    NoWorkers,
    #[error("image: give either `path` or `device`, not both")]
    ImageAmbiguous,
    #[error("image bundle {0} does not exist")]
    MissingImage(String),
    #[error("feasibility sweep is empty or misaligned")]
    Feasibility,
}

impl CampaignConfig {
    pub fn load(path: &Path) -> Result<CampaignConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg: CampaignConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if let (Some(p), Some(dir)) = (&cfg.image.path, path.parent()) {
            if p.is_relative() {
                cfg.image.path = Some(dir.join(p));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.workers == 0 {
            return Err(ConfigError::NoWorkers);
        }
        self.rail.validate()?;
        self.rig.validate()?;
        self.grid.validate(self.rig.tick_ns)?;
        self.strategy.validate()?;
        self.budget.validate()?;
        let longest = *self.grid.lengths_ns.iter().max().expect("validated non-empty");
        self.rig.ticks(&GlitchPulse::new(self.grid.last_offset(), longest))?;
        match (&self.image.path, &self.image.device) {
            (Some(_), Some(_)) => return Err(ConfigError::ImageAmbiguous),
            (Some(p), None) if !p.join("manifest.toml").is_file() => return Err(ConfigError::MissingImage(p.display().to_string())),
            _ => {}
        }
        let f = &self.feasibility;
        if f.step_ns == 0 || f.min_length_ns > f.max_length_ns || f.trials == 0 {
            return Err(ConfigError::Feasibility);
        }
        for len in [f.min_length_ns, f.step_ns] {
            self.rig
                .ticks(&GlitchPulse::new(f.offset_ns, len))
                .map_err(|_| ConfigError::Feasibility)?;
        }
        Ok(())
    }

    pub fn device_spec(&self) -> DeviceSpec {
        self.image.device.clone().unwrap_or_default()
    }

    pub fn header(&self) -> CampaignHeader {
        CampaignHeader {
            seed: self.seed,
            workers: self.workers,
            grid: self.grid.clone(),
            strategy: self.strategy,
            budget: self.budget,
            rig: self.rig,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = CampaignConfig::default();
        c.validate().unwrap();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<CampaignConfig>(&text).unwrap(), c);
    }

    #[test]
    fn rejects_bad_sections() {
        let c: CampaignConfig = toml::from_str("workers = 0").unwrap();
        assert!(matches!(c.validate(), Err(ConfigError::NoWorkers)));
        let c: CampaignConfig =
            toml::from_str("[grid]\nlengths_ns = [11310]\n[grid.offsets]\nlo_ns = 0\nhi_ns = 100\nstep_ns = 20").unwrap();
        assert!(matches!(c.validate(), Err(ConfigError::Search(SearchError::Unaligned(11_310, 20)))));
        let c: CampaignConfig = toml::from_str("[strategy]\nkind = \"RANDOM\"\n[strategy.narrowing]\nsuccesses_required = 3").unwrap();
        assert!(matches!(c.validate(), Err(ConfigError::Search(SearchError::StrategyMismatch))));
        assert!(toml::from_str::<CampaignConfig>("bogus = 1").is_err());
        let c: CampaignConfig = toml::from_str("[rig]\nmax_offset_ticks = 1000").unwrap();
        assert!(matches!(c.validate(), Err(ConfigError::Rig(_))));
    }
}
