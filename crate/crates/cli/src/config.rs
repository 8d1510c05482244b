use std::path::Path;

use anyhow::{Context, Result};
use energy_calib::calibration::{GaussNewtonConfig, SplitSpec};
use energy_calib::energy_pipeline::{CleaningRules, PowertrainParams};
use energy_calib::evaluation::{
    default_groups, validate_groups, GroupSpec, MetricMode, DEFAULT_BINS,
};
use energy_calib::synth_oracle::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

/// Everything a subcommand can be configured with. A JSON config file
/// fills this first; command-line flags then override single fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub powertrain: PowertrainParams,
    /// Resampling tick, seconds.
    pub dt: f64,
    pub cleaning: CleaningRules,
    pub split: SplitSpec,
    pub solver: GaussNewtonConfig,
    pub metric: MetricMode,
    pub groups: [GroupSpec; 3],
    pub bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            powertrain: PowertrainParams::default(),
            dt: 1.0,
            cleaning: CleaningRules::default(),
            split: SplitSpec::default(),
            solver: GaussNewtonConfig::default(),
            metric: MetricMode::default(),
            groups: default_groups(),
            bins: DEFAULT_BINS,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |e: energy_calib::Error| UsageError(e.to_string());
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(UsageError(format!("dt must be > 0, got {}", self.dt)).into());
        }
        if !(self.split.train_ratio > 0.0 && self.split.train_ratio < 1.0) {
            return Err(UsageError(format!(
                "train ratio must lie in (0, 1), got {}",
                self.split.train_ratio
            ))
            .into());
        }
        if self.bins == 0 {
            return Err(UsageError("bins must be at least 1".into()).into());
        }
        self.synth.validate().map_err(usage)?;
        self.powertrain.validate().map_err(usage)?;
        self.solver.validate().map_err(usage)?;
        validate_groups(&self.groups).map_err(usage)?;
        Ok(())
    }
}
