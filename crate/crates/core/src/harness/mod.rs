//! Run configuration, synthetic forecasting data, and the train, verify and
//! bench drivers behind the command-line tool.
//!
//! Every driver validates its [`RunConfig`] completely before a simulated
//! world is spawned. Output files are written by the caller after the world
//! has finished.

mod bench;
mod data;
mod train;
mod verify;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybrid::{Optimizer, ParallelLayout};
use crate::numerics::DType;
use crate::vit::ViTConfig;

pub use bench::{bench, bench_csv, BenchOptions, BenchRow};
pub use data::{anomaly_correlation, gen_synthetic, predict_field, roll_field, ForecastSample, SyntheticClimateSpec};
pub use train::{train, write_checkpoint, write_loss_csv, TrainOutcome};
pub use verify::{verify, Check, Fault, VerifyReport};

/// Default cap on simulated ranks.
pub const MAX_WORLD: usize = 16;

/// Synthetic-data knobs; the grid and channel count come from the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataOptions {
    pub modes: usize,
    pub noise: f64,
    /// Eastward shift in grid cells per lead-time step.
    pub advection: usize,
    pub dt_hours: f64,
    /// Distinct samples cycled through during training; 0 means one batch.
    pub samples: usize,
}

impl Default for DataOptions {
    fn default() -> Self {
        Self {
            modes: 4,
            noise: 0.05,
            advection: 1,
            dt_hours: 6.0,
            samples: 0,
        }
    }
}

/// Everything one CLI invocation needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ViTConfig,
    pub layout: ParallelLayout,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub batch_size: usize,
    pub steps: usize,
    pub out_dir: PathBuf,
    pub dtype: DType,
    pub data: DataOptions,
    pub max_world: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ViTConfig::tiny(),
            layout: ParallelLayout::single(),
            optimizer: Optimizer::default(),
            seed: 0,
            batch_size: 2,
            steps: 10,
            out_dir: PathBuf::from("out"),
            dtype: DType::F64,
            data: DataOptions::default(),
            max_world: MAX_WORLD,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config-format", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn samples(&self) -> usize {
        if self.data.samples == 0 {
            self.batch_size
        } else {
            self.data.samples
        }
    }

    pub fn data_spec(&self) -> SyntheticClimateSpec {
        SyntheticClimateSpec {
            height: self.model.img_h,
            width: self.model.img_w,
            channels: self.model.channels,
            modes: self.data.modes,
            noise: self.data.noise,
            advection: self.data.advection * self.model.lead_time,
            dt_hours: self.data.dt_hours * self.model.lead_time as f64,
        }
    }

    /// Check every cross-module constraint. The error names the first
    /// violated invariant.
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("step-count", "steps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch-size", "batch_size must be positive"));
        }
        let world = self.layout.world_size();
        if world > self.max_world {
            return Err(Error::config(
                "world-cap",
                format!("layout needs {world} ranks, cap is {}", self.max_world),
            ));
        }
        self.layout.validate(&self.model, self.batch_size)?;
        if !self.samples().is_multiple_of(self.batch_size) {
            return Err(Error::config(
                "data-samples",
                format!("{} samples do not split into batches of {}", self.samples(), self.batch_size),
            ));
        }
        let lr = self.optimizer.lr();
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::config("learning-rate", format!("lr = {lr}")));
        }
        self.data_spec().validate()
    }
}

#[cfg(test)]
mod tests;
