use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::data::{anomaly_correlation, gen_synthetic, predict_field, ForecastSample};
use super::RunConfig;
use crate::collectives::CommLedger;
use crate::error::{Error, Result};
use crate::hybrid::{run_layout, Batch};
use crate::numerics::{stf, DType, Scalar};
use crate::vit::ViTParams;

#[derive(Debug)]
pub struct TrainOutcome<T> {
    /// Loss before each step's update, step 1 first.
    pub losses: Vec<f64>,
    pub params: ViTParams<T>,
    /// Mean anomaly correlation of the trained model over the training samples.
    pub accuracy: f64,
    pub ledger: CommLedger,
    pub peak_scratch: usize,
}

/// Train on synthetic data under the configured layout.
pub fn train<T: Scalar>(cfg: &RunConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let samples: Vec<ForecastSample<T>> = gen_synthetic(&cfg.data_spec(), cfg.seed, cfg.samples())?;
    let per_epoch = samples.len() / cfg.batch_size;
    let batches = (0..cfg.steps)
        .map(|step| {
            let chunk = &samples[(step % per_epoch) * cfg.batch_size..][..cfg.batch_size];
            Batch::new(
                chunk.iter().map(|s| s.input.clone()).collect(),
                chunk.iter().map(|s| s.target.clone()).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let init = ViTParams::<T>::init(&cfg.model, cfg.seed)?;
    let run = run_layout(&cfg.layout, &cfg.model, &init, &batches, &cfg.optimizer)?;
    let mut acc = 0.0;
    for s in &samples {
        acc += anomaly_correlation(&predict_field(&cfg.model, &run.params, &s.input)?, &s.target)?;
    }
    Ok(TrainOutcome {
        losses: run.losses,
        params: run.params,
        accuracy: acc / samples.len() as f64,
        ledger: run.ledger,
        peak_scratch: run.peak_scratch,
    })
}

/// `step,loss` with the shortest round-trip float text, so equal runs give
/// equal bytes.
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(out, "{},{l}", i + 1).expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Sidecar<'a> {
    format: &'static str,
    dtype: DType,
    tensors: Vec<TensorEntry>,
    final_loss: Option<f64>,
    accuracy: f64,
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// `checkpoint.stf` holds every parameter in [`ViTParams::names`] order;
/// `checkpoint.json` describes them and the run.
pub fn write_checkpoint<T: Scalar>(dir: &Path, cfg: &RunConfig, outcome: &TrainOutcome<T>) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stf_path = dir.join("checkpoint.stf");
    let tensors = outcome.params.tensors();
    stf::save(&stf_path, &tensors)?;
    let sidecar = Sidecar {
        format: "STF1",
        dtype: T::DTYPE,
        tensors: outcome
            .params
            .names()
            .into_iter()
            .zip(&tensors)
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
        final_loss: outcome.losses.last().copied(),
        accuracy: outcome.accuracy,
        config: cfg,
    };
    let json_path = dir.join("checkpoint.json");
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok((stf_path, json_path))
}
