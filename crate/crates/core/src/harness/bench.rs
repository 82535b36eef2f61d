use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use super::data::gen_synthetic;
use super::RunConfig;
use crate::costmodel::comm_predict;
use crate::error::Result;
use crate::hybrid::{run_layout, Batch};
use crate::numerics::{DType, Scalar};
use crate::vit::{ViTConfig, ViTParams};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchOptions {
    /// Image-width multipliers; each scales the sequence length.
    pub scales: Vec<usize>,
    /// Tokens per step; the batch is sized to hold about this many.
    pub token_budget: usize,
    pub repeats: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            scales: vec![1, 2, 4],
            token_budget: 512,
            repeats: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub layout: String,
    pub seq_len: usize,
    pub batch: usize,
    pub tokens_per_s: f64,
    pub images_per_s: f64,
    pub peak_scratch: usize,
    pub bytes_communicated: u64,
    pub predicted_bytes: u64,
}

/// Time training steps of the configured layout at each sequence scale.
pub fn bench(cfg: &RunConfig, opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    opts.scales
        .iter()
        .map(|&k| {
            let model = ViTConfig {
                img_w: cfg.model.img_w * k.max(1),
                ..cfg.model
            };
            let unit = cfg.layout.dp * cfg.layout.micro_batches;
            let batch = (opts.token_budget / model.tokens() / unit).max(1) * unit;
            let scaled = RunConfig {
                model,
                batch_size: batch,
                data: super::DataOptions {
                    samples: 0,
                    ..cfg.data
                },
                ..cfg.clone()
            };
            scaled.validate()?;
            match cfg.dtype {
                DType::F32 => bench_one::<f32>(&scaled, opts.repeats),
                DType::F64 => bench_one::<f64>(&scaled, opts.repeats),
            }
        })
        .collect()
}

fn bench_one<T: Scalar>(cfg: &RunConfig, repeats: usize) -> Result<BenchRow> {
    let repeats = repeats.max(1);
    let data = gen_synthetic::<T>(&cfg.data_spec(), cfg.seed, cfg.batch_size)?;
    let batch = Batch::new(
        data.iter().map(|s| s.input.clone()).collect(),
        data.iter().map(|s| s.target.clone()).collect(),
    )?;
    let batches = vec![batch; repeats];
    let params = ViTParams::<T>::init(&cfg.model, cfg.seed)?;
    let start = Instant::now();
    let run = run_layout(&cfg.layout, &cfg.model, &params, &batches, &cfg.optimizer)?;
    let secs = start.elapsed().as_secs_f64().max(1e-9);
    let s = cfg.model.tokens();
    let images = (cfg.batch_size * repeats) as f64;
    let pred = comm_predict(&cfg.layout, &cfg.model, cfg.batch_size, T::DTYPE.width())?;
    Ok(BenchRow {
        layout: cfg.layout.label(),
        seq_len: s,
        batch: cfg.batch_size,
        tokens_per_s: images * s as f64 / secs,
        images_per_s: images / secs,
        peak_scratch: run.peak_scratch,
        bytes_communicated: run.ledger.total_bytes_sent(),
        predicted_bytes: pred.world_bytes(&cfg.layout, repeats as u64),
    })
}

/// `layout,seq_len,tokens_per_s,images_per_s,peak_scratch,bytes_communicated`.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("layout,seq_len,tokens_per_s,images_per_s,peak_scratch,bytes_communicated\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{:.3},{:.3},{},{}",
            r.layout, r.seq_len, r.tokens_per_s, r.images_per_s, r.peak_scratch, r.bytes_communicated
        )
        .expect("string write");
    }
    out
}
