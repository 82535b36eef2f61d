use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, SeededRng, Tensor};
use crate::vit::{embed_forward, seq_len, vit_forward, ViTConfig, ViTParams};

/// Smooth periodic fields advected eastward plus white noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClimateSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub modes: usize,
    pub noise: f64,
    /// Eastward shift of the target in grid cells.
    pub advection: usize,
    pub dt_hours: f64,
}

impl SyntheticClimateSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::config("positive-extents", format!("grid {self:?}")));
        }
        if self.modes == 0 {
            return Err(Error::config("data-modes", "at least one spatial mode is needed"));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::config("data-noise", format!("noise amplitude {}", self.noise)));
        }
        if !(self.dt_hours.is_finite() && self.dt_hours > 0.0) {
            return Err(Error::config("data-lead-time", format!("dt = {} h", self.dt_hours)));
        }
        Ok(())
    }
}

/// A field at `t` and the field at `t + dt_hours`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSample<T> {
    pub input: Tensor<T>,
    pub target: Tensor<T>,
    pub dt_hours: f64,
}

const NOISE_STREAM: u64 = 1 << 40;

/// `count` samples; sample `i` depends only on `(seed, i)`.
pub fn gen_synthetic<T: Scalar>(spec: &SyntheticClimateSpec, seed: u64, count: usize) -> Result<Vec<ForecastSample<T>>> {
    spec.validate()?;
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    (0..count as u64)
        .map(|i| {
            let rng = SeededRng::new(seed, i);
            let draws = rng.uniforms(0, spec.modes * c * 5);
            let mut field = vec![0.0f64; c * h * w];
            for ch in 0..c {
                for m in 0..spec.modes {
                    let u = &draws[(ch * spec.modes + m) * 5..][..5];
                    let kx = 1.0 + (u[0] * 3.0).floor();
                    let ky = (u[1] * 3.0).floor();
                    let amp = 0.5 + u[2];
                    let (px, py) = (u[3] * TAU, u[4] * TAU);
                    for y in 0..h {
                        let fy = (TAU * ky * y as f64 / h as f64 + py).cos();
                        for x in 0..w {
                            field[(ch * h + y) * w + x] += amp * fy * (TAU * kx * x as f64 / w as f64 + px).sin();
                        }
                    }
                }
            }
            let input = Tensor::new(&[c, h, w], field.into_iter().map(T::of).collect())?;
            let mut target = roll_field(&input, spec.advection);
            if spec.noise > 0.0 {
                let noise = SeededRng::new(seed, NOISE_STREAM + i).normals(0, c * h * w);
                for (t, n) in target.data_mut().iter_mut().zip(noise) {
                    *t = *t + T::of(spec.noise * n);
                }
            }
            Ok(ForecastSample {
                input,
                target,
                dt_hours: spec.dt_hours,
            })
        })
        .collect()
}

/// Periodic eastward roll of a `[C, H, W]` field by `shift` cells.
pub fn roll_field<T: Scalar>(field: &Tensor<T>, shift: usize) -> Tensor<T> {
    let w = field.cols();
    let mut out = field.clone();
    for r in 0..field.rows() {
        let src = field.row(r);
        for (x, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = src[(x + w - shift % w) % w];
        }
    }
    out
}

/// Pearson correlation of the two fields' anomalies from their own means.
pub fn anomaly_correlation<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    let n = pred.numel() as f64;
    let mean = |t: &Tensor<T>| t.data().iter().map(|&x| Scalar::to_f64(x)).sum::<f64>() / n;
    let (mp, mt) = (mean(pred), mean(target));
    let (mut cov, mut vp, mut vt) = (0.0f64, 0.0f64, 0.0f64);
    for (p, t) in pred.data().iter().zip(target.data()) {
        let (a, b) = (Scalar::to_f64(*p) - mp, Scalar::to_f64(*t) - mt);
        cov += a * b;
        vp += a * a;
        vt += b * b;
    }
    Ok(if vp > 0.0 && vt > 0.0 { cov / (vp * vt).sqrt() } else { 0.0 })
}

/// Single-rank forecast for one input field.
pub fn predict_field<T: Scalar>(cfg: &ViTConfig, params: &ViTParams<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = seq_len(cfg)?;
    let (x, _) = embed_forward(cfg, &params.embed, &[input], 0..s)?;
    vit_forward(cfg, params, &x)
}
