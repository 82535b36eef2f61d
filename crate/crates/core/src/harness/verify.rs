use std::str::FromStr;

use serde::Serialize;

use super::data::gen_synthetic;
use super::RunConfig;
use crate::attention::{mha_backward, mha_forward, tiled_attention_backward, tiled_attention_forward, AttentionKernel, AttentionSpec, TileSpec};
use crate::collectives::{spawn_world, GroupKind, WorldSpec};
use crate::costmodel::comm_predict;
use crate::error::Result;
use crate::hybrid::{reference_run, run_layout, Batch};
use crate::numerics::{tolerance, DType, Scalar, SeededRng, Tensor};
use crate::seqpar::{interleave_segments, sp_attention_backward, sp_attention_forward, SeqShard, SpStrategy};
use crate::vit::ViTParams;

/// Deliberate faults for exercising the failure path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// The last sp rank claims a segment shifted by one token.
    ShardRange,
}

impl FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "shard-range" => Ok(Fault::ShardRange),
            other => Err(format!("unknown fault `{other}` (expected shard-range)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    /// `None` when the check could not run.
    pub measured: Option<f64>,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl Check {
    fn measured(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            measured: Some(measured),
            tolerance,
            passed: measured <= tolerance,
            detail: None,
        }
    }

    fn from_result(name: impl Into<String>, tolerance: f64, r: std::result::Result<f64, String>) -> Self {
        match r {
            Ok(m) => Self::measured(name, m, tolerance),
            Err(e) => Self {
                name: name.into(),
                measured: None,
                tolerance,
                passed: false,
                detail: Some(e),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub layout: String,
    pub dtype: DType,
    pub passed: bool,
    pub max_error: f64,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Run the equivalence suites for `cfg`. Config errors are returned before
/// anything runs; tolerance violations are reported, not returned.
pub fn verify(cfg: &RunConfig, fault: Option<Fault>) -> Result<VerifyReport> {
    cfg.validate()?;
    let checks = match cfg.dtype {
        DType::F32 => run_checks::<f32>(cfg, fault),
        DType::F64 => run_checks::<f64>(cfg, fault),
    };
    let max_error = checks.iter().filter_map(|c| c.measured).fold(0.0, f64::max);
    Ok(VerifyReport {
        layout: cfg.layout.label(),
        dtype: cfg.dtype,
        passed: checks.iter().all(|c| c.passed),
        max_error,
        checks,
    })
}

fn run_checks<T: Scalar>(cfg: &RunConfig, fault: Option<Fault>) -> Vec<Check> {
    let tol = tolerance::<T>();
    let mut out = Vec::new();
    let (fwd, bwd) = split(tiled_vs_naive::<T>(cfg));
    out.push(Check::from_result("attention.tiled.forward", tol, fwd));
    out.push(Check::from_result("attention.tiled.backward", tol, bwd));

    let kind = cfg.layout.strategy.name();
    let (fwd, bwd) = split(seqpar_vs_dense::<T>(cfg, fault));
    out.push(Check::from_result(format!("seqpar.{kind}.forward"), tol, fwd));
    out.push(Check::from_result(format!("seqpar.{kind}.backward"), tol, bwd));

    match hybrid_vs_reference::<T>(cfg) {
        Ok((loss, params, ledger)) => {
            out.push(Check::measured("hybrid.loss", loss, tol));
            out.push(Check::measured("hybrid.params", params, tol));
            out.push(Check::measured("costmodel.ledger", ledger, 0.0));
        }
        Err(e) => {
            for name in ["hybrid.loss", "hybrid.params", "costmodel.ledger"] {
                out.push(Check::from_result(name, tol, Err(e.to_string())));
            }
        }
    }
    out
}

type Measured = std::result::Result<f64, String>;

fn split(r: Result<(f64, f64)>) -> (Measured, Measured) {
    match r {
        Ok((a, b)) => (Ok(a), Ok(b)),
        Err(e) => (Err(e.to_string()), Err(e.to_string())),
    }
}

fn qkv<T: Scalar>(seed: u64, rows: usize, width: usize) -> [Tensor<T>; 4] {
    [0, 1, 2, 3].map(|s| SeededRng::new(seed, 500 + s).normal_tensor(&[rows, width], 1.0))
}

fn attention_spec(cfg: &RunConfig) -> Result<AttentionSpec> {
    let m = &cfg.model;
    AttentionSpec::new(m.tokens(), m.heads, m.head_dim())
}

fn diff3<T: Scalar>(a: &(Tensor<T>, Tensor<T>, Tensor<T>), b: &(Tensor<f64>, Tensor<f64>, Tensor<f64>)) -> Result<f64> {
    Ok(a.0.cast().max_abs_diff(&b.0)?
        .max(a.1.cast().max_abs_diff(&b.1)?)
        .max(a.2.cast().max_abs_diff(&b.2)?))
}

fn tiled_vs_naive<T: Scalar>(cfg: &RunConfig) -> Result<(f64, f64)> {
    let spec = attention_spec(cfg)?;
    let s = spec.seq_len;
    let tiles = match cfg.layout.kernel {
        AttentionKernel::Tiled { block_q, block_k } => TileSpec::new(block_q.min(s), block_k.min(s)),
        AttentionKernel::Naive => TileSpec::square(16.min(s)),
    };
    let [q, k, v, dout] = qkv::<f64>(cfg.seed, s, spec.width());
    let (want, saved) = mha_forward(&spec, &q, &k, &v)?;
    let want_g = mha_backward(&spec, &saved, &dout)?;
    let [q, k, v, dout] = [q, k, v, dout].map(|t| t.cast::<T>());
    let (out, lse) = tiled_attention_forward(&spec, &tiles, &q, &k, &v)?;
    let g = tiled_attention_backward(&spec, &tiles, &lse, &q, &k, &v, &out, &dout)?;
    Ok((out.cast().max_abs_diff(&want)?, diff3(&g, &want_g)?))
}

fn seqpar_vs_dense<T: Scalar>(cfg: &RunConfig, fault: Option<Fault>) -> Result<(f64, f64)> {
    let spec = attention_spec(cfg)?;
    let (s, p, batch) = (spec.seq_len, cfg.layout.sp, 2);
    let [q, k, v, dout] = qkv::<f64>(cfg.seed, batch * s, spec.width());
    let mut want = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for b in 0..batch {
        let sl = |t: &Tensor<f64>| t.slice_rows(b * s..(b + 1) * s);
        let (o, saved) = mha_forward(&spec, &sl(&q)?, &sl(&k)?, &sl(&v)?)?;
        let (dq, dk, dv) = mha_backward(&spec, &saved, &sl(&dout)?)?;
        want.0.push(o);
        want.1.push(dq);
        want.2.push(dk);
        want.3.push(dv);
    }
    let cat = Tensor::concat_rows;
    let want_o = cat(&want.0)?;
    let want_g = (cat(&want.1)?, cat(&want.2)?, cat(&want.3)?);

    let [q, k, v, dout] = [q, k, v, dout].map(|t| t.cast::<T>());
    let strategy = SpStrategy::new(cfg.layout.strategy, p);
    let kernel = cfg.layout.kernel;
    let world = spawn_world(WorldSpec::new(p, 1, 1, 1)?, |ctx| {
        let me = ctx.group_rank(GroupKind::Sp);
        let shard = |t: &Tensor<T>| -> Result<SeqShard<T>> {
            let good = SeqShard::from_full(t, batch, me, p)?;
            if fault == Some(Fault::ShardRange) && me + 1 == p {
                let r = good.range.start + 1..good.range.end + 1;
                return SeqShard::new(me, r, batch, good.local);
            }
            Ok(good)
        };
        let (o, saved) = sp_attention_forward(ctx, &strategy, kernel, &spec, &shard(&q)?, &shard(&k)?, &shard(&v)?)?;
        let g = sp_attention_backward(ctx, &saved, &shard(&dout)?.local)?;
        Ok((o.local, g))
    })?;
    let mut parts: [Vec<Tensor<T>>; 4] = Default::default();
    for (o, (dq, dk, dv)) in world.results {
        parts[0].push(o);
        parts[1].push(dq);
        parts[2].push(dk);
        parts[3].push(dv);
    }
    let [o, dq, dk, dv] = parts.map(|ps| interleave_segments(&ps, batch));
    let got_g = (dq?, dk?, dv?);
    Ok((o?.cast().max_abs_diff(&want_o)?, diff3(&got_g, &want_g)?))
}

/// Loss and parameter error of one step under the layout against the f64
/// single-rank run, plus the byte mismatch between ledger and prediction.
fn hybrid_vs_reference<T: Scalar>(cfg: &RunConfig) -> Result<(f64, f64, f64)> {
    let data = gen_synthetic::<f64>(&cfg.data_spec(), cfg.seed, cfg.batch_size)?;
    let batch = Batch::new(
        data.iter().map(|s| s.input.clone()).collect(),
        data.iter().map(|s| s.target.clone()).collect(),
    )?;
    let params = ViTParams::<f64>::init(&cfg.model, cfg.seed)?;
    let (want_loss, want_params) = reference_run(
        &cfg.model,
        AttentionKernel::Naive,
        &params,
        std::slice::from_ref(&batch),
        &cfg.optimizer,
    )?;
    let run = run_layout(&cfg.layout, &cfg.model, &params.cast::<T>(), &[batch.cast()], &cfg.optimizer)?;
    let loss = (run.losses[0] - want_loss[0]).abs();
    let p = run.params.cast::<f64>().max_abs_diff(&want_params)?;
    let pred = comm_predict(&cfg.layout, &cfg.model, cfg.batch_size, T::DTYPE.width())?;
    let ledger = match pred.check_ledger(&run.ledger, 1) {
        Ok(()) => 0.0,
        Err(_) => (pred.world_bytes(&cfg.layout, 1) as f64 - run.ledger.total_bytes_sent() as f64)
            .abs()
            .max(1.0),
    };
    Ok((loss, p, ledger))
}
