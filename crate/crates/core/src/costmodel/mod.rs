//! Analytic compute, communication and memory models.
//!
//! Training compute is `6·P·D` FLOPs for `P` parameters and `D` tokens; with
//! `γ = D/P` and `N` devices sustaining `R` FLOP/s each, the ideal training
//! time is `6·γ·P² / (R·N)`.
//!
//! Communication predictions use the same fused-call conventions as the
//! runtime, so they can be checked against a [`CommLedger`] byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::attention::AttentionKernel;
use crate::collectives::{Collective, CommLedger, GroupKind};
use crate::error::{Error, Result};
use crate::hybrid::{Optimizer, ParallelLayout};
use crate::seqpar::SpKind;
use crate::vit::{param_count, ViTConfig};

/// Symbols of the compute model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostInputs {
    /// Parameter count.
    pub p: u64,
    /// Training tokens.
    pub d: u64,
    /// Tokens per parameter, `D / P`.
    pub gamma: f64,
    /// Sustained rate per device, FLOP/s.
    pub r_peak: f64,
    /// Devices.
    pub n: u64,
}

impl CostInputs {
    pub fn new(p: u64, d: u64, r_peak: f64, n: u64) -> Result<Self> {
        let inputs = Self {
            p,
            d,
            gamma: d as f64 / p.max(1) as f64,
            r_peak,
            n,
        };
        inputs.validate()?;
        Ok(inputs)
    }

    /// Inputs at a given token ratio; `D` is rounded to the nearest token.
    pub fn from_gamma(gamma: f64, p: u64, r_peak: f64, n: u64) -> Result<Self> {
        let d = (gamma * p as f64).round();
        if !(d >= 1.0 && d < u64::MAX as f64) {
            return Err(Error::config("cost-positive", format!("γ·P = {d} tokens")));
        }
        let inputs = Self {
            p,
            d: d as u64,
            gamma,
            r_peak,
            n,
        };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.d == 0 || self.n == 0 || !(self.r_peak > 0.0) || !(self.gamma > 0.0) {
            return Err(Error::config("cost-positive", format!("all cost inputs must be positive: {self:?}")));
        }
        let d = self.d as f64;
        if (self.gamma * self.p as f64 - d).abs() / d >= 1e-12 {
            return Err(Error::config(
                "gamma-consistency",
                format!("γ·P = {} but D = {}", self.gamma * self.p as f64, self.d),
            ));
        }
        Ok(())
    }
}

/// `6·P·D`, exact.
pub fn total_flops(inputs: &CostInputs) -> u128 {
    6 * inputs.p as u128 * inputs.d as u128
}

/// `6·γ·P² / (R·N)` seconds.
pub fn train_time(inputs: &CostInputs) -> f64 {
    let p = inputs.p as f64;
    6.0 * inputs.gamma * p * p / (inputs.r_peak * inputs.n as f64)
}

/// Grid of the compute model as CSV `P,D,flops,time_s`, D-major.
pub fn emit_cost_curves(d_grid: &[u64], p_grid: &[u64], r_peak: f64, n: u64) -> Result<String> {
    if d_grid.is_empty() || p_grid.is_empty() {
        return Err(Error::config("cost-positive", "empty cost grid"));
    }
    let mut out = String::from("P,D,flops,time_s\n");
    for &d in d_grid {
        for &p in p_grid {
            let inputs = CostInputs::new(p, d, r_peak, n)?;
            writeln!(out, "{p},{d},{},{:e}", total_flops(&inputs), train_time(&inputs)).expect("string write");
        }
    }
    Ok(out)
}

/// One predicted collective stream: a component of the layout, its group
/// and the calls and bytes each participating rank sends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PredictedCall {
    pub strategy: &'static str,
    pub degree: usize,
    pub collective: Collective,
    pub group: GroupKind,
    pub calls: u64,
    pub bytes_per_rank: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StagePrediction {
    pub layers: usize,
    /// Per training step.
    pub calls: Vec<PredictedCall>,
}

/// Communication of one training step, per pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommPrediction {
    /// One layer on one micro-batch (sp and tp laws only).
    pub per_layer: Vec<PredictedCall>,
    pub stages: Vec<StagePrediction>,
}

impl CommPrediction {
    /// Totals by (collective, group) for a rank of `stage` over `steps` steps.
    pub fn totals(&self, stage: usize, steps: u64) -> BTreeMap<(Collective, GroupKind), (u64, u64)> {
        let mut out: BTreeMap<_, (u64, u64)> = BTreeMap::new();
        for c in &self.stages[stage].calls {
            let e = out.entry((c.collective, c.group)).or_default();
            e.0 += c.calls * steps;
            e.1 += c.bytes_per_rank * steps;
        }
        out
    }

    /// Bytes sent per step by one rank of each stage, summed over stages.
    pub fn total_bytes(&self) -> u64 {
        self.stages
            .iter()
            .flat_map(|s| &s.calls)
            .map(|c| c.bytes_per_rank)
            .sum()
    }

    /// Bytes sent by the whole world over `steps` steps.
    pub fn world_bytes(&self, layout: &ParallelLayout, steps: u64) -> u64 {
        let ranks_per_stage = (layout.sp * layout.tp * layout.dp) as u64;
        self.total_bytes() * ranks_per_stage * steps
    }

    /// Compare against a measured ledger, every rank, `steps` steps.
    pub fn check_ledger(&self, ledger: &CommLedger, steps: u64) -> std::result::Result<(), String> {
        let spec = ledger.world();
        for (r, rl) in ledger.ranks().iter().enumerate() {
            let stage = spec.coords(r).pp;
            let want = self.totals(stage, steps);
            let got: BTreeMap<_, _> = rl
                .totals()
                .into_iter()
                .map(|(k, e)| (k, (e.calls, e.bytes_sent)))
                .collect();
            if want != got {
                return Err(format!("rank {r} (stage {stage}): predicted {want:?}, measured {got:?}"));
            }
        }
        Ok(())
    }

    /// CSV `strategy,degree,layers,collective,calls,bytes_per_rank`, per step,
    /// stage by stage.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,degree,layers,collective,calls,bytes_per_rank\n");
        for s in &self.stages {
            for c in &s.calls {
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    c.strategy, c.degree, s.layers, c.collective, c.calls, c.bytes_per_rank
                )
                .expect("string write");
            }
        }
        out
    }
}

/// Parameters held by one rank of a stage after tensor-parallel sharding.
fn owned_params(cfg: &ViTConfig, tp: usize, layers: usize, first: bool, last: bool) -> u64 {
    let counts = param_count(cfg);
    let d = cfg.dim as u64;
    let dl = d / tp as u64;
    let hl = cfg.hidden() as u64 / tp as u64;
    let block = 4 * d + 3 * d * dl + 3 * dl + dl * d + d + d * hl + hl + hl * d + d;
    let mut n = block * layers as u64;
    if first {
        n += counts.embedding;
    }
    if last {
        // Final norm lives with the head.
        n += counts.head + 2 * d;
    }
    n
}

/// Predicted communication for one step of `layout` on `batch` samples with
/// `width`-byte reals.
pub fn comm_predict(layout: &ParallelLayout, cfg: &ViTConfig, batch: usize, width: usize) -> Result<CommPrediction> {
    layout.validate(cfg, batch)?;
    let w = width as u64;
    let (sp, tp, dp) = (layout.sp as u64, layout.tp as u64, layout.dp as u64);
    let m = layout.micro_batches as u64;
    let b = batch as u64 / (dp * m);
    let s = cfg.tokens() as u64;
    let d = cfg.dim as u64;
    let dl = d / tp;
    let n = s / sp;

    let mut per_layer = Vec::new();
    let call = |strategy, degree: u64, collective, group, calls, bytes| PredictedCall {
        strategy,
        degree: degree as usize,
        collective,
        group,
        calls,
        bytes_per_rank: bytes,
    };
    if sp > 1 {
        match layout.strategy {
            SpKind::Ulysses => {
                // Q/K/V fused, output, dOut, fused dQ/dK/dV.
                let bytes = 8 * b * s * dl * w * (sp - 1) / (sp * sp);
                per_layer.push(call("ulysses", sp, Collective::AllToAll, GroupKind::Sp, 4, bytes));
            }
            SpKind::Lss => {
                let kv = 2 * b * s * dl * w * (sp - 1) / sp;
                per_layer.push(call("lss", sp, Collective::AllGather, GroupKind::Sp, 1, kv));
                per_layer.push(call("lss", sp, Collective::ReduceScatter, GroupKind::Sp, 1, kv));
            }
        }
    }
    if tp > 1 {
        per_layer.push(call("tp", tp, Collective::AllReduce, GroupKind::Tp, 4, 4 * b * n * d * w * (tp - 1)));
    }

    let stages = layout.stages(cfg.depth)?;
    let k = stages.len();
    let mut out = Vec::with_capacity(k);
    for (i, range) in stages.iter().enumerate() {
        let (first, last) = (i == 0, i + 1 == k);
        let layers = range.len() as u64;
        let mut calls: Vec<PredictedCall> = per_layer
            .iter()
            .map(|c| PredictedCall {
                calls: c.calls * layers * m,
                bytes_per_rank: c.bytes_per_rank * layers * m,
                ..*c
            })
            .filter(|c| c.calls > 0)
            .collect();
        if k > 1 {
            let act = b * n * d * w;
            let pp = k as u64;
            if !last {
                calls.push(call("pp", pp, Collective::Send, GroupKind::Pp, m, m * act));
                calls.push(call("pp", pp, Collective::Recv, GroupKind::Pp, m, 0));
            }
            if !first {
                calls.push(call("pp", pp, Collective::Send, GroupKind::Pp, m, m * act));
                calls.push(call("pp", pp, Collective::Recv, GroupKind::Pp, m, 0));
            }
        }
        let owned = owned_params(cfg, layout.tp, range.len(), first, last).max(1);
        if sp > 1 {
            calls.push(call("sp_grad", sp, Collective::AllReduce, GroupKind::Sp, 1, owned * w * (sp - 1)));
        }
        if dp > 1 {
            if layout.zero {
                let chunk = owned.div_ceil(dp);
                calls.push(call("zero", dp, Collective::ReduceScatter, GroupKind::Dp, 1, chunk * w * (dp - 1)));
                calls.push(call("zero", dp, Collective::AllGather, GroupKind::Dp, 1, chunk * w * (dp - 1)));
            } else {
                calls.push(call("dp", dp, Collective::AllReduce, GroupKind::Dp, 1, owned * w * (dp - 1)));
            }
        }
        out.push(StagePrediction {
            layers: range.len(),
            calls: merge_pp(calls),
        });
    }
    Ok(CommPrediction {
        per_layer,
        stages: out,
    })
}

/// A middle stage both sends and receives in each direction; fold the pairs.
fn merge_pp(calls: Vec<PredictedCall>) -> Vec<PredictedCall> {
    let mut out: Vec<PredictedCall> = Vec::with_capacity(calls.len());
    for c in calls {
        match out
            .iter_mut()
            .find(|o| o.strategy == c.strategy && o.collective == c.collective && o.group == c.group)
        {
            Some(o) => {
                o.calls += c.calls;
                o.bytes_per_rank += c.bytes_per_rank;
            }
            None => out.push(c),
        }
    }
    out
}

/// Bytes per rank by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryEstimate {
    pub params: u64,
    pub grads: u64,
    pub optimizer: u64,
    pub activations: u64,
    pub attention_scratch: u64,
}

impl MemoryEstimate {
    pub fn total(&self) -> u64 {
        self.params + self.grads + self.optimizer + self.activations + self.attention_scratch
    }
}

/// Peak scratch reals of one forward and backward over a single sequence
/// with every query row on this rank.
pub fn attention_scratch(seq_len: usize, heads: usize, head_dim: usize, kernel: AttentionKernel) -> u64 {
    let (s, h, dh) = (seq_len as u64, heads as u64, head_dim as u64);
    match kernel {
        AttentionKernel::Naive => h * s * s + 2 * s * s,
        AttentionKernel::Tiled { block_q, block_k } => tile_scratch(s, s, dh, block_q, block_k),
    }
}

fn tile_scratch(sq: u64, s: u64, dh: u64, block_q: usize, block_k: usize) -> u64 {
    let bq = (block_q as u64).min(s).min(sq);
    let bk = (block_k as u64).min(s);
    let fwd = bq * bk + bq * dh + 2 * bq;
    let bwd = 2 * bq * bk + 2 * bk * dh + bq;
    fwd.max(bwd)
}

/// Reals of attention scratch a rank holds at peak during one training step.
///
/// The naive kernel keeps every probability matrix until backward and adds a
/// transient `2·S_q·S` buffer per head while differentiating. The tiled
/// kernel keeps nothing between calls; its peak is one tile's working set.
pub fn attention_scratch_reals(cfg: &ViTConfig, layout: &ParallelLayout, local_batch: usize) -> u64 {
    let s = cfg.tokens() as u64;
    let sp = layout.sp as u64;
    let heads = (cfg.heads / layout.tp) as u64;
    let dh = cfg.head_dim() as u64;
    let layers = layout
        .stages(cfg.depth)
        .map(|st| st.iter().map(|r| r.len()).max().unwrap_or(0))
        .unwrap_or(cfg.depth) as u64;
    if layers == 0 {
        return 0;
    }
    let sq = match layout.strategy {
        SpKind::Ulysses => s,
        SpKind::Lss => s / sp,
    };
    match layout.kernel {
        AttentionKernel::Naive => {
            let retained = local_batch as u64 * layers * heads * s * s / sp;
            retained + 2 * sq * s
        }
        AttentionKernel::Tiled { block_q, block_k } => tile_scratch(sq, s, dh, block_q, block_k),
    }
}

/// Per-rank memory for `local_batch` samples (this dp replica's share).
pub fn memory_estimate(
    cfg: &ViTConfig,
    layout: &ParallelLayout,
    local_batch: usize,
    optimizer: &Optimizer,
    width: usize,
) -> Result<MemoryEstimate> {
    cfg.validate()?;
    let w = width as u64;
    let stages = layout.stages(cfg.depth)?;
    let k = stages.len();
    let owned = stages
        .iter()
        .enumerate()
        .map(|(i, r)| owned_params(cfg, layout.tp, r.len(), i == 0, i + 1 == k))
        .max()
        .unwrap_or(0);
    let layers = stages.iter().map(|r| r.len()).max().unwrap_or(0) as u64;
    let moments = match optimizer {
        Optimizer::Sgd { .. } => 0,
        Optimizer::Adam { .. } => 2,
    };
    let opt_elems = if layout.zero {
        owned.div_ceil(layout.dp as u64)
    } else {
        owned
    };
    let n = (cfg.tokens() / layout.sp) as u64;
    let d = cfg.dim as u64;
    let dl = d / layout.tp as u64;
    let hl = cfg.hidden() as u64 / layout.tp as u64;
    // Saved per token per layer: two normalised inputs, two norm outputs,
    // q/k/v, attention output, MLP pre- and post-activation.
    let per_token = 4 * d + 4 * dl + 2 * hl;
    Ok(MemoryEstimate {
        params: owned * w,
        grads: owned * w,
        optimizer: moments * opt_elems * w,
        activations: local_batch as u64 * n * layers * per_token * w,
        attention_scratch: attention_scratch_reals(cfg, layout, local_batch) * w,
    })
}

#[cfg(test)]
mod tests;
