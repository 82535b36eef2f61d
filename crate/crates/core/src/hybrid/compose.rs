use std::ops::Range;

use super::optim::{zero_sharded_step, OptState, Optimizer, ShardedOptimizerState};
use super::{pipeline_run, ParallelLayout};
use crate::attention::{meter, AttentionKernel};
use crate::collectives::{spawn_world, CommLedger, GroupKind, RankContext, RankCoords};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::seqpar::group_mean;
use crate::vit::{local_forward_backward, ViTConfig, ViTParams};

/// Input fields and their forecast targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub inputs: Vec<Tensor<T>>,
    pub targets: Vec<Tensor<T>>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(inputs: Vec<Tensor<T>>, targets: Vec<Tensor<T>>) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(Error::shape(format!(
                "{} inputs for {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn refs(&self, range: Range<usize>) -> (Vec<&Tensor<T>>, Vec<&Tensor<T>>) {
        (
            self.inputs[range.clone()].iter().collect(),
            self.targets[range].iter().collect(),
        )
    }

    pub fn slice(&self, range: Range<usize>) -> Self {
        Self {
            inputs: self.inputs[range.clone()].to_vec(),
            targets: self.targets[range].to_vec(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Batch<U> {
        Batch {
            inputs: self.inputs.iter().map(Tensor::cast).collect(),
            targets: self.targets.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Result of a distributed run, gathered on the controller after teardown.
#[derive(Debug)]
pub struct RunOutcome<T> {
    /// Mean loss per step, before that step's update.
    pub losses: Vec<f64>,
    /// Unsharded parameters after the last step.
    pub params: ViTParams<T>,
    pub ledger: CommLedger,
    /// Largest attention scratch (reals) seen on any rank.
    pub peak_scratch: usize,
}

const SYNC_TAG: &str = "grad_sync";

/// One optimizer step of this rank under `layout`.
fn train_step<T: Scalar>(
    ctx: &mut RankContext<'_>,
    layout: &ParallelLayout,
    cfg: &ViTConfig,
    optimizer: &Optimizer,
    params: &mut ViTParams<T>,
    state: &mut ShardedOptimizerState<T>,
    batch: &Batch<T>,
) -> Result<Option<T>> {
    let stages = layout.stages(cfg.depth)?;
    let s = ctx.group_rank(GroupKind::Pp);
    let (first, last) = (s == 0, s + 1 == stages.len());
    let layers = stages[s].clone();
    let (loss, mut grads) = pipeline_run(ctx, layout, cfg, params, batch)?;
    ctx.push_tag(SYNC_TAG);
    let res = (|| {
        group_mean(ctx, GroupKind::Sp, &mut grads.stage_tensors_mut(layers.clone(), first, last))?;
        if layout.zero {
            zero_sharded_step(
                ctx,
                GroupKind::Dp,
                optimizer,
                &mut params.stage_tensors_mut(layers.clone(), first, last),
                &grads.stage_tensors(layers.clone(), first, last),
                state,
            )
        } else {
            group_mean(ctx, GroupKind::Dp, &mut grads.stage_tensors_mut(layers.clone(), first, last))?;
            optimizer.apply_tensors(
                &mut params.stage_tensors_mut(layers.clone(), first, last),
                &grads.stage_tensors(layers.clone(), first, last),
                &mut state.inner,
            )
        }
    })();
    ctx.pop_tag();
    res?;
    Ok(loss)
}

/// Train for `batches.len()` steps under `layout` on a fresh simulated world.
pub fn run_layout<T: Scalar>(
    layout: &ParallelLayout,
    cfg: &ViTConfig,
    params: &ViTParams<T>,
    batches: &[Batch<T>],
    optimizer: &Optimizer,
) -> Result<RunOutcome<T>> {
    for b in batches {
        layout.validate(cfg, b.len())?;
    }
    let world = layout.world()?;
    let stages = layout.stages(cfg.depth)?;
    let out = spawn_world(world, |ctx| {
        meter::reset();
        let c = ctx.world().coords(ctx.rank());
        let mut local = params.tp_shard(cfg, layout.tp, c.tp)?;
        let (first, last) = (c.pp == 0, c.pp + 1 == stages.len());
        let owned: usize = local
            .stage_tensors(stages[c.pp].clone(), first, last)
            .iter()
            .map(|t| t.numel())
            .sum();
        let mut state = if layout.zero {
            ShardedOptimizerState::new(owned, layout.dp, c.dp)?
        } else {
            ShardedOptimizerState::new(owned, 1, 0)?
        };
        let mut losses = Vec::with_capacity(batches.len());
        for b in batches {
            let per = b.len() / layout.dp;
            let mine = b.slice(c.dp * per..(c.dp + 1) * per);
            losses.push(train_step(ctx, layout, cfg, optimizer, &mut local, &mut state, &mine)?);
        }
        Ok((losses, local, meter::peak()))
    })?;

    let mut losses = vec![0.0; batches.len()];
    let mut counted = 0usize;
    for (ls, _, _) in &out.results {
        if ls.iter().all(Option::is_some) && !ls.is_empty() {
            counted += 1;
            for (acc, l) in losses.iter_mut().zip(ls) {
                *acc += l.expect("checked").to_f64();
            }
        }
    }
    if counted > 0 {
        losses.iter_mut().for_each(|l| *l /= counted as f64);
    }

    let stage_params = (0..layout.pp)
        .map(|pp| {
            let shards: Vec<ViTParams<T>> = (0..layout.tp)
                .map(|tp| {
                    let r = world.rank_of(RankCoords { sp: 0, tp, pp, dp: 0 });
                    out.results[r].1.clone()
                })
                .collect();
            ViTParams::tp_unshard(&shards)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut full = stage_params[0].clone();
    for (s, range) in stages.iter().enumerate() {
        for l in range.clone() {
            full.blocks[l] = stage_params[s].blocks[l].clone();
        }
    }
    full.head = stage_params[layout.pp - 1].head.clone();
    let peak_scratch = out.results.iter().map(|r| r.2).max().unwrap_or(0);
    Ok(RunOutcome {
        losses,
        params: full,
        ledger: out.ledger,
        peak_scratch,
    })
}

/// A single training step under SP x TP x PP x DP.
pub fn compose<T: Scalar>(
    layout: &ParallelLayout,
    cfg: &ViTConfig,
    params: &ViTParams<T>,
    batch: &Batch<T>,
    optimizer: &Optimizer,
) -> Result<RunOutcome<T>> {
    run_layout(layout, cfg, params, std::slice::from_ref(batch), optimizer)
}

/// Plain single-rank training: the baseline every layout must reproduce.
pub fn reference_run<T: Scalar>(
    cfg: &ViTConfig,
    kernel: AttentionKernel,
    params: &ViTParams<T>,
    batches: &[Batch<T>],
    optimizer: &Optimizer,
) -> Result<(Vec<f64>, ViTParams<T>)> {
    let mut params = params.clone();
    let mut state = OptState::default();
    let mut losses = Vec::with_capacity(batches.len());
    for b in batches {
        let (inputs, targets) = b.refs(0..b.len());
        let (loss, grads) = local_forward_backward(cfg, &params, kernel, &inputs, &targets)?;
        optimizer.apply_tensors(&mut params.tensors_mut(), &grads.tensors(), &mut state)?;
        losses.push(loss.to_f64());
    }
    Ok((losses, params))
}
