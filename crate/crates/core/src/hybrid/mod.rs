//! Tensor, pipeline and data parallelism, and their composition with
//! sequence parallelism.
//!
//! Rank layout follows [`WorldSpec`]: `sp` varies fastest, then `tp`, `pp`
//! and `dp`. Within a pipeline stage, sp ranks hold token segments and tp
//! ranks hold head and hidden-column shards of every block; dp replicas see
//! disjoint samples.

mod compose;
mod optim;
mod pipeline;
mod tp;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionKernel, AttentionSpec};
use crate::collectives::{GroupKind, RankContext, WorldSpec};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::seqpar::{sp_attention_backward, sp_attention_forward, SeqShard, SpKind, SpStrategy};
use crate::vit::{check_tp, AttnState, Comm, ViTConfig};

pub use compose::{compose, reference_run, run_layout, Batch, RunOutcome};
pub use optim::{zero_sharded_step, OptState, Optimizer, ShardedOptimizerState};
pub use pipeline::pipeline_run;
pub use tp::{tp_attention, tp_attention_backward, tp_mlp_backward, tp_mlp_forward, TpAttention, TpMlp};

/// How a training step is spread over the simulated world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelLayout {
    #[serde(default = "one")]
    pub sp: usize,
    #[serde(default = "one")]
    pub tp: usize,
    #[serde(default = "one")]
    pub pp: usize,
    #[serde(default = "one")]
    pub dp: usize,
    /// Pipeline micro-batches per step.
    #[serde(default = "one")]
    pub micro_batches: usize,
    #[serde(default = "default_strategy")]
    pub strategy: SpKind,
    /// Shard optimizer state over the dp group.
    #[serde(default)]
    pub zero: bool,
    #[serde(default)]
    pub kernel: AttentionKernel,
}

fn one() -> usize {
    1
}

fn default_strategy() -> SpKind {
    SpKind::Ulysses
}

impl Default for ParallelLayout {
    fn default() -> Self {
        Self::single()
    }
}

impl ParallelLayout {
    pub fn single() -> Self {
        Self {
            sp: 1,
            tp: 1,
            pp: 1,
            dp: 1,
            micro_batches: 1,
            strategy: SpKind::Ulysses,
            zero: false,
            kernel: AttentionKernel::Naive,
        }
    }

    /// Degrees with `M = max(pp, 1)` micro-batches.
    pub fn new(strategy: SpKind, sp: usize, tp: usize, pp: usize, dp: usize) -> Self {
        Self {
            sp,
            tp,
            pp,
            dp,
            micro_batches: pp.max(1),
            strategy,
            ..Self::single()
        }
    }

    pub fn world(&self) -> Result<WorldSpec> {
        WorldSpec::new(self.sp, self.tp, self.pp, self.dp)
    }

    pub fn world_size(&self) -> usize {
        self.sp * self.tp * self.pp * self.dp
    }

    pub fn sp_strategy(&self) -> SpStrategy {
        SpStrategy::new(self.strategy, self.sp)
    }

    /// Contiguous layer ranges, one per stage.
    pub fn stages(&self, depth: usize) -> Result<Vec<Range<usize>>> {
        stage_ranges(depth, self.pp)
    }

    /// Idle fraction of the synchronous schedule.
    pub fn bubble_fraction(&self) -> f64 {
        bubble_fraction(self.pp, self.micro_batches)
    }

    /// Short name such as `ulysses-sp2-tp1-pp2-dp1`.
    pub fn label(&self) -> String {
        format!(
            "{}-sp{}-tp{}-pp{}-dp{}{}",
            self.strategy.name(),
            self.sp,
            self.tp,
            self.pp,
            self.dp,
            if self.zero { "-zero" } else { "" }
        )
    }

    /// Every cross-module constraint, checked before any rank starts.
    pub fn validate(&self, cfg: &ViTConfig, batch: usize) -> Result<()> {
        cfg.validate()?;
        self.world()?;
        if self.micro_batches == 0 {
            return Err(Error::config("micro-batch-count", "at least one micro-batch is required"));
        }
        if self.micro_batches < self.pp {
            return Err(Error::config(
                "micro-batch-count",
                format!("{} micro-batches cannot fill {} pipeline stages", self.micro_batches, self.pp),
            ));
        }
        self.stages(cfg.depth)?;
        check_tp(cfg, self.tp)?;
        self.sp_strategy().validate(cfg.tokens(), cfg.heads / self.tp)?;
        if batch == 0 || !batch.is_multiple_of(self.dp * self.micro_batches) {
            return Err(Error::config(
                "batch-divisibility",
                format!(
                    "batch {batch} does not split into {} replicas x {} micro-batches",
                    self.dp, self.micro_batches
                ),
            ));
        }
        if let AttentionKernel::Tiled { block_q, block_k } = self.kernel {
            if block_q == 0 || block_k == 0 {
                return Err(Error::config("tile-size", "tile extents must be positive"));
            }
        }
        Ok(())
    }
}

/// Equal layer counts per stage, remainder to the earliest stages.
pub fn stage_ranges(depth: usize, stages: usize) -> Result<Vec<Range<usize>>> {
    if stages == 0 {
        return Err(Error::Stage("zero pipeline stages".into()));
    }
    if stages > depth.max(1) {
        return Err(Error::Stage(format!("{stages} stages for {depth} layers")));
    }
    let (base, extra) = (depth / stages, depth % stages);
    let mut start = 0;
    Ok((0..stages)
        .map(|s| {
            let len = base + usize::from(s < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

/// `(K - 1) / (M + K - 1)` for `K` stages and `M` micro-batches.
pub fn bubble_fraction(stages: usize, micro_batches: usize) -> f64 {
    let k = stages as f64;
    (k - 1.0) / (micro_batches as f64 + k - 1.0)
}

/// [`Comm`] backed by a rank's sp and tp groups.
pub struct RankComm<'a, 'w> {
    pub ctx: &'a mut RankContext<'w>,
    pub strategy: SpStrategy,
    pub kernel: AttentionKernel,
}

impl<'a, 'w> RankComm<'a, 'w> {
    pub fn new(ctx: &'a mut RankContext<'w>, strategy: SpKind, kernel: AttentionKernel) -> Self {
        let degree = ctx.group_size(GroupKind::Sp);
        Self {
            ctx,
            strategy: SpStrategy::new(strategy, degree),
            kernel,
        }
    }

    /// Token range of this rank's segment in a sequence of `seq_len`.
    pub fn token_range(&self, seq_len: usize) -> Range<usize> {
        let p = self.strategy.degree;
        let me = self.ctx.group_rank(GroupKind::Sp);
        let n = seq_len / p;
        me * n..(me + 1) * n
    }
}

impl<T: Scalar> Comm<T> for RankComm<'_, '_> {
    fn attention_forward(
        &mut self,
        spec: &AttentionSpec,
        batch: usize,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
    ) -> Result<(Tensor<T>, AttnState<T>)> {
        let me = self.ctx.group_rank(GroupKind::Sp);
        let range = self.token_range(spec.seq_len);
        let shard = |t: &Tensor<T>| SeqShard::new(me, range.clone(), batch, t.clone());
        let (out, saved) =
            sp_attention_forward(self.ctx, &self.strategy, self.kernel, spec, &shard(q)?, &shard(k)?, &shard(v)?)?;
        Ok((out.local, AttnState::Sharded(saved)))
    }

    fn attention_backward(
        &mut self,
        state: &AttnState<T>,
        dout: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        match state {
            AttnState::Sharded(saved) => sp_attention_backward(self.ctx, saved, dout),
            AttnState::Local(_) => Err(Error::StaleState("local attention state in a sharded backward".into())),
        }
    }

    fn tp_sum(&mut self, x: Tensor<T>) -> Result<Tensor<T>> {
        if self.ctx.group_size(GroupKind::Tp) == 1 {
            Ok(x)
        } else {
            self.ctx.all_reduce_sum(GroupKind::Tp, &x)
        }
    }
}
