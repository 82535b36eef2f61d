//! Sequence-parallel attention over the `sp` group.
//!
//! Each rank of an sp group of size `P` holds a contiguous segment of `S/P`
//! tokens of every sequence in its batch. Two strategies produce exactly the
//! attention a single rank would compute on the whole sequence:
//!
//! * **Ulysses** trades the token split for a head split with one fused
//!   all-to-all of Q/K/V, attends over full sequences for `H/P` heads, and
//!   trades back with a second all-to-all. Backward mirrors this: two more
//!   all-to-alls. Requires `P | H`.
//! * **LSS** keeps queries local, gathers keys and values with one fused
//!   all-gather and returns their gradients with one fused reduce-scatter.
//!   No head constraint.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::attention::{batched_backward, batched_forward, AttentionKernel, AttentionSaved, AttentionSpec};
use crate::collectives::{GroupKind, RankContext};
use crate::error::{Error, Result};
use crate::numerics::{flatten, unflatten_into, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpKind {
    Ulysses,
    Lss,
}

impl SpKind {
    pub fn name(self) -> &'static str {
        match self {
            SpKind::Ulysses => "ulysses",
            SpKind::Lss => "lss",
        }
    }
}

impl std::str::FromStr for SpKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ulysses" => Ok(SpKind::Ulysses),
            "lss" => Ok(SpKind::Lss),
            other => Err(format!("unknown strategy `{other}` (expected ulysses or lss)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpStrategy {
    pub kind: SpKind,
    pub degree: usize,
}

impl SpStrategy {
    pub fn new(kind: SpKind, degree: usize) -> Self {
        Self { kind, degree }
    }

    /// Divisibility rules: `P | S` always; Ulysses also needs `P | H`
    /// (which implies `P <= H`).
    pub fn validate(&self, seq_len: usize, heads: usize) -> Result<()> {
        if self.degree == 0 {
            return Err(Error::config("sp-degree", "sequence-parallel degree must be positive"));
        }
        if self.kind == SpKind::Ulysses && (self.degree > heads || !heads.is_multiple_of(self.degree)) {
            return Err(Error::HeadDivisibility {
                heads,
                degree: self.degree,
            });
        }
        if !seq_len.is_multiple_of(self.degree) {
            return Err(Error::SeqDivisibility {
                seq_len,
                degree: self.degree,
            });
        }
        Ok(())
    }
}

/// One rank's contiguous token segment of `batch` stacked sequences.
///
/// `local` has `batch · range.len()` rows, sequence-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqShard<T> {
    pub owner: usize,
    pub range: Range<usize>,
    pub batch: usize,
    pub local: Tensor<T>,
}

impl<T: Scalar> SeqShard<T> {
    pub fn new(owner: usize, range: Range<usize>, batch: usize, local: Tensor<T>) -> Result<Self> {
        if range.is_empty() || batch == 0 || local.rows() != batch * range.len() {
            return Err(Error::shape(format!(
                "shard {range:?} x batch {batch} needs {} rows, has {}",
                batch * range.len(),
                local.rows()
            )));
        }
        Ok(Self {
            owner,
            range,
            batch,
            local,
        })
    }

    /// Cut the segment owned by `owner` out of full sequences
    /// (`[batch · seq_len × width]`).
    pub fn from_full(full: &Tensor<T>, batch: usize, owner: usize, degree: usize) -> Result<Self> {
        let s = full.rows() / batch;
        if !full.rows().is_multiple_of(batch) || !s.is_multiple_of(degree) {
            return Err(Error::SeqDivisibility { seq_len: s, degree });
        }
        let seg = s / degree;
        let range = owner * seg..(owner + 1) * seg;
        let parts = (0..batch)
            .map(|b| full.slice_rows(b * s + range.start..b * s + range.end))
            .collect::<Result<Vec<_>>>()?;
        Self::new(owner, range, batch, Tensor::concat_rows(&parts)?)
    }

    /// Ranges of an sp group must tile `[0, seq_len)` contiguously in rank order.
    pub fn check_tiling(&self, seq_len: usize, degree: usize) -> Result<()> {
        let seg = seq_len / degree;
        let expect = self.owner * seg..(self.owner + 1) * seg;
        if !seq_len.is_multiple_of(degree) || self.range != expect {
            return Err(Error::ShardRange(format!(
                "rank {} holds tokens {:?}, expected {expect:?} of {seq_len}",
                self.owner, self.range
            )));
        }
        if self.local.rows() != self.batch * seg {
            return Err(Error::ShardRange(format!(
                "rank {} has {} rows for {} tokens x batch {}",
                self.owner,
                self.local.rows(),
                seg,
                self.batch
            )));
        }
        Ok(())
    }
}

/// Reassemble sequence-major rows from per-rank segments:
/// `chunks[i]` is rank `i`'s `[batch · seg × c]` block.
pub(crate) fn interleave_segments<T: Scalar>(chunks: &[Tensor<T>], batch: usize) -> Result<Tensor<T>> {
    let seg = chunks[0].rows() / batch;
    let mut parts = Vec::with_capacity(batch * chunks.len());
    for b in 0..batch {
        for c in chunks {
            parts.push(c.slice_rows(b * seg..(b + 1) * seg)?);
        }
    }
    Tensor::concat_rows(&parts)
}

/// Inverse of [`interleave_segments`].
pub(crate) fn split_segments<T: Scalar>(full: &Tensor<T>, degree: usize, batch: usize) -> Result<Vec<Tensor<T>>> {
    let s = full.rows() / batch;
    let seg = s / degree;
    (0..degree)
        .map(|i| {
            let parts = (0..batch)
                .map(|b| full.slice_rows(b * s + i * seg..b * s + (i + 1) * seg))
                .collect::<Result<Vec<_>>>()?;
            Tensor::concat_rows(&parts)
        })
        .collect()
}

/// State kept between a sequence-parallel forward and its backward.
#[derive(Debug)]
pub struct SpSaved<T> {
    kind: SpKind,
    degree: usize,
    batch: usize,
    range: Range<usize>,
    inner: Vec<AttentionSaved<T>>,
}

/// Sequence-parallel attention forward over the `sp` group.
///
/// `spec` describes the full sequence and the heads held by this rank before
/// any head split (after tensor parallelism, if any).
pub fn sp_attention_forward<T: Scalar>(
    ctx: &mut RankContext<'_>,
    strategy: &SpStrategy,
    kernel: AttentionKernel,
    spec: &AttentionSpec,
    q: &SeqShard<T>,
    k: &SeqShard<T>,
    v: &SeqShard<T>,
) -> Result<(SeqShard<T>, SpSaved<T>)> {
    let p = ctx.group_size(GroupKind::Sp);
    if p != strategy.degree {
        return Err(Error::Group(format!(
            "strategy degree {} but sp group has {p} ranks",
            strategy.degree
        )));
    }
    strategy.validate(spec.seq_len, spec.heads)?;
    let me = ctx.group_rank(GroupKind::Sp);
    for shard in [q, k, v] {
        if shard.owner != me {
            return Err(Error::ShardRange(format!(
                "shard owned by {} passed to sp rank {me}",
                shard.owner
            )));
        }
        shard.check_tiling(spec.seq_len, p)?;
    }
    let batch = q.batch;
    if k.batch != batch || v.batch != batch {
        return Err(Error::shape("Q/K/V shards carry different batch sizes"));
    }

    let (out, inner) = if p == 1 {
        batched_forward(kernel, spec, batch, &q.local, &k.local, &v.local)?
    } else {
        match strategy.kind {
            SpKind::Ulysses => ulysses_forward(ctx, kernel, spec, p, batch, q, k, v)?,
            SpKind::Lss => lss_forward(ctx, kernel, spec, batch, q, k, v)?,
        }
    };
    Ok((
        SeqShard::new(me, q.range.clone(), batch, out)?,
        SpSaved {
            kind: strategy.kind,
            degree: p,
            batch,
            range: q.range.clone(),
            inner,
        },
    ))
}

#[allow(clippy::too_many_arguments)]
fn ulysses_forward<T: Scalar>(
    ctx: &mut RankContext<'_>,
    kernel: AttentionKernel,
    spec: &AttentionSpec,
    p: usize,
    batch: usize,
    q: &SeqShard<T>,
    k: &SeqShard<T>,
    v: &SeqShard<T>,
) -> Result<(Tensor<T>, Vec<AttentionSaved<T>>)> {
    let hp = spec.heads / p;
    let c = hp * spec.head_dim;
    let shards = (0..p)
        .map(|j| {
            let cols = j * c..(j + 1) * c;
            Tensor::concat_cols(&[
                q.local.slice_cols(cols.clone())?,
                k.local.slice_cols(cols.clone())?,
                v.local.slice_cols(cols)?,
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let recv = ctx.all_to_all(GroupKind::Sp, shards)?;
    let full = interleave_segments(&recv, batch)?;
    let sub = AttentionSpec::new(spec.seq_len, hp, spec.head_dim)?;
    let (out, saved) = batched_forward(
        kernel,
        &sub,
        batch,
        &full.slice_cols(0..c)?,
        &full.slice_cols(c..2 * c)?,
        &full.slice_cols(2 * c..3 * c)?,
    )?;
    let back = ctx.all_to_all(GroupKind::Sp, split_segments(&out, p, batch)?)?;
    Ok((Tensor::concat_cols(&back)?, saved))
}

fn lss_forward<T: Scalar>(
    ctx: &mut RankContext<'_>,
    kernel: AttentionKernel,
    spec: &AttentionSpec,
    batch: usize,
    q: &SeqShard<T>,
    k: &SeqShard<T>,
    v: &SeqShard<T>,
) -> Result<(Tensor<T>, Vec<AttentionSaved<T>>)> {
    let d = spec.width();
    let kv = Tensor::concat_cols(&[k.local.clone(), v.local.clone()])?;
    let gathered = ctx.all_gather(GroupKind::Sp, &kv)?;
    let full = interleave_segments(&gathered, batch)?;
    batched_forward(
        kernel,
        spec,
        batch,
        &q.local,
        &full.slice_cols(0..d)?,
        &full.slice_cols(d..2 * d)?,
    )
}

/// Backward of [`sp_attention_forward`]: local `(dQ, dK, dV)` segments.
pub fn sp_attention_backward<T: Scalar>(
    ctx: &mut RankContext<'_>,
    saved: &SpSaved<T>,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let p = saved.degree;
    if ctx.group_size(GroupKind::Sp) != p {
        return Err(Error::StaleState("sp group changed between forward and backward".into()));
    }
    if dout.rows() != saved.batch * saved.range.len() {
        return Err(Error::StaleState(format!(
            "dOut has {} rows, forward produced {}",
            dout.rows(),
            saved.batch * saved.range.len()
        )));
    }
    let batch = saved.batch;
    if p == 1 {
        return batched_backward(&saved.inner, dout);
    }
    match saved.kind {
        SpKind::Ulysses => {
            let recv = ctx.all_to_all(GroupKind::Sp, dout.split_cols(p)?)?;
            let dfull = interleave_segments(&recv, batch)?;
            let (dq, dk, dv) = batched_backward(&saved.inner, &dfull)?;
            let fused = Tensor::concat_cols(&[dq, dk, dv])?;
            let back = ctx.all_to_all(GroupKind::Sp, split_segments(&fused, p, batch)?)?;
            let c = back[0].cols() / 3;
            let pick = |i: usize| -> Result<Tensor<T>> {
                let parts = back
                    .iter()
                    .map(|t| t.slice_cols(i * c..(i + 1) * c))
                    .collect::<Result<Vec<_>>>()?;
                Tensor::concat_cols(&parts)
            };
            Ok((pick(0)?, pick(1)?, pick(2)?))
        }
        SpKind::Lss => {
            let (dq, dk, dv) = batched_backward(&saved.inner, dout)?;
            let d = dq.cols();
            let fused = Tensor::concat_cols(&[dk, dv])?;
            let mine = ctx.reduce_scatter_sum(GroupKind::Sp, split_segments(&fused, p, batch)?)?;
            Ok((dq, mine.slice_cols(0..d)?, mine.slice_cols(d..2 * d)?))
        }
    }
}

/// Forward-only Ulysses attention on single-sequence shards.
pub fn ulysses_attention<T: Scalar>(
    ctx: &mut RankContext<'_>,
    spec: &AttentionSpec,
    q: &SeqShard<T>,
    k: &SeqShard<T>,
    v: &SeqShard<T>,
) -> Result<SeqShard<T>> {
    let strategy = SpStrategy::new(SpKind::Ulysses, ctx.group_size(GroupKind::Sp));
    sp_attention_forward(ctx, &strategy, AttentionKernel::Naive, spec, q, k, v).map(|(o, _)| o)
}

/// Forward-only LSS attention on single-sequence shards.
pub fn lss_attention<T: Scalar>(
    ctx: &mut RankContext<'_>,
    spec: &AttentionSpec,
    q: &SeqShard<T>,
    k: &SeqShard<T>,
    v: &SeqShard<T>,
) -> Result<SeqShard<T>> {
    let strategy = SpStrategy::new(SpKind::Lss, ctx.group_size(GroupKind::Sp));
    sp_attention_forward(ctx, &strategy, AttentionKernel::Naive, spec, q, k, v).map(|(o, _)| o)
}

/// Mean of per-rank gradients over the sp group, one fused all-reduce.
/// Parameters outside attention are replicated across sp ranks, and each
/// rank's gradient covers only its own tokens.
pub fn sp_grad_average<T: Scalar>(ctx: &mut RankContext<'_>, grads: &mut [&mut Tensor<T>]) -> Result<()> {
    group_mean(ctx, GroupKind::Sp, grads)
}

/// Mean over any group via a single fused all-reduce; a no-op for one rank.
pub fn group_mean<T: Scalar>(
    ctx: &mut RankContext<'_>,
    group: GroupKind,
    grads: &mut [&mut Tensor<T>],
) -> Result<()> {
    let p = ctx.group_size(group);
    if p == 1 || grads.is_empty() {
        return Ok(());
    }
    let flat = flatten(&grads.iter().map(|g| &**g).collect::<Vec<_>>());
    let summed = ctx.all_reduce_sum(group, &flat)?;
    let mean = summed.scale(T::one() / T::of(p as f64));
    unflatten_into(&mean, grads)
}

/// Gather a sharded activation back into full sequences on every sp rank.
pub fn gather_sequence<T: Scalar>(ctx: &mut RankContext<'_>, shard: &SeqShard<T>) -> Result<Tensor<T>> {
    if ctx.group_size(GroupKind::Sp) == 1 {
        return Ok(shard.local.clone());
    }
    let parts = ctx.all_gather(GroupKind::Sp, &shard.local)?;
    interleave_segments(&parts, shard.batch)
}
