//! Megatron-style sharding of the two sublayers.
//!
//! The first projection is split by columns (hidden units, or whole heads),
//! the second by rows, so each rank's output is a partial sum completed by
//! one all-reduce. The input gradient needs the mirror all-reduce.

use std::ops::Range;

use super::RankComm;
use crate::attention::AttentionSpec;
use crate::collectives::{GroupKind, RankContext};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::seqpar::SpKind;
use crate::vit::{
    attention_sublayer_backward, attention_sublayer_forward, mlp_backward, mlp_forward, AttnCache, MlpCache,
    SublayerGrads,
};

fn cols<T: Scalar>(t: &Tensor<T>, ranges: &[Range<usize>]) -> Result<Tensor<T>> {
    let vector = t.shape().len() == 1;
    let parts = ranges
        .iter()
        .map(|r| t.slice_cols(r.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = Tensor::concat_cols(&parts)?;
    if vector {
        let n = out.numel();
        out.reshape(&[n])
    } else {
        Ok(out)
    }
}

/// MLP weights: `w1 [d × h]`, `b1 [h]`, `w2 [h × d]`, `b2 [d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TpMlp<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> TpMlp<T> {
    /// Rank `rank`'s slice: columns of `w1`/`b1`, rows of `w2`; `b2` whole.
    pub fn shard(&self, tp: usize, rank: usize) -> Result<Self> {
        let hidden = self.w1.cols();
        if tp == 0 || !hidden.is_multiple_of(tp) {
            return Err(Error::Divisibility(format!("hidden width {hidden} over {tp} tensor-parallel ranks")));
        }
        let n = hidden / tp;
        let r = rank * n..(rank + 1) * n;
        Ok(Self {
            w1: cols(&self.w1, std::slice::from_ref(&r))?,
            b1: cols(&self.b1, std::slice::from_ref(&r))?,
            w2: self.w2.slice_rows(r)?,
            b2: self.b2.clone(),
        })
    }
}

pub fn tp_mlp_forward<T: Scalar>(
    ctx: &mut RankContext<'_>,
    mlp: &TpMlp<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, MlpCache<T>)> {
    let mut comm = RankComm::new(ctx, SpKind::Lss, Default::default());
    mlp_forward(&mut comm, &mlp.w1, &mlp.b1, &mlp.w2, &mlp.b2, x)
}

/// Gradients for this rank's shard; `dh` is already summed over the tp group.
pub fn tp_mlp_backward<T: Scalar>(
    ctx: &mut RankContext<'_>,
    mlp: &TpMlp<T>,
    cache: &MlpCache<T>,
    dy: &Tensor<T>,
) -> Result<SublayerGrads<T>> {
    let mut comm = RankComm::new(ctx, SpKind::Lss, Default::default());
    mlp_backward(&mut comm, &mlp.w1, &mlp.w2, cache, dy)
}

/// Attention weights: `w_qkv [d × 3d]` (q heads | k heads | v heads),
/// `b_qkv [3d]`, `w_o [d × d]`, `b_o [d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TpAttention<T> {
    pub w_qkv: Tensor<T>,
    pub b_qkv: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
}

impl<T: Scalar> TpAttention<T> {
    /// Rank `rank`'s heads of a `heads`-head layer.
    pub fn shard(&self, heads: usize, tp: usize, rank: usize) -> Result<Self> {
        if tp == 0 || !heads.is_multiple_of(tp) {
            return Err(Error::HeadDivisibility { heads, degree: tp });
        }
        let d = self.w_o.rows();
        let dl = d / tp;
        let qkv: Vec<Range<usize>> = (0..3).map(|i| i * d + rank * dl..i * d + (rank + 1) * dl).collect();
        Ok(Self {
            w_qkv: cols(&self.w_qkv, &qkv)?,
            b_qkv: cols(&self.b_qkv, &qkv)?,
            w_o: self.w_o.slice_rows(rank * dl..(rank + 1) * dl)?,
            b_o: self.b_o.clone(),
        })
    }
}

/// Self-attention with heads split over the tp group. `spec` describes the
/// full layer; `attn` holds this rank's shard.
pub fn tp_attention<T: Scalar>(
    ctx: &mut RankContext<'_>,
    spec: &AttentionSpec,
    attn: &TpAttention<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, AttnCache<T>)> {
    let tp = ctx.group_size(GroupKind::Tp);
    if !spec.heads.is_multiple_of(tp) {
        return Err(Error::HeadDivisibility { heads: spec.heads, degree: tp });
    }
    let local = AttentionSpec::new(spec.seq_len, spec.heads / tp, spec.head_dim)?;
    let batch = x.rows() * ctx.group_size(GroupKind::Sp) / spec.seq_len;
    let mut comm = RankComm::new(ctx, SpKind::Lss, Default::default());
    attention_sublayer_forward(&mut comm, &local, batch.max(1), &attn.w_qkv, &attn.b_qkv, &attn.w_o, &attn.b_o, x)
}

pub fn tp_attention_backward<T: Scalar>(
    ctx: &mut RankContext<'_>,
    attn: &TpAttention<T>,
    cache: &AttnCache<T>,
    dy: &Tensor<T>,
) -> Result<SublayerGrads<T>> {
    let mut comm = RankComm::new(ctx, SpKind::Lss, Default::default());
    attention_sublayer_backward(&mut comm, &attn.w_qkv, &attn.w_o, cache, dy)
}
