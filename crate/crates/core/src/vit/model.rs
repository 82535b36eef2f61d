use super::embed::{embed_backward, embed_forward, patchify, unpatchify};
use super::params::{BlockParams, HeadParams, ViTParams};
use super::ViTConfig;
use crate::attention::{batched_backward, batched_forward, AttentionKernel, AttentionSaved, AttentionSpec};
use crate::error::{Error, Result};
use crate::numerics::ops::{add_bias, gelu, gelu_backward, layer_norm, layer_norm_backward, linear, linear_backward, mse, LayerNormCache};
use crate::numerics::{Scalar, Tensor};
use crate::seqpar::SpSaved;

const LN_EPS: f64 = 1e-5;

/// Attention state from whichever communicator ran the forward.
#[derive(Debug)]
pub enum AttnState<T> {
    Local(Vec<AttentionSaved<T>>),
    Sharded(SpSaved<T>),
}

/// The communication a block needs: attention over the (possibly sharded)
/// sequence, and the sum over tensor-parallel partial products.
pub trait Comm<T: Scalar> {
    fn attention_forward(
        &mut self,
        spec: &AttentionSpec,
        batch: usize,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
    ) -> Result<(Tensor<T>, AttnState<T>)>;

    fn attention_backward(
        &mut self,
        state: &AttnState<T>,
        dout: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)>;

    fn tp_sum(&mut self, x: Tensor<T>) -> Result<Tensor<T>>;
}

/// Everything on one rank: full sequences, unsharded weights.
#[derive(Debug, Clone, Copy, Default)]
pub struct LocalComm {
    pub kernel: AttentionKernel,
}

impl<T: Scalar> Comm<T> for LocalComm {
    fn attention_forward(
        &mut self,
        spec: &AttentionSpec,
        batch: usize,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
    ) -> Result<(Tensor<T>, AttnState<T>)> {
        let (out, saved) = batched_forward(self.kernel, spec, batch, q, k, v)?;
        Ok((out, AttnState::Local(saved)))
    }

    fn attention_backward(
        &mut self,
        state: &AttnState<T>,
        dout: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        match state {
            AttnState::Local(saved) => batched_backward(saved, dout),
            AttnState::Sharded(_) => Err(Error::StaleState("sharded attention state in a local backward".into())),
        }
    }

    fn tp_sum(&mut self, x: Tensor<T>) -> Result<Tensor<T>> {
        Ok(x)
    }
}

fn eps<T: Scalar>() -> T {
    T::of(LN_EPS)
}

#[derive(Debug)]
pub struct AttnCache<T> {
    h: Tensor<T>,
    attn: Tensor<T>,
    state: AttnState<T>,
}

/// Gradients of one attention or MLP sublayer, plus the input gradient.
#[derive(Debug)]
pub struct SublayerGrads<T> {
    pub dh: Tensor<T>,
    pub w_in: Tensor<T>,
    pub b_in: Tensor<T>,
    pub w_out: Tensor<T>,
    pub b_out: Tensor<T>,
}

/// Self-attention sublayer `attn(h·W_qkv + b_qkv)·W_o + b_o`.
///
/// With head-sharded weights (`spec.heads` local heads) the output projection
/// yields a partial sum that `comm.tp_sum` completes before the bias.
#[allow(clippy::too_many_arguments)]
pub fn attention_sublayer_forward<T: Scalar, C: Comm<T> + ?Sized>(
    comm: &mut C,
    spec: &AttentionSpec,
    batch: usize,
    w_qkv: &Tensor<T>,
    b_qkv: &Tensor<T>,
    w_o: &Tensor<T>,
    b_o: &Tensor<T>,
    h: &Tensor<T>,
) -> Result<(Tensor<T>, AttnCache<T>)> {
    let dl = spec.width();
    if w_qkv.cols() != 3 * dl || w_o.rows() != dl {
        return Err(Error::shape(format!(
            "attention weights {:?}/{:?} for {} local heads of {}",
            w_qkv.shape(),
            w_o.shape(),
            spec.heads,
            spec.head_dim
        )));
    }
    let qkv = linear(h, w_qkv, Some(b_qkv))?;
    let (attn, state) = comm.attention_forward(
        spec,
        batch,
        &qkv.slice_cols(0..dl)?,
        &qkv.slice_cols(dl..2 * dl)?,
        &qkv.slice_cols(2 * dl..3 * dl)?,
    )?;
    let o = comm.tp_sum(linear(&attn, w_o, None)?)?;
    let y = add_bias(&o, b_o)?;
    Ok((y, AttnCache { h: h.clone(), attn, state }))
}

pub fn attention_sublayer_backward<T: Scalar, C: Comm<T> + ?Sized>(
    comm: &mut C,
    w_qkv: &Tensor<T>,
    w_o: &Tensor<T>,
    cache: &AttnCache<T>,
    dy: &Tensor<T>,
) -> Result<SublayerGrads<T>> {
    let (dattn, w_out, b_out) = linear_backward(&cache.attn, w_o, dy)?;
    let (dq, dk, dv) = comm.attention_backward(&cache.state, &dattn)?;
    let dqkv = Tensor::concat_cols(&[dq, dk, dv])?;
    let (dh, w_in, b_in) = linear_backward(&cache.h, w_qkv, &dqkv)?;
    Ok(SublayerGrads {
        dh: comm.tp_sum(dh)?,
        w_in,
        b_in,
        w_out,
        b_out,
    })
}

#[derive(Debug)]
pub struct MlpCache<T> {
    h: Tensor<T>,
    u: Tensor<T>,
    g: Tensor<T>,
}

/// MLP sublayer `gelu(h·W1 + b1)·W2 + b2`; `W1` may be column-sharded and
/// `W2` row-sharded, with `comm.tp_sum` completing the second product.
pub fn mlp_forward<T: Scalar, C: Comm<T> + ?Sized>(
    comm: &mut C,
    w1: &Tensor<T>,
    b1: &Tensor<T>,
    w2: &Tensor<T>,
    b2: &Tensor<T>,
    h: &Tensor<T>,
) -> Result<(Tensor<T>, MlpCache<T>)> {
    let u = linear(h, w1, Some(b1))?;
    let g = gelu(&u);
    let m = comm.tp_sum(linear(&g, w2, None)?)?;
    let y = add_bias(&m, b2)?;
    Ok((y, MlpCache { h: h.clone(), u, g }))
}

pub fn mlp_backward<T: Scalar, C: Comm<T> + ?Sized>(
    comm: &mut C,
    w1: &Tensor<T>,
    w2: &Tensor<T>,
    cache: &MlpCache<T>,
    dy: &Tensor<T>,
) -> Result<SublayerGrads<T>> {
    let (dg, w_out, b_out) = linear_backward(&cache.g, w2, dy)?;
    let du = gelu_backward(&cache.u, &dg)?;
    let (dh, w_in, b_in) = linear_backward(&cache.h, w1, &du)?;
    Ok(SublayerGrads {
        dh: comm.tp_sum(dh)?,
        w_in,
        b_in,
        w_out,
        b_out,
    })
}

#[derive(Debug)]
pub struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    attn: AttnCache<T>,
    ln2: LayerNormCache<T>,
    mlp: MlpCache<T>,
}

/// Pre-norm encoder block on `batch` stacked sequence segments.
///
/// `x` is `[batch·S_local × d]`. Weights may be tensor-parallel shards.
pub fn block_forward<T: Scalar, C: Comm<T> + ?Sized>(
    comm: &mut C,
    cfg: &ViTConfig,
    bp: &BlockParams<T>,
    x: &Tensor<T>,
    batch: usize,
) -> Result<(Tensor<T>, BlockCache<T>)> {
    let dh = cfg.head_dim();
    let spec = AttentionSpec::new(cfg.tokens(), bp.w_o.rows() / dh, dh)?;
    let (h1, ln1) = layer_norm(x, &bp.ln1_g, &bp.ln1_b, eps())?;
    let (o, attn) = attention_sublayer_forward(comm, &spec, batch, &bp.w_qkv, &bp.b_qkv, &bp.w_o, &bp.b_o, &h1)?;
    let x1 = x.add(&o)?;
    let (h2, ln2) = layer_norm(&x1, &bp.ln2_g, &bp.ln2_b, eps())?;
    let (m, mlp) = mlp_forward(comm, &bp.w1, &bp.b1, &bp.w2, &bp.b2, &h2)?;
    Ok((x1.add(&m)?, BlockCache { ln1, attn, ln2, mlp }))
}

/// Backward of [`block_forward`]; accumulates into `grads`, returns `dx`.
pub fn block_backward<T: Scalar, C: Comm<T> + ?Sized>(
    comm: &mut C,
    bp: &BlockParams<T>,
    cache: &BlockCache<T>,
    dy: &Tensor<T>,
    grads: &mut BlockParams<T>,
) -> Result<Tensor<T>> {
    let m = mlp_backward(comm, &bp.w1, &bp.w2, &cache.mlp, dy)?;
    grads.w1.add_assign(&m.w_in)?;
    grads.b1.add_assign(&m.b_in)?;
    grads.w2.add_assign(&m.w_out)?;
    grads.b2.add_assign(&m.b_out)?;
    let (dx1_norm, dg2, db2) = layer_norm_backward(&cache.ln2, &bp.ln2_g, &m.dh)?;
    grads.ln2_g.add_assign(&dg2)?;
    grads.ln2_b.add_assign(&db2)?;
    let dx1 = dy.add(&dx1_norm)?;

    let a = attention_sublayer_backward(comm, &bp.w_qkv, &bp.w_o, &cache.attn, &dx1)?;
    grads.w_qkv.add_assign(&a.w_in)?;
    grads.b_qkv.add_assign(&a.b_in)?;
    grads.w_o.add_assign(&a.w_out)?;
    grads.b_o.add_assign(&a.b_out)?;
    let (dx_norm, dg1, db1) = layer_norm_backward(&cache.ln1, &bp.ln1_g, &a.dh)?;
    grads.ln1_g.add_assign(&dg1)?;
    grads.ln1_b.add_assign(&db1)?;
    dx1.add(&dx_norm)
}

#[derive(Debug)]
pub struct HeadCache<T> {
    ln: LayerNormCache<T>,
    h: Tensor<T>,
}

/// Final norm and per-token linear head: `[n × d]` to `[n × token_out]`.
pub fn head_forward<T: Scalar>(hp: &HeadParams<T>, x: &Tensor<T>) -> Result<(Tensor<T>, HeadCache<T>)> {
    let (h, ln) = layer_norm(x, &hp.ln_g, &hp.ln_b, eps())?;
    let y = linear(&h, &hp.w, Some(&hp.b))?;
    Ok((y, HeadCache { ln, h }))
}

pub fn head_backward<T: Scalar>(
    hp: &HeadParams<T>,
    cache: &HeadCache<T>,
    dy: &Tensor<T>,
    grads: &mut HeadParams<T>,
) -> Result<Tensor<T>> {
    let (dh, dw, db) = linear_backward(&cache.h, &hp.w, dy)?;
    grads.w.add_assign(&dw)?;
    grads.b.add_assign(&db)?;
    let (dx, dg, dbn) = layer_norm_backward(&cache.ln, &hp.ln_g, &dh)?;
    grads.ln_g.add_assign(&dg)?;
    grads.ln_b.add_assign(&dbn)?;
    Ok(dx)
}

/// Encoder and head on one token sequence `[S × d]`, unpatchified to a field.
pub fn vit_forward<T: Scalar>(cfg: &ViTConfig, params: &ViTParams<T>, tokens: &Tensor<T>) -> Result<Tensor<T>> {
    tokens.expect_shape(&[super::seq_len(cfg)?, cfg.dim], "tokens")?;
    let mut comm = LocalComm::default();
    let mut x = tokens.clone();
    for bp in &params.blocks {
        x = block_forward(&mut comm, cfg, bp, &x, 1)?.0;
    }
    let (y, _) = head_forward(&params.head, &x)?;
    unpatchify(cfg, &y)
}

/// Mean squared error over every pixel.
pub fn vit_loss<T: Scalar>(prediction: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if prediction.shape() != target.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            prediction.shape(),
            target.shape()
        )));
    }
    let (loss, _) = mse(prediction, target)?;
    prediction.check_finite("prediction")?;
    Ok(loss)
}

/// Token-space targets for tokens `range` of every sample, sample-major.
pub(crate) fn target_tokens<T: Scalar>(
    cfg: &ViTConfig,
    targets: &[&Tensor<T>],
    range: std::ops::Range<usize>,
) -> Result<Tensor<T>> {
    let parts = targets
        .iter()
        .map(|t| patchify(cfg, t, range.clone()))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_rows(&parts)
}

/// Single-rank loss and full gradient over a batch.
pub fn local_forward_backward<T: Scalar>(
    cfg: &ViTConfig,
    params: &ViTParams<T>,
    kernel: AttentionKernel,
    inputs: &[&Tensor<T>],
    targets: &[&Tensor<T>],
) -> Result<(T, ViTParams<T>)> {
    if inputs.len() != targets.len() {
        return Err(Error::shape("inputs and targets differ in count"));
    }
    let s = super::seq_len(cfg)?;
    let batch = inputs.len();
    let mut comm = LocalComm { kernel };
    let mut grads = params.zeros_like();
    let (mut x, ecache) = embed_forward(cfg, &params.embed, inputs, 0..s)?;
    let mut caches = Vec::with_capacity(params.blocks.len());
    for bp in &params.blocks {
        let (y, c) = block_forward(&mut comm, cfg, bp, &x, batch)?;
        caches.push(c);
        x = y;
    }
    let (y, hcache) = head_forward(&params.head, &x)?;
    let (loss, dy) = mse(&y, &target_tokens(cfg, targets, 0..s)?)?;
    let mut dx = head_backward(&params.head, &hcache, &dy, &mut grads.head)?;
    for ((bp, c), g) in params.blocks.iter().zip(&caches).zip(&mut grads.blocks).rev() {
        dx = block_backward(&mut comm, bp, c, &dx, g)?;
    }
    embed_backward(&params.embed, &ecache, &dx, &mut grads.embed)?;
    Ok((loss, grads))
}
