use super::{Batch, ParallelLayout, RankComm};
use crate::collectives::{GroupKind, RankContext};
use crate::error::{Error, Result};
use crate::numerics::ops::mse;
use crate::numerics::{Scalar, Tensor};
use crate::vit::{
    block_backward, block_forward, embed_backward, embed_forward, head_backward, head_forward, target_tokens,
    ViTConfig, ViTParams,
};

const PIPE_TAG: &str = "pipeline";

fn layer_tag(l: usize) -> String {
    format!("layer{l}")
}

/// GPipe schedule for this rank's stage: every micro-batch forward, then
/// every micro-batch backward in reverse order. Activations and their
/// gradients move between adjacent stages by send/recv on the pp group.
///
/// `batch` is this dp replica's samples. Returns the mean micro-batch loss on
/// the last stage (`None` elsewhere) and gradients for the tensors this stage
/// owns; the rest stay zero. Gradients are not yet averaged over sp or dp.
pub fn pipeline_run<T: Scalar>(
    ctx: &mut RankContext<'_>,
    layout: &ParallelLayout,
    cfg: &ViTConfig,
    params: &ViTParams<T>,
    batch: &Batch<T>,
) -> Result<(Option<T>, ViTParams<T>)> {
    let stages = layout.stages(cfg.depth)?;
    if ctx.group_size(GroupKind::Pp) != stages.len() {
        return Err(Error::Stage(format!(
            "{} stages but the pp group has {} ranks",
            stages.len(),
            ctx.group_size(GroupKind::Pp)
        )));
    }
    let s = ctx.group_rank(GroupKind::Pp);
    let (first, last) = (s == 0, s + 1 == stages.len());
    let layers = stages[s].clone();
    let m = layout.micro_batches;
    if m == 0 || !batch.len().is_multiple_of(m) {
        return Err(Error::config(
            "batch-divisibility",
            format!("{} samples into {m} micro-batches", batch.len()),
        ));
    }
    let mb = batch.len() / m;
    let seq = cfg.tokens();
    let scale = T::one() / T::of(m as f64);

    let mut comm = RankComm::new(ctx, layout.strategy, layout.kernel);
    let range = comm.token_range(seq);
    let mut grads = params.zeros_like();
    let mut loss_sum = T::zero();
    let mut saved = Vec::with_capacity(m);

    for i in 0..m {
        let (inputs, targets) = batch.refs(i * mb..(i + 1) * mb);
        let (mut x, ecache) = if first {
            let (x, c) = embed_forward(cfg, &params.embed, &inputs, range.clone())?;
            (x, Some(c))
        } else {
            (comm.ctx.with_tag(PIPE_TAG, |c| c.recv::<T>(GroupKind::Pp, s - 1))?, None)
        };
        let mut caches = Vec::with_capacity(layers.len());
        for l in layers.clone() {
            comm.ctx.push_tag(layer_tag(l));
            let out = block_forward(&mut comm, cfg, &params.blocks[l], &x, mb);
            comm.ctx.pop_tag();
            let (y, c) = out?;
            caches.push(c);
            x = y;
        }
        let head = if last {
            let (y, hc) = head_forward(&params.head, &x)?;
            let (loss, dy) = mse(&y, &target_tokens(cfg, &targets, range.clone())?)?;
            loss_sum = loss_sum + loss * scale;
            Some((hc, dy.scale(scale)))
        } else {
            comm.ctx.with_tag(PIPE_TAG, |c| c.send(GroupKind::Pp, s + 1, &x))?;
            None
        };
        saved.push((ecache, caches, head));
    }

    for (ecache, caches, head) in saved.into_iter().rev() {
        let mut dx: Tensor<T> = match head {
            Some((hc, dy)) => head_backward(&params.head, &hc, &dy, &mut grads.head)?,
            None => comm.ctx.with_tag(PIPE_TAG, |c| c.recv::<T>(GroupKind::Pp, s + 1))?,
        };
        for (l, c) in layers.clone().zip(&caches).rev() {
            comm.ctx.push_tag(layer_tag(l));
            let out = block_backward(&mut comm, &params.blocks[l], c, &dx, &mut grads.blocks[l]);
            comm.ctx.pop_tag();
            dx = out?;
        }
        match ecache {
            Some(ec) => embed_backward(&params.embed, &ec, &dx, &mut grads.embed)?,
            None => comm.ctx.with_tag(PIPE_TAG, |c| c.send(GroupKind::Pp, s - 1, &dx))?,
        }
    }
    Ok((last.then_some(loss_sum), grads))
}
