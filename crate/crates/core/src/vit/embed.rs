use std::ops::Range;

use super::params::EmbedParams;
use super::{EmbedMode, ViTConfig};
use crate::error::{Error, Result};
use crate::numerics::ops::{add_bias, col_sum, matmul, matmul_nt, matmul_tn, softmax_in_place};
use crate::numerics::{Scalar, Tensor};

fn check_field<T: Scalar>(cfg: &ViTConfig, field: &Tensor<T>) -> Result<()> {
    field.expect_shape(&[cfg.channels, cfg.img_h, cfg.img_w], "field")
}

/// Pixels of channel `c`'s spatial patch `s`, row-major within the patch.
fn patch_pixels<T: Scalar>(cfg: &ViTConfig, field: &Tensor<T>, c: usize, s: usize, out: &mut Vec<T>) {
    let p = cfg.patch;
    let pw = cfg.img_w / p;
    let (py, px) = (s / pw, s % pw);
    let data = field.data();
    for y in 0..p {
        let base = c * cfg.img_h * cfg.img_w + (py * p + y) * cfg.img_w + px * p;
        out.extend_from_slice(&data[base..base + p]);
    }
}

/// `(channel, spatial patch)` behind each token index of the sequence.
/// Aggregated tokens carry no channel; `usize::MAX` marks that.
fn token_origin(cfg: &ViTConfig, t: usize) -> (usize, usize) {
    match cfg.embed {
        EmbedMode::MultiCh => (t / cfg.patches(), t % cfg.patches()),
        EmbedMode::AggCh => (usize::MAX, t),
    }
}

/// Field to per-token pixel rows `[S × token_out]` for tokens in `range`.
///
/// Multi-channel tokens hold one channel's patch; aggregated tokens hold every
/// channel's patch, channel-major.
pub fn patchify<T: Scalar>(cfg: &ViTConfig, field: &Tensor<T>, range: Range<usize>) -> Result<Tensor<T>> {
    check_field(cfg, field)?;
    let s_total = super::seq_len(cfg)?;
    if range.is_empty() || range.end > s_total {
        return Err(Error::shape(format!("token range {range:?} outside 0..{s_total}")));
    }
    let mut data = Vec::with_capacity(range.len() * cfg.token_out());
    for t in range.clone() {
        match token_origin(cfg, t) {
            (usize::MAX, s) => {
                for c in 0..cfg.channels {
                    patch_pixels(cfg, field, c, s, &mut data);
                }
            }
            (c, s) => patch_pixels(cfg, field, c, s, &mut data),
        }
    }
    Tensor::new(&[range.len(), cfg.token_out()], data)
}

/// Inverse of [`patchify`] over the whole sequence.
pub fn unpatchify<T: Scalar>(cfg: &ViTConfig, tokens: &Tensor<T>) -> Result<Tensor<T>> {
    let s_total = super::seq_len(cfg)?;
    tokens.expect_shape(&[s_total, cfg.token_out()], "prediction tokens")?;
    let p = cfg.patch;
    let pw = cfg.img_w / p;
    let mut field = Tensor::zeros(&[cfg.channels, cfg.img_h, cfg.img_w]);
    let (h, w) = (cfg.img_h, cfg.img_w);
    let out = field.data_mut();
    for t in 0..s_total {
        let row = tokens.row(t);
        let (chans, s) = match token_origin(cfg, t) {
            (usize::MAX, s) => (0..cfg.channels, s),
            (c, s) => (c..c + 1, s),
        };
        let (py, px) = (s / pw, s % pw);
        for (k, c) in chans.enumerate() {
            for y in 0..p {
                let base = c * h * w + (py * p + y) * w + px * p;
                let src = &row[k * p * p + y * p..k * p * p + (y + 1) * p];
                out[base..base + p].copy_from_slice(src);
            }
        }
    }
    Ok(field)
}

#[derive(Debug)]
enum EmbedKind<T> {
    Multi {
        patches: Tensor<T>,
    },
    Agg {
        patches: Vec<Tensor<T>>,
        e: Vec<Tensor<T>>,
        k: Vec<Tensor<T>>,
        v: Vec<Tensor<T>>,
        attn: Tensor<T>,
    },
}

/// Saved state of an embedding forward.
#[derive(Debug)]
pub struct EmbedCache<T> {
    /// `(channel, spatial patch)` per output row.
    origin: Vec<(usize, usize)>,
    kind: EmbedKind<T>,
}

fn agg_scale<T: Scalar>(d: usize) -> T {
    T::of(1.0 / (d as f64).sqrt())
}

/// Embed tokens `range` of every sample in `fields`; rows are sample-major.
pub fn embed_forward<T: Scalar>(
    cfg: &ViTConfig,
    params: &EmbedParams<T>,
    fields: &[&Tensor<T>],
    range: Range<usize>,
) -> Result<(Tensor<T>, EmbedCache<T>)> {
    embed_with_mode(cfg, cfg.embed, params, fields, range)
}

fn embed_with_mode<T: Scalar>(
    cfg: &ViTConfig,
    mode: EmbedMode,
    params: &EmbedParams<T>,
    fields: &[&Tensor<T>],
    range: Range<usize>,
) -> Result<(Tensor<T>, EmbedCache<T>)> {
    let cfg = &ViTConfig { embed: mode, ..*cfg };
    let s_total = super::seq_len(cfg)?;
    if fields.is_empty() || range.is_empty() || range.end > s_total {
        return Err(Error::shape(format!(
            "cannot embed tokens {range:?} of {} samples with {s_total} tokens",
            fields.len()
        )));
    }
    for f in fields {
        check_field(cfg, f)?;
    }
    let d = cfg.dim;
    let p2 = cfg.patch * cfg.patch;
    let origin: Vec<(usize, usize)> = fields
        .iter()
        .flat_map(|_| range.clone().map(|t| token_origin(cfg, t)))
        .collect();
    let n = origin.len();
    let add_rows = |x: &mut Tensor<T>, table: &Tensor<T>, idx: &dyn Fn(usize) -> usize| {
        for r in 0..n {
            let src = table.row(idx(r)).to_vec();
            for (o, s) in x.row_mut(r).iter_mut().zip(src) {
                *o = *o + s;
            }
        }
    };
    match mode {
        EmbedMode::MultiCh => {
            let mut buf = Vec::with_capacity(n * p2);
            for (i, &(c, s)) in origin.iter().enumerate() {
                patch_pixels(cfg, fields[i / range.len()], c, s, &mut buf);
            }
            let patches = Tensor::new(&[n, p2], buf)?;
            let mut x = add_bias(&matmul(&patches, &params.w_patch)?, &params.b_patch)?;
            add_rows(&mut x, &params.chan, &|r| origin[r].0);
            add_rows(&mut x, &params.pos, &|r| origin[r].1);
            Ok((x, EmbedCache { origin, kind: EmbedKind::Multi { patches } }))
        }
        EmbedMode::AggCh => {
            let agg = params
                .agg
                .as_ref()
                .ok_or_else(|| Error::shape("aggregated embedding needs aggregator parameters"))?;
            let scale = agg_scale::<T>(d);
            let (mut patches, mut e, mut k, mut v) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for c in 0..cfg.channels {
                let mut buf = Vec::with_capacity(n * p2);
                for (i, &(_, s)) in origin.iter().enumerate() {
                    patch_pixels(cfg, fields[i / range.len()], c, s, &mut buf);
                }
                let pc = Tensor::new(&[n, p2], buf)?;
                let mut ec = add_bias(&matmul(&pc, &params.w_patch)?, &params.b_patch)?;
                add_rows(&mut ec, &params.chan, &|_| c);
                k.push(matmul(&ec, &agg.w_k)?);
                v.push(matmul(&ec, &agg.w_v)?);
                patches.push(pc);
                e.push(ec);
            }
            let mut attn = Tensor::zeros(&[n, cfg.channels]);
            for r in 0..n {
                let row = attn.row_mut(r);
                for c in 0..cfg.channels {
                    row[c] = crate::numerics::ops::dot(agg.query.data(), k[c].row(r)) * scale;
                }
                softmax_in_place(row);
            }
            let mut x = Tensor::zeros(&[n, d]);
            for r in 0..n {
                for c in 0..cfg.channels {
                    let a = attn.get2(r, c);
                    let src = v[c].row(r).to_vec();
                    for (o, s) in x.row_mut(r).iter_mut().zip(src) {
                        *o = *o + a * s;
                    }
                }
            }
            add_rows(&mut x, &params.pos, &|r| origin[r].1);
            Ok((
                x,
                EmbedCache {
                    origin,
                    kind: EmbedKind::Agg { patches, e, k, v, attn },
                },
            ))
        }
    }
}

fn scatter_rows<T: Scalar>(table: &mut Tensor<T>, dx: &Tensor<T>, idx: impl Fn(usize) -> usize) {
    for r in 0..dx.rows() {
        let i = idx(r);
        let src = dx.row(r);
        for (o, &s) in table.row_mut(i).iter_mut().zip(src) {
            *o = *o + s;
        }
    }
}

/// Accumulate embedding gradients for upstream gradient `dx` into `grads`.
pub fn embed_backward<T: Scalar>(
    params: &EmbedParams<T>,
    cache: &EmbedCache<T>,
    dx: &Tensor<T>,
    grads: &mut EmbedParams<T>,
) -> Result<()> {
    if dx.rows() != cache.origin.len() || dx.cols() != params.w_patch.cols() {
        return Err(Error::StaleState(format!(
            "embedding backward: dX {:?} for {} saved rows",
            dx.shape(),
            cache.origin.len()
        )));
    }
    let origin = &cache.origin;
    scatter_rows(&mut grads.pos, dx, |r| origin[r].1);
    match &cache.kind {
        EmbedKind::Multi { patches } => {
            grads.w_patch.add_assign(&matmul_tn(patches, dx)?)?;
            grads.b_patch.add_assign(&col_sum(dx))?;
            scatter_rows(&mut grads.chan, dx, |r| origin[r].0);
        }
        EmbedKind::Agg { patches, e, k, v, attn } => {
            let agg = params.agg.as_ref().ok_or_else(|| Error::StaleState("aggregator vanished".into()))?;
            let gagg = grads
                .agg
                .as_mut()
                .ok_or_else(|| Error::StaleState("aggregator gradient missing".into()))?;
            let d = dx.cols();
            let scale = agg_scale::<T>(d);
            let channels = e.len();
            let n = dx.rows();
            let mut da = Tensor::zeros(&[n, channels]);
            for c in 0..channels {
                for r in 0..n {
                    da.data_mut()[r * channels + c] = crate::numerics::ops::dot(dx.row(r), v[c].row(r));
                }
            }
            let mut ds = Tensor::zeros(&[n, channels]);
            for r in 0..n {
                let a = attn.row(r);
                let g = da.row(r);
                let inner = a.iter().zip(g).fold(T::zero(), |s, (&x, &y)| s + x * y);
                for c in 0..channels {
                    ds.data_mut()[r * channels + c] = a[c] * (g[c] - inner);
                }
            }
            for c in 0..channels {
                let mut dv = dx.clone();
                let mut dk = Tensor::zeros(&[n, d]);
                for r in 0..n {
                    let a = attn.get2(r, c);
                    dv.row_mut(r).iter_mut().for_each(|x| *x = *x * a);
                    let s = ds.get2(r, c) * scale;
                    for (o, &qv) in dk.row_mut(r).iter_mut().zip(agg.query.data()) {
                        *o = s * qv;
                    }
                    for (o, &kv) in gagg.query.data_mut().iter_mut().zip(k[c].row(r)) {
                        *o = *o + s * kv;
                    }
                }
                gagg.w_v.add_assign(&matmul_tn(&e[c], &dv)?)?;
                gagg.w_k.add_assign(&matmul_tn(&e[c], &dk)?)?;
                let de = matmul_nt(&dv, &agg.w_v)?.add(&matmul_nt(&dk, &agg.w_k)?)?;
                grads.w_patch.add_assign(&matmul_tn(&patches[c], &de)?)?;
                let bsum = col_sum(&de);
                grads.b_patch.add_assign(&bsum)?;
                for (o, &s) in grads.chan.row_mut(c).iter_mut().zip(bsum.data()) {
                    *o = *o + s;
                }
            }
        }
    }
    Ok(())
}

/// Multi-channel embedding of one field: `[C·patches × d]`.
pub fn patch_embed_multi<T: Scalar>(cfg: &ViTConfig, params: &EmbedParams<T>, field: &Tensor<T>) -> Result<Tensor<T>> {
    let s = super::seq_len_for(cfg.img_h, cfg.img_w, cfg.patch, cfg.channels, EmbedMode::MultiCh)?;
    embed_with_mode(cfg, EmbedMode::MultiCh, params, &[field], 0..s).map(|(x, _)| x)
}

/// Channel-aggregated embedding of one field: `[patches × d]`.
pub fn patch_embed_agg<T: Scalar>(cfg: &ViTConfig, params: &EmbedParams<T>, field: &Tensor<T>) -> Result<Tensor<T>> {
    let s = super::seq_len_for(cfg.img_h, cfg.img_w, cfg.patch, cfg.channels, EmbedMode::AggCh)?;
    embed_with_mode(cfg, EmbedMode::AggCh, params, &[field], 0..s).map(|(x, _)| x)
}
