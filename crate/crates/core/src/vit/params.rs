use std::ops::Range;

use super::{EmbedMode, ViTConfig};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, SeededRng, Tensor};

/// Cross-attention aggregator over channels.
#[derive(Debug, Clone, PartialEq)]
pub struct AggParams<T> {
    pub query: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedParams<T> {
    /// Shared projection of one channel's patch, `[p² × d]`.
    pub w_patch: Tensor<T>,
    pub b_patch: Tensor<T>,
    /// Channel embeddings, `[C × d]`.
    pub chan: Tensor<T>,
    /// Spatial position embeddings, `[patches × d]`.
    pub pos: Tensor<T>,
    pub agg: Option<AggParams<T>>,
}

/// One encoder block. Under tensor parallelism the attention and MLP weights
/// hold only this rank's heads and hidden columns.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    /// `[d × 3·d_local]`, columns ordered q heads, k heads, v heads.
    pub w_qkv: Tensor<T>,
    pub b_qkv: Tensor<T>,
    /// `[d_local × d]`
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    pub ln_g: Tensor<T>,
    pub ln_b: Tensor<T>,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTParams<T> {
    pub embed: EmbedParams<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub head: HeadParams<T>,
}

struct Init {
    seed: u64,
    stream: u64,
}

impl Init {
    fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        self.stream += 1;
        SeededRng::new(self.seed, self.stream).normal_tensor(shape, std)
    }
}

fn ones<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::full(&[n], T::one())
}

fn zeros<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::zeros(&[n])
}

impl<T: Scalar> EmbedParams<T> {
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.w_patch, &self.b_patch, &self.chan, &self.pos];
        if let Some(a) = &self.agg {
            v.extend([&a.query, &a.w_k, &a.w_v]);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.w_patch, &mut self.b_patch, &mut self.chan, &mut self.pos];
        if let Some(a) = &mut self.agg {
            v.extend([&mut a.query, &mut a.w_k, &mut a.w_v]);
        }
        v
    }
}

impl<T: Scalar> BlockParams<T> {
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        vec![
            &self.ln1_g, &self.ln1_b, &self.w_qkv, &self.b_qkv, &self.w_o, &self.b_o,
            &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.ln1_g, &mut self.ln1_b, &mut self.w_qkv, &mut self.b_qkv, &mut self.w_o,
            &mut self.b_o, &mut self.ln2_g, &mut self.ln2_b, &mut self.w1, &mut self.b1,
            &mut self.w2, &mut self.b2,
        ]
    }

    const NAMES: [&'static str; 12] = [
        "ln1_g", "ln1_b", "w_qkv", "b_qkv", "w_o", "b_o", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
    ];
}

impl<T: Scalar> HeadParams<T> {
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        vec![&self.ln_g, &self.ln_b, &self.w, &self.b]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.ln_g, &mut self.ln_b, &mut self.w, &mut self.b]
    }
}

/// Columns `ranges` of `t`, concatenated; vectors stay vectors.
fn take_cols<T: Scalar>(t: &Tensor<T>, ranges: &[Range<usize>]) -> Result<Tensor<T>> {
    let parts = ranges
        .iter()
        .map(|r| t.slice_cols(r.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = Tensor::concat_cols(&parts)?;
    if t.shape().len() == 1 {
        let n = out.numel();
        out.reshape(&[n])
    } else {
        Ok(out)
    }
}

fn join_cols<T: Scalar>(parts: &[&Tensor<T>], groups: usize) -> Result<Tensor<T>> {
    // Each part holds `groups` column blocks; interleave them back group by group.
    let mut blocks = Vec::new();
    for g in 0..groups {
        for p in parts {
            let w = p.cols() / groups;
            blocks.push(p.slice_cols(g * w..(g + 1) * w)?);
        }
    }
    let out = Tensor::concat_cols(&blocks)?;
    if parts[0].shape().len() == 1 {
        let n = out.numel();
        out.reshape(&[n])
    } else {
        Ok(out)
    }
}

impl<T: Scalar> ViTParams<T> {
    /// Seeded initialisation. Every tensor draws from its own stream, so the
    /// result depends only on `(cfg, seed)`.
    pub fn init(cfg: &ViTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let p2 = cfg.patch * cfg.patch;
        let hid = cfg.hidden();
        let mut g = Init { seed, stream: 0 };
        let agg = match cfg.embed {
            EmbedMode::AggCh => Some(AggParams {
                query: g.normal(&[d], 1.0),
                w_k: g.normal(&[d, d], 1.0 / (d as f64).sqrt()),
                w_v: Tensor::eye(d),
            }),
            EmbedMode::MultiCh => None,
        };
        let embed = EmbedParams {
            w_patch: g.normal(&[p2, d], 1.0 / (p2 as f64).sqrt()),
            b_patch: zeros(d),
            chan: g.normal(&[cfg.channels, d], 0.1),
            pos: g.normal(&[cfg.patches(), d], 0.1),
            agg,
        };
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams {
                ln1_g: ones(d),
                ln1_b: zeros(d),
                w_qkv: g.normal(&[d, 3 * d], 1.0 / (d as f64).sqrt()),
                b_qkv: zeros(3 * d),
                w_o: g.normal(&[d, d], 1.0 / (d as f64).sqrt()),
                b_o: zeros(d),
                ln2_g: ones(d),
                ln2_b: zeros(d),
                w1: g.normal(&[d, hid], 1.0 / (d as f64).sqrt()),
                b1: zeros(hid),
                w2: g.normal(&[hid, d], 1.0 / (hid as f64).sqrt()),
                b2: zeros(d),
            })
            .collect();
        let out = cfg.token_out();
        let head = HeadParams {
            ln_g: ones(d),
            ln_b: zeros(d),
            w: g.normal(&[d, out], 1.0 / (d as f64).sqrt()),
            b: zeros(out),
        };
        Ok(Self { embed, blocks, head })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    /// Every tensor in a fixed order: embedding, blocks, head.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = self.embed.tensors();
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.extend(self.head.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.embed.tensors_mut();
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.extend(self.head.tensors_mut());
        v
    }

    /// Tensors owned by one pipeline stage.
    pub fn stage_tensors_mut(&mut self, layers: Range<usize>, first: bool, last: bool) -> Vec<&mut Tensor<T>> {
        let mut v = Vec::new();
        if first {
            v.extend(self.embed.tensors_mut());
        }
        for b in &mut self.blocks[layers] {
            v.extend(b.tensors_mut());
        }
        if last {
            v.extend(self.head.tensors_mut());
        }
        v
    }

    pub fn stage_tensors(&self, layers: Range<usize>, first: bool, last: bool) -> Vec<&Tensor<T>> {
        let mut v = Vec::new();
        if first {
            v.extend(self.embed.tensors());
        }
        for b in &self.blocks[layers] {
            v.extend(b.tensors());
        }
        if last {
            v.extend(self.head.tensors());
        }
        v
    }

    /// Names matching [`tensors`](Self::tensors), used as checkpoint keys.
    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["w_patch", "b_patch", "chan", "pos"]
            .iter()
            .map(|n| format!("embed.{n}"))
            .collect();
        if self.embed.agg.is_some() {
            v.extend(["query", "w_k", "w_v"].iter().map(|n| format!("embed.agg.{n}")));
        }
        for l in 0..self.blocks.len() {
            v.extend(BlockParams::<T>::NAMES.iter().map(|n| format!("block{l}.{n}")));
        }
        v.extend(["ln_g", "ln_b", "w", "b"].iter().map(|n| format!("head.{n}")));
        v
    }

    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        let (a, b) = (self.tensors(), other.tensors());
        if a.len() != b.len() {
            return Err(Error::shape("parameter sets differ in structure"));
        }
        a.iter()
            .zip(&b)
            .try_fold(0.0f64, |m, (x, y)| Ok(m.max(x.max_abs_diff(y)?)))
    }

    pub fn cast<U: Scalar>(&self) -> ViTParams<U> {
        let mut out = ViTParams::<U> {
            embed: EmbedParams {
                w_patch: self.embed.w_patch.cast(),
                b_patch: self.embed.b_patch.cast(),
                chan: self.embed.chan.cast(),
                pos: self.embed.pos.cast(),
                agg: self.embed.agg.as_ref().map(|a| AggParams {
                    query: a.query.cast(),
                    w_k: a.w_k.cast(),
                    w_v: a.w_v.cast(),
                }),
            },
            blocks: Vec::new(),
            head: HeadParams {
                ln_g: self.head.ln_g.cast(),
                ln_b: self.head.ln_b.cast(),
                w: self.head.w.cast(),
                b: self.head.b.cast(),
            },
        };
        for b in &self.blocks {
            let t: Vec<Tensor<U>> = b.tensors().into_iter().map(|t| t.cast()).collect();
            let mut it = t.into_iter();
            let mut next = || it.next().expect("twelve tensors");
            out.blocks.push(BlockParams {
                ln1_g: next(),
                ln1_b: next(),
                w_qkv: next(),
                b_qkv: next(),
                w_o: next(),
                b_o: next(),
                ln2_g: next(),
                ln2_b: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            });
        }
        out
    }

    /// The slice of every block held by tensor-parallel rank `rank` of `tp`.
    pub fn tp_shard(&self, cfg: &ViTConfig, tp: usize, rank: usize) -> Result<Self> {
        if tp == 1 {
            return Ok(self.clone());
        }
        check_tp(cfg, tp)?;
        let d = cfg.dim;
        let dl = d / tp;
        let hl = cfg.hidden() / tp;
        let qkv: Vec<Range<usize>> = (0..3).map(|i| i * d + rank * dl..i * d + (rank + 1) * dl).collect();
        let mut out = self.clone();
        for (b, full) in out.blocks.iter_mut().zip(&self.blocks) {
            b.w_qkv = take_cols(&full.w_qkv, &qkv)?;
            b.b_qkv = take_cols(&full.b_qkv, &qkv)?;
            b.w_o = full.w_o.slice_rows(rank * dl..(rank + 1) * dl)?;
            b.w1 = take_cols(&full.w1, &[rank * hl..(rank + 1) * hl])?;
            b.b1 = take_cols(&full.b1, &[rank * hl..(rank + 1) * hl])?;
            b.w2 = full.w2.slice_rows(rank * hl..(rank + 1) * hl)?;
        }
        Ok(out)
    }

    /// Inverse of [`tp_shard`](Self::tp_shard); replicated tensors come from shard 0.
    pub fn tp_unshard(shards: &[Self]) -> Result<Self> {
        let first = shards.first().ok_or_else(|| Error::shape("no shards to join"))?;
        if shards.len() == 1 {
            return Ok(first.clone());
        }
        let mut out = first.clone();
        for (l, b) in out.blocks.iter_mut().enumerate() {
            let parts: Vec<&BlockParams<T>> = shards.iter().map(|s| &s.blocks[l]).collect();
            b.w_qkv = join_cols(&parts.iter().map(|p| &p.w_qkv).collect::<Vec<_>>(), 3)?;
            b.b_qkv = join_cols(&parts.iter().map(|p| &p.b_qkv).collect::<Vec<_>>(), 3)?;
            b.w_o = Tensor::concat_rows(&parts.iter().map(|p| p.w_o.clone()).collect::<Vec<_>>())?;
            b.w1 = join_cols(&parts.iter().map(|p| &p.w1).collect::<Vec<_>>(), 1)?;
            b.b1 = join_cols(&parts.iter().map(|p| &p.b1).collect::<Vec<_>>(), 1)?;
            b.w2 = Tensor::concat_rows(&parts.iter().map(|p| p.w2.clone()).collect::<Vec<_>>())?;
        }
        Ok(out)
    }
}

/// Tensor-parallel divisibility for a config.
pub(crate) fn check_tp(cfg: &ViTConfig, tp: usize) -> Result<()> {
    if tp == 0 || !cfg.heads.is_multiple_of(tp) {
        return Err(Error::HeadDivisibility {
            heads: cfg.heads,
            degree: tp,
        });
    }
    if !cfg.hidden().is_multiple_of(tp) || !cfg.dim.is_multiple_of(tp) {
        return Err(Error::Divisibility(format!(
            "width {} / hidden {} not divisible by tp degree {tp}",
            cfg.dim,
            cfg.hidden()
        )));
    }
    Ok(())
}
