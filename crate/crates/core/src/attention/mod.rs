//! Multi-head attention: a dense reference with analytic backward and a tiled
//! online-softmax variant that never materialises the full score matrix.
//!
//! Activations are `[tokens × heads·head_dim]` with head `h` occupying columns
//! `h·head_dim .. (h+1)·head_dim`. Keys and values always span the whole
//! sequence; queries may be any contiguous block of it.

mod dense;
pub mod meter;
mod tiled;

use serde::{Deserialize, Serialize};

pub use dense::{mha_backward, mha_forward, DenseSaved};
pub use tiled::{tiled_attention_backward, tiled_attention_forward};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub seq_len: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionSpec {
    pub fn new(seq_len: usize, heads: usize, head_dim: usize) -> Result<Self> {
        if seq_len == 0 || heads == 0 || head_dim == 0 {
            return Err(Error::shape(format!(
                "attention needs S, H, d_h >= 1 (got {seq_len}, {heads}, {head_dim})"
            )));
        }
        Ok(Self {
            seq_len,
            heads,
            head_dim,
        })
    }

    /// Model width `d = H · d_h`.
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }

    pub(crate) fn check_inputs<T: Scalar>(
        &self,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
    ) -> Result<()> {
        let d = self.width();
        if q.cols() != d {
            return Err(Error::shape(format!("Q width {} != {d}", q.cols())));
        }
        if q.rows() > self.seq_len {
            return Err(Error::shape(format!(
                "{} query rows exceed sequence length {}",
                q.rows(),
                self.seq_len
            )));
        }
        for (name, t) in [("K", k), ("V", v)] {
            if t.rows() != self.seq_len || t.cols() != d {
                return Err(Error::shape(format!(
                    "{name} is [{}x{}], expected [{}x{d}]",
                    t.rows(),
                    t.cols(),
                    self.seq_len
                )));
            }
        }
        Ok(())
    }
}

/// Query and key block sizes for the tiled kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSpec {
    pub block_q: usize,
    pub block_k: usize,
}

impl TileSpec {
    pub fn new(block_q: usize, block_k: usize) -> Self {
        Self { block_q, block_k }
    }

    pub fn square(block: usize) -> Self {
        Self::new(block, block)
    }

    pub fn validate(&self, spec: &AttentionSpec) -> Result<()> {
        let ok = |b: usize| (1..=spec.seq_len).contains(&b);
        if ok(self.block_q) && ok(self.block_k) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "tile {}x{} outside 1..={}",
                self.block_q, self.block_k, spec.seq_len
            )))
        }
    }
}

/// Which attention kernel a model layer runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttentionKernel {
    #[default]
    Naive,
    Tiled { block_q: usize, block_k: usize },
}

/// Saved state of either kernel, for its matching backward.
#[derive(Debug)]
pub enum AttentionSaved<T> {
    Dense(DenseSaved<T>),
    Tiled {
        spec: AttentionSpec,
        tiles: TileSpec,
        q: Tensor<T>,
        k: Tensor<T>,
        v: Tensor<T>,
        out: Tensor<T>,
        lse: Tensor<T>,
    },
}

impl AttentionKernel {
    fn tiles(self, spec: &AttentionSpec) -> Option<TileSpec> {
        match self {
            AttentionKernel::Naive => None,
            AttentionKernel::Tiled { block_q, block_k } => Some(TileSpec::new(
                block_q.min(spec.seq_len),
                block_k.min(spec.seq_len),
            )),
        }
    }

    pub fn forward<T: Scalar>(
        self,
        spec: &AttentionSpec,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
    ) -> Result<(Tensor<T>, AttentionSaved<T>)> {
        match self.tiles(spec) {
            None => {
                let (out, saved) = mha_forward(spec, q, k, v)?;
                Ok((out, AttentionSaved::Dense(saved)))
            }
            Some(tiles) => {
                let (out, lse) = tiled_attention_forward(spec, &tiles, q, k, v)?;
                Ok((
                    out.clone(),
                    AttentionSaved::Tiled {
                        spec: *spec,
                        tiles,
                        q: q.clone(),
                        k: k.clone(),
                        v: v.clone(),
                        out,
                        lse,
                    },
                ))
            }
        }
    }
}

impl<T: Scalar> AttentionSaved<T> {
    pub fn backward(&self, dout: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        match self {
            AttentionSaved::Dense(saved) => mha_backward(&saved.spec, saved, dout),
            AttentionSaved::Tiled {
                spec,
                tiles,
                q,
                k,
                v,
                out,
                lse,
            } => tiled_attention_backward(spec, tiles, lse, q, k, v, out, dout),
        }
    }
}

/// Run `kernel` independently on each of `batch` stacked sequences.
///
/// `q` holds `batch` equal query blocks; `k` and `v` hold `batch` full
/// sequences of `spec.seq_len` rows.
pub fn batched_forward<T: Scalar>(
    kernel: AttentionKernel,
    spec: &AttentionSpec,
    batch: usize,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<AttentionSaved<T>>)> {
    if batch == 0 || !q.rows().is_multiple_of(batch) || k.rows() != batch * spec.seq_len {
        return Err(Error::shape(format!(
            "batched attention: {} query rows / {} key rows do not split into {batch} sequences of {}",
            q.rows(),
            k.rows(),
            spec.seq_len
        )));
    }
    let sq = q.rows() / batch;
    let s = spec.seq_len;
    let mut outs = Vec::with_capacity(batch);
    let mut saved = Vec::with_capacity(batch);
    for b in 0..batch {
        let (o, sv) = kernel.forward(
            spec,
            &q.slice_rows(b * sq..(b + 1) * sq)?,
            &k.slice_rows(b * s..(b + 1) * s)?,
            &v.slice_rows(b * s..(b + 1) * s)?,
        )?;
        outs.push(o);
        saved.push(sv);
    }
    Ok((Tensor::concat_rows(&outs)?, saved))
}

/// Backward of [`batched_forward`].
pub fn batched_backward<T: Scalar>(
    saved: &[AttentionSaved<T>],
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let batch = saved.len();
    if batch == 0 || !dout.rows().is_multiple_of(batch) {
        return Err(Error::StaleState(format!(
            "dOut with {} rows for {batch} saved sequences",
            dout.rows()
        )));
    }
    let sq = dout.rows() / batch;
    let (mut dq, mut dk, mut dv) = (Vec::new(), Vec::new(), Vec::new());
    for (b, sv) in saved.iter().enumerate() {
        let (a, bk, c) = sv.backward(&dout.slice_rows(b * sq..(b + 1) * sq)?)?;
        dq.push(a);
        dk.push(bk);
        dv.push(c);
    }
    Ok((
        Tensor::concat_rows(&dq)?,
        Tensor::concat_rows(&dk)?,
        Tensor::concat_rows(&dv)?,
    ))
}
