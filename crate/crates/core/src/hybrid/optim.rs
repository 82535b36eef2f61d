use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::collectives::{GroupKind, RankContext};
use crate::error::{Error, Result};
use crate::numerics::{flatten, unflatten_into, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}

fn beta2() -> f64 {
    0.999
}

fn adam_eps() -> f64 {
    1e-8
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Sgd { lr: 0.05 }
    }
}

/// Moments for the elements an optimizer instance updates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl Optimizer {
    pub fn lr(&self) -> f64 {
        match *self {
            Optimizer::Sgd { lr } | Optimizer::Adam { lr, .. } => lr,
        }
    }

    /// One in-place update of `params` from `grads`.
    pub fn apply<T: Scalar>(&self, params: &mut [T], grads: &[T], state: &mut OptState<T>) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        state.step += 1;
        match *self {
            Optimizer::Sgd { lr } => {
                let lr = T::of(lr);
                for (p, &g) in params.iter_mut().zip(grads) {
                    *p = *p - lr * g;
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps } => {
                if state.m.len() != params.len() {
                    state.m = vec![T::zero(); params.len()];
                    state.v = vec![T::zero(); params.len()];
                }
                let t = state.step as i32;
                let c1 = T::of(1.0 - beta1.powi(t));
                let c2 = T::of(1.0 - beta2.powi(t));
                let (b1, b2) = (T::of(beta1), T::of(beta2));
                let (lr, eps) = (T::of(lr), T::of(eps));
                for i in 0..params.len() {
                    let g = grads[i];
                    state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
                    state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
                    let mhat = state.m[i] / c1;
                    let vhat = state.v[i] / c2;
                    params[i] = params[i] - lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }

    /// Update a list of tensors as one flat vector.
    pub fn apply_tensors<T: Scalar>(
        &self,
        params: &mut [&mut Tensor<T>],
        grads: &[&Tensor<T>],
        state: &mut OptState<T>,
    ) -> Result<()> {
        let mut flat = flatten(&params.iter().map(|p| &**p).collect::<Vec<_>>());
        let g = flatten(grads);
        self.apply(flat.data_mut(), g.data(), state)?;
        unflatten_into(&flat, params)
    }
}

/// One dp rank's share of the flat parameter vector and its moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardedOptimizerState<T> {
    total: usize,
    degree: usize,
    rank: usize,
    pub inner: OptState<T>,
}

impl<T: Scalar> ShardedOptimizerState<T> {
    pub fn new(total: usize, degree: usize, rank: usize) -> Result<Self> {
        if degree == 0 || rank >= degree {
            return Err(Error::Partition(format!("rank {rank} of {degree} dp ranks")));
        }
        Ok(Self {
            total,
            degree,
            rank,
            inner: OptState::default(),
        })
    }

    /// Elements per rank after padding the vector to a multiple of the degree.
    pub fn chunk(&self) -> usize {
        self.total.div_ceil(self.degree)
    }

    /// This rank's slice of the unpadded vector (possibly empty).
    pub fn range(&self) -> Range<usize> {
        Self::slice(self.total, self.degree, self.rank)
    }

    fn slice(total: usize, degree: usize, rank: usize) -> Range<usize> {
        let c = total.div_ceil(degree);
        let start = (rank * c).min(total);
        start..((rank + 1) * c).min(total)
    }

    /// Every rank's slice; together they tile `0..total` in order.
    pub fn partition(total: usize, degree: usize) -> Vec<Range<usize>> {
        (0..degree).map(|r| Self::slice(total, degree, r)).collect()
    }

    fn check(&self, total: usize, degree: usize, rank: usize) -> Result<()> {
        if self.total != total || self.degree != degree || self.rank != rank {
            return Err(Error::Partition(format!(
                "state covers slice {}/{} of {} elements, step has rank {rank}/{degree} of {total}",
                self.rank, self.degree, self.total
            )));
        }
        Ok(())
    }
}

/// ZeRO step: reduce-scatter gradients, update the local slice, all-gather
/// parameters. Gradients are averaged over the group first.
pub fn zero_sharded_step<T: Scalar>(
    ctx: &mut RankContext<'_>,
    group: GroupKind,
    optimizer: &Optimizer,
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut ShardedOptimizerState<T>,
) -> Result<()> {
    let total: usize = params.iter().map(|p| p.numel()).sum();
    let gtotal: usize = grads.iter().map(|g| g.numel()).sum();
    if total != gtotal {
        return Err(Error::Partition(format!("{total} parameters but {gtotal} gradients")));
    }
    let degree = ctx.group_size(group);
    let me = ctx.group_rank(group);
    state.check(total, degree, me)?;
    if total == 0 {
        return Ok(());
    }
    if degree == 1 {
        return optimizer.apply_tensors(params, grads, &mut state.inner);
    }
    let chunk = state.chunk();
    let mut g = flatten(grads).into_data();
    g.resize(chunk * degree, T::zero());
    let pieces = g
        .chunks(chunk)
        .map(|c| Tensor::new(&[chunk, 1], c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let mine = ctx.reduce_scatter_sum(group, pieces)?;
    let inv = T::one() / T::of(degree as f64);
    let mut p = flatten(&params.iter().map(|p| &**p).collect::<Vec<_>>()).into_data();
    p.resize(chunk * degree, T::zero());
    let mut slice = p[me * chunk..(me + 1) * chunk].to_vec();
    let valid = state.range().len();
    let gmine: Vec<T> = mine.data()[..valid].iter().map(|&x| x * inv).collect();
    optimizer.apply(&mut slice[..valid], &gmine, &mut state.inner)?;
    let gathered = ctx.all_gather(group, &Tensor::new(&[chunk, 1], slice)?)?;
    let mut full: Vec<T> = gathered.iter().flat_map(|t| t.data().iter().copied()).collect();
    full.truncate(total);
    unflatten_into(&Tensor::new(&[total, 1], full)?, params)
}
