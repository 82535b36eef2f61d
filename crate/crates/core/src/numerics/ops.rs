//! Dense kernels with hand-written backward passes.
//!
//! Every function here treats its inputs as matrices over the last extent and
//! evaluates reductions in a fixed left-to-right order, so repeated calls are
//! bitwise reproducible.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner extents differ: [{m}x{k}] · [{k2}x{n}]"
        )));
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul_nt inner extents differ: [{m}x{k}] · [{n}x{k2}]ᵀ"
        )));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            out[i * n + j] = dot(arow, b.row(j));
        }
    }
    Tensor::new(&[m, n], out)
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul_tn inner extents differ: [{k}x{m}]ᵀ · [{k2}x{n}]"
        )));
    }
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(&[n, m], out).expect("transpose keeps numel")
}

/// Row-wise softmax, stabilised by subtracting the row maximum.
pub fn row_softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.check_finite("row_softmax input")?;
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Broadcast-add a bias vector to every row.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if bias.numel() != x.cols() {
        return Err(Error::shape(format!(
            "bias of length {} for rows of width {}",
            bias.numel(),
            x.cols()
        )));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (v, &b) in out.row_mut(r).iter_mut().zip(bias.data()) {
            *v = *v + b;
        }
    }
    Ok(out)
}

/// Column sums: the gradient of a broadcast bias.
pub fn col_sum<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.cols();
    let mut out = vec![T::zero(); c];
    for r in 0..x.rows() {
        for (o, &v) in out.iter_mut().zip(x.row(r)) {
            *o = *o + v;
        }
    }
    Tensor::new(&[c], out).expect("non-empty")
}

/// Affine map `x·w + b`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let y = matmul(x, w)?;
    match b {
        Some(b) => add_bias(&y, b),
        None => Ok(y),
    }
}

/// Gradients of `linear`: returns `(dx, dw, db)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let dx = matmul_nt(dy, w)?;
    let dw = matmul_tn(x, dy)?;
    Ok((dx, dw, col_sum(dy)))
}

/// Saved state of a layer-norm forward.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Tensor<T>,
    rstd: Vec<T>,
}

/// Per-row normalisation followed by the affine `gamma * xhat + beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = x.cols();
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::shape(format!(
            "layer_norm affine params must have length {d}"
        )));
    }
    let n = T::of(d as f64);
    let mut xhat = x.clone();
    let mut y = x.clone();
    let mut rstd = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = row
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            / n;
        let rs = (var + eps).sqrt().recip();
        rstd.push(rs);
        let xr = xhat.row_mut(r);
        for (h, &v) in xr.iter_mut().zip(row) {
            *h = (v - mean) * rs;
        }
        let yr = y.row_mut(r);
        for (k, o) in yr.iter_mut().enumerate() {
            *o = gamma.data()[k] * xhat.data()[r * d + k] + beta.data()[k];
        }
    }
    Ok((y, LayerNormCache { xhat, rstd }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if dy.shape() != cache.xhat.shape() {
        return Err(Error::StaleState(format!(
            "layer_norm backward: dy {:?} vs saved {:?}",
            dy.shape(),
            cache.xhat.shape()
        )));
    }
    let d = dy.cols();
    let n = T::of(d as f64);
    let mut dx = dy.clone();
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..dy.rows() {
        let g = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for k in 0..d {
            dgamma[k] = dgamma[k] + g[k] * xh[k];
            dbeta[k] = dbeta[k] + g[k];
            dxhat[k] = g[k] * gamma.data()[k];
            mean_dxhat = mean_dxhat + dxhat[k];
            mean_dxhat_xhat = mean_dxhat_xhat + dxhat[k] * xh[k];
        }
        mean_dxhat = mean_dxhat / n;
        mean_dxhat_xhat = mean_dxhat_xhat / n;
        let rs = cache.rstd[r];
        for (k, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = rs * (dxhat[k] - mean_dxhat - xh[k] * mean_dxhat_xhat);
        }
    }
    Ok((
        dx,
        Tensor::new(&[d], dgamma)?,
        Tensor::new(&[d], dbeta)?,
    ))
}

const GELU_C: f64 = 0.044_715;

fn gelu_k<T: Scalar>() -> T {
    T::of((2.0 / std::f64::consts::PI).sqrt())
}

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let k = gelu_k::<T>();
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    x.map(|v| half * v * (T::one() + (k * (v + c * v * v * v)).tanh()))
}

pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let k = gelu_k::<T>();
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    let three = T::of(3.0);
    x.zip_map(dy, |v, g| {
        let t = (k * (v + c * v * v * v)).tanh();
        let dt = (T::one() - t * t) * k * (T::one() + three * c * v * v);
        g * (half * (T::one() + t) + half * v * dt)
    })
}

/// Mean squared error between equally shaped tensors and its gradient w.r.t. `pred`.
pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let diff = pred.sub(target)?;
    let n = T::of(diff.numel() as f64);
    let loss = diff.data().iter().fold(T::zero(), |a, &v| a + v * v) / n;
    let two_over_n = T::of(2.0) / n;
    Ok((loss, diff.scale(two_over_n)))
}
