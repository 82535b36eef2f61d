//! Flash-style attention: the score matrix is visited in `block_q × block_k`
//! tiles with a running max and normaliser per query row. The backward pass
//! recomputes each tile from Q, K and the saved row log-sum-exp.

use super::meter::Scratch;
use super::{AttentionSpec, TileSpec};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

fn blocks(len: usize, block: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..len.div_ceil(block)).map(move |b| (b * block, ((b + 1) * block).min(len)))
}

/// Returns the attention output and the per-(head, query row) log-sum-exp
/// of scaled scores, shaped `[heads × query rows]`.
pub fn tiled_attention_forward<T: Scalar>(
    spec: &AttentionSpec,
    tiles: &TileSpec,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    spec.check_inputs(q, k, v)?;
    tiles.validate(spec)?;
    let (sq, sk, d, dh) = (q.rows(), spec.seq_len, spec.width(), spec.head_dim);
    let bq = tiles.block_q.min(sq);
    let bk = tiles.block_k;
    let scale = T::of(spec.scale());
    let (qd, kd, vd) = (q.data(), k.data(), v.data());

    let mut out = Tensor::zeros(&[sq, d]);
    let mut lse = Tensor::zeros(&[spec.heads, sq]);
    for h in 0..spec.heads {
        let off = h * dh;
        let _scratch = Scratch::new(bq * bk + bq * dh + 2 * bq);
        let mut s = vec![T::zero(); bq * bk];
        let mut acc = vec![T::zero(); bq * dh];
        let mut m = vec![T::neg_infinity(); bq];
        let mut l = vec![T::zero(); bq];
        for (q0, q1) in blocks(sq, bq) {
            let nq = q1 - q0;
            acc[..nq * dh].fill(T::zero());
            m[..nq].fill(T::neg_infinity());
            l[..nq].fill(T::zero());
            for (k0, k1) in blocks(sk, bk) {
                let nk = k1 - k0;
                for i in 0..nq {
                    let qrow = &qd[(q0 + i) * d + off..(q0 + i) * d + off + dh];
                    let mut row_max = m[i];
                    for j in 0..nk {
                        let krow = &kd[(k0 + j) * d + off..(k0 + j) * d + off + dh];
                        let sc = qrow
                            .iter()
                            .zip(krow)
                            .fold(T::zero(), |a, (&x, &y)| a + x * y)
                            * scale;
                        s[i * bk + j] = sc;
                        row_max = row_max.max(sc);
                    }
                    let correction = (m[i] - row_max).exp();
                    let mut row_sum = T::zero();
                    for j in 0..nk {
                        let p = (s[i * bk + j] - row_max).exp();
                        s[i * bk + j] = p;
                        row_sum = row_sum + p;
                    }
                    l[i] = l[i] * correction + row_sum;
                    m[i] = row_max;
                    let arow = &mut acc[i * dh..(i + 1) * dh];
                    for a in arow.iter_mut() {
                        *a = *a * correction;
                    }
                    for j in 0..nk {
                        let p = s[i * bk + j];
                        let vrow = &vd[(k0 + j) * d + off..(k0 + j) * d + off + dh];
                        for (a, &vv) in arow.iter_mut().zip(vrow) {
                            *a = *a + p * vv;
                        }
                    }
                }
            }
            for i in 0..nq {
                let inv = l[i].recip();
                let orow = &mut out.data_mut()[(q0 + i) * d + off..(q0 + i) * d + off + dh];
                for (o, &a) in orow.iter_mut().zip(&acc[i * dh..(i + 1) * dh]) {
                    *o = a * inv;
                }
                lse.data_mut()[h * sq + q0 + i] = m[i] + l[i].ln();
            }
        }
    }
    out.check_finite("tiled_attention_forward")?;
    Ok((out, lse))
}

/// Gradients `(dQ, dK, dV)` by tile recomputation.
#[allow(clippy::too_many_arguments)]
pub fn tiled_attention_backward<T: Scalar>(
    spec: &AttentionSpec,
    tiles: &TileSpec,
    lse: &Tensor<T>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    out: &Tensor<T>,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    spec.check_inputs(q, k, v)?;
    tiles.validate(spec)?;
    let (sq, sk, d, dh) = (q.rows(), spec.seq_len, spec.width(), spec.head_dim);
    if lse.shape() != [spec.heads, sq] {
        return Err(Error::StaleState(format!(
            "log-sum-exp {:?} does not match [{}, {sq}]",
            lse.shape(),
            spec.heads
        )));
    }
    if out.shape() != q.shape() || dout.shape() != q.shape() {
        return Err(Error::StaleState(format!(
            "out {:?} / dOut {:?} do not match queries {:?}",
            out.shape(),
            dout.shape(),
            q.shape()
        )));
    }
    let bq = tiles.block_q.min(sq);
    let bk = tiles.block_k;
    let scale = T::of(spec.scale());
    let (qd, kd, vd, od, dod) = (q.data(), k.data(), v.data(), out.data(), dout.data());

    let mut dq = Tensor::zeros(&[sq, d]);
    let mut dk = Tensor::zeros(&[sk, d]);
    let mut dv = Tensor::zeros(&[sk, d]);
    for h in 0..spec.heads {
        let off = h * dh;
        let _scratch = Scratch::new(2 * bq * bk + 2 * bk * dh + bq);
        let mut p = vec![T::zero(); bq * bk];
        let mut ds = vec![T::zero(); bq * bk];
        let mut dk_acc = vec![T::zero(); bk * dh];
        let mut dv_acc = vec![T::zero(); bk * dh];
        let mut delta = vec![T::zero(); bq];
        for (k0, k1) in blocks(sk, bk) {
            let nk = k1 - k0;
            dk_acc[..nk * dh].fill(T::zero());
            dv_acc[..nk * dh].fill(T::zero());
            for (q0, q1) in blocks(sq, bq) {
                let nq = q1 - q0;
                for i in 0..nq {
                    let r = (q0 + i) * d + off;
                    delta[i] = dod[r..r + dh]
                        .iter()
                        .zip(&od[r..r + dh])
                        .fold(T::zero(), |a, (&x, &y)| a + x * y);
                }
                for i in 0..nq {
                    let qrow = &qd[(q0 + i) * d + off..(q0 + i) * d + off + dh];
                    let dorow = &dod[(q0 + i) * d + off..(q0 + i) * d + off + dh];
                    let row_lse = lse.data()[h * sq + q0 + i];
                    for j in 0..nk {
                        let krow = &kd[(k0 + j) * d + off..(k0 + j) * d + off + dh];
                        let vrow = &vd[(k0 + j) * d + off..(k0 + j) * d + off + dh];
                        let sc = qrow
                            .iter()
                            .zip(krow)
                            .fold(T::zero(), |a, (&x, &y)| a + x * y)
                            * scale;
                        let pij = (sc - row_lse).exp();
                        let dpij = dorow
                            .iter()
                            .zip(vrow)
                            .fold(T::zero(), |a, (&x, &y)| a + x * y);
                        p[i * bk + j] = pij;
                        ds[i * bk + j] = pij * (dpij - delta[i]);
                    }
                }
                for j in 0..nk {
                    let dvrow = &mut dv_acc[j * dh..(j + 1) * dh];
                    for i in 0..nq {
                        let pij = p[i * bk + j];
                        let dorow = &dod[(q0 + i) * d + off..(q0 + i) * d + off + dh];
                        for (a, &g) in dvrow.iter_mut().zip(dorow) {
                            *a = *a + pij * g;
                        }
                    }
                    let dkrow = &mut dk_acc[j * dh..(j + 1) * dh];
                    for i in 0..nq {
                        let dsij = ds[i * bk + j] * scale;
                        let qrow = &qd[(q0 + i) * d + off..(q0 + i) * d + off + dh];
                        for (a, &x) in dkrow.iter_mut().zip(qrow) {
                            *a = *a + dsij * x;
                        }
                    }
                }
                for i in 0..nq {
                    let dqrow = &mut dq.data_mut()[(q0 + i) * d + off..(q0 + i) * d + off + dh];
                    for j in 0..nk {
                        let dsij = ds[i * bk + j] * scale;
                        let krow = &kd[(k0 + j) * d + off..(k0 + j) * d + off + dh];
                        for (a, &x) in dqrow.iter_mut().zip(krow) {
                            *a = *a + dsij * x;
                        }
                    }
                }
            }
            for j in 0..nk {
                let r = (k0 + j) * d + off;
                dk.data_mut()[r..r + dh].copy_from_slice(&dk_acc[j * dh..(j + 1) * dh]);
                dv.data_mut()[r..r + dh].copy_from_slice(&dv_acc[j * dh..(j + 1) * dh]);
            }
        }
    }
    Ok((dq, dk, dv))
}
