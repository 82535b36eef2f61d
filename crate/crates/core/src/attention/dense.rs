use super::meter::Scratch;
use super::AttentionSpec;
use crate::error::{Error, Result};
use crate::numerics::ops::{matmul, matmul_nt, matmul_tn, softmax_in_place};
use crate::numerics::{Scalar, Tensor};

/// Inputs and per-head probability matrices kept for the backward pass.
#[derive(Debug)]
pub struct DenseSaved<T> {
    pub(crate) spec: AttentionSpec,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    probs: Vec<Tensor<T>>,
    _scratch: Scratch,
}

fn head_cols<T: Scalar>(x: &Tensor<T>, spec: &AttentionSpec, h: usize) -> Result<Tensor<T>> {
    x.slice_cols(h * spec.head_dim..(h + 1) * spec.head_dim)
}

fn write_head<T: Scalar>(dst: &mut Tensor<T>, spec: &AttentionSpec, h: usize, src: &Tensor<T>) {
    let d = spec.width();
    let dh = spec.head_dim;
    for r in 0..src.rows() {
        dst.data_mut()[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(src.row(r));
    }
}

/// Dense multi-head attention: `softmax(Q_h K_hᵀ · scale) V_h` per head.
pub fn mha_forward<T: Scalar>(
    spec: &AttentionSpec,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(Tensor<T>, DenseSaved<T>)> {
    spec.check_inputs(q, k, v)?;
    let sq = q.rows();
    let scale = T::of(spec.scale());
    let scratch = Scratch::new(spec.heads * sq * spec.seq_len);
    let mut out = Tensor::zeros(&[sq, spec.width()]);
    let mut probs = Vec::with_capacity(spec.heads);
    for h in 0..spec.heads {
        let qh = head_cols(q, spec, h)?;
        let kh = head_cols(k, spec, h)?;
        let vh = head_cols(v, spec, h)?;
        let mut p = matmul_nt(&qh, &kh)?.scale(scale);
        for r in 0..sq {
            softmax_in_place(p.row_mut(r));
        }
        write_head(&mut out, spec, h, &matmul(&p, &vh)?);
        probs.push(p);
    }
    out.check_finite("mha_forward")?;
    Ok((
        out,
        DenseSaved {
            spec: *spec,
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            probs,
            _scratch: scratch,
        },
    ))
}

/// Analytic gradients `(dQ, dK, dV)` of dense attention.
pub fn mha_backward<T: Scalar>(
    spec: &AttentionSpec,
    saved: &DenseSaved<T>,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if saved.spec != *spec {
        return Err(Error::StaleState(format!(
            "saved state is for {:?}, backward called with {spec:?}",
            saved.spec
        )));
    }
    if dout.rows() != saved.q.rows() || dout.cols() != spec.width() {
        return Err(Error::StaleState(format!(
            "dOut {:?} does not match saved queries {:?}",
            dout.shape(),
            saved.q.shape()
        )));
    }
    let sq = saved.q.rows();
    let scale = T::of(spec.scale());
    let mut dq = Tensor::zeros(&[sq, spec.width()]);
    let mut dk = Tensor::zeros(&[spec.seq_len, spec.width()]);
    let mut dv = Tensor::zeros(&[spec.seq_len, spec.width()]);
    for h in 0..spec.heads {
        let _scratch = Scratch::new(2 * sq * spec.seq_len);
        let p = &saved.probs[h];
        let doh = head_cols(dout, spec, h)?;
        let qh = head_cols(&saved.q, spec, h)?;
        let kh = head_cols(&saved.k, spec, h)?;
        let vh = head_cols(&saved.v, spec, h)?;
        write_head(&mut dv, spec, h, &matmul_tn(p, &doh)?);
        let dp = matmul_nt(&doh, &vh)?;
        let mut ds = dp.clone();
        for r in 0..sq {
            let prow = p.row(r);
            let dprow = dp.row(r);
            let inner = prow
                .iter()
                .zip(dprow)
                .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            for (o, (&pv, &dpv)) in ds.row_mut(r).iter_mut().zip(prow.iter().zip(dprow)) {
                *o = pv * (dpv - inner);
            }
        }
        write_head(&mut dq, spec, h, &matmul(&ds, &kh)?.scale(scale));
        write_head(&mut dk, spec, h, &matmul_tn(&ds, &qh)?.scale(scale));
    }
    Ok((dq, dk, dv))
}
