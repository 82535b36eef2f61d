use std::ops::Range;

use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Dense row-major n-dimensional array.
///
/// Value semantics: cloning copies the buffer. Most kernels treat a tensor as
/// a matrix whose last extent is the row width.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {numel} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(
            shape.iter().all(|&e| e > 0),
            "zero extent in shape {shape:?}"
        );
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| {
            if i / n == i % n {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Row width: the last extent.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Number of rows when viewed as a matrix over the last extent.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// View as `[rows, cols]`.
    pub fn as_matrix(self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        Self {
            shape: vec![r, c],
            data: self.data,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()))
    }

    /// Largest elementwise absolute difference, computed in f64.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Largest elementwise difference relative to the larger magnitude of `other`.
    pub fn max_rel_diff(&self, other: &Self) -> Result<f64> {
        let abs = self.max_abs_diff(other)?;
        let scale = other.max_abs().to_f64().max(self.max_abs().to_f64());
        Ok(if scale > 0.0 { abs / scale } else { abs })
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.to_f64())).collect(),
        }
    }

    /// Rows `[range.start, range.end)` as a new `[len, cols]` tensor.
    pub fn slice_rows(&self, range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.rows() {
            return Err(Error::shape(format!(
                "row range {range:?} out of bounds for {} rows",
                self.rows()
            )));
        }
        let c = self.cols();
        Ok(Self {
            shape: vec![range.len(), c],
            data: self.data[range.start * c..range.end * c].to_vec(),
        })
    }

    /// Columns `[range.start, range.end)` as a new `[rows, len]` tensor.
    pub fn slice_cols(&self, range: Range<usize>) -> Result<Self> {
        let c = self.cols();
        if range.start >= range.end || range.end > c {
            return Err(Error::shape(format!(
                "column range {range:?} out of bounds for {c} columns"
            )));
        }
        let rows = self.rows();
        let mut data = Vec::with_capacity(rows * range.len());
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * c + range.start..r * c + range.end]);
        }
        Ok(Self {
            shape: vec![rows, range.len()],
            data,
        })
    }

    /// Stack matrices vertically; all parts must share the row width.
    pub fn concat_rows(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows of nothing"))?;
        let c = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != c {
                return Err(Error::shape(format!(
                    "concat_rows width mismatch: {} vs {c}",
                    p.cols()
                )));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: vec![rows, c],
            data,
        })
    }

    /// Place matrices side by side; all parts must share the row count.
    pub fn concat_cols(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols of nothing"))?;
        let rows = first.rows();
        if parts.iter().any(|p| p.rows() != rows) {
            return Err(Error::shape("concat_cols row count mismatch"));
        }
        let width: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Self {
            shape: vec![rows, width],
            data,
        })
    }

    /// Split into `n` equal row blocks.
    pub fn split_rows(&self, n: usize) -> Result<Vec<Self>> {
        let rows = self.rows();
        if n == 0 || !rows.is_multiple_of(n) {
            return Err(Error::shape(format!("cannot split {rows} rows into {n}")));
        }
        let len = rows / n;
        (0..n).map(|i| self.slice_rows(i * len..(i + 1) * len)).collect()
    }

    /// Split into `n` equal column blocks.
    pub fn split_cols(&self, n: usize) -> Result<Vec<Self>> {
        let c = self.cols();
        if n == 0 || !c.is_multiple_of(n) {
            return Err(Error::shape(format!("cannot split {c} columns into {n}")));
        }
        let len = c / n;
        (0..n).map(|i| self.slice_cols(i * len..(i + 1) * len)).collect()
    }

    pub fn expect_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if self.shape == shape {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: expected {shape:?}, got {:?}",
                self.shape
            )))
        }
    }

    fn expect_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )))
        }
    }
}

/// Concatenate every buffer into one `[n, 1]` column.
pub fn flatten<T: Scalar>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let data: Vec<T> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    let n = data.len();
    Tensor::new(&[n.max(1), 1], if n == 0 { vec![T::zero()] } else { data })
        .expect("length matches")
}

/// Inverse of [`flatten`]: copy consecutive runs of `flat` back into `parts`.
pub fn unflatten_into<T: Scalar>(flat: &Tensor<T>, parts: &mut [&mut Tensor<T>]) -> Result<()> {
    let total: usize = parts.iter().map(|t| t.numel()).sum();
    if total != flat.numel() && !(total == 0 && flat.numel() == 1) {
        return Err(Error::shape(format!(
            "flat buffer of {} for {total} elements",
            flat.numel()
        )));
    }
    let mut off = 0;
    for p in parts.iter_mut() {
        let n = p.numel();
        p.data_mut().copy_from_slice(&flat.data()[off..off + n]);
        off += n;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_buffer_length() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn row_and_col_slicing_roundtrip() {
        let t = Tensor::<f64>::from_fn(&[4, 6], |i| i as f64);
        let parts = t.split_cols(3).unwrap();
        assert_eq!(Tensor::concat_cols(&parts).unwrap(), t);
        let parts = t.split_rows(2).unwrap();
        assert_eq!(Tensor::concat_rows(&parts).unwrap(), t);
        assert_eq!(t.slice_cols(2..4).unwrap().row(1), &[8.0, 9.0]);
    }

    #[test]
    fn finite_check_catches_nan() {
        let t = Tensor::<f32>::new(&[2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(t.check_finite("x"), Err(Error::NonFinite(_))));
    }
}
