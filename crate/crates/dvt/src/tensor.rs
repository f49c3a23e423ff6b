//! Dense row-major tensors over f64.
//!
//! These are plain value types: no views, no strides, no graph bookkeeping.
//! Differentiable computation happens on [`crate::tape::Tape`], which owns its
//! own buffers; `Tensor` is what crosses API boundaries (datasets, parameters,
//! gradients, checkpoints).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape invariants: `data.len() == shape.iter().product()` and every value
/// finite. Both are enforced at construction; mutation goes through
/// [`Tensor::data_mut`], and anything re-entering the tape is re-checked
/// there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                detail: format!("shape {:?} implies {} values, got {}", shape, expect, data.len()),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "Tensor::new",
                detail: format!("element {} is {}", i, data[i]),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    /// 0-rank tensor holding one value.
    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![], vec![v])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape {
                op: "Tensor::from_rows",
                detail: "ragged rows".into(),
            });
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Callers must keep values finite; the tape re-validates on entry.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Shape {
                op: "Tensor::item",
                detail: format!("expected a scalar, shape is {:?}", self.shape),
            })
        }
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "rows() on rank-{} tensor", self.rank());
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols() on rank-{} tensor", self.rank());
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// New tensor keeping the rows listed in `idx`, in that order.
    pub fn take_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor { shape: vec![idx.len(), c], data }
    }
}

/// Row-wise softmax of a rank-2 tensor, max-subtracted for stability.
/// Pure helper for evaluation paths; the differentiable version lives on the
/// tape.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = t.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..c {
            let e = (row[j] - m).exp();
            out[i * c + j] = e;
            sum += e;
        }
        for j in 0..c {
            out[i * c + j] /= sum;
        }
    }
    Tensor { shape: vec![r, c], data: out }
}

/// Index of the row maximum; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_and_nan() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn scalar_and_item() {
        let s = Tensor::scalar(3.5).unwrap();
        assert!(s.is_scalar());
        assert_eq!(s.item().unwrap(), 3.5);
        assert!(Tensor::zeros(vec![2]).item().is_err());
    }

    #[test]
    fn take_rows_reorders() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let picked = t.take_rows(&[2, 0]);
        assert_eq!(picked.data(), &[5.0, 6.0, 1.0, 2.0]);
    }

    #[test]
    fn softmax_rows_uniform_and_stable() {
        let t = Tensor::from_rows(&[vec![0.0, 0.0], vec![1000.0, 1000.0]]).unwrap();
        let s = softmax_rows(&t);
        for v in s.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn argmax_tie_takes_lowest() {
        assert_eq!(argmax(&[0.3, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }
}
