//! Dense row-major tensors and a define-by-run reverse-mode tape.

mod tape;

pub use tape::{Tape, Var};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor.
///
/// `shape.iter().product() == data.len()` always holds; an empty shape is a
/// scalar with one element.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    pub fn from_fn2(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&v| S::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns when viewed as a matrix (leading dims folded into rows).
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            s => {
                let cols = s[s.len() - 1];
                (self.data.len() / cols, cols)
            }
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> S {
        let (_, cols) = self.dims2();
        self.data[i * cols + j]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Converts to another scalar type element by element.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }
}

/// Column support of each row of a square or rectangular mask.
///
/// Used by row-wise masked softmax and by the sparse block mixing
/// primitive; columns are stored in increasing order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowSupport {
    n_cols: usize,
    rows: Vec<Vec<usize>>,
}

impl RowSupport {
    pub fn from_mask(rows: usize, cols: usize, mask: &[bool]) -> Result<Self> {
        if mask.len() != rows * cols {
            return Err(Error::dim("row support", &[rows, cols], &[mask.len()]));
        }
        let rows = (0..rows)
            .map(|i| (0..cols).filter(|&j| mask[i * cols + j]).collect())
            .collect();
        Ok(Self { n_cols: cols, rows })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            n_cols: cols,
            rows: vec![(0..cols).collect(); rows],
        }
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.rows[i].binary_search(&j).is_ok()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn to_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.rows.len() * self.n_cols];
        for (i, row) in self.rows.iter().enumerate() {
            for &j in row {
                m[i * self.n_cols + j] = true;
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn support_round_trips_mask() {
        let mask = [true, false, true, false, false, false];
        let s = RowSupport::from_mask(2, 3, &mask).unwrap();
        assert_eq!(s.row(0), &[0, 2]);
        assert!(s.row(1).is_empty());
        assert_eq!(s.to_mask(), mask);
        assert!(s.contains(0, 2) && !s.contains(0, 1));
    }
}
