//! Minimal row-major dense matrix.
//!
//! The engine only needs a handful of operations (row access, centering,
//! Gram products, matrix-vector multiply), so this stays dependency-free.

use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    /// Build from a flat row-major buffer. Panics if the length is off.
    pub fn from_flat(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "flat buffer does not match shape");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Mat {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Column-wise mean of the rows. Zero vector for an empty matrix.
    pub fn mean_row(&self) -> Vec<S> {
        let mut mean = vec![S::zero(); self.cols];
        if self.rows == 0 {
            return mean;
        }
        for i in 0..self.rows {
            for (m, v) in mean.iter_mut().zip(self.row(i)) {
                *m += *v;
            }
        }
        let n = S::from_usize(self.rows).expect("row count fits scalar");
        for m in &mut mean {
            *m /= n;
        }
        mean
    }

    /// Subtract a vector from every row.
    pub fn center(&self, mean: &[S]) -> Mat<S> {
        assert_eq!(mean.len(), self.cols);
        let mut out = self.clone();
        for i in 0..out.rows {
            for (v, m) in out.row_mut(i).iter_mut().zip(mean) {
                *v -= *m;
            }
        }
        out
    }

    /// Gram product `Xᵀ X` (cols × cols), symmetric by construction.
    pub fn gram(&self) -> Mat<S> {
        let d = self.cols;
        let mut out = Mat::zeros(d, d);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..d {
                let ri = row[i];
                if ri == S::zero() {
                    continue;
                }
                let dst = out.row_mut(i);
                for (j, rj) in row.iter().enumerate() {
                    dst[j] += ri * *rj;
                }
            }
        }
        out
    }

    /// Matrix-vector product (self is rows × cols, v has cols entries).
    pub fn mul_vec(&self, v: &[S]) -> Vec<S> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// Rank-one downdate `self -= scale * v vᵀ` for square matrices.
    pub fn deflate(&mut self, v: &[S], scale: S) {
        assert_eq!(self.rows, self.cols);
        assert_eq!(v.len(), self.cols);
        for i in 0..self.rows {
            let vi = v[i];
            let row = self.row_mut(i);
            for (j, vj) in v.iter().enumerate() {
                row[j] -= scale * vi * *vj;
            }
        }
    }
}

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

pub fn norm2<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

/// Normalize in place; returns false if the norm was (numerically) zero.
pub fn normalize<S: Scalar>(a: &mut [S]) -> bool {
    let n = norm2(a);
    if n <= S::zero() || !n.is_finite() {
        return false;
    }
    for x in a.iter_mut() {
        *x /= n;
    }
    true
}
