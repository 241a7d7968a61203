// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense linear algebra on row-major `f64` storage.
//!
//! Everything here is a pure function on borrowed data. Vectors are plain
//! `&[f64]` / `Vec<f64>`; only matrices get a dedicated type.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a 0-column matrix has no row data anyway
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Keeps the rows at `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Matrix]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::Shape(format!(
                    "cannot stack {} columns onto {cols}",
                    p.cols
                )));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Self { rows, cols, data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn column_norms(&self) -> Vec<f64> {
        let mut sq = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (s, v) in sq.iter_mut().zip(row) {
                *s += v * v;
            }
        }
        sq.into_iter().map(f64::sqrt).collect()
    }

    /// Rescales every column to unit L2 norm. Zero columns are left alone.
    pub fn normalize_columns(&mut self) {
        let norms = self.column_norms();
        for r in 0..self.rows {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (v, &n) in row.iter_mut().zip(&norms) {
                if n > 0.0 {
                    *v /= n;
                }
            }
        }
    }
}

/// `M · v`.
pub fn matvec(m: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != m.cols {
        return Err(Error::Shape(format!(
            "matvec: vector of length {} against {}x{} matrix",
            v.len(),
            m.rows,
            m.cols
        )));
    }
    Ok(m.iter_rows().map(|row| dot(row, v)).collect())
}

/// `Mᵀ · v`, without materializing the transpose.
pub fn matvec_transpose(m: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != m.rows {
        return Err(Error::Shape(format!(
            "matvecᵀ: vector of length {} against {}x{} matrix",
            v.len(),
            m.rows,
            m.cols
        )));
    }
    let mut out = vec![0.0; m.cols];
    for (row, &s) in m.iter_rows().zip(v) {
        if s != 0.0 {
            axpy(s, row, &mut out);
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// |cos(a, b)|, or 0 when either vector is zero.
pub fn abs_cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = norm(a) * norm(b);
    if denom == 0.0 {
        0.0
    } else {
        (dot(a, b) / denom).abs()
    }
}

/// Result of [`topk_select`].
#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    /// Selected indices, ascending.
    pub support: Vec<usize>,
    /// `v` with everything outside `support` zeroed.
    pub masked: Vec<f64>,
}

/// Descending by value, ties to the lower index.
#[inline]
fn rank_order(v: &[f64], a: usize, b: usize) -> Ordering {
    v[b].total_cmp(&v[a]).then(a.cmp(&b))
}

/// Keeps the `k` largest entries of `v` (ties go to the lower index) and
/// zeroes the rest. The support always has exactly `k` indices.
pub fn topk_select(v: &[f64], k: usize) -> Result<TopK> {
    let support = topk_indices(v, k)?;
    let mut masked = vec![0.0; v.len()];
    for &i in &support {
        masked[i] = v[i];
    }
    Ok(TopK { support, masked })
}

/// Index part of [`topk_select`], ascending.
pub fn topk_indices(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(Error::Param(format!(
            "top-k needs 1 <= k <= {}, got k = {k}",
            v.len()
        )));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(v, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable();
    Ok(idx)
}

/// `v / ‖v‖₂`, with the zero vector mapped to itself.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matvec_examples() {
        let id = Matrix::identity(2);
        assert_eq!(matvec(&id, &[3.0, 4.0]).unwrap(), vec![3.0, 4.0]);

        let m = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        assert_eq!(matvec(&m, &[2.0, 1.0]).unwrap(), vec![2.0, 1.0, 3.0]);

        let z = Matrix::zeros(3, 4);
        assert_eq!(matvec(&z, &[1.0, -2.0, 3.5, 7.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn matvec_rejects_wrong_length() {
        let m = Matrix::zeros(3, 2);
        assert!(matches!(matvec(&m, &[1.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(
            matvec_transpose(&m, &[1.0; 2]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn matvec_transpose_matches_explicit_transpose() {
        let m = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let v = [0.5, -1.0];
        assert_eq!(
            matvec_transpose(&m, &v).unwrap(),
            matvec(&m.transpose(), &v).unwrap()
        );
    }

    #[test]
    fn topk_examples() {
        let t = topk_select(&[2.0, 1.0, 3.0], 1).unwrap();
        assert_eq!(t.support, vec![2]);
        assert_eq!(t.masked, vec![0.0, 0.0, 3.0]);

        let t = topk_select(&[2.0, 1.0, 3.0], 3).unwrap();
        assert_eq!(t.masked, vec![2.0, 1.0, 3.0]);

        // tie goes to the lower index
        let t = topk_select(&[5.0, 5.0, 1.0], 1).unwrap();
        assert_eq!(t.support, vec![0]);
    }

    #[test]
    fn topk_rejects_bad_k() {
        assert!(matches!(topk_select(&[1.0, 2.0], 3), Err(Error::Param(_))));
        assert!(matches!(topk_select(&[1.0, 2.0], 0), Err(Error::Param(_))));
    }

    #[test]
    fn topk_ties_among_zeros_prefer_low_indices() {
        let t = topk_select(&[0.0, 0.0, 0.0, 2.0, 0.0], 3).unwrap();
        assert_eq!(t.support, vec![0, 1, 3]);
    }

    #[test]
    fn l2_normalize_examples() {
        let n = l2_normalize(&[3.0, 4.0]);
        assert!((n[0] - 0.6).abs() < 1e-15 && (n[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(l2_normalize(&[0.0, 1.0, 0.0]), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| dot(x, x), &[1.0, 2.0], 1e-5);
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);

        let g = finite_diff_grad(|_| 7.0, &[1.0, 2.0, 3.0], 1e-5);
        assert_eq!(g, vec![0.0; 3]);

        let g = finite_diff_grad(|x| x[0], &[4.0, -1.0, 9.0], 1e-5);
        assert!((g[0] - 1.0).abs() < 1e-10);
        assert_eq!(&g[1..], &[0.0, 0.0]);
    }

    #[test]
    fn normalize_columns_gives_unit_norms() {
        let mut m = Matrix::from_rows(&[[3.0, 0.0, 1.0], [4.0, 0.0, 1.0]]).unwrap();
        m.normalize_columns();
        let n = m.column_norms();
        assert!((n[0] - 1.0).abs() < 1e-15);
        assert_eq!(n[1], 0.0);
        assert!((n[2] - 1.0).abs() < 1e-15);
    }

    fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-100.0f64..100.0, len)
    }

    proptest! {
        #[test]
        fn topk_support_and_mask(v in proptest::collection::vec(-10.0f64..10.0, 1..40), k_frac in 0.0f64..1.0) {
            let k = 1 + ((v.len() - 1) as f64 * k_frac) as usize;
            let t = topk_select(&v, k).unwrap();
            prop_assert_eq!(t.support.len(), k);
            for i in 0..v.len() {
                if t.support.contains(&i) {
                    prop_assert_eq!(t.masked[i], v[i]);
                } else {
                    prop_assert_eq!(t.masked[i], 0.0);
                }
            }
            let mut sorted = v.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let top_sum: f64 = sorted[..k].iter().sum();
            let masked_sum: f64 = t.masked.iter().sum();
            prop_assert!(masked_sum <= top_sum + 1e-9);
            let selected_min = t.support.iter().map(|&i| v[i]).fold(f64::INFINITY, f64::min);
            for i in (0..v.len()).filter(|i| !t.support.contains(i)) {
                prop_assert!(v[i] <= selected_min);
            }
        }

        #[test]
        fn topk_nonnegative_sum_is_exact(v in proptest::collection::vec(0.0f64..10.0, 1..40), k in 1usize..40) {
            let k = k.min(v.len());
            let t = topk_select(&v, k).unwrap();
            let mut sorted = v.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let top_sum: f64 = sorted[..k].iter().sum();
            let masked_sum: f64 = t.masked.iter().sum();
            prop_assert!((masked_sum - top_sum).abs() <= 1e-9 * top_sum.max(1.0));
        }

        #[test]
        fn l2_normalize_lands_on_sphere_or_origin(v in proptest::collection::vec(-1e3f64..1e3, 0..30)) {
            let n = norm(&l2_normalize(&v));
            prop_assert!(n.abs() < 1e-12 || (n - 1.0).abs() < 1e-12);
        }

        #[test]
        fn matvec_is_additive(m in finite_vec(64 * 64), a in finite_vec(64), b in finite_vec(64)) {
            let m = Matrix::from_vec(64, 64, m).unwrap();
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let lhs = matvec(&m, &sum).unwrap();
            let ra = matvec(&m, &a).unwrap();
            let rb = matvec(&m, &b).unwrap();
            for i in 0..64 {
                let rhs = ra[i] + rb[i];
                let scale = lhs[i].abs().max(rhs.abs()).max(1.0);
                prop_assert!((lhs[i] - rhs).abs() / scale < 1e-10);
            }
        }
    }
}
