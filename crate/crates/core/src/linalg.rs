//! Small dense linear algebra: a row-major matrix, partial-pivot LU for the
//! per-cell stage blocks and a rank-revealing full-pivot LU for the global
//! face system.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::scalar::Real;

#[derive(Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn scaled_identity(n: usize, s: T) -> Self {
        let mut m = Self::identity(n);
        m.scale_mut(s);
        m
    }

    /// Builds a matrix from rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<T>]) -> Option<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return None;
        }
        Some(Self {
            rows: r,
            cols: c,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn from_f64_rows(rows: &[&[f64]]) -> Self {
        let owned: Vec<Vec<T>> = rows
            .iter()
            .map(|r| r.iter().map(|&x| T::lit(x)).collect())
            .collect();
        Self::from_rows(&owned).expect("ragged literal matrix")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                let src = other.row(k);
                for (o, &b) in out.row_mut(i).iter_mut().zip(src) {
                    *o = *o + a * b;
                }
            }
        }
        out
    }

    /// `out += self * x`.
    pub fn mul_add_vec(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (&a, &b) in self.row(i).iter().zip(x) {
                acc = acc + a * b;
            }
            *o = *o + acc;
        }
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows];
        self.mul_add_vec(x, &mut out);
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        }
    }

    pub fn scale_mut(&mut self, s: T) {
        for x in &mut self.data {
            *x = *x * s;
        }
    }

    pub fn scaled(&self, s: T) -> Self {
        let mut m = self.clone();
        m.scale_mut(s);
        m
    }

    pub fn max_abs(&self) -> T {
        crate::scalar::max_abs(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `max |A + Aᵀ|`: zero iff skew-symmetric.
    pub fn skew_residual(&self) -> T {
        self.sym_parts_residual(true)
    }

    /// `max |A − Aᵀ|`: zero iff symmetric.
    pub fn symmetry_residual(&self) -> T {
        self.sym_parts_residual(false)
    }

    fn sym_parts_residual(&self, skew: bool) -> T {
        if !self.is_square() {
            return T::infinity();
        }
        let mut r = T::zero();
        for i in 0..self.rows {
            for j in 0..self.cols {
                let v = if skew {
                    self[(i, j)] + self[(j, i)]
                } else {
                    self[(i, j)] - self[(j, i)]
                };
                r = r.max(v.abs());
            }
        }
        r
    }

    /// `uᵀ A v`.
    pub fn bilinear(&self, u: &[T], v: &[T]) -> T {
        let mut acc = T::zero();
        for (i, &ui) in u.iter().enumerate() {
            if ui == T::zero() {
                continue;
            }
            let mut row = T::zero();
            for (&a, &vj) in self.row(i).iter().zip(v) {
                row = row + a * vj;
            }
            acc = acc + ui * row;
        }
        acc
    }

    pub fn inverse(&self) -> Option<Self> {
        let lu = Lu::factor(self.clone()).ok()?;
        let n = self.rows;
        let mut inv = Self::zeros(n, n);
        let mut e = vec![T::zero(); n];
        for j in 0..n {
            e.iter_mut().for_each(|x| *x = T::zero());
            e[j] = T::one();
            let col = lu.solve(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        Some(inv)
    }

    /// Orthonormal basis of the column space, as the columns of the result.
    ///
    /// Modified Gram-Schmidt with largest-remaining-column pivoting; columns
    /// whose residual norm falls below `tol · max column norm` are dropped.
    pub fn range_basis(&self, tol: T) -> Self {
        let n = self.rows;
        let mut cols: Vec<Vec<T>> = (0..self.cols)
            .map(|j| (0..n).map(|i| self[(i, j)]).collect())
            .collect();
        let norm = |v: &[T]| v.iter().map(|&x| x * x).sum::<T>().sqrt();
        let scale = cols.iter().map(|c| norm(c)).fold(T::zero(), T::max);
        let mut basis: Vec<Vec<T>> = Vec::new();
        if scale == T::zero() {
            return Self::zeros(n, 0);
        }
        while !cols.is_empty() {
            // Stable order: first column attaining the max norm.
            let (best, best_norm) = cols
                .iter()
                .enumerate()
                .map(|(j, c)| (j, norm(c)))
                .fold((0, T::neg_infinity()), |acc, x| if x.1 > acc.1 { x } else { acc });
            if best_norm <= tol * scale {
                break;
            }
            let q: Vec<T> = cols.remove(best).iter().map(|&x| x / best_norm).collect();
            for c in &mut cols {
                let proj: T = c.iter().zip(&q).map(|(&a, &b)| a * b).sum();
                for (ci, &qi) in c.iter_mut().zip(&q) {
                    *ci = *ci - proj * qi;
                }
            }
            basis.push(q);
        }
        let mut out = Self::zeros(n, basis.len());
        for (j, q) in basis.iter().enumerate() {
            for i in 0..n {
                out[(i, j)] = q[i];
            }
        }
        out
    }
}

impl<T> Index<(usize, usize)> for Mat<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

impl<T: fmt::Debug> fmt::Debug for Mat<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(self.data.chunks(self.cols.max(1)).take(self.rows))
            .finish()
    }
}

/// LU with partial pivoting. Fails on an exactly zero or non-finite pivot.
#[derive(Clone, Debug)]
pub struct Lu<T> {
    lu: Mat<T>,
    perm: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SingularPivot {
    pub column: usize,
}

impl<T: Real> Lu<T> {
    pub fn factor(mut a: Mat<T>) -> Result<Self, SingularPivot> {
        assert!(a.is_square(), "LU of a non-square matrix");
        let n = a.rows;
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = a.max_abs();
        for k in 0..n {
            let mut p = k;
            let mut best = a[(k, k)].abs();
            for i in k + 1..n {
                let v = a[(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !(best > T::epsilon() * T::epsilon() * scale) || !best.is_finite() {
                return Err(SingularPivot { column: k });
            }
            if p != k {
                perm.swap(p, k);
                for j in 0..n {
                    a.data.swap(p * n + j, k * n + j);
                }
            }
            let pivot = a[(k, k)];
            let (upper, lower) = a.data.split_at_mut((k + 1) * n);
            let prow = &upper[k * n..(k + 1) * n];
            for row in lower.chunks_exact_mut(n) {
                let l = row[k] / pivot;
                row[k] = l;
                if l != T::zero() {
                    for j in k + 1..n {
                        row[j] = row[j] - l * prow[j];
                    }
                }
            }
        }
        Ok(Self { lu: a, perm })
    }

    pub fn dim(&self) -> usize {
        self.lu.rows
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.lu.rows;
        let mut x: Vec<T> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let row = self.lu.row(i);
            let mut acc = x[i];
            for j in 0..i {
                acc = acc - row[j] * x[j];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let row = self.lu.row(i);
            let mut acc = x[i];
            for j in i + 1..n {
                acc = acc - row[j] * x[j];
            }
            x[i] = acc / row[i];
        }
        x
    }

    /// Solves for every column of `b`.
    pub fn solve_mat(&self, b: &Mat<T>) -> Mat<T> {
        let mut out = Mat::zeros(b.rows, b.cols);
        let mut col = vec![T::zero(); b.rows];
        for j in 0..b.cols {
            for i in 0..b.rows {
                col[i] = b[(i, j)];
            }
            let x = self.solve(&col);
            for i in 0..b.rows {
                out[(i, j)] = x[i];
            }
        }
        out
    }
}

/// Gaussian elimination with complete pivoting, stopping at the numerical rank.
///
/// `solve` returns the basic solution: unknowns beyond the rank are zero. For
/// a consistent singular system this is an exact solution; callers check the
/// residual to detect inconsistency.
#[derive(Clone, Debug)]
pub struct FullPivLu<T> {
    lu: Mat<T>,
    row_perm: Vec<usize>,
    col_perm: Vec<usize>,
    rank: usize,
}

impl<T: Real> FullPivLu<T> {
    /// `rel_tol` is relative to the largest entry of `a`.
    pub fn factor(mut a: Mat<T>, rel_tol: T) -> Self {
        assert!(a.is_square(), "LU of a non-square matrix");
        let n = a.rows;
        let mut row_perm: Vec<usize> = (0..n).collect();
        let mut col_perm: Vec<usize> = (0..n).collect();
        let scale = a.max_abs();
        let threshold = rel_tol * scale;

        // Largest active entry of every row, as (value, column). Rows whose
        // multiplier is exactly zero are left untouched, which keeps the
        // elimination cheap while the matrix is still sparse.
        let row_max = |row: &[T], from: usize| -> (T, usize) {
            let mut best = (T::zero(), from);
            for (j, v) in row.iter().enumerate().skip(from) {
                let av = v.abs();
                if av > best.0 {
                    best = (av, j);
                }
            }
            best
        };
        let mut maxes: Vec<(T, usize)> = (0..n).map(|i| row_max(&a.data[i * n..(i + 1) * n], 0)).collect();

        let mut rank = n;
        for k in 0..n {
            let mut pi = k;
            for i in k + 1..n {
                if maxes[i].0 > maxes[pi].0 {
                    pi = i;
                }
            }
            let (pmax, pj) = maxes[pi];
            if !(pmax > threshold) || scale == T::zero() {
                rank = k;
                break;
            }
            if pi != k {
                row_perm.swap(pi, k);
                maxes.swap(pi, k);
                for j in 0..n {
                    a.data.swap(pi * n + j, k * n + j);
                }
            }
            if pj != k {
                col_perm.swap(pj, k);
                for i in 0..n {
                    a.data.swap(i * n + pj, i * n + k);
                }
                for m in maxes.iter_mut().skip(k + 1) {
                    if m.1 == pj {
                        m.1 = k;
                    } else if m.1 == k {
                        m.1 = pj;
                    }
                }
            }
            let pivot = a[(k, k)];
            let (upper, lower) = a.data.split_at_mut((k + 1) * n);
            let prow = &upper[k * n + k + 1..(k + 1) * n];
            for (r, row) in lower.chunks_exact_mut(n).enumerate() {
                let m = &mut maxes[k + 1 + r];
                if row[k] == T::zero() {
                    if m.1 == k {
                        *m = row_max(row, k + 1);
                    }
                    continue;
                }
                let l = row[k] / pivot;
                row[k] = l;
                for (x, &p) in row[k + 1..].iter_mut().zip(prow) {
                    *x = *x - l * p;
                }
                *m = row_max(row, k + 1);
            }
        }
        Self {
            lu: a,
            row_perm,
            col_perm,
            rank,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dim(&self) -> usize {
        self.lu.rows
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.lu.rows;
        let r = self.rank;
        let mut y: Vec<T> = self.row_perm.iter().map(|&p| b[p]).collect();
        for i in 0..r {
            let row = self.lu.row(i);
            let mut acc = y[i];
            for j in 0..i {
                acc = acc - row[j] * y[j];
            }
            y[i] = acc;
        }
        let mut x = vec![T::zero(); n];
        for i in (0..r).rev() {
            let row = self.lu.row(i);
            let mut acc = y[i];
            for j in i + 1..r {
                acc = acc - row[j] * x[j];
            }
            x[i] = acc / row[i];
        }
        let mut out = vec![T::zero(); n];
        for (j, &q) in self.col_perm.iter().enumerate() {
            out[q] = x[j];
        }
        out
    }
}
