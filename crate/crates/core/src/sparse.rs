//! Compressed sparse row storage plus a thin wrapper over faer's sparse LU.
//!
//! Only the kernels the substructuring code needs are provided: products,
//! transposes, index-set extraction and block assembly.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Lu;
use faer::sparse::{SparseColMat, Triplet};
use faer::MatMut;
use nalgebra::DMatrix;

use crate::error::LinalgError;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            indptr: vec![0; nrows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Builds a matrix from (row, col, value) triplets. Duplicates are summed
    /// and explicit zeros are kept, so the pattern only depends on the
    /// triplet positions.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; nrows + 1];
        for &(r, c, _) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r},{c}) out of bounds");
            counts[r + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            let k = next[r];
            cols[k] = c;
            vals[k] = v;
            next[r] += 1;
        }
        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        indptr.push(0);
        let mut row: Vec<(usize, f64)> = Vec::new();
        for r in 0..nrows {
            row.clear();
            row.extend((counts[r]..counts[r + 1]).map(|k| (cols[k], vals[k])));
            row.sort_by_key(|e| e.0);
            let mut iter = row.iter();
            if let Some(&(c0, v0)) = iter.next() {
                let (mut c, mut acc) = (c0, v0);
                for &(cj, vj) in iter {
                    if cj == c {
                        acc += vj;
                    } else {
                        indices.push(c);
                        values.push(acc);
                        c = cj;
                        acc = vj;
                    }
                }
                indices.push(c);
                values.push(acc);
            }
            indptr.push(indices.len());
        }
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        }
    }

    /// Assembles a block matrix from a row-major grid of optional blocks.
    /// Block row heights and column widths are taken from the given sizes.
    pub fn from_blocks(row_sizes: &[usize], col_sizes: &[usize], blocks: &[Vec<Option<&CsrMatrix>>]) -> Self {
        let row_off: Vec<usize> = offsets(row_sizes);
        let col_off: Vec<usize> = offsets(col_sizes);
        let mut trip = Vec::new();
        for (bi, brow) in blocks.iter().enumerate() {
            for (bj, blk) in brow.iter().enumerate() {
                if let Some(b) = blk {
                    assert_eq!(b.nrows, row_sizes[bi]);
                    assert_eq!(b.ncols, col_sizes[bj]);
                    for (r, c, v) in b.iter() {
                        trip.push((row_off[bi] + r, col_off[bj] + c, v));
                    }
                }
            }
        }
        Self::from_triplets(*row_off.last().unwrap(), *col_off.last().unwrap(), &trip)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |r| {
            let (c, v) = self.row(r);
            c.iter().zip(v).map(move |(&c, &v)| (r, c, v))
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    /// y = A x
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for (r, yr) in y.iter_mut().enumerate() {
            let (cols, vals) = self.row(r);
            *yr = cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum();
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_vec(x, &mut y);
        y
    }

    /// y += alpha A x
    pub fn mul_vec_acc(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        for (r, yr) in y.iter_mut().enumerate() {
            let (cols, vals) = self.row(r);
            let s: f64 = cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum();
            *yr += alpha * s;
        }
    }

    /// y = Aᵀ x
    pub fn tr_mul_vec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.nrows);
        debug_assert_eq!(y.len(), self.ncols);
        y.iter_mut().for_each(|v| *v = 0.0);
        for (r, &xr) in x.iter().enumerate() {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                y[c] += v * xr;
            }
        }
    }

    pub fn transpose(&self) -> Self {
        let trip: Vec<_> = self.iter().map(|(r, c, v)| (c, r, v)).collect();
        Self::from_triplets(self.ncols, self.nrows, &trip)
    }

    /// alpha A + beta B on the union of both patterns.
    pub fn linear_combination(&self, alpha: f64, other: &CsrMatrix, beta: f64) -> Self {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let trip: Vec<_> = self
            .iter()
            .map(|(r, c, v)| (r, c, alpha * v))
            .chain(other.iter().map(|(r, c, v)| (r, c, beta * v)))
            .collect();
        Self::from_triplets(self.nrows, self.ncols, &trip)
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    /// A · diag(d)
    pub fn scale_columns(&self, d: &[f64]) -> Self {
        let mut out = self.clone();
        for (k, v) in out.values.iter_mut().enumerate() {
            *v *= d[out.indices[k]];
        }
        out
    }

    /// Extracts A[rows, cols]; `rows` and `cols` are index lists into self.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> Self {
        let mut col_map = vec![usize::MAX; self.ncols];
        for (k, &c) in cols.iter().enumerate() {
            col_map[c] = k;
        }
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        let mut buf: Vec<(usize, f64)> = Vec::new();
        for &r in rows {
            buf.clear();
            let (cs, vs) = self.row(r);
            for (&c, &v) in cs.iter().zip(vs) {
                let m = col_map[c];
                if m != usize::MAX {
                    buf.push((m, v));
                }
            }
            buf.sort_by_key(|e| e.0);
            for &(c, v) in &buf {
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Self {
            nrows: rows.len(),
            ncols: cols.len(),
            indptr,
            indices,
            values,
        }
    }

    /// Sparse product A · B.
    pub fn matmul(&self, other: &CsrMatrix) -> Self {
        assert_eq!(self.ncols, other.nrows);
        let mut acc = vec![0.0; other.ncols];
        let mut mark = vec![usize::MAX; other.ncols];
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        let mut touched: Vec<usize> = Vec::new();
        for r in 0..self.nrows {
            touched.clear();
            let (ac, av) = self.row(r);
            for (&k, &a) in ac.iter().zip(av) {
                let (bc, bv) = other.row(k);
                for (&c, &b) in bc.iter().zip(bv) {
                    if mark[c] != r {
                        mark[c] = r;
                        acc[c] = 0.0;
                        touched.push(c);
                    }
                    acc[c] += a * b;
                }
            }
            touched.sort_unstable();
            for &c in &touched {
                indices.push(c);
                values.push(acc[c]);
            }
            indptr.push(indices.len());
        }
        Self {
            nrows: self.nrows,
            ncols: other.ncols,
            indptr,
            indices,
            values,
        }
    }

    /// Max absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.nrows)
            .map(|r| self.row(r).1.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.iter() {
            d[(r, c)] += v;
        }
        d
    }

    fn to_faer(&self) -> Result<SparseColMat<usize, f64>, LinalgError> {
        let trip: Vec<_> = self.iter().map(|(r, c, v)| Triplet::new(r, c, v)).collect();
        SparseColMat::try_new_from_triplets(self.nrows, self.ncols, &trip)
            .map_err(|e| LinalgError::Backend(format!("{e:?}")))
    }
}

fn offsets(sizes: &[usize]) -> Vec<usize> {
    let mut off = vec![0];
    for s in sizes {
        off.push(off.last().unwrap() + s);
    }
    off
}

/// Sparse LU with partial pivoting. When `pin` is set the matrix is treated
/// as singular with a one-dimensional kernel: row and column `pin` are
/// replaced by the identity, which selects the solution with a zero entry
/// at `pin` for consistent right-hand sides.
pub struct SparseLu {
    lu: Lu<usize, f64>,
    n: usize,
    pin: Option<usize>,
}

impl std::fmt::Debug for SparseLu {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SparseLu")
            .field("n", &self.n)
            .field("pin", &self.pin)
            .finish()
    }
}

impl SparseLu {
    pub fn factor(a: &CsrMatrix) -> Result<Self, LinalgError> {
        Self::factor_impl(a, None)
    }

    pub fn factor_pinned(a: &CsrMatrix, pin: usize) -> Result<Self, LinalgError> {
        Self::factor_impl(a, Some(pin))
    }

    fn factor_impl(a: &CsrMatrix, pin: Option<usize>) -> Result<Self, LinalgError> {
        if a.nrows != a.ncols {
            return Err(LinalgError::NotSquare(a.nrows, a.ncols));
        }
        let n = a.nrows;
        // Subdomain work is parallelized one level up; keep the kernels serial
        // so results do not depend on the thread count.
        faer::set_global_parallelism(faer::Par::Seq);
        let mat = match pin {
            None => a.to_faer()?,
            Some(p) => {
                let trip: Vec<_> = a
                    .iter()
                    .filter(|&(r, c, _)| r != p && c != p)
                    .chain(std::iter::once((p, p, 1.0)))
                    .map(|(r, c, v)| Triplet::new(r, c, v))
                    .collect();
                SparseColMat::try_new_from_triplets(n, n, &trip).map_err(|e| LinalgError::Backend(format!("{e:?}")))?
            }
        };
        let lu = mat.sp_lu().map_err(|_| LinalgError::Singular)?;
        let this = Self { lu, n, pin };
        if n > 0 {
            // partial pivoting does not report tiny pivots; probe with a solve
            let probe: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * (i as f64).sin()).collect();
            let mut x = vec![0.0; n];
            mat_vec_with_pin(a, pin, &probe, &mut x);
            this.solve_raw(&mut x, false);
            let bad = x
                .iter()
                .zip(&probe)
                .any(|(v, p)| !v.is_finite() || (v - p).abs() > 1e-4);
            if bad {
                return Err(LinalgError::Singular);
            }
        }
        Ok(this)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn solve_raw(&self, b: &mut [f64], transpose: bool) {
        if self.n == 0 {
            return;
        }
        let m = MatMut::from_column_major_slice_mut(b, self.n, 1);
        if transpose {
            self.lu.solve_transpose_in_place(m);
        } else {
            self.lu.solve_in_place(m);
        }
    }

    /// Solves A x = b in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        if let Some(p) = self.pin {
            b[p] = 0.0;
        }
        self.solve_raw(b, false);
    }

    /// Solves Aᵀ x = b in place.
    pub fn solve_transpose_in_place(&self, b: &mut [f64]) {
        if let Some(p) = self.pin {
            b[p] = 0.0;
        }
        self.solve_raw(b, true);
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// Solves for every column of a column-major block of right-hand sides.
    pub fn solve_columns(&self, b: &mut [f64], ncols: usize) {
        if self.n == 0 || ncols == 0 {
            return;
        }
        if let Some(p) = self.pin {
            for j in 0..ncols {
                b[j * self.n + p] = 0.0;
            }
        }
        let m = MatMut::from_column_major_slice_mut(b, self.n, ncols);
        self.lu.solve_in_place(m);
    }
}

fn mat_vec_with_pin(a: &CsrMatrix, pin: Option<usize>, x: &[f64], y: &mut [f64]) {
    a.mul_vec(x, y);
    if let Some(p) = pin {
        for (r, yr) in y.iter_mut().enumerate() {
            if r == p {
                *yr = x[p];
            } else {
                *yr -= a.get(r, p) * x[p];
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// y += alpha x
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
