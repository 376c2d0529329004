//! Dense row-major linear algebra.
//!
//! Only what the network and the reconstruction attacks need: products,
//! transposes, a partially pivoted Gaussian-elimination solver and the right
//! pseudo-inverse `P = Wᵀ (W Wᵀ)⁻¹` of a wide matrix. Everything is `f64`;
//! single precision only appears at the file and wire boundaries.

use std::fmt;

use thiserror::Error;

/// Pivots smaller than this fraction of the largest entry of `A` are singular.
pub const SINGULAR_TOLERANCE: f64 = 1e-12;

/// Largest acceptable `‖W·P − I‖_max` for a right pseudo-inverse.
pub const PSEUDO_INVERSE_RESIDUAL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("singular matrix: pivot {pivot:e} is below tolerance {tolerance:e}")]
    Singular { pivot: f64, tolerance: f64 },
    #[error("matrix is not of full row rank: residual {residual:e}")]
    RankDeficient { residual: f64 },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
}

pub type Result<T, E = LinalgError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, expected: impl fmt::Display, found: impl fmt::Display) -> LinalgError {
    LinalgError::Shape {
        op,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

/// Dense matrix in row-major order.
#[derive(Debug, Clone, PartialEq)]
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

    /// Wraps row-major `data`. Fails on a length mismatch or a non-finite entry.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "from_vec",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(shape_err("from_rows", format!("{cols} columns"), format!("{} in row {i}", row.len())));
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Largest absolute entry; 0 for an empty matrix.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(1.0, self, Op::N, other, Op::N, 0.0, &mut out)?;
        Ok(out)
    }

    /// Element-wise product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                "hadamard",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    /// Copies the listed rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: indices.len(), cols: self.cols, data }
    }
}

/// Operand mode for [`gemm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    /// Use the matrix as stored.
    N,
    /// Use its transpose.
    T,
}

fn op_dims(m: &Matrix, op: Op) -> (usize, usize) {
    match op {
        Op::N => (m.rows, m.cols),
        Op::T => (m.cols, m.rows),
    }
}

fn op_strides(m: &Matrix, op: Op) -> (isize, isize) {
    match op {
        Op::N => (m.cols as isize, 1),
        Op::T => (1, m.cols as isize),
    }
}

/// General product `c ← alpha·op(a)·op(b) + beta·c`.
pub fn gemm(alpha: f64, a: &Matrix, op_a: Op, b: &Matrix, op_b: Op, beta: f64, c: &mut Matrix) -> Result<()> {
    let (m, k) = op_dims(a, op_a);
    let (kb, n) = op_dims(b, op_b);
    if k != kb || c.rows != m || c.cols != n {
        return Err(shape_err(
            "gemm",
            format!("({m}x{k})·({k}x{n}) into {m}x{n}"),
            format!("({m}x{k})·({kb}x{n}) into {}x{}", c.rows, c.cols),
        ));
    }
    if m == 0 || n == 0 {
        return Ok(());
    }
    if k == 0 {
        c.data.iter_mut().for_each(|v| *v *= beta);
        return Ok(());
    }
    let (rsa, csa) = op_strides(a, op_a);
    let (rsb, csb) = op_strides(b, op_b);
    // SAFETY: the strides describe exactly the row-major buffers checked above,
    // and `c` is uniquely borrowed and does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
    Ok(())
}

/// Row vector times matrix: `out[j] = Σ_i x[i]·w[i, j]`.
pub fn vec_mat(x: &[f64], w: &Matrix) -> Result<Vec<f64>> {
    if x.len() != w.rows {
        return Err(shape_err("vec_mat", format!("vector of length {}", w.rows), x.len()));
    }
    let mut out = vec![0.0; w.cols];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
    Ok(out)
}

/// Solves `A·X = B` by Gaussian elimination with partial pivoting.
pub fn solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows;
    if a.cols != n {
        return Err(shape_err("solve", "square A", format!("{}x{}", a.rows, a.cols)));
    }
    if b.rows != n {
        return Err(shape_err("solve", format!("B with {n} rows"), b.rows));
    }
    let tolerance = SINGULAR_TOLERANCE * a.max_abs();
    let nb = b.cols;
    let mut m = a.data.clone();
    let mut x = b.data.clone();

    for col in 0..n {
        let (pivot_row, pivot) = (col..n)
            .map(|r| (r, m[r * n + col].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pivot <= tolerance || pivot == 0.0 {
            return Err(LinalgError::Singular { pivot, tolerance });
        }
        if pivot_row != col {
            swap_rows(&mut m, n, col, pivot_row);
            swap_rows(&mut x, nb, col, pivot_row);
        }
        let (upper_m, lower_m) = m.split_at_mut((col + 1) * n);
        let pivot_m = &upper_m[col * n..];
        let (upper_x, lower_x) = x.split_at_mut((col + 1) * nb);
        let pivot_x = &upper_x[col * nb..];
        let diag = pivot_m[col];
        for (row_m, row_x) in lower_m.chunks_exact_mut(n).zip(lower_x.chunks_exact_mut(nb.max(1))) {
            let factor = row_m[col] / diag;
            if factor == 0.0 {
                continue;
            }
            for (v, p) in row_m[col..].iter_mut().zip(&pivot_m[col..]) {
                *v -= factor * p;
            }
            for (v, p) in row_x.iter_mut().zip(pivot_x) {
                *v -= factor * p;
            }
        }
    }

    for r in (0..n).rev() {
        let diag = m[r * n + r];
        let (above, rest) = x.split_at_mut(r * nb);
        let row_r = &mut rest[..nb];
        row_r.iter_mut().for_each(|v| *v /= diag);
        for (rr, row_above) in above.chunks_exact_mut(nb.max(1)).enumerate().take(r) {
            let factor = m[rr * n + r];
            if factor == 0.0 {
                continue;
            }
            for (v, p) in row_above.iter_mut().zip(row_r.iter()) {
                *v -= factor * p;
            }
        }
    }

    Matrix::from_vec(n, nb, x)
}

fn swap_rows(data: &mut [f64], width: usize, a: usize, b: usize) {
    if width == 0 || a == b {
        return;
    }
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let (head, tail) = data.split_at_mut(hi * width);
    head[lo * width..(lo + 1) * width].swap_with_slice(&mut tail[..width]);
}

/// Right pseudo-inverse of a wide matrix: `P = Wᵀ (W Wᵀ)⁻¹`, so `W·P = I`.
///
/// `W` must have `rows <= cols` and full row rank. The `rows x rows` Gram
/// system is solved directly; the result is rejected if `‖W·P − I‖_max`
/// exceeds [`PSEUDO_INVERSE_RESIDUAL`].
pub fn right_pseudo_inverse(w: &Matrix) -> Result<Matrix> {
    if w.rows > w.cols {
        return Err(shape_err(
            "right_pseudo_inverse",
            "rows <= cols",
            format!("{}x{}", w.rows, w.cols),
        ));
    }
    let mut gram = Matrix::zeros(w.rows, w.rows);
    gemm(1.0, w, Op::N, w, Op::T, 0.0, &mut gram)?;
    let y = solve(&gram, w)?;
    let p = y.transpose();

    let mut residual = w.matmul(&p)?;
    for i in 0..w.rows {
        residual.data[i * w.rows + i] -= 1.0;
    }
    let err = residual.max_abs();
    if !(err < PSEUDO_INVERSE_RESIDUAL) {
        return Err(LinalgError::RankDeficient { residual: err });
    }
    Ok(p)
}

/// Pseudo-inverse of a full-rank matrix of either orientation: the right
/// pseudo-inverse when `rows <= cols`, otherwise the left one `(WᵀW)⁻¹Wᵀ`.
pub fn pseudo_inverse(w: &Matrix) -> Result<Matrix> {
    if w.rows <= w.cols {
        right_pseudo_inverse(w)
    } else {
        Ok(right_pseudo_inverse(&w.transpose())?.transpose())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = SplitMix64::new(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0))
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            s
        })
    }

    #[test]
    fn vec_mat_identity_and_column_sums() {
        assert_eq!(vec_mat(&[1.0, 0.0], &Matrix::identity(2)).unwrap(), vec![1.0, 0.0]);
        let ones = Matrix::from_vec(3, 2, vec![1.0; 6]).unwrap();
        assert_eq!(vec_mat(&[1.0, 2.0, 3.0], &ones).unwrap(), vec![6.0, 6.0]);
    }

    #[test]
    fn vec_mat_matches_triple_loop() {
        let x = random(1, 5, 1);
        let w = random(5, 7, 2);
        let fast = vec_mat(x.row(0), &w).unwrap();
        let oracle = naive_matmul(&x, &w);
        for (a, b) in fast.iter().zip(oracle.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn vec_mat_rejects_bad_shape() {
        let err = vec_mat(&[1.0, 2.0, 3.0], &Matrix::identity(2)).unwrap_err();
        assert!(matches!(err, LinalgError::Shape { .. }));
    }

    #[test]
    fn gemm_transposes_match_naive() {
        let a = random(4, 6, 3);
        let b = random(6, 5, 4);
        let expected = naive_matmul(&a, &b);
        let mut c = Matrix::zeros(4, 5);
        gemm(1.0, &a.transpose(), Op::T, &b.transpose(), Op::T, 0.0, &mut c).unwrap();
        for (x, y) in c.as_slice().iter().zip(expected.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn from_vec_rejects_nan_and_bad_length() {
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(LinalgError::NonFinite { index: 1 })
        ));
        assert!(matches!(Matrix::from_vec(2, 2, vec![1.0]), Err(LinalgError::Shape { .. })));
    }

    #[test]
    fn transpose_twice_is_identity() {
        let a = random(3, 7, 5);
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn solve_identity_and_diagonal() {
        let b = random(3, 2, 6);
        assert_eq!(solve(&Matrix::identity(3), &b).unwrap(), b);
        let a = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let x = solve(&a, &Matrix::identity(2)).unwrap();
        assert_eq!(x.as_slice(), &[0.5, 0.0, 0.0, 0.25]);
    }

    #[test]
    fn solve_random_system_residual() {
        let a = random(6, 6, 7);
        let b = random(6, 3, 8);
        let x = solve(&a, &b).unwrap();
        let r = naive_matmul(&a, &x);
        let num: f64 = r.as_slice().iter().zip(b.as_slice()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let den = norm(b.as_slice());
        assert!(num / den < 1e-8);
    }

    #[test]
    fn solve_reports_singular_pivot() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        match solve(&a, &Matrix::identity(2)) {
            Err(LinalgError::Singular { pivot, .. }) => assert!(pivot < 1e-11),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn pseudo_inverse_examples() {
        assert_eq!(right_pseudo_inverse(&Matrix::identity(2)).unwrap(), Matrix::identity(2));
        let w = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]]).unwrap();
        let p = right_pseudo_inverse(&w).unwrap();
        let expected = [1.0, 0.0, 0.0, 0.5, 0.0, 0.0];
        for (a, b) in p.as_slice().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        // W·P = I checked entry by entry.
        let wp = naive_matmul(&w, &p);
        assert_eq!(wp.as_slice(), Matrix::identity(2).as_slice());
    }

    #[test]
    fn pseudo_inverse_random_wide() {
        let w = random(3, 5, 9);
        let p = right_pseudo_inverse(&w).unwrap();
        let mut r = naive_matmul(&w, &p);
        for i in 0..3 {
            r.set(i, i, r.get(i, i) - 1.0);
        }
        assert!(r.max_abs() < 1e-8);
    }

    #[test]
    fn pseudo_inverse_rejects_tall_and_rank_deficient() {
        assert!(matches!(right_pseudo_inverse(&random(5, 3, 10)), Err(LinalgError::Shape { .. })));
        let w = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]]).unwrap();
        assert!(matches!(
            right_pseudo_inverse(&w),
            Err(LinalgError::Singular { .. } | LinalgError::RankDeficient { .. })
        ));
    }

    #[test]
    fn left_pseudo_inverse_of_tall_matrix() {
        let w = random(5, 3, 11);
        let p = pseudo_inverse(&w).unwrap();
        assert_eq!(p.shape(), (3, 5));
        let mut r = naive_matmul(&p, &w);
        for i in 0..3 {
            r.set(i, i, r.get(i, i) - 1.0);
        }
        assert!(r.max_abs() < 1e-8);
    }
}
