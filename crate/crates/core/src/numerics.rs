//! Dense linear algebra used throughout the crate.
//!
//! Everything here is plain `f64` with row-major storage. The sizes involved
//! are modest (12-state model, 30-step control horizon, Gram matrices up to a
//! few hundred rows), so hand-rolled kernels with contiguous-slice inner loops
//! are fast enough and keep the numerical paths auditable.

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Matrix of zeros.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Ok(Matrix {
            rows: r,
            cols: c,
            data: rows.concat(),
        })
    }

    /// Builds from a flat row-major buffer.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "buffer length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    /// Contiguous view of one row.
    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Flat row-major view of the whole matrix.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// One column copied out.
    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    /// Matrix product `self * other`.
    pub fn mul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "{}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        // ikj order keeps both inner accesses contiguous.
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Matrix-vector product.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(Error::Dimension(format!(
                "{}x{} * vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    /// Maximum absolute row sum (the induced infinity norm).
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|r| self.row(r).iter().map(|v| v.abs()).sum())
            .fold(0.0, f64::max)
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Copies `block` into `self` with its top-left corner at `(r0, c0)`.
    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Matrix) {
        assert!(r0 + block.rows <= self.rows && c0 + block.cols <= self.cols);
        for r in 0..block.rows {
            let src = block.row(r);
            let dst_start = (r0 + r) * self.cols + c0;
            self.data[dst_start..dst_start + block.cols].copy_from_slice(src);
        }
    }

    /// Copies the `rows x cols` block with top-left corner at `(r0, c0)`.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Matrix {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols);
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let src_start = (r0 + r) * self.cols + c0;
            out.data[r * cols..(r + 1) * cols]
                .copy_from_slice(&self.data[src_start..src_start + cols]);
        }
        out
    }

    /// Largest absolute difference from the transpose.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.rows {
            for c in (r + 1)..self.cols {
                worst = worst.max((self.get(r, c) - self.get(c, r)).abs());
            }
        }
        worst
    }
}

/// Dot product with four independent accumulators; the manual unroll keeps the
/// multiply-add chains pipelined in the Cholesky and Gram hot loops.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

// Pade [6/6] numerator coefficients; c[k] = (12-k)! 6! / (12! k! (6-k)!).
const PADE6: [f64; 7] = [
    1.0,
    0.5,
    5.0 / 44.0,
    1.0 / 66.0,
    1.0 / 792.0,
    1.0 / 15_840.0,
    1.0 / 665_280.0,
];

/// Threshold on the scaled norm below which the Pade approximant is applied
/// directly; larger inputs are repeatedly halved first.
const SQUARING_THRESHOLD: f64 = 0.5;

/// Matrix exponential by scaling and squaring with a [6/6] Pade approximant.
///
/// The input is halved until its infinity norm is at most 0.5, the approximant
/// is evaluated, and the result squared back up. At that norm the order-6
/// approximant is accurate to well below 1e-12 relative error.
pub fn matrix_exponential(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "matrix exponential needs a square input, got {}x{}",
            m.rows, m.cols
        )));
    }
    let n = m.rows;
    let norm = m.norm_inf();
    if !norm.is_finite() {
        return Err(Error::Parameter("matrix exponential of non-finite input".into()));
    }
    let squarings = if norm > SQUARING_THRESHOLD {
        (norm / SQUARING_THRESHOLD).log2().ceil() as u32
    } else {
        0
    };
    let scaled = m.scale(0.5f64.powi(squarings as i32));

    // Horner-style evaluation via even powers: split the polynomial into
    // even terms V and odd terms U = scaled * (odd coefficients), so that
    // N = V + U and D = V - U share all the matrix powers.
    let m2 = scaled.mul(&scaled)?;
    let m4 = m2.mul(&m2)?;
    let m6 = m4.mul(&m2)?;

    let ident = Matrix::identity(n);
    let v = ident
        .scale(PADE6[0])
        .add(&m2.scale(PADE6[2]))?
        .add(&m4.scale(PADE6[4]))?
        .add(&m6.scale(PADE6[6]))?;
    let u_inner = ident
        .scale(PADE6[1])
        .add(&m2.scale(PADE6[3]))?
        .add(&m4.scale(PADE6[5]))?;
    let u = scaled.mul(&u_inner)?;

    let numer = v.add(&u)?;
    let denom = v.sub(&u)?;
    let mut exp = solve_linear_matrix(&denom, &numer)?;
    for _ in 0..squarings {
        exp = exp.mul(&exp)?;
    }
    Ok(exp)
}

/// Zero-order-hold discretization of `ẋ = a x + inputs * u` at step `ts`.
///
/// Returns `(a_d, inputs_d)` such that `x⁺ = a_d x + inputs_d u` for inputs
/// held constant over the interval. Computed from one exponential of the
/// augmented block matrix `[[a, inputs], [0, 0]] * ts`, which handles singular
/// `a` without special cases.
pub fn zoh_discretize(a: &Matrix, inputs: &Matrix, ts: f64) -> Result<(Matrix, Matrix)> {
    if !a.is_square() {
        return Err(Error::Dimension("zoh: state matrix must be square".into()));
    }
    if inputs.rows() != a.rows() {
        return Err(Error::Dimension(format!(
            "zoh: input matrix has {} rows, state dimension is {}",
            inputs.rows(),
            a.rows()
        )));
    }
    if !(ts > 0.0) {
        return Err(Error::Parameter(format!("zoh: ts must be positive, got {ts}")));
    }
    let n = a.rows();
    let m = inputs.cols();
    let mut aug = Matrix::zeros(n + m, n + m);
    aug.set_block(0, 0, &a.scale(ts));
    aug.set_block(0, n, &inputs.scale(ts));
    let e = matrix_exponential(&aug)?;
    Ok((e.block(0, 0, n, n), e.block(0, n, n, m)))
}

/// Lower-triangular Cholesky factor together with the log-determinant of the
/// factored matrix.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    lower: Matrix,
    log_det: f64,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    /// Wraps an externally built lower-triangular factor (entries above the
    /// diagonal are ignored by every solve). Diagonal must be positive.
    pub(crate) fn from_lower(lower: Matrix) -> Result<CholeskyFactor> {
        if !lower.is_square() {
            return Err(Error::Dimension("factor must be square".into()));
        }
        let mut log_det = 0.0;
        for i in 0..lower.rows() {
            let d = lower.get(i, i);
            if !(d > 0.0) {
                return Err(Error::NotPositiveDefinite { pivot: i, value: d });
            }
            log_det += 2.0 * d.ln();
        }
        Ok(CholeskyFactor { lower, log_det })
    }

    /// log det(M) = 2 sum(log L_ii).
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    /// Solves `L z = b` (forward substitution).
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut z = vec![0.0; n];
        for i in 0..n {
            let row = self.lower.row(i);
            let s = dot(&row[..i], &z[..i]);
            z[i] = (b[i] - s) / row[i];
        }
        z
    }

    /// Solves `Lᵀ x = z` (back substitution).
    pub fn solve_lower_transpose(&self, z: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(z.len(), n);
        let mut x = z.to_vec();
        for i in (0..n).rev() {
            x[i] /= self.lower.get(i, i);
            let xi = x[i];
            // Subtract column i of L from the remaining entries.
            for j in 0..i {
                x[j] -= self.lower.get(i, j) * xi;
            }
        }
        x
    }

    /// Solves `M x = b` where `M = L Lᵀ`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_lower_transpose(&self.solve_lower(b))
    }
}

/// Tolerance for the symmetry check, relative to the largest entry.
const SYMMETRY_TOL: f64 = 1e-10;

/// Cholesky factorization of a symmetric positive-definite matrix.
pub fn cholesky(m: &Matrix) -> Result<CholeskyFactor> {
    if !m.is_square() {
        return Err(Error::Dimension("cholesky needs a square matrix".into()));
    }
    let scale = m.max_abs().max(1.0);
    let asym = m.max_asymmetry();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric { max_asym: asym });
    }
    let n = m.rows();
    let mut l = vec![0.0f64; n * n];
    let mut log_det = 0.0;
    for i in 0..n {
        // Row i of L, reading finished rows < i; split keeps borrows disjoint.
        let (done, current) = l.split_at_mut(i * n);
        let row_i = &mut current[..n];
        for j in 0..i {
            let row_j = &done[j * n..j * n + j];
            let s = dot(&row_i[..j], row_j);
            row_i[j] = (m.get(i, j) - s) / done[j * n + j];
        }
        let d = m.get(i, i) - dot(&row_i[..i], &row_i[..i]);
        if !(d > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: i, value: d });
        }
        row_i[i] = d.sqrt();
        log_det += d.ln();
    }
    Ok(CholeskyFactor {
        lower: Matrix { rows: n, cols: n, data: l },
        log_det,
    })
}

/// LU factorization with partial pivoting, stored packed with its row
/// permutation.
struct LuFactor {
    lu: Matrix,
    perm: Vec<usize>,
}

fn lu_factor(a: &Matrix) -> Result<LuFactor> {
    if !a.is_square() {
        return Err(Error::Dimension("lu needs a square matrix".into()));
    }
    let n = a.rows();
    let mut lu = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    // Singularity threshold scaled to the matrix magnitude.
    let tiny = f64::EPSILON * lu.max_abs().max(f64::MIN_POSITIVE) * n as f64;
    for k in 0..n {
        let (mut pivot_row, mut pivot_val) = (k, lu.get(k, k).abs());
        for r in (k + 1)..n {
            let v = lu.get(r, k).abs();
            if v > pivot_val {
                pivot_row = r;
                pivot_val = v;
            }
        }
        if pivot_val <= tiny {
            return Err(Error::Singular { column: k });
        }
        if pivot_row != k {
            perm.swap(k, pivot_row);
            for c in 0..n {
                let (x, y) = (lu.get(k, c), lu.get(pivot_row, c));
                lu.set(k, c, y);
                lu.set(pivot_row, c, x);
            }
        }
        let pivot = lu.get(k, k);
        for r in (k + 1)..n {
            let factor = lu.get(r, k) / pivot;
            lu.set(r, k, factor);
            if factor == 0.0 {
                continue;
            }
            for c in (k + 1)..n {
                let v = lu.get(r, c) - factor * lu.get(k, c);
                lu.set(r, c, v);
            }
        }
    }
    Ok(LuFactor { lu, perm })
}

impl LuFactor {
    fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lu.rows();
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 1..n {
            let s = dot(&self.lu.row(i)[..i], &x[..i]);
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let row = self.lu.row(i);
            let s = dot(&row[i + 1..], &x[i + 1..]);
            x[i] = (x[i] - s) / row[i];
        }
        x
    }
}

/// Solves `a x = b` by LU with partial pivoting.
pub fn solve_linear(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if a.rows() != b.len() {
        return Err(Error::Dimension(format!(
            "solve: matrix is {}x{}, rhs has length {}",
            a.rows(),
            a.cols(),
            b.len()
        )));
    }
    Ok(lu_factor(a)?.solve_vec(b))
}

/// Solves `a X = B` column by column.
pub fn solve_linear_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::Dimension(format!(
            "solve: matrix is {}x{}, rhs is {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let f = lu_factor(a)?;
    let mut out = Matrix::zeros(b.rows(), b.cols());
    for c in 0..b.cols() {
        let col = f.solve_vec(&b.col(c));
        for r in 0..b.rows() {
            out.set(r, c, col[r]);
        }
    }
    Ok(out)
}
