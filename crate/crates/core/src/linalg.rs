//! Small dense complex linear algebra used by the beamformers.
//!
//! Everything here operates on matrices of at most a few hundred rows
//! (stacked observation vectors reach `M * (L_w - b)`), so plain row-major
//! storage and textbook factorizations are sufficient.

use std::ops::{Index, IndexMut};

use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Default diagonal loading, relative to `trace(A) / dim`.
pub const DEFAULT_RIDGE: f64 = 1e-8;

const POWER_MAX_ITERATIONS: usize = 200;
const POWER_TOLERANCE: f64 = 1e-10;

/// Dense complex matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![C64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim, dim);
        for i in 0..dim {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Single-column matrix.
    pub fn column_vector(v: &[C64]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    /// Matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[Vec<C64>]) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::DimensionMismatch("ragged columns".into()));
        }
        Ok(Self::from_fn(rows, columns.len(), |i, j| columns[j][i]))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[C64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<C64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn conj_transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn matmul(&self, rhs: &CMatrix) -> Result<CMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = CMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == C64::new(0.0, 0.0) {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &[C64]) -> Result<Vec<C64>> {
        if self.cols != v.len() {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᴴ v`.
    pub fn conj_transpose_mul_vec(&self, v: &[C64]) -> Result<Vec<C64>> {
        if self.rows != v.len() {
            return Err(Error::DimensionMismatch(format!(
                "({}x{})ᴴ times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![C64::new(0.0, 0.0); self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a.conj() * vi;
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn scale(&mut self, s: f64) {
        for z in &mut self.data {
            *z *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

impl Index<(usize, usize)> for CMatrix {
    type Output = C64;
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for CMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Unconjugated dot product `Σ a_i b_i`.
pub fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Inner product `aᴴ b`.
pub fn inner(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Complex Hermitian matrix. Construction always symmetrizes, so the
/// conjugate-symmetry invariant and the real diagonal hold exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianMatrix(CMatrix);

impl HermitianMatrix {
    /// Symmetrizes `m` as `(m + mᴴ) / 2`.
    pub fn from_matrix(m: CMatrix) -> Result<Self> {
        if m.rows != m.cols {
            return Err(Error::DimensionMismatch(format!(
                "hermitian matrix must be square, got {}x{}",
                m.rows, m.cols
            )));
        }
        let mut m = m;
        symmetrize(&mut m);
        Ok(Self(m))
    }

    /// Takes the lower triangle of `m` as authoritative and mirrors it.
    pub(crate) fn from_lower(mut m: CMatrix) -> Self {
        debug_assert_eq!(m.rows, m.cols);
        let n = m.rows;
        for i in 0..n {
            m[(i, i)] = C64::new(m[(i, i)].re, 0.0);
            for j in 0..i {
                m[(j, i)] = m[(i, j)].conj();
            }
        }
        Self(m)
    }

    pub fn identity(dim: usize) -> Self {
        Self(CMatrix::identity(dim))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(CMatrix::zeros(dim, dim))
    }

    pub fn from_real_diagonal(diag: &[f64]) -> Self {
        let mut m = CMatrix::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = C64::new(d, 0.0);
        }
        Self(m)
    }

    /// `Σ_k w_k v_k v_kᴴ`.
    pub fn weighted_outer_sum<'a>(
        dim: usize,
        vectors: impl IntoIterator<Item = (&'a [C64], f64)>,
    ) -> Self {
        let mut m = CMatrix::zeros(dim, dim);
        for (v, w) in vectors {
            debug_assert_eq!(v.len(), dim);
            for i in 0..dim {
                let vi = v[i] * w;
                let row = &mut m.data[i * dim..i * dim + i + 1];
                for (r, vj) in row.iter_mut().zip(v) {
                    *r += vi * vj.conj();
                }
            }
        }
        Self::from_lower(m)
    }

    pub fn dim(&self) -> usize {
        self.0.rows
    }

    pub fn as_matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> CMatrix {
        self.0
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.0[(i, i)].re).sum()
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut m = self.0.clone();
        m.scale(s);
        Self(m)
    }

    /// `A + ridge * trace(A) / dim * I`.
    pub fn loaded(&self, ridge: f64) -> Self {
        let n = self.dim();
        if ridge == 0.0 || n == 0 {
            return self.clone();
        }
        let load = ridge * self.trace() / n as f64;
        let mut m = self.0.clone();
        for i in 0..n {
            m[(i, i)] += load;
        }
        Self(m)
    }

    pub fn quadratic_form(&self, v: &[C64]) -> f64 {
        let av = self.0.mul_vec(v).expect("conformable");
        inner(v, &av).re
    }
}

impl Index<(usize, usize)> for HermitianMatrix {
    type Output = C64;
    fn index(&self, idx: (usize, usize)) -> &C64 {
        &self.0[idx]
    }
}

fn symmetrize(m: &mut CMatrix) {
    let n = m.rows;
    for i in 0..n {
        m[(i, i)] = C64::new(m[(i, i)].re, 0.0);
        for j in 0..i {
            let avg = (m[(i, j)] + m[(j, i)].conj()) * 0.5;
            m[(i, j)] = avg;
            m[(j, i)] = avg.conj();
        }
    }
}

fn singular_tolerance(a: &CMatrix) -> f64 {
    let n = a.rows.max(1) as f64;
    let scale = (0..a.rows).map(|i| a[(i, i)].norm()).fold(0.0, f64::max);
    let scale = if scale > 0.0 { scale } else { a.max_abs() };
    n * f64::EPSILON * scale
}

/// Lower-triangular Cholesky factor `A = L Lᴴ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: CMatrix,
}

impl Cholesky {
    pub fn factor(a: &HermitianMatrix) -> Result<Self> {
        let a = a.as_matrix();
        let n = a.rows;
        let tol = singular_tolerance(a);
        let mut l = CMatrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)].re;
            for k in 0..j {
                d -= l[(j, k)].norm_sqr();
            }
            if !(d > tol) {
                return Err(Error::NotPositiveDefinite { index: j, pivot: d });
            }
            let djj = d.sqrt();
            l[(j, j)] = C64::new(djj, 0.0);
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)].conj();
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Self { l })
    }

    pub fn factor_matrix(&self) -> &CMatrix {
        &self.l
    }

    /// Smallest and largest diagonal entries of `L`.
    pub fn pivot_range(&self) -> (f64, f64) {
        let n = self.l.rows;
        (0..n)
            .map(|i| self.l[(i, i)].re)
            .fold((f64::INFINITY, 0.0), |(lo, hi), d| (lo.min(d), hi.max(d)))
    }

    /// Solves `L x = b` in place.
    pub fn forward_in_place(&self, b: &mut [C64]) {
        let n = self.l.rows;
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[(i, k)] * b[k];
            }
            b[i] = s / self.l[(i, i)].re;
        }
    }

    /// Solves `Lᴴ x = b` in place.
    pub fn backward_in_place(&self, b: &mut [C64]) {
        let n = self.l.rows;
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= self.l[(k, i)].conj() * b[k];
            }
            b[i] = s / self.l[(i, i)].re;
        }
    }

    pub fn solve_vec(&self, b: &[C64]) -> Vec<C64> {
        let mut x = b.to_vec();
        self.forward_in_place(&mut x);
        self.backward_in_place(&mut x);
        x
    }

    pub fn solve(&self, b: &CMatrix) -> CMatrix {
        let mut out = CMatrix::zeros(b.rows, b.cols);
        for j in 0..b.cols {
            let x = self.solve_vec(&b.column(j));
            for (i, v) in x.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        out
    }
}

/// LU with partial pivoting, used when a Hermitian matrix is indefinite.
fn lu_solve(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    let n = a.rows;
    let tol = singular_tolerance(a);
    let mut lu = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let (piv, piv_abs) = (col..n)
            .map(|r| (r, lu[(r, col)].norm()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if !(piv_abs > tol) {
            return Err(Error::Singular {
                index: col,
                pivot: piv_abs.max(0.0),
            });
        }
        if piv != col {
            for j in 0..n {
                lu.data.swap(col * n + j, piv * n + j);
            }
            for j in 0..x.cols {
                x.data.swap(col * x.cols + j, piv * x.cols + j);
            }
        }
        let p = lu[(col, col)];
        for r in col + 1..n {
            let factor = lu[(r, col)] / p;
            if factor == C64::new(0.0, 0.0) {
                continue;
            }
            for j in col..n {
                let v = lu[(col, j)];
                lu[(r, j)] -= factor * v;
            }
            for j in 0..x.cols {
                let v = x[(col, j)];
                x[(r, j)] -= factor * v;
            }
        }
    }
    for j in 0..x.cols {
        for i in (0..n).rev() {
            let mut s = x[(i, j)];
            for k in i + 1..n {
                s -= lu[(i, k)] * x[(k, j)];
            }
            x[(i, j)] = s / lu[(i, i)];
        }
    }
    Ok(x)
}

/// Solves `(A + ridge * trace(A)/dim * I) X = B`.
///
/// Positive-definite systems go through Cholesky; indefinite but
/// nonsingular Hermitian systems fall back to pivoted LU. A singular system
/// is reported, never regularized further.
pub fn hermitian_solve(a: &HermitianMatrix, b: &CMatrix, ridge: f64) -> Result<CMatrix> {
    if b.rows != a.dim() {
        return Err(Error::DimensionMismatch(format!(
            "system of dim {} with right-hand side of {} rows",
            a.dim(),
            b.rows
        )));
    }
    if ridge < 0.0 || !ridge.is_finite() {
        return Err(Error::InvalidConfig(format!("ridge must be >= 0, got {ridge}")));
    }
    let loaded = a.loaded(ridge);
    match Cholesky::factor(&loaded) {
        Ok(chol) => Ok(chol.solve(b)),
        Err(Error::NotPositiveDefinite { .. }) => lu_solve(loaded.as_matrix(), b),
        Err(e) => Err(e),
    }
}

pub fn hermitian_solve_vec(a: &HermitianMatrix, b: &[C64], ridge: f64) -> Result<Vec<C64>> {
    let x = hermitian_solve(a, &CMatrix::column_vector(b), ridge)?;
    Ok(x.data)
}

/// Dominant eigenpair of the pencil `(A, B)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizedEigen {
    /// Unit-norm eigenvector of `B⁻¹A`, first significant entry real positive.
    pub vector: Vec<C64>,
    pub value: f64,
    pub iterations: usize,
}

/// Eigenvector of `B⁻¹A` belonging to its largest eigenvalue.
///
/// `B = L Lᴴ` whitens the pencil into the Hermitian `C = L⁻¹ A L⁻ᴴ`, which is
/// shifted to be positive semidefinite and then driven to its dominant
/// eigenspace by power iteration on successive squares. The eigenvector is
/// read off the column of largest norm, so a degenerate spectrum resolves to
/// the first whitened basis direction.
pub fn max_generalized_eigvec(a: &HermitianMatrix, b: &HermitianMatrix) -> Result<GeneralizedEigen> {
    let n = a.dim();
    if b.dim() != n {
        return Err(Error::DimensionMismatch(format!(
            "pencil dims {} and {}",
            n,
            b.dim()
        )));
    }
    if n == 0 {
        return Err(Error::Empty("zero-dimensional pencil".into()));
    }
    let chol = Cholesky::factor(b)?;

    // C = L⁻¹ (L⁻¹ A)ᴴ, which equals L⁻¹ A L⁻ᴴ for Hermitian A.
    let mut y = a.as_matrix().clone();
    forward_columns(&chol, &mut y);
    let mut c = y.conj_transpose();
    forward_columns(&chol, &mut c);
    let c = HermitianMatrix::from_matrix(c)?;

    let shift = (0..n)
        .map(|i| {
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| c[(i, j)].norm()).sum();
            c[(i, i)].re - off
        })
        .fold(f64::INFINITY, f64::min);
    let mut p = c.as_matrix().clone();
    if shift < 0.0 {
        for i in 0..n {
            p[(i, i)] += -shift;
        }
    }

    let (u, iterations) = if p.max_abs() == 0.0 {
        (unit_basis(n, 0), 0)
    } else {
        dominant_by_squaring(p)?
    };

    let cu = c.as_matrix().mul_vec(&u)?;
    let value = inner(&u, &cu).re;

    let mut v = u;
    chol.backward_in_place(&mut v);
    normalize(&mut v);
    fix_phase(&mut v);
    Ok(GeneralizedEigen {
        vector: v,
        value,
        iterations,
    })
}

fn forward_columns(chol: &Cholesky, m: &mut CMatrix) {
    for j in 0..m.cols {
        let mut col = m.column(j);
        chol.forward_in_place(&mut col);
        for (i, v) in col.into_iter().enumerate() {
            m[(i, j)] = v;
        }
    }
}

fn unit_basis(n: usize, k: usize) -> Vec<C64> {
    let mut v = vec![C64::new(0.0, 0.0); n];
    v[k] = C64::new(1.0, 0.0);
    v
}

fn dominant_by_squaring(mut p: CMatrix) -> Result<(Vec<C64>, usize)> {
    let n = p.rows;
    let s = p.max_abs();
    p.scale(1.0 / s);
    let mut prev = dominant_column(&p);
    let mut change = f64::INFINITY;
    for it in 1..=POWER_MAX_ITERATIONS {
        let mut sq = p.matmul(&p)?;
        symmetrize(&mut sq);
        let s = sq.frobenius_norm();
        if s == 0.0 || !s.is_finite() {
            // Nilpotent after shifting only if the matrix was zero; treat as converged.
            return Ok((prev, it));
        }
        sq.scale(1.0 / s);
        p = sq;
        let cur = dominant_column(&p);
        change = cur
            .iter()
            .zip(&prev)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        prev = cur;
        if change < POWER_TOLERANCE {
            return Ok((prev, it));
        }
    }
    debug_assert!(n > 0);
    Err(Error::NoConvergence {
        iterations: POWER_MAX_ITERATIONS,
        change,
    })
}

fn dominant_column(p: &CMatrix) -> Vec<C64> {
    let norms: Vec<f64> = (0..p.cols)
        .map(|j| (0..p.rows).map(|i| p[(i, j)].norm_sqr()).sum())
        .collect();
    let max = norms.iter().cloned().fold(0.0, f64::max);
    let j = norms
        .iter()
        .position(|&x| x >= max * (1.0 - 1e-9))
        .unwrap_or(0);
    let mut v = p.column(j);
    normalize(&mut v);
    fix_phase(&mut v);
    v
}

pub(crate) fn normalize(v: &mut [C64]) {
    let n = norm(v);
    if n > 0.0 {
        for z in v.iter_mut() {
            *z /= n;
        }
    }
}

/// Rotates `v` so its first significant entry is real and positive.
pub fn fix_phase(v: &mut [C64]) {
    let max = v.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if max == 0.0 {
        return;
    }
    if let Some(idx) = v.iter().position(|z| z.norm() > 1e-12 * max) {
        let first = v[idx];
        let rot = first.conj() / first.norm();
        for z in v.iter_mut() {
            *z *= rot;
        }
        v[idx] = C64::new(first.norm(), 0.0);
    }
}

/// Solves the real symmetric positive-definite system `A x = b` (`A` row-major, n×n).
pub fn real_spd_solve(a: &[f64], n: usize, b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != n * n || b.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "real system of dim {n} with {} matrix entries and {} rhs entries",
            a.len(),
            b.len()
        )));
    }
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    let tol = n.max(1) as f64 * f64::EPSILON * scale;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > tol) {
            return Err(Error::Singular { index: j, pivot: d });
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    let mut x = b.to_vec();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[i * n + k] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Ok(x)
}
