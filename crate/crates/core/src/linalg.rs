//! Dense float64 linear algebra for the spectral parts of the objective.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration: it is accurate to
//! working precision for the small matrices used here (N ≤ a few hundred)
//! and fully deterministic. Left singular vectors are sign-normalized so
//! that the first nonzero entry of each is non-negative.

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;
const SIGN_EPS: f64 = 1e-12;

/// Row-major dense matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {pos}")));
        }
        Ok(Self { rows, cols, data })
    }

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

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
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

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot subtract {}x{} from {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Thin singular value decomposition `m = u · diag(sigma) · vt`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// rows × r, orthonormal columns.
    pub u: DenseMatrix,
    /// Descending, non-negative, length r = min(rows, cols).
    pub sigma: Vec<f64>,
    /// r × cols, orthonormal rows.
    pub vt: DenseMatrix,
}

impl SvdResult {
    /// `u · diag(values) · vt` for an arbitrary replacement spectrum.
    pub fn recompose_with(&self, values: &[f64]) -> DenseMatrix {
        let (m, r, n) = (self.u.rows(), self.sigma.len(), self.vt.cols());
        let mut out = DenseMatrix::zeros(m, n);
        for k in 0..r {
            let s = values[k];
            if s == 0.0 {
                continue;
            }
            for i in 0..m {
                let a = self.u.get(i, k) * s;
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * self.vt.get(k, j);
                }
            }
        }
        out
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        self.recompose_with(&self.sigma)
    }
}

/// One-sided Jacobi on the columns of a tall (rows ≥ cols) matrix.
/// Returns (columns of A·V, V) with V stored column-wise.
fn jacobi_tall(m: &DenseMatrix) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let (rows, cols) = (m.rows(), m.cols());
    let mut w: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| m.get(i, j)).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let tol = f64::EPSILON * rows as f64;
    // Columns whose squared norm is below this are numerical zeros relative
    // to the whole matrix; rotating them only stirs round-off.
    let fro2: f64 = w.iter().flatten().map(|x| x * x).sum();
    let negligible = fro2 * (f64::EPSILON * f64::EPSILON);
    let mut converged = cols < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..cols - 1 {
            for q in p + 1..cols {
                let (alpha, beta, gamma) = {
                    let (wp, wq) = (&w[p], &w[q]);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for (x, y) in wp.iter().zip(wq) {
                        a += x * x;
                        b += y * y;
                        g += x * y;
                    }
                    (a, b, g)
                };
                if alpha <= negligible || beta <= negligible || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::SpectralFailure { rows, cols });
    }
    Ok((w, v))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fill zero columns of `basis` with unit vectors orthogonal to the rest.
fn complete_orthonormal(basis: &mut [Vec<f64>], dim: usize) {
    let missing: Vec<usize> = (0..basis.len())
        .filter(|&k| basis[k].iter().all(|&x| x == 0.0))
        .collect();
    let mut candidate = 0usize;
    for k in missing {
        while candidate < dim {
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            candidate += 1;
            // Two passes of Gram-Schmidt for numerical orthogonality.
            for _ in 0..2 {
                for other in basis.iter() {
                    let d: f64 = other.iter().zip(&e).map(|(a, b)| a * b).sum();
                    if d != 0.0 {
                        for (x, o) in e.iter_mut().zip(other) {
                            *x -= d * o;
                        }
                    }
                }
            }
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                e.iter_mut().for_each(|x| *x /= norm);
                basis[k] = e;
                break;
            }
        }
    }
}

fn svd_tall(m: &DenseMatrix) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>)> {
    let rows = m.rows();
    let (w, v) = jacobi_tall(m)?;
    let norms: Vec<f64> = w.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let scale = norms.iter().cloned().fold(0.0, f64::max);
    let cutoff = scale * f64::EPSILON * rows.max(norms.len()) as f64;
    let mut u_cols = Vec::with_capacity(order.len());
    let mut sigma = Vec::with_capacity(order.len());
    let mut v_cols = Vec::with_capacity(order.len());
    for &k in &order {
        let s = norms[k];
        if s > cutoff && s > 0.0 {
            u_cols.push(w[k].iter().map(|x| x / s).collect::<Vec<_>>());
            sigma.push(s);
        } else {
            u_cols.push(vec![0.0; rows]);
            sigma.push(0.0);
        }
        v_cols.push(v[k].clone());
    }
    complete_orthonormal(&mut u_cols, rows);
    Ok((u_cols, sigma, v_cols))
}

/// Thin SVD. Deterministic; each left singular vector's first nonzero entry
/// is non-negative.
pub fn svd(m: &DenseMatrix) -> Result<SvdResult> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Shape("svd of an empty matrix".into()));
    }
    let tall = m.rows() >= m.cols();
    let (mut u_cols, sigma, mut v_cols) = if tall {
        svd_tall(m)?
    } else {
        let (a, s, b) = svd_tall(&m.transpose()).map_err(|_| Error::SpectralFailure {
            rows: m.rows(),
            cols: m.cols(),
        })?;
        (b, s, a)
    };

    for (u, v) in u_cols.iter_mut().zip(v_cols.iter_mut()) {
        if let Some(first) = u.iter().find(|x| x.abs() > SIGN_EPS) {
            if *first < 0.0 {
                u.iter_mut().for_each(|x| *x = -*x);
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
    }

    let r = sigma.len();
    let u = DenseMatrix::from_fn(m.rows(), r, |i, k| u_cols[k][i]);
    let vt = DenseMatrix::from_fn(r, m.cols(), |k, j| v_cols[k][j]);
    Ok(SvdResult { u, sigma, vt })
}

pub fn singular_values(m: &DenseMatrix) -> Result<Vec<f64>> {
    Ok(svd(m)?.sigma)
}

/// Sum of singular values.
pub fn nuclear_norm(m: &DenseMatrix) -> Result<f64> {
    if m.data().iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    Ok(singular_values(m)?.iter().sum())
}

/// Largest singular value.
pub fn spectral_norm(m: &DenseMatrix) -> Result<f64> {
    Ok(singular_values(m)?.first().copied().unwrap_or(0.0))
}

/// Singular value thresholding: the proximal map of `threshold · ‖·‖₊`.
pub fn svt(m: &DenseMatrix, threshold: f64) -> Result<DenseMatrix> {
    if !(threshold >= 0.0) || !threshold.is_finite() {
        return Err(Error::Parameter(format!(
            "svt threshold must be finite and non-negative, got {threshold}"
        )));
    }
    let dec = svd(m)?;
    let shrunk: Vec<f64> = dec.sigma.iter().map(|s| (s - threshold).max(0.0)).collect();
    Ok(dec.recompose_with(&shrunk))
}

/// `U · Vᵀ` from the thin SVD: a subgradient of the nuclear norm at `m`,
/// and its gradient when the singular values are distinct and nonzero.
pub fn nuclear_subgradient(m: &DenseMatrix) -> Result<DenseMatrix> {
    let dec = svd(m)?;
    let ones: Vec<f64> = dec.sigma.iter().map(|&s| if s > 0.0 { 1.0 } else { 0.0 }).collect();
    Ok(dec.recompose_with(&ones))
}

pub fn trace(m: &DenseMatrix) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::Shape(format!(
            "trace of a non-square {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    Ok(m.diagonal().iter().sum())
}

/// Eigenvalues of a symmetric matrix, ascending (cyclic Jacobi).
pub fn symmetric_eigenvalues(m: &DenseMatrix) -> Result<Vec<f64>> {
    if !m.is_square() {
        return Err(Error::Shape(format!(
            "eigenvalues of a non-square {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    let n = m.rows();
    let mut a = m.clone();
    // Symmetrize to absorb round-off asymmetry in the caller's matrix.
    for i in 0..n {
        for j in i + 1..n {
            let s = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, s);
            a.set(j, i, s);
        }
    }
    // Rotations preserve the Frobenius norm; off-diagonal mass below the
    // round-off floor of the whole matrix counts as converged.
    let fro2: f64 = a.data().iter().map(|v| v * v).sum();
    let floor = (n as f64 * f64::EPSILON).powi(2) * fro2;
    let skip = f64::EPSILON * f64::EPSILON * fro2 / (n * n) as f64;
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum();
        if off <= floor {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq * apq <= skip {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a.get(k, p), a.get(k, q));
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let (apk, aqk) = (a.get(p, k), a.get(q, k));
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    if !converged {
        return Err(Error::SpectralFailure { rows: n, cols: n });
    }
    let mut eig = a.diagonal();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}
