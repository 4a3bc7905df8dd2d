//! Small dense linear algebra: row-major matrices, a cyclic Jacobi
//! eigensolver for symmetric matrices, and cosine similarity.
//!
//! The eigensolver is deliberately plain. Cyclic Jacobi rotations are
//! unconditionally correct for real symmetric matrices and the dimensions
//! here stay small (a patch second-moment matrix has `c·s_p²` rows, at most
//! a few thousand), so there is no need for anything faster.

use thiserror::Error;

/// Hard cap on the eigensolver dimension.
pub const MAX_SYM_EIG_DIM: usize = 4096;

/// Relative off-diagonal Frobenius threshold at which the sweep loop stops.
const JACOBI_TOL: f64 = 1e-12;

/// Generous sweep limit; cyclic Jacobi converges quadratically and in
/// practice needs fewer than 15 sweeps at these sizes.
const MAX_SWEEPS: usize = 64;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("vector length mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("input contains NaN or infinite entries")]
    NonFinite,
    #[error("dimension {dim} exceeds supported maximum {MAX_SYM_EIG_DIM}")]
    DimensionTooLarge { dim: usize },
    #[error("Jacobi iteration did not converge within {MAX_SWEEPS} sweeps")]
    NoConvergence,
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Build from a row-major buffer. Panics if the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} != {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                for c in 0..other.cols {
                    out.data[r * other.cols + c] += a * other.get(k, c);
                }
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Eigendecomposition of a symmetric matrix: `K = U diag(λ) Uᵀ`.
///
/// Eigenvalues are sorted non-increasing and `eigenvectors` holds the
/// matching unit eigenvectors as columns. Each column is sign-normalized so
/// that its largest-magnitude entry is positive, which makes the result
/// deterministic and serializable.
#[derive(Debug, Clone)]
pub struct EigenResult {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

/// Symmetric eigendecomposition via cyclic Jacobi rotations.
///
/// The input is symmetrized as `(K + Kᵀ)/2` before iterating, so mildly
/// asymmetric inputs (accumulated round-off) are fine. Fails on non-square
/// or non-finite input and on dimensions above [`MAX_SYM_EIG_DIM`].
pub fn sym_eig(k: &Matrix) -> Result<EigenResult, LinalgError> {
    if k.rows() != k.cols() {
        return Err(LinalgError::NotSquare {
            rows: k.rows(),
            cols: k.cols(),
        });
    }
    if !k.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let n = k.rows();
    if n > MAX_SYM_EIG_DIM {
        return Err(LinalgError::DimensionTooLarge { dim: n });
    }
    if n == 0 {
        return Ok(EigenResult {
            eigenvalues: Vec::new(),
            eigenvectors: Matrix::zeros(0, 0),
        });
    }

    // Work on the symmetrized copy, row-major n x n.
    let mut a = vec![0.0_f64; n * n];
    for r in 0..n {
        for c in 0..n {
            a[r * n + c] = 0.5 * (k.get(r, c) + k.get(c, r));
        }
    }
    let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut v = vec![0.0_f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let off: f64 = {
            let mut s = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    let x = a[p * n + q];
                    s += 2.0 * x * x;
                }
            }
            s.sqrt()
        };
        if off <= JACOBI_TOL * norm {
            converged = true;
            break;
        }

        for p in 0..(n - 1) {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = 0.5 * (aqq - app) / apq;
                // Smaller-angle root of t^2 + 2 t theta - 1 = 0.
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for i in 0..n {
                    if i != p && i != q {
                        let aip = a[i * n + p];
                        let aiq = a[i * n + q];
                        let new_p = c * aip - s * aiq;
                        let new_q = s * aip + c * aiq;
                        a[i * n + p] = new_p;
                        a[p * n + i] = new_p;
                        a[i * n + q] = new_q;
                        a[q * n + i] = new_q;
                    }
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }
    if !converged {
        return Err(LinalgError::NoConvergence);
    }

    // Sort descending by eigenvalue, permuting eigenvector columns along.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[j * n + j]
            .partial_cmp(&a[i * n + i])
            .expect("eigenvalues are finite")
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        // Sign convention: largest-magnitude entry positive.
        let mut max_i = 0;
        let mut max_abs = -1.0;
        for r in 0..n {
            let x = v[r * n + src].abs();
            if x > max_abs {
                max_abs = x;
                max_i = r;
            }
        }
        let flip = if v[max_i * n + src] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            vectors.set(r, col, flip * v[r * n + src]);
        }
    }

    Ok(EigenResult {
        eigenvalues,
        eigenvectors: vectors,
    })
}

/// Cosine similarity `aᵀb / (‖a‖‖b‖)`, with the convention that a zero
/// vector on either side yields 0 rather than NaN (rank-deficient bases are
/// padded with zero vectors downstream).
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, LinalgError> {
    if a.len() != b.len() {
        return Err(LinalgError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    pub(crate) fn max_orthonormality_defect(u: &Matrix) -> f64 {
        let gram = u.transpose().matmul(u);
        let mut worst: f64 = 0.0;
        for r in 0..gram.rows() {
            for c in 0..gram.cols() {
                let target = if r == c { 1.0 } else { 0.0 };
                worst = worst.max((gram.get(r, c) - target).abs());
            }
        }
        worst
    }

    pub(crate) fn reconstruction_error(k: &Matrix, e: &EigenResult) -> f64 {
        let n = k.rows();
        let mut sigma = Matrix::zeros(n, n);
        for (i, &l) in e.eigenvalues.iter().enumerate() {
            sigma.set(i, i, l);
        }
        let rec = e
            .eigenvectors
            .matmul(&sigma)
            .matmul(&e.eigenvectors.transpose());
        let mut diff = 0.0;
        for i in 0..n * n {
            let d = rec.data()[i] - k.data()[i];
            diff += d * d;
        }
        diff.sqrt()
    }

    pub(crate) fn random_symmetric(n: usize, rng: &mut ChaCha12Rng) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for r in 0..n {
            for c in r..n {
                let v = rng.random::<f64>() * 4.0 - 2.0;
                m.set(r, c, v);
                m.set(c, r, v);
            }
        }
        m
    }

    /// Random orthogonal matrix via Gram-Schmidt on a random square matrix.
    pub(crate) fn random_orthogonal(n: usize, rng: &mut ChaCha12Rng) -> Matrix {
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
        while cols.len() < n {
            let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            for u in &cols {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= d * ui;
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for vi in &mut v {
                    *vi /= norm;
                }
                cols.push(v);
            }
        }
        let mut q = Matrix::zeros(n, n);
        for (c, col) in cols.iter().enumerate() {
            for (r, &x) in col.iter().enumerate() {
                q.set(r, c, x);
            }
        }
        q
    }

    #[test]
    fn identity_eigenvalues() {
        let e = sym_eig(&Matrix::identity(3)).unwrap();
        for l in &e.eigenvalues {
            assert!((l - 1.0).abs() < 1e-12);
        }
        assert!(max_orthonormality_defect(&e.eigenvectors) < 1e-10);
    }

    #[test]
    fn diagonal_case() {
        let mut k = Matrix::zeros(2, 2);
        k.set(0, 0, 3.0);
        k.set(1, 1, 1.0);
        let e = sym_eig(&k).unwrap();
        assert!((e.eigenvalues[0] - 3.0).abs() < 1e-12);
        assert!((e.eigenvalues[1] - 1.0).abs() < 1e-12);
        // Sign convention picks +e1, +e2.
        assert!((e.eigenvectors.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((e.eigenvectors.get(1, 1) - 1.0).abs() < 1e-12);
        assert!(e.eigenvectors.get(1, 0).abs() < 1e-12);
    }

    #[test]
    fn construct_then_decompose_recovers_spectrum() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let spectrum = [9.0, 4.5, 1.0, 0.25, -0.5, -3.0];
        let q = random_orthogonal(6, &mut rng);
        let mut lambda = Matrix::zeros(6, 6);
        for (i, &l) in spectrum.iter().enumerate() {
            lambda.set(i, i, l);
        }
        let k = q.matmul(&lambda).matmul(&q.transpose());
        let e = sym_eig(&k).unwrap();
        for (got, want) in e.eigenvalues.iter().zip(spectrum.iter()) {
            assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
        }
    }

    #[test]
    fn random_suite_small() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for trial in 0..100 {
            let n = 2 + (trial % 31);
            let k = random_symmetric(n, &mut rng);
            let e = sym_eig(&k).unwrap();
            let bound = 1e-8 * k.frobenius_norm().max(1.0);
            assert!(reconstruction_error(&k, &e) <= bound);
            assert!(max_orthonormality_defect(&e.eigenvectors) <= 1e-10);
            for w in e.eigenvalues.windows(2) {
                assert!(w[0] >= w[1]);
            }
        }
    }

    #[test]
    fn deterministic_for_fixed_input() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let k = random_symmetric(12, &mut rng);
        let a = sym_eig(&k).unwrap();
        let b = sym_eig(&k).unwrap();
        assert_eq!(a.eigenvalues, b.eigenvalues);
        assert_eq!(a.eigenvectors.data(), b.eigenvectors.data());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            sym_eig(&Matrix::zeros(2, 3)),
            Err(LinalgError::NotSquare { .. })
        ));
        let mut k = Matrix::identity(2);
        k.set(0, 1, f64::NAN);
        assert!(matches!(sym_eig(&k), Err(LinalgError::NonFinite)));
    }

    #[test]
    fn cosine_basics() {
        let e1 = [1.0, 0.0, 0.0];
        let e2 = [0.0, 1.0, 0.0];
        assert_eq!(cosine_similarity(&e1, &e1).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&e1, &e2).unwrap(), 0.0);
        let v = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(LinalgError::DimensionMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_bounded(
            a in proptest::collection::vec(-1e3..1e3f64, 1..32),
            b in proptest::collection::vec(-1e3..1e3f64, 1..32),
        ) {
            let n = a.len().min(b.len());
            let (a, b) = (&a[..n], &b[..n]);
            let ab = cosine_similarity(a, b).unwrap();
            let ba = cosine_similarity(b, a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab.abs() <= 1.0 + 1e-12);
        }
    }
}
