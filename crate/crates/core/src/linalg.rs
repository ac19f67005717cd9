//! Dense symmetric linear algebra used by the model generators, the sampler
//! and the oracles.
//!
//! Storage is dense and column-major (`nalgebra::DMatrix`). Symmetric
//! matrices keep both triangles populated; the upper triangle is the one
//! copied when a matrix is built from possibly unsymmetric input.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (failed at pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("matrix must be square with dimension >= 1, got {rows}x{cols}")]
    BadShape { rows: usize, cols: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
}

/// A real symmetric `k x k` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct SymMatrix {
    inner: DMatrix<f64>,
}

impl SymMatrix {
    /// Builds a symmetric matrix from the upper triangle of `m`; the lower
    /// triangle of the input is ignored.
    pub fn from_upper(mut m: DMatrix<f64>) -> Result<Self, LinalgError> {
        let (rows, cols) = m.shape();
        if rows != cols || rows == 0 {
            return Err(LinalgError::BadShape { rows, cols });
        }
        for j in 0..cols {
            for i in 0..=j {
                let v = m[(i, j)];
                if !v.is_finite() {
                    return Err(LinalgError::NonFinite { row: i, col: j });
                }
                m[(j, i)] = v;
            }
        }
        Ok(Self { inner: m })
    }

    /// Builds from a closure evaluated on the upper triangle only.
    pub fn from_fn(k: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(k >= 1, "dimension must be positive");
        let mut m = DMatrix::zeros(k, k);
        for j in 0..k {
            for i in 0..=j {
                let v = f(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Self { inner: m }
    }

    pub fn identity(k: usize) -> Self {
        assert!(k >= 1, "dimension must be positive");
        Self {
            inner: DMatrix::identity(k, k),
        }
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        Self::from_fn(d.len(), |i, j| if i == j { d[i] } else { 0.0 })
    }

    /// Block-diagonal assembly.
    pub fn block_diagonal(blocks: &[SymMatrix]) -> Self {
        let k: usize = blocks.iter().map(SymMatrix::dim).sum();
        let mut m = DMatrix::zeros(k, k);
        let mut offset = 0;
        for b in blocks {
            let s = b.dim();
            m.view_mut((offset, offset), (s, s)).copy_from(&b.inner);
            offset += s;
        }
        Self { inner: m }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.inner.nrows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.inner[(i, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.inner
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.inner
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        self.inner.trace()
    }

    /// `c * self`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            inner: &self.inner * c,
        }
    }

    /// `self + c * I`.
    pub fn shifted(&self, c: f64) -> Self {
        let mut m = self.inner.clone();
        for i in 0..self.dim() {
            m[(i, i)] += c;
        }
        Self { inner: m }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.inner.norm()
    }

    /// Extreme eigenvalues `(min, max)` via a full symmetric eigendecomposition.
    pub fn eigen_extremes(&self) -> (f64, f64) {
        let eig = SymmetricEigen::new(self.inner.clone());
        let lo = eig
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let hi = eig
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

impl TryFrom<Vec<Vec<f64>>> for SymMatrix {
    type Error = LinalgError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self, Self::Error> {
        let k = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != k) {
            return Err(LinalgError::BadShape {
                rows: k,
                cols: bad.len(),
            });
        }
        Self::from_upper(DMatrix::from_fn(k, k, |i, j| rows[i][j]))
    }
}

impl From<SymMatrix> for Vec<Vec<f64>> {
    fn from(s: SymMatrix) -> Self {
        (0..s.dim())
            .map(|i| (0..s.dim()).map(|j| s.get(i, j)).collect())
            .collect()
    }
}

/// Lower-triangular factor with strictly positive diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangular {
    inner: DMatrix<f64>,
}

impl LowerTriangular {
    pub fn dim(&self) -> usize {
        self.inner.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.inner
    }

    /// `L * L^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.inner * self.inner.transpose()
    }

    /// Solves `L L^T x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let k = self.dim();
        let l = &self.inner;
        for i in 0..k {
            let mut s = b[i];
            for m in 0..i {
                s -= l[(i, m)] * b[m];
            }
            b[i] = s / l[(i, i)];
        }
        for i in (0..k).rev() {
            let mut s = b[i];
            for m in i + 1..k {
                s -= l[(m, i)] * b[m];
            }
            b[i] = s / l[(i, i)];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JitterPolicy {
    None,
    /// Retry with a diagonal shift starting at `1e-10 * trace / k`, growing
    /// tenfold per try, for at most `max_tries` retries.
    Additive {
        max_tries: u32,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    pub factor: LowerTriangular,
    /// Diagonal shift added before the successful factorization (0 if none).
    pub jitter: f64,
}

fn try_cholesky(s: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>, LinalgError> {
    let k = s.nrows();
    let mut l = DMatrix::<f64>::zeros(k, k);
    for j in 0..k {
        let mut d = s[(j, j)] + jitter;
        for m in 0..j {
            d -= l[(j, m)] * l[(j, m)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { pivot: j });
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..k {
            let mut v = s[(i, j)];
            for m in 0..j {
                v -= l[(i, m)] * l[(j, m)];
            }
            l[(i, j)] = v / ljj;
        }
    }
    Ok(l)
}

pub fn cholesky(s: &SymMatrix, policy: JitterPolicy) -> Result<Cholesky, LinalgError> {
    match try_cholesky(s.as_matrix(), 0.0) {
        Ok(l) => Ok(Cholesky {
            factor: LowerTriangular { inner: l },
            jitter: 0.0,
        }),
        Err(e) => match policy {
            JitterPolicy::None => Err(e),
            JitterPolicy::Additive { max_tries } => {
                let k = s.dim() as f64;
                let base = 1e-10 * (s.trace().abs() / k).max(f64::MIN_POSITIVE);
                let mut last = e;
                let mut jitter = base;
                for _ in 0..max_tries {
                    match try_cholesky(s.as_matrix(), jitter) {
                        Ok(l) => {
                            return Ok(Cholesky {
                                factor: LowerTriangular { inner: l },
                                jitter,
                            })
                        }
                        Err(e) => last = e,
                    }
                    jitter *= 10.0;
                }
                Err(last)
            }
        },
    }
}

/// Inverse of a symmetric positive definite matrix through its Cholesky
/// factor, symmetrized afterwards.
pub fn invert_spd(s: &SymMatrix) -> Result<SymMatrix, LinalgError> {
    let chol = cholesky(s, JitterPolicy::None)?;
    let k = s.dim();
    let mut inv = DMatrix::<f64>::zeros(k, k);
    let mut col = vec![0.0; k];
    for j in 0..k {
        col.iter_mut().for_each(|v| *v = 0.0);
        col[j] = 1.0;
        chol.factor.solve_in_place(&mut col);
        inv.column_mut(j).copy_from_slice(&col);
    }
    let sym = (&inv + inv.transpose()) * 0.5;
    Ok(SymMatrix { inner: sym })
}

/// `lambda_max / lambda_min`.
pub fn condition_number(s: &SymMatrix) -> Result<f64, LinalgError> {
    let (lo, hi) = s.eigen_extremes();
    if !(lo > 0.0) {
        return Err(LinalgError::NotPositiveDefinite { pivot: 0 });
    }
    Ok(hi / lo)
}
