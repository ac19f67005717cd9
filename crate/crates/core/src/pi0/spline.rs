//! Natural cubic smoothing spline with a target effective degrees of freedom.
//!
//! With knots at the data abscissae the penalized least-squares solution is
//! `g = (I + a K)^{-1} y`, `K = Q R^{-1} Q^T` (Reinsch form). The effective
//! degrees of freedom are `tr (I + a K)^{-1}`; `a` is found by bisection on
//! `log a` using the eigenvalues of `K`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("need at least 4 strictly increasing abscissae, got {0}")]
    TooFewPoints(usize),
    #[error("abscissae must be strictly increasing and finite")]
    NotIncreasing,
    #[error("x and y lengths differ: {x} vs {y}")]
    LengthMismatch { x: usize, y: usize },
    #[error("degrees of freedom must lie in [2, {n}], got {dof}")]
    InvalidDof { dof: f64, n: usize },
}

#[derive(Debug, Clone)]
pub struct SmoothingSpline {
    pub knots: Vec<f64>,
    pub fitted: Vec<f64>,
    /// Second derivatives at the knots (zero at both ends).
    pub gamma: Vec<f64>,
    pub smoothing: f64,
    pub dof: f64,
}

impl SmoothingSpline {
    pub fn fit(x: &[f64], y: &[f64], dof: f64) -> Result<Self, SplineError> {
        let n = x.len();
        if n != y.len() {
            return Err(SplineError::LengthMismatch { x: n, y: y.len() });
        }
        if n < 4 {
            return Err(SplineError::TooFewPoints(n));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) || x.iter().any(|v| !v.is_finite()) {
            return Err(SplineError::NotIncreasing);
        }
        if !(dof >= 2.0 && dof <= n as f64) {
            return Err(SplineError::InvalidDof { dof, n });
        }

        let (q, r) = reinsch_matrices(x);
        let r_inv = r
            .clone()
            .try_inverse()
            .expect("R is strictly diagonally dominant");
        let k = &q * &r_inv * q.transpose();
        let k = (&k + k.transpose()) * 0.5;
        let eig = SymmetricEigen::new(k);
        let d: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();

        let smoothing = solve_smoothing(&d, dof);
        let u = &eig.eigenvectors;
        let yv = DVector::from_column_slice(y);
        let coords = u.transpose() * &yv;
        let shrunk = DVector::from_iterator(
            n,
            coords.iter().zip(&d).map(|(c, di)| {
                if smoothing.is_infinite() {
                    if *di <= zero_eigen_cutoff(&d) {
                        *c
                    } else {
                        0.0
                    }
                } else {
                    c / (1.0 + smoothing * di)
                }
            }),
        );
        let g = u * shrunk;
        let inner = &r_inv * (q.transpose() * &g);
        let mut gamma = vec![0.0; n];
        gamma[1..n - 1].copy_from_slice(inner.as_slice());
        let achieved = effective_dof(&d, smoothing);
        Ok(Self {
            knots: x.to_vec(),
            fitted: g.as_slice().to_vec(),
            gamma,
            smoothing,
            dof: achieved,
        })
    }

    /// Value at `t`; linear beyond the end knots.
    pub fn evaluate(&self, t: f64) -> f64 {
        let x = &self.knots;
        let g = &self.fitted;
        let n = x.len();
        if t <= x[0] {
            let h = x[1] - x[0];
            let slope = (g[1] - g[0]) / h - h * self.gamma[1] / 6.0;
            return g[0] + (t - x[0]) * slope;
        }
        if t >= x[n - 1] {
            let h = x[n - 1] - x[n - 2];
            let slope = (g[n - 1] - g[n - 2]) / h + h * self.gamma[n - 2] / 6.0;
            return g[n - 1] + (t - x[n - 1]) * slope;
        }
        let i = x.partition_point(|&v| v <= t) - 1;
        let h = x[i + 1] - x[i];
        let (a, b) = (t - x[i], x[i + 1] - t);
        (a * g[i + 1] + b * g[i]) / h
            - a * b / 6.0 * ((1.0 + a / h) * self.gamma[i + 1] + (1.0 + b / h) * self.gamma[i])
    }
}

/// `Q` (n x (n-2)) and `R` ((n-2) x (n-2)) of the roughness penalty.
fn reinsch_matrices(x: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let mut q = DMatrix::zeros(n, n - 2);
    let mut r = DMatrix::zeros(n - 2, n - 2);
    for j in 1..n - 1 {
        let c = j - 1;
        q[(j - 1, c)] = 1.0 / h[j - 1];
        q[(j, c)] = -1.0 / h[j - 1] - 1.0 / h[j];
        q[(j + 1, c)] = 1.0 / h[j];
        r[(c, c)] = (h[j - 1] + h[j]) / 3.0;
        if c + 1 < n - 2 {
            r[(c, c + 1)] = h[j] / 6.0;
            r[(c + 1, c)] = h[j] / 6.0;
        }
    }
    (q, r)
}

fn zero_eigen_cutoff(d: &[f64]) -> f64 {
    let max = d.iter().cloned().fold(0.0, f64::max);
    max * 1e-10
}

fn effective_dof(d: &[f64], a: f64) -> f64 {
    if a.is_infinite() {
        let cut = zero_eigen_cutoff(d);
        return d.iter().filter(|&&v| v <= cut).count() as f64;
    }
    d.iter().map(|di| 1.0 / (1.0 + a * di)).sum()
}

fn solve_smoothing(d: &[f64], dof: f64) -> f64 {
    let n = d.len() as f64;
    if dof >= n {
        return 0.0;
    }
    if dof <= 2.0 {
        return f64::INFINITY;
    }
    let cut = zero_eigen_cutoff(d);
    let dmax = d.iter().cloned().fold(0.0, f64::max);
    let dmin = d
        .iter()
        .cloned()
        .filter(|&v| v > cut)
        .fold(f64::INFINITY, f64::min);
    let (mut lo, mut hi) = ((1e-8 / dmax).ln(), (1e8 / dmin).ln());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if effective_dof(d, mid.exp()) > dof {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).exp()
}
