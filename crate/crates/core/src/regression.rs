//! Node-wise sparse regression: every variable is regressed on all the
//! others with the Lasso or the scaled Lasso.
//!
//! The Lasso objective is `(1 / 2n) ||y - D b||^2 + lambda ||b||_1`, solved
//! by cyclic coordinate descent in ascending column order with exact
//! soft-threshold updates and an incrementally maintained residual. The
//! node-wise drivers run the same iteration in covariance form.

mod gram;

use crate::sampler::{center, SampleMatrix};
use gram::NodeProblem;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegressionError {
    #[error("coordinate descent did not converge in {} sweeps", .fit.iterations)]
    DidNotConverge { fit: Box<LassoFit> },
    #[error("noise scale collapsed to {sigma:e} (response sd {sd_y:e})")]
    DegenerateScale { sigma: f64, sd_y: f64 },
    #[error("dimension mismatch: design has {rows} rows, response has {len}")]
    DimensionMismatch { rows: usize, len: usize },
    #[error("node-wise regression needs k >= 3 variables, got {0}")]
    TooFewVariables(usize),
    #[error("invalid penalty: {0}")]
    InvalidPenalty(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "lasso", alias = "GFC_L")]
    Lasso,
    #[serde(rename = "scaled-lasso", alias = "GFC_SL")]
    ScaledLasso,
}

impl Method {
    /// Short label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            Method::Lasso => "GFC_L",
            Method::ScaledLasso => "GFC_SL",
        }
    }
}

/// How the per-node penalty is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PenaltyPolicy {
    /// Lasso: `kappa * sd(X_i) * sqrt(2 log k / n)`.
    /// Scaled Lasso: `lambda0 = kappa * sqrt(2 log k / n)`.
    Universal { kappa: f64 },
    /// The same `lambda` (Lasso) or `lambda0` (scaled Lasso) for every node.
    Fixed { lambda: f64 },
    /// `Universal` with `kappa = b / (20 sqrt 2)`, `b` in `1..=b_max`, picked
    /// per data set by matching tail counts of the edge statistics to their
    /// null expectation. Resolved in [`crate::gfc::run_gfc`].
    DataDriven { b_max: u32 },
}

impl Default for PenaltyPolicy {
    fn default() -> Self {
        PenaltyPolicy::Universal { kappa: 1.0 }
    }
}

impl PenaltyPolicy {
    /// Short form for tables, e.g. `kappa=1` or `data-driven`.
    pub fn label(&self) -> String {
        match *self {
            PenaltyPolicy::Universal { kappa } => format!("kappa={kappa}"),
            PenaltyPolicy::Fixed { lambda } => format!("lambda={lambda}"),
            PenaltyPolicy::DataDriven { .. } => "data-driven".into(),
        }
    }

    /// Range check of the parameters.
    pub fn check(&self) -> Result<(), RegressionError> {
        let ok = match *self {
            PenaltyPolicy::Universal { kappa } => kappa.is_finite() && kappa >= 0.0,
            PenaltyPolicy::Fixed { lambda } => lambda.is_finite() && lambda >= 0.0,
            PenaltyPolicy::DataDriven { b_max } => b_max >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(RegressionError::InvalidPenalty(format!("{self:?}")))
        }
    }

    /// Check for a policy that can be applied to a fit directly.
    fn validate(&self) -> Result<(), RegressionError> {
        self.check()?;
        if let PenaltyPolicy::DataDriven { .. } = self {
            return Err(RegressionError::InvalidPenalty(
                "data-driven penalty must be resolved before fitting".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Stop when no coefficient moves more than this in a sweep.
    pub tol: f64,
    /// Sweeps per Lasso solve.
    pub max_iter: usize,
    /// Scale updates per scaled-Lasso solve.
    pub max_outer_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 10_000,
            max_outer_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub beta: Vec<f64>,
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Largest KKT violation at the returned point.
    pub kkt: f64,
}

#[inline]
fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn columns(design: &DMatrix<f64>) -> impl Iterator<Item = &[f64]> {
    let n = design.nrows();
    design.as_slice().chunks_exact(n.max(1))
}

fn check_dims(design: &DMatrix<f64>, y: &[f64]) -> Result<(), RegressionError> {
    if design.nrows() != y.len() {
        return Err(RegressionError::DimensionMismatch {
            rows: design.nrows(),
            len: y.len(),
        });
    }
    Ok(())
}

/// Lasso by cyclic coordinate descent, starting from zero.
pub fn lasso(
    design: &DMatrix<f64>,
    y: &[f64],
    lambda: f64,
    opts: &SolverOptions,
) -> Result<LassoFit, RegressionError> {
    lasso_from(design, y, lambda, opts, None)
}

/// Lasso started from `init` (warm start) when given.
///
/// Converged means the last sweep moved no coefficient by `tol` or more and
/// the KKT violation is at most `10 * tol * max_j ||D_j||^2 / n`.
pub fn lasso_from(
    design: &DMatrix<f64>,
    y: &[f64],
    lambda: f64,
    opts: &SolverOptions,
    init: Option<&[f64]>,
) -> Result<LassoFit, RegressionError> {
    check_dims(design, y)?;
    if !(lambda >= 0.0) {
        return Err(RegressionError::InvalidPenalty(format!(
            "lambda = {lambda}"
        )));
    }
    let n = design.nrows();
    let p = design.ncols();
    let nf = n as f64;
    let col_sq: Vec<f64> = columns(design).map(|c| dot(c, c) / nf).collect();
    let kkt_tol = 10.0
        * opts.tol
        * col_sq
            .iter()
            .copied()
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);

    let mut beta = match init {
        Some(b) => b.to_vec(),
        None => vec![0.0; p],
    };
    let mut resid = y.to_vec();
    if init.is_some() {
        for (j, col) in columns(design).enumerate() {
            if beta[j] != 0.0 {
                resid
                    .iter_mut()
                    .zip(col)
                    .for_each(|(r, x)| *r -= x * beta[j]);
            }
        }
    }

    let objective = |resid: &[f64], beta: &[f64]| {
        dot(resid, resid) / (2.0 * nf) + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
    };
    let mut prev_obj = objective(&resid, &beta);

    let cols: Vec<&[f64]> = columns(design).collect();
    // One coordinate pass over `idx`; returns the largest coefficient move.
    let sweep = |idx: &mut dyn Iterator<Item = usize>, beta: &mut [f64], resid: &mut [f64]| {
        let mut max_change = 0.0f64;
        for j in idx {
            let a = col_sq[j];
            if a == 0.0 {
                beta[j] = 0.0;
                continue;
            }
            let col = cols[j];
            let old = beta[j];
            let z = dot(col, resid) / nf + a * old;
            let new = soft_threshold(z, lambda) / a;
            let delta = new - old;
            if delta != 0.0 {
                resid.iter_mut().zip(col).for_each(|(r, x)| *r -= x * delta);
                beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        max_change
    };

    // Full sweeps alternate with passes over the current nonzero set until
    // that set settles. Every pass counts toward `max_iter`.
    let mut iterations = 0;
    let mut converged = false;
    let mut kkt = f64::INFINITY;
    while iterations < opts.max_iter {
        iterations += 1;
        let max_change = sweep(&mut (0..p), &mut beta, &mut resid);
        let obj = objective(&resid, &beta);
        debug_assert!(
            obj <= prev_obj * (1.0 + 1e-12) + 1e-300,
            "objective increased: {prev_obj} -> {obj}"
        );
        prev_obj = obj;
        if max_change < opts.tol {
            kkt = kkt_from_residual(design, &resid, lambda, &beta);
            if kkt <= kkt_tol {
                converged = true;
                break;
            }
        }
        let active: Vec<usize> = (0..p).filter(|&j| beta[j] != 0.0).collect();
        while iterations < opts.max_iter {
            iterations += 1;
            let change = sweep(&mut active.iter().copied(), &mut beta, &mut resid);
            if change < opts.tol {
                break;
            }
        }
    }
    if !converged {
        kkt = kkt_from_residual(design, &resid, lambda, &beta);
    }
    let fit = LassoFit {
        beta,
        lambda,
        iterations,
        converged,
        kkt,
    };
    if converged {
        Ok(fit)
    } else {
        Err(RegressionError::DidNotConverge { fit: Box::new(fit) })
    }
}

fn kkt_from_residual(design: &DMatrix<f64>, resid: &[f64], lambda: f64, beta: &[f64]) -> f64 {
    let nf = design.nrows() as f64;
    let grad: Vec<f64> = columns(design).map(|col| dot(col, resid) / nf).collect();
    kkt_from_gradient(&grad, lambda, beta)
}

/// `grad` is `D^T r / n` at `beta`.
fn kkt_from_gradient(grad: &[f64], lambda: f64, beta: &[f64]) -> f64 {
    grad.iter()
        .zip(beta)
        .map(|(&g, &b)| {
            if b != 0.0 {
                (g - lambda * b.signum()).abs()
            } else {
                (g.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// `X^T X / n` of the centered data.
fn gram_of(xc: &SampleMatrix) -> DMatrix<f64> {
    let v = xc.values();
    v.transpose() * v / xc.n() as f64
}

/// Largest violation of the Lasso optimality conditions at `beta`.
pub fn kkt_check(design: &DMatrix<f64>, y: &[f64], lambda: f64, beta: &[f64]) -> f64 {
    let mut resid = y.to_vec();
    for (col, &b) in columns(design).zip(beta) {
        if b != 0.0 {
            resid.iter_mut().zip(col).for_each(|(r, x)| *r -= x * b);
        }
    }
    kkt_from_residual(design, &resid, lambda, beta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledLassoFit {
    pub fit: LassoFit,
    pub sigma_hat: f64,
    pub outer_iterations: usize,
}

fn rms(v: &[f64]) -> f64 {
    (dot(v, v) / v.len() as f64).sqrt()
}

fn sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Scaled Lasso: alternates `b <- lasso(sigma * lambda0)` and
/// `sigma <- ||y - D b|| / sqrt(n)` from `sigma = sd(y)` until the relative
/// change in `sigma` drops below `tol`. The inner tolerance is `tol * sigma`,
/// which keeps the whole iteration equivariant under `y -> c y`.
pub fn scaled_lasso(
    design: &DMatrix<f64>,
    y: &[f64],
    lambda0: f64,
    opts: &SolverOptions,
) -> Result<ScaledLassoFit, RegressionError> {
    scaled_lasso_from(design, y, lambda0, opts, None)
}

/// Scaled Lasso started from `(beta, sigma)` when given.
pub fn scaled_lasso_from(
    design: &DMatrix<f64>,
    y: &[f64],
    lambda0: f64,
    opts: &SolverOptions,
    init: Option<(&[f64], f64)>,
) -> Result<ScaledLassoFit, RegressionError> {
    check_dims(design, y)?;
    if !(lambda0 >= 0.0) {
        return Err(RegressionError::InvalidPenalty(format!(
            "lambda0 = {lambda0}"
        )));
    }
    let sd_y = sd(y);
    let floor = 1e-12 * sd_y;
    if !(sd_y > 0.0) {
        return Err(RegressionError::DegenerateScale { sigma: sd_y, sd_y });
    }
    let mut sigma = sd_y;
    let mut beta: Option<Vec<f64>> = None;
    if let Some((b, s)) = init {
        if s.is_finite() && s > floor {
            sigma = s;
            beta = Some(b.to_vec());
        }
    }
    for outer in 1..=opts.max_outer_iter {
        let inner = SolverOptions {
            tol: opts.tol * sigma,
            ..*opts
        };
        let fit = lasso_from(design, y, sigma * lambda0, &inner, beta.as_deref())?;
        let resid: Vec<f64> = {
            let mut r = y.to_vec();
            for (col, &b) in columns(design).zip(&fit.beta) {
                if b != 0.0 {
                    r.iter_mut().zip(col).for_each(|(ri, x)| *ri -= x * b);
                }
            }
            r
        };
        let sigma_new = rms(&resid);
        if sigma_new < floor {
            return Err(RegressionError::DegenerateScale {
                sigma: sigma_new,
                sd_y,
            });
        }
        let done = (sigma_new - sigma).abs() < opts.tol * sigma;
        beta = Some(fit.beta.clone());
        sigma = sigma_new;
        if done {
            return Ok(ScaledLassoFit {
                fit,
                sigma_hat: sigma,
                outer_iterations: outer,
            });
        }
    }
    let mut fit =
        lasso_from(design, y, sigma * lambda0, opts, beta.as_deref()).unwrap_or_else(|e| match e {
            RegressionError::DidNotConverge { fit } => *fit,
            _ => unreachable!("inputs already validated"),
        });
    fit.converged = false;
    Err(RegressionError::DidNotConverge { fit: Box::new(fit) })
}

/// Regression of one variable on all the others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodewiseFit {
    pub node: usize,
    /// Coefficients over the other `k - 1` variables in natural order.
    pub beta: Vec<f64>,
    pub lambda_used: f64,
    pub method: Method,
    pub sigma_hat: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl NodewiseFit {
    /// Position of variable `j` in `beta`.
    #[inline]
    pub fn position_of(node: usize, j: usize) -> usize {
        debug_assert!(j != node);
        if j < node {
            j
        } else {
            j - 1
        }
    }

    /// Coefficient of variable `j != node` in this node's regression.
    #[inline]
    pub fn coef_of(&self, j: usize) -> f64 {
        self.beta[Self::position_of(self.node, j)]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub failed_nodes: Vec<usize>,
    pub max_iterations: usize,
}

impl ConvergenceReport {
    pub fn all_converged(&self) -> bool {
        self.failed_nodes.is_empty()
    }
}

/// Design matrix of all centered columns except `i`.
pub fn design_without(xc: &SampleMatrix, i: usize) -> DMatrix<f64> {
    xc.values().clone().remove_column(i)
}

/// Fits every node on the column-centered data. Nodes that hit the
/// iteration cap keep their last iterate, are flagged `converged = false`
/// and are listed in the report.
pub fn fit_all_nodes(
    x: &SampleMatrix,
    method: Method,
    policy: PenaltyPolicy,
    opts: &SolverOptions,
) -> Result<(Vec<NodewiseFit>, ConvergenceReport), RegressionError> {
    let k = x.k();
    if k < 3 {
        return Err(RegressionError::TooFewVariables(k));
    }
    policy.validate()?;
    let (xc, _) = center(x);
    let n = x.n() as f64;
    let universal = (2.0 * (k as f64).ln() / n).sqrt();

    let g = gram_of(&xc);
    let fits: Vec<Result<NodewiseFit, RegressionError>> = (0..k)
        .into_par_iter()
        .map(|i| {
            fit_node(
                &xc,
                &NodeProblem::new(&g, i),
                i,
                method,
                policy,
                universal,
                opts,
                None,
            )
        })
        .collect();
    let mut out = Vec::with_capacity(k);
    let mut report = ConvergenceReport::default();
    for f in fits {
        let f = f?;
        if !f.converged {
            report.failed_nodes.push(f.node);
        }
        report.max_iterations = report.max_iterations.max(f.iterations);
        out.push(f);
    }
    Ok((out, report))
}

/// Fits every node once per `Universal` kappa in `kappas`, each fit warm
/// started from the node's fit at the previous kappa. Returns one set of fits
/// per kappa, in the given order.
pub fn fit_all_nodes_path(
    x: &SampleMatrix,
    method: Method,
    kappas: &[f64],
    opts: &SolverOptions,
) -> Result<Vec<(Vec<NodewiseFit>, ConvergenceReport)>, RegressionError> {
    let k = x.k();
    if k < 3 {
        return Err(RegressionError::TooFewVariables(k));
    }
    for &kappa in kappas {
        PenaltyPolicy::Universal { kappa }.validate()?;
    }
    let (xc, _) = center(x);
    let universal = (2.0 * (k as f64).ln() / x.n() as f64).sqrt();

    let g = gram_of(&xc);
    let per_node: Vec<Result<Vec<NodewiseFit>, RegressionError>> = (0..k)
        .into_par_iter()
        .map(|i| {
            let problem = NodeProblem::new(&g, i);
            let mut path: Vec<NodewiseFit> = Vec::with_capacity(kappas.len());
            for &kappa in kappas {
                let policy = PenaltyPolicy::Universal { kappa };
                let fit = fit_node(
                    &xc,
                    &problem,
                    i,
                    method,
                    policy,
                    universal,
                    opts,
                    path.last(),
                )?;
                path.push(fit);
            }
            Ok(path)
        })
        .collect();
    let mut out: Vec<(Vec<NodewiseFit>, ConvergenceReport)> = kappas
        .iter()
        .map(|_| (Vec::with_capacity(k), ConvergenceReport::default()))
        .collect();
    for path in per_node {
        for (slot, f) in out.iter_mut().zip(path?) {
            if !f.converged {
                slot.1.failed_nodes.push(f.node);
            }
            slot.1.max_iterations = slot.1.max_iterations.max(f.iterations);
            slot.0.push(f);
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn fit_node(
    xc: &SampleMatrix,
    problem: &NodeProblem,
    i: usize,
    method: Method,
    policy: PenaltyPolicy,
    universal: f64,
    opts: &SolverOptions,
    warm: Option<&NodewiseFit>,
) -> Result<NodewiseFit, RegressionError> {
    let y = xc.column(i);
    let sd_y = rms(y);
    let k = xc.k();
    if sd_y == 0.0 {
        // Constant column: nothing to explain; the residual check downstream rejects it.
        return Ok(NodewiseFit {
            node: i,
            beta: vec![0.0; k - 1],
            lambda_used: 0.0,
            method,
            sigma_hat: (method == Method::ScaledLasso).then_some(0.0),
            iterations: 0,
            converged: true,
        });
    }
    match method {
        Method::Lasso => {
            let lambda = match policy {
                PenaltyPolicy::Universal { kappa } => kappa * sd_y * universal,
                PenaltyPolicy::Fixed { lambda } => lambda,
                PenaltyPolicy::DataDriven { .. } => unreachable!("rejected by validate"),
            };
            let node_opts = SolverOptions {
                tol: opts.tol * sd_y,
                ..*opts
            };
            let init = warm.map(|w| w.beta.as_slice());
            let fit = problem.lasso(lambda, &node_opts, init);
            Ok(NodewiseFit {
                node: i,
                beta: fit.beta,
                lambda_used: lambda,
                method,
                sigma_hat: None,
                iterations: fit.iterations,
                converged: fit.converged,
            })
        }
        Method::ScaledLasso => {
            let lambda0 = match policy {
                PenaltyPolicy::Universal { kappa } => kappa * universal,
                PenaltyPolicy::Fixed { lambda } => lambda,
                PenaltyPolicy::DataDriven { .. } => unreachable!("rejected by validate"),
            };
            let init = warm.and_then(|w| w.sigma_hat.map(|s| (w.beta.as_slice(), s)));
            let (fit, sigma_hat) = match problem.scaled_lasso(lambda0, opts, init) {
                Ok(s) => (s.fit, s.sigma_hat),
                Err(RegressionError::DidNotConverge { fit }) => {
                    let s = problem.rss(&fit.beta).sqrt();
                    (*fit, s)
                }
                Err(e) => return Err(e),
            };
            Ok(NodewiseFit {
                node: i,
                lambda_used: fit.lambda,
                beta: fit.beta,
                method,
                sigma_hat: Some(sigma_hat),
                iterations: fit.iterations,
                converged: fit.converged,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn residual_of(design: &DMatrix<f64>, y: &[f64], beta: &[f64]) -> Vec<f64> {
        let mut r = y.to_vec();
        for (col, &b) in columns(design).zip(beta) {
            if b != 0.0 {
                r.iter_mut().zip(col).for_each(|(ri, x)| *ri -= x * b);
            }
        }
        r
    }
    use crate::models::block_equicorr;
    use crate::rng::{stream_rng, PolarNormal, Stream};
    use crate::sampler::sample_mvn;
    use proptest::prelude::*;

    fn gaussian(n: usize, p: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let mut g = PolarNormal::new(stream_rng(seed, Stream::MonteCarlo));
        let mut d = DMatrix::from_fn(n, p, |_, _| g.next());
        for mut c in d.column_iter_mut() {
            let m = c.mean();
            c.add_scalar_mut(-m);
        }
        let mut y: Vec<f64> = (0..n)
            .map(|i| 1.5 * d[(i, 0)] - 0.7 * d[(i, 1 % p)] + g.next())
            .collect();
        let my = y.iter().sum::<f64>() / n as f64;
        y.iter_mut().for_each(|v| *v -= my);
        (d, y)
    }

    /// `n x p` design with `D^T D / n = I`, from modified Gram-Schmidt.
    fn orthonormal(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let (mut d, _) = gaussian(n, p, seed);
        for j in 0..p {
            for m in 0..j {
                let proj = d.column(j).dot(&d.column(m)) / n as f64;
                let cm = d.column(m).clone_owned();
                d.column_mut(j).axpy(-proj, &cm, 1.0);
            }
            let norm = (d.column(j).norm_squared() / n as f64).sqrt();
            d.column_mut(j).scale_mut(1.0 / norm);
        }
        d
    }

    #[test]
    fn large_lambda_gives_zero() {
        let (d, y) = gaussian(50, 8, 1);
        let lmax = columns(&d)
            .map(|c| dot(c, &y).abs() / 50.0)
            .fold(0.0, f64::max);
        let fit = lasso(&d, &y, lmax, &SolverOptions::default()).unwrap();
        assert!(fit.beta.iter().all(|&b| b == 0.0));
        assert_eq!(kkt_check(&d, &y, lmax, &fit.beta), 0.0);
    }

    #[test]
    fn zero_lambda_is_least_squares() {
        let (d, y) = gaussian(60, 5, 2);
        let opts = SolverOptions {
            tol: 1e-12,
            ..Default::default()
        };
        let fit = lasso(&d, &y, 0.0, &opts).unwrap();
        let ols = (d.transpose() * &d)
            .cholesky()
            .unwrap()
            .solve(&(d.transpose() * nalgebra::DVector::from_column_slice(&y)));
        for j in 0..5 {
            assert!(
                (fit.beta[j] - ols[j]).abs() < 1e-8,
                "{} vs {}",
                fit.beta[j],
                ols[j]
            );
        }
    }

    #[test]
    fn orthonormal_design_is_soft_threshold() {
        let d = orthonormal(40, 6, 3);
        let (_, y) = gaussian(40, 6, 4);
        let lambda = 0.2;
        let fit = lasso(&d, &y, lambda, &SolverOptions::default()).unwrap();
        for (j, col) in columns(&d).enumerate() {
            let expected = soft_threshold(dot(col, &y) / 40.0, lambda);
            assert!((fit.beta[j] - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn converged_fit_satisfies_kkt() {
        for seed in 0..10 {
            let (d, y) = gaussian(80, 20, 10 + seed);
            let opts = SolverOptions::default();
            let fit = lasso(&d, &y, 0.05, &opts).unwrap();
            let a_max = columns(&d).map(|c| dot(c, c) / 80.0).fold(0.0, f64::max);
            assert!(fit.kkt <= 10.0 * opts.tol * a_max);
            assert!(kkt_check(&d, &y, 0.05, &fit.beta) <= 10.0 * opts.tol * a_max);
        }
    }

    #[test]
    fn non_optimal_point_violates_kkt() {
        let (d, y) = gaussian(50, 6, 5);
        let beta = vec![0.3, -0.2, 0.1, 0.0, 0.5, -0.4];
        assert!(kkt_check(&d, &y, 0.1, &beta) > 1e-3);
    }

    #[test]
    fn warm_start_at_solution_is_stable() {
        let (d, y) = gaussian(70, 12, 6);
        let opts = SolverOptions::default();
        let a = lasso(&d, &y, 0.08, &opts).unwrap();
        let b = lasso_from(&d, &y, 0.08, &opts, Some(&a.beta)).unwrap();
        assert_eq!(b.iterations, 1);
        for (x, z) in a.beta.iter().zip(&b.beta) {
            assert!((x - z).abs() < opts.tol);
        }
    }

    #[test]
    fn iteration_cap_reports_partial_fit() {
        let (d, y) = gaussian(40, 10, 7);
        let opts = SolverOptions {
            tol: 1e-15,
            max_iter: 2,
            ..Default::default()
        };
        match lasso(&d, &y, 0.0, &opts) {
            Err(RegressionError::DidNotConverge { fit }) => {
                assert_eq!(fit.iterations, 2);
                assert!(!fit.converged);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn scaled_lasso_null_fixed_point() {
        let (d, _) = gaussian(50, 5, 8);
        let (_, noise) = gaussian(50, 1, 9);
        let fit = scaled_lasso(&d, &noise, 100.0, &SolverOptions::default()).unwrap();
        assert!(fit.fit.beta.iter().all(|&b| b == 0.0));
        assert!((fit.sigma_hat - rms(&noise)).abs() < 1e-15);
        assert_eq!(fit.outer_iterations, 1);
    }

    #[test]
    fn scaled_lasso_orthonormal_fixed_point() {
        let d = orthonormal(64, 5, 10);
        let (_, y) = gaussian(64, 5, 11);
        let lambda0 = 0.15;
        let opts = SolverOptions {
            tol: 1e-10,
            ..Default::default()
        };
        let fit = scaled_lasso(&d, &y, lambda0, &opts).unwrap();
        let s = fit.sigma_hat;
        for (j, col) in columns(&d).enumerate() {
            let expected = soft_threshold(dot(col, &y) / 64.0, s * lambda0);
            assert!((fit.fit.beta[j] - expected).abs() < 1e-8);
        }
        let resid = residual_of(&d, &y, &fit.fit.beta);
        assert!((rms(&resid) - s).abs() < 1e-8 * s);
    }

    #[test]
    fn scaled_lasso_rejects_constant_response() {
        let (d, _) = gaussian(20, 3, 12);
        assert!(matches!(
            scaled_lasso(&d, &[0.0; 20], 0.1, &SolverOptions::default()),
            Err(RegressionError::DegenerateScale { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn scaled_lasso_is_scale_equivariant(seed in 0u64..1000, c in 0.01f64..100.0) {
            let (d, y) = gaussian(60, 15, seed);
            let lambda0 = (2.0 * (15f64).ln() / 60.0).sqrt();
            let opts = SolverOptions::default();
            let a = scaled_lasso(&d, &y, lambda0, &opts).unwrap();
            let yc: Vec<f64> = y.iter().map(|v| v * c).collect();
            let b = scaled_lasso(&d, &yc, lambda0, &opts).unwrap();
            prop_assert!((b.sigma_hat / (c * a.sigma_hat) - 1.0).abs() < 1e-8);
            for (x, z) in a.fit.beta.iter().zip(&b.fit.beta) {
                prop_assert_eq!(*x == 0.0, *z == 0.0);
                prop_assert!((z - c * x).abs() <= 1e-8 * (c * x).abs().max(1e-300));
            }
        }
    }

    #[test]
    fn coef_of_indexing() {
        let f = NodewiseFit {
            node: 2,
            beta: vec![10.0, 11.0, 13.0, 14.0],
            lambda_used: 0.0,
            method: Method::Lasso,
            sigma_hat: None,
            iterations: 0,
            converged: true,
        };
        assert_eq!(f.coef_of(0), 10.0);
        assert_eq!(f.coef_of(1), 11.0);
        assert_eq!(f.coef_of(3), 13.0);
        assert_eq!(f.coef_of(4), 14.0);
    }

    #[test]
    fn null_model_is_sparse() {
        let m = block_equicorr(30, 1, 0.5).unwrap();
        let x = sample_mvn(&m, 400, 21).unwrap();
        let (fits, report) = fit_all_nodes(
            &x,
            Method::Lasso,
            PenaltyPolicy::default(),
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(report.all_converged());
        let nonzero = fits
            .iter()
            .flat_map(|f| &f.beta)
            .filter(|b| **b != 0.0)
            .count();
        assert!((nonzero as f64) / (30.0 * 29.0) < 0.05, "{nonzero}");
    }

    #[test]
    fn near_exact_relation_is_found() {
        let mut g = PolarNormal::new(stream_rng(3, Stream::MonteCarlo));
        let n = 200;
        let mut vals = DMatrix::zeros(n, 3);
        for i in 0..n {
            let a = g.next();
            let b = g.next();
            vals[(i, 0)] = a;
            vals[(i, 1)] = b;
            vals[(i, 2)] = a + 1e-3 * g.next();
        }
        let x = SampleMatrix::new(vals).unwrap();
        for method in [Method::Lasso, Method::ScaledLasso] {
            let (fits, _) = fit_all_nodes(
                &x,
                method,
                PenaltyPolicy::default(),
                &SolverOptions::default(),
            )
            .unwrap();
            let f = &fits[2];
            assert!(f.coef_of(0) > 0.8, "{method:?}: {:?}", f.beta);
            assert!(f.coef_of(1).abs() < 0.05, "{method:?}: {:?}", f.beta);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let m = block_equicorr(8, 4, 0.5).unwrap();
        let x = sample_mvn(&m, 100, 5).unwrap();
        let perm = [3usize, 7, 0, 5, 1, 6, 2, 4];
        let xp = x.permute_columns(&perm);
        for method in [Method::Lasso, Method::ScaledLasso] {
            let opts = SolverOptions {
                tol: 1e-12,
                ..Default::default()
            };
            let (a, _) = fit_all_nodes(&x, method, PenaltyPolicy::default(), &opts).unwrap();
            let (b, _) = fit_all_nodes(&xp, method, PenaltyPolicy::default(), &opts).unwrap();
            for (pos, &orig) in perm.iter().enumerate() {
                for (pos2, &orig2) in perm.iter().enumerate() {
                    if pos == pos2 {
                        continue;
                    }
                    let u = a[orig].coef_of(orig2);
                    let v = b[pos].coef_of(pos2);
                    assert!(
                        (u - v).abs() < 1e-8,
                        "{method:?} {orig},{orig2}: {u} vs {v}"
                    );
                }
            }
        }
    }

    #[test]
    fn fits_are_order_independent() {
        let m = block_equicorr(12, 3, 0.5).unwrap();
        let x = sample_mvn(&m, 80, 9).unwrap();
        let opts = SolverOptions::default();
        let (a, _) = fit_all_nodes(&x, Method::Lasso, PenaltyPolicy::default(), &opts).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let (b, _) = pool
            .install(|| fit_all_nodes(&x, Method::Lasso, PenaltyPolicy::default(), &opts))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn path_fits_match_cold_fits() {
        let m = crate::models::block_equicorr(12, 4, 0.5).unwrap();
        let x = crate::sampler::sample_mvn(&m, 80, 6).unwrap();
        let opts = SolverOptions::default();
        let kappas = [1.5, 1.0, 0.6, 0.3];
        for method in [Method::Lasso, Method::ScaledLasso] {
            let path = fit_all_nodes_path(&x, method, &kappas, &opts).unwrap();
            assert_eq!(path.len(), kappas.len());
            for ((fits, _), &kappa) in path.iter().zip(&kappas) {
                let (cold, _) =
                    fit_all_nodes(&x, method, PenaltyPolicy::Universal { kappa }, &opts).unwrap();
                for (a, b) in fits.iter().zip(&cold) {
                    assert_eq!(a.node, b.node);
                    for (u, v) in a.beta.iter().zip(&b.beta) {
                        assert!((u - v).abs() < 1e-5, "{method:?} kappa {kappa}: {u} vs {v}");
                    }
                }
            }
        }
    }

    #[test]
    fn node_fits_match_design_solvers() {
        let m = crate::models::block_ar1(15, 5, 0.5).unwrap();
        let x = crate::sampler::sample_mvn(&m, 90, 12).unwrap();
        let (xc, _) = center(&x);
        let opts = SolverOptions::default();
        let universal = (2.0 * 15f64.ln() / 90.0).sqrt();
        let (lasso_fits, _) =
            fit_all_nodes(&x, Method::Lasso, PenaltyPolicy::default(), &opts).unwrap();
        let (sl_fits, _) =
            fit_all_nodes(&x, Method::ScaledLasso, PenaltyPolicy::default(), &opts).unwrap();
        for i in 0..15 {
            let d = design_without(&xc, i);
            let y = xc.column(i);
            let a = lasso(&d, y, lasso_fits[i].lambda_used, &opts).unwrap();
            let b = scaled_lasso(&d, y, universal, &opts).unwrap();
            for (u, v) in a.beta.iter().zip(&lasso_fits[i].beta) {
                assert!((u - v).abs() < 1e-5, "lasso node {i}: {u} vs {v}");
            }
            for (u, v) in b.fit.beta.iter().zip(&sl_fits[i].beta) {
                assert!((u - v).abs() < 1e-5, "scaled node {i}: {u} vs {v}");
            }
            assert!((b.sigma_hat - sl_fits[i].sigma_hat.unwrap()).abs() < 1e-6);
            assert!(kkt_check(&d, y, lasso_fits[i].lambda_used, &lasso_fits[i].beta) < 1e-5);
        }
    }
}
