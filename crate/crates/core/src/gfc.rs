//! Edge-wise test statistics from node-wise regression residuals and the
//! FDR-calibrated rejection threshold.
//!
//! For a pair `i < j` the statistic is
//!
//! ```text
//! T1_ij = r_ij + r_ii * b_j[i] + r_jj * b_i[j]
//! T_ij  = sqrt(n / (r_ii r_jj)) * T1_ij
//! p_ij  = 2 (1 - Phi(|T_ij|))
//! ```
//!
//! with `r` the residual covariance (1/n normalization) and `b_i[j]` the
//! coefficient of variable `j` in the regression of variable `i`.

use crate::dist::{two_sided_tail, two_sided_tail_inv};
use crate::linalg::SymMatrix;
use crate::models::n_pairs;
use crate::regression::{
    fit_all_nodes, fit_all_nodes_path, ConvergenceReport, Method, NodewiseFit, PenaltyPolicy,
    RegressionError, SolverOptions,
};
use crate::sampler::{center, SampleMatrix};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GfcError {
    #[error("residual variance of variable {node} is degenerate ({r_ii:e})")]
    DegenerateResidual { node: usize, r_ii: f64 },
    #[error("expected {expected} node fits, got {got}")]
    MissingFits { expected: usize, got: usize },
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("need n >= 10 and k >= 3, got n = {n}, k = {k}")]
    TooSmall { n: usize, k: usize },
    #[error(transparent)]
    Regression(#[from] RegressionError),
}

/// Row-major index of pair `(i, j)`, `i < j`, among the `k (k-1) / 2` pairs.
#[inline]
pub fn pair_index(k: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < k);
    i * k - i * (i + 1) / 2 + (j - i - 1)
}

/// All pairs `(i, j)`, `i < j`, in row-major order.
pub fn pairs(k: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..k).flat_map(move |i| (i + 1..k).map(move |j| (i, j)))
}

#[derive(Debug, Clone)]
pub struct ResidualSet {
    /// `n x k` residuals.
    pub eps_hat: DMatrix<f64>,
    pub r_hat: SymMatrix,
}

/// Residuals of every node-wise regression on the centered data, and their
/// covariance.
pub fn residuals(x: &SampleMatrix, fits: &[NodewiseFit]) -> Result<ResidualSet, GfcError> {
    let (n, k) = (x.n(), x.k());
    if fits.len() != k {
        return Err(GfcError::MissingFits {
            expected: k,
            got: fits.len(),
        });
    }
    let (xc, _) = center(x);
    let mut eps = xc.values().clone();
    for fit in fits {
        let i = fit.node;
        let mut col = eps.column(i).clone_owned();
        for j in (0..k).filter(|&j| j != i) {
            let b = fit.coef_of(j);
            if b != 0.0 {
                col.axpy(-b, &xc.values().column(j), 1.0);
            }
        }
        eps.set_column(i, &col);
    }
    let r = (eps.transpose() * &eps) / n as f64;
    let r_hat = SymMatrix::from_upper(r).expect("finite residual covariance");
    for i in 0..k {
        let xi = xc.column(i);
        let var = xi.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let r_ii = r_hat.get(i, i);
        if !(r_ii > 1e-12 * var) {
            return Err(GfcError::DegenerateResidual { node: i, r_ii });
        }
    }
    Ok(ResidualSet {
        eps_hat: eps,
        r_hat,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResults {
    pub k: usize,
    pub n: usize,
    /// Row-major upper triangle, see [`pair_index`].
    pub t1: Vec<f64>,
    pub t: Vec<f64>,
    pub p: Vec<f64>,
    pub method: Option<Method>,
}

impl TestResults {
    pub fn n_pairs(&self) -> usize {
        self.t.len()
    }

    pub fn get(&self, i: usize, j: usize) -> (f64, f64) {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        let idx = pair_index(self.k, a, b);
        (self.t[idx], self.p[idx])
    }

    /// CSV with header `i,j,T,p`; variables numbered from 1.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "i,j,T,p")?;
        for (idx, (i, j)) in pairs(self.k).enumerate() {
            writeln!(w, "{},{},{},{}", i + 1, j + 1, self.t[idx], self.p[idx])?;
        }
        Ok(())
    }
}

/// Test statistics and two-sided p-values for every pair.
pub fn t_statistics(res: &ResidualSet, fits: &[NodewiseFit]) -> Result<TestResults, GfcError> {
    let k = res.r_hat.dim();
    let n = res.eps_hat.nrows();
    if fits.len() != k {
        return Err(GfcError::MissingFits {
            expected: k,
            got: fits.len(),
        });
    }
    let mut by_node: Vec<&NodewiseFit> = fits.iter().collect();
    by_node.sort_by_key(|f| f.node);
    let r = &res.r_hat;
    for i in 0..k {
        let r_ii = r.get(i, i);
        if !(r_ii > 0.0) {
            return Err(GfcError::DegenerateResidual { node: i, r_ii });
        }
    }
    let nf = n as f64;
    let rows: Vec<Vec<(f64, f64, f64)>> = (0..k)
        .into_par_iter()
        .map(|i| {
            (i + 1..k)
                .map(|j| {
                    let (r_ii, r_jj) = (r.get(i, i), r.get(j, j));
                    let t1 =
                        r.get(i, j) + r_ii * by_node[j].coef_of(i) + r_jj * by_node[i].coef_of(j);
                    let t = (nf / (r_ii * r_jj)).sqrt() * t1;
                    (t1, t, two_sided_tail(t))
                })
                .collect()
        })
        .collect();
    let total = n_pairs(k);
    let (mut t1, mut t, mut p) = (
        Vec::with_capacity(total),
        Vec::with_capacity(total),
        Vec::with_capacity(total),
    );
    for (a, b, c) in rows.into_iter().flatten() {
        t1.push(a);
        t.push(b);
        p.push(c);
    }
    Ok(TestResults {
        k,
        n,
        t1,
        t,
        p,
        method: by_node.first().map(|f| f.method),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdrResult {
    pub alpha: f64,
    pub t_hat: f64,
    /// Pairs with `|T_ij| > t_hat`, 0-based, row-major.
    pub rejected: Vec<(usize, usize)>,
    pub infimum_found: bool,
}

#[derive(Serialize)]
struct FdrJson<'a> {
    schema: u32,
    alpha: f64,
    t_hat: f64,
    infimum_found: bool,
    n_rejected: usize,
    edges: &'a [[usize; 2]],
}

impl FdrResult {
    /// `{schema, alpha, t_hat, infimum_found, n_rejected, edges}` with
    /// 1-based variable numbers.
    pub fn to_json(&self) -> serde_json::Value {
        let edges: Vec<[usize; 2]> = self.rejected.iter().map(|&(i, j)| [i + 1, j + 1]).collect();
        serde_json::to_value(FdrJson {
            schema: 1,
            alpha: self.alpha,
            t_hat: self.t_hat,
            infimum_found: self.infimum_found,
            n_rejected: self.rejected.len(),
            edges: &edges,
        })
        .expect("serializable")
    }
}

/// Upper end of the threshold search, `2 sqrt(log k)`.
pub fn threshold_cap(k: usize) -> f64 {
    2.0 * (k as f64).ln().sqrt()
}

/// Smallest `t` in `[0, 2 sqrt(log k)]` with
/// `G(t) N / max(1, #{|T| > t}) <= alpha`, where `G(t) = P(|Z| > t)`.
///
/// The rejection count is constant between consecutive distinct `|T|`
/// values, and `G` is continuous and decreasing, so on each such piece the
/// smallest feasible `t` is either its left end or `G^{-1}(alpha R / N)`.
pub fn fdr_threshold(tr: &TestResults, alpha: f64) -> Result<FdrResult, GfcError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(GfcError::InvalidAlpha(alpha));
    }
    let (t_hat, found) = threshold_search(&tr.t, tr.k, alpha);
    let rejected = pairs(tr.k)
        .zip(&tr.t)
        .filter(|(_, t)| t.abs() > t_hat)
        .map(|(ij, _)| ij)
        .collect();
    Ok(FdrResult {
        alpha,
        t_hat,
        rejected,
        infimum_found: found,
    })
}

fn threshold_search(t: &[f64], k: usize, alpha: f64) -> (f64, bool) {
    let cap = threshold_cap(k);
    let total = t.len();
    if total == 0 {
        return (cap, false);
    }
    let mut abs: Vec<f64> = t.par_iter().map(|v| v.abs()).collect();
    abs.par_sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite statistics"));
    let nf = total as f64;

    let mut lo = 0.0f64;
    // Number of |T| <= lo.
    let mut at_or_below = abs.partition_point(|&v| v <= lo);
    loop {
        if lo > cap {
            return (cap, false);
        }
        let hi = abs.get(at_or_below).copied().unwrap_or(f64::INFINITY);
        let rejections = (total - at_or_below).max(1) as f64;
        let cand = lo.max(two_sided_tail_inv(alpha * rejections / nf));
        if cand < hi && cand <= cap {
            return (cand, true);
        }
        if hi.is_infinite() {
            return (cap, false);
        }
        lo = hi;
        at_or_below += abs[at_or_below..].partition_point(|&v| v <= lo);
    }
}

/// Output of the full testing pipeline on one data set.
#[derive(Debug, Clone)]
pub struct GfcRun {
    pub tests: TestResults,
    pub fdr: FdrResult,
    pub fits: Vec<NodewiseFit>,
    pub convergence: ConvergenceReport,
    pub method: Method,
    pub policy: PenaltyPolicy,
    /// The penalty actually used; differs from `policy` only for `DataDriven`.
    pub resolved_policy: PenaltyPolicy,
    pub seed: Option<u64>,
}

/// Grid size for [`PenaltyPolicy::DataDriven`] when none is given.
pub const DEFAULT_B_MAX: u32 = 40;

/// Kappa of grid point `b` in the data-driven search.
pub fn data_driven_kappa(b: u32) -> f64 {
    b as f64 / (20.0 * std::f64::consts::SQRT_2)
}

/// Squared relative deviation of tail counts from their null expectation,
/// summed over ten levels between `G(sqrt(log k))` / 10 and `G(sqrt(log k))`,
/// where `G` is the two-sided normal tail.
pub fn tail_calibration_score(t: &[f64], k: usize) -> f64 {
    let total = t.len() as f64;
    let base = two_sided_tail((k as f64).ln().sqrt());
    (1..=10)
        .map(|l| {
            let level = base * l as f64 / 10.0;
            let cut = two_sided_tail_inv(level);
            let count = t.iter().filter(|v| v.abs() >= cut).count() as f64;
            (count / (level * total) - 1.0).powi(2)
        })
        .sum()
}

/// Node-wise fits, residuals, statistics and the FDR threshold.
pub fn run_gfc(
    x: &SampleMatrix,
    method: Method,
    policy: PenaltyPolicy,
    alpha: f64,
    opts: &SolverOptions,
) -> Result<GfcRun, GfcError> {
    if x.n() < 10 || x.k() < 3 {
        return Err(GfcError::TooSmall { n: x.n(), k: x.k() });
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(GfcError::InvalidAlpha(alpha));
    }
    let (fits, convergence, mut tests, resolved) = match policy {
        PenaltyPolicy::DataDriven { b_max } => {
            if b_max == 0 {
                return Err(
                    RegressionError::InvalidPenalty("b_max must be positive".into()).into(),
                );
            }
            // Largest penalty first so each fit warm starts from a sparser one.
            let bs: Vec<u32> = (1..=b_max).rev().collect();
            let kappas: Vec<f64> = bs.iter().map(|&b| data_driven_kappa(b)).collect();
            let path = fit_all_nodes_path(x, method, &kappas, opts)?;
            let mut best: Option<(f64, Stage)> = None;
            for ((fits, convergence), kappa) in path.into_iter().zip(kappas) {
                let res = residuals(x, &fits)?;
                let tests = t_statistics(&res, &fits)?;
                let score = tail_calibration_score(&tests.t, x.k());
                // `<=` keeps the smallest b among ties.
                if best.as_ref().map_or(true, |(s, _)| score <= *s) {
                    let policy = PenaltyPolicy::Universal { kappa };
                    best = Some((score, (fits, convergence, tests, policy)));
                }
            }
            best.expect("b_max >= 1").1
        }
        _ => fit_and_test(x, method, policy, opts)?,
    };
    tests.method = Some(method);
    let fdr = fdr_threshold(&tests, alpha)?;
    Ok(GfcRun {
        tests,
        fdr,
        fits,
        convergence,
        method,
        policy,
        resolved_policy: resolved,
        seed: x.seed,
    })
}

type Stage = (
    Vec<NodewiseFit>,
    ConvergenceReport,
    TestResults,
    PenaltyPolicy,
);

fn fit_and_test(
    x: &SampleMatrix,
    method: Method,
    policy: PenaltyPolicy,
    opts: &SolverOptions,
) -> Result<Stage, GfcError> {
    let (fits, convergence) = fit_all_nodes(x, method, policy, opts)?;
    let res = residuals(x, &fits)?;
    let tests = t_statistics(&res, &fits)?;
    Ok((fits, convergence, tests, policy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::two_sided_tail;
    use crate::models::{block_equicorr, GraphModel};
    use crate::rng::{stream_rng, PolarNormal, Stream};
    use crate::sampler::sample_mvn;
    use rand::Rng;

    fn zero_fits(k: usize) -> Vec<NodewiseFit> {
        (0..k)
            .map(|i| NodewiseFit {
                node: i,
                beta: vec![0.0; k - 1],
                lambda_used: 0.0,
                method: Method::Lasso,
                sigma_hat: None,
                iterations: 0,
                converged: true,
            })
            .collect()
    }

    fn results_from(t: Vec<f64>, k: usize) -> TestResults {
        let p = t.iter().map(|v| two_sided_tail(*v)).collect();
        TestResults {
            k,
            n: 100,
            t1: t.clone(),
            t,
            p,
            method: None,
        }
    }

    /// First grid point (step `h`) on `[0, cap]` meeting the criterion.
    fn grid_threshold(t: &[f64], k: usize, alpha: f64, h: f64) -> Option<f64> {
        let cap = threshold_cap(k);
        let nf = t.len() as f64;
        let steps = (cap / h).floor() as usize;
        (0..=steps).map(|s| s as f64 * h).find(|&x| {
            let r = t.iter().filter(|v| v.abs() > x).count().max(1) as f64;
            two_sided_tail(x) * nf / r <= alpha
        })
    }

    #[test]
    fn pair_indexing_is_row_major() {
        let k = 6;
        for (idx, (i, j)) in pairs(k).enumerate() {
            assert_eq!(pair_index(k, i, j), idx);
        }
        assert_eq!(pairs(k).count(), 15);
    }

    #[test]
    fn zero_coefficients_give_centered_covariance() {
        let vals = DMatrix::from_row_slice(
            4,
            3,
            &[1.0, 2.0, 0.5, 3.0, 1.0, 1.5, 2.0, 4.0, -1.0, 6.0, 1.0, 3.0],
        );
        let x = SampleMatrix::new(vals.clone()).unwrap();
        let res = residuals(&x, &zero_fits(3)).unwrap();
        let (xc, _) = center(&x);
        let expected = xc.values().transpose() * xc.values() / 4.0;
        assert!((res.r_hat.as_matrix() - expected).amax() < 1e-14);
    }

    #[test]
    fn hand_worked_three_by_three() {
        // Columns: x1 = (1, 2, 3), x2 = (0, 1, 5), x3 = (2, 2, 5).
        // Centered: x1 = (-1, 0, 1), x2 = (-2, -1, 3), x3 = (-1, -1, 2).
        let x = SampleMatrix::new(DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.0, 2.0, 2.0, 1.0, 2.0, 3.0, 5.0, 5.0],
        ))
        .unwrap();
        let mut fits = zero_fits(3);
        fits[0].beta = vec![0.5, 0.0]; // x1 on (x2, x3)
        fits[2].beta = vec![0.0, 1.0]; // x3 on (x1, x2)
        let res = residuals(&x, &fits).unwrap();
        // e1 = x1 - 0.5 x2 = (0, 0.5, -0.5); e2 = x2; e3 = x3 - x2 = (1, 0, -1).
        let e = [[0.0, -2.0, 1.0], [0.5, -1.0, 0.0], [-0.5, 3.0, -1.0]];
        for a in 0..3 {
            for b in 0..3 {
                let want: f64 = (0..3).map(|l| e[l][a] * e[l][b]).sum::<f64>() / 3.0;
                assert!((res.r_hat.get(a, b) - want).abs() < 1e-15, "({a},{b})");
            }
        }
        assert!((res.r_hat.get(0, 0) - 0.5 / 3.0).abs() < 1e-15);
        assert!((res.r_hat.get(0, 2) - 0.5 / 3.0).abs() < 1e-15);
        assert!((res.r_hat.get(1, 1) - 14.0 / 3.0).abs() < 1e-15);

        // T1_13 = r13 + r11 * b_3[1] + r33 * b_1[3] = 1/6 + 0 + 0.
        let tr = t_statistics(&res, &fits).unwrap();
        let idx = pair_index(3, 0, 2);
        assert!((tr.t1[idx] - 0.5 / 3.0).abs() < 1e-15);
        // T1_12 = r12 + r11 * b_2[1] + r22 * b_1[2] = -2/3 + 0 + (14/3) * 0.5.
        let idx = pair_index(3, 0, 1);
        assert!((tr.t1[idx] - (-2.0 / 3.0 + 7.0 / 3.0)).abs() < 1e-14);
        // T1_23 = r23 + r22 * b_3[2] + r33 * b_2[3] = r23 + (14/3) * 1.
        let idx = pair_index(3, 1, 2);
        assert!((tr.t1[idx] - (res.r_hat.get(1, 2) + 14.0 / 3.0)).abs() < 1e-14);
        let r22 = res.r_hat.get(1, 1);
        let r33 = res.r_hat.get(2, 2);
        assert!((tr.t[idx] - (3.0 / (r22 * r33)).sqrt() * tr.t1[idx]).abs() < 1e-13);
    }

    #[test]
    fn perfect_fit_is_degenerate() {
        let x = SampleMatrix::new(DMatrix::from_row_slice(
            4,
            3,
            &[1.0, 0.0, 1.0, 2.0, 1.0, 3.0, 0.0, 3.0, 3.0, 5.0, 1.0, 6.0],
        ))
        .unwrap();
        let mut fits = zero_fits(3);
        fits[2].beta = vec![1.0, 1.0];
        assert!(matches!(
            residuals(&x, &fits),
            Err(GfcError::DegenerateResidual { node: 2, .. })
        ));
        let constant = SampleMatrix::new(DMatrix::from_element(5, 3, 2.0)).unwrap();
        assert!(matches!(
            residuals(&constant, &zero_fits(3)),
            Err(GfcError::DegenerateResidual { node: 0, .. })
        ));
    }

    #[test]
    fn uncorrelated_residuals_give_unit_p() {
        let res = ResidualSet {
            eps_hat: DMatrix::zeros(10, 3),
            r_hat: SymMatrix::identity(3),
        };
        let tr = t_statistics(&res, &zero_fits(3)).unwrap();
        assert!(tr.t.iter().all(|&t| t == 0.0));
        assert!(tr.p.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn pvalues_match_statistics() {
        let m = block_equicorr(12, 4, 0.5).unwrap();
        let x = sample_mvn(&m, 120, 3).unwrap();
        let run = run_gfc(
            &x,
            Method::Lasso,
            PenaltyPolicy::default(),
            0.1,
            &SolverOptions::default(),
        )
        .unwrap();
        for (t, p) in run.tests.t.iter().zip(&run.tests.p) {
            assert!((0.0..=1.0).contains(p));
            let expected = 2.0 * (1.0 - crate::dist::normal_cdf(t.abs()));
            assert!((p - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn negating_a_column_flips_its_statistics() {
        let m = block_equicorr(9, 3, 0.5).unwrap();
        let x = sample_mvn(&m, 150, 8).unwrap();
        let flip = 4;
        let mut vals = x.values().clone();
        vals.column_mut(flip).neg_mut();
        let xf = SampleMatrix::new(vals).unwrap();
        for method in [Method::Lasso, Method::ScaledLasso] {
            let opts = SolverOptions::default();
            let a = run_gfc(&x, method, PenaltyPolicy::default(), 0.1, &opts).unwrap();
            let b = run_gfc(&xf, method, PenaltyPolicy::default(), 0.1, &opts).unwrap();
            for (idx, (i, j)) in pairs(9).enumerate() {
                let sign = if i == flip || j == flip { -1.0 } else { 1.0 };
                assert!((a.tests.t[idx] - sign * b.tests.t[idx]).abs() < 1e-10);
                assert!((a.tests.p[idx] - b.tests.p[idx]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn global_null_rejection_rate() {
        let m: GraphModel = block_equicorr(50, 1, 0.5).unwrap();
        let x = sample_mvn(&m, 200, 11).unwrap();
        let run = run_gfc(
            &x,
            Method::Lasso,
            PenaltyPolicy::default(),
            0.1,
            &SolverOptions::default(),
        )
        .unwrap();
        let frac =
            run.tests.p.iter().filter(|&&p| p <= 0.05).count() as f64 / run.tests.p.len() as f64;
        assert!((frac - 0.05).abs() <= 0.02, "fraction {frac}");
    }

    #[test]
    fn threshold_examples() {
        let tr = results_from(vec![10.0, -10.0, 10.0], 3);
        let f = fdr_threshold(&tr, 0.1).unwrap();
        assert!(f.infimum_found);
        assert!((f.t_hat - 1.644_853_626_951_472_2).abs() < 1e-12);
        assert_eq!(f.rejected.len(), 3);
        // Oracle: the grid search lands within one step above.
        let g = grid_threshold(&tr.t, 3, 0.1, 1e-4).unwrap();
        assert!(g >= f.t_hat - 1e-12 && g - f.t_hat <= 1e-4);

        let zero = results_from(vec![0.0; 3], 3);
        let f = fdr_threshold(&zero, 0.05).unwrap();
        assert!(!f.infimum_found);
        assert!((f.t_hat - 2.0 * (3f64).ln().sqrt()).abs() < 1e-15);
        assert!((f.t_hat - 2.0963).abs() < 1e-4);
        assert!(f.rejected.is_empty());
        assert!(grid_threshold(&zero.t, 3, 0.05, 1e-4).is_none());

        let mixed = results_from(vec![0.5, 1.0, 2.0, 3.0, 0.2, 4.0], 4);
        let f = fdr_threshold(&mixed, 0.999).unwrap();
        assert!(f.t_hat < 0.01);
        assert_eq!(f.rejected.len(), 6);

        assert!(fdr_threshold(&mixed, 1.0).is_err());
        assert!(fdr_threshold(&mixed, 0.0).is_err());
    }

    #[test]
    fn exact_search_matches_dense_grid() {
        let mut rng = stream_rng(5, Stream::MonteCarlo);
        let mut normal = PolarNormal::new(stream_rng(5, Stream::Sample));
        for case in 0..40 {
            let k = rng.random_range(4..30usize);
            let n = n_pairs(k);
            let signal = rng.random_range(0.0..0.5);
            let t: Vec<f64> = (0..n)
                .map(|_| {
                    let z = normal.next();
                    if rng.random::<f64>() < signal {
                        z + 4.0
                    } else {
                        z
                    }
                })
                .collect();
            let alpha = rng.random_range(0.01..0.5);
            let tr = results_from(t.clone(), k);
            let f = fdr_threshold(&tr, alpha).unwrap();
            match grid_threshold(&t, k, alpha, 1e-4) {
                Some(g) => {
                    assert!(f.infimum_found, "case {case}");
                    assert!(
                        g >= f.t_hat - 1e-9 && g - f.t_hat <= 1e-4 + 1e-9,
                        "case {case}: {g} vs {}",
                        f.t_hat
                    );
                }
                None => {
                    // The grid can miss a feasible sliver narrower than its step.
                    if f.infimum_found {
                        assert!(threshold_cap(k) - f.t_hat < 1e-4, "case {case}");
                    }
                }
            }
        }
    }

    #[test]
    fn matches_step_up_when_cap_is_slack() {
        // Benjamini-Hochberg on the p-values, used only as a cross-check.
        fn bh(p: &[f64], alpha: f64) -> usize {
            let mut s = p.to_vec();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let m = s.len() as f64;
            (1..=s.len())
                .rev()
                .find(|&r| s[r - 1] <= alpha * r as f64 / m)
                .unwrap_or(0)
        }
        let mut normal = PolarNormal::new(stream_rng(6, Stream::Sample));
        let k = 200;
        let t: Vec<f64> = (0..n_pairs(k))
            .map(|i| {
                let z = normal.next();
                if i % 25 == 0 {
                    z + 5.0
                } else {
                    z
                }
            })
            .collect();
        let tr = results_from(t, k);
        let f = fdr_threshold(&tr, 0.1).unwrap();
        assert!(f.infimum_found && f.t_hat < threshold_cap(k));
        assert_eq!(f.rejected.len(), bh(&tr.p, 0.1));
    }

    #[test]
    fn determinism() {
        let m = block_equicorr(10, 5, 0.5).unwrap();
        let x = sample_mvn(&m, 60, 2).unwrap();
        let opts = SolverOptions::default();
        let a = run_gfc(
            &x,
            Method::ScaledLasso,
            PenaltyPolicy::default(),
            0.1,
            &opts,
        )
        .unwrap();
        let b = run_gfc(
            &x,
            Method::ScaledLasso,
            PenaltyPolicy::default(),
            0.1,
            &opts,
        )
        .unwrap();
        assert_eq!(a.tests, b.tests);
        assert_eq!(a.fdr, b.fdr);
    }

    #[test]
    fn exports() {
        let tr = results_from(vec![3.0, 0.1, -4.0], 3);
        let mut out = Vec::new();
        tr.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "i,j,T,p");
        assert!(lines[1].starts_with("1,2,3,"));
        assert!(lines[3].starts_with("2,3,-4,"));
        let f = fdr_threshold(&tr, 0.2).unwrap();
        let json = f.to_json();
        assert_eq!(json["schema"], 1);
        assert_eq!(json["n_rejected"], f.rejected.len());
        assert_eq!(json["edges"][0][0], 1);
    }

    #[test]
    fn calibration_score_is_small_for_null_statistics() {
        let mut z = PolarNormal::new(stream_rng(5, Stream::MonteCarlo));
        let t: Vec<f64> = (0..200_000).map(|_| z.next()).collect();
        assert!(tail_calibration_score(&t, 100) < 0.05);
        let inflated: Vec<f64> = t.iter().map(|v| 1.3 * v).collect();
        assert!(tail_calibration_score(&inflated, 100) > 1.0);
    }

    #[test]
    fn data_driven_matches_its_resolved_penalty() {
        let m = block_equicorr(30, 5, 0.5).unwrap();
        let x = sample_mvn(&m, 100, 4).unwrap();
        let opts = SolverOptions::default();
        let dd = run_gfc(
            &x,
            Method::Lasso,
            PenaltyPolicy::DataDriven { b_max: 12 },
            0.1,
            &opts,
        )
        .unwrap();
        let PenaltyPolicy::Universal { kappa } = dd.resolved_policy else {
            panic!("unresolved {:?}", dd.resolved_policy)
        };
        assert!((1..=12).any(|b| data_driven_kappa(b) == kappa));
        // Warm starts change the iterates only within solver tolerance.
        let direct = run_gfc(&x, Method::Lasso, dd.resolved_policy, 0.1, &opts).unwrap();
        for (a, b) in direct.tests.t.iter().zip(&dd.tests.t) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        assert_eq!(dd.policy, PenaltyPolicy::DataDriven { b_max: 12 });
        assert!(run_gfc(
            &x,
            Method::Lasso,
            PenaltyPolicy::DataDriven { b_max: 0 },
            0.1,
            &opts
        )
        .is_err());
        assert!(crate::regression::fit_all_nodes(
            &x,
            Method::Lasso,
            PenaltyPolicy::DataDriven { b_max: 3 },
            &opts
        )
        .is_err());
    }
}
