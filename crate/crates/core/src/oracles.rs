//! Closed-form reference quantities with known ground truth, and the Monte
//! Carlo checks built on them.

use crate::dist::{normal_cdf, normal_sf, phi, two_sided_tail_inv};
use crate::gfc::{pairs, run_gfc};
use crate::linalg::{cholesky, condition_number, JitterPolicy, LinalgError, SymMatrix};
use crate::models::{band_precision, banded_covariance, block_equicorr, GraphModel, ModelError};
use crate::pi0::{ks_distance, Ecdf};
use crate::regression::{Method, PenaltyPolicy, SolverOptions};
use crate::rng::{derive_seed, stream_rng, PolarNormal, Stream};
use crate::sampler::{sample_mvn, SampleError, SampleMatrix};
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub const DEFAULT_MEHLER_TERMS: usize = 50;
const MC_CHUNK: usize = 1000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("|rho| must be < 1, got {0}")]
    InvalidRho(f64),
    #[error("need at least one series term")]
    NoTerms,
    #[error("covariance has a nonzero entry ({i}, {j}) outside band {m}")]
    NotBanded { i: usize, j: usize, m: usize },
    #[error("pairs must satisfy i < j < k")]
    InvalidPair,
    #[error("need at least 10000 replications, got {0}")]
    TooFewReps(usize),
    #[error("oracle residuals must be n x {k}, got {rows} x {cols}")]
    BadResiduals { k: usize, rows: usize, cols: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Gfc(#[from] crate::gfc::GfcError),
}

/// Covariance of the population node-wise regression residuals,
/// `delta_ij = omega_ij / (omega_ii omega_jj)` (so `delta_ii = 1 / omega_ii`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaMatrix {
    pub k: usize,
    pub delta: SymMatrix,
}

impl DeltaMatrix {
    pub fn from_precision(omega: &SymMatrix) -> Self {
        let d = omega.diagonal();
        let delta = SymMatrix::from_fn(omega.dim(), |i, j| omega.get(i, j) / (d[i] * d[j]));
        Self {
            k: omega.dim(),
            delta,
        }
    }

    pub fn from_model(model: &GraphModel) -> Self {
        Self::from_precision(&model.omega)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.delta.get(i, j)
    }

    /// Noncentrality of the pair statistic, `sqrt(n) delta_ij / sqrt(delta_ii delta_jj)`.
    pub fn effect_size(&self, i: usize, j: usize, n: usize) -> f64 {
        (n as f64).sqrt() * self.get(i, j) / (self.get(i, i) * self.get(j, j)).sqrt()
    }
}

/// `U_ij = n^{-1/2} sum_l (eps_li eps_lj - E eps_li eps_lj)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UStatistic {
    pub pair: (usize, usize),
    pub value: f64,
}

impl UStatistic {
    pub fn compute(eps: &DMatrix<f64>, d: &DeltaMatrix, pair: (usize, usize)) -> Self {
        let (i, j) = pair;
        let n = eps.nrows();
        let centre = d.get(i, j);
        let s: f64 = (0..n).map(|l| eps[(l, i)] * eps[(l, j)] - centre).sum();
        Self {
            pair,
            value: s / (n as f64).sqrt(),
        }
    }
}

/// `Cov(U_ij, U_i'j') = delta_ii' delta_jj' + delta_ij' delta_i'j`.
pub fn isserlis_cov(d: &DeltaMatrix, a: (usize, usize), b: (usize, usize)) -> f64 {
    let ((i, j), (ip, jp)) = (a, b);
    d.get(i, ip) * d.get(j, jp) + d.get(i, jp) * d.get(ip, j)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MehlerSeries {
    pub value: f64,
    pub n_terms: usize,
    /// `|rho|^{n+1} / (1 - |rho|)`, a bound on the omitted terms.
    pub tail_bound: f64,
}

/// `Cov(1{X <= x}, 1{Y <= x})` for a standard bivariate normal pair with
/// correlation `rho`, as `sum_{m>=1} rho^m / m! (H_{m-1}(x) phi(x))^2`.
///
/// Hermite polynomials are carried in normalized form `H_m / sqrt(m!)` so
/// the recurrence stays bounded for many terms.
pub fn mehler_indicator_cov(rho: f64, x: f64, n_terms: usize) -> Result<MehlerSeries, OracleError> {
    if !(rho.abs() < 1.0) {
        return Err(OracleError::InvalidRho(rho));
    }
    if n_terms == 0 {
        return Err(OracleError::NoTerms);
    }
    let phi2 = phi(x).powi(2);
    let (mut h_prev, mut h) = (0.0, 1.0); // h_{-1}, h_0
    let mut rho_m = 1.0;
    let mut sum = 0.0;
    for m in 1..=n_terms {
        rho_m *= rho;
        // h holds h_{m-1}.
        sum += rho_m / m as f64 * h * h * phi2;
        let next = (x * h - ((m - 1) as f64).sqrt() * h_prev) / (m as f64).sqrt();
        h_prev = h;
        h = next;
    }
    let a = rho.abs();
    Ok(MehlerSeries {
        value: sum,
        n_terms,
        tail_bound: a.powi(n_terms as i32 + 1) / (1.0 - a),
    })
}

/// `|rho| / (1 - |rho|)`.
pub fn mehler_bound(rho: f64) -> Result<f64, OracleError> {
    if !(rho.abs() < 1.0) {
        return Err(OracleError::InvalidRho(rho));
    }
    Ok(rho.abs() / (1.0 - rho.abs()))
}

/// CDF at `lambda` of the two-sided p-value of a `N(a, 1)` statistic.
pub fn alt_pvalue_cdf(a: f64, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    if lambda >= 1.0 {
        return 1.0;
    }
    let z = two_sided_tail_inv(lambda);
    (normal_sf(z - a) + normal_cdf(-z - a)).min(1.0)
}

/// Derivative of [`alt_pvalue_cdf`] in `lambda`.
pub fn alt_pvalue_density(a: f64, lambda: f64) -> f64 {
    let z = two_sided_tail_inv(lambda);
    (phi(z - a) + phi(z + a)) / (2.0 * phi(z))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub k: usize,
    pub m: usize,
    pub sum_abs_omega: f64,
    pub sum_per_k: f64,
    pub condition_number: f64,
    pub r: f64,
    pub demko_c: f64,
    /// Largest `|omega_ij| - C r^{|i-j|/m}` over all entries; `<= 0` when the
    /// bound holds everywhere.
    pub worst_excess: f64,
}

/// Precision decay for a model whose covariance is `m`-banded.
pub fn banded_decay_report(model: &GraphModel, m: usize) -> Result<DecayReport, OracleError> {
    let k = model.k;
    for i in 0..k {
        for j in i + m + 1..k {
            if model.sigma.get(i, j) != 0.0 {
                return Err(OracleError::NotBanded { i, j, m });
            }
        }
    }
    let omega = &model.omega;
    let cond = condition_number(&model.sigma)?;
    let sq = cond.sqrt();
    let r = ((sq - 1.0) / (sq + 1.0)).powi(2);
    let decay = |d: usize| -> f64 {
        if m == 0 {
            if d == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            r.powf(d as f64 / m as f64)
        }
    };
    let max_abs = omega.as_matrix().amax();
    let floor = 64.0 * f64::EPSILON * max_abs;
    let mut sum = 0.0;
    let mut c: f64 = 0.0;
    for i in 0..k {
        for j in 0..k {
            let w = omega.get(i, j).abs();
            sum += w;
            let b = decay(i.abs_diff(j));
            if w > floor && b > 0.0 {
                c = c.max(w / b);
            }
        }
    }
    let mut worst = f64::NEG_INFINITY;
    for i in 0..k {
        for j in 0..k {
            let w = omega.get(i, j).abs();
            let bound = c * decay(i.abs_diff(j)) * (1.0 + 8.0 * f64::EPSILON);
            let excess = if w > floor { w - bound } else { w - floor };
            worst = worst.max(excess);
        }
    }
    Ok(DecayReport {
        k,
        m,
        sum_abs_omega: sum,
        sum_per_k: sum / k as f64,
        condition_number: cond,
        r,
        demko_c: c,
        worst_excess: worst,
    })
}

/// Population residuals `eps = X Omega D^{-1}`, `D = diag(Omega)`.
pub fn oracle_residuals(model: &GraphModel, x: &SampleMatrix) -> DMatrix<f64> {
    let d = model.omega.diagonal();
    let mut eps = x.values() * model.omega.as_matrix();
    for (j, mut col) in eps.column_iter_mut().enumerate() {
        col /= d[j];
    }
    eps
}

/// `b_ij = omega_ii s_ii + omega_jj s_jj - 1`, with `s` the centered
/// covariance (1/n) of the oracle residuals.
pub fn b_correction(model: &GraphModel, eps: &DMatrix<f64>) -> Result<SymMatrix, OracleError> {
    let (n, k) = eps.shape();
    if k != model.k || n < 2 {
        return Err(OracleError::BadResiduals {
            k: model.k,
            rows: n,
            cols: k,
        });
    }
    let d = model.omega.diagonal();
    let s: Vec<f64> = eps
        .column_iter()
        .map(|c| {
            let mean = c.mean();
            c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64
        })
        .collect();
    Ok(SymMatrix::from_fn(k, |i, j| {
        d[i] * s[i] + d[j] * s[j] - 1.0
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub reps: usize,
}

/// Monte Carlo `Cov(U_a, U_b)` with `eps ~ N(0, Delta)`. Replications are
/// drawn in fixed chunks of 1000, chunk `c` from seed `seed + c`.
pub fn mc_u_cov(
    d: &DeltaMatrix,
    a: (usize, usize),
    b: (usize, usize),
    n: usize,
    reps: usize,
    seed: u64,
) -> Result<McEstimate, OracleError> {
    let k = d.k;
    if !(a.0 < a.1 && a.1 < k && b.0 < b.1 && b.1 < k) {
        return Err(OracleError::InvalidPair);
    }
    if reps < 10_000 {
        return Err(OracleError::TooFewReps(reps));
    }
    let chol = cholesky(&d.delta, JitterPolicy::None)?;
    let l = chol.factor.as_matrix();
    let chunks = reps.div_ceil(MC_CHUNK);
    let centre = (d.get(a.0, a.1), d.get(b.0, b.1));
    let root_n = (n as f64).sqrt();
    let partial: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let size = MC_CHUNK.min(reps - c * MC_CHUNK);
            let mut z =
                PolarNormal::new(stream_rng(derive_seed(seed, c as u64), Stream::MonteCarlo));
            let mut e = vec![0.0; k];
            let mut zz = vec![0.0; k];
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..size {
                let (mut ua, mut ub) = (0.0, 0.0);
                for _ in 0..n {
                    z.fill(&mut zz);
                    for i in 0..k {
                        e[i] = (0..=i).map(|m| l[(i, m)] * zz[m]).sum();
                    }
                    ua += e[a.0] * e[a.1] - centre.0;
                    ub += e[b.0] * e[b.1] - centre.1;
                }
                let prod = (ua / root_n) * (ub / root_n);
                s1 += prod;
                s2 += prod * prod;
            }
            (s1, s2)
        })
        .collect();
    let (s1, s2) = partial
        .iter()
        .fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    let r = reps as f64;
    let mean = s1 / r;
    let var = (s2 / r - mean * mean).max(0.0) * r / (r - 1.0);
    Ok(McEstimate {
        estimate: mean,
        std_error: (var / r).sqrt(),
        reps,
    })
}

/// A random positive definite precision matrix: `A A^T / k + 0.5 I` with
/// standard normal `A`.
pub fn random_precision(k: usize, seed: u64) -> SymMatrix {
    let mut z = PolarNormal::new(stream_rng(seed, Stream::Model));
    let a = DMatrix::from_fn(k, k, |_, _| z.next());
    let m = &a * a.transpose() / k as f64 + DMatrix::identity(k, k) * 0.5;
    SymMatrix::from_upper(m).expect("finite")
}

/// Average p-value CDF implied by the model: uniform on non-edges and
/// [`alt_pvalue_cdf`] at each edge's noncentrality.
#[derive(Debug, Clone)]
pub struct AverageCdf {
    n_null: usize,
    n_pairs: usize,
    /// Distinct `|a|` values with their multiplicities.
    effects: Vec<(f64, usize)>,
}

impl AverageCdf {
    pub fn new(model: &GraphModel, n: usize) -> Self {
        let d = DeltaMatrix::from_model(model);
        let mut groups: BTreeMap<u64, usize> = BTreeMap::new();
        for &(i, j) in &model.edges {
            *groups
                .entry(d.effect_size(i, j, n).abs().to_bits())
                .or_default() += 1;
        }
        Self {
            n_null: model.n_pairs() - model.edges.len(),
            n_pairs: model.n_pairs(),
            effects: groups
                .into_iter()
                .map(|(b, c)| (f64::from_bits(b), c))
                .collect(),
        }
    }

    pub fn eval(&self, lambda: f64) -> f64 {
        let null = self.n_null as f64 * lambda.clamp(0.0, 1.0);
        let alt: f64 = self
            .effects
            .iter()
            .map(|&(a, c)| c as f64 * alt_pvalue_cdf(a, lambda))
            .sum();
        (null + alt) / self.n_pairs as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcdfDistance {
    pub k: usize,
    pub n: usize,
    pub reps: usize,
    pub distances: Vec<f64>,
    pub mean: f64,
}

/// Sup-distance between the p-value ECDF and the model's average CDF, over
/// `reps` data sets drawn with seeds `seed + 1, ..., seed + reps`.
pub fn average_cdf_distance(
    model: &GraphModel,
    n: usize,
    reps: usize,
    seed: u64,
    method: Method,
) -> Result<EcdfDistance, OracleError> {
    let fbar = AverageCdf::new(model, n);
    let opts = SolverOptions::default();
    let distances = (1..=reps as u64)
        .map(|r| {
            let x = sample_mvn(model, n, derive_seed(seed, r))?;
            let run = run_gfc(&x, method, PenaltyPolicy::default(), 0.1, &opts)?;
            let e = Ecdf::new(&run.tests.p);
            Ok(ks_distance(&e, |l| fbar.eval(l)))
        })
        .collect::<Result<Vec<f64>, OracleError>>()?;
    let mean = distances.iter().sum::<f64>() / reps.max(1) as f64;
    Ok(EcdfDistance {
        k: model.k,
        n,
        reps,
        distances,
        mean,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub target: f64,
    /// Distance to failure; positive when passing.
    pub margin: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub schema: u32,
    pub checks: Vec<OracleCheck>,
    pub all_passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSuiteConfig {
    pub seed: u64,
    pub mehler_rho: f64,
    pub mehler_x: f64,
    pub mehler_terms: usize,
    pub isserlis_models: usize,
    pub isserlis_dim: usize,
    pub isserlis_n: usize,
    pub isserlis_reps: usize,
    pub concavity_effects: Vec<f64>,
    pub decay_offdiag: f64,
    pub decay_dims: Vec<usize>,
    pub b_correction_n: usize,
    pub b_correction_k: usize,
}

impl Default for OracleSuiteConfig {
    fn default() -> Self {
        Self {
            seed: 20240601,
            mehler_rho: 0.5,
            mehler_x: 0.0,
            mehler_terms: DEFAULT_MEHLER_TERMS,
            isserlis_models: 5,
            isserlis_dim: 5,
            isserlis_n: 10,
            isserlis_reps: 20_000,
            concavity_effects: vec![0.5, 1.0, 2.0, 4.0],
            decay_offdiag: 0.4,
            decay_dims: vec![50, 100, 200, 400],
            b_correction_n: 10_000,
            b_correction_k: 3,
        }
    }
}

fn check(name: &str, value: f64, target: f64, margin: f64, detail: String) -> OracleCheck {
    OracleCheck {
        name: name.into(),
        passed: margin >= 0.0,
        value,
        target,
        margin,
        detail,
    }
}

/// Largest second difference of `alt_pvalue_cdf(a, .)` on a grid of step `h`.
pub fn max_second_difference(a: f64, h: f64) -> f64 {
    let m = (1.0 / h).round() as usize;
    (1..m - 1)
        .map(|i| {
            let l = i as f64 * h;
            alt_pvalue_cdf(a, l + h) - 2.0 * alt_pvalue_cdf(a, l) + alt_pvalue_cdf(a, l - h)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Random distinct pairs `(i, j)`, `(i', j')` among `k` variables.
pub fn random_pair_of_pairs(k: usize, seed: u64) -> ((usize, usize), (usize, usize)) {
    let all: Vec<(usize, usize)> = pairs(k).collect();
    let mut rng = stream_rng(seed, Stream::MonteCarlo);
    let a = rng.random_range(0..all.len());
    let b = rng.random_range(0..all.len());
    (all[a], all[b])
}

/// `max_{i != j} |b_ij - 1|`.
pub fn max_b_deviation(b: &SymMatrix) -> f64 {
    let k = b.dim();
    pairs(k)
        .map(|(i, j)| (b.get(i, j) - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Runs every closed-form check once.
pub fn run_oracle_suite(cfg: &OracleSuiteConfig) -> Result<OracleReport, OracleError> {
    let mut checks = Vec::new();

    let s = mehler_indicator_cov(cfg.mehler_rho, cfg.mehler_x, cfg.mehler_terms)?;
    let orthant = orthant_indicator_cov(cfg.mehler_rho, cfg.mehler_x);
    checks.push(check(
        "mehler_series",
        s.value,
        orthant,
        1e-6 + s.tail_bound - (s.value - orthant).abs(),
        format!("tail bound {:e}", s.tail_bound),
    ));
    let mut worst: f64 = f64::INFINITY;
    for i in 0..20 {
        for j in 0..20 {
            let rho = -0.95 + 1.9 * i as f64 / 19.0;
            let x = -3.0 + 6.0 * j as f64 / 19.0;
            let v = mehler_indicator_cov(rho, x, cfg.mehler_terms)?.value;
            worst = worst.min(mehler_bound(rho)? - v.abs());
        }
    }
    checks.push(check(
        "mehler_bound",
        worst,
        0.0,
        worst,
        "20 x 20 grid".into(),
    ));

    let id = DeltaMatrix::from_precision(&SymMatrix::identity(4));
    let off = isserlis_cov(&id, (0, 1), (2, 3)).abs();
    let var = isserlis_cov(&id, (0, 1), (0, 1));
    checks.push(check(
        "isserlis_identity",
        var,
        1.0,
        1e-12 - off.max((var - 1.0).abs()),
        format!("cov(U12, U34) = {off}"),
    ));
    let mut worst_z: f64 = 0.0;
    for mdl in 0..cfg.isserlis_models {
        let s = derive_seed(cfg.seed, mdl as u64);
        let d = DeltaMatrix::from_precision(&random_precision(cfg.isserlis_dim, s));
        let (a, b) = random_pair_of_pairs(cfg.isserlis_dim, s);
        let exact = isserlis_cov(&d, a, b);
        let mc = mc_u_cov(&d, a, b, cfg.isserlis_n, cfg.isserlis_reps, s)?;
        worst_z = worst_z.max((mc.estimate - exact).abs() / mc.std_error);
    }
    checks.push(check(
        "isserlis_monte_carlo",
        worst_z,
        3.0,
        3.0 - worst_z,
        format!("{} models, worst |z|", cfg.isserlis_models),
    ));

    let mut worst_d2 = f64::NEG_INFINITY;
    for &a in &cfg.concavity_effects {
        worst_d2 = worst_d2.max(max_second_difference(a, 1e-3));
    }
    checks.push(check(
        "alt_cdf_concave",
        worst_d2,
        1e-9,
        1e-9 - worst_d2,
        "largest second difference".into(),
    ));
    let f = alt_pvalue_cdf(2.0, 0.05);
    checks.push(check(
        "alt_cdf_reference",
        f,
        0.5160,
        5e-4 - (f - 0.5160).abs(),
        "a = 2, lambda = 0.05".into(),
    ));

    let mut ratios = Vec::new();
    let mut worst_excess = f64::NEG_INFINITY;
    for &k in &cfg.decay_dims {
        let rep = banded_decay_report(&banded_covariance(k, cfg.decay_offdiag)?, 1)?;
        ratios.push(rep.sum_per_k);
        worst_excess = worst_excess.max(rep.worst_excess);
    }
    let (lo, hi) = ratios
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
    let variation = (hi - lo) / lo;
    checks.push(check(
        "banded_decay_ratio",
        variation,
        0.1,
        0.1 - variation,
        format!("sum|omega|/k = {ratios:?}"),
    ));
    checks.push(check(
        "demko_bound",
        worst_excess,
        0.0,
        -worst_excess,
        "largest excess over C r^(|i-j|/m)".into(),
    ));

    let model = band_precision(cfg.b_correction_k)?;
    let x = sample_mvn(&model, cfg.b_correction_n, cfg.seed)?;
    let b = b_correction(&model, &oracle_residuals(&model, &x))?;
    let dev = max_b_deviation(&b);
    checks.push(check(
        "b_correction",
        dev,
        0.05,
        0.05 - dev,
        format!("n = {}, k = {}", cfg.b_correction_n, model.k),
    ));

    let all_passed = checks.iter().all(|c| c.passed);
    Ok(OracleReport {
        schema: 1,
        checks,
        all_passed,
    })
}

/// `P(X <= x, Y <= x) - Phi(x)^2` by composite Simpson
/// integration of `phi(u) Phi((x - rho u) / sqrt(1 - rho^2))`.
pub fn orthant_indicator_cov(rho: f64, x: f64) -> f64 {
    let s = (1.0 - rho * rho).sqrt();
    let lo = -12.0f64;
    if x <= lo {
        return 0.0;
    }
    let m = 20_000;
    let h = (x - lo) / m as f64;
    let f = |u: f64| phi(u) * normal_cdf((x - rho * u) / s);
    let mut acc = f(lo) + f(x);
    for i in 1..m {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + i as f64 * h);
    }
    acc * h / 3.0 - normal_cdf(x).powi(2)
}

/// Block equicorrelation model used by the ECDF convergence check.
pub fn ecdf_check_model(k: usize) -> Result<GraphModel, OracleError> {
    Ok(block_equicorr(k, 5, 0.5)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn delta_from_precision() {
        let omega =
            SymMatrix::from_upper(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 4.0])).unwrap();
        let d = DeltaMatrix::from_precision(&omega);
        assert!((d.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((d.get(1, 1) - 0.25).abs() < 1e-15);
        assert!((d.get(0, 1) - 0.5 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn isserlis_examples() {
        let id = DeltaMatrix::from_precision(&SymMatrix::identity(4));
        assert_eq!(isserlis_cov(&id, (0, 1), (2, 3)), 0.0);
        assert_eq!(isserlis_cov(&id, (0, 1), (0, 1)), 1.0);
        let omega =
            SymMatrix::from_upper(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0])).unwrap();
        let d = DeltaMatrix::from_precision(&omega);
        assert!((isserlis_cov(&d, (0, 1), (0, 1)) - 1.25).abs() < 1e-15);
        let d = DeltaMatrix::from_precision(&random_precision(5, 3));
        assert_eq!(
            isserlis_cov(&d, (0, 2), (1, 4)),
            isserlis_cov(&d, (1, 4), (0, 2))
        );
    }

    #[test]
    fn isserlis_against_monte_carlo_k2() {
        let omega =
            SymMatrix::from_upper(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0])).unwrap();
        let d = DeltaMatrix::from_precision(&omega);
        let mc = mc_u_cov(&d, (0, 1), (0, 1), 5, 50_000, 9).unwrap();
        assert!((mc.estimate - 1.25).abs() < 3.0 * mc.std_error, "{mc:?}");
        let again = mc_u_cov(&d, (0, 1), (0, 1), 5, 50_000, 9).unwrap();
        assert_eq!(mc, again);
    }

    #[test]
    fn mc_identity_disjoint_pairs() {
        let d = DeltaMatrix::from_precision(&SymMatrix::identity(4));
        let mc = mc_u_cov(&d, (0, 1), (2, 3), 4, 20_000, 1).unwrap();
        assert!(mc.estimate.abs() < 3.0 * mc.std_error);
        assert!(mc_u_cov(&d, (0, 1), (2, 3), 4, 100, 1).is_err());
        assert!(mc_u_cov(&d, (1, 0), (2, 3), 4, 20_000, 1).is_err());
    }

    #[test]
    fn isserlis_correlation_below_one() {
        for s in 0..20 {
            let d = DeltaMatrix::from_precision(&random_precision(5, 100 + s));
            for a in pairs(5) {
                for b in pairs(5).filter(|&b| b != a) {
                    let c = isserlis_cov(&d, a, b)
                        / (isserlis_cov(&d, a, a) * isserlis_cov(&d, b, b)).sqrt();
                    assert!(c.abs() < 1.0);
                }
            }
        }
    }

    #[test]
    fn u_statistic_is_centered_sum() {
        let eps = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0, 2.0, 2.0]);
        let d = DeltaMatrix::from_precision(&SymMatrix::identity(2));
        let u = UStatistic::compute(&eps, &d, (0, 1));
        assert!((u.value - (2.0 - 0.5 + 0.0 + 4.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn mehler_examples() {
        assert_eq!(mehler_indicator_cov(0.0, 0.3, 50).unwrap().value, 0.0);
        let s = mehler_indicator_cov(0.5, 0.0, 50).unwrap();
        assert!((s.value - 1.0 / 12.0).abs() < 1e-12);
        assert!((s.value - (0.5f64).asin() / (2.0 * std::f64::consts::PI)).abs() < 1e-12);
        assert!(matches!(
            mehler_indicator_cov(1.0, 0.0, 5),
            Err(OracleError::InvalidRho(_))
        ));
        assert!(mehler_bound(-1.2).is_err());
        assert!((mehler_bound(0.5).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mehler_matches_quadrature() {
        for &rho in &[-0.8, -0.3, 0.2, 0.5, 0.9] {
            for &x in &[-2.0, -0.5, 0.0, 1.0, 2.5] {
                let s = mehler_indicator_cov(rho, x, 400).unwrap();
                let q = orthant_indicator_cov(rho, x);
                assert!(
                    (s.value - q).abs() < 1e-8,
                    "rho {rho} x {x}: {} vs {q}",
                    s.value
                );
            }
        }
    }

    proptest! {
        #[test]
        fn mehler_bound_and_tail(rho in -0.95f64..0.95, x in -4.0f64..4.0) {
            let s = mehler_indicator_cov(rho, x, 50).unwrap();
            prop_assert!(s.value.abs() <= mehler_bound(rho).unwrap() + 1e-15);
            let more = mehler_indicator_cov(rho, x, 60).unwrap();
            prop_assert!((more.value - s.value).abs() <= s.tail_bound + 1e-15);
        }

        #[test]
        fn isserlis_symmetric_in_arguments(seed in 0u64..1000) {
            let d = DeltaMatrix::from_precision(&random_precision(5, seed));
            let (a, b) = random_pair_of_pairs(5, seed);
            prop_assert_eq!(isserlis_cov(&d, a, b), isserlis_cov(&d, b, a));
        }
    }

    #[test]
    fn alt_cdf_examples() {
        for &l in &[0.01, 0.2, 0.5, 0.93] {
            assert!((alt_pvalue_cdf(0.0, l) - l).abs() < 1e-14);
        }
        assert!((alt_pvalue_cdf(2.0, 1.0 - 1e-12) - 1.0).abs() < 1e-9);
        let f = alt_pvalue_cdf(2.0, 0.05);
        // Independent evaluation: 1 - Phi(1.959964 - 2) + Phi(-3.959964).
        let z = 1.959_963_984_540_054;
        let expected = 1.0 - normal_cdf(z - 2.0) + normal_cdf(-z - 2.0);
        assert!((f - expected).abs() < 1e-12);
        assert!((f - 0.5160).abs() < 5e-4, "{f}");
    }

    #[test]
    fn alt_cdf_concave_with_decreasing_density() {
        for &a in &[0.5, 1.0, 2.0, 4.0] {
            assert!(max_second_difference(a, 1e-3) <= 1e-9);
            let dens: Vec<f64> = (1..1000)
                .map(|i| alt_pvalue_density(a, i as f64 / 1000.0))
                .collect();
            assert!(dens.windows(2).all(|w| w[1] <= w[0] + 1e-12), "a = {a}");
            // Density agrees with a central difference.
            let l = 0.3;
            let fd = (alt_pvalue_cdf(a, l + 1e-6) - alt_pvalue_cdf(a, l - 1e-6)) / 2e-6;
            assert!((fd - alt_pvalue_density(a, l)).abs() < 1e-5);
        }
    }

    #[test]
    fn decay_diagonal_and_tridiagonal() {
        let mut m = banded_covariance(6, 0.0).unwrap();
        m.sigma = SymMatrix::from_diagonal(&[1.0, 2.0, 4.0, 0.5, 1.0, 1.0]);
        m.omega = SymMatrix::from_diagonal(&[1.0, 0.5, 0.25, 2.0, 1.0, 1.0]);
        let rep = banded_decay_report(&m, 0).unwrap();
        assert!((rep.sum_abs_omega - 5.75).abs() < 1e-15);
        assert!(rep.worst_excess <= 0.0);

        let m = banded_covariance(50, 0.4).unwrap();
        assert!(matches!(
            banded_decay_report(&m, 0),
            Err(OracleError::NotBanded { .. })
        ));
        let rep = banded_decay_report(&m, 1).unwrap();
        assert!(rep.worst_excess <= 0.0);
        assert!(rep.r > 0.0 && rep.r < 1.0);
    }

    #[test]
    fn decay_ratio_plateaus() {
        let ratios: Vec<f64> = [50, 100, 200, 400]
            .iter()
            .map(|&k| {
                banded_decay_report(&banded_covariance(k, 0.4).unwrap(), 1)
                    .unwrap()
                    .sum_per_k
            })
            .collect();
        let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ratios.iter().cloned().fold(0.0, f64::max);
        assert!((hi - lo) / lo < 0.1, "{ratios:?}");
    }

    #[test]
    fn b_correction_population_and_sample() {
        let m = band_precision(3).unwrap();
        let x = sample_mvn(&m, 10_000, 17).unwrap();
        let b = b_correction(&m, &oracle_residuals(&m, &x)).unwrap();
        let dev = max_b_deviation(&b);
        assert!(dev <= 0.05, "{dev}");

        // Residual covariance from the population: sigma_ii,eps = 1 / omega_ii.
        let d = DeltaMatrix::from_model(&m);
        for i in 0..3 {
            assert!((m.omega.get(i, i) * d.get(i, i) - 1.0).abs() < 1e-14);
        }

        let small = sample_mvn(&m, 10, 18).unwrap();
        let b = b_correction(&m, &oracle_residuals(&m, &small)).unwrap();
        assert!(b.as_matrix().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn average_cdf_limits() {
        let m = block_equicorr(20, 5, 0.5).unwrap();
        let f = AverageCdf::new(&m, 200);
        assert_eq!(f.eval(0.0), 0.0);
        assert!((f.eval(1.0) - 1.0).abs() < 1e-12);
        assert!(f.eval(0.2) > 0.2);
    }

    #[test]
    fn suite_passes_by_default() {
        let cfg = OracleSuiteConfig {
            isserlis_models: 2,
            ..Default::default()
        };
        let rep = run_oracle_suite(&cfg).unwrap();
        for c in &rep.checks {
            assert!(c.passed, "{c:?}");
        }
        assert!(rep.all_passed);
    }
}
