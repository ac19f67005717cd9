//! Tail-count estimators of the proportion of true null hypotheses.
//!
//! `pi0(lambda) = #{p > lambda} / (N (1 - lambda))`, with `lambda` chosen by a
//! smoothing spline over a grid or by bootstrap mean squared error.

pub mod spline;

use crate::rng::{derive_seed, stream_rng, Stream};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use spline::{SmoothingSpline, SplineError};
use std::io::Write;
use thiserror::Error;

pub const DEFAULT_SPLINE_DOF: f64 = 3.0;
pub const DEFAULT_BOOTSTRAP: usize = 100;
pub const MAX_GRID_LAMBDA: f64 = 0.95;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Pi0Error {
    #[error("lambda must lie in [0, 1), got {0}")]
    InvalidLambda(f64),
    #[error("grid needs at least 4 points, got {0}")]
    GridTooSmall(usize),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("p-value {index} is {value}, outside [0, 1]")]
    InvalidPValue { index: usize, value: f64 },
    #[error("no p-values")]
    Empty,
    #[error("need at least 10 bootstrap resamples, got {0}")]
    TooFewResamples(usize),
    #[error(transparent)]
    Spline(#[from] SplineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValueSet {
    values: Vec<f64>,
    pub source: Option<String>,
}

impl PValueSet {
    pub fn new(values: Vec<f64>) -> Result<Self, Pi0Error> {
        if values.is_empty() {
            return Err(Pi0Error::Empty);
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Pi0Error::InvalidPValue { index, value });
        }
        Ok(Self {
            values,
            source: None,
        })
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = Some(source.into());
        self
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `{0, 0.01, ..., 0.95}`.
pub fn default_grid() -> Vec<f64> {
    (0..=95).map(|i| i as f64 / 100.0).collect()
}

/// Grid from `lo` to `hi` (inclusive, up to rounding) in steps of `step`.
pub fn grid_from(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>, Pi0Error> {
    if !(step > 0.0) || !(hi >= lo) {
        return Err(Pi0Error::InvalidGrid(format!(
            "lo={lo}, hi={hi}, step={step}"
        )));
    }
    let m = ((hi - lo) / step + 1e-9).floor() as usize;
    // Divide when `step` is 1/q for an integer q so that 0.01 gives i / 100.
    let q = (1.0 / step).round();
    let point = |i: usize| {
        if (1.0 / step - q).abs() < 1e-9 * q {
            lo + i as f64 / q
        } else {
            lo + i as f64 * step
        }
    };
    let grid: Vec<f64> = (0..=m).map(point).collect();
    validate_grid(&grid)?;
    Ok(grid)
}

pub fn validate_grid(grid: &[f64]) -> Result<(), Pi0Error> {
    if grid.len() < 4 {
        return Err(Pi0Error::GridTooSmall(grid.len()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Pi0Error::InvalidGrid("not strictly increasing".into()));
    }
    if grid[0] < 0.0 || grid[grid.len() - 1] > MAX_GRID_LAMBDA + 1e-12 {
        return Err(Pi0Error::InvalidGrid(format!(
            "values must lie in [0, {MAX_GRID_LAMBDA}]"
        )));
    }
    Ok(())
}

/// Raw `#{p > lambda} / (N (1 - lambda))`, not clamped.
pub fn storey_pi0(p: &PValueSet, lambda: f64) -> Result<f64, Pi0Error> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Pi0Error::InvalidLambda(lambda));
    }
    let w = p.values.iter().filter(|&&v| v > lambda).count();
    Ok(ratio(w, p.len(), lambda))
}

#[inline]
fn ratio(w: usize, n: usize, lambda: f64) -> f64 {
    w as f64 / (n as f64 * (1.0 - lambda))
}

/// `W(lambda) = #{p > lambda}` for every grid point.
pub fn tail_counts(p: &[f64], grid: &[f64]) -> Vec<usize> {
    let bins = grid_bins(p, grid);
    counts_from_bins(bins.iter().copied(), grid.len())
}

/// For each p-value the number of grid points strictly below it, so that
/// `p > grid[j]` iff `bin > j`.
fn grid_bins(p: &[f64], grid: &[f64]) -> Vec<u32> {
    p.iter()
        .map(|&v| grid.partition_point(|&l| l < v) as u32)
        .collect()
}

fn counts_from_bins(bins: impl Iterator<Item = u32>, m: usize) -> Vec<usize> {
    let mut hist = vec![0usize; m + 1];
    for b in bins {
        hist[b as usize] += 1;
    }
    // W(grid[j]) = #{bin > j}
    let mut w = vec![0usize; m];
    let mut acc = 0;
    for j in (0..m).rev() {
        acc += hist[j + 1];
        w[j] = acc;
    }
    w
}

/// Raw curve over a grid, for diagnostics.
pub fn pi0_bias_curve(p: &PValueSet, grid: &[f64]) -> Result<Vec<f64>, Pi0Error> {
    if let Some(&bad) = grid.iter().find(|l| !(0.0..1.0).contains(*l)) {
        return Err(Pi0Error::InvalidLambda(bad));
    }
    let n = p.len();
    Ok(tail_counts(&p.values, grid)
        .into_iter()
        .zip(grid)
        .map(|(w, &l)| ratio(w, n, l))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pi0Method {
    FixedLambda,
    Smoother,
    Bootstrap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pi0Estimate {
    pub method: Pi0Method,
    pub lambda_grid: Vec<f64>,
    pub curve: Vec<f64>,
    pub tail_counts: Vec<usize>,
    pub n_pvalues: usize,
    pub selected_lambda: Option<f64>,
    pub pi0_hat: f64,
    pub n_boot: Option<usize>,
    pub seed: Option<u64>,
    pub spline_dof: Option<f64>,
    /// Bootstrap MSE per grid point, or the smoothed curve for the smoother.
    pub diagnostic: Option<Vec<f64>>,
}

impl Pi0Estimate {
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("serializable");
        v.as_object_mut()
            .expect("object")
            .insert("schema".into(), 1.into());
        v
    }

    /// CSV `lambda,W,pi0[,diagnostic]`.
    pub fn write_curve_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let extra = match self.method {
            Pi0Method::Bootstrap => ",mse",
            Pi0Method::Smoother => ",smoothed",
            Pi0Method::FixedLambda => "",
        };
        writeln!(w, "lambda,W,pi0{extra}")?;
        for i in 0..self.lambda_grid.len() {
            write!(
                w,
                "{},{},{}",
                self.lambda_grid[i], self.tail_counts[i], self.curve[i]
            )?;
            if let Some(d) = &self.diagnostic {
                write!(w, ",{}", d[i])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Estimate at a single fixed `lambda`, clamped to `[0, 1]`.
pub fn fixed_lambda_pi0(p: &PValueSet, lambda: f64) -> Result<Pi0Estimate, Pi0Error> {
    let raw = storey_pi0(p, lambda)?;
    Ok(Pi0Estimate {
        method: Pi0Method::FixedLambda,
        lambda_grid: vec![lambda],
        curve: vec![raw],
        tail_counts: tail_counts(&p.values, &[lambda]),
        n_pvalues: p.len(),
        selected_lambda: Some(lambda),
        pi0_hat: clamp01(raw),
        n_boot: None,
        seed: None,
        spline_dof: None,
        diagnostic: None,
    })
}

/// Smoothing-spline fit to the curve, read off at the largest grid point.
pub fn smoother_pi0(p: &PValueSet, grid: &[f64], spline_dof: f64) -> Result<Pi0Estimate, Pi0Error> {
    validate_grid(grid)?;
    let w = tail_counts(&p.values, grid);
    let n = p.len();
    let curve: Vec<f64> = w.iter().zip(grid).map(|(&c, &l)| ratio(c, n, l)).collect();
    let s = SmoothingSpline::fit(grid, &curve, spline_dof)?;
    let at_end = s.evaluate(grid[grid.len() - 1]);
    Ok(Pi0Estimate {
        method: Pi0Method::Smoother,
        lambda_grid: grid.to_vec(),
        curve,
        tail_counts: w,
        n_pvalues: n,
        selected_lambda: None,
        pi0_hat: clamp01(at_end.min(1.0)),
        n_boot: None,
        seed: None,
        spline_dof: Some(spline_dof),
        diagnostic: Some(s.fitted),
    })
}

/// Bootstrap choice of `lambda`: minimize the resampling MSE around the
/// plug-in `min_lambda pi0(lambda)`. Resample `b` (1-based) draws from
/// seed `seed + b` on the bootstrap stream.
pub fn bootstrap_pi0(
    p: &PValueSet,
    grid: &[f64],
    n_boot: usize,
    seed: u64,
) -> Result<Pi0Estimate, Pi0Error> {
    validate_grid(grid)?;
    if n_boot < 10 {
        return Err(Pi0Error::TooFewResamples(n_boot));
    }
    let n = p.len();
    let m = grid.len();
    let bins = grid_bins(&p.values, grid);
    let w = counts_from_bins(bins.iter().copied(), m);
    let curve: Vec<f64> = w.iter().zip(grid).map(|(&c, &l)| ratio(c, n, l)).collect();
    let plug_in = curve.iter().cloned().fold(f64::INFINITY, f64::min);

    let sq_err: Vec<Vec<f64>> = (1..=n_boot as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(derive_seed(seed, b), Stream::Bootstrap);
            let draws = (0..n).map(|_| bins[rng.random_range(0..n)]);
            counts_from_bins(draws, m)
                .into_iter()
                .zip(grid)
                .map(|(c, &l)| (ratio(c, n, l) - plug_in).powi(2))
                .collect()
        })
        .collect();
    let mse: Vec<f64> = (0..m)
        .map(|j| sq_err.iter().map(|e| e[j]).sum::<f64>() / n_boot as f64)
        .collect();
    let mut best = 0;
    for j in 1..m {
        if mse[j] < mse[best] {
            best = j;
        }
    }
    Ok(Pi0Estimate {
        method: Pi0Method::Bootstrap,
        lambda_grid: grid.to_vec(),
        pi0_hat: clamp01(curve[best].min(1.0)),
        curve,
        tail_counts: w,
        n_pvalues: n,
        selected_lambda: Some(grid[best]),
        n_boot: Some(n_boot),
        seed: Some(seed),
        spline_dof: None,
        diagnostic: Some(mse),
    })
}

/// Right-continuous empirical CDF.
#[derive(Debug, Clone, PartialEq)]
pub struct Ecdf {
    sorted: Vec<f64>,
}

impl Ecdf {
    pub fn new(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
        Self { sorted }
    }

    pub fn from_pvalues(p: &PValueSet) -> Self {
        Self::new(&p.values)
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn eval(&self, x: f64) -> f64 {
        if self.sorted.is_empty() {
            return 0.0;
        }
        self.sorted.partition_point(|&v| v <= x) as f64 / self.sorted.len() as f64
    }

    /// Distinct support points with the CDF value at each.
    pub fn jumps(&self) -> Vec<(f64, f64)> {
        let n = self.sorted.len() as f64;
        let mut out: Vec<(f64, f64)> = Vec::new();
        for (i, &v) in self.sorted.iter().enumerate() {
            match out.last_mut() {
                Some(last) if last.0 == v => last.1 = (i + 1) as f64 / n,
                _ => out.push((v, (i + 1) as f64 / n)),
            }
        }
        out
    }
}

/// `sup_x |F_N(x) - F(x)|`, from both one-sided gaps at every jump of `F_N`.
/// The left gap uses `F` just below the jump, so a step function `F` is
/// handled as well as a continuous one.
pub fn ks_distance(e: &Ecdf, f: impl Fn(f64) -> f64) -> f64 {
    let mut prev = 0.0;
    let mut d: f64 = 0.0;
    for (x, fx) in e.jumps() {
        d = d.max((fx - f(x)).abs());
        d = d.max((prev - f(x.next_down())).abs());
        prev = fx;
    }
    d
}
