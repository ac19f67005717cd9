//! Replicated end-to-end runs on simulated data.
//!
//! Replication `r` (1-based) under root seed `s` draws its data from seed
//! `s + r`, so a run of `R` replications reproduces `R` single-replication
//! runs with roots `s, s + 1, ..., s + R - 1`.

use crate::gfc::{run_gfc, GfcError};
use crate::models::{GraphModel, ModelError, ModelSpec};
use crate::pi0::{
    bootstrap_pi0, default_grid, smoother_pi0, validate_grid, PValueSet, Pi0Error,
    DEFAULT_BOOTSTRAP, DEFAULT_SPLINE_DOF,
};
use crate::regression::{Method, PenaltyPolicy, SolverOptions};
use crate::rng::derive_seed;
use crate::sampler::{sample_mvn, SampleError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt::Write as _;
use std::time::Instant;
use thiserror::Error;

pub const DEFAULT_FAILURE_BUDGET: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Gfc(#[from] GfcError),
    #[error(transparent)]
    Pi0(#[from] Pi0Error),
    #[error("{failed} of {total} replications failed, over the {budget} budget")]
    TooManyFailures {
        failed: usize,
        total: usize,
        budget: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pi0Selector {
    Smoother,
    Bootstrap,
    Both,
}

impl Pi0Selector {
    pub fn smoother(self) -> bool {
        matches!(self, Pi0Selector::Smoother | Pi0Selector::Both)
    }

    pub fn bootstrap(self) -> bool {
        matches!(self, Pi0Selector::Bootstrap | Pi0Selector::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub model: ModelSpec,
    pub n: usize,
    pub method: Method,
    #[serde(default)]
    pub penalty: PenaltyPolicy,
    pub alpha: f64,
    pub pi0: Pi0Selector,
    #[serde(default = "default_grid")]
    pub grid: Vec<f64>,
    #[serde(default = "default_boot")]
    pub n_boot: usize,
    #[serde(default = "default_dof")]
    pub spline_dof: f64,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default = "default_budget")]
    pub failure_budget: f64,
}

fn default_boot() -> usize {
    DEFAULT_BOOTSTRAP
}

fn default_dof() -> f64 {
    DEFAULT_SPLINE_DOF
}

fn default_budget() -> f64 {
    DEFAULT_FAILURE_BUDGET
}

impl SimulationConfig {
    pub fn new(model: ModelSpec, n: usize, method: Method, pi0: Pi0Selector) -> Self {
        Self {
            model,
            n,
            method,
            penalty: PenaltyPolicy::default(),
            alpha: 0.1,
            pi0,
            grid: default_grid(),
            n_boot: DEFAULT_BOOTSTRAP,
            spline_dof: DEFAULT_SPLINE_DOF,
            solver: SolverOptions::default(),
            failure_budget: DEFAULT_FAILURE_BUDGET,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.n < 10 {
            return bad(format!("n must be >= 10, got {}", self.n));
        }
        if self.model.k < 3 {
            return bad(format!("k must be >= 3, got {}", self.model.k));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.pi0.bootstrap() && self.n_boot < 10 {
            return bad(format!("n_boot must be >= 10, got {}", self.n_boot));
        }
        if !(self.spline_dof >= 2.0 && self.spline_dof <= self.grid.len() as f64) {
            return bad(format!("spline_dof out of range: {}", self.spline_dof));
        }
        if !(0.0..=1.0).contains(&self.failure_budget) {
            return bad(format!(
                "failure_budget must lie in [0, 1], got {}",
                self.failure_budget
            ));
        }
        validate_grid(&self.grid)?;
        self.penalty
            .check()
            .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub seed: u64,
    pub pi0_smoother: Option<f64>,
    pub pi0_bootstrap: Option<f64>,
    pub bootstrap_lambda: Option<f64>,
    pub pi0_counted: f64,
    pub pi0_nominal: Option<f64>,
    pub fdp: f64,
    pub n_rejected: usize,
    pub t_hat: f64,
    pub unconverged_nodes: usize,
    pub runtime_secs: f64,
}

impl ReplicationRecord {
    /// Copy with the wall-clock field cleared, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self {
            runtime_secs: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedReplication {
    pub replication: usize,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            sd,
            count: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub pi0_smoother: Option<MeanSd>,
    pub pi0_bootstrap: Option<MeanSd>,
    pub fdp: Option<MeanSd>,
    pub pi0_counted: f64,
    pub pi0_nominal: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub schema: u32,
    pub config: SimulationConfig,
    pub root_seed: u64,
    pub replications: usize,
    pub records: Vec<ReplicationRecord>,
    pub failures: Vec<FailedReplication>,
    pub aggregate: Aggregate,
}

impl SimulationReport {
    /// Records as JSON with timing removed; equal across reruns of the same
    /// config and seed.
    pub fn reproducible_records(&self) -> String {
        let stripped: Vec<ReplicationRecord> = self
            .records
            .iter()
            .map(ReplicationRecord::without_timing)
            .collect();
        serde_json::to_string(&stripped).expect("serializable")
    }
}

/// One end-to-end pipeline on data drawn from `seed`.
pub fn run_replication(
    cfg: &SimulationConfig,
    model: &GraphModel,
    replication: usize,
    seed: u64,
) -> Result<ReplicationRecord, SimError> {
    let start = Instant::now();
    let x = sample_mvn(model, cfg.n, seed)?;
    let run = run_gfc(&x, cfg.method, cfg.penalty, cfg.alpha, &cfg.solver)?;
    let p = PValueSet::new(run.tests.p.clone())?;
    let smoother = if cfg.pi0.smoother() {
        Some(smoother_pi0(&p, &cfg.grid, cfg.spline_dof)?)
    } else {
        None
    };
    let bootstrap = if cfg.pi0.bootstrap() {
        Some(bootstrap_pi0(&p, &cfg.grid, cfg.n_boot, seed)?)
    } else {
        None
    };
    let edges: HashSet<(usize, usize)> = model.edges.iter().copied().collect();
    let rejected = run.fdr.rejected.len();
    let false_rejections = run
        .fdr
        .rejected
        .iter()
        .filter(|e| !edges.contains(e))
        .count();
    Ok(ReplicationRecord {
        replication,
        seed,
        pi0_smoother: smoother.map(|e| e.pi0_hat),
        pi0_bootstrap: bootstrap.as_ref().map(|e| e.pi0_hat),
        bootstrap_lambda: bootstrap.and_then(|e| e.selected_lambda),
        pi0_counted: model.pi0_true,
        pi0_nominal: model.pi0_nominal,
        fdp: false_rejections as f64 / rejected.max(1) as f64,
        n_rejected: rejected,
        t_hat: run.fdr.t_hat,
        unconverged_nodes: run.convergence.failed_nodes.len(),
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

/// `replications` independent runs; replication `r` uses seed `root_seed + r`.
pub fn simulate(
    cfg: &SimulationConfig,
    replications: usize,
    root_seed: u64,
) -> Result<SimulationReport, SimError> {
    cfg.validate()?;
    if replications == 0 {
        return Err(SimError::InvalidConfig("replications must be >= 1".into()));
    }
    let model = cfg.model.build()?;
    let outcomes: Vec<(usize, u64, Result<ReplicationRecord, SimError>)> = (1..=replications)
        .into_par_iter()
        .map(|r| {
            let seed = derive_seed(root_seed, r as u64);
            (r, seed, run_replication(cfg, &model, r, seed))
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (replication, seed, out) in outcomes {
        match out {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push(FailedReplication {
                replication,
                seed,
                message: e.to_string(),
            }),
        }
    }
    if failures.len() as f64 > cfg.failure_budget * replications as f64 {
        return Err(SimError::TooManyFailures {
            failed: failures.len(),
            total: replications,
            budget: cfg.failure_budget,
        });
    }
    let column = |f: fn(&ReplicationRecord) -> Option<f64>| -> Option<MeanSd> {
        let v: Vec<f64> = records.iter().filter_map(f).collect();
        MeanSd::of(&v)
    };
    let aggregate = Aggregate {
        pi0_smoother: column(|r| r.pi0_smoother),
        pi0_bootstrap: column(|r| r.pi0_bootstrap),
        fdp: column(|r| Some(r.fdp)),
        pi0_counted: model.pi0_true,
        pi0_nominal: model.pi0_nominal,
    };
    Ok(SimulationReport {
        schema: 1,
        config: cfg.clone(),
        root_seed,
        replications,
        records,
        failures,
        aggregate,
    })
}

fn cell(m: Option<MeanSd>) -> String {
    match m {
        Some(m) => format!("{:.3} ({:.3})", m.mean, m.sd),
        None => "-".into(),
    }
}

/// Plain-text table with one row per report: design, size, nominal and
/// counted null proportion, and mean (SD) of each estimate.
pub fn format_table(reports: &[SimulationReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>6} {:>12} {:>5} {:>7} {:>8} {:>8} {:>16} {:>16} {:>16} {:>5}",
        "design",
        "method",
        "penalty",
        "k",
        "n",
        "pi0_nom",
        "pi0_true",
        "smoother",
        "bootstrap",
        "FDP",
        "reps"
    );
    for r in reports {
        let nominal = r
            .aggregate
            .pi0_nominal
            .map(|v| format!("{v:.3}"))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>12} {:>5} {:>7} {:>8} {:>8.4} {:>16} {:>16} {:>16} {:>5}",
            format!("{:?}", r.config.model.design_tag),
            r.config.method.label(),
            r.config.penalty.label(),
            r.config.model.k,
            r.config.n,
            nominal,
            r.aggregate.pi0_counted,
            cell(r.aggregate.pi0_smoother),
            cell(r.aggregate.pi0_bootstrap),
            cell(r.aggregate.fdp),
            r.records.len(),
        );
    }
    out
}
