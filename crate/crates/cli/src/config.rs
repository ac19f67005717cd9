//! Run configuration: the JSON file form of every command.

use ggmc_core::models::ModelSpec;
use ggmc_core::pi0::{grid_from, DEFAULT_BOOTSTRAP, DEFAULT_SPLINE_DOF};
use ggmc_core::regression::{Method, PenaltyPolicy, SolverOptions};
use ggmc_core::simulation::{Pi0Selector, SimulationConfig, DEFAULT_FAILURE_BUDGET};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

pub const SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Estimate,
    Simulate,
    Ecdf,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Emit {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lo: 0.0,
            hi: 0.95,
            step: 0.01,
        }
    }
}

impl GridSpec {
    pub fn values(&self) -> Result<Vec<f64>, String> {
        grid_from(self.lo, self.hi, self.step).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub model: ModelSpec,
    pub n: usize,
    pub replications: usize,
    pub root_seed: u64,
    #[serde(default = "default_budget")]
    pub failure_budget: f64,
    /// Extra kappa values to run as a sensitivity sweep.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kappa_sweep: Vec<f64>,
}

fn default_budget() -> f64 {
    DEFAULT_FAILURE_BUDGET
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    pub command: Command,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// The input CSV starts with a header row.
    #[serde(default)]
    pub header: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationSection>,
    pub method: Method,
    pub penalty: PenaltyPolicy,
    pub alpha: f64,
    pub pi0: Pi0Selector,
    pub grid: GridSpec,
    pub n_boot: usize,
    pub spline_dof: f64,
    /// Bootstrap seed for `estimate`.
    pub seed: u64,
    pub out: PathBuf,
    pub emit: Vec<Emit>,
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        Self {
            schema: SCHEMA,
            command,
            input: None,
            header: false,
            simulation: None,
            method: Method::ScaledLasso,
            penalty: PenaltyPolicy::default(),
            alpha: 0.1,
            pi0: Pi0Selector::Both,
            grid: GridSpec::default(),
            n_boot: DEFAULT_BOOTSTRAP,
            spline_dof: DEFAULT_SPLINE_DOF,
            seed: 1,
            out: PathBuf::from("ggmc-out"),
            emit: vec![Emit::Json, Emit::Csv],
        }
    }

    /// Accepts a bare config or a run manifest that embeds one.
    pub fn from_json(text: &str) -> Result<Self, String> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let inner = match value.get("config") {
            Some(c) if value.get("tool").is_some() => c.clone(),
            _ => value,
        };
        serde_json::from_value(inner).map_err(|e| e.to_string())
    }

    pub fn emits(&self, e: Emit) -> bool {
        self.emit.contains(&e)
    }

    /// Range checks for everything the command will use.
    pub fn validate(&self) -> Result<(), String> {
        if self.schema != SCHEMA {
            return Err(format!("unsupported schema {}", self.schema));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        self.penalty.check().map_err(|e| e.to_string())?;
        let grid = self.grid.values()?;
        if !(self.spline_dof >= 2.0 && self.spline_dof <= grid.len() as f64) {
            return Err(format!(
                "spline_dof must lie in [2, {}], got {}",
                grid.len(),
                self.spline_dof
            ));
        }
        if self.pi0.bootstrap() && self.n_boot < 10 {
            return Err(format!("n_boot must be >= 10, got {}", self.n_boot));
        }
        match self.command {
            Command::Estimate if self.input.is_none() => {
                return Err("estimate needs an input file".into())
            }
            Command::Simulate => {
                let s = self
                    .simulation
                    .as_ref()
                    .ok_or("simulate needs a `simulation` section")?;
                if s.replications == 0 {
                    return Err("replications must be >= 1".into());
                }
                if s.kappa_sweep.iter().any(|k| !(k.is_finite() && *k >= 0.0)) {
                    return Err("kappa_sweep values must be finite and >= 0".into());
                }
                self.simulation_config(self.penalty)?
                    .validate()
                    .map_err(|e| e.to_string())?;
            }
            _ => {}
        }
        Ok(())
    }

    pub fn simulation_config(&self, penalty: PenaltyPolicy) -> Result<SimulationConfig, String> {
        let s = self
            .simulation
            .as_ref()
            .ok_or("simulate needs a `simulation` section")?;
        Ok(SimulationConfig {
            model: s.model.clone(),
            n: s.n,
            method: self.method,
            penalty,
            alpha: self.alpha,
            pi0: self.pi0,
            grid: self.grid.values()?,
            n_boot: self.n_boot,
            spline_dof: self.spline_dof,
            solver: SolverOptions::default(),
            failure_budget: s.failure_budget,
        })
    }
}
