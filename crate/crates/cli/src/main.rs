mod commands;
mod config;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand, ValueEnum};
use commands::{EcdfOptions, Failure, OracleRequest, ECDF_POINTS};
use config::{Command, Emit, RunConfig, SimulationSection};
use ggmc_core::gfc::DEFAULT_B_MAX;
use ggmc_core::models::{block_size_for_nominal, DesignTag, ModelSpec};
use ggmc_core::oracles::{OracleSuiteConfig, DEFAULT_MEHLER_TERMS};
use ggmc_core::regression::{Method, PenaltyPolicy};
use ggmc_core::simulation::{Pi0Selector, DEFAULT_FAILURE_BUDGET};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ggmc",
    version,
    about = "Edge-proportion estimation for Gaussian graphical models"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Edge p-values, FDR edge set, null proportion and ECDF for a data file.
    Estimate(EstimateArgs),
    /// Repeated runs on simulated data from a known graph.
    Simulate(SimulateArgs),
    /// ECDF of p-values on an even grid, with optional jump points.
    Ecdf(EcdfArgs),
    /// Closed-form and Monte Carlo checks of the theory.
    Oracle(OracleArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    #[value(name = "lasso", alias = "GFC_L", alias = "gfc-l")]
    Lasso,
    #[value(name = "scaled-lasso", alias = "GFC_SL", alias = "gfc-sl")]
    ScaledLasso,
}

#[derive(Clone, Copy, ValueEnum)]
enum Pi0Arg {
    Smoother,
    Bootstrap,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum DesignArg {
    Ar1,
    Equicorr,
    Band,
    Er,
    BandedCov,
}

/// Settings shared by every command that fits the model.
#[derive(Args, Default)]
struct FitArgs {
    /// Node-wise regression method.
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// FDR level.
    #[arg(long)]
    alpha: Option<f64>,
    /// Null-proportion estimator(s).
    #[arg(long, value_enum)]
    pi0: Option<Pi0Arg>,
    /// Multiplier of the universal penalty level.
    #[arg(long, conflicts_with_all = ["lambda", "data_driven"])]
    kappa: Option<f64>,
    /// Fixed penalty for every node.
    #[arg(long, conflicts_with = "data_driven")]
    lambda: Option<f64>,
    /// Pick the penalty per data set by matching null tail counts.
    #[arg(long)]
    data_driven: bool,
    /// Grid size for --data-driven.
    #[arg(long, requires = "data_driven")]
    b_max: Option<u32>,
    #[arg(long)]
    grid_lo: Option<f64>,
    #[arg(long)]
    grid_hi: Option<f64>,
    #[arg(long)]
    grid_step: Option<f64>,
    /// Bootstrap resamples.
    #[arg(long = "boot")]
    n_boot: Option<usize>,
    #[arg(long)]
    spline_dof: Option<f64>,
    /// Output formats, comma separated.
    #[arg(long, value_enum, value_delimiter = ',')]
    emit: Option<Vec<Emit>>,
}

impl FitArgs {
    fn apply(&self, c: &mut RunConfig) {
        if let Some(m) = self.method {
            c.method = match m {
                MethodArg::Lasso => Method::Lasso,
                MethodArg::ScaledLasso => Method::ScaledLasso,
            };
        }
        if let Some(a) = self.alpha {
            c.alpha = a;
        }
        if let Some(p) = self.pi0 {
            c.pi0 = match p {
                Pi0Arg::Smoother => Pi0Selector::Smoother,
                Pi0Arg::Bootstrap => Pi0Selector::Bootstrap,
                Pi0Arg::Both => Pi0Selector::Both,
            };
        }
        if let Some(kappa) = self.kappa {
            c.penalty = PenaltyPolicy::Universal { kappa };
        }
        if let Some(lambda) = self.lambda {
            c.penalty = PenaltyPolicy::Fixed { lambda };
        }
        if self.data_driven {
            c.penalty = PenaltyPolicy::DataDriven {
                b_max: self.b_max.unwrap_or(DEFAULT_B_MAX),
            };
        }
        if let Some(v) = self.grid_lo {
            c.grid.lo = v;
        }
        if let Some(v) = self.grid_hi {
            c.grid.hi = v;
        }
        if let Some(v) = self.grid_step {
            c.grid.step = v;
        }
        if let Some(v) = self.n_boot {
            c.n_boot = v;
        }
        if let Some(v) = self.spline_dof {
            c.spline_dof = v;
        }
        if let Some(e) = &self.emit {
            c.emit = e.clone();
        }
    }
}

#[derive(Args)]
struct EstimateArgs {
    /// Run config or manifest (JSON); flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Numeric CSV, one row per observation.
    #[arg(long)]
    input: Option<PathBuf>,
    /// The input starts with a header row.
    #[arg(long)]
    header: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Bootstrap seed.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of replications.
    #[arg(long)]
    reps: Option<usize>,
    /// Root seed; replication r uses seed + r.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    design: Option<DesignArg>,
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// Observations per replication.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    block_size: Option<usize>,
    /// Picks the block size for block designs.
    #[arg(long, conflicts_with = "block_size")]
    nominal_pi0: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    /// Edge probability for the random graph.
    #[arg(long)]
    q: Option<f64>,
    /// Seed of the random graph.
    #[arg(long, default_value_t = 1)]
    model_seed: u64,
    /// Extra kappa values to run for comparison, comma separated.
    #[arg(long, value_delimiter = ',')]
    kappa_sweep: Option<Vec<f64>>,
    #[command(flatten)]
    fit: FitArgs,
}

impl SimulateArgs {
    fn model(&self) -> Option<ModelSpec> {
        let design = self.design?;
        let block = || {
            self.block_size
                .unwrap_or_else(|| block_size_for_nominal(self.k, self.nominal_pi0.unwrap_or(0.9)))
        };
        Some(match design {
            DesignArg::Ar1 => ModelSpec::block_ar1(self.k, block(), self.rho),
            DesignArg::Equicorr => ModelSpec::block_equicorr(self.k, block(), self.rho),
            DesignArg::Band => ModelSpec::band(self.k),
            DesignArg::Er => ModelSpec::erdos_renyi(
                self.k,
                self.q
                    .unwrap_or_else(|| ModelSpec::erdos_renyi_default_q(self.k)),
                self.model_seed,
            ),
            DesignArg::BandedCov => {
                let mut m = ModelSpec::band(self.k);
                m.design_tag = DesignTag::BandedCovariance;
                m.rho = Some(self.rho);
                m
            }
        })
    }
}

#[derive(Args)]
struct EcdfArgs {
    /// P-values: one per line, or a CSV with a `p` column.
    #[arg(long, conflicts_with = "input")]
    pvalues: Option<PathBuf>,
    /// Data file to run through the full pipeline instead.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    header: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = ECDF_POINTS)]
    points: usize,
    /// Also write the exact jump points.
    #[arg(long)]
    jumps: bool,
    /// Add a uniform reference column.
    #[arg(long)]
    uniform: bool,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Args)]
struct OracleArgs {
    /// Evaluate the indicator covariance series at this correlation.
    #[arg(long)]
    mehler_rho: Option<f64>,
    /// Threshold for --mehler-rho.
    #[arg(long, requires = "mehler_rho")]
    x: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_MEHLER_TERMS)]
    terms: usize,
    /// Precision matrix CSV; prints the covariance of the U statistics.
    #[arg(long, conflicts_with = "mehler_rho")]
    isserlis: Option<PathBuf>,
    /// Seed of the Monte Carlo checks.
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo replications per Isserlis model.
    #[arg(long)]
    reps: Option<usize>,
    /// Directory for the JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(path: &Option<PathBuf>, command: Command) -> Result<RunConfig, Failure> {
    let Some(path) = path else {
        return Ok(RunConfig::new(command));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::input(anyhow!("cannot read {}: {e}", path.display())))?;
    let mut cfg = RunConfig::from_json(&text)
        .map_err(|e| Failure::input(anyhow!("{}: {e}", path.display())))?;
    if cfg.command != command {
        return Err(Failure::input(anyhow!(
            "{} is a {:?} config",
            path.display(),
            cfg.command
        )));
    }
    cfg.command = command;
    Ok(cfg)
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("GGMC_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| {
        Failure::input(anyhow!(
            "GGMC_THREADS must be a non-negative integer, got {v:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(Failure::other)
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Cmd::Estimate(a) => {
            let mut cfg = load_config(&a.config, Command::Estimate)?;
            if let Some(p) = a.input {
                cfg.input = Some(p);
            }
            cfg.header |= a.header;
            if let Some(o) = a.out {
                cfg.out = o;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            a.fit.apply(&mut cfg);
            commands::run(&cfg)
        }
        Cmd::Simulate(a) => {
            let mut cfg = load_config(&a.config, Command::Simulate)?;
            a.fit.apply(&mut cfg);
            if let Some(model) = a.model() {
                let section = cfg.simulation.get_or_insert(SimulationSection {
                    model: model.clone(),
                    n: 200,
                    replications: 20,
                    root_seed: 1,
                    failure_budget: DEFAULT_FAILURE_BUDGET,
                    kappa_sweep: Vec::new(),
                });
                section.model = model;
            }
            let section = cfg
                .simulation
                .as_mut()
                .ok_or_else(|| Failure::input(anyhow!("simulate needs --config or --design")))?;
            if let Some(n) = a.n {
                section.n = n;
            }
            if let Some(r) = a.reps {
                section.replications = r;
            }
            if let Some(s) = a.seed {
                section.root_seed = s;
            }
            if let Some(sweep) = a.kappa_sweep {
                section.kappa_sweep = sweep;
            }
            if let Some(o) = a.out {
                cfg.out = o;
            }
            commands::run(&cfg)
        }
        Cmd::Ecdf(a) => {
            let mut cfg = RunConfig::new(Command::Ecdf);
            a.fit.apply(&mut cfg);
            cfg.header = a.header;
            cfg.input = a.input.clone();
            if let Some(o) = a.out {
                cfg.out = o;
            }
            cfg.validate().map_err(|e| Failure::input(anyhow!(e)))?;
            let opts = EcdfOptions {
                points: a.points,
                jumps: a.jumps,
                uniform: a.uniform,
            };
            match (&a.pvalues, &a.input) {
                (Some(p), _) => commands::ecdf(&cfg, Some((p.as_path(), opts))),
                (None, Some(_)) => {
                    let x = commands::ecdf_input(&cfg)?;
                    commands::ecdf_from(&cfg, &x, opts)
                }
                (None, None) => Err(Failure::input(anyhow!("ecdf needs --pvalues or --input"))),
            }
        }
        Cmd::Oracle(a) => {
            let mut cfg = RunConfig::new(Command::Oracle);
            cfg.out = a.out.unwrap_or_default();
            let req = if let Some(rho) = a.mehler_rho {
                OracleRequest::Mehler {
                    rho,
                    x: a.x.unwrap_or(0.0),
                    terms: a.terms,
                }
            } else if let Some(path) = a.isserlis {
                OracleRequest::Isserlis(path)
            } else {
                let mut suite = OracleSuiteConfig {
                    mehler_terms: a.terms,
                    ..OracleSuiteConfig::default()
                };
                if let Some(s) = a.seed {
                    suite.seed = s;
                }
                if let Some(r) = a.reps {
                    suite.isserlis_reps = r;
                }
                OracleRequest::Suite(suite)
            };
            commands::oracle(&cfg, &req)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
