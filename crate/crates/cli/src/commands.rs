//! The four subcommands. Each takes a validated [`RunConfig`] and writes its
//! artifacts under `config.out`.

use crate::config::{Command, Emit, RunConfig, SCHEMA};
use anyhow::{anyhow, Context};
use ggmc_core::gfc::{pairs, run_gfc, GfcError, GfcRun};
use ggmc_core::linalg::SymMatrix;
use ggmc_core::models::n_pairs;
use ggmc_core::oracles::{
    isserlis_cov, mehler_bound, mehler_indicator_cov, orthant_indicator_cov, run_oracle_suite,
    DeltaMatrix, OracleSuiteConfig,
};
use ggmc_core::pi0::{bootstrap_pi0, smoother_pi0, Ecdf, PValueSet, Pi0Estimate};
use ggmc_core::regression::SolverOptions;
use ggmc_core::sampler::{read_csv, SampleError, SampleMatrix};
use ggmc_core::simulation::{format_table, simulate, SimError, SimulationReport};
use serde_json::{json, Value};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

/// Points of the evenly spaced ECDF grid on [0, 1].
pub const ECDF_POINTS: usize = 512;

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn input(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 2,
            error: error.into(),
        }
    }

    pub fn other(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 1,
            error: error.into(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::other(e)
    }
}

/// Prints to stdout; a closed pipe is not an error.
pub fn say(text: &str) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

macro_rules! sayln {
    ($($arg:tt)*) => { say(&format!("{}\n", format_args!($($arg)*))) };
}

fn gfc_failure(e: GfcError) -> Failure {
    match e {
        GfcError::DegenerateResidual { node, r_ii } => Failure {
            code: 3,
            error: anyhow!(
                "residual variance of column {} is degenerate ({r_ii:e})",
                node + 1
            ),
        },
        GfcError::TooSmall { .. } | GfcError::InvalidAlpha(_) => Failure::input(e),
        e => Failure::other(e),
    }
}

pub fn run(cfg: &RunConfig) -> Result<(), Failure> {
    cfg.validate().map_err(|e| Failure::input(anyhow!(e)))?;
    match cfg.command {
        Command::Estimate => estimate(cfg),
        Command::Simulate => run_simulate(cfg),
        Command::Ecdf => ecdf(cfg, None),
        Command::Oracle => oracle(cfg, &OracleRequest::Suite(OracleSuiteConfig::default())),
    }
}

fn load_data(cfg: &RunConfig) -> Result<SampleMatrix, Failure> {
    let path = cfg
        .input
        .as_ref()
        .ok_or_else(|| Failure::input(anyhow!("no input file")))?;
    let file = File::open(path)
        .with_context(|| format!("cannot open {}", path.display()))
        .map_err(Failure::input)?;
    let x = read_csv(BufReader::new(file), cfg.header).map_err(|e| match e {
        SampleError::Io(e) => Failure::other(e),
        e => Failure::input(anyhow!("{}: {e}", path.display())),
    })?;
    if x.n() < 10 || x.k() < 3 {
        return Err(Failure::input(anyhow!(
            "{}: need at least 10 rows and 3 columns, got {} x {}",
            path.display(),
            x.n(),
            x.k()
        )));
    }
    Ok(x)
}

fn fit(cfg: &RunConfig, x: &SampleMatrix) -> Result<GfcRun, Failure> {
    run_gfc(
        x,
        cfg.method,
        cfg.penalty,
        cfg.alpha,
        &SolverOptions::default(),
    )
    .map_err(gfc_failure)
}

fn pi0_estimates(
    cfg: &RunConfig,
    p: &PValueSet,
) -> Result<(Option<Pi0Estimate>, Option<Pi0Estimate>), Failure> {
    let grid = cfg.grid.values().map_err(|e| Failure::input(anyhow!(e)))?;
    let smoother = if cfg.pi0.smoother() {
        Some(smoother_pi0(p, &grid, cfg.spline_dof).map_err(Failure::other)?)
    } else {
        None
    };
    let bootstrap = if cfg.pi0.bootstrap() {
        Some(bootstrap_pi0(p, &grid, cfg.n_boot, cfg.seed).map_err(Failure::other)?)
    } else {
        None
    };
    Ok((smoother, bootstrap))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(Failure::other)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn manifest(cfg: &RunConfig, extra: Value, outputs: &[&str]) -> Value {
    let created = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    json!({
        "schema": SCHEMA,
        "tool": "ggmc",
        "version": env!("CARGO_PKG_VERSION"),
        "created_unix": created,
        "config": cfg,
        "run": extra,
        "outputs": outputs,
    })
}

/// `lambda,F` on an even grid of [0, 1], optionally with `uniform`.
pub fn write_ecdf_grid<W: Write>(
    e: &Ecdf,
    points: usize,
    uniform: bool,
    mut w: W,
) -> std::io::Result<()> {
    writeln!(
        w,
        "{}",
        if uniform {
            "lambda,F,uniform"
        } else {
            "lambda,F"
        }
    )?;
    for i in 0..points {
        let lambda = i as f64 / (points - 1) as f64;
        if uniform {
            writeln!(w, "{lambda},{},{lambda}", e.eval(lambda))?;
        } else {
            writeln!(w, "{lambda},{}", e.eval(lambda))?;
        }
    }
    Ok(())
}

/// Two rows per jump: the value just before and at the jump point.
pub fn write_ecdf_jumps<W: Write>(e: &Ecdf, mut w: W) -> std::io::Result<()> {
    writeln!(w, "lambda,F")?;
    let mut prev = 0.0;
    for (x, f) in e.jumps() {
        writeln!(w, "{x},{prev}")?;
        writeln!(w, "{x},{f}")?;
        prev = f;
    }
    Ok(())
}

fn estimate(cfg: &RunConfig) -> Result<(), Failure> {
    let x = load_data(cfg)?;
    let run = fit(cfg, &x)?;
    let source = cfg
        .input
        .as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default();
    let p = PValueSet::new(run.tests.p.clone())
        .map_err(Failure::other)?
        .with_source(source);
    let (smoother, bootstrap) = pi0_estimates(cfg, &p)?;
    fs::create_dir_all(&cfg.out)?;
    let out = &cfg.out;
    let mut outputs = Vec::new();

    if cfg.emits(Emit::Csv) {
        run.tests
            .write_csv(BufWriter::new(File::create(out.join("pvalues.csv"))?))?;
        let ecdf = Ecdf::from_pvalues(&p);
        write_ecdf_grid(
            &ecdf,
            ECDF_POINTS,
            true,
            BufWriter::new(File::create(out.join("ecdf.csv"))?),
        )?;
        outputs.extend(["pvalues.csv", "ecdf.csv"]);
        if let Some(s) = &smoother {
            s.write_curve_csv(BufWriter::new(File::create(out.join("pi0_smoother.csv"))?))?;
            outputs.push("pi0_smoother.csv");
        }
        if let Some(b) = &bootstrap {
            b.write_curve_csv(BufWriter::new(File::create(out.join("pi0_bootstrap.csv"))?))?;
            outputs.push("pi0_bootstrap.csv");
        }
    }
    let run_info = json!({
        "n": x.n(),
        "k": x.k(),
        "method": run.method.label(),
        "penalty": run.resolved_policy,
        "unconverged_nodes": run.convergence.failed_nodes.iter().map(|i| i + 1).collect::<Vec<_>>(),
        "bootstrap_seed": cfg.seed,
    });
    if cfg.emits(Emit::Json) {
        let mut fdr = run.fdr.to_json();
        let obj = fdr.as_object_mut().expect("object");
        obj.insert("method".into(), run.method.label().into());
        obj.insert("penalty".into(), json!(run.resolved_policy));
        write_json(&out.join("fdr_edges.json"), &fdr)?;
        let mut pi0 = json!({"schema": SCHEMA, "n_pvalues": p.len()});
        if let Some(s) = &smoother {
            pi0["smoother"] = s.to_json();
        }
        if let Some(b) = &bootstrap {
            pi0["bootstrap"] = b.to_json();
        }
        write_json(&out.join("pi0.json"), &pi0)?;
        outputs.extend(["fdr_edges.json", "pi0.json"]);
    }
    write_json(
        &out.join("manifest.json"),
        &manifest(cfg, run_info, &outputs),
    )?;

    sayln!(
        "n = {}, k = {}, {} ({}), alpha = {}",
        x.n(),
        x.k(),
        run.method.label(),
        run.resolved_policy.label(),
        cfg.alpha
    )?;
    sayln!(
        "threshold {:.4}{}, {} edges rejected",
        run.fdr.t_hat,
        if run.fdr.infimum_found {
            ""
        } else {
            " (fallback)"
        },
        run.fdr.rejected.len()
    )?;
    if let Some(s) = &smoother {
        sayln!("pi0 smoother  {:.4}", s.pi0_hat)?;
    }
    if let Some(b) = &bootstrap {
        sayln!(
            "pi0 bootstrap {:.4} (lambda {:.2})",
            b.pi0_hat,
            b.selected_lambda.unwrap_or(f64::NAN)
        )?;
    }
    Ok(())
}

fn records_csv(report: &SimulationReport) -> String {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut s = String::from(
        "replication,seed,pi0_smoother,pi0_bootstrap,bootstrap_lambda,pi0_counted,pi0_nominal,fdp,n_rejected,t_hat,unconverged_nodes,runtime_secs\n",
    );
    for r in &report.records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.replication,
            r.seed,
            opt(r.pi0_smoother),
            opt(r.pi0_bootstrap),
            opt(r.bootstrap_lambda),
            r.pi0_counted,
            opt(r.pi0_nominal),
            r.fdp,
            r.n_rejected,
            r.t_hat,
            r.unconverged_nodes,
            r.runtime_secs
        );
    }
    s
}

fn sim_failure(e: SimError) -> Failure {
    match e {
        SimError::InvalidConfig(_) | SimError::Model(_) => Failure::input(e),
        e => Failure::other(e),
    }
}

fn run_simulate(cfg: &RunConfig) -> Result<(), Failure> {
    let section = cfg.simulation.as_ref().expect("validated");
    let mut reports = Vec::new();
    let mut policies = vec![cfg.penalty];
    policies.extend(
        section
            .kappa_sweep
            .iter()
            .map(|&kappa| ggmc_core::regression::PenaltyPolicy::Universal { kappa }),
    );
    for policy in policies {
        let sc = cfg
            .simulation_config(policy)
            .map_err(|e| Failure::input(anyhow!(e)))?;
        reports.push(simulate(&sc, section.replications, section.root_seed).map_err(sim_failure)?);
    }
    let table = format_table(&reports);
    fs::create_dir_all(&cfg.out)?;
    let out = &cfg.out;
    let mut outputs = vec!["table.txt"];
    fs::write(out.join("table.txt"), &table)?;
    if cfg.emits(Emit::Json) {
        write_json(&out.join("report.json"), &reports[0])?;
        outputs.push("report.json");
        if reports.len() > 1 {
            write_json(&out.join("sweep.json"), &reports)?;
            outputs.push("sweep.json");
        }
    }
    if cfg.emits(Emit::Csv) {
        fs::write(out.join("records.csv"), records_csv(&reports[0]))?;
        outputs.push("records.csv");
    }
    let failures: usize = reports.iter().map(|r| r.failures.len()).sum();
    let info = json!({
        "root_seed": section.root_seed,
        "replication_seeds": reports[0].records.iter().map(|r| r.seed).collect::<Vec<_>>(),
        "failed_replications": failures,
    });
    write_json(&out.join("manifest.json"), &manifest(cfg, info, &outputs))?;
    say(&table)?;
    if failures > 0 {
        eprintln!("{failures} replication(s) failed and were excluded; see report.json");
    }
    Ok(())
}

/// Reads p-values from a single-column file or from the `p` column of a
/// file with a header row (such as `pvalues.csv`).
pub fn read_pvalues(path: &Path) -> Result<PValueSet, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(Failure::input)?;
    let bad = |line: usize, column: usize, msg: String| {
        Failure::input(anyhow!(
            "{}: line {line}, column {column}: {msg}",
            path.display()
        ))
    };
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .peekable();
    let mut column = 0;
    if let Some((_, first)) = lines.peek() {
        let fields: Vec<&str> = first.split(',').map(str::trim).collect();
        if fields.iter().any(|f| f.parse::<f64>().is_err()) {
            column = fields
                .iter()
                .position(|f| f.eq_ignore_ascii_case("p"))
                .ok_or_else(|| bad(1, 1, "header has no `p` column".into()))?;
            lines.next();
        }
    }
    let mut values = Vec::new();
    for (i, line) in lines {
        let field = line
            .split(',')
            .nth(column)
            .ok_or_else(|| bad(i + 1, column + 1, "missing field".into()))?
            .trim();
        let v: f64 = field
            .parse()
            .map_err(|_| bad(i + 1, column + 1, format!("not a number: {field:?}")))?;
        values.push(v);
    }
    PValueSet::new(values)
        .map(|p| p.with_source(path.display().to_string()))
        .map_err(|e| Failure::input(anyhow!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EcdfOptions {
    pub points: usize,
    pub jumps: bool,
    pub uniform: bool,
}

/// ECDF export from a p-value file, or from a data file through the full
/// pipeline when `pvalues` is `None`.
pub fn ecdf(cfg: &RunConfig, opts: Option<(&Path, EcdfOptions)>) -> Result<(), Failure> {
    let (p, o) = match opts {
        Some((path, o)) => (read_pvalues(path)?, o),
        None => {
            let o = EcdfOptions {
                points: ECDF_POINTS,
                jumps: false,
                uniform: true,
            };
            (ecdf_input(cfg)?, o)
        }
    };
    ecdf_from(cfg, &p, o)
}

/// P-values of the data file in `cfg.input`.
pub fn ecdf_input(cfg: &RunConfig) -> Result<PValueSet, Failure> {
    let x = load_data(cfg)?;
    let run = fit(cfg, &x)?;
    PValueSet::new(run.tests.p).map_err(Failure::other)
}

pub fn ecdf_from(cfg: &RunConfig, p: &PValueSet, o: EcdfOptions) -> Result<(), Failure> {
    if o.points < 2 {
        return Err(Failure::input(anyhow!("need at least 2 grid points")));
    }
    let e = Ecdf::from_pvalues(p);
    fs::create_dir_all(&cfg.out)?;
    let mut outputs = vec!["ecdf.csv"];
    write_ecdf_grid(
        &e,
        o.points,
        o.uniform,
        BufWriter::new(File::create(cfg.out.join("ecdf.csv"))?),
    )?;
    if o.jumps {
        write_ecdf_jumps(
            &e,
            BufWriter::new(File::create(cfg.out.join("ecdf_jumps.csv"))?),
        )?;
        outputs.push("ecdf_jumps.csv");
    }
    let info =
        json!({"n_pvalues": p.len(), "points": o.points, "jumps": o.jumps, "uniform": o.uniform});
    write_json(
        &cfg.out.join("manifest.json"),
        &manifest(cfg, info, &outputs),
    )?;
    sayln!("{} p-values, F(0.2) = {:.4}", p.len(), e.eval(0.2))?;
    Ok(())
}

pub enum OracleRequest {
    Suite(OracleSuiteConfig),
    Mehler { rho: f64, x: f64, terms: usize },
    Isserlis(std::path::PathBuf),
}

fn emit_report(cfg: &RunConfig, name: &str, value: &Value) -> Result<(), Failure> {
    sayln!(
        "{}",
        serde_json::to_string_pretty(value).map_err(Failure::other)?
    )?;
    if cfg.out.as_os_str().is_empty() {
        return Ok(());
    }
    fs::create_dir_all(&cfg.out)?;
    write_json(&cfg.out.join(name), value)
}

pub fn oracle(cfg: &RunConfig, req: &OracleRequest) -> Result<(), Failure> {
    match req {
        OracleRequest::Suite(suite) => {
            let report = run_oracle_suite(suite).map_err(Failure::other)?;
            let value = serde_json::to_value(&report).map_err(Failure::other)?;
            emit_report(cfg, "oracle.json", &value)?;
            if !report.all_passed {
                let failed: Vec<&str> = report
                    .checks
                    .iter()
                    .filter(|c| !c.passed)
                    .map(|c| c.name.as_str())
                    .collect();
                return Err(Failure::other(anyhow!(
                    "oracle checks failed: {}",
                    failed.join(", ")
                )));
            }
            Ok(())
        }
        OracleRequest::Mehler { rho, x, terms } => {
            let s = mehler_indicator_cov(*rho, *x, *terms).map_err(Failure::input)?;
            let bound = mehler_bound(*rho).map_err(Failure::input)?;
            let exact = orthant_indicator_cov(*rho, *x);
            let passed = (s.value - exact).abs() <= s.tail_bound + 1e-8 && s.value.abs() <= bound;
            let value = json!({
                "schema": SCHEMA,
                "rho": rho,
                "x": x,
                "n_terms": s.n_terms,
                "cov": s.value,
                "tail_bound": s.tail_bound,
                "orthant_quadrature": exact,
                "bound": bound,
                "passed": passed,
            });
            emit_report(cfg, "mehler.json", &value)?;
            if passed {
                Ok(())
            } else {
                Err(Failure::other(anyhow!("series disagrees with quadrature")))
            }
        }
        OracleRequest::Isserlis(path) => {
            let file = File::open(path)
                .with_context(|| format!("cannot open {}", path.display()))
                .map_err(Failure::input)?;
            let m = read_csv(BufReader::new(file), false)
                .map_err(|e| Failure::input(anyhow!("{}: {e}", path.display())))?;
            let a = m.values();
            let k = a.nrows();
            if a.ncols() != k {
                return Err(Failure::input(anyhow!(
                    "precision must be square, got {k} x {}",
                    a.ncols()
                )));
            }
            for i in 0..k {
                for j in 0..i {
                    if (a[(i, j)] - a[(j, i)]).abs()
                        > 1e-12 * (a[(i, j)].abs() + a[(j, i)].abs()).max(1.0)
                    {
                        return Err(Failure::input(anyhow!(
                            "precision is not symmetric at ({}, {})",
                            i + 1,
                            j + 1
                        )));
                    }
                }
                if !(a[(i, i)] > 0.0) {
                    return Err(Failure::input(anyhow!(
                        "diagonal entry {} must be positive",
                        i + 1
                    )));
                }
            }
            let omega = SymMatrix::from_upper(a.clone()).map_err(Failure::input)?;
            let d = DeltaMatrix::from_precision(&omega);
            let ps: Vec<(usize, usize)> = pairs(k).collect();
            let cov: Vec<Vec<f64>> = ps
                .iter()
                .map(|&a| ps.iter().map(|&b| isserlis_cov(&d, a, b)).collect())
                .collect();
            let value = json!({
                "schema": SCHEMA,
                "k": k,
                "n_pairs": n_pairs(k),
                "pairs": ps.iter().map(|&(i, j)| [i + 1, j + 1]).collect::<Vec<_>>(),
                "cov": cov,
            });
            emit_report(cfg, "isserlis.json", &value)
        }
    }
}
