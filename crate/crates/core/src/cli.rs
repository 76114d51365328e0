//! Batch front end: configuration files, subcommands and output files.
//!
//! Exit codes: 0 success, 1 computation failure, 2 configuration error,
//! 3 verification failure.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convergence::ladder;
use crate::discretize::{FiberProblem, GridOptions};
use crate::dispersion::{band_edges, solve_fiber, write_svg, DispersionTable, FiberSolution, MomentumGrid, SummaryOptions, SweepSettings};
use crate::eigensolve::{EigenRequest, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::model::{GeometryConfig, PhysicalConfig, Width};
use crate::verify::{any_failed, run_suite, Suite, SuiteOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_COMPUTATION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

/// Momentum sampling: an explicit list or an equispaced range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MomentumSpec {
    List(Vec<f64>),
    Range { min: f64, max: f64, count: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    /// Defaults to the geometry-dependent symmetric grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<MomentumSpec>,
    #[serde(default = "default_levels")]
    pub levels: usize,
}

fn default_levels() -> usize {
    5
}

impl Default for SweepBlock {
    fn default() -> Self {
        SweepBlock { p: None, levels: default_levels() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Transverse spacing; when absent, `π / cells_per_pi`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    #[serde(default = "default_cells")]
    pub cells_per_pi: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hx: Option<f64>,
    #[serde(default = "default_margin")]
    pub energy_margin: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_max: Option<f64>,
    #[serde(default)]
    pub error_estimates: bool,
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}
fn default_max_iter() -> usize {
    400
}
fn default_cells() -> u32 {
    32
}
fn default_margin() -> f64 {
    10.0
}

impl Default for SolverBlock {
    fn default() -> Self {
        SolverBlock {
            tol: default_tol(),
            max_iter: default_max_iter(),
            h: None,
            cells_per_pi: default_cells(),
            hx: None,
            energy_margin: default_margin(),
            decay: None,
            e_max: None,
            error_estimates: false,
        }
    }
}

impl SolverBlock {
    pub fn grid(&self) -> GridOptions {
        let h = self.h.unwrap_or(std::f64::consts::PI / self.cells_per_pi.max(1) as f64);
        GridOptions { h, hx_target: self.hx, hx: None, energy_margin: self.energy_margin, decay: self.decay }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub svg: Option<PathBuf>,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock { dir: default_dir(), svg: None }
    }
}

/// Everything a run needs, as read from a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    #[serde(default = "unit_field")]
    pub physics: PhysicalConfig,
    #[serde(default)]
    pub sweep: SweepBlock,
    #[serde(default)]
    pub solver: SolverBlock,
    #[serde(default)]
    pub output: OutputBlock,
    #[serde(default)]
    pub verify: SuiteOptions,
}

fn unit_field() -> PhysicalConfig {
    PhysicalConfig { field: 1.0 }
}

impl Default for RunConfig {
    /// The window layer `d = π`, `a = 1` in a unit field.
    fn default() -> Self {
        RunConfig {
            geometry: GeometryConfig::NeumannWindowLayer { d: Width::pi_fraction(1, 1), a: 1.0 },
            physics: unit_field(),
            sweep: SweepBlock::default(),
            solver: SolverBlock::default(),
            output: OutputBlock::default(),
            verify: SuiteOptions::default(),
        }
    }
}

/// 1-based line of the JSON key path `a.b.c` in `raw`, found by locating
/// each key in turn after the previous one.
pub fn locate_field(raw: &str, path: &str) -> Option<usize> {
    let mut from = 0;
    for seg in path.split('.') {
        let key = format!("\"{seg}\"");
        let mut pos = from;
        loop {
            let hit = pos + raw[pos..].find(&key)?;
            let after = raw[hit + key.len()..].trim_start();
            if after.starts_with(':') {
                from = hit + key.len();
                break;
            }
            pos = hit + key.len();
        }
    }
    Some(raw[..from].lines().count().max(1))
}

impl RunConfig {
    /// Parses and validates; errors name the offending field and its line.
    pub fn from_json(raw: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(raw).map_err(|e| {
            Error::config("config", format!("line {}, column {}: {e}", e.line(), e.column()))
        })?;
        cfg.validate().map_err(|e| match e {
            Error::Config { field, message } => {
                let line = locate_field(raw, &field).map(|l| format!("line {l}: ")).unwrap_or_default();
                Error::Config { field, message: format!("{line}{message}") }
            }
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
        RunConfig::from_json(&raw)
    }

    fn prefixed(prefix: &str, r: Result<()>) -> Result<()> {
        r.map_err(|e| match e {
            Error::Config { field, message } if !field.starts_with(prefix) => {
                Error::Config { field: format!("{prefix}{}", field.trim_start_matches("solver.")), message }
            }
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        Self::prefixed("geometry.", self.geometry.validate())?;
        Self::prefixed("physics.", self.physics.validate())?;
        if self.sweep.levels == 0 {
            return Err(Error::config("sweep.levels", "at least one level is required"));
        }
        if let Some(p) = &self.sweep.p {
            self.momenta_from(p)?;
        }
        if self.solver.cells_per_pi == 0 {
            return Err(Error::config("solver.cells_per_pi", "must be positive"));
        }
        Self::prefixed("solver.", self.settings(self.sweep.levels).validate())?;
        self.verify.validate()
    }

    fn momenta_from(&self, spec: &MomentumSpec) -> Result<MomentumGrid> {
        match spec {
            MomentumSpec::List(v) => MomentumGrid::new(v.clone()),
            MomentumSpec::Range { min, max, count } => MomentumGrid::uniform(*min, *max, *count),
        }
    }

    pub fn settings(&self, levels: usize) -> SweepSettings {
        SweepSettings {
            levels,
            grid: self.solver.grid(),
            tol: self.solver.tol,
            max_iter: self.solver.max_iter,
            e_max: self.solver.e_max,
            keep_vectors: false,
            error_estimates: self.solver.error_estimates,
        }
    }

    pub fn momenta(&self, levels: usize) -> Result<MomentumGrid> {
        match &self.sweep.p {
            Some(spec) => self.momenta_from(spec),
            None => {
                let e = self.settings(levels).resolve_e_max(&self.geometry, &self.physics)?;
                MomentumGrid::default_for(&self.geometry, &self.physics, e)
            }
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "magband", version, about = "Band structure of magnetic Laplacians on coupled hard-wall layers")]
pub struct Cli {
    /// Worker threads for concurrent fiber solves.
    #[arg(long, global = true, env = "MAGBAND_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; the window layer d = π, a = 1, B = 1 when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of levels, overriding the configuration.
    #[arg(long)]
    pub levels: Option<usize>,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Eigenvalues of one fiber.
    Fiber {
        #[command(flatten)]
        common: Common,
        #[arg(long, allow_hyphen_values = true)]
        p: Option<f64>,
        /// Also write each eigenvector on the grid as x,z,value.
        #[arg(long)]
        dump_vectors: bool,
    },
    /// Dispersion table over the momentum grid.
    Dispersion {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Band summary: edges, labels, gaps and flat bands.
    Bands {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Runs the claim suite.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Refinement ladder at one momentum with observed orders.
    Convergence {
        #[command(flatten)]
        common: Common,
        #[arg(long, allow_hyphen_values = true)]
        p: Option<f64>,
    },
}

/// Parses `args`, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: config error in `--threads`: must be positive");
            return EXIT_CONFIG;
        }
        // Fails harmlessly when a pool already exists (repeated in-process runs).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) => EXIT_CONFIG,
        // A failure at one momentum is a computation failure even when
        // its cause is an argument the sweep itself built.
        Error::AtMomentum { .. } => EXIT_COMPUTATION,
        _ => EXIT_COMPUTATION,
    }
}

struct Prepared {
    config: RunConfig,
    out: PathBuf,
    levels: usize,
}

fn prepare(common: &Common) -> Result<Prepared> {
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(k) = common.levels {
        if k == 0 {
            return Err(Error::config("--levels", "must be positive"));
        }
        config.sweep.levels = k;
    }
    if let Some(o) = &common.out {
        config.output.dir = o.clone();
    }
    config.validate()?;
    let out = config.output.dir.clone();
    fs::create_dir_all(&out)?;
    write_json(&out.join("effective_config.json"), &config)?;
    let levels = config.sweep.levels;
    Ok(Prepared { config, out, levels })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_rows(path: &Path, rows: &[FiberSolution]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "p,k,lambda,residual")?;
    for s in rows {
        for (k, (v, r)) in s.values.iter().zip(&s.residuals).enumerate() {
            writeln!(w, "{:.16e},{},{:.16e},{:.16e}", s.p, k + 1, v, r)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Fiber { common, p, dump_vectors } => cmd_fiber(&common, p, dump_vectors),
        Command::Dispersion { common, svg } => cmd_dispersion(&common, svg, false),
        Command::Bands { common, svg } => cmd_dispersion(&common, svg, true),
        Command::Verify { common, suite } => cmd_verify(&common, &suite),
        Command::Convergence { common, p } => cmd_convergence(&common, p),
    }
}

fn default_momentum(config: &RunConfig) -> f64 {
    match &config.sweep.p {
        Some(MomentumSpec::List(v)) if v.len() == 1 => v[0],
        _ => 0.0,
    }
}

/// Writes a partial-results file for a failed solve and passes the error on.
fn partial_fiber(out: &Path, p: f64, e: Error) -> Error {
    if let Error::NotConverged { partial, .. } = &e {
        let s = FiberSolution {
            p,
            values: partial.values.clone(),
            residuals: partial.residuals.clone(),
            iterations: partial.iterations,
            dim: 0,
            errors: None,
            coarse: None,
            states: None,
        };
        if let Err(w) = write_rows(&out.join("fiber.partial.csv"), &[s]) {
            log::error!("could not write partial results: {w}");
        }
    }
    e
}

pub fn cmd_fiber(common: &Common, p: Option<f64>, dump_vectors: bool) -> Result<i32> {
    let prep = prepare(common)?;
    let cfg = &prep.config;
    let p = p.unwrap_or_else(|| default_momentum(cfg));
    if !p.is_finite() {
        return Err(Error::config("--p", "momentum must be finite"));
    }
    let mut settings = cfg.settings(prep.levels);
    settings.keep_vectors = dump_vectors;
    let s = solve_fiber(&cfg.geometry, &cfg.physics, p, &settings).map_err(|e| partial_fiber(&prep.out, p, e))?;
    write_rows(&prep.out.join("fiber.csv"), std::slice::from_ref(&s))?;
    if let Some(states) = &s.states {
        let nodes = states.matrix.node_table();
        for (k, v) in states.vectors.iter().enumerate() {
            let mut w = BufWriter::new(fs::File::create(prep.out.join(format!("vector_{}.csv", k + 1)))?);
            writeln!(w, "x,z,value")?;
            for ((x, z, _), value) in nodes.iter().zip(v) {
                writeln!(w, "{x:.16e},{z:.16e},{value:.16e}")?;
            }
            w.flush()?;
        }
    }
    for (k, v) in s.values.iter().enumerate() {
        println!("{} {v:.12}", k + 1);
    }
    Ok(EXIT_OK)
}

fn cmd_dispersion(common: &Common, svg: Option<PathBuf>, summary: bool) -> Result<i32> {
    let prep = prepare(common)?;
    let cfg = &prep.config;
    let mut settings = cfg.settings(prep.levels);
    let e_max = settings.resolve_e_max(&cfg.geometry, &cfg.physics)?;
    settings.e_max = Some(e_max);
    let pgrid = cfg.momenta(prep.levels)?;
    let results: Vec<Result<FiberSolution>> = pgrid
        .values()
        .par_iter()
        .map(|&p| solve_fiber(&cfg.geometry, &cfg.physics, p, &settings).map_err(|e| Error::AtMomentum { momentum: p, source: Box::new(e) }))
        .collect();
    let (ok, failed): (Vec<_>, Vec<_>) = results.into_iter().partition(|r| r.is_ok());
    let points: Vec<FiberSolution> = ok.into_iter().map(|r| r.unwrap()).collect();
    if let Some(Err(first)) = failed.into_iter().next() {
        write_rows(&prep.out.join("dispersion.partial.csv"), &points)?;
        return Err(first);
    }
    let table = DispersionTable { geometry: cfg.geometry, physics: cfg.physics, levels: prep.levels, e_max, grid: settings.grid, points };
    let mut csv = BufWriter::new(fs::File::create(prep.out.join("dispersion.csv"))?);
    table.write_csv(&mut csv)?;
    csv.flush()?;
    let bands = band_edges(&table, &SummaryOptions::default())?;
    if summary {
        write_json(&prep.out.join("bands.json"), &bands)?;
        for b in &bands.bands {
            println!(
                "band {}: [{:.8}, {:.8}]{} upper edge {}",
                b.k,
                b.min,
                b.max,
                if b.flat { " flat" } else { "" },
                if b.upper_edge.identified { format!("{}", b.upper_edge.level) } else { "unidentified".into() }
            );
        }
        for g in &bands.gaps {
            println!("gap ({:.8}, {:.8})", g.lower, g.upper);
        }
    } else {
        write_json(&prep.out.join("dispersion.json"), &table)?;
    }
    if let Some(path) = svg.or_else(|| cfg.output.svg.clone()) {
        let mut w = BufWriter::new(fs::File::create(path)?);
        write_svg(&table, &bands, &mut w)?;
        w.flush()?;
    }
    Ok(EXIT_OK)
}

fn cmd_verify(common: &Common, suite: &str) -> Result<i32> {
    let suite: Suite = suite.parse()?;
    let prep = prepare(common)?;
    let records = run_suite(suite, &prep.config.verify)?;
    write_json(&prep.out.join("verify.json"), &records)?;
    for r in &records {
        let margin = r.margin.map_or("n/a".to_string(), |m| format!("{m:.3e}"));
        println!("{:<30} {:<12} margin {margin} ± {:.1e}", r.id, r.verdict.to_string(), r.error_estimate);
    }
    Ok(if any_failed(&records) { EXIT_VERIFY } else { EXIT_OK })
}

fn cmd_convergence(common: &Common, p: Option<f64>) -> Result<i32> {
    let prep = prepare(common)?;
    let cfg = &prep.config;
    let p = p.unwrap_or_else(|| default_momentum(cfg));
    let settings = cfg.settings(prep.levels);
    let e_max = settings.resolve_e_max(&cfg.geometry, &cfg.physics)?;
    let problem = FiberProblem::new(cfg.geometry, cfg.physics, p, e_max)?;
    let request = EigenRequest { tol: cfg.solver.tol, max_iter: cfg.solver.max_iter, ..EigenRequest::new(prep.levels) };
    let study = ladder(&problem, &settings.grid, prep.levels, 3, &request)?;
    write_json(&prep.out.join("convergence.json"), &study)?;
    for (k, e) in study.estimates.iter().enumerate() {
        println!("level {}: order {:.3}, extrapolated {:.10}, error {:.2e}", k + 1, e.order, e.extrapolated, e.error);
    }
    Ok(EXIT_OK)
}
