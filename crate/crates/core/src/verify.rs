//! Executable claim suite. Every spectral property of the three geometries
//! becomes a named check that reports a margin, an error estimate for that
//! margin and a verdict.
//!
//! Margins are positive when the claim holds. Error estimates come from
//! re-evaluating the same margin on a grid twice as coarse (two-level
//! Richardson, nominal order 2). A check passes when its margin exceeds
//! three error estimates, fails below minus three, and is inconclusive in
//! between.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convergence::{ladder, two_level_error};
use crate::discretize::{build_grid, FiberProblem, GridOptions};
use crate::dispersion::{
    detect_flat, mirror_defect, solve_fiber, sweep, window_energy, DispersionTable, FiberSolution, MomentumGrid,
    SweepSettings, DEFAULT_FLAT_TOL,
};
use crate::eigensolve::{EigenRequest, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::model::{GeometryConfig, PhysicalConfig, Width};
use crate::oracle1d::{bracket_bounds, closed_layer_levels};

/// Margins must exceed this many error estimates to pass.
pub const VERDICT_FACTOR: f64 = 3.0;

/// Relative variation a dispersive band must show.
pub const MIN_VARIATION: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl Verdict {
    pub fn judge(margin: f64, error: f64) -> Self {
        if !(margin.is_finite() && error.is_finite()) {
            Verdict::Fail
        } else if margin > VERDICT_FACTOR * error {
            Verdict::Pass
        } else if margin < -VERDICT_FACTOR * error {
            Verdict::Fail
        } else {
            Verdict::Inconclusive
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub id: String,
    /// The claim being checked, in words.
    pub anchor: String,
    /// Geometry, field and resolution the check ran on.
    pub config: String,
    /// `None` when the check could not be evaluated.
    pub margin: Option<f64>,
    pub error_estimate: f64,
    pub verdict: Verdict,
    pub detail: String,
}

impl CheckRecord {
    fn from_outcome(spec: &CheckSpec, out: Outcome) -> Self {
        let verdict = out.forced.unwrap_or_else(|| Verdict::judge(out.measure.margin, out.measure.error));
        CheckRecord {
            id: spec.id.into(),
            anchor: spec.anchor.into(),
            config: out.config,
            margin: Some(out.measure.margin),
            error_estimate: out.measure.error,
            verdict,
            detail: out.detail,
        }
    }

    fn from_error(spec: &CheckSpec, err: &Error) -> Self {
        CheckRecord {
            id: spec.id.into(),
            anchor: spec.anchor.into(),
            config: String::new(),
            margin: None,
            error_estimate: 0.0,
            verdict: Verdict::Fail,
            detail: format!("check could not run: {err}"),
        }
    }
}

/// A margin with its error estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measure {
    pub margin: f64,
    pub error: f64,
}

impl Measure {
    pub fn exact(margin: f64) -> Self {
        Measure { margin, error: 0.0 }
    }

    /// Margin evaluated on the fine grid, error from the coarse one.
    pub fn pair(fine: f64, coarse: f64) -> Self {
        Measure { margin: fine, error: two_level_error(coarse, fine, 2.0, 2.0) }
    }

    /// Equality claim `value = target`: the Richardson-extrapolated value
    /// must sit within five error estimates of the target.
    pub fn identify(fine: f64, coarse: f64, target: f64) -> Self {
        let error = two_level_error(coarse, fine, 2.0, 2.0);
        let extrapolated = fine + (fine - coarse) / 3.0;
        Measure { margin: 5.0 * error + 1e-9 * (1.0 + target.abs()) - (extrapolated - target).abs(), error }
    }

    /// Conjunction of several claims. The result passes iff each part
    /// clears its own bar.
    pub fn all(parts: impl IntoIterator<Item = Measure>) -> Self {
        let parts: Vec<Measure> = parts.into_iter().collect();
        if parts.is_empty() {
            return Measure { margin: f64::NAN, error: 0.0 };
        }
        let error = parts.iter().map(|m| m.error).fold(0.0, f64::max);
        let worst = parts.iter().map(|m| m.margin - VERDICT_FACTOR * m.error).fold(f64::INFINITY, f64::min);
        Measure { margin: worst + VERDICT_FACTOR * error, error }
    }
}

struct Outcome {
    config: String,
    measure: Measure,
    detail: String,
    forced: Option<Verdict>,
}

impl Outcome {
    fn new(config: String, measure: Measure, detail: String) -> Self {
        Outcome { config, measure, detail, forced: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Window,
    Symmetric,
    Asymmetric,
    OneSided,
    Convergence,
    All,
}

impl Suite {
    fn includes(self, group: Suite) -> bool {
        self == Suite::All || self == group
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "window" => Suite::Window,
            "symmetric" => Suite::Symmetric,
            "asymmetric" => Suite::Asymmetric,
            "onesided" | "one_sided" => Suite::OneSided,
            "convergence" => Suite::Convergence,
            "all" => Suite::All,
            _ => {
                return Err(Error::config(
                    "suite",
                    format!("unknown suite `{s}`; expected window, symmetric, asymmetric, onesided, convergence or all"),
                ))
            }
        })
    }
}

/// Resolution and sampling of the reference runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteOptions {
    /// Multiplies every reference cell count.
    pub refine: u32,
    /// Momentum samples of the main window-layer table.
    pub points: usize,
    /// Cells per π on the coarsest rung of the convergence ladder.
    pub ladder_cells: u32,
    pub tol: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions { refine: 1, points: 25, ladder_cells: 16, tol: DEFAULT_TOL }
    }
}

impl SuiteOptions {
    pub fn validate(&self) -> Result<()> {
        if self.refine == 0 {
            return Err(Error::config("verify.refine", "must be at least 1"));
        }
        if self.points < 3 {
            return Err(Error::config("verify.points", "need at least 3 momenta"));
        }
        if self.ladder_cells == 0 {
            return Err(Error::config("verify.ladder_cells", "must be positive"));
        }
        if !(self.tol > 0.0 && self.tol < 1e-3) {
            return Err(Error::config("verify.tol", "must lie in (0, 1e-3)"));
        }
        Ok(())
    }
}

/// A geometry, a field and a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub geometry: GeometryConfig,
    pub physics: PhysicalConfig,
    pub grid: GridOptions,
}

impl Reference {
    fn stamp(&self) -> String {
        format!("{}, B = {}, h = {:.5}", self.geometry.describe(), self.physics.field, self.grid.h)
    }

    fn with_window(&self, a: f64) -> Self {
        Reference { geometry: self.geometry.with_half_window(a), ..*self }
    }

    fn settings(&self, levels: usize, tol: f64) -> SweepSettings {
        SweepSettings::new(levels, self.grid).with_tol(tol).with_error_estimates()
    }
}

fn unit_field() -> PhysicalConfig {
    PhysicalConfig { field: 1.0 }
}

/// The window layer `d = π`, `a = 1`, `B = 1`.
pub fn window_reference(refine: u32) -> Reference {
    Reference {
        geometry: GeometryConfig::NeumannWindowLayer { d: Width::pi_fraction(1, 1), a: 1.0 },
        physics: unit_field(),
        grid: GridOptions::per_unit(16 * refine, PI),
    }
}

/// Symmetric double layer `d₁ = d₂ = π`, `a = 1`, `B = 1`.
pub fn symmetric_reference(refine: u32) -> Reference {
    Reference {
        geometry: GeometryConfig::DoubleLayer { d1: Width::pi_fraction(1, 1), d2: Width::pi_fraction(1, 1), a: 1.0 },
        physics: unit_field(),
        grid: GridOptions::per_unit(16 * refine, PI),
    }
}

/// Commensurate double layer `d₁ = 2`, `d₂ = 1`, `a = 1`, `B = 1`.
pub fn asymmetric_reference(refine: u32) -> Reference {
    Reference {
        geometry: GeometryConfig::DoubleLayer { d1: Width::integer(2), d2: Width::integer(1), a: 1.0 },
        physics: unit_field(),
        grid: GridOptions::per_unit(16 * refine, 1.0),
    }
}

/// `d₂ = 1.279` carries its own scale, so the pair is incommensurate.
pub fn incommensurate_reference(refine: u32) -> Reference {
    Reference {
        geometry: GeometryConfig::DoubleLayer { d1: Width::integer(2), d2: Width::tagged(1.279), a: 1.0 },
        ..asymmetric_reference(refine)
    }
}

/// One-sided barrier `d₁ = 0.6π`, `d₂ = 0.4π`, `B = 4`.
pub fn onesided_reference(refine: u32) -> Reference {
    Reference {
        geometry: GeometryConfig::OneSidedBarrier { d1: Width::pi_fraction(3, 5), d2: Width::pi_fraction(2, 5) },
        physics: PhysicalConfig { field: 4.0 },
        grid: GridOptions::per_unit(40 * refine, PI),
    }
}

/// Commensurate one-sided barrier `d₁ = 2`, `d₂ = 1`, `B = 1`.
pub fn onesided_flat_reference(refine: u32) -> Reference {
    Reference {
        geometry: GeometryConfig::OneSidedBarrier { d1: Width::integer(2), d2: Width::integer(1) },
        physics: unit_field(),
        grid: GridOptions::per_unit(16 * refine, 1.0),
    }
}

/// Decoupled double layer `d₁ = π`, `d₂ = π/2`, `a = 0`.
pub fn decoupled_reference(refine: u32) -> Reference {
    Reference {
        geometry: GeometryConfig::DoubleLayer { d1: Width::pi_fraction(1, 1), d2: Width::pi_fraction(1, 2), a: 0.0 },
        physics: unit_field(),
        grid: GridOptions::per_unit(32 * refine, PI),
    }
}

/// Window widths of the shrink and gap studies.
const SHRINK_WINDOWS: [f64; 3] = [1.0, 0.5, 0.25];

/// Grids for small windows: x-spacing fine enough for four cells across
/// the smallest half-width on the coarse companion grid.
fn small_window(r: Reference, refine: u32) -> Reference {
    Reference { grid: GridOptions { hx_target: Some(1.0 / (16.0 * refine as f64)), ..r.grid }, ..r }
}

struct TableJob {
    name: String,
    reference: Reference,
    pgrid: MomentumGrid,
    levels: usize,
}

fn table_jobs(opts: &SuiteOptions) -> Result<Vec<TableJob>> {
    let r = opts.refine;
    let mut jobs = vec![
        TableJob { name: "window.main".into(), reference: window_reference(r), pgrid: MomentumGrid::symmetric(12.0, opts.points)?, levels: 5 },
        TableJob { name: "symmetric.main".into(), reference: symmetric_reference(r), pgrid: MomentumGrid::symmetric(12.0, 13)?, levels: 4 },
        TableJob { name: "asymmetric.main".into(), reference: asymmetric_reference(r), pgrid: MomentumGrid::symmetric(12.0, 13)?, levels: 12 },
        TableJob { name: "asymmetric.incommensurate".into(), reference: incommensurate_reference(r), pgrid: MomentumGrid::symmetric(12.0, 13)?, levels: 8 },
        TableJob { name: "onesided.main".into(), reference: onesided_reference(r), pgrid: MomentumGrid::uniform(-14.0, 14.0, 29)?, levels: 2 },
        TableJob { name: "onesided.flat".into(), reference: onesided_flat_reference(r), pgrid: MomentumGrid::symmetric(12.0, 13)?, levels: 10 },
    ];
    let shrink = [("window", window_reference(r), 3), ("symmetric", symmetric_reference(r), 4), ("asymmetric", asymmetric_reference(r), 3)];
    for (group, base, levels) in shrink {
        for a in SHRINK_WINDOWS {
            jobs.push(TableJob {
                name: format!("{group}.a{a}"),
                reference: small_window(base, r).with_window(a),
                pgrid: MomentumGrid::symmetric(10.0, 13)?,
                levels,
            });
        }
    }
    Ok(jobs)
}

type CheckFn = fn(&Context) -> Result<Outcome>;

/// Declaration of one check.
pub struct CheckSpec {
    pub id: &'static str,
    pub anchor: &'static str,
    pub suite: Suite,
    tables: &'static [&'static str],
    run: CheckFn,
}

/// Tables shared between checks, computed before any check runs.
pub struct Context {
    pub options: SuiteOptions,
    tables: HashMap<String, std::result::Result<Arc<DispersionTable>, String>>,
}

impl Context {
    fn table(&self, name: &str) -> Result<&DispersionTable> {
        match self.tables.get(name) {
            Some(Ok(t)) => Ok(t),
            Some(Err(e)) => Err(Error::invalid(format!("table {name} failed: {e}"))),
            None => Err(Error::invalid(format!("table {name} was not scheduled"))),
        }
    }

    fn pair(&self, name: &str) -> Result<(&DispersionTable, DispersionTable)> {
        let t = self.table(name)?;
        let c = t.coarse_table().ok_or_else(|| Error::invalid(format!("table {name} has no coarse companion")))?;
        Ok((t, c))
    }
}

static CHECKS: &[CheckSpec] = &[
    CheckSpec { id: "window.bounds", anchor: "window layer: every level lies between its Neumann-limit and free values", suite: Suite::Window, tables: &["window.main"], run: window_bounds },
    CheckSpec { id: "window.strict", anchor: "window layer: an open window pushes the ground level strictly below the free value", suite: Suite::Window, tables: &[], run: window_strict },
    CheckSpec { id: "window.asymptote", anchor: "window layer: every level returns to its free value as |p| grows", suite: Suite::Window, tables: &[], run: window_asymptote },
    CheckSpec { id: "window.asymptote_decay", anchor: "window layer: the deviation from the free value shrinks with |p|", suite: Suite::Window, tables: &[], run: window_asymptote_decay },
    CheckSpec { id: "window.a_monotone", anchor: "window layer: levels decrease as the window widens", suite: Suite::Window, tables: &[], run: window_a_monotone },
    CheckSpec { id: "window.a_continuity", anchor: "window layer: levels tend to the free values as the window closes", suite: Suite::Window, tables: &[], run: window_a_continuity },
    CheckSpec { id: "window.upper_edge", anchor: "window layer: each upper band edge is a free level", suite: Suite::Window, tables: &["window.main"], run: window_upper_edge },
    CheckSpec { id: "window.field_continuity", anchor: "window layer: levels depend continuously on the field", suite: Suite::Window, tables: &[], run: window_field_continuity },
    CheckSpec { id: "window.width_continuity", anchor: "window layer: levels depend continuously on the layer width", suite: Suite::Window, tables: &[], run: window_width_continuity },
    CheckSpec { id: "window.gap_opening", anchor: "window layer: the gap below a band is open for small windows", suite: Suite::Window, tables: &["window.a1", "window.a0.5", "window.a0.25"], run: window_gap_opening },
    CheckSpec { id: "window.mirror", anchor: "window layer: eigenfunctions at p and -p are mirror images and the current reverses", suite: Suite::Window, tables: &["window.main"], run: window_mirror },
    CheckSpec { id: "window.band_character", anchor: "window layer: no band is flat once the window is open", suite: Suite::Window, tables: &["window.main"], run: window_band_character },
    CheckSpec { id: "window.bracketing", anchor: "window layer: Neumann and Dirichlet cuts bracket every level", suite: Suite::Window, tables: &[], run: window_bracketing },
    CheckSpec { id: "symmetric.decomposition", anchor: "symmetric double layer: spectrum splits into window-layer bands and closed-layer flat levels", suite: Suite::Symmetric, tables: &[], run: symmetric_decomposition },
    CheckSpec { id: "symmetric.flat", anchor: "symmetric double layer: the free levels are flat bands", suite: Suite::Symmetric, tables: &["symmetric.main"], run: symmetric_flat },
    CheckSpec { id: "symmetric.shrink", anchor: "symmetric double layer: bands shrink to the flat levels as the window closes", suite: Suite::Symmetric, tables: &["symmetric.a1", "symmetric.a0.5", "symmetric.a0.25"], run: symmetric_shrink },
    CheckSpec { id: "symmetric.continuity", anchor: "symmetric double layer: levels depend continuously on the parameters", suite: Suite::Symmetric, tables: &[], run: symmetric_continuity },
    CheckSpec { id: "symmetric.gap", anchor: "symmetric double layer: the gap below a band pair is open for small windows", suite: Suite::Symmetric, tables: &["symmetric.a0.25"], run: symmetric_gap },
    CheckSpec { id: "symmetric.mirror", anchor: "symmetric double layer: mirror symmetry of eigenfunctions and current reversal", suite: Suite::Symmetric, tables: &[], run: symmetric_mirror },
    CheckSpec { id: "asymmetric.flat_commensurate", anchor: "asymmetric double layer: commensurate widths carry flat bands at the shared levels", suite: Suite::Asymmetric, tables: &["asymmetric.main"], run: asymmetric_flat_commensurate },
    CheckSpec { id: "asymmetric.flat_incommensurate", anchor: "asymmetric double layer: incommensurate widths leave no flat band", suite: Suite::Asymmetric, tables: &["asymmetric.incommensurate"], run: asymmetric_flat_incommensurate },
    CheckSpec { id: "asymmetric.shrink", anchor: "asymmetric double layer: bands shrink to the free levels as the window closes", suite: Suite::Asymmetric, tables: &["asymmetric.a1", "asymmetric.a0.5", "asymmetric.a0.25"], run: asymmetric_shrink },
    CheckSpec { id: "asymmetric.continuity", anchor: "asymmetric double layer: levels depend continuously on the parameters", suite: Suite::Asymmetric, tables: &[], run: asymmetric_continuity },
    CheckSpec { id: "asymmetric.gap", anchor: "asymmetric double layer: the gap below a band is open for small windows", suite: Suite::Asymmetric, tables: &["asymmetric.a0.25"], run: asymmetric_gap },
    CheckSpec { id: "asymmetric.mirror", anchor: "asymmetric double layer: mirror symmetry of eigenfunctions and current reversal", suite: Suite::Asymmetric, tables: &[], run: asymmetric_mirror },
    CheckSpec { id: "onesided.flat", anchor: "one-sided barrier: commensurate widths carry flat bands", suite: Suite::OneSided, tables: &["onesided.flat"], run: onesided_flat },
    CheckSpec { id: "onesided.edges", anchor: "one-sided barrier: band limits are the merged and decoupled free levels", suite: Suite::OneSided, tables: &["onesided.main"], run: onesided_edges },
    CheckSpec { id: "onesided.monotone", anchor: "one-sided barrier: every level is nondecreasing in p", suite: Suite::OneSided, tables: &["onesided.main"], run: onesided_monotone },
    CheckSpec { id: "onesided.gap", anchor: "one-sided barrier: unequal layers in a strong field leave an open gap", suite: Suite::OneSided, tables: &["onesided.main"], run: onesided_gap },
    CheckSpec { id: "decoupled.union", anchor: "decoupled double layer: the spectrum is the union of the per-layer levels", suite: Suite::Convergence, tables: &[], run: decoupled_union },
    CheckSpec { id: "convergence.order", anchor: "discretization: eigenvalues converge at second order", suite: Suite::Convergence, tables: &[], run: convergence_order },
];

/// All declared checks, in suite order.
pub fn checks() -> &'static [CheckSpec] {
    CHECKS
}

pub fn check_ids() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.id).collect()
}

/// Runs the selected suite. Shared tables are computed first, then the
/// checks run concurrently; records come back in declaration order and a
/// check that errors becomes a failing record.
pub fn run_suite(suite: Suite, options: &SuiteOptions) -> Result<Vec<CheckRecord>> {
    options.validate()?;
    let selected: Vec<&CheckSpec> = CHECKS.iter().filter(|c| suite.includes(c.suite)).collect();
    let wanted: Vec<&str> = selected.iter().flat_map(|c| c.tables.iter().copied()).collect();
    let jobs: Vec<TableJob> = table_jobs(options)?.into_iter().filter(|j| wanted.contains(&j.name.as_str())).collect();
    let tables = jobs
        .par_iter()
        .map(|j| {
            let settings = j.reference.settings(j.levels, options.tol);
            let t = sweep(&j.reference.geometry, &j.reference.physics, &j.pgrid, &settings).map(Arc::new).map_err(|e| e.to_string());
            if let Err(e) = &t {
                log::warn!("table {} failed: {e}", j.name);
            }
            (j.name.clone(), t)
        })
        .collect();
    let ctx = Context { options: *options, tables };
    Ok(selected
        .par_iter()
        .map(|spec| {
            let rec = match (spec.run)(&ctx) {
                Ok(out) => CheckRecord::from_outcome(spec, out),
                Err(e) => CheckRecord::from_error(spec, &e),
            };
            log::info!("{} {}: margin {:?} ± {:.3e}", rec.id, rec.verdict, rec.margin, rec.error_estimate);
            rec
        })
        .collect())
}

pub fn any_failed(records: &[CheckRecord]) -> bool {
    records.iter().any(|r| r.verdict == Verdict::Fail)
}

fn fiber(r: &Reference, p: f64, levels: usize, tol: f64) -> Result<FiberSolution> {
    solve_fiber(&r.geometry, &r.physics, p, &r.settings(levels, tol))
}

fn coarse_of(s: &FiberSolution) -> &[f64] {
    s.coarse.as_deref().unwrap_or(&s.values)
}

fn slack(tol: f64, value: f64) -> f64 {
    10.0 * tol * (1.0 + value.abs())
}

fn band_max(t: &DispersionTable, k: usize) -> f64 {
    t.band(k).into_iter().fold(f64::NEG_INFINITY, f64::max)
}

fn band_min(t: &DispersionTable, k: usize) -> f64 {
    t.band(k).into_iter().fold(f64::INFINITY, f64::min)
}

fn variation(t: &DispersionTable, k: usize) -> f64 {
    let max = band_max(t, k);
    (max - band_min(t, k)) / max.abs()
}

fn catalog_level(geometry: &GeometryConfig, physics: &PhysicalConfig, upper: bool, k: usize) -> Result<f64> {
    let mut cut = 4.0 * geometry.spectral_floor(physics) + 10.0;
    loop {
        let cat = if upper { geometry.upper_catalog(physics, cut) } else { geometry.lower_catalog(physics, cut) };
        if let Ok(c) = cat {
            if let Some((v, _)) = c.level(k) {
                return Ok(v);
            }
        }
        cut *= 2.0;
        if cut > 1e9 {
            return Err(Error::invalid(format!("no catalog level {k}")));
        }
    }
}

fn window_bounds(ctx: &Context) -> Result<Outcome> {
    let (t, c) = ctx.pair("window.main")?;
    let mut parts = Vec::new();
    let mut worst = (f64::INFINITY, 0, 0.0);
    for k in 1..=t.levels {
        let lo = catalog_level(&t.geometry, &t.physics, false, k)?;
        let up = catalog_level(&t.geometry, &t.physics, true, k)?;
        for j in 0..t.points.len() {
            let slack_up = 10.0 * t.error(k, j);
            let q = |tab: &DispersionTable| {
                let v = tab.points[j].values[k - 1];
                (v - lo).min(up + slack_up - v)
            };
            let m = Measure::pair(q(t), q(&c));
            if m.margin < worst.0 {
                worst = (m.margin, k, t.points[j].p);
            }
            parts.push(m);
        }
    }
    Ok(Outcome::new(
        format!("{} on {} momenta", ctx_stamp(t), t.points.len()),
        Measure::all(parts),
        format!("tightest at k = {}, p = {}; upper bounds carry a slack of ten error estimates", worst.1, worst.2),
    ))
}

fn ctx_stamp(t: &DispersionTable) -> String {
    format!("{}, B = {}, h = {:.5}", t.geometry.describe(), t.physics.field, t.grid.h)
}

/// `λ₁(0) < λ₁` for the given reference; inconclusive by construction
/// without a window.
pub fn strictness_record(r: &Reference, tol: f64) -> CheckRecord {
    let spec = &CHECKS[1];
    match strictness(r, tol) {
        Ok(out) => CheckRecord::from_outcome(spec, out),
        Err(e) => CheckRecord::from_error(spec, &e),
    }
}

fn strictness(r: &Reference, tol: f64) -> Result<Outcome> {
    let free = catalog_level(&r.geometry, &r.physics, true, 1)?;
    let s = fiber(r, 0.0, 1, tol)?;
    let m = Measure::pair(free - s.values[0], free - coarse_of(&s)[0]);
    let mut out = Outcome::new(r.stamp(), m, format!("λ1(0) = {:.10}, free value {free}", s.values[0]));
    if r.geometry.half_window() == Some(0.0) {
        out.forced = Some(Verdict::Inconclusive);
        out.detail.push_str("; no window, the strict inequality degenerates to equality");
    }
    Ok(out)
}

fn window_strict(ctx: &Context) -> Result<Outcome> {
    strictness(&window_reference(ctx.options.refine), ctx.options.tol)
}

fn window_asymptote(ctx: &Context) -> Result<Outcome> {
    // Twice the base resolution: at π/16 the discretization error alone is
    // half of the 1e-2 budget.
    let r = window_reference(2 * ctx.options.refine);
    let free = catalog_level(&r.geometry, &r.physics, true, 1)?;
    let mut parts = Vec::new();
    let mut detail = Vec::new();
    for p in [-12.0, 12.0] {
        let s = fiber(&r, p, 1, ctx.options.tol)?;
        parts.push(Measure::pair(1e-2 - (s.values[0] - free).abs(), 1e-2 - (coarse_of(&s)[0] - free).abs()));
        detail.push(format!("|λ1({p}) - {free}| = {:.3e}", (s.values[0] - free).abs()));
    }
    Ok(Outcome::new(r.stamp(), Measure::all(parts), detail.join(", ")))
}

fn window_asymptote_decay(ctx: &Context) -> Result<Outcome> {
    let r = window_reference(ctx.options.refine);
    let levels = 3;
    let solve = |p: f64| fiber(&r, p, levels, ctx.options.tol);
    let (near, far) = ((solve(-6.0)?, solve(6.0)?), (solve(-12.0)?, solve(12.0)?));
    let mut parts = Vec::new();
    let mut detail = Vec::new();
    for k in 1..=levels {
        let free = catalog_level(&r.geometry, &r.physics, true, k)?;
        for (n, f) in [(&near.0, &far.0), (&near.1, &far.1)] {
            let q = |a: &[f64], b: &[f64]| (a[k - 1] - free).abs() - (b[k - 1] - free).abs();
            parts.push(Measure::pair(q(&n.values, &f.values), q(coarse_of(n), coarse_of(f))));
            detail.push(format!("k={k} p={}: {:.3e} -> {:.3e}", n.p, (n.values[k - 1] - free).abs(), (f.values[k - 1] - free).abs()));
        }
    }
    Ok(Outcome::new(r.stamp(), Measure::all(parts), detail.join("; ")))
}

/// `λ₁(0; a)` at each window width, fine and coarse.
fn ground_by_window(r: &Reference, widths: &[f64], tol: f64) -> Result<Vec<(f64, f64)>> {
    widths
        .par_iter()
        .map(|&a| {
            let s = fiber(&r.with_window(a), 0.0, 1, tol)?;
            Ok((s.values[0], coarse_of(&s)[0]))
        })
        .collect()
}

fn window_a_monotone(ctx: &Context) -> Result<Outcome> {
    let r = window_reference(ctx.options.refine);
    let widths = [0.0, PI / 4.0, PI / 2.0, PI];
    let v = ground_by_window(&r, &widths, ctx.options.tol)?;
    let parts = v.windows(2).map(|w| Measure::pair(w[0].0 - w[1].0, w[0].1 - w[1].1));
    let detail = widths.iter().zip(&v).map(|(a, (f, _))| format!("λ1(0; {a:.4}) = {f:.8}")).collect::<Vec<_>>().join(", ");
    Ok(Outcome::new(format!("{}, p = 0", r.stamp()), Measure::all(parts), detail))
}

fn window_a_continuity(ctx: &Context) -> Result<Outcome> {
    let base = window_reference(ctx.options.refine);
    let r = Reference { grid: GridOptions { hx_target: Some(PI / (64.0 * ctx.options.refine as f64)), ..base.grid }, ..base };
    let widths = [0.0, PI / 16.0, PI / 8.0, PI / 4.0];
    let v = ground_by_window(&r, &widths, ctx.options.tol)?;
    // Depth below the closed-window value must shrink with a.
    let depth: Vec<(f64, f64)> = v[1..].iter().map(|(f, c)| (v[0].0 - f, v[0].1 - c)).collect();
    let mut parts = vec![Measure::pair(depth[0].0, depth[0].1)];
    parts.extend(depth.windows(2).map(|w| Measure::pair(w[1].0 - w[0].0, w[1].1 - w[0].1)));
    let detail = widths[1..].iter().zip(&depth).map(|(a, (f, _))| format!("depth at a = {a:.4}: {f:.3e}")).collect::<Vec<_>>().join(", ");
    Ok(Outcome::new(format!("{}, hx target π/64, p = 0", r.stamp()), Measure::all(parts), detail))
}

fn window_upper_edge(ctx: &Context) -> Result<Outcome> {
    let (t, c) = ctx.pair("window.main")?;
    let cat = t.geometry.upper_catalog(&t.physics, 2.0 * t.e_max + 10.0)?;
    let mut parts = Vec::new();
    let mut detail = Vec::new();
    for k in 1..=t.levels {
        let (f, cv) = (band_max(t, k), band_max(&c, k));
        let e = cat.nearest(f).ok_or_else(|| Error::invalid("empty catalog"))?;
        parts.push(Measure::identify(f, cv, e.value));
        let labels = e.indices.iter().map(|i| i.label()).collect::<Vec<_>>().join("/");
        detail.push(format!("band {k}: max {f:.6} -> {} {labels}", e.value));
    }
    Ok(Outcome::new(ctx_stamp(t), Measure::all(parts), detail.join("; ")))
}

/// Parameter varied by a continuity probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeParameter {
    Field,
    Width,
    Window,
}

impl FromStr for ProbeParameter {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "B" | "field" => Ok(ProbeParameter::Field),
            "d" | "width" => Ok(ProbeParameter::Width),
            "a" | "window" => Ok(ProbeParameter::Window),
            _ => Err(Error::invalid(format!("unknown probe parameter `{s}`"))),
        }
    }
}

fn scale_width(w: &Width, factor: f64) -> Width {
    Width { scale: w.scale * factor, ..*w }
}

fn perturbed(r: &Reference, param: ProbeParameter, delta: f64) -> Result<Reference> {
    let mut out = *r;
    match param {
        ProbeParameter::Field => out.physics.field += delta,
        ProbeParameter::Window => {
            let a = r.geometry.half_window().ok_or_else(|| Error::invalid("geometry has no window"))?;
            out.geometry = r.geometry.with_half_window(a + delta);
        }
        ProbeParameter::Width => {
            // Every width scales by the same factor; `delta` is the change
            // of the first (upper) width.
            let f = 1.0 + delta / r.geometry.widths()[0].value();
            out.geometry = match r.geometry {
                GeometryConfig::NeumannWindowLayer { d, a } => GeometryConfig::NeumannWindowLayer { d: scale_width(&d, f), a },
                GeometryConfig::DoubleLayer { d1, d2, a } => GeometryConfig::DoubleLayer { d1: scale_width(&d1, f), d2: scale_width(&d2, f), a },
                GeometryConfig::OneSidedBarrier { d1, d2 } => GeometryConfig::OneSidedBarrier { d1: scale_width(&d1, f), d2: scale_width(&d2, f) },
            };
        }
    }
    out.geometry.validate()?;
    out.physics.validate()?;
    Ok(out)
}

/// Lipschitz bound per unit parameter change used by continuity probes.
pub const PROBE_SLOPE_BOUND: f64 = 5.0;

/// Finite-difference continuity probe of `λ_k(p)` in one parameter.
///
/// For every `δ` the change `|λ_k(x+δ) - λ_k(x)|` must stay below
/// `PROBE_SLOPE_BOUND·|δ|`; for the window width the change must also be a
/// decrease. The observed slopes are logged and reported.
pub fn continuity_probe(param: ProbeParameter, base: &Reference, k: usize, p: f64, deltas: &[f64], tol: f64) -> CheckRecord {
    let spec = CheckSpec { id: "probe", anchor: "levels depend continuously on the parameter", suite: Suite::All, tables: &[], run: |_| unreachable!() };
    match probe(param, base, k, p, deltas, tol) {
        Ok(out) => CheckRecord::from_outcome(&spec, out),
        Err(e) => CheckRecord::from_error(&spec, &e),
    }
}

fn probe(param: ProbeParameter, base: &Reference, k: usize, p: f64, deltas: &[f64], tol: f64) -> Result<Outcome> {
    if deltas.is_empty() || deltas.iter().any(|d| !d.is_finite() || *d == 0.0) {
        return Err(Error::invalid("probe deltas must be nonzero and finite"));
    }
    let at = |r: &Reference| -> Result<(f64, f64)> {
        let s = fiber(r, p, k, tol)?;
        Ok((s.values[k - 1], coarse_of(&s)[k - 1]))
    };
    let refs = deltas.iter().map(|&d| perturbed(base, param, d)).collect::<Result<Vec<_>>>()?;
    let v0 = at(base)?;
    let vs = refs.par_iter().map(at).collect::<Result<Vec<_>>>()?;
    let mut parts = Vec::new();
    let mut slopes = Vec::new();
    for (&d, v) in deltas.iter().zip(&vs) {
        let bound = PROBE_SLOPE_BOUND * d.abs();
        parts.push(Measure::pair(bound - (v.0 - v0.0).abs(), bound - (v.1 - v0.1).abs()));
        if param == ProbeParameter::Window {
            let s = d.signum();
            parts.push(Measure::pair(s * (v0.0 - v.0), s * (v0.1 - v.1)));
        }
        slopes.push((v.0 - v0.0) / d);
    }
    log::info!("continuity probe {param:?} k = {k}, p = {p}: slopes {slopes:?}");
    let detail = format!(
        "{param:?} probe, k = {k}, p = {p}: λ = {:.8}, slopes {}",
        v0.0,
        slopes.iter().map(|s| format!("{s:.4}")).collect::<Vec<_>>().join(", ")
    );
    Ok(Outcome::new(base.stamp(), Measure::all(parts), detail))
}

fn probe_outcome(param: ProbeParameter, r: &Reference, deltas: &[f64], tol: f64) -> Result<Outcome> {
    probe(param, r, 1, 0.0, deltas, tol)
}

fn window_field_continuity(ctx: &Context) -> Result<Outcome> {
    probe_outcome(ProbeParameter::Field, &window_reference(ctx.options.refine), &[0.01, -0.01, 0.005], ctx.options.tol)
}

fn window_width_continuity(ctx: &Context) -> Result<Outcome> {
    let d = PI;
    probe_outcome(ProbeParameter::Width, &window_reference(ctx.options.refine), &[0.01 * d, -0.01 * d], ctx.options.tol)
}

/// `min λ_k - max λ_{k-1}` on fine and coarse tables.
fn gap_below(t: &DispersionTable, c: &DispersionTable, k: usize) -> Measure {
    Measure::pair(band_min(t, k) - band_max(t, k - 1), band_min(c, k) - band_max(c, k - 1))
}

fn gap_study(ctx: &Context, group: &str, k: usize) -> Result<Outcome> {
    let mut rows = Vec::new();
    for a in SHRINK_WINDOWS {
        let (t, c) = ctx.pair(&format!("{group}.a{a}"))?;
        rows.push((a, gap_below(t, &c, k)));
    }
    let smallest = rows.last().unwrap();
    let a_o = rows.iter().rev().take_while(|(_, m)| m.margin > 0.0).last().map(|(a, _)| *a);
    let detail = format!(
        "gap below band {k}: {}; empirical a_o estimate {}",
        rows.iter().map(|(a, m)| format!("a = {a}: {:.4e}", m.margin)).collect::<Vec<_>>().join(", "),
        a_o.map_or("below all tested widths".to_string(), |a| format!("≥ {a}"))
    );
    let t = ctx.table(&format!("{group}.a{}", smallest.0))?;
    Ok(Outcome::new(ctx_stamp(t), smallest.1, detail))
}

fn window_gap_opening(ctx: &Context) -> Result<Outcome> {
    // Band 3 is the (0,2) band; the gap below it separates it from (1,1).
    gap_study(ctx, "window", 3)
}

/// Mirror symmetry of the k-th eigenvector and reversal of its current.
fn mirror_outcome(r: &Reference, p: f64, k: usize, tol: f64) -> Result<Outcome> {
    let settings = SweepSettings::new(k, r.grid).with_tol(tol).with_vectors();
    let e = settings.resolve_e_max(&r.geometry, &r.physics)?;
    let settings = settings.with_e_max(e);
    let plus = solve_fiber(&r.geometry, &r.physics, p, &settings)?;
    let minus = solve_fiber(&r.geometry, &r.physics, -p, &settings)?;
    let defect = mirror_defect(&plus, &minus, k)?;
    let table = DispersionTable { geometry: r.geometry, physics: r.physics, levels: k, e_max: e, grid: r.grid, points: vec![minus, plus] };
    let jm = crate::dispersion::current_profile(&table, k, 0)?;
    let jp = crate::dispersion::current_profile(&table, k, 1)?;
    let dv = (table.points[0].values[k - 1] - table.points[1].values[k - 1]).abs();
    let current = (jp.total_mechanical_current + jm.total_mechanical_current).abs();
    let parts = [
        Measure::exact(1e-6 - defect),
        Measure::exact(1e-9 * (1.0 + table.points[1].values[k - 1]) - dv),
        Measure::exact(1e-6 * jp.total_mechanical_current.abs().max(1.0) - current),
        Measure::exact(1e-12 - (jp.total_momentum_current + jm.total_momentum_current).abs()),
    ];
    Ok(Outcome::new(
        format!("{}, p = ±{p}, k = {k}", r.stamp()),
        Measure::all(parts),
        format!(
            "reflection defect {defect:.2e}, |λ(p) - λ(-p)| = {dv:.2e}, mechanical currents {:.6} and {:.6}",
            jp.total_mechanical_current, jm.total_mechanical_current
        ),
    ))
}

fn window_mirror(ctx: &Context) -> Result<Outcome> {
    let t = ctx.table("window.main")?;
    let n = t.points.len();
    let mut asym: f64 = 0.0;
    for k in 1..=t.levels {
        for j in 0..n {
            if t.points[j].p != -t.points[n - 1 - j].p {
                return Err(Error::invalid("main momentum grid is not symmetric"));
            }
            asym = asym.max((t.points[j].values[k - 1] - t.points[n - 1 - j].values[k - 1]).abs());
        }
    }
    let mut out = mirror_outcome(&window_reference(ctx.options.refine), 2.0, 1, ctx.options.tol)?;
    out.measure = Measure::all([out.measure, Measure::exact(1e-9 - asym)]);
    out.detail.push_str(&format!("; table asymmetry {asym:.2e}"));
    Ok(out)
}

fn window_band_character(ctx: &Context) -> Result<Outcome> {
    let (t, c) = ctx.pair("window.main")?;
    let parts = (1..=t.levels).map(|k| Measure::pair(variation(t, k) - MIN_VARIATION, variation(&c, k) - MIN_VARIATION));
    let detail = (1..=t.levels).map(|k| format!("band {k}: {:.3e}", variation(t, k))).collect::<Vec<_>>().join(", ");
    Ok(Outcome::new(ctx_stamp(t), Measure::all(parts), format!("relative variations {detail}")))
}

fn window_bracketing(ctx: &Context) -> Result<Outcome> {
    let r = window_reference(ctx.options.refine);
    let levels = 3;
    let e = window_energy(&r.geometry, &r.physics, levels)?;
    let settings = SweepSettings::new(levels, r.grid).with_tol(ctx.options.tol).with_e_max(e);
    let rows = [0.0, 3.0, 6.0, 12.0]
        .par_iter()
        .map(|&p| {
            let s = solve_fiber(&r.geometry, &r.physics, p, &settings)?;
            let problem = FiberProblem::new(r.geometry, r.physics, p, e)?;
            (1..=levels)
                .map(|k| {
                    let b = bracket_bounds(&problem, k, &r.grid)?;
                    let v = s.values[k - 1];
                    Ok((p, k, b.lower, v, b.upper))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<_> = rows.into_iter().flatten().collect();
    let parts = rows.iter().map(|&(_, _, lo, v, up)| Measure::exact((v - lo).min(up - v) + slack(ctx.options.tol, v)));
    let detail = rows.iter().map(|(p, k, lo, v, up)| format!("k={k} p={p}: {lo:.6} ≤ {v:.6} ≤ {up:.6}")).collect::<Vec<_>>().join("; ");
    Ok(Outcome::new(r.stamp(), Measure::all(parts), detail))
}

/// Compares a symmetric double layer against the window layer of the same
/// width plus the closed-layer levels, on identical grids.
pub fn decomposition_defect(d: Width, a: f64, physics: &PhysicalConfig, grid: &GridOptions, pgrid: &MomentumGrid, levels: usize, tol: f64) -> Result<f64> {
    let double = GeometryConfig::DoubleLayer { d1: d, d2: d, a };
    let single = GeometryConfig::NeumannWindowLayer { d, a };
    let e = window_energy(&double, physics, levels)?;
    let settings = SweepSettings::new(levels, *grid).with_tol(tol).with_e_max(e);
    let t2 = sweep(&double, physics, pgrid, &settings)?;
    let t1 = sweep(&single, physics, pgrid, &settings)?;
    let mut worst: f64 = 0.0;
    for (s2, s1) in t2.points.iter().zip(&t1.points) {
        let g = build_grid(&FiberProblem::new(double, *physics, s2.p, e)?, grid)?;
        let odd = closed_layer_levels(&g, 0, levels)?;
        let merged = crate::dispersion::merge_levels(&s1.values, &odd, levels);
        for (x, y) in merged.iter().zip(&s2.values) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(worst)
}

fn symmetric_decomposition(ctx: &Context) -> Result<Outcome> {
    let r = symmetric_reference(ctx.options.refine);
    let worst = decomposition_defect(Width::pi_fraction(1, 1), 1.0, &r.physics, &r.grid, &MomentumGrid::symmetric(8.0, 9)?, 6, ctx.options.tol)?;
    Ok(Outcome::new(r.stamp(), Measure::exact(1e-8 - worst), format!("largest entrywise difference {worst:.3e} over 9 momenta, 6 levels")))
}

/// A flat band near `target`: flatness on the fine grid and value
/// identification by extrapolation.
fn flat_at(t: &DispersionTable, c: &DispersionTable, target: f64) -> Result<(Measure, String)> {
    let find = |tab: &DispersionTable| {
        detect_flat(tab, DEFAULT_FLAT_TOL)
            .into_iter()
            .min_by(|a, b| (a.value - target).abs().total_cmp(&(b.value - target).abs()))
    };
    let (Some(f), Some(cf)) = (find(t), find(c)) else {
        return Ok((Measure::exact(-1.0), format!("no flat band found near {target}")));
    };
    let m = Measure::all([Measure::exact(DEFAULT_FLAT_TOL - f.variation), Measure::identify(f.value, cf.value, target)]);
    let pred = f.prediction.map_or(String::from("no prediction"), |p| format!("predicted (n, m1, m2) = ({}, {}, {}) at {:.6}", p.n, p.m1, p.m2, p.value));
    Ok((m, format!("flat band {:.8} (variation {:.2e}) vs {target:.6}; {pred}", f.value, f.variation)))
}

fn symmetric_flat(ctx: &Context) -> Result<Outcome> {
    let (t, c) = ctx.pair("symmetric.main")?;
    let (m, d) = flat_at(t, &c, 2.0)?;
    Ok(Outcome::new(ctx_stamp(t), m, d))
}

/// Bands shrink as the window closes: the hull width of every band that is
/// dispersive at the widest window decreases until it turns flat.
fn shrink_study(ctx: &Context, group: &str) -> Result<Outcome> {
    let tables = SHRINK_WINDOWS
        .iter()
        .map(|a| ctx.pair(&format!("{group}.a{a}")))
        .collect::<Result<Vec<_>>>()?;
    let width = |t: &DispersionTable, k| band_max(t, k) - band_min(t, k);
    let levels = tables[0].0.levels;
    let mut parts = Vec::new();
    let mut detail = Vec::new();
    for k in 1..=levels {
        if variation(tables[0].0, k) <= DEFAULT_FLAT_TOL {
            continue;
        }
        let mut seq = Vec::new();
        for (t, c) in &tables {
            seq.push((width(t, k), width(c, k)));
            if variation(t, k) <= DEFAULT_FLAT_TOL {
                break;
            }
        }
        parts.extend(seq.windows(2).map(|w| Measure::pair(w[0].0 - w[1].0, w[0].1 - w[1].1)));
        detail.push(format!("band {k}: {}", seq.iter().map(|(f, _)| format!("{f:.3e}")).collect::<Vec<_>>().join(" > ")));
    }
    Ok(Outcome::new(
        format!("{}, a ∈ {SHRINK_WINDOWS:?}", ctx_stamp(tables[0].0)),
        Measure::all(parts),
        detail.join("; "),
    ))
}

fn symmetric_shrink(ctx: &Context) -> Result<Outcome> {
    shrink_study(ctx, "symmetric")
}

fn symmetric_continuity(ctx: &Context) -> Result<Outcome> {
    let r = symmetric_reference(ctx.options.refine);
    let tol = ctx.options.tol;
    let mut a = probe_outcome(ProbeParameter::Field, &r, &[0.01, -0.01], tol)?;
    let b = probe_outcome(ProbeParameter::Window, &r, &[0.1 * 1.0], tol)?;
    a.measure = Measure::all([a.measure, b.measure]);
    a.detail = format!("{}; {}", a.detail, b.detail);
    Ok(a)
}

fn symmetric_gap(ctx: &Context) -> Result<Outcome> {
    // Band 3 is the even partner of the (1,1) pair; band 2 is the flat
    // closed-layer level at the (0,1) value.
    let (t, c) = ctx.pair("symmetric.a0.25")?;
    Ok(Outcome::new(ctx_stamp(t), gap_below(t, &c, 3), format!("min λ3 - max λ2 = {:.4e}", band_min(t, 3) - band_max(t, 2))))
}

fn symmetric_mirror(ctx: &Context) -> Result<Outcome> {
    mirror_outcome(&symmetric_reference(ctx.options.refine), 2.0, 1, ctx.options.tol)
}

fn asymmetric_flat_commensurate(ctx: &Context) -> Result<Outcome> {
    let (t, c) = ctx.pair("asymmetric.main")?;
    let (m, d) = flat_at(t, &c, 1.0 + PI * PI)?;
    Ok(Outcome::new(ctx_stamp(t), m, d))
}

fn asymmetric_flat_incommensurate(ctx: &Context) -> Result<Outcome> {
    let (t, c) = ctx.pair("asymmetric.incommensurate")?;
    let parts = (1..=t.levels).map(|k| Measure::pair(variation(t, k) - MIN_VARIATION, variation(&c, k) - MIN_VARIATION));
    let least = (1..=t.levels).map(|k| variation(t, k)).fold(f64::INFINITY, f64::min);
    Ok(Outcome::new(ctx_stamp(t), Measure::all(parts), format!("smallest relative variation among {} bands: {least:.3e}", t.levels)))
}

fn asymmetric_shrink(ctx: &Context) -> Result<Outcome> {
    shrink_study(ctx, "asymmetric")
}

fn asymmetric_continuity(ctx: &Context) -> Result<Outcome> {
    let r = asymmetric_reference(ctx.options.refine);
    let tol = ctx.options.tol;
    let mut a = probe_outcome(ProbeParameter::Field, &r, &[0.01, -0.01], tol)?;
    let b = probe_outcome(ProbeParameter::Window, &r, &[0.125], tol)?;
    a.measure = Measure::all([a.measure, b.measure]);
    a.detail = format!("{}; {}", a.detail, b.detail);
    Ok(a)
}

fn asymmetric_gap(ctx: &Context) -> Result<Outcome> {
    let (t, c) = ctx.pair("asymmetric.a0.25")?;
    Ok(Outcome::new(ctx_stamp(t), gap_below(t, &c, 2), format!("min λ2 - max λ1 = {:.4e}", band_min(t, 2) - band_max(t, 1))))
}

fn asymmetric_mirror(ctx: &Context) -> Result<Outcome> {
    mirror_outcome(&asymmetric_reference(ctx.options.refine), 2.0, 1, ctx.options.tol)
}

fn onesided_flat(ctx: &Context) -> Result<Outcome> {
    let (t, c) = ctx.pair("onesided.flat")?;
    let (m, d) = flat_at(t, &c, 1.0 + PI * PI)?;
    Ok(Outcome::new(ctx_stamp(t), m, d))
}

fn onesided_edges(ctx: &Context) -> Result<Outcome> {
    let (t, c) = ctx.pair("onesided.main")?;
    let last = t.points.len() - 1;
    let merged = t.geometry.lower_catalog(&t.physics, 2.0 * t.e_max + 10.0)?;
    let decoupled = t.geometry.upper_catalog(&t.physics, 2.0 * t.e_max + 10.0)?;
    let mut parts = Vec::new();
    let mut detail = Vec::new();
    for k in 1..=t.levels {
        let lo = merged.level(k).ok_or_else(|| Error::invalid("merged catalog too short"))?.0;
        let hi = decoupled.level(k).ok_or_else(|| Error::invalid("decoupled catalog too short"))?.0;
        let (f0, c0) = (t.points[0].values[k - 1], c.points[0].values[k - 1]);
        let (f1, c1) = (t.points[last].values[k - 1], c.points[last].values[k - 1]);
        parts.push(Measure::identify(f0, c0, lo));
        parts.push(Measure::identify(f1, c1, hi));
        detail.push(format!("band {k}: λ({}) = {f0:.6} -> {lo:.6}, λ({}) = {f1:.6} -> {hi:.6}", t.points[0].p, t.points[last].p));
    }
    Ok(Outcome::new(ctx_stamp(t), Measure::all(parts), detail.join("; ")))
}

fn onesided_monotone(ctx: &Context) -> Result<Outcome> {
    let (t, c) = ctx.pair("onesided.main")?;
    let tol = ctx.options.tol;
    let mut parts = Vec::new();
    let mut worst = f64::INFINITY;
    for k in 1..=t.levels {
        let (bf, bc) = (t.band(k), c.band(k));
        for j in 0..bf.len() - 1 {
            let s = slack(tol, bf[j]);
            let step = bf[j + 1] - bf[j];
            worst = worst.min(step);
            parts.push(Measure::pair(step + s, bc[j + 1] - bc[j] + s));
        }
    }
    Ok(Outcome::new(ctx_stamp(t), Measure::all(parts), format!("smallest step {worst:.3e} (solver slack {:.1e})", slack(tol, 1.0))))
}

fn onesided_gap(ctx: &Context) -> Result<Outcome> {
    let (t, c) = ctx.pair("onesided.main")?;
    Ok(Outcome::new(
        ctx_stamp(t),
        gap_below(t, &c, 2),
        format!("gap ({:.6}, {:.6})", band_max(t, 1), band_min(t, 2)),
    ))
}

fn decoupled_union(ctx: &Context) -> Result<Outcome> {
    let r = decoupled_reference(ctx.options.refine);
    let levels = 8;
    let s = fiber(&r, 0.0, levels, ctx.options.tol)?;
    let cat = r.geometry.upper_catalog(&r.physics, 20.0)?;
    let union = cat.values();
    let mut parts: Vec<Measure> = (0..levels).map(|k| Measure::identify(s.values[k], coarse_of(&s)[k], union[k])).collect();
    // The summed-transverse formula would put the ground level at 6.
    let sum_ground = 1.0 + 1.0 + 4.0;
    parts.push(Measure::exact((s.values[0] - sum_ground).abs() - 2e-3 * sum_ground));
    Ok(Outcome::new(
        format!("{}, p = 0", r.stamp()),
        Measure::all(parts),
        format!("computed {:?} vs union {:?}", s.values.iter().map(|v| format!("{v:.5}")).collect::<Vec<_>>(), &union[..levels]),
    ))
}

/// Accepted deviation of observed orders from second order.
pub const ORDER_WINDOW: f64 = 0.3;

fn convergence_order(ctx: &Context) -> Result<Outcome> {
    let r = decoupled_reference(1);
    let problem = FiberProblem::new(r.geometry, r.physics, 0.0, 6.0)?;
    let base = GridOptions::per_unit(ctx.options.ladder_cells, PI);
    let study = ladder(&problem, &base, 3, 3, &EigenRequest::new(3).with_tol(ctx.options.tol))?;
    let orders = study.orders();
    let worst = orders.iter().map(|o| (o - 2.0).abs()).fold(0.0, f64::max);
    Ok(Outcome::new(
        format!("{}, ladder π/{} → π/{}", r.geometry.describe(), ctx.options.ladder_cells, 4 * ctx.options.ladder_cells),
        Measure::exact(ORDER_WINDOW - worst),
        format!("observed orders {:?}", orders.iter().map(|o| format!("{o:.3}")).collect::<Vec<_>>()),
    ))
}
