//! Momentum sweeps of the fiber spectrum: dispersion tables, band edges,
//! gaps, flat bands, currents and group velocities.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convergence::two_level_error;
use crate::discretize::{assemble, build_grid, FiberMatrix, FiberProblem, GridOptions};
use crate::eigensolve::{smallest_eigenpairs, EigenRequest, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::model::{flat_band_levels, FlatLevel, GeometryConfig, GeometryKind, ModeIndex, PhysicalConfig};

/// Relative variation below which a band counts as flat.
pub const DEFAULT_FLAT_TOL: f64 = 1e-7;
pub const DEFAULT_POINTS: usize = 41;

/// Strictly increasing momentum samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MomentumGrid {
    values: Vec<f64>,
}

impl TryFrom<Vec<f64>> for MomentumGrid {
    type Error = Error;
    fn try_from(values: Vec<f64>) -> Result<Self> {
        MomentumGrid::new(values)
    }
}

impl From<MomentumGrid> for Vec<f64> {
    fn from(g: MomentumGrid) -> Self {
        g.values
    }
}

impl MomentumGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::config("sweep.p", "momentum grid is empty"));
        }
        if values.iter().any(|p| !p.is_finite()) {
            return Err(Error::config("sweep.p", "momenta must be finite"));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("sweep.p", "momenta must be strictly increasing"));
        }
        Ok(MomentumGrid { values })
    }

    /// `count` equispaced points on `[lo, hi]`; the midpoint is snapped to
    /// exactly zero for symmetric ranges so mirror pairs are exact.
    pub fn uniform(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if count < 2 || !(hi > lo) {
            return Err(Error::config("sweep.p", format!("need count >= 2 and hi > lo, got {count} on [{lo}, {hi}]")));
        }
        let step = (hi - lo) / (count - 1) as f64;
        let symmetric = lo == -hi;
        let values = (0..count)
            .map(|i| {
                if symmetric {
                    // Built from the centre outwards so that p_j = -p_{n-1-j} bitwise.
                    let t = i as f64 - (count - 1) as f64 / 2.0;
                    t * step
                } else {
                    lo + i as f64 * step
                }
            })
            .collect();
        MomentumGrid::new(values)
    }

    pub fn symmetric(half_span: f64, count: usize) -> Result<Self> {
        MomentumGrid::uniform(-half_span, half_span, count)
    }

    /// 41 points on `±(B·a + 8·√E_max)`: far enough that the end columns
    /// have settled at their large-|p| limits.
    pub fn default_for(geometry: &GeometryConfig, physics: &PhysicalConfig, e_max: f64) -> Result<Self> {
        let a = geometry.half_window().unwrap_or(0.0);
        MomentumGrid::symmetric(physics.field * a + 8.0 * e_max.sqrt(), DEFAULT_POINTS)
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

    pub fn position(&self, p: f64) -> Option<usize> {
        self.values.iter().position(|&v| v == p)
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.values.len();
        (0..n).all(|i| self.values[i] == -self.values[n - 1 - i])
    }
}

/// Everything a sweep needs besides geometry, field and momenta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub levels: usize,
    pub grid: GridOptions,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Spectral window for the truncation; defaults to the `levels`-th
    /// upper catalog level.
    #[serde(default)]
    pub e_max: Option<f64>,
    #[serde(default)]
    pub keep_vectors: bool,
    /// Also solve on a grid twice as coarse and report two-level
    /// Richardson error estimates.
    #[serde(default)]
    pub error_estimates: bool,
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}

fn default_max_iter() -> usize {
    400
}

impl SweepSettings {
    pub fn new(levels: usize, grid: GridOptions) -> Self {
        SweepSettings {
            levels,
            grid,
            tol: DEFAULT_TOL,
            max_iter: default_max_iter(),
            e_max: None,
            keep_vectors: false,
            error_estimates: false,
        }
    }

    pub fn with_vectors(mut self) -> Self {
        self.keep_vectors = true;
        self
    }

    pub fn with_error_estimates(mut self) -> Self {
        self.error_estimates = true;
        self
    }

    pub fn with_e_max(mut self, e_max: f64) -> Self {
        self.e_max = Some(e_max);
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn request(&self) -> EigenRequest {
        EigenRequest { tol: self.tol, max_iter: self.max_iter, ..EigenRequest::new(self.levels) }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.request().validate()?;
        if let Some(e) = self.e_max {
            if !(e.is_finite() && e > 0.0) {
                return Err(Error::config("solver.e_max", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn resolve_e_max(&self, geometry: &GeometryConfig, physics: &PhysicalConfig) -> Result<f64> {
        match self.e_max {
            Some(e) => Ok(e),
            None => window_energy(geometry, physics, self.levels),
        }
    }
}

/// The `levels`-th upper catalog value, an upper bound for `λ_levels(p)`
/// at every momentum.
pub fn window_energy(geometry: &GeometryConfig, physics: &PhysicalConfig, levels: usize) -> Result<f64> {
    let mut cut = 4.0 * geometry.spectral_floor(physics) + 1.0;
    for _ in 0..64 {
        if let Ok(cat) = geometry.upper_catalog(physics, cut) {
            let values = cat.values();
            if values.len() >= levels {
                return Ok(values[levels - 1]);
            }
        }
        cut *= 2.0;
    }
    Err(Error::invalid(format!("could not find {levels} catalog levels")))
}

/// Pencil and eigenvectors retained for current profiles and mirror checks.
#[derive(Debug, Clone)]
pub struct FiberStates {
    pub matrix: FiberMatrix,
    /// `M`-normalized eigenvectors, ascending.
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FiberSolution {
    pub p: f64,
    pub values: Vec<f64>,
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub errors: Option<Vec<f64>>,
    /// Same levels on the twice-coarser grid behind `errors`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coarse: Option<Vec<f64>>,
    #[serde(skip)]
    pub states: Option<Arc<FiberStates>>,
}

/// Lowest `settings.levels` eigenvalues of `H(p)`.
pub fn solve_fiber(
    geometry: &GeometryConfig,
    physics: &PhysicalConfig,
    p: f64,
    settings: &SweepSettings,
) -> Result<FiberSolution> {
    let e_max = settings.resolve_e_max(geometry, physics)?;
    let problem = FiberProblem::new(*geometry, *physics, p, e_max)?;
    let grid = build_grid(&problem, &settings.grid)?;
    let hx = grid.hx;
    let matrix = assemble(&grid)?;
    let request = settings.request();
    let result = smallest_eigenpairs(&matrix, &request)?;
    let coarse_values = if settings.error_estimates {
        let coarse_opts = GridOptions {
            h: 2.0 * settings.grid.h,
            hx_target: None,
            hx: Some(2.0 * hx),
            ..settings.grid
        };
        let coarse_grid = build_grid(&problem, &coarse_opts)?;
        if (coarse_grid.hx / hx - 2.0).abs() > 1e-9 {
            log::warn!("coarse x-spacing ratio {:.4} is not 2; error estimates are approximate", coarse_grid.hx / hx);
        }
        let coarse = assemble(&coarse_grid)?;
        Some(smallest_eigenpairs(&coarse, &request)?.values)
    } else {
        None
    };
    let errors = coarse_values.as_ref().map(|c| {
        result.values.iter().zip(c).map(|(f, c)| two_level_error(*c, *f, 2.0, 2.0)).collect()
    });
    let dim = matrix.dim();
    let states = settings
        .keep_vectors
        .then(|| Arc::new(FiberStates { vectors: result.vectors.clone(), matrix }));
    Ok(FiberSolution {
        p,
        values: result.values,
        residuals: result.residuals,
        iterations: result.iterations,
        dim,
        errors,
        coarse: coarse_values,
        states,
    })
}

/// `λ_k(p_j)` over a momentum grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DispersionTable {
    pub geometry: GeometryConfig,
    pub physics: PhysicalConfig,
    pub levels: usize,
    pub e_max: f64,
    pub grid: GridOptions,
    pub points: Vec<FiberSolution>,
}

/// Fiber solves across `pgrid`, run concurrently and ordered by `p`.
pub fn sweep(
    geometry: &GeometryConfig,
    physics: &PhysicalConfig,
    pgrid: &MomentumGrid,
    settings: &SweepSettings,
) -> Result<DispersionTable> {
    settings.validate()?;
    let e_max = settings.resolve_e_max(geometry, physics)?;
    let fixed = SweepSettings { e_max: Some(e_max), ..*settings };
    let points = pgrid
        .values()
        .par_iter()
        .map(|&p| {
            solve_fiber(geometry, physics, p, &fixed)
                .map_err(|e| Error::AtMomentum { momentum: p, source: Box::new(e) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DispersionTable { geometry: *geometry, physics: *physics, levels: settings.levels, e_max, grid: settings.grid, points })
}

impl DispersionTable {
    pub fn momenta(&self) -> Vec<f64> {
        self.points.iter().map(|s| s.p).collect()
    }

    /// Band `k` (1-based) across the grid.
    pub fn band(&self, k: usize) -> Vec<f64> {
        self.points.iter().map(|s| s.values[k - 1]).collect()
    }

    /// Error estimate of `λ_k(p_j)`, zero when none was computed.
    pub fn error(&self, k: usize, j: usize) -> f64 {
        self.points[j].errors.as_ref().map_or(0.0, |e| e[k - 1])
    }

    /// Richardson-extrapolated `λ_k(p_j)`, or the plain value without a
    /// coarse companion.
    pub fn extrapolated(&self, k: usize, j: usize) -> f64 {
        let s = &self.points[j];
        match &s.coarse {
            Some(c) => s.values[k - 1] + (s.values[k - 1] - c[k - 1]) / 3.0,
            None => s.values[k - 1],
        }
    }

    /// The companion table on the coarse grid, when error estimates were
    /// requested.
    pub fn coarse_table(&self) -> Option<DispersionTable> {
        let points = self
            .points
            .iter()
            .map(|s| {
                let values = s.coarse.clone()?;
                Some(FiberSolution {
                    p: s.p,
                    residuals: vec![0.0; values.len()],
                    values,
                    iterations: 0,
                    dim: 0,
                    errors: None,
                    coarse: None,
                    states: None,
                })
            })
            .collect::<Option<Vec<_>>>()?;
        let grid = GridOptions { h: 2.0 * self.grid.h, hx_target: self.grid.hx_target.map(|v| 2.0 * v), hx: self.grid.hx.map(|v| 2.0 * v), ..self.grid };
        Some(DispersionTable { points, grid, ..self.clone_header() })
    }

    fn clone_header(&self) -> DispersionTable {
        DispersionTable { geometry: self.geometry, physics: self.physics, levels: self.levels, e_max: self.e_max, grid: self.grid, points: Vec::new() }
    }

    pub fn max_error(&self, k: usize) -> f64 {
        (0..self.points.len()).map(|j| self.error(k, j)).fold(0.0, f64::max)
    }

    pub fn worst_residual(&self) -> f64 {
        self.points.iter().flat_map(|s| s.residuals.iter().copied()).fold(0.0, f64::max)
    }

    /// CSV with columns `p,k,lambda,residual`, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "p,k,lambda,residual")?;
        for s in &self.points {
            for (k, (v, r)) in s.values.iter().zip(&s.residuals).enumerate() {
                writeln!(w, "{:.16e},{},{:.16e},{:.16e}", s.p, k + 1, v, r)?;
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> Result<BandSummary> {
        band_edges(self, &SummaryOptions::default())
    }
}

/// Analytic label attached to an observed band edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeLabel {
    pub observed: f64,
    /// Nearest catalog level.
    pub level: f64,
    pub modes: Vec<ModeIndex>,
    pub distance: f64,
    pub tolerance: f64,
    pub identified: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandInfo {
    pub k: usize,
    pub min: f64,
    pub max: f64,
    /// `p_a`, where the minimum is attained on the grid.
    pub argmin_p: f64,
    pub argmax_p: f64,
    /// `(max - min)/|max|`.
    pub variation: f64,
    pub flat: bool,
    pub upper_edge: EdgeLabel,
    /// One-sided barrier only: the large-negative-p limit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower_edge: Option<EdgeLabel>,
}

/// Open energy interval covered by no band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub lower: f64,
    pub upper: f64,
    /// Band whose minimum closes the gap from above.
    pub below_band: usize,
}

impl Gap {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, lo: f64, hi: f64) -> bool {
        self.lower < lo && hi < self.upper
    }
}

/// A dispersion curve constant in `p`, possibly crossing rank-labelled bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatBand {
    pub value: f64,
    pub variation: f64,
    /// Rank of the curve at each momentum.
    pub ranks: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<FlatLevel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSummary {
    pub geometry: GeometryConfig,
    pub physics: PhysicalConfig,
    pub momenta: (f64, f64),
    pub bands: Vec<BandInfo>,
    pub gaps: Vec<Gap>,
    pub flat_bands: Vec<FlatBand>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryOptions {
    pub flat_tol: f64,
    /// Multiple of the Richardson error estimate allowed between an edge
    /// and its catalog level.
    pub match_factor: f64,
    /// Relative matching tolerance used when the table carries no error
    /// estimates.
    pub match_floor: f64,
}

impl Default for SummaryOptions {
    fn default() -> Self {
        SummaryOptions { flat_tol: DEFAULT_FLAT_TOL, match_factor: 5.0, match_floor: 2e-3 }
    }
}

fn label(observed: f64, catalog: &crate::model::LevelCatalog, tolerance: f64) -> EdgeLabel {
    match catalog.nearest(observed) {
        Some(e) => {
            let distance = (e.value - observed).abs();
            let identified = distance <= tolerance;
            EdgeLabel {
                observed,
                level: e.value,
                modes: e.indices.clone(),
                distance,
                tolerance,
                identified,
                diagnostic: (!identified).then(|| {
                    format!("unidentified: nearest level {} is {distance:.3e} away (tolerance {tolerance:.3e})", e.value)
                }),
            }
        }
        None => EdgeLabel {
            observed,
            level: f64::NAN,
            modes: Vec::new(),
            distance: f64::INFINITY,
            tolerance,
            identified: false,
            diagnostic: Some("unidentified: empty catalog".into()),
        },
    }
}

/// Per-band hulls, catalog labels of the edges, gaps and flat bands.
pub fn band_edges(table: &DispersionTable, opts: &SummaryOptions) -> Result<BandSummary> {
    if table.points.is_empty() {
        return Err(Error::invalid("empty dispersion table"));
    }
    let top = table.points.iter().flat_map(|s| s.values.iter().copied()).fold(0.0, f64::max);
    let cut = 1.5 * top + 1.0;
    let upper = table.geometry.upper_catalog(&table.physics, cut)?;
    let lower = table.geometry.lower_catalog(&table.physics, cut)?;
    let momenta = table.momenta();
    let has_errors = table.points.iter().all(|s| s.errors.is_some());
    let mut bands = Vec::with_capacity(table.levels);
    for k in 1..=table.levels {
        let band = table.band(k);
        let (jmin, min) = band.iter().copied().enumerate().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        let (jmax, max) = band.iter().copied().enumerate().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        let tol_at = |v: f64, j: usize| {
            if has_errors {
                opts.match_factor * table.error(k, j) + 1e-9 * (1.0 + v.abs())
            } else {
                opts.match_floor * (1.0 + v.abs())
            }
        };
        let variation = (max - min) / max.abs();
        let lower_edge = (table.geometry.kind() == GeometryKind::OneSidedBarrier).then(|| label(min, &lower, tol_at(min, jmin)));
        bands.push(BandInfo {
            k,
            min,
            max,
            argmin_p: momenta[jmin],
            argmax_p: momenta[jmax],
            variation,
            flat: variation <= opts.flat_tol,
            upper_edge: label(max, &upper, tol_at(max, jmax)),
            lower_edge,
        });
    }
    let gaps = detect_gaps(&bands);
    let flat_bands = detect_flat(table, opts.flat_tol);
    Ok(BandSummary { geometry: table.geometry, physics: table.physics, momenta: (momenta[0], *momenta.last().unwrap()), bands, gaps, flat_bands })
}

/// Open intervals below the last computed band's minimum that no band hull
/// covers. Higher bands cannot reach below that minimum, so every reported
/// gap is a gap of the whole (sampled) spectrum.
pub fn detect_gaps(bands: &[BandInfo]) -> Vec<Gap> {
    let Some(ceiling) = bands.last().map(|b| b.min) else {
        return Vec::new();
    };
    let mut hulls: Vec<(f64, f64, usize)> = bands.iter().map(|b| (b.min, b.max, b.k)).collect();
    hulls.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut gaps = Vec::new();
    let mut reach = hulls[0].1;
    for &(lo, hi, k) in &hulls[1..] {
        if lo > reach && lo <= ceiling {
            gaps.push(Gap { lower: reach, upper: lo, below_band: k });
        }
        reach = reach.max(hi);
    }
    gaps
}

/// Curves constant to `rel_tol` across the grid.
///
/// Rank-labelled bands are checked first; a flat curve crossed by
/// dispersive bands changes rank, so values persisting at every momentum
/// are also collected by level matching.
pub fn detect_flat(table: &DispersionTable, rel_tol: f64) -> Vec<FlatBand> {
    let predictions: Vec<FlatLevel> = match table.geometry {
        GeometryConfig::DoubleLayer { d1, d2, .. } | GeometryConfig::OneSidedBarrier { d1, d2 } => {
            flat_band_levels(table.physics.field, &d1, &d2, 2.0 * table.e_max + 10.0)
        }
        GeometryConfig::NeumannWindowLayer { .. } => Vec::new(),
    };
    let mut found: Vec<FlatBand> = Vec::new();
    let first = &table.points[0];
    for &seed in &first.values {
        let mut ranks = Vec::with_capacity(table.points.len());
        let mut vals = Vec::with_capacity(table.points.len());
        for s in &table.points {
            let best = s
                .values
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - seed).abs().total_cmp(&(b.1 - seed).abs()))
                .map(|(i, v)| (i, *v))
                .unwrap();
            ranks.push(best.0 + 1);
            vals.push(best.1);
        }
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let variation = (max - min) / max.abs();
        if variation > rel_tol {
            continue;
        }
        let value = vals.iter().sum::<f64>() / vals.len() as f64;
        if found.iter().any(|f| (f.value - value).abs() <= rel_tol * value.abs()) {
            continue;
        }
        let prediction = predictions
            .iter()
            .min_by(|a, b| (a.value - value).abs().total_cmp(&(b.value - value).abs()))
            .copied();
        found.push(FlatBand { value, variation, ranks, prediction });
    }
    found
}

/// Gap below band `k` for a sequence of window widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapOpening {
    pub k: usize,
    /// `(a, min_p λ_k(p;a) - max_p λ_{k-1}(p;a))`; positive means open.
    pub margins: Vec<(f64, f64)>,
    /// Largest tested `a` up to which the gap stays open, if any.
    pub a_o: Option<f64>,
}

/// Empirical gap-opening threshold for the gap below band `k ≥ 2`.
pub fn gap_opening_threshold(
    geometry: &GeometryConfig,
    physics: &PhysicalConfig,
    k: usize,
    widths: &[f64],
    pgrid: &MomentumGrid,
    settings: &SweepSettings,
) -> Result<GapOpening> {
    if k < 2 || k > settings.levels {
        return Err(Error::invalid(format!("band {k} needs 2 <= k <= levels")));
    }
    let mut sorted = widths.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut margins = Vec::with_capacity(sorted.len());
    for &a in &sorted {
        let table = sweep(&geometry.with_half_window(a), physics, pgrid, settings)?;
        let min_k = table.band(k).into_iter().fold(f64::INFINITY, f64::min);
        let max_below = table.band(k - 1).into_iter().fold(f64::NEG_INFINITY, f64::max);
        margins.push((a, min_k - max_below));
    }
    let a_o = margins.iter().take_while(|(_, m)| *m > 0.0).last().map(|(a, _)| *a);
    Ok(GapOpening { k, margins, a_o })
}

/// Current density samples for one eigenstate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurrentSample {
    pub x: f64,
    pub z: f64,
    pub density: f64,
    /// `p |φ|²`.
    pub momentum_current: f64,
    /// `2(p + Bx) |φ|²`.
    pub mechanical_current: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrentProfile {
    pub k: usize,
    pub p: f64,
    pub samples: Vec<CurrentSample>,
    /// `Σ M |φ|²`, one for a normalized state.
    pub norm: f64,
    pub total_momentum_current: f64,
    pub total_mechanical_current: f64,
    /// Feynman–Hellmann `dλ/dp = 2⟨φ,(p+Bx)φ⟩`.
    pub velocity_fh: f64,
    /// Finite difference of the tabulated band, when neighbours exist.
    pub velocity_fd: Option<f64>,
    /// False when `λ_k` is within `1e-8` of a neighbouring level.
    pub reliable: bool,
}

fn is_degenerate(values: &[f64], k: usize) -> bool {
    let v = values[k - 1];
    let near = |i: usize| values.get(i).is_some_and(|w| (w - v).abs() <= 1e-8 * (1.0 + v.abs()));
    (k >= 2 && near(k - 2)) || near(k)
}

fn mechanical(states: &FiberStates, k: usize, p: f64, b: f64) -> (Vec<CurrentSample>, f64, f64, f64) {
    let v = &states.vectors[k - 1];
    let nodes = states.matrix.node_table();
    let mut samples = Vec::with_capacity(v.len());
    let (mut norm, mut mom, mut mech) = (0.0, 0.0, 0.0);
    for ((&(x, z, _), &phi), &m) in nodes.iter().zip(v).zip(&states.matrix.mass) {
        let density = phi * phi;
        let s = CurrentSample {
            x,
            z,
            density,
            momentum_current: p * density,
            mechanical_current: 2.0 * (p + b * x) * density,
        };
        norm += m * density;
        mom += m * s.momentum_current;
        mech += m * s.mechanical_current;
        samples.push(s);
    }
    (samples, norm, mom, mech)
}

/// Current profile of band `k` at grid point `j` of a table built with
/// `keep_vectors`.
pub fn current_profile(table: &DispersionTable, k: usize, j: usize) -> Result<CurrentProfile> {
    let point = table.points.get(j).ok_or_else(|| Error::invalid(format!("no grid point {j}")))?;
    if k == 0 || k > table.levels {
        return Err(Error::invalid(format!("band {k} outside 1..={}", table.levels)));
    }
    let states = point
        .states
        .as_ref()
        .ok_or_else(|| Error::invalid("eigenvectors were not kept; sweep with keep_vectors"))?;
    let (samples, norm, mom, mech) = mechanical(states, k, point.p, table.physics.field);
    let n = table.points.len();
    let velocity_fd = match (j.checked_sub(1), (j + 1 < n).then_some(j + 1)) {
        (Some(a), Some(b)) => Some((table.points[b].values[k - 1] - table.points[a].values[k - 1]) / (table.points[b].p - table.points[a].p)),
        (None, Some(b)) => Some((table.points[b].values[k - 1] - point.values[k - 1]) / (table.points[b].p - point.p)),
        (Some(a), None) => Some((point.values[k - 1] - table.points[a].values[k - 1]) / (point.p - table.points[a].p)),
        (None, None) => None,
    };
    Ok(CurrentProfile {
        k,
        p: point.p,
        samples,
        norm,
        total_momentum_current: mom,
        total_mechanical_current: mech,
        velocity_fh: mech,
        velocity_fd,
        reliable: !is_degenerate(&point.values, k),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupVelocity {
    pub p: f64,
    pub k: usize,
    /// Central difference `(λ(p+δ) - λ(p-δ))/(2δ)`.
    pub finite_difference: f64,
    pub feynman_hellmann: f64,
    pub reliable: bool,
}

/// Group velocity of band `k` at `p`, both ways.
pub fn group_velocity(
    geometry: &GeometryConfig,
    physics: &PhysicalConfig,
    k: usize,
    p: f64,
    step: f64,
    settings: &SweepSettings,
) -> Result<GroupVelocity> {
    if !(step > 0.0) {
        return Err(Error::invalid("difference step must be positive"));
    }
    let e_max = settings.resolve_e_max(geometry, physics)?;
    let s = SweepSettings { e_max: Some(e_max), keep_vectors: true, error_estimates: false, ..*settings };
    let centre = solve_fiber(geometry, physics, p, &s)?;
    let lo = solve_fiber(geometry, physics, p - step, &SweepSettings { keep_vectors: false, ..s })?;
    let hi = solve_fiber(geometry, physics, p + step, &SweepSettings { keep_vectors: false, ..s })?;
    let (_, _, _, fh) = mechanical(centre.states.as_ref().unwrap(), k, p, physics.field);
    Ok(GroupVelocity {
        p,
        k,
        finite_difference: (hi.values[k - 1] - lo.values[k - 1]) / (2.0 * step),
        feynman_hellmann: fh,
        reliable: !is_degenerate(&centre.values, k),
    })
}

/// Largest pointwise difference, relative to the largest amplitude, between
/// eigenvector `k` at `p` reflected in `x` and eigenvector `k` at `-p`,
/// after fixing the arbitrary sign.
pub fn mirror_defect(at_p: &FiberSolution, at_minus_p: &FiberSolution, k: usize) -> Result<f64> {
    let (Some(a), Some(b)) = (&at_p.states, &at_minus_p.states) else {
        return Err(Error::invalid("mirror check needs retained eigenvectors"));
    };
    let image = a.matrix.mirror_vector(&a.vectors[k - 1])?;
    let other = &b.vectors[k - 1];
    if image.len() != other.len() {
        return Err(Error::invalid("grids at p and -p are not mirror images"));
    }
    let dot: f64 = image.iter().zip(other).map(|(x, y)| x * y).sum();
    let sign = if dot < 0.0 { -1.0 } else { 1.0 };
    let scale = other.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(image.iter().zip(other).map(|(x, y)| (sign * x - y).abs()).fold(0.0, f64::max) / scale)
}

/// The lowest `count` values of the union of `levels` and `constants`.
pub fn merge_levels(levels: &[f64], constants: &[f64], count: usize) -> Vec<f64> {
    let mut all: Vec<f64> = levels.iter().chain(constants).copied().collect();
    all.sort_by(f64::total_cmp);
    all.truncate(count);
    all
}

/// Band diagram as SVG: bands as polylines, catalog levels as dashed
/// rules, gaps shaded.
pub fn write_svg<W: Write>(table: &DispersionTable, summary: &BandSummary, mut w: W) -> Result<()> {
    let (width, height, margin) = (800.0, 600.0, 60.0);
    let momenta = table.momenta();
    let (p0, p1) = (momenta[0], *momenta.last().unwrap());
    let all: Vec<f64> = table.points.iter().flat_map(|s| s.values.iter().copied()).collect();
    let e0 = all.iter().copied().fold(f64::INFINITY, f64::min);
    let e1 = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = 0.05 * (e1 - e0).max(1e-6);
    let (e0, e1) = (e0 - pad, e1 + pad);
    let span_p = if p1 > p0 { p1 - p0 } else { 1.0 };
    let sx = |p: f64| margin + (p - p0) / span_p * (width - 2.0 * margin);
    let sy = |e: f64| height - margin - (e - e0) / (e1 - e0) * (height - 2.0 * margin);
    writeln!(w, r#"<?xml version="1.0" encoding="UTF-8"?>"#)?;
    writeln!(w, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#)?;
    writeln!(w, r#"<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>"#)?;
    for g in &summary.gaps {
        let (top, bottom) = (sy(g.upper), sy(g.lower));
        writeln!(
            w,
            r##"<rect class="gap" x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="#dde8f5"/>"##,
            margin,
            top,
            width - 2.0 * margin,
            bottom - top
        )?;
    }
    if let Ok(cat) = table.geometry.upper_catalog(&table.physics, e1) {
        for e in cat.entries.iter().filter(|e| e.value >= e0) {
            let y = sy(e.value);
            writeln!(
                w,
                r##"<line class="level" x1="{:.3}" y1="{y:.3}" x2="{:.3}" y2="{y:.3}" stroke="#888888" stroke-dasharray="6,4"/>"##,
                margin,
                width - margin
            )?;
        }
    }
    for k in 1..=table.levels {
        let pts: Vec<String> = table.band(k).iter().zip(&momenta).map(|(e, p)| format!("{:.3},{:.3}", sx(*p), sy(*e))).collect();
        writeln!(w, r##"<polyline class="band" fill="none" stroke="#1f4e9c" stroke-width="1.5" points="{}"/>"##, pts.join(" "))?;
    }
    writeln!(
        w,
        r##"<rect x="{margin}" y="{margin}" width="{:.3}" height="{:.3}" fill="none" stroke="black"/>"##,
        width - 2.0 * margin,
        height - 2.0 * margin
    )?;
    writeln!(w, r#"<text x="{:.3}" y="{:.3}" text-anchor="middle" font-size="14">p</text>"#, width / 2.0, height - 20.0)?;
    writeln!(w, r#"<text x="20" y="{:.3}" font-size="14">E</text>"#, height / 2.0)?;
    writeln!(w, "</svg>")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Width;
    use std::f64::consts::PI;

    fn layer(a: f64) -> GeometryConfig {
        GeometryConfig::NeumannWindowLayer { d: Width::pi_fraction(1, 1), a }
    }

    fn unit() -> PhysicalConfig {
        PhysicalConfig::new(1.0).unwrap()
    }

    fn coarse(levels: usize) -> SweepSettings {
        SweepSettings::new(levels, GridOptions::per_unit(16, PI))
    }

    #[test]
    fn momentum_grid_validation() {
        assert!(MomentumGrid::new(vec![0.0, 0.0]).is_err());
        assert!(MomentumGrid::new(vec![]).is_err());
        let g = MomentumGrid::symmetric(12.0, 41).unwrap();
        assert_eq!(g.len(), 41);
        assert!(g.is_symmetric());
        assert_eq!(g.position(0.0), Some(20));
        assert_eq!(g.values()[0], -12.0);
        let json = serde_json::to_string(&g).unwrap();
        assert_eq!(serde_json::from_str::<MomentumGrid>(&json).unwrap(), g);
        assert!(serde_json::from_str::<MomentumGrid>("[1.0, 0.5]").is_err());
    }

    #[test]
    fn window_energy_is_kth_upper_level() {
        assert!((window_energy(&layer(1.0), &unit(), 5).unwrap() - 7.0).abs() < 1e-12);
        let dl = GeometryConfig::DoubleLayer { d1: Width::pi_fraction(1, 1), d2: Width::pi_fraction(1, 2), a: 0.0 };
        assert!((window_energy(&dl, &unit(), 4).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn no_window_bands_are_constant() {
        let t = sweep(&layer(0.0), &unit(), &MomentumGrid::uniform(-3.0, 3.0, 5).unwrap(), &coarse(3).with_error_estimates())
            .unwrap();
        for k in 1..=3 {
            let b = t.band(k);
            let spread = b.iter().copied().fold(f64::NEG_INFINITY, f64::max) - b.iter().copied().fold(f64::INFINITY, f64::min);
            assert!(spread < 1e-8, "band {k} spread {spread}");
        }
        let s = t.summary().unwrap();
        assert!(s.bands.iter().all(|b| b.upper_edge.identified), "{:?}", s.bands);
        assert!(s.bands.iter().all(|b| b.flat));
    }

    #[test]
    fn window_lowers_ground_state_and_edges_are_labelled() {
        let t = sweep(&layer(1.0), &unit(), &MomentumGrid::symmetric(12.0, 9).unwrap(), &coarse(2)).unwrap();
        let b1 = t.band(1);
        assert!(b1[4] < 2.0 - 0.05, "λ1(0) = {}", b1[4]);
        assert!((b1[0] - 2.0).abs() < 1e-2 && (b1[8] - 2.0).abs() < 1e-2);
        // Mirror symmetry of the values on a symmetric grid.
        for k in 1..=2 {
            let b = t.band(k);
            for j in 0..9 {
                assert!((b[j] - b[8 - j]).abs() < 1e-9);
            }
        }
        let s = t.summary().unwrap();
        assert_eq!(s.bands[0].upper_edge.modes, vec![ModeIndex::new(0, 1)]);
        assert!(s.bands[0].upper_edge.identified);
        assert_eq!(s.bands[0].argmin_p, 0.0);
    }

    #[test]
    fn gaps_from_hulls() {
        let mk = |k, min, max| BandInfo {
            k,
            min,
            max,
            argmin_p: 0.0,
            argmax_p: 0.0,
            variation: 0.0,
            flat: false,
            upper_edge: EdgeLabel {
                observed: max,
                level: max,
                modes: vec![],
                distance: 0.0,
                tolerance: 0.0,
                identified: true,
                diagnostic: None,
            },
            lower_edge: None,
        };
        let gaps = detect_gaps(&[mk(1, 1.0, 2.0), mk(2, 3.0, 4.0), mk(3, 3.5, 6.0), mk(4, 7.0, 8.0)]);
        assert_eq!(gaps.len(), 2);
        assert_eq!((gaps[0].lower, gaps[0].upper, gaps[0].below_band), (2.0, 3.0, 2));
        assert_eq!((gaps[1].lower, gaps[1].upper), (6.0, 7.0));
        // Nothing above the last band's minimum is reported.
        assert!(detect_gaps(&[mk(1, 1.0, 5.0), mk(2, 2.0, 3.0)]).is_empty());
    }

    #[test]
    fn fh_matches_table_difference() {
        let s = coarse(1).with_vectors();
        let t = sweep(&layer(1.0), &unit(), &MomentumGrid::uniform(1.99, 2.01, 3).unwrap(), &s).unwrap();
        let prof = current_profile(&t, 1, 1).unwrap();
        assert!((prof.norm - 1.0).abs() < 1e-10);
        assert!((prof.total_momentum_current - 2.0).abs() < 1e-9);
        let fd = prof.velocity_fd.unwrap();
        assert!((fd - prof.velocity_fh).abs() < 1e-4 * fd.abs().max(1.0), "{fd} vs {}", prof.velocity_fh);
        assert!(prof.reliable);
    }

    #[test]
    fn mirror_pair_profiles() {
        let s = coarse(1).with_vectors();
        let a = solve_fiber(&layer(1.0), &unit(), 2.0, &s.with_e_max(8.0)).unwrap();
        let b = solve_fiber(&layer(1.0), &unit(), -2.0, &s.with_e_max(8.0)).unwrap();
        assert!(mirror_defect(&a, &b, 1).unwrap() < 1e-6);
        let t = DispersionTable { geometry: layer(1.0), physics: unit(), levels: 1, e_max: 8.0, grid: s.grid, points: vec![b, a] };
        let left = current_profile(&t, 1, 0).unwrap();
        let right = current_profile(&t, 1, 1).unwrap();
        assert!((left.velocity_fh + right.velocity_fh).abs() < 1e-8);
        assert!((left.total_momentum_current + right.total_momentum_current).abs() < 1e-12);
    }

    #[test]
    fn csv_and_svg_outputs() {
        let t = sweep(&layer(1.0), &unit(), &MomentumGrid::uniform(-1.0, 1.0, 3).unwrap(), &coarse(2)).unwrap();
        let mut csv = Vec::new();
        t.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 2);
        assert!(text.starts_with("p,k,lambda,residual\n"));
        let mut svg = Vec::new();
        write_svg(&t, &t.summary().unwrap(), &mut svg).unwrap();
        let svg = String::from_utf8(svg).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn merge_keeps_lowest() {
        assert_eq!(merge_levels(&[1.0, 3.0, 5.0], &[2.0, 4.0], 4), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn solver_failure_names_momentum() {
        let mut s = coarse(2);
        s.max_iter = 1;
        s.tol = 1e-14;
        match sweep(&layer(1.0), &unit(), &MomentumGrid::new(vec![0.5]).unwrap(), &s) {
            Err(Error::AtMomentum { momentum, source }) => {
                assert_eq!(momentum, 0.5);
                assert!(matches!(*source, Error::NotConverged { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
