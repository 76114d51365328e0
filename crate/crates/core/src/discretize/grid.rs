//! Truncated, boundary-conforming tensor grids for one fiber problem.

use std::ops::Range;

use num_integer::Integer;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GeometryConfig, GeometryKind, PhysicalConfig, Width};

/// Smallest number of cells allowed across any layer.
pub const MIN_CELLS: usize = 8;

/// One fiber `H(p)` together with the spectral window the grid must resolve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiberProblem {
    pub geometry: GeometryConfig,
    pub physics: PhysicalConfig,
    pub momentum: f64,
    pub e_max: f64,
}

impl FiberProblem {
    pub fn new(geometry: GeometryConfig, physics: PhysicalConfig, momentum: f64, e_max: f64) -> Result<Self> {
        let p = FiberProblem { geometry, physics, momentum, e_max };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.physics.validate()?;
        if !self.momentum.is_finite() {
            return Err(Error::invalid("momentum must be finite"));
        }
        let floor = self.geometry.spectral_floor(&self.physics);
        if !(self.e_max > floor) {
            return Err(Error::EmptyCatalog { e_max: self.e_max, ground: floor });
        }
        Ok(())
    }

    /// Oscillator centre `-p/B`.
    pub fn centre(&self) -> f64 {
        -self.momentum / self.physics.field
    }

    pub fn with_momentum(&self, momentum: f64) -> Self {
        FiberProblem { momentum, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridOptions {
    /// Target transverse spacing.
    pub h: f64,
    /// Target x-spacing; defaults to `h`. Adjusted so that `±a` are nodes.
    #[serde(default)]
    pub hx_target: Option<f64>,
    /// Exact x-spacing; window edges are then snapped to the nearest node.
    #[serde(default)]
    pub hx: Option<f64>,
    /// Energy margin `Δ` added to `E_max` for the classical turning point.
    #[serde(default = "default_energy_margin")]
    pub energy_margin: f64,
    /// Gaussian decay padding; defaults to `6/√B`.
    #[serde(default)]
    pub decay: Option<f64>,
}

fn default_energy_margin() -> f64 {
    10.0
}

impl GridOptions {
    pub fn new(h: f64) -> Self {
        GridOptions { h, hx_target: None, hx: None, energy_margin: default_energy_margin(), decay: None }
    }

    /// `cells` cells per length `unit`, e.g. `per_unit(256, π)`.
    pub fn per_unit(cells: u32, unit: f64) -> Self {
        Self::new(unit / cells as f64)
    }

    pub fn refined(&self, factor: u32) -> Self {
        GridOptions {
            h: self.h / factor as f64,
            hx_target: self.hx_target.map(|h| h / factor as f64),
            hx: self.hx.map(|h| h / factor as f64),
            ..*self
        }
    }

    pub fn with_energy_margin(mut self, delta: f64) -> Self {
        self.energy_margin = delta;
        self
    }

    pub fn with_decay(mut self, decay: f64) -> Self {
        self.decay = Some(decay);
        self
    }

    pub fn with_hx(mut self, hx: f64) -> Self {
        self.hx = Some(hx);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.h) {
            return Err(Error::config("solver.h", "spacing must be positive"));
        }
        if self.hx_target.is_some_and(|h| !pos(h)) || self.hx.is_some_and(|h| !pos(h)) {
            return Err(Error::config("solver.hx", "spacing must be positive"));
        }
        if !(self.energy_margin.is_finite() && self.energy_margin >= 0.0) {
            return Err(Error::config("solver.energy_margin", "margin must be >= 0"));
        }
        if self.decay.is_some_and(|d| !(d.is_finite() && d >= 0.0)) {
            return Err(Error::config("solver.decay", "padding must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeClass {
    Interior,
    Dirichlet,
    NeumannWindow,
    Barrier,
    Window,
}

impl NodeClass {
    pub fn is_unknown(self) -> bool {
        matches!(self, NodeClass::Interior | NodeClass::NeumannWindow | NodeClass::Window)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NodeClass::Interior => "interior",
            NodeClass::Dirichlet => "dirichlet",
            NodeClass::NeumannWindow => "neumann_window",
            NodeClass::Barrier => "barrier",
            NodeClass::Window => "window",
        }
    }
}

/// One layer of interior rows `j = 1..cells-1`, row `j` sitting at
/// `z = origin + direction·j·hz`; row 0 is the interface line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerBlock {
    pub width: f64,
    pub cells: usize,
    pub hz: f64,
    pub origin: f64,
    pub direction: f64,
    /// First unknown of the block.
    pub offset: usize,
}

impl LayerBlock {
    pub fn rows(&self) -> usize {
        self.cells - 1
    }

    pub fn z(&self, j: usize) -> f64 {
        self.origin + self.direction * j as f64 * self.hz
    }
}

/// Truncated grid: columns `c = 0..nx` at `x = (ix_lo + 1 + c)·hx`, the
/// columns `ix_lo` and `ix_hi` being Dirichlet truncation edges.
///
/// Unknowns are ordered layer by layer (`offset + c·rows + j - 1`),
/// followed by the open interface nodes of the columns in `interface`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub kind: GeometryKind,
    pub field: f64,
    pub momentum: f64,
    pub hx: f64,
    pub ix_lo: i64,
    pub ix_hi: i64,
    pub layers: Vec<LayerBlock>,
    /// `z` of the interface line (window top for a single layer, `0` otherwise).
    pub interface_z: f64,
    /// Columns whose interface node is an unknown.
    pub interface: Range<usize>,
    /// Window half-width actually realized on the grid.
    pub effective_half_window: Option<f64>,
    pub e_max: f64,
}

impl GridSpec {
    pub fn nx(&self) -> usize {
        (self.ix_hi - self.ix_lo - 1) as usize
    }

    pub fn x(&self, c: usize) -> f64 {
        (self.ix_lo + 1 + c as i64) as f64 * self.hx
    }

    pub fn x_lo(&self) -> f64 {
        self.ix_lo as f64 * self.hx
    }

    pub fn x_hi(&self) -> f64 {
        self.ix_hi as f64 * self.hx
    }

    pub fn interface_offset(&self) -> usize {
        self.layers.iter().map(|l| l.rows() * self.nx()).sum()
    }

    pub fn dim(&self) -> usize {
        self.interface_offset() + self.interface.len()
    }

    pub fn potential(&self, x: f64) -> f64 {
        let v = self.momentum + self.field * x;
        v * v
    }

    pub fn layer_index(&self, layer: usize, c: usize, j: usize) -> usize {
        let l = &self.layers[layer];
        l.offset + c * l.rows() + (j - 1)
    }

    pub fn interface_index(&self, c: usize) -> Option<usize> {
        self.interface.contains(&c).then(|| self.interface_offset() + c - self.interface.start)
    }

    pub fn interface_class(&self) -> NodeClass {
        match self.kind {
            GeometryKind::NeumannWindowLayer => NodeClass::NeumannWindow,
            _ => NodeClass::Window,
        }
    }

    /// `(x, z, class)` of every unknown in index order.
    pub fn unknown_nodes(&self) -> Vec<(f64, f64, NodeClass)> {
        let mut out = Vec::with_capacity(self.dim());
        for l in &self.layers {
            for c in 0..self.nx() {
                for j in 1..l.cells {
                    out.push((self.x(c), l.z(j), NodeClass::Interior));
                }
            }
        }
        for c in self.interface.clone() {
            out.push((self.x(c), self.interface_z, self.interface_class()));
        }
        out
    }

    /// Every grid point including eliminated boundary nodes, with the index
    /// of its unknown when it has one.
    pub fn all_nodes(&self) -> Vec<(Option<usize>, f64, f64, NodeClass)> {
        let mut out = Vec::new();
        let ncol = self.nx() + 2;
        for (li, l) in self.layers.iter().enumerate() {
            for cc in 0..ncol {
                let x = (self.ix_lo + cc as i64) as f64 * self.hx;
                let edge = cc == 0 || cc == ncol - 1;
                let start = if li == 0 { 0 } else { 1 };
                for j in start..=l.cells {
                    let z = l.z(j);
                    if j == 0 {
                        let c = cc.wrapping_sub(1);
                        let idx = if edge { None } else { self.interface_index(c) };
                        let class = match idx {
                            Some(_) => self.interface_class(),
                            None if self.kind == GeometryKind::NeumannWindowLayer => NodeClass::Dirichlet,
                            None if edge => NodeClass::Dirichlet,
                            None => NodeClass::Barrier,
                        };
                        out.push((idx, x, z, class));
                    } else if edge || j == l.cells {
                        out.push((None, x, z, NodeClass::Dirichlet));
                    } else {
                        out.push((Some(self.layer_index(li, cc - 1, j)), x, z, NodeClass::Interior));
                    }
                }
            }
        }
        out
    }

    /// True when the node set is invariant under `x -> -x`.
    pub fn is_mirror_symmetric(&self) -> bool {
        self.kind != GeometryKind::OneSidedBarrier && self.ix_lo == -self.ix_hi
    }

    /// The grid reflected in `x` at momentum `-p`; `None` when the
    /// cross-section itself is not mirror symmetric.
    pub fn mirrored(&self) -> Option<GridSpec> {
        if self.kind == GeometryKind::OneSidedBarrier {
            return None;
        }
        let nx = self.nx();
        Some(GridSpec {
            momentum: -self.momentum,
            ix_lo: -self.ix_hi,
            ix_hi: -self.ix_lo,
            interface: nx - self.interface.end..nx - self.interface.start,
            ..self.clone()
        })
    }
}

/// Per-layer cell counts for the requested spacing. Widths sharing a scale
/// get a common `hz`, so the interface and commensurate modes are exact.
fn layer_cells(widths: &[Width], h: f64) -> Result<Vec<usize>> {
    let shared = widths.windows(2).all(|w| w[0].same_scale(&w[1]));
    let cells: Vec<usize> = if shared {
        let scale = widths[0].scale;
        let lcm = widths.iter().fold(1i64, |acc, w| acc.lcm(&w.reduced().1));
        let q = (scale / (lcm as f64 * h) - 1e-9).ceil().max(1.0) as i64;
        widths
            .iter()
            .map(|w| {
                let (n, d) = w.reduced();
                (n * (lcm / d) * q) as usize
            })
            .collect()
    } else {
        widths.iter().map(|w| (w.value() / h).round().max(1.0) as usize).collect()
    };
    if let Some((w, n)) = widths.iter().zip(&cells).find(|(_, n)| **n < MIN_CELLS) {
        return Err(Error::GridRefused(format!(
            "only {n} cells across width {}; at least {MIN_CELLS} required",
            w.value()
        )));
    }
    Ok(cells)
}

pub fn build_grid(problem: &FiberProblem, opts: &GridOptions) -> Result<GridSpec> {
    problem.validate()?;
    opts.validate()?;
    let b = problem.physics.field;
    let geom = &problem.geometry;
    let a = geom.half_window();

    let hx = match (opts.hx, a) {
        (Some(hx), _) => hx,
        (None, Some(a)) if a > 0.0 => {
            // An even cell count across `a` keeps `±a` on the nodes of the
            // twice-coarser grid used for error estimates.
            let target = opts.hx_target.unwrap_or(opts.h);
            a / (2.0 * (a / (2.0 * target)).round().max(1.0))
        }
        (None, _) => opts.hx_target.unwrap_or(opts.h),
    };

    // Window edge in units of hx.
    let mut effective = a;
    let ia = match a {
        Some(a) if a > 0.0 => {
            let ia = (a / hx).round() as i64;
            let snap = (ia as f64 * hx - a).abs();
            if snap > 1e-9 * hx {
                log::warn!("window edge {a} snapped by {snap:.3e} to the grid node {}", ia as f64 * hx);
            }
            if 2 * ia < 4 {
                return Err(Error::GridRefused(format!(
                    "window 2a = {} spans only {} cells of size {hx}; need at least 4",
                    2.0 * a,
                    2 * ia
                )));
            }
            effective = Some(ia as f64 * hx);
            ia
        }
        _ => 0,
    };

    let decay = opts.decay.unwrap_or(6.0 / b.sqrt());
    let w = (problem.e_max + opts.energy_margin).sqrt() / b;
    let c = problem.centre();
    let edge = a.unwrap_or(0.0);
    let lo = (c - w - decay).min(-edge - decay);
    let hi = (c + w + decay).max(edge + decay);
    let ix_lo = (lo / hx).floor() as i64;
    let ix_hi = (hi / hx).ceil() as i64;

    let widths = geom.widths();
    let cells = layer_cells(&widths, opts.h)?;
    let nx = (ix_hi - ix_lo - 1) as usize;

    let mut layers = Vec::new();
    let mut offset = 0;
    let (interface_z, dirs): (f64, Vec<(f64, f64)>) = match geom.kind() {
        GeometryKind::NeumannWindowLayer => {
            let d = widths[0].value();
            (d, vec![(d, -1.0)])
        }
        _ => (0.0, vec![(0.0, 1.0), (0.0, -1.0)]),
    };
    for ((w, &n), (origin, direction)) in widths.iter().zip(&cells).zip(dirs) {
        let block = LayerBlock { width: w.value(), cells: n, hz: w.value() / n as f64, origin, direction, offset };
        offset += block.rows() * nx;
        layers.push(block);
    }

    // Columns with an open interface node.
    let col = |ix: i64| (ix - ix_lo - 1).clamp(0, nx as i64) as usize;
    let interface = match geom.kind() {
        GeometryKind::OneSidedBarrier => col(1)..nx,
        _ if ia > 0 => col(-ia + 1)..col(ia),
        _ => 0..0,
    };

    Ok(GridSpec {
        kind: geom.kind(),
        field: b,
        momentum: problem.momentum,
        hx,
        ix_lo,
        ix_hi,
        layers,
        interface_z,
        interface,
        effective_half_window: effective,
        e_max: problem.e_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn kind1(a: f64, p: f64, e_max: f64) -> FiberProblem {
        FiberProblem::new(
            GeometryConfig::NeumannWindowLayer { d: Width::pi_fraction(1, 1), a },
            PhysicalConfig::new(1.0).unwrap(),
            p,
            e_max,
        )
        .unwrap()
    }

    #[test]
    fn truncation_covers_turning_point() {
        let g = build_grid(&kind1(1.0, 0.0, 20.0), &GridOptions::new(0.05).with_energy_margin(30.0)).unwrap();
        let w = 50f64.sqrt();
        assert!(g.x_lo() <= -w - 6.0 && g.x_hi() >= w + 6.0);
        assert!((g.potential(g.x_lo())) >= 50.0);
        assert!(g.is_mirror_symmetric());
        assert_eq!(g.effective_half_window, Some(1.0));
    }

    #[test]
    fn shared_scale_gives_common_spacing() {
        let p = FiberProblem::new(
            GeometryConfig::DoubleLayer { d1: Width::integer(2), d2: Width::integer(1), a: 1.0 },
            PhysicalConfig::new(1.0).unwrap(),
            0.0,
            12.0,
        )
        .unwrap();
        let g = build_grid(&p, &GridOptions::per_unit(32, 1.0)).unwrap();
        assert_eq!(g.layers[0].cells, 64);
        assert_eq!(g.layers[1].cells, 32);
        assert_eq!(g.layers[0].hz, 1.0 / 32.0);
        assert_eq!(g.layers[1].hz, 1.0 / 32.0);
        assert_eq!(g.layers[1].z(32), -1.0);
    }

    #[test]
    fn pi_fractions_align() {
        let p = FiberProblem::new(
            GeometryConfig::OneSidedBarrier { d1: Width::pi_fraction(3, 5), d2: Width::pi_fraction(2, 5) },
            PhysicalConfig::new(4.0).unwrap(),
            0.0,
            12.0,
        )
        .unwrap();
        let g = build_grid(&p, &GridOptions::per_unit(80, PI)).unwrap();
        assert_eq!((g.layers[0].cells, g.layers[1].cells), (48, 32));
        // barrier x <= 0, window strictly x > 0
        assert!(g.x(g.interface.start) > 0.0);
        assert!(g.x(g.interface.start - 1).abs() < 1e-12);
        assert_eq!(g.interface.end, g.nx());
    }

    #[test]
    fn centre_follows_momentum() {
        let g = build_grid(&kind1(0.0, 5.0, 10.0), &GridOptions::new(0.05)).unwrap();
        let mid = 0.5 * (g.x_lo() + g.x_hi());
        let w = 20f64.sqrt() + 6.0;
        assert!(g.x_lo() <= -5.0 - w && g.x_hi() >= -5.0 + w);
        assert!(mid < -1.0);
        assert!(g.interface.is_empty());
    }

    #[test]
    fn opposite_momenta_mirror() {
        let opts = GridOptions::new(0.07);
        let g1 = build_grid(&kind1(1.0, 2.5, 10.0), &opts).unwrap();
        let g2 = build_grid(&kind1(1.0, -2.5, 10.0), &opts).unwrap();
        assert_eq!(g1.ix_lo, -g2.ix_hi);
        assert_eq!(g1.ix_hi, -g2.ix_lo);
        assert_eq!(g1.interface.start, g2.nx() - g2.interface.end);
    }

    #[test]
    fn window_edges_are_nodes() {
        let g = build_grid(&kind1(PI / 4.0, 0.0, 10.0), &GridOptions::per_unit(64, PI)).unwrap();
        let ia = (PI / 4.0 / g.hx).round();
        assert!((ia * g.hx - PI / 4.0).abs() < 1e-14);
        let first = g.x(g.interface.start);
        assert!((first + PI / 4.0 - g.hx).abs() < 1e-12);
    }

    #[test]
    fn refuses_coarse_window_and_layers() {
        let r = build_grid(&kind1(0.05, 0.0, 10.0), &GridOptions::new(0.1).with_hx(0.1));
        assert!(matches!(r, Err(Error::GridRefused(_))));
        let r = build_grid(&kind1(1.0, 0.0, 10.0), &GridOptions::new(0.5));
        assert!(matches!(r, Err(Error::GridRefused(_))));
    }

    #[test]
    fn node_map_counts() {
        let g = build_grid(&kind1(1.0, 0.0, 5.0), &GridOptions::per_unit(16, PI)).unwrap();
        let all = g.all_nodes();
        let unknowns = all.iter().filter(|n| n.0.is_some()).count();
        assert_eq!(unknowns, g.dim());
        assert!(all.iter().all(|n| n.0.is_some() == n.3.is_unknown()));
        let mut seen = vec![false; g.dim()];
        for n in &all {
            if let Some(i) = n.0 {
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        assert_eq!(g.unknown_nodes().len(), g.dim());
    }
}
