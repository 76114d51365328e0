//! Separable one-dimensional reference problems: exact transverse interval
//! modes, the harmonic oscillator cut by a wall, and the Dirichlet/Neumann
//! bracketing bounds for the Neumann-window layer.
//!
//! Everything here is solved by Sturm bisection on symmetric tridiagonal
//! matrices, so it shares no code path with the 2D iterative solver.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::discretize::{build_grid, FiberProblem, GridOptions, GridSpec};
use crate::error::{Error, Result};
use crate::model::GeometryKind;

/// Boundary conditions at the two ends of a transverse interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntervalBc {
    /// Dirichlet at both ends.
    DD,
    /// Dirichlet at one end, Neumann at the other.
    DN,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransverseMode {
    pub width: f64,
    pub bc: IntervalBc,
    /// 1-based index. For `DN` the energy is `(π(2m-1)/(2d))²`, i.e. the
    /// half-wave numbering with odd multiples only.
    pub m: u32,
    pub energy: f64,
}

pub fn interval_modes(d: f64, bc: IntervalBc, m_max: u32) -> Result<Vec<TransverseMode>> {
    if !(d.is_finite() && d > 0.0) {
        return Err(Error::invalid(format!("interval width must be positive, got {d}")));
    }
    Ok((1..=m_max)
        .map(|m| {
            let energy = match bc {
                IntervalBc::DD => (PI * m as f64 / d).powi(2),
                IntervalBc::DN => (PI * (2 * m - 1) as f64 / (2.0 * d)).powi(2),
            };
            TransverseMode { width: d, bc, m, energy }
        })
        .collect())
}

/// Discrete transverse eigenvalues of a layer cut into `cells` cells of
/// size `hz`, with the second-order half-cell treatment of a Neumann end.
pub fn discrete_interval_modes(cells: usize, hz: f64, bc: IntervalBc) -> Vec<f64> {
    let n = cells as f64;
    let scale = 2.0 / (hz * hz);
    match bc {
        IntervalBc::DD => (1..cells).map(|m| scale * (1.0 - (PI * m as f64 / n).cos())).collect(),
        IntervalBc::DN => (1..=cells).map(|j| scale * (1.0 - (PI * (2 * j - 1) as f64 / (2.0 * n)).cos())).collect(),
    }
}

/// Symmetric tridiagonal matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTridiagonal {
    pub diag: Vec<f64>,
    /// `off[i]` couples `i` and `i + 1`.
    pub off: Vec<f64>,
}

impl SymTridiagonal {
    pub fn new(diag: Vec<f64>, off: Vec<f64>) -> Result<Self> {
        if diag.is_empty() || off.len() + 1 != diag.len() {
            return Err(Error::invalid("tridiagonal needs n >= 1 diagonal and n - 1 off-diagonal entries"));
        }
        Ok(SymTridiagonal { diag, off })
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// Number of eigenvalues strictly below `x` (Sturm sequence).
    pub fn count_below(&self, x: f64) -> usize {
        let mut count = 0;
        let mut q = 1.0;
        for i in 0..self.diag.len() {
            let coupling = if i == 0 { 0.0 } else { self.off[i - 1] * self.off[i - 1] / q };
            q = self.diag[i] - x - coupling;
            if q == 0.0 {
                q = -f64::EPSILON * (self.diag[i].abs() + x.abs() + 1.0);
            }
            if q < 0.0 {
                count += 1;
            }
        }
        count
    }

    fn gershgorin(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..self.diag.len() {
            let r = if i > 0 { self.off[i - 1].abs() } else { 0.0 } + self.off.get(i).map_or(0.0, |v| v.abs());
            lo = lo.min(self.diag[i] - r);
            hi = hi.max(self.diag[i] + r);
        }
        (lo, hi)
    }

    /// The `count` lowest eigenvalues, ascending, to full precision.
    pub fn lowest(&self, count: usize) -> Vec<f64> {
        let (glo, ghi) = self.gershgorin();
        let count = count.min(self.len());
        let mut out = Vec::with_capacity(count);
        let mut lo = glo;
        for j in 0..count {
            let mut hi = ghi;
            let mut a = lo;
            // `a` has at most j eigenvalues below it; `hi` has more than j.
            for _ in 0..200 {
                let mid = 0.5 * (a + hi);
                if mid <= a || mid >= hi {
                    break;
                }
                if self.count_below(mid) > j {
                    hi = mid;
                } else {
                    a = mid;
                }
            }
            out.push(hi);
            lo = a;
        }
        out
    }
}

/// Condition imposed at a wall that cuts a 1D problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WallBc {
    Dirichlet,
    Neumann,
}

/// Lowest `count` eigenvalues of `-d²/du² + B²u²` on `(-∞, wall)`.
///
/// The half-line is truncated where the lowest states have decayed, the
/// problem is discretized by control volumes on three nested grids, and
/// the Richardson-extrapolated values are returned once two successive
/// extrapolations agree.
pub fn oscillator_cut(b: f64, wall: f64, bc: WallBc, count: usize) -> Result<Vec<f64>> {
    if !(b.is_finite() && b > 0.0) {
        return Err(Error::invalid(format!("field must be positive, got {b}")));
    }
    if !wall.is_finite() {
        return Err(Error::invalid("wall position must be finite"));
    }
    if count == 0 || count > 20 {
        return Err(Error::invalid(format!("count must be in 1..=20, got {count}")));
    }
    let decay = 6.0 / b.sqrt();
    // Energies never exceed the Dirichlet cut at min(wall, 0), which is
    // bounded by the oscillator levels plus the potential at the wall.
    let mut e_top = b * (4 * count + 2) as f64 + (b * wall.min(0.0)).powi(2);
    let mut h = 0.02 / b.sqrt();
    let mut last: Option<Vec<f64>> = None;
    for _ in 0..8 {
        let left = -((e_top + 10.0).sqrt() / b) - decay;
        let left = left.min(wall - decay);
        let levels: Vec<Vec<f64>> =
            (0..3).map(|r| cut_levels(b, wall, bc, count, left, h / (1 << r) as f64)).collect();
        let extrapolate = |c: &[f64], f: &[f64]| -> Vec<f64> { c.iter().zip(f).map(|(c, f)| (4.0 * f - c) / 3.0).collect() };
        let e1 = extrapolate(&levels[0], &levels[1]);
        let e2 = extrapolate(&levels[1], &levels[2]);
        let settled = e1.iter().zip(&e2).all(|(a, b)| (a - b).abs() <= 1e-8 * (1.0 + b.abs()));
        let highest = *e2.last().unwrap();
        let covered = -(highest.max(0.0).sqrt() / b) - decay >= left - 1e-12;
        if settled && covered {
            return Ok(e2);
        }
        if !covered {
            e_top = 2.0 * highest.max(e_top);
        } else {
            h /= 2.0;
        }
        last = Some(e2);
    }
    Err(Error::Unresolved(format!(
        "oscillator cut at wall {wall} did not settle under refinement (last values {:?})",
        last.unwrap_or_default()
    )))
}

fn cut_levels(b: f64, wall: f64, bc: WallBc, count: usize, left: f64, h: f64) -> Vec<f64> {
    // Nodes u_i = wall - i h, i = 0..n, the last one Dirichlet.
    let n = ((wall - left) / h).ceil() as usize;
    let inv_h2 = 1.0 / (h * h);
    let pot = |i: usize| {
        let u = wall - i as f64 * h;
        b * b * u * u
    };
    let first = match bc {
        WallBc::Dirichlet => 1,
        WallBc::Neumann => 0,
    };
    let diag: Vec<f64> = (first..n).map(|i| 2.0 * inv_h2 + pot(i)).collect();
    let mut off = vec![-inv_h2; diag.len() - 1];
    if bc == WallBc::Neumann {
        // Half cell at the wall: mass h/2, coupling 1/h.
        off[0] = -(2f64).sqrt() * inv_h2;
    }
    SymTridiagonal { diag, off }.lowest(count)
}

/// Two-sided bound `lower ≤ λ_k(p) ≤ upper` for the Neumann-window layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BracketBound {
    pub k: usize,
    pub p: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Bracketing bounds for the `k`-th (1-based) eigenvalue of the discrete
/// fiber operator built with the same grid options as the 2D solve.
pub fn bracket_bounds(problem: &FiberProblem, k: usize, opts: &GridOptions) -> Result<BracketBound> {
    if problem.geometry.kind() != GeometryKind::NeumannWindowLayer {
        return Err(Error::invalid("bracketing bounds are defined for the Neumann-window layer only"));
    }
    let grid = build_grid(problem, opts)?;
    discrete_bracket(&grid, k)
}

/// Bracketing on a given kind-1 grid.
///
/// The layer is cut along the column at the window edge on the side the
/// oscillator centre moves towards (`x = -a` for `p ≥ 0`). A Neumann cut
/// drops the couplings across that column and opens the whole interface
/// on the far side; a Dirichlet cut clamps the column and closes the
/// window. Both modifications only remove or add nonnegative terms of the
/// discrete energy form, so by min-max they bound the discrete eigenvalues,
/// and both leave separable pieces. Without a window the grid problem is
/// already separable and both bounds are its exact eigenvalue.
pub fn discrete_bracket(grid: &GridSpec, k: usize) -> Result<BracketBound> {
    if grid.kind != GeometryKind::NeumannWindowLayer {
        return Err(Error::invalid("bracketing bounds are defined for the Neumann-window layer only"));
    }
    if k == 0 {
        return Err(Error::invalid("k is 1-based"));
    }
    let layer = &grid.layers[0];
    let dd = discrete_interval_modes(layer.cells, layer.hz, IntervalBc::DD);
    let dn = discrete_interval_modes(layer.cells, layer.hz, IntervalBc::DN);
    let nx = grid.nx();
    let chain = |cols: std::ops::Range<usize>, neumann_left: bool, neumann_right: bool| -> Vec<f64> {
        if cols.is_empty() {
            return Vec::new();
        }
        let inv_h2 = 1.0 / (grid.hx * grid.hx);
        let len = cols.len();
        let diag: Vec<f64> = cols
            .clone()
            .enumerate()
            .map(|(t, c)| {
                let mut edges = 2.0;
                if t == 0 && neumann_left {
                    edges -= 1.0;
                }
                if t + 1 == len && neumann_right {
                    edges -= 1.0;
                }
                edges * inv_h2 + grid.potential(grid.x(c))
            })
            .collect();
        SymTridiagonal { diag, off: vec![-inv_h2; len - 1] }.lowest(k)
    };
    let kth = |mut sums: Vec<f64>| -> Result<f64> {
        sums.sort_by(f64::total_cmp);
        sums.get(k - 1)
            .copied()
            .ok_or_else(|| Error::invalid(format!("grid resolves fewer than {k} separable levels")))
    };
    let combine = |xs: &[f64], zs: &[f64], out: &mut Vec<f64>| {
        for x in xs {
            for z in zs.iter().take(k) {
                out.push(x + z);
            }
        }
    };

    if grid.interface.is_empty() {
        let mut all = Vec::new();
        combine(&chain(0..nx, false, false), &dd, &mut all);
        let exact = kth(all)?;
        return Ok(BracketBound { k, p: grid.momentum, lower: exact, upper: exact });
    }

    // Columns on the near side of the cut and the cut column itself.
    let ia = (grid.effective_half_window.unwrap_or(0.0) / grid.hx).round() as i64;
    let (near, cut, far, near_is_left) = if grid.momentum >= 0.0 {
        let c = (-ia - grid.ix_lo - 1) as usize;
        (0..c + 1, c, c + 1..nx, true)
    } else {
        let c = (ia - grid.ix_lo - 1) as usize;
        (c..nx, c, 0..c, false)
    };

    // Neumann cut: the cut column stays with the closed side.
    let mut lower = Vec::new();
    combine(&chain(near.clone(), !near_is_left, near_is_left), &dd, &mut lower);
    combine(&chain(far.clone(), near_is_left, !near_is_left), &dn, &mut lower);

    // Dirichlet cut: the cut column is clamped.
    let closed = if near_is_left { 0..cut } else { cut + 1..nx };
    let mut upper = Vec::new();
    combine(&chain(closed, false, false), &dd, &mut upper);
    combine(&chain(far, false, false), &dd, &mut upper);

    Ok(BracketBound { k, p: grid.momentum, lower: kth(lower)?, upper: kth(upper)? })
}

/// Lowest `count` eigenvalues of the grid operator restricted to one layer
/// with its interface closed (Dirichlet): the whole x-chain plus the
/// discrete `DD` modes of that layer. For a symmetric double layer these
/// are exactly the discrete `z`-odd levels.
pub fn closed_layer_levels(grid: &GridSpec, layer: usize, count: usize) -> Result<Vec<f64>> {
    let l = grid
        .layers
        .get(layer)
        .ok_or_else(|| Error::invalid(format!("grid has no layer {layer}")))?;
    let inv_h2 = 1.0 / (grid.hx * grid.hx);
    let nx = grid.nx();
    let diag: Vec<f64> = (0..nx).map(|c| 2.0 * inv_h2 + grid.potential(grid.x(c))).collect();
    let xs = SymTridiagonal::new(diag, vec![-inv_h2; nx - 1])?.lowest(count);
    let zs = discrete_interval_modes(l.cells, l.hz, IntervalBc::DD);
    let mut all: Vec<f64> = xs.iter().flat_map(|x| zs.iter().take(count).map(move |z| x + z)).collect();
    all.sort_by(f64::total_cmp);
    all.truncate(count);
    Ok(all)
}
