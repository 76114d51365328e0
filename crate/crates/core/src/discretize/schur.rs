//! Direct solver for `(A - σM) u = f` on a fiber grid.
//!
//! Each layer block is a tensor product and is diagonalized in `z` by the
//! discrete sine transform, leaving one tridiagonal system in `x` per mode.
//! The open interface nodes couple the layers; they are eliminated through
//! a dense Schur complement built from closed-form entries of the inverse
//! tridiagonals.

use std::f64::consts::PI;
use std::ops::Range;
use std::sync::Mutex;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

use super::grid::GridSpec;

struct LayerFactor {
    offset: usize,
    rows: usize,
    /// `hx/hz`, the coupling of row 1 to the interface.
    link: f64,
    /// Symmetric orthogonal sine matrix, `rows × rows`.
    sine: Vec<f64>,
    /// Off-diagonal `-hz/hx` of every mode tridiagonal.
    off: f64,
    /// Reciprocal forward pivots, mode-major (`m·nx + c`).
    inv_pivot: Vec<f64>,
}

impl LayerFactor {
    /// Solves mode `m` in place.
    fn solve_mode(&self, m: usize, y: &mut [f64]) {
        let nx = y.len();
        let ip = &self.inv_pivot[m * nx..(m + 1) * nx];
        let b = self.off;
        for c in 1..nx {
            y[c] -= b * ip[c - 1] * y[c - 1];
        }
        y[nx - 1] *= ip[nx - 1];
        for c in (0..nx - 1).rev() {
            y[c] = (y[c] - b * y[c + 1]) * ip[c];
        }
    }
}

pub struct ShiftedFiberSolver {
    sigma: f64,
    nx: usize,
    layers: Vec<LayerFactor>,
    interface: Range<usize>,
    interface_offset: usize,
    schur: Option<Cholesky<f64, Dyn>>,
    /// Per-layer spectral buffers reused across solves.
    scratch: Mutex<Vec<Vec<f64>>>,
}

fn gemm(m: usize, k: usize, n: usize, a: (&[f64], isize, isize), b: (&[f64], isize, isize), c: (&mut [f64], isize, isize)) {
    // SAFETY: callers pass buffers of at least the strided extents implied
    // by (m, k, n) and the strides; matrixmultiply reads and writes only
    // inside those extents.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.0.as_ptr(), a.1, a.2, b.0.as_ptr(), b.1, b.2, 0.0, c.0.as_mut_ptr(), c.1, c.2);
    }
}

impl ShiftedFiberSolver {
    pub fn new(grid: &GridSpec, sigma: f64) -> Result<Self> {
        let nx = grid.nx();
        let hx = grid.hx;
        let not_pd = || Error::NotPositiveDefinite { shift: sigma };
        let pot: Vec<f64> = (0..nx).map(|c| grid.potential(grid.x(c)) - sigma).collect();
        let iface = grid.interface.clone();
        let ni = iface.len();
        let mut schur = DMatrix::<f64>::zeros(ni, ni);

        // K_II
        for (r, c) in iface.clone().enumerate() {
            let mut diag = 0.0;
            let mut off = 0.0;
            for l in &grid.layers {
                diag += l.hz / hx + hx / l.hz + 0.5 * hx * l.hz * pot[c];
                off += 0.5 * l.hz / hx;
            }
            schur[(r, r)] = diag;
            if r + 1 < ni {
                schur[(r, r + 1)] = -off;
                schur[(r + 1, r)] = -off;
            }
        }

        let mut layers = Vec::with_capacity(grid.layers.len());
        let mut eps = vec![0.0; nx];
        for l in &grid.layers {
            let rows = l.rows();
            let n = l.cells as f64;
            let norm = (2.0 / n).sqrt();
            let mut sine = vec![0.0; rows * rows];
            for j in 0..rows {
                for m in 0..rows {
                    sine[j * rows + m] = norm * (PI * ((j + 1) * (m + 1)) as f64 / n).sin();
                }
            }
            let b = -l.hz / hx;
            let link = hx / l.hz;
            let mut inv_pivot = vec![0.0; rows * nx];
            for m in 0..rows {
                let mu = 2.0 - 2.0 * (PI * (m + 1) as f64 / n).cos();
                let diag = |c: usize| 2.0 * l.hz / hx + hx * l.hz * pot[c] + link * mu;
                let ip = &mut inv_pivot[m * nx..(m + 1) * nx];
                let mut delta = diag(0);
                for c in 0..nx {
                    if c > 0 {
                        delta = diag(c) - b * b * ip[c - 1];
                    }
                    if !(delta > 0.0) {
                        return Err(not_pd());
                    }
                    ip[c] = 1.0 / delta;
                }
                if ni == 0 {
                    continue;
                }
                // Backward pivots only over the window and to its right.
                eps[nx - 1] = diag(nx - 1);
                for c in (iface.start..nx - 1).rev() {
                    eps[c] = diag(c) - b * b / eps[c + 1];
                }
                let w = link * link * sine[m] * sine[m];
                for (rj, j) in iface.clone().enumerate() {
                    let delta_j = 1.0 / ip[j];
                    let mut g = w / (delta_j + eps[j] - diag(j));
                    schur[(rj, rj)] -= g;
                    for (ri, i) in iface.clone().enumerate().take(rj).rev() {
                        g *= -b * ip[i];
                        if g == 0.0 {
                            break;
                        }
                        schur[(ri, rj)] -= g;
                        schur[(rj, ri)] -= g;
                    }
                }
            }
            layers.push(LayerFactor { offset: l.offset, rows, link, sine, off: b, inv_pivot });
        }

        let schur = if ni > 0 { Some(Cholesky::new(schur).ok_or_else(not_pd)?) } else { None };
        Ok(ShiftedFiberSolver { sigma, nx, layers, interface: iface, interface_offset: grid.interface_offset(), schur, scratch: Mutex::new(Vec::new()) })
    }

    pub fn shift(&self) -> f64 {
        self.sigma
    }

    pub fn dim(&self) -> usize {
        self.interface_offset + self.interface.len()
    }

    /// `u = (A - σM)^{-1} f`.
    pub fn solve(&self, f: &[f64], u: &mut [f64]) {
        let nx = self.nx;
        // Concurrent callers fall back to fresh buffers.
        let mut spectral = self.scratch.try_lock().map(|mut s| std::mem::take(&mut *s)).unwrap_or_default();
        spectral.resize_with(self.layers.len(), Vec::new);
        for (l, y) in self.layers.iter().zip(spectral.iter_mut()) {
            let rows = l.rows;
            let block = &f[l.offset..l.offset + rows * nx];
            y.resize(nx * rows, 0.0);
            gemm(nx, rows, rows, (block, rows as isize, 1), (&l.sine, rows as isize, 1), (y, 1, nx as isize));
            for m in 0..rows {
                l.solve_mode(m, &mut y[m * nx..(m + 1) * nx]);
            }
        }

        if let Some(chol) = &self.schur {
            let ni = self.interface.len();
            let mut g = DVector::from_column_slice(&f[self.interface_offset..self.interface_offset + ni]);
            for (l, y) in self.layers.iter().zip(&spectral) {
                for (r, c) in self.interface.clone().enumerate() {
                    let mut row1 = 0.0;
                    for m in 0..l.rows {
                        row1 += l.sine[m] * y[m * nx + c];
                    }
                    g[r] += l.link * row1;
                }
            }
            chol.solve_mut(&mut g);
            let mut corr = vec![0.0; nx];
            for (l, y) in self.layers.iter().zip(spectral.iter_mut()) {
                for m in 0..l.rows {
                    corr.iter_mut().for_each(|v| *v = 0.0);
                    let s = l.sine[m] * l.link;
                    for (r, c) in self.interface.clone().enumerate() {
                        corr[c] = s * g[r];
                    }
                    l.solve_mode(m, &mut corr);
                    for (yc, cc) in y[m * nx..(m + 1) * nx].iter_mut().zip(&corr) {
                        *yc += cc;
                    }
                }
            }
            u[self.interface_offset..self.interface_offset + ni].copy_from_slice(g.as_slice());
        }

        for (l, y) in self.layers.iter().zip(&spectral) {
            let rows = l.rows;
            let out = &mut u[l.offset..l.offset + rows * nx];
            gemm(rows, rows, nx, (&l.sine, rows as isize, 1), (y, nx as isize, 1), (out, 1, rows as isize));
        }
        if let Ok(mut s) = self.scratch.try_lock() {
            *s = spectral;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::assemble::assemble;
    use crate::discretize::grid::{build_grid, FiberProblem, GridOptions};
    use crate::discretize::sparse::SkylineCholesky;
    use crate::model::{GeometryConfig, PhysicalConfig, Width};

    fn check(geometry: GeometryConfig, b: f64, p: f64, h: f64, sigma: f64) {
        let prob = FiberProblem::new(geometry, PhysicalConfig::new(b).unwrap(), p, 6.0).unwrap();
        let grid = build_grid(&prob, &GridOptions::new(h).with_energy_margin(0.0).with_decay(2.0)).unwrap();
        let m = assemble(&grid).unwrap();
        let solver = ShiftedFiberSolver::new(&grid, sigma).unwrap();
        let extra: Vec<f64> = m.mass.iter().map(|w| -sigma * w).collect();
        let direct = SkylineCholesky::factor(&m.a, &extra).unwrap();
        let n = m.dim();
        let f: Vec<f64> = (0..n).map(|i| ((i * 7919) % 113) as f64 / 113.0 - 0.4).collect();
        let mut expect = f.clone();
        direct.solve(&mut expect);
        let mut got = vec![0.0; n];
        solver.solve(&f, &mut got);
        let scale = expect.iter().fold(0.0f64, |s, v| s.max(v.abs()));
        for i in 0..n {
            assert!((got[i] - expect[i]).abs() < 1e-10 * scale, "{i}: {} vs {}", got[i], expect[i]);
        }
    }

    #[test]
    fn matches_direct_factorization_all_kinds() {
        let d = Width::pi_fraction(1, 2);
        check(GeometryConfig::NeumannWindowLayer { d, a: 0.6 }, 1.0, 0.3, 0.15, 0.5);
        check(GeometryConfig::NeumannWindowLayer { d, a: 0.0 }, 1.0, -1.0, 0.15, 0.5);
        check(
            GeometryConfig::DoubleLayer { d1: Width::integer(2), d2: Width::integer(1), a: 0.5 },
            1.0,
            0.7,
            0.12,
            1.0,
        );
        check(
            GeometryConfig::DoubleLayer { d1: Width::integer(1), d2: Width::tagged(1.279), a: 0.45 },
            2.0,
            -0.5,
            0.12,
            1.5,
        );
        check(GeometryConfig::OneSidedBarrier { d1: Width::pi_fraction(3, 5), d2: Width::pi_fraction(2, 5) }, 4.0, 2.0, 0.13, 3.0);
    }

    #[test]
    fn shift_above_spectrum_is_rejected() {
        let prob = FiberProblem::new(
            GeometryConfig::NeumannWindowLayer { d: Width::pi_fraction(1, 1), a: 1.0 },
            PhysicalConfig::new(1.0).unwrap(),
            0.0,
            5.0,
        )
        .unwrap();
        let grid = build_grid(&prob, &GridOptions::per_unit(16, PI)).unwrap();
        assert!(matches!(ShiftedFiberSolver::new(&grid, 50.0), Err(Error::NotPositiveDefinite { .. })));
    }
}
