use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

use super::grid::{FiberProblem, GridSpec, NodeClass};
use super::sparse::CsrMatrix;

/// Discrete fiber operator: the pencil `(A, diag(M))` of the control-volume
/// scheme, plus the exact diagonal excess `shunt` of `A` over its couplings.
///
/// `vᵀAv = Σ shunt_i v_i² + Σ_{i<j} (-A_ij)(v_i - v_j)²`, which evaluates
/// Rayleigh quotients without the cancellation of `vᵀ(Av)`.
#[derive(Debug, Clone)]
pub struct FiberMatrix {
    pub grid: GridSpec,
    pub a: CsrMatrix,
    pub mass: Vec<f64>,
    pub shunt: Vec<f64>,
}

struct RowBuilder {
    entries: Vec<(usize, f64)>,
    diag: f64,
    shunt: f64,
}

impl RowBuilder {
    fn new(potential_part: f64) -> Self {
        RowBuilder { entries: Vec::with_capacity(5), diag: potential_part, shunt: potential_part }
    }

    fn link(&mut self, other: Option<usize>, w: f64) {
        self.diag += w;
        match other {
            Some(j) => self.entries.push((j, -w)),
            None => self.shunt += w,
        }
    }

    fn finish(mut self, i: usize) -> (Vec<(usize, f64)>, f64) {
        self.entries.push((i, self.diag));
        (self.entries, self.shunt)
    }
}

pub fn assemble(grid: &GridSpec) -> Result<FiberMatrix> {
    let n = grid.dim();
    let nx = grid.nx();
    let hx = grid.hx;
    let mut rows = vec![Vec::new(); n];
    let mut mass = vec![0.0; n];
    let mut shunt = vec![0.0; n];

    for (li, l) in grid.layers.iter().enumerate() {
        let hz = l.hz;
        for c in 0..nx {
            let v = grid.potential(grid.x(c));
            for j in 1..l.cells {
                let i = grid.layer_index(li, c, j);
                let m = hx * hz;
                let mut r = RowBuilder::new(m * v);
                r.link(c.checked_sub(1).map(|cl| grid.layer_index(li, cl, j)), hz / hx);
                r.link((c + 1 < nx).then(|| grid.layer_index(li, c + 1, j)), hz / hx);
                let below = if j == 1 { grid.interface_index(c) } else { Some(grid.layer_index(li, c, j - 1)) };
                r.link(below, hx / hz);
                r.link((j + 1 < l.cells).then(|| grid.layer_index(li, c, j + 1)), hx / hz);
                let (row, s) = r.finish(i);
                rows[i] = row;
                mass[i] = m;
                shunt[i] = s;
            }
        }
    }

    for c in grid.interface.clone() {
        let i = grid.interface_index(c).ok_or_else(|| Error::Assembly(format!("column {c} lost its interface node")))?;
        let v = grid.potential(grid.x(c));
        let m: f64 = grid.layers.iter().map(|l| 0.5 * hx * l.hz).sum();
        let half: f64 = grid.layers.iter().map(|l| 0.5 * l.hz).sum();
        let mut r = RowBuilder::new(m * v);
        r.link(c.checked_sub(1).and_then(|cl| grid.interface_index(cl)), half / hx);
        r.link(grid.interface_index(c + 1), half / hx);
        for (li, l) in grid.layers.iter().enumerate() {
            r.link(Some(grid.layer_index(li, c, 1)), hx / l.hz);
        }
        let (row, s) = r.finish(i);
        rows[i] = row;
        mass[i] = m;
        shunt[i] = s;
    }

    if let Some(i) = mass.iter().position(|m| !(*m > 0.0)) {
        return Err(Error::Assembly(format!("unknown {i} has no control volume")));
    }
    Ok(FiberMatrix { grid: grid.clone(), a: CsrMatrix::from_rows(rows), mass, shunt })
}

/// Assembles the fiber problem on a freshly built grid.
pub fn assemble_problem(problem: &FiberProblem, opts: &super::grid::GridOptions) -> Result<FiberMatrix> {
    assemble(&super::grid::build_grid(problem, opts)?)
}

impl FiberMatrix {
    pub fn dim(&self) -> usize {
        self.mass.len()
    }

    /// `vᵀAv` through the stable energy form.
    pub fn energy(&self, v: &[f64]) -> f64 {
        self.a.energy_with_shunt(&self.shunt, v)
    }

    pub fn mass_norm_sq(&self, v: &[f64]) -> f64 {
        v.iter().zip(&self.mass).map(|(x, m)| m * x * x).sum()
    }

    /// Rayleigh quotient `vᵀAv / vᵀMv`.
    pub fn rayleigh(&self, v: &[f64]) -> f64 {
        self.energy(v) / self.mass_norm_sq(v)
    }

    /// Permutation taking unknown `i` to its image under `x -> -x`.
    pub fn mirror_permutation(&self) -> Result<Vec<usize>> {
        let g = &self.grid;
        let Some(image) = g.mirrored() else {
            return Err(Error::invalid(format!("{:?} cross-section is not symmetric under x -> -x", g.kind)));
        };
        let nx = g.nx();
        let mut perm = vec![0; self.dim()];
        for (li, l) in g.layers.iter().enumerate() {
            for c in 0..nx {
                for j in 1..l.cells {
                    perm[g.layer_index(li, c, j)] = g.layer_index(li, nx - 1 - c, j);
                }
            }
        }
        for c in g.interface.clone() {
            let target = image
                .interface_index(nx - 1 - c)
                .ok_or_else(|| Error::Assembly(format!("interface column {c} has no mirror image")))?;
            perm[g.interface_index(c).unwrap()] = target;
        }
        Ok(perm)
    }

    /// Vector `v` reflected in `x`, living on the grid at momentum `-p`.
    pub fn mirror_vector(&self, v: &[f64]) -> Result<Vec<f64>> {
        let perm = self.mirror_permutation()?;
        let mut out = vec![0.0; v.len()];
        for (i, &pi) in perm.iter().enumerate() {
            out[pi] = v[i];
        }
        Ok(out)
    }

    pub fn node_table(&self) -> Vec<(f64, f64, NodeClass)> {
        self.grid.unknown_nodes()
    }

    pub fn write_coordinate(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "% {} {} {}", self.dim(), self.dim(), self.a.nnz())?;
        for (i, j, v) in self.a.triplets() {
            writeln!(w, "{} {} {:.16e}", i + 1, j + 1, v)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_node_map(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "index,x,z,class,mass")?;
        for (idx, x, z, class) in self.grid.all_nodes() {
            match idx {
                Some(i) => writeln!(w, "{i},{x:.16e},{z:.16e},{},{:.16e}", class.as_str(), self.mass[i])?,
                None => writeln!(w, ",{x:.16e},{z:.16e},{},", class.as_str())?,
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// The same operator at momentum `-p` on the reflected grid.
pub fn mirror_x(matrix: &FiberMatrix) -> Result<FiberMatrix> {
    let perm = matrix.mirror_permutation()?;
    let grid = matrix.grid.mirrored().expect("checked by mirror_permutation");
    let mut mass = vec![0.0; matrix.dim()];
    let mut shunt = vec![0.0; matrix.dim()];
    for (i, &pi) in perm.iter().enumerate() {
        mass[pi] = matrix.mass[i];
        shunt[pi] = matrix.shunt[i];
    }
    Ok(FiberMatrix { grid, a: matrix.a.permuted(&perm), mass, shunt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::grid::{build_grid, GridOptions};
    use crate::model::{GeometryConfig, PhysicalConfig, Width};
    use nalgebra::{DMatrix, SymmetricEigen};
    use std::f64::consts::PI;

    fn problem(geometry: GeometryConfig, p: f64) -> FiberProblem {
        FiberProblem::new(geometry, PhysicalConfig::new(1.0).unwrap(), p, 8.0).unwrap()
    }

    fn kind1(a: f64) -> GeometryConfig {
        GeometryConfig::NeumannWindowLayer { d: Width::pi_fraction(1, 1), a }
    }

    fn kind2(a: f64) -> GeometryConfig {
        GeometryConfig::DoubleLayer { d1: Width::integer(2), d2: Width::integer(1), a }
    }

    #[test]
    fn symmetric_positive_mass_and_potential_diagonal() {
        for g in [kind1(1.0), kind2(1.0), GeometryConfig::OneSidedBarrier { d1: Width::integer(1), d2: Width::integer(1) }] {
            let m = assemble_problem(&problem(g, 0.7), &GridOptions::new(0.1)).unwrap();
            assert_eq!(m.a.asymmetry(), 0.0);
            assert!(m.mass.iter().all(|&v| v > 0.0));
            let nodes = m.node_table();
            for (i, &(x, _, _)) in nodes.iter().enumerate() {
                let v = (0.7 + x).powi(2);
                assert!(m.a.get(i, i) >= v * m.mass[i]);
                // shunt is the potential term plus eliminated couplings
                assert!(m.shunt[i] >= v * m.mass[i] * (1.0 - 1e-15));
            }
        }
    }

    #[test]
    fn shunt_equals_row_sum() {
        let m = assemble_problem(&problem(kind2(1.0), -0.4), &GridOptions::new(0.1)).unwrap();
        for (s, r) in m.shunt.iter().zip(m.a.row_sums()) {
            assert!((s - r).abs() <= 1e-10 * s.abs().max(1.0));
        }
    }

    #[test]
    fn closed_window_decouples_layers() {
        let m = assemble_problem(&problem(kind2(0.0), 0.0), &GridOptions::new(0.1)).unwrap();
        let split = m.grid.layers[1].offset;
        assert!(m.grid.interface.is_empty());
        assert!(!m.a.couples(|i| i < split, |j| j >= split));
        let open = assemble_problem(&problem(kind2(1.0), 0.0), &GridOptions::new(0.1)).unwrap();
        let split = open.grid.layers[1].offset;
        let top = open.grid.interface_offset();
        assert!(open.a.couples(|i| i < split, |j| j >= top));
        assert!(open.a.couples(|i| i >= split && i < top, |j| j >= top));
    }

    #[test]
    fn transverse_slice_matches_discrete_sine_spectrum() {
        // one column of a layer block is the Dirichlet chain on (0, d)
        let m = assemble_problem(&problem(kind1(0.0), 0.0), &GridOptions::per_unit(24, PI)).unwrap();
        let l = m.grid.layers[0];
        let c = m.grid.nx() / 2;
        let rows = l.rows();
        let idx: Vec<usize> = (1..l.cells).map(|j| m.grid.layer_index(0, c, j)).collect();
        let hx = m.grid.hx;
        let block = DMatrix::from_fn(rows, rows, |r, s| {
            let v = m.a.get(idx[r], idx[s]);
            // strip the x-coupling and potential so only -d²/dz² remains
            if r == s {
                (v - 2.0 * l.hz / hx - m.grid.potential(m.grid.x(c)) * hx * l.hz) / (hx * l.hz)
            } else {
                v / (hx * l.hz)
            }
        });
        let mut ev: Vec<f64> = SymmetricEigen::new(block).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        let h = l.hz;
        for (k, e) in ev.iter().enumerate() {
            let exact = 2.0 / (h * h) * (1.0 - (PI * (k + 1) as f64 * h / PI).cos());
            assert!((e - exact).abs() < 1e-9 * exact, "{k}: {e} vs {exact}");
        }
    }

    #[test]
    fn mirror_matches_opposite_momentum() {
        for g in [kind1(1.0), kind2(0.5)] {
            let opts = GridOptions::new(0.1);
            let m = assemble_problem(&problem(g, 2.0), &opts).unwrap();
            let neg = assemble_problem(&problem(g, -2.0), &opts).unwrap();
            let mir = mirror_x(&m).unwrap();
            assert_eq!(mir.dim(), neg.dim());
            for (i, j, v) in neg.a.triplets() {
                assert!((mir.a.get(i, j) - v).abs() <= 1e-12 * v.abs().max(1.0), "({i},{j})");
            }
            assert_eq!(mir.a.nnz(), neg.a.nnz());
            for i in 0..neg.dim() {
                assert!((mir.mass[i] - neg.mass[i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mirror_refused_for_one_sided_barrier() {
        let g = GeometryConfig::OneSidedBarrier { d1: Width::integer(1), d2: Width::integer(1) };
        let m = assemble_problem(&problem(g, 0.0), &GridOptions::new(0.1)).unwrap();
        assert!(mirror_x(&m).is_err());
    }

    #[test]
    fn mirror_at_zero_momentum_preserves_spectrum() {
        let m = assemble_problem(&problem(kind1(1.0), 0.0), &GridOptions::per_unit(8, PI).with_energy_margin(0.0)).unwrap();
        let mir = mirror_x(&m).unwrap();
        let dense = |f: &FiberMatrix| {
            let n = f.dim();
            let s: Vec<f64> = f.mass.iter().map(|m| 1.0 / m.sqrt()).collect();
            let a = DMatrix::from_fn(n, n, |i, j| f.a.get(i, j) * s[i] * s[j]);
            let mut e: Vec<f64> = SymmetricEigen::new(a).eigenvalues.iter().copied().collect();
            e.sort_by(f64::total_cmp);
            e
        };
        for (a, b) in dense(&m).iter().zip(dense(&mir)) {
            assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn dumps_are_written() {
        let m = assemble_problem(&problem(kind1(1.0), 0.0), &GridOptions::per_unit(8, PI)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.write_coordinate(&dir.path().join("a.mtx")).unwrap();
        m.write_node_map(&dir.path().join("nodes.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("a.mtx")).unwrap();
        assert_eq!(text.lines().count(), m.a.nnz() + 1);
        let nodes = std::fs::read_to_string(dir.path().join("nodes.csv")).unwrap();
        assert!(nodes.contains("neumann_window"));
        assert!(nodes.contains("dirichlet"));
    }

    #[test]
    fn refined_grid_is_finer() {
        let p = problem(kind1(1.0), 0.0);
        let coarse = build_grid(&p, &GridOptions::per_unit(16, PI)).unwrap();
        let fine = build_grid(&p, &GridOptions::per_unit(16, PI).with_hx(coarse.hx).refined(2)).unwrap();
        assert_eq!(fine.layers[0].cells, 2 * coarse.layers[0].cells);
        assert!((coarse.hx / fine.hx - 2.0).abs() < 1e-12);
    }
}
