//! Lowest eigenpairs of the symmetric pencil `(A, M)`, `M` diagonal.
//!
//! The iterative path runs LOBPCG on `Ã = M^{-1/2} A M^{-1/2}` with the
//! shift-inverted preconditioner `M^{1/2} (A - σM)^{-1} M^{1/2}`, the shift
//! sitting below a certified lower bound of the spectrum. Reported
//! eigenvalues are Rayleigh quotients evaluated through the pencil's energy
//! form; residuals are recomputed independently of the iteration.

mod lobpcg;

use std::cell::{Cell, RefCell};
use std::fmt;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::discretize::{CsrMatrix, FiberMatrix, ShiftedFiberSolver, SkylineCholesky};
use crate::error::{Error, Result};
use crate::model::GeometryKind;

/// Largest dimension accepted by [`dense_reference`].
pub const DENSE_LIMIT: usize = 4000;

pub trait ShiftedSolve {
    /// `u = (A - σM)^{-1} f`.
    fn solve(&self, f: &[f64], u: &mut [f64]);
    fn shift(&self) -> f64;
}

/// Symmetric pencil `(A, diag(M))`.
pub trait Pencil: Sync {
    fn dim(&self) -> usize;
    fn mass(&self) -> &[f64];
    /// `y = A x`.
    fn apply(&self, x: &[f64], y: &mut [f64]);
    /// `vᵀAv`.
    fn energy(&self, v: &[f64]) -> f64 {
        let mut y = vec![0.0; v.len()];
        self.apply(v, &mut y);
        v.iter().zip(&y).map(|(a, b)| a * b).sum()
    }
    /// A value below every eigenvalue.
    fn lower_bound(&self) -> f64;
    fn shifted(&self, sigma: f64) -> Result<Box<dyn ShiftedSolve + '_>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum ShiftStrategy {
    /// `σ = lower_bound - offset`.
    BelowBound { offset: f64 },
    Fixed { sigma: f64 },
}

impl Default for ShiftStrategy {
    fn default() -> Self {
        ShiftStrategy::BelowBound { offset: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenRequest {
    pub count: usize,
    /// When set, `count` is grown until every eigenvalue up to the ceiling
    /// is found; results are truncated to the ceiling.
    #[serde(default)]
    pub ceiling: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    #[serde(default)]
    pub shift: ShiftStrategy,
    /// Extra block columns beyond `count`; `None` picks `max(4, count/2)`.
    #[serde(default)]
    pub guard: Option<usize>,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    0x5eed
}

pub const DEFAULT_TOL: f64 = 1e-10;

impl EigenRequest {
    pub fn new(count: usize) -> Self {
        EigenRequest {
            count,
            ceiling: None,
            tol: DEFAULT_TOL,
            max_iter: 400,
            shift: ShiftStrategy::default(),
            guard: None,
            seed: default_seed(),
        }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_ceiling(mut self, ceiling: f64) -> Self {
        self.ceiling = Some(ceiling);
        self
    }

    pub fn with_guard(mut self, guard: usize) -> Self {
        self.guard = Some(guard);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.count < 1 {
            return Err(Error::config("levels", "at least one eigenpair must be requested"));
        }
        if !(1e-14..=1e-6).contains(&self.tol) {
            return Err(Error::config("solver.tol", format!("tolerance {} outside [1e-14, 1e-6]", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::config("solver.max_iter", "must be positive"));
        }
        Ok(())
    }

    fn block(&self) -> usize {
        self.count + self.guard.unwrap_or((self.count / 2).max(4))
    }
}

#[derive(Clone, Serialize, Deserialize)]
pub struct EigenResult {
    pub values: Vec<f64>,
    /// Eigenvectors normalized to `vᵀMv = 1`, mutually `M`-orthogonal.
    #[serde(skip)]
    pub vectors: Vec<Vec<f64>>,
    /// `‖M^{-1/2}(Av - λMv)‖` for `vᵀMv = 1`.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub operator_applies: usize,
    pub preconditioner_applies: usize,
    pub shift: f64,
    pub converged: bool,
}

impl fmt::Debug for EigenResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EigenResult")
            .field("values", &self.values)
            .field("residuals", &self.residuals)
            .field("iterations", &self.iterations)
            .field("shift", &self.shift)
            .field("converged", &self.converged)
            .finish_non_exhaustive()
    }
}

impl EigenResult {
    pub fn worst_residual(&self) -> f64 {
        self.residuals.iter().cloned().fold(0.0, f64::max)
    }

    /// `max |v_iᵀ M v_j - δ_ij|`.
    pub fn orthogonality_defect(&self, mass: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.vectors.len() {
            for j in 0..=i {
                let ip: f64 = self.vectors[i].iter().zip(&self.vectors[j]).zip(mass).map(|((a, b), m)| a * b * m).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((ip - target).abs());
            }
        }
        worst
    }
}

/// Residual of one pair, in both the symmetrized and the raw norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairResidual {
    pub value: f64,
    /// `‖M^{-1/2}(Av - λMv)‖ / ‖M^{1/2}v‖`.
    pub symmetric: f64,
    /// `‖Av - λMv‖ / ‖v‖`.
    pub raw: f64,
}

impl PairResidual {
    pub fn within(&self, tol: f64) -> bool {
        self.symmetric <= tol * (self.value.abs() + 1.0)
    }
}

pub fn pair_residual(pencil: &dyn Pencil, value: f64, v: &[f64]) -> PairResidual {
    let mass = pencil.mass();
    let mut av = vec![0.0; v.len()];
    pencil.apply(v, &mut av);
    let mut sym = 0.0;
    let mut raw = 0.0;
    let mut vm = 0.0;
    let mut vv = 0.0;
    for i in 0..v.len() {
        let r = av[i] - value * mass[i] * v[i];
        raw += r * r;
        sym += r * r / mass[i];
        vm += mass[i] * v[i] * v[i];
        vv += v[i] * v[i];
    }
    PairResidual { value, symmetric: (sym / vm).sqrt(), raw: (raw / vv).sqrt() }
}

/// Recomputes every pair's residual from the pencil.
pub fn residual_report(pencil: &dyn Pencil, result: &EigenResult) -> Vec<PairResidual> {
    result.values.iter().zip(&result.vectors).map(|(&l, v)| pair_residual(pencil, l, v)).collect()
}

fn factor_with_retry<'a>(pencil: &'a dyn Pencil, strategy: ShiftStrategy) -> Result<Box<dyn ShiftedSolve + 'a>> {
    let mut sigma = match strategy {
        ShiftStrategy::BelowBound { offset } => pencil.lower_bound() - offset,
        ShiftStrategy::Fixed { sigma } => sigma,
    };
    let mut last = None;
    for _ in 0..6 {
        match pencil.shifted(sigma) {
            Ok(s) => return Ok(s),
            Err(e @ Error::NotPositiveDefinite { .. }) => {
                log::debug!("shift {sigma} rejected, lowering");
                last = Some(e);
                sigma -= sigma.abs().max(1.0);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or(Error::NotPositiveDefinite { shift: sigma }))
}

/// The `count` lowest eigenpairs of the pencil.
pub fn smallest_eigenpairs(pencil: &dyn Pencil, request: &EigenRequest) -> Result<EigenResult> {
    request.validate()?;
    let n = pencil.dim();
    if request.count > n / 4 {
        return Err(Error::invalid(format!(
            "requested {} eigenpairs of a pencil of dimension {n}; at most {} allowed",
            request.count,
            n / 4
        )));
    }
    let mut req = *request;
    loop {
        let result = solve_once(pencil, &req)?;
        match req.ceiling {
            Some(c) if result.values.last().is_some_and(|&v| v <= c) && req.count * 2 <= n / 4 => {
                req.count *= 2;
            }
            Some(c) => {
                let keep = result.values.iter().take_while(|&&v| v <= c).count().max(1);
                let mut r = result;
                r.values.truncate(keep);
                r.vectors.truncate(keep);
                r.residuals.truncate(keep);
                return Ok(r);
            }
            None => return Ok(result),
        }
    }
}

fn solve_once(pencil: &dyn Pencil, request: &EigenRequest) -> Result<EigenResult> {
    let n = pencil.dim();
    let mass = pencil.mass();
    let inv_sqrt: Vec<f64> = mass.iter().map(|m| 1.0 / m.sqrt()).collect();
    let sqrt_m: Vec<f64> = mass.iter().map(|m| m.sqrt()).collect();
    let shifted = factor_with_retry(pencil, request.shift)?;
    let sigma = shifted.shift();

    let t_op = Cell::new(Duration::ZERO);
    let t_prec = Cell::new(Duration::ZERO);
    let op_buf = RefCell::new(vec![0.0; n]);
    let prec_buf = RefCell::new(vec![0.0; n]);
    let op = |x: &[f64], y: &mut [f64]| {
        let start = Instant::now();
        let mut t = op_buf.borrow_mut();
        t.iter_mut().zip(x.iter().zip(&inv_sqrt)).for_each(|(t, (a, s))| *t = a * s);
        pencil.apply(&t, y);
        y.iter_mut().zip(&inv_sqrt).for_each(|(v, s)| *v *= s);
        t_op.set(t_op.get() + start.elapsed());
    };
    let prec = |r: &[f64], y: &mut [f64]| {
        let start = Instant::now();
        let mut t = prec_buf.borrow_mut();
        t.iter_mut().zip(r.iter().zip(&sqrt_m)).for_each(|(t, (a, s))| *t = a * s);
        shifted.solve(&t, y);
        y.iter_mut().zip(&sqrt_m).for_each(|(v, s)| *v *= s);
        t_prec.set(t_prec.get() + start.elapsed());
    };
    let started = Instant::now();
    let params = lobpcg::LobpcgParams {
        wanted: request.count,
        block: request.block().min(n),
        tol: request.tol,
        max_iter: request.max_iter,
        seed: request.seed,
    };
    let out = lobpcg::lobpcg(n, &op, &prec, &params);
    log::debug!(
        "lobpcg time {:?}: operator {:?}, preconditioner {:?}",
        started.elapsed(),
        t_op.get(),
        t_prec.get()
    );

    let mut pairs: Vec<(f64, Vec<f64>)> = (0..out.vectors.k)
        .map(|j| {
            let mut v: Vec<f64> = out.vectors.col(j).iter().zip(&inv_sqrt).map(|(a, s)| a * s).collect();
            let nm: f64 = v.iter().zip(mass).map(|(a, m)| m * a * a).sum::<f64>().sqrt();
            v.iter_mut().for_each(|a| *a /= nm);
            (pencil.energy(&v), v)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut result = EigenResult {
        values: pairs.iter().map(|p| p.0).collect(),
        vectors: pairs.into_iter().map(|p| p.1).collect(),
        residuals: Vec::new(),
        iterations: out.iterations,
        operator_applies: out.operator_applies,
        preconditioner_applies: out.preconditioner_applies,
        shift: sigma,
        converged: out.converged,
    };
    result.residuals = residual_report(pencil, &result).iter().map(|r| r.symmetric).collect();
    log::debug!(
        "lobpcg: n={n} k={} iterations={} converged={} residual {:.2e} (internal {:.2e}), lowest ritz {:?}",
        request.count,
        result.iterations,
        result.converged,
        result.worst_residual(),
        out.residuals.iter().cloned().fold(0.0, f64::max),
        out.ritz.first()
    );
    if !out.converged {
        return Err(Error::NotConverged {
            iterations: out.iterations,
            worst_residual: result.worst_residual(),
            partial: Box::new(result),
        });
    }
    Ok(result)
}

/// Full spectrum by a dense symmetric solve; an oracle for small grids.
pub fn dense_reference(pencil: &dyn Pencil) -> Result<EigenResult> {
    let n = pencil.dim();
    if n > DENSE_LIMIT {
        return Err(Error::TooLarge { dim: n, limit: DENSE_LIMIT });
    }
    let mass = pencil.mass();
    let s: Vec<f64> = mass.iter().map(|m| 1.0 / m.sqrt()).collect();
    let mut dense = DMatrix::<f64>::zeros(n, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        pencil.apply(&e, &mut col);
        e[j] = 0.0;
        for i in 0..n {
            dense[(i, j)] = col[i] * s[i] * s[j];
        }
    }
    let dense = (&dense + dense.transpose()) * 0.5;
    let eig = SymmetricEigen::new(dense);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vectors: Vec<Vec<f64>> = order
        .iter()
        .map(|&k| (0..n).map(|i| eig.eigenvectors[(i, k)] * s[i]).collect())
        .collect();
    let mut result = EigenResult {
        values: order.iter().map(|&k| eig.eigenvalues[k]).collect(),
        vectors,
        residuals: Vec::new(),
        iterations: 0,
        operator_applies: n,
        preconditioner_applies: 0,
        shift: f64::NAN,
        converged: true,
    };
    result.residuals = residual_report(pencil, &result).iter().map(|r| r.symmetric).collect();
    Ok(result)
}

/// A generic sparse pencil; shifted solves use an envelope Cholesky.
#[derive(Debug, Clone)]
pub struct CsrPencil {
    pub a: CsrMatrix,
    pub mass: Vec<f64>,
}

impl CsrPencil {
    pub fn new(a: CsrMatrix, mass: Vec<f64>) -> Result<Self> {
        if a.nrows() != mass.len() {
            return Err(Error::invalid("matrix and mass sizes differ"));
        }
        if mass.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::invalid("mass must be positive"));
        }
        Ok(CsrPencil { a, mass })
    }

    pub fn standard(a: CsrMatrix) -> Self {
        let n = a.nrows();
        CsrPencil { a, mass: vec![1.0; n] }
    }
}

struct SkylineShift(SkylineCholesky, f64);

impl ShiftedSolve for SkylineShift {
    fn solve(&self, f: &[f64], u: &mut [f64]) {
        u.copy_from_slice(f);
        self.0.solve(u);
    }

    fn shift(&self) -> f64 {
        self.1
    }
}

impl Pencil for CsrPencil {
    fn dim(&self) -> usize {
        self.mass.len()
    }

    fn mass(&self) -> &[f64] {
        &self.mass
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.a.mul_vec(x, y);
    }

    /// Gershgorin bound of `M^{-1/2} A M^{-1/2}`.
    fn lower_bound(&self) -> f64 {
        (0..self.dim())
            .map(|i| {
                let si = 1.0 / self.mass[i].sqrt();
                let mut d = 0.0;
                let mut off = 0.0;
                for (j, v) in self.a.row(i) {
                    let w = v * si / self.mass[j].sqrt();
                    if i == j {
                        d += w;
                    } else {
                        off += w.abs();
                    }
                }
                d - off
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn shifted(&self, sigma: f64) -> Result<Box<dyn ShiftedSolve + '_>> {
        let extra: Vec<f64> = self.mass.iter().map(|m| -sigma * m).collect();
        let f = SkylineCholesky::factor(&self.a, &extra).map_err(|_| Error::NotPositiveDefinite { shift: sigma })?;
        Ok(Box::new(SkylineShift(f, sigma)))
    }
}

impl ShiftedSolve for ShiftedFiberSolver {
    fn solve(&self, f: &[f64], u: &mut [f64]) {
        ShiftedFiberSolver::solve(self, f, u)
    }

    fn shift(&self) -> f64 {
        ShiftedFiberSolver::shift(self)
    }
}

impl Pencil for FiberMatrix {
    fn dim(&self) -> usize {
        FiberMatrix::dim(self)
    }

    fn mass(&self) -> &[f64] {
        &self.mass
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.a.mul_vec(x, y);
    }

    fn energy(&self, v: &[f64]) -> f64 {
        FiberMatrix::energy(self, v)
    }

    /// Analytic floor of the continuum fiber: the Landau level plus the
    /// lowest transverse level of the widest admissible cross-section.
    fn lower_bound(&self) -> f64 {
        let g = &self.grid;
        let transverse = match g.kind {
            GeometryKind::NeumannWindowLayer => std::f64::consts::PI / (2.0 * g.layers[0].width),
            _ => std::f64::consts::PI / g.layers.iter().map(|l| l.width).sum::<f64>(),
        };
        g.field + transverse * transverse
    }

    fn shifted(&self, sigma: f64) -> Result<Box<dyn ShiftedSolve + '_>> {
        Ok(Box::new(ShiftedFiberSolver::new(&self.grid, sigma)?))
    }
}
