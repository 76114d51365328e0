//! Richardson-type convergence estimates for grid refinement ladders.

use serde::{Deserialize, Serialize};

use crate::discretize::{assemble, build_grid, FiberProblem, GridOptions};
use crate::eigensolve::{smallest_eigenpairs, EigenRequest};
use crate::error::{Error, Result};

/// Nominal order of the control-volume scheme.
pub const NOMINAL_ORDER: f64 = 2.0;

/// Estimate from three values on spacings `h`, `h/r`, `h/r²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RichardsonEstimate {
    /// Observed order `log(|e₁|/|e₂|)/log r`.
    pub order: f64,
    /// Extrapolated limit using the observed order.
    pub extrapolated: f64,
    /// Estimated error of the finest value.
    pub error: f64,
}

pub fn richardson(coarse: f64, mid: f64, fine: f64, ratio: f64) -> Result<RichardsonEstimate> {
    if !(ratio > 1.0) {
        return Err(Error::invalid(format!("refinement ratio must exceed 1, got {ratio}")));
    }
    let d1 = mid - coarse;
    let d2 = fine - mid;
    if d2 == 0.0 || d1 == 0.0 || d1.signum() != d2.signum() {
        return Err(Error::Unresolved(format!(
            "non-monotone ladder {coarse}, {mid}, {fine}: order undefined"
        )));
    }
    let order = (d1 / d2).ln() / ratio.ln();
    let factor = ratio.powf(order) - 1.0;
    let error = d2 / factor;
    Ok(RichardsonEstimate { order, extrapolated: fine + error, error: error.abs() })
}

/// Error of `fine` estimated from one coarser value, assuming `order`.
pub fn two_level_error(coarse: f64, fine: f64, ratio: f64, order: f64) -> f64 {
    (fine - coarse).abs() / (ratio.powf(order) - 1.0)
}

/// Lowest eigenvalues of one fiber on `h, h/2, h/4, …`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderStudy {
    pub problem: FiberProblem,
    pub spacings: Vec<f64>,
    /// `values[r][k]`: level `k` on rung `r`.
    pub values: Vec<Vec<f64>>,
    /// One estimate per level from the three finest rungs.
    pub estimates: Vec<RichardsonEstimate>,
}

impl LadderStudy {
    pub fn orders(&self) -> Vec<f64> {
        self.estimates.iter().map(|e| e.order).collect()
    }
}

/// Solves `problem` on `rungs ≥ 3` successively halved grids.
pub fn ladder(
    problem: &FiberProblem,
    base: &GridOptions,
    count: usize,
    rungs: usize,
    request: &EigenRequest,
) -> Result<LadderStudy> {
    if rungs < 3 {
        return Err(Error::invalid("a ladder needs at least three rungs"));
    }
    let mut spacings = Vec::with_capacity(rungs);
    let mut values = Vec::with_capacity(rungs);
    // The x-spacing of the first rung is halved exactly on later rungs so
    // the window edges stay on nodes of every grid.
    let hx0 = build_grid(problem, base)?.hx;
    for r in 0..rungs {
        let opts = GridOptions { hx: Some(hx0), ..*base }.refined(1 << r);
        let m = assemble(&build_grid(problem, &opts)?)?;
        spacings.push(opts.h);
        let req = EigenRequest { count, ..*request };
        let res = smallest_eigenpairs(&m, &req)?;
        log::info!("ladder rung {r}: h = {:.4e}, dim {}, lowest {:?}", opts.h, m.dim(), res.values);
        values.push(res.values);
    }
    let n = values.len();
    let estimates = (0..count)
        .map(|k| richardson(values[n - 3][k], values[n - 2][k], values[n - 1][k], 2.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(LadderStudy { problem: *problem, spacings, values, estimates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GeometryConfig, PhysicalConfig, Width};
    use std::f64::consts::PI;

    #[test]
    fn exact_power_law_recovers_order() {
        let f = |h: f64| 3.0 + 0.7 * h * h;
        let e = richardson(f(0.4), f(0.2), f(0.1), 2.0).unwrap();
        assert!((e.order - 2.0).abs() < 1e-9);
        assert!((e.extrapolated - 3.0).abs() < 1e-12);
        assert!((e.error - 0.7 * 0.01).abs() < 1e-12);
        assert!((two_level_error(f(0.2), f(0.1), 2.0, 2.0) - 0.007).abs() < 1e-12);
    }

    #[test]
    fn oscillating_ladder_is_unresolved() {
        assert!(richardson(1.0, 1.1, 1.05, 2.0).is_err());
        assert!(richardson(1.0, 1.1, 1.2, 1.0).is_err());
    }

    #[test]
    fn decoupled_ladder_is_second_order() {
        let prob = FiberProblem::new(
            GeometryConfig::DoubleLayer { d1: Width::pi_fraction(1, 1), d2: Width::pi_fraction(1, 2), a: 0.0 },
            PhysicalConfig::new(1.0).unwrap(),
            0.0,
            6.0,
        )
        .unwrap();
        let study = ladder(&prob, &GridOptions::per_unit(16, PI), 3, 3, &EigenRequest::new(3)).unwrap();
        for o in study.orders() {
            assert!((o - 2.0).abs() < 0.3, "order {o}");
        }
    }
}
