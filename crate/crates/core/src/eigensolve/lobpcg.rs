//! Block preconditioned conjugate gradient (LOBPCG) for the lowest
//! eigenpairs of a symmetric operator, with soft locking and an orthonormal
//! `[X, W, P]` Rayleigh–Ritz basis.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Column-major `n × k` block.
#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub n: usize,
    pub k: usize,
    pub data: Vec<f64>,
}

impl Block {
    #[cfg(test)]
    pub fn zeros(n: usize, k: usize) -> Self {
        Block { n, k, data: vec![0.0; n * k] }
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.n..(j + 1) * self.n]
    }

    #[cfg(test)]
    fn truncate(&mut self, k: usize) {
        self.k = k;
        self.data.truncate(self.n * k);
    }
}

/// `C = Aᵀ B` for column-major blocks (`a.k × b.k`, column-major).
pub(crate) fn gram(a: &[f64], ka: usize, b: &[f64], kb: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; ka * kb];
    if ka == 0 || kb == 0 {
        return c;
    }
    // SAFETY: a is n×ka, b is n×kb, c is ka×kb, all column-major and sized
    // exactly for these strides.
    unsafe {
        matrixmultiply::dgemm(
            ka, n, kb, 1.0,
            a.as_ptr(), n as isize, 1,
            b.as_ptr(), 1, n as isize,
            0.0,
            c.as_mut_ptr(), 1, ka as isize,
        );
    }
    c
}

/// `Y = X C` into an existing buffer.
fn combine_into(x: &[f64], kx: usize, n: usize, c: &[f64], ldc: usize, kc: usize, y: &mut [f64]) {
    if kc == 0 {
        return;
    }
    if kx == 0 {
        y[..n * kc].iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    // SAFETY: as in `combine`, with y holding at least n×kc entries.
    unsafe {
        matrixmultiply::dgemm(
            n, kx, kc, 1.0,
            x.as_ptr(), 1, n as isize,
            c.as_ptr(), 1, ldc as isize,
            0.0,
            y.as_mut_ptr(), 1, n as isize,
        );
    }
}

/// `Y -= X C`.
fn subtract_combination(x: &[f64], kx: usize, n: usize, c: &[f64], y: &mut [f64], ky: usize) {
    if kx == 0 || ky == 0 {
        return;
    }
    // SAFETY: x is n×kx, c is kx×ky, y is n×ky, column-major.
    unsafe {
        matrixmultiply::dgemm(
            n, kx, ky, -1.0,
            x.as_ptr(), 1, n as isize,
            c.as_ptr(), 1, kx as isize,
            1.0,
            y.as_mut_ptr(), 1, n as isize,
        );
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Orthonormalizes the `k` columns of `y` (SVQB) in place, dropping
/// numerically dependent ones; returns the surviving column count.
/// `scratch` must hold `n·k` values.
fn svqb_in_place(y: &mut [f64], k: usize, n: usize, scratch: &mut [f64]) -> usize {
    let mut kept = 0;
    for j in 0..k {
        let s = norm(&y[j * n..(j + 1) * n]);
        if s > 0.0 && s.is_finite() {
            let inv = 1.0 / s;
            if kept != j {
                y.copy_within(j * n..(j + 1) * n, kept * n);
            }
            y[kept * n..(kept + 1) * n].iter_mut().for_each(|v| *v *= inv);
            kept += 1;
        }
    }
    let k = kept;
    if k == 0 {
        return 0;
    }
    let g = DMatrix::from_column_slice(k, k, &gram(&y[..n * k], k, &y[..n * k], k, n));
    let g = (&g + g.transpose()) * 0.5;
    let eig = SymmetricEigen::new(g);
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let cols: Vec<usize> = (0..k).filter(|&i| eig.eigenvalues[i] > 1e-13 * top).collect();
    let mut c = vec![0.0; k * cols.len()];
    for (t, &i) in cols.iter().enumerate() {
        let s = 1.0 / eig.eigenvalues[i].sqrt();
        for r in 0..k {
            c[t * k + r] = eig.eigenvectors[(r, i)] * s;
        }
    }
    combine_into(&y[..n * k], k, n, &c, k, cols.len(), scratch);
    y[..n * cols.len()].copy_from_slice(&scratch[..n * cols.len()]);
    cols.len()
}

/// Orthonormalizes the columns (SVQB), dropping numerically dependent ones.
#[cfg(test)]
fn svqb(y: &mut Block) {
    let mut scratch = vec![0.0; y.n * y.k];
    let k = svqb_in_place(&mut y.data, y.k, y.n, &mut scratch);
    y.truncate(k);
}

/// Makes columns `q..q+k` of `basis` orthonormal and orthogonal to the
/// (orthonormal) columns `0..q`; returns how many survive.
fn orthonormalize_tail(basis: &mut [f64], q: usize, k: usize, n: usize, scratch: &mut [f64]) -> usize {
    let (head, tail) = basis.split_at_mut(q * n);
    let tail = &mut tail[..k * n];
    let mut k = k;
    for pass in 0..3 {
        if q > 0 && k > 0 {
            let c = gram(head, q, tail, k, n);
            let worst = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if pass > 0 && worst < 1e-12 {
                break;
            }
            subtract_combination(head, q, n, &c, tail, k);
        } else if pass > 0 {
            break;
        }
        k = svqb_in_place(tail, k, n, scratch);
    }
    k
}

pub(crate) struct LobpcgOutput {
    /// Orthonormal Ritz vectors, lowest first.
    pub vectors: Block,
    pub ritz: Vec<f64>,
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub operator_applies: usize,
    pub preconditioner_applies: usize,
}

pub(crate) struct LobpcgParams {
    pub wanted: usize,
    pub block: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

const CHUNK: usize = 8;

/// Gram–Schmidt of the columns of `p` (length `ns`) against the orthonormal
/// columns of `c` and each other; dependent columns are dropped.
fn small_orthonormalize(c: &[f64], kc: usize, p: &mut Vec<f64>, ns: usize) -> usize {
    let kp = p.len() / ns.max(1);
    let mut out: Vec<f64> = Vec::with_capacity(p.len());
    for j in 0..kp {
        let mut v = p[j * ns..(j + 1) * ns].to_vec();
        let before = norm(&v);
        if before == 0.0 {
            continue;
        }
        for _ in 0..2 {
            for i in 0..kc {
                let u = &c[i * ns..(i + 1) * ns];
                let d = dot(u, &v);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
            for i in 0..out.len() / ns {
                let u = &out[i * ns..(i + 1) * ns];
                let d = dot(u, &v);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let s = norm(&v);
        if s > 1e-10 * before {
            v.iter_mut().for_each(|a| *a /= s);
            out.extend_from_slice(&v);
        }
    }
    *p = out;
    p.len() / ns.max(1)
}

/// Lowest `wanted` eigenpairs of the symmetric operator `op`.
pub(crate) fn lobpcg(
    n: usize,
    op: &dyn Fn(&[f64], &mut [f64]),
    prec: &dyn Fn(&[f64], &mut [f64]),
    params: &LobpcgParams,
) -> LobpcgOutput {
    let mb = params.block.min(n);
    let wanted = params.wanted.min(mb);
    let mut op_count = 0usize;
    let mut prec_count = 0usize;
    let max_cols = 3 * mb;

    // basis = [X | P | W], next = staging for the new [X | P].
    let mut basis = vec![0.0; n * max_cols];
    let mut next = vec![0.0; n * 2 * mb];
    let mut scratch = vec![0.0; n * max_cols.max(CHUNK)];
    let mut ax = vec![0.0; n * mb];

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    {
        let tmp = &mut scratch[..n];
        for j in 0..mb {
            for v in tmp.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            prec(tmp, &mut basis[j * n..(j + 1) * n]);
            prec_count += 1;
        }
    }
    let mut xk = orthonormalize_tail(&mut basis, 0, mb, n, &mut scratch);
    let mut np = 0usize;
    let mut theta = vec![0.0; xk];
    let mut res = vec![f64::INFINITY; xk];
    let mut iterations = 0;
    let mut converged = false;
    let mut tm = [std::time::Duration::ZERO; 4];

    loop {
        let t0 = std::time::Instant::now();
        for j in 0..xk {
            op(&basis[j * n..(j + 1) * n], &mut ax[j * n..(j + 1) * n]);
            op_count += 1;
        }
        // Residuals go straight into the W slot, then get preconditioned.
        let wq = xk + np;
        let mut active = Vec::new();
        for j in 0..xk {
            let (xc, ac) = (&basis[j * n..(j + 1) * n], &ax[j * n..(j + 1) * n]);
            theta[j] = dot(xc, ac);
            let t = theta[j];
            let r = &mut scratch[..n];
            r.iter_mut().zip(ac.iter().zip(xc)).for_each(|(r, (a, v))| *r = a - t * v);
            res[j] = norm(r);
            if res[j] > params.tol * (t.abs() + 1.0) {
                let slot = wq + active.len();
                let (_, w) = basis.split_at_mut(slot * n);
                prec(&scratch[..n], &mut w[..n]);
                prec_count += 1;
                active.push(j);
            }
        }
        log::trace!("lobpcg it {iterations}: theta {:?} res {:?}", &theta[..wanted.min(xk)], &res[..wanted.min(xk)]);
        if active.iter().all(|&j| j >= wanted) {
            converged = true;
            break;
        }
        if iterations >= params.max_iter {
            break;
        }
        iterations += 1;

        tm[0] += t0.elapsed();
        let t0 = std::time::Instant::now();
        let nw = orthonormalize_tail(&mut basis, wq, active.len(), n, &mut scratch);
        tm[1] += t0.elapsed();
        let t0 = std::time::Instant::now();
        let ns = wq + nw;

        // Lower triangle of G = Sᵀ A S, chunk by chunk.
        let mut g = vec![0.0; ns * ns];
        let gx = gram(&basis[..n * xk], xk, &ax[..n * xk], xk, n);
        for q in 0..xk {
            g[q * ns..q * ns + xk].copy_from_slice(&gx[q * xk..(q + 1) * xk]);
        }
        let mut start = xk;
        while start < ns {
            let len = CHUNK.min(ns - start);
            for q in 0..len {
                let src = &basis[(start + q) * n..(start + q + 1) * n];
                op(src, &mut scratch[q * n..(q + 1) * n]);
                op_count += 1;
            }
            let rows = start + len;
            let gc = gram(&basis[..n * rows], rows, &scratch[..n * len], len, n);
            for q in 0..len {
                for r in 0..rows {
                    g[(start + q) * ns + r] = gc[q * rows + r];
                    g[r * ns + start + q] = gc[q * rows + r];
                }
            }
            start += len;
        }
        tm[2] += t0.elapsed();
        let t0 = std::time::Instant::now();
        let gm = DMatrix::from_column_slice(ns, ns, &g);
        let gm = (&gm + gm.transpose()) * 0.5;
        let eig = SymmetricEigen::new(gm);
        let mut order: Vec<usize> = (0..ns).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let keep = mb.min(ns);
        let mut c = vec![0.0; ns * keep];
        for (t, &i) in order.iter().take(keep).enumerate() {
            for row in 0..ns {
                c[t * ns + row] = eig.eigenvectors[(row, i)];
            }
        }
        // Search directions: the non-X part of the active Ritz vectors,
        // made orthonormal to the new X in coefficient space.
        let mut cp = Vec::with_capacity(ns * active.len());
        for &j in &active {
            if j < keep {
                let start = cp.len();
                cp.extend_from_slice(&c[j * ns..(j + 1) * ns]);
                cp[start..start + xk].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let new_np = small_orthonormalize(&c, keep, &mut cp, ns);
        combine_into(&basis[..n * ns], ns, n, &c, ns, keep, &mut next[..n * keep]);
        combine_into(&basis[..n * ns], ns, n, &cp, ns, new_np, &mut next[n * keep..n * (keep + new_np)]);
        basis[..n * (keep + new_np)].copy_from_slice(&next[..n * (keep + new_np)]);
        xk = keep;
        np = new_np;
        if iterations % 10 == 0 {
            let k = orthonormalize_tail(&mut basis, 0, xk, n, &mut scratch);
            if k < xk {
                log::warn!("lobpcg lost {} basis vectors to rounding", xk - k);
                xk = k;
                np = 0;
            } else if np > 0 {
                np = orthonormalize_tail(&mut basis, xk, np, n, &mut scratch);
            }
        }
        theta.resize(xk, 0.0);
        res.resize(xk, f64::INFINITY);
        tm[3] += t0.elapsed();
    }
    log::debug!("lobpcg phases: residual+prec {:?}, orthonormalize {:?}, gram {:?}, update {:?}", tm[0], tm[1], tm[2], tm[3]);

    let k = wanted.min(xk);
    LobpcgOutput {
        vectors: Block { n, k, data: basis[..n * k].to_vec() },
        ritz: theta[..k].to_vec(),
        residuals: res[..k].to_vec(),
        iterations,
        converged,
        operator_applies: op_count,
        preconditioner_applies: prec_count,
    }
}
