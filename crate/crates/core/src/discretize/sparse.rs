//! Compressed-row storage and a skyline Cholesky for small generic pencils.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CsrMatrix {
    nrows: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from per-row `(col, value)` lists; duplicate columns are summed.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let nrows = rows.len();
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            for (c, v) in row {
                if col_idx.len() > *row_ptr.last().unwrap() && *col_idx.last().unwrap() == c {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix { nrows, row_ptr, col_idx, values }
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        Self::from_rows(
            rows.iter()
                .map(|r| r.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(c, v)| (c, *v)).collect())
                .collect(),
        )
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[r.clone()].binary_search(&j) {
            Ok(p) => self.values[r.start + p],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.values[k] * x[self.col_idx[k]];
            }
            *yi = s;
        }
    }

    /// `max |A_ij - A_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// True if an off-diagonal entry couples rows in `a` with rows in `b`.
    pub fn couples(&self, a: impl Fn(usize) -> bool, b: impl Fn(usize) -> bool) -> bool {
        (0..self.nrows).any(|i| a(i) && self.row(i).any(|(j, v)| j != i && v != 0.0 && b(j)))
    }

    /// `vᵀAv` as `Σ shunt_i v_i² + Σ_{i<j} (-A_ij)(v_i - v_j)²`.
    pub fn energy_with_shunt(&self, shunt: &[f64], v: &[f64]) -> f64 {
        let mut e = 0.0;
        for i in 0..self.nrows {
            e += shunt[i] * v[i] * v[i];
            for (j, a) in self.row(i) {
                if j > i {
                    let d = v[i] - v[j];
                    e -= a * d * d;
                }
            }
        }
        e
    }

    /// Row sums, i.e. the diagonal excess over the off-diagonal couplings.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.nrows).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    /// Permuted copy `B[perm[i], perm[j]] = A[i, j]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut rows = vec![Vec::new(); self.nrows];
        for i in 0..self.nrows {
            rows[perm[i]] = self.row(i).map(|(j, v)| (perm[j], v)).collect();
        }
        Self::from_rows(rows)
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }
}

/// Envelope Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct SkylineCholesky {
    first: Vec<usize>,
    start: Vec<usize>,
    data: Vec<f64>,
}

impl SkylineCholesky {
    /// Factors `A + diag(extra)`; fails if a pivot is not positive.
    pub fn factor(a: &CsrMatrix, extra: &[f64]) -> Result<Self> {
        let n = a.nrows();
        let first: Vec<usize> = (0..n).map(|i| a.row(i).map(|(j, _)| j).min().unwrap_or(i).min(i)).collect();
        let mut start = Vec::with_capacity(n + 1);
        start.push(0);
        for i in 0..n {
            start.push(start[i] + (i - first[i] + 1));
        }
        let mut data = vec![0.0; start[n]];
        for i in 0..n {
            for (j, v) in a.row(i) {
                if j <= i {
                    data[start[i] + j - first[i]] += v;
                }
            }
            data[start[i] + i - first[i]] += extra[i];
        }
        for i in 0..n {
            for j in first[i]..=i {
                let k0 = first[i].max(first[j]);
                let mut s = data[start[i] + j - first[i]];
                for k in k0..j {
                    s -= data[start[i] + k - first[i]] * data[start[j] + k - first[j]];
                }
                if j < i {
                    data[start[i] + j - first[i]] = s / data[start[j] + j - first[j]];
                } else {
                    if !(s > 0.0) {
                        return Err(Error::NotPositiveDefinite { shift: f64::NAN });
                    }
                    data[start[i] + i - first[i]] = s.sqrt();
                }
            }
        }
        Ok(SkylineCholesky { first, start, data })
    }

    pub fn solve(&self, b: &mut [f64]) {
        let n = self.first.len();
        let at = |i: usize, j: usize| self.data[self.start[i] + j - self.first[i]];
        for i in 0..n {
            let mut s = b[i];
            for k in self.first[i]..i {
                s -= at(i, k) * b[k];
            }
            b[i] = s / at(i, i);
        }
        for i in (0..n).rev() {
            b[i] /= at(i, i);
            let bi = b[i];
            for k in self.first[i]..i {
                b[k] -= at(i, k) * bi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CsrMatrix {
        CsrMatrix::from_dense(&[
            vec![4.0, -1.0, 0.0, -1.0],
            vec![-1.0, 4.0, -1.0, 0.0],
            vec![0.0, -1.0, 4.0, -1.0],
            vec![-1.0, 0.0, -1.0, 4.0],
        ])
    }

    #[test]
    fn csr_basics() {
        let a = sample();
        assert_eq!(a.nnz(), 12);
        assert_eq!(a.get(0, 3), -1.0);
        assert_eq!(a.get(0, 2), 0.0);
        assert_eq!(a.asymmetry(), 0.0);
        let mut y = vec![0.0; 4];
        a.mul_vec(&[1.0, 1.0, 1.0, 1.0], &mut y);
        assert_eq!(y, vec![2.0; 4]);
    }

    #[test]
    fn energy_matches_quadratic_form() {
        let a = sample();
        let v = [0.3, -1.2, 0.7, 2.0];
        let mut av = vec![0.0; 4];
        a.mul_vec(&v, &mut av);
        let direct: f64 = v.iter().zip(&av).map(|(x, y)| x * y).sum();
        let e = a.energy_with_shunt(&a.row_sums(), &v);
        assert!((direct - e).abs() < 1e-12);
    }

    #[test]
    fn skyline_solves() {
        let a = sample();
        let f = SkylineCholesky::factor(&a, &[0.5; 4]).unwrap();
        let mut b = vec![1.0, 2.0, 3.0, 4.0];
        let rhs = b.clone();
        f.solve(&mut b);
        let mut back = vec![0.0; 4];
        a.mul_vec(&b, &mut back);
        for i in 0..4 {
            assert!((back[i] + 0.5 * b[i] - rhs[i]).abs() < 1e-12);
        }
        assert!(SkylineCholesky::factor(&a, &[-10.0; 4]).is_err());
    }

    #[test]
    fn permutation_roundtrip() {
        let a = sample();
        let perm = [2, 0, 3, 1];
        let p = a.permuted(&perm);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(p.get(perm[i], perm[j]), a.get(i, j));
            }
        }
    }
}
