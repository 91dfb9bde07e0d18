//! Compressed sparse rows and a banded LU factorization.
//!
//! The finite-volume matrices on tensor grids are banded with half-bandwidth
//! equal to the node stride along the last axis, so an unpivoted banded LU is
//! a direct solver for both 1D and 2D grids. The shifted operators that get
//! factored (`I − c·A` with `A` the forward generator) are column diagonally
//! dominant M-matrices, for which elimination without pivoting is stable.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is singular: pivot {pivot:e} at row {row}")]
    Singular { row: usize, pivot: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds an `n × n` matrix, summing duplicate entries.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> CsrMatrix {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < n && c < n, "triplet ({r}, {c}) outside {n}x{n}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        CsrMatrix {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(j, _)| j == c).map_or(0.0, |(_, v)| v)
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    pub fn transpose(&self) -> CsrMatrix {
        CsrMatrix::from_triplets(self.n, self.triplets().map(|(r, c, v)| (c, r, v)).collect())
    }

    /// `diag(left) · self · diag(right)`.
    pub fn scale(&self, left: &[f64], right: &[f64]) -> CsrMatrix {
        let mut out = self.clone();
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out.values[k] *= left[r] * right[self.col_idx[k]];
            }
        }
        out
    }

    /// `alpha · I + beta · self`.
    pub fn shifted(&self, alpha: f64, beta: f64) -> CsrMatrix {
        let mut t: Vec<_> = self.triplets().map(|(r, c, v)| (r, c, beta * v)).collect();
        t.extend((0..self.n).map(|i| (i, i, alpha)));
        CsrMatrix::from_triplets(self.n, t)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|r| self.row(r).map(|(_, v)| v).sum()).collect()
    }

    /// Lower and upper half-bandwidths.
    pub fn bandwidth(&self) -> (usize, usize) {
        let mut lo = 0;
        let mut up = 0;
        for (r, c, _) in self.triplets() {
            if c < r {
                lo = lo.max(r - c);
            } else {
                up = up.max(c - r);
            }
        }
        (lo, up)
    }
}

/// Unpivoted LU factorization stored in band form.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    lower: usize,
    upper: usize,
    width: usize,
    band: Vec<f64>,
    small_pivots: Vec<usize>,
}

impl BandedLu {
    pub fn factor(a: &CsrMatrix) -> Result<BandedLu, LinalgError> {
        let lu = Self::factor_impl(a, None);
        if let Some(&row) = lu.small_pivots.first() {
            return Err(LinalgError::Singular {
                row,
                pivot: lu.band[row * lu.width + lu.lower],
            });
        }
        Ok(lu)
    }

    /// Factors a possibly singular matrix. Pivots with magnitude below
    /// `rel_tol · max|a_ii|` are recorded and replaced by that threshold, which
    /// turns the factorization into an inverse-iteration operator for the
    /// kernel.
    pub fn factor_singular(a: &CsrMatrix, rel_tol: f64) -> BandedLu {
        Self::factor_impl(a, Some(rel_tol))
    }

    fn factor_impl(a: &CsrMatrix, floor_rel: Option<f64>) -> BandedLu {
        let n = a.dim();
        let (lower, upper) = a.bandwidth();
        let width = lower + upper + 1;
        let mut band = vec![0.0; n * width];
        for (r, c, v) in a.triplets() {
            band[r * width + (c + lower - r)] = v;
        }
        let scale = (0..n).map(|i| a.get(i, i).abs()).fold(0.0, f64::max);
        let floor = floor_rel.map(|t| t * scale).unwrap_or(0.0);
        let mut small_pivots = Vec::new();
        for k in 0..n {
            let mut pivot = band[k * width + lower];
            if pivot.abs() <= floor || pivot == 0.0 {
                small_pivots.push(k);
                if floor_rel.is_some() {
                    pivot = if pivot < 0.0 { -floor } else { floor };
                    if pivot == 0.0 {
                        pivot = f64::MIN_POSITIVE;
                    }
                    band[k * width + lower] = pivot;
                } else {
                    continue;
                }
            }
            let i_end = (k + lower).min(n - 1);
            let j_end = (k + upper).min(n - 1);
            for i in k + 1..=i_end {
                let pos = i * width + (k + lower - i);
                let l = band[pos];
                if l == 0.0 {
                    continue;
                }
                let l = l / pivot;
                band[pos] = l;
                let row_k = k * width + lower - k;
                let row_i = i * width + lower - i;
                for j in k + 1..=j_end {
                    band[row_i + j] -= l * band[row_k + j];
                }
            }
        }
        BandedLu {
            n,
            lower,
            upper,
            width,
            band,
            small_pivots,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Rows whose pivot fell below the threshold during factorization.
    pub fn small_pivots(&self) -> &[usize] {
        &self.small_pivots
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let (n, lo, up, w) = (self.n, self.lower, self.upper, self.width);
        assert_eq!(x.len(), n);
        for i in 0..n {
            let start = i.saturating_sub(lo);
            let row = i * w + lo - i;
            let mut s = x[i];
            for j in start..i {
                s -= self.band[row + j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let end = (i + up).min(n - 1);
            let row = i * w + lo - i;
            let mut s = x[i];
            for j in i + 1..=end {
                s -= self.band[row + j] * x[j];
            }
            x[i] = s / self.band[row + i];
        }
    }

    /// Kernel vector of a matrix whose only vanishing pivot is the last one:
    /// back substitution in `U x = 0` with `x_{n−1} = 1`.
    pub fn null_vector(&self) -> Vec<f64> {
        let (n, lo, up, w) = (self.n, self.lower, self.upper, self.width);
        let mut x = vec![0.0; n];
        x[n - 1] = 1.0;
        for i in (0..n - 1).rev() {
            let end = (i + up).min(n - 1);
            let row = i * w + lo - i;
            let mut s = 0.0;
            for j in i + 1..=end {
                s -= self.band[row + j] * x[j];
            }
            x[i] = s / self.band[row + i];
        }
        x
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if b.len() != self.n {
            return Err(LinalgError::Dimension {
                expected: self.n,
                got: b.len(),
            });
        }
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag(n: usize) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 4.0));
            if i > 0 {
                t.push((i, i - 1, -1.0));
            }
            if i + 1 < n {
                t.push((i, i + 1, -2.0));
            }
        }
        CsrMatrix::from_triplets(n, t)
    }

    #[test]
    fn duplicates_are_summed() {
        let m = CsrMatrix::from_triplets(2, vec![(0, 1, 1.0), (0, 1, 2.0), (1, 0, -1.0)]);
        assert_eq!(m.get(0, 1), 3.0);
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.transpose().get(1, 0), 3.0);
        assert_eq!(m.bandwidth(), (1, 1));
    }

    #[test]
    fn banded_lu_solves() {
        let a = tridiag(50);
        let x: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let b = a.matvec(&x);
        let lu = BandedLu::factor(&a).unwrap();
        let y = lu.solve(&b).unwrap();
        for (u, v) in x.iter().zip(&y) {
            assert!((u - v).abs() < 1e-13);
        }
    }

    #[test]
    fn wide_band_solves() {
        let n = 30;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 10.0));
            for off in [1usize, 6] {
                if i >= off {
                    t.push((i, i - off, -1.5));
                }
                if i + off < n {
                    t.push((i, i + off, -1.0));
                }
            }
        }
        let a = CsrMatrix::from_triplets(n, t);
        let x: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 * 0.1).collect();
        let y = BandedLu::factor(&a).unwrap().solve(&a.matvec(&x)).unwrap();
        for (u, v) in x.iter().zip(&y) {
            assert!((u - v).abs() < 1e-13);
        }
    }

    #[test]
    fn singular_matrix_reports_and_yields_kernel() {
        // graph Laplacian of a path: kernel is the constant vector
        let n = 10;
        let mut t = Vec::new();
        for i in 0..n - 1 {
            t.extend([(i, i, 1.0), (i + 1, i + 1, 1.0), (i, i + 1, -1.0), (i + 1, i, -1.0)]);
        }
        let a = CsrMatrix::from_triplets(n, t);
        assert!(matches!(BandedLu::factor(&a), Err(LinalgError::Singular { .. })));
        let lu = BandedLu::factor_singular(&a, 1e-10);
        assert_eq!(lu.small_pivots(), &[n - 1]);
        let mut x = vec![1.0; n];
        x[3] = 0.0;
        lu.solve_in_place(&mut x);
        let s = x[0];
        for v in &x {
            assert!((v / s - 1.0).abs() < 1e-8);
        }
        for v in lu.null_vector() {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }
}
