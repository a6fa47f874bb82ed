//! Band storage and the small amount of dense linear algebra shared by the
//! solver and the trial families.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Lower-triangular band matrix with half-bandwidth `bw`.
///
/// Row `i` stores columns `i - bw ..= i`; entries left of column 0 are padding
/// and stay zero. The same storage holds the lower half of a symmetric band
/// matrix before factorisation.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerBand {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl LowerBand {
    pub fn zeros(n: usize, bw: usize) -> Self {
        let bw = bw.min(n.saturating_sub(1));
        LowerBand { n, bw, data: vec![0.0; n * (bw + 1)] }
    }

    pub fn identity(n: usize, bw: usize) -> Self {
        let mut m = Self::zeros(n, bw);
        for i in 0..n {
            *m.get_mut(i, i) = 1.0;
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (j + self.bw - i)
    }

    #[inline]
    pub fn in_band(&self, i: usize, j: usize) -> bool {
        j <= i && i - j <= self.bw
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.in_band(i, j) {
            self.data[self.idx(i, j)]
        } else {
            0.0
        }
    }

    #[inline]
    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        let k = self.idx(i, j);
        &mut self.data[k]
    }

    /// Adds `v` at `(i, j)` of a symmetric matrix whose lower half is stored.
    #[inline]
    pub fn add_sym(&mut self, i: usize, j: usize, v: f64) {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        *self.get_mut(r, c) += v;
    }

    /// First column stored in row `i`.
    #[inline]
    pub fn row_start(&self, i: usize) -> usize {
        i.saturating_sub(self.bw)
    }

    /// `L x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| (self.row_start(i)..=i).map(|j| self.get(i, j) * x[j]).sum())
            .collect()
    }

    /// `Lᵀ x`.
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for i in 0..self.n {
            for j in self.row_start(i)..=i {
                out[j] += self.get(i, j) * x[i];
            }
        }
        out
    }

    /// Offset such that `data[off(i) + j]` is entry `(i, j)`.
    #[inline]
    fn off(&self, i: usize) -> usize {
        i * self.bw + self.bw
    }

    /// Solves `L x = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut [f64]) {
        for i in 0..self.n {
            let (s, o) = (self.row_start(i), self.off(i));
            let row = &self.data[o + s..o + i];
            let acc = b[i] - row.iter().zip(&b[s..i]).map(|(l, x)| l * x).sum::<f64>();
            b[i] = acc / self.data[o + i];
        }
    }

    /// Solves `Lᵀ x = b` in place.
    pub fn solve_upper_in_place(&self, b: &mut [f64]) {
        for i in (0..self.n).rev() {
            let (s, o) = (self.row_start(i), self.off(i));
            b[i] /= self.data[o + i];
            let bi = b[i];
            for (x, l) in b[s..i].iter_mut().zip(&self.data[o + s..o + i]) {
                *x -= l * bi;
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// Sum of log-diagonal entries.
    pub fn log_diag_sum(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i).ln()).sum()
    }

    /// In-place band Cholesky of the symmetric matrix held in the lower band.
    pub fn into_cholesky(mut self) -> Result<BandCholesky> {
        for i in 0..self.n {
            let (start, oi) = (self.row_start(i), self.off(i));
            for j in start..=i {
                let oj = self.off(j);
                // rows i and j overlap on columns start..j
                let dot: f64 = self.data[oi + start..oi + j]
                    .iter()
                    .zip(&self.data[oj + start..oj + j])
                    .map(|(a, b)| a * b)
                    .sum();
                let s = self.data[oi + j] - dot;
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::SingularSystem(format!(
                            "non-positive pivot {s:e} at row {i}"
                        )));
                    }
                    self.data[oi + i] = s.sqrt();
                } else {
                    self.data[oi + j] = s / self.data[oj + j];
                }
            }
        }
        Ok(BandCholesky { l: self })
    }
}

/// Cholesky factor of a symmetric positive definite band matrix.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    l: LowerBand,
}

impl BandCholesky {
    pub fn factor(&self) -> &LowerBand {
        &self.l
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        self.l.solve_lower_in_place(b);
        self.l.solve_upper_in_place(b);
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.log_diag_sum()
    }
}

/// Cholesky with diagonal jitter escalation.
///
/// Starts at `start * scale`, multiplies by ten until `max * scale` and
/// returns the factor together with the jitter that was used.
pub fn jittered_cholesky(
    a: &DMatrix<f64>,
    scale: f64,
    start: f64,
    max: f64,
) -> Result<(DMatrix<f64>, f64)> {
    let mut rel = start;
    loop {
        let jitter = rel * scale;
        let mut m = a.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = m.cholesky() {
            return Ok((ch.unpack(), jitter));
        }
        if rel >= max * (1.0 - 1e-12) {
            return Err(Error::Cholesky { jitter });
        }
        rel = (rel * 10.0).min(max);
    }
}

/// Solves `L x = b` for dense lower-triangular `L`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(b).expect("triangular factor has zero diagonal")
}

/// Solves `Lᵀ x = b` for dense lower-triangular `L`.
pub fn solve_lower_tr(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.tr_solve_lower_triangular(b).expect("triangular factor has zero diagonal")
}

/// Inverse of `L Lᵀ` given its lower Cholesky factor.
pub fn cholesky_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let linv = l
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .expect("triangular factor has zero diagonal");
    linv.transpose() * linv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd_band(n: usize, bw: usize) -> LowerBand {
        let mut a = LowerBand::zeros(n, bw);
        for i in 0..n {
            a.add_sym(i, i, 4.0 + i as f64 * 0.1);
            for d in 1..=bw {
                if i >= d {
                    a.add_sym(i, i - d, -1.0 / (d as f64 + 1.0));
                }
            }
        }
        a
    }

    #[test]
    fn band_cholesky_matches_dense() {
        let a = spd_band(9, 3);
        let dense = {
            let l = a.to_dense();
            let mut s = l.clone() + l.transpose();
            for i in 0..9 {
                s[(i, i)] = l[(i, i)];
            }
            s
        };
        let b: Vec<f64> = (0..9).map(|i| (i as f64).sin()).collect();
        let chol = a.into_cholesky().unwrap();
        let x = chol.solve(&b);
        let xd = dense.clone().cholesky().unwrap().solve(&DVector::from_vec(b.clone()));
        for i in 0..9 {
            assert!((x[i] - xd[i]).abs() < 1e-13);
        }
        let ld = dense.cholesky().unwrap().l();
        assert!((chol.log_det() - 2.0 * ld.diagonal().map(f64::ln).sum()).abs() < 1e-12);
    }

    #[test]
    fn triangular_solves_invert_products() {
        let mut l = LowerBand::zeros(6, 2);
        for i in 0..6 {
            for j in l.row_start(i)..=i {
                *l.get_mut(i, j) = if i == j { 1.5 + 0.1 * i as f64 } else { 0.3 * (i + j) as f64 - 1.0 };
            }
        }
        let x: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let mut y = l.mul_vec(&x);
        l.solve_lower_in_place(&mut y);
        let mut z = l.tr_mul_vec(&x);
        l.solve_upper_in_place(&mut z);
        for i in 0..6 {
            assert!((y[i] - x[i]).abs() < 1e-12);
            assert!((z[i] - x[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_band_is_rejected() {
        let mut a = LowerBand::zeros(2, 1);
        a.add_sym(0, 0, 1.0);
        a.add_sym(1, 1, 1.0);
        a.add_sym(1, 0, 1.0);
        assert!(matches!(a.into_cholesky(), Err(Error::SingularSystem(_))));
    }

    #[test]
    fn jitter_escalates_for_rank_deficient_input() {
        let a = DMatrix::from_element(2, 2, 1.0);
        let (l, jitter) = jittered_cholesky(&a, 1.0, 1e-8, 1e-4).unwrap();
        assert!(jitter >= 1e-8);
        let back = &l * l.transpose();
        assert!((back[(0, 1)] - 1.0).abs() < 1e-12);
    }
}
