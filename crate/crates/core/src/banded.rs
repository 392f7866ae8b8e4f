//! Banded LU factorization with partial pivoting.
//!
//! Storage follows the LAPACK `gbtrf` layout: column-major with `2*kl + ku + 1`
//! rows per column, the top `kl` rows reserved for fill-in produced by row
//! interchanges.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BandError {
    #[error("matrix is singular at column {0}")]
    Singular(usize),
}

#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn new(n: usize, kl: usize, ku: usize) -> Self {
        let ldab = 2 * kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            ldab,
            data: vec![0.0; ldab * n],
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn lower_bandwidth(&self) -> usize {
        self.kl
    }

    pub fn upper_bandwidth(&self) -> usize {
        self.ku
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        j * self.ldab + self.kl + self.ku + i - j
    }

    pub fn in_band(&self, i: usize, j: usize) -> bool {
        i < self.n && j < self.n && i <= j + self.kl && j <= i + self.ku
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.in_band(i, j) {
            self.data[self.idx(i, j)]
        } else {
            0.0
        }
    }

    /// Adds `v` to entry `(i, j)`. Panics if the entry lies outside the band.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(
            self.in_band(i, j),
            "entry ({i}, {j}) outside band kl={} ku={}",
            self.kl,
            self.ku
        );
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for j in 0..self.n {
            let lo = j.saturating_sub(self.ku);
            let hi = (j + self.kl).min(self.n - 1);
            for (i, yi) in y.iter_mut().enumerate().take(hi + 1).skip(lo) {
                *yi += self.data[self.idx(i, j)] * x[j];
            }
        }
        y
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// In-place LU factorization with partial pivoting.
    pub fn factor(mut self) -> Result<BandLu, BandError> {
        let n = self.n;
        let kl = self.kl;
        let ku = self.ku;
        let kv = ku + kl;
        let ld = self.ldab;
        let mut piv = vec![0usize; n];
        // index of A(i, j) in the fill-extended layout
        let at = |i: usize, j: usize| j * ld + kv + i - j;
        let mut ju = 0usize;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let mut p = 0usize;
            let mut best = self.data[at(j, j)].abs();
            for r in 1..=km {
                let v = self.data[at(j + r, j)].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            piv[j] = j + p;
            if best == 0.0 || !best.is_finite() {
                return Err(BandError::Singular(j));
            }
            ju = ju.max((j + ku + p).min(n - 1));
            if p != 0 {
                for c in j..=ju {
                    self.data.swap(at(j, c), at(j + p, c));
                }
            }
            let pivot = self.data[at(j, j)];
            if km > 0 {
                let inv = 1.0 / pivot;
                for r in 1..=km {
                    self.data[at(j + r, j)] *= inv;
                }
                for c in (j + 1)..=ju {
                    let u = self.data[at(j, c)];
                    if u != 0.0 {
                        for r in 1..=km {
                            let l = self.data[at(j + r, j)];
                            self.data[at(j + r, c)] -= l * u;
                        }
                    }
                }
            }
        }
        Ok(BandLu { a: self, piv })
    }
}

/// Factored form produced by [`BandMatrix::factor`].
#[derive(Debug, Clone)]
pub struct BandLu {
    a: BandMatrix,
    piv: Vec<usize>,
}

impl BandLu {
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.a.n;
        let kl = self.a.kl;
        let kv = self.a.kl + self.a.ku;
        let ld = self.a.ldab;
        let data = &self.a.data;
        let at = |i: usize, j: usize| j * ld + kv + i - j;
        for j in 0..n {
            let p = self.piv[j];
            if p != j {
                b.swap(j, p);
            }
            let km = kl.min(n - 1 - j);
            let bj = b[j];
            if bj != 0.0 {
                for r in 1..=km {
                    b[j + r] -= data[at(j + r, j)] * bj;
                }
            }
        }
        for j in (0..n).rev() {
            b[j] /= data[at(j, j)];
            let bj = b[j];
            let lo = j.saturating_sub(kv);
            for i in lo..j {
                b[i] -= data[at(i, j)] * bj;
            }
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}
