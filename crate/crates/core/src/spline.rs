//! Non-uniform B-spline primitives on clamped knot vectors.
//!
//! A [`KnotGrid`] holds strictly increasing breakpoints `t_0 < … < t_m` and a
//! spline order `k` (degree `k - 1`). The derived knot vector repeats each end
//! point `k` times, so the spline space has dimension `m + k - 1` and the first
//! and last basis functions interpolate the end values.
//!
//! Evaluation uses the local triangular scheme (all `k` nonzero basis functions
//! of one span together with their derivatives), which is what the Galerkin
//! assembly needs at every quadrature node.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::banded::BandMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid spline order {0} (must be at least 2)")]
    InvalidOrder(usize),
    #[error("t = {t} outside domain [{a}, {b}]")]
    OutOfDomain { t: f64, a: f64, b: f64 },
    #[error("knot {0} is already a breakpoint")]
    DuplicateKnot(f64),
    #[error("invalid quadrature span [{0}, {1}]")]
    InvalidSpan(f64, f64),
    #[error("basis index {index} out of range (dimension {dim})")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("singular collocation system")]
    Singular,
}

/// Breakpoints plus spline order; the clamped knot vector is derived.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotGrid {
    breakpoints: Vec<f64>,
    order: usize,
    knots: Vec<f64>,
}

impl KnotGrid {
    pub fn new(breakpoints: Vec<f64>, order: usize) -> Result<Self, SplineError> {
        if order < 2 {
            return Err(SplineError::InvalidOrder(order));
        }
        Self::with_order(breakpoints, order)
    }

    /// Same as [`KnotGrid::new`] but also admits order 1 (piecewise constants),
    /// which the Galerkin test space needs for linear trial splines.
    pub(crate) fn with_order(breakpoints: Vec<f64>, order: usize) -> Result<Self, SplineError> {
        if order == 0 {
            return Err(SplineError::InvalidOrder(order));
        }
        if breakpoints.len() < 2 {
            return Err(SplineError::InvalidGrid(format!(
                "need at least 2 breakpoints, got {}",
                breakpoints.len()
            )));
        }
        if breakpoints.iter().any(|b| !b.is_finite()) {
            return Err(SplineError::InvalidGrid("non-finite breakpoint".into()));
        }
        if let Some(w) = breakpoints.windows(2).find(|w| w[1] <= w[0]) {
            return Err(SplineError::InvalidGrid(format!(
                "breakpoints not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        let a = breakpoints[0];
        let b = *breakpoints.last().unwrap();
        let mut knots = Vec::with_capacity(breakpoints.len() + 2 * (order - 1));
        knots.extend(std::iter::repeat_n(a, order - 1));
        knots.extend_from_slice(&breakpoints);
        knots.extend(std::iter::repeat_n(b, order - 1));
        Ok(Self {
            breakpoints,
            order,
            knots,
        })
    }

    /// `n` equal spans on `[a, b]`.
    pub fn uniform(a: f64, b: f64, spans: usize, order: usize) -> Result<Self, SplineError> {
        if spans == 0 || !(b > a) {
            return Err(SplineError::InvalidGrid(format!(
                "cannot split [{a}, {b}] into {spans} spans"
            )));
        }
        let h = (b - a) / spans as f64;
        let mut bp: Vec<f64> = (0..=spans).map(|i| a + h * i as f64).collect();
        bp[spans] = b;
        Self::new(bp, order)
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions, `m + k - 1`.
    pub fn dim(&self) -> usize {
        self.knots.len() - self.order
    }

    pub fn num_spans(&self) -> usize {
        self.breakpoints.len() - 1
    }

    pub fn start(&self) -> f64 {
        self.breakpoints[0]
    }

    pub fn end(&self) -> f64 {
        *self.breakpoints.last().unwrap()
    }

    pub fn span_bounds(&self, span: usize) -> (f64, f64) {
        (self.breakpoints[span], self.breakpoints[span + 1])
    }

    /// Index of the span containing `t`; right-continuous, with `t = b`
    /// assigned to the last span.
    pub fn span_of(&self, t: f64) -> Result<usize, SplineError> {
        let (a, b) = (self.start(), self.end());
        if !(t >= a && t <= b) {
            return Err(SplineError::OutOfDomain { t, a, b });
        }
        let m = self.num_spans();
        // partition_point gives the number of breakpoints <= t
        let idx = self.breakpoints.partition_point(|&x| x <= t);
        Ok(idx.saturating_sub(1).min(m - 1))
    }

    /// First basis index that is nonzero on `span`; the nonzero ones are
    /// `span..span + order`.
    pub fn first_basis(&self, span: usize) -> usize {
        span
    }

    /// Support `[lo, hi]` of basis function `index`.
    pub fn support(&self, index: usize) -> (f64, f64) {
        (self.knots[index], self.knots[index + self.order])
    }

    /// Spans (indices) on which basis function `index` can be nonzero.
    pub fn support_spans(&self, index: usize) -> std::ops::Range<usize> {
        let k = self.order;
        let lo = index.saturating_sub(k - 1);
        let hi = (index + 1).min(self.num_spans());
        lo..hi
    }

    /// Greville abscissae: averages of `k - 1` consecutive interior knots.
    pub fn greville(&self) -> Vec<f64> {
        let k = self.order;
        if k == 1 {
            return self
                .breakpoints
                .windows(2)
                .map(|w| 0.5 * (w[0] + w[1]))
                .collect();
        }
        (0..self.dim())
            .map(|i| self.knots[i + 1..i + k].iter().sum::<f64>() / (k - 1) as f64)
            .collect()
    }

    /// Values and derivatives `0..=nders` of the `order` basis functions that
    /// are nonzero on `span`, evaluated at `t`. Layout: `out[d * order + j]`
    /// is the `d`-th derivative of basis `span + j`.
    pub fn local_basis(&self, span: usize, t: f64, nders: usize, out: &mut Vec<f64>) {
        let k = self.order;
        let p = k - 1;
        out.clear();
        out.resize((nders + 1) * k, 0.0);
        let i = span + p; // knot index with knots[i] <= t < knots[i+1]
        let u = &self.knots;

        // ndu holds basis values (lower triangle incl. diagonal) and knot
        // differences (upper triangle), indexed ndu[row * k + col].
        let mut ndu = vec![0.0; k * k];
        let mut left = vec![0.0; k];
        let mut right = vec![0.0; k];
        ndu[0] = 1.0;
        for j in 1..=p {
            left[j] = t - u[i + 1 - j];
            right[j] = u[i + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j * k + r] = right[r + 1] + left[j - r];
                let temp = ndu[r * k + j - 1] / ndu[j * k + r];
                ndu[r * k + j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j * k + j] = saved;
        }
        for j in 0..=p {
            out[j] = ndu[j * k + p];
        }
        let nd = nders.min(p);
        if nd == 0 {
            return;
        }
        let mut a = vec![0.0; 2 * k];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a.iter_mut().for_each(|v| *v = 0.0);
            a[0] = 1.0;
            for kk in 1..=nd {
                let mut d = 0.0;
                let rk = r as isize - kk as isize;
                let pk = p - kk;
                if r >= kk {
                    let rk = rk as usize;
                    a[s2 * k] = a[s1 * k] / ndu[(pk + 1) * k + rk];
                    d = a[s2 * k] * ndu[rk * k + pk];
                }
                let j1: usize = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2: usize = if r as isize - 1 <= pk as isize {
                    kk - 1
                } else {
                    p - r
                };
                let mut j = j1;
                while j <= j2 {
                    let idx = (rk + j as isize) as usize;
                    a[s2 * k + j] = (a[s1 * k + j] - a[s1 * k + j - 1]) / ndu[(pk + 1) * k + idx];
                    d += a[s2 * k + j] * ndu[idx * k + pk];
                    j += 1;
                }
                if r <= pk {
                    a[s2 * k + kk] = -a[s1 * k + kk - 1] / ndu[(pk + 1) * k + r];
                    d += a[s2 * k + kk] * ndu[r * k + pk];
                }
                out[kk * k + r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut fac = p as f64;
        for kk in 1..=nd {
            for j in 0..=p {
                out[kk * k + j] *= fac;
            }
            fac *= (p - kk) as f64;
        }
    }

    /// Value of basis function `index` at `t`.
    pub fn eval(&self, index: usize, t: f64) -> Result<f64, SplineError> {
        self.deriv(index, t, 0)
    }

    /// `nu`-th derivative of basis function `index` at `t`. Derivatives of
    /// order `>= k` vanish identically.
    pub fn deriv(&self, index: usize, t: f64, nu: usize) -> Result<f64, SplineError> {
        if index >= self.dim() {
            return Err(SplineError::IndexOutOfRange {
                index,
                dim: self.dim(),
            });
        }
        let span = self.span_of(t)?;
        if nu >= self.order {
            return Ok(0.0);
        }
        let first = self.first_basis(span);
        if index < first || index >= first + self.order {
            return Ok(0.0);
        }
        let mut buf = Vec::new();
        self.local_basis(span, t, nu, &mut buf);
        Ok(buf[nu * self.order + index - first])
    }

    /// Grid with one extra breakpoint.
    pub fn with_breakpoint(&self, t: f64) -> Result<Self, SplineError> {
        let (a, b) = (self.start(), self.end());
        if !(t > a && t < b) {
            return Err(SplineError::OutOfDomain { t, a, b });
        }
        let pos = self.breakpoints.partition_point(|&x| x < t);
        if self.breakpoints[pos] == t {
            return Err(SplineError::DuplicateKnot(t));
        }
        let mut bp = self.breakpoints.clone();
        bp.insert(pos, t);
        Self::with_order(bp, self.order)
    }
}

/// Free-function form of [`KnotGrid::new`].
pub fn make_knot_grid(breakpoints: &[f64], order: usize) -> Result<KnotGrid, SplineError> {
    KnotGrid::new(breakpoints.to_vec(), order)
}

pub fn bspline_eval(grid: &KnotGrid, index: usize, t: f64) -> Result<f64, SplineError> {
    grid.eval(index, t)
}

pub fn bspline_deriv(grid: &KnotGrid, index: usize, t: f64, nu: usize) -> Result<f64, SplineError> {
    grid.deriv(index, t, nu)
}

/// A vector-valued spline: one row per unknown, one column per basis function.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineCoeffs {
    pub grid: KnotGrid,
    pub coeffs: DMatrix<f64>,
}

impl SplineCoeffs {
    pub fn new(grid: KnotGrid, coeffs: DMatrix<f64>) -> Result<Self, SplineError> {
        if coeffs.ncols() != grid.dim() {
            return Err(SplineError::InvalidGrid(format!(
                "coefficient columns {} != spline dimension {}",
                coeffs.ncols(),
                grid.dim()
            )));
        }
        Ok(Self { grid, coeffs })
    }

    /// Every basis coefficient set to `value` (the constant function `value`).
    pub fn constant(grid: KnotGrid, value: &DVector<f64>) -> Self {
        let n = grid.dim();
        let coeffs = DMatrix::from_fn(value.len(), n, |r, _| value[r]);
        Self { grid, coeffs }
    }

    pub fn nvars(&self) -> usize {
        self.coeffs.nrows()
    }

    /// `nu`-th derivative of the expansion at `t`, one entry per unknown.
    pub fn eval(&self, t: f64, nu: usize) -> Result<DVector<f64>, SplineError> {
        let mut out = DVector::zeros(self.nvars());
        let mut buf = Vec::new();
        self.eval_into(t, nu, &mut out, &mut buf)?;
        Ok(out)
    }

    pub(crate) fn eval_into(
        &self,
        t: f64,
        nu: usize,
        out: &mut DVector<f64>,
        buf: &mut Vec<f64>,
    ) -> Result<(), SplineError> {
        let span = self.grid.span_of(t)?;
        out.fill(0.0);
        let k = self.grid.order();
        if nu >= k {
            return Ok(());
        }
        self.grid.local_basis(span, t, nu, buf);
        let first = self.grid.first_basis(span);
        for j in 0..k {
            let w = buf[nu * k + j];
            if w != 0.0 {
                out.axpy(w, &self.coeffs.column(first + j), 1.0);
            }
        }
        Ok(())
    }

    /// Boehm knot insertion: same function on a grid with `t_new` added.
    pub fn insert_knot(&self, t_new: f64) -> Result<SplineCoeffs, SplineError> {
        let grid = self.grid.with_breakpoint(t_new)?;
        let coeffs = insert_knot_matrix(self.grid.knots(), self.grid.order(), &self.coeffs, t_new);
        Ok(SplineCoeffs { grid, coeffs })
    }

    /// Prolongs onto a finer grid with the same end points and order by
    /// repeated knot insertion.
    pub fn prolong_to(&self, fine: &KnotGrid) -> Result<SplineCoeffs, SplineError> {
        if fine.order() != self.grid.order()
            || fine.start() != self.grid.start()
            || fine.end() != self.grid.end()
        {
            return Err(SplineError::InvalidGrid("prolongation target mismatch".into()));
        }
        let mut cur = self.clone();
        let coarse = self.grid.breakpoints();
        let mut ci = 0;
        for &t in fine.breakpoints() {
            if ci < coarse.len() && coarse[ci] < t {
                return Err(SplineError::InvalidGrid(format!(
                    "coarse breakpoint {} missing from fine grid",
                    coarse[ci]
                )));
            }
            if ci < coarse.len() && coarse[ci] == t {
                ci += 1;
            } else {
                cur = cur.insert_knot(t)?;
            }
        }
        if ci != coarse.len() {
            return Err(SplineError::InvalidGrid("fine grid is not a refinement".into()));
        }
        Ok(cur)
    }

    /// Interpolates `f` at the Greville abscissae.
    pub fn interpolate<F>(grid: KnotGrid, nvars: usize, f: F) -> Result<Self, SplineError>
    where
        F: Fn(f64) -> DVector<f64>,
    {
        let n = grid.dim();
        let k = grid.order();
        let tau = grid.greville();
        let mut a = BandMatrix::new(n, k, k);
        let mut buf = Vec::new();
        for (row, &t) in tau.iter().enumerate() {
            let span = grid.span_of(t)?;
            grid.local_basis(span, t, 0, &mut buf);
            let first = grid.first_basis(span);
            for j in 0..k {
                a.add(row, first + j, buf[j]);
            }
        }
        let lu = a.factor().map_err(|_| SplineError::Singular)?;
        let mut coeffs = DMatrix::zeros(nvars, n);
        let samples: Vec<DVector<f64>> = tau.iter().map(|&t| f(t)).collect();
        for v in 0..nvars {
            let mut rhs: Vec<f64> = samples.iter().map(|s| s[v]).collect();
            lu.solve_in_place(&mut rhs);
            for (i, c) in rhs.into_iter().enumerate() {
                coeffs[(v, i)] = c;
            }
        }
        Ok(Self { grid, coeffs })
    }
}

pub fn eval_expansion(sc: &SplineCoeffs, t: f64, nu: usize) -> Result<DVector<f64>, SplineError> {
    sc.eval(t, nu)
}

pub fn insert_knot(sc: &SplineCoeffs, t_new: f64) -> Result<SplineCoeffs, SplineError> {
    sc.insert_knot(t_new)
}

/// Knot insertion on raw coefficient columns. `coeffs` has one column per
/// basis function of the knot vector `knots` (order `order`).
pub(crate) fn insert_knot_matrix(
    knots: &[f64],
    order: usize,
    coeffs: &DMatrix<f64>,
    t: f64,
) -> DMatrix<f64> {
    let p = order - 1;
    let n = coeffs.ncols();
    // mu: knots[mu] <= t < knots[mu+1]
    let mu = knots.partition_point(|&x| x <= t) - 1;
    let mut out = DMatrix::zeros(coeffs.nrows(), n + 1);
    for i in 0..=n {
        if i + p <= mu {
            out.set_column(i, &coeffs.column(i));
        } else if i > mu {
            out.set_column(i, &coeffs.column(i - 1));
        } else {
            let alpha = (t - knots[i]) / (knots[i + p] - knots[i]);
            let col = coeffs.column(i) * alpha + coeffs.column(i - 1) * (1.0 - alpha);
            out.set_column(i, &col);
        }
    }
    out
}

/// Gauss–Legendre nodes and weights mapped onto one span.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Nodes/weights of the `n`-point rule on `[-1, 1]`, via Newton iteration on
/// the Legendre polynomial.
fn gauss_legendre_reference(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            if n == 1 {
                p1 = z;
                p0 = 1.0;
            } else {
                for j in 2..=n {
                    let p2 = ((2 * j - 1) as f64 * z * p1 - (j - 1) as f64 * p0) / j as f64;
                    p0 = p1;
                    p1 = p2;
                }
            }
            // p1 = P_n(z), p0 = P_{n-1}(z)
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        // recompute derivative at the converged node
        let (mut p0, mut p1) = (1.0, z);
        for j in 2..=n {
            let p2 = ((2 * j - 1) as f64 * z * p1 - (j - 1) as f64 * p0) / j as f64;
            p0 = p1;
            p1 = p2;
        }
        if n > 1 {
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
        }
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

pub fn gauss_rule(span: (f64, f64), npoints: usize) -> Result<QuadratureRule, SplineError> {
    let (a, b) = span;
    if !(b > a) || !a.is_finite() || !b.is_finite() {
        return Err(SplineError::InvalidSpan(a, b));
    }
    if npoints == 0 {
        return Err(SplineError::InvalidSpan(a, b));
    }
    let (x, w) = if npoints == 1 {
        (vec![0.0], vec![2.0])
    } else {
        gauss_legendre_reference(npoints)
    };
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    Ok(QuadratureRule {
        nodes: x.iter().map(|&z| mid + half * z).collect(),
        weights: w.iter().map(|&wi| half * wi).collect(),
    })
}
