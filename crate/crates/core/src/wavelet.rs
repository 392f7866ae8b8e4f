//! Adaptive spline Galerkin solver for the circuit equations.
//!
//! On an interval `[t_a, t_b]` the solution is a spline of order `k`
//! (`n + 1` coefficient vectors). It is determined by the initial condition
//! and by requiring the residual `d/dt q(x) + f(x) - s(t)` to be orthogonal to
//! the `n` splines of order `k - 1` on the same breakpoints. Newton phases
//! alternate with local refinement of the time grid; intervals on which Newton
//! fails are split and solved one after another.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::banded::BandMatrix;
use crate::mna::{DaeSystem, UnknownKind};
use crate::mra::{self, GridHierarchy, MraError};
use crate::spline::{gauss_rule, KnotGrid, SplineCoeffs, SplineError};
use crate::waveform::{Waveform, WaveformError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("Galerkin system is singular")]
    SingularSystem,
    #[error("no convergence on [{t_start:e}, {t_end:e}] s (residual norm {residual:.3e})")]
    NoConvergence {
        t_start: f64,
        t_end: f64,
        residual: f64,
    },
    #[error("interval splitting underflow at t = {t:e} s (interval {h:e} s, residual norm {residual:.3e})")]
    SplitUnderflow { t: f64, h: f64, residual: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("time {0} outside the solved range")]
    OutOfRange(f64),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Mra(#[from] MraError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveletConfig {
    /// Target accuracy, relative to signal magnitudes.
    pub tol: f64,
    /// Trial spline order `k` (degree `k - 1`).
    pub order: usize,
    pub initial_spans: usize,
    /// Maximal refinement level relative to the initial spans of an interval.
    pub max_level: usize,
    /// Fraction of the largest indicator above which spans are refined.
    pub eta: f64,
    pub newton_max: usize,
    pub damping_max_halvings: usize,
    /// Splitting gives up once the interval is shorter than `T · 2^-split_threshold`.
    pub split_threshold: u32,
    /// Final span counts outside `[lo, hi]` shrink or grow the next interval.
    pub target_size_band: (usize, usize),
    pub growth: f64,
    pub splitting: bool,
    pub abstol_v: f64,
    pub abstol_i: f64,
    /// Hard cap on spans within one interval.
    pub max_spans: usize,
    /// Upper bound on interval length; `None` starts with the whole range.
    pub max_interval: Option<f64>,
}

impl Default for WaveletConfig {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            order: 4,
            initial_spans: 8,
            max_level: 8,
            eta: 0.1,
            newton_max: 30,
            damping_max_halvings: 8,
            split_threshold: 20,
            target_size_band: (32, 128),
            growth: 1.5,
            splitting: true,
            abstol_v: 1e-9,
            abstol_i: 1e-12,
            max_spans: 8192,
            max_interval: None,
        }
    }
}

impl WaveletConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::InvalidConfig(m.to_string()));
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if self.order < 2 {
            return bad("order must be at least 2");
        }
        if self.initial_spans == 0 {
            return bad("initial_spans must be positive");
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad("eta must lie in (0, 1]");
        }
        if self.newton_max == 0 {
            return bad("newton_max must be positive");
        }
        if !(self.growth > 1.0) {
            return bad("growth must exceed 1");
        }
        if self.max_interval.is_some_and(|h| !(h > 0.0)) {
            return bad("max_interval must be positive");
        }
        if self.target_size_band.0 > self.target_size_band.1 {
            return bad("size band must be ordered");
        }
        Ok(())
    }

    /// Relative residual tolerance used by Newton.
    fn newton_rtol(&self) -> f64 {
        self.tol / 10.0
    }
}

/// Values of the trial/test bases at one quadrature point.
#[derive(Debug, Clone)]
struct QuadPoint {
    w: f64,
    /// `k` trial values followed by `k` trial derivatives.
    phi: Vec<f64>,
    /// `k - 1` test values.
    theta: Vec<f64>,
    source: DVector<f64>,
}

/// Discretized problem on one interval.
#[derive(Debug, Clone)]
pub struct GalerkinProblem<'a> {
    pub dae: &'a DaeSystem,
    pub trial: KnotGrid,
    pub test: KnotGrid,
    pub x0: DVector<f64>,
    pub tspan: (f64, f64),
    /// Per span, `order` Gauss points.
    points: Vec<Vec<QuadPoint>>,
    test_integrals: Vec<f64>,
    trial_integrals: Vec<f64>,
    /// Rows tested against the trial basis (see `algebraic_structure`).
    algebraic: Vec<bool>,
    /// Unknown whose initial value is imposed by row `v` of block 0, for
    /// the rows that are not algebraic.
    initial_of_row: Vec<Option<usize>>,
    c_mat: DMatrix<f64>,
    c_abs: DMatrix<f64>,
    /// Row combinations seen by the refinement indicators.
    indicator_rows: Vec<Vec<(usize, f64)>>,
    abstol_v: f64,
    abstol_i: f64,
}

/// Residual and per-row tolerance weights.
struct Evaluated {
    residual: DVector<f64>,
    weights: DVector<f64>,
}

impl<'a> GalerkinProblem<'a> {
    pub fn new(
        dae: &'a DaeSystem,
        trial: KnotGrid,
        x0: DVector<f64>,
        cfg: &WaveletConfig,
    ) -> Result<Self, SolverError> {
        assert!(
            dae.charge_is_linear(),
            "Galerkin assembly assumes charges linear in the unknowns"
        );
        let k = trial.order();
        let test = KnotGrid::with_order(trial.breakpoints().to_vec(), k - 1)?;
        debug_assert_eq!(test.dim() + 1, trial.dim());
        let mut points = Vec::with_capacity(trial.num_spans());
        let mut buf = Vec::new();
        for s in 0..trial.num_spans() {
            let rule = gauss_rule(trial.span_bounds(s), k)?;
            let mut pts = Vec::with_capacity(k);
            for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
                trial.local_basis(s, t, 1, &mut buf);
                let phi = buf.clone();
                test.local_basis(s, t, 0, &mut buf);
                let theta = buf[..k - 1].to_vec();
                pts.push(QuadPoint {
                    w,
                    phi,
                    theta,
                    source: dae.eval_s(t),
                });
            }
            points.push(pts);
        }
        let tk = test.knots();
        let kt = k - 1;
        let test_integrals = (0..test.dim())
            .map(|l| (tk[l + kt] - tk[l]) / kt as f64)
            .collect();
        let qk = trial.knots();
        let trial_integrals = (0..trial.dim()).map(|l| (qk[l + k] - qk[l]) / k as f64).collect();
        let c_mat = dae.jac_q(&x0);
        let c_abs = c_mat.abs();
        let (algebraic, initial_of_row) = algebraic_structure(&c_mat, &dae.jac_f(&x0));
        let indicator_rows = eliminate_source_currents(dae, &c_mat, &x0);
        Ok(Self {
            dae,
            tspan: (trial.start(), trial.end()),
            trial,
            test,
            x0,
            points,
            test_integrals,
            trial_integrals,
            algebraic,
            initial_of_row,
            c_mat,
            c_abs,
            indicator_rows,
            abstol_v: cfg.abstol_v,
            abstol_i: cfg.abstol_i,
        })
    }

    pub fn num_unknowns(&self) -> usize {
        self.trial.dim() * self.dae.dim()
    }

    fn nvars(&self) -> usize {
        self.dae.dim()
    }

    /// Absolute tolerance of equation row `v` (KCL rows are currents, branch
    /// rows voltages).
    fn row_atol(&self, v: usize) -> f64 {
        match self.dae.unknown_kinds()[v] {
            UnknownKind::Voltage => self.abstol_i,
            UnknownKind::Current => self.abstol_v,
        }
    }

    fn unknown_atol(&self, v: usize) -> f64 {
        match self.dae.unknown_kinds()[v] {
            UnknownKind::Voltage => self.abstol_v,
            UnknownKind::Current => self.abstol_i,
        }
    }

    /// State and derivative at a quadrature point of span `s`.
    fn state(&self, c: &SplineCoeffs, s: usize, p: &QuadPoint, x: &mut DVector<f64>, dx: &mut DVector<f64>) {
        let k = self.trial.order();
        x.fill(0.0);
        dx.fill(0.0);
        for j in 0..k {
            let col = c.coeffs.column(s + j);
            x.axpy(p.phi[j], &col, 1.0);
            dx.axpy(p.phi[k + j], &col, 1.0);
        }
    }

    fn evaluate(&self, c: &SplineCoeffs, rtol: f64) -> Evaluated {
        let d = self.nvars();
        let k = self.trial.order();
        let nt = self.test.dim();
        let mut res = DVector::zeros((nt + 1) * d);
        let mut rowscale = DVector::<f64>::zeros(d);
        let mut x = DVector::zeros(d);
        let mut dx = DVector::zeros(d);
        let mut f = DVector::zeros(d);
        let mut fabs = DVector::zeros(d);
        for (s, pts) in self.points.iter().enumerate() {
            for p in pts {
                self.state(c, s, p, &mut x, &mut dx);
                self.dae.load_static(&x, &mut f, None, Some(&mut fabs));
                let r = &self.c_mat * &dx + &f - &p.source;
                let scale = &self.c_abs * dx.abs() + &fabs + p.source.abs();
                rowscale = rowscale.sup(&scale);
                for v in 0..d {
                    if self.algebraic[v] {
                        for j in 0..k {
                            res[(s + j) * d + v] += p.w * p.phi[j] * r[v];
                        }
                    } else {
                        for (m, &th) in p.theta.iter().enumerate() {
                            res[(s + m + 1) * d + v] += p.w * th * r[v];
                        }
                    }
                }
            }
        }
        let c0 = c.coeffs.column(0);
        let mut weights = DVector::zeros(res.len());
        for v in 0..d {
            let wrow = self.row_atol(v) + rtol * rowscale[v];
            if let Some(u) = self.initial_of_row[v] {
                res[v] = c0[u] - self.x0[u];
                weights[v] = self.unknown_atol(u) + rtol * self.x0[u].abs();
                for l in 0..nt {
                    weights[(l + 1) * d + v] = wrow * self.test_integrals[l];
                }
            } else {
                for l in 0..=nt {
                    weights[l * d + v] = wrow * self.trial_integrals[l];
                }
            }
        }
        Evaluated {
            residual: res,
            weights,
        }
    }

    /// Stacked residual of length `(test dim + 1) * nvars`. Rows with a charge
    /// term hold the initial condition of one unknown in block 0 and the
    /// moment against test function `ℓ` in block `ℓ + 1`; algebraic rows hold
    /// the moment against trial function `ℓ` in block `ℓ`.
    pub fn residual(&self, c: &SplineCoeffs) -> DVector<f64> {
        self.evaluate(c, 0.0).residual
    }

    /// Derivative of [`GalerkinProblem::residual`] with respect to the
    /// coefficients, interleaved as `basis_index * nvars + unknown`.
    pub fn jacobian(&self, c: &SplineCoeffs) -> BandMatrix {
        let d = self.nvars();
        let k = self.trial.order();
        let n = self.num_unknowns();
        let kl = (k - 1) * d + d - 1;
        let ku = (k - 1) * d + d - 1;
        let mut jac = BandMatrix::new(n, kl, ku);
        for (v, u) in self.initial_of_row.iter().enumerate() {
            if let Some(u) = *u {
                jac.add(v, u, 1.0);
            }
        }
        let mut x = DVector::zeros(d);
        let mut dx = DVector::zeros(d);
        let mut f = DVector::zeros(d);
        let mut g = DMatrix::zeros(d, d);
        for (s, pts) in self.points.iter().enumerate() {
            for p in pts {
                self.state(c, s, p, &mut x, &mut dx);
                self.dae.load_static(&x, &mut f, Some(&mut g), None);
                for j in 0..k {
                    let (phi, dphi) = (p.phi[j], p.phi[k + j]);
                    let block = &self.c_mat * dphi + &g * phi;
                    let col0 = (s + j) * d;
                    for a in 0..d {
                        let tests: &[f64] = if self.algebraic[a] { &p.phi[..k] } else { &p.theta };
                        let shift = usize::from(!self.algebraic[a]);
                        for (m, &th) in tests.iter().enumerate() {
                            let wt = p.w * th;
                            if wt == 0.0 {
                                continue;
                            }
                            let row = (s + m + shift) * d + a;
                            for b in 0..d {
                                let v = block[(a, b)];
                                if v != 0.0 {
                                    jac.add(row, col0 + b, wt * v);
                                }
                            }
                        }
                    }
                }
            }
        }
        jac
    }

    /// Weighted RMS norm of the residual with tolerance `rtol`.
    pub fn residual_norm(&self, c: &SplineCoeffs, rtol: f64) -> f64 {
        let e = self.evaluate(c, rtol);
        wrms(&e.residual, &e.weights)
    }

    /// Per-span refinement indicators: moments of the equation residual
    /// against the next-level test function centred in each span, relative to
    /// the tolerance weights. Values above 1 ask for refinement.
    pub fn indicators(&self, c: &SplineCoeffs, rtol: f64) -> Vec<f64> {
        let d = self.nvars();
        let k = self.trial.order();
        let kt = k - 1;
        let m = self.trial.num_spans();
        let mut fine_bp = Vec::with_capacity(2 * m + 1);
        for s in 0..m {
            let (a, b) = self.trial.span_bounds(s);
            fine_bp.push(a);
            fine_bp.push(0.5 * (a + b));
        }
        fine_bp.push(self.trial.end());
        let fine = KnotGrid::with_order(fine_bp, kt).expect("midpoint grid is valid");
        let mut moments = DMatrix::<f64>::zeros(d, fine.dim());
        let mut rowscale = DVector::<f64>::zeros(d);
        let mut buf = Vec::new();
        let mut x = DVector::zeros(d);
        let mut dx = DVector::zeros(d);
        let mut f = DVector::zeros(d);
        let mut fabs = DVector::zeros(d);
        let mut s_t = DVector::zeros(d);
        for s in 0..m {
            for half in 0..2 {
                let fs = 2 * s + half;
                let rule = gauss_rule(fine.span_bounds(fs), k).expect("valid span");
                for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
                    self.trial.local_basis(s, t, 1, &mut buf);
                    x.fill(0.0);
                    dx.fill(0.0);
                    for j in 0..k {
                        let col = c.coeffs.column(s + j);
                        x.axpy(buf[j], &col, 1.0);
                        dx.axpy(buf[k + j], &col, 1.0);
                    }
                    self.dae.load_static(&x, &mut f, None, Some(&mut fabs));
                    self.dae.load_sources(t, &mut s_t);
                    let r = &self.c_mat * &dx + &f - &s_t;
                    let scale = &self.c_abs * dx.abs() + &fabs + s_t.abs();
                    rowscale = rowscale.sup(&scale);
                    fine.local_basis(fs, t, 0, &mut buf);
                    for j in 0..kt {
                        let mut col = moments.column_mut(fs + j);
                        col.axpy(w * buf[j], &r, 1.0);
                    }
                }
            }
        }
        let fk = fine.knots();
        let half = kt.div_ceil(2);
        (0..m)
            .map(|s| {
                let (a, b) = self.trial.span_bounds(s);
                let mid = 0.5 * (a + b);
                let pos = fk.partition_point(|&u| u < mid);
                let idx = pos.saturating_sub(half).min(fine.dim() - 1);
                let integral = (fk[idx + kt] - fk[idx]) / kt as f64;
                let rows = &self.indicator_rows;
                let sq: f64 = rows
                    .iter()
                    .map(|comb| {
                        let (m, scale, atol) = comb.iter().fold((0.0, 0.0f64, 0.0f64), |(m, sc, at), &(r, w)| {
                            (m + w * moments[(r, idx)], sc.max(rowscale[r]), at.max(self.row_atol(r)))
                        });
                        (m / ((atol + rtol * scale) * integral)).powi(2)
                    })
                    .sum();
                (sq / rows.len().max(1) as f64).sqrt()
            })
            .collect()
    }
}

/// Chooses which equations are tested against the trial basis and which
/// unknowns get no initial condition. Every unknown without charge and every
/// equation without charge is paired, through a structural matching, with a
/// partner it contains; the paired equations are trial-tested, the paired
/// unknowns are determined by them. The other equations each impose the
/// initial value of one of the remaining unknowns. Without a complete
/// matching every equation keeps the test-space treatment.
fn algebraic_structure(c: &DMatrix<f64>, g: &DMatrix<f64>) -> (Vec<bool>, Vec<Option<usize>>) {
    let d = c.nrows();
    let chargeless_row: Vec<bool> = (0..d).map(|r| c.row(r).amax() == 0.0).collect();
    let chargeless_col: Vec<bool> = (0..d).map(|u| c.column(u).amax() == 0.0).collect();
    let fallback = || (vec![false; d], (0..d).map(Some).collect());
    // Kuhn augmenting path from `left` over `edge(left, right)`
    fn augment(
        left: usize,
        edge: &dyn Fn(usize, usize) -> bool,
        seen: &mut [bool],
        left_match: &mut [Option<usize>],
        right_match: &mut [Option<usize>],
    ) -> bool {
        for right in 0..right_match.len() {
            if seen[right] || !edge(left, right) {
                continue;
            }
            seen[right] = true;
            let free = match right_match[right] {
                None => true,
                Some(l2) => augment(l2, edge, seen, left_match, right_match),
            };
            if free {
                right_match[right] = Some(left);
                left_match[left] = Some(right);
                return true;
            }
        }
        false
    }
    let mut row_of: Vec<Option<usize>> = vec![None; d];
    let mut unknown_of: Vec<Option<usize>> = vec![None; d];
    // chargeless unknowns first, preferably onto chargeless equations
    let to_chargeless_row = |u: usize, r: usize| chargeless_row[r] && g[(r, u)] != 0.0;
    let to_any_row = |u: usize, r: usize| g[(r, u)] != 0.0;
    for edge in [&to_chargeless_row as &dyn Fn(usize, usize) -> bool, &to_any_row] {
        for u in 0..d {
            if chargeless_col[u] && row_of[u].is_none() {
                augment(u, edge, &mut vec![false; d], &mut row_of, &mut unknown_of);
            }
        }
    }
    if (0..d).any(|u| chargeless_col[u] && row_of[u].is_none()) {
        return fallback();
    }
    let to_unknown = |r: usize, u: usize| g[(r, u)] != 0.0;
    for r in 0..d {
        if chargeless_row[r]
            && unknown_of[r].is_none()
            && !augment(r, &to_unknown, &mut vec![false; d], &mut unknown_of, &mut row_of)
        {
            return fallback();
        }
    }
    let trial_tested: Vec<bool> = unknown_of.iter().map(Option::is_some).collect();
    let mut initial = (0..d).filter(|&u| row_of[u].is_none());
    let initial_of_row = (0..d)
        .map(|v| if trial_tested[v] { None } else { initial.next() })
        .collect();
    (trial_tested, initial_of_row)
}

/// Equation rows with algebraic branch currents eliminated. Such a current
/// (a voltage source) only enters the KCL rows of its terminals and feeds
/// back nowhere else; its Galerkin representation can carry a neutral
/// oscillation that refinement does not remove, so the indicators look at
/// combinations of rows that do not contain it.
fn eliminate_source_currents(dae: &DaeSystem, c: &DMatrix<f64>, x: &DVector<f64>) -> Vec<Vec<(usize, f64)>> {
    let d = dae.dim();
    let g = dae.jac_f(x);
    let mut rows: Vec<Vec<(usize, f64)>> = (0..d).map(|r| vec![(r, 1.0)]).collect();
    let mut dropped = vec![false; d];
    for j in 0..d {
        if dae.unknown_kinds()[j] != UnknownKind::Current || c.column(j).amax() != 0.0 {
            continue;
        }
        let coef = |comb: &Vec<(usize, f64)>| comb.iter().map(|&(r, w)| w * g[(r, j)]).sum::<f64>();
        let node_rows: Vec<usize> = (0..d)
            .filter(|&r| !dropped[r] && dae.unknown_kinds()[r] == UnknownKind::Voltage && coef(&rows[r]) != 0.0)
            .collect();
        let Some((&pivot, rest)) = node_rows.split_first() else {
            continue;
        };
        let pc = coef(&rows[pivot]);
        let pivot_comb = rows[pivot].clone();
        for &r in rest {
            let factor = -coef(&rows[r]) / pc;
            for &(pr, w) in &pivot_comb {
                match rows[r].iter_mut().find(|e| e.0 == pr) {
                    Some(e) => e.1 += factor * w,
                    None => rows[r].push((pr, factor * w)),
                }
            }
        }
        dropped[pivot] = true;
    }
    rows.into_iter()
        .enumerate()
        .filter(|(r, _)| !dropped[*r])
        .map(|(_, comb)| comb)
        .collect()
}

fn wrms(r: &DVector<f64>, w: &DVector<f64>) -> f64 {
    let n = r.len().max(1) as f64;
    (r.iter().zip(w.iter()).map(|(a, b)| (a / b).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn assemble_residual(gp: &GalerkinProblem, c: &SplineCoeffs) -> DVector<f64> {
    gp.residual(c)
}

pub fn assemble_jacobian(gp: &GalerkinProblem, c: &SplineCoeffs) -> BandMatrix {
    gp.jacobian(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonOutcome {
    pub coeffs: SplineCoeffs,
    pub converged: bool,
    pub iterations: usize,
    /// Weighted residual norm of the returned coefficients.
    pub residual: f64,
    /// Set when no damped step reduced the residual.
    pub stalled: bool,
}

fn newton_run(
    gp: &GalerkinProblem,
    c_init: &SplineCoeffs,
    budget: usize,
    halvings: usize,
    rtol: f64,
) -> Result<NewtonOutcome, SolverError> {
    let d = gp.nvars();
    let mut c = c_init.clone();
    let mut iterations = 0;
    loop {
        let e = gp.evaluate(&c, rtol);
        let merit = wrms(&e.residual, &e.weights);
        if !merit.is_finite() {
            return Ok(NewtonOutcome {
                coeffs: c,
                converged: false,
                iterations,
                residual: merit,
                stalled: true,
            });
        }
        if merit <= 1.0 || iterations >= budget {
            return Ok(NewtonOutcome {
                coeffs: c,
                converged: merit <= 1.0,
                iterations,
                residual: merit,
                stalled: false,
            });
        }
        let lu = gp.jacobian(&c).factor().map_err(|_| SolverError::SingularSystem)?;
        let mut delta: Vec<f64> = e.residual.iter().map(|v| -v).collect();
        lu.solve_in_place(&mut delta);
        iterations += 1;
        let step = DMatrix::from_column_slice(d, c.coeffs.ncols(), &delta);
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..=halvings {
            let trial = SplineCoeffs {
                grid: c.grid.clone(),
                coeffs: &c.coeffs + &step * lambda,
            };
            let r = gp.evaluate(&trial, rtol).residual;
            let m = wrms(&r, &e.weights);
            if m < merit {
                accepted = Some(trial);
                break;
            }
            lambda *= 0.5;
        }
        match accepted {
            Some(t) => c = t,
            None => {
                return Ok(NewtonOutcome {
                    coeffs: c,
                    converged: false,
                    iterations,
                    residual: merit,
                    stalled: true,
                })
            }
        }
    }
}

/// Damped Newton on a fixed grid.
pub fn newton_solve(
    gp: &GalerkinProblem,
    c_init: &SplineCoeffs,
    cfg: &WaveletConfig,
) -> Result<NewtonOutcome, SolverError> {
    newton_run(gp, c_init, cfg.newton_max, cfg.damping_max_halvings, cfg.newton_rtol())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntervalStatus {
    Converged,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalReport {
    pub newton_iterations: usize,
    pub refinements: usize,
    /// Spans before coarsening.
    pub peak_spans: usize,
    /// Spans of the reported (coarsened) grid.
    pub final_spans: usize,
    pub residual: f64,
}

/// Result of one adaptive interval solve.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSolution {
    pub tspan: (f64, f64),
    /// Initial value handed to the interval. Unknowns fixed by algebraic
    /// equations are re-determined by the interval itself and may start
    /// elsewhere when a source has a corner at `tspan.0`.
    pub x0: DVector<f64>,
    pub coeffs: SplineCoeffs,
    /// Refinement level of every breakpoint of `coeffs.grid`.
    pub levels: Vec<usize>,
    pub status: IntervalStatus,
    pub report: IntervalReport,
}

impl IntervalSolution {
    /// Value at `t`; the interval end points return the boundary coefficients
    /// exactly.
    pub fn eval(&self, t: f64) -> Result<DVector<f64>, SolverError> {
        let c = &self.coeffs.coeffs;
        if t == self.tspan.0 {
            return Ok(c.column(0).into_owned());
        }
        if t == self.tspan.1 {
            return Ok(c.column(c.ncols() - 1).into_owned());
        }
        Ok(self.coeffs.eval(t, 0)?)
    }
}

/// Initial uniform grid with the level of every breakpoint. A power-of-two
/// span count is built by repeated bisection of the whole interval, so that
/// coarsening may go below the initial grid; other counts form one level.
fn initial_grid(tspan: (f64, f64), spans: usize, order: usize) -> Result<(KnotGrid, Vec<usize>), SolverError> {
    if !spans.is_power_of_two() {
        let grid = KnotGrid::uniform(tspan.0, tspan.1, spans, order)?;
        let n = grid.breakpoints().len();
        return Ok((grid, vec![0; n]));
    }
    let mut bp = vec![tspan.0, tspan.1];
    let mut levels = vec![0, 0];
    for level in 1..=spans.trailing_zeros() as usize {
        let mut nb = Vec::with_capacity(2 * bp.len());
        let mut nl = Vec::with_capacity(2 * bp.len());
        for i in 0..bp.len() - 1 {
            nb.extend([bp[i], 0.5 * (bp[i] + bp[i + 1])]);
            nl.extend([levels[i], level]);
        }
        nb.push(tspan.1);
        nl.push(0);
        bp = nb;
        levels = nl;
    }
    Ok((KnotGrid::new(bp, order)?, levels))
}

/// Per-unknown magnitudes used to make coefficients dimensionless before
/// thresholding.
fn variable_scales(dae: &DaeSystem, c: &SplineCoeffs, cfg: &WaveletConfig) -> Vec<f64> {
    (0..c.nvars())
        .map(|v| {
            let max = c.coeffs.row(v).amax();
            let atol = match dae.unknown_kinds()[v] {
                UnknownKind::Voltage => cfg.abstol_v,
                UnknownKind::Current => cfg.abstol_i,
            };
            max.max(atol / cfg.tol)
        })
        .collect()
}

fn leveled_from_hierarchy(h: &GridHierarchy) -> Vec<usize> {
    let fine = h.finest().breakpoints();
    let mut levels = vec![usize::MAX; fine.len()];
    for j in 0..h.num_levels() {
        for b in h.level(j).breakpoints() {
            let i = fine.partition_point(|x| x < b);
            if levels[i] == usize::MAX {
                levels[i] = j;
            }
        }
    }
    levels
}

/// Removes detail coefficients below `tol / 10` (relative to each unknown's
/// magnitude) and drops the knots they leave without influence.
fn coarsen(
    dae: &DaeSystem,
    c: &SplineCoeffs,
    levels: &[usize],
    cfg: &WaveletConfig,
) -> Result<(SplineCoeffs, Vec<usize>), SolverError> {
    if levels.iter().all(|&l| l == 0) {
        return Ok((c.clone(), levels.to_vec()));
    }
    let top = levels.iter().copied().max().unwrap_or(0);
    let h = GridHierarchy::from_leveled_breakpoints(
        c.grid.breakpoints(),
        levels,
        c.grid.order(),
        cfg.max_level.max(top),
    )?;
    let scales = variable_scales(dae, c, cfg);
    let mut scaled = c.coeffs.clone();
    for (v, s) in scales.iter().enumerate() {
        scaled.row_mut(v).scale_mut(1.0 / s);
    }
    let he = mra::decompose(&SplineCoeffs::new(c.grid.clone(), scaled)?, &h)?;
    let (thr, _) = mra::threshold(&he, cfg.tol / 10.0)?;
    let mut out = mra::reconstruct(&thr)?;
    for (v, s) in scales.iter().enumerate() {
        out.coeffs.row_mut(v).scale_mut(*s);
    }
    let lv = leveled_from_hierarchy(&thr.hierarchy);
    Ok((out, lv))
}

/// Newton phases interleaved with local refinement on one interval.
pub fn solve_adaptive_interval(
    dae: &DaeSystem,
    x0: &DVector<f64>,
    tspan: (f64, f64),
    cfg: &WaveletConfig,
) -> Result<IntervalSolution, SolverError> {
    cfg.validate()?;
    let (grid, mut levels) = initial_grid(tspan, cfg.initial_spans, cfg.order)?;
    // refinement depth counts from the initial grid
    let level_cap = cfg.max_level + levels.iter().copied().max().unwrap_or(0);
    let mut c = SplineCoeffs::constant(grid, x0);
    let phase = cfg.newton_max.min(5);
    let rtol = cfg.newton_rtol();
    let mut report = IntervalReport {
        newton_iterations: 0,
        refinements: 0,
        peak_spans: c.grid.num_spans(),
        final_spans: c.grid.num_spans(),
        residual: f64::INFINITY,
    };
    let mut unconverged = 0;
    let mut fixed: Vec<usize>;
    let failed = |c: SplineCoeffs, levels: Vec<usize>, report: IntervalReport| IntervalSolution {
        tspan,
        x0: x0.clone(),
        coeffs: c,
        levels,
        status: IntervalStatus::Failed,
        report,
    };
    loop {
        let gp = GalerkinProblem::new(dae, c.grid.clone(), x0.clone(), cfg)?;
        fixed = gp.initial_of_row.iter().flatten().copied().collect();
        let out = match newton_run(&gp, &c, phase, cfg.damping_max_halvings, rtol) {
            Ok(o) => o,
            Err(SolverError::SingularSystem) => return Ok(failed(c, levels, report)),
            Err(e) => return Err(e),
        };
        report.newton_iterations += out.iterations;
        report.residual = out.residual;
        c = out.coeffs;
        if out.stalled {
            return Ok(failed(c, levels, report));
        }
        if !out.converged {
            unconverged += out.iterations;
            if unconverged >= cfg.newton_max {
                return Ok(failed(c, levels, report));
            }
        }
        let ind = gp.indicators(&c, cfg.tol);
        let bp = c.grid.breakpoints().to_vec();
        let span_level = |s: usize| levels[s].max(levels[s + 1]);
        let room = c.grid.num_spans() < cfg.max_spans;
        let masked: Vec<f64> = ind
            .iter()
            .enumerate()
            .map(|(s, &v)| if v > 1.0 && span_level(s) < level_cap && room { v } else { 0.0 })
            .collect();
        let selected = mra::select_refinement(&masked, cfg.eta);
        if selected.is_empty() {
            if out.converged {
                break;
            }
            continue;
        }
        let mut new_bp = Vec::with_capacity(bp.len() + selected.len());
        let mut new_lv = Vec::with_capacity(bp.len() + selected.len());
        let mut sel = selected.iter().peekable();
        for s in 0..bp.len() {
            new_bp.push(bp[s]);
            new_lv.push(levels[s]);
            if sel.peek() == Some(&&s) {
                sel.next();
                new_bp.push(0.5 * (bp[s] + bp[s + 1]));
                new_lv.push(span_level(s) + 1);
            }
        }
        let fine = KnotGrid::new(new_bp, cfg.order)?;
        c = c.prolong_to(&fine)?;
        levels = new_lv;
        report.refinements += 1;
        report.peak_spans = report.peak_spans.max(fine.num_spans());
    }
    let (mut coarse, lv) = coarsen(dae, &c, &levels, cfg)?;
    // unknowns with an initial condition start exactly at x0
    for &u in &fixed {
        coarse.coeffs[(u, 0)] = x0[u];
    }
    report.final_spans = coarse.grid.num_spans();
    Ok(IntervalSolution {
        tspan,
        x0: x0.clone(),
        coeffs: coarse,
        levels: lv,
        status: IntervalStatus::Converged,
        report,
    })
}

/// Piecewise solution over the full time range.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletSolution {
    pub intervals: Vec<IntervalSolution>,
    pub labels: Vec<String>,
    /// Interval attempts that failed and were split.
    pub failed_attempts: usize,
}

impl WaveletSolution {
    pub fn tspan(&self) -> (f64, f64) {
        (
            self.intervals.first().map_or(0.0, |i| i.tspan.0),
            self.intervals.last().map_or(0.0, |i| i.tspan.1),
        )
    }

    /// Distinct breakpoints over all intervals.
    pub fn grid_points(&self) -> usize {
        self.intervals.iter().map(|i| i.coeffs.grid.num_spans()).sum::<usize>() + 1
    }

    pub fn newton_total(&self) -> usize {
        self.intervals.iter().map(|i| i.report.newton_iterations).sum()
    }

    /// All breakpoints in increasing order, interval boundaries once.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for iv in &self.intervals {
            for &b in iv.coeffs.grid.breakpoints() {
                if out.last() != Some(&b) {
                    out.push(b);
                }
            }
        }
        out
    }

    pub fn eval(&self, t: f64) -> Result<DVector<f64>, SolverError> {
        let (a, b) = self.tspan();
        if !(t >= a && t <= b) {
            return Err(SolverError::OutOfRange(t));
        }
        let i = self
            .intervals
            // a boundary belongs to the interval ending there, whose end
            // value was handed on
            .partition_point(|iv| iv.tspan.1 < t)
            .min(self.intervals.len() - 1);
        self.intervals[i].eval(t)
    }
}

/// Interval splitting controller over `[t0, t_end]`.
pub fn solve_with_splitting(
    dae: &DaeSystem,
    x0: &DVector<f64>,
    tspan: (f64, f64),
    cfg: &WaveletConfig,
) -> Result<WaveletSolution, SolverError> {
    cfg.validate()?;
    let (t0, t_end) = tspan;
    if !(t_end > t0) {
        return Err(SolverError::InvalidConfig("empty time span".into()));
    }
    let total = t_end - t0;
    let h_min = total * 0.5f64.powi(cfg.split_threshold as i32);
    let mut sol = WaveletSolution {
        intervals: Vec::new(),
        labels: dae.unknown_names().to_vec(),
        failed_attempts: 0,
    };
    let mut t = t0;
    let mut x = x0.clone();
    let h_cap = cfg.max_interval.unwrap_or(total).min(total);
    // source corners are interval boundaries: a kink inside an interval
    // cannot be represented by the smooth trial splines
    let breaks = dae.breakpoints(t0, t_end);
    let mut bi = 0;
    let mut h = h_cap;
    while t < t_end {
        while bi < breaks.len() && breaks[bi] <= t * (1.0 + 1e-15) {
            bi += 1;
        }
        let stop = breaks.get(bi).copied().unwrap_or(t_end);
        let end = if t + h >= stop - 1e-3 * h && stop - t <= h_cap { stop } else { t + h };
        let iv = solve_adaptive_interval(dae, &x, (t, end), cfg)?;
        match iv.status {
            IntervalStatus::Converged => {
                x = iv.eval(end)?;
                let spans = iv.report.final_spans;
                // an interval cut short by a corner says little about h
                if end != stop || end - t >= h {
                    h = end - t;
                }
                if spans < cfg.target_size_band.0 {
                    h *= cfg.growth;
                } else if spans > cfg.target_size_band.1 {
                    h /= cfg.growth;
                }
                h = h.min(h_cap);
                t = end;
                sol.intervals.push(iv);
            }
            IntervalStatus::Failed => {
                sol.failed_attempts += 1;
                if !cfg.splitting {
                    return Err(SolverError::NoConvergence {
                        t_start: t,
                        t_end: end,
                        residual: iv.report.residual,
                    });
                }
                h = (end - t) / 2.0;
                if h < h_min {
                    return Err(SolverError::SplitUnderflow {
                        t,
                        h,
                        residual: iv.report.residual,
                    });
                }
            }
        }
    }
    Ok(sol)
}

/// Samples the piecewise solution.
pub fn sample_solution(ws: &WaveletSolution, times: &[f64]) -> Result<Waveform, SolverError> {
    let d = ws.labels.len();
    let mut values = DMatrix::zeros(d, times.len());
    for (i, &t) in times.iter().enumerate() {
        values.set_column(i, &ws.eval(t)?);
    }
    Waveform::new(times.to_vec(), values, ws.labels.clone()).map_err(|e| match e {
        WaveformError::OutOfRange { t, .. } => SolverError::OutOfRange(t),
        other => SolverError::InvalidConfig(other.to_string()),
    })
}

/// Knot counts per window of width `width` starting at each entry of
/// `starts`.
pub fn knot_density(breakpoints: &[f64], starts: &[f64], width: f64) -> BTreeMap<u64, usize> {
    starts
        .iter()
        .map(|&s| {
            let n = breakpoints.iter().filter(|&&b| b >= s && b < s + width).count();
            (s.to_bits(), n)
        })
        .collect()
}
