//! Classical adaptive time stepping on the charge-oriented circuit equations.
//!
//! Each step is taken once with `h` and twice with `h/2`; the difference of
//! the two results estimates the local error. Accepted steps record the
//! two-half-step result. The two-step formula takes its history from the
//! previous accepted point, which keeps the step ratio at most 2.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::mna::{DaeSystem, UnknownKind};
use crate::waveform::Waveform;

/// Error level new steps aim for. Accepted steps only need an estimate ≤ 1;
/// aiming lower keeps the error accumulated over many steps near the
/// tolerance.
const STEP_TARGET: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TranError {
    #[error("step size underflow at t = {t} (h = {h})")]
    StepSizeUnderflow { t: f64, h: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TranMethod {
    Trapezoidal,
    Bdf2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranConfig {
    pub reltol: f64,
    pub abstol_v: f64,
    pub abstol_i: f64,
    /// Defaults to `h_max / 1000` when unset.
    pub h_init: Option<f64>,
    /// Defaults to `T · 1e-14` when unset.
    pub h_min: Option<f64>,
    /// Defaults to `T / 50` when unset.
    pub h_max: Option<f64>,
    pub method: TranMethod,
    pub newton_max: usize,
}

impl Default for TranConfig {
    fn default() -> Self {
        Self {
            reltol: 1e-4,
            abstol_v: 1e-9,
            abstol_i: 1e-12,
            h_init: None,
            h_min: None,
            h_max: None,
            method: TranMethod::Trapezoidal,
            newton_max: 50,
        }
    }
}

impl TranConfig {
    pub fn with_reltol(reltol: f64) -> Self {
        Self {
            reltol,
            ..Self::default()
        }
    }

    /// `(h_init, h_min, h_max)` for a run of length `span`.
    fn steps(&self, span: f64) -> Result<(f64, f64, f64), TranError> {
        let h_max = self.h_max.unwrap_or(span / 50.0);
        let h_init = self.h_init.unwrap_or(h_max / 1000.0);
        let h_min = self.h_min.unwrap_or(span * 1e-14);
        if !(self.reltol > 0.0 && self.abstol_v > 0.0 && self.abstol_i > 0.0) {
            return Err(TranError::InvalidConfig("tolerances must be positive".into()));
        }
        if !(h_min > 0.0 && h_min <= h_init && h_init <= h_max) {
            return Err(TranError::InvalidConfig(
                "need 0 < h_min <= h_init <= h_max".into(),
            ));
        }
        Ok((h_init, h_min, h_max))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TranStats {
    pub accepted: usize,
    pub rejected: usize,
    pub newton_iterations: usize,
}

/// Weighted-RMS norm with per-unknown absolute tolerances.
pub fn wrms_norm(
    e: &DVector<f64>,
    x: &DVector<f64>,
    kinds: &[UnknownKind],
    reltol: f64,
    abstol_v: f64,
    abstol_i: f64,
) -> f64 {
    let n = e.len().max(1);
    let s: f64 = e
        .iter()
        .zip(x.iter())
        .zip(kinds)
        .map(|((ei, xi), k)| {
            let atol = match k {
                UnknownKind::Voltage => abstol_v,
                UnknownKind::Current => abstol_i,
            };
            let r = ei / (atol + reltol * xi.abs());
            r * r
        })
        .sum();
    (s / n as f64).sqrt()
}

/// Step history needed by the integration formulas.
#[derive(Clone)]
struct Point {
    t: f64,
    x: DVector<f64>,
    q: DVector<f64>,
    /// `f(x) - s(t)`
    fs: DVector<f64>,
}

struct Stepper<'a> {
    dae: &'a DaeSystem,
    cfg: &'a TranConfig,
    c: DMatrix<f64>,
    /// Rows without a charge term.
    algebraic: Vec<bool>,
    /// Unknowns seen by the error estimate: those carrying charge, or all of
    /// them in a circuit without any.
    states: Vec<usize>,
    iterations: usize,
}

impl Stepper<'_> {
    fn point(&self, t: f64, x: DVector<f64>) -> Point {
        let q = self.dae.eval_q(&x);
        let fs = self.dae.eval_f(&x) - self.dae.eval_s(t);
        Point { t, x, q, fs }
    }

    fn norm(&self, e: &DVector<f64>, x: &DVector<f64>) -> f64 {
        wrms_norm(
            e,
            x,
            self.dae.unknown_kinds(),
            self.cfg.reltol,
            self.cfg.abstol_v,
            self.cfg.abstol_i,
        )
    }

    /// Error norm over the charge-carrying unknowns. Unknowns without charge
    /// are algebraic functions of those; under the trapezoidal rule they can
    /// carry a sign-alternating component that does not shrink with the step
    /// and would otherwise stall step control.
    fn lte_norm(&self, e: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let pick = |v: &DVector<f64>| DVector::from_iterator(self.states.len(), self.states.iter().map(|&i| v[i]));
        let kinds: Vec<UnknownKind> = self.states.iter().map(|&i| self.dae.unknown_kinds()[i]).collect();
        wrms_norm(&pick(e), &pick(x), &kinds, self.cfg.reltol, self.cfg.abstol_v, self.cfg.abstol_i)
    }

    /// One step from `cur` to `t_new`; `prev` enables the two-step formula,
    /// `restart` forces backward Euler.
    fn step(&mut self, prev: Option<&Point>, cur: &Point, t_new: f64, restart: bool) -> Option<Point> {
        let dae = self.dae;
        let n = dae.dim();
        let h = t_new - cur.t;
        let s_new = dae.eval_s(t_new);
        // residual: a0 q(y) + hist + b·(f(y) - s_new) where hist holds the
        // known terms
        let (a0, b, hist) = match (self.cfg.method, prev) {
            _ if restart => (1.0, h, -&cur.q),
            (TranMethod::Trapezoidal, _) => (1.0, 0.5 * h, -&cur.q + &cur.fs * (0.5 * h)),
            (TranMethod::Bdf2, Some(p)) => {
                let w = h / (cur.t - p.t);
                let a0 = (1.0 + 2.0 * w) / (1.0 + w);
                let a1 = -(1.0 + w);
                let a2 = w * w / (1.0 + w);
                (a0, h, &cur.q * a1 + &p.q * a2)
            }
            (TranMethod::Bdf2, None) => (1.0, h, -&cur.q),
        };
        let mut y = cur.x.clone();
        let mut f = DVector::zeros(n);
        let mut g = DMatrix::zeros(n, n);
        for _ in 0..self.cfg.newton_max {
            self.iterations += 1;
            dae.load_static(&y, &mut f, Some(&mut g), None);
            let mut r = dae.eval_q(&y) * a0 + &hist + (&f - &s_new) * b;
            let mut jac = &self.c * a0 + &g * b;
            // equations without charge hold exactly at the new point
            for i in (0..n).filter(|&i| self.algebraic[i]) {
                r[i] = h * (f[i] - s_new[i]);
                jac.row_mut(i).copy_from(&(g.row(i) * h));
            }
            let mut dy = jac.lu().solve(&(-r))?;
            if !dy.iter().all(|v| v.is_finite()) {
                return None;
            }
            let vmax = (0..n)
                .filter(|&i| dae.unknown_kinds()[i] == UnknownKind::Voltage)
                .map(|i| dy[i].abs())
                .fold(0.0, f64::max);
            let limited = vmax > 1.0;
            if limited {
                dy *= 1.0 / vmax;
            }
            y += &dy;
            if !limited && self.norm(&dy, &y) <= 1e-3 {
                let mut p = self.point(t_new, y);
                // keep the recorded static part consistent with the converged
                // state
                p.fs = dae.eval_f(&p.x) - s_new;
                return Some(p);
            }
        }
        None
    }
}

pub fn tran_solve(
    dae: &DaeSystem,
    x0: &DVector<f64>,
    tspan: (f64, f64),
    cfg: &TranConfig,
) -> Result<Waveform, TranError> {
    tran_solve_stats(dae, x0, tspan, cfg).map(|(w, _)| w)
}

/// Like [`tran_solve`], also returning step statistics.
pub fn tran_solve_stats(
    dae: &DaeSystem,
    x0: &DVector<f64>,
    tspan: (f64, f64),
    cfg: &TranConfig,
) -> Result<(Waveform, TranStats), TranError> {
    let (t0, t_end) = tspan;
    if !(t_end > t0) {
        return Err(TranError::InvalidConfig("empty time span".into()));
    }
    let (h_init, h_min, h_max) = cfg.steps(t_end - t0)?;
    let breaks = dae.breakpoints(t0, t_end);
    let mut st = Stepper {
        dae,
        cfg,
        c: dae.jac_q(x0),
        algebraic: Vec::new(),
        states: Vec::new(),
        iterations: 0,
    };
    st.algebraic = (0..dae.dim()).map(|r| st.c.row(r).amax() == 0.0).collect();
    st.states = (0..dae.dim()).filter(|&j| st.c.column(j).amax() != 0.0).collect();
    if st.states.is_empty() {
        st.states = (0..dae.dim()).collect();
    }
    let mut stats = TranStats::default();
    let mut times = vec![t0];
    let mut cols = vec![x0.clone()];
    let mut prev: Option<Point> = None;
    let mut cur = st.point(t0, x0.clone());
    let mut h = h_init;
    let mut bi = 0;
    // the derivative may jump at the start and at source corners; a
    // backward Euler step there avoids trapezoidal ringing in algebraic
    // unknowns
    let mut restart = true;
    while cur.t < t_end {
        while bi < breaks.len() && breaks[bi] <= cur.t * (1.0 + 1e-15) {
            bi += 1;
        }
        let stop = if bi < breaks.len() { breaks[bi] } else { t_end };
        let mut hs = h.min(h_max);
        // land exactly on the next corner, never leave a sliver before it
        if cur.t + hs >= stop - 1e-3 * hs {
            hs = stop - cur.t;
        }
        if hs < h_min {
            return Err(TranError::StepSizeUnderflow { t: cur.t, h: hs });
        }
        let t_new = if hs == stop - cur.t { stop } else { cur.t + hs };
        let t_mid = cur.t + 0.5 * (t_new - cur.t);
        let full = st.step(prev.as_ref(), &cur, t_new, restart);
        let half = full.as_ref().and_then(|_| st.step(prev.as_ref(), &cur, t_mid, restart));
        let two = half.as_ref().and_then(|m| st.step(Some(&cur), m, t_new, restart));
        let accepted = match (&full, &two) {
            (Some(f), Some(t2)) => {
                // difference of the two paths: a conservative estimate of the
                // full-step error
                let e = &t2.x - &f.x;
                let scale = t2.x.abs().sup(&cur.x.abs());
                let err = st.lte_norm(&e, &scale);
                if err <= 1.0 {
                    let factor = if err == 0.0 {
                        2.0
                    } else {
                        (0.9 * (STEP_TARGET / err).powf(1.0 / 3.0)).clamp(0.5, 2.0)
                    };
                    Some((t2.clone(), factor))
                } else {
                    None
                }
            }
            _ => None,
        };
        match accepted {
            Some((next, factor)) => {
                stats.accepted += 1;
                times.push(next.t);
                cols.push(next.x.clone());
                prev = Some(std::mem::replace(&mut cur, next));
                h = (hs * factor).min(h_max);
                restart = t_new == stop && stop < t_end;
            }
            None => {
                stats.rejected += 1;
                h = hs / 2.0;
                if h < h_min {
                    return Err(TranError::StepSizeUnderflow { t: cur.t, h });
                }
            }
        }
    }
    stats.newton_iterations = st.iterations;
    let values = DMatrix::from_columns(&cols);
    let w = Waveform::new(times, values, dae.unknown_names().to_vec())
        .expect("accepted times are increasing");
    Ok((w, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mna::{build_dae, dc_operating_point};
    use crate::netlist::parse;

    fn dae(text: &str) -> DaeSystem {
        build_dae(&parse(text).unwrap()).unwrap()
    }

    #[test]
    fn rc_decay_matches_exponential() {
        let d = dae("R1 1 0 1k\nC1 1 0 1u\n.tran 1m");
        let x0 = DVector::from_element(1, 1.0);
        let w = tran_solve(&d, &x0, (0.0, 1e-3), &TranConfig::with_reltol(1e-6)).unwrap();
        let v = w.values[(0, w.len() - 1)];
        assert_eq!(*w.times.last().unwrap(), 1e-3);
        assert!((v - (-1.0f64).exp()).abs() <= 1e-6, "{v}");
    }

    /// Output of the sine-driven RC low-pass starting from rest.
    fn rc_sine_exact(t: f64) -> f64 {
        let (w, tau) = (2.0 * std::f64::consts::PI * 1e3, 1e-4);
        let wt = w * tau;
        ((w * t).sin() - wt * (w * t).cos() + wt * (-t / tau).exp()) / (1.0 + wt * wt)
    }

    #[test]
    fn observed_order_on_reltol_ladder() {
        let d = dae(crate::decks::RC);
        let out = d.unknown_index("v(out)").unwrap();
        let op = dc_operating_point(&d, 0.0).unwrap();
        let mut pts = Vec::new();
        for rt in [1e-4, 1e-5, 1e-6, 1e-7, 1e-8] {
            let (w, st) = tran_solve_stats(&d, &op.x0, (0.0, 2e-3), &TranConfig::with_reltol(rt)).unwrap();
            let err = w
                .times
                .iter()
                .enumerate()
                .map(|(c, &t)| (w.values[(out, c)] - rc_sine_exact(t)).abs())
                .fold(0.0, f64::max);
            pts.push((st.accepted as f64, err));
        }
        for p in pts.windows(2) {
            assert!(p[1].1 <= p[0].1 * 1.05, "{pts:?}");
        }
        let (a, b) = (pts[0], pts[pts.len() - 1]);
        let order = (a.1 / b.1).ln() / (b.0 / a.0).ln();
        assert!(order >= 1.8, "observed order {order}: {pts:?}");
    }

    #[test]
    fn resistive_divider_is_constant() {
        let d = dae("V1 1 0 DC 5\nR1 1 2 1k\nR2 2 0 1k\n.tran 1m");
        let op = dc_operating_point(&d, 0.0).unwrap();
        let w = tran_solve(&d, &op.x0, (0.0, 1e-3), &TranConfig::default()).unwrap();
        for c in 0..w.len() {
            assert!((w.values.column(c) - &op.x0).amax() < 1e-12);
        }
    }

    #[test]
    fn lc_tank_energy_preserved() {
        let d = dae("C1 1 0 1u\nL1 1 0 1m\n.tran 2m");
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let w = tran_solve(&d, &x0, (0.0, 2e-3), &TranConfig::with_reltol(1e-8)).unwrap();
        for c in 0..w.len() {
            let (v, i) = (w.values[(0, c)], w.values[(1, c)]);
            let e = v * v * 1e-6 + i * i * 1e-3 - 1e-6;
            assert!(e.abs() <= 1e-6 * 1e-6 + 1e-12, "energy drift {e}");
        }
    }

    #[test]
    fn steps_land_on_pulse_corners() {
        let d = dae("V1 1 0 PULSE(0 1 1u 1n 1n 3u 10u)\nR1 1 2 1k\nC1 2 0 1n\n.tran 10u");
        let op = dc_operating_point(&d, 0.0).unwrap();
        let w = tran_solve(&d, &op.x0, (0.0, 10e-6), &TranConfig::default()).unwrap();
        for bp in [1e-6, 1.001e-6, 4.001e-6, 4.002e-6] {
            assert!(w.times.iter().any(|&t| (t - bp).abs() < 1e-18), "missing corner {bp}");
        }
    }

    #[test]
    fn bdf2_agrees_with_trapezoidal() {
        let d = dae("V1 in 0 SIN(0 1 1k)\nR1 in out 1k\nC1 out 0 100n\n.tran 2m");
        let op = dc_operating_point(&d, 0.0).unwrap();
        let cfg = TranConfig::with_reltol(1e-5);
        let tr = tran_solve(&d, &op.x0, (0.0, 2e-3), &cfg).unwrap();
        let bd = tran_solve(
            &d,
            &op.x0,
            (0.0, 2e-3),
            &TranConfig {
                method: TranMethod::Bdf2,
                ..cfg.clone()
            },
        )
        .unwrap();
        // both are checked at their own accepted points; resampling one onto
        // the other would measure interpolation error instead
        let out = d.unknown_index("v(out)").unwrap();
        for w in [&tr, &bd] {
            let err = w
                .times
                .iter()
                .enumerate()
                .map(|(i, &t)| (w.values[(out, i)] - rc_sine_exact(t)).abs())
                .fold(0.0, f64::max);
            assert!(err <= 10.0 * 1e-5, "{err}");
        }
    }

    #[test]
    fn rejects_bad_config() {
        let d = dae("R1 1 0 1k\nC1 1 0 1u\n.tran 1m");
        let x0 = DVector::from_element(1, 1.0);
        let cfg = TranConfig {
            h_min: Some(1.0),
            ..TranConfig::default()
        };
        assert!(matches!(
            tran_solve(&d, &x0, (0.0, 1e-3), &cfg),
            Err(TranError::InvalidConfig(_))
        ));
        let cfg = TranConfig {
            h_min: Some(1e-3),
            h_init: Some(1e-3),
            h_max: Some(1e-3),
            reltol: 1e-12,
            abstol_v: 1e-15,
            ..TranConfig::default()
        };
        assert!(matches!(
            tran_solve(&d, &x0, (0.0, 1e-3), &cfg),
            Err(TranError::StepSizeUnderflow { .. })
        ));
    }

    #[test]
    fn resample_midpoints_within_interpolation_bound() {
        let n = 200;
        let times: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
        let vals: Vec<f64> = times.iter().map(|t| (-t).exp()).collect();
        let w = Waveform::new(times.clone(), DMatrix::from_row_slice(1, n + 1, &vals), vec!["x".into()]).unwrap();
        let mids: Vec<f64> = times.windows(2).map(|p| 0.5 * (p[0] + p[1])).collect();
        let r = w.resample(&mids).unwrap();
        let h = 1.0 / n as f64;
        let bound = h * h * 1.0 / 8.0;
        for (k, &t) in mids.iter().enumerate() {
            assert!((r.values[(0, k)] - (-t).exp()).abs() <= bound);
        }
        let same = w.resample(&times).unwrap();
        assert_eq!(same.values, w.values);
    }

    #[test]
    fn tight_tolerance_survives_switching_edges() {
        // source-branch currents of the chain alternate in sign under the
        // trapezoidal rule; step control must not chase them
        let d = dae(crate::decks::INVERTER_CHAIN);
        let op = dc_operating_point(&d, 0.0).unwrap();
        let (w, stats) = tran_solve_stats(&d, &op.x0, (0.0, 80e-9), &TranConfig::with_reltol(1e-7)).unwrap();
        assert_eq!(*w.times.last().unwrap(), 80e-9);
        assert!(stats.accepted < 50_000, "{stats:?}");
    }
}
