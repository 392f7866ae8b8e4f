//! Charge/flux-oriented modified nodal analysis.
//!
//! The circuit equations are `d/dt q(x) + f(x) = s(t)` with `x` the non-ground
//! node voltages followed by the branch currents of voltage sources and
//! inductors.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::netlist::{self, Circuit, DeviceKind, MosType, SourceSpec, GROUND};

/// Thermal voltage used by the diode model (V).
pub const THERMAL_VOLTAGE: f64 = 0.025852;
/// Shunt conductance across every nonlinear junction (S).
pub const GMIN: f64 = 1e-12;
/// Diode exponent argument above which the exponential is continued linearly.
const EXP_LIMIT: f64 = 40.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MnaError {
    #[error("circuit cannot be assembled: {0}")]
    Build(String),
    #[error("DC operating point did not converge at t = {t}: {reason}")]
    NoDcConvergence { t: f64, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnknownKind {
    Voltage,
    Current,
}

#[derive(Debug, Clone)]
enum Element {
    Resistor {
        a: Option<usize>,
        b: Option<usize>,
        g: f64,
    },
    Capacitor {
        a: Option<usize>,
        b: Option<usize>,
        c: f64,
    },
    Inductor {
        a: Option<usize>,
        b: Option<usize>,
        br: usize,
        l: f64,
    },
    VSource {
        a: Option<usize>,
        b: Option<usize>,
        br: usize,
        src: SourceSpec,
    },
    ISource {
        a: Option<usize>,
        b: Option<usize>,
        src: SourceSpec,
    },
    Diode {
        a: Option<usize>,
        b: Option<usize>,
        is: f64,
        n: f64,
    },
    Mos {
        d: Option<usize>,
        g: Option<usize>,
        s: Option<usize>,
        polarity: f64,
        beta: f64,
        vt: f64,
        lambda: f64,
        cgs: f64,
        cgd: f64,
    },
}

/// Evaluable circuit equations.
#[derive(Debug, Clone)]
pub struct DaeSystem {
    dim: usize,
    names: Vec<String>,
    kinds: Vec<UnknownKind>,
    elements: Vec<Element>,
}

#[inline]
fn volt(x: &DVector<f64>, n: Option<usize>) -> f64 {
    n.map_or(0.0, |i| x[i])
}

#[inline]
fn add_vec(v: &mut DVector<f64>, n: Option<usize>, val: f64) {
    if let Some(i) = n {
        v[i] += val;
    }
}

#[inline]
fn add_mat(m: &mut DMatrix<f64>, r: Option<usize>, c: Option<usize>, val: f64) {
    if let (Some(r), Some(c)) = (r, c) {
        m[(r, c)] += val;
    }
}

/// Stamps a two-terminal conductance-like derivative `g` between `a` and `b`.
#[inline]
fn stamp_pair(m: &mut DMatrix<f64>, a: Option<usize>, b: Option<usize>, g: f64) {
    add_mat(m, a, a, g);
    add_mat(m, a, b, -g);
    add_mat(m, b, a, -g);
    add_mat(m, b, b, g);
}

/// Diode current and conductance, exponential continued linearly at large
/// forward bias.
pub fn diode_current(v: f64, is: f64, n: f64) -> (f64, f64) {
    let nvt = n * THERMAL_VOLTAGE;
    let arg = v / nvt;
    let (e, de) = if arg > EXP_LIMIT {
        let el = EXP_LIMIT.exp();
        (el * (1.0 + arg - EXP_LIMIT), el)
    } else {
        let e = arg.exp();
        (e, e)
    };
    (is * (e - 1.0) + GMIN * v, is * de / nvt + GMIN)
}

/// Level-1 drain current for `vgs`, `vds ≥ 0` in the device's own polarity:
/// returns `(i, ∂i/∂vgs, ∂i/∂vds)`.
pub fn mos_level1(vgs: f64, vds: f64, beta: f64, vt: f64, lambda: f64) -> (f64, f64, f64) {
    let vov = vgs - vt;
    if vov <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let clm = 1.0 + lambda * vds;
    if vds < vov {
        let core = vov * vds - 0.5 * vds * vds;
        (
            beta * core * clm,
            beta * vds * clm,
            beta * ((vov - vds) * clm + core * lambda),
        )
    } else {
        let core = 0.5 * vov * vov;
        (beta * core * clm, beta * vov * clm, beta * core * lambda)
    }
}

/// Drain terminal current of a symmetric MOS device and its derivatives with
/// respect to `(vd, vg, vs)`.
fn mos_terminal(
    vd: f64,
    vg: f64,
    vs: f64,
    polarity: f64,
    beta: f64,
    vt: f64,
    lambda: f64,
) -> (f64, [f64; 3]) {
    let uds = polarity * (vd - vs);
    if uds >= 0.0 {
        let (i, fg, fd) = mos_level1(polarity * (vg - vs), uds, beta, vt, lambda);
        (polarity * i, [fd, fg, -(fg + fd)])
    } else {
        let (i, fg, fd) = mos_level1(polarity * (vg - vd), -uds, beta, vt, lambda);
        (-polarity * i, [fg + fd, -fg, -fd])
    }
}

impl DaeSystem {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `v(node)` for node voltages, `i(device)` for branch currents.
    pub fn unknown_names(&self) -> &[String] {
        &self.names
    }

    pub fn unknown_kinds(&self) -> &[UnknownKind] {
        &self.kinds
    }

    pub fn unknown_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n.eq_ignore_ascii_case(name))
    }

    /// All charges and fluxes of the supported devices are linear in `x`.
    pub fn charge_is_linear(&self) -> bool {
        true
    }

    pub fn eval_q(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut q = DVector::zeros(self.dim);
        for e in &self.elements {
            match *e {
                Element::Capacitor { a, b, c } => {
                    let v = c * (volt(x, a) - volt(x, b));
                    add_vec(&mut q, a, v);
                    add_vec(&mut q, b, -v);
                }
                Element::Inductor { br, l, .. } => q[br] += l * x[br],
                Element::Mos {
                    d, g, s, cgs, cgd, ..
                } => {
                    let qgs = cgs * (volt(x, g) - volt(x, s));
                    let qgd = cgd * (volt(x, g) - volt(x, d));
                    add_vec(&mut q, g, qgs + qgd);
                    add_vec(&mut q, s, -qgs);
                    add_vec(&mut q, d, -qgd);
                }
                _ => {}
            }
        }
        q
    }

    /// `C = dq/dx`; constant for the supported device set.
    pub fn jac_q(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for e in &self.elements {
            match *e {
                Element::Capacitor { a, b, c } => stamp_pair(&mut m, a, b, c),
                Element::Inductor { br, l, .. } => m[(br, br)] += l,
                Element::Mos {
                    d, g, s, cgs, cgd, ..
                } => {
                    stamp_pair(&mut m, g, s, cgs);
                    stamp_pair(&mut m, g, d, cgd);
                }
                _ => {}
            }
        }
        m
    }

    /// Accumulates `f(x)` and, when given, `G = df/dx`. When `abs` is given it
    /// receives the sum of absolute device contributions per row.
    pub fn load_static(
        &self,
        x: &DVector<f64>,
        f: &mut DVector<f64>,
        mut jac: Option<&mut DMatrix<f64>>,
        mut abs: Option<&mut DVector<f64>>,
    ) {
        f.fill(0.0);
        if let Some(j) = jac.as_deref_mut() {
            j.fill(0.0);
        }
        if let Some(a) = abs.as_deref_mut() {
            a.fill(0.0);
        }
        for e in &self.elements {
            match *e {
                Element::Resistor { a, b, g } => {
                    let i = g * (volt(x, a) - volt(x, b));
                    add_vec(f, a, i);
                    add_vec(f, b, -i);
                    if let Some(m) = jac.as_deref_mut() {
                        stamp_pair(m, a, b, g);
                    }
                    if let Some(ab) = abs.as_deref_mut() {
                        add_vec(ab, a, i.abs());
                        add_vec(ab, b, i.abs());
                    }
                }
                Element::Inductor { a, b, br, .. } | Element::VSource { a, b, br, .. } => {
                    let i = x[br];
                    add_vec(f, a, i);
                    add_vec(f, b, -i);
                    let sign = if matches!(e, Element::Inductor { .. }) { -1.0 } else { 1.0 };
                    let v = volt(x, a) - volt(x, b);
                    f[br] += sign * v;
                    if let Some(m) = jac.as_deref_mut() {
                        add_mat(m, a, Some(br), 1.0);
                        add_mat(m, b, Some(br), -1.0);
                        add_mat(m, Some(br), a, sign);
                        add_mat(m, Some(br), b, -sign);
                    }
                    if let Some(ab) = abs.as_deref_mut() {
                        add_vec(ab, a, i.abs());
                        add_vec(ab, b, i.abs());
                        ab[br] += volt(x, a).abs() + volt(x, b).abs();
                    }
                }
                Element::Diode { a, b, is, n } => {
                    let (i, gd) = diode_current(volt(x, a) - volt(x, b), is, n);
                    add_vec(f, a, i);
                    add_vec(f, b, -i);
                    if let Some(m) = jac.as_deref_mut() {
                        stamp_pair(m, a, b, gd);
                    }
                    if let Some(ab) = abs.as_deref_mut() {
                        add_vec(ab, a, i.abs());
                        add_vec(ab, b, i.abs());
                    }
                }
                Element::Mos {
                    d,
                    g,
                    s,
                    polarity,
                    beta,
                    vt,
                    lambda,
                    ..
                } => {
                    let (vd, vg, vs) = (volt(x, d), volt(x, g), volt(x, s));
                    let (id, dd) = mos_terminal(vd, vg, vs, polarity, beta, vt, lambda);
                    let i = id + GMIN * (vd - vs);
                    add_vec(f, d, i);
                    add_vec(f, s, -i);
                    if let Some(m) = jac.as_deref_mut() {
                        for (col, dv) in [(d, dd[0] + GMIN), (g, dd[1]), (s, dd[2] - GMIN)] {
                            add_mat(m, d, col, dv);
                            add_mat(m, s, col, -dv);
                        }
                    }
                    if let Some(ab) = abs.as_deref_mut() {
                        add_vec(ab, d, i.abs());
                        add_vec(ab, s, i.abs());
                    }
                }
                Element::Capacitor { .. } | Element::ISource { .. } => {}
            }
        }
    }

    pub fn eval_f(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut f = DVector::zeros(self.dim);
        self.load_static(x, &mut f, None, None);
        f
    }

    pub fn jac_f(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut f = DVector::zeros(self.dim);
        let mut m = DMatrix::zeros(self.dim, self.dim);
        self.load_static(x, &mut f, Some(&mut m), None);
        m
    }

    /// Per-row sum of absolute static contributions, a magnitude scale for
    /// residual tolerances.
    pub fn eval_f_abs(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut f = DVector::zeros(self.dim);
        let mut a = DVector::zeros(self.dim);
        self.load_static(x, &mut f, None, Some(&mut a));
        a
    }

    pub fn eval_s(&self, t: f64) -> DVector<f64> {
        let mut s = DVector::zeros(self.dim);
        self.load_sources(t, &mut s);
        s
    }

    pub fn load_sources(&self, t: f64, s: &mut DVector<f64>) {
        s.fill(0.0);
        for e in &self.elements {
            match e {
                Element::VSource { br, src, .. } => s[*br] += src.value(t),
                Element::ISource { a, b, src } => {
                    let i = src.value(t);
                    add_vec(s, *a, -i);
                    add_vec(s, *b, i);
                }
                _ => {}
            }
        }
    }

    /// Source corner times strictly inside `(t0, t1)`, sorted and merged.
    pub fn breakpoints(&self, t0: f64, t1: f64) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .elements
            .iter()
            .filter_map(|e| match e {
                Element::VSource { src, .. } | Element::ISource { src, .. } => Some(src.breakpoints(t0, t1)),
                _ => None,
            })
            .flatten()
            .collect();
        out.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out.dedup();
        out
    }
}

pub fn build_dae(c: &Circuit) -> Result<DaeSystem, MnaError> {
    let structural: Vec<String> = netlist::validate(c)
        .into_iter()
        .filter(|d| d.is_structural())
        .map(|d| d.to_string())
        .collect();
    if !structural.is_empty() {
        return Err(MnaError::Build(structural.join("; ")));
    }
    let mut names = Vec::new();
    let mut kinds = Vec::new();
    let mut node_index = std::collections::HashMap::new();
    for n in c.nodes.iter().filter(|n| n.as_str() != GROUND) {
        node_index.insert(n.clone(), names.len());
        names.push(format!("v({n})"));
        kinds.push(UnknownKind::Voltage);
    }
    let node = |n: &String| -> Option<usize> {
        if n == GROUND {
            None
        } else {
            Some(node_index[n])
        }
    };
    let mut elements = Vec::with_capacity(c.devices.len());
    for dev in &c.devices {
        let t = &dev.terminals;
        let el = match dev.kind {
            DeviceKind::Resistor => Element::Resistor {
                a: node(&t[0]),
                b: node(&t[1]),
                g: 1.0 / dev.value(),
            },
            DeviceKind::Capacitor => Element::Capacitor {
                a: node(&t[0]),
                b: node(&t[1]),
                c: dev.value(),
            },
            DeviceKind::Inductor | DeviceKind::VoltageSource => {
                let br = names.len();
                names.push(format!("i({})", dev.name));
                kinds.push(UnknownKind::Current);
                if dev.kind == DeviceKind::Inductor {
                    Element::Inductor {
                        a: node(&t[0]),
                        b: node(&t[1]),
                        br,
                        l: dev.value(),
                    }
                } else {
                    Element::VSource {
                        a: node(&t[0]),
                        b: node(&t[1]),
                        br,
                        src: dev
                            .source
                            .clone()
                            .ok_or_else(|| MnaError::Build(format!("{} has no waveform", dev.name)))?,
                    }
                }
            }
            DeviceKind::CurrentSource => Element::ISource {
                a: node(&t[0]),
                b: node(&t[1]),
                src: dev
                    .source
                    .clone()
                    .ok_or_else(|| MnaError::Build(format!("{} has no waveform", dev.name)))?,
            },
            DeviceKind::Diode => Element::Diode {
                a: node(&t[0]),
                b: node(&t[1]),
                is: dev.param("IS").unwrap_or(1e-14),
                n: dev.param("N").unwrap_or(1.0),
            },
            DeviceKind::Mos => {
                let pmos = dev.mos_type == Some(MosType::Pmos);
                let vt0 = dev.param("VT0").unwrap_or(if pmos { -0.5 } else { 0.5 });
                Element::Mos {
                    d: node(&t[0]),
                    g: node(&t[1]),
                    s: node(&t[2]),
                    polarity: if pmos { -1.0 } else { 1.0 },
                    beta: dev.param("KP").unwrap_or(100e-6) * dev.param("W").unwrap_or(1e-6)
                        / dev.param("L").unwrap_or(1e-6),
                    vt: vt0.abs(),
                    lambda: dev.param("LAMBDA").unwrap_or(0.0),
                    cgs: dev.param("CGS").unwrap_or(0.0),
                    cgd: dev.param("CGD").unwrap_or(0.0),
                }
            }
        };
        elements.push(el);
    }
    Ok(DaeSystem {
        dim: names.len(),
        names,
        kinds,
        elements,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub x0: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
}

const DC_MAX_ITER: usize = 100;
/// Largest node-voltage change allowed in one DC Newton update (V).
const DC_MAX_VSTEP: f64 = 2.0;

/// Damped Newton on `f(x) + gshunt·v − scale·s(t) = 0`. Returns the solution
/// and iteration count, or `None` when it fails.
fn dc_newton(
    dae: &DaeSystem,
    x_init: &DVector<f64>,
    s: &DVector<f64>,
    gshunt: f64,
    iterations: &mut usize,
) -> Option<DVector<f64>> {
    let n = dae.dim();
    let mut x = x_init.clone();
    let mut f = DVector::zeros(n);
    let mut g = DMatrix::zeros(n, n);
    let mut abs = DVector::zeros(n);
    let mut small_steps = 0;
    for _ in 0..DC_MAX_ITER {
        *iterations += 1;
        dae.load_static(&x, &mut f, Some(&mut g), Some(&mut abs));
        for i in 0..n {
            if dae.kinds[i] == UnknownKind::Voltage {
                f[i] += gshunt * x[i];
                g[(i, i)] += gshunt;
            }
        }
        let r = &f - s;
        let mut dx = g.clone().lu().solve(&(-&r))?;
        if !dx.iter().all(|v| v.is_finite()) {
            return None;
        }
        let vmax = (0..n)
            .filter(|&i| dae.kinds[i] == UnknownKind::Voltage)
            .map(|i| dx[i].abs())
            .fold(0.0, f64::max);
        if vmax > DC_MAX_VSTEP {
            dx *= DC_MAX_VSTEP / vmax;
        }
        x += &dx;
        let step_ok = (0..n).all(|i| dx[i].abs() <= 1e-13 + 1e-11 * x[i].abs());
        let resid_ok = (0..n).all(|i| r[i].abs() <= 1e-9 * (abs[i] + s[i].abs()) + 1e-15);
        if step_ok && resid_ok {
            // one more pass tightens the last quadratic step
            small_steps += 1;
            if small_steps >= 2 {
                return Some(x);
            }
        }
    }
    None
}

/// DC operating point at `t0`: plain Newton, then gmin stepping, then source
/// stepping.
pub fn dc_operating_point(dae: &DaeSystem, t0: f64) -> Result<OperatingPoint, MnaError> {
    let n = dae.dim();
    let s = dae.eval_s(t0);
    let zero = DVector::zeros(n);
    let mut iterations = 0;
    if let Some(x) = dc_newton(dae, &zero, &s, 0.0, &mut iterations) {
        return Ok(OperatingPoint {
            x0: x,
            converged: true,
            iterations,
        });
    }
    // gmin stepping
    let mut x = zero.clone();
    let mut ok = true;
    let mut gmin = 1e-3;
    while gmin >= 1e-12 * 0.999 {
        match dc_newton(dae, &x, &s, gmin, &mut iterations) {
            Some(xn) => x = xn,
            None => {
                ok = false;
                break;
            }
        }
        gmin /= 10.0;
    }
    if ok {
        if let Some(xn) = dc_newton(dae, &x, &s, 0.0, &mut iterations) {
            return Ok(OperatingPoint {
                x0: xn,
                converged: true,
                iterations,
            });
        }
    }
    // source stepping
    let mut x = zero;
    let mut lambda: f64 = 0.0;
    let mut step: f64 = 0.1;
    while lambda < 1.0 {
        let next = (lambda + step).min(1.0);
        match dc_newton(dae, &x, &(&s * next), 0.0, &mut iterations) {
            Some(xn) => {
                x = xn;
                lambda = next;
                step = (step * 2.0).min(0.25);
            }
            None => {
                step /= 2.0;
                if step < 1e-4 {
                    return Err(MnaError::NoDcConvergence {
                        t: t0,
                        reason: format!(
                            "Newton, gmin stepping and source stepping failed (source ramp stalled at {lambda:.4})"
                        ),
                    });
                }
            }
        }
    }
    Ok(OperatingPoint {
        x0: x,
        converged: true,
        iterations,
    })
}
