//! Error metric, run reports, tolerance sweeps and file output.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::mna::{build_dae, dc_operating_point, DaeSystem, MnaError};
use crate::netlist::{parse_bytes, validate, Circuit, NetlistError};
use crate::transient::{tran_solve_stats, TranConfig, TranError};
use crate::waveform::{Waveform, WaveformError};
use crate::wavelet::{sample_solution, solve_with_splitting, SolverError, WaveletConfig, WaveletSolution};

/// Version of the JSON report layout.
pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable capping the number of concurrent sweep cells.
pub const THREADS_ENV: &str = "SIM_THREADS";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Netlist(#[from] NetlistError),
    #[error("invalid circuit: {0}")]
    Invalid(String),
    #[error(transparent)]
    Mna(#[from] MnaError),
    #[error("transient analysis failed: {0}")]
    Transient(#[from] TranError),
    #[error("wavelet analysis failed: {0}")]
    Wavelet(#[from] SolverError),
    #[error("waveform grids differ: {0}")]
    GridMismatch(String),
    #[error(transparent)]
    Waveform(#[from] WaveformError),
    #[error("report serialization: {0}")]
    Serialize(String),
}

impl HarnessError {
    /// Whether the input was accepted and a solver then failed, as opposed
    /// to unreadable or invalid input.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            HarnessError::Mna(MnaError::NoDcConvergence { .. }) | HarnessError::Transient(_) | HarnessError::Wavelet(_)
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Maximal absolute differences between two waveforms on the same grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub per_unknown: BTreeMap<String, f64>,
    pub overall: f64,
}

/// Per-unknown maximum of `|a - b|` over all sample times. Both waveforms
/// must share the time grid and the unknown ordering.
pub fn compare(a: &Waveform, reference: &Waveform) -> Result<DiffReport, HarnessError> {
    if a.labels != reference.labels {
        return Err(HarnessError::GridMismatch(format!(
            "unknowns {:?} vs {:?}",
            a.labels, reference.labels
        )));
    }
    if a.times != reference.times {
        return Err(HarnessError::GridMismatch(format!(
            "{} vs {} sample times",
            a.len(),
            reference.len()
        )));
    }
    let mut per_unknown = BTreeMap::new();
    let mut overall = 0.0f64;
    for (v, name) in a.labels.iter().enumerate() {
        let m = a
            .values
            .row(v)
            .iter()
            .zip(reference.values.row(v).iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        overall = overall.max(m);
        per_unknown.insert(name.clone(), m);
    }
    Ok(DiffReport { per_unknown, overall })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Wavelet,
    Transient,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Wavelet => "wavelet",
            Method::Transient => "transient",
        }
    }

    /// File tag of the waveform output.
    pub fn file_tag(self) -> &'static str {
        match self {
            Method::Wavelet => "wavelet",
            Method::Transient => "tran",
        }
    }
}

/// Summary of one solver run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    /// Wall-clock time of the solve call only.
    pub cpu_seconds: f64,
    /// Spline knots over all intervals, or transient time points.
    pub grid_points: usize,
    pub newton_total: usize,
    pub intervals: usize,
    /// Difference to the reference run, when there is one.
    pub max_abs_diff: Option<DiffReport>,
    pub tol_used: f64,
    /// Method-specific fields; unrecognised fields read back land here.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

/// Contents of `<deck>.report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub schema_version: u32,
    pub deck: String,
    pub runs: Vec<RunReport>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

/// A parsed circuit with its equations and DC starting point.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub name: String,
    pub circuit: Circuit,
    pub dae: DaeSystem,
    pub x0: DVector<f64>,
    pub tspan: (f64, f64),
}

/// Parses, validates and assembles a deck, then computes its operating point.
pub fn prepare(name: &str, text: &[u8]) -> Result<Prepared, HarnessError> {
    let circuit = parse_bytes(text)?;
    let structural: Vec<String> = validate(&circuit)
        .into_iter()
        .filter(|d| d.is_structural())
        .map(|d| d.to_string())
        .collect();
    if !structural.is_empty() {
        return Err(HarnessError::Invalid(structural.join("; ")));
    }
    let (tstop, _) = circuit
        .tran()
        .ok_or_else(|| HarnessError::Invalid("no .tran analysis".into()))?;
    let dae = build_dae(&circuit).map_err(|e| match e {
        MnaError::Build(m) => HarnessError::Invalid(m),
        other => other.into(),
    })?;
    let op = dc_operating_point(&dae, 0.0)?;
    Ok(Prepared {
        name: name.to_string(),
        circuit,
        dae,
        x0: op.x0,
        tspan: (0.0, tstop),
    })
}

/// Reads a netlist file; the deck name is the file stem.
pub fn load(path: &Path) -> Result<Prepared, HarnessError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let name = path
        .file_stem()
        .map_or_else(|| "deck".to_string(), |s| s.to_string_lossy().into_owned());
    prepare(&name, &bytes)
}

/// Output of one solver run.
#[derive(Debug, Clone)]
pub struct Run {
    pub report: RunReport,
    /// Transient: the accepted steps. Wavelet: samples of the spline solution.
    pub waveform: Waveform,
    pub solution: Option<WaveletSolution>,
}

fn elapsed_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64().max(1e-9)
}

pub fn run_transient(p: &Prepared, cfg: &TranConfig) -> Result<Run, HarnessError> {
    let start = Instant::now();
    let (waveform, stats) = tran_solve_stats(&p.dae, &p.x0, p.tspan, cfg)?;
    let cpu_seconds = elapsed_since(start);
    let mut extra = BTreeMap::new();
    extra.insert("rejected_steps".into(), Value::from(stats.rejected));
    extra.insert("integrator".into(), Value::from(format!("{:?}", cfg.method).to_lowercase()));
    Ok(Run {
        report: RunReport {
            method: Method::Transient,
            cpu_seconds,
            grid_points: waveform.len(),
            newton_total: stats.newton_iterations,
            intervals: 1,
            max_abs_diff: None,
            tol_used: cfg.reltol,
            extra,
        },
        waveform,
        solution: None,
    })
}

/// Sample times for writing a wavelet solution: every knot plus
/// `per_span - 1` equally spaced interior points of each span.
pub fn spline_sample_times(ws: &WaveletSolution, per_span: usize) -> Vec<f64> {
    let bp = ws.breakpoints();
    let mut times = Vec::with_capacity(bp.len() * per_span);
    for w in bp.windows(2) {
        for i in 0..per_span {
            times.push(w[0] + (w[1] - w[0]) * i as f64 / per_span as f64);
        }
    }
    times.extend(bp.last());
    times
}

/// Solves with interval splitting; the waveform samples each span at four
/// points unless `times` is given.
pub fn run_wavelet(p: &Prepared, cfg: &WaveletConfig, times: Option<&[f64]>) -> Result<Run, HarnessError> {
    let start = Instant::now();
    let ws = solve_with_splitting(&p.dae, &p.x0, p.tspan, cfg)?;
    let cpu_seconds = elapsed_since(start);
    let times = match times {
        Some(t) => t.to_vec(),
        None => spline_sample_times(&ws, 4),
    };
    let waveform = sample_solution(&ws, &times)?;
    let mut extra = BTreeMap::new();
    extra.insert("failed_attempts".into(), Value::from(ws.failed_attempts));
    extra.insert("order".into(), Value::from(cfg.order));
    Ok(Run {
        report: RunReport {
            method: Method::Wavelet,
            cpu_seconds,
            grid_points: ws.grid_points(),
            newton_total: ws.newton_total(),
            intervals: ws.intervals.len(),
            max_abs_diff: None,
            tol_used: cfg.tol,
            extra,
        },
        waveform,
        solution: Some(ws),
    })
}

/// Difference of a run to a reference waveform on the run's own time grid
/// (wavelet runs are re-sampled onto the reference grid first).
pub fn diff_to_reference(run: &Run, reference: &Waveform) -> Result<DiffReport, HarnessError> {
    match &run.solution {
        Some(ws) => compare(&sample_solution(ws, &reference.times)?, reference),
        None => compare(&run.waveform, &reference.resample(&run.waveform.times)?),
    }
}

/// Writes `bytes` through a temporary file in the same directory, so
/// readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".part");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// CSV with header `time,<names…>` and 17 significant digits per value.
pub fn waveform_csv(w: &Waveform) -> Result<Vec<u8>, HarnessError> {
    let mut out = csv::Writer::from_writer(Vec::new());
    let ser = |e: csv::Error| HarnessError::Serialize(e.to_string());
    let mut header = vec!["time".to_string()];
    header.extend(w.labels.iter().cloned());
    out.write_record(&header).map_err(ser)?;
    for (c, t) in w.times.iter().enumerate() {
        let mut rec = vec![format!("{t:.16e}")];
        rec.extend(w.values.column(c).iter().map(|v| format!("{v:.16e}")));
        out.write_record(&rec).map_err(ser)?;
    }
    out.into_inner().map_err(|e| HarnessError::Serialize(e.to_string()))
}

pub fn write_waveform(path: &Path, w: &Waveform) -> Result<(), HarnessError> {
    write_atomic(path, &waveform_csv(w)?)
}

pub fn write_report(path: &Path, report: &ReportFile) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(report).map_err(|e| HarnessError::Serialize(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// One cell of a tolerance sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub tol: f64,
    /// The run summary, or the failure message.
    pub outcome: Result<RunReport, String>,
}

impl SweepRow {
    pub fn max_abs_diff(&self) -> Option<f64> {
        self.outcome
            .as_ref()
            .ok()
            .and_then(|r| r.max_abs_diff.as_ref())
            .map(|d| d.overall)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub deck: String,
    pub reference: RunReport,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Rows of one method in ladder order.
    pub fn rows_of(&self, method: Method) -> Vec<&SweepRow> {
        self.rows.iter().filter(|r| r.method == method).collect()
    }

    /// Columns `method,tol,status,cpu_seconds,grid_points,newton_total,
    /// intervals,max_abs_diff,error`; failed cells leave the numbers empty.
    pub fn to_csv(&self) -> Result<Vec<u8>, HarnessError> {
        let ser = |e: csv::Error| HarnessError::Serialize(e.to_string());
        let mut out = csv::Writer::from_writer(Vec::new());
        out.write_record([
            "method",
            "tol",
            "status",
            "cpu_seconds",
            "grid_points",
            "newton_total",
            "intervals",
            "max_abs_diff",
            "error",
        ])
        .map_err(ser)?;
        for row in &self.rows {
            let tol = format!("{:e}", row.tol);
            let rec = match &row.outcome {
                Ok(r) => [
                    row.method.name().to_string(),
                    tol,
                    "ok".into(),
                    format!("{:.6e}", r.cpu_seconds),
                    r.grid_points.to_string(),
                    r.newton_total.to_string(),
                    r.intervals.to_string(),
                    row.max_abs_diff().map_or(String::new(), |d| format!("{d:.6e}")),
                    String::new(),
                ],
                Err(msg) => [
                    row.method.name().to_string(),
                    tol,
                    "failed".into(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    msg.clone(),
                ],
            };
            out.write_record(&rec).map_err(ser)?;
        }
        out.into_inner().map_err(|e| HarnessError::Serialize(e.to_string()))
    }

    pub fn to_report(&self) -> ReportFile {
        let mut extra = BTreeMap::new();
        extra.insert(
            "sweep".into(),
            serde_json::to_value(&self.rows).expect("sweep rows serialize"),
        );
        let mut reference = self.reference.clone();
        reference.extra.insert("role".into(), Value::from("reference"));
        ReportFile {
            schema_version: SCHEMA_VERSION,
            deck: self.deck.clone(),
            runs: vec![reference],
            extra,
        }
    }
}

/// Sweep parallelism from [`THREADS_ENV`], if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
}

/// Runs every `(method, tol)` cell of the ladder. The reference is a
/// transient run at `min(ladder) / 100`; a failed cell becomes a failed row.
pub fn sweep(
    p: &Prepared,
    ladder: &[f64],
    methods: &[Method],
    wavelet_base: &WaveletConfig,
    tran_base: &TranConfig,
    threads: Option<usize>,
) -> Result<SweepTable, HarnessError> {
    if ladder.is_empty() || ladder.iter().any(|&t| !(t > 0.0)) {
        return Err(HarnessError::Invalid("tolerance ladder must be non-empty and positive".into()));
    }
    let finest = ladder.iter().copied().fold(f64::INFINITY, f64::min);
    let reference = run_transient(
        p,
        &TranConfig {
            reltol: finest / 100.0,
            ..tran_base.clone()
        },
    )?;
    let cells: Vec<(Method, f64)> = methods
        .iter()
        .flat_map(|&m| ladder.iter().map(move |&t| (m, t)))
        .collect();
    let cell = |&(method, tol): &(Method, f64)| {
        let run = match method {
            Method::Wavelet => run_wavelet(
                p,
                &WaveletConfig {
                    tol,
                    ..wavelet_base.clone()
                },
                Some(&[]),
            ),
            Method::Transient => run_transient(
                p,
                &TranConfig {
                    reltol: tol,
                    ..tran_base.clone()
                },
            ),
        };
        let outcome = run
            .and_then(|mut r| {
                r.report.max_abs_diff = Some(diff_to_reference(&r, &reference.waveform)?);
                Ok(r.report)
            })
            .map_err(|e| e.to_string());
        SweepRow { method, tol, outcome }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let rows = match builder.build() {
        Ok(pool) => pool.install(|| cells.par_iter().map(cell).collect()),
        Err(_) => cells.iter().map(cell).collect(),
    };
    Ok(SweepTable {
        deck: p.name.clone(),
        reference: reference.report,
        rows,
    })
}

/// Whether `values` never grow by more than `factor` from one entry to the
/// next.
pub fn monotone_within(values: &[f64], factor: f64) -> bool {
    values.windows(2).all(|w| w[1] <= factor * w[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decks;
    use nalgebra::DMatrix;

    fn wave(values: &[f64], times: &[f64]) -> Waveform {
        let n = times.len();
        Waveform::new(
            times.to_vec(),
            DMatrix::from_row_slice(values.len() / n, n, values),
            (0..values.len() / n).map(|i| format!("x{i}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_waveforms_compare_to_zero() {
        let a = wave(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[0.0, 1.0, 2.0]);
        let d = compare(&a, &a).unwrap();
        assert_eq!(d.overall, 0.0);
        assert!(d.per_unknown.values().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_offset_on_one_unknown() {
        let a = wave(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[0.0, 1.0, 2.0]);
        let b = wave(&[1.0, 2.0, 3.0, 4.01, 5.01, 6.01], &[0.0, 1.0, 2.0]);
        let d = compare(&b, &a).unwrap();
        assert_eq!(d.per_unknown["x0"], 0.0);
        assert!((d.per_unknown["x1"] - 0.01).abs() < 1e-12);
        assert_eq!(d.overall, d.per_unknown["x1"]);
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let a = wave(&[1.0, 2.0, 3.0], &[0.0, 1.0, 2.0]);
        let b = wave(&[1.0, 2.0, 3.0], &[0.0, 1.5, 2.0]);
        assert!(matches!(compare(&a, &b), Err(HarnessError::GridMismatch(_))));
        let c = wave(&[1.0, 2.0], &[0.0, 1.0]);
        assert!(matches!(compare(&a, &c), Err(HarnessError::GridMismatch(_))));
    }

    #[test]
    fn csv_header_and_full_precision() {
        let a = wave(&[0.1, 1.0 / 3.0], &[0.0, 1e-3]);
        let text = String::from_utf8(waveform_csv(&a).unwrap()).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("time,x0"));
        let row: Vec<f64> = lines.nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(row, vec![1e-3, 1.0 / 3.0]);
    }

    #[test]
    fn report_keeps_unknown_fields() {
        let text = r#"{"schema_version":1,"deck":"rc","runs":[{"method":"wavelet","cpu_seconds":0.5,
            "grid_points":10,"newton_total":3,"intervals":1,"max_abs_diff":null,"tol_used":1e-4,
            "order":4,"future":{"a":1}}],"comment":"kept"}"#;
        let r: ReportFile = serde_json::from_str(text).unwrap();
        assert_eq!(r.runs[0].extra["future"]["a"], 1);
        assert_eq!(r.extra["comment"], "kept");
        let back: ReportFile = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn invalid_and_solver_errors_are_distinguished() {
        let e = prepare("x", b"V1 a 0 1\nV2 a 0 2\n.tran 1m").unwrap_err();
        assert!(!e.is_solver_failure(), "{e}");
        let e = prepare("x", b"R1 a 0 1k\nV1 a 0 1").unwrap_err();
        assert!(!e.is_solver_failure() && e.to_string().contains(".tran"));
        assert!(HarnessError::Wavelet(SolverError::SingularSystem).is_solver_failure());
    }

    #[test]
    fn transient_run_report_counts_points() {
        let p = prepare("rc", decks::RC.as_bytes()).unwrap();
        let r = run_transient(&p, &TranConfig::with_reltol(1e-3)).unwrap();
        assert_eq!(r.report.grid_points, r.waveform.len());
        assert!(r.report.grid_points >= 2 && r.report.cpu_seconds > 0.0);
        assert_eq!(r.report.method, Method::Transient);
    }

    #[test]
    fn atomic_write_leaves_no_temporary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn monotone_with_noise_factor() {
        assert!(monotone_within(&[1e-2, 1.5e-2, 1e-3, 1e-4], 2.0));
        assert!(!monotone_within(&[1e-3, 3e-3], 2.0));
    }
}
