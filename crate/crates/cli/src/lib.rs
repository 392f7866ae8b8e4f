//! `simulate`: runs the wavelet and/or transient solver on a netlist and
//! writes waveforms, reports and tolerance sweeps.
//!
//! Exit codes: 0 success, 1 unreadable or invalid input, 2 solver failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use wavesim::harness::{
    self, load, run_transient, run_wavelet, write_atomic, write_report, write_waveform, HarnessError, Method,
    ReportFile, SCHEMA_VERSION,
};
use wavesim::transient::TranConfig;
use wavesim::wavelet::WaveletConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Wavelet,
    Transient,
    Both,
}

impl MethodArg {
    fn methods(self) -> Vec<Method> {
        match self {
            MethodArg::Wavelet => vec![Method::Wavelet],
            MethodArg::Transient => vec![Method::Transient],
            MethodArg::Both => vec![Method::Wavelet, Method::Transient],
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "simulate", version, about = "Adaptive spline-wavelet and transient circuit simulation")]
pub struct Cli {
    /// SPICE-subset netlist with a `.tran` directive.
    #[arg(long)]
    pub netlist: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    pub method: MethodArg,
    /// Wavelet solver tolerance.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Transient relative tolerance [default: tol / 100 with `--method both`,
    /// where the transient run is the reference, otherwise tol].
    #[arg(long)]
    pub reltol: Option<f64>,
    /// Trial spline order.
    #[arg(long, default_value_t = 4)]
    pub order: usize,
    /// Maximal refinement level per interval.
    #[arg(long = "max-level", default_value_t = 8)]
    pub max_level: usize,
    /// Solve the whole time range as one interval.
    #[arg(long = "no-splitting")]
    pub no_splitting: bool,
    #[arg(long = "out-dir", default_value = ".")]
    pub out_dir: PathBuf,
    /// Comma-separated tolerance ladder; runs a sweep instead of single runs.
    #[arg(long, value_delimiter = ',')]
    pub sweep: Option<Vec<f64>>,
}

impl Cli {
    fn wavelet_config(&self) -> WaveletConfig {
        WaveletConfig {
            tol: self.tol,
            order: self.order,
            max_level: self.max_level,
            splitting: !self.no_splitting,
            ..WaveletConfig::default()
        }
    }

    fn reltol(&self) -> f64 {
        self.reltol.unwrap_or(match self.method {
            MethodArg::Both => self.tol / 100.0,
            _ => self.tol,
        })
    }
}

/// Parses `args` (program name first) and runs; diagnostics go to `err`.
pub fn run<I, T>(args: I, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = write!(err, "{e}");
            return code;
        }
    };
    match execute(&cli) {
        Ok(written) => {
            for p in written {
                let _ = writeln!(err, "wrote {}", p.display());
            }
            0
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_solver_failure() {
                2
            } else {
                1
            }
        }
    }
}

fn out_path(dir: &Path, deck: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{deck}.{suffix}"))
}

/// Runs the requested analyses and returns the files written.
pub fn execute(cli: &Cli) -> Result<Vec<PathBuf>, HarnessError> {
    let p = load(&cli.netlist)?;
    std::fs::create_dir_all(&cli.out_dir).map_err(|source| HarnessError::Io {
        path: cli.out_dir.clone(),
        source,
    })?;
    let wcfg = wavelet_config_checked(cli)?;
    let tcfg = TranConfig::with_reltol(cli.reltol());
    let mut written = Vec::new();
    if let Some(ladder) = &cli.sweep {
        let table = harness::sweep(&p, ladder, &cli.method.methods(), &wcfg, &tcfg, harness::threads_from_env())?;
        let csv_path = out_path(&cli.out_dir, &p.name, "sweep.csv");
        write_atomic(&csv_path, &table.to_csv()?)?;
        let json_path = out_path(&cli.out_dir, &p.name, "report.json");
        write_report(&json_path, &table.to_report())?;
        written.extend([csv_path, json_path]);
        return Ok(written);
    }
    let tran = match cli.method {
        MethodArg::Transient | MethodArg::Both => Some(run_transient(&p, &tcfg)?),
        MethodArg::Wavelet => None,
    };
    let wavelet = match cli.method {
        MethodArg::Wavelet | MethodArg::Both => {
            let times = tran.as_ref().map(|t| t.waveform.times.as_slice());
            let mut w = run_wavelet(&p, &wcfg, times)?;
            if let Some(t) = &tran {
                w.report.max_abs_diff = Some(harness::compare(&w.waveform, &t.waveform)?);
            }
            Some(w)
        }
        MethodArg::Transient => None,
    };
    let mut runs = Vec::new();
    for run in wavelet.iter().chain(tran.iter()) {
        let path = out_path(&cli.out_dir, &p.name, &format!("{}.csv", run.report.method.file_tag()));
        write_waveform(&path, &run.waveform)?;
        written.push(path);
        runs.push(run.report.clone());
    }
    let json_path = out_path(&cli.out_dir, &p.name, "report.json");
    write_report(
        &json_path,
        &ReportFile {
            schema_version: SCHEMA_VERSION,
            deck: p.name.clone(),
            runs,
            extra: Default::default(),
        },
    )?;
    written.push(json_path);
    Ok(written)
}

fn wavelet_config_checked(cli: &Cli) -> Result<WaveletConfig, HarnessError> {
    let cfg = cli.wavelet_config();
    cfg.validate()
        .map_err(|e| HarnessError::Invalid(e.to_string()))?;
    if !(cli.reltol() > 0.0) {
        return Err(HarnessError::Invalid("reltol must be positive".into()));
    }
    Ok(cfg)
}
