//! Sampled multi-signal waveforms.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WaveformError {
    #[error("time {t} outside waveform range [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },
    #[error("sample times must be strictly increasing")]
    NonMonotonic,
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Samples of several signals on a common time axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub times: Vec<f64>,
    /// One row per signal, one column per sample time.
    pub values: DMatrix<f64>,
    pub labels: Vec<String>,
}

impl Waveform {
    pub fn new(
        times: Vec<f64>,
        values: DMatrix<f64>,
        labels: Vec<String>,
    ) -> Result<Self, WaveformError> {
        if values.ncols() != times.len() {
            return Err(WaveformError::Shape(format!(
                "{} times but {} sample columns",
                times.len(),
                values.ncols()
            )));
        }
        if values.nrows() != labels.len() {
            return Err(WaveformError::Shape(format!(
                "{} labels but {} signals",
                labels.len(),
                values.nrows()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(WaveformError::NonMonotonic);
        }
        Ok(Self {
            times,
            values,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn nvars(&self) -> usize {
        self.values.nrows()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Signal `var` as a vector over time.
    pub fn signal(&self, var: usize) -> Vec<f64> {
        self.values.row(var).iter().copied().collect()
    }

    /// Piecewise-linear value of every signal at `t`.
    pub fn at(&self, t: f64) -> Result<DVector<f64>, WaveformError> {
        let (start, end) = match (self.times.first(), self.times.last()) {
            (Some(&a), Some(&b)) => (a, b),
            _ => {
                return Err(WaveformError::OutOfRange {
                    t,
                    start: f64::NAN,
                    end: f64::NAN,
                })
            }
        };
        if !(t >= start && t <= end) {
            return Err(WaveformError::OutOfRange { t, start, end });
        }
        let i = self.times.partition_point(|&x| x <= t);
        if i == self.times.len() {
            return Ok(self.values.column(i - 1).into_owned());
        }
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let w = (t - t0) / (t1 - t0);
        Ok(self.values.column(i - 1) * (1.0 - w) + self.values.column(i) * w)
    }

    /// Piecewise-linear resampling onto `times`.
    pub fn resample(&self, times: &[f64]) -> Result<Waveform, WaveformError> {
        let mut values = DMatrix::zeros(self.nvars(), times.len());
        for (c, &t) in times.iter().enumerate() {
            values.set_column(c, &self.at(t)?);
        }
        Waveform::new(times.to_vec(), values, self.labels.clone())
    }
}
