//! Adaptive spline-wavelet Galerkin simulation of analog circuits.
//!
//! The crate is organised bottom-up:
//!
//! - [`spline`]: non-uniform B-splines, knot insertion, Gauss quadrature
//! - [`mra`]: multiresolution hierarchy over nested grids, thresholding
//! - [`netlist`]: SPICE-subset parser and structural validation
//! - [`mna`]: charge/flux-oriented MNA assembly and DC operating point
//! - [`transient`]: adaptive trapezoidal / BDF2 reference integrator
//! - [`wavelet`]: Galerkin discretization, adaptive Newton, interval splitting
//! - [`harness`]: error metric, run reports, tolerance sweeps, file output

pub mod banded;
pub mod decks;
pub mod harness;
pub mod mna;
pub mod mra;
pub mod netlist;
pub mod spline;
pub mod transient;
pub mod waveform;
pub mod wavelet;
