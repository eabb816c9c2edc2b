//! Scale-dependent stochastic analysis of scalar time series.
//!
//! The crate estimates drift and diffusion (Kramers-Moyal) coefficients of
//! return distributions across a logarithmic hierarchy of time-lags, smooths
//! them into a coefficient model, integrates the resulting Fokker-Planck
//! equation over the scale variable, and fits the generalized Student-t
//! (q-Gaussian) family that the evolution produces. A seeded Langevin
//! simulator generates synthetic ground-truth ensembles so the whole pipeline
//! can be validated end to end without proprietary market data.
//!
//! Typical flow:
//!
//! 1. [`series`] — ingest a `timestamp,value` CSV, compute log-returns at a
//!    ladder of lags, normalize by the reference-scale standard deviation.
//! 2. [`density`] — joint/conditional histograms between two scales and the
//!    Chapman-Kolmogorov Markovianity test.
//! 3. [`km`] — finite-increment Kramers-Moyal curves, polynomial fits, the
//!    increment-to-zero extrapolation and the fourth-order truncation check.
//! 4. [`coeff`] — the smoothed scale-dependence of the five coefficients.
//! 5. [`fpe`] — explicit finite-difference evolution of the density.
//! 6. [`qgauss`] — the q-Gaussian solution family and tail-exponent fits.
//! 7. [`langevin`] — the Euler-Maruyama oracle simulator.

pub mod coeff;
pub mod density;
pub mod fpe;
pub mod km;
pub mod langevin;
pub mod qgauss;
pub mod series;
pub mod wls;

pub use coeff::{CoefficientModel, CoefficientSet, ModelError};
pub use density::{
    BinningSpec, CkConfig, CkTestReport, ConditionalDensity, ConditionalPdf, DensityError,
    Histogram1D,
};
pub use fpe::{Boundary, PdfGrid, SolverConfig, SolverError};
pub use km::{DiffusionFit, DriftFit, FitRange, KmCurve, KmError, KmLimit, KmOrder, PawulaReport};
pub use langevin::{InitialState, SimError, SimSpec};
pub use qgauss::{QGaussError, QGaussianFit};
pub use series::{PriceSeries, ReturnSeries, ScaleMap, SeriesError};
