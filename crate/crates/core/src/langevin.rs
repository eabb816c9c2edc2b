//! Euler-Maruyama simulation of the Langevin process driven by linear drift
//! and quadratic diffusion, in the Ito convention.
//!
//! The update is
//!
//! ```text
//! x <- x + (-a1 x + a0) dtau + sqrt(2 (b0 + b1 x + b2 x^2)) sqrt(dtau) xi
//! ```
//!
//! with independent standard normal `xi`. Paths carry independent, derived
//! random streams (one ChaCha stream per path index), so ensembles are
//! bit-reproducible for a given seed regardless of thread scheduling.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::coeff::CoefficientModel;
use crate::series::ReturnSeries;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation spec: {0}")]
    BadSpec(String),
    #[error("diffusion became negative at x = {x} (tau = {tau}): b0+b1*x+b2*x^2 = {d2}")]
    NegativeDiffusion { x: f64, tau: f64, d2: f64 },
    #[error("tail-sample exponent must be positive, got mu = {0}")]
    NonPositiveMu(f64),
}

/// Initial distribution of the ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    Delta { x0: f64 },
    Gaussian { mean: f64, sigma: f64 },
}

impl InitialState {
    fn draw(&self, rng: &mut ChaCha12Rng) -> f64 {
        match *self {
            InitialState::Delta { x0 } => x0,
            InitialState::Gaussian { mean, sigma } => {
                let z: f64 = rng.sample(StandardNormal);
                mean + sigma * z
            }
        }
    }
}

/// Coefficient source: fixed values or a scale-dependent model evaluated at
/// the running scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimCoefficients {
    Constant {
        a1: f64,
        a0: f64,
        b0: f64,
        b1: f64,
        b2: f64,
    },
    Model(Box<CoefficientModel>),
}

impl SimCoefficients {
    fn at(&self, tau: f64) -> (f64, f64, f64, f64, f64) {
        match self {
            SimCoefficients::Constant { a1, a0, b0, b1, b2 } => (*a1, *a0, *b0, *b1, *b2),
            SimCoefficients::Model(m) => {
                let c = m.eval(tau);
                (c.a1, c.a0, c.b0, c.b1, c.b2)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub coefficients: SimCoefficients,
    /// Integration step in scale units.
    pub dtau_sim: f64,
    pub n_paths: usize,
    /// Scale label of the initial ensemble; snapshots are labeled
    /// `tau_start + offset`.
    pub tau_start: f64,
    /// Horizon in scale units from the start.
    pub total_tau: f64,
    /// Snapshot offsets from the start, each snapped to the step grid.
    pub snapshot_offsets: Vec<f64>,
    pub seed: u64,
    pub initial: InitialState,
    /// Reflecting barrier (in reference-deviation units); hits are counted
    /// and a healthy run has none.
    pub barrier: f64,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            coefficients: SimCoefficients::Constant {
                a1: 1.0,
                a0: 0.0,
                b0: 0.5,
                b1: 0.0,
                b2: 0.2,
            },
            dtau_sim: 0.01,
            n_paths: 10_000,
            tau_start: 0.0,
            total_tau: 2.0,
            snapshot_offsets: vec![2.0],
            seed: 0,
            initial: InitialState::Gaussian {
                mean: 0.0,
                sigma: 1.0,
            },
            barrier: 100.0,
        }
    }
}

/// Ensemble states recorded at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSnapshot {
    /// Scale label (`tau_start + actual offset`).
    pub tau: f64,
    /// Offset actually used after snapping to the step grid.
    pub tau_offset: f64,
    pub states: Vec<f64>,
}

impl EnsembleSnapshot {
    /// View the ensemble as a return series keyed by path index, the same
    /// shape the ingestion stage produces, so the estimation pipeline
    /// consumes simulated data unchanged.
    pub fn to_return_series(&self) -> ReturnSeries {
        ReturnSeries {
            lag_secs: 1,
            start_times: (0..self.states.len() as i64).collect(),
            returns: self.states.clone(),
            sigma_ref: None,
            normalized: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub snapshots: Vec<EnsembleSnapshot>,
    pub barrier_hits: u64,
    pub steps_taken: usize,
}

/// Run the ensemble. Snapshot offsets are snapped to the nearest integration
/// step; offset 0 records the initial ensemble.
pub fn simulate(spec: &SimSpec) -> Result<SimOutput, SimError> {
    if !(spec.dtau_sim > 0.0) {
        return Err(SimError::BadSpec(format!(
            "dtau_sim must be positive, got {}",
            spec.dtau_sim
        )));
    }
    if spec.n_paths == 0 {
        return Err(SimError::BadSpec("n_paths must be positive".into()));
    }
    if spec.total_tau < 0.0 {
        return Err(SimError::BadSpec("total_tau must be non-negative".into()));
    }
    if !(spec.barrier > 0.0) {
        return Err(SimError::BadSpec("barrier must be positive".into()));
    }
    let n_steps = (spec.total_tau / spec.dtau_sim).round() as usize;
    let mut snap_steps: Vec<usize> = spec
        .snapshot_offsets
        .iter()
        .map(|&off| {
            if off < 0.0 || off > spec.total_tau + 0.5 * spec.dtau_sim {
                Err(SimError::BadSpec(format!(
                    "snapshot offset {off} outside [0, {}]",
                    spec.total_tau
                )))
            } else {
                Ok(((off / spec.dtau_sim).round() as usize).min(n_steps))
            }
        })
        .collect::<Result<_, _>>()?;
    snap_steps.sort_unstable();
    snap_steps.dedup();
    let n_snapshots = snap_steps.len();

    struct PathResult {
        values: Vec<f64>,
        barrier_hits: u64,
    }

    let per_path: Result<Vec<PathResult>, SimError> = (0..spec.n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
            rng.set_stream(path as u64 + 1);
            let mut x = spec.initial.draw(&mut rng);
            let mut values = Vec::with_capacity(n_snapshots);
            let mut barrier_hits = 0u64;
            let mut next_snap = 0usize;
            if next_snap < n_snapshots && snap_steps[next_snap] == 0 {
                values.push(x);
                next_snap += 1;
            }
            for step in 1..=n_steps {
                let tau = spec.tau_start + (step - 1) as f64 * spec.dtau_sim;
                let (a1, a0, b0, b1, b2) = spec.coefficients.at(tau);
                let d2 = b0 + b1 * x + b2 * x * x;
                if d2 < 0.0 {
                    return Err(SimError::NegativeDiffusion { x, tau, d2 });
                }
                let xi: f64 = rng.sample(StandardNormal);
                x += (-a1 * x + a0) * spec.dtau_sim
                    + (2.0 * d2 * spec.dtau_sim).sqrt() * xi;
                if x.abs() > spec.barrier {
                    barrier_hits += 1;
                    x = x.signum() * (2.0 * spec.barrier - x.abs());
                }
                if next_snap < n_snapshots && snap_steps[next_snap] == step {
                    values.push(x);
                    next_snap += 1;
                }
            }
            Ok(PathResult {
                values,
                barrier_hits,
            })
        })
        .collect();
    let per_path = per_path?;

    let barrier_hits = per_path.iter().map(|p| p.barrier_hits).sum();
    let snapshots = snap_steps
        .iter()
        .enumerate()
        .map(|(si, &step)| {
            let tau_offset = step as f64 * spec.dtau_sim;
            EnsembleSnapshot {
                tau: spec.tau_start + tau_offset,
                tau_offset,
                states: per_path.iter().map(|p| p.values[si]).collect(),
            }
        })
        .collect();

    Ok(SimOutput {
        snapshots,
        barrier_hits,
        steps_taken: n_steps,
    })
}

/// Draw `n` samples from the q-Gaussian density with the given scales via the
/// inverse CDF of the matching Student-t: `x = sqrt(b0/(b2 mu)) T_mu`.
/// `b2 = 0` degenerates to the Gaussian with variance `b0`.
pub fn sample_qgaussian(
    mu: f64,
    b0: f64,
    b2: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>, SimError> {
    if b2 > 0.0 && !(mu > 0.0) {
        return Err(SimError::NonPositiveMu(mu));
    }
    if !(b0 > 0.0) || b2 < 0.0 {
        return Err(SimError::BadSpec(format!(
            "scales must satisfy b0 > 0, b2 >= 0; got b0 = {b0}, b2 = {b2}"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    if n == 0 {
        return Ok(Vec::new());
    }
    if b2 == 0.0 {
        let sigma = b0.sqrt();
        return Ok((0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                sigma * z
            })
            .collect());
    }
    let student = StudentsT::new(0.0, 1.0, mu)
        .map_err(|e| SimError::BadSpec(format!("student-t setup failed: {e}")))?;
    let scale = (b0 / (b2 * mu)).sqrt();
    Ok((0..n)
        .map(|_| {
            // Uniform in the open interval to keep the inverse CDF finite.
            let u: f64 = rng.random::<f64>().clamp(1e-16, 1.0 - 1e-16);
            scale * student.inverse_cdf(u)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn constant(a1: f64, a0: f64, b0: f64, b1: f64, b2: f64) -> SimCoefficients {
        SimCoefficients::Constant { a1, a0, b0, b1, b2 }
    }

    #[test]
    fn noise_free_run_decays_exponentially() {
        let spec = SimSpec {
            coefficients: constant(1.0, 0.0, 0.0, 0.0, 0.0),
            dtau_sim: 0.001,
            n_paths: 3,
            tau_start: 0.0,
            total_tau: 1.0,
            snapshot_offsets: vec![1.0],
            seed: 7,
            initial: InitialState::Delta { x0 : 2.0 },
            barrier: 100.0,
        };
        let out = simulate(&spec).unwrap();
        let x_end = out.snapshots[0].states[0];
        assert_relative_eq!(x_end, 2.0 * (-1.0f64).exp(), max_relative = 2e-3);
        assert_eq!(out.barrier_hits, 0);
    }

    #[test]
    fn ou_ensemble_variance_approaches_b0_over_a1() {
        let spec = SimSpec {
            coefficients: constant(1.0, 0.0, 0.5, 0.0, 0.0),
            dtau_sim: 0.01,
            n_paths: 20_000,
            tau_start: 0.0,
            total_tau: 6.0,
            snapshot_offsets: vec![6.0],
            seed: 42,
            initial: InitialState::Delta { x0: 0.0 },
            barrier: 100.0,
        };
        let out = simulate(&spec).unwrap();
        let states = &out.snapshots[0].states;
        let mean = states.iter().sum::<f64>() / states.len() as f64;
        let var = states.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
            / (states.len() - 1) as f64;
        assert!((var - 0.5).abs() < 0.02, "stationary variance {var}");
    }

    #[test]
    fn identical_specs_produce_bit_identical_output() {
        let spec = SimSpec {
            n_paths: 500,
            total_tau: 0.5,
            snapshot_offsets: vec![0.25, 0.5],
            ..Default::default()
        };
        let a = simulate(&spec).unwrap();
        let b = simulate(&spec).unwrap();
        assert_eq!(a.snapshots.len(), b.snapshots.len());
        for (sa, sb) in a.snapshots.iter().zip(&b.snapshots) {
            assert!(sa
                .states
                .iter()
                .zip(&sb.states)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn negative_diffusion_aborts_with_the_offending_state() {
        // b1 large makes the parabola dip negative left of the origin.
        let spec = SimSpec {
            coefficients: constant(0.0, -5.0, 0.01, 1.0, 0.0),
            dtau_sim: 0.01,
            n_paths: 4,
            total_tau: 2.0,
            snapshot_offsets: vec![2.0],
            initial: InitialState::Delta { x0: 0.0 },
            ..Default::default()
        };
        assert!(matches!(
            simulate(&spec),
            Err(SimError::NegativeDiffusion { .. })
        ));
    }

    #[test]
    fn snapshot_offsets_must_lie_in_range() {
        let spec = SimSpec {
            snapshot_offsets: vec![5.0],
            total_tau: 1.0,
            ..Default::default()
        };
        assert!(matches!(simulate(&spec), Err(SimError::BadSpec(_))));
    }

    #[test]
    fn tail_samples_at_large_mu_pass_a_ks_test_against_the_normal() {
        use statrs::distribution::Normal;
        let mu = 200.0;
        let b2 = 1.0;
        let b0 = b2 * (mu - 2.0); // unit variance
        let mut xs = sample_qgaussian(mu, b0, b2, 20_000, 11).unwrap();
        xs.sort_by(|a, b| a.total_cmp(b));
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = xs.len() as f64;
        let mut d: f64 = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            let f = normal.cdf(x);
            d = d.max((f - i as f64 / n).abs());
            d = d.max(((i + 1) as f64 / n - f).abs());
        }
        // 1% critical value of the KS statistic.
        assert!(d < 1.63 / n.sqrt(), "KS statistic {d}");
    }

    #[test]
    fn low_mu_samples_are_heavy_tailed() {
        let xs = sample_qgaussian(3.0, 1.0, 1.0, 100_000, 3).unwrap();
        let m2 = xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64;
        let m4 = xs.iter().map(|x| x.powi(4)).sum::<f64>() / xs.len() as f64;
        let kurtosis = m4 / (m2 * m2);
        assert!(kurtosis > 6.0, "kurtosis {kurtosis} should exceed Gaussian 3");
    }

    #[test]
    fn empty_sample_request_returns_empty() {
        assert!(sample_qgaussian(4.0, 1.0, 0.5, 0, 1).unwrap().is_empty());
    }

    #[test]
    fn non_positive_mu_is_a_domain_error() {
        assert!(matches!(
            sample_qgaussian(0.0, 1.0, 1.0, 10, 1),
            Err(SimError::NonPositiveMu(_))
        ));
    }

    #[test]
    fn snapshots_convert_to_return_series_keyed_by_path() {
        let snap = EnsembleSnapshot {
            tau: 2.0,
            tau_offset: 1.0,
            states: vec![0.1, -0.2, 0.3],
        };
        let rs = snap.to_return_series();
        assert_eq!(rs.start_times, vec![0, 1, 2]);
        assert_eq!(rs.returns, snap.states);
    }
}
