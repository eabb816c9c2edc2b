//! Explicit forward-time, centered-space evolution of the density over the
//! scale variable.
//!
//! The generator is written in conservative flux form,
//!
//! ```text
//! dP/dtau = d/dx [ (a1 x - a0) P + d/dx( (b0 + b1 x + b2 x^2) P ) ]
//! ```
//!
//! so interior mass is conserved to machine precision with zero-flux walls.
//! The stability constraint `dtau <= safety * h^2 / (2 max D2)` is evaluated
//! every step; negative undershoots are clipped, logged, and renormalized on
//! a schedule, with a hard failure when the clipped mass rate is excessive.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coeff::{CoefficientModel, CoefficientSet};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("solver configuration error: {0}")]
    Config(String),
    #[error("step dtau = {dtau:.3e} exceeds the stability bound {dtau_stable:.3e}; subdivide")]
    StepTooLarge { dtau: f64, dtau_stable: f64 },
    #[error("non-finite density at tau = {tau}, x = {x} (dtau = {dtau:.3e}, max D2 = {max_d2:.3e})")]
    NumericalBlowup {
        tau: f64,
        x: f64,
        dtau: f64,
        max_d2: f64,
    },
    #[error("clipped mass {clipped:.3e} exceeds {rate:.1e} per unit scale at tau = {tau}")]
    ExcessiveClipping { tau: f64, clipped: f64, rate: f64 },
    #[error("checkpoint tau = {tau} lies outside the evolution interval [{start}, {end}]")]
    CheckpointOutOfRange { tau: f64, start: f64, end: f64 },
    #[error("evolution must move forward: tau_end = {end} < tau_start = {start}")]
    BackwardEvolution { start: f64, end: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Reflecting walls: no probability leaves the domain.
    ZeroFlux,
    /// Density pinned to zero at the walls; mass may leak.
    Absorbing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub domain_half_width: f64,
    pub n_points: usize,
    pub dtau_max: f64,
    pub stability_safety: f64,
    pub boundary: Boundary,
    pub renormalize_every: usize,
    /// Hard-failure threshold on clipped mass per unit scale.
    pub max_clip_mass_per_tau: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            domain_half_width: 40.0,
            n_points: 4001,
            dtau_max: 0.01,
            stability_safety: 0.4,
            boundary: Boundary::ZeroFlux,
            renormalize_every: 1000,
            max_clip_mass_per_tau: 1e-4,
        }
    }
}

/// One clipping event (negative undershoots zeroed at some step).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipEvent {
    pub tau: f64,
    pub clipped_mass: f64,
    pub nodes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    pub clipped_nodes: usize,
    pub clipped_mass: f64,
}

/// Discretized density on a uniform symmetric grid over `[-L, L]`.
///
/// Node positions are `(i - (n-1)/2) * h`, which makes the grid symmetric
/// about zero in exact floating point.
#[derive(Debug, Clone)]
pub struct PdfGrid {
    half_width: f64,
    n: usize,
    h: f64,
    tau: f64,
    tau_origin: f64,
    density: Vec<f64>,
    pub mass_history: Vec<(f64, f64)>,
    pub clip_log: Vec<ClipEvent>,
    cumulative_clipped: f64,
    scratch: Vec<f64>,
    scratch_d2: Vec<f64>,
}

impl PdfGrid {
    pub fn new(half_width: f64, n_points: usize, tau: f64) -> Result<Self, SolverError> {
        if !(half_width > 0.0) {
            return Err(SolverError::Config(format!(
                "domain half-width must be positive, got {half_width}"
            )));
        }
        if n_points < 3 {
            return Err(SolverError::Config(format!(
                "need at least 3 grid points, got {n_points}"
            )));
        }
        let h = 2.0 * half_width / (n_points - 1) as f64;
        Ok(Self {
            half_width,
            n: n_points,
            h,
            tau,
            tau_origin: tau,
            density: vec![0.0; n_points],
            mass_history: Vec::new(),
            clip_log: Vec::new(),
            cumulative_clipped: 0.0,
            scratch: vec![0.0; n_points],
            scratch_d2: vec![0.0; n_points],
        })
    }

    /// Discretized normal density, renormalized on the grid. Requires at
    /// least 10 nodes per standard deviation.
    pub fn gaussian(
        sigma: f64,
        mean: f64,
        half_width: f64,
        n_points: usize,
        tau: f64,
    ) -> Result<Self, SolverError> {
        if !(sigma > 0.0) {
            return Err(SolverError::Config(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        let mut grid = Self::new(half_width, n_points, tau)?;
        if sigma / grid.h < 10.0 {
            return Err(SolverError::Config(format!(
                "grid under-resolves sigma = {sigma}: {:.1} nodes per sigma (need >= 10)",
                sigma / grid.h
            )));
        }
        let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma);
        for i in 0..grid.n {
            let x = grid.x_at(i);
            let z = (x - mean) / sigma;
            grid.density[i] = norm * (-0.5 * z * z).exp();
        }
        grid.renormalize();
        Ok(grid)
    }

    pub fn x_at(&self, i: usize) -> f64 {
        (i as f64 - 0.5 * (self.n - 1) as f64) * self.h
    }

    pub fn x_values(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.x_at(i)).collect()
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn density_mut(&mut self) -> &mut [f64] {
        &mut self.density
    }

    pub fn n_points(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn tau_current(&self) -> f64 {
        self.tau
    }

    pub fn cumulative_clipped_mass(&self) -> f64 {
        self.cumulative_clipped
    }

    /// Trapezoidal total mass.
    pub fn mass(&self) -> f64 {
        let sum: f64 = self.density.iter().sum();
        self.h * (sum - 0.5 * (self.density[0] + self.density[self.n - 1]))
    }

    pub fn renormalize(&mut self) {
        let m = self.mass();
        if m > 0.0 {
            for p in &mut self.density {
                *p /= m;
            }
        }
    }

    /// Trapezoidal moment of the given order about zero, optionally windowed.
    pub fn moment(&self, order: u32, window: Option<(f64, f64)>) -> f64 {
        let (lo, hi) = window.unwrap_or((-self.half_width, self.half_width));
        let mut acc = 0.0;
        for i in 0..self.n {
            let x = self.x_at(i);
            if x < lo || x > hi {
                continue;
            }
            let w = if i == 0 || i == self.n - 1 { 0.5 } else { 1.0 };
            acc += w * x.powi(order as i32) * self.density[i] * self.h;
        }
        acc
    }

    pub fn variance(&self, window: Option<(f64, f64)>) -> f64 {
        let m0 = self.moment(0, window).max(1e-300);
        let m1 = self.moment(1, window) / m0;
        let m2 = self.moment(2, window) / m0;
        m2 - m1 * m1
    }

    pub fn excess_kurtosis(&self, window: Option<(f64, f64)>) -> f64 {
        let m0 = self.moment(0, window).max(1e-300);
        let mean = self.moment(1, window) / m0;
        let mut v = 0.0;
        let mut q = 0.0;
        for i in 0..self.n {
            let x = self.x_at(i);
            if let Some((lo, hi)) = window {
                if x < lo || x > hi {
                    continue;
                }
            }
            let w = if i == 0 || i == self.n - 1 { 0.5 } else { 1.0 };
            let d = x - mean;
            v += w * d * d * self.density[i] * self.h;
            q += w * d * d * d * d * self.density[i] * self.h;
        }
        v /= m0;
        q /= m0;
        q / (v * v) - 3.0
    }

    /// Density points for tail fitting, weighted by local mass fraction.
    pub fn density_points(&self) -> Vec<crate::qgauss::DensityPoint> {
        (0..self.n)
            .filter(|&i| self.density[i] > 0.0)
            .map(|i| crate::qgauss::DensityPoint {
                x: self.x_at(i),
                density: self.density[i],
                weight: self.density[i] * self.h,
            })
            .collect()
    }

    /// Linear resample onto a new symmetric grid (values outside the old
    /// domain are zero), renormalized to unit mass. Used to follow the
    /// contracting density across long evolutions.
    pub fn resampled(&self, half_width: f64, n_points: usize) -> Result<PdfGrid, SolverError> {
        let mut out = PdfGrid::new(half_width, n_points, self.tau)?;
        for i in 0..n_points {
            let x = out.x_at(i);
            out.density[i] = self.interpolate(x);
        }
        out.renormalize();
        out.mass_history.push((self.tau, out.mass()));
        Ok(out)
    }

    fn interpolate(&self, x: f64) -> f64 {
        let pos = x / self.h + 0.5 * (self.n - 1) as f64;
        if pos <= 0.0 || pos >= (self.n - 1) as f64 {
            return 0.0;
        }
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        self.density[i] * (1.0 - frac) + self.density[i + 1] * frac
    }

    /// Largest stable step for the given coefficients:
    /// `safety * h^2 / (2 max D2)`, further capped by the advective limit
    /// `safety * h / max |v|`.
    pub fn stable_dtau(&self, c: &CoefficientSet, config: &SolverConfig) -> f64 {
        let l = self.half_width;
        let quad = |x: f64| c.b0 + c.b1 * x + c.b2 * x * x;
        let mut max_d2 = quad(-l).max(quad(l));
        if c.b2 < 0.0 {
            let vertex = -c.b1 / (2.0 * c.b2);
            if vertex.abs() < l {
                max_d2 = max_d2.max(quad(vertex));
            }
        }
        let max_v = (c.a1 * l - c.a0).abs().max((-c.a1 * l - c.a0).abs());
        let diff_limit = if max_d2 > 0.0 {
            config.stability_safety * self.h * self.h / (2.0 * max_d2)
        } else {
            f64::INFINITY
        };
        let adv_limit = if max_v > 0.0 {
            config.stability_safety * self.h / max_v
        } else {
            f64::INFINITY
        };
        diff_limit.min(adv_limit)
    }

    /// One explicit update with the given coefficient values. Errors if
    /// `dtau` violates the stability bound; clips and logs negative
    /// undershoots (renormalization is the caller's schedule).
    pub fn step(
        &mut self,
        c: &CoefficientSet,
        dtau: f64,
        config: &SolverConfig,
    ) -> Result<StepStats, SolverError> {
        let dtau_stable = self.stable_dtau(c, config);
        if dtau > dtau_stable * (1.0 + 1e-9) {
            return Err(SolverError::StepTooLarge { dtau, dtau_stable });
        }
        let n = self.n;
        let h = self.h;
        let r = dtau / h;
        let quad = |x: f64| c.b0 + c.b1 * x + c.b2 * x * x;
        for i in 0..n {
            self.scratch_d2[i] = quad(self.x_at(i)) * self.density[i];
        }

        // Flux through the face right of node i:
        //   G = (a1 xf - a0) * (P_i + P_{i+1})/2 + (D2_{i+1} P_{i+1} - D2_i P_i)/h
        let mut prev_g = 0.0; // zero-flux left wall
        for i in 0..n {
            let g_right = if i == n - 1 {
                0.0
            } else {
                let xf = (i as f64 - 0.5 * (n - 1) as f64 + 0.5) * h;
                let v = c.a1 * xf - c.a0;
                v * 0.5 * (self.density[i] + self.density[i + 1])
                    + (self.scratch_d2[i + 1] - self.scratch_d2[i]) / h
            };
            self.scratch[i] = self.density[i] + r * (g_right - prev_g);
            prev_g = g_right;
        }
        if config.boundary == Boundary::Absorbing {
            self.scratch[0] = 0.0;
            self.scratch[n - 1] = 0.0;
        }

        let mut stats = StepStats::default();
        let mut max_d2 = quad(-self.half_width).max(quad(self.half_width));
        if c.b2 < 0.0 {
            max_d2 = max_d2.max(c.b0 - c.b1 * c.b1 / (4.0 * c.b2));
        }
        for i in 0..n {
            let v = self.scratch[i];
            if !v.is_finite() {
                return Err(SolverError::NumericalBlowup {
                    tau: self.tau,
                    x: self.x_at(i),
                    dtau,
                    max_d2,
                });
            }
            if v < 0.0 {
                stats.clipped_nodes += 1;
                stats.clipped_mass += -v * h;
                self.density[i] = 0.0;
            } else {
                self.density[i] = v;
            }
        }
        self.tau += dtau;
        if stats.clipped_nodes > 0 {
            self.cumulative_clipped += stats.clipped_mass;
            self.clip_log.push(ClipEvent {
                tau: self.tau,
                clipped_mass: stats.clipped_mass,
                nodes: stats.clipped_nodes,
            });
            let elapsed = self.tau - self.tau_origin;
            let budget = config.max_clip_mass_per_tau * (elapsed + 0.1);
            if self.cumulative_clipped > budget {
                return Err(SolverError::ExcessiveClipping {
                    tau: self.tau,
                    clipped: self.cumulative_clipped,
                    rate: config.max_clip_mass_per_tau,
                });
            }
        }
        Ok(stats)
    }

    /// One update with coefficients taken from the model at the current scale.
    pub fn step_with_model(
        &mut self,
        model: &CoefficientModel,
        dtau: f64,
        config: &SolverConfig,
    ) -> Result<StepStats, SolverError> {
        let c = model.eval(self.tau);
        self.step(&c, dtau, config)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "x,density")?;
        for i in 0..self.n {
            writeln!(out, "{},{}", self.x_at(i), self.density[i])?;
        }
        Ok(())
    }
}

/// Evolve the density from its current scale to `tau_end` under adaptive
/// sub-stepping, emitting snapshots at the requested checkpoints (or a single
/// snapshot at `tau_end` when none are given).
pub fn evolve(
    grid: &PdfGrid,
    model: &CoefficientModel,
    tau_end: f64,
    checkpoints: &[f64],
    config: &SolverConfig,
) -> Result<Vec<PdfGrid>, SolverError> {
    let tau_start = grid.tau_current();
    if tau_end < tau_start {
        return Err(SolverError::BackwardEvolution {
            start: tau_start,
            end: tau_end,
        });
    }
    let mut events: Vec<f64> = checkpoints.to_vec();
    for &t in &events {
        if t < tau_start - 1e-12 || t > tau_end + 1e-12 {
            return Err(SolverError::CheckpointOutOfRange {
                tau: t,
                start: tau_start,
                end: tau_end,
            });
        }
    }
    if events.is_empty() {
        events.push(tau_end);
    }
    events.sort_by(|a, b| a.total_cmp(b));
    events.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

    let mut work = grid.clone();
    let mut snapshots = Vec::with_capacity(events.len());
    let mut steps_since_renorm = 0usize;

    for &target in &events {
        while work.tau < target - 1e-12 {
            let c = model.eval(work.tau);
            let dtau = work
                .stable_dtau(&c, config)
                .min(config.dtau_max)
                .min(target - work.tau);
            work.step(&c, dtau, config)?;
            steps_since_renorm += 1;
            if config.renormalize_every > 0 && steps_since_renorm >= config.renormalize_every {
                work.mass_history.push((work.tau, work.mass()));
                if config.boundary == Boundary::ZeroFlux {
                    work.renormalize();
                }
                steps_since_renorm = 0;
            }
        }
        work.mass_history.push((work.tau, work.mass()));
        if config.boundary == Boundary::ZeroFlux {
            work.renormalize();
        }
        snapshots.push(work.clone());
    }
    Ok(snapshots)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::{
        A1Law, AsymmetryLaw, CoefficientModel, DecayLaw, ExtrapolationPolicy, LogisticLaw,
        ModelFitDiagnostics, MODEL_SCHEMA_VERSION,
    };
    use approx::assert_relative_eq;

    fn constant_model(a1: f64, a0: f64, b0: f64, b1: f64, b2: f64) -> CoefficientModel {
        CoefficientModel {
            schema_version: MODEL_SCHEMA_VERSION,
            a1: A1Law::Constant(a1),
            a0: AsymmetryLaw {
                cutoff_tau: f64::MAX,
                value_below: a0,
            },
            b1: AsymmetryLaw {
                cutoff_tau: f64::MAX,
                value_below: b1,
            },
            b2: LogisticLaw::constant(b2),
            b0: DecayLaw {
                amplitude: b0.max(1e-300),
                gamma_low: 0.0,
                gamma_high: 0.0,
                crossover_tau: 0.0,
            },
            valid_range: (-100.0, 100.0),
            extrapolation: ExtrapolationPolicy::FunctionalContinuation,
            diagnostics: ModelFitDiagnostics::default(),
        }
    }

    fn coeffs(a1: f64, a0: f64, b0: f64, b1: f64, b2: f64) -> CoefficientSet {
        CoefficientSet {
            a1,
            a0,
            b0,
            b1,
            b2,
            extrapolated: false,
        }
    }

    #[test]
    fn gaussian_initial_condition_peaks_and_integrates_correctly() {
        let g = PdfGrid::gaussian(1.0, 0.0, 40.0, 4001, 0.0).unwrap();
        let peak = g.density()[2000];
        assert_relative_eq!(
            peak,
            1.0 / (2.0 * std::f64::consts::PI).sqrt(),
            max_relative = 1e-6
        );
        assert_relative_eq!(g.mass(), 1.0, epsilon = 1e-12);

        let shifted = PdfGrid::gaussian(1.0, 2.0, 40.0, 4001, 0.0).unwrap();
        let argmax = (0..shifted.n_points())
            .max_by(|&a, &b| shifted.density()[a].total_cmp(&shifted.density()[b]))
            .unwrap();
        assert!((shifted.x_at(argmax) - 2.0).abs() < shifted.spacing());
    }

    #[test]
    fn under_resolved_sigma_is_a_configuration_error() {
        assert!(matches!(
            PdfGrid::gaussian(0.05, 0.0, 40.0, 401, 0.0),
            Err(SolverError::Config(_))
        ));
    }

    #[test]
    fn zero_coefficients_leave_the_density_bit_identical() {
        let mut g = PdfGrid::gaussian(1.0, 0.0, 20.0, 801, 0.0).unwrap();
        let before = g.density().to_vec();
        let cfg = SolverConfig::default();
        g.step(&coeffs(0.0, 0.0, 0.0, 0.0, 0.0), 0.01, &cfg).unwrap();
        assert!(g
            .density()
            .iter()
            .zip(&before)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn oversized_step_is_rejected() {
        let mut g = PdfGrid::gaussian(1.0, 0.0, 20.0, 801, 0.0).unwrap();
        let cfg = SolverConfig::default();
        let err = g.step(&coeffs(1.0, 0.0, 0.5, 0.0, 0.0), 1.0, &cfg);
        assert!(matches!(err, Err(SolverError::StepTooLarge { .. })));
    }

    #[test]
    fn ou_evolution_tracks_the_variance_ode() {
        // dvar/dtau = -2 a1 var + 2 b0, Gaussian stays Gaussian.
        let model = constant_model(1.0, 0.0, 0.5, 0.0, 0.0);
        let cfg = SolverConfig {
            domain_half_width: 20.0,
            n_points: 1001,
            ..Default::default()
        };
        let grid = PdfGrid::gaussian(2.0, 0.0, 20.0, 1001, 0.0).unwrap();
        let snaps = evolve(&grid, &model, 1.0, &[1.0], &cfg).unwrap();
        let var = snaps[0].variance(None);
        let expected = 0.5 + (4.0 - 0.5) * (-2.0f64).exp();
        assert_relative_eq!(var, expected, max_relative = 2e-3);
    }

    #[test]
    fn identity_evolution_returns_a_single_snapshot() {
        let model = constant_model(1.0, 0.0, 0.5, 0.0, 0.0);
        let grid = PdfGrid::gaussian(1.0, 0.0, 20.0, 801, 3.0).unwrap();
        let snaps = evolve(&grid, &model, 3.0, &[], &SolverConfig::default()).unwrap();
        assert_eq!(snaps.len(), 1);
        assert_eq!(snaps[0].tau_current(), 3.0);
        let d0 = grid.density();
        // Only the checkpoint renormalization touches the data.
        for (a, b) in snaps[0].density().iter().zip(d0) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn mass_is_conserved_with_zero_flux_walls() {
        let model = constant_model(1.0, 0.0, 0.5, 0.0, 0.1);
        let cfg = SolverConfig {
            domain_half_width: 20.0,
            n_points: 801,
            renormalize_every: 0, // never renormalize mid-run
            ..Default::default()
        };
        let grid = PdfGrid::gaussian(1.0, 0.0, 20.0, 801, 0.0).unwrap();
        let mut work = grid.clone();
        let mut moved = 0.0;
        while moved < 1.0 {
            let c = model.eval(work.tau_current());
            let dtau = work.stable_dtau(&c, &cfg).min(1.0 - moved);
            work.step(&c, dtau, &cfg).unwrap();
            moved += dtau;
        }
        assert!((work.mass() - 1.0).abs() < 1e-8, "mass {}", work.mass());
        assert_eq!(work.clip_log.len(), 0);
    }

    #[test]
    fn symmetric_data_stay_symmetric_without_odd_terms() {
        let model = constant_model(1.0, 0.0, 0.3, 0.0, 0.2);
        let cfg = SolverConfig {
            domain_half_width: 20.0,
            n_points: 801,
            ..Default::default()
        };
        let grid = PdfGrid::gaussian(1.5, 0.0, 20.0, 801, 0.0).unwrap();
        let snaps = evolve(&grid, &model, 2.0, &[2.0], &cfg).unwrap();
        let d = snaps[0].density();
        let n = d.len();
        let mut asym: f64 = 0.0;
        for i in 0..n {
            asym = asym.max((d[i] - d[n - 1 - i]).abs());
        }
        assert!(asym < 1e-10, "asymmetry {asym}");
    }

    #[test]
    fn absorbing_walls_lose_mass() {
        let model = constant_model(0.0, 0.0, 1.0, 0.0, 0.0);
        let cfg = SolverConfig {
            domain_half_width: 3.0,
            n_points: 301,
            boundary: Boundary::Absorbing,
            renormalize_every: 0,
            ..Default::default()
        };
        let grid = PdfGrid::gaussian(1.0, 0.0, 3.0, 301, 0.0).unwrap();
        let snaps = evolve(&grid, &model, 1.0, &[1.0], &cfg).unwrap();
        assert!(snaps[0].mass() < 0.9);
    }

    #[test]
    fn refinement_reduces_ou_error_by_about_four() {
        let model = constant_model(1.0, 0.0, 0.5, 0.0, 0.0);
        let horizon = 0.5_f64;
        let analytic_var = 0.5 + (1.0 - 0.5) * (-2.0 * horizon).exp();
        let error_at = |n: usize| {
            let cfg = SolverConfig {
                domain_half_width: 10.0,
                n_points: n,
                dtau_max: f64::INFINITY,
                ..Default::default()
            };
            let grid = PdfGrid::gaussian(1.0, 0.0, 10.0, n, 0.0).unwrap();
            let snap = &evolve(&grid, &model, horizon, &[horizon], &cfg).unwrap()[0];
            let sigma2 = analytic_var;
            let mut err: f64 = 0.0;
            for i in 0..snap.n_points() {
                let x = snap.x_at(i);
                let exact =
                    (-0.5 * x * x / sigma2).exp() / (2.0 * std::f64::consts::PI * sigma2).sqrt();
                err = err.max((snap.density()[i] - exact).abs());
            }
            err
        };
        let coarse = error_at(251);
        let fine = error_at(501);
        let ratio = coarse / fine;
        assert!(
            ratio > 2.5 && ratio < 8.0,
            "expected ~4x error reduction, got {ratio:.2} (coarse {coarse:.3e}, fine {fine:.3e})"
        );
    }

    #[test]
    fn resampling_preserves_shape_and_mass() {
        let grid = PdfGrid::gaussian(1.0, 0.0, 20.0, 2001, 1.5).unwrap();
        let re = grid.resampled(10.0, 1001).unwrap();
        assert_relative_eq!(re.mass(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(re.variance(None), 1.0, max_relative = 1e-3);
        assert_eq!(re.tau_current(), 1.5);
    }

    #[test]
    fn checkpoints_outside_the_interval_are_rejected() {
        let model = constant_model(1.0, 0.0, 0.5, 0.0, 0.0);
        let grid = PdfGrid::gaussian(1.0, 0.0, 20.0, 801, 0.0).unwrap();
        assert!(matches!(
            evolve(&grid, &model, 1.0, &[2.0], &SolverConfig::default()),
            Err(SolverError::CheckpointOutOfRange { .. })
        ));
    }
}
