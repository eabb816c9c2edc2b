//! Shared fixtures and independent oracles for the integration suites.
#![allow(dead_code)]

use std::sync::OnceLock;

use kmfpe_core::coeff::{
    A1Law, AsymmetryLaw, CoefficientModel, DecayLaw, ExtrapolationPolicy, LogisticLaw,
    ModelFitDiagnostics, MODEL_SCHEMA_VERSION,
};
use kmfpe_core::density::{BinningSpec, CkConfig, CkTestReport, CkThreshold};
use kmfpe_core::fpe::{self, PdfGrid, SolverConfig};
use kmfpe_core::km::{self, PawulaConfig, ScaleEstimate, ScalePair};
use kmfpe_core::langevin::{simulate, EnsembleSnapshot, InitialState, SimCoefficients, SimOutput, SimSpec};
use kmfpe_core::qgauss;
use kmfpe_core::series::ReturnSeries;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

pub fn pass_fail(name: &str, ok: bool) {
    println!("{}: {}", if ok { "PASS" } else { "FAIL" }, name);
}

// ---------------------------------------------------------------------------
// Reference Langevin ensemble: a1 = 1, a0 = 0, b0 = 0.5, b1 = 0, b2 = 0.2.
// ---------------------------------------------------------------------------

pub const ORACLE_A1: f64 = 1.0;
pub const ORACLE_A0: f64 = 0.0;
pub const ORACLE_B0: f64 = 0.5;
pub const ORACLE_B1: f64 = 0.0;
pub const ORACLE_B2: f64 = 0.2;
pub const ORACLE_SEED: u64 = 20240601;
pub const ORACLE_PATHS: usize = 1_000_000;
pub const BASE_OFFSET: f64 = 1.8;
pub const DTAU_GRID: [f64; 5] = [0.1, 0.15, 0.2, 0.3, 0.4];
/// Increments and binning for the fourth-order truncation check: the quartic
/// moment needs a finer conditioning grid (its bin-quantization floor scales
/// with the squared width) and profits from smaller increments.
pub const TRUNCATION_DTAU_GRID: [f64; 4] = [0.05, 0.1, 0.15, 0.2];
pub const TRUNCATION_BINS: usize = 481;
pub const CK_TRIPLES: [(f64, f64, f64); 3] =
    [(1.6, 1.8, 2.0), (1.8, 2.0, 2.2), (1.6, 2.0, 2.2)];

/// Stationary variance of the reference process, b0 / (a1 - b2).
pub fn oracle_stationary_variance() -> f64 {
    ORACLE_B0 / (ORACLE_A1 - ORACLE_B2)
}

pub fn oracle_sim(seed: u64, n_paths: usize) -> SimOutput {
    let mut offsets = vec![1.6, BASE_OFFSET, 2.0, 2.2];
    for dt in DTAU_GRID {
        offsets.push(BASE_OFFSET + dt);
    }
    for dt in TRUNCATION_DTAU_GRID {
        offsets.push(BASE_OFFSET + dt);
    }
    offsets.sort_by(|a, b| a.total_cmp(b));
    offsets.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let spec = SimSpec {
        coefficients: SimCoefficients::Constant {
            a1: ORACLE_A1,
            a0: ORACLE_A0,
            b0: ORACLE_B0,
            b1: ORACLE_B1,
            b2: ORACLE_B2,
        },
        dtau_sim: 0.01,
        n_paths,
        tau_start: 0.0,
        total_tau: 2.2,
        snapshot_offsets: offsets,
        seed,
        initial: InitialState::Gaussian {
            mean: 0.0,
            sigma: oracle_stationary_variance().sqrt(),
        },
        barrier: 100.0,
    };
    simulate(&spec).expect("reference simulation must run")
}

static ORACLE: OnceLock<SimOutput> = OnceLock::new();

pub fn shared_oracle() -> &'static SimOutput {
    ORACLE.get_or_init(|| oracle_sim(ORACLE_SEED, ORACLE_PATHS))
}

pub fn snapshot_at(out: &SimOutput, offset: f64) -> &EnsembleSnapshot {
    out.snapshots
        .iter()
        .find(|s| (s.tau_offset - offset).abs() < 1e-9)
        .unwrap_or_else(|| panic!("no snapshot at offset {offset}"))
}

/// Binning used for coefficient estimation: finer than the plotting default
/// so bin-quantization bias stays well below the recovery tolerances.
pub fn estimation_binning() -> BinningSpec {
    BinningSpec {
        n_bins: 161,
        span_sigmas: 8.0,
        min_count: 5,
        min_pairs: 10_000,
    }
}

/// Run the full estimation pipeline on ensemble snapshots: joint histograms
/// per increment, moment curves, polynomial fits, zero-increment
/// extrapolation and the truncation check.
pub fn estimate_from_sim(out: &SimOutput) -> ScaleEstimate {
    estimate_with(out, &DTAU_GRID, estimation_binning())
}

pub fn estimate_with(out: &SimOutput, dtaus: &[f64], binning: BinningSpec) -> ScaleEstimate {
    let series: Vec<(f64, ReturnSeries)> = std::iter::once(BASE_OFFSET)
        .chain(dtaus.iter().map(|dt| BASE_OFFSET + dt))
        .map(|off| (off, snapshot_at(out, off).to_return_series()))
        .collect();
    let base = &series[0].1;
    let pairs: Vec<ScalePair> = series[1..]
        .iter()
        .map(|(off, rs)| ScalePair {
            tau1: BASE_OFFSET,
            tau2: *off,
            coarse: base,
            fine: rs,
        })
        .collect();
    km::estimate_at_scale(&pairs, &binning, 50, &PawulaConfig::default(), 0.25)
        .expect("estimation pipeline must run on the reference ensemble")
}

pub fn ck_on_sim(out: &SimOutput, triple: (f64, f64, f64), seed: u64) -> CkTestReport {
    let rs1 = snapshot_at(out, triple.0).to_return_series();
    let rs_mid = snapshot_at(out, triple.1).to_return_series();
    let rs2 = snapshot_at(out, triple.2).to_return_series();
    kmfpe_core::density::ck_test_from_returns(
        &rs1,
        &rs_mid,
        &rs2,
        triple,
        &BinningSpec::default(),
        &CkConfig {
            threshold: CkThreshold::Calibrated {
                resamples: 100,
                quantile: 0.95,
            },
            seed,
        },
    )
    .expect("ck test must run")
}

// ---------------------------------------------------------------------------
// Adversarial generators.
// ---------------------------------------------------------------------------

fn poisson_count(rng: &mut ChaCha12Rng, lambda: f64) -> u32 {
    let threshold = (-lambda).exp();
    let mut k = 0u32;
    let mut p = 1.0;
    loop {
        p *= rng.random::<f64>();
        if p <= threshold {
            return k;
        }
        k += 1;
    }
}

/// Pairs from a mean-reverting process plus compound-Poisson jumps over the
/// given increment; the jump term keeps the fourth moment rate finite as the
/// increment shrinks.
pub fn jump_pairs(
    dtau: f64,
    n: usize,
    seed: u64,
    jump_rate: f64,
    jump_sigma: f64,
) -> (ReturnSeries, ReturnSeries) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let decay = (-ORACLE_A1 * dtau).exp();
    let diff_sigma =
        (ORACLE_B0 / ORACLE_A1 * (1.0 - (-2.0 * ORACLE_A1 * dtau).exp())).sqrt();
    let x1_sigma = oracle_stationary_variance().sqrt();
    let mut x1 = Vec::with_capacity(n);
    let mut x2 = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = rng.sample(StandardNormal);
        let start = x1_sigma * a;
        let g: f64 = rng.sample(StandardNormal);
        let mut end = start * decay + diff_sigma * g;
        for _ in 0..poisson_count(&mut rng, jump_rate * dtau) {
            let j: f64 = rng.sample(StandardNormal);
            end += jump_sigma * j;
        }
        x1.push(start);
        x2.push(end);
    }
    let mk = |returns: Vec<f64>| ReturnSeries {
        lag_secs: 1,
        start_times: (0..n as i64).collect(),
        returns,
        sigma_ref: None,
        normalized: false,
    };
    (mk(x1), mk(x2))
}

/// Triples where the finest-scale return copies the coarsest one, bypassing
/// the intermediate scale entirely.
pub fn long_memory_triples(n: usize, seed: u64) -> (ReturnSeries, ReturnSeries, ReturnSeries) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut x1 = Vec::with_capacity(n);
    let mut x2 = Vec::with_capacity(n);
    let mut x3 = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        let c: f64 = rng.sample(StandardNormal);
        x1.push(a);
        x2.push(0.8 * b); // independent of x1
        x3.push(0.9 * a + 0.436 * c); // remembers x1, not x2
    }
    let mk = |returns: Vec<f64>| ReturnSeries {
        lag_secs: 1,
        start_times: (0..n as i64).collect(),
        returns,
        sigma_ref: None,
        normalized: false,
    };
    (mk(x1), mk(x2), mk(x3))
}

// ---------------------------------------------------------------------------
// Crossover model and its staged evolution.
// ---------------------------------------------------------------------------

/// Additive-to-multiplicative crossover model: constant restoring force,
/// multiplicative level ramping from zero to a plateau, additive level
/// decaying with exponent 1 below the crossover and 1.17 above it. The
/// amplitude balances the variance law to sigma^2 = 2^-tau in the additive
/// regime.
pub fn crossover_model() -> CoefficientModel {
    let amplitude = 1.0 - 0.5 * std::f64::consts::LN_2;
    CoefficientModel {
        schema_version: MODEL_SCHEMA_VERSION,
        a1: A1Law::Constant(1.0),
        a0: AsymmetryLaw::zero(),
        b1: AsymmetryLaw::zero(),
        b2: LogisticLaw {
            low: 0.0,
            high: 0.2,
            midpoint_tau: 4.0,
            width: 1.0,
        },
        b0: DecayLaw {
            amplitude,
            gamma_low: 1.0,
            gamma_high: 1.17,
            crossover_tau: 4.0,
        },
        valid_range: (-2.0, 11.0),
        extrapolation: ExtrapolationPolicy::FunctionalContinuation,
        diagnostics: ModelFitDiagnostics::default(),
    }
}

#[derive(Debug, Clone)]
pub struct StagedSnapshot {
    pub tau: f64,
    pub variance: f64,
    pub windowed_kurtosis: f64,
    pub grid: PdfGrid,
}

/// Evolve the crossover model from a Gaussian at tau = -2 up to tau = 15 in
/// unit stages, resampling the grid between stages so the contracting density
/// stays resolved. Returns one snapshot per integer scale.
pub fn staged_crossover_run() -> &'static Vec<StagedSnapshot> {
    static RUN: OnceLock<Vec<StagedSnapshot>> = OnceLock::new();
    RUN.get_or_init(|| {
        let model = crossover_model();
        let tau_start = -2.0;
        let tau_end = 15.0;
        let n_points = 1001;
        let sigma_pred = |tau: f64| {
            qgauss::variance_prediction(&model, tau)
                .expect("crossover model has finite variance")
                .sqrt()
        };

        let mut snapshots = Vec::new();
        let sigma0 = sigma_pred(tau_start);
        let l0 = 35.0 * sigma_pred(tau_start + 1.0);
        let mut grid = PdfGrid::gaussian(sigma0, 0.0, l0, n_points, tau_start)
            .expect("initial grid resolves sigma");
        let record = |g: &PdfGrid, snapshots: &mut Vec<StagedSnapshot>| {
            let tau = g.tau_current();
            let w = 12.0 * sigma_pred(tau);
            snapshots.push(StagedSnapshot {
                tau,
                variance: g.variance(None),
                windowed_kurtosis: g.excess_kurtosis(Some((-w, w))),
                grid: g.clone(),
            });
        };
        record(&grid, &mut snapshots);

        let mut tau = tau_start;
        while tau < tau_end - 1e-9 {
            let next = tau + 1.0;
            let config = SolverConfig {
                domain_half_width: grid.half_width(),
                n_points,
                dtau_max: 1e-3,
                stability_safety: 0.4,
                boundary: fpe::Boundary::ZeroFlux,
                renormalize_every: 1000,
                max_clip_mass_per_tau: 1e-4,
            };
            let snaps = fpe::evolve(&grid, &model, next, &[next], &config)
                .expect("stage evolution must succeed");
            let end = snaps.into_iter().next_back().expect("one snapshot");
            record(&end, &mut snapshots);
            tau = next;
            if tau < tau_end - 1e-9 {
                let l_next = 35.0 * sigma_pred(tau + 1.0);
                grid = end
                    .resampled(l_next, n_points)
                    .expect("resampling must succeed");
            }
        }
        snapshots
    })
}

// ---------------------------------------------------------------------------
// Independent numerical oracles.
// ---------------------------------------------------------------------------

/// Fourth-order Runge-Kutta integration of a scalar ODE `y' = f(t, y)`.
pub fn rk4(f: impl Fn(f64, f64) -> f64, mut y: f64, t0: f64, t1: f64, steps: usize) -> f64 {
    let h = (t1 - t0) / steps as f64;
    let mut t = t0;
    for _ in 0..steps {
        let k1 = f(t, y);
        let k2 = f(t + 0.5 * h, y + 0.5 * h * k1);
        let k3 = f(t + 0.5 * h, y + 0.5 * h * k2);
        let k4 = f(t + h, y + h * k3);
        y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        t += h;
    }
    y
}

/// Second moment of the density `(1 + y^2)^(-m)` (normalized), computed by
/// quadrature after the substitution `y = sinh t`, which removes both the
/// infinite domain and any endpoint singularity. The integrand is evaluated
/// in log space to dodge overflow, and the analytic tail beyond the truncation
/// point is added.
pub fn student_second_moment_by_quadrature(m: f64) -> f64 {
    // I2 = ∫ sinh^2 t cosh^(1-2m) t dt, I0 = ∫ cosh^(1-2m) t dt over [0, ∞).
    let decay2 = 2.0 * m - 3.0; // e^(-decay2 * t) tail of the I2 integrand
    let decay0 = 2.0 * m - 1.0;
    assert!(decay2 > 0.0, "second moment requires m > 1.5");
    let t_max = (30.0 / decay2).min(600.0).max(20.0);
    let n = 200_000; // Simpson pairs
    let h = t_max / n as f64;
    let ln_sinh = |t: f64| t + ((1.0 - (-2.0 * t).exp()) / 2.0).ln();
    let ln_cosh = |t: f64| t + ((1.0 + (-2.0 * t).exp()) / 2.0).ln();
    let f2 = |t: f64| {
        if t == 0.0 {
            0.0
        } else {
            (2.0 * ln_sinh(t) + (1.0 - 2.0 * m) * ln_cosh(t)).exp()
        }
    };
    let f0 = |t: f64| ((1.0 - 2.0 * m) * ln_cosh(t)).exp();
    let simpson = |f: &dyn Fn(f64) -> f64| {
        let mut acc = f(0.0) + f(t_max);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(i as f64 * h);
        }
        acc * h / 3.0
    };
    // Tail beyond t_max: integrands behave like (e^t/2)^(3-2m) and
    // (e^t/2)^(1-2m) up to O(e^(-2t)) corrections.
    let tail2 = ((3.0 - 2.0 * m) * (t_max - std::f64::consts::LN_2)).exp() / decay2;
    let tail0 = ((1.0 - 2.0 * m) * (t_max - std::f64::consts::LN_2)).exp() / decay0;
    let i2 = simpson(&f2) + tail2;
    let i0 = simpson(&f0) + tail0;
    i2 / i0
}

pub fn sample_mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = sample_mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}
