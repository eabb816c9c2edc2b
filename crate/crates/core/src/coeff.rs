//! Smoothed scale-dependence of the five evolution-equation coefficients.
//!
//! The additive diffusion level decays exponentially in the scale variable
//! with regime-dependent exponents (`b0 = A 2^(-gamma(tau) tau)`, continuous
//! at the crossover), the multiplicative level ramps between two plateaus
//! through a logistic, the restoring-force slope is constant or piecewise
//! constant, and the asymmetry terms are free below a cutoff scale and zero
//! above it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::km::KmLimit;
use crate::wls::{self, WlsError};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model fit needs at least {needed} scale points, got {got}")]
    TooFewLimits { needed: usize, got: usize },
    #[error("degenerate input: all limits share the same scale tau = {tau}")]
    DegenerateInput { tau: f64 },
    #[error(transparent)]
    Fit(#[from] WlsError),
    #[error("model serialization failed: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Restoring-force slope as a function of the scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum A1Law {
    Constant(f64),
    /// `(from_tau, value)` segments, sorted by `from_tau`; the first value
    /// also applies below its own start.
    PiecewiseConstant(Vec<(f64, f64)>),
}

impl A1Law {
    pub fn eval(&self, tau: f64) -> f64 {
        match self {
            A1Law::Constant(v) => *v,
            A1Law::PiecewiseConstant(segments) => {
                let mut out = segments.first().map(|s| s.1).unwrap_or(0.0);
                for &(from, value) in segments {
                    if tau >= from {
                        out = value;
                    }
                }
                out
            }
        }
    }
}

/// A term that is free below a cutoff scale and zero at or above it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsymmetryLaw {
    pub cutoff_tau: f64,
    pub value_below: f64,
}

impl AsymmetryLaw {
    pub fn zero() -> Self {
        Self {
            cutoff_tau: f64::MIN,
            value_below: 0.0,
        }
    }

    pub fn eval(&self, tau: f64) -> f64 {
        if tau < self.cutoff_tau {
            self.value_below
        } else {
            0.0
        }
    }
}

/// Saturating ramp between a low and a high plateau.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticLaw {
    pub low: f64,
    pub high: f64,
    pub midpoint_tau: f64,
    pub width: f64,
}

impl LogisticLaw {
    pub fn constant(value: f64) -> Self {
        Self {
            low: value,
            high: value,
            midpoint_tau: 0.0,
            width: 1.0,
        }
    }

    pub fn eval(&self, tau: f64) -> f64 {
        self.low + (self.high - self.low) * sigmoid((tau - self.midpoint_tau) / self.width)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Piecewise exponential decay, continuous at the crossover:
/// `log2 b0(tau) = log2 A - gamma_low * min(tau, tc) - gamma_high * max(tau - tc, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayLaw {
    pub amplitude: f64,
    pub gamma_low: f64,
    pub gamma_high: f64,
    pub crossover_tau: f64,
}

impl DecayLaw {
    pub fn log2_eval(&self, tau: f64) -> f64 {
        let below = tau.min(self.crossover_tau);
        let above = (tau - self.crossover_tau).max(0.0);
        self.amplitude.log2() - self.gamma_low * below - self.gamma_high * above
    }

    pub fn eval(&self, tau: f64) -> f64 {
        self.log2_eval(tau).exp2()
    }

    pub fn gamma_at(&self, tau: f64) -> f64 {
        if tau <= self.crossover_tau {
            self.gamma_low
        } else {
            self.gamma_high
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtrapolationPolicy {
    HoldLastValue,
    FunctionalContinuation,
}

/// Coefficient values at one scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet {
    pub a1: f64,
    pub a0: f64,
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    /// Whether `tau` fell outside the directly estimated range.
    pub extrapolated: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelFitDiagnostics {
    pub b0_log2_sse: f64,
    pub b2_sse: f64,
    pub a1_se: f64,
    pub warnings: Vec<String>,
}

/// The smoothed scale-dependence of all five coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientModel {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub a1: A1Law,
    pub a0: AsymmetryLaw,
    pub b1: AsymmetryLaw,
    pub b2: LogisticLaw,
    pub b0: DecayLaw,
    /// Scale interval covered by direct estimation.
    pub valid_range: (f64, f64),
    pub extrapolation: ExtrapolationPolicy,
    #[serde(default)]
    pub diagnostics: ModelFitDiagnostics,
}

fn default_schema_version() -> u32 {
    MODEL_SCHEMA_VERSION
}

impl CoefficientModel {
    /// Evaluate all five coefficients at `tau`, marking whether the point lay
    /// outside the estimated range.
    pub fn eval(&self, tau: f64) -> CoefficientSet {
        let extrapolated = tau < self.valid_range.0 || tau > self.valid_range.1;
        let t = match self.extrapolation {
            ExtrapolationPolicy::HoldLastValue => tau.clamp(self.valid_range.0, self.valid_range.1),
            ExtrapolationPolicy::FunctionalContinuation => tau,
        };
        CoefficientSet {
            a1: self.a1.eval(t),
            a0: self.a0.eval(t),
            b0: self.b0.eval(t),
            b1: self.b1.eval(t),
            b2: self.b2.eval(t),
            extrapolated,
        }
    }

    /// Logarithmic decay rate `B = -b0'/b0` (natural-log derivative in `tau`),
    /// i.e. `gamma(tau) * ln 2` for the base-2 decay law.
    pub fn decay_rate(&self, tau: f64) -> f64 {
        if self.extrapolation == ExtrapolationPolicy::HoldLastValue
            && (tau < self.valid_range.0 || tau > self.valid_range.1)
        {
            return 0.0;
        }
        self.b0.gamma_at(tau) * std::f64::consts::LN_2
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Fit the smoothed model to a sequence of per-scale coefficient limits.
pub fn fit_model(limits: &[KmLimit]) -> Result<CoefficientModel, ModelError> {
    if limits.len() < 4 {
        return Err(ModelError::TooFewLimits {
            needed: 4,
            got: limits.len(),
        });
    }
    let mut sorted: Vec<&KmLimit> = limits.iter().collect();
    sorted.sort_by(|a, b| a.tau.total_cmp(&b.tau));
    let taus: Vec<f64> = sorted.iter().map(|l| l.tau).collect();
    if taus[taus.len() - 1] - taus[0] < 1e-12 {
        return Err(ModelError::DegenerateInput { tau: taus[0] });
    }
    let mut warnings = Vec::new();

    // --- a1: weighted constant ---
    let a1_vals: Vec<f64> = sorted.iter().map(|l| l.a1).collect();
    let a1_ws: Vec<f64> = sorted
        .iter()
        .map(|l| inv_var_weight(l.a1_diag.limit_se))
        .collect();
    let (a1_mean, a1_se) = weighted_mean(&a1_vals, &a1_ws);

    // --- b0: two-slope continuous hinge on log2(b0) ---
    let log_b0: Vec<f64> = sorted.iter().map(|l| l.b0.max(1e-300).log2()).collect();
    let log_ws: Vec<f64> = sorted
        .iter()
        .map(|l| {
            let se = l.b0_diag.limit_se;
            if se > 0.0 && se.is_finite() && l.b0 > 0.0 {
                let log_se = se / (l.b0 * std::f64::consts::LN_2);
                1.0 / (log_se * log_se)
            } else {
                1.0
            }
        })
        .collect();
    let (decay, b0_sse) = fit_decay_hinge(&taus, &log_b0, &log_ws)?;
    if decay.gamma_low.abs() < 1e-9 && decay.gamma_high.abs() < 1e-9 {
        warnings.push("b0 shows no decay across scales (gamma ~ 0)".to_string());
    }

    // --- b2: logistic ramp ---
    let b2_vals: Vec<f64> = sorted.iter().map(|l| l.b2).collect();
    let b2_ws: Vec<f64> = sorted
        .iter()
        .map(|l| inv_var_weight(l.b2_diag.limit_se))
        .collect();
    let (mut b2_law, b2_sse) = fit_logistic(&taus, &b2_vals, &b2_ws, &mut warnings);
    if b2_law.low < 0.0 {
        warnings.push(format!(
            "b2 low plateau clamped to zero (was {:.3e})",
            b2_law.low
        ));
        b2_law.low = 0.0;
    }

    // --- a0 / b1: significant below a cutoff, zero above ---
    let a0_law = fit_asymmetry(
        &taus,
        &sorted.iter().map(|l| (l.a0, l.a0_diag.limit_se)).collect::<Vec<_>>(),
    );
    let b1_law = fit_asymmetry(
        &taus,
        &sorted.iter().map(|l| (l.b1, l.b1_diag.limit_se)).collect::<Vec<_>>(),
    );

    Ok(CoefficientModel {
        schema_version: MODEL_SCHEMA_VERSION,
        a1: A1Law::Constant(a1_mean),
        a0: a0_law,
        b1: b1_law,
        b2: b2_law,
        b0: decay,
        valid_range: (taus[0], taus[taus.len() - 1]),
        extrapolation: ExtrapolationPolicy::FunctionalContinuation,
        diagnostics: ModelFitDiagnostics {
            b0_log2_sse: b0_sse,
            b2_sse,
            a1_se,
            warnings,
        },
    })
}

fn inv_var_weight(se: f64) -> f64 {
    if se > 0.0 && se.is_finite() {
        1.0 / (se * se)
    } else {
        1.0
    }
}

fn weighted_mean(values: &[f64], weights: &[f64]) -> (f64, f64) {
    let wsum: f64 = weights.iter().sum();
    if wsum <= 0.0 {
        let m = values.iter().sum::<f64>() / values.len() as f64;
        return (m, 0.0);
    }
    let mean = values
        .iter()
        .zip(weights)
        .map(|(v, w)| v * w)
        .sum::<f64>()
        / wsum;
    (mean, (1.0 / wsum).sqrt())
}

/// Weighted SSE of the hinge model for a fixed crossover; returns the fitted
/// `(amplitude_log2, gamma_low, gamma_high)` too.
fn hinge_sse(
    taus: &[f64],
    log_b0: &[f64],
    weights: &[f64],
    tc: f64,
) -> Result<(f64, f64, f64, f64), WlsError> {
    // Basis: log2 b0 = alpha - g1 * min(tau, tc) - d * relu(tau - tc).
    // Reuse the generic WLS by building the two regressor columns by hand.
    let n = taus.len();
    let mut ata = [[0.0f64; 3]; 3];
    let mut atb = [0.0f64; 3];
    for i in 0..n {
        let w = weights[i];
        let cols = [1.0, -taus[i].min(tc), -(taus[i] - tc).max(0.0)];
        for r in 0..3 {
            atb[r] += w * cols[r] * log_b0[i];
            for c in 0..3 {
                ata[r][c] += w * cols[r] * cols[c];
            }
        }
    }
    let m = nalgebra::Matrix3::from_fn(|r, c| ata[r][c]);
    let v = nalgebra::Vector3::from_row_slice(&atb);
    let sol = m
        .cholesky()
        .map(|ch| ch.solve(&v))
        .ok_or(WlsError::RankDeficient)?;
    // Below tc the slope is -g1; above it is -d, with continuity built in.
    let (alpha, g1, d) = (sol[0], sol[1], sol[2]);
    let mut sse = 0.0;
    for i in 0..n {
        let fitted = alpha - g1 * taus[i].min(tc) - d * (taus[i] - tc).max(0.0);
        sse += weights[i] * (log_b0[i] - fitted).powi(2);
    }
    Ok((sse, alpha, g1, d))
}

fn fit_decay_hinge(
    taus: &[f64],
    log_b0: &[f64],
    weights: &[f64],
) -> Result<(DecayLaw, f64), ModelError> {
    let n = taus.len();
    // Candidate crossovers strictly inside the sampled range so that both
    // basis columns carry information.
    let mut best: Option<(f64, f64, f64, f64, f64)> = None; // (sse, tc, alpha, g1, g2)
    for i in 1..n - 1 {
        let tc = taus[i];
        if let Ok((sse, alpha, g1, g2)) = hinge_sse(taus, log_b0, weights, tc) {
            if best.is_none() || sse < best.unwrap().0 {
                best = Some((sse, tc, alpha, g1, g2));
            }
        }
    }
    let Some((_, tc0, ..)) = best else {
        // No interior candidate worked; fall back to a single slope.
        let line = wls::fit_line(taus, log_b0, weights)?;
        let law = DecayLaw {
            amplitude: line.intercept.exp2(),
            gamma_low: -line.slope,
            gamma_high: -line.slope,
            crossover_tau: 0.5 * (taus[0] + taus[n - 1]),
        };
        return Ok((law, line.chi2_per_dof * (n as f64 - 2.0).max(0.0)));
    };

    // Refine the crossover between its neighbors by golden-section search.
    let idx = taus.partition_point(|&t| t < tc0);
    let lo = taus[idx.saturating_sub(1).max(1) - 1].max(taus[0]);
    let hi = taus[(idx + 1).min(n - 1)];
    let golden = 0.618_033_988_749_894_9_f64;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - golden * (b - a);
    let mut d = a + golden * (b - a);
    let sse_at = |tc: f64| {
        hinge_sse(taus, log_b0, weights, tc)
            .map(|r| r.0)
            .unwrap_or(f64::INFINITY)
    };
    let (mut fc, mut fd) = (sse_at(c), sse_at(d));
    for _ in 0..120 {
        if b - a < 1e-10 {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - golden * (b - a);
            fc = sse_at(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + golden * (b - a);
            fd = sse_at(d);
        }
    }
    let tc = 0.5 * (a + b);
    let (sse, alpha, g1, g2) = hinge_sse(taus, log_b0, weights, tc).map_err(ModelError::Fit)?;
    let (sse0, alpha0, g10, g20) = hinge_sse(taus, log_b0, weights, tc0).map_err(ModelError::Fit)?;
    let (sse, tc, alpha, g1, g2) = if sse0 <= sse {
        (sse0, tc0, alpha0, g10, g20)
    } else {
        (sse, tc, alpha, g1, g2)
    };
    Ok((
        DecayLaw {
            amplitude: alpha.exp2(),
            gamma_low: g1,
            gamma_high: g2,
            crossover_tau: tc,
        },
        sse,
    ))
}

fn logistic_sse(taus: &[f64], ys: &[f64], ws: &[f64], law: &LogisticLaw) -> f64 {
    taus.iter()
        .zip(ys)
        .zip(ws)
        .map(|((&t, &y), &w)| {
            let r = y - law.eval(t);
            w * r * r
        })
        .sum()
}

fn fit_logistic(
    taus: &[f64],
    ys: &[f64],
    ws: &[f64],
    warnings: &mut Vec<String>,
) -> (LogisticLaw, f64) {
    let span = taus[taus.len() - 1] - taus[0];
    let y_min = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let y_max = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if y_max - y_min < 1e-9 * (1.0 + y_max.abs()) {
        let (mean, _) = weighted_mean(ys, ws);
        warnings.push("b2 is constant across scales; ramp degenerates to a plateau".to_string());
        let law = LogisticLaw {
            low: mean,
            high: mean,
            midpoint_tau: 0.5 * (taus[0] + taus[taus.len() - 1]),
            width: (span / 4.0).max(1e-3),
        };
        let sse = logistic_sse(taus, ys, ws, &law);
        return (law, sse);
    }

    // Coarse grid over (midpoint, width) with profiled plateaus.
    let mut best = LogisticLaw {
        low: y_min,
        high: y_max,
        midpoint_tau: 0.5 * (taus[0] + taus[taus.len() - 1]),
        width: span / 4.0,
    };
    let mut best_sse = f64::INFINITY;
    for im in 0..=40 {
        let mid = taus[0] + span * im as f64 / 40.0;
        for iw in 0..25 {
            let width = (span * 0.02) * (50.0f64).powf(iw as f64 / 24.0);
            // Profile (low, amplitude) linearly with the shape fixed.
            let mut s00 = 0.0;
            let mut s01 = 0.0;
            let mut s11 = 0.0;
            let mut t0 = 0.0;
            let mut t1 = 0.0;
            for i in 0..taus.len() {
                let s = sigmoid((taus[i] - mid) / width);
                let w = ws[i];
                s00 += w;
                s01 += w * s;
                s11 += w * s * s;
                t0 += w * ys[i];
                t1 += w * s * ys[i];
            }
            let det = s00 * s11 - s01 * s01;
            if det.abs() < 1e-14 {
                continue;
            }
            let beta0 = (t0 * s11 - t1 * s01) / det;
            let beta1 = (s00 * t1 - s01 * t0) / det;
            let cand = LogisticLaw {
                low: beta0,
                high: beta0 + beta1,
                midpoint_tau: mid,
                width,
            };
            let sse = logistic_sse(taus, ys, ws, &cand);
            if sse < best_sse {
                best_sse = sse;
                best = cand;
            }
        }
    }

    // Damped Gauss-Newton polish on (low, high, midpoint, ln width).
    let mut law = best;
    let mut lambda = 1e-3;
    let mut sse = best_sse;
    for _ in 0..200 {
        let mut jtj = nalgebra::Matrix4::<f64>::zeros();
        let mut jtr = nalgebra::Vector4::<f64>::zeros();
        for i in 0..taus.len() {
            let z = (taus[i] - law.midpoint_tau) / law.width;
            let s = sigmoid(z);
            let ds = s * (1.0 - s);
            let amp = law.high - law.low;
            let grad = nalgebra::Vector4::new(
                1.0 - s,
                s,
                -amp * ds / law.width,
                -amp * ds * z,
            );
            let r = ys[i] - law.eval(taus[i]);
            let w = ws[i];
            jtj += grad * grad.transpose() * w;
            jtr += grad * (w * r);
        }
        let mut damped = jtj;
        for k in 0..4 {
            damped[(k, k)] += lambda * (jtj[(k, k)].abs() + 1e-12);
        }
        let Some(step) = damped.lu().solve(&jtr) else { break };
        let cand = LogisticLaw {
            low: law.low + step[0],
            high: law.high + step[1],
            midpoint_tau: law.midpoint_tau + step[2],
            width: (law.width.ln() + step[3]).exp().clamp(1e-6, 1e6),
        };
        let cand_sse = logistic_sse(taus, ys, ws, &cand);
        if cand_sse.is_finite() && cand_sse < sse {
            let delta = sse - cand_sse;
            law = cand;
            sse = cand_sse;
            lambda = (lambda * 0.3).max(1e-12);
            if delta < 1e-16 * (1.0 + sse) {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e10 {
                break;
            }
        }
    }

    if law.high < law.low {
        warnings.push("b2 decreases with scale; ramp replaced by a plateau".to_string());
        let (mean, _) = weighted_mean(ys, ws);
        let flat = LogisticLaw {
            low: mean,
            high: mean,
            midpoint_tau: law.midpoint_tau,
            width: law.width,
        };
        let flat_sse = logistic_sse(taus, ys, ws, &flat);
        return (flat, flat_sse);
    }
    (law, sse)
}

fn fit_asymmetry(taus: &[f64], values: &[(f64, f64)]) -> AsymmetryLaw {
    let significant: Vec<usize> = values
        .iter()
        .enumerate()
        .filter(|(_, (v, se))| {
            let se = if *se > 0.0 && se.is_finite() { *se } else { 0.0 };
            v.abs() > 2.0 * se && v.abs() > 1e-12
        })
        .map(|(i, _)| i)
        .collect();
    if significant.is_empty() {
        return AsymmetryLaw {
            cutoff_tau: taus[0] - 1.0,
            value_below: 0.0,
        };
    }
    let last = *significant.last().expect("non-empty");
    let cutoff_tau = if last + 1 < taus.len() {
        0.5 * (taus[last] + taus[last + 1])
    } else {
        taus[last] + 1.0
    };
    let vals: Vec<f64> = significant.iter().map(|&i| values[i].0).collect();
    let ws: Vec<f64> = significant
        .iter()
        .map(|&i| inv_var_weight(values[i].1))
        .collect();
    let (mean, _) = weighted_mean(&vals, &ws);
    AsymmetryLaw {
        cutoff_tau,
        value_below: mean,
    }
}
