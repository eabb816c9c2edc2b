//! Finite-increment Kramers-Moyal coefficient estimation.
//!
//! From a conditional density between scales `tau` and `tau + dtau`, the
//! scaled conditional moments
//!
//! ```text
//! D~(k)(x) = <(x' - x)^k | x> / (dtau * k!)
//! ```
//!
//! are sampled per conditioning bin, the drift is fitted with a straight line
//! `-a1 x + a0`, the diffusion with a parabola `b2 x^2 + b1 x + b0`, and the
//! fitted parameters are extrapolated linearly to `dtau -> 0`. Moments are
//! forward conditional expectations, i.e. the Ito convention.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::ConditionalDensity;
use crate::wls::{self, WlsError};

#[derive(Debug, Error)]
pub enum KmError {
    #[error("curve has order {got:?}, expected {expected:?}")]
    WrongOrder { expected: KmOrder, got: KmOrder },
    #[error("midpoint scales spread over {spread:.3} exceeds the tolerance {tolerance}")]
    MidpointSpread { spread: f64, tolerance: f64 },
    #[error("no increment pairs supplied")]
    NoPairs,
    #[error(transparent)]
    Density(#[from] crate::density::DensityError),
    #[error("too few admissible points in the fit range: got {got}, need {needed}")]
    TooFewPoints { got: usize, needed: usize },
    #[error("no contiguous fit range satisfies the occupancy threshold")]
    EmptyFitRange,
    #[error("fitted diffusion at the origin is not positive: b0~ = {b0_tilde}")]
    NonPositiveDiffusionAtOrigin { b0_tilde: f64 },
    #[error("fitted diffusion dips negative inside the fit range (min {min} at x = {at})")]
    NegativeDiffusionInRange { min: f64, at: f64 },
    #[error("extrapolation needs at least 3 distinct increments, got {got}")]
    TooFewIncrements { got: usize },
    #[error("extrapolated b0 is not positive: {b0}")]
    NonPositiveExtrapolatedB0 { b0: f64 },
    #[error(transparent)]
    Fit(#[from] WlsError),
}

/// Moment order of a sampled coefficient curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KmOrder {
    First,
    Second,
    Fourth,
}

impl KmOrder {
    pub fn k(self) -> u32 {
        match self {
            KmOrder::First => 1,
            KmOrder::Second => 2,
            KmOrder::Fourth => 4,
        }
    }

    pub fn factorial(self) -> f64 {
        match self {
            KmOrder::First => 1.0,
            KmOrder::Second => 2.0,
            KmOrder::Fourth => 24.0,
        }
    }
}

/// Sampled finite-increment coefficient curve at one `(tau, dtau)` pair.
///
/// Only conditioning bins with nonzero occupancy appear; empty rows are
/// omitted rather than zero-filled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub order: KmOrder,
    /// Midpoint scale `(tau1 + tau2) / 2`.
    pub tau: f64,
    pub dtau: f64,
    pub x_centers: Vec<f64>,
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub n_eff: Vec<u64>,
}

impl KmCurve {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Largest contiguous interval around the center where every bin holds at
    /// least `min_count` samples. This mirrors restricting fits to the
    /// well-populated core of the distribution.
    pub fn central_fit_range(&self, min_count: u64) -> Result<FitRange, KmError> {
        if self.is_empty() {
            return Err(KmError::EmptyFitRange);
        }
        // Index closest to x = 0.
        let center = self
            .x_centers
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .expect("non-empty");
        if self.n_eff[center] < min_count {
            return Err(KmError::EmptyFitRange);
        }
        let mut lo = center;
        let mut hi = center;
        while lo > 0 && self.n_eff[lo - 1] >= min_count {
            lo -= 1;
        }
        while hi + 1 < self.len() && self.n_eff[hi + 1] >= min_count {
            hi += 1;
        }
        Ok(FitRange {
            x_min: self.x_centers[lo],
            x_max: self.x_centers[hi],
        })
    }

    fn admissible(&self, range: FitRange, min_count: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut ws = Vec::new();
        for i in 0..self.len() {
            let x = self.x_centers[i];
            if x < range.x_min || x > range.x_max || self.n_eff[i] < min_count {
                continue;
            }
            xs.push(x);
            ys.push(self.values[i]);
            ws.push(1.0 / (self.std_errors[i] * self.std_errors[i]));
        }
        (xs, ys, ws)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "x,value,std_error,n_eff")?;
        for i in 0..self.len() {
            writeln!(
                out,
                "{},{},{},{}",
                self.x_centers[i], self.values[i], self.std_errors[i], self.n_eff[i]
            )?;
        }
        Ok(())
    }
}

/// Interval of conditioning-return values admitted into a fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitRange {
    pub x_min: f64,
    pub x_max: f64,
}

/// Sample the scaled conditional moment of the given order per conditioning
/// bin. Standard errors come from the within-row sample variance of
/// `(x' - x)^k` divided by the square root of the row occupancy.
pub fn conditional_moment(cd: &ConditionalDensity, order: KmOrder) -> KmCurve {
    let dtau = cd.dtau();
    let kfact = order.factorial();
    let k = order.k() as i32;
    let scale = 1.0 / (dtau * kfact);

    let x1 = cd.x1_centers();
    let x2 = cd.x2_centers();
    let cpdf = cd.conditional();

    let mut x_centers = Vec::new();
    let mut values = Vec::new();
    let mut std_errors = Vec::new();
    let mut n_eff = Vec::new();

    for (i, row) in cpdf.rows.iter().enumerate() {
        let Some(probs) = row else { continue };
        let n = cpdf.row_counts[i];
        let mut m = 0.0;
        let mut m2 = 0.0;
        for (j, &p) in probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let y = (x2[j] - x1[i]).powi(k);
            m += p * y;
            m2 += p * y * y;
        }
        let var = (m2 - m * m).max(0.0);
        let se = (var / n as f64).sqrt() * scale;
        let value = m * scale;
        x_centers.push(x1[i]);
        values.push(value);
        std_errors.push(se.max(1e-12 * (1.0 + value.abs())));
        n_eff.push(n);
    }

    KmCurve {
        order,
        tau: cd.tau_midpoint(),
        dtau,
        x_centers,
        values,
        std_errors,
        n_eff,
    }
}

/// Straight-line fit of the first-order curve: `D~(1) = -a1~ x + a0~`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftFit {
    pub a1_tilde: f64,
    pub a0_tilde: f64,
    /// Covariance of `(a1~, a0~)`.
    pub covariance: [[f64; 2]; 2],
    pub fit_range: FitRange,
    pub chi2_per_dof: f64,
    pub n_points: usize,
}

impl DriftFit {
    pub fn a1_se(&self) -> f64 {
        self.covariance[0][0].max(0.0).sqrt()
    }

    pub fn a0_se(&self) -> f64 {
        self.covariance[1][1].max(0.0).sqrt()
    }
}

pub fn fit_drift(
    curve: &KmCurve,
    range: FitRange,
    min_count: u64,
) -> Result<DriftFit, KmError> {
    if curve.order != KmOrder::First {
        return Err(KmError::WrongOrder {
            expected: KmOrder::First,
            got: curve.order,
        });
    }
    let (xs, ys, ws) = curve.admissible(range, min_count);
    if xs.len() < 5 {
        return Err(KmError::TooFewPoints {
            got: xs.len(),
            needed: 5,
        });
    }
    let fit = wls::fit_polynomial(&xs, &ys, &ws, 1)?;
    // Model is y = c0 + c1 x with a1 = -c1, a0 = c0.
    Ok(DriftFit {
        a1_tilde: -fit.coefficients[1],
        a0_tilde: fit.coefficients[0],
        covariance: [
            [fit.covariance[(1, 1)], -fit.covariance[(1, 0)]],
            [-fit.covariance[(0, 1)], fit.covariance[(0, 0)]],
        ],
        fit_range: range,
        chi2_per_dof: fit.chi2_per_dof(),
        n_points: xs.len(),
    })
}

/// Parabola fit of the second-order curve: `D~(2) = b2~ x^2 + b1~ x + b0~`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionFit {
    pub b2_tilde: f64,
    pub b1_tilde: f64,
    pub b0_tilde: f64,
    /// Covariance of `(b2~, b1~, b0~)`.
    pub covariance: [[f64; 3]; 3],
    pub fit_range: FitRange,
    pub chi2_per_dof: f64,
    pub n_points: usize,
}

impl DiffusionFit {
    pub fn b2_se(&self) -> f64 {
        self.covariance[0][0].max(0.0).sqrt()
    }

    pub fn b1_se(&self) -> f64 {
        self.covariance[1][1].max(0.0).sqrt()
    }

    pub fn b0_se(&self) -> f64 {
        self.covariance[2][2].max(0.0).sqrt()
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.b2_tilde * x * x + self.b1_tilde * x + self.b0_tilde
    }
}

pub fn fit_diffusion(
    curve: &KmCurve,
    range: FitRange,
    min_count: u64,
) -> Result<DiffusionFit, KmError> {
    if curve.order != KmOrder::Second {
        return Err(KmError::WrongOrder {
            expected: KmOrder::Second,
            got: curve.order,
        });
    }
    let (xs, ys, ws) = curve.admissible(range, min_count);
    if xs.len() < 6 {
        return Err(KmError::TooFewPoints {
            got: xs.len(),
            needed: 6,
        });
    }
    let fit = wls::fit_polynomial(&xs, &ys, &ws, 2)?;
    let (c0, c1, c2) = (fit.coefficients[0], fit.coefficients[1], fit.coefficients[2]);
    // Reorder covariance from (c0, c1, c2) to (b2, b1, b0) = (c2, c1, c0).
    let cv = |a: usize, b: usize| fit.covariance[(2 - a, 2 - b)];
    let out = DiffusionFit {
        b2_tilde: c2,
        b1_tilde: c1,
        b0_tilde: c0,
        covariance: [
            [cv(0, 0), cv(0, 1), cv(0, 2)],
            [cv(1, 0), cv(1, 1), cv(1, 2)],
            [cv(2, 0), cv(2, 1), cv(2, 2)],
        ],
        fit_range: range,
        chi2_per_dof: fit.chi2_per_dof(),
        n_points: xs.len(),
    };
    if out.b0_tilde <= 0.0 {
        return Err(KmError::NonPositiveDiffusionAtOrigin {
            b0_tilde: out.b0_tilde,
        });
    }
    // The fitted parabola must stay non-negative over the admitted interval.
    let vertex = if out.b2_tilde > 0.0 {
        -out.b1_tilde / (2.0 * out.b2_tilde)
    } else {
        f64::NAN
    };
    let mut min_val = out.eval(range.x_min).min(out.eval(range.x_max));
    let mut min_at = if out.eval(range.x_min) <= out.eval(range.x_max) {
        range.x_min
    } else {
        range.x_max
    };
    if vertex.is_finite() && vertex > range.x_min && vertex < range.x_max {
        let v = out.eval(vertex);
        if v < min_val {
            min_val = v;
            min_at = vertex;
        }
    }
    if min_val < 0.0 {
        return Err(KmError::NegativeDiffusionInRange {
            min: min_val,
            at: min_at,
        });
    }
    Ok(out)
}

/// Linear extrapolation of one fitted parameter to zero increment.
///
/// Standard errors are scaled by `sqrt(max(1, chi2/dof))`, so a poor linear
/// model inflates the quoted uncertainty instead of hiding the misfit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamExtrapolation {
    pub limit: f64,
    pub slope: f64,
    pub limit_se: f64,
    pub slope_se: f64,
    pub chi2_per_dof: f64,
    /// Quadratic-model intercept and its (scaled) standard error, computed
    /// when the linear fit is poor (chi2/dof > 3) and enough increments
    /// exist. The adopted drift/diffusion limit stays linear; the truncation
    /// check prefers this value where available.
    pub quadratic_limit: Option<f64>,
    pub quadratic_limit_se: Option<f64>,
}

fn extrapolate_param(dtaus: &[f64], values: &[f64], ses: &[f64]) -> Result<ParamExtrapolation, KmError> {
    let weights: Vec<f64> = ses
        .iter()
        .map(|&s| {
            let s = s.max(1e-12);
            1.0 / (s * s)
        })
        .collect();
    let line = wls::fit_line(dtaus, values, &weights)?;
    let scale = line.chi2_per_dof.max(1.0).sqrt();
    let (quadratic_limit, quadratic_limit_se) = if line.chi2_per_dof > 3.0 && dtaus.len() >= 4 {
        match wls::fit_polynomial(dtaus, values, &weights, 2) {
            Ok(q) => {
                let qscale = q.chi2_per_dof().max(1.0).sqrt();
                (Some(q.coefficients[0]), Some(q.std_error(0) * qscale))
            }
            Err(_) => (None, None),
        }
    } else {
        (None, None)
    };
    Ok(ParamExtrapolation {
        limit: line.intercept,
        slope: line.slope,
        limit_se: line.intercept_se * scale,
        slope_se: line.slope_se * scale,
        chi2_per_dof: line.chi2_per_dof,
        quadratic_limit,
        quadratic_limit_se,
    })
}

/// Zero-increment limits of the five coefficient parameters at one scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmLimit {
    pub tau: f64,
    pub a1: f64,
    pub a0: f64,
    pub b2: f64,
    pub b1: f64,
    pub b0: f64,
    pub n_dtau: usize,
    pub a1_diag: ParamExtrapolation,
    pub a0_diag: ParamExtrapolation,
    pub b2_diag: ParamExtrapolation,
    pub b1_diag: ParamExtrapolation,
    pub b0_diag: ParamExtrapolation,
}

impl KmLimit {
    pub const CSV_HEADER: &'static str =
        "tau,a1,a1_se,a0,a0_se,b2,b2_se,b1,b1_se,b0,b0_se,n_dtau";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.tau,
            self.a1,
            self.a1_diag.limit_se,
            self.a0,
            self.a0_diag.limit_se,
            self.b2,
            self.b2_diag.limit_se,
            self.b1,
            self.b1_diag.limit_se,
            self.b0,
            self.b0_diag.limit_se,
            self.n_dtau
        )
    }
}

/// Extrapolate per-increment drift/diffusion fits to zero increment at a
/// common nominal scale. The intercept of a per-parameter straight line in
/// `dtau` is the limit; inputs are sorted by increment first so the result is
/// independent of caller ordering.
pub fn extrapolate_dtau(
    fits: &[(f64, DriftFit, DiffusionFit)],
    tau: f64,
) -> Result<KmLimit, KmError> {
    let mut sorted: Vec<&(f64, DriftFit, DiffusionFit)> = fits.iter().collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut dtaus: Vec<f64> = sorted.iter().map(|f| f.0).collect();
    dtaus.dedup();
    if dtaus.len() < 3 {
        return Err(KmError::TooFewIncrements { got: dtaus.len() });
    }
    let dt: Vec<f64> = sorted.iter().map(|f| f.0).collect();

    let collect = |value: &dyn Fn(&(f64, DriftFit, DiffusionFit)) -> (f64, f64)| {
        let vals: Vec<f64> = sorted.iter().map(|f| value(f).0).collect();
        let ses: Vec<f64> = sorted.iter().map(|f| value(f).1).collect();
        (vals, ses)
    };

    let (a1_v, a1_s) = collect(&|f| (f.1.a1_tilde, f.1.a1_se()));
    let (a0_v, a0_s) = collect(&|f| (f.1.a0_tilde, f.1.a0_se()));
    let (b2_v, b2_s) = collect(&|f| (f.2.b2_tilde, f.2.b2_se()));
    let (b1_v, b1_s) = collect(&|f| (f.2.b1_tilde, f.2.b1_se()));
    let (b0_v, b0_s) = collect(&|f| (f.2.b0_tilde, f.2.b0_se()));

    let a1_diag = extrapolate_param(&dt, &a1_v, &a1_s)?;
    let a0_diag = extrapolate_param(&dt, &a0_v, &a0_s)?;
    let b2_diag = extrapolate_param(&dt, &b2_v, &b2_s)?;
    let b1_diag = extrapolate_param(&dt, &b1_v, &b1_s)?;
    let b0_diag = extrapolate_param(&dt, &b0_v, &b0_s)?;

    if b0_diag.limit <= 0.0 {
        return Err(KmError::NonPositiveExtrapolatedB0 {
            b0: b0_diag.limit,
        });
    }

    Ok(KmLimit {
        tau,
        a1: a1_diag.limit,
        a0: a0_diag.limit,
        b2: b2_diag.limit,
        b1: b1_diag.limit,
        b0: b0_diag.limit,
        n_dtau: dtaus.len(),
        a1_diag,
        a0_diag,
        b2_diag,
        b1_diag,
        b0_diag,
    })
}

/// Configuration for the fourth-order truncation check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PawulaConfig {
    /// `max|D(4)|` must stay below this fraction of `max|D(2)|`.
    pub ratio_threshold: f64,
    pub se_multiplier: f64,
    pub min_count: u64,
}

impl Default for PawulaConfig {
    fn default() -> Self {
        Self {
            ratio_threshold: 0.05,
            se_multiplier: 2.0,
            min_count: 50,
        }
    }
}

/// Outcome of the fourth-order truncation check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PawulaReport {
    /// Extrapolated quartic coefficients, ascending degree.
    pub coefficient_limits: [f64; 5],
    pub coefficient_ses: [f64; 5],
    pub within_tolerance: [bool; 5],
    /// Whether the quadratic fallback supplied the limit for each degree.
    pub used_quadratic: [bool; 5],
    pub max_d4_limit: f64,
    pub max_d2_limit: f64,
    pub ratio_threshold: f64,
    pub n_dtau: usize,
    pub passed: bool,
}

/// Fit a quartic polynomial to each fourth-order curve, extrapolate the five
/// coefficients to zero increment, and test both that each limit is
/// statistically indistinguishable from zero and that the limiting curve is
/// small relative to the diffusion.
pub fn pawula_check(
    curves: &[KmCurve],
    range: FitRange,
    diffusion: &KmLimit,
    cfg: &PawulaConfig,
) -> Result<PawulaReport, KmError> {
    for c in curves {
        if c.order != KmOrder::Fourth {
            return Err(KmError::WrongOrder {
                expected: KmOrder::Fourth,
                got: c.order,
            });
        }
    }
    let mut sorted: Vec<&KmCurve> = curves.iter().collect();
    sorted.sort_by(|a, b| a.dtau.total_cmp(&b.dtau));
    let mut distinct: Vec<f64> = sorted.iter().map(|c| c.dtau).collect();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(KmError::TooFewIncrements {
            got: distinct.len(),
        });
    }

    let mut per_dtau: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::new();
    for c in &sorted {
        let (xs, ys, ws) = c.admissible(range, cfg.min_count);
        if xs.len() < 6 {
            return Err(KmError::TooFewPoints {
                got: xs.len(),
                needed: 6,
            });
        }
        let fit = wls::fit_polynomial(&xs, &ys, &ws, 4)?;
        let ses: Vec<f64> = (0..5).map(|i| fit.std_error(i)).collect();
        per_dtau.push((c.dtau, fit.coefficients, ses));
    }

    let dtaus: Vec<f64> = per_dtau.iter().map(|p| p.0).collect();
    let mut coefficient_limits = [0.0; 5];
    let mut coefficient_ses = [0.0; 5];
    let mut within_tolerance = [false; 5];
    let mut used_quadratic = [false; 5];
    // The fourth-order curve of a diffusion scales like the increment times
    // the squared relaxation factor, so its increment dependence is curved by
    // construction; extrapolate quadratically whenever enough increments
    // exist (the drift/diffusion limits stay linear).
    let degree = if dtaus.len() >= 4 { 2 } else { 1 };
    for deg in 0..5 {
        let vals: Vec<f64> = per_dtau.iter().map(|p| p.1[deg]).collect();
        let ses: Vec<f64> = per_dtau.iter().map(|p| p.2[deg]).collect();
        let weights: Vec<f64> = ses
            .iter()
            .map(|&s| {
                let s = s.max(1e-12);
                1.0 / (s * s)
            })
            .collect();
        let fit = wls::fit_polynomial(&dtaus, &vals, &weights, degree)?;
        let scale = fit.chi2_per_dof().max(1.0).sqrt();
        let limit = fit.coefficients[0];
        let se = fit.std_error(0) * scale;
        used_quadratic[deg] = degree == 2;
        coefficient_limits[deg] = limit;
        coefficient_ses[deg] = se;
        within_tolerance[deg] = limit.abs() <= cfg.se_multiplier * se;
    }

    let eval_quartic = |x: f64| {
        coefficient_limits
            .iter()
            .rev()
            .fold(0.0, |acc, c| acc * x + c)
    };
    let eval_d2 = |x: f64| diffusion.b2 * x * x + diffusion.b1 * x + diffusion.b0;
    let samples = 201;
    let mut max_d4: f64 = 0.0;
    let mut max_d2: f64 = 0.0;
    for s in 0..samples {
        let x = range.x_min + (range.x_max - range.x_min) * s as f64 / (samples - 1) as f64;
        max_d4 = max_d4.max(eval_quartic(x).abs());
        max_d2 = max_d2.max(eval_d2(x).abs());
    }

    let passed =
        within_tolerance.iter().all(|&w| w) && max_d4 <= cfg.ratio_threshold * max_d2;

    Ok(PawulaReport {
        coefficient_limits,
        coefficient_ses,
        within_tolerance,
        used_quadratic,
        max_d4_limit: max_d4,
        max_d2_limit: max_d2,
        ratio_threshold: cfg.ratio_threshold,
        n_dtau: distinct.len(),
        passed,
    })
}

/// A pair of return series bracketing one scale increment.
#[derive(Debug, Clone, Copy)]
pub struct ScalePair<'a> {
    pub tau1: f64,
    pub tau2: f64,
    pub coarse: &'a crate::series::ReturnSeries,
    pub fine: &'a crate::series::ReturnSeries,
}

/// Per-increment curves and fits retained for reporting.
#[derive(Debug, Clone)]
pub struct SliceFit {
    pub tau: f64,
    pub dtau: f64,
    pub drift: DriftFit,
    pub diffusion: DiffusionFit,
    pub d1: KmCurve,
    pub d2: KmCurve,
    pub d4: KmCurve,
}

/// Everything estimated at one nominal scale: per-increment fits, the
/// zero-increment limit, and the fourth-order truncation check.
#[derive(Debug, Clone)]
pub struct ScaleEstimate {
    pub tau_nominal: f64,
    pub fit_range: FitRange,
    pub slices: Vec<SliceFit>,
    pub limit: KmLimit,
    pub pawula: PawulaReport,
}

/// Full estimation at one nominal scale from increment pairs: histograms,
/// moment curves, drift/diffusion fits per increment, the zero-increment
/// extrapolation, and the truncation check. Pairs should share a nominal
/// midpoint within `midpoint_tolerance`.
pub fn estimate_at_scale(
    pairs: &[ScalePair<'_>],
    binning: &crate::density::BinningSpec,
    min_count: u64,
    pawula_cfg: &PawulaConfig,
    midpoint_tolerance: f64,
) -> Result<ScaleEstimate, KmError> {
    if pairs.is_empty() {
        return Err(KmError::NoPairs);
    }
    let midpoints: Vec<f64> = pairs.iter().map(|p| 0.5 * (p.tau1 + p.tau2)).collect();
    let lo = midpoints.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = midpoints.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo > midpoint_tolerance {
        return Err(KmError::MidpointSpread {
            spread: hi - lo,
            tolerance: midpoint_tolerance,
        });
    }
    let tau_nominal = midpoints.iter().sum::<f64>() / midpoints.len() as f64;

    let mut curves = Vec::with_capacity(pairs.len());
    for p in pairs {
        let cd = crate::density::joint_histogram(p.coarse, p.fine, p.tau1, p.tau2, binning)?;
        let d1 = conditional_moment(&cd, KmOrder::First);
        let d2 = conditional_moment(&cd, KmOrder::Second);
        let d4 = conditional_moment(&cd, KmOrder::Fourth);
        curves.push((d1, d2, d4));
    }

    // Common fit range: intersection of the per-increment central ranges.
    let mut x_min = f64::NEG_INFINITY;
    let mut x_max = f64::INFINITY;
    for (d1, _, _) in &curves {
        let r = d1.central_fit_range(min_count)?;
        x_min = x_min.max(r.x_min);
        x_max = x_max.min(r.x_max);
    }
    let range = FitRange { x_min, x_max };

    let mut slices = Vec::with_capacity(curves.len());
    let mut fits = Vec::with_capacity(curves.len());
    let mut d4_curves = Vec::with_capacity(curves.len());
    for (d1, d2, d4) in curves {
        let drift = fit_drift(&d1, range, min_count)?;
        let diffusion = fit_diffusion(&d2, range, min_count)?;
        fits.push((d1.dtau, drift.clone(), diffusion.clone()));
        d4_curves.push(d4.clone());
        slices.push(SliceFit {
            tau: d1.tau,
            dtau: d1.dtau,
            drift,
            diffusion,
            d1,
            d2,
            d4,
        });
    }
    let limit = extrapolate_dtau(&fits, tau_nominal)?;
    let pawula = pawula_check(&d4_curves, range, &limit, pawula_cfg)?;

    Ok(ScaleEstimate {
        tau_nominal,
        fit_range: range,
        slices,
        limit,
        pawula,
    })
}
