//! The generalized Student-t (q-Gaussian) solution family and tail-exponent
//! fits.
//!
//! The family is `P(x) ∝ (b0 + b2 (x-c)^2)^(-(mu+1)/2)`: power-law tails of
//! exponent `mu + 1`, equivalently a q-Gaussian with `q = 1 + 2/(mu+1)`. For
//! `b2 = 0` it degenerates to the Gaussian with variance `b0`.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::coeff::CoefficientModel;
use crate::density::Histogram1D;

#[derive(Debug, Error)]
pub enum QGaussError {
    #[error("non-normalizable parameters: mu={mu}, b0={b0}, b2={b2}")]
    NonNormalizable { mu: f64, b0: f64, b2: f64 },
    #[error("tail fit needs at least {needed} populated bins, got {got}")]
    TooFewBins { got: usize, needed: usize },
    #[error("tail fit did not converge after {iterations} iterations (loss {loss:.3e})")]
    NoConvergence { iterations: usize, loss: f64 },
    #[error("variance is not finite: a1 - B/2 - b2 = {denominator} <= 0")]
    InfiniteVariance { denominator: f64 },
    #[error("variance formula requires mu > 2, got {mu}")]
    MuTooSmall { mu: f64 },
}

/// `q = 1 + 2/(mu+1)`; lies in (1, 3) for finite `mu > 0`.
pub fn q_of_mu(mu: f64) -> f64 {
    1.0 + 2.0 / (mu + 1.0)
}

/// Inverse of [`q_of_mu`]: `mu = 2/(q-1) - 1`.
pub fn mu_of_q(q: f64) -> f64 {
    2.0 / (q - 1.0) - 1.0
}

/// Tail exponent implied by the coefficient parameters:
/// `mu = 1 + (a1 - B/2)/b2`, with `B` the natural-log decay rate of `b0`.
///
/// `b2 <= 0` returns infinity: the Gaussian regime, not an error.
pub fn mu_from_params(a1: f64, decay_rate: f64, b2: f64) -> f64 {
    if b2 <= 0.0 {
        f64::INFINITY
    } else {
        1.0 + (a1 - 0.5 * decay_rate) / b2
    }
}

/// Alternative exponent from the multiplicative-reinjection literature,
/// `mu = a1 / (2 b2)`; exposed for comparison reports only.
pub fn mu_multiplicative_reinjection(a1: f64, b2: f64) -> f64 {
    if b2 <= 0.0 {
        f64::INFINITY
    } else {
        a1 / (2.0 * b2)
    }
}

/// Predicted rescaled variance `sigma^2(tau) = b0(tau) / (a1 - B/2 - b2)`.
pub fn variance_prediction(model: &CoefficientModel, tau: f64) -> Result<f64, QGaussError> {
    let c = model.eval(tau);
    let decay = model.decay_rate(tau);
    let denominator = c.a1 - 0.5 * decay - c.b2;
    if denominator <= 0.0 {
        return Err(QGaussError::InfiniteVariance { denominator });
    }
    Ok(c.b0 / denominator)
}

/// A fitted (or constructed) member of the family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QGaussianFit {
    pub mu: f64,
    pub scale_b0: f64,
    pub scale_b2: f64,
    pub center: f64,
    pub normalization: f64,
    pub fit_loss: f64,
    pub q_equiv: f64,
    pub mu_ci: Option<(f64, f64)>,
    pub gaussian_regime: bool,
    pub asymmetry_warning: bool,
}

impl QGaussianFit {
    /// Construct an exact family member (no fit metadata).
    pub fn exact(mu: f64, b0: f64, b2: f64, center: f64) -> Result<Self, QGaussError> {
        let normalization = normalization(mu, b0, b2)?;
        Ok(QGaussianFit {
            mu,
            scale_b0: b0,
            scale_b2: b2,
            center,
            normalization,
            fit_loss: 0.0,
            q_equiv: q_of_mu(mu),
            mu_ci: None,
            gaussian_regime: b2 == 0.0,
            asymmetry_warning: false,
        })
    }

    pub fn pdf(&self, x: f64) -> f64 {
        qgaussian_pdf(x, self)
    }

    /// Closed-form variance `b0 / (b2 (mu - 2))`; requires `mu > 2`.
    pub fn variance(&self) -> Result<f64, QGaussError> {
        if self.scale_b2 == 0.0 {
            return Ok(self.scale_b0);
        }
        if self.mu <= 2.0 {
            return Err(QGaussError::MuTooSmall { mu: self.mu });
        }
        Ok(self.scale_b0 / (self.scale_b2 * (self.mu - 2.0)))
    }
}

fn normalization(mu: f64, b0: f64, b2: f64) -> Result<f64, QGaussError> {
    if !(b0 > 0.0) || b2 < 0.0 || (b2 > 0.0 && !(mu > 0.0)) {
        return Err(QGaussError::NonNormalizable { mu, b0, b2 });
    }
    if b2 == 0.0 {
        // Gaussian limit with variance b0.
        return Ok(1.0 / (2.0 * std::f64::consts::PI * b0).sqrt());
    }
    let m = 0.5 * (mu + 1.0);
    let ln_n = 0.5 * (b2 / b0).ln() + ln_gamma(m)
        - 0.5 * std::f64::consts::PI.ln()
        - ln_gamma(m - 0.5);
    Ok(ln_n.exp())
}

/// Normalized density of the family member at `x`.
pub fn qgaussian_pdf(x: f64, fit: &QGaussianFit) -> f64 {
    let d = x - fit.center;
    if fit.scale_b2 == 0.0 {
        return fit.normalization * (-d * d / (2.0 * fit.scale_b0)).exp();
    }
    let m = 0.5 * (fit.mu + 1.0);
    fit.normalization * (1.0 + (fit.scale_b2 / fit.scale_b0) * d * d).powf(-m)
}

fn ln_pdf(params: &[f64; 4], x: f64) -> f64 {
    // params = (ln mu, ln b0, ln b2, center)
    let mu = params[0].exp();
    let b0 = params[1].exp();
    let b2 = params[2].exp();
    let c = params[3];
    let m = 0.5 * (mu + 1.0);
    let ln_n = 0.5 * (b2 / b0).ln() + ln_gamma(m)
        - 0.5 * std::f64::consts::PI.ln()
        - ln_gamma(m - 0.5);
    let d = x - c;
    ln_n - m * (1.0 + (b2 / b0) * d * d).ln()
}

/// A density sample for tail fitting: position, density estimate, and a
/// weight proportional to the information carried (bin occupancy for counted
/// histograms).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityPoint {
    pub x: f64,
    pub density: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitMuOptions {
    /// Fix the center (the intraday default is 0) or fit it freely.
    pub fixed_center: Option<f64>,
    pub max_iterations: usize,
    /// Resamples for the bootstrap confidence interval; 0 disables it and the
    /// interval falls back to the linearized covariance.
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    pub min_bins: usize,
    /// Lower confidence bound above which the sample is flagged Gaussian.
    pub gaussian_mu_threshold: f64,
    /// Fixed-center loss (chi2/dof) above which an asymmetry warning is set.
    pub asymmetry_loss_threshold: f64,
    /// Fit in linear density space instead of log space (sensitivity runs).
    pub linear_space: bool,
}

impl Default for FitMuOptions {
    fn default() -> Self {
        Self {
            fixed_center: Some(0.0),
            max_iterations: 300,
            bootstrap_resamples: 200,
            bootstrap_seed: 0,
            min_bins: 15,
            gaussian_mu_threshold: 10.0,
            asymmetry_loss_threshold: 5.0,
            linear_space: false,
        }
    }
}

/// Convert a counted histogram into weighted density points.
pub fn density_points_from_histogram(hist: &Histogram1D) -> Vec<DensityPoint> {
    let centers = hist.centers();
    let pdf = hist.to_pdf();
    centers
        .into_iter()
        .zip(pdf)
        .zip(&hist.counts)
        .filter(|((_, p), &c)| *p > 0.0 && c > 0)
        .map(|((x, density), &c)| DensityPoint {
            x,
            density,
            weight: c as f64,
        })
        .collect()
}

/// Weighted least-squares fit of the family to density points, in log-density
/// space by default.
pub fn fit_mu(points: &[DensityPoint], opts: &FitMuOptions) -> Result<QGaussianFit, QGaussError> {
    let pts: Vec<DensityPoint> = points
        .iter()
        .copied()
        .filter(|p| p.density > 0.0 && p.weight > 0.0 && p.x.is_finite())
        .collect();
    if pts.len() < opts.min_bins {
        return Err(QGaussError::TooFewBins {
            got: pts.len(),
            needed: opts.min_bins,
        });
    }

    let fit = fit_mu_core(&pts, opts)?;
    let (params, loss) = fit;
    let mu = params[0].exp();
    let b0 = params[1].exp();
    let b2 = params[2].exp();
    let center = params[3];

    let mu_ci = if opts.bootstrap_resamples > 0 {
        Some(bootstrap_mu_ci(&pts, opts)?)
    } else {
        linearized_mu_ci(&pts, &params, opts)
    };

    let gaussian_regime = match mu_ci {
        Some((lo, _)) => lo > opts.gaussian_mu_threshold,
        None => mu > opts.gaussian_mu_threshold,
    };
    let asymmetry_warning =
        opts.fixed_center.is_some() && loss > opts.asymmetry_loss_threshold;

    Ok(QGaussianFit {
        mu,
        scale_b0: b0,
        scale_b2: b2,
        center,
        normalization: normalization(mu, b0, b2)?,
        fit_loss: loss,
        q_equiv: q_of_mu(mu),
        mu_ci,
        gaussian_regime,
        asymmetry_warning,
    })
}

/// Core optimizer. Returns `((ln mu, ln b0, ln b2, center), chi2_per_dof)`.
fn fit_mu_core(
    pts: &[DensityPoint],
    opts: &FitMuOptions,
) -> Result<([f64; 4], f64), QGaussError> {
    // Moment-based initialization.
    let wsum: f64 = pts.iter().map(|p| p.weight).sum();
    let mean = pts.iter().map(|p| p.weight * p.x).sum::<f64>() / wsum;
    let var = pts
        .iter()
        .map(|p| p.weight * (p.x - mean).powi(2))
        .sum::<f64>()
        / wsum;
    let m4 = pts
        .iter()
        .map(|p| p.weight * (p.x - mean).powi(4))
        .sum::<f64>()
        / wsum;
    let excess = (m4 / (var * var) - 3.0).max(0.02);
    let mu_kurt = (4.0 + 6.0 / excess).clamp(0.5, 400.0);

    let center0 = opts.fixed_center.unwrap_or(mean);
    let mut best: Option<([f64; 4], f64)> = None;
    for &mu0 in &[mu_kurt, 3.0, 6.0, 12.0, 60.0] {
        let b2_0 = if mu0 > 2.5 { 1.0 / (mu0 - 2.0) } else { 0.5 };
        let b0_0 = (var * b2_0 * (mu0 - 2.0).max(0.5)).max(1e-12);
        let start = [mu0.ln(), b0_0.ln(), b2_0.ln(), center0];
        if let Ok(result) = levenberg_marquardt(pts, start, opts) {
            if best.is_none() || result.1 < best.unwrap().1 {
                best = Some(result);
            }
        }
    }
    best.ok_or(QGaussError::NoConvergence {
        iterations: opts.max_iterations,
        loss: f64::INFINITY,
    })
}

fn residuals(pts: &[DensityPoint], params: &[f64; 4], linear: bool) -> f64 {
    let mut sse = 0.0;
    for p in pts {
        let model_ln = ln_pdf(params, p.x);
        let r = if linear {
            p.density - model_ln.exp()
        } else {
            p.density.ln() - model_ln
        };
        sse += p.weight * r * r;
    }
    sse
}

fn levenberg_marquardt(
    pts: &[DensityPoint],
    start: [f64; 4],
    opts: &FitMuOptions,
) -> Result<([f64; 4], f64), QGaussError> {
    let free_center = opts.fixed_center.is_none();
    let np = if free_center { 4 } else { 3 };
    let mut params = start;
    let mut sse = residuals(pts, &params, opts.linear_space);
    let mut lambda = 1e-3;
    let mut converged = false;

    for _ in 0..opts.max_iterations {
        // Numeric Jacobian of the (weighted) residual vector.
        let mut jtj = nalgebra::DMatrix::<f64>::zeros(np, np);
        let mut jtr = nalgebra::DVector::<f64>::zeros(np);
        for p in pts {
            let model_ln = ln_pdf(&params, p.x);
            let r = if opts.linear_space {
                p.density - model_ln.exp()
            } else {
                p.density.ln() - model_ln
            };
            let mut grad = vec![0.0; np];
            for (g, slot) in grad.iter_mut().enumerate() {
                let mut up = params;
                let h = 1e-6 * (1.0 + params[g].abs());
                up[g] += h;
                let model_up = ln_pdf(&up, p.x);
                let r_up = if opts.linear_space {
                    p.density - model_up.exp()
                } else {
                    p.density.ln() - model_up
                };
                *slot = (r_up - r) / h;
            }
            for a in 0..np {
                jtr[a] -= p.weight * grad[a] * r;
                for b in 0..np {
                    jtj[(a, b)] += p.weight * grad[a] * grad[b];
                }
            }
        }
        let mut damped = jtj.clone();
        for k in 0..np {
            damped[(k, k)] += lambda * (jtj[(k, k)].abs() + 1e-12);
        }
        let Some(step) = damped.lu().solve(&jtr) else { break };
        let mut cand = params;
        for k in 0..np {
            cand[k] += step[k];
        }
        cand[0] = cand[0].clamp(-3.0, 9.0); // mu in [e^-3, e^9]
        let cand_sse = residuals(pts, &cand, opts.linear_space);
        if cand_sse.is_finite() && cand_sse < sse {
            let delta = sse - cand_sse;
            params = cand;
            sse = cand_sse;
            lambda = (lambda * 0.3).max(1e-13);
            if delta <= 1e-13 * (1.0 + sse) {
                converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                converged = true; // stuck at a minimum
                break;
            }
        }
    }
    if !converged && !sse.is_finite() {
        return Err(QGaussError::NoConvergence {
            iterations: opts.max_iterations,
            loss: sse,
        });
    }
    let dof = (pts.len() as f64 - np as f64).max(1.0);
    Ok((params, sse / dof))
}

fn linearized_mu_ci(
    pts: &[DensityPoint],
    params: &[f64; 4],
    opts: &FitMuOptions,
) -> Option<(f64, f64)> {
    // Crude curvature-based interval on ln mu.
    let h = 1e-4;
    let f0 = residuals(pts, params, opts.linear_space);
    let mut up = *params;
    up[0] += h;
    let mut dn = *params;
    dn[0] -= h;
    let f_up = residuals(pts, &up, opts.linear_space);
    let f_dn = residuals(pts, &dn, opts.linear_space);
    let curv = (f_up - 2.0 * f0 + f_dn) / (h * h);
    if curv <= 0.0 {
        return None;
    }
    let dof = (pts.len() as f64 - 4.0).max(1.0);
    let se_ln_mu = (2.0 * (f0 / dof) / curv).sqrt();
    let mu = params[0].exp();
    Some((
        mu * (-1.96 * se_ln_mu).exp(),
        mu * (1.96 * se_ln_mu).exp(),
    ))
}

fn bootstrap_mu_ci(
    pts: &[DensityPoint],
    opts: &FitMuOptions,
) -> Result<(f64, f64), QGaussError> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(opts.bootstrap_seed);
    let mut mus = Vec::with_capacity(opts.bootstrap_resamples);
    let inner = FitMuOptions {
        bootstrap_resamples: 0,
        ..*opts
    };
    for _ in 0..opts.bootstrap_resamples {
        // Occupancy-weight perturbation in the large-count regime: each
        // weight is resampled as n + sqrt(n) z, densities rescaled alike.
        let resampled: Vec<DensityPoint> = pts
            .iter()
            .map(|p| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                let n = (p.weight + p.weight.sqrt() * z).max(0.0);
                DensityPoint {
                    x: p.x,
                    density: p.density * if p.weight > 0.0 { n / p.weight } else { 1.0 },
                    weight: n,
                }
            })
            .filter(|p| p.weight > 0.0 && p.density > 0.0)
            .collect();
        if resampled.len() < inner.min_bins {
            continue;
        }
        if let Ok((params, _)) = fit_mu_core(&resampled, &inner) {
            mus.push(params[0].exp());
        }
    }
    if mus.len() < 8 {
        return Err(QGaussError::NoConvergence {
            iterations: opts.bootstrap_resamples,
            loss: f64::NAN,
        });
    }
    mus.sort_by(|a, b| a.total_cmp(b));
    let lo = mus[((mus.len() as f64 - 1.0) * 0.025).round() as usize];
    let hi = mus[((mus.len() as f64 - 1.0) * 0.975).round() as usize];
    Ok((lo, hi))
}
