//! Weighted least squares for low-degree polynomial models.
//!
//! Weights are inverse variances; the reported covariance is `(X^T W X)^-1`,
//! so standard errors are meaningful whenever the supplied weights are true
//! inverse variances of the observations.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WlsError {
    #[error("need at least {needed} points to fit {params} parameters, got {got}")]
    TooFewPoints {
        needed: usize,
        params: usize,
        got: usize,
    },
    #[error("design matrix is rank deficient (degenerate abscissae or weights)")]
    RankDeficient,
    #[error("non-finite input at point {0}")]
    NonFinite(usize),
    #[error("input slices have mismatched lengths")]
    LengthMismatch,
}

/// Result of a weighted polynomial fit.
#[derive(Debug, Clone)]
pub struct PolyFit {
    /// Coefficients in ascending degree order: `c[0] + c[1] x + c[2] x^2 + ...`
    pub coefficients: Vec<f64>,
    /// Covariance of the coefficients.
    pub covariance: DMatrix<f64>,
    /// Weighted residual sum of squares.
    pub chi2: f64,
    /// Degrees of freedom, `n - p`.
    pub dof: usize,
}

impl PolyFit {
    pub fn chi2_per_dof(&self) -> f64 {
        if self.dof == 0 {
            0.0
        } else {
            self.chi2 / self.dof as f64
        }
    }

    pub fn std_error(&self, i: usize) -> f64 {
        self.covariance[(i, i)].max(0.0).sqrt()
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }
}

/// Fit `y = sum_k c_k x^k` by weighted least squares.
///
/// `weights` are inverse variances (`1/sigma_i^2`). Requires at least
/// `degree + 1` points with positive weight.
pub fn fit_polynomial(
    x: &[f64],
    y: &[f64],
    weights: &[f64],
    degree: usize,
) -> Result<PolyFit, WlsError> {
    if x.len() != y.len() || x.len() != weights.len() {
        return Err(WlsError::LengthMismatch);
    }
    let p = degree + 1;
    let n = x.len();
    if n < p {
        return Err(WlsError::TooFewPoints {
            needed: p,
            params: p,
            got: n,
        });
    }
    for i in 0..n {
        if !x[i].is_finite() || !y[i].is_finite() || !weights[i].is_finite() || weights[i] < 0.0 {
            return Err(WlsError::NonFinite(i));
        }
    }

    // Normal equations; fine for the degree <= 4 models used here.
    let mut ata = DMatrix::zeros(p, p);
    let mut atb = DVector::zeros(p);
    let mut pow = vec![0.0; p];
    for i in 0..n {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        pow[0] = 1.0;
        for k in 1..p {
            pow[k] = pow[k - 1] * x[i];
        }
        for r in 0..p {
            atb[r] += w * pow[r] * y[i];
            for c in r..p {
                ata[(r, c)] += w * pow[r] * pow[c];
            }
        }
    }
    for r in 0..p {
        for c in 0..r {
            ata[(r, c)] = ata[(c, r)];
        }
    }

    let chol = Cholesky::new(ata.clone()).ok_or(WlsError::RankDeficient)?;
    let coef = chol.solve(&atb);
    let covariance = chol.inverse();

    let mut chi2 = 0.0;
    for i in 0..n {
        let fitted = coef.iter().rev().fold(0.0, |acc, c| acc * x[i] + c);
        let r = y[i] - fitted;
        chi2 += weights[i] * r * r;
    }

    Ok(PolyFit {
        coefficients: coef.iter().copied().collect(),
        covariance,
        chi2,
        dof: n.saturating_sub(p),
    })
}

/// Convenience wrapper: weighted straight-line fit returning
/// `(intercept, slope, intercept_se, slope_se, chi2_per_dof)`.
pub fn fit_line(x: &[f64], y: &[f64], weights: &[f64]) -> Result<LineFit, WlsError> {
    let fit = fit_polynomial(x, y, weights, 1)?;
    Ok(LineFit {
        intercept: fit.coefficients[0],
        slope: fit.coefficients[1],
        intercept_se: fit.std_error(0),
        slope_se: fit.std_error(1),
        chi2_per_dof: fit.chi2_per_dof(),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    pub intercept_se: f64,
    pub slope_se: f64,
    pub chi2_per_dof: f64,
}
