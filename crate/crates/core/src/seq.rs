//! Finite-horizon diagnostics for scalar schedule sequences.
//!
//! Whether a series converges is undecidable from a finite prefix, so the
//! classifiers here are explicitly heuristic: they fit a power-law decay
//! exponent on a log-log tail and compare it against the threshold -1.05.
//! Exponents above the threshold are reported as divergent-series evidence,
//! exponents below as summable, and poor fits near the boundary as
//! inconclusive. Reports carry the fitted exponent so callers can judge.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fitted-decay threshold separating "looks summable" from "looks divergent".
pub const DECAY_EXPONENT_THRESHOLD: f64 = -1.05;

/// Heuristic verdict about the series `sum_k seq[k]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeriesClass {
    /// Evidence of a divergent series (terms not summable).
    Divergent,
    /// Evidence of a convergent series (terms summable).
    Summable,
    /// The finite prefix does not support either call.
    Inconclusive,
}

/// Outcome of the summability heuristic, with the fit that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummabilityFinding {
    pub class: SeriesClass,
    /// Least-squares slope of `ln seq[k]` against `ln (k+1)` on the tail.
    pub fitted_exponent: Option<f64>,
    pub r_squared: Option<f64>,
    /// Number of positive terms that entered the fit.
    pub fitted_points: usize,
}

/// Ordinary least squares of `y` on `x`. Returns `(intercept, slope, r_squared)`.
///
/// A zero-variance response is reported as a perfect fit with slope zero when
/// the residuals vanish.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::Shape("linear_fit: mismatched lengths".into()));
    }
    if x.len() < 2 {
        return Err(Error::InsufficientTail(format!(
            "linear_fit needs at least 2 points, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("linear_fit: non-finite input".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|&v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(&a, &b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|&v| (v - my) * (v - my)).sum();

    if sxx == 0.0 {
        return Err(Error::InsufficientTail("linear_fit: abscissa has zero variance".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| {
            let e = b - (intercept + slope * a);
            e * e
        })
        .sum();
    let r2 = if syy == 0.0 {
        if ss_res <= 1e-24 { 1.0 } else { 0.0 }
    } else {
        1.0 - ss_res / syy
    };
    Ok((intercept, slope, r2))
}

/// Classify the series `sum_k seq[k]` of nonnegative terms from its prefix.
///
/// Exact zeros are skipped (they never affect summability); an all-zero input
/// is trivially summable. The log-log fit runs on the tail that remains after
/// dropping the first quarter of the positive terms.
pub fn classify_summability(seq: &[f64]) -> Result<SummabilityFinding> {
    if seq.is_empty() {
        return Err(Error::InvalidParameter("classify_summability: empty sequence".into()));
    }
    if seq.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("classify_summability: non-finite term".into()));
    }
    if seq.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidParameter(
            "classify_summability: terms must be nonnegative".into(),
        ));
    }

    // (1-based index, value) for the positive terms only.
    let positive: Vec<(usize, f64)> = seq
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(k, &v)| (k + 1, v))
        .collect();

    if positive.is_empty() {
        return Ok(SummabilityFinding {
            class: SeriesClass::Summable,
            fitted_exponent: None,
            r_squared: None,
            fitted_points: 0,
        });
    }
    if positive.len() < 4 {
        return Ok(SummabilityFinding {
            class: SeriesClass::Inconclusive,
            fitted_exponent: None,
            r_squared: None,
            fitted_points: positive.len(),
        });
    }

    let start = positive.len() / 4;
    let tail = &positive[start..];
    let xs: Vec<f64> = tail.iter().map(|&(k, _)| (k as f64).ln()).collect();
    let ys: Vec<f64> = tail.iter().map(|&(_, v)| v.ln()).collect();

    // Constant tails have a zero-variance response: slope 0, divergent series.
    let y_spread = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - ys.iter().cloned().fold(f64::INFINITY, f64::min);
    if y_spread <= 1e-12 {
        return Ok(SummabilityFinding {
            class: SeriesClass::Divergent,
            fitted_exponent: Some(0.0),
            r_squared: Some(1.0),
            fitted_points: tail.len(),
        });
    }

    let (_, slope, r2) = linear_fit(&xs, &ys)?;
    let class = if r2 < 0.5 && (slope - DECAY_EXPONENT_THRESHOLD).abs() < 0.5 {
        SeriesClass::Inconclusive
    } else if slope >= DECAY_EXPONENT_THRESHOLD {
        SeriesClass::Divergent
    } else {
        SeriesClass::Summable
    };
    Ok(SummabilityFinding {
        class,
        fitted_exponent: Some(slope),
        r_squared: Some(r2),
        fitted_points: tail.len(),
    })
}
