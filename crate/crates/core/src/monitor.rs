//! After-the-fact auditing of iterate traces: descent inequalities,
//! criticality certificates, convergence-rate prediction, and empirical rate
//! fitting.
//!
//! The three descent inequalities audited here are the classical abstract
//! ones: sufficient decrease (`f(x^{k+1}) + a_k ||dx||^2 <= f(x^k)`), a
//! relative-error bound on the slope at the new point
//! (`b ||df(x^{k+1})||_- <= ||dx|| + eps`), and its variant with the slope
//! taken at the previous point and no error term. Schedules `a`, `b`, `eps`
//! are per-transition: index `k` of each sequence governs `x^k -> x^{k+1}`.

use serde::Serialize;

use crate::block::BlockVector;
use crate::error::{Error, Result};
use crate::kl::Desingularizer;
use crate::seq::{classify_summability, SeriesClass, SummabilityFinding};
use crate::trace::{IterateRecord, IterateTrace, TerminalStatus};

/// One failed inequality instance.
#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    /// Trace index of the arrival record of the offending transition.
    pub k: usize,
    pub residual: f64,
    pub detail: String,
}

/// Outcome of a per-transition inequality audit.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub checked: usize,
    pub violations: Vec<Violation>,
    pub pass: bool,
    pub notes: Vec<String>,
}

impl CheckReport {
    fn new(name: &str) -> Self {
        Self { name: name.into(), checked: 0, violations: Vec::new(), pass: true, notes: Vec::new() }
    }

    fn finish(mut self) -> Self {
        self.pass = self.violations.is_empty();
        self
    }
}

fn require_len2(trace: &IterateTrace, what: &str) -> Result<()> {
    if trace.len() < 2 {
        return Err(Error::TraceData(format!("{what} needs at least 2 records, got {}", trace.len())));
    }
    Ok(())
}

fn step_of(rec: &IterateRecord) -> Result<f64> {
    rec.step_norm
        .ok_or_else(|| Error::TraceData(format!("record {} is missing step_norm", rec.k)))
}

/// Sufficient decrease: `f(x^k) - f(x^{k+1}) - a_k ||dx||^2 >= -1e-10 (1 + |f(x^k)|)`
/// for every consecutive pair. `a_k` is read from the departure record.
pub fn check_sufficient_decrease(trace: &IterateTrace) -> Result<CheckReport> {
    require_len2(trace, "sufficient-decrease check")?;
    let mut report = CheckReport::new("sufficient_decrease");
    for w in trace.records.windows(2) {
        let (prev, next) = (&w[0], &w[1]);
        let a = prev
            .a_k
            .ok_or_else(|| Error::TraceData(format!("record {} is missing a_k", prev.k)))?;
        if !(a > 0.0) {
            return Err(Error::TraceData(format!("a_k must be positive at k = {}", prev.k)));
        }
        let step = step_of(next)?;
        let residual = prev.f_val - next.f_val - a * step * step;
        report.checked += 1;
        if residual < -1e-10 * (1.0 + prev.f_val.abs()) {
            report.violations.push(Violation {
                k: next.k,
                residual,
                detail: format!(
                    "f {:.6e} -> {:.6e}, a {a:.3e}, step {step:.3e}",
                    prev.f_val, next.f_val
                ),
            });
        }
    }
    Ok(report.finish())
}

/// Relative error at the arrival point:
/// `b_k ||df(x^{k+1})||_- <= ||dx|| + eps_k` at tolerance `1e-10 (1 + ||dx||)`.
/// `b` and `eps` are read from the arrival record; a missing `eps` means 0.
pub fn check_relative_error(trace: &IterateTrace) -> Result<CheckReport> {
    require_len2(trace, "relative-error check")?;
    let mut report = CheckReport::new("relative_error");
    for w in trace.records.windows(2) {
        let next = &w[1];
        let b = next
            .b_k
            .ok_or_else(|| Error::TraceData(format!("record {} is missing b_k", next.k)))?;
        let slope = next
            .slope_norm
            .ok_or_else(|| Error::TraceData(format!("record {} is missing slope_norm", next.k)))?;
        let eps = next.eps_k.unwrap_or(0.0);
        let step = step_of(next)?;
        let excess = b * slope - step - eps;
        report.checked += 1;
        if excess > 1e-10 * (1.0 + step) {
            report.violations.push(Violation {
                k: next.k,
                residual: excess,
                detail: format!("b {b:.3e}, slope {slope:.6e}, step {step:.6e}, eps {eps:.3e}"),
            });
        }
    }
    Ok(report.finish())
}

/// Relative error with the slope taken at the departure point and no error
/// term: `b_k ||df(x^k)||_- <= ||dx||`.
pub fn check_relative_error_prior(trace: &IterateTrace) -> Result<CheckReport> {
    require_len2(trace, "prior-slope relative-error check")?;
    let mut report = CheckReport::new("relative_error_prior");
    for w in trace.records.windows(2) {
        let (prev, next) = (&w[0], &w[1]);
        let b = next
            .b_k
            .ok_or_else(|| Error::TraceData(format!("record {} is missing b_k", next.k)))?;
        let slope = prev
            .slope_norm
            .ok_or_else(|| Error::TraceData(format!("record {} is missing slope_norm", prev.k)))?;
        let step = step_of(next)?;
        let excess = b * slope - step;
        report.checked += 1;
        if excess > 1e-10 * (1.0 + step) {
            report.violations.push(Violation {
                k: next.k,
                residual: excess,
                detail: format!("b {b:.3e}, prior slope {slope:.6e}, step {step:.6e}"),
            });
        }
    }
    Ok(report.finish())
}

/// Findings on the step-size/error schedules over a horizon.
#[derive(Debug, Clone, Serialize)]
pub struct ParameterScheduleReport {
    /// Smallest decrease coefficient; must be strictly positive.
    pub min_a: f64,
    pub lower_bound_pass: bool,
    /// The slope coefficients must NOT be summable.
    pub b_divergence: SummabilityFinding,
    pub b_pass: bool,
    /// `max_k 1/(a_k b_k)` — reported, finite by construction on a finite
    /// horizon.
    pub sup_inverse_ab: f64,
    /// The error tolerances must be summable (all-zero counts).
    pub eps_summability: SummabilityFinding,
    pub eps_pass: bool,
    pub horizon: usize,
    pub pass: bool,
}

/// Audit the schedule triple: positive decrease coefficients, non-summable
/// slope coefficients, bounded `1/(a_k b_k)`, summable error tolerances.
/// An empty `eps` is read as identically zero.
pub fn check_parameter_schedule(
    a: &[f64],
    b: &[f64],
    eps: &[f64],
    horizon: usize,
) -> Result<ParameterScheduleReport> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidParameter("schedule sequences must be nonempty".into()));
    }
    let n = a.len().min(b.len()).min(horizon.max(1));
    let a = &a[..n];
    let b = &b[..n];
    for (k, (&ak, &bk)) in a.iter().zip(b).enumerate() {
        if !ak.is_finite() || !bk.is_finite() || bk <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "schedule entries must be finite with b > 0 at k = {k}"
            )));
        }
    }
    let min_a = a.iter().cloned().fold(f64::INFINITY, f64::min);
    let lower_bound_pass = min_a > 0.0;

    let b_divergence = classify_summability(b)?;
    let b_pass = b_divergence.class == SeriesClass::Divergent;

    let sup_inverse_ab = a
        .iter()
        .zip(b)
        .map(|(&ak, &bk)| 1.0 / (ak * bk))
        .fold(f64::NEG_INFINITY, f64::max);

    let eps_vec: Vec<f64>;
    let eps_slice: &[f64] = if eps.is_empty() {
        eps_vec = vec![0.0; n];
        &eps_vec
    } else {
        &eps[..eps.len().min(n)]
    };
    let eps_summability = classify_summability(eps_slice)?;
    let eps_pass = eps_summability.class == SeriesClass::Summable;

    let pass = lower_bound_pass && b_pass && eps_pass;
    Ok(ParameterScheduleReport {
        min_a,
        lower_bound_pass,
        b_divergence,
        b_pass,
        sup_inverse_ab,
        eps_summability,
        eps_pass,
        horizon: n,
        pass,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CertificateStatus {
    Pass,
    Fail,
    Inconclusive,
}

/// Evidence that a run ended at (numerically) a critical point: a vanishing
/// slope witness plus a Cauchy tail of step norms.
#[derive(Debug, Clone, Serialize)]
pub struct Certificate {
    pub status: CertificateStatus,
    pub final_slope: Option<f64>,
    /// Sum of step norms over the last quarter of the trace.
    pub tail_step_sum: f64,
    /// |f change| over the last (up to) 10 records.
    pub f_stabilization_gap: f64,
    pub tolerance: f64,
    pub notes: Vec<String>,
}

/// Certify criticality of the final iterate. A trace that did not converge by
/// the step-norm criterion yields `Inconclusive`, not an error.
pub fn criticality_certificate(trace: &IterateTrace, tol: f64) -> Result<Certificate> {
    if trace.is_empty() {
        return Err(Error::TraceData("empty trace".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter("tolerance must be positive".into()));
    }
    let n = trace.len();
    let tail_start = (3 * n / 4).max(1).min(n);
    let tail_step_sum: f64 = trace.records[tail_start..]
        .iter()
        .filter_map(|r| r.step_norm)
        .sum();
    let w = 10.min(n - 1);
    let f_stabilization_gap = (trace.records[n - 1].f_val - trace.records[n - 1 - w].f_val).abs();
    let final_slope = trace.records[n - 1].slope_norm;

    let mut notes = Vec::new();
    let status = if trace.status != TerminalStatus::Converged {
        notes.push(format!("run ended with status {:?}, not step-norm convergence", trace.status));
        CertificateStatus::Inconclusive
    } else {
        match final_slope {
            None => {
                notes.push("no slope witness on the final record".into());
                CertificateStatus::Inconclusive
            }
            Some(s) => {
                if s <= tol && tail_step_sum <= tol {
                    CertificateStatus::Pass
                } else {
                    notes.push(format!(
                        "slope {s:.3e} or tail step sum {tail_step_sum:.3e} above {tol:.1e}"
                    ));
                    CertificateStatus::Fail
                }
            }
        }
    };
    Ok(Certificate {
        status,
        final_slope,
        tail_step_sum,
        f_stabilization_gap,
        tolerance: tol,
        notes,
    })
}

/// Step-contraction audit: along transitions whose endpoints both lie in the
/// monitored region,
/// `2 ||dx^{k+1}|| <= ||dx^k|| + m_bound (phi(r_k) - phi(r_{k+1})) + eps_k` at
/// slack `1e-9`, where `r_k = f(x^k) - f_star` and `m_bound` is an upper
/// bound on `1/(a_k b_k)` (a uniform bound keeps the check sound because the
/// phi difference is nonnegative on descent traces).
///
/// A record with `region_flag = 0` excludes its transitions; an absent flag
/// counts as inside. Transitions with `r_k <= 0` are a domain error; a final
/// `r_{k+1} = 0` (exact termination) is fine.
pub fn check_step_contraction(
    trace: &IterateTrace,
    d: &Desingularizer,
    f_star: f64,
    m_bound: f64,
) -> Result<CheckReport> {
    if !(m_bound > 0.0) || !m_bound.is_finite() {
        return Err(Error::InvalidParameter(format!("coefficient bound {m_bound} must be positive")));
    }
    let mut report = CheckReport::new("step_contraction");
    if trace.len() < 3 {
        report.notes.push("fewer than 3 records; nothing checkable".into());
        return Ok(report.finish());
    }
    let in_region = |r: &IterateRecord| r.region_flag.map_or(true, |v| v != 0.0);
    // Windows of 3 guarantee `from` carries a step norm (record 0 has none).
    for w in trace.records.windows(3) {
        let (from, to) = (&w[1], &w[2]);
        if !(in_region(from) && in_region(to)) {
            continue;
        }
        let r_k = from.f_val - f_star;
        let r_next = to.f_val - f_star;
        if r_k <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "value gap {r_k:.3e} <= 0 at checked index {}",
                from.k
            )));
        }
        if r_next < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "value gap {r_next:.3e} < 0 at checked index {}",
                to.k
            )));
        }
        let prev_step = step_of(from)?;
        let next_step = step_of(to)?;
        let eps = to.eps_k.unwrap_or(0.0);
        let lhs = 2.0 * next_step;
        let rhs = prev_step + m_bound * (d.phi(r_k)? - d.phi(r_next)?) + eps;
        report.checked += 1;
        if lhs > rhs + 1e-9 {
            report.violations.push(Violation {
                k: to.k,
                residual: lhs - rhs,
                detail: format!("lhs {lhs:.6e} vs rhs {rhs:.6e} (gaps {r_k:.3e} -> {r_next:.3e})"),
            });
        }
    }
    Ok(report.finish())
}

/// How a rate bound decays.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum RateRegime {
    /// The value gap reaches zero after finitely many steps.
    FiniteTermination,
    /// `r_k <= r_0 exp(-c B_k)` with `B_k` the partial sums of `b`; iterate
    /// gaps decay with exponent `c/2`.
    Exponential { c: f64 },
    /// `r_k = O(B_k^values_exponent)`, `||x^k - x^inf|| = O(B_k^iterates_exponent)`.
    Polynomial { values_exponent: f64, iterates_exponent: f64 },
    /// Bound expressed through the primitive of `-(phi')^2` and its inverse.
    PhiForm { description: String },
}

/// Which relative-error hypothesis the prediction rests on: the slope bound
/// at the arrival point (with error terms), or the sharper variant at the
/// departure point (error-free).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HypothesisRoute {
    ArrivalSlope,
    PriorSlope,
}

#[derive(Debug, Clone, Serialize)]
pub struct RatePrediction {
    pub regime: RateRegime,
    pub route: HypothesisRoute,
    /// `inf_k a_k b_k` over the horizon (per-transition alignment).
    pub m_inf: f64,
    pub notes: Vec<String>,
}

/// Predict the convergence regime from the desingularizer and per-transition
/// schedules (`a[k]`, `b[k]` both belong to the transition `k -> k+1`).
///
/// On the arrival-slope route the desingularizer must be of power form with
/// exponent `theta`: `theta = 1` gives finite termination (requires
/// `inf a_k b_k^2 > 0`), `theta in [1/2, 1)` an exponential bound with
/// `c = m / (C^2 (1 + sup b))`, and `theta in (0, 1/2)` polynomial bounds
/// with value exponent `-1/(1-2 theta)` and iterate exponent
/// `-theta/(1-2 theta)` in the partial sums of `b`.
///
/// On the prior-slope route the regime is read off the primitive of
/// `-(phi')^2`: finite at zero means finite termination; the power form with
/// `theta = 1/2` gives the exponential bound with `c = m/C^2`; anything else
/// is reported in primitive form.
pub fn predict_rates(
    d: &Desingularizer,
    a: &[f64],
    b: &[f64],
    use_prior_slope: bool,
) -> Result<RatePrediction> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidParameter("schedule sequences must be nonempty".into()));
    }
    let n = a.len().min(b.len());
    let mut m_inf = f64::INFINITY;
    let mut m2_inf = f64::INFINITY;
    let mut sup_b = f64::NEG_INFINITY;
    for (&ak, &bk) in a[..n].iter().zip(&b[..n]) {
        if !ak.is_finite() || !bk.is_finite() {
            return Err(Error::InvalidParameter("schedules must be finite".into()));
        }
        m_inf = m_inf.min(ak * bk);
        m2_inf = m2_inf.min(ak * bk * bk);
        sup_b = sup_b.max(bk);
    }

    let route = if use_prior_slope { HypothesisRoute::PriorSlope } else { HypothesisRoute::ArrivalSlope };
    let mut notes = Vec::new();

    if use_prior_slope {
        let primitive = d.primitive()?;
        if m_inf <= 0.0 {
            return Err(Error::Prerequisite(format!(
                "inf a_k b_k = {m_inf:.3e} <= 0; the prior-slope bound needs it positive"
            )));
        }
        let regime = if primitive.finite_at_zero {
            RateRegime::FiniteTermination
        } else if let Some((c, theta)) = d.power_params() {
            if (theta - 0.5).abs() < 1e-14 {
                RateRegime::Exponential { c: m_inf / (c * c) }
            } else {
                notes.push(format!(
                    "power form theta = {theta}: primitive infinite at zero"
                ));
                RateRegime::PhiForm {
                    description: format!(
                        "values <= PhiInverse(Phi(r_0) + {m_inf:.6e} * B_k); iterates <= phi of the same"
                    ),
                }
            }
        } else {
            RateRegime::PhiForm {
                description: format!(
                    "values <= PhiInverse(Phi(r_0) + {m_inf:.6e} * B_k); iterates <= phi of the same"
                ),
            }
        };
        return Ok(RatePrediction { regime, route, m_inf, notes });
    }

    let (c, theta) = d.power_params().ok_or_else(|| {
        Error::Prerequisite("the arrival-slope rate analysis needs a power-form desingularizer".into())
    })?;
    let regime = if theta == 1.0 {
        if m2_inf <= 0.0 {
            return Err(Error::Prerequisite(format!(
                "inf a_k b_k^2 = {m2_inf:.3e} <= 0; finite termination needs it positive"
            )));
        }
        RateRegime::FiniteTermination
    } else if theta >= 0.5 {
        if m_inf <= 0.0 {
            return Err(Error::Prerequisite(format!(
                "inf a_k b_k = {m_inf:.3e} <= 0; the exponential bound needs it positive"
            )));
        }
        RateRegime::Exponential { c: m_inf / (c * c * (1.0 + sup_b)) }
    } else {
        RateRegime::Polynomial {
            values_exponent: -1.0 / (1.0 - 2.0 * theta),
            iterates_exponent: -theta / (1.0 - 2.0 * theta),
        }
    };
    Ok(RatePrediction { regime, route, m_inf, notes })
}

/// Trace-level wrapper around [`predict_rates`]: pulls the schedules off the
/// records and refuses traces run with nonzero error tolerances — the rate
/// theory here assumes `eps = 0`.
pub fn predict_rates_for_trace(
    d: &Desingularizer,
    trace: &IterateTrace,
    use_prior_slope: bool,
) -> Result<RatePrediction> {
    require_len2(trace, "rate prediction")?;
    let mut a = Vec::new();
    let mut b = Vec::new();
    for w in trace.records.windows(2) {
        let (prev, next) = (&w[0], &w[1]);
        if let Some(eps) = next.eps_k {
            if eps != 0.0 {
                return Err(Error::Prerequisite(format!(
                    "record {} has eps = {eps:.3e}; rate prediction requires error-free runs",
                    next.k
                )));
            }
        }
        a.push(
            prev.a_k
                .ok_or_else(|| Error::TraceData(format!("record {} missing a_k", prev.k)))?,
        );
        b.push(
            next.b_k
                .ok_or_else(|| Error::TraceData(format!("record {} missing b_k", next.k)))?,
        );
    }
    predict_rates(d, &a, &b, use_prior_slope)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RateModel {
    Exponential,
    Polynomial,
}

/// Least-squares rate fits on the tail of a positive series.
#[derive(Debug, Clone, Serialize)]
pub struct RateFit {
    /// First index where the series hits exactly zero, if it does; fits are
    /// skipped in that case.
    pub finite_termination: Option<usize>,
    /// Slope of `ln r_k` against `B_k` (partial sums of `b`).
    pub exponential_slope: Option<f64>,
    pub exponential_r2: Option<f64>,
    /// Slope of `ln r_k` against `ln B_k`.
    pub polynomial_slope: Option<f64>,
    pub polynomial_r2: Option<f64>,
    pub chosen: Option<RateModel>,
    pub fitted_points: usize,
}

/// Fit exponential and polynomial decay models to the tail of `values`
/// against the partial sums of `b` (inclusive: `B_k = b_0 + ... + b_k`).
/// `tail_fraction` is the fraction of points kept, counted from the end.
pub fn fit_rates(values: &[f64], b: &[f64], tail_fraction: f64) -> Result<RateFit> {
    if values.is_empty() {
        return Err(Error::InsufficientTail("empty value series".into()));
    }
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "tail fraction {tail_fraction} must be in (0, 1]"
        )));
    }
    if b.len() < values.len() {
        return Err(Error::Shape(format!(
            "need one b per value: {} values, {} b",
            values.len(),
            b.len()
        )));
    }
    for (k, &v) in values.iter().enumerate() {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "values must be finite and nonnegative; got {v} at {k}"
            )));
        }
        if v == 0.0 {
            return Ok(RateFit {
                finite_termination: Some(k),
                exponential_slope: None,
                exponential_r2: None,
                polynomial_slope: None,
                polynomial_r2: None,
                chosen: None,
                fitted_points: 0,
            });
        }
    }

    let n = values.len();
    let keep = ((n as f64) * tail_fraction).ceil() as usize;
    let start = n - keep.clamp(1, n);
    let mut bsum = 0.0;
    let mut xs_lin = Vec::with_capacity(n - start);
    let mut xs_log = Vec::with_capacity(n - start);
    let mut ys = Vec::with_capacity(n - start);
    for k in 0..n {
        bsum += b[k];
        if k >= start {
            if !(bsum > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "partial sums of b must be positive on the tail (B_{k} = {bsum})"
                )));
            }
            xs_lin.push(bsum);
            xs_log.push(bsum.ln());
            ys.push(values[k].ln());
        }
    }
    if ys.len() < 5 {
        return Err(Error::InsufficientTail(format!(
            "only {} tail points; need at least 5",
            ys.len()
        )));
    }

    let (_, exp_slope, exp_r2) = crate::seq::linear_fit(&xs_lin, &ys)?;
    let (_, poly_slope, poly_r2) = crate::seq::linear_fit(&xs_log, &ys)?;
    let chosen = if exp_r2 >= poly_r2 { RateModel::Exponential } else { RateModel::Polynomial };
    Ok(RateFit {
        finite_termination: None,
        exponential_slope: Some(exp_slope),
        exponential_r2: Some(exp_r2),
        polynomial_slope: Some(poly_slope),
        polynomial_r2: Some(poly_r2),
        chosen: Some(chosen),
        fitted_points: ys.len(),
    })
}

/// Ratio series `||x_star - x^k|| / phi_tilde(r_{k-1})` with its running max.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticSeries {
    pub ratios: Vec<f64>,
    pub running_max: Vec<f64>,
    pub sup: f64,
    /// First record index whose region flag is set, if any.
    pub entry_index: Option<usize>,
    /// Whether no new maximum appears after the entry index.
    pub max_stable_after_entry: Option<bool>,
}

/// Diagnostic for the distance-vs-value-gap envelope: the distance from the
/// known solution at step `k` is compared against `phi_tilde` of the previous
/// value gap. The theory bounds the ratio; this reports it for inspection.
/// The series truncates at the first non-positive gap.
pub fn distance_gap_diagnostic(
    trace: &IterateTrace,
    d: &Desingularizer,
    x_star: &BlockVector,
    f_star: f64,
) -> Result<DiagnosticSeries> {
    if trace.iterates.len() != trace.len() {
        return Err(Error::TraceData(format!(
            "diagnostic needs stored iterates: {} iterates vs {} records",
            trace.iterates.len(),
            trace.len()
        )));
    }
    let mut ratios = Vec::new();
    let mut running_max = Vec::new();
    let mut sup = 0.0f64;
    let mut entry_index = None;
    let mut last_new_max_at = 0usize;
    for k in 1..trace.len() {
        let r_prev = trace.records[k - 1].f_val - f_star;
        if r_prev <= 0.0 {
            break;
        }
        let denom = d.phi_tilde(r_prev)?;
        if denom == 0.0 {
            break;
        }
        let ratio = trace.iterates[k].distance(x_star) / denom;
        if ratio > sup {
            sup = ratio;
            last_new_max_at = ratios.len();
        }
        ratios.push(ratio);
        running_max.push(sup);
        if entry_index.is_none() && trace.records[k].region_flag == Some(1.0) {
            entry_index = Some(ratios.len() - 1);
        }
    }
    let max_stable_after_entry = entry_index.map(|e| last_new_max_at <= e);
    Ok(DiagnosticSeries { ratios, running_max, sup, entry_index, max_stable_after_entry })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace_from_columns(
        f: &[f64],
        steps: &[Option<f64>],
        slopes: &[Option<f64>],
        a: &[Option<f64>],
        b: &[Option<f64>],
        eps: &[Option<f64>],
        status: TerminalStatus,
    ) -> IterateTrace {
        let mut t = IterateTrace::new(status);
        for k in 0..f.len() {
            t.push(IterateRecord {
                k,
                f_val: f[k],
                step_norm: steps[k],
                slope_norm: slopes[k],
                a_k: a[k],
                b_k: b[k],
                eps_k: eps[k],
                alpha_k: None,
                beta_k: None,
                region_flag: None,
            })
            .unwrap();
        }
        t
    }

    #[test]
    fn sufficient_decrease_margins() {
        let t = trace_from_columns(
            &[4.0, 2.5, 2.0],
            &[None, Some(1.0), Some(0.5)],
            &[None, None, None],
            &[Some(1.0), Some(1.0), None],
            &[None, None, None],
            &[None, None, None],
            TerminalStatus::Converged,
        );
        let r = check_sufficient_decrease(&t).unwrap();
        assert!(r.pass);
        assert_eq!(r.checked, 2);
    }

    #[test]
    fn sufficient_decrease_flags_increase() {
        let t = trace_from_columns(
            &[1.0, 1.2],
            &[None, Some(0.1)],
            &[None, None],
            &[Some(1.0), None],
            &[None, None],
            &[None, None],
            TerminalStatus::MaxIter,
        );
        let r = check_sufficient_decrease(&t).unwrap();
        assert!(!r.pass);
        assert_eq!(r.violations[0].k, 1);
    }

    #[test]
    fn relative_error_slack_and_failure() {
        // slope 10 with b = 1 against step 0.1 must fail...
        let t = trace_from_columns(
            &[1.0, 0.9],
            &[None, Some(0.1)],
            &[None, Some(10.0)],
            &[Some(1.0), None],
            &[None, Some(1.0)],
            &[None, Some(0.0)],
            TerminalStatus::MaxIter,
        );
        assert!(!check_relative_error(&t).unwrap().pass);
        // ...and a large eps covers any gap.
        let t = trace_from_columns(
            &[1.0, 0.9],
            &[None, Some(0.1)],
            &[None, Some(10.0)],
            &[Some(1.0), None],
            &[None, Some(1.0)],
            &[None, Some(100.0)],
            TerminalStatus::MaxIter,
        );
        assert!(check_relative_error(&t).unwrap().pass);
    }

    #[test]
    fn prior_slope_variant_equality_case() {
        // Explicit gradient steps on f = x^2/2 from x = 1 with rate 0.7:
        // step_{k+1} = 0.3 * 0.7^k equals b * slope(x^k) exactly when b = 0.3.
        let n = 8;
        let x: Vec<f64> = (0..n).map(|k| 0.7f64.powi(k as i32)).collect();
        let f: Vec<f64> = x.iter().map(|v| 0.5 * v * v).collect();
        let steps: Vec<Option<f64>> =
            std::iter::once(None).chain((1..n).map(|k| Some(x[k - 1] - x[k]))).collect();
        let slopes: Vec<Option<f64>> = x.iter().map(|v| Some(*v)).collect();
        let b_ok: Vec<Option<f64>> =
            std::iter::once(None).chain((1..n).map(|_| Some(0.3))).collect();
        let a: Vec<Option<f64>> = (0..n).map(|_| Some(1.0)).collect();
        let eps: Vec<Option<f64>> = (0..n).map(|_| Some(0.0)).collect();
        let t = trace_from_columns(&f, &steps, &slopes, &a, &b_ok, &eps, TerminalStatus::Converged);
        assert!(check_relative_error_prior(&t).unwrap().pass);

        let b_bad: Vec<Option<f64>> =
            std::iter::once(None).chain((1..n).map(|_| Some(0.6))).collect();
        let t = trace_from_columns(&f, &steps, &slopes, &a, &b_bad, &eps, TerminalStatus::Converged);
        assert!(!check_relative_error_prior(&t).unwrap().pass);
    }

    #[test]
    fn parameter_schedule_pass_and_failures() {
        let n = 60;
        let a = vec![1.0; n];
        let b = vec![1.0; n];
        let eps: Vec<f64> = (0..n).map(|k| 2f64.powi(-(k as i32))).collect();
        let r = check_parameter_schedule(&a, &b, &eps, n).unwrap();
        assert!(r.pass);
        assert!((r.sup_inverse_ab - 1.0).abs() < 1e-12);

        let b_geo: Vec<f64> = (0..n).map(|k| 2f64.powi(-(k as i32))).collect();
        let r = check_parameter_schedule(&a, &b_geo, &eps, n).unwrap();
        assert!(!r.b_pass && !r.pass);

        let eps_const = vec![0.1; n];
        let r = check_parameter_schedule(&a, &b, &eps_const, n).unwrap();
        assert!(!r.eps_pass && !r.pass);
    }

    fn geometric_trace(n: usize, rate: f64) -> IterateTrace {
        // Gradient descent on x^2/2 with step 1 - rate.
        let mut t = IterateTrace::new(TerminalStatus::Converged);
        let mut x = 1.0f64;
        for k in 0..n {
            let prev = x;
            if k > 0 {
                x *= rate;
            }
            t.push(IterateRecord {
                k,
                f_val: 0.5 * x * x,
                step_norm: (k > 0).then(|| (prev - x).abs()),
                slope_norm: Some(x.abs()),
                a_k: Some(1.0),
                b_k: (k > 0).then_some(1.0 - rate),
                eps_k: (k > 0).then_some(0.0),
                alpha_k: None,
                beta_k: None,
                region_flag: None,
            })
            .unwrap();
        }
        t
    }

    #[test]
    fn criticality_pass_and_inconclusive() {
        let t = geometric_trace(200, 0.7);
        let c = criticality_certificate(&t, 1e-8).unwrap();
        assert_eq!(c.status, CertificateStatus::Pass);
        assert!(c.tail_step_sum <= 1e-8);

        let mut osc = trace_from_columns(
            &[1.0, 2.0, 1.0, 2.0],
            &[None, Some(1.0), Some(1.0), Some(1.0)],
            &[Some(1.0), Some(1.0), Some(1.0), Some(1.0)],
            &[None, None, None, None],
            &[None, None, None, None],
            &[None, None, None, None],
            TerminalStatus::MaxIter,
        );
        osc.status = TerminalStatus::MaxIter;
        let c = criticality_certificate(&osc, 1e-8).unwrap();
        assert_eq!(c.status, CertificateStatus::Inconclusive);
    }

    #[test]
    fn step_contraction_on_threshold_iteration() {
        // Soft-threshold run on |x| from 1.0 with threshold 0.3:
        // x = 1, 0.7, 0.4, 0.1, 0; phi(t) = t; the coefficient bound is
        // 1/(a b) = 2 with a = 1/(2*0.3), b = 0.3.
        let xs = [1.0, 0.7, 0.4, 0.1, 0.0];
        let mut t = IterateTrace::new(TerminalStatus::Converged);
        for (k, &x) in xs.iter().enumerate() {
            t.push(IterateRecord {
                k,
                f_val: x,
                step_norm: (k > 0).then(|| (xs[k - 1] - x).abs()),
                slope_norm: None,
                a_k: Some(1.0 / 0.6),
                b_k: (k > 0).then_some(0.3),
                eps_k: (k > 0).then_some(0.0),
                alpha_k: None,
                beta_k: None,
                region_flag: None,
            })
            .unwrap();
        }
        let d = Desingularizer::power(1.0, 1.0).unwrap();
        let r = check_step_contraction(&t, &d, 0.0, 2.0).unwrap();
        assert!(r.pass, "violations: {:?}", r.violations);
        assert_eq!(r.checked, 3);

        // A single transition is not checkable.
        let mut short = IterateTrace::new(TerminalStatus::MaxIter);
        short.push(IterateRecord::initial(1.0)).unwrap();
        let r = check_step_contraction(&short, &d, 0.0, 2.0).unwrap();
        assert_eq!(r.checked, 0);
        assert!(r.pass);
    }

    #[test]
    fn predict_finite_termination_for_linear_power() {
        let d = Desingularizer::power(1.0, 1.0).unwrap();
        let p = predict_rates(&d, &[1.0; 10], &[1.0; 10], false).unwrap();
        assert_eq!(p.regime, RateRegime::FiniteTermination);
        assert_eq!(p.route, HypothesisRoute::ArrivalSlope);
    }

    #[test]
    fn predict_polynomial_exponents() {
        let d = Desingularizer::power(1.0, 0.25).unwrap();
        let p = predict_rates(&d, &[1.0; 10], &[0.5; 10], false).unwrap();
        match p.regime {
            RateRegime::Polynomial { values_exponent, iterates_exponent } => {
                assert!((values_exponent + 2.0).abs() < 1e-15);
                assert!((iterates_exponent + 0.5).abs() < 1e-15);
            }
            other => panic!("expected polynomial regime, got {other:?}"),
        }
    }

    #[test]
    fn predict_exponential_constant() {
        // theta = 1/2, a = 1, b = 0.5: m = 0.5, c = m / (C^2 (1 + sup b)).
        let d = Desingularizer::power(2.0, 0.5).unwrap();
        let p = predict_rates(&d, &[1.0; 10], &[0.5; 10], false).unwrap();
        match p.regime {
            RateRegime::Exponential { c } => {
                assert!((c - 0.5 / (4.0 * 1.5)).abs() < 1e-15);
            }
            other => panic!("expected exponential regime, got {other:?}"),
        }
    }

    #[test]
    fn prior_slope_route_disagrees_above_half() {
        // theta = 3/4: the arrival-slope analysis gives an exponential bound,
        // the prior-slope analysis sharpens it to finite termination.
        let d = Desingularizer::power(1.0, 0.75).unwrap();
        let standard = predict_rates(&d, &[1.0; 10], &[1.0; 10], false).unwrap();
        let prior = predict_rates(&d, &[1.0; 10], &[1.0; 10], true).unwrap();
        assert!(matches!(standard.regime, RateRegime::Exponential { .. }));
        assert_eq!(prior.regime, RateRegime::FiniteTermination);
    }

    #[test]
    fn prior_slope_route_exponential_at_half() {
        let d = Desingularizer::power(2.0, 0.5).unwrap();
        let p = predict_rates(&d, &[2.0; 10], &[0.5; 10], true).unwrap();
        match p.regime {
            RateRegime::Exponential { c } => assert!((c - 1.0 / 4.0).abs() < 1e-15),
            other => panic!("expected exponential regime, got {other:?}"),
        }
    }

    #[test]
    fn trace_prediction_refuses_errors() {
        let mut t = geometric_trace(10, 0.7);
        t.records[3].eps_k = Some(1e-3);
        let d = Desingularizer::power(1.0, 0.5).unwrap();
        let r = predict_rates_for_trace(&d, &t, false);
        assert!(matches!(r, Err(Error::Prerequisite(_))));
        t.records[3].eps_k = Some(0.0);
        assert!(predict_rates_for_trace(&d, &t, false).is_ok());
    }

    #[test]
    fn fit_recovers_planted_exponential() {
        let n = 400;
        let values: Vec<f64> = (0..n).map(|k| 5.0 * 0.8f64.powi(k as i32)).collect();
        let b = vec![1.0; n];
        let fit = fit_rates(&values, &b, 0.8).unwrap();
        assert_eq!(fit.chosen, Some(RateModel::Exponential));
        let slope = fit.exponential_slope.unwrap();
        assert!((slope - 0.8f64.ln()).abs() < 1e-6, "slope {slope}");
        assert!(fit.exponential_r2.unwrap() > 0.999999);
    }

    #[test]
    fn fit_recovers_planted_polynomial() {
        let n = 1000;
        let values: Vec<f64> = (0..n).map(|k| ((k + 1) as f64).powi(-2)).collect();
        let b = vec![1.0; n];
        let fit = fit_rates(&values, &b, 0.9).unwrap();
        assert_eq!(fit.chosen, Some(RateModel::Polynomial));
        let slope = fit.polynomial_slope.unwrap();
        assert!((slope + 2.0).abs() < 1e-3, "slope {slope}");
    }

    #[test]
    fn fit_flags_finite_termination() {
        let values = [1.0, 0.5, 0.2, 0.05, 0.01, 0.001, 0.0, 0.0];
        let fit = fit_rates(&values, &[1.0; 8], 1.0).unwrap();
        assert_eq!(fit.finite_termination, Some(6));
        assert!(fit.chosen.is_none());
    }

    #[test]
    fn fit_requires_tail_points() {
        let values = [1.0, 0.5, 0.2];
        assert!(matches!(
            fit_rates(&values, &[1.0; 3], 1.0),
            Err(Error::InsufficientTail(_))
        ));
    }

    #[test]
    fn diagnostic_equality_trace_has_unit_ratios() {
        // Construct a trace where the distance equals phi_tilde of the
        // previous gap exactly: phi(t) = t, gaps below 1 so sqrt dominates.
        let d = Desingularizer::power(1.0, 1.0).unwrap();
        let gaps = [0.64, 0.16, 0.04, 0.01];
        let mut t = IterateTrace::new(TerminalStatus::Converged);
        let x_star = BlockVector::scalar(0.0);
        for (k, &g) in gaps.iter().enumerate() {
            t.push(IterateRecord {
                k,
                f_val: g,
                step_norm: (k > 0).then_some(0.1),
                slope_norm: Some(1.0),
                a_k: None,
                b_k: None,
                eps_k: None,
                alpha_k: None,
                beta_k: None,
                region_flag: None,
            })
            .unwrap();
            // Place x^k at distance phi_tilde(previous gap) from the solution.
            let dist = if k == 0 { 1.0 } else { gaps[k - 1].sqrt() };
            t.iterates.push(BlockVector::scalar(dist));
        }
        let s = distance_gap_diagnostic(&t, &d, &x_star, 0.0).unwrap();
        assert_eq!(s.ratios.len(), 3);
        for r in &s.ratios {
            assert!((r - 1.0).abs() < 1e-12);
        }

        // A trace that starts at the solution yields an empty series.
        let mut at_sol = IterateTrace::new(TerminalStatus::Converged);
        at_sol.push(IterateRecord::initial(0.0)).unwrap();
        at_sol.iterates.push(BlockVector::scalar(0.0));
        let s = distance_gap_diagnostic(&at_sol, &d, &x_star, 0.0).unwrap();
        assert!(s.ratios.is_empty());
    }
}
