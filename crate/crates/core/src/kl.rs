//! Desingularizing functions and sampling-based verification of the
//! Kurdyka-Lojasiewicz inequality.
//!
//! A desingularizer is a concave reparametrization of function values near a
//! critical value: `phi(0) = 0`, `phi' > 0` on `(0, eta)`. The KL inequality
//! couples it to the subgradient slope, `phi'(f(x) - f*) * ||df(x)||_- >= 1`,
//! on a neighborhood slice. [`kl_check`] probes that inequality on seeded
//! random samples; [`PhiPrimitive`] integrates `-(phi')^2`, whose behavior at
//! zero separates finite-termination from asymptotic convergence regimes.

use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::block::BlockVector;
use crate::error::{Error, Result};
use crate::trace::IterateTrace;

/// Slack on the KL ratio so exact equality cases pass.
const KL_RATIO_SLACK: f64 = 1e-9;
/// Rejection-sampling budget before the region is declared empty.
const MAX_SAMPLE_ATTEMPTS: usize = 1_000_000;

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
enum DesingularizerKind {
    /// `phi(t) = (c/theta) t^theta`, `phi'(t) = c t^(theta-1)`.
    Power { c: f64, theta: f64 },
    /// User-supplied `phi` and `phi'`.
    General { phi: ScalarFn, dphi: ScalarFn },
}

/// A desingularizing function valid on `[0, eta)`.
#[derive(Clone)]
pub struct Desingularizer {
    kind: DesingularizerKind,
    eta: f64,
}

impl std::fmt::Debug for Desingularizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.kind {
            DesingularizerKind::Power { c, theta } => {
                write!(f, "Desingularizer::Power {{ c: {c}, theta: {theta}, eta: {} }}", self.eta)
            }
            DesingularizerKind::General { .. } => {
                write!(f, "Desingularizer::General {{ eta: {} }}", self.eta)
            }
        }
    }
}

impl Desingularizer {
    /// Power form `phi(t) = (c/theta) t^theta` with `c > 0`, `theta` in
    /// `(0, 1]`, valid on all of `[0, +inf)` (represented by `f64::MAX`).
    pub fn power(c: f64, theta: f64) -> Result<Self> {
        Self::power_with_eta(c, theta, f64::MAX)
    }

    pub fn power_with_eta(c: f64, theta: f64, eta: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::InvalidParameter(format!("power coefficient {c} must be > 0")));
        }
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(Error::InvalidParameter(format!("power exponent {theta} must be in (0, 1]")));
        }
        if !(eta > 0.0) {
            return Err(Error::InvalidParameter(format!("validity radius {eta} must be > 0")));
        }
        Ok(Self { kind: DesingularizerKind::Power { c, theta }, eta })
    }

    /// General form from callables for `phi` and `phi'`. Validated on a log
    /// grid in `(0, min(eta, 1))`: `phi(0) = 0`, `phi' > 0`, and `phi'`
    /// nonincreasing (concavity).
    pub fn general(phi: ScalarFn, dphi: ScalarFn, eta: f64) -> Result<Self> {
        if !(eta > 0.0) {
            return Err(Error::InvalidParameter(format!("validity radius {eta} must be > 0")));
        }
        let at_zero = phi(0.0);
        if !(at_zero.abs() <= 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "desingularizer must vanish at 0, got {at_zero:.3e}"
            )));
        }
        let hi = eta.min(1.0);
        let mut prev: Option<f64> = None;
        for i in 0..40 {
            let t = hi * 10f64.powf(-9.0 + 9.0 * (i as f64 + 1.0) / 40.0);
            let d = dphi(t);
            if !d.is_finite() || d <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "phi' must be positive and finite on (0, eta); got {d:.3e} at t = {t:.3e}"
                )));
            }
            if let Some(p) = prev {
                // phi' nonincreasing on an increasing grid, with slack.
                if d > p * (1.0 + 1e-9) + 1e-12 {
                    return Err(Error::InvalidParameter(format!(
                        "phi' increases near t = {t:.3e}; desingularizer must be concave"
                    )));
                }
            }
            prev = Some(d);
        }
        Ok(Self { kind: DesingularizerKind::General { phi, dphi }, eta })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// `Some((c, theta))` for the power form.
    pub fn power_params(&self) -> Option<(f64, f64)> {
        match &self.kind {
            DesingularizerKind::Power { c, theta } => Some((*c, *theta)),
            DesingularizerKind::General { .. } => None,
        }
    }

    fn check_domain(&self, t: f64, allow_zero: bool) -> Result<()> {
        let lo_ok = if allow_zero { t >= 0.0 } else { t > 0.0 };
        if !lo_ok || t >= self.eta || !t.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "argument {t} outside the validity interval [0, {})",
                self.eta
            )));
        }
        Ok(())
    }

    /// `phi(t)` for `t` in `[0, eta)`; exactly 0 at 0.
    pub fn phi(&self, t: f64) -> Result<f64> {
        self.check_domain(t, true)?;
        if t == 0.0 {
            return Ok(0.0);
        }
        Ok(match &self.kind {
            DesingularizerKind::Power { c, theta } => (c / theta) * t.powf(*theta),
            DesingularizerKind::General { phi, .. } => phi(t),
        })
    }

    /// `phi'(t)` for `t` in `(0, eta)`.
    pub fn dphi(&self, t: f64) -> Result<f64> {
        self.check_domain(t, false)?;
        Ok(match &self.kind {
            DesingularizerKind::Power { c, theta } => c * t.powf(theta - 1.0),
            DesingularizerKind::General { dphi, .. } => dphi(t),
        })
    }

    /// `max(phi(t), sqrt(t))` — the envelope that controls distance-to-limit
    /// bounds even when `phi` flattens faster than a square root.
    pub fn phi_tilde(&self, t: f64) -> Result<f64> {
        Ok(self.phi(t)?.max(t.sqrt()))
    }

    /// A primitive of `-(phi')^2`, with its behavior at `0+` resolved.
    ///
    /// Power forms are closed: `theta = 1/2` gives `-c^2 ln t` (infinite at
    /// zero); otherwise `-c^2 t^(2 theta - 1) / (2 theta - 1)`, finite at zero
    /// exactly when `theta > 1/2`. The general form integrates numerically
    /// from the anchor `t0 = min(eta/2, 1)` and decides finiteness by a
    /// geometric tail test on shell integrals of `(phi')^2`.
    pub fn primitive(&self) -> Result<PhiPrimitive> {
        match &self.kind {
            DesingularizerKind::Power { c, theta } => {
                let c2 = c * c;
                if (*theta - 0.5).abs() < 1e-14 {
                    Ok(PhiPrimitive {
                        form: PrimitiveForm::PowerLog { c2 },
                        finite_at_zero: false,
                        limit_at_zero: None,
                    })
                } else {
                    let p = 2.0 * theta - 1.0;
                    let finite = p > 0.0;
                    Ok(PhiPrimitive {
                        form: PrimitiveForm::PowerMonomial { c2, p },
                        finite_at_zero: finite,
                        limit_at_zero: finite.then_some(0.0),
                    })
                }
            }
            DesingularizerKind::General { dphi, .. } => {
                let anchor = (self.eta / 2.0).min(1.0);
                let sq = {
                    let dphi = dphi.clone();
                    Arc::new(move |t: f64| {
                        let d = dphi(t);
                        d * d
                    }) as ScalarFn
                };
                let (finite, limit) = integrability_at_zero(&sq, anchor);
                Ok(PhiPrimitive {
                    form: PrimitiveForm::Quadrature { integrand: sq, anchor },
                    finite_at_zero: finite,
                    limit_at_zero: limit,
                })
            }
        }
    }
}

/// `Power(c = 1/q, theta = 1/q)`: the desingularizer that turns the scalar
/// potential `|x|^q` into an exact equality case of the KL inequality at 0.
pub fn power_exponent_for_potential(q: f64) -> Result<Desingularizer> {
    if !(q > 1.0) || !q.is_finite() {
        return Err(Error::InvalidParameter(format!("potential exponent {q} must be > 1")));
    }
    Desingularizer::power(1.0 / q, 1.0 / q)
}

#[derive(Clone)]
enum PrimitiveForm {
    /// `Phi(t) = -c2 * ln(t)`.
    PowerLog { c2: f64 },
    /// `Phi(t) = -c2 * t^p / p` with `p = 2 theta - 1 != 0`.
    PowerMonomial { c2: f64, p: f64 },
    /// `Phi(t) = integral_t^anchor integrand(s) ds` (so `Phi(anchor) = 0`).
    Quadrature { integrand: ScalarFn, anchor: f64 },
}

/// A strictly decreasing primitive of `-(phi')^2`, defined up to an additive
/// constant (the quadrature form anchors at `Phi(t0) = 0`).
#[derive(Clone)]
pub struct PhiPrimitive {
    form: PrimitiveForm,
    /// Whether `Phi(0+)` is finite. Finite means the associated descent
    /// sequences stop in finitely many steps.
    pub finite_at_zero: bool,
    /// The limit at `0+` when finite (quadrature form reports its estimate).
    pub limit_at_zero: Option<f64>,
}

impl std::fmt::Debug for PhiPrimitive {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = match &self.form {
            PrimitiveForm::PowerLog { c2 } => format!("-{c2} ln t"),
            PrimitiveForm::PowerMonomial { c2, p } => format!("-{c2} t^{p}/{p}"),
            PrimitiveForm::Quadrature { anchor, .. } => format!("quadrature(anchor={anchor})"),
        };
        write!(f, "PhiPrimitive {{ {tag}, finite_at_zero: {} }}", self.finite_at_zero)
    }
}

impl PhiPrimitive {
    /// Evaluate at `t > 0`; `t = 0` returns the limit (possibly `+inf`).
    pub fn eval(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return self.limit_at_zero.unwrap_or(f64::INFINITY);
        }
        match &self.form {
            PrimitiveForm::PowerLog { c2 } => -c2 * t.ln(),
            PrimitiveForm::PowerMonomial { c2, p } => -c2 * t.powf(*p) / p,
            PrimitiveForm::Quadrature { integrand, anchor } => {
                if t <= *anchor {
                    adaptive_simpson(integrand.as_ref(), t, *anchor, 1e-10, 40)
                } else {
                    -adaptive_simpson(integrand.as_ref(), *anchor, t, 1e-10, 40)
                }
            }
        }
    }

    /// Solve `Phi(t) = y` for `t` in `(0, hi]`, where `Phi(hi) <= y` is
    /// required (`Phi` is decreasing). Returns 0 when `y` exceeds a finite
    /// `Phi(0+)` — the bound curve has collapsed to zero.
    pub fn inverse(&self, y: f64, hi: f64) -> Result<f64> {
        if !(hi > 0.0) || !hi.is_finite() || !y.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "inverse needs finite y and hi > 0 (y = {y}, hi = {hi})"
            )));
        }
        if self.eval(hi) > y + 1e-12 * (1.0 + y.abs()) {
            return Err(Error::InvalidParameter(format!(
                "inverse bracket invalid: Phi({hi}) = {} > y = {y}",
                self.eval(hi)
            )));
        }
        if self.finite_at_zero {
            if let Some(lim) = self.limit_at_zero {
                if y >= lim {
                    return Ok(0.0);
                }
            }
        }
        // Shrink the lower bracket end until Phi(lo) >= y.
        let mut lo = hi;
        for _ in 0..4000 {
            lo *= 0.25;
            if lo < f64::MIN_POSITIVE {
                return Ok(0.0);
            }
            if self.eval(lo) >= y {
                break;
            }
        }
        if self.eval(lo) < y {
            return Ok(0.0);
        }
        let mut a = lo; // Phi(a) >= y
        let mut b = hi; // Phi(b) <= y
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if self.eval(mid) >= y {
                a = mid;
            } else {
                b = mid;
            }
            if (b - a) <= 1e-14 * b {
                break;
            }
        }
        Ok(0.5 * (a + b))
    }
}

/// Adaptive Simpson quadrature with absolute/relative tolerance mixing.
fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: usize) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
    }
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let (left, lm, flm) = simpson(f, a, fa, m, fm);
        let (right, rm, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol * (1.0 + (left + right).abs()) {
            return left + right + delta / 15.0;
        }
        recurse(f, a, fa, m, fm, left, lm, flm, tol * 0.5, depth - 1)
            + recurse(f, m, fm, b, fb, right, rm, frm, tol * 0.5, depth - 1)
    }
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let (whole, m, fm) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, whole, m, fm, tol, depth)
}

/// Decide whether `integral_0^anchor g` converges by comparing shell
/// integrals over `[anchor 4^-(j+1), anchor 4^-j]`: a geometric decay of the
/// shells means convergence; non-decaying shells mean divergence. Returns the
/// verdict and, when finite, the extrapolated limit of
/// `integral_t^anchor g` as `t -> 0+`.
fn integrability_at_zero(g: &ScalarFn, anchor: f64) -> (bool, Option<f64>) {
    let mut shells = Vec::new();
    let mut upper = anchor;
    let mut total = 0.0;
    for _ in 0..40 {
        let lower = upper * 0.25;
        let d = adaptive_simpson(g.as_ref(), lower, upper, 1e-10, 30);
        shells.push(d);
        total += d;
        upper = lower;
        if upper < 1e-280 {
            break;
        }
    }
    let n = shells.len();
    let mut ratios = Vec::new();
    for j in (n.saturating_sub(7))..(n - 1) {
        if shells[j] > 0.0 {
            ratios.push(shells[j + 1] / shells[j]);
        }
    }
    if ratios.is_empty() {
        // Integrand vanished identically near zero: trivially integrable.
        return (true, Some(total));
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = ratios[ratios.len() / 2];
    if med < 0.95 {
        let last = *shells.last().unwrap();
        let tail = if med > 0.0 { last * med / (1.0 - med) } else { 0.0 };
        (true, Some(total + tail))
    } else {
        (false, None)
    }
}

/// A neighborhood slice on which the KL inequality is probed: points within
/// `delta` of the center whose value sits in the band above `f_star`.
#[derive(Debug, Clone)]
pub struct KlRegion {
    pub x_star: BlockVector,
    pub f_star: f64,
    pub delta: f64,
    pub eta: f64,
    /// Strict excludes the critical value itself (`f_star < f(x)`); relaxed
    /// admits it (`f_star <= f(x)`).
    pub strict: bool,
}

impl KlRegion {
    pub fn new(x_star: BlockVector, f_star: f64, delta: f64, eta: f64, strict: bool) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::InvalidParameter(format!("region radius {delta} must be positive")));
        }
        if !(eta > 0.0) {
            return Err(Error::InvalidParameter(format!("value band {eta} must be positive")));
        }
        if !f_star.is_finite() {
            return Err(Error::InvalidParameter("critical value must be finite".into()));
        }
        Ok(Self { x_star, f_star, delta, eta, strict })
    }

    /// Membership of `x` with value `fx`.
    pub fn contains(&self, x: &BlockVector, fx: f64) -> bool {
        if x.dims() != self.x_star.dims() {
            return false;
        }
        let gap = fx - self.f_star;
        let lower_ok = if self.strict { gap > 0.0 } else { gap >= 0.0 };
        lower_ok && gap < self.eta && x.distance(&self.x_star) < self.delta
    }
}

/// Outcome of a sampled KL-inequality probe.
#[derive(Debug, Clone, Serialize)]
pub struct KlReport {
    pub min_ratio: f64,
    pub violations: usize,
    pub samples_accepted: usize,
    pub attempts: usize,
    /// Flat coordinates of the violating sample points.
    pub points: Vec<Vec<f64>>,
    pub pass: bool,
}

/// Sample the region and test `phi'(f(x) - f_star) * slope(x) >= 1` at slack
/// `1e-9`. Sampling is uniform in the ball (seeded, deterministic), with
/// rejection on the value band; fewer points than requested may be accepted.
///
/// `slope_oracle` must return `||df(x)||_-` or an upper bound obtained from a
/// witness subgradient; the probe then refutes soundly and certifies
/// modulo the quality of the bound.
pub fn kl_check<F, S>(
    f_oracle: F,
    slope_oracle: S,
    region: &KlRegion,
    d: &Desingularizer,
    samples: usize,
    seed: u64,
) -> Result<KlReport>
where
    F: Fn(&BlockVector) -> f64,
    S: Fn(&BlockVector) -> f64,
{
    if samples == 0 {
        return Err(Error::InvalidParameter("sample count must be positive".into()));
    }
    if region.eta > d.eta {
        return Err(Error::InvalidParameter(format!(
            "region value band {} exceeds desingularizer validity {}",
            region.eta, d.eta
        )));
    }
    let dims = region.x_star.dims().to_vec();
    let n = region.x_star.total_dim();
    let center = region.x_star.flat();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut accepted = 0usize;
    let mut attempts = 0usize;
    let mut min_ratio = f64::INFINITY;
    let mut violations = 0usize;
    let mut points = Vec::new();

    while accepted < samples && attempts < MAX_SAMPLE_ATTEMPTS {
        attempts += 1;
        let offset = sample_in_ball(&mut rng, n, region.delta);
        let flat: Vec<f64> = center.iter().zip(offset.iter()).map(|(c, o)| c + o).collect();
        let x = BlockVector::from_flat(&dims, &flat)?;
        let fx = f_oracle(&x);
        if !fx.is_finite() || !region.contains(&x, fx) {
            continue;
        }
        accepted += 1;
        let gap = fx - region.f_star;
        if gap <= 0.0 {
            // Relaxed region can admit the critical value itself, where the
            // inequality is vacuous.
            continue;
        }
        let ratio = d.dphi(gap)? * slope_oracle(&x);
        if ratio.is_nan() {
            return Err(Error::TraceData(format!("KL ratio NaN at gap {gap:.3e}")));
        }
        if ratio < min_ratio {
            min_ratio = ratio;
        }
        if ratio < 1.0 - KL_RATIO_SLACK {
            violations += 1;
            points.push(flat);
        }
    }

    if accepted == 0 {
        return Err(Error::RegionEmpty { attempts });
    }
    Ok(KlReport {
        min_ratio,
        violations,
        samples_accepted: accepted,
        attempts,
        points,
        pass: violations == 0,
    })
}

/// Mark every trace record whose stored iterate lies in the region
/// (`region_flag` 1.0) or outside it (0.0). Returns the in-region count.
/// Records beyond the stored iterates keep their flag untouched.
pub fn stamp_region_flags(trace: &mut IterateTrace, region: &KlRegion) -> Result<usize> {
    if trace.iterates.is_empty() {
        return Err(Error::TraceData(
            "trace carries no iterates; rerun with iterate storage enabled".into(),
        ));
    }
    let n = trace.iterates.len().min(trace.records.len());
    let mut inside = 0usize;
    for j in 0..n {
        let is_in = region.contains(&trace.iterates[j], trace.records[j].f_val);
        trace.records[j].region_flag = Some(if is_in { 1.0 } else { 0.0 });
        inside += is_in as usize;
    }
    Ok(inside)
}

/// Standard-normal vector, Box-Muller on the given stream.
pub(crate) fn standard_normal_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    let mut v = DVector::zeros(n);
    let mut i = 0;
    while i < n {
        // u1 in (0, 1] avoids ln(0).
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        v[i] = r * (2.0 * std::f64::consts::PI * u2).cos();
        if i + 1 < n {
            v[i + 1] = r * (2.0 * std::f64::consts::PI * u2).sin();
        }
        i += 2;
    }
    v
}

/// Uniform sample in the centered ball of radius `delta` (standard-normal
/// direction, radius by inverse-CDF of the ball volume).
fn sample_in_ball(rng: &mut ChaCha8Rng, n: usize, delta: f64) -> DVector<f64> {
    loop {
        let v = standard_normal_vector(rng, n);
        let norm = v.norm();
        if norm > 0.0 && norm.is_finite() {
            let u: f64 = rng.random::<f64>();
            let radius = delta * u.powf(1.0 / n as f64);
            return v * (radius / norm);
        }
    }
}
