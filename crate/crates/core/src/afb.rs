//! Alternating forward-backward solver over block-structured objectives
//! `f(x_1,...,x_p) = h(x_1,...,x_p) + sum_i g_i(x_i)`, with one variable
//! metric per block and per step, optional controlled inexactness in both the
//! forward and backward substeps, and full audit trails.
//!
//! One iteration sweeps the blocks cyclically `i = 1..p`. Block `i` takes a
//! gradient step in the metric `A_{i,k}` evaluated at the partial point that
//! already contains this sweep's updates for blocks `< i`, followed by a
//! proximal step on `g_i` in the same metric:
//!
//! ```text
//! y_i^{k+1} in prox_{g_i}^{A_{i,k}}( x_i^k - A_{i,k}^{-1} grad_i h(X_i^k) + r_i^k )
//! x_i^{k+1}  = y_i^{k+1} + s_i^{k+1}
//! ```
//!
//! With the error terms `r` (forward) and `s` (backward) identically zero the
//! `x` and `y` sequences coincide. The error-injection scheme and the bounds
//! it maintains are documented on [`ErrorModel`].

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::BlockVector;
use crate::error::{Error, Result};
use crate::kl::standard_normal_vector;
use crate::metric::{prox_in_metric, ProxOracle, SpdOperator};
use crate::monitor::{CheckReport, Violation};
use crate::trace::{IterateRecord, IterateTrace, TerminalStatus};

/// Tolerance for the post-hoc error-bound checks.
pub const HE_CHECK_TOL: f64 = 1e-10;

/// Fraction of each error bound the injector aims for; the cushion keeps the
/// bounds satisfied when the step that defines them shifts under the injected
/// error itself.
pub const ERROR_MARGIN_DEFAULT: f64 = 0.1;

/// A block-separable objective: smooth coupling `h` plus one prox-friendly
/// `g_i` per block.
#[derive(Clone)]
pub struct BlockProblem {
    dims: Vec<usize>,
    h_eval: Arc<dyn Fn(&BlockVector) -> f64 + Send + Sync>,
    h_grad_block: Arc<dyn Fn(usize, &BlockVector) -> DVector<f64> + Send + Sync>,
    /// Common Lipschitz constant of every partial map `x_i -> grad_i h(...)`
    /// with the other blocks frozen (NOT the full-gradient constant).
    lipschitz: f64,
    g: Vec<ProxOracle>,
}

impl fmt::Debug for BlockProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BlockProblem")
            .field("dims", &self.dims)
            .field("lipschitz", &self.lipschitz)
            .field("g", &self.g.iter().map(|o| o.kind()).collect::<Vec<_>>())
            .finish()
    }
}

impl BlockProblem {
    pub fn new(
        dims: Vec<usize>,
        h_eval: Arc<dyn Fn(&BlockVector) -> f64 + Send + Sync>,
        h_grad_block: Arc<dyn Fn(usize, &BlockVector) -> DVector<f64> + Send + Sync>,
        lipschitz: f64,
        g: Vec<ProxOracle>,
    ) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::Shape("block dims must be nonempty and positive".into()));
        }
        if g.len() != dims.len() {
            return Err(Error::Shape(format!(
                "{} prox oracles for {} blocks",
                g.len(),
                dims.len()
            )));
        }
        if !lipschitz.is_finite() || lipschitz < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "per-block Lipschitz constant {lipschitz} must be finite and nonnegative"
            )));
        }
        Ok(Self { dims, h_eval, h_grad_block, lipschitz, g })
    }

    pub fn p(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn prox_oracle(&self, i: usize) -> &ProxOracle {
        &self.g[i]
    }

    pub fn h_eval(&self, x: &BlockVector) -> f64 {
        (self.h_eval)(x)
    }

    pub fn h_grad_block(&self, i: usize, x: &BlockVector) -> DVector<f64> {
        (self.h_grad_block)(i, x)
    }

    /// Full objective `h + sum_i g_i`; indicator oracles contribute
    /// `+infinity` off their sets.
    pub fn f_eval(&self, x: &BlockVector) -> f64 {
        let mut v = (self.h_eval)(x);
        for (i, g) in self.g.iter().enumerate() {
            v += g.eval(x.block(i));
        }
        v
    }
}

/// Empirical check of the declared per-block Lipschitz constant: random pairs
/// differing in one block only, gradients compared along that block. Returns
/// the largest observed ratio.
pub fn probe_block_lipschitz(
    problem: &BlockProblem,
    base: &BlockVector,
    radius: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if !(radius > 0.0) || samples == 0 {
        return Err(Error::InvalidParameter("need a positive radius and at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let mut x = base.clone();
        for i in 0..problem.p() {
            let noise = standard_normal_vector(&mut rng, problem.dims[i]) * (radius * 0.3);
            x.set_block(i, x.block(i) + noise);
        }
        for i in 0..problem.p() {
            let dir = standard_normal_vector(&mut rng, problem.dims[i]);
            let n = dir.norm();
            if n == 0.0 {
                continue;
            }
            let step = &dir * (radius / n);
            let mut x2 = x.clone();
            x2.set_block(i, x.block(i) + &step);
            let dg = problem.h_grad_block(i, &x2) - problem.h_grad_block(i, &x);
            worst = worst.max(dg.norm() / step.norm());
        }
    }
    Ok(worst)
}

/// Solver state: the user-visible iterate `x`, its error-free companion `y`
/// (identical when errors are off), and the step counter.
#[derive(Debug, Clone)]
pub struct AfbState {
    pub x: BlockVector,
    pub y: BlockVector,
    pub k: usize,
}

impl AfbState {
    pub fn new(x0: BlockVector) -> Self {
        Self { y: x0.clone(), x: x0, k: 0 }
    }
}

/// Per-block, per-step metric source. `alpha_lower` is the declared uniform
/// floor on the smallest eigenvalue of every produced operator; the runner
/// enforces it.
#[derive(Clone)]
pub struct MetricSchedule {
    provider: Arc<dyn Fn(usize, usize, &AfbState) -> Result<SpdOperator> + Send + Sync>,
    alpha_lower: f64,
}

impl MetricSchedule {
    pub fn new(
        provider: Arc<dyn Fn(usize, usize, &AfbState) -> Result<SpdOperator> + Send + Sync>,
        alpha_lower: f64,
    ) -> Result<Self> {
        if !(alpha_lower > 0.0) || !alpha_lower.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "metric floor {alpha_lower} must be positive and finite"
            )));
        }
        Ok(Self { provider, alpha_lower })
    }

    /// The same operators at every step.
    pub fn constant(ops: Vec<SpdOperator>) -> Result<Self> {
        if ops.is_empty() {
            return Err(Error::Shape("need at least one operator".into()));
        }
        let alpha_lower = ops.iter().map(SpdOperator::alpha).fold(f64::INFINITY, f64::min);
        Self::new(Arc::new(move |i, _, _| Ok(ops[i].clone())), alpha_lower)
    }

    /// One scaled identity per block, fixed across steps.
    pub fn scaled_identities(dims: &[usize], factors: &[f64]) -> Result<Self> {
        if dims.len() != factors.len() {
            return Err(Error::Shape("one factor per block".into()));
        }
        let ops = dims
            .iter()
            .zip(factors)
            .map(|(&n, &c)| SpdOperator::scaled_identity(n, c))
            .collect::<Result<Vec<_>>>()?;
        Self::constant(ops)
    }

    pub fn alpha_lower(&self) -> f64 {
        self.alpha_lower
    }

    pub fn operator(&self, i: usize, k: usize, state: &AfbState) -> Result<SpdOperator> {
        (self.provider)(i, k, state)
    }
}

/// Additive slack sequence for the forward-error bound (summable by intent).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SlackSchedule {
    Zero,
    /// `base * ratio^k` with `ratio` in [0, 1).
    Geometric { base: f64, ratio: f64 },
    /// Explicit prefix; zero beyond its end.
    Table(Vec<f64>),
}

impl SlackSchedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            SlackSchedule::Zero => Ok(()),
            SlackSchedule::Geometric { base, ratio } => {
                if !(*base >= 0.0) || !base.is_finite() {
                    return Err(Error::InvalidParameter(format!("slack base {base} must be >= 0")));
                }
                if !(*ratio >= 0.0 && *ratio < 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "slack ratio {ratio} must lie in [0, 1) so the sequence is summable"
                    )));
                }
                Ok(())
            }
            SlackSchedule::Table(v) => {
                if v.iter().any(|t| !t.is_finite() || *t < 0.0) {
                    return Err(Error::InvalidParameter("slack entries must be finite and >= 0".into()));
                }
                Ok(())
            }
        }
    }

    pub fn at(&self, k: usize) -> f64 {
        match self {
            SlackSchedule::Zero => 0.0,
            SlackSchedule::Geometric { base, ratio } => base * ratio.powi(k as i32),
            SlackSchedule::Table(v) => v.get(k).copied().unwrap_or(0.0),
        }
    }
}

pub type ErrorScript = Arc<dyn Fn(usize, usize, usize) -> DVector<f64> + Send + Sync>;

/// How inexactness enters the sweep.
///
/// `Scheduled` draws random directions and rescales them to live inside the
/// admissible-error envelope: with `sigma >= 0`, `rho in (0,1]`, and a
/// summable slack `mu_k`,
///
/// 1. the stacked backward errors satisfy `||S_i^k|| <= (sigma/2) ||dy_i||`,
/// 2. the forward error satisfies `||r_i^k|| <= (sigma/2) ||dy_i|| + mu_k`,
/// 3. `<r_i^k + s_i^k, dy_i>_A <= ((1-rho)/2) ||dy_i||_A^2`,
///
/// where `dy_i = y_i^{k+1} - y_i^k`. Because `dy_i` itself moves when `r` is
/// applied, the injector measures a tentative error-free step first, scales
/// the errors against it (shrunk by `margin`), redoes the prox with `r`
/// applied, and then verifies the bounds against the final step — one
/// fixed-point pass; on failure it drops `r` for that block and logs it.
/// Backward errors are additionally shrunk by `1/sqrt(p)` so the stacked
/// norms in bound 1 stay inside per-block budgets, and both errors are
/// reflected to point away from the step in the metric inner product, which
/// secures bound 3 whenever the step is nonzero.
///
/// `Scripted` applies caller-supplied errors verbatim — no scaling, no
/// verification — for adversarial constructions.
#[derive(Clone)]
pub enum ErrorModel {
    None,
    Scheduled { sigma: f64, rho: f64, slack: SlackSchedule, margin: f64 },
    /// `r_of(k, i, dim)` and `s_of(k, i, dim)`; `s_of` is queried at `k+1`
    /// during step `k` (it produces `s_i^{k+1}`).
    Scripted { r_of: ErrorScript, s_of: ErrorScript },
}

impl fmt::Debug for ErrorModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ErrorModel::None => write!(f, "ErrorModel::None"),
            ErrorModel::Scheduled { sigma, rho, slack, margin } => f
                .debug_struct("ErrorModel::Scheduled")
                .field("sigma", sigma)
                .field("rho", rho)
                .field("slack", slack)
                .field("margin", margin)
                .finish(),
            ErrorModel::Scripted { .. } => write!(f, "ErrorModel::Scripted"),
        }
    }
}

impl ErrorModel {
    /// Validated scheduled model. The admissibility condition
    /// `(sigma+1)/rho < alpha_lower / L` ties the error budget to the metric
    /// floor; with `L = 0` any positive floor qualifies.
    pub fn scheduled(
        sigma: f64,
        rho: f64,
        slack: SlackSchedule,
        alpha_lower: f64,
        lipschitz: f64,
    ) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!("sigma {sigma} must be >= 0")));
        }
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::InvalidParameter(format!("rho {rho} must lie in (0, 1]")));
        }
        slack.validate()?;
        if lipschitz > 0.0 && (sigma + 1.0) / rho >= alpha_lower / lipschitz {
            return Err(Error::InvalidParameter(format!(
                "(sigma+1)/rho = {:.6e} must stay below alpha_lower/L = {:.6e}",
                (sigma + 1.0) / rho,
                alpha_lower / lipschitz
            )));
        }
        Ok(ErrorModel::Scheduled { sigma, rho, slack, margin: ERROR_MARGIN_DEFAULT })
    }

    pub fn enabled(&self) -> bool {
        !matches!(self, ErrorModel::None)
    }

    /// Parameters used when deriving descent schedules for a run under this
    /// model; `None` and `Scripted` count as error-free.
    fn derivation_params(&self) -> (f64, f64, SlackSchedule) {
        match self {
            ErrorModel::Scheduled { sigma, rho, slack, .. } => (*sigma, *rho, slack.clone()),
            _ => (0.0, 1.0, SlackSchedule::Zero),
        }
    }
}

/// One recorded error event: everything needed to re-audit the bounds after
/// the run.
#[derive(Debug, Clone)]
pub struct HeTriple {
    pub k: usize,
    pub i: usize,
    /// Forward error `r_i^k`.
    pub r: DVector<f64>,
    /// Backward error `s_i^{k+1}` (applied after the prox of step `k`).
    pub s_next: DVector<f64>,
    /// `y_i^{k+1} - y_i^k`.
    pub dy: DVector<f64>,
    pub metric: SpdOperator,
}

/// Drives error generation across a run: owns the model, the random stream,
/// the recorded triples, and the log of fallbacks.
pub struct ErrorInjector {
    pub model: ErrorModel,
    rng: ChaCha8Rng,
    pub triples: Vec<HeTriple>,
    pub log: Vec<String>,
}

impl ErrorInjector {
    pub fn new(model: ErrorModel, seed: u64) -> Self {
        Self { model, rng: ChaCha8Rng::seed_from_u64(seed), triples: Vec::new(), log: Vec::new() }
    }
}

fn scale_to(v: DVector<f64>, target: f64) -> DVector<f64> {
    let n = v.norm();
    if n == 0.0 || target == 0.0 {
        DVector::zeros(v.len())
    } else {
        v * (target / n)
    }
}

/// One error-free sweep. Requires `alpha(A_i) > L` for every block.
pub fn afb_step(
    problem: &BlockProblem,
    state: &AfbState,
    metrics: &[SpdOperator],
) -> Result<(AfbState, IterateRecord)> {
    let mut injector = ErrorInjector::new(ErrorModel::None, 0);
    afbe_step(problem, state, metrics, &mut injector, state.k)
}

/// One sweep with the injector's error model applied.
///
/// The record carries the certified objective `f(Y^{k+1})` (the sequence the
/// descent analysis covers — with errors on, `f(X)` can be infinite when a
/// backward error steps off an indicator's set), the step norm
/// `||X^{k+1} - X^k||` of the user-visible sequence, the slope-witness norm
/// at `Y^{k+1}`, and the spectral extremes of this step's metrics. The three
/// sequences coincide when errors are off. Per-transition coefficients are
/// attached later by [`run`].
pub fn afbe_step(
    problem: &BlockProblem,
    state: &AfbState,
    metrics: &[SpdOperator],
    injector: &mut ErrorInjector,
    k: usize,
) -> Result<(AfbState, IterateRecord)> {
    let p = problem.p();
    if metrics.len() != p {
        return Err(Error::Shape(format!("{} metrics for {} blocks", metrics.len(), p)));
    }
    if k != state.k {
        return Err(Error::InvalidParameter(format!(
            "step index {k} does not match state counter {}",
            state.k
        )));
    }
    for (i, a) in metrics.iter().enumerate() {
        if a.dim() != problem.dims[i] {
            return Err(Error::Shape(format!(
                "metric {i} has dim {} but block has {}",
                a.dim(),
                problem.dims[i]
            )));
        }
        if a.alpha() <= problem.lipschitz {
            return Err(Error::InvalidParameter(format!(
                "metric {i} has alpha {:.6e} <= L = {:.6e}; descent is not guaranteed",
                a.alpha(),
                problem.lipschitz
            )));
        }
    }

    let mut x_next = state.x.clone();
    let mut y_next = state.y.clone();
    let mut partial_grads: Vec<DVector<f64>> = Vec::with_capacity(p);
    let mut dys: Vec<DVector<f64>> = Vec::with_capacity(p);
    let mut forward_errs: Vec<DVector<f64>> = Vec::with_capacity(p);

    for i in 0..p {
        let a = &metrics[i];
        let g = &problem.g[i];
        // x_next currently holds x^{k+1} for blocks < i and x^k for the rest:
        // exactly the partial point this block's gradient must see.
        let grad = problem.h_grad_block(i, &x_next);
        if grad.len() != problem.dims[i] {
            return Err(Error::Shape(format!(
                "gradient for block {i} has dim {} but block has {}",
                grad.len(),
                problem.dims[i]
            )));
        }
        let base = state.x.block(i) - a.solve(&grad);
        let y_prev = state.y.block(i);
        let s_prev = state.x.block(i) - y_prev;

        let (y_new, r_used, s_new) = match &injector.model {
            ErrorModel::None => {
                let y = prox_in_metric(g, a, &base)?;
                let z = DVector::zeros(problem.dims[i]);
                (y, z.clone(), z)
            }
            ErrorModel::Scheduled { sigma, rho, slack, margin } => {
                let mu_k = slack.at(k);
                let y_tent = prox_in_metric(g, a, &base)?;
                let dy_tent = &y_tent - y_prev;

                let r_budget = 0.5 * sigma * dy_tent.norm() + mu_k;
                let mut r = scale_to(
                    standard_normal_vector(&mut injector.rng, problem.dims[i]),
                    margin * r_budget,
                );
                if a.inner(&r, &dy_tent) > 0.0 {
                    r = -r;
                }
                let mut y_new = if r.norm() == 0.0 {
                    y_tent.clone()
                } else {
                    prox_in_metric(g, a, &(&base + &r))?
                };
                let mut dy = &y_new - y_prev;

                // Verify the forward bounds against the realized step; the
                // single repair drops r (reverting the step), never loops.
                let he2_ok = r.norm() <= 0.5 * sigma * dy.norm() + mu_k + HE_CHECK_TOL;
                let inject = &r + &s_prev;
                let he3_ok = a.inner(&inject, &dy)
                    <= 0.5 * (1.0 - rho) * a.norm_squared(&dy) + HE_CHECK_TOL;
                if !(he2_ok && he3_ok) {
                    injector.log.push(format!(
                        "step {k} block {i}: dropped forward error (he2 {he2_ok}, he3 {he3_ok})"
                    ));
                    r = DVector::zeros(problem.dims[i]);
                    y_new = y_tent;
                    dy = dy_tent;
                }

                let s_budget = margin * 0.5 * sigma / (p as f64).sqrt() * dy.norm();
                let mut s = scale_to(
                    standard_normal_vector(&mut injector.rng, problem.dims[i]),
                    s_budget,
                );
                if a.inner(&s, &dy) > 0.0 {
                    s = -s;
                }

                // Stacked backward norm for this block: new errors for blocks
                // already swept, standing errors for the rest. Earlier
                // choices cannot be revised, so a breach is only logged.
                let mut stacked_sq = s.norm_squared();
                for j in 0..i {
                    stacked_sq += (x_next.block(j) - y_next.block(j)).norm_squared();
                }
                for j in i..p {
                    stacked_sq += (state.x.block(j) - state.y.block(j)).norm_squared();
                }
                if stacked_sq.sqrt() > 0.5 * sigma * dy.norm() + HE_CHECK_TOL {
                    injector.log.push(format!(
                        "step {k} block {i}: stacked backward errors exceed the budget \
                         ({:.3e} vs {:.3e})",
                        stacked_sq.sqrt(),
                        0.5 * sigma * dy.norm()
                    ));
                }
                (y_new, r, s)
            }
            ErrorModel::Scripted { r_of, s_of } => {
                let r = r_of(k, i, problem.dims[i]);
                let s = s_of(k + 1, i, problem.dims[i]);
                if r.len() != problem.dims[i] || s.len() != problem.dims[i] {
                    return Err(Error::Shape(format!(
                        "scripted error for block {i} has the wrong dimension"
                    )));
                }
                let y = prox_in_metric(g, a, &(&base + &r))?;
                (y, r, s)
            }
        };

        let dy = &y_new - y_prev;
        x_next.set_block(i, &y_new + &s_new);
        y_next.set_block(i, y_new);
        if injector.model.enabled() {
            injector.triples.push(HeTriple {
                k,
                i,
                r: r_used.clone(),
                s_next: s_new,
                dy: dy.clone(),
                metric: a.clone(),
            });
        }
        partial_grads.push(grad);
        dys.push(dy);
        forward_errs.push(r_used);
    }

    // Slope witness at Y^{k+1}: per block,
    //   w_i = grad_i h(Y^{k+1}) - grad_i h(X_i^k) - A_i dy_i + A_i (r_i^k + s_i^k),
    // which certifies membership in the subdifferential at the new point.
    let mut witness_blocks = Vec::with_capacity(p);
    for i in 0..p {
        let grad_new = problem.h_grad_block(i, &y_next);
        let s_prev = state.x.block(i) - state.y.block(i);
        let inject = &forward_errs[i] + &s_prev;
        let w = grad_new - &partial_grads[i] - metrics[i].apply(&dys[i]) + metrics[i].apply(&inject);
        witness_blocks.push(w);
    }
    let witness = BlockVector::new(witness_blocks)?;
    let slope = witness.norm();

    let f_new = problem.f_eval(&y_next);
    if !f_new.is_finite() {
        return Err(Error::Diverged { k: k + 1, value: f_new });
    }
    let step_norm = x_next.distance(&state.x);
    let alpha_k = metrics.iter().map(SpdOperator::alpha).fold(f64::INFINITY, f64::min);
    let beta_k = metrics.iter().map(SpdOperator::beta).fold(f64::NEG_INFINITY, f64::max);

    let record = IterateRecord {
        k: k + 1,
        f_val: f_new,
        step_norm: Some(step_norm),
        slope_norm: Some(slope),
        a_k: None,
        b_k: None,
        eps_k: None,
        alpha_k: Some(alpha_k),
        beta_k: Some(beta_k),
        region_flag: None,
    };
    Ok((AfbState { x: x_next, y: y_next, k: k + 1 }, record))
}

/// Slope witness for a completed error-free transition:
/// `w_i = grad_i h(X^{k+1}) - grad_i h(X_i^k) - A_i (x_i^{k+1} - x_i^k)` per
/// block, stacked. Returns the witness and its Euclidean norm.
pub fn subgradient_witness(
    problem: &BlockProblem,
    prev: &AfbState,
    next: &AfbState,
    metrics: &[SpdOperator],
) -> Result<(BlockVector, f64)> {
    let p = problem.p();
    if metrics.len() != p {
        return Err(Error::Shape(format!("{} metrics for {} blocks", metrics.len(), p)));
    }
    let mut partial = prev.x.clone();
    let mut blocks = Vec::with_capacity(p);
    for i in 0..p {
        let grad_at_partial = problem.h_grad_block(i, &partial);
        let dx = next.x.block(i) - prev.x.block(i);
        let grad_new = problem.h_grad_block(i, &next.x);
        blocks.push(grad_new - grad_at_partial - metrics[i].apply(&dx));
        partial.set_block(i, next.x.block(i).clone());
    }
    let w = BlockVector::new(blocks)?;
    let norm = w.norm();
    Ok((w, norm))
}

fn appendix_feasible(alpha: f64, sigma: f64, rho: f64, lipschitz: f64, p: usize) -> bool {
    rho * alpha > lipschitz * (sigma * (p as f64).sqrt() / p as f64 + 1.0)
}

/// Descent coefficients certified by the convergence analysis for a sweep
/// with spectral extremes `(alpha_k, beta_k)`, error parameters
/// `(sigma, rho, mu)`, per-block Lipschitz constant `L`, and `p` blocks:
///
/// ```text
/// a_k     = (rho alpha_k - L (sigma sqrt(p)/p + 1)) / 2
/// b_{k+1} = 1 / (p^2 (1+sigma) (beta_k + L))
/// e_{k+1} = beta_k mu_k / (p (1+sigma) (beta_k + L))
/// ```
///
/// Returned sequences are per-transition: entry `k` of each governs
/// `k -> k+1`. An empty `mu` means identically zero.
pub fn derive_schedule_from_appendix(
    alpha: &[f64],
    beta: &[f64],
    sigma: f64,
    rho: f64,
    mu: &[f64],
    lipschitz: f64,
    p: usize,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if alpha.is_empty() || alpha.len() != beta.len() {
        return Err(Error::Shape("alpha and beta must be nonempty with equal lengths".into()));
    }
    if !mu.is_empty() && mu.len() < alpha.len() {
        return Err(Error::Shape(format!(
            "mu has {} entries for {} steps (empty means all-zero)",
            mu.len(),
            alpha.len()
        )));
    }
    if p == 0 {
        return Err(Error::InvalidParameter("need at least one block".into()));
    }
    if !(rho > 0.0 && rho <= 1.0) || !(sigma >= 0.0) || !(lipschitz >= 0.0) {
        return Err(Error::InvalidParameter(
            "need rho in (0,1], sigma >= 0, and a nonnegative Lipschitz constant".into(),
        ));
    }
    let pf = p as f64;
    let mut a = Vec::with_capacity(alpha.len());
    let mut b = Vec::with_capacity(alpha.len());
    let mut eps = Vec::with_capacity(alpha.len());
    for k in 0..alpha.len() {
        let (al, be) = (alpha[k], beta[k]);
        if !(al > 0.0) || be < al {
            return Err(Error::InvalidParameter(format!(
                "need 0 < alpha_k <= beta_k at k = {k} (got {al}, {be})"
            )));
        }
        if !appendix_feasible(al, sigma, rho, lipschitz, p) {
            return Err(Error::ScheduleInfeasible {
                k,
                reason: format!(
                    "rho*alpha_k = {:.6e} must exceed L(sigma*sqrt(p)/p + 1) = {:.6e}",
                    rho * al,
                    lipschitz * (sigma * pf.sqrt() / pf + 1.0)
                ),
            });
        }
        let mu_k = if mu.is_empty() { 0.0 } else { mu[k] };
        a.push((rho * al - lipschitz * (sigma * pf.sqrt() / pf + 1.0)) / 2.0);
        b.push(1.0 / (pf * pf * (1.0 + sigma) * (be + lipschitz)));
        eps.push(be * mu_k / (pf * (1.0 + sigma) * (be + lipschitz)));
    }
    Ok((a, b, eps))
}

/// Re-audit recorded error triples against the three error bounds at
/// [`HE_CHECK_TOL`]. The stacked backward norms and the standing error
/// `s_i^k` are reconstructed across steps (zero before the first step).
pub fn he_check(
    triples: &[HeTriple],
    sigma: f64,
    rho: f64,
    mu: &SlackSchedule,
) -> Result<CheckReport> {
    let mut report = CheckReport {
        name: "error_bounds".into(),
        checked: 0,
        violations: Vec::new(),
        pass: true,
        notes: Vec::new(),
    };
    if triples.is_empty() {
        report.notes.push("no injected errors recorded".into());
        return Ok(report);
    }
    let p = triples.iter().map(|t| t.i).max().unwrap() + 1;
    let k_max = triples.iter().map(|t| t.k).max().unwrap();
    let mut by_step: Vec<Vec<Option<&HeTriple>>> = vec![vec![None; p]; k_max + 1];
    for t in triples {
        if t.i >= p || by_step[t.k][t.i].is_some() {
            return Err(Error::TraceData(format!("duplicate error record at ({}, {})", t.k, t.i)));
        }
        by_step[t.k][t.i] = Some(t);
    }
    for (k, row) in by_step.iter().enumerate() {
        if row.iter().any(Option::is_none) {
            return Err(Error::TraceData(format!("missing error records at step {k}")));
        }
    }
    let get = |k: usize, i: usize| by_step[k][i].unwrap();

    for k in 0..=k_max {
        let mu_k = mu.at(k);
        for i in 0..p {
            let t = get(k, i);
            let dy_norm = t.dy.norm();

            // Bound 1: stacked backward errors (new for blocks before i,
            // standing for the rest) against this block's step.
            let mut stacked_sq = 0.0;
            for j in 0..p {
                let s = if j < i {
                    &get(k, j).s_next
                } else if k > 0 {
                    &get(k - 1, j).s_next
                } else {
                    continue; // starting point has no standing error
                };
                stacked_sq += s.norm_squared();
            }
            let he1_bound = 0.5 * sigma * dy_norm;
            report.checked += 1;
            if stacked_sq.sqrt() > he1_bound + HE_CHECK_TOL * (1.0 + he1_bound) {
                report.violations.push(Violation {
                    k,
                    residual: stacked_sq.sqrt() - he1_bound,
                    detail: format!(
                        "backward stack at block {i}: {:.6e} > {:.6e}",
                        stacked_sq.sqrt(),
                        he1_bound
                    ),
                });
            }

            // Bound 2: forward error against step plus slack.
            let he2_bound = 0.5 * sigma * dy_norm + mu_k;
            report.checked += 1;
            if t.r.norm() > he2_bound + HE_CHECK_TOL * (1.0 + he2_bound) {
                report.violations.push(Violation {
                    k,
                    residual: t.r.norm() - he2_bound,
                    detail: format!("forward error at block {i}: {:.6e} > {:.6e}", t.r.norm(), he2_bound),
                });
            }

            // Bound 3: combined injection against the step, in the metric.
            let s_standing = if k > 0 {
                get(k - 1, i).s_next.clone()
            } else {
                DVector::zeros(t.dy.len())
            };
            let inject = &t.r + &s_standing;
            let lhs = t.metric.inner(&inject, &t.dy);
            let rhs = 0.5 * (1.0 - rho) * t.metric.norm_squared(&t.dy);
            report.checked += 1;
            if lhs > rhs + HE_CHECK_TOL * (1.0 + rhs.abs()) {
                report.violations.push(Violation {
                    k,
                    residual: lhs - rhs,
                    detail: format!("metric inner product at block {i}: {lhs:.6e} > {rhs:.6e}"),
                });
            }
        }
    }
    report.pass = report.violations.is_empty();
    Ok(report)
}

/// Iteration cutoffs: a step counts as converged when BOTH the step norm and
/// the slope-witness norm fall to their tolerances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoppingRule {
    pub step_tol: f64,
    pub slope_tol: f64,
    pub max_iters: usize,
}

impl Default for StoppingRule {
    fn default() -> Self {
        Self { step_tol: 1e-10, slope_tol: 1e-8, max_iters: 100_000 }
    }
}

impl StoppingRule {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_tol >= 0.0) || !(self.slope_tol >= 0.0) {
            return Err(Error::InvalidParameter("stopping tolerances must be >= 0".into()));
        }
        Ok(())
    }
}

/// A finished run: the trace plus the error audit trail.
#[derive(Debug)]
pub struct RunOutput {
    pub trace: IterateTrace,
    pub he_triples: Vec<HeTriple>,
    pub injector_log: Vec<String>,
}

/// Drive the sweep from `x0` until the stopping rule fires.
///
/// The trace's records carry the realized spectral extremes and the derived
/// per-transition coefficients; `iterates` holds the `x` sequence and
/// `companions` the `y` sequence when errors are enabled. Divergence
/// (non-finite objective) ends the run with status `Diverged` and the partial
/// trace intact. A schedule that cannot certify descent
/// fails with the offending step index.
pub fn run(
    problem: &BlockProblem,
    x0: &BlockVector,
    schedule: &MetricSchedule,
    errors: &ErrorModel,
    stop: &StoppingRule,
    seed: u64,
) -> Result<RunOutput> {
    stop.validate()?;
    if x0.dims() != problem.dims {
        return Err(Error::Shape(format!(
            "initial point has dims {:?} but the problem has {:?}",
            x0.dims(),
            problem.dims
        )));
    }
    if schedule.alpha_lower <= problem.lipschitz {
        return Err(Error::InvalidParameter(format!(
            "metric floor {:.6e} must exceed the Lipschitz constant {:.6e}",
            schedule.alpha_lower,
            problem.lipschitz
        )));
    }
    let f0 = problem.f_eval(x0);
    if !f0.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "initial objective is {f0}; the starting point must be feasible"
        )));
    }
    let (sigma, rho, slack) = errors.derivation_params();

    let mut injector = ErrorInjector::new(errors.clone(), seed);
    let mut state = AfbState::new(x0.clone());
    let mut trace = IterateTrace::new(TerminalStatus::MaxIter);
    trace.push(IterateRecord::initial(f0))?;
    trace.iterates.push(state.x.clone());
    let mut companions = errors.enabled().then(|| vec![state.y.clone()]);

    let mut alphas = Vec::new();
    let mut betas = Vec::new();
    let mut mus = Vec::new();

    for k in 0..stop.max_iters {
        let mut metrics = Vec::with_capacity(problem.p());
        for i in 0..problem.p() {
            let op = schedule.operator(i, k, &state)?;
            if op.alpha() < schedule.alpha_lower * (1.0 - 1e-12) {
                return Err(Error::InvalidParameter(format!(
                    "schedule produced alpha {:.6e} below its declared floor {:.6e} (block {i}, step {k})",
                    op.alpha(),
                    schedule.alpha_lower
                )));
            }
            metrics.push(op);
        }
        let alpha_k = metrics.iter().map(SpdOperator::alpha).fold(f64::INFINITY, f64::min);
        if !appendix_feasible(alpha_k, sigma, rho, problem.lipschitz, problem.p()) {
            return Err(Error::ScheduleInfeasible {
                k,
                reason: format!(
                    "alpha_k = {alpha_k:.6e} cannot certify descent for sigma = {sigma}, rho = {rho}"
                ),
            });
        }

        match afbe_step(problem, &state, &metrics, &mut injector, k) {
            Ok((next, record)) => {
                let step = record.step_norm.unwrap_or(f64::INFINITY);
                let slope = record.slope_norm.unwrap_or(f64::INFINITY);
                alphas.push(record.alpha_k.unwrap());
                betas.push(record.beta_k.unwrap());
                mus.push(slack.at(k));
                trace.push(record)?;
                trace.iterates.push(next.x.clone());
                if let Some(c) = companions.as_mut() {
                    c.push(next.y.clone());
                }
                state = next;
                if step <= stop.step_tol && slope <= stop.slope_tol {
                    trace.status = TerminalStatus::Converged;
                    break;
                }
            }
            Err(Error::Diverged { .. }) => {
                trace.status = TerminalStatus::Diverged;
                break;
            }
            Err(e) => return Err(e),
        }
    }

    if !alphas.is_empty() {
        let (a, b, eps) = derive_schedule_from_appendix(
            &alphas,
            &betas,
            sigma,
            rho,
            &mus,
            problem.lipschitz,
            problem.p(),
        )?;
        for j in 0..a.len() {
            trace.records[j].a_k = Some(a[j]);
            trace.records[j + 1].b_k = Some(b[j]);
            trace.records[j + 1].eps_k = Some(eps[j]);
        }
    }
    trace.companions = companions;
    Ok(RunOutput { trace, he_triples: injector.triples, injector_log: injector.log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn quadratic_1d(lambda: f64) -> (BlockProblem, MetricSchedule) {
        let problem = BlockProblem::new(
            vec![1],
            Arc::new(|x: &BlockVector| 0.5 * x.block(0)[0] * x.block(0)[0]),
            Arc::new(|_, x: &BlockVector| x.block(0).clone()),
            1.0,
            vec![ProxOracle::zero()],
        )
        .unwrap();
        let schedule = MetricSchedule::scaled_identities(&[1], &[1.0 / lambda]).unwrap();
        (problem, schedule)
    }

    #[test]
    fn gradient_step_contracts_exactly() {
        let (problem, _) = quadratic_1d(0.3);
        let metrics = vec![SpdOperator::scaled_identity(1, 1.0 / 0.3).unwrap()];
        let state = AfbState::new(BlockVector::scalar(1.0));
        let (next, record) = afb_step(&problem, &state, &metrics).unwrap();
        assert_abs_diff_eq!(next.x.block(0)[0], 0.7, epsilon = 1e-15);
        // For a zero prox term the witness collapses to the new gradient.
        assert_abs_diff_eq!(record.slope_norm.unwrap(), 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(record.step_norm.unwrap(), 0.3, epsilon = 1e-15);
    }

    #[test]
    fn cyclic_sweep_uses_partial_updates() {
        // h(x, y) = (x + y - 1)^2 / 2 from (0, 0) with lambda = 0.5: the
        // first block lands on 0.5 and the second sees it immediately.
        let problem = BlockProblem::new(
            vec![1, 1],
            Arc::new(|x: &BlockVector| {
                let t = x.block(0)[0] + x.block(1)[0] - 1.0;
                0.5 * t * t
            }),
            Arc::new(|_, x: &BlockVector| {
                DVector::from_element(1, x.block(0)[0] + x.block(1)[0] - 1.0)
            }),
            1.0,
            vec![ProxOracle::zero(), ProxOracle::zero()],
        )
        .unwrap();
        let metrics = vec![
            SpdOperator::scaled_identity(1, 2.0).unwrap(),
            SpdOperator::scaled_identity(1, 2.0).unwrap(),
        ];
        let state = AfbState::new(BlockVector::from_flat(&[1, 1], &[0.0, 0.0]).unwrap());
        let (next, _) = afb_step(&problem, &state, &metrics).unwrap();
        assert_abs_diff_eq!(next.x.block(0)[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(next.x.block(1)[0], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn fixed_point_is_stationary() {
        // f = |x| + (x - 0.5)^2/2 is minimized at 0 (the slope bound 0.5 < 1
        // keeps the soft threshold pinned).
        let problem = BlockProblem::new(
            vec![1],
            Arc::new(|x: &BlockVector| {
                let t = x.block(0)[0] - 0.5;
                0.5 * t * t
            }),
            Arc::new(|_, x: &BlockVector| DVector::from_element(1, x.block(0)[0] - 0.5)),
            1.0,
            vec![ProxOracle::l1(1.0).unwrap()],
        )
        .unwrap();
        let metrics = vec![SpdOperator::scaled_identity(1, 2.0).unwrap()];
        let state = AfbState::new(BlockVector::scalar(0.0));
        let (next, record) = afb_step(&problem, &state, &metrics).unwrap();
        assert_eq!(next.x.block(0)[0], 0.0);
        assert_eq!(record.step_norm, Some(0.0));
    }

    #[test]
    fn witness_matches_gradient_for_smooth_problems() {
        // With g = 0 the prox optimality cancels the metric terms exactly,
        // so the witness equals the gradient at the new point for ANY metric.
        let q = nalgebra::DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let qg = q.clone();
        let problem = BlockProblem::new(
            vec![2],
            Arc::new(move |x: &BlockVector| (0.5 * x.block(0).transpose() * &q * x.block(0))[0]),
            Arc::new(move |_, x: &BlockVector| &qg * x.block(0)),
            4.0,
            vec![ProxOracle::zero()],
        )
        .unwrap();
        let a = SpdOperator::from_matrix(nalgebra::DMatrix::from_row_slice(
            2,
            2,
            &[6.0, 0.5, 0.5, 5.0],
        ))
        .unwrap();
        let state = AfbState::new(BlockVector::from_flat(&[2], &[1.0, -2.0]).unwrap());
        let (next, record) = afb_step(&problem, &state, &[a.clone()]).unwrap();
        let grad_new = problem.h_grad_block(0, &next.x);
        assert_abs_diff_eq!(record.slope_norm.unwrap(), grad_new.norm(), epsilon = 1e-12);
        let (w, norm) = subgradient_witness(&problem, &state, &next, &[a]).unwrap();
        assert_abs_diff_eq!(norm, grad_new.norm(), epsilon = 1e-12);
        assert_abs_diff_eq!(w.block(0)[0], grad_new[0], epsilon = 1e-12);
    }

    #[test]
    fn schedule_derivation_matches_hand_values() {
        let (a, b, eps) =
            derive_schedule_from_appendix(&[10.0; 4], &[10.0; 4], 0.0, 1.0, &[], 1.0, 1).unwrap();
        for k in 0..4 {
            assert_abs_diff_eq!(a[k], 4.5, epsilon = 1e-15);
            assert_abs_diff_eq!(b[k], 1.0 / 11.0, epsilon = 1e-15);
            assert_eq!(eps[k], 0.0);
        }
        // The sigma term vanishes at sigma = 0 regardless of p.
        let (a2, _, _) =
            derive_schedule_from_appendix(&[10.0; 2], &[10.0; 2], 0.0, 1.0, &[], 1.0, 2).unwrap();
        assert_abs_diff_eq!(a2[0], 4.5, epsilon = 1e-15);
    }

    #[test]
    fn schedule_derivation_rejects_tight_bound() {
        let err = derive_schedule_from_appendix(&[1.0; 3], &[1.0; 3], 0.0, 1.0, &[], 1.0, 1);
        match err {
            Err(Error::ScheduleInfeasible { k, .. }) => assert_eq!(k, 0),
            other => panic!("expected infeasibility at k = 0, got {other:?}"),
        }
    }

    #[test]
    fn run_converges_geometrically_and_attaches_schedules() {
        let (problem, schedule) = quadratic_1d(0.3);
        let out = run(
            &problem,
            &BlockVector::scalar(1.0),
            &schedule,
            &ErrorModel::None,
            &StoppingRule::default(),
            0,
        )
        .unwrap();
        let t = &out.trace;
        assert_eq!(t.status, TerminalStatus::Converged);
        // x_k = 0.7^k exactly.
        assert_abs_diff_eq!(t.iterates[5].block(0)[0], 0.7f64.powi(5), epsilon = 1e-15);
        assert!(t.records[0].a_k.is_some());
        assert!(t.records[1].b_k.is_some());
        assert!(t.records.last().unwrap().b_k.is_some());
        assert!(t.companions.is_none());
        assert!(crate::monitor::check_sufficient_decrease(t).unwrap().pass);
        assert!(crate::monitor::check_relative_error(t).unwrap().pass);
    }

    #[test]
    fn zero_iteration_budget_leaves_initial_record() {
        let (problem, schedule) = quadratic_1d(0.3);
        let stop = StoppingRule { max_iters: 0, ..StoppingRule::default() };
        let out =
            run(&problem, &BlockVector::scalar(1.0), &schedule, &ErrorModel::None, &stop, 0)
                .unwrap();
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.trace.status, TerminalStatus::MaxIter);
        assert!(out.trace.records[0].a_k.is_none());
    }

    #[test]
    fn divergent_run_keeps_partial_trace() {
        // Concave h: the "descent" step runs uphill and |x| explodes until
        // the objective leaves the floating-point range.
        let problem = BlockProblem::new(
            vec![1],
            Arc::new(|x: &BlockVector| -x.block(0)[0] * x.block(0)[0]),
            Arc::new(|_, x: &BlockVector| -2.0 * x.block(0).clone()),
            2.0,
            vec![ProxOracle::zero()],
        )
        .unwrap();
        let schedule = MetricSchedule::scaled_identities(&[1], &[3.0]).unwrap();
        let stop = StoppingRule { max_iters: 2000, ..StoppingRule::default() };
        let out =
            run(&problem, &BlockVector::scalar(1.0), &schedule, &ErrorModel::None, &stop, 0)
                .unwrap();
        assert_eq!(out.trace.status, TerminalStatus::Diverged);
        assert!(out.trace.len() > 1);
        assert!(out.trace.final_f().unwrap().is_finite());
    }

    #[test]
    fn scheduled_errors_stay_inside_bounds() {
        // Strongly convex two-block problem; inject errors and re-audit.
        let problem = BlockProblem::new(
            vec![2, 2],
            Arc::new(|x: &BlockVector| {
                let a = x.block(0);
                let b = x.block(1);
                0.5 * ((a[0] + b[0] - 1.0).powi(2) + (a[1] - b[1] + 2.0).powi(2))
            }),
            Arc::new(|i, x: &BlockVector| {
                let t0 = x.block(0)[0] + x.block(1)[0] - 1.0;
                let t1 = x.block(0)[1] - x.block(1)[1] + 2.0;
                match i {
                    0 => DVector::from_column_slice(&[t0, t1]),
                    _ => DVector::from_column_slice(&[t0, -t1]),
                }
            }),
            1.0,
            vec![ProxOracle::zero(), ProxOracle::zero()],
        )
        .unwrap();
        let schedule = MetricSchedule::scaled_identities(&[2, 2], &[4.0, 4.0]).unwrap();
        let slack = SlackSchedule::Geometric { base: 1e-3, ratio: 0.5 };
        let errors = ErrorModel::scheduled(0.1, 0.9, slack.clone(), 4.0, 1.0).unwrap();
        let stop = StoppingRule { max_iters: 400, ..StoppingRule::default() };
        let x0 = BlockVector::from_flat(&[2, 2], &[3.0, -1.0, 0.5, 2.0]).unwrap();
        let out = run(&problem, &x0, &schedule, &errors, &stop, 7).unwrap();

        assert_eq!(out.trace.status, TerminalStatus::Converged);
        assert!(out.trace.companions.is_some());
        let report = he_check(&out.he_triples, 0.1, 0.9, &slack).unwrap();
        assert!(report.pass, "violations: {:?}", report.violations);
        assert!(report.checked > 0);
        // Some forward error must actually have been injected.
        assert!(out.he_triples.iter().any(|t| t.r.norm() > 0.0));
        // Square-summability proxy: the error tail vanishes.
        let tail: f64 = out
            .he_triples
            .iter()
            .rev()
            .take(20)
            .map(|t| t.r.norm_squared() + t.s_next.norm_squared())
            .sum();
        assert!(tail < 1e-12, "tail {tail}");
        // X and Y converge to the same point.
        let xs = out.trace.iterates.last().unwrap();
        let ys = out.trace.companions.as_ref().unwrap().last().unwrap();
        assert!(xs.distance(ys) < 1e-8);
    }

    #[test]
    fn sigma_zero_schedule_matches_error_free_run() {
        let (problem, schedule) = quadratic_1d(0.3);
        let x0 = BlockVector::scalar(1.0);
        let stop = StoppingRule { max_iters: 50, ..StoppingRule::default() };
        let plain =
            run(&problem, &x0, &schedule, &ErrorModel::None, &stop, 3).unwrap();
        let errors = ErrorModel::scheduled(0.0, 1.0, SlackSchedule::Zero, 1.0 / 0.3, 1.0).unwrap();
        let with_zero = run(&problem, &x0, &schedule, &errors, &stop, 3).unwrap();
        for (a, b) in plain.trace.iterates.iter().zip(&with_zero.trace.iterates) {
            assert_eq!(a.block(0)[0], b.block(0)[0]);
        }
    }

    #[test]
    fn scripted_errors_reproduce_the_counting_counterexample() {
        // Counting objective with no smooth part: the prox sends everything
        // inside the dead zone to 0, a scripted backward error 1/k keeps the
        // visible iterate away, so y says "converged" while x never does.
        let problem = BlockProblem::new(
            vec![1],
            Arc::new(|_: &BlockVector| 0.0),
            Arc::new(|_, _: &BlockVector| DVector::zeros(1)),
            0.0,
            vec![ProxOracle::counting(1.0).unwrap()],
        )
        .unwrap();
        let schedule = MetricSchedule::scaled_identities(&[1], &[2.0]).unwrap();
        let errors = ErrorModel::Scripted {
            r_of: Arc::new(|_, _, dim| DVector::zeros(dim)),
            s_of: Arc::new(|k, _, dim| {
                if k >= 1 {
                    DVector::from_element(dim, 1.0 / k as f64)
                } else {
                    DVector::zeros(dim)
                }
            }),
        };
        let stop = StoppingRule { max_iters: 30, ..StoppingRule::default() };
        let out = run(&problem, &BlockVector::scalar(0.0), &schedule, &errors, &stop, 0).unwrap();
        let ys = out.trace.companions.as_ref().unwrap();
        for k in 0..=30 {
            assert_eq!(problem.f_eval(&ys[k]), 0.0, "y at {k}");
            if k >= 1 {
                assert_eq!(problem.f_eval(&out.trace.iterates[k]), 1.0, "x at {k}");
            }
        }
    }

    #[test]
    fn block_relabeling_permutes_separable_traces() {
        // Separable coupling: the sweep order cannot mix blocks, so swapping
        // labels permutes every iterate exactly.
        let make = |swap: bool| {
            let (c0, c1) = if swap { (2.0, -1.0) } else { (-1.0, 2.0) };
            let (w0, w1) = if swap { (0.2, 0.1) } else { (0.1, 0.2) };
            let problem = BlockProblem::new(
                vec![1, 1],
                Arc::new(move |x: &BlockVector| {
                    0.5 * (x.block(0)[0] - c0).powi(2) + 0.5 * (x.block(1)[0] - c1).powi(2)
                }),
                Arc::new(move |i, x: &BlockVector| {
                    let c = if i == 0 { c0 } else { c1 };
                    DVector::from_element(1, x.block(i)[0] - c)
                }),
                1.0,
                vec![ProxOracle::l1(w0).unwrap(), ProxOracle::l1(w1).unwrap()],
            )
            .unwrap();
            let schedule = MetricSchedule::scaled_identities(&[1, 1], &[2.0, 4.0]).unwrap();
            let x0 = if swap {
                BlockVector::from_flat(&[1, 1], &[5.0, 3.0]).unwrap()
            } else {
                BlockVector::from_flat(&[1, 1], &[3.0, 5.0]).unwrap()
            };
            let schedule = if swap {
                MetricSchedule::scaled_identities(&[1, 1], &[4.0, 2.0]).unwrap()
            } else {
                schedule
            };
            let stop = StoppingRule { max_iters: 25, ..StoppingRule::default() };
            run(&problem, &x0, &schedule, &ErrorModel::None, &stop, 0).unwrap()
        };
        let fwd = make(false);
        let rev = make(true);
        assert_eq!(fwd.trace.len(), rev.trace.len());
        for (a, b) in fwd.trace.iterates.iter().zip(&rev.trace.iterates) {
            assert_eq!(a.block(0)[0], b.block(1)[0]);
            assert_eq!(a.block(1)[0], b.block(0)[0]);
        }
        for (ra, rb) in fwd.trace.records.iter().zip(&rev.trace.records) {
            // f accumulates h + g_0 + g_1 in label order; reassociation can
            // move the last ulp, so the scalar comparison allows it.
            assert_abs_diff_eq!(ra.f_val, rb.f_val, epsilon = 1e-14);
            assert_eq!(ra.step_norm, rb.step_norm);
        }
    }

    #[test]
    fn monotone_descent_on_error_free_runs() {
        let (problem, schedule) = quadratic_1d(0.9);
        let out = run(
            &problem,
            &BlockVector::scalar(-4.0),
            &schedule,
            &ErrorModel::None,
            &StoppingRule::default(),
            0,
        )
        .unwrap();
        let f = out.trace.f_values();
        assert!(f.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn he3_violation_is_flagged_on_hand_built_triples() {
        let a = SpdOperator::scaled_identity(1, 2.0).unwrap();
        let dy = DVector::from_element(1, 1.0);
        // r aligned WITH the step: inner product 2.0 far above the allowance.
        let t = HeTriple {
            k: 0,
            i: 0,
            r: DVector::from_element(1, 1.0),
            s_next: DVector::zeros(1),
            dy,
            metric: a,
        };
        let report = he_check(&[t], 4.0, 0.9, &SlackSchedule::Zero).unwrap();
        assert!(!report.pass);
        assert!(report.violations.iter().any(|v| v.detail.contains("inner product")));
    }

    #[test]
    fn lipschitz_probe_agrees_with_declared_constant() {
        let (problem, _) = quadratic_1d(0.5);
        let worst =
            probe_block_lipschitz(&problem, &BlockVector::scalar(0.3), 1.0, 40, 11).unwrap();
        assert!(worst <= 1.0 * (1.0 + 1e-6), "worst {worst}");
        assert!(worst > 0.99);
    }
}
