//! Damped-Newton metrics for minimizing a smooth `h` over a closed set `C`:
//! regularized curvature matrices become the variable metric of a
//! single-block run of the splitting solver, so every projected Newton step
//! is `x^{k+1} in proj_C^{A_k}(x^k - lambda_k A_k^{-1} grad h(x^k))`.
//!
//! The metric is `A_k = proj_PSD(H_k) + epsilon I` from a curvature sample
//! `H_k`, handed to the solver scaled by `1/lambda_k`; since scaling a metric
//! does not move metric projections, the two formulations agree. Step sizes
//! must satisfy `0 < lambda_k <= lambda_bar < epsilon / L`, stay
//! non-summable, and keep consecutive ratios bounded.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::afb::{self, BlockProblem, ErrorModel, MetricSchedule, StoppingRule};
use crate::block::BlockVector;
use crate::error::{Error, Result};
use crate::metric::{project_psd, prox_in_metric, ProxOracle, SpdOperator};
use crate::seq::{classify_summability, SeriesClass, SummabilityFinding};
use crate::trace::IterateTrace;

/// Default metric regularization; raise it on strongly convex problems to
/// loosen the step-size ceiling `epsilon / L`.
pub const EPSILON_DEFAULT: f64 = 1e-3;

type EvalFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type HessFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Smooth objective with gradient, optional exact curvature, a declared
/// gradient Lipschitz constant, and the constraint set as a prox oracle
/// (use [`ProxOracle::zero`] for unconstrained problems).
#[derive(Clone)]
pub struct LmProblem {
    dim: usize,
    h_eval: EvalFn,
    h_grad: GradFn,
    h_hess: Option<HessFn>,
    lipschitz: f64,
    constraint: ProxOracle,
}

impl LmProblem {
    pub fn new(
        dim: usize,
        h_eval: EvalFn,
        h_grad: GradFn,
        h_hess: Option<HessFn>,
        lipschitz: f64,
        constraint: ProxOracle,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("problem dimension must be positive".into()));
        }
        if !lipschitz.is_finite() || lipschitz < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "Lipschitz constant {lipschitz} must be finite and nonnegative"
            )));
        }
        Ok(Self { dim, h_eval, h_grad, h_hess, lipschitz, constraint })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn constraint(&self) -> &ProxOracle {
        &self.constraint
    }

    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.h_grad)(x)
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        (self.h_eval)(x)
    }
}

/// Where curvature matrices come from.
#[derive(Clone)]
pub enum HessianMode {
    /// The problem's exact Hessian callable.
    Analytic,
    /// Symmetrized central differences of the gradient; `None` uses
    /// `1e-5 * (1 + ||x||)`.
    FiniteDifference { step: Option<f64> },
    /// A fixed caller-chosen element (for nonsmooth curvature, any element
    /// of the generalized Jacobian is admissible; the caller picks).
    UserElement(DMatrix<f64>),
}

impl std::fmt::Debug for HessianMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HessianMode::Analytic => write!(f, "Analytic"),
            HessianMode::FiniteDifference { step } => {
                write!(f, "FiniteDifference {{ step: {step:?} }}")
            }
            HessianMode::UserElement(m) => write!(f, "UserElement({}x{})", m.nrows(), m.ncols()),
        }
    }
}

/// One symmetric curvature matrix at `x`. Every mode symmetrizes its output;
/// at points where the second derivative jumps, finite differences land in
/// the convex hull of the one-sided limits without a membership guarantee.
pub fn generalized_hessian_sample(
    problem: &LmProblem,
    x: &DVector<f64>,
    mode: &HessianMode,
) -> Result<DMatrix<f64>> {
    if x.len() != problem.dim {
        return Err(Error::Shape(format!(
            "point dim {} does not match problem dim {}",
            x.len(),
            problem.dim
        )));
    }
    let raw = match mode {
        HessianMode::Analytic => match &problem.h_hess {
            Some(h) => h(x),
            None => {
                return Err(Error::Prerequisite(
                    "analytic curvature requested but the problem declares none".into(),
                ))
            }
        },
        HessianMode::FiniteDifference { step } => {
            let h = step.unwrap_or(1e-5 * (1.0 + x.norm()));
            if !(h > 0.0) || !h.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "finite-difference step {h} must be positive and finite"
                )));
            }
            for j in 0..x.len() {
                if x[j] + h == x[j] || x[j] - h == x[j] {
                    return Err(Error::InvalidParameter(format!(
                        "finite-difference step {h:.3e} vanishes against coordinate {j} = {:.3e}",
                        x[j]
                    )));
                }
            }
            let mut m = DMatrix::zeros(x.len(), x.len());
            for j in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let col = (problem.grad(&xp) - problem.grad(&xm)) / (2.0 * h);
                m.set_column(j, &col);
            }
            m
        }
        HessianMode::UserElement(m) => {
            if m.nrows() != problem.dim || m.ncols() != problem.dim {
                return Err(Error::Shape(format!(
                    "user curvature is {}x{} but the problem dim is {}",
                    m.nrows(),
                    m.ncols(),
                    problem.dim
                )));
            }
            m.clone()
        }
    };
    if raw.nrows() != problem.dim || raw.ncols() != problem.dim {
        return Err(Error::Shape("curvature callable returned the wrong shape".into()));
    }
    Ok((&raw + raw.transpose()) * 0.5)
}

/// Regularized metric `proj_PSD(H) + epsilon I`; its lower spectral bound is
/// at least `epsilon`.
pub fn lm_metric(h_mat: &DMatrix<f64>, epsilon: f64) -> Result<SpdOperator> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "regularization {epsilon} must be positive and finite"
        )));
    }
    let mut a = project_psd(h_mat)?;
    for i in 0..a.nrows() {
        a[(i, i)] += epsilon;
    }
    let op = SpdOperator::from_matrix(a)?;
    debug_assert!(op.alpha() >= epsilon * (1.0 - 1e-10));
    Ok(op)
}

/// `proj_C^A(x - lambda A^{-1} grad)`: damped Newton step followed by metric
/// projection onto the constraint set.
pub fn projected_newton_step(
    x: &DVector<f64>,
    grad: &DVector<f64>,
    a: &SpdOperator,
    lambda: f64,
    constraint: &ProxOracle,
) -> Result<DVector<f64>> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!("step size {lambda} must be positive")));
    }
    if x.len() != grad.len() || a.dim() != x.len() {
        return Err(Error::Shape("point, gradient, and metric dims must agree".into()));
    }
    let target = x - a.solve(grad) * lambda;
    prox_in_metric(constraint, a, &target)
}

/// Step-size sequence; beyond a table's end the final entry repeats (so
/// every schedule has a computable supremum and stays non-summable when its
/// last entry is positive).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaSchedule {
    Constant { value: f64 },
    Table { values: Vec<f64> },
}

impl LambdaSchedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            LambdaSchedule::Constant { value } => {
                if !(*value > 0.0) || !value.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "step size {value} must be positive and finite"
                    )));
                }
            }
            LambdaSchedule::Table { values } => {
                if values.is_empty() {
                    return Err(Error::InvalidParameter("step-size table is empty".into()));
                }
                if values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                    return Err(Error::InvalidParameter(
                        "step-size table entries must be positive and finite".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn at(&self, k: usize) -> f64 {
        match self {
            LambdaSchedule::Constant { value } => *value,
            LambdaSchedule::Table { values } => {
                values.get(k).copied().unwrap_or_else(|| *values.last().unwrap())
            }
        }
    }

    /// Supremum over all steps.
    pub fn lambda_bar(&self) -> f64 {
        match self {
            LambdaSchedule::Constant { value } => *value,
            LambdaSchedule::Table { values } => {
                values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            }
        }
    }

    pub fn materialize(&self, n: usize) -> Vec<f64> {
        (0..n).map(|k| self.at(k)).collect()
    }
}

/// Everything the damped-Newton runner needs besides the problem.
#[derive(Clone, Debug)]
pub struct LmConfig {
    pub epsilon: f64,
    pub lambda: LambdaSchedule,
    pub hessian_mode: HessianMode,
}

impl LmConfig {
    /// Enforce `0 < lambda_k <= lambda_bar < epsilon / L`.
    pub fn validate(&self, lipschitz: f64) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "regularization {} must be positive and finite",
                self.epsilon
            )));
        }
        self.lambda.validate()?;
        if lipschitz > 0.0 && self.lambda.lambda_bar() >= self.epsilon / lipschitz {
            return Err(Error::ScheduleInfeasible {
                k: 0,
                reason: format!(
                    "step ceiling {:.6e} must stay strictly below epsilon/L = {:.6e}",
                    self.lambda.lambda_bar(),
                    self.epsilon / lipschitz
                ),
            });
        }
        Ok(())
    }
}

/// Findings for a step-size sequence against the standing hypotheses.
#[derive(Debug, Clone, Serialize)]
pub struct LmScheduleReport {
    pub lambda_bar: f64,
    /// `epsilon / L`; infinite when `L = 0`.
    pub bound_limit: f64,
    pub bound_pass: bool,
    /// The step sequence must not be summable.
    pub divergence: SummabilityFinding,
    pub divergence_pass: bool,
    pub sup_step_ratio: f64,
    pub ratio_threshold: Option<f64>,
    pub ratio_pass: bool,
    pub horizon: usize,
    pub pass: bool,
}

/// Check a realized step-size prefix: ceiling strictly below `epsilon / L`,
/// non-summable by the decay-exponent heuristic, and bounded consecutive
/// ratios (capped when a threshold is supplied).
pub fn lm_schedule_check(
    lambda: &[f64],
    epsilon: f64,
    lipschitz: f64,
    ratio_threshold: Option<f64>,
) -> Result<LmScheduleReport> {
    if lambda.is_empty() {
        return Err(Error::InvalidParameter("empty step-size sequence".into()));
    }
    if lambda.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidParameter("step sizes must be positive and finite".into()));
    }
    if !(epsilon > 0.0) || !(lipschitz >= 0.0) {
        return Err(Error::InvalidParameter(
            "need positive regularization and nonnegative Lipschitz constant".into(),
        ));
    }
    let lambda_bar = lambda.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let bound_limit = if lipschitz > 0.0 { epsilon / lipschitz } else { f64::INFINITY };
    let bound_pass = lambda_bar < bound_limit;

    let divergence = classify_summability(lambda)?;
    let divergence_pass = divergence.class == SeriesClass::Divergent;

    let mut sup_step_ratio: f64 = if lambda.len() == 1 { 1.0 } else { 0.0 };
    for w in lambda.windows(2) {
        sup_step_ratio = sup_step_ratio.max(w[1] / w[0]);
    }
    let ratio_pass = ratio_threshold.map_or(true, |t| sup_step_ratio <= t);

    Ok(LmScheduleReport {
        lambda_bar,
        bound_limit,
        bound_pass,
        divergence,
        divergence_pass,
        sup_step_ratio,
        ratio_threshold,
        ratio_pass,
        horizon: lambda.len(),
        pass: bound_pass && divergence_pass && ratio_pass,
    })
}

/// Drive the damped-Newton iteration as a one-block splitting run: metric
/// `(1/lambda_k) (proj_PSD(H_k) + epsilon I)` with `H_k` sampled at the
/// current iterate, prox term the constraint indicator. Refuses infeasible
/// step schedules before iterating.
pub fn run_lm(
    problem: &LmProblem,
    config: &LmConfig,
    x0: &DVector<f64>,
    stop: &StoppingRule,
) -> Result<IterateTrace> {
    config.validate(problem.lipschitz)?;
    if x0.len() != problem.dim {
        return Err(Error::Shape(format!(
            "initial point dim {} does not match problem dim {}",
            x0.len(),
            problem.dim
        )));
    }

    let p = problem.clone();
    let block_problem = BlockProblem::new(
        vec![problem.dim],
        Arc::new({
            let p = problem.clone();
            move |x: &BlockVector| p.eval(x.block(0))
        }),
        Arc::new({
            let p = problem.clone();
            move |_, x: &BlockVector| p.grad(x.block(0))
        }),
        problem.lipschitz,
        vec![problem.constraint.clone()],
    )?;

    let alpha_lower = config.epsilon / config.lambda.lambda_bar();
    let lambda = config.lambda.clone();
    let epsilon = config.epsilon;
    let mode = config.hessian_mode.clone();
    let schedule = MetricSchedule::new(
        Arc::new(move |_, k, state: &afb::AfbState| {
            let h = generalized_hessian_sample(&p, state.x.block(0), &mode)?;
            let a = lm_metric(&h, epsilon)?;
            SpdOperator::from_matrix(a.matrix() / lambda.at(k))
        }),
        alpha_lower,
    )?;

    let x0_block = BlockVector::single(x0.clone())?;
    let out = afb::run(&block_problem, &x0_block, &schedule, &ErrorModel::None, stop, 0)?;
    Ok(out.trace)
}

/// One unit step with the RAW curvature matrix as the metric — no
/// regularization, no damping. Sits outside the certified step-size regime
/// (`lambda = 1` usually violates the ceiling), so results are diagnostic.
/// Fails when the sampled curvature is not positive definite.
#[derive(Debug, Clone)]
pub struct NewtonDiagnostic {
    pub x_next: DVector<f64>,
    pub step_norm: f64,
    pub grad_norm_after: f64,
    /// Always false: unit step with the raw Hessian is not covered by the
    /// step-size analysis.
    pub certified: bool,
}

pub fn pure_newton_diagnostic(
    problem: &LmProblem,
    x0: &DVector<f64>,
    mode: &HessianMode,
) -> Result<NewtonDiagnostic> {
    let h = generalized_hessian_sample(problem, x0, mode)?;
    let a = SpdOperator::from_matrix(h)?;
    let grad = problem.grad(x0);
    let x_next = projected_newton_step(x0, &grad, &a, 1.0, &problem.constraint)?;
    let step_norm = (&x_next - x0).norm();
    let grad_norm_after = problem.grad(&x_next).norm();
    Ok(NewtonDiagnostic { x_next, step_norm, grad_norm_after, certified: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn quadratic_problem() -> LmProblem {
        // h = x'Qx/2 - b'x with Q = diag(2, 8), b = (2, 8), over x1 + x2 = 1.
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 8.0]);
        let b = DVector::from_column_slice(&[2.0, 8.0]);
        let (qe, qg, qh) = (q.clone(), q.clone(), q);
        let be = b.clone();
        let constraint =
            ProxOracle::affine(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), DVector::from_element(1, 1.0))
                .unwrap();
        LmProblem::new(
            2,
            Arc::new(move |x| (0.5 * x.transpose() * &qe * x)[0] - be.dot(x)),
            Arc::new(move |x| &qg * x - DVector::from_column_slice(&[2.0, 8.0])),
            Some(Arc::new(move |_| qh.clone())),
            8.0,
            constraint,
        )
        .unwrap()
    }

    #[test]
    fn metric_regularization_examples() {
        let d = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, -1.0]);
        let a = lm_metric(&d, 0.1).unwrap();
        let m = a.matrix();
        assert_abs_diff_eq!(m[(0, 0)], 2.1, epsilon = 1e-12);
        assert_abs_diff_eq!(m[(1, 1)], 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(m[(0, 1)], 0.0, epsilon = 1e-12);

        let psd = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let a = lm_metric(&psd, 0.5).unwrap();
        assert_abs_diff_eq!(a.matrix()[(0, 0)], 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(a.matrix()[(0, 1)], 1.0, epsilon = 1e-12);

        // Indefinite with eigenvalues +-1: PSD part is the rank-one half.
        let flip = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let a = lm_metric(&flip, 0.1).unwrap();
        assert_abs_diff_eq!(a.matrix()[(0, 0)], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(a.matrix()[(0, 1)], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(a.matrix()[(1, 1)], 0.6, epsilon = 1e-12);
        assert!(a.alpha() >= 0.1 - 1e-12);
    }

    #[test]
    fn curvature_sampling_modes_agree() {
        let p = quadratic_problem();
        let x = DVector::from_column_slice(&[0.3, -0.7]);
        let analytic = generalized_hessian_sample(&p, &x, &HessianMode::Analytic).unwrap();
        let fd =
            generalized_hessian_sample(&p, &x, &HessianMode::FiniteDifference { step: None })
                .unwrap();
        assert!((&analytic - &fd).norm() < 1e-6, "gap {}", (&analytic - &fd).norm());
        let user = generalized_hessian_sample(
            &p,
            &x,
            &HessianMode::UserElement(DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 0.0, 0.0])),
        )
        .unwrap();
        // User elements are symmetrized.
        assert_abs_diff_eq!(user[(0, 1)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(user[(1, 0)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn finite_differences_at_a_curvature_kink_stay_in_the_hull() {
        // h(x) = x^2/2 + |x| x has one-sided second derivatives 3 and -1 at
        // zero; the symmetric difference of the gradient x + 2|x| must land
        // between them.
        let p = LmProblem::new(
            1,
            Arc::new(|x: &DVector<f64>| 0.5 * x[0] * x[0] + x[0].abs() * x[0]),
            Arc::new(|x: &DVector<f64>| DVector::from_element(1, x[0] + 2.0 * x[0].abs())),
            None,
            3.0,
            ProxOracle::zero(),
        )
        .unwrap();
        let h = generalized_hessian_sample(
            &p,
            &DVector::zeros(1),
            &HessianMode::FiniteDifference { step: Some(1e-6) },
        )
        .unwrap();
        assert!(h[(0, 0)] >= -1.0 - 1e-9 && h[(0, 0)] <= 3.0 + 1e-9, "got {}", h[(0, 0)]);
    }

    #[test]
    fn finite_difference_step_underflow_is_refused() {
        let p = quadratic_problem();
        let x = DVector::from_column_slice(&[1.0, 1.0]);
        let err =
            generalized_hessian_sample(&p, &x, &HessianMode::FiniteDifference { step: Some(1e-20) });
        assert!(matches!(err, Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn analytic_mode_needs_a_curvature_callable() {
        let p = LmProblem::new(
            1,
            Arc::new(|x: &DVector<f64>| x[0]),
            Arc::new(|_: &DVector<f64>| DVector::from_element(1, 1.0)),
            None,
            0.0,
            ProxOracle::zero(),
        )
        .unwrap();
        assert!(matches!(
            generalized_hessian_sample(&p, &DVector::zeros(1), &HessianMode::Analytic),
            Err(Error::Prerequisite(_))
        ));
    }

    #[test]
    fn single_newton_step_solves_constrained_quadratic() {
        let p = quadratic_problem();
        let x0 = DVector::zeros(2);
        let d = pure_newton_diagnostic(&p, &x0, &HessianMode::Analytic).unwrap();
        // Unconstrained target (1,1); metric projection onto the simplex face
        // weights coordinates by Q, landing on the true constrained minimizer.
        assert_abs_diff_eq!(d.x_next[0], 0.2, epsilon = 1e-10);
        assert_abs_diff_eq!(d.x_next[1], 0.8, epsilon = 1e-10);
        assert!(!d.certified);

        // Fixed point: stepping again stays put.
        let d2 = pure_newton_diagnostic(&p, &d.x_next, &HessianMode::Analytic).unwrap();
        assert!(d2.step_norm < 1e-12);
    }

    #[test]
    fn unconstrained_newton_is_the_plain_step() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 8.0]);
        let a = SpdOperator::from_matrix(q.clone()).unwrap();
        let x = DVector::from_column_slice(&[0.0, 0.0]);
        let grad = &q * &x - DVector::from_column_slice(&[2.0, 8.0]);
        let next = projected_newton_step(&x, &grad, &a, 1.0, &ProxOracle::zero()).unwrap();
        assert_abs_diff_eq!(next[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(next[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn schedule_checks_flag_the_right_hypotheses() {
        // Constant step strictly below the ceiling: all three flags pass.
        let lam = vec![0.9 * 0.5; 50];
        let r = lm_schedule_check(&lam, 0.5, 1.0, Some(10.0)).unwrap();
        assert!(r.pass, "{r:?}");

        // Summable steps: divergence flag fails.
        let lam: Vec<f64> = (0..200).map(|k| 1.0 / ((k + 1) as f64).powi(2)).collect();
        let r = lm_schedule_check(&lam, 10.0, 1.0, None).unwrap();
        assert!(!r.divergence_pass);
        assert!(r.divergence.fitted_exponent.unwrap() < -1.5);

        // Alternating growth/shrink: consecutive ratios blow past any cap.
        let lam: Vec<f64> = (0..20)
            .map(|k| if k % 2 == 0 { 2f64.powi(-(k as i32)) } else { 2f64.powi(k as i32) })
            .collect();
        let r = lm_schedule_check(&lam, f64::INFINITY, 0.0, Some(100.0)).unwrap();
        assert!(!r.ratio_pass);
        assert!(r.sup_step_ratio > 100.0);
    }

    #[test]
    fn damped_run_reaches_the_constrained_minimizer() {
        let p = quadratic_problem();
        let config = LmConfig {
            epsilon: 1.0,
            lambda: LambdaSchedule::Constant { value: 0.1 },
            hessian_mode: HessianMode::Analytic,
        };
        let stop = StoppingRule { max_iters: 5000, step_tol: 1e-12, slope_tol: 1e-11 };
        // The runner requires a feasible start (finite objective).
        let x0 = DVector::from_column_slice(&[0.5, 0.5]);
        let trace = run_lm(&p, &config, &x0, &stop).unwrap();
        assert_eq!(trace.status, crate::trace::TerminalStatus::Converged);
        let x = trace.iterates.last().unwrap().block(0);
        assert_abs_diff_eq!(x[0], 0.2, epsilon = 1e-8);
        assert_abs_diff_eq!(x[1], 0.8, epsilon = 1e-8);
        // The run must satisfy the monitored descent inequalities.
        assert!(crate::monitor::check_sufficient_decrease(&trace).unwrap().pass);
        assert!(crate::monitor::check_relative_error(&trace).unwrap().pass);
        // Realized metric floor: alpha_k = (alpha(P) + eps)/lambda >= eps/lambda.
        for r in &trace.records[1..] {
            assert!(r.alpha_k.unwrap() >= 1.0 / 0.1 - 1e-9);
        }
    }

    #[test]
    fn nonconvex_quartic_run_finds_a_critical_point() {
        // h = (x^2 - 1)^2 / 4 has critical set {-1, 0, 1}; from 0.5 the
        // iteration must slide into the basin at 1.
        let p = LmProblem::new(
            1,
            Arc::new(|x: &DVector<f64>| {
                let t = x[0] * x[0] - 1.0;
                0.25 * t * t
            }),
            Arc::new(|x: &DVector<f64>| DVector::from_element(1, x[0].powi(3) - x[0])),
            Some(Arc::new(|x: &DVector<f64>| {
                DMatrix::from_element(1, 1, 3.0 * x[0] * x[0] - 1.0)
            })),
            6.0, // |3x^2 - 1| on |x| <= 1.5
            ProxOracle::zero(),
        )
        .unwrap();
        let config = LmConfig {
            epsilon: 1.0,
            lambda: LambdaSchedule::Constant { value: 0.15 },
            hessian_mode: HessianMode::Analytic,
        };
        let stop = StoppingRule { max_iters: 10_000, ..StoppingRule::default() };
        let trace = run_lm(&p, &config, &DVector::from_element(1, 0.5), &stop).unwrap();
        assert_eq!(trace.status, crate::trace::TerminalStatus::Converged);
        let x = trace.iterates.last().unwrap().block(0)[0];
        assert_abs_diff_eq!(x, 1.0, epsilon = 1e-6);
        let f = trace.f_values();
        assert!(f.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn infeasible_step_schedule_is_refused_before_iterating() {
        let p = quadratic_problem();
        let config = LmConfig {
            epsilon: 1e-3,
            lambda: LambdaSchedule::Constant { value: 10.0 },
            hessian_mode: HessianMode::Analytic,
        };
        let err = run_lm(&p, &config, &DVector::zeros(2), &StoppingRule::default());
        assert!(matches!(err, Err(Error::ScheduleInfeasible { .. })));
    }
}
