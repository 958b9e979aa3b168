//! Symmetric positive definite metrics and the projections / proximal maps
//! used by the variable-metric solvers.
//!
//! An [`SpdOperator`] caches its extreme eigenvalues `alpha` (smallest) and
//! `beta` (largest = operator norm), which the solvers use both for step-size
//! bookkeeping and for schedule feasibility checks. Proximal maps are exact
//! closed forms where one exists (soft/hard thresholding, low-rank and sparse
//! truncation, affine and box projections) and fall back to an inner
//! proximal-gradient loop for general metrics.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::seq::{classify_summability, SeriesClass, SummabilityFinding};

/// Relative symmetry tolerance for operator construction.
const SYMMETRY_TOL: f64 = 1e-12;
/// Inner proximal-gradient loop: iteration cap and step-norm stop.
const INNER_MAX_ITERS: usize = 10_000;
const INNER_STEP_TOL: f64 = 1e-12;
/// Relative rank cutoff used when testing membership in a rank ball.
const RANK_EVAL_RTOL: f64 = 1e-8;

#[derive(Debug, Clone)]
enum OperatorShape {
    Dense {
        matrix: DMatrix<f64>,
        chol: Cholesky<f64, Dyn>,
    },
    ScaledIdentity {
        dim: usize,
        factor: f64,
    },
}

/// A symmetric positive definite operator with cached spectral bounds.
#[derive(Debug, Clone)]
pub struct SpdOperator {
    shape: OperatorShape,
    alpha: f64,
    beta: f64,
}

impl SpdOperator {
    /// Build from a dense matrix. The matrix must be square, symmetric within
    /// `1e-12 * (1 + ||A||)`, and positive definite.
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::Shape(format!(
                "operator must be square and nonempty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("operator has non-finite entries".into()));
        }
        let sym = (&m + m.transpose()) * 0.5;
        let eig = sym.clone().symmetric_eigen();
        let alpha = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        let beta = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let op_norm = alpha.abs().max(beta.abs());

        let mut asym: f64 = 0.0;
        for i in 0..m.nrows() {
            for j in (i + 1)..m.ncols() {
                asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
            }
        }
        if asym > SYMMETRY_TOL * (1.0 + op_norm) {
            return Err(Error::Shape(format!(
                "operator asymmetry {asym:.3e} exceeds tolerance"
            )));
        }
        if alpha <= 0.0 {
            return Err(Error::NotSpd(format!("smallest eigenvalue {alpha:.3e} <= 0")));
        }
        let chol = Cholesky::new(sym.clone())
            .ok_or_else(|| Error::NotSpd("Cholesky factorization failed".into()))?;
        Ok(Self { shape: OperatorShape::Dense { matrix: sym, chol }, alpha, beta })
    }

    /// The operator `factor * I`, with `factor > 0`.
    pub fn scaled_identity(dim: usize, factor: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("scaled identity needs dim >= 1".into()));
        }
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(Error::NotSpd(format!("scale factor {factor} must be positive")));
        }
        Ok(Self {
            shape: OperatorShape::ScaledIdentity { dim, factor },
            alpha: factor,
            beta: factor,
        })
    }

    pub fn dim(&self) -> usize {
        match &self.shape {
            OperatorShape::Dense { matrix, .. } => matrix.nrows(),
            OperatorShape::ScaledIdentity { dim, .. } => *dim,
        }
    }

    /// Smallest eigenvalue.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Largest eigenvalue; equals the operator norm.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn condition_number(&self) -> f64 {
        self.beta / self.alpha
    }

    /// `Some(c)` when the operator is exactly `c * I`.
    pub fn scaled_identity_factor(&self) -> Option<f64> {
        match &self.shape {
            OperatorShape::ScaledIdentity { factor, .. } => Some(*factor),
            OperatorShape::Dense { .. } => None,
        }
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(v.len(), self.dim());
        match &self.shape {
            OperatorShape::Dense { matrix, .. } => matrix * v,
            OperatorShape::ScaledIdentity { factor, .. } => v * *factor,
        }
    }

    /// Solve `A y = v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(v.len(), self.dim());
        match &self.shape {
            OperatorShape::Dense { chol, .. } => chol.solve(v),
            OperatorShape::ScaledIdentity { factor, .. } => v / *factor,
        }
    }

    /// Bilinear form `<x, A y>`.
    pub fn inner(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        x.dot(&self.apply(y))
    }

    pub fn norm_squared(&self, x: &DVector<f64>) -> f64 {
        self.inner(x, x).max(0.0)
    }

    /// Metric norm `||x||_A`.
    pub fn norm(&self, x: &DVector<f64>) -> f64 {
        self.norm_squared(x).sqrt()
    }

    /// Materialize as a dense matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        match &self.shape {
            OperatorShape::Dense { matrix, .. } => matrix.clone(),
            OperatorShape::ScaledIdentity { dim, factor } => {
                DMatrix::identity(*dim, *dim) * *factor
            }
        }
    }
}

/// Extreme eigenvalues `(smallest, largest)` of a symmetric matrix.
pub fn spectral_bounds(m: &DMatrix<f64>) -> Result<(f64, f64)> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::Shape(format!(
            "spectral_bounds needs a square nonempty matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite matrix entry".into()));
    }
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let mut asym: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if asym > SYMMETRY_TOL * (1.0 + scale) {
        return Err(Error::Shape(format!("matrix asymmetry {asym:.3e} exceeds tolerance")));
    }
    let eig = ((m + m.transpose()) * 0.5).symmetric_eigen();
    let lo = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((lo, hi))
}

/// Row-major flattening of a matrix; inverse of [`flat_to_mat_row_major`].
pub fn mat_to_flat_row_major(m: &DMatrix<f64>) -> DVector<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    DVector::from_vec(out)
}

pub fn flat_to_mat_row_major(v: &[f64], rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if v.len() != rows * cols {
        return Err(Error::Shape(format!(
            "flat length {} does not match {rows}x{cols}",
            v.len()
        )));
    }
    Ok(DMatrix::from_fn(rows, cols, |i, j| v[i * cols + j]))
}

/// SVD with singular values in descending order and a deterministic sign
/// convention: the first nonzero component of every left singular vector is
/// positive. Returns `(u, sigma, v_t)`.
pub fn svd_descending(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite matrix entry".into()));
    }
    let svd = m.clone().svd(true, true);
    let mut u = svd.u.ok_or_else(|| Error::IllConditioned("SVD did not produce U".into()))?;
    let mut v_t = svd.v_t.ok_or_else(|| Error::IllConditioned("SVD did not produce V^T".into()))?;
    let s = svd.singular_values;

    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));

    let mut u_sorted = DMatrix::zeros(u.nrows(), order.len());
    let mut vt_sorted = DMatrix::zeros(order.len(), v_t.ncols());
    let mut s_sorted = DVector::zeros(order.len());
    for (dst, &src) in order.iter().enumerate() {
        u_sorted.set_column(dst, &u.column(src));
        vt_sorted.set_row(dst, &v_t.row(src));
        s_sorted[dst] = s[src];
    }
    u = u_sorted;
    v_t = vt_sorted;
    let mut s = s_sorted;

    for j in 0..u.ncols() {
        let lead = (0..u.nrows()).find(|&i| u[(i, j)] != 0.0);
        if let Some(i) = lead {
            if u[(i, j)] < 0.0 {
                for r in 0..u.nrows() {
                    u[(r, j)] = -u[(r, j)];
                }
                for c in 0..v_t.ncols() {
                    v_t[(j, c)] = -v_t[(j, c)];
                }
            }
        }
    }
    // Guard against tiny negative values produced by the decomposition.
    for v in s.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok((u, s, v_t))
}

/// Best Frobenius-norm approximation of `m` with rank at most `r`.
pub fn project_rank(m: &DMatrix<f64>, r: usize) -> Result<DMatrix<f64>> {
    if r == 0 {
        return Ok(DMatrix::zeros(m.nrows(), m.ncols()));
    }
    if r >= m.nrows().min(m.ncols()) {
        return Ok(m.clone());
    }
    let (u, s, v_t) = svd_descending(m)?;
    let ur = u.columns(0, r).into_owned();
    let sr = DMatrix::from_diagonal(&s.rows(0, r).into_owned());
    let vtr = v_t.rows(0, r).into_owned();
    Ok(ur * sr * vtr)
}

/// Keep the `s` entries of largest magnitude and zero the rest. Magnitude
/// ties are broken toward the smallest flat index.
pub fn project_l0(v: &DVector<f64>, s: usize) -> Result<DVector<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter("non-finite vector entry".into()));
    }
    if s >= v.len() {
        return Ok(v.clone());
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| {
        v[b].abs()
            .partial_cmp(&v[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut out = DVector::zeros(v.len());
    for &i in idx.iter().take(s) {
        out[i] = v[i];
    }
    Ok(out)
}

/// Matrix form of [`project_l0`]; ties are broken by row-major flat index.
pub fn project_l0_matrix(m: &DMatrix<f64>, s: usize) -> Result<DMatrix<f64>> {
    let flat = mat_to_flat_row_major(m);
    let kept = project_l0(&flat, s)?;
    flat_to_mat_row_major(kept.as_slice(), m.nrows(), m.ncols())
}

/// Nearest (Frobenius) positive semidefinite matrix to a symmetric matrix:
/// eigenvalues are clamped at zero.
pub fn project_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    // Reuse the symmetry validation from spectral_bounds.
    spectral_bounds(m)?;
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = sym.symmetric_eigen();
    for v in eig.eigenvalues.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let rec = eig.recompose();
    Ok((&rec + rec.transpose()) * 0.5)
}

/// Projection of `x` onto `{ y : B y = c }` in the metric of `a`:
/// `y = x + A^{-1} B^T mu` where `(B A^{-1} B^T) mu = c - B x`.
pub fn project_affine_in_metric(
    b: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &SpdOperator,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    let (k, n) = (b.nrows(), b.ncols());
    if k == 0 || n == 0 || c.len() != k || x.len() != n || a.dim() != n {
        return Err(Error::Shape(format!(
            "affine projection shapes: B {k}x{n}, c {}, x {}, metric dim {}",
            c.len(),
            x.len(),
            a.dim()
        )));
    }
    if k > n {
        return Err(Error::RankDeficient(format!(
            "{k} constraints in dimension {n} cannot be independent"
        )));
    }
    let (_, sv, _) = svd_descending(b)?;
    let smax = sv[0];
    let smin = sv[sv.len() - 1];
    if !(smin > 1e-10 * smax) || smax == 0.0 {
        return Err(Error::RankDeficient(format!(
            "constraint matrix has singular values in [{smin:.3e}, {smax:.3e}]"
        )));
    }

    // Z = A^{-1} B^T, solved column by column.
    let mut z = DMatrix::zeros(n, k);
    for j in 0..k {
        let col = DVector::from_fn(n, |i, _| b[(j, i)]);
        z.set_column(j, &a.solve(&col));
    }
    let m = {
        let raw = b * &z;
        (&raw + raw.transpose()) * 0.5
    };
    let rhs = c - b * x;
    let chol = Cholesky::new(m)
        .ok_or_else(|| Error::IllConditioned("constraint normal matrix is singular".into()))?;
    let mu = chol.solve(&rhs);
    let y = x + z * mu;

    let residual = (b * &y - c).norm();
    if residual > 1e-10 * (1.0 + c.norm()) {
        return Err(Error::IllConditioned(format!(
            "affine projection residual {residual:.3e} above tolerance"
        )));
    }
    Ok(y)
}

type EvalFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
type ProxFn = Arc<dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync>;

/// The nonsmooth terms this crate knows closed-form proximal maps for, plus a
/// custom escape hatch supplying `g` and its Euclidean prox directly.
#[derive(Clone)]
pub enum ProxKind {
    /// `g = 0`.
    Zero,
    /// `g(x) = weight * ||x||_1`.
    L1 { weight: f64 },
    /// `g(x) = weight * #{i : x_i != 0}`.
    Counting { weight: f64 },
    /// Indicator of matrices (row-major flattened) with rank at most `rank`.
    RankIndicator { rows: usize, cols: usize, rank: usize },
    /// Indicator of vectors with at most `count` nonzero entries.
    L0BallIndicator { count: usize },
    /// Indicator of the affine set `{ x : B x = c }`.
    AffineIndicator { b: DMatrix<f64>, c: DVector<f64> },
    /// Indicator of the box `[lo, hi]`.
    BoxIndicator { lo: DVector<f64>, hi: DVector<f64> },
    /// User-supplied `g` with its Euclidean prox `prox(v, t) = prox_{t g}(v)`.
    Custom { eval: EvalFn, prox: ProxFn },
}

impl std::fmt::Debug for ProxKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProxKind::Zero => write!(f, "Zero"),
            ProxKind::L1 { weight } => write!(f, "L1 {{ weight: {weight} }}"),
            ProxKind::Counting { weight } => write!(f, "Counting {{ weight: {weight} }}"),
            ProxKind::RankIndicator { rows, cols, rank } => {
                write!(f, "RankIndicator {{ {rows}x{cols}, rank: {rank} }}")
            }
            ProxKind::L0BallIndicator { count } => {
                write!(f, "L0BallIndicator {{ count: {count} }}")
            }
            ProxKind::AffineIndicator { b, .. } => {
                write!(f, "AffineIndicator {{ {}x{} }}", b.nrows(), b.ncols())
            }
            ProxKind::BoxIndicator { lo, .. } => write!(f, "BoxIndicator {{ dim: {} }}", lo.len()),
            ProxKind::Custom { .. } => write!(f, "Custom"),
        }
    }
}

/// A nonsmooth term together with the means to evaluate it and take proximal
/// steps on it.
#[derive(Debug, Clone)]
pub struct ProxOracle {
    pub id: String,
    kind: ProxKind,
}

impl ProxOracle {
    pub fn new(id: impl Into<String>, kind: ProxKind) -> Result<Self> {
        match &kind {
            ProxKind::L1 { weight } | ProxKind::Counting { weight } => {
                if !(*weight >= 0.0) {
                    return Err(Error::InvalidParameter("prox weight must be >= 0".into()));
                }
            }
            ProxKind::RankIndicator { rows, cols, .. } => {
                if *rows == 0 || *cols == 0 {
                    return Err(Error::Shape("rank indicator needs positive dims".into()));
                }
            }
            ProxKind::BoxIndicator { lo, hi } => {
                if lo.len() != hi.len() || lo.iter().zip(hi.iter()).any(|(l, h)| l > h) {
                    return Err(Error::InvalidParameter("box bounds must satisfy lo <= hi".into()));
                }
            }
            ProxKind::AffineIndicator { b, c } => {
                if b.nrows() != c.len() || b.nrows() == 0 {
                    return Err(Error::Shape("affine indicator shapes".into()));
                }
            }
            _ => {}
        }
        Ok(Self { id: id.into(), kind })
    }

    pub fn zero() -> Self {
        Self { id: "zero".into(), kind: ProxKind::Zero }
    }

    pub fn l1(weight: f64) -> Result<Self> {
        Self::new("l1", ProxKind::L1 { weight })
    }

    pub fn counting(weight: f64) -> Result<Self> {
        Self::new("counting", ProxKind::Counting { weight })
    }

    pub fn rank_indicator(rows: usize, cols: usize, rank: usize) -> Result<Self> {
        Self::new("rank", ProxKind::RankIndicator { rows, cols, rank })
    }

    pub fn l0_ball(count: usize) -> Result<Self> {
        Self::new("l0-ball", ProxKind::L0BallIndicator { count })
    }

    pub fn affine(b: DMatrix<f64>, c: DVector<f64>) -> Result<Self> {
        Self::new("affine", ProxKind::AffineIndicator { b, c })
    }

    pub fn box_indicator(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        Self::new("box", ProxKind::BoxIndicator { lo, hi })
    }

    pub fn custom(id: impl Into<String>, eval: EvalFn, prox: ProxFn) -> Self {
        Self { id: id.into(), kind: ProxKind::Custom { eval, prox } }
    }

    pub fn kind(&self) -> &ProxKind {
        &self.kind
    }

    /// Evaluate `g(x)`; indicators return `+inf` outside their set (with a
    /// small numerical membership slack).
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        match &self.kind {
            ProxKind::Zero => 0.0,
            ProxKind::L1 { weight } => weight * x.iter().map(|v| v.abs()).sum::<f64>(),
            ProxKind::Counting { weight } => {
                weight * x.iter().filter(|v| **v != 0.0).count() as f64
            }
            ProxKind::RankIndicator { rows, cols, rank } => {
                let m = match flat_to_mat_row_major(x.as_slice(), *rows, *cols) {
                    Ok(m) => m,
                    Err(_) => return f64::INFINITY,
                };
                match svd_descending(&m) {
                    Ok((_, s, _)) => {
                        let smax = s[0];
                        let cut = RANK_EVAL_RTOL * smax + 1e-14;
                        let numerical_rank = s.iter().filter(|&&v| v > cut).count();
                        if numerical_rank <= *rank { 0.0 } else { f64::INFINITY }
                    }
                    Err(_) => f64::INFINITY,
                }
            }
            ProxKind::L0BallIndicator { count } => {
                if x.iter().filter(|v| **v != 0.0).count() <= *count {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            ProxKind::AffineIndicator { b, c } => {
                if (b * x - c).norm() <= 1e-9 * (1.0 + c.norm()) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            ProxKind::BoxIndicator { lo, hi } => {
                let inside = x
                    .iter()
                    .zip(lo.iter().zip(hi.iter()))
                    .all(|(v, (l, h))| *v >= l - 1e-12 && *v <= h + 1e-12);
                if inside { 0.0 } else { f64::INFINITY }
            }
            ProxKind::Custom { eval, .. } => eval(x),
        }
    }

    /// Euclidean proximal map `argmin_y g(y) + ||y - v||^2 / (2 t)`.
    ///
    /// For indicator terms the step `t` is irrelevant. The hard-threshold
    /// cases (counting norm) break exact ties toward zero.
    pub fn euclidean_prox(&self, v: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::InvalidParameter(format!("prox step {t} must be positive")));
        }
        match &self.kind {
            ProxKind::Zero => Ok(v.clone()),
            ProxKind::L1 { weight } => {
                let tau = t * weight;
                Ok(DVector::from_fn(v.len(), |i, _| {
                    let x = v[i];
                    x.signum() * (x.abs() - tau).max(0.0)
                }))
            }
            ProxKind::Counting { weight } => {
                // Keeping x_i costs weight; zeroing costs x_i^2 / (2 t).
                let cut = 2.0 * t * weight;
                Ok(DVector::from_fn(v.len(), |i, _| {
                    let x = v[i];
                    if x * x <= cut { 0.0 } else { x }
                }))
            }
            ProxKind::RankIndicator { rows, cols, rank } => {
                let m = flat_to_mat_row_major(v.as_slice(), *rows, *cols)?;
                let p = project_rank(&m, *rank)?;
                Ok(mat_to_flat_row_major(&p))
            }
            ProxKind::L0BallIndicator { count } => project_l0(v, *count),
            ProxKind::AffineIndicator { b, c } => {
                let id = SpdOperator::scaled_identity(v.len(), 1.0)?;
                project_affine_in_metric(b, c, &id, v)
            }
            ProxKind::BoxIndicator { lo, hi } => {
                if lo.len() != v.len() {
                    return Err(Error::Shape("box bounds do not match vector".into()));
                }
                Ok(DVector::from_fn(v.len(), |i, _| v[i].clamp(lo[i], hi[i])))
            }
            ProxKind::Custom { prox, .. } => Ok(prox(v, t)),
        }
    }
}

/// Proximal map of `g` in the metric of `a`:
/// `argmin_y g(y) + ||y - x||_A^2 / 2`.
///
/// Scaled-identity metrics and affine indicators are handled exactly. Any
/// other combination runs an inner proximal-gradient loop with fixed step
/// `1/beta(A)`, stopping when the inner step norm drops below `1e-12`, with a
/// hard cap of `1e4` iterations.
pub fn prox_in_metric(g: &ProxOracle, a: &SpdOperator, x: &DVector<f64>) -> Result<DVector<f64>> {
    if a.dim() != x.len() {
        return Err(Error::Shape(format!(
            "metric dim {} does not match point dim {}",
            a.dim(),
            x.len()
        )));
    }
    if let Some(c) = a.scaled_identity_factor() {
        return g.euclidean_prox(x, 1.0 / c);
    }
    if let ProxKind::AffineIndicator { b, c } = g.kind() {
        return project_affine_in_metric(b, c, a, x);
    }

    let step = 1.0 / a.beta();
    let mut y = x.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..INNER_MAX_ITERS {
        let grad = a.apply(&(&y - x));
        let forward = &y - grad * step;
        let y_next = g.euclidean_prox(&forward, step)?;
        residual = (&y_next - &y).norm();
        y = y_next;
        if residual <= INNER_STEP_TOL {
            return Ok(y);
        }
    }
    Err(Error::InnerSolve { residual, iters: INNER_MAX_ITERS })
}

/// Feasibility findings for a variable-metric schedule over a finite horizon.
#[derive(Debug, Clone, Serialize)]
pub struct MetricScheduleReport {
    /// Smallest lower spectral bound over the horizon; must exceed the
    /// gradient Lipschitz constant strictly.
    pub min_alpha: f64,
    pub lipschitz: f64,
    pub lower_bound_pass: bool,
    /// Summability heuristic on `1/beta_k`; the schedule needs a divergent
    /// series of inverse upper bounds.
    pub inverse_beta_divergence: SummabilityFinding,
    pub divergence_pass: bool,
    /// `max_k beta_k / alpha_{k+1}` with an optional caller-supplied cap.
    pub sup_beta_over_next_alpha: f64,
    pub ratio_threshold: Option<f64>,
    pub ratio_pass: bool,
    /// `max_k beta_k / alpha_k`.
    pub max_condition_number: f64,
    pub horizon: usize,
    pub pass: bool,
}

/// Check a metric schedule's spectral-bound sequences against the standing
/// step-size hypotheses: lower bounds strictly above the Lipschitz constant,
/// non-summable inverse upper bounds, and a bounded `beta_k / alpha_{k+1}`
/// ratio (capped by `ratio_threshold` when supplied).
pub fn check_metric_schedule(
    alphas: &[f64],
    betas: &[f64],
    lipschitz: f64,
    horizon: usize,
    ratio_threshold: Option<f64>,
) -> Result<MetricScheduleReport> {
    if alphas.is_empty() || alphas.len() != betas.len() {
        return Err(Error::Shape(format!(
            "alpha/beta sequences must be nonempty and equal length ({} vs {})",
            alphas.len(),
            betas.len()
        )));
    }
    if !(lipschitz >= 0.0) || !lipschitz.is_finite() {
        return Err(Error::InvalidParameter("lipschitz must be finite and >= 0".into()));
    }
    let n = alphas.len().min(horizon.max(1));
    let alphas = &alphas[..n];
    let betas = &betas[..n];
    for (k, (&a, &b)) in alphas.iter().zip(betas).enumerate() {
        if !a.is_finite() || !b.is_finite() || a <= 0.0 || b <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "spectral bounds must be positive and finite at k = {k}"
            )));
        }
        if b < a * (1.0 - 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "beta_k < alpha_k at k = {k}; bounds are inconsistent"
            )));
        }
    }

    let min_alpha = alphas.iter().cloned().fold(f64::INFINITY, f64::min);
    let lower_bound_pass = min_alpha > lipschitz;

    let inv_beta: Vec<f64> = betas.iter().map(|&b| 1.0 / b).collect();
    let inverse_beta_divergence = classify_summability(&inv_beta)?;
    let divergence_pass = inverse_beta_divergence.class == SeriesClass::Divergent;

    let mut sup_ratio: f64 = 0.0;
    for k in 0..n.saturating_sub(1) {
        sup_ratio = sup_ratio.max(betas[k] / alphas[k + 1]);
    }
    if n == 1 {
        sup_ratio = betas[0] / alphas[0];
    }
    let ratio_pass = ratio_threshold.map_or(true, |t| sup_ratio <= t);

    let max_condition_number = alphas
        .iter()
        .zip(betas)
        .map(|(&a, &b)| b / a)
        .fold(0.0f64, f64::max);

    let pass = lower_bound_pass && divergence_pass && ratio_pass;
    Ok(MetricScheduleReport {
        min_alpha,
        lipschitz,
        lower_bound_pass,
        inverse_beta_divergence,
        divergence_pass,
        sup_beta_over_next_alpha: sup_ratio,
        ratio_threshold,
        ratio_pass,
        max_condition_number,
        horizon: n,
        pass,
    })
}
