//! Test problems with known structure: power potentials for rate
//! experiments, soft-threshold chains with hand-countable termination,
//! constrained quadratics with KKT-solvable minimizers, and planted
//! sparse-plus-low-rank decompositions with their alternating averaged
//! projected iteration.

use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::afb::{BlockProblem, MetricSchedule};
use crate::block::BlockVector;
use crate::error::{Error, Result};
use crate::kl::standard_normal_vector;
use crate::lm::LmProblem;
use crate::metric::{
    mat_to_flat_row_major, project_l0_matrix, project_rank, spectral_bounds, ProxOracle,
};

/// `f(x) = ||x||^q` as a single smooth block. The gradient
/// `q ||x||^(q-2) x` is Lipschitz on a ball only for `q >= 2`, with constant
/// `q (q-1) R^(q-2)` on radius `R`; requesting a gradient-ready problem with
/// `q < 2` is refused (kinked curvature at the origin). With
/// `for_gradient = false` the problem carries `L = 0` and serves as a plain
/// value/slope oracle.
pub fn make_power_potential(
    q: f64,
    dim: usize,
    ball_radius: f64,
    for_gradient: bool,
) -> Result<BlockProblem> {
    if !(q > 1.0) || !q.is_finite() {
        return Err(Error::InvalidParameter(format!("exponent {q} must exceed 1")));
    }
    if dim == 0 {
        return Err(Error::Shape("dimension must be positive".into()));
    }
    if !(ball_radius > 0.0) || !ball_radius.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "ball radius {ball_radius} must be positive and finite"
        )));
    }
    let lipschitz = if q >= 2.0 {
        q * (q - 1.0) * ball_radius.powf(q - 2.0)
    } else if for_gradient {
        return Err(Error::InvalidParameter(format!(
            "exponent {q} < 2 has no Lipschitz gradient near the origin; \
             use a proximal formulation instead"
        )));
    } else {
        0.0
    };
    BlockProblem::new(
        vec![dim],
        Arc::new(move |x: &BlockVector| x.block(0).norm().powf(q)),
        Arc::new(move |_, x: &BlockVector| {
            let v = x.block(0);
            let n = v.norm();
            if n == 0.0 {
                DVector::zeros(v.len())
            } else {
                v * (q * n.powf(q - 2.0))
            }
        }),
        lipschitz,
        vec![ProxOracle::zero()],
    )
}

/// Proximal-point iteration on `f(x) = |x|`: no smooth part, the absolute
/// value as the prox term, constant metric `(1/lambda) I`. Each step is one
/// soft threshold, so the iterate hits zero exactly after a predictable
/// number of steps.
pub struct AbsProxSetup {
    pub problem: BlockProblem,
    pub schedule: MetricSchedule,
    pub lambda: f64,
}

impl AbsProxSetup {
    /// First iteration index whose value gap is exactly zero: `ceil(|x0| / lambda)`.
    pub fn expected_termination(&self, x0: f64) -> usize {
        (x0.abs() / self.lambda).ceil() as usize
    }
}

pub fn make_abs_prox_problem(lambda: f64) -> Result<AbsProxSetup> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!("step size {lambda} must be positive")));
    }
    let problem = BlockProblem::new(
        vec![1],
        Arc::new(|_: &BlockVector| 0.0),
        Arc::new(|_, _: &BlockVector| DVector::zeros(1)),
        0.0,
        vec![ProxOracle::l1(1.0)?],
    )?;
    let schedule = MetricSchedule::scaled_identities(&[1], &[1.0 / lambda])?;
    Ok(AbsProxSetup { problem, schedule, lambda })
}

/// `h(x) = x'Qx/2 - b'x`, optionally over an affine set `{x : Bx = c}`,
/// with the minimizer solved at construction (plain solve, or the KKT
/// system when constrained).
pub struct ConstrainedQuadratic {
    pub q: DMatrix<f64>,
    pub b: DVector<f64>,
    pub constraint: Option<(DMatrix<f64>, DVector<f64>)>,
    pub minimizer: DVector<f64>,
    pub lipschitz: f64,
}

pub fn make_quadratic(
    q: DMatrix<f64>,
    b: DVector<f64>,
    constraint: Option<(DMatrix<f64>, DVector<f64>)>,
) -> Result<ConstrainedQuadratic> {
    let n = q.nrows();
    if q.ncols() != n || b.len() != n {
        return Err(Error::Shape("Q must be square and match b".into()));
    }
    let (alpha, beta) = spectral_bounds(&q)?;
    if alpha <= 0.0 {
        return Err(Error::NotSpd(format!("smallest eigenvalue {alpha:.3e} is not positive")));
    }
    let minimizer = match &constraint {
        None => q
            .clone()
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::IllConditioned("unconstrained solve failed".into()))?,
        Some((bm, c)) => {
            if bm.ncols() != n || c.len() != bm.nrows() {
                return Err(Error::Shape("constraint shapes must match Q".into()));
            }
            // KKT system: [Q B'; B 0] [x; nu] = [b; c].
            let m = bm.nrows();
            let mut kkt = DMatrix::zeros(n + m, n + m);
            kkt.view_mut((0, 0), (n, n)).copy_from(&q);
            kkt.view_mut((0, n), (n, m)).copy_from(&bm.transpose());
            kkt.view_mut((n, 0), (m, n)).copy_from(bm);
            let mut rhs = DVector::zeros(n + m);
            rhs.rows_mut(0, n).copy_from(&b);
            rhs.rows_mut(n, m).copy_from(c);
            let sol = kkt
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::IllConditioned("singular KKT system".into()))?;
            sol.rows(0, n).into_owned()
        }
    };
    Ok(ConstrainedQuadratic { q, b, constraint, minimizer, lipschitz: beta })
}

impl ConstrainedQuadratic {
    fn oracle(&self) -> Result<ProxOracle> {
        match &self.constraint {
            None => Ok(ProxOracle::zero()),
            Some((bm, c)) => ProxOracle::affine(bm.clone(), c.clone()),
        }
    }

    pub fn block_problem(&self) -> Result<BlockProblem> {
        let (qe, be) = (self.q.clone(), self.b.clone());
        let (qg, bg) = (self.q.clone(), self.b.clone());
        BlockProblem::new(
            vec![self.q.nrows()],
            Arc::new(move |x: &BlockVector| {
                let v = x.block(0);
                (0.5 * v.transpose() * &qe * v)[0] - be.dot(v)
            }),
            Arc::new(move |_, x: &BlockVector| &qg * x.block(0) - &bg),
            self.lipschitz,
            vec![self.oracle()?],
        )
    }

    pub fn lm_problem(&self) -> Result<LmProblem> {
        let (qe, be) = (self.q.clone(), self.b.clone());
        let (qg, bg) = (self.q.clone(), self.b.clone());
        let qh = self.q.clone();
        LmProblem::new(
            self.q.nrows(),
            Arc::new(move |x: &DVector<f64>| (0.5 * x.transpose() * &qe * x)[0] - be.dot(x)),
            Arc::new(move |x: &DVector<f64>| &qg * x - &bg),
            Some(Arc::new(move |_: &DVector<f64>| qh.clone())),
            self.lipschitz,
            self.oracle()?,
        )
    }
}

/// An observed matrix to split into a low-rank and a sparse part, with the
/// planted truth kept when the instance was generated.
#[derive(Debug, Clone)]
pub struct DecompositionInstance {
    pub a: DMatrix<f64>,
    pub r: usize,
    pub s: usize,
    pub x_true: Option<DMatrix<f64>>,
    pub y_true: Option<DMatrix<f64>>,
    pub seed: u64,
}

impl DecompositionInstance {
    pub fn shape(&self) -> (usize, usize) {
        (self.a.nrows(), self.a.ncols())
    }
}

/// Planted generator: `X` is a product of seeded Gaussian factors
/// `(m x r)(r x n)`; `Y` places `s` signed entries on a support drawn
/// without replacement, with magnitudes in `[gap, 2 gap]` times the largest
/// `|X|` entry, so the sparse part dominates entrywise and hard thresholding
/// near the solution prefers the true support. `A = X + Y` exactly.
pub fn generate_decomposition(
    m: usize,
    n: usize,
    r: usize,
    s: usize,
    magnitude_gap: f64,
    seed: u64,
) -> Result<DecompositionInstance> {
    if m == 0 || n == 0 {
        return Err(Error::Shape("matrix dimensions must be positive".into()));
    }
    if r > m.min(n) {
        return Err(Error::InvalidParameter(format!(
            "rank bound {r} exceeds min dimension {}",
            m.min(n)
        )));
    }
    if s > m * n {
        return Err(Error::InvalidParameter(format!("sparsity bound {s} exceeds {} entries", m * n)));
    }
    if !(magnitude_gap > 0.0) || !magnitude_gap.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "magnitude gap {magnitude_gap} must be positive and finite"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let x_true = if r == 0 {
        DMatrix::zeros(m, n)
    } else {
        let left = DMatrix::from_fn(m, r, |_, _| 0.0);
        let mut left = left;
        for j in 0..r {
            left.set_column(j, &standard_normal_vector(&mut rng, m));
        }
        let mut right = DMatrix::zeros(r, n);
        for i in 0..r {
            right.set_row(i, &standard_normal_vector(&mut rng, n).transpose());
        }
        left * right
    };
    let x_scale = x_true.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);

    // Partial Fisher-Yates over flat indices: the first s slots are a
    // uniform draw without replacement.
    let mut idx: Vec<usize> = (0..m * n).collect();
    for i in 0..s {
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
    }
    let mut y_true = DMatrix::zeros(m, n);
    for &flat in idx.iter().take(s) {
        let magnitude = magnitude_gap * x_scale * (1.0 + rng.random::<f64>());
        let sign = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
        y_true[(flat / n, flat % n)] = sign * magnitude;
    }

    let a = &x_true + &y_true;
    Ok(DecompositionInstance { a, r, s, x_true: Some(x_true), y_true: Some(y_true), seed })
}

/// The decomposition objective as a two-block problem:
/// `h(X, Y) = ||A - X - Y||_F^2 / 2` with rank and sparsity indicator prox
/// terms. The per-block gradient maps `X -> X + Y - A` (and symmetrically)
/// are 1-Lipschitz, so `L = 1` regardless of size.
pub fn decomposition_block_problem(inst: &DecompositionInstance) -> Result<BlockProblem> {
    let (m, n) = inst.shape();
    let dim = m * n;
    let a_flat = mat_to_flat_row_major(&inst.a);
    let (ae, ag) = (a_flat.clone(), a_flat);
    BlockProblem::new(
        vec![dim, dim],
        Arc::new(move |x: &BlockVector| {
            let mut sq = 0.0;
            for i in 0..ae.len() {
                let d = ae[i] - x.block(0)[i] - x.block(1)[i];
                sq += d * d;
            }
            0.5 * sq
        }),
        Arc::new(move |_, x: &BlockVector| {
            // Both partial gradients are X + Y - A at the evaluation point.
            DVector::from_fn(ag.len(), |i, _| x.block(0)[i] + x.block(1)[i] - ag[i])
        }),
        1.0,
        vec![ProxOracle::rank_indicator(m, n, inst.r)?, ProxOracle::l0_ball(inst.s)?],
    )
}

/// One sweep of the alternating averaged projected iteration:
///
/// ```text
/// X' in proj_{rank<=r}( lambda (A - Y) + (1 - lambda) X )
/// Y' in proj_{||.||_0<=s}( mu (A - X') + (1 - mu) Y )
/// ```
///
/// Averaging weights must lie in `(0, 1]`; the boundary value 1 turns both
/// projections into direct assignments (useful degenerate case), while the
/// convergence theory needs weights bounded away from 0 and 1.
pub fn aapm_step(
    inst: &DecompositionInstance,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    lambda: f64,
    mu: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (m, n) = inst.shape();
    if x.nrows() != m || x.ncols() != n || y.nrows() != m || y.ncols() != n {
        return Err(Error::Shape("iterates must match the observed matrix".into()));
    }
    for (name, v) in [("lambda", lambda), ("mu", mu)] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "averaging weight {name} = {v} must lie in (0, 1]"
            )));
        }
    }
    let x_arg = (&inst.a - y) * lambda + x * (1.0 - lambda);
    let x_next = project_rank(&x_arg, inst.r)?;
    let y_arg = (&inst.a - &x_next) * mu + y * (1.0 - mu);
    let y_next = project_l0_matrix(&y_arg, inst.s)?;
    Ok((x_next, y_next))
}

/// How close a candidate pair is to the planted truth.
#[derive(Debug, Clone, Serialize)]
pub struct RecoveryMetrics {
    /// `||X - X_true||_F / ||X_true||_F` (absolute when the truth is zero).
    pub x_rel_error: Option<f64>,
    pub y_rel_error: Option<f64>,
    /// Fraction of the true support carried by the candidate `Y`.
    pub support_agreement: Option<f64>,
    /// `||A - X - Y||_F`.
    pub residual: f64,
    /// False when the instance has no planted truth.
    pub applicable: bool,
}

pub fn recovery_report(
    inst: &DecompositionInstance,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> Result<RecoveryMetrics> {
    let (m, n) = inst.shape();
    if x.nrows() != m || x.ncols() != n || y.nrows() != m || y.ncols() != n {
        return Err(Error::Shape("candidates must match the observed matrix".into()));
    }
    let residual = (&inst.a - x - y).norm();
    let (x_true, y_true) = match (&inst.x_true, &inst.y_true) {
        (Some(xt), Some(yt)) => (xt, yt),
        _ => {
            return Ok(RecoveryMetrics {
                x_rel_error: None,
                y_rel_error: None,
                support_agreement: None,
                residual,
                applicable: false,
            })
        }
    };
    let rel = |cand: &DMatrix<f64>, truth: &DMatrix<f64>| {
        let gap = (cand - truth).norm();
        let scale = truth.norm();
        if scale > 0.0 {
            gap / scale
        } else {
            gap
        }
    };
    let true_support: Vec<(usize, usize)> = (0..m)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| y_true[(i, j)] != 0.0)
        .collect();
    let support_agreement = if true_support.is_empty() {
        1.0
    } else {
        let hit = true_support.iter().filter(|&&(i, j)| y[(i, j)] != 0.0).count();
        hit as f64 / true_support.len() as f64
    };
    Ok(RecoveryMetrics {
        x_rel_error: Some(rel(x, x_true)),
        y_rel_error: Some(rel(y, y_true)),
        support_agreement: Some(support_agreement),
        residual,
        applicable: true,
    })
}

/// A feasible starting pair near the truth: Gaussian noise of relative
/// Frobenius radius `radius` is added to each planted factor and the sums
/// are projected back onto their constraint sets, so the result satisfies
/// the rank and sparsity bounds while sitting within about `2 radius`
/// (relative) of the truth.
pub fn feasible_perturbation(
    inst: &DecompositionInstance,
    radius: f64,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(radius >= 0.0) || !radius.is_finite() {
        return Err(Error::InvalidParameter(format!("radius {radius} must be >= 0")));
    }
    let (x_true, y_true) = match (&inst.x_true, &inst.y_true) {
        (Some(x), Some(y)) => (x, y),
        _ => return Err(Error::Prerequisite("perturbation needs a planted truth".into())),
    };
    let (m, n) = inst.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noisy = |truth: &DMatrix<f64>| {
        let noise_flat = standard_normal_vector(&mut rng, m * n);
        let noise = DMatrix::from_fn(m, n, |i, j| noise_flat[i * n + j]);
        let nn = noise.norm();
        if nn == 0.0 || radius == 0.0 {
            truth.clone()
        } else {
            truth + noise * (radius * truth.norm() / nn)
        }
    };
    let x0 = project_rank(&noisy(x_true), inst.r)?;
    let y0 = project_l0_matrix(&noisy(y_true), inst.s)?;
    Ok((x0, y0))
}

/// Plain-text container: header `m n r s seed has_truth`, then `A` row-major
/// (one row per line), then `X_true` and `Y_true` when planted. Values
/// round-trip exactly through 17-significant-digit scientific notation.
pub fn save_instance(inst: &DecompositionInstance, path: &Path) -> Result<()> {
    let (m, n) = inst.shape();
    let has_truth = inst.x_true.is_some() && inst.y_true.is_some();
    let mut out = String::new();
    out.push_str(&format!(
        "{} {} {} {} {} {}\n",
        m,
        n,
        inst.r,
        inst.s,
        inst.seed,
        has_truth as u8
    ));
    let mut dump = |mat: &DMatrix<f64>| {
        for i in 0..m {
            let row: Vec<String> = (0..n).map(|j| format!("{:.16e}", mat[(i, j)])).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    };
    dump(&inst.a);
    if has_truth {
        dump(inst.x_true.as_ref().unwrap());
        dump(inst.y_true.as_ref().unwrap());
    }
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::TraceData(format!("cannot create {}: {e}", path.display())))?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::TraceData(format!("write failed: {e}")))?;
    Ok(())
}

pub fn load_instance(path: &Path) -> Result<DecompositionInstance> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::TraceData(format!("cannot open {}: {e}", path.display())))?;
    let mut lines = std::io::BufReader::new(f).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::TraceData("empty instance file".into()))?
        .map_err(|e| Error::TraceData(format!("read failed: {e}")))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 6 {
        return Err(Error::TraceData(format!(
            "header needs 6 fields (m n r s seed has_truth), got {}",
            fields.len()
        )));
    }
    let parse = |s: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::TraceData(format!("bad header field {s:?}")))
    };
    let (m, n, r, s) = (parse(fields[0])?, parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    let seed: u64 =
        fields[4].parse().map_err(|_| Error::TraceData(format!("bad seed {:?}", fields[4])))?;
    let has_truth = fields[5] == "1";

    let mut read_matrix = |rows: usize, cols: usize| -> Result<DMatrix<f64>> {
        let mut mat = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            let line = lines
                .next()
                .ok_or_else(|| Error::TraceData(format!("truncated matrix at row {i}")))?
                .map_err(|e| Error::TraceData(format!("read failed: {e}")))?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != cols {
                return Err(Error::TraceData(format!(
                    "row {i} has {} values, expected {cols}",
                    vals.len()
                )));
            }
            for (j, v) in vals.iter().enumerate() {
                mat[(i, j)] = v
                    .parse()
                    .map_err(|_| Error::TraceData(format!("bad value {v:?} at ({i}, {j})")))?;
            }
        }
        Ok(mat)
    };
    let a = read_matrix(m, n)?;
    let (x_true, y_true) = if has_truth {
        (Some(read_matrix(m, n)?), Some(read_matrix(m, n)?))
    } else {
        (None, None)
    };
    Ok(DecompositionInstance { a, r, s, x_true, y_true, seed })
}
