//! Epsilon-insensitive support vector regression without offset, solved in
//! the dual by two-index sequential minimal optimization.
//!
//! The dual variables live in `[0, 1/lambda]^n` twice. Internally the solver
//! works with `beta = alpha_minus - alpha_plus`; at most one of each pair is
//! nonzero after every update, so the two representations are equivalent and
//! the expansion coefficients are `beta / 2`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, OutputScaler};
use crate::error::{Error, Result};
use crate::kernel::{kernel_matrix, KernelSpec};
use crate::par::{self, Execution};
use crate::surrogate::Surrogate;

pub const DEFAULT_TOL_KKT: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 200_000;
/// Dual coefficients with `|alpha_minus - alpha_plus| / 2` at or below this
/// are not support vectors.
pub const SUPPORT_TOL: f64 = 1e-12;
/// Relative floor on the pair determinant in second-index selection.
const PAIR_DET_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvrConfig {
    pub lambda: f64,
    pub epsilon: f64,
    pub tol_kkt: f64,
    pub max_iter: usize,
}

impl SvrConfig {
    pub fn new(lambda: f64, epsilon: f64) -> Self {
        SvrConfig {
            lambda,
            epsilon,
            tol_kkt: DEFAULT_TOL_KKT,
            max_iter: DEFAULT_MAX_ITER,
        }
    }

    pub fn box_bound(&self) -> f64 {
        1.0 / self.lambda
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("epsilon", self.epsilon),
            ("tol_kkt", self.tol_kkt),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "SVR {name} must be positive and finite, got {v}"
                )));
            }
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter(
                "SVR max_iter must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvrDualSolution {
    pub alpha_plus: Vec<f64>,
    pub alpha_minus: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub max_violation: f64,
}

impl SvrDualSolution {
    /// Expansion coefficient `(alpha_minus - alpha_plus) / 2` of index `i`.
    pub fn coefficient(&self, i: usize) -> f64 {
        0.5 * (self.alpha_minus[i] - self.alpha_plus[i])
    }
}

fn check_shapes(a: &DMatrix<f64>, y: &[f64], ap: &[f64], am: &[f64]) -> Result<()> {
    let n = y.len();
    if !a.is_square() || a.nrows() != n || ap.len() != n || am.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "kernel matrix {}x{}, targets {}, duals {}/{}",
            a.nrows(),
            a.ncols(),
            n,
            ap.len(),
            am.len()
        )));
    }
    if n == 0 {
        return Err(Error::Empty("SVR targets"));
    }
    Ok(())
}

/// `1/4 (am - ap)^T A (am - ap) + eps 1^T (ap + am) + y^T (ap - am)`.
pub fn svr_dual_objective(
    a: &DMatrix<f64>,
    y: &[f64],
    eps: f64,
    alpha_plus: &[f64],
    alpha_minus: &[f64],
) -> Result<f64> {
    check_shapes(a, y, alpha_plus, alpha_minus)?;
    let n = y.len();
    let beta: Vec<f64> = (0..n).map(|i| alpha_minus[i] - alpha_plus[i]).collect();
    let mut quad = 0.0;
    for j in 0..n {
        if beta[j] != 0.0 {
            let col = a.column(j);
            let s: f64 = (0..n).map(|i| col[i] * beta[i]).sum();
            quad += beta[j] * s;
        }
    }
    let lin: f64 = (0..n)
        .map(|i| eps * (alpha_plus[i] + alpha_minus[i]) + y[i] * (alpha_plus[i] - alpha_minus[i]))
        .sum();
    Ok(0.25 * quad + lin)
}

/// Projected-gradient violation of one dual variable `value in [0, bound]`
/// whose partial derivative is `grad`.
#[inline]
fn box_violation(value: f64, grad: f64, bound: f64) -> f64 {
    if value <= 0.0 {
        (-grad).max(0.0)
    } else if value >= bound {
        grad.max(0.0)
    } else {
        grad.abs()
    }
}

/// Violation of index `i` given `g_i = s(x_i) - y_i`, with the preferred
/// direction of change of `beta_i`.
#[inline]
fn index_violation(ap: f64, am: f64, g: f64, eps: f64, bound: f64) -> (f64, f64) {
    let grad_plus = eps - g;
    let grad_minus = eps + g;
    let vp = box_violation(ap, grad_plus, bound);
    let vm = box_violation(am, grad_minus, bound);
    if vm >= vp {
        (vm, -grad_minus.signum())
    } else {
        (vp, grad_plus.signum())
    }
}

/// Largest KKT violation and a worst index. `s(x_i) = (A (am - ap) / 2)_i`.
pub fn kkt_violation(
    a: &DMatrix<f64>,
    y: &[f64],
    eps: f64,
    box_bound: f64,
    alpha_plus: &[f64],
    alpha_minus: &[f64],
) -> Result<(f64, usize)> {
    check_shapes(a, y, alpha_plus, alpha_minus)?;
    let g = residuals(a, y, alpha_plus, alpha_minus);
    let mut worst = (0.0, 0);
    for i in 0..y.len() {
        let (v, _) = index_violation(alpha_plus[i], alpha_minus[i], g[i], eps, box_bound);
        if v > worst.0 {
            worst = (v, i);
        }
    }
    Ok(worst)
}

/// `s(x_i) - y_i` for every training index.
fn residuals(a: &DMatrix<f64>, y: &[f64], ap: &[f64], am: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut g: Vec<f64> = y.iter().map(|v| -v).collect();
    for j in 0..n {
        let b = am[j] - ap[j];
        if b != 0.0 {
            let col = a.column(j);
            for i in 0..n {
                g[i] += 0.5 * col[i] * b;
            }
        }
    }
    g
}

/// `argmin_b 1/4 a b^2 + l b + eps |b|` over `[-bound, bound]`.
#[inline]
fn solve_1d(a: f64, l: f64, eps: f64, bound: f64) -> f64 {
    if l.abs() <= eps {
        return 0.0;
    }
    let shrunk = l - eps * l.signum();
    if a > 0.0 {
        (-2.0 * shrunk / a).clamp(-bound, bound)
    } else {
        -l.signum() * bound
    }
}

/// Exact minimizer of the restricted objective
/// `1/4 b^T M b + h^T b + eps |b|_1` over `[-bound, bound]^2`, where
/// `M = [[aii, aij], [aij, ajj]]`. `g` is the gradient of the smooth part at
/// `current`; candidates are compared by their change of objective written in
/// terms of the step, which stays accurate when the change is far below the
/// objective's magnitude. Returns `None` when no candidate improves.
#[allow(clippy::too_many_arguments)]
fn solve_pair(
    aii: f64,
    aij: f64,
    ajj: f64,
    h: [f64; 2],
    g: [f64; 2],
    eps: f64,
    bound: f64,
    current: [f64; 2],
) -> Option<([f64; 2], f64)> {
    let change = |b: [f64; 2]| {
        let (di, dj) = (b[0] - current[0], b[1] - current[1]);
        0.25 * (aii * di * di + 2.0 * aij * di * dj + ajj * dj * dj)
            + g[0] * di
            + g[1] * dj
            + eps * ((b[0].abs() - current[0].abs()) + (b[1].abs() - current[1].abs()))
    };
    let mut best: Option<([f64; 2], f64)> = None;
    let mut consider = |b: [f64; 2]| {
        if b == current {
            return;
        }
        let v = change(b);
        if v < 0.0 && best.is_none_or(|(_, bv)| v < bv) {
            best = Some((b, v));
        }
    };

    // Smooth pieces: one per sign pattern.
    let det = aii * ajj - aij * aij;
    if det > 1e-14 * aii * ajj && det > 0.0 {
        for si in [-1.0, 1.0] {
            for sj in [-1.0, 1.0] {
                let ri = -2.0 * (h[0] + eps * si);
                let rj = -2.0 * (h[1] + eps * sj);
                let bi = (ajj * ri - aij * rj) / det;
                let bj = (aii * rj - aij * ri) / det;
                if si * bi >= 0.0 && sj * bj >= 0.0 && bi.abs() <= bound && bj.abs() <= bound {
                    consider([bi, bj]);
                }
            }
        }
    }
    // Kink and box lines, plus the coordinate lines through the current point.
    for fixed in [0.0, bound, -bound] {
        consider([fixed, solve_1d(ajj, h[1] + 0.5 * aij * fixed, eps, bound)]);
        consider([solve_1d(aii, h[0] + 0.5 * aij * fixed, eps, bound), fixed]);
    }
    consider([
        current[0],
        solve_1d(ajj, h[1] + 0.5 * aij * current[0], eps, bound),
    ]);
    consider([
        solve_1d(aii, h[0] + 0.5 * aij * current[1], eps, bound),
        current[1],
    ]);
    best
}

/// Minimizes the dual exactly over the variables of indices `i` and `j`
/// (a single pair when `i == j`), the others frozen. Returns the change of
/// the objective, zero if nothing moved.
#[allow(clippy::too_many_arguments)]
pub fn two_variable_subproblem(
    a: &DMatrix<f64>,
    y: &[f64],
    eps: f64,
    box_bound: f64,
    alpha_plus: &mut [f64],
    alpha_minus: &mut [f64],
    i: usize,
    j: usize,
) -> Result<f64> {
    check_shapes(a, y, alpha_plus, alpha_minus)?;
    if i >= y.len() || j >= y.len() {
        return Err(Error::InvalidParameter(format!(
            "index pair ({i}, {j}) out of range"
        )));
    }
    let g = residuals(a, y, alpha_plus, alpha_minus);
    let beta = |k: usize| alpha_minus[k] - alpha_plus[k];
    let moved = pair_update(a, &g, eps, box_bound, [beta(i), beta(j)], i, j);
    let Some((b, delta)) = moved else {
        return Ok(0.0);
    };
    write_beta(alpha_plus, alpha_minus, i, b[0]);
    write_beta(alpha_plus, alpha_minus, j, b[1]);
    Ok(delta)
}

#[inline]
fn write_beta(ap: &mut [f64], am: &mut [f64], k: usize, b: f64) {
    ap[k] = (-b).max(0.0);
    am[k] = b.max(0.0);
}

/// Restricted solve from the residual vector `g`.
fn pair_update(
    a: &DMatrix<f64>,
    g: &[f64],
    eps: f64,
    bound: f64,
    beta: [f64; 2],
    i: usize,
    j: usize,
) -> Option<([f64; 2], f64)> {
    if i == j {
        let aii = a[(i, i)];
        let h = g[i] - 0.5 * aii * beta[0];
        let b = solve_1d(aii, h, eps, bound);
        let d = b - beta[0];
        let change = 0.25 * aii * d * d + g[i] * d + eps * (b.abs() - beta[0].abs());
        return (change < 0.0 && b != beta[0]).then_some(([b, b], change));
    }
    let (aii, aij, ajj) = (a[(i, i)], a[(i, j)], a[(j, j)]);
    let h = [
        g[i] - 0.5 * (aii * beta[0] + aij * beta[1]),
        g[j] - 0.5 * (aij * beta[0] + ajj * beta[1]),
    ];
    solve_pair(aii, aij, ajj, h, [g[i], g[j]], eps, bound, beta)
}

/// One iterate of [`smo_solve_observed`].
pub struct SmoIterate<'a> {
    pub iteration: usize,
    pub alpha_plus: &'a [f64],
    pub alpha_minus: &'a [f64],
    pub objective: f64,
}

pub fn smo_solve(a: &DMatrix<f64>, y: &[f64], config: &SvrConfig) -> Result<SvrDualSolution> {
    smo_solve_observed(a, y, config, |_| {})
}

/// SMO from the zero start. The first working index is the worst KKT
/// violator; the second is the violator whose pair with it promises the
/// largest decrease under an unconstrained Newton step.
pub fn smo_solve_observed<F>(
    a: &DMatrix<f64>,
    y: &[f64],
    config: &SvrConfig,
    mut observe: F,
) -> Result<SvrDualSolution>
where
    F: FnMut(&SmoIterate<'_>),
{
    config.validate()?;
    let n = y.len();
    let mut ap = vec![0.0; n];
    let mut am = vec![0.0; n];
    check_shapes(a, y, &ap, &am)?;
    let eps = config.epsilon;
    let bound = config.box_bound();
    let mut g: Vec<f64> = y.iter().map(|v| -v).collect();
    let mut objective = 0.0;
    let mut viol = vec![0.0; n];
    let mut dir = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = false;
    let mut max_violation;

    loop {
        let mut first = (0.0, 0usize);
        for k in 0..n {
            let (v, d) = index_violation(ap[k], am[k], g[k], eps, bound);
            viol[k] = v;
            dir[k] = d;
            if v > first.0 {
                first = (v, k);
            }
        }
        max_violation = first.0;
        if max_violation <= config.tol_kkt {
            converged = true;
            break;
        }
        if iterations >= config.max_iter {
            break;
        }
        let i = first.1;
        let slope = |k: usize| {
            let b = am[k] - ap[k];
            g[k] + eps * if b != 0.0 { b.signum() } else { dir[k] }
        };
        let (gi, aii) = (slope(i), a[(i, i)]);
        let ci = a.column(i);
        let mut best: Option<(f64, usize)> = None;
        for k in 0..n {
            if k == i || viol[k] <= 0.0 {
                continue;
            }
            // Decrease of the unconstrained Newton step on the pair.
            let (gk, akk, aik) = (slope(k), a[(k, k)], ci[k]);
            let det = (aii * akk - aik * aik).max(PAIR_DET_FLOOR * aii * akk);
            let gain = (gi * gi * akk - 2.0 * gi * gk * aik + gk * gk * aii) / det;
            if best.is_none_or(|(v, _)| gain > v) {
                best = Some((gain, k));
            }
        }
        let j = best.map_or(i, |(_, k)| k);

        let beta = [am[i] - ap[i], am[j] - ap[j]];
        let mut update = pair_update(a, &g, eps, bound, beta, i, j);
        let mut pair = (i, j);
        if update.is_none() && j != i {
            update = pair_update(a, &g, eps, bound, [beta[0], beta[0]], i, i);
            pair = (i, i);
        }
        let Some((b, delta)) = update else {
            // Rounding prevents further progress on the worst violator.
            break;
        };
        iterations += 1;
        let (i, j) = pair;
        let di = b[0] - (am[i] - ap[i]);
        write_beta(&mut ap, &mut am, i, b[0]);
        let dj = if j != i {
            let dj = b[1] - (am[j] - ap[j]);
            write_beta(&mut ap, &mut am, j, b[1]);
            dj
        } else {
            0.0
        };
        let ci = a.column(i);
        if j != i {
            let cj = a.column(j);
            for k in 0..n {
                g[k] += 0.5 * (ci[k] * di + cj[k] * dj);
            }
        } else {
            for k in 0..n {
                g[k] += 0.5 * ci[k] * di;
            }
        }
        objective += delta;
        observe(&SmoIterate {
            iteration: iterations,
            alpha_plus: &ap,
            alpha_minus: &am,
            objective,
        });
    }

    let objective = svr_dual_objective(a, y, eps, &ap, &am)?;
    Ok(SvrDualSolution {
        alpha_plus: ap,
        alpha_minus: am,
        objective,
        iterations,
        converged,
        max_violation,
    })
}

/// Multi-output SVR model plus per-output solver diagnostics.
#[derive(Clone, Debug)]
pub struct SvrFit {
    pub model: Surrogate,
    pub solutions: Vec<SvrDualSolution>,
    /// Support vectors per output column.
    pub support_counts: Vec<usize>,
    /// True when no coefficient survived and the model is the zero function.
    pub empty_support: bool,
}

impl SvrFit {
    pub fn converged(&self) -> bool {
        self.solutions.iter().all(|s| s.converged)
    }
}

/// Merges per-column dual solutions into one expansion over the union of
/// their support vectors.
pub fn extract_sparse_model(
    solutions: &[SvrDualSolution],
    data: &Dataset,
    kernel: &KernelSpec,
    scaler: Option<OutputScaler>,
    lambda: f64,
) -> Result<SvrFit> {
    let n = data.len();
    let q = solutions.len();
    if q != data.output_dim() {
        return Err(Error::DimensionMismatch {
            expected: data.output_dim(),
            found: q,
        });
    }
    if solutions
        .iter()
        .any(|s| s.alpha_plus.len() != n || s.alpha_minus.len() != n)
    {
        return Err(Error::ShapeMismatch(
            "dual vectors do not match the dataset".into(),
        ));
    }
    let keep = |s: &SvrDualSolution, i: usize| s.coefficient(i).abs() > SUPPORT_TOL;
    let support_counts: Vec<usize> = solutions
        .iter()
        .map(|s| (0..n).filter(|&i| keep(s, i)).count())
        .collect();
    let centers: Vec<usize> = (0..n)
        .filter(|&i| solutions.iter().any(|s| keep(s, i)))
        .collect();
    let empty_support = centers.is_empty();
    let model = if empty_support {
        Surrogate::new(
            *kernel,
            data.inputs.rows(0, 1).into_owned(),
            DMatrix::zeros(1, q),
            scaler,
            lambda,
        )?
    } else {
        let coeffs = DMatrix::from_fn(centers.len(), q, |r, c| {
            let s = &solutions[c];
            if keep(s, centers[r]) {
                s.coefficient(centers[r])
            } else {
                0.0
            }
        });
        Surrogate::new(
            *kernel,
            data.inputs.select_rows(&centers),
            coeffs,
            scaler,
            lambda,
        )?
    };
    Ok(SvrFit {
        model,
        solutions: solutions.to_vec(),
        support_counts,
        empty_support,
    })
}

/// One scalar SVR per output column, sharing the kernel matrix.
pub fn fit_svr(data: &Dataset, kernel: &KernelSpec, config: &SvrConfig) -> Result<SvrFit> {
    fit_svr_with(Execution::default(), data, kernel, config, None)
}

/// [`fit_svr`] on outputs mapped to `[-1, 1]`; the model predicts in the
/// original units.
pub fn fit_svr_scaled(data: &Dataset, kernel: &KernelSpec, config: &SvrConfig) -> Result<SvrFit> {
    let scaler = OutputScaler::fit(&data.outputs);
    let scaled = data.with_outputs(scaler.scale(&data.outputs)?)?;
    fit_svr_with(Execution::default(), &scaled, kernel, config, Some(scaler))
}

fn fit_svr_with(
    exec: Execution,
    data: &Dataset,
    kernel: &KernelSpec,
    config: &SvrConfig,
    scaler: Option<OutputScaler>,
) -> Result<SvrFit> {
    config.validate()?;
    let a = kernel_matrix(kernel, &data.inputs, &data.inputs)?;
    fit_svr_with_matrix(exec, data, kernel, config, scaler, &a, false)
}

/// SVR fit reusing a precomputed kernel matrix of `data.inputs`.
pub(crate) fn fit_svr_with_matrix(
    exec: Execution,
    data: &Dataset,
    kernel: &KernelSpec,
    config: &SvrConfig,
    scaler: Option<OutputScaler>,
    a: &DMatrix<f64>,
    require_convergence: bool,
) -> Result<SvrFit> {
    config.validate()?;
    let columns: Vec<Vec<f64>> = data
        .outputs
        .column_iter()
        .map(|c| c.iter().copied().collect())
        .collect();
    let solutions = if require_convergence {
        // Outputs in order, giving up at the first one that stalls.
        let mut out = Vec::with_capacity(columns.len());
        for (c, y) in columns.iter().enumerate() {
            let s = smo_solve(a, y, config)?;
            if !s.converged {
                return Err(Error::NotConverged(format!(
                    "SMO on output {c} reached {} iterations with KKT violation {:e}",
                    s.iterations, s.max_violation
                )));
            }
            out.push(s);
        }
        out
    } else {
        par::map_indices(exec, columns.len(), |c| smo_solve(a, &columns[c], config))
            .into_iter()
            .collect::<Result<Vec<_>>>()?
    };
    extract_sparse_model(&solutions, data, kernel, scaler, config.lambda)
}
