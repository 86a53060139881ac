//! Input estimation through a trained surrogate, and Monte Carlo
//! integration of a surrogate.
//!
//! The cost is `C(x) = |s(x) - y|^2 / (2 |y|^2)` for a target `y`; its
//! gradient is `J(x) (s(x) - y) / |y|^2` with `J` the d x q Jacobian of the
//! surrogate, assembled from the kernel gradients at the centers.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::surrogate::Surrogate;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub max_iter: usize,
    /// Stop once the projected gradient is at most this long.
    pub grad_tol: f64,
    /// Sufficient-decrease constant of the Armijo test.
    pub armijo: f64,
    /// Step halvings tried before giving up on an iteration.
    pub max_halvings: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            max_iter: 5000,
            grad_tol: 1e-8,
            armijo: 1e-4,
            max_halvings: 60,
        }
    }
}

/// Per-coordinate box `lower <= x <= upper`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::ShapeMismatch("box bounds differ in length".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidParameter("box has lower > upper".into()));
        }
        Ok(Bounds { lower, upper })
    }

    pub fn project(&self, x: &mut [f64]) {
        for ((v, l), u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *u);
        }
    }

    pub fn volume(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| u - l)
            .product()
    }
}

#[derive(Clone, Debug)]
pub struct EstimationProblem<'a> {
    model: &'a Surrogate,
    target: Vec<f64>,
    target_norm2: f64,
    pub initial_guess: Vec<f64>,
    pub bounds: Option<Bounds>,
    pub settings: OptimizerSettings,
}

impl<'a> EstimationProblem<'a> {
    pub fn new(model: &'a Surrogate, target: Vec<f64>, initial_guess: Vec<f64>) -> Result<Self> {
        if !model.kernel.family.is_differentiable() {
            return Err(Error::NotDifferentiable(model.kernel.family.name()));
        }
        if target.len() != model.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.output_dim(),
                found: target.len(),
            });
        }
        if initial_guess.len() != model.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.input_dim(),
                found: initial_guess.len(),
            });
        }
        if initial_guess.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "initial guess is not finite".into(),
            ));
        }
        let target_norm2: f64 = target.iter().map(|v| v * v).sum();
        if !(target_norm2 > 0.0 && target_norm2.is_finite()) {
            return Err(Error::InvalidParameter(
                "target output must have positive finite norm".into(),
            ));
        }
        Ok(EstimationProblem {
            model,
            target,
            target_norm2,
            initial_guess,
            bounds: None,
            settings: OptimizerSettings::default(),
        })
    }

    pub fn with_bounds(mut self, bounds: Bounds) -> Result<Self> {
        if bounds.lower.len() != self.model.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.model.input_dim(),
                found: bounds.lower.len(),
            });
        }
        self.bounds = Some(bounds);
        Ok(self)
    }

    pub fn with_settings(mut self, settings: OptimizerSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.model.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.model.input_dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    fn residual(&self, x: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; self.model.output_dim()];
        self.model.accumulate_point(x, &mut s);
        s.iter_mut().zip(&self.target).for_each(|(v, t)| *v -= t);
        s
    }

    fn cost_of(&self, residual: &[f64]) -> f64 {
        residual.iter().map(|r| r * r).sum::<f64>() / (2.0 * self.target_norm2)
    }

    pub fn cost(&self, x: &[f64]) -> Result<f64> {
        self.check_x(x)?;
        self.model.kernel.eval(x, x)?;
        Ok(self.cost_of(&self.residual(x)))
    }

    pub fn cost_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        self.model.kernel.eval(x, x)?;
        let e = self.residual(x);
        Ok(self.gradient_from(x, &e))
    }

    fn gradient_from(&self, x: &[f64], e: &[f64]) -> Vec<f64> {
        if e.iter().all(|v| *v == 0.0) {
            return vec![0.0; x.len()];
        }
        let jac = self.model.jacobian_unchecked(x);
        (0..x.len())
            .map(|k| (0..e.len()).map(|c| jac[(k, c)] * e[c]).sum::<f64>() / self.target_norm2)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub x: Vec<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Projected gradient descent with Armijo backtracking from the initial
/// guess. The step length restarts each iteration from twice the last
/// accepted one and is halved until the Armijo test passes, then further
/// while the cost keeps decreasing. Returns the best iterate;
/// non-convergence is only flagged.
pub fn estimate_input(problem: &EstimationProblem<'_>) -> Estimate {
    let settings = &problem.settings;
    let project = |x: &mut Vec<f64>| {
        if let Some(b) = &problem.bounds {
            b.project(x);
        }
    };
    let mut x = problem.initial_guess.clone();
    project(&mut x);
    let mut e = problem.residual(&x);
    let mut cost = problem.cost_of(&e);
    let mut step = 1.0;
    let mut iterations = 0;
    let mut converged = false;
    let mut trial = vec![0.0; x.len()];
    while iterations < settings.max_iter {
        let g = problem.gradient_from(&x, &e);
        // Projected-gradient length with unit step.
        trial
            .iter_mut()
            .zip(&x)
            .zip(&g)
            .for_each(|((t, xi), gi)| *t = xi - gi);
        project(&mut trial);
        let pg: f64 = trial
            .iter()
            .zip(&x)
            .map(|(t, xi)| (t - xi).powi(2))
            .sum::<f64>()
            .sqrt();
        if pg <= settings.grad_tol || cost == 0.0 {
            converged = true;
            break;
        }
        let mut accepted: Option<(f64, Vec<f64>, f64)> = None;
        let mut t = step * 2.0;
        for _ in 0..=settings.max_halvings {
            trial
                .iter_mut()
                .zip(&x)
                .zip(&g)
                .for_each(|((v, xi), gi)| *v = xi - t * gi);
            project(&mut trial);
            let c_new = problem.cost_of(&problem.residual(&trial));
            match &accepted {
                // After the first sufficient decrease keep halving while the
                // cost still drops, so a long step cannot jump over the basin
                // onto a flat tail.
                Some((_, _, best)) => {
                    if c_new < *best {
                        accepted = Some((t, trial.clone(), c_new));
                    } else {
                        break;
                    }
                }
                None => {
                    let decrease: f64 = g
                        .iter()
                        .zip(&trial)
                        .zip(&x)
                        .map(|((gi, ti), xi)| gi * (xi - ti))
                        .sum();
                    if c_new.is_finite()
                        && c_new <= cost - settings.armijo * decrease
                        && c_new <= cost
                    {
                        accepted = Some((t, trial.clone(), c_new));
                    }
                }
            }
            t *= 0.5;
        }
        let Some((t, x_new, c_new)) = accepted else {
            break;
        };
        x = x_new;
        e = problem.residual(&x);
        cost = c_new;
        step = t;
        iterations += 1;
    }
    Estimate {
        x,
        cost,
        iterations,
        converged,
    }
}

/// `y + eta |y| v` with `v` uniform on `[-1, 1]^q`.
pub fn perturb_target<R: Rng>(y: &[f64], eta: f64, rng: &mut R) -> Vec<f64> {
    let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    y.iter()
        .map(|v| v + eta * norm * rng.gen_range(-1.0..=1.0))
        .collect()
}

/// One row of a batch estimation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationRecord {
    pub target_norm: f64,
    /// `|x* - x_true|`, when the true input is known.
    pub input_error: Option<f64>,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub estimate: Vec<f64>,
}

/// Estimates an input for every row of `outputs`, perturbed with relative
/// noise level `eta` from a generator seeded with `seed`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_batch(
    model: &Surrogate,
    outputs: &DMatrix<f64>,
    true_inputs: Option<&DMatrix<f64>>,
    initial_guess: &[f64],
    eta: f64,
    seed: u64,
    bounds: Option<&Bounds>,
    settings: &OptimizerSettings,
) -> Result<Vec<EstimationRecord>> {
    if let Some(t) = true_inputs {
        if t.nrows() != outputs.nrows() || t.ncols() != model.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "true inputs {:?} for {} targets of a d = {} model",
                t.shape(),
                outputs.nrows(),
                model.input_dim()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets: Vec<Vec<f64>> = outputs
        .row_iter()
        .map(|r| {
            let y: Vec<f64> = r.iter().copied().collect();
            perturb_target(&y, eta, &mut rng)
        })
        .collect();
    let problems = targets
        .into_iter()
        .map(|t| {
            let p =
                EstimationProblem::new(model, t, initial_guess.to_vec())?.with_settings(*settings);
            match bounds {
                Some(b) => p.with_bounds(b.clone()),
                None => Ok(p),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(par::map_indices(
        Execution::default(),
        problems.len(),
        |i| {
            let p = &problems[i];
            let est = estimate_input(p);
            let input_error = true_inputs.map(|t| {
                t.row(i)
                    .iter()
                    .zip(&est.x)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            });
            EstimationRecord {
                target_norm: p.target_norm2.sqrt(),
                input_error,
                final_cost: est.cost,
                iterations: est.iterations,
                converged: est.converged,
                estimate: est.x,
            }
        },
    ))
}

/// Mean of the surrogate over `samples`, times `volume` when given.
pub fn monte_carlo_integral(
    model: &Surrogate,
    samples: &DMatrix<f64>,
    volume: Option<f64>,
) -> Result<Vec<f64>> {
    if samples.nrows() == 0 {
        return Err(Error::Empty("Monte Carlo samples"));
    }
    let values = model.evaluate(samples)?;
    let scale = volume.unwrap_or(1.0) / samples.nrows() as f64;
    Ok(values.column_iter().map(|c| c.sum() * scale).collect())
}
