//! Dataset splitting, logarithmic grids, and hyperparameter selection by
//! validation or k-fold cross validation around any of the trainers.
//!
//! Outputs are mapped to `[-1, 1]` once per selection run, with the scaler
//! fitted on every non-test sample. All grid-point fits and their
//! validation errors live in those scaled units; the final model carries the
//! scaler and test errors are reported in the original units.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, OutputScaler};
use crate::error::{Error, Result};
use crate::interpolation::fit_interpolant_with_matrix;
use crate::kernel::{kernel_matrix_with, KernelFamily, KernelSpec};
use crate::par::{self, Execution};
use crate::surrogate::Surrogate;
use crate::svr::{self, SvrConfig};
use crate::vkoga::{self, GreedyConfig, SelectionRule, Termination};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSizes {
    Counts {
        train: usize,
        validation: usize,
        test: usize,
    },
    /// Validation and test shares, rounded to the nearest count; training
    /// takes the rest.
    Fractions { validation: f64, test: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub sizes: SplitSizes,
    /// Sample indices forced into the training part.
    #[serde(default)]
    pub pinned: Vec<usize>,
}

impl SplitSpec {
    /// `(n_train, n_validation, n_test)` for a dataset of `n` samples.
    pub fn counts(&self, n: usize) -> Result<(usize, usize, usize)> {
        let (tr, va, te) = match self.sizes {
            SplitSizes::Counts {
                train,
                validation,
                test,
            } => {
                if train + validation + test != n {
                    return Err(Error::InvalidParameter(format!(
                        "split counts {train} + {validation} + {test} do not sum to n = {n}"
                    )));
                }
                (train, validation, test)
            }
            SplitSizes::Fractions { validation, test } => {
                if !(0.0..1.0).contains(&validation)
                    || !(0.0..1.0).contains(&test)
                    || validation + test >= 1.0
                {
                    return Err(Error::InvalidParameter(format!(
                        "split fractions validation = {validation}, test = {test} must be in [0, 1) with sum < 1"
                    )));
                }
                let va = (validation * n as f64).round() as usize;
                let te = (test * n as f64).round() as usize;
                if va + te >= n {
                    return Err(Error::InvalidParameter(format!(
                        "split fractions leave no training samples out of {n}"
                    )));
                }
                (n - va - te, va, te)
            }
        };
        if tr == 0 {
            return Err(Error::InvalidParameter("training part is empty".into()));
        }
        if self.pinned.len() > tr {
            return Err(Error::InvalidParameter(format!(
                "{} pinned indices do not fit into {tr} training samples",
                self.pinned.len()
            )));
        }
        Ok((tr, va, te))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded Fisher-Yates permutation (ChaCha8), sliced into train, validation
/// and test. Pinned indices are swapped into the leading training slots.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<SplitIndices> {
    let (tr, va, _) = spec.counts(n)?;
    let mut seen = vec![false; n];
    for &p in &spec.pinned {
        if p >= n {
            return Err(Error::InvalidParameter(format!(
                "pinned index {p} out of range for {n} samples"
            )));
        }
        if std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidParameter(format!(
                "pinned index {p} given twice"
            )));
        }
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    perm.shuffle(&mut rng);
    for (slot, &p) in spec.pinned.iter().enumerate() {
        let pos = perm.iter().position(|&v| v == p).expect("permutation");
        perm.swap(slot, pos);
    }
    let test = perm.split_off(tr + va);
    let validation = perm.split_off(tr);
    Ok(SplitIndices {
        train: perm,
        validation,
        test,
    })
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Dataset,
    pub validation: Option<Dataset>,
    pub test: Option<Dataset>,
    pub indices: SplitIndices,
}

pub fn split_dataset(data: &Dataset, spec: &SplitSpec) -> Result<Split> {
    let indices = split_indices(data.len(), spec)?;
    let part = |idx: &[usize]| (!idx.is_empty()).then(|| data.select(idx));
    Ok(Split {
        train: data.select(&indices.train),
        validation: part(&indices.validation),
        test: part(&indices.test),
        indices,
    })
}

/// `count` logarithmically equispaced values from `vmin` to `vmax`,
/// endpoints exact.
pub fn log_grid(vmin: f64, vmax: f64, count: usize) -> Result<Vec<f64>> {
    if !(vmin > 0.0 && vmax > vmin && vmax.is_finite()) || count < 2 {
        return Err(Error::InvalidParameter(format!(
            "log grid needs 0 < vmin < vmax and count >= 2, got ({vmin}, {vmax}, {count})"
        )));
    }
    let (lo, hi) = (vmin.log10(), vmax.log10());
    let last = count - 1;
    Ok((0..count)
        .map(|i| match i {
            0 => vmin,
            i if i == last => vmax,
            i => 10f64.powf(lo + (hi - lo) * i as f64 / last as f64),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterGrid {
    pub gamma: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Only used by SVR.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub gamma: f64,
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

impl ParameterGrid {
    pub fn validate(&self, method: Method) -> Result<()> {
        let check = |name: &str, v: &[f64]| {
            if v.is_empty() {
                return Err(Error::InvalidParameter(format!("{name} grid is empty")));
            }
            if let Some(bad) = v.iter().find(|x| !(**x > 0.0 && x.is_finite())) {
                return Err(Error::InvalidParameter(format!(
                    "{name} grid entries must be positive, got {bad}"
                )));
            }
            Ok(())
        };
        check("gamma", &self.gamma)?;
        check("lambda", &self.lambda)?;
        if method == Method::Svr {
            match &self.epsilon {
                Some(e) => check("epsilon", e)?,
                None => {
                    return Err(Error::InvalidParameter("SVR needs an epsilon grid".into()));
                }
            }
        }
        Ok(())
    }

    /// Cartesian product, gamma outermost and epsilon innermost. Epsilon is
    /// dropped for methods other than SVR.
    pub fn points(&self, method: Method) -> Vec<GridPoint> {
        let eps: Vec<Option<f64>> = match (&self.epsilon, method) {
            (Some(e), Method::Svr) => e.iter().map(|v| Some(*v)).collect(),
            _ => vec![None],
        };
        let mut out = Vec::with_capacity(self.gamma.len() * self.lambda.len() * eps.len());
        for &gamma in &self.gamma {
            for &lambda in &self.lambda {
                for &epsilon in &eps {
                    out.push(GridPoint {
                        gamma,
                        lambda,
                        epsilon,
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    MaxNorm,
    Rmse,
}

impl FromStr for ErrorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" | "max-norm" | "max_norm" => Ok(ErrorKind::MaxNorm),
            "rmse" => Ok(ErrorKind::Rmse),
            _ => Err(Error::InvalidParameter(format!("unknown error kind '{s}'"))),
        }
    }
}

fn row_error_norms(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<Vec<f64>> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if pred.nrows() == 0 {
        return Err(Error::Empty("error measure rows"));
    }
    Ok((pred - truth).row_iter().map(|r| r.norm()).collect())
}

/// Maximal Euclidean row error, or the root mean square of the row errors.
pub fn error_measure(pred: &DMatrix<f64>, truth: &DMatrix<f64>, kind: ErrorKind) -> Result<f64> {
    let norms = row_error_norms(pred, truth)?;
    Ok(match kind {
        ErrorKind::MaxNorm => norms.iter().copied().fold(0.0, f64::max),
        ErrorKind::Rmse => (norms.iter().map(|e| e * e).sum::<f64>() / norms.len() as f64).sqrt(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestErrors {
    pub max: f64,
    pub rmse: f64,
    /// `max_i |e_i| / |y_i|` over the rows with nonzero truth.
    pub max_rel: Option<f64>,
}

pub fn test_errors(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<TestErrors> {
    let norms = row_error_norms(pred, truth)?;
    let max_rel = norms
        .iter()
        .zip(truth.row_iter())
        .filter_map(|(e, y)| {
            let y = y.norm();
            (y > 0.0).then_some(e / y)
        })
        .reduce(f64::max);
    Ok(TestErrors {
        max: norms.iter().copied().fold(0.0, f64::max),
        rmse: (norms.iter().map(|e| e * e).sum::<f64>() / norms.len() as f64).sqrt(),
        max_rel,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Interpolation,
    Vkoga { rule: SelectionRule },
    Svr,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Interpolation,
        Method::Vkoga {
            rule: SelectionRule::PGreedy,
        },
        Method::Vkoga {
            rule: SelectionRule::FGreedy,
        },
        Method::Vkoga {
            rule: SelectionRule::FOverPGreedy,
        },
        Method::Svr,
    ];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Interpolation => "interp",
            Method::Vkoga {
                rule: SelectionRule::PGreedy,
            } => "vkoga-p",
            Method::Vkoga {
                rule: SelectionRule::FGreedy,
            } => "vkoga-f",
            Method::Vkoga {
                rule: SelectionRule::FOverPGreedy,
            } => "vkoga-fp",
            Method::Svr => "svr",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "unknown method '{s}', expected one of interp, vkoga-p, vkoga-f, vkoga-fp, svr"
                ))
            })
    }
}

/// Per-fit diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FitInfo {
    Direct,
    Greedy {
        termination: Termination,
        iterations: usize,
    },
    Svr {
        iterations: Vec<usize>,
        max_violation: f64,
        support_counts: Vec<usize>,
        empty_support: bool,
    },
}

#[derive(Clone, Debug)]
pub struct Fitted {
    pub model: Surrogate,
    pub info: FitInfo,
}

/// A training method with everything but the grid parameters fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    pub method: Method,
    /// The grid's gamma replaces the shape parameter of this family.
    pub family: KernelFamily,
    pub tol_p: f64,
    pub tol_f: f64,
    pub max_points: usize,
    pub tol_kkt: f64,
    /// SMO iteration cap for grid-point fits.
    pub svr_max_iter: usize,
    /// SMO iteration cap for the final fit.
    pub svr_final_max_iter: usize,
}

impl Trainer {
    pub fn new(method: Method, family: KernelFamily) -> Self {
        Trainer {
            method,
            family,
            tol_p: vkoga::DEFAULT_TOL_P,
            tol_f: vkoga::DEFAULT_TOL_F,
            max_points: usize::MAX,
            tol_kkt: svr::DEFAULT_TOL_KKT,
            svr_max_iter: svr::DEFAULT_MAX_ITER,
            svr_final_max_iter: svr::DEFAULT_MAX_ITER,
        }
    }

    pub fn kernel(&self, gamma: f64) -> Result<KernelSpec> {
        KernelSpec::new(self.family, gamma)
    }

    fn greedy_config(&self, rule: SelectionRule, lambda: f64) -> GreedyConfig {
        GreedyConfig {
            rule,
            tol_p: self.tol_p,
            tol_f: self.tol_f,
            max_points: self.max_points,
            lambda,
        }
    }

    fn svr_config(&self, point: &GridPoint, max_iter: usize) -> Result<SvrConfig> {
        let epsilon = point
            .epsilon
            .ok_or_else(|| Error::InvalidParameter("SVR needs epsilon".into()))?;
        Ok(SvrConfig {
            lambda: point.lambda,
            epsilon,
            tol_kkt: self.tol_kkt,
            max_iter,
        })
    }

    /// One model in the units of `data`.
    pub fn fit(&self, data: &Dataset, point: &GridPoint) -> Result<Fitted> {
        self.fit_with_cap(data, point, self.svr_final_max_iter)
    }

    fn fit_with_cap(&self, data: &Dataset, point: &GridPoint, cap: usize) -> Result<Fitted> {
        self.fit_group(data, point.gamma, std::slice::from_ref(point), cap)?
            .pop()
            .expect("one fit per point")
    }

    /// Fits every point of one gamma value. Interpolation and SVR share one
    /// kernel matrix across the group. The outer error fails the whole
    /// group.
    fn fit_group(
        &self,
        data: &Dataset,
        gamma: f64,
        points: &[GridPoint],
        svr_cap: usize,
    ) -> Result<Vec<Result<Fitted>>> {
        let kernel = self.kernel(gamma)?;
        let matrix = || -> Result<DMatrix<f64>> {
            data.check_distinct()?;
            kernel_matrix_with(Execution::Sequential, &kernel, &data.inputs, &data.inputs)
        };
        match self.method {
            Method::Interpolation => {
                let a = matrix()?;
                Ok(points
                    .iter()
                    .map(|p| {
                        let model = fit_interpolant_with_matrix(data, &kernel, p.lambda, &a)?;
                        Ok(Fitted {
                            model,
                            info: FitInfo::Direct,
                        })
                    })
                    .collect())
            }
            Method::Vkoga { rule } => Ok(points
                .iter()
                .map(|p| {
                    let (model, trace) =
                        vkoga::greedy_fit(data, &kernel, &self.greedy_config(rule, p.lambda))?;
                    Ok(Fitted {
                        model,
                        info: FitInfo::Greedy {
                            termination: trace.termination,
                            iterations: trace.entries.len(),
                        },
                    })
                })
                .collect()),
            Method::Svr => {
                let a = matrix()?;
                Ok(points
                    .iter()
                    .map(|p| {
                        let cfg = self.svr_config(p, svr_cap)?;
                        let fit = svr::fit_svr_with_matrix(
                            Execution::Sequential,
                            data,
                            &kernel,
                            &cfg,
                            None,
                            &a,
                            true,
                        )?;
                        let max_violation = fit
                            .solutions
                            .iter()
                            .map(|s| s.max_violation)
                            .fold(0.0, f64::max);
                        Ok(Fitted {
                            info: FitInfo::Svr {
                                iterations: fit.solutions.iter().map(|s| s.iterations).collect(),
                                max_violation,
                                support_counts: fit.support_counts.clone(),
                                empty_support: fit.empty_support,
                            },
                            model: fit.model,
                        })
                    })
                    .collect())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionOptions {
    pub kind: ErrorKind,
    /// Record wall-clock timings in the report.
    pub timings: bool,
    /// Repetitions of the test-set evaluation behind the online timing.
    pub online_repetitions: usize,
    pub exec: Execution,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        SelectionOptions {
            kind: ErrorKind::MaxNorm,
            timings: true,
            online_repetitions: 100,
            exec: Execution::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Protocol {
    Validation,
    KFold { k: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    #[serde(flatten)]
    pub point: GridPoint,
    /// `None` when some fit at this point failed.
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub selection_seconds: f64,
    pub offline_seconds: f64,
    /// Mean evaluation time per test sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub online_seconds_per_sample: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub method: Method,
    pub kernel: KernelFamily,
    pub error_kind: ErrorKind,
    pub protocol: Protocol,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub grid: Vec<GridScore>,
    pub selected: GridPoint,
    pub selected_score: f64,
    pub n_centers: usize,
    pub final_fit: FitInfo,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_errors: Option<TestErrors>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

#[derive(Clone, Debug)]
pub struct Selection {
    pub report: SelectionReport,
    pub model: Surrogate,
}

/// Contiguous folds of near-equal size over `0..n`.
pub fn fold_ranges(n: usize, k: usize) -> Result<Vec<Range<usize>>> {
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!(
            "number of folds must be in 1..={n}, got {k}"
        )));
    }
    Ok((0..k).map(|j| j * n / k..(j + 1) * n / k).collect())
}

/// Model selection on (train, validation); the final model is retrained on
/// their union.
pub fn validate(
    grid: &ParameterGrid,
    trainer: &Trainer,
    train: &Dataset,
    validation: &Dataset,
    test: Option<&Dataset>,
    options: &SelectionOptions,
) -> Result<Selection> {
    let full = concat(train, validation)?;
    let scaler = OutputScaler::fit(&full.outputs);
    let folds = vec![(scale(train, &scaler)?, scale(validation, &scaler)?)];
    run(
        grid,
        trainer,
        &folds,
        &scale(&full, &scaler)?,
        scaler,
        test,
        Protocol::Validation,
        (train.len(), validation.len()),
        options,
    )
}

/// k-fold cross validation over `train`; `k = 1` trains and scores on the
/// whole training set. The final model is retrained on `train`.
pub fn k_fold_cv(
    grid: &ParameterGrid,
    trainer: &Trainer,
    train: &Dataset,
    test: Option<&Dataset>,
    k: usize,
    options: &SelectionOptions,
) -> Result<Selection> {
    let ranges = fold_ranges(train.len(), k)?;
    let scaler = OutputScaler::fit(&train.outputs);
    let scaled = scale(train, &scaler)?;
    let folds = if k == 1 {
        vec![(scaled.clone(), scaled.clone())]
    } else {
        ranges
            .iter()
            .map(|r| {
                let rest: Vec<usize> = (0..train.len()).filter(|i| !r.contains(i)).collect();
                let held: Vec<usize> = r.clone().collect();
                (scaled.select(&rest), scaled.select(&held))
            })
            .collect()
    };
    run(
        grid,
        trainer,
        &folds,
        &scaled,
        scaler,
        test,
        Protocol::KFold { k },
        (train.len(), 0),
        options,
    )
}

fn concat(a: &Dataset, b: &Dataset) -> Result<Dataset> {
    if a.input_dim() != b.input_dim() || a.output_dim() != b.output_dim() {
        return Err(Error::ShapeMismatch(
            "train and validation dimensions differ".into(),
        ));
    }
    let n = a.len() + b.len();
    let stack = |x: &DMatrix<f64>, y: &DMatrix<f64>| {
        DMatrix::from_fn(n, x.ncols(), |i, j| {
            if i < x.nrows() {
                x[(i, j)]
            } else {
                y[(i - x.nrows(), j)]
            }
        })
    };
    Dataset::new(stack(&a.inputs, &b.inputs), stack(&a.outputs, &b.outputs))
}

fn scale(data: &Dataset, scaler: &OutputScaler) -> Result<Dataset> {
    data.with_outputs(scaler.scale(&data.outputs)?)
}

#[allow(clippy::too_many_arguments)]
fn run(
    grid: &ParameterGrid,
    trainer: &Trainer,
    folds: &[(Dataset, Dataset)],
    final_data: &Dataset,
    scaler: OutputScaler,
    test: Option<&Dataset>,
    protocol: Protocol,
    (n_train, n_validation): (usize, usize),
    options: &SelectionOptions,
) -> Result<Selection> {
    grid.validate(trainer.method)?;
    if let Some(t) = test {
        if t.input_dim() != final_data.input_dim() || t.output_dim() != final_data.output_dim() {
            return Err(Error::ShapeMismatch(
                "test set dimensions differ from training".into(),
            ));
        }
    }
    let points = grid.points(trainer.method);
    let per_gamma = points.len() / grid.gamma.len();

    let started = Instant::now();
    // One job per (gamma, fold); each returns the fold errors of its points.
    let jobs = grid.gamma.len() * folds.len();
    let results: Vec<Vec<std::result::Result<f64, String>>> =
        par::map_indices(options.exec, jobs, |job| {
            let (g, f) = (job / folds.len(), job % folds.len());
            let group = &points[g * per_gamma..(g + 1) * per_gamma];
            let (fit_on, score_on) = &folds[f];
            let fits = match trainer.fit_group(fit_on, grid.gamma[g], group, trainer.svr_max_iter) {
                Ok(f) => f,
                Err(e) => return group.iter().map(|_| Err(e.to_string())).collect(),
            };
            fits.into_iter()
                .map(|fitted| {
                    let fitted = fitted.map_err(|e| e.to_string())?;
                    let pred = fitted
                        .model
                        .evaluate(&score_on.inputs)
                        .map_err(|e| e.to_string())?;
                    let e = error_measure(&pred, &score_on.outputs, options.kind)
                        .map_err(|e| e.to_string())?;
                    if e.is_finite() {
                        Ok(e)
                    } else {
                        Err(format!("non-finite validation error {e}"))
                    }
                })
                .collect()
        });
    let selection_seconds = started.elapsed().as_secs_f64();

    let scores: Vec<GridScore> = points
        .iter()
        .enumerate()
        .map(|(idx, point)| {
            let (g, within) = (idx / per_gamma, idx % per_gamma);
            let mut sum = 0.0;
            for f in 0..folds.len() {
                match &results[g * folds.len() + f][within] {
                    Ok(e) => sum += e,
                    Err(msg) => {
                        return GridScore {
                            point: *point,
                            score: None,
                            failure: Some(format!("fold {}: {msg}", f + 1)),
                        }
                    }
                }
            }
            GridScore {
                point: *point,
                score: Some(sum / folds.len() as f64),
                failure: None,
            }
        })
        .collect();

    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(v) = s.score {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((i, v));
            }
        }
    }
    let Some((best_idx, selected_score)) = best else {
        return Err(Error::NotConverged(format!(
            "all {} grid points failed; first failure: {}",
            scores.len(),
            scores[0].failure.as_deref().unwrap_or("unknown")
        )));
    };
    let selected = points[best_idx];

    let started = Instant::now();
    let Fitted { mut model, info } =
        trainer.fit_with_cap(final_data, &selected, trainer.svr_final_max_iter)?;
    let offline_seconds = started.elapsed().as_secs_f64();
    model.output_scaler = Some(scaler);

    let mut online_seconds_per_sample = None;
    let test_errors = match test {
        Some(t) => {
            let pred = model.evaluate(&t.inputs)?;
            if options.timings && options.online_repetitions > 0 {
                let started = Instant::now();
                for _ in 0..options.online_repetitions {
                    std::hint::black_box(model.evaluate(std::hint::black_box(&t.inputs))?);
                }
                online_seconds_per_sample = Some(
                    started.elapsed().as_secs_f64() / (options.online_repetitions * t.len()) as f64,
                );
            }
            Some(test_errors(&pred, &t.outputs)?)
        }
        None => None,
    };

    let report = SelectionReport {
        method: trainer.method,
        kernel: trainer.family,
        error_kind: options.kind,
        protocol,
        n_train,
        n_validation,
        n_test: test.map_or(0, |t| t.len()),
        grid: scores,
        selected,
        selected_score,
        n_centers: model.n_centers(),
        final_fit: info,
        test_errors,
        timings: options.timings.then_some(Timings {
            selection_seconds,
            offline_seconds,
            online_seconds_per_sample,
        }),
    };
    Ok(Selection { report, model })
}
