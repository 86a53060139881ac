//! Matrix-free greedy kernel approximation (VKOGA) via the Newton basis.
//!
//! Only the kernel columns of the selected points are ever generated. The
//! state keeps the Newton basis values `V` on all training points, the
//! inverse `C` of its triangular block on the selected points, the Newton
//! coefficients, the residual and the squared power function. The expansion
//! coefficients are recovered once at the end from `C` and the Newton
//! coefficients.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, OutputScaler};
use crate::error::{Error, Result};
use crate::interpolation::check_lambda;
use crate::kernel::{self, dot, KernelSpec, RowMajor};
use crate::par::{self, Execution};
use crate::surrogate::Surrogate;

/// Pivots and power-function values below this are treated as zero.
pub const DEGENERACY_TOL: f64 = 1e-13;

/// Stopping tolerance on the squared power function.
pub const DEFAULT_TOL_P: f64 = 1e-12;
/// Stopping tolerance on the maximal training residual.
pub const DEFAULT_TOL_F: f64 = 1e-6;

const CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    PGreedy,
    FGreedy,
    FOverPGreedy,
}

impl SelectionRule {
    pub const ALL: [SelectionRule; 3] = [
        SelectionRule::PGreedy,
        SelectionRule::FGreedy,
        SelectionRule::FOverPGreedy,
    ];
}

impl fmt::Display for SelectionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionRule::PGreedy => "p-greedy",
            SelectionRule::FGreedy => "f-greedy",
            SelectionRule::FOverPGreedy => "f/p-greedy",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyConfig {
    pub rule: SelectionRule,
    pub tol_p: f64,
    pub tol_f: f64,
    /// Clamped to the number of training points.
    pub max_points: usize,
    pub lambda: f64,
}

impl GreedyConfig {
    pub fn new(rule: SelectionRule) -> Self {
        GreedyConfig {
            rule,
            tol_p: DEFAULT_TOL_P,
            tol_f: DEFAULT_TOL_F,
            max_points: usize::MAX,
            lambda: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol_p > 0.0) || !(self.tol_f > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "greedy tolerances must be positive, got tol_p = {}, tol_f = {}",
                self.tol_p, self.tol_f
            )));
        }
        if self.max_points == 0 {
            return Err(Error::InvalidParameter(
                "max_points must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    PowerTolerance,
    ResidualTolerance,
    MaxPoints,
    /// No admissible candidate or a vanishing pivot.
    Degenerate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub picked_index: usize,
    pub max_power2: f64,
    pub max_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyTrace {
    pub entries: Vec<TraceEntry>,
    pub termination: Termination,
}

impl GreedyTrace {
    pub fn degenerate(&self) -> bool {
        self.termination == Termination::Degenerate
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,picked_index,max_power2,max_residual\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{:e},{:e}\n",
                e.iteration, e.picked_index, e.max_power2, e.max_residual
            ));
        }
        out
    }
}

/// Incremental Newton-basis state over a fixed training set.
#[derive(Clone, Debug)]
pub struct GreedyState {
    kernel: KernelSpec,
    lambda: f64,
    exec: Execution,
    points: RowMajor,
    n: usize,
    q: usize,
    cap: usize,
    selected: Vec<usize>,
    is_selected: Vec<bool>,
    /// n x cap, row-major; only the first `selected.len()` columns are live.
    v: Vec<f64>,
    /// Rows of the lower-triangular inverse; row k has k + 1 entries.
    c_inv: Vec<Vec<f64>>,
    /// Newton coefficients, one q-row per selected point.
    newton_coeffs: Vec<Vec<f64>>,
    /// n x q, row-major.
    residual: Vec<f64>,
    power2: Vec<f64>,
}

impl GreedyState {
    /// Empty state. `capacity` bounds the number of Newton columns.
    pub fn new(data: &Dataset, kernel: &KernelSpec, lambda: f64, capacity: usize) -> Result<Self> {
        check_lambda(kernel, lambda)?;
        let points = RowMajor::from_matrix(&data.inputs);
        kernel::check_points(kernel, &points)?;
        let n = data.len();
        let q = data.output_dim();
        let cap = capacity.clamp(1, n);
        let residual = data.outputs.transpose().as_slice().to_vec();
        let power2 = (0..n)
            .map(|i| kernel.diag_unchecked(points.row(i)) + lambda)
            .collect();
        Ok(GreedyState {
            kernel: *kernel,
            lambda,
            exec: Execution::default(),
            points,
            n,
            q,
            cap,
            selected: Vec::with_capacity(cap),
            is_selected: vec![false; n],
            v: vec![0.0; n * cap],
            c_inv: Vec::with_capacity(cap),
            newton_coeffs: Vec::with_capacity(cap),
            residual,
            power2,
        })
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn power2(&self) -> &[f64] {
        &self.power2
    }

    pub fn residual_row(&self, i: usize) -> &[f64] {
        &self.residual[i * self.q..(i + 1) * self.q]
    }

    pub fn residual_norm(&self, i: usize) -> f64 {
        self.residual_row(i)
            .iter()
            .map(|r| r * r)
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_power2(&self) -> f64 {
        self.power2
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_residual(&self) -> f64 {
        (0..self.n)
            .map(|i| self.residual_norm(i))
            .fold(0.0, f64::max)
    }

    /// `V(I_N, :)`, N x N in selection order.
    pub fn newton_block(&self) -> DMatrix<f64> {
        let m = self.selected.len();
        DMatrix::from_fn(m, m, |r, c| self.v[self.selected[r] * self.cap + c])
    }

    /// Newton basis values on every training point, n x N.
    pub fn newton_values(&self) -> DMatrix<f64> {
        let m = self.selected.len();
        DMatrix::from_fn(self.n, m, |r, c| self.v[r * self.cap + c])
    }

    /// The lower-triangular inverse of [`Self::newton_block`].
    pub fn inverse(&self) -> DMatrix<f64> {
        let m = self.selected.len();
        DMatrix::from_fn(m, m, |r, c| if c <= r { self.c_inv[r][c] } else { 0.0 })
    }

    pub fn newton_coefficients(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.selected.len(), self.q, |r, c| self.newton_coeffs[r][c])
    }

    /// Index to add next under `rule`; lowest index wins ties. `None` when
    /// no unselected point has a usable power-function value.
    pub fn select_next(&self, rule: SelectionRule) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..self.n {
            if self.is_selected[i] {
                continue;
            }
            let p2 = self.power2[i];
            let score = match rule {
                SelectionRule::PGreedy => {
                    if p2 < DEGENERACY_TOL {
                        continue;
                    }
                    p2.sqrt()
                }
                SelectionRule::FGreedy => self.residual_norm(i),
                SelectionRule::FOverPGreedy => {
                    if p2 < DEGENERACY_TOL {
                        continue;
                    }
                    self.residual_norm(i) / p2.sqrt()
                }
            };
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((i, score));
            }
        }
        best.map(|(i, _)| i)
    }

    /// Appends the Newton basis function of training point `pick`.
    pub fn newton_step(&mut self, pick: usize) -> Result<()> {
        if pick >= self.n {
            return Err(Error::InvalidParameter(format!(
                "pick {pick} out of range for {} points",
                self.n
            )));
        }
        if self.is_selected[pick] {
            return Err(Error::InvalidParameter(format!(
                "index {pick} already selected"
            )));
        }
        let m = self.selected.len();
        if m == self.cap {
            return Err(Error::InvalidParameter(format!(
                "greedy state is full ({} columns)",
                self.cap
            )));
        }
        if self.power2[pick] < DEGENERACY_TOL {
            return Err(Error::DegeneratePivot {
                index: pick,
                pivot: self.power2[pick],
            });
        }

        let cap = self.cap;
        let prev: Vec<f64> = self.v[pick * cap..pick * cap + m].to_vec();
        let x_pick = self.points.row(pick).to_vec();
        let kern = self.kernel;
        let points = &self.points;
        let v = &self.v;

        // Column of K_lambda at the pick, projected onto the complement of
        // the current Newton basis.
        let mut col = vec![0.0; self.n];
        par::fill_rows(self.exec, &mut col, CHUNK, |chunk, out| {
            let start = chunk * CHUNK;
            for (off, o) in out.iter_mut().enumerate() {
                let i = start + off;
                let k = kern.eval_unchecked(points.row(i), &x_pick);
                *o = k - dot(&v[i * cap..i * cap + m], &prev);
            }
        });
        col[pick] += self.lambda;
        // Earlier Newton functions vanish at earlier picks; the projection
        // only reproduces that up to rounding.
        for &s in &self.selected {
            col[s] = 0.0;
        }

        let pivot = col[pick];
        if !(pivot >= DEGENERACY_TOL) {
            return Err(Error::DegeneratePivot { index: pick, pivot });
        }
        let w = pivot.sqrt();
        col.iter_mut().for_each(|c| *c /= w);

        let cn: Vec<f64> = self.residual_row(pick).iter().map(|r| r / w).collect();
        for (i, &vi) in col.iter().enumerate() {
            self.power2[i] -= vi * vi;
            let row = &mut self.residual[i * self.q..(i + 1) * self.q];
            for (r, c) in row.iter_mut().zip(&cn) {
                *r -= c * vi;
            }
            self.v[i * cap + m] = vi;
        }

        let new_row = inverse_new_row(&self.c_inv, &prev, w);
        self.c_inv.push(new_row);
        self.newton_coeffs.push(cn);
        self.selected.push(pick);
        self.is_selected[pick] = true;
        Ok(())
    }

    /// Expansion coefficients `alpha = C^T c`, N x q, in selection order.
    pub fn expansion_coefficients(&self) -> DMatrix<f64> {
        let m = self.selected.len();
        let mut alpha = DMatrix::zeros(m, self.q);
        for (k, row) in self.c_inv.iter().enumerate() {
            for (j, &cjk) in row.iter().enumerate() {
                for c in 0..self.q {
                    alpha[(j, c)] += cjk * self.newton_coeffs[k][c];
                }
            }
        }
        alpha
    }

    /// Squared power function at arbitrary points outside the training set.
    pub fn power2_at(&self, points: &DMatrix<f64>) -> Result<Vec<f64>> {
        if points.ncols() != self.points.dim {
            return Err(Error::DimensionMismatch {
                expected: self.points.dim,
                found: points.ncols(),
            });
        }
        let pts = RowMajor::from_matrix(points);
        kernel::check_points(&self.kernel, &pts)?;
        let centers: Vec<&[f64]> = self.selected.iter().map(|&i| self.points.row(i)).collect();
        Ok((0..pts.rows)
            .map(|r| {
                let x = pts.row(r);
                let kx: Vec<f64> = centers
                    .iter()
                    .map(|c| self.kernel.eval_unchecked(x, c))
                    .collect();
                let sum_sq: f64 = self
                    .c_inv
                    .iter()
                    .map(|row| {
                        let vk = dot(row, &kx[..row.len()]);
                        vk * vk
                    })
                    .sum();
                self.kernel.diag_unchecked(x) + self.lambda - sum_sq
            })
            .collect())
    }

    pub fn to_surrogate(&self) -> Result<Surrogate> {
        if self.selected.is_empty() {
            return Err(Error::Empty("greedy selection"));
        }
        let centers = DMatrix::from_fn(self.selected.len(), self.points.dim, |r, c| {
            self.points.row(self.selected[r])[c]
        });
        Surrogate::new(
            self.kernel,
            centers,
            self.expansion_coefficients(),
            None,
            self.lambda,
        )
    }
}

/// Last row of the inverse of `[[V, 0], [v^T, w]]` given the rows of `V^{-1}`.
fn inverse_new_row(c_prev: &[Vec<f64>], v: &[f64], w: f64) -> Vec<f64> {
    let m = c_prev.len();
    let mut row = vec![0.0; m + 1];
    for (j, cj) in c_prev.iter().enumerate() {
        let vj = v[j];
        for (k, &cjk) in cj.iter().enumerate() {
            row[k] += vj * cjk;
        }
    }
    row.iter_mut().take(m).for_each(|r| *r = -*r / w);
    row[m] = 1.0 / w;
    row
}

/// Inverse of the lower-triangular matrix `[[V, 0], [v^T, w]]` from
/// `c_prev = V^{-1}` by appending one row.
pub fn triangular_inverse_rowupdate(
    c_prev: &DMatrix<f64>,
    v: &[f64],
    w: f64,
) -> Result<DMatrix<f64>> {
    let m = c_prev.nrows();
    if !c_prev.is_square() || v.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "inverse is {}x{} but the new row has {} entries",
            c_prev.nrows(),
            c_prev.ncols(),
            v.len()
        )));
    }
    if !(w.abs() >= DEGENERACY_TOL) {
        return Err(Error::DegeneratePivot { index: m, pivot: w });
    }
    let rows: Vec<Vec<f64>> = (0..m)
        .map(|r| (0..=r).map(|c| c_prev[(r, c)]).collect())
        .collect();
    let last = inverse_new_row(&rows, v, w);
    Ok(DMatrix::from_fn(m + 1, m + 1, |r, c| {
        if r < m {
            if c < m {
                c_prev[(r, c)]
            } else {
                0.0
            }
        } else {
            last[c]
        }
    }))
}

/// Full greedy run; returns the final state along with the trace.
pub fn greedy_run(
    data: &Dataset,
    kernel: &KernelSpec,
    config: &GreedyConfig,
) -> Result<(GreedyState, GreedyTrace)> {
    config.validate()?;
    data.check_distinct()?;
    let max_points = config.max_points.min(data.len());
    let mut state = GreedyState::new(data, kernel, config.lambda, max_points)?;
    let mut entries = Vec::new();
    let termination = loop {
        if state.selected().len() >= max_points {
            break Termination::MaxPoints;
        }
        let Some(pick) = state.select_next(config.rule) else {
            break Termination::Degenerate;
        };
        match state.newton_step(pick) {
            Ok(()) => {}
            Err(Error::DegeneratePivot { .. }) => break Termination::Degenerate,
            Err(e) => return Err(e),
        }
        let max_power2 = state.max_power2();
        let max_residual = state.max_residual();
        entries.push(TraceEntry {
            iteration: entries.len() + 1,
            picked_index: pick,
            max_power2,
            max_residual,
        });
        if max_power2 <= config.tol_p {
            break Termination::PowerTolerance;
        }
        if config.rule != SelectionRule::PGreedy && max_residual <= config.tol_f {
            break Termination::ResidualTolerance;
        }
    };
    Ok((
        state,
        GreedyTrace {
            entries,
            termination,
        },
    ))
}

/// Greedy sparse surrogate of `data` in the units of its outputs.
pub fn greedy_fit(
    data: &Dataset,
    kernel: &KernelSpec,
    config: &GreedyConfig,
) -> Result<(Surrogate, GreedyTrace)> {
    let (state, trace) = greedy_run(data, kernel, config)?;
    if state.selected().is_empty() {
        return Err(Error::NotConverged(
            "greedy selection found no admissible point".into(),
        ));
    }
    Ok((state.to_surrogate()?, trace))
}

/// [`greedy_fit`] on outputs mapped to `[-1, 1]`; the model predicts in the
/// original units.
pub fn greedy_fit_scaled(
    data: &Dataset,
    kernel: &KernelSpec,
    config: &GreedyConfig,
) -> Result<(Surrogate, GreedyTrace)> {
    let scaler = OutputScaler::fit(&data.outputs);
    let scaled = data.with_outputs(scaler.scale(&data.outputs)?)?;
    let (mut model, trace) = greedy_fit(&scaled, kernel, config)?;
    model.output_scaler = Some(scaler);
    Ok((model, trace))
}
