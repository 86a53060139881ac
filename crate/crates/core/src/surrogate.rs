//! The sparse kernel expansion `s(x) = sum_j alpha_j K(x, x_j)` shared by
//! every training method.

use nalgebra::DMatrix;

use crate::data::OutputScaler;
use crate::error::{Error, Result};
use crate::kernel::{self, KernelSpec, RowMajor};
use crate::par::Execution;

#[derive(Clone, Debug, PartialEq)]
pub struct Surrogate {
    pub kernel: KernelSpec,
    /// N x d.
    pub centers: DMatrix<f64>,
    /// N x q; row j is the coefficient row of center j.
    pub coefficients: DMatrix<f64>,
    /// Applied inversely to every prediction. `None` means the model was
    /// trained in the original output units.
    pub output_scaler: Option<OutputScaler>,
    pub lambda: f64,
    centers_rm: RowMajor,
}

impl Surrogate {
    pub fn new(
        kernel: KernelSpec,
        centers: DMatrix<f64>,
        coefficients: DMatrix<f64>,
        output_scaler: Option<OutputScaler>,
        lambda: f64,
    ) -> Result<Self> {
        kernel.validate()?;
        if centers.nrows() == 0 {
            return Err(Error::Empty("surrogate centers"));
        }
        if centers.nrows() != coefficients.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "{} centers but {} coefficient rows",
                centers.nrows(),
                coefficients.nrows()
            )));
        }
        if coefficients.ncols() == 0 {
            return Err(Error::Empty("output dimension"));
        }
        if let Some(s) = &output_scaler {
            s.validate()?;
            if s.dim() != coefficients.ncols() {
                return Err(Error::DimensionMismatch {
                    expected: coefficients.ncols(),
                    found: s.dim(),
                });
            }
        }
        let centers_rm = RowMajor::from_matrix(&centers);
        kernel::check_points(&kernel, &centers_rm)?;
        Ok(Surrogate {
            kernel,
            centers,
            coefficients,
            output_scaler,
            lambda,
            centers_rm,
        })
    }

    pub fn n_centers(&self) -> usize {
        self.centers.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.coefficients.ncols()
    }

    fn check_input_dim(&self, d: usize) -> Result<()> {
        if d != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: d,
            });
        }
        Ok(())
    }

    /// `A_te * coefficients` in the units the model was trained in.
    pub fn evaluate_scaled(&self, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input_dim(points.ncols())?;
        let rows = RowMajor::from_matrix(points);
        kernel::check_points(&self.kernel, &rows)?;
        let block =
            kernel::kernel_block(Execution::default(), &self.kernel, &rows, &self.centers_rm);
        let a_te = DMatrix::from_row_slice(rows.rows, self.n_centers(), &block);
        Ok(a_te * &self.coefficients)
    }

    /// Predictions in original output units.
    pub fn evaluate(&self, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let s = self.evaluate_scaled(points)?;
        match &self.output_scaler {
            Some(scaler) => scaler.unscale(&s),
            None => Ok(s),
        }
    }

    /// Single-point prediction in original units, without allocating a
    /// kernel matrix.
    pub fn evaluate_point(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input_dim(x.len())?;
        // Validates the domain once via a checked evaluation.
        self.kernel.eval(x, self.centers_rm.row(0))?;
        let mut out = vec![0.0; self.output_dim()];
        self.accumulate_point(x, &mut out);
        Ok(out)
    }

    /// Unchecked single-point prediction in original units.
    pub(crate) fn accumulate_point(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for j in 0..self.n_centers() {
            let k = self.kernel.eval_unchecked(x, self.centers_rm.row(j));
            if k != 0.0 {
                for (c, o) in out.iter_mut().enumerate() {
                    *o += k * self.coefficients[(j, c)];
                }
            }
        }
        if let Some(scaler) = &self.output_scaler {
            for (c, o) in out.iter_mut().enumerate() {
                *o = scaler.unscale_value(c, *o);
            }
        }
    }

    /// Jacobian of the prediction at `x` in original units, as a d x q
    /// matrix `D alpha` with D's columns `grad_x K(x, x_j)`.
    pub(crate) fn jacobian_unchecked(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.input_dim();
        let q = self.output_dim();
        let mut jac = DMatrix::zeros(d, q);
        let mut grad = vec![0.0; d];
        for j in 0..self.n_centers() {
            self.kernel
                .grad_unchecked(x, self.centers_rm.row(j), &mut grad);
            for c in 0..q {
                let a = self.coefficients[(j, c)];
                if a != 0.0 {
                    for (k, g) in grad.iter().enumerate() {
                        jac[(k, c)] += g * a;
                    }
                }
            }
        }
        if let Some(scaler) = &self.output_scaler {
            for c in 0..q {
                let s = scaler.half_range(c);
                jac.column_mut(c).scale_mut(s);
            }
        }
        jac
    }

    /// Same model with every prediction multiplied by `a`.
    pub fn scaled_by(&self, a: f64) -> Surrogate {
        let mut m = self.clone();
        match &mut m.output_scaler {
            Some(s) => {
                for (lo, hi) in s.min.iter_mut().zip(s.max.iter_mut()) {
                    let (l, h) = (*lo * a, *hi * a);
                    *lo = l.min(h);
                    *hi = l.max(h);
                }
                if a < 0.0 {
                    m.coefficients *= -1.0;
                }
            }
            None => m.coefficients *= a,
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_center_at_its_center() {
        let k = KernelSpec::gaussian(1.3).unwrap();
        let c = DMatrix::from_row_slice(1, 2, &[0.2, 0.4]);
        let coef = DMatrix::from_element(1, 3, 1.0);
        let scaler = OutputScaler {
            min: vec![0.0, -2.0, 5.0],
            max: vec![2.0, 2.0, 5.0],
        };
        let s = Surrogate::new(k, c.clone(), coef, Some(scaler.clone()), 0.0).unwrap();
        let out = s.evaluate(&c).unwrap();
        for j in 0..3 {
            assert_eq!(out[(0, j)], scaler.unscale_value(j, 1.0));
        }
        assert_eq!(
            s.evaluate_point(&[0.2, 0.4]).unwrap(),
            out.row(0).iter().copied().collect::<Vec<_>>()
        );
    }

    #[test]
    fn zero_coefficients_give_zero() {
        let k = KernelSpec::gaussian(1.0).unwrap();
        let c = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let s = Surrogate::new(k, c, DMatrix::zeros(2, 2), None, 0.0).unwrap();
        let out = s
            .evaluate(&DMatrix::from_row_slice(3, 1, &[0.3, -1.0, 4.0]))
            .unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let k = KernelSpec::gaussian(1.0).unwrap();
        let s = Surrogate::new(k, DMatrix::zeros(1, 2), DMatrix::zeros(1, 1), None, 0.0).unwrap();
        assert!(matches!(
            s.evaluate(&DMatrix::zeros(4, 3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
