use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{euclidean, RowMajor};

/// Inputs closer than this in Euclidean distance count as duplicates.
pub const DISTINCT_TOL: f64 = 1e-12;

/// Paired samples: `inputs` is n x d, `outputs` is n x q.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: DMatrix<f64>,
    pub outputs: DMatrix<f64>,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, outputs: DMatrix<f64>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::Empty("dataset"));
        }
        if inputs.ncols() == 0 || outputs.ncols() == 0 {
            return Err(Error::Empty("input or output dimension"));
        }
        if inputs.nrows() != outputs.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "{} input rows but {} output rows",
                inputs.nrows(),
                outputs.nrows()
            )));
        }
        Ok(Dataset { inputs, outputs })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.outputs.ncols()
    }

    /// Rows `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            outputs: self.outputs.select_rows(indices),
        }
    }

    pub fn with_outputs(&self, outputs: DMatrix<f64>) -> Result<Dataset> {
        Dataset::new(self.inputs.clone(), outputs)
    }

    /// Fails on the first pair of inputs closer than [`DISTINCT_TOL`].
    pub fn check_distinct(&self) -> Result<()> {
        let pts = RowMajor::from_matrix(&self.inputs);
        for i in 0..pts.rows {
            for j in 0..i {
                let distance = euclidean(pts.row(i), pts.row(j));
                if distance <= DISTINCT_TOL {
                    return Err(Error::DuplicatePoints {
                        first: j,
                        second: i,
                        distance,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Per-column affine map of the outputs onto `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl OutputScaler {
    pub fn fit(y: &DMatrix<f64>) -> Self {
        let (min, max) = y.column_iter().map(|c| (c.min(), c.max())).unzip();
        OutputScaler { min, max }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.min.len() != self.max.len() {
            return Err(Error::ShapeMismatch(
                "output scaler min/max lengths differ".into(),
            ));
        }
        if self.min.iter().zip(&self.max).any(|(a, b)| !(b >= a)) {
            return Err(Error::InvalidParameter(
                "output scaler has max < min".into(),
            ));
        }
        Ok(())
    }

    /// Slope of the inverse map for column `j`; 0 for constant columns.
    #[inline]
    pub fn half_range(&self, j: usize) -> f64 {
        0.5 * (self.max[j] - self.min[j])
    }

    #[inline]
    pub fn scale_value(&self, j: usize, v: f64) -> f64 {
        let range = self.max[j] - self.min[j];
        if range > 0.0 {
            2.0 * (v - self.min[j]) / range - 1.0
        } else {
            0.0
        }
    }

    #[inline]
    pub fn unscale_value(&self, j: usize, v: f64) -> f64 {
        let range = self.max[j] - self.min[j];
        if range > 0.0 {
            self.min[j] + (v + 1.0) * 0.5 * range
        } else {
            self.min[j]
        }
    }

    pub fn scale(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_cols(y)?;
        Ok(DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| {
            self.scale_value(j, y[(i, j)])
        }))
    }

    pub fn unscale(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_cols(y)?;
        Ok(DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| {
            self.unscale_value(j, y[(i, j)])
        }))
    }

    fn check_cols(&self, y: &DMatrix<f64>) -> Result<()> {
        if y.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: y.ncols(),
            });
        }
        Ok(())
    }
}

/// Maps each output column affinely onto `[-1, 1]`.
pub fn scale_outputs(y: &DMatrix<f64>) -> (DMatrix<f64>, OutputScaler) {
    let scaler = OutputScaler::fit(y);
    let scaled = scaler.scale(y).expect("scaler fitted on the same matrix");
    (scaled, scaler)
}

pub fn unscale_outputs(scaled: &DMatrix<f64>, scaler: &OutputScaler) -> Result<DMatrix<f64>> {
    scaler.unscale(scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn affine_endpoints() {
        let y = DMatrix::from_column_slice(3, 1, &[0.0, 5.0, 10.0]);
        let (s, _) = scale_outputs(&y);
        assert_eq!(s.as_slice(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let y = DMatrix::from_column_slice(3, 1, &[3.0, 3.0, 3.0]);
        let (s, scaler) = scale_outputs(&y);
        assert_eq!(s.as_slice(), &[0.0, 0.0, 0.0]);
        assert_eq!(unscale_outputs(&s, &scaler).unwrap(), y);
    }

    #[test]
    fn dataset_shape_checks() {
        let x = DMatrix::<f64>::zeros(3, 2);
        assert!(Dataset::new(x.clone(), DMatrix::zeros(2, 1)).is_err());
        assert!(Dataset::new(DMatrix::zeros(0, 2), DMatrix::zeros(0, 1)).is_err());
        assert!(Dataset::new(x, DMatrix::zeros(3, 1)).is_ok());
    }

    #[test]
    fn duplicates_are_reported() {
        let x = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let d = Dataset::new(x, DMatrix::zeros(3, 1)).unwrap();
        assert!(matches!(
            d.check_distinct(),
            Err(Error::DuplicatePoints {
                first: 0,
                second: 2,
                ..
            })
        ));
    }

    proptest! {
        #[test]
        fn scale_round_trip(
            vals in prop::collection::vec(-10.0f64..10.0, 1..60),
            q in 1usize..4,
        ) {
            let n = vals.len().div_ceil(q);
            let y = DMatrix::from_fn(n, q, |i, j| vals[(i * q + j) % vals.len()]);
            let (s, scaler) = scale_outputs(&y);
            prop_assert!(s.iter().all(|v| (-1.0..=1.0).contains(v)));
            let back = unscale_outputs(&s, &scaler).unwrap();
            for (a, b) in back.iter().zip(y.iter()) {
                prop_assert!((a - b).abs() <= 1e-14 * b.abs().max(1.0));
            }
        }
    }
}
