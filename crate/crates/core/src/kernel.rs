//! Kernel families, pairwise distances and kernel-matrix assembly.
//!
//! Point sets are `DMatrix<f64>` values with one point per row. Hot loops work
//! on a row-major copy ([`RowMajor`]) so each point is a contiguous slice.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WendlandSmoothness {
    /// `(1 - r)_+^2`, continuous only.
    K0,
    /// `(1 - r)_+^4 (4r + 1)`, twice continuously differentiable.
    K2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KernelFamily {
    Gaussian,
    Polynomial { a: f64, p: u32 },
    BrownianBridge,
    Wendland { smoothness: WendlandSmoothness },
}

impl KernelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::Polynomial { .. } => "polynomial",
            KernelFamily::BrownianBridge => "brownian_bridge",
            KernelFamily::Wendland {
                smoothness: WendlandSmoothness::K0,
            } => "wendland_k0",
            KernelFamily::Wendland {
                smoothness: WendlandSmoothness::K2,
            } => "wendland_k2",
        }
    }

    /// Strictly positive definite families; only these admit `lambda = 0`.
    pub fn is_strictly_positive_definite(&self) -> bool {
        !matches!(self, KernelFamily::Polynomial { .. })
    }

    pub fn is_differentiable(&self) -> bool {
        matches!(
            self,
            KernelFamily::Gaussian
                | KernelFamily::Polynomial { .. }
                | KernelFamily::Wendland {
                    smoothness: WendlandSmoothness::K2
                }
        )
    }

    fn is_radial(&self) -> bool {
        matches!(self, KernelFamily::Gaussian | KernelFamily::Wendland { .. })
    }
}

/// A kernel family together with its shape parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Shape parameter of the radial families; unused otherwise.
    pub gamma: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, gamma: f64) -> Result<Self> {
        let spec = KernelSpec { family, gamma };
        spec.validate()?;
        Ok(spec)
    }

    pub fn gaussian(gamma: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, gamma)
    }

    pub fn polynomial(a: f64, p: u32) -> Result<Self> {
        Self::new(KernelFamily::Polynomial { a, p }, 1.0)
    }

    pub fn brownian_bridge() -> Self {
        KernelSpec {
            family: KernelFamily::BrownianBridge,
            gamma: 1.0,
        }
    }

    pub fn wendland(smoothness: WendlandSmoothness, gamma: f64) -> Result<Self> {
        Self::new(KernelFamily::Wendland { smoothness }, gamma)
    }

    /// Same family with a different shape parameter.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(self.family, gamma)
    }

    pub fn validate(&self) -> Result<()> {
        if self.family.is_radial() && !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "shape parameter must be positive and finite, got {}",
                self.gamma
            )));
        }
        if let KernelFamily::Polynomial { a, p } = self.family {
            if !(a >= 0.0 && a.is_finite()) || p < 1 {
                return Err(Error::InvalidParameter(format!(
                    "polynomial kernel needs a >= 0 and p >= 1, got a = {a}, p = {p}"
                )));
            }
        }
        Ok(())
    }

    /// Checks that points of dimension `dim` are admissible for this family.
    pub fn check_dimension(&self, dim: usize) -> Result<()> {
        if dim == 0 {
            return Err(Error::Empty("point dimension"));
        }
        if matches!(self.family, KernelFamily::Wendland { .. }) && dim > 3 {
            return Err(Error::Domain(format!(
                "Wendland kernels are positive definite only up to dimension 3, got {dim}"
            )));
        }
        Ok(())
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if self.family == KernelFamily::BrownianBridge {
            if let Some(v) = x.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
                return Err(Error::Domain(format!(
                    "Brownian bridge kernel needs coordinates in (0, 1), got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Radial profile `phi(gamma * r)`.
    #[inline]
    fn radial(&self, r: f64) -> f64 {
        let t = self.gamma * r;
        match self.family {
            KernelFamily::Gaussian => (-(t * t)).exp(),
            KernelFamily::Wendland { smoothness } => {
                if t >= 1.0 {
                    return 0.0;
                }
                let u = 1.0 - t;
                match smoothness {
                    WendlandSmoothness::K0 => u * u,
                    WendlandSmoothness::K2 => {
                        let u2 = u * u;
                        u2 * u2 * (4.0 * t + 1.0)
                    }
                }
            }
            _ => unreachable!("radial profile of a non-radial kernel"),
        }
    }

    /// Evaluation without dimension or domain checks.
    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Gaussian | KernelFamily::Wendland { .. } => self.radial(euclidean(x, y)),
            KernelFamily::Polynomial { a, p } => (dot(x, y) + a).powi(p as i32),
            KernelFamily::BrownianBridge => {
                x.iter().zip(y).map(|(&u, &v)| u.min(v) - u * v).product()
            }
        }
    }

    /// `K(x, x)`.
    #[inline]
    pub(crate) fn diag_unchecked(&self, x: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Gaussian | KernelFamily::Wendland { .. } => 1.0,
            _ => self.eval_unchecked(x, x),
        }
    }

    /// `K(x, y)`.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                found: y.len(),
            });
        }
        self.check_dimension(x.len())?;
        self.check_point(x)?;
        self.check_point(y)?;
        Ok(self.eval_unchecked(x, y))
    }

    /// Writes `grad_x K(x, y)` into `out`; the family must be differentiable.
    #[inline]
    pub(crate) fn grad_unchecked(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        match self.family {
            KernelFamily::Gaussian => {
                let g2 = self.gamma * self.gamma;
                let k = self.radial(euclidean(x, y));
                for ((o, &u), &v) in out.iter_mut().zip(x).zip(y) {
                    *o = -2.0 * g2 * (u - v) * k;
                }
            }
            KernelFamily::Polynomial { a, p } => {
                let scale = p as f64 * (dot(x, y) + a).powi(p as i32 - 1);
                for (o, &v) in out.iter_mut().zip(y) {
                    *o = scale * v;
                }
            }
            KernelFamily::Wendland {
                smoothness: WendlandSmoothness::K2,
            } => {
                let t = self.gamma * euclidean(x, y);
                if t >= 1.0 {
                    out.iter_mut().for_each(|o| *o = 0.0);
                    return;
                }
                let u = 1.0 - t;
                let scale = -20.0 * self.gamma * self.gamma * u * u * u;
                for ((o, &a), &b) in out.iter_mut().zip(x).zip(y) {
                    *o = scale * (a - b);
                }
            }
            _ => unreachable!("gradient of a non-differentiable kernel"),
        }
    }

    /// `grad_x K(x, y)`.
    pub fn grad_x(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        if !self.family.is_differentiable() {
            return Err(Error::NotDifferentiable(self.family.name()));
        }
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                found: y.len(),
            });
        }
        self.check_dimension(x.len())?;
        let mut out = vec![0.0; x.len()];
        self.grad_unchecked(x, y, &mut out);
        Ok(out)
    }
}

#[inline]
pub(crate) fn euclidean(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(u, v)| {
            let d = u - v;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(u, v)| u * v).sum()
}

/// Row-major copy of a point matrix.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct RowMajor {
    pub data: Vec<f64>,
    pub rows: usize,
    pub dim: usize,
}

impl RowMajor {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let (rows, dim) = m.shape();
        // The column-major storage of the transpose is the row-major storage
        // of `m`.
        let data = m.transpose().as_slice().to_vec();
        RowMajor { data, rows, dim }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Euclidean distances between two point sets; rows are evaluation points,
/// columns are centers.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub entries: DMatrix<f64>,
}

impl DistanceMatrix {
    pub fn row_count(&self) -> usize {
        self.entries.nrows()
    }

    pub fn col_count(&self) -> usize {
        self.entries.ncols()
    }
}

fn check_point_sets(rows: &DMatrix<f64>, cols: &DMatrix<f64>) -> Result<()> {
    if rows.nrows() == 0 || cols.nrows() == 0 {
        return Err(Error::Empty("point list"));
    }
    if rows.ncols() != cols.ncols() {
        return Err(Error::DimensionMismatch {
            expected: rows.ncols(),
            found: cols.ncols(),
        });
    }
    if rows.ncols() == 0 {
        return Err(Error::Empty("point dimension"));
    }
    Ok(())
}

pub fn distance_matrix(rows: &DMatrix<f64>, cols: &DMatrix<f64>) -> Result<DistanceMatrix> {
    check_point_sets(rows, cols)?;
    let r = RowMajor::from_matrix(rows);
    let c = RowMajor::from_matrix(cols);
    let width = c.rows;
    let mut buf = vec![0.0; r.rows * width];
    par::fill_rows(Execution::default(), &mut buf, width, |i, out| {
        let x = r.row(i);
        for (j, o) in out.iter_mut().enumerate() {
            *o = euclidean(x, c.row(j));
        }
    });
    Ok(DistanceMatrix {
        entries: DMatrix::from_row_slice(r.rows, width, &buf),
    })
}

/// `A[i][j] = K(rows_i, cols_j)`.
pub fn kernel_matrix(
    spec: &KernelSpec,
    rows: &DMatrix<f64>,
    cols: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    kernel_matrix_with(Execution::default(), spec, rows, cols)
}

/// [`kernel_matrix`] with an explicit execution mode. Row blocks are
/// independent, so the entries do not depend on the mode.
pub fn kernel_matrix_with(
    exec: Execution,
    spec: &KernelSpec,
    rows: &DMatrix<f64>,
    cols: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_point_sets(rows, cols)?;
    spec.validate()?;
    spec.check_dimension(rows.ncols())?;
    let r = RowMajor::from_matrix(rows);
    let c = RowMajor::from_matrix(cols);
    for i in 0..r.rows {
        spec.check_point(r.row(i))?;
    }
    for j in 0..c.rows {
        spec.check_point(c.row(j))?;
    }
    let buf = kernel_block(exec, spec, &r, &c);
    Ok(DMatrix::from_row_slice(r.rows, c.rows, &buf))
}

/// Row-major kernel block between two pre-validated point sets.
pub(crate) fn kernel_block(
    exec: Execution,
    spec: &KernelSpec,
    rows: &RowMajor,
    cols: &RowMajor,
) -> Vec<f64> {
    let width = cols.rows;
    let mut buf = vec![0.0; rows.rows * width];
    par::fill_rows(exec, &mut buf, width, |i, out| {
        let x = rows.row(i);
        for (j, o) in out.iter_mut().enumerate() {
            *o = spec.eval_unchecked(x, cols.row(j));
        }
    });
    buf
}

/// Validates every row of `points` against the kernel's domain.
pub(crate) fn check_points(spec: &KernelSpec, points: &RowMajor) -> Result<()> {
    spec.check_dimension(points.dim)?;
    for i in 0..points.rows {
        spec.check_point(points.row(i))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn central_diff(spec: &KernelSpec, x: &[f64], y: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[k] += h;
                xm[k] -= h;
                (spec.eval(&xp, y).unwrap() - spec.eval(&xm, y).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gaussian_at_coincident_points_is_one() {
        let k = KernelSpec::gaussian(1.0).unwrap();
        assert_eq!(k.eval(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 1.0);
    }

    #[test]
    fn linear_polynomial_is_dot_product() {
        let k = KernelSpec::polynomial(0.0, 1).unwrap();
        assert_eq!(k.eval(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
    }

    #[test]
    fn brownian_bridge_uses_min() {
        let k = KernelSpec::brownian_bridge();
        assert!((k.eval(&[0.25], &[0.75]).unwrap() - 0.0625).abs() < 1e-15);
        assert!(matches!(k.eval(&[0.0], &[0.5]), Err(Error::Domain(_))));
        assert!(matches!(k.eval(&[0.5], &[1.2]), Err(Error::Domain(_))));
    }

    #[test]
    fn brownian_bridge_is_tensor_product() {
        let k = KernelSpec::brownian_bridge();
        let x = [0.2, 0.7, 0.45];
        let y = [0.9, 0.1, 0.5];
        let prod: f64 = (0..3)
            .map(|i| k.eval(&x[i..i + 1], &y[i..i + 1]).unwrap())
            .product();
        assert!((k.eval(&x, &y).unwrap() - prod).abs() < 1e-16);
    }

    #[test]
    fn wendland_vanishes_outside_support() {
        let k0 = KernelSpec::wendland(WendlandSmoothness::K0, 1.0).unwrap();
        assert_eq!(k0.eval(&[0.0], &[2.0]).unwrap(), 0.0);
        let k2 = KernelSpec::wendland(WendlandSmoothness::K2, 2.0).unwrap();
        assert_eq!(k2.eval(&[0.0, 0.0], &[0.4, 0.4]).unwrap(), 0.0);
        assert!(k2.eval(&[0.0, 0.0], &[0.2, 0.2]).unwrap() > 0.0);
        assert!(matches!(
            k2.eval(&[0.0; 4], &[0.0; 4]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(KernelSpec::gaussian(0.0).is_err());
        assert!(KernelSpec::gaussian(-1.0).is_err());
        assert!(KernelSpec::polynomial(-0.5, 2).is_err());
        assert!(KernelSpec::polynomial(1.0, 0).is_err());
        let k = KernelSpec::gaussian(1.0).unwrap();
        assert!(matches!(
            k.eval(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn distance_matrix_examples() {
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 3.0, 4.0]);
        let d = distance_matrix(&p, &p).unwrap();
        assert_eq!(
            d.entries,
            DMatrix::from_row_slice(2, 2, &[0.0, 5.0, 5.0, 0.0])
        );

        let one = DMatrix::from_row_slice(1, 1, &[1.0]);
        assert_eq!(distance_matrix(&one, &one).unwrap().entries[(0, 0)], 0.0);

        let rows = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        let cols = DMatrix::from_row_slice(1, 1, &[0.5]);
        let d = distance_matrix(&rows, &cols).unwrap();
        assert_eq!((d.row_count(), d.col_count()), (3, 1));
        assert_eq!(d.entries.as_slice(), &[0.5, 0.5, 1.5]);
    }

    #[test]
    fn distance_matrix_errors() {
        let a = DMatrix::<f64>::zeros(0, 2);
        let b = DMatrix::<f64>::zeros(1, 2);
        assert!(matches!(distance_matrix(&a, &b), Err(Error::Empty(_))));
        let c = DMatrix::<f64>::zeros(1, 3);
        assert!(matches!(
            distance_matrix(&b, &c),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn gaussian_kernel_matrix_examples() {
        let k = KernelSpec::gaussian(1.0).unwrap();
        let x = DMatrix::from_row_slice(1, 2, &[0.7, 0.1]);
        assert_eq!(kernel_matrix(&k, &x, &x).unwrap()[(0, 0)], 1.0);

        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let a = kernel_matrix(&k, &x, &x).unwrap();
        let e = (-1.0f64).exp();
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[1.0, e, e, 1.0]));
    }

    #[test]
    fn brownian_bridge_gramian_is_positive_definite() {
        let k = KernelSpec::brownian_bridge();
        let x = DMatrix::from_row_slice(3, 1, &[0.25, 0.5, 0.75]);
        let a = kernel_matrix(&k, &x, &x).unwrap();
        let eig = nalgebra::SymmetricEigen::new(a);
        assert!(eig.eigenvalues.min() > 0.0);
    }

    #[test]
    fn execution_modes_agree() {
        let k = KernelSpec::gaussian(0.8).unwrap();
        let x = DMatrix::from_fn(37, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 / 5.0);
        let y = DMatrix::from_fn(13, 3, |i, j| ((i * 5 + j) % 7) as f64 / 3.0);
        let a = kernel_matrix_with(Execution::Sequential, &k, &x, &y).unwrap();
        let b = kernel_matrix_with(Execution::Parallel, &k, &x, &y).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_examples() {
        let k = KernelSpec::gaussian(2.5).unwrap();
        assert_eq!(k.grad_x(&[0.4, 0.1], &[0.4, 0.1]).unwrap(), vec![0.0, 0.0]);

        let k = KernelSpec::gaussian(1.0).unwrap();
        let g = k.grad_x(&[1.0], &[0.0]).unwrap();
        assert!((g[0] + 2.0 * (-1.0f64).exp()).abs() < 1e-15);

        let k = KernelSpec::polynomial(1.0, 2).unwrap();
        let x = [1.0, 0.0];
        let y = [0.0, 1.0];
        let g = k.grad_x(&x, &y).unwrap();
        let fd = central_diff(&k, &x, &y, 1e-6);
        // finite differences give (0, 2)
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!((g[0] - 0.0).abs() < 1e-15 && (g[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn non_differentiable_families_are_rejected() {
        let k = KernelSpec::wendland(WendlandSmoothness::K0, 1.0).unwrap();
        assert!(matches!(
            k.grad_x(&[0.1], &[0.2]),
            Err(Error::NotDifferentiable(_))
        ));
        assert!(KernelSpec::brownian_bridge()
            .grad_x(&[0.1], &[0.2])
            .is_err());
    }

    fn family_strategy() -> impl Strategy<Value = KernelSpec> {
        prop_oneof![
            (0.1f64..5.0).prop_map(|g| KernelSpec::gaussian(g).unwrap()),
            (0.0f64..1.0, 1u32..4).prop_map(|(a, p)| KernelSpec::polynomial(a, p).unwrap()),
            (0.1f64..2.0).prop_map(|g| KernelSpec::wendland(WendlandSmoothness::K0, g).unwrap()),
            (0.1f64..2.0).prop_map(|g| KernelSpec::wendland(WendlandSmoothness::K2, g).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn symmetric_in_arguments(
            spec in family_strategy(),
            x in prop::collection::vec(-2.0f64..2.0, 3),
            y in prop::collection::vec(-2.0f64..2.0, 3),
        ) {
            prop_assert_eq!(spec.eval(&x, &y).unwrap(), spec.eval(&y, &x).unwrap());
        }

        #[test]
        fn wendland_compact_support(
            g in 0.1f64..3.0,
            x in prop::collection::vec(-2.0f64..2.0, 2),
            y in prop::collection::vec(-2.0f64..2.0, 2),
        ) {
            for s in [WendlandSmoothness::K0, WendlandSmoothness::K2] {
                let k = KernelSpec::wendland(s, g).unwrap();
                if g * euclidean(&x, &y) > 1.0 {
                    prop_assert_eq!(k.eval(&x, &y).unwrap(), 0.0);
                }
            }
        }

        #[test]
        fn quadratic_form_is_nonnegative(
            spec in family_strategy(),
            pts in prop::collection::vec(-1.0f64..1.0, 2..40),
            coef in prop::collection::vec(-1.0f64..1.0, 20),
        ) {
            let n = pts.len() / 2;
            prop_assume!(n >= 1);
            let x = DMatrix::from_row_slice(n, 2, &pts[..2 * n]);
            let a = kernel_matrix(&spec, &x, &x).unwrap();
            let c = nalgebra::DVector::from_fn(n, |i, _| coef[i % coef.len()]);
            let q = (c.transpose() * &a * &c)[(0, 0)];
            prop_assert!(q >= -1e-10, "quadratic form {}", q);
        }

        #[test]
        fn gradient_matches_finite_differences(
            spec in family_strategy().prop_filter("differentiable", |s| s.family.is_differentiable()),
            x in prop::collection::vec(-1.0f64..1.0, 3),
            y in prop::collection::vec(-1.0f64..1.0, 3),
        ) {
            let g = spec.grad_x(&x, &y).unwrap();
            let fd = central_diff(&spec, &x, &y, 1e-6);
            let scale = g.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-3);
            for (a, b) in g.iter().zip(&fd) {
                prop_assert!((a - b).abs() <= 1e-5 * scale, "{:?} vs {:?}", g, fd);
            }
        }
    }
}
