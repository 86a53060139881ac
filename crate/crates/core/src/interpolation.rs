//! Direct regularized kernel interpolation: solve `(A + lambda I) alpha = Y`
//! on all training points.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::{Dataset, OutputScaler};
use crate::error::{Error, Result};
use crate::kernel::{kernel_matrix, KernelSpec};
use crate::surrogate::Surrogate;

pub fn fit_interpolant(data: &Dataset, kernel: &KernelSpec, lambda: f64) -> Result<Surrogate> {
    check_lambda(kernel, lambda)?;
    data.check_distinct()?;
    let a = kernel_matrix(kernel, &data.inputs, &data.inputs)?;
    solve_with_matrix(data, kernel, lambda, a)
}

/// [`fit_interpolant`] reusing the kernel matrix of `data.inputs`; the
/// caller has checked distinctness.
pub(crate) fn fit_interpolant_with_matrix(
    data: &Dataset,
    kernel: &KernelSpec,
    lambda: f64,
    a: &DMatrix<f64>,
) -> Result<Surrogate> {
    check_lambda(kernel, lambda)?;
    solve_with_matrix(data, kernel, lambda, a.clone())
}

fn solve_with_matrix(
    data: &Dataset,
    kernel: &KernelSpec,
    lambda: f64,
    mut a: DMatrix<f64>,
) -> Result<Surrogate> {
    for i in 0..a.nrows() {
        a[(i, i)] += lambda;
    }
    let alpha = solve_spd(a, &data.outputs)?;
    Surrogate::new(*kernel, data.inputs.clone(), alpha, None, lambda)
}

/// Fits on outputs mapped to `[-1, 1]`; the returned model predicts in the
/// original units.
pub fn fit_interpolant_scaled(
    data: &Dataset,
    kernel: &KernelSpec,
    lambda: f64,
) -> Result<Surrogate> {
    let scaler = OutputScaler::fit(&data.outputs);
    let scaled = data.with_outputs(scaler.scale(&data.outputs)?)?;
    let mut model = fit_interpolant(&scaled, kernel, lambda)?;
    model.output_scaler = Some(scaler);
    Ok(model)
}

pub(crate) fn check_lambda(kernel: &KernelSpec, lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "regularization must be finite and nonnegative, got {lambda}"
        )));
    }
    if lambda == 0.0 && !kernel.family.is_strictly_positive_definite() {
        return Err(Error::InvalidParameter(format!(
            "lambda = 0 needs a strictly positive definite kernel, {} is only positive definite",
            kernel.family.name()
        )));
    }
    Ok(())
}

/// Solves `M X = B` for symmetric positive (semi)definite `M`. Cholesky
/// first; on failure an LU solve is accepted only if its residual is small.
fn solve_spd(m: DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(chol) = m.clone().cholesky() {
        return Ok(chol.solve(b));
    }
    let rcond = reciprocal_condition(&m);
    if let Some(x) = m.clone().lu().solve(b) {
        let resid = (&m * &x - b).norm();
        if x.iter().all(|v| v.is_finite()) && resid <= 1e-8 * b.norm().max(1.0) {
            return Ok(x);
        }
    }
    Err(Error::SingularSystem { rcond })
}

fn reciprocal_condition(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = eig
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if max > 0.0 {
        min / max
    } else {
        0.0
    }
}

/// `(lambda_max(A) + lambda) / (lambda_min(A) + lambda)`.
pub fn condition_number_regularized(a: &DMatrix<f64>, lambda: f64) -> Result<f64> {
    if !a.is_square() {
        return Err(Error::ShapeMismatch("matrix is not square".into()));
    }
    if a.nrows() == 0 {
        return Err(Error::Empty("matrix"));
    }
    if lambda < 0.0 {
        return Err(Error::InvalidParameter(format!("lambda = {lambda} < 0")));
    }
    let eig = SymmetricEigen::new(a.clone());
    let lo = eig.eigenvalues.min() + lambda;
    let hi = eig.eigenvalues.max() + lambda;
    if lo <= 0.0 {
        return Err(Error::SingularSystem { rcond: 0.0 });
    }
    Ok(hi / lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::WendlandSmoothness;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ds(x: &[f64], d: usize, y: &[f64], q: usize) -> Dataset {
        Dataset::new(
            DMatrix::from_row_slice(x.len() / d, d, x),
            DMatrix::from_row_slice(y.len() / q, q, y),
        )
        .unwrap()
    }

    #[test]
    fn one_by_one_system() {
        let k = KernelSpec::gaussian(1.0).unwrap();
        let m = fit_interpolant(&ds(&[0.0], 1, &[2.0], 1), &k, 0.0).unwrap();
        assert_eq!(m.coefficients[(0, 0)], 2.0);
    }

    #[test]
    fn two_point_system_matches_explicit_inverse() {
        let k = KernelSpec::gaussian(1.0).unwrap();
        let m = fit_interpolant(&ds(&[0.0, 1.0], 1, &[1.0, 0.0], 1), &k, 0.0).unwrap();
        let e1 = (-1.0f64).exp();
        let det = 1.0 - (-2.0f64).exp();
        assert!((m.coefficients[(0, 0)] - 1.0 / det).abs() < 1e-14);
        assert!((m.coefficients[(1, 0)] + e1 / det).abs() < 1e-14);

        let at = m
            .evaluate(&DMatrix::from_row_slice(2, 1, &[0.0, 1.0]))
            .unwrap();
        assert!((at[(0, 0)] - 1.0).abs() < 1e-14);
        assert!(at[(1, 0)].abs() < 1e-14);
    }

    #[test]
    fn polynomial_without_regularization_is_rejected() {
        let k = KernelSpec::polynomial(1.0, 2).unwrap();
        let d = ds(&[0.0, 1.0], 1, &[1.0, 0.0], 1);
        assert!(matches!(
            fit_interpolant(&d, &k, 0.0),
            Err(Error::InvalidParameter(_))
        ));
        assert!(fit_interpolant(&d, &k, 1e-3).is_ok());
        assert!(fit_interpolant(&d, &k, -1.0).is_err());
    }

    #[test]
    fn duplicate_inputs_are_rejected() {
        let k = KernelSpec::gaussian(1.0).unwrap();
        let d = ds(&[0.5, 0.5], 1, &[1.0, 2.0], 1);
        assert!(matches!(
            fit_interpolant(&d, &k, 0.1),
            Err(Error::DuplicatePoints { .. })
        ));
    }

    #[test]
    fn singular_system_reports_condition() {
        // Gaussian with a tiny shape parameter on nearby points is singular
        // to working precision.
        let k = KernelSpec::gaussian(1e-6).unwrap();
        let x: Vec<f64> = (0..30).map(|i| i as f64 * 0.01).collect();
        let y: Vec<f64> = x.iter().map(|v| v.sin()).collect();
        match fit_interpolant(&ds(&x, 1, &y, 1), &k, 0.0) {
            Err(Error::SingularSystem { rcond }) => assert!(rcond < 1e-14),
            other => panic!("expected singular system, got {other:?}"),
        }
    }

    #[test]
    fn exact_interpolation_on_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for kernel in [
            KernelSpec::gaussian(6.0).unwrap(),
            KernelSpec::wendland(WendlandSmoothness::K2, 3.0).unwrap(),
            KernelSpec::wendland(WendlandSmoothness::K0, 3.0).unwrap(),
        ] {
            let n = 60;
            let x: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let y: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let d = ds(&x, 2, &y, 2);
            let a = kernel_matrix(&kernel, &d.inputs, &d.inputs).unwrap();
            let kappa = condition_number_regularized(&a, 0.0).unwrap();
            assert!(kappa < 1e7, "{kappa}");
            let m = fit_interpolant(&d, &kernel, 0.0).unwrap();
            let pred = m.evaluate(&d.inputs).unwrap();
            let err = (pred - &d.outputs).abs().max();
            assert!(err <= 1e-8, "{err}");
        }
    }

    #[test]
    fn linearity_in_outputs() {
        let k = KernelSpec::gaussian(2.0).unwrap();
        let d = ds(&[0.0, 0.3, 0.7, 1.0], 1, &[1.0, -2.0, 0.5, 3.0], 1);
        let m = fit_interpolant(&d, &k, 1e-4).unwrap();
        let d3 = d.with_outputs(&d.outputs * -3.0).unwrap();
        let m3 = fit_interpolant(&d3, &k, 1e-4).unwrap();
        for (a, b) in m.coefficients.iter().zip(m3.coefficients.iter()) {
            assert!((a * -3.0 - b).abs() < 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn scaled_fit_predicts_original_units() {
        let k = KernelSpec::gaussian(2.0).unwrap();
        let d = ds(&[0.0, 0.3, 0.7, 1.0], 1, &[10.0, -20.0, 5.0, 30.0], 1);
        let m = fit_interpolant_scaled(&d, &k, 0.0).unwrap();
        let pred = m.evaluate(&d.inputs).unwrap();
        assert!((pred - &d.outputs).abs().max() < 1e-8);
    }

    #[test]
    fn condition_number_examples() {
        let i = DMatrix::<f64>::identity(4, 4);
        assert!((condition_number_regularized(&i, 0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((condition_number_regularized(&i, 3.0).unwrap() - 1.0).abs() < 1e-15);
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 1.0]));
        assert!((condition_number_regularized(&a, 0.0).unwrap() - 4.0).abs() < 1e-14);
        assert!((condition_number_regularized(&a, 2.0).unwrap() - 2.0).abs() < 1e-14);
        assert!(condition_number_regularized(&DMatrix::zeros(2, 2), 0.0).is_err());
    }

    #[test]
    fn condition_number_decreases_with_lambda() {
        let k = KernelSpec::gaussian(1.0).unwrap();
        let x = DMatrix::from_fn(15, 2, |i, j| {
            ((i * 3 + j * 5) % 7) as f64 / 7.0 + i as f64 * 0.01
        });
        let a = kernel_matrix(&k, &x, &x).unwrap();
        let mut prev = f64::INFINITY;
        for e in -8..6 {
            let kappa = condition_number_regularized(&a, 10f64.powi(e)).unwrap();
            assert!(kappa <= prev);
            prev = kappa;
        }
        let far = condition_number_regularized(&a, 1e12).unwrap();
        assert!((far - 1.0).abs() < 1e-9);
    }
}
