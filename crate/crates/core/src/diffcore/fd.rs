//! Finite-difference curvature products.

use crate::diffcore::params::ParameterVector;
use crate::error::{check_dim, Error, Result};

/// Relative central-difference step for parameters `params`.
pub fn default_eps(params: &ParameterVector) -> f64 {
    1e-5 * (1.0 + params.norm_inf())
}

/// `(grad_fn(θ + εv) − grad_fn(θ − εv)) / 2ε`.
pub fn hvp_fd<G>(grad_fn: G, params: &ParameterVector, v: &ParameterVector, eps: f64) -> Result<ParameterVector>
where
    G: Fn(&ParameterVector) -> Result<ParameterVector>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Precondition(format!("finite-difference step must be positive, got {eps}")));
    }
    check_dim("hvp direction", params.len(), v.len())?;
    let plus = grad_fn(&params.axpy(eps, v)?)?;
    let minus = grad_fn(&params.axpy(-eps, v)?)?;
    check_dim("hvp gradient", params.len(), plus.len())?;
    let inv = 0.5 / eps;
    let values: Vec<f64> = plus
        .values()
        .iter()
        .zip(minus.values())
        .map(|(p, m)| (p - m) * inv)
        .collect();
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite Hessian-vector product".into()));
    }
    params.with_values(values)
}

/// [`hvp_fd`] along the unit-∞-norm direction `v/‖v‖∞` with the default
/// step, rescaled back. Keeps the probe distance independent of `‖v‖`.
pub fn hvp_fd_scaled<G>(grad_fn: G, params: &ParameterVector, v: &ParameterVector) -> Result<ParameterVector>
where
    G: Fn(&ParameterVector) -> Result<ParameterVector>,
{
    let scale = v.norm_inf();
    if scale == 0.0 {
        return Ok(params.with_values(vec![0.0; params.len()])?);
    }
    let unit = v.scale(1.0 / scale);
    Ok(hvp_fd(grad_fn, params, &unit, default_eps(params))?.scale(scale))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::diffcore::params::{Layout, ParamBlock};

    fn pv(values: Vec<f64>) -> ParameterVector {
        let layout = Arc::new(Layout::new(vec![ParamBlock::new("theta", &[values.len()])]).unwrap());
        ParameterVector::new(layout, values).unwrap()
    }

    fn diag_quadratic_grad(p: &ParameterVector) -> Result<ParameterVector> {
        let a = [1.0, 2.0, 3.0];
        p.with_values(p.values().iter().zip(a).map(|(x, d)| x * d).collect())
    }

    #[test]
    fn diagonal_quadratic() {
        let theta = pv(vec![0.2, -1.0, 4.0]);
        let v = pv(vec![1.0, 1.0, 1.0]);
        let eps = 1e-4;
        let h = hvp_fd(diag_quadratic_grad, &theta, &v, eps).unwrap();
        for (got, want) in h.values().iter().zip([1.0, 2.0, 3.0]) {
            assert!((got - want).abs() <= 10.0 * eps * eps);
        }
    }

    #[test]
    fn zero_direction_gives_zero() {
        let theta = pv(vec![0.2, -1.0, 4.0]);
        let v = pv(vec![0.0; 3]);
        let h = hvp_fd(diag_quadratic_grad, &theta, &v, 1e-5).unwrap();
        assert_eq!(h.values(), &[0.0, 0.0, 0.0]);
        let h = hvp_fd_scaled(diag_quadratic_grad, &theta, &v).unwrap();
        assert_eq!(h.values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn scaled_variant_matches_plain_on_quadratic() {
        let theta = pv(vec![0.2, -1.0, 4.0]);
        let v = pv(vec![300.0, -20.0, 0.5]);
        let h = hvp_fd_scaled(diag_quadratic_grad, &theta, &v).unwrap();
        for (got, want) in h.values().iter().zip([300.0, -40.0, 1.5]) {
            assert!((got - want).abs() <= 1e-8 * want.abs().max(1.0));
        }
    }

    #[test]
    fn rejects_bad_eps_and_nan() {
        let theta = pv(vec![1.0]);
        let v = pv(vec![1.0]);
        assert!(matches!(
            hvp_fd(diag_quadratic_grad, &theta, &v, 0.0),
            Err(Error::Precondition(_))
        ));
        let nan_grad = |p: &ParameterVector| p.with_values(vec![f64::NAN]);
        assert!(matches!(hvp_fd(nan_grad, &theta, &v, 1e-3), Err(Error::Numeric(_))));
    }
}
