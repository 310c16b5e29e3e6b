//! Central finite-difference verification of reverse-mode gradients.

use super::{Graph, NumericsError, Tensor, Var};

/// Relative discrepancy used by every gradient check in the crate.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over all coordinates of all parameters.
    pub max_relative_error: f64,
    /// Largest relative error per parameter tensor, in input order.
    pub per_param: Vec<f64>,
    /// `(parameter, coordinate)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
}

/// Perturbs every coordinate of `params` by `±eps`, evaluates `eval` and
/// compares the central difference against `analytic`.
///
/// `params` is restored before returning, also on error.
pub fn compare_coordinates<E>(
    params: &mut [Tensor],
    analytic: &[Tensor],
    eps: f64,
    eval: impl FnMut(&[Tensor]) -> Result<f64, E>,
) -> Result<GradCheckReport, E>
where
    E: From<NumericsError>,
{
    compare_coordinates_with_steps(params, analytic, &[eps], 0.0, eval)
}

/// Like [`compare_coordinates`], but tries the steps in `steps` in order for
/// each coordinate and keeps the smallest error, stopping at the first step
/// whose error is at most `accept`.
///
/// A single step cannot serve every coordinate: slopes near zero drown in
/// roundoff at small steps, while coordinates near a ReLU kink need them.
pub fn compare_coordinates_with_steps<E>(
    params: &mut [Tensor],
    analytic: &[Tensor],
    steps: &[f64],
    accept: f64,
    mut eval: impl FnMut(&[Tensor]) -> Result<f64, E>,
) -> Result<GradCheckReport, E>
where
    E: From<NumericsError>,
{
    if steps.is_empty() || steps.iter().any(|&e| !(e > 0.0)) {
        return Err(NumericsError::InvalidArgument(format!("grad_check steps must be positive, got {steps:?}")).into());
    }
    let mut per_param = vec![0.0; params.len()];
    let mut worst = None;
    let mut max_err = 0.0;
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            let mut err = f64::INFINITY;
            for &eps in steps {
                params[p].data_mut()[i] = orig + eps;
                let plus = eval(params);
                params[p].data_mut()[i] = orig - eps;
                let minus = eval(params);
                params[p].data_mut()[i] = orig;
                let (plus, minus) = (plus?, minus?);
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(NumericsError::NonFinite(format!("objective at parameter {p}, coordinate {i}")).into());
                }
                let numeric = (plus - minus) / (2.0 * eps);
                err = err.min(relative_error(analytic[p].data()[i], numeric));
                if err <= accept {
                    break;
                }
            }
            if err > per_param[p] {
                per_param[p] = err;
            }
            if err > max_err {
                max_err = err;
                worst = Some((p, i));
            }
        }
    }
    Ok(GradCheckReport { max_relative_error: max_err, per_param, worst })
}

/// Checks the gradient of the scalar built by `f` with respect to `params`.
///
/// `f` receives a fresh graph and one leaf per parameter and returns the
/// loss node.
pub fn grad_check<F>(params: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var, NumericsError>,
{
    let evaluate = |values: &[Tensor]| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t)).collect();
        let loss = f(&mut g, &vars)?;
        let value = g.value(loss);
        if value.len() != 1 {
            return Err(NumericsError::NonScalarLoss(value.shape().to_vec()));
        }
        Ok(value.item())
    };
    let analytic = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|t| g.param(t)).collect();
        let loss = f(&mut g, &vars)?;
        if !g.value(loss).is_finite() {
            return Err(NumericsError::NonFinite("objective".into()));
        }
        let grads = g.backward(loss)?;
        vars.iter().map(|v| grads.wrt(*v)).collect::<Vec<_>>()
    };
    let mut work = params.to_vec();
    compare_coordinates(&mut work, &analytic, eps, evaluate)
}
