use crate::error::{DiffError, Result};
use crate::graph::{Graph, Var};
use crate::par;
use crate::tensor::Tensor;

/// Step used for central differences.
pub const FD_EPSILON: f64 = 1e-5;

/// Outcome of [`finite_difference_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

fn eval<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&g, &vars)?;
    let v = g.value(root);
    if v.len() != 1 {
        return Err(DiffError::NotScalar {
            shape: v.shape().to_vec(),
        });
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of `f` against central differences with
/// step [`FD_EPSILON`], over every coordinate of every parameter.
///
/// `f` builds a scalar from the parameter handles and must be deterministic.
/// Coordinates are evaluated independently, in parallel when available.
pub fn finite_difference_check<F>(params: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var> + Sync + Send,
{
    let g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&g, &vars)?;
    let grads = g.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.grad(v)).collect();

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    let numeric = par::map_slice(&coords, |&(p, i)| -> Result<f64> {
        let mut shifted = params.to_vec();
        let x0 = params[p].data()[i];
        shifted[p].data_mut()[i] = x0 + FD_EPSILON;
        let up = eval(&f, &shifted)?;
        shifted[p].data_mut()[i] = x0 - FD_EPSILON;
        let down = eval(&f, &shifted)?;
        Ok((up - down) / (2.0 * FD_EPSILON))
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: coords.len(),
    };
    for (&(p, i), num) in coords.iter().zip(numeric) {
        let num = num?;
        let ana = analytic[p].data()[i];
        let err = (ana - num).abs() / num.abs().max(1.0);
        if err > report.max_rel_error || err.is_nan() {
            report = GradCheckReport {
                max_rel_error: err,
                worst_param: p,
                worst_index: i,
                analytic: ana,
                numeric: num,
                coordinates: coords.len(),
            };
        }
    }
    Ok(report)
}
