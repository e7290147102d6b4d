//! Finite-difference gradient checking in f64.

use super::{Graph, Tensor, Var};
use crate::error::{invalid, Result};

/// Largest relative error seen and whether it is within tolerance.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-3;

/// Compares analytic gradients of the scalar built by `f` against central
/// differences. `f` receives a fresh tape and one leaf per input (in order)
/// and must return a `[1]` or scalar node.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>], track: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone().with_requires_grad(track))).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(invalid("grad_check needs a scalar output"));
        }
        let value = g.value(out).data()[0];
        if !track {
            return Ok((value, Vec::new()));
        }
        let mut grads = g.backward(out)?;
        let grads = vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| grads.take(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut xs = inputs.to_vec();
    let (mut worst, mut checked) = (0.0f64, 0);
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..xs[t].len() {
            let orig = xs[t].data()[i];
            xs[t].data_mut()[i] = orig + STEP;
            let (up, _) = eval(&xs, false)?;
            xs[t].data_mut()[i] = orig - STEP;
            let (down, _) = eval(&xs, false)?;
            xs[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: worst,
        checked,
        tol,
        passed: worst <= tol,
    })
}
