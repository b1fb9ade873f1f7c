use serde::Serialize;

use super::Matrix;
use crate::error::{Error, Result};

/// Gradients of a scalar objective with respect to a transform's inputs and
/// parameters, in the same order as the inputs and [`Differentiable::params`].
#[derive(Clone, Debug)]
pub struct Gradients {
    pub inputs: Vec<Matrix>,
    pub params: Vec<Matrix>,
}

/// A forward/backward pair that [`grad_check`] can verify.
pub trait Differentiable {
    fn name(&self) -> String;

    fn forward(&self, inputs: &[Matrix]) -> Result<Matrix>;

    /// Back-propagates `grad_output` (same shape as the forward output).
    fn backward(&self, inputs: &[Matrix], grad_output: &Matrix) -> Result<Gradients>;

    fn params(&self) -> Vec<Matrix> {
        Vec::new()
    }

    fn set_params(&mut self, params: &[Matrix]) -> Result<()> {
        if params.is_empty() {
            Ok(())
        } else {
            Err(Error::Argument(format!("{} has no parameters", self.name())))
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    /// `(tensor, flat index)`; tensors are numbered inputs first, then
    /// parameters.
    pub worst_coordinate: (usize, usize),
    pub coordinates_checked: usize,
}

const REL_FLOOR: f64 = 1e-8;

fn probe(transform: &dyn Differentiable, inputs: &[Matrix]) -> Result<f64> {
    let out = transform.forward(inputs)?;
    if !out.is_finite() {
        return Err(Error::Evaluation(format!(
            "{} produced a non-finite output",
            transform.name()
        )));
    }
    Ok(out.sum())
}

/// Compares the analytic gradient of `sum(forward(inputs))` against central
/// differences on every input and parameter coordinate.
///
/// Parameters are perturbed in place and restored before returning.
pub fn grad_check(transform: &mut dyn Differentiable, inputs: &[Matrix], eps: f64) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Argument(format!("eps must lie in (0, 1e-2], got {eps}")));
    }
    let out = transform.forward(inputs)?;
    if !out.is_finite() {
        return Err(Error::Evaluation(format!(
            "{} produced a non-finite output",
            transform.name()
        )));
    }
    let ones = Matrix::filled(out.rows(), out.cols(), 1.0);
    let analytic = transform.backward(inputs, &ones)?;
    if analytic.inputs.len() != inputs.len() {
        return Err(Error::shape(
            "grad_check",
            format!("{} inputs", inputs.len()),
            format!("{} input gradients", analytic.inputs.len()),
        ));
    }

    let mut worst = (0.0_f64, (0, 0));
    let mut checked = 0;
    let mut track = |tensor: usize, idx: usize, a: f64, n: f64| {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
        if checked == 0 || rel > worst.0 {
            worst = (rel, (tensor, idx));
        }
        checked += 1;
    };

    let mut perturbed = inputs.to_vec();
    for (t, grad) in analytic.inputs.iter().enumerate() {
        for idx in 0..perturbed[t].len() {
            let orig = perturbed[t].as_slice()[idx];
            perturbed[t].as_mut_slice()[idx] = orig + eps;
            let plus = probe(transform, &perturbed)?;
            perturbed[t].as_mut_slice()[idx] = orig - eps;
            let minus = probe(transform, &perturbed)?;
            perturbed[t].as_mut_slice()[idx] = orig;
            track(t, idx, grad.as_slice()[idx], (plus - minus) / (2.0 * eps));
        }
    }

    let original = transform.params();
    if analytic.params.len() != original.len() {
        return Err(Error::shape(
            "grad_check",
            format!("{} parameters", original.len()),
            format!("{} parameter gradients", analytic.params.len()),
        ));
    }
    let mut params = original.clone();
    let result: Result<()> = (|| {
        for (p, grad) in analytic.params.iter().enumerate() {
            for idx in 0..params[p].len() {
                let orig = params[p].as_slice()[idx];
                params[p].as_mut_slice()[idx] = orig + eps;
                transform.set_params(&params)?;
                let plus = probe(transform, inputs)?;
                params[p].as_mut_slice()[idx] = orig - eps;
                transform.set_params(&params)?;
                let minus = probe(transform, inputs)?;
                params[p].as_mut_slice()[idx] = orig;
                track(
                    inputs.len() + p,
                    idx,
                    grad.as_slice()[idx],
                    (plus - minus) / (2.0 * eps),
                );
            }
        }
        Ok(())
    })();
    transform.set_params(&original)?;
    result?;

    Ok(GradCheckReport {
        op_name: transform.name(),
        max_rel_error: worst.0,
        worst_coordinate: worst.1,
        coordinates_checked: checked,
    })
}
