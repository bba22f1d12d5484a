//! Central-difference checking of reverse-mode gradients.

use serde::Serialize;

use super::{no_grad, Tensor};
use crate::error::{Error, Result};

/// Denominator floor of the relative error.
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub non_finite: bool,
    pub pass: bool,
}

/// Relative error `|a - n| / max(|a|, |n|, 1e-8)` maximized over elements;
/// passes iff every value is finite and the maximum is below `tol`.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], tol: f64) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        non_finite: false,
        pass: false,
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        if !a.is_finite() || !n.is_finite() {
            report.non_finite = true;
            report.worst = (0, i);
            report.max_rel_err = f64::INFINITY;
            break;
        }
        let err = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = (0, i);
        }
    }
    report.pass = !report.non_finite && analytic.len() == numeric.len() && report.max_rel_err < tol;
    report
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    f(inputs)?.item()
}

/// `(f(x + eps e_j) - f(x - eps e_j)) / (2 eps)` for every element `j` of
/// `inputs[which]`.
pub fn numeric_gradient<F>(f: &F, inputs: &[Tensor], which: usize, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let base: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
    let target = &base[which];
    no_grad(|| {
        (0..target.numel())
            .map(|j| {
                let probe = |delta: f64| -> Result<f64> {
                    let mut data = target.to_vec();
                    data[j] += delta;
                    let mut args = base.clone();
                    args[which] = Tensor::from_vec_dtype(data, target.shape(), target.dtype())?;
                    eval_scalar(f, &args)
                };
                Ok((probe(eps)? - probe(-eps)?) / (2.0 * eps))
            })
            .collect()
    })
}

/// Compares reverse-mode gradients of the scalar map `f` against central
/// differences, with respect to every tensor in `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs.iter().map(Tensor::as_param).collect();
    let root = f(&leaves)?;
    if root.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar-valued map, got shape {:?}",
            root.shape()
        )));
    }
    let non_finite = GradCheckReport {
        max_rel_err: f64::INFINITY,
        worst: (0, 0),
        non_finite: true,
        pass: false,
    };
    if !root.item()?.is_finite() {
        return Ok(non_finite);
    }
    root.backward()?;

    let mut worst = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        non_finite: false,
        pass: true,
    };
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let numeric = match numeric_gradient(&f, inputs, i, eps) {
            Ok(n) => n,
            Err(Error::Numeric(_)) => return Ok(non_finite),
            Err(e) => return Err(e),
        };
        let mut r = compare_gradients(&analytic, &numeric, tol);
        r.worst.0 = i;
        if r.non_finite {
            return Ok(r);
        }
        if r.max_rel_err > worst.max_rel_err {
            worst.max_rel_err = r.max_rel_err;
            worst.worst = r.worst;
        }
        worst.pass &= r.pass;
    }
    Ok(worst)
}
