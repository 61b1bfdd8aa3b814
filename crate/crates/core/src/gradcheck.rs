//! Finite-difference verification of analytic gradients.

use crate::autograd::{Graph, Var};
use crate::error::{contract_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input index, flat element index)` of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
    pub pass: bool,
}

/// Relative error with the `max(|a|, |b|, 1e-8)` denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Checks the gradient of a scalar function of one tensor against central
/// differences `(f(x+h) - f(x-h)) / 2h`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, xs| f(g, xs[0]), std::slice::from_ref(point), step, tolerance)
}

/// Multi-input form of [`grad_check`]: every element of every input is
/// perturbed in turn.
pub fn grad_check_many<F>(f: F, points: &[Tensor], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(contract_err!("finite-difference step {step} outside [1e-7, 1e-3]"));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let base = eval(points)?;
    if eval(points)?.to_bits() != base.to_bits() {
        return Err(Error::CheckInvalid(
            "function returned different values for identical inputs".into(),
        ));
    }

    let analytic: Vec<Tensor> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = points.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let grads = g.backward(out)?;
        vars.iter()
            .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
        pass: true,
    };
    let mut inputs: Vec<Tensor> = points.to_vec();
    for (which, point) in points.iter().enumerate() {
        let mut data = point.to_vec();
        for i in 0..data.len() {
            let x0 = data[i];
            data[i] = x0 + step;
            inputs[which] = Tensor::new(point.shape(), data.clone())?;
            let plus = eval(&inputs)?;
            data[i] = x0 - step;
            inputs[which] = Tensor::new(point.shape(), data.clone())?;
            let minus = eval(&inputs)?;
            data[i] = x0;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[which].data()[i];
            let rel = rel_err(a, numeric);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (which, i);
            }
            report.checked += 1;
        }
        inputs[which] = point.clone();
    }
    report.pass = report.max_rel_err < tolerance;
    Ok(report)
}
