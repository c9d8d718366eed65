//! Central finite-difference checks for graph-built scalar functions.

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor of the relative error, so that near-zero gradients
    /// are compared absolutely.
    pub floor: f64,
    /// Check at most this many evenly strided entries per input.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            floor: 1e-3,
            max_entries: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input, entry, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

fn eval(
    inputs: &[Tensor<f64>],
    build: &impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>,
) -> Result<f64, AutodiffError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    Ok(g.value(loss).data()[0])
}

/// Compares reverse-mode gradients of `build` against central differences
/// with respect to every input tensor.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>,
) -> Result<GradCheckReport, AutodiffError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let n = inputs[i].len();
        let analytic = grads
            .get(*var)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let stride = match opts.max_entries {
            Some(m) if m < n => n.div_ceil(m),
            _ => 1,
        };
        for k in (0..n).step_by(stride) {
            let x0 = inputs[i].data()[k];
            work[i].data_mut()[k] = x0 + opts.step;
            let up = eval(&work, &build)?;
            work[i].data_mut()[k] = x0 - opts.step;
            let down = eval(&work, &build)?;
            work[i].data_mut()[k] = x0;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((i, k, a, numeric));
            }
        }
    }
    Ok(report)
}
