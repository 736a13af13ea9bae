//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward closure, so it is independent of the
//! backward rules it is used to verify.

use crate::error::Result;
use crate::{Graph, Tensor, Var};

/// Largest relative error seen for one input tensor.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub input: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero gradients from dominating.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Options for [`check_gradients`].
#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    pub floor: f64,
    /// Check at most this many elements per input (evenly strided); `None` checks all.
    pub max_per_input: Option<usize>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: 1e-5,
            floor: 1e-6,
            max_per_input: None,
        }
    }
}

/// Compares backward-pass gradients of `f` against central differences for every input.
///
/// `f` receives a fresh graph and the input vars (registered as parameters) and returns
/// the scalar loss var.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    opts: &CheckOptions,
    f: F,
) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().clone()))
        })
        .collect();

    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (idx, input) in inputs.iter().enumerate() {
        let n = input.len();
        let stride = match opts.max_per_input {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut rep = GradCheck {
            input: idx,
            checked: 0,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in (0..n).step_by(stride) {
            let orig = input.data()[k];
            work[idx].data_mut()[k] = orig + opts.step;
            let plus = eval(&work)?;
            work[idx].data_mut()[k] = orig - opts.step;
            let minus = eval(&work)?;
            work[idx].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[idx].data()[k];
            let e = rel_err(a, numeric, opts.floor);
            rep.checked += 1;
            if e > rep.max_rel_err || rep.checked == 1 {
                rep.max_rel_err = e;
                rep.worst_index = k;
                rep.analytic = a;
                rep.numeric = numeric;
            }
        }
        reports.push(rep);
    }
    Ok(reports)
}

/// Worst relative error across all inputs.
pub fn worst(reports: &[GradCheck]) -> f64 {
    reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
}
