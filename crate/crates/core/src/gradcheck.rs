//! Central-difference gradient checking.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::Params;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

/// Which coordinates of each input to probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coverage {
    All,
    /// At most `per_input` coordinates per input, drawn without replacement.
    Sample { per_input: usize, seed: u64 },
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences with step `eps`, over every coordinate of every input.
pub fn grad_check<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_with(inputs, eps, Coverage::All, f)
}

pub fn grad_check_with<F>(inputs: &[Tensor], eps: f64, coverage: Coverage, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_coord: 0,
        coords_checked: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (which, (&v, input)) in vars.iter().zip(inputs).enumerate() {
        let analytic = grads.wrt(v, input);
        let coords = coords_for(input.len(), which, coverage);
        for c in coords {
            let orig = input.data()[c];
            probe[which].data_mut()[c] = orig + eps;
            let plus = evaluate(&f, &probe)?;
            probe[which].data_mut()[c] = orig - eps;
            let minus = evaluate(&f, &probe)?;
            probe[which].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("numeric gradient of input {which} at coordinate {c}"),
                });
            }
            let rel = libm::fabs(analytic.data()[c] - numeric) / numeric.abs().max(1.0);
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_input = which;
                report.worst_coord = c;
            }
        }
    }
    Ok(report)
}

fn coords_for(len: usize, which: usize, coverage: Coverage) -> Vec<usize> {
    match coverage {
        Coverage::Sample { per_input, seed } if per_input < len => {
            let mut rng = crate::rng::keyed_rng(seed, &format!("gradcheck/{which}"));
            let mut picked = index::sample(&mut rng, len, per_input).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..len).collect(),
    }
}

/// Like [`grad_check_with`], but differentiates with respect to named
/// parameters that `f` binds through [`Params::bind`]. `worst_input` is the
/// position in name order among the bound parameters.
pub fn param_grad_check<F>(params: &Params, eps: f64, coverage: Coverage, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Params) -> Result<Var>,
{
    let value = |p: &Params| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, p)?;
        g.value(out).item()
    };
    let mut g = Graph::new();
    let out = f(&mut g, params)?;
    let analytic = g.param_grads(&g.backward(out)?);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_coord: 0,
        coords_checked: 0,
    };
    let mut probe = params.clone();
    // only arrays the objective actually binds
    let names: Vec<String> = analytic.keys().cloned().collect();
    for (which, name) in names.iter().enumerate() {
        let len = params.get(name)?.len();
        let grad = &analytic[name];
        for c in coords_for(len, which, coverage) {
            let orig = params.get(name)?.data()[c];
            let set = |p: &mut Params, v: f64| {
                if let Some(t) = p.get_mut(name) {
                    t.data_mut()[c] = v;
                }
            };
            set(&mut probe, orig + eps);
            let plus = value(&probe)?;
            set(&mut probe, orig - eps);
            let minus = value(&probe)?;
            set(&mut probe, orig);
            let numeric = (plus - minus) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("numeric gradient of `{name}` at coordinate {c}"),
                });
            }
            let rel = libm::fabs(grad.data()[c] - numeric) / numeric.abs().max(1.0);
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_input = which;
                report.worst_coord = c;
            }
        }
    }
    Ok(report)
}
