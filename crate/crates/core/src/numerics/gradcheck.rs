//! Central finite-difference verification of analytic gradients.

use super::params::{Graph, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Maximum relative error between the tape gradient of `f` at `x` and central
/// finite differences with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(&x.clone().with_grad());
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t);
        let out = f(&mut tape, v)?;
        Ok(tape.scalar(out))
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(relative_error(analytic[i], (plus - minus) / (2.0 * h)));
    }
    Ok(worst)
}

/// Outcome of a finite-difference check over every scalar of a parameter store.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Checks gradients of a scalar built by `f` with respect to every parameter.
///
/// `f` is evaluated in evaluation mode with a fixed graph seed, so any latent
/// sample it draws is identical across evaluations.
pub fn grad_check_params<F>(store: &ParamStore, h: f64, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let (grads, _) = {
        let mut g = Graph::new(store, false, seed);
        let loss = f(&mut g)?;
        g.backward(loss)?;
        (g.param_grads(), g.tape.scalar(loss))
    };
    let mut analytic: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    for (id, g) in grads {
        analytic[id.0] = g;
    }

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s, false, seed);
        let loss = f(&mut g)?;
        Ok(g.tape.scalar(loss))
    };
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for id in store.ids() {
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[id.0][i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
