//! Central finite-difference checks of reverse-mode gradients.

use super::params::ParamStore;
use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Step used for the central differences.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` per input.
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares the tape's gradients of a scalar function against central
/// differences with step `h`.
///
/// `f` receives a fresh tape and one leaf per input and must return a scalar
/// node. It is re-run twice per input element, so it must be deterministic.
pub fn grad_check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &ids)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::shape("grad_check function must return a scalar"));
        }
        Ok(v.data()[0])
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &ids)?;
    if !tape.value(out).all_finite() {
        return Err(Error::NonFinite {
            what: "grad_check output",
            step: 0,
        });
    }
    let grads = tape.backward(out)?;

    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(id, x)| grads.get_or_zeros(*id, x.len()))
        .collect();
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite {
                    what: "grad_check perturbation",
                    step: j,
                });
            }
            *gj = (up - down) / (2.0 * h);
        }
        numeric.push(g);
    }
    Ok(compare(&analytic, &numeric))
}

/// Like [`grad_check`], but also checks every parameter of `store` that the
/// function reads. Reports input errors first, then one entry per parameter
/// in store order.
pub fn grad_check_params<F>(store: &ParamStore, inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore, &[NodeId]) -> Result<NodeId>,
{
    let eval = |s: &ParamStore, xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, s, &ids)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::shape("grad_check function must return a scalar"));
        }
        if !v.data()[0].is_finite() {
            return Err(Error::NonFinite {
                what: "grad_check output",
                step: 0,
            });
        }
        Ok(v.data()[0])
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, store, &ids)?;
    eval(store, inputs)?;
    let grads = tape.backward(out)?;
    let mut analytic_store = store.clone();
    analytic_store.zero_grads();
    grads.accumulate(&mut analytic_store);

    let mut analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(id, x)| grads.get_or_zeros(*id, x.len()))
        .collect();
    analytic.extend(store.ids().map(|p| analytic_store.grad(p).to_vec()));

    let mut numeric: Vec<Vec<f64>> = Vec::with_capacity(analytic.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(store, &work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(store, &work)?;
            work[i].data_mut()[j] = orig;
            *gj = (up - down) / (2.0 * h);
        }
        numeric.push(g);
    }
    let mut s = store.clone();
    for p in store.ids() {
        let mut g = vec![0.0; store.value(p).len()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = s.value(p).data()[j];
            s.value_mut(p)[j] = orig + h;
            let up = eval(&s, inputs)?;
            s.value_mut(p)[j] = orig - h;
            let down = eval(&s, inputs)?;
            s.value_mut(p)[j] = orig;
            *gj = (up - down) / (2.0 * h);
        }
        numeric.push(g);
    }
    Ok(compare(&analytic, &numeric))
}

fn compare(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> GradCheckReport {
    let mut rel_errors = Vec::with_capacity(analytic.len());
    let mut max_abs = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
        let denom = norm(a).max(norm(n));
        let d = norm(&diff);
        rel_errors.push(if denom > 1e-12 { d / denom } else { d });
        max_abs = diff.iter().fold(max_abs, |m, x| m.max(x.abs()));
    }
    GradCheckReport {
        max_rel_error: rel_errors.iter().copied().fold(0.0, f64::max),
        rel_errors,
        max_abs_error: max_abs,
    }
}
