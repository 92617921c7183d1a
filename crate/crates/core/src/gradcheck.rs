//! Central finite-difference checks of reverse-mode gradients.
//!
//! Used by the unit tests of every differentiable op and module, and by the
//! acceptance suite.

use std::collections::BTreeMap;

use crate::autograd::{Graph, Trainable, Var};
use crate::error::Result;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-3;
/// Default acceptance threshold on the relative error.
pub const FD_TOLERANCE: f64 = 1e-3;
/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;
/// Ratio between the main step and the step used to re-check an element
/// whose main-step interval straddles a kink.
const KINK_REFINE: f64 = 10.0;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Elements whose `±step` interval crosses a non-smooth point (a ReLU or
    /// bilinear-tap boundary). Central differences at `step` and `step/10`
    /// disagree there, so they are compared at `step/10` instead.
    pub kinks: usize,
    /// `(tensor label, flat index, analytic, numeric)` of the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }

    /// Compares `analytic` with central differences of `f` (which evaluates
    /// the scalar at a given displacement).
    fn compare(&mut self, label: &str, index: usize, analytic: f64, step: f64, f: impl Fn(f64) -> Result<f64>) -> Result<()> {
        let fd = |h: f64| -> Result<f64> { Ok((f(h)? - f(-h)?) / (2.0 * h)) };
        let coarse = fd(step)?;
        if rel_err(analytic, coarse) <= FD_TOLERANCE {
            self.record(label, index, analytic, coarse);
            return Ok(());
        }
        let fine = fd(step / KINK_REFINE)?;
        if rel_err(coarse, fine) > FD_TOLERANCE {
            self.kinks += 1;
            self.record(label, index, analytic, fine);
        } else {
            self.record(label, index, analytic, coarse);
        }
        Ok(())
    }

    fn record(&mut self, label: &str, index: usize, analytic: f64, numeric: f64) {
        let err = rel_err(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some((label.to_string(), index, analytic, numeric));
        }
    }

    fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.kinks += other.kinks;
        if other.max_rel_err >= self.max_rel_err {
            if let Some(w) = other.worst {
                self.worst = Some(w);
            }
            self.max_rel_err = other.max_rel_err;
        }
    }
}

/// Evenly spread element indices, at most `limit` of them.
fn sample_indices(len: usize, limit: usize) -> Vec<usize> {
    if len <= limit {
        return (0..len).collect();
    }
    (0..limit).map(|i| i * len / limit + (i * 7919) % (len / limit).max(1)).collect()
}

/// Checks `d f / d inputs` where `f` builds a scalar from free input nodes.
pub fn check_inputs<F>(inputs: &[Tensor], step: f64, max_elems: usize, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(&g, v)).collect();
    drop(g);

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for idx in sample_indices(t.len(), max_elems) {
            let orig = t.data()[idx];
            let work = std::cell::RefCell::new(&mut work);
            report.compare(&format!("input{ti}"), idx, analytic[ti].data()[idx], step, |h| {
                let mut w = work.borrow_mut();
                w[ti].data_mut()[idx] = orig + h;
                let v = eval(&w[..]);
                w[ti].data_mut()[idx] = orig;
                v
            })?;
        }
    }
    Ok(report)
}

/// Checks gradients w.r.t. named parameters (and optional free inputs) of a
/// scalar built from a [`ParamStore`].
pub fn check_params<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    step: f64,
    max_elems: usize,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_trainable(Trainable::All);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, store, &vars)?;
    let grads = g.backward(loss)?;
    let param_grads: BTreeMap<String, Tensor> = grads.params(&g);
    let input_grads: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(&g, v)).collect();
    drop(g);

    let eval = |s: &ParamStore, ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, s, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for (name, analytic) in &param_grads {
        let len = work.get(name).map_or(0, |t| t.len());
        for idx in sample_indices(len, max_elems) {
            let orig = work.get(name).unwrap().data()[idx];
            let cell = std::cell::RefCell::new(&mut work);
            report.compare(name, idx, analytic.data()[idx], step, |h| {
                let mut w = cell.borrow_mut();
                w.get_mut(name).unwrap().data_mut()[idx] = orig + h;
                let v = eval(&w, inputs);
                w.get_mut(name).unwrap().data_mut()[idx] = orig;
                v
            })?;
        }
    }
    let mut work_in = inputs.to_vec();
    let mut input_report = GradCheckReport::default();
    for (ti, t) in inputs.iter().enumerate() {
        for idx in sample_indices(t.len(), max_elems) {
            let orig = t.data()[idx];
            let cell = std::cell::RefCell::new(&mut work_in);
            input_report.compare(&format!("input{ti}"), idx, input_grads[ti].data()[idx], step, |h| {
                let mut w = cell.borrow_mut();
                w[ti].data_mut()[idx] = orig + h;
                let v = eval(store, &w[..]);
                w[ti].data_mut()[idx] = orig;
                v
            })?;
        }
    }
    report.merge(input_report);
    Ok(report)
}

/// A fixed random projection of `x` to a scalar; gives every output element
/// a distinct, non-trivial upstream gradient.
pub fn random_projection_loss(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(x).to_vec();
    let w = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}
