use super::params::{GradSet, ParamSet};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    fn check(&self, params: &ParamSet) -> Result<()> {
        let ok = self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.len() == p.len() && v.len() == p.len());
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension("optimizer state does not match parameters".into()))
        }
    }
}

/// One Adam update on every tensor.
pub fn adam_step(params: &mut ParamSet, grads: &GradSet, state: &mut AdamState, lr: f64) -> Result<()> {
    let all = vec![true; params.len()];
    adam_step_selected(params, grads, state, lr, &all)
}

/// One Adam update restricted to tensors with `selected[i]`. Unselected
/// tensors keep both their values and their moment estimates. All gradients
/// are checked for finiteness before anything is modified.
pub fn adam_step_selected(
    params: &mut ParamSet,
    grads: &GradSet,
    state: &mut AdamState,
    lr: f64,
    selected: &[bool],
) -> Result<()> {
    grads.check_congruent(params)?;
    state.check(params)?;
    if selected.len() != params.len() {
        return Err(Error::Dimension("selection length does not match parameters".into()));
    }
    for (g, &on) in grads.iter().zip(selected) {
        if on && g.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(g.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        if !selected[i] {
            continue;
        }
        let g = &grads.get(i).data;
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for k in 0..p.data.len() {
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            p.data[k] -= lr * mhat / (vhat.sqrt() + EPS);
        }
    }
    Ok(())
}
