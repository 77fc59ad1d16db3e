//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to weight matrices only; biases, gains and single-row tables
    /// are not decayed.
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Matrix> = params
            .shapes()
            .iter()
            .map(|&(r, c)| Matrix::zeros(r, c))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Scales `grads` so their joint L2 norm is at most `cap`; returns the norm
/// before scaling.
pub fn clip_global_norm(grads: &mut [Matrix], cap: f64) -> f64 {
    let norm = grads.iter().map(Matrix::sum_sq).sum::<f64>().sqrt();
    if cap > 0.0 && norm > cap {
        let s = cap / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &[Matrix],
    hyper: &AdamW,
    state: &mut AdamState,
) -> Result<()> {
    if grads.len() != params.tensors().len() || state.m.len() != grads.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.tensors().len()
        )));
    }
    for (g, p) in grads.iter().zip(params.tensors()) {
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch(format!(
                "gradient {:?} vs parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let decay = if p.rows() > 1 { hyper.weight_decay } else { 0.0 };
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = hyper.beta1 * *mj + (1.0 - hyper.beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = hyper.beta2 * *vj + (1.0 - hyper.beta2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((w, mj), vj) in p.data_mut().iter_mut().zip(m).zip(v) {
            let update = (mj / bc1) / ((vj / bc2).sqrt() + hyper.eps);
            *w -= hyper.lr * (update + decay * *w);
        }
    }
    Ok(())
}
