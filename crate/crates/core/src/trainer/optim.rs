use std::collections::HashMap;

use crate::model::ModelParameters;
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Adam moments and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    /// First and second moments, in parameter order.
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParameters, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global L2 norm before clipping.
    pub grad_norm: f64,
    /// Factor applied to every gradient (1 when not clipped).
    pub scale: f64,
}

pub fn global_norm<'a>(grads: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    grads
        .into_iter()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// One bias-corrected Adam update. Missing gradients count as zero. With `clip`, all
/// gradients are scaled so their global norm is at most `clip`.
pub fn adam_step(
    params: &mut ModelParameters,
    grads: &HashMap<String, Tensor>,
    state: &mut OptimizerState,
    clip: Option<f64>,
) -> Result<StepStats> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer holds {} moments for {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    for (name, p) in params.iter() {
        if let Some(g) = grads.get(name) {
            if g.shape() != p.shape() {
                return Err(Error::shape("adam_step", format!("{name}: grad {:?} vs {:?}", g.shape(), p.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of '{name}'")));
            }
        }
    }
    let grad_norm = global_norm(grads.values());
    let scale = match clip {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, (name, p)) in params.iter_mut().enumerate() {
        let g = grads.get(name);
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let precision = p.precision();
        let pd = p.data_mut();
        for j in 0..pd.len() {
            let gj = g.map_or(0.0, |g| g.data()[j] * scale);
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let update = state.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + state.eps);
            pd[j] = precision.round(pd[j] - update);
        }
    }
    Ok(StepStats { grad_norm, scale })
}

