use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub const DEFAULT_LR: f64 = 1e-4;

    /// Zeroed moments mirroring `params`, default hyperparameters.
    pub fn new(params: &[Tensor]) -> Self {
        Self::with_lr(params, Self::DEFAULT_LR)
    }

    pub fn with_lr(params: &[Tensor], lr: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update. On a non-finite gradient nothing is modified.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape_mismatch("adam", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {i}")));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (j, &gj) in g.data().iter().enumerate() {
            md[j] = b1 * md[j] + (1.0 - b1) * gj;
            vd[j] = b2 * vd[j] + (1.0 - b2) * gj * gj;
            let m_hat = md[j] / c1;
            let v_hat = vd[j] / c2;
            pd[j] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}
