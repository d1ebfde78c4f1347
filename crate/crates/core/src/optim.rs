//! Momentum SGD with coupled L2 decay and AdamW with decoupled decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

fn need<'a>(grad: Option<&'a Tensor>, param: &Tensor, what: &str) -> Result<&'a Tensor> {
    let g = grad.ok_or_else(|| Error::contract(format!("{what}: parameter has no gradient")))?;
    if g.shape() != param.shape() {
        return Err(Error::dim(format!(
            "{what}: gradient {:?} for parameter {:?}",
            g.shape(),
            param.shape()
        )));
    }
    Ok(g)
}

/// `v ← μ·v + (g + wd·θ)`, `θ ← θ − lr·v`.
pub fn sgd_step(
    param: &mut Tensor,
    grad: Option<&Tensor>,
    velocity: &mut Tensor,
    lr: f64,
    wd: f64,
    momentum: f64,
) -> Result<()> {
    let g = need(grad, param, "sgd")?;
    for ((p, &gi), v) in param.data_mut().iter_mut().zip(g.data()).zip(velocity.data_mut()) {
        *v = momentum * *v + (gi + wd * *p);
        *p -= lr * *v;
    }
    Ok(())
}

/// Bias-corrected Adam step at time `t ≥ 1`, preceded by the decoupled
/// decay `θ ← θ·(1 − lr·wd)`.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    param: &mut Tensor,
    grad: Option<&Tensor>,
    m: &mut Tensor,
    v: &mut Tensor,
    lr: f64,
    wd: f64,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::contract("adamw step counter starts at 1"));
    }
    let g = need(grad, param, "adamw")?;
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    let decay = 1.0 - lr * wd;
    for (((p, &gi), mi), vi) in param
        .data_mut()
        .iter_mut()
        .zip(g.data())
        .zip(m.data_mut())
        .zip(v.data_mut())
    {
        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *p *= decay;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}
