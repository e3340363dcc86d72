use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

fn check_grads(params: &[Tensor], grads: &[Option<Vec<f64>>]) -> Result<(), TensorError> {
    if params.len() != grads.len() {
        return Err(super::shape_err("optimizer", format!("{} params, {} grads", params.len(), grads.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if let Some(g) = g {
            if g.len() != p.len() {
                return Err(super::shape_err("optimizer", format!("param {i}: {} values, grad {}", p.len(), g.len())));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(TensorError::NonFiniteGradient(format!("#{i} element {j}")));
            }
        }
    }
    Ok(())
}

/// Adam with bias correction. Parameters whose gradient is `None` are frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Applies one update. A non-finite gradient aborts before anything changes.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Option<Vec<f64>>]) -> Result<(), TensorError> {
        check_grads(params, grads)?;
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, gj), mj), vj) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                let m_hat = *mj / bc1;
                let v_hat = *vj / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Plain SGD with classical momentum: `v = mu v - lr g; w += v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum { lr, momentum, velocity: Vec::new() }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Option<Vec<f64>>]) -> Result<(), TensorError> {
        check_grads(params, grads)?;
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            for ((w, gj), vj) in p.data_mut().iter_mut().zip(g).zip(self.velocity[i].iter_mut()) {
                *vj = self.momentum * *vj - self.lr * gj;
                *w += *vj;
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for v in grads.iter_mut().flatten().flat_map(|g| g.iter_mut()) {
            *v *= k;
        }
    }
    norm
}
