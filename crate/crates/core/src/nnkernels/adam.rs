use serde::{Deserialize, Serialize};

use super::{shape_err, KernelError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2: added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Moments for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            cfg,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected Adam update of every parameter tensor.
pub fn adam_step(params: &mut [&mut [f32]], grads: &[&[f32]], state: &mut AdamState) -> Result<(), KernelError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(shape_err(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(shape_err(format!("adam: tensor {i} has mismatched lengths")));
        }
    }
    state.t += 1;
    let c = state.cfg;
    let t = state.t as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
    let (ob1, ob2) = ((1.0 - c.beta1) as f32, (1.0 - c.beta2) as f32);
    let (wd, lr, eps) = (c.weight_decay as f32, c.lr, c.eps);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for j in 0..p.len() {
            let grad = g[j] + wd * p[j];
            m[j] = b1 * m[j] + ob1 * grad;
            v[j] = b2 * v[j] + ob2 * grad * grad;
            let m_hat = f64::from(m[j]) / bc1;
            let v_hat = f64::from(v[j]) / bc2;
            p[j] -= (lr * m_hat / (v_hat.sqrt() + eps)) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_lr_sized() {
        let mut w = [0.0f32];
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut st = AdamState::new(cfg, &[1]);
        adam_step(&mut [&mut w[..]], &[&[0.5f32][..]], &mut st).unwrap();
        let expected = -1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((f64::from(w[0]) - expected).abs() < 1e-6 * expected.abs(), "{}", w[0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut w = [0.3f32, -1.2];
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut st = AdamState::new(cfg, &[2]);
        for _ in 0..3 {
            adam_step(&mut [&mut w[..]], &[&[0.0f32, 0.0][..]], &mut st).unwrap();
        }
        assert_eq!(w, [0.3, -1.2]);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut w = [0.1f32, 0.2, 0.3];
            let mut st = AdamState::new(AdamConfig::default(), &[3]);
            for _ in 0..5 {
                adam_step(&mut [&mut w[..]], &[&[0.4f32, -0.1, 0.0][..]], &mut st).unwrap();
            }
            (w, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch() {
        let mut w = [0.0f32; 2];
        let mut st = AdamState::new(AdamConfig::default(), &[2]);
        assert!(adam_step(&mut [&mut w[..]], &[&[0.0f32][..]], &mut st).is_err());
    }
}
