//! Adam with bias correction, applied per parameter group so the trainer
//! can freeze the BRDF field and the pattern during the first stage.

use super::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// First/second moment state per parameter. Parameters never stepped keep
/// step 0, so bias correction starts fresh when a frozen group unfreezes.
#[derive(Debug)]
pub struct AdamState {
    cfg: AdamConfig,
    moments: Vec<Moments>,
}

impl AdamState {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let moments = store
            .ids()
            .map(|id| Moments {
                m: vec![0.0; store.get(id).len()],
                v: vec![0.0; store.get(id).len()],
                step: 0,
            })
            .collect();
        Self { cfg, moments }
    }

    /// One update for each listed parameter, reading the gradient from the
    /// tensor's accumulator. Gradients are left untouched; callers zero them
    /// at the start of the next iteration.
    pub fn step(&mut self, store: &mut ParamStore, params: &[ParamId], lr: f64) {
        for &id in params {
            let st = &mut self.moments[id.index()];
            st.step += 1;
            let t = st.step;
            let tensor = store.get_mut(id);
            let grad: Vec<f64> = tensor.grad().expect("parameter has no gradient").to_vec();
            adam_update(
                tensor.data_mut(),
                &grad,
                &mut st.m,
                &mut st.v,
                t,
                lr,
                self.cfg.beta1,
                self.cfg.beta2,
                self.cfg.epsilon,
            );
        }
    }
}

/// The standard bias-corrected update on raw slices.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) {
    assert_eq!(param.len(), grad.len());
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for i in 0..param.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
}
