use crate::numerics::{ParamRegistry, ParamStore, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F: Scalar = f32> {
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    decays: Vec<bool>,
}

impl<F: Scalar> AdamState<F> {
    /// Zero moments; decay eligibility taken from each parameter's kind.
    pub fn new(registry: &ParamRegistry) -> Self {
        let zeros = || registry.defs().iter().map(|d| Tensor::zeros(&d.shape)).collect();
        AdamState { step: 0, m: zeros(), v: zeros(), decays: registry.defs().iter().map(|d| d.kind.decays()).collect() }
    }

    pub fn decays(&self) -> &[bool] {
        &self.decays
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
///
/// The stored gradient of every parameter is multiplied by `grad_scale`
/// first. Parameters without a gradient are left untouched.
pub fn adamw_step<F: Scalar>(params: &mut ParamStore<F>, state: &mut AdamState<F>, lr: f64, cfg: &AdamWConfig, grad_scale: f64) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for id in params.ids().collect::<Vec<_>>() {
        let decay = if state.decays[id.0] { cfg.weight_decay } else { 0.0 };
        let p = params.get_mut(id);
        let Some(grad) = p.grad.as_ref() else { continue };
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        let w = p.value.data_mut();
        for (((wi, &gi), mi), vi) in w.iter_mut().zip(grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let g = gi.as_f64() * grad_scale;
            let m_new = cfg.beta1 * mi.as_f64() + (1.0 - cfg.beta1) * g;
            let v_new = cfg.beta2 * vi.as_f64() + (1.0 - cfg.beta2) * g * g;
            *mi = F::lit(m_new);
            *vi = F::lit(v_new);
            let update = (m_new / bc1) / ((v_new / bc2).sqrt() + cfg.eps);
            *wi = F::lit(wi.as_f64() * (1.0 - lr * decay) - lr * update);
        }
    }
}
