use super::{ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new() -> Self {
        Self {
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// One bias-corrected Adam update over every non-frozen parameter holding a gradient.
///
/// Panics if a frozen parameter carries a nonzero gradient: frozen weights
/// are bound as constants, so such a gradient indicates a wiring bug.
pub fn adam_step<F: Scalar>(
    params: &mut ParamStore<F>,
    state: &mut AdamState<F>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.is_empty() {
        return Err(Error::InvalidArgument(
            "adam_step on empty parameter list".into(),
        ));
    }
    if state.m.len() != params.len() {
        state.m = params
            .ids()
            .map(|id| vec![F::zero(); params.value(id).len()])
            .collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (F::from_f64(cfg.beta1), F::from_f64(cfg.beta2));
    let (one_b1, one_b2) = (F::from_f64(1.0 - cfg.beta1), F::from_f64(1.0 - cfg.beta2));
    let step_size = F::from_f64(cfg.lr / bc1);
    let bc2_sqrt = F::from_f64(bc2.sqrt());
    let eps = F::from_f64(cfg.eps);
    for id in params.ids().collect::<Vec<_>>() {
        let Some(grad) = params.grad(id).map(<[F]>::to_vec) else {
            continue;
        };
        if params.is_frozen(id) {
            assert!(
                grad.iter().all(|&g| g == F::zero()),
                "attempt to update frozen parameter {}",
                params.name(id)
            );
            continue;
        }
        let i = id.index();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let w = params.value_mut(id).data_mut();
        for j in 0..w.len() {
            let g = grad[j];
            m[j] = b1 * m[j] + one_b1 * g;
            v[j] = b2 * v[j] + one_b2 * g * g;
            let denom = v[j].sqrt() / bc2_sqrt + eps;
            w[j] = w[j] - step_size * m[j] / denom;
        }
    }
    Ok(())
}
