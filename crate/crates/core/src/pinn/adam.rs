use super::params::ModelParams;
use super::{PinnError, Result};
use midband_autodiff::{AutodiffError, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment estimates, kept in double precision.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new<T: Real>(params: &ModelParams<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. Leaves everything untouched and reports
/// a numeric fault if any gradient entry is not finite.
pub fn adam_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len()
        || state.m.len() != params.len()
        || grads.iter().zip(params.tensors()).any(|(g, p)| g.shape() != p.shape())
    {
        return Err(PinnError::ShapeMismatch("gradients do not match parameters".into()));
    }
    if !grads.iter().all(Tensor::is_finite) {
        return Err(PinnError::Autodiff(AutodiffError::NumericFault { op: "adam_step" }));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gf = gv.as_f64();
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gf;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gf * gf;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv = T::lit(pv.as_f64() - cfg.lr * mhat / (vhat.sqrt() + cfg.eps));
        }
    }
    Ok(())
}
