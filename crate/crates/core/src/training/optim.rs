use crate::error::{Error, Result};
use crate::model::Params;
use crate::numerics::Tensor;

/// Inverse-square-root schedule with linear warmup:
/// `d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_at(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Precondition("learning-rate schedule starts at step 1".into()));
    }
    if warmup == 0 || d_model == 0 {
        return Err(Error::Config("warmup and d_model must be positive".into()));
    }
    let s = step as f64;
    let decay = s.powf(-0.5);
    let ramp = s * (warmup as f64).powf(-1.5);
    Ok((d_model as f64).powf(-0.5) * decay.min(ramp))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moments per parameter plus the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        let zeros: Params = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update; increments `state.step`.
pub fn adam_update(params: &mut Params, grads: &Params, state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return Err(Error::Dimension(
            "parameters, gradients and optimizer moments are not aligned".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: &[f64]) -> Params {
        [("w".to_string(), Tensor::new(vec![v.len()], v.to_vec()).unwrap())]
            .into_iter()
            .collect()
    }

    #[test]
    fn schedule_values() {
        assert!((lr_at(8000, 512, 8000).unwrap() - 4.941e-4).abs() < 1e-7);
        let first = 512f64.powf(-0.5) * 8000f64.powf(-1.5);
        assert!((lr_at(1, 512, 8000).unwrap() - first).abs() < 1e-15);
        assert!((first - 6.177e-8).abs() < 1e-10);
        assert!(matches!(lr_at(0, 512, 8000), Err(Error::Precondition(_))));
    }

    #[test]
    fn schedule_peak() {
        let at = |s| lr_at(s, 512, 8000).unwrap();
        assert!(at(7999) < at(8000) && at(8000) > at(8001));
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(&[1.0, -2.0]);
        let mut s = AdamState::new(&p);
        adam_update(&mut p, &single(&[0.0, 0.0]), &mut s, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p, single(&[1.0, -2.0]));
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(&[0.0, 0.0, 0.0]);
        let mut s = AdamState::new(&p);
        adam_update(&mut p, &single(&[3.0, -0.01, 1e-3]), &mut s, 0.01, &AdamConfig::default()).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] + 0.01).abs() < 1e-9);
        assert!((w[1] - 0.01).abs() < 1e-9);
        assert!((w[2] + 0.01).abs() < 1e-8);
    }

    #[test]
    fn constant_gradient_update_tends_to_lr() {
        let mut p = single(&[0.0]);
        let mut s = AdamState::new(&p);
        let g = single(&[0.7]);
        let cfg = AdamConfig::default();
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p.get("w").unwrap().data()[0];
            adam_update(&mut p, &g, &mut s, 1e-3, &cfg).unwrap();
            last = before - p.get("w").unwrap().data()[0];
        }
        assert!((last - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let mut p = single(&[0.0]);
        let mut s = AdamState::new(&p);
        assert!(adam_update(&mut p, &single(&[0.0, 1.0]), &mut s, 0.1, &AdamConfig::default()).is_err());
    }
}
