use crate::error::{Error, Result};
use crate::model::Params;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, one buffer per parameter in enumeration order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Bias-corrected Adam. Nothing is modified when any gradient is
/// non-finite or misshaped.
pub fn adam_step(
    params: &mut Params,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "adam: {} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        p.expect_same_shape(g, "adam_step")?;
        if !g.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter {name}"
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.tensors_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *w -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64) -> Params {
        Params::from_entries(vec![("w".into(), Tensor::scalar(w))]).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig {
            lr: 1e-3,
            ..Default::default()
        };
        for g in [0.5, -3.0, 100.0] {
            let mut p = single(1.0);
            let mut s = AdamState::new(&p);
            adam_step(&mut p, &[Tensor::scalar(g)], &mut s, &cfg).unwrap();
            let delta = p.get("w").unwrap().data()[0] - 1.0;
            assert!((delta + cfg.lr * g.signum()).abs() <= 1e-6 * cfg.lr);
            assert_eq!(s.step, 1);
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = single(0.25);
        let mut s = AdamState::new(&p);
        adam_step(
            &mut p,
            &[Tensor::scalar(0.0)],
            &mut s,
            &AdamConfig::default(),
        )
        .unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.25);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = single(0.25);
        let mut s = AdamState::new(&p);
        let err = adam_step(
            &mut p,
            &[Tensor::scalar(f64::NAN)],
            &mut s,
            &AdamConfig::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(s.step, 0);
    }
}
