//! Adam optimizer with bias correction.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segnet::ops::Scalar;
use crate::segnet::ModelParams;

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, aligned with the parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState<F> {
    pub m: Vec<(String, ArrayD<F>)>,
    pub v: Vec<(String, ArrayD<F>)>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        let zeros: Vec<(String, ArrayD<F>)> = params
            .iter()
            .map(|(n, t)| (n.to_string(), ArrayD::zeros(t.raw_dim())))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update, in place:
/// m <- b1*m + (1-b1)*g; v <- b2*v + (1-b2)*g^2;
/// p <- p - lr * m_hat / (sqrt(v_hat) + eps), with bias correction at step t
/// (t starts at 1).
pub fn adam_step<F: Scalar>(
    params: &mut ModelParams<F>,
    grads: &ModelParams<F>,
    state: &mut AdamState<F>,
    t: u64,
    h: &AdamHyper,
) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidConfig("adam step count starts at 1".into()));
    }
    let b1 = F::from_f64_lossy(h.beta1);
    let b2 = F::from_f64_lossy(h.beta2);
    let one = F::one();
    let lr = F::from_f64_lossy(h.learning_rate);
    let eps = F::from_f64_lossy(h.epsilon);
    let bc1 = F::from_f64_lossy(1.0 - h.beta1.powi(t as i32));
    let bc2 = F::from_f64_lossy(1.0 - h.beta2.powi(t as i32));

    for (i, (name, p)) in params.iter_mut().enumerate() {
        let g = grads.get(name)?;
        if g.raw_dim() != p.raw_dim() {
            return Err(Error::ShapeMismatch(format!(
                "gradient for {name} has shape {:?}, parameter is {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let (m_name, m) = &mut state.m[i];
        let (_, v) = &mut state.v[i];
        debug_assert_eq!(m_name, name);
        ndarray::Zip::from(p)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|p, m, v, g| {
                *m = b1 * *m + (one - b1) * *g;
                *v = b2 * *v + (one - b2) * *g * *g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::ModelConfig;

    fn setup() -> (ModelParams<f64>, ModelConfig) {
        let cfg = ModelConfig {
            levels: 1,
            base_filters: 2,
            in_channels: 4,
        };
        (ModelParams::<f64>::init(&cfg, 0).unwrap(), cfg)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut params, _) = setup();
        let before = params.clone();
        let grads = params.zeros_like();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 1, &AdamHyper::default()).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn first_step_with_unit_gradient_is_minus_lr() {
        // scalar view: bias-corrected first step is -lr * 1/(1 + eps)
        let (mut params, _) = setup();
        let before = params.clone();
        let mut grads = params.zeros_like();
        grads
            .get_mut("head.bias")
            .unwrap()
            .as_slice_mut()
            .unwrap()[0] = 1.0;
        let mut state = AdamState::new(&params);
        let h = AdamHyper::default();
        adam_step(&mut params, &grads, &mut state, 1, &h).unwrap();
        let delta = params.get("head.bias").unwrap().as_slice().unwrap()[0]
            - before.get("head.bias").unwrap().as_slice().unwrap()[0];
        let expect = -0.001 * (1.0 / (1.0 + 1e-8));
        assert!((delta - expect).abs() < 1e-12, "delta {delta}");
    }

    #[test]
    fn state_round_trips_through_serialization() {
        let (mut params, _) = setup();
        let mut grads = params.zeros_like();
        for (_, g) in grads.iter_mut() {
            g.fill(0.01);
        }
        let mut state = AdamState::new(&params);
        let h = AdamHyper::default();
        adam_step(&mut params, &grads, &mut state, 1, &h).unwrap();

        let json = serde_json::to_string(&state).unwrap();
        let mut restored: AdamState<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(restored, state);

        // the next step is identical from live and restored state
        let mut a = params.clone();
        adam_step(&mut a, &grads, &mut state, 2, &h).unwrap();
        let mut b = params.clone();
        adam_step(&mut b, &grads, &mut restored, 2, &h).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn step_zero_is_rejected() {
        let (mut params, _) = setup();
        let grads = params.zeros_like();
        let mut state = AdamState::new(&params);
        assert!(adam_step(&mut params, &grads, &mut state, 0, &AdamHyper::default()).is_err());
    }
}
