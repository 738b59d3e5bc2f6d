//! Bias-corrected Adam over named parameter tensors.

use crate::error::{Error, Result};
use crate::model::{Gradients, Parameters};

/// Moment estimates congruent with the parameters they update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Parameters,
    pub v: Parameters,
    pub step: u64,
}

/// Update hyperparameters, copied out of the training configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamState {
    pub fn new(params: &Parameters) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut Parameters, grads: &Gradients, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    params.check_congruent(grads)?;
    params.check_congruent(&state.m)?;
    params.check_congruent(&state.v)?;
    if !(cfg.learning_rate >= 0.0 && cfg.eps > 0.0 && (0.0..1.0).contains(&cfg.beta1) && (0.0..1.0).contains(&cfg.beta2)) {
        return Err(Error::Config(format!("invalid Adam hyperparameters {cfg:?}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let tensors = params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()));
    for (((_, p), (_, g)), ((_, m), (_, v))) in tensors {
        for (((p, g), m), v) in p.data.iter_mut().zip(&g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig, Tensor};
    use indexmap::IndexMap;

    fn scalar(v: f64) -> Parameters {
        let mut map = IndexMap::new();
        map.insert(
            "x".to_string(),
            Tensor {
                shape: vec![1],
                data: vec![v],
            },
        );
        Parameters::from_tensors(map)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let cfg = ModelConfig::default();
        let mut p = init_params(&cfg, 0).unwrap();
        let before = p.clone();
        let g = p.zeros_like();
        let mut state = AdamState::new(&p);
        for _ in 0..3 {
            adam_step(&mut p, &g, &mut state, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(state.step, 3);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar(0.5);
        let mut state = AdamState::new(&p);
        let cfg = AdamConfig {
            learning_rate: 1e-3,
            ..AdamConfig::default()
        };
        adam_step(&mut p, &scalar(1.0), &mut state, &cfg).unwrap();
        let delta = 0.5 - p.get("x").unwrap().data[0];
        assert!((delta - 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!((delta - 0.000999999).abs() < 1e-9);
    }

    #[test]
    fn constant_gradient_step_tends_to_learning_rate() {
        let mut p = scalar(0.0);
        let mut state = AdamState::new(&p);
        let cfg = AdamConfig {
            learning_rate: 1e-2,
            ..AdamConfig::default()
        };
        let g = scalar(-3.0);
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = p.get("x").unwrap().data[0];
            adam_step(&mut p, &g, &mut state, &cfg).unwrap();
            last = p.get("x").unwrap().data[0] - before;
        }
        assert!((last - 1e-2).abs() < 1e-8, "{last}");
    }

    #[test]
    fn incongruent_gradient_is_rejected() {
        let mut p = scalar(0.0);
        let mut state = AdamState::new(&p);
        let cfg = ModelConfig::default();
        let g = init_params(&cfg, 1).unwrap();
        assert!(adam_step(&mut p, &g, &mut state, &AdamConfig::default()).is_err());
    }
}
