//! Plain SGD with momentum and an RMSProp-style optimizer over flat
//! parameter slices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    /// `v <- momentum v + g; p <- p - lr v`
    Sgd {
        lr: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    /// `s <- rho s + (1 - rho) g^2; p <- p - lr g / (sqrt(s) + eps)`
    Rmsprop {
        lr: f64,
        #[serde(default = "default_rho")]
        rho: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}

fn default_rho() -> f64 {
    0.9
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Rmsprop {
            lr: 4.5e-2,
            rho: default_rho(),
            eps: default_eps(),
        }
    }
}

impl OptimizerConfig {
    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Rmsprop { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr, momentum } => lr > 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerConfig::Rmsprop { lr, rho, eps } => lr > 0.0 && (0.0..1.0).contains(&rho) && eps > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Per-parameter accumulator (velocity for SGD, squared-gradient average for
/// RMSProp), one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub buffers: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(shapes: &[usize]) -> Self {
        OptimizerState {
            buffers: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

pub fn optimizer_apply(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.buffers.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameter tensors, {} gradients, {} state buffers",
            params.len(),
            grads.len(),
            state.buffers.len()
        )));
    }
    for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut state.buffers) {
        if p.len() != g.len() || p.len() != s.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter of {} values, gradient of {}, state of {}",
                p.len(),
                g.len(),
                s.len()
            )));
        }
        match *cfg {
            OptimizerConfig::Sgd { lr, momentum } => {
                for ((p, g), v) in p.iter_mut().zip(g.iter()).zip(s.iter_mut()) {
                    *v = momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            OptimizerConfig::Rmsprop { lr, rho, eps } => {
                for ((p, g), sq) in p.iter_mut().zip(g.iter()).zip(s.iter_mut()) {
                    *sq = rho * *sq + (1.0 - rho) * g * g;
                    *p -= lr * g / (sq.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params_and_decays_state() {
        let cfg = OptimizerConfig::Rmsprop { lr: 0.1, rho: 0.9, eps: 1e-8 };
        let mut p = vec![1.0, -2.0];
        let mut state = OptimizerState { buffers: vec![vec![0.5, 0.5]] };
        optimizer_apply(&mut [&mut p], &[&[0.0, 0.0]], &mut state, &cfg).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(state.buffers[0], vec![0.45, 0.45]);

        // SGD keeps coasting on old velocity, which decays
        let cfg = OptimizerConfig::Sgd { lr: 0.1, momentum: 0.5 };
        let mut state = OptimizerState { buffers: vec![vec![0.0, 1.0]] };
        optimizer_apply(&mut [&mut p], &[&[0.0, 0.0]], &mut state, &cfg).unwrap();
        assert_eq!(p, vec![1.0, -2.05]);
        assert_eq!(state.buffers[0], vec![0.0, 0.5]);
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = vec![1.0, 2.0];
        let mut state = OptimizerState::new(&[2]);
        let cfg = OptimizerConfig::Sgd { lr: 0.5, momentum: 0.0 };
        optimizer_apply(&mut [&mut p], &[&[0.2, -0.4]], &mut state, &cfg).unwrap();
        assert_eq!(p, vec![1.0 - 0.5 * 0.2, 2.0 + 0.5 * 0.4]);
    }

    #[test]
    fn rmsprop_three_steps_match_unrolled_recurrence() {
        let (lr, rho, eps) = (0.01, 0.9, 1e-8);
        let cfg = OptimizerConfig::Rmsprop { lr, rho, eps };
        let gs = [0.5, -1.5, 2.0];
        let mut p = vec![3.0];
        let mut state = OptimizerState::new(&[1]);
        for g in gs {
            optimizer_apply(&mut [&mut p], &[&[g]], &mut state, &cfg).unwrap();
        }
        let s1 = 0.1 * 0.25;
        let p1 = 3.0 - lr * 0.5 / (f64::sqrt(s1) + eps);
        let s2 = 0.9 * s1 + 0.1 * 2.25;
        let p2 = p1 + lr * 1.5 / (f64::sqrt(s2) + eps);
        let s3 = 0.9 * s2 + 0.1 * 4.0;
        let p3 = p2 - lr * 2.0 / (f64::sqrt(s3) + eps);
        assert!((p[0] - p3).abs() < 1e-9);
        assert!((state.buffers[0][0] - s3).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![1.0, 2.0];
        let mut state = OptimizerState::new(&[2]);
        let err = optimizer_apply(&mut [&mut p], &[&[1.0]], &mut state, &OptimizerConfig::default()).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn config_json() {
        let cfg: OptimizerConfig = serde_json::from_str(r#"{"kind": "sgd", "lr": 0.01}"#).unwrap();
        assert_eq!(cfg, OptimizerConfig::Sgd { lr: 0.01, momentum: 0.9 });
        assert!(serde_json::from_str::<OptimizerConfig>(r#"{"kind": "sgd", "lr": 0.01, "beta": 1}"#).is_err());
    }
}
