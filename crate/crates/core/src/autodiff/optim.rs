use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            ..Self::default()
        }
    }
}

/// Optimizer moments for an ordered list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    /// First moments (Adam only; empty for SGD).
    pub m: Vec<Tensor>,
    /// Second moments (Adam only; empty for SGD).
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, shapes: &[&[usize]]) -> Self {
        let moments = || -> Vec<Tensor> {
            match config.kind {
                OptimizerKind::Adam => shapes.iter().map(|s| Tensor::zeros(s)).collect(),
                OptimizerKind::Sgd => Vec::new(),
            }
        };
        Self {
            m: moments(),
            v: moments(),
            config,
            step: 0,
        }
    }

    /// Applies one update. `params[i]` pairs with `grads[i]`; a parameter
    /// whose gradient is `None` keeps its value and moments.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.config.kind == OptimizerKind::Adam && self.m.len() != params.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::shape(format!(
                        "gradient {i} has shape {:?}, parameter {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
            }
        }
        self.step += 1;
        let c = &self.config;
        match c.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    if let Some(g) = g {
                        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                            *w -= c.lr * d;
                        }
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for (i, p) in params.iter_mut().enumerate() {
                    let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
                    let data = p.data_mut();
                    match grads[i] {
                        Some(g) => {
                            for (j, d) in g.data().iter().enumerate() {
                                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * d;
                                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * d * d;
                                let mhat = m[j] / bc1;
                                let vhat = v[j] / bc2;
                                data[j] -= c.lr * mhat / (vhat.sqrt() + c.eps);
                            }
                        }
                        // Parameters without a gradient are skipped entirely.
                        None => {}
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_zero_gradient_is_a_no_op() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0]);
        let g = Tensor::zeros(&[2]);
        let mut st = OptimizerState::new(OptimizerConfig::sgd(0.1), &[&[2]]);
        st.step(&mut [&mut p], &[Some(&g)]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_matches_hand_value() {
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        let mut st = OptimizerState::new(OptimizerConfig::default(), &[&[]]);
        st.step(&mut [&mut p], &[Some(&g)]).unwrap();
        // m_hat = v_hat = 1, so p = -lr / (1 + eps).
        let expected = -1e-3 / (1.0 + 1e-8);
        assert_eq!(p.item(), expected);
        assert!((p.item() + 9.99999990e-4).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn two_sgd_steps_accumulate_linearly() {
        let lr = 0.25;
        let mut p = Tensor::scalar(3.0);
        let g = Tensor::scalar(0.5);
        let mut st = OptimizerState::new(OptimizerConfig::sgd(lr), &[&[]]);
        st.step(&mut [&mut p], &[Some(&g)]).unwrap();
        st.step(&mut [&mut p], &[Some(&g)]).unwrap();
        assert_eq!(p.item(), 3.0 - 2.0 * lr * 0.5);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::zeros(&[3]);
        let g = Tensor::zeros(&[2]);
        let mut st = OptimizerState::new(OptimizerConfig::default(), &[&[3]]);
        assert!(matches!(st.step(&mut [&mut p], &[Some(&g)]), Err(Error::Shape(_))));
        assert_eq!(st.step, 0);
    }
}
