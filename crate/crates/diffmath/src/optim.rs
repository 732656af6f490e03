use std::f64::consts::PI;

use crate::network::{Gradients, Network};
use crate::tensor::Tensor;
use crate::DiffError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Length of the cosine schedule; the LR stays at `min_lr` afterwards.
    pub max_steps: u64,
    pub min_lr: f64,
    /// Global-norm gradient clipping threshold.
    pub grad_clip: Option<f64>,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            max_steps: 1000,
            min_lr: 1e-6,
            grad_clip: Some(1.0),
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<(), DiffError> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr > 0.0) || !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(DiffError::Precondition(format!(
                "optimizer needs lr > 0 and betas in (0, 1), got lr={} betas=({}, {})",
                self.lr, self.beta1, self.beta2
            )));
        }
        if self.min_lr < 0.0 || self.min_lr > self.lr || self.weight_decay < 0.0 || self.max_steps == 0 {
            return Err(DiffError::Precondition(format!(
                "bad schedule: min_lr={} weight_decay={} max_steps={}",
                self.min_lr, self.weight_decay, self.max_steps
            )));
        }
        Ok(())
    }

    /// Cosine-annealed learning rate after `step` updates.
    pub fn lr_at(&self, step: u64) -> f64 {
        let t = step.min(self.max_steps) as f64 / self.max_steps as f64;
        if step >= self.max_steps {
            return self.min_lr;
        }
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (PI * t).cos())
    }
}

/// AdamW state: moment estimates per parameter tensor plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub config: OptConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptState {
    pub fn new(config: OptConfig, params: &[Tensor]) -> Result<Self, DiffError> {
        config.validate()?;
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(Self { config, step: 0, m: zeros(), v: zeros() })
    }

    /// LR the next update will use.
    pub fn effective_lr(&self) -> f64 {
        self.config.lr_at(self.step)
    }

    /// One in-place AdamW update with decoupled weight decay.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), DiffError> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(DiffError::Shape(format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(DiffError::Shape(format!(
                    "parameter {i}: {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.is_finite() {
                return Err(DiffError::NonFinite(format!("gradient {i}")));
            }
        }
        let c = self.config;
        let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        let clip = match c.grad_clip {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        let lr = self.effective_lr();
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for j in 0..pd.len() {
                let gj = g.data()[j] * clip;
                md[j] = c.beta1 * md[j] + (1.0 - c.beta1) * gj;
                vd[j] = c.beta2 * vd[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = md[j] / bc1;
                let vhat = vd[j] / bc2;
                pd[j] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * pd[j]);
            }
        }
        Ok(())
    }
}

/// Value-semantics wrapper around [`OptState::update`].
pub fn optimizer_step(net: &Network, grads: &Gradients, opt: &OptState) -> Result<(Network, OptState), DiffError> {
    let mut net = net.clone();
    let mut opt = opt.clone();
    opt.update(net.params_mut(), grads.tensors())?;
    Ok((net, opt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_network, Activation, NetworkSpec};

    fn net() -> Network {
        build_network(&NetworkSpec::mlp(3, &[4], 2, Activation::Tanh), 5).unwrap()
    }

    #[test]
    fn zero_gradients_without_decay_leave_parameters() {
        let net = net();
        let cfg = OptConfig { weight_decay: 0.0, ..OptConfig::default() };
        let opt = OptState::new(cfg, net.params()).unwrap();
        let zeros = Gradients(net.params().iter().map(|p| Tensor::zeros(p.shape())).collect());
        let (after, opt) = optimizer_step(&net, &zeros, &opt).unwrap();
        assert_eq!(after, net);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn schedule_reaches_min_lr_at_max_steps() {
        let cfg = OptConfig { lr: 1e-3, max_steps: 50, ..OptConfig::default() };
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert_eq!(cfg.lr_at(50), 1e-6);
        assert_eq!(cfg.lr_at(500), 1e-6);
        assert!((cfg.lr_at(25) - (1e-6 + 0.5 * (1e-3 - 1e-6))).abs() < 1e-15);
    }

    #[test]
    fn identical_inputs_give_identical_outputs() {
        let net = net();
        let opt = OptState::new(OptConfig::default(), net.params()).unwrap();
        let g = Gradients(net.params().iter().map(|p| Tensor::filled(p.shape(), 0.3)).collect());
        let a = optimizer_step(&net, &g, &opt).unwrap();
        let b = optimizer_step(&net, &g, &opt).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, net);
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let net = net();
        let opt = OptState::new(OptConfig::default(), net.params()).unwrap();
        let g = Gradients(vec![Tensor::zeros(&[1])]);
        assert!(optimizer_step(&net, &g, &opt).is_err());
    }

    #[test]
    fn invalid_betas_are_rejected() {
        let cfg = OptConfig { beta2: 1.0, ..OptConfig::default() };
        assert!(OptState::new(cfg, &[]).is_err());
    }
}
