use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum LrSchedule {
    Fixed,
    /// Half-cosine from the base rate down to zero at `total_steps`.
    Cosine { total_steps: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub schedule: LrSchedule,
}

impl SgdConfig {
    pub fn fixed(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            schedule: LrSchedule::Fixed,
        }
    }

    pub fn cosine(learning_rate: f64, momentum: f64, total_steps: usize) -> Self {
        Self {
            learning_rate,
            momentum,
            schedule: LrSchedule::Cosine { total_steps },
        }
    }

    pub fn validate(&self) -> Result<()> {
        // A zero rate is allowed so frozen-update checks can run through the
        // same code path.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be non-negative", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if let LrSchedule::Cosine { total_steps: 0 } = self.schedule {
            return Err(Error::Config("cosine schedule needs total_steps > 0".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            LrSchedule::Fixed => self.learning_rate,
            LrSchedule::Cosine { total_steps } => {
                if step >= total_steps {
                    return 0.0;
                }
                let progress = step as f64 / total_steps as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Momentum SGD: `v ← μ·v + g`, `p ← p − lr·v`, then `g ← 0`.
///
/// Velocity buffers are keyed by position in the parameter list, so callers
/// must pass parameters in the same order on every step.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    config: SgdConfig,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: Vec::new(),
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    /// Applies one update. Frozen tensors (`requires_grad == false`) are skipped.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], step: usize) -> Result<f64> {
        if self.velocity.len() < params.len() {
            self.velocity.resize_with(params.len(), Vec::new);
        }
        let lr = self.config.lr_at(step);
        let lr_t = T::lit(lr);
        let mu = T::lit(self.config.momentum);
        for (i, p) in params.iter_mut().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let numel = p.numel();
            let grad = p
                .grad_mut()
                .ok_or_else(|| Error::contract(format!("parameter #{i} has no gradient buffer")))?
                .clone();
            let v = &mut self.velocity[i];
            if v.len() != numel {
                *v = vec![T::zero(); numel];
            }
            for (vi, &g) in v.iter_mut().zip(&grad) {
                *vi = mu * *vi + g;
            }
            for (d, &vi) in p.data_mut().iter_mut().zip(v.iter()) {
                *d -= lr_t * vi;
            }
            p.zero_grad();
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step_matches_definition() {
        let mut p = Tensor::new([1], vec![1.0f64]).unwrap().into_param();
        p.accumulate_grad(&[0.5]).unwrap();
        let mut opt = Sgd::new(SgdConfig::fixed(0.1, 0.0)).unwrap();
        opt.step(&mut [&mut p], 0).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(p.grad(), Some(&[0.0][..]));
    }

    #[test]
    fn zero_rate_leaves_params() {
        let mut p = Tensor::new([2], vec![1.0f64, -3.0]).unwrap().into_param();
        p.accumulate_grad(&[0.5, 7.0]).unwrap();
        let mut opt = Sgd::new(SgdConfig::fixed(0.0, 0.9)).unwrap();
        opt.step(&mut [&mut p], 0).unwrap();
        assert_eq!(p.data(), &[1.0, -3.0]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = Tensor::new([1], vec![0.0f64]).unwrap().into_param();
        let mut opt = Sgd::new(SgdConfig::fixed(1.0, 0.5)).unwrap();
        p.accumulate_grad(&[1.0]).unwrap();
        opt.step(&mut [&mut p], 0).unwrap();
        p.accumulate_grad(&[1.0]).unwrap();
        opt.step(&mut [&mut p], 1).unwrap();
        // v1 = 1, v2 = 1.5
        assert!((p.data()[0] + 2.5).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_endpoints_and_monotone() {
        let cfg = SgdConfig::cosine(0.01, 0.9, 100);
        assert_eq!(cfg.lr_at(0), 0.01);
        assert_eq!(cfg.lr_at(100), 0.0);
        assert_eq!(cfg.lr_at(250), 0.0);
        for s in 0..100 {
            assert!(cfg.lr_at(s + 1) <= cfg.lr_at(s));
        }
    }

    #[test]
    fn frozen_params_are_skipped_and_bad_momentum_rejected() {
        let mut frozen = Tensor::new([1], vec![2.0f64]).unwrap();
        let mut opt = Sgd::new(SgdConfig::fixed(0.5, 0.0)).unwrap();
        opt.step(&mut [&mut frozen], 0).unwrap();
        assert_eq!(frozen.data(), &[2.0]);
        assert!(Sgd::<f64>::new(SgdConfig::fixed(0.1, 1.0)).is_err());
    }
}
