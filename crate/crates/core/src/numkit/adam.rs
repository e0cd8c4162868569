use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// `base · 0.5 · (1 + cos(π · step / total_steps))`, clamped at zero past the horizon.
    Cosine { total_steps: u64 },
}

impl LrSchedule {
    pub fn lr(&self, base: f64, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { total_steps } => {
                if total_steps == 0 || step >= total_steps {
                    return 0.0;
                }
                base * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
}

impl AdamConfig {
    pub fn new(lr: f64, schedule: LrSchedule) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule,
        }
    }
}

/// Adam moments plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor<S>>,
    pub second: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Learning rate the next call to [`AdamState::step`] will use.
    pub fn next_lr(&self) -> f64 {
        self.config.schedule.lr(self.config.lr, self.step + 1)
    }

    /// Applies one update to every non-frozen parameter and returns the
    /// learning rate used.
    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &ParamSet<S>) -> Result<f64> {
        self.step += 1;
        let t = self.step;
        let cfg = self.config;
        let lr = cfg.schedule.lr(cfg.lr, t);
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        let (b1, b2, eps) = (S::lit(cfg.beta1), S::lit(cfg.beta2), S::lit(cfg.eps));
        let (bc1, bc2, lr_s) = (S::lit(bc1), S::lit(bc2), S::lit(lr));

        let names: Vec<String> = params
            .iter()
            .filter(|(n, _)| !params.is_frozen(n))
            .map(|(n, _)| n.to_string())
            .collect();
        for name in names {
            let g = grads.get(&name)?;
            let p = params.get_mut(&name)?;
            if g.dims() != p.dims() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.dims().to_vec(),
                    rhs: g.dims().to_vec(),
                });
            }
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.dims()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.dims()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (S::one() - b1) * gv;
                *vv = b2 * *vv + (S::one() - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr_s * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![v]));
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(1.5);
        let g = single(0.0);
        let mut adam = AdamState::new(AdamConfig::new(0.1, LrSchedule::Constant));
        for _ in 0..5 {
            adam.step(&mut p, &g).unwrap();
        }
        assert_eq!(p.get("w").unwrap().item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 after one step: displacement = -lr·1/(1+1e-8)
        let mut p = single(0.0);
        let g = single(1.0);
        let mut adam = AdamState::new(AdamConfig::new(0.1, LrSchedule::Constant));
        adam.step(&mut p, &g).unwrap();
        let d = p.get("w").unwrap().item();
        assert!((d - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15, "{d}");
    }

    #[test]
    fn cosine_endpoint_is_zero() {
        let sched = LrSchedule::Cosine { total_steps: 4 };
        assert_eq!(sched.lr(0.1, 4), 0.0);
        let mut p = single(2.0);
        let g = single(1.0);
        let mut adam = AdamState::new(AdamConfig::new(0.1, sched));
        adam.step = 3;
        adam.step(&mut p, &g).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 2.0);
    }

    #[test]
    fn cosine_is_monotone() {
        let sched = LrSchedule::Cosine { total_steps: 97 };
        let lrs: Vec<f64> = (0..=97).map(|s| sched.lr(5e-4, s)).collect();
        assert_eq!(lrs[0], 5e-4);
        assert_eq!(*lrs.last().unwrap(), 0.0);
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut p = single(0.0);
        let mut g = ParamSet::new();
        g.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let mut adam = AdamState::new(AdamConfig::new(0.1, LrSchedule::Constant));
        assert!(adam.step(&mut p, &g).is_err());
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut p = single(1.0);
        p.freeze("w");
        let g = single(1.0);
        let mut adam = AdamState::new(AdamConfig::new(0.1, LrSchedule::Constant));
        adam.step(&mut p, &g).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 1.0);
    }
}
