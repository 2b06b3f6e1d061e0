//! Adaptive-moment optimiser with decoupled weight decay.

use crate::autodiff::Gradients;
use crate::error::{bail, Result};
use crate::model::ParamStore;
use crate::scalar::Scalar;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            bail!(Config, "learning rate must be positive, got {}", self.learning_rate);
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bail!(Config, "betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            bail!(Config, "eps must be positive and weight decay nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar = f64> {
    pub config: AdamWConfig,
    step: u64,
    moments: IndexMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, step: 0, moments: IndexMap::new() })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every block that has a gradient. Blocks without
    /// a gradient (frozen ones) are left untouched, including by decay.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::one() - T::of(c.beta1.powi(self.step as i32));
        let bc2 = T::one() - T::of(c.beta2.powi(self.step as i32));
        let (lr, eps, wd) = (T::of(c.learning_rate), T::of(c.eps), T::of(c.weight_decay));
        for (name, g) in grads.iter() {
            let Some(p) = params.get_mut(name) else {
                bail!(State, "gradient for unknown block `{name}`");
            };
            if p.len() != g.len() {
                bail!(State, "gradient length {} for block `{name}` of length {}", g.len(), p.len());
            }
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    fn store(w: f64) -> ParamStore<f64> {
        let blocks = IndexMap::from([("w".to_string(), Tensor::from_f64(&[1], &[w]).unwrap().with_grad())]);
        ParamStore::from_blocks(Default::default(), blocks)
    }

    fn grads(p: &ParamStore<f64>) -> Gradients<f64> {
        let mut tape = Tape::new();
        let v = p.register(&mut tape);
        let sq = tape.mul(v["w"], v["w"]).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap()
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // Bias-corrected first step is g / (|g| + eps), i.e. nearly the sign.
        let mut p = store(2.0);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }).unwrap();
        let g = grads(&p);
        opt.step(&mut p, &g).unwrap();
        let w = p.get("w").unwrap().data()[0];
        assert!((w - (2.0 - 1e-3 * 4.0 / (4.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = store(2.0);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.5, ..Default::default() }).unwrap();
        let g = grads(&p);
        opt.step(&mut p, &g).unwrap();
        let w = p.get("w").unwrap().data()[0];
        let expect = 2.0 - 1e-3 * (4.0 / (4.0 + 1e-8) + 0.5 * 2.0);
        assert!((w - expect).abs() < 1e-15);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = store(1.0);
        let mut opt = AdamW::new(AdamWConfig { learning_rate: 0.05, weight_decay: 0.0, ..Default::default() }).unwrap();
        for _ in 0..500 {
            let g = grads(&p);
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p.get("w").unwrap().data()[0].abs() < 1e-2);
        assert_eq!(opt.steps(), 500);
    }

    #[test]
    fn bad_config_rejected() {
        assert!(AdamW::<f64>::new(AdamWConfig { learning_rate: 0.0, ..Default::default() }).is_err());
        assert!(AdamW::<f64>::new(AdamWConfig { beta2: 1.0, ..Default::default() }).is_err());
    }
}
