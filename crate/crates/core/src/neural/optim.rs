use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamId, ParameterSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    /// Multiplicative decay applied per `decay_every` updates, continuously.
    pub decay: f64,
    pub decay_every: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.001, decay: 0.7, decay_every: 1000.0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    /// `lr * decay^(step / decay_every)`
    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr * self.decay.powf(step as f64 / self.decay_every)
    }
}

#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

/// Adam moments per parameter plus the global update counter that drives the
/// learning-rate schedule.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    moments: Vec<Option<Moments>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &ParameterSet) -> Self {
        OptimizerState { config, step: 0, moments: vec![None; params.len()] }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr_at(self.step)
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments> {
        self.moments.get(id.0).and_then(Option::as_ref)
    }

    pub(crate) fn set_moments(&mut self, id: ParamId, m: Moments) {
        if self.moments.len() <= id.0 {
            self.moments.resize(id.0 + 1, None);
        }
        self.moments[id.0] = Some(m);
    }

    /// One Adam step at `lr(step)`; only parameters present in `grads` move.
    pub fn update(&mut self, params: &mut ParameterSet, grads: &Gradients) -> Result<()> {
        let lr = self.lr();
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        for (id, g) in grads.iter() {
            let p = params.get_mut(id);
            if !p.same_shape(g) {
                return Err(Error::shape(format!(
                    "gradient for parameter {} has shape {:?}, expected {:?}",
                    id.0,
                    g.shape(),
                    p.shape()
                )));
            }
            let mom = self.moments[id.0].get_or_insert_with(|| Moments {
                m: Tensor::zeros(g.rows(), g.cols()),
                v: Tensor::zeros(g.rows(), g.cols()),
                t: 0,
            });
            mom.t += 1;
            let bc1 = 1.0 - beta1.powi(mom.t as i32);
            let bc2 = 1.0 - beta2.powi(mom.t as i32);
            let (pm, pv) = (mom.m.data_mut(), mom.v.data_mut());
            for (((w, &gr), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(pm.iter_mut()).zip(pv.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * gr;
                *v = beta2 * *v + (1.0 - beta2) * gr * gr;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Free-function form of [`OptimizerState::update`].
pub fn adam_update(params: &mut ParameterSet, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    state.update(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::graph::Graph;
    use crate::neural::params::Partition;

    #[test]
    fn lr_schedule_closed_form() {
        let c = AdamConfig::default();
        assert_eq!(c.lr_at(0), 0.001);
        assert_eq!(c.lr_at(1000), 0.001 * 0.7f64.powf(1.0));
        assert!((c.lr_at(1000) - 0.0007).abs() < 1e-18);
        assert_eq!(c.lr_at(2500), 0.001 * 0.7f64.powf(2.5));
    }

    #[test]
    fn zero_gradients_leave_params() {
        let mut params = ParameterSet::new();
        let id = params.add("x", Tensor::row_vector(vec![1.0, -2.0]), Partition::Theta);
        let mut opt = OptimizerState::new(AdamConfig::default(), &params);
        let grads = Gradients::new(vec![Some(Tensor::zeros(1, 2))]);
        for _ in 0..5 {
            opt.update(&mut params, &grads).unwrap();
        }
        assert_eq!(params.get(id).data(), &[1.0, -2.0]);
        assert_eq!(opt.step, 5);
    }

    #[test]
    fn missing_gradients_are_not_updated() {
        let mut params = ParameterSet::new();
        let a = params.add("a", Tensor::scalar(1.0), Partition::Theta);
        let b = params.add("b", Tensor::scalar(1.0), Partition::Zeta);
        let mut opt = OptimizerState::new(AdamConfig::default(), &params);
        let grads = Gradients::new(vec![Some(Tensor::scalar(1.0)), None]);
        opt.update(&mut params, &grads).unwrap();
        assert!(params.get(a).item() < 1.0);
        assert_eq!(params.get(b).item(), 1.0);
        assert!(opt.moments(b).is_none());
    }

    #[test]
    fn quadratic_converges() {
        // minimize (x - 3)^2 from x = 0; closed-form minimum at 3
        let mut params = ParameterSet::new();
        let id = params.add("x", Tensor::scalar(0.0), Partition::Theta);
        let cfg = AdamConfig { decay: 1.0, lr: 0.01, ..AdamConfig::default() };
        let mut opt = OptimizerState::new(cfg, &params);
        for _ in 0..5000 {
            let mut g = Graph::with_trainable(&params, |_| true);
            let x = g.param(&params, id);
            let d = g.add_scalar(x, -3.0);
            let sq = g.mul(d, d).unwrap();
            let loss = g.sum(sq);
            let grads = g.backward(loss, &params).unwrap();
            opt.update(&mut params, &grads).unwrap();
        }
        assert!((params.get(id).item() - 3.0).abs() < 1e-3);
    }
}
