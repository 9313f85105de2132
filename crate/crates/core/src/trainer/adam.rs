//! Adam with bias correction, matching the common deep-learning formulation.
//! The moment buffers are exposed so they can be checkpointed.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: ADAM_EPS,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update to every parameter of `params` that received a gradient.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // gradients keep the backward graph alive; the moments must not
            let g = g.detach();
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let g2 = g.sqr()?;
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g2 * (1.0 - self.beta2))?)?,
                None => (g2 * (1.0 - self.beta2))?,
            };
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)? / denom)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.m.insert(name.to_string(), m);
            self.v.insert(name.to_string(), v);
        }
        Ok(())
    }

    /// Moment buffers as `m/<name>` and `v/<name>` entries.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let m = self.m.iter().map(|(k, t)| (format!("m/{k}"), t.clone()));
        let v = self.v.iter().map(|(k, t)| (format!("v/{k}"), t.clone()));
        m.chain(v).collect()
    }

    /// Restore from [`Adam::state`] output and a step counter.
    pub fn load_state(&mut self, step: u64, entries: impl IntoIterator<Item = (String, Tensor)>) -> Result<()> {
        self.m.clear();
        self.v.clear();
        for (key, t) in entries {
            match key.split_once('/') {
                Some(("m", name)) => self.m.insert(name.to_string(), t),
                Some(("v", name)) => self.v.insert(name.to_string(), t),
                _ => return Err(Error::Integrity(format!("unexpected optimizer entry `{key}`"))),
            };
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamBuilder;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut pb = ParamBuilder::new(0, DType::F64, &Device::Cpu);
        let w = pb.zeros("w", &[3]).unwrap();
        let store = pb.finish();
        let target = Tensor::new(&[1.0f64, -2.0, 0.5], &Device::Cpu).unwrap();
        let loss = (w.as_tensor() - &target).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = Adam::new(0.5, 0.999);
        opt.step(&store, &grads, 0.1).unwrap();
        let got = w.as_tensor().to_vec1::<f64>().unwrap();
        for (g, want) in got.iter().zip([0.1, -0.1, 0.1]) {
            assert!((g - want).abs() < 1e-6, "{got:?}");
        }
        assert_eq!(opt.step_count(), 1);
        assert_eq!(opt.state().len(), 2);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut pb = ParamBuilder::new(1, DType::F32, &Device::Cpu);
        let w = pb.normal("w", &[4], 1.0).unwrap();
        let store = pb.finish();
        let before = store.digest().unwrap();
        let grads = w.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        Adam::new(0.5, 0.999).step(&store, &grads, 0.0).unwrap();
        assert_eq!(store.digest().unwrap(), before);
    }
}
