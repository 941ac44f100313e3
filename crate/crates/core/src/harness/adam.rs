use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, ParameterRegistry};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Bias-corrected Adam with one pair of moment buffers per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<R> {
    pub config: AdamConfig,
    pub first: Vec<Vec<R>>,
    pub second: Vec<Vec<R>>,
    pub step: u64,
}

impl<R: Real> Adam<R> {
    pub fn new(registry: &ParameterRegistry<R>, config: AdamConfig) -> Self {
        let zeros = || registry.iter().map(|(_, _, t)| vec![R::zero(); t.numel()]).collect();
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    /// One update with learning rate `lr`; parameters the loss did not
    /// reach see a zero gradient.
    pub fn update(&mut self, registry: &mut ParameterRegistry<R>, grads: &Gradients<R>, lr: f64) -> Result<()> {
        if self.first.len() != registry.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, registry has {}",
                self.first.len(),
                registry.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (R::from_f64(c.beta1), R::from_f64(c.beta2));
        let (one_b1, one_b2) = (R::one() - b1, R::one() - b2);
        let t = self.step as i32;
        let corr1 = R::from_f64(1.0 - c.beta1.powi(t));
        let corr2 = R::from_f64(1.0 - c.beta2.powi(t));
        let (lr, eps) = (R::from_f64(lr), R::from_f64(c.eps));
        for id in registry.ids().collect::<Vec<_>>() {
            let i = id.index();
            let len = self.first[i].len();
            let g = grads.get_or_zero(id, len);
            if g.len() != self.first[i].len() {
                return Err(Error::Shape(format!("gradient for {} has the wrong length", registry.name(id))));
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((p, &g), m), v) in registry.get_mut(id).data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= lr * (*m / corr1) / ((*v / corr2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Session;
    use crate::tensor::Tensor;

    fn one_param(v: f64) -> ParameterRegistry<f64> {
        let mut r = ParameterRegistry::new();
        r.add("w", Tensor::from_f64(&[1], &[v]).unwrap()).unwrap();
        r
    }

    fn grads_of(reg: &ParameterRegistry<f64>, scale: f64) -> Gradients<f64> {
        let id = reg.id_of("w").unwrap();
        let mut s = Session::training(reg, 0.0, 0);
        let w = s.param(id);
        let l = s.tape.scale(w, scale).unwrap();
        let l = s.tape.sum(l).unwrap();
        s.backward(l).unwrap()
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut reg = one_param(0.7);
        let mut adam = Adam::new(&reg, AdamConfig::default());
        let g = grads_of(&reg, 0.0);
        adam.update(&mut reg, &g, 0.1).unwrap();
        assert_eq!(reg.get(reg.id_of("w").unwrap()).data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut reg = one_param(0.0);
        let mut adam = Adam::new(&reg, AdamConfig::default());
        let g = grads_of(&reg, 1.0);
        adam.update(&mut reg, &g, 0.01).unwrap();
        let w = reg.get(reg.id_of("w").unwrap()).data()[0];
        assert!((w + 0.01 / (1.0 + 1e-9)).abs() < 1e-15);
    }

    #[test]
    fn runs_are_bitwise_equal() {
        let run = || {
            let mut reg = one_param(0.3);
            let mut adam = Adam::new(&reg, AdamConfig::default());
            for k in 0..5 {
                let g = grads_of(&reg, 1.0 + k as f64);
                adam.update(&mut reg, &g, 0.01).unwrap();
            }
            reg.get(reg.id_of("w").unwrap()).data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
