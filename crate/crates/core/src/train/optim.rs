//! Momentum SGD with decoupled weight decay and polynomial learning-rate decay.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolySchedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub power: f64,
}

impl PolySchedule {
    /// `base * (1 - step/total)^power`, zero from `total` on.
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 || step >= self.total_steps {
            return 0.0;
        }
        self.base_lr * (1.0 - step as f64 / self.total_steps as f64).powf(self.power)
    }
}

#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    /// One buffer per parameter, in store order.
    pub velocity: Vec<Tensor<T>>,
    pub steps_taken: usize,
}

impl<T: Element> Sgd<T> {
    pub fn new(params: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params
                .iter()
                .map(|p| Tensor::zeros(p.tensor.shape().to_vec()))
                .collect(),
            steps_taken: 0,
        }
    }

    /// `v = μv + g; p -= lr·v + lr·wd·p` (decay only on parameters marked for it).
    /// A missing gradient counts as zero.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != self.velocity.len() || params.len() != self.velocity.len() {
            return Err(Error::invalid(
                "sgd",
                format!(
                    "{} parameters, {} gradients, {} momentum buffers",
                    params.len(),
                    grads.len(),
                    self.velocity.len()
                ),
            ));
        }
        let mu = T::from_f64_lossy(self.momentum);
        let lr_t = T::from_f64_lossy(lr);
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.tensor.shape() {
                    return Err(Error::ParamShape {
                        name: p.name.clone(),
                        stored: g.shape().to_vec(),
                        expected: p.tensor.shape().to_vec(),
                    });
                }
            }
            let decay = T::from_f64_lossy(if p.decay { lr * self.weight_decay } else { 0.0 });
            let pd = p.tensor.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.as_ref().map_or(T::zero(), |g| g.data()[i]);
                vd[i] = mu * vd[i] + gi;
                pd[i] = pd[i] - lr_t * vd[i] - decay * pd[i];
            }
        }
        self.steps_taken += 1;
        Ok(())
    }
}
