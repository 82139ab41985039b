use ndarray::Array2;

use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .ids()
            .map(|id| Array2::zeros(store.value(id).dim()))
            .collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &Tensor {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &Tensor {
        &self.second[index]
    }

    /// Apply one update from the store's gradient slots.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} moments for {} parameters", self.first.len(), store.len()),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let grad = store.grad(id).clone();
            if grad.dim() != self.first[i].dim() {
                return Err(Error::shape(
                    "adam_step",
                    format!("parameter `{}` changed shape", store.name(id)),
                ));
            }
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            m.zip_mut_with(&grad, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(&grad, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let value = store.value_mut(id);
            ndarray::Zip::from(value).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let m_hat = m / c1;
                let v_hat = v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
        Ok(())
    }
}
