use crate::error::{Error, Result};
use crate::numerics::ParamStore;

/// Adam with a global gradient-norm clip across several parameter stores.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub clip_norm: f32,
    t: i32,
    moments: Vec<Vec<(Vec<f32>, Vec<f32>)>>,
}

impl Adam {
    pub fn new(lr: f32, clip_norm: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Global L2 norm of the gradients held by `stores`.
    pub fn grad_norm(stores: &[&ParamStore]) -> f64 {
        stores
            .iter()
            .flat_map(|s| s.iter())
            .flat_map(|p| p.grad.data())
            .map(|&g| g as f64 * g as f64)
            .sum::<f64>()
            .sqrt()
    }

    /// Applies one update from the accumulated gradients and returns the
    /// pre-clip gradient norm.
    pub fn step(&mut self, stores: &mut [&mut ParamStore]) -> Result<f64> {
        let norm = Self::grad_norm(&stores.iter().map(|s| &**s).collect::<Vec<_>>());
        if !norm.is_finite() {
            return Err(Error::Numerical(format!("gradient norm is {norm}")));
        }
        if self.moments.is_empty() {
            self.moments = stores
                .iter()
                .map(|s| s.iter().map(|p| (vec![0.0; p.value.len()], vec![0.0; p.value.len()])).collect())
                .collect();
        }
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm as f64 {
            (self.clip_norm as f64 / norm) as f32
        } else {
            1.0
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let step = self.lr / bc1;
        for (store, moments) in stores.iter_mut().zip(&mut self.moments) {
            for (p, (m, v)) in store.iter_mut().zip(moments.iter_mut()) {
                let grad = p.grad.data().to_vec();
                for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                    let g = g * scale;
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    *w -= step * *m / ((*v / bc2).sqrt() + self.eps);
                }
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        let mut s = ParamStore::new(0);
        let id = s.add("w", Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        s.get_mut(id).grad = Tensor::new(vec![1, 2], vec![0.5, -2.0]).unwrap();
        let mut adam = Adam::new(0.1, 0.0);
        adam.step(&mut [&mut s]).unwrap();
        let w = s.get(id).value.data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = ParamStore::new(0);
        let id = s.add("w", Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        s.get_mut(id).grad.data_mut()[0] = f32::NAN;
        assert!(Adam::new(0.1, 1.0).step(&mut [&mut s]).is_err());
    }
}
