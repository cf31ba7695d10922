//! Optimisers for the trainable tensors (adapters and predictors).

use crate::element::Element;
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Bytes held in first and second moments.
    pub fn state_bytes(&self) -> usize {
        self.m.iter().chain(&self.v).map(|s| T::bytes(s.len())).sum()
    }

    /// One update of `params[i]` by `grads[i]`; a `None` gradient counts as zero.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<&[T]>]) -> Result<()> {
        ensure!(params.len() == grads.len(), Dimension, "{} params but {} gradients", params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        }
        ensure!(self.m.len() == params.len(), Contract, "parameter list changed between steps");
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = T::of_f64(self.lr * c2.sqrt() / c1);
        let eps = T::of_f64(self.eps * c2.sqrt());
        let (tb1, tb2) = (T::of_f64(b1), T::of_f64(b2));
        let (ob1, ob2) = (T::of_f64(1.0 - b1), T::of_f64(1.0 - b2));
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            ensure!(g.len() == p.numel(), Dimension, "gradient of {} for parameter of {}", g.len(), p.numel());
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = tb1 * m[j] + ob1 * g[j];
                v[j] = tb2 * v[j] + ob2 * g[j] * g[j];
                *w -= step * m[j] / (v[j].sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Plain gradient descent.
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step<T: Element>(&self, params: &mut [&mut Tensor<T>], grads: &[Option<&[T]>]) -> Result<()> {
        ensure!(params.len() == grads.len(), Dimension, "{} params but {} gradients", params.len(), grads.len());
        let lr = T::of_f64(self.lr);
        for (p, g) in params.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            ensure!(g.len() == p.numel(), Dimension, "gradient of {} for parameter of {}", g.len(), p.numel());
            for (w, d) in p.data_mut().iter_mut().zip(g.iter()) {
                *w -= lr * *d;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = Tensor::<f64>::from_vec(&[2], vec![1.0, -1.0]).unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(&mut [&mut p], &[Some(&[2.0, -3.0][..])]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
        assert_eq!(opt.state_bytes(), 32);
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let mut p = Tensor::<f32>::from_vec(&[2], vec![0.0, 3.0]).unwrap();
        let mut opt = Adam::new(0.1);
        for _ in 0..3 {
            opt.step(&mut [&mut p], &[Some(&[0.0, 0.0][..])]).unwrap();
        }
        assert_eq!(p.data(), &[0.0, 3.0]);
    }

    #[test]
    fn sgd_descends() {
        let mut p = Tensor::<f64>::from_vec(&[1], vec![1.0]).unwrap();
        Sgd { lr: 0.5 }.step(&mut [&mut p], &[Some(&[2.0][..])]).unwrap();
        assert_eq!(p.data(), &[0.0]);
    }
}
