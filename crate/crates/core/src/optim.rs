//! Adam and reduce-on-plateau learning-rate scheduling.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// One bias-corrected Adam update of every parameter in place.
    pub fn step(&mut self, params: &mut [(String, Tensor<S>)], grads: &[Option<Tensor<S>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Usage(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|(_, p)| vec![S::zero(); p.numel()]).collect();
            self.second = self.first.clone();
        }
        for ((name, p), g) in params.iter().zip(grads) {
            let g = g
                .as_ref()
                .ok_or_else(|| Error::Usage(format!("parameter `{name}` has no gradient")))?;
            if g.shape() != p.shape() {
                return Err(shape_err!("gradient of `{name}` has shape {:?}", g.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let c1 = S::lit(1.0 - self.beta1.powi(t));
        let c2 = S::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (S::lit(self.lr), S::lit(self.eps));
        for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let g = g.as_ref().expect("checked above");
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (S::one() - b1) * gi;
                *vi = b2 * *vi + (S::one() - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn moments_finite(&self) -> bool {
        self.first.iter().chain(&self.second).flatten().all(|x| x.is_finite())
    }
}

/// Halves (by `factor`) the learning rate after `patience` epochs without
/// relative improvement of at least `threshold`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    pub threshold: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f64, min_lr: f64) -> Self {
        PlateauScheduler {
            patience,
            factor,
            min_lr,
            threshold: 1e-4,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Feeds one epoch loss; returns the learning rate to use next.
    pub fn step(&mut self, loss: f64, lr: f64) -> Result<f64> {
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("epoch loss {loss}; aborting training")));
        }
        if loss < self.best * (1.0 - self.threshold) {
            self.best = loss;
            self.bad_epochs = 0;
            return Ok(lr);
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            return Ok((lr * self.factor).max(self.min_lr));
        }
        Ok(lr)
    }
}

impl Default for PlateauScheduler {
    fn default() -> Self {
        Self::new(5, 0.5, 1e-6)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Vec<(String, Tensor<f64>)> {
        vec![("w".into(), Tensor::scalar(v))]
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let mut p = one(1.5);
        let mut adam = AdamState::new(1e-3);
        for _ in 0..3 {
            adam.step(&mut p, &[Some(Tensor::scalar(0.0))]).unwrap();
        }
        assert_eq!(p[0].1.item().unwrap(), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = one(0.0);
        let mut adam = AdamState::new(1e-3);
        adam.step(&mut p, &[Some(Tensor::scalar(1.0))]).unwrap();
        let moved = -p[0].1.item().unwrap();
        // m_hat / (sqrt(v_hat) + eps) = 1 / (1 + 1e-8)
        assert!((moved - 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_usage_error() {
        let mut p = one(0.0);
        let mut adam = AdamState::<f64>::new(1e-3);
        assert!(matches!(adam.step(&mut p, &[None]), Err(Error::Usage(_))));
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = vec![("w".to_string(), Tensor::from_fn(&[4], |i| i as f32))];
            let mut adam = AdamState::new(1e-2);
            for k in 0..10 {
                let g = Tensor::from_fn(&[4], |i| ((i + k) as f32).sin());
                adam.step(&mut p, &[Some(g)]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn plateau_cases() {
        let mut s = PlateauScheduler::new(3, 0.5, 1e-6);
        let mut lr = 1e-3;
        for i in 0..10 {
            lr = s.step(1.0 - i as f64 * 0.1, lr).unwrap();
        }
        assert_eq!(lr, 1e-3);

        let mut s = PlateauScheduler::new(3, 0.5, 1e-6);
        let mut lr = 1e-3;
        let mut lrs = Vec::new();
        for _ in 0..(1 + 3 + 1) {
            lr = s.step(1.0, lr).unwrap();
            lrs.push(lr);
        }
        assert_eq!(lrs, vec![1e-3, 1e-3, 1e-3, 1e-3, 5e-4]);

        let mut s = PlateauScheduler::new(0, 0.5, 1e-6);
        let mut lr = 1e-6;
        for _ in 0..5 {
            lr = s.step(1.0, lr).unwrap();
        }
        assert_eq!(lr, 1e-6);

        assert!(matches!(s.step(f64::NAN, lr), Err(Error::NonFinite(_))));
    }
}
