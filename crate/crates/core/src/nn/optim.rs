use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Momentum SGD with L2 weight decay:
/// `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<S: Scalar = f32> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Vec<S>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Vec<S>>) {
        self.velocity = velocity;
    }

    /// Zeroes the momentum buffer of parameter `index`, if allocated.
    pub fn reset_velocity(&mut self, index: usize) {
        if let Some(v) = self.velocity.get_mut(index) {
            v.iter_mut().for_each(|x| *x = S::zero());
        }
    }

    /// Applies one update in place from each parameter's gradient buffer.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], lr: f64) -> Result<()> {
        if lr.is_nan() || lr < 0.0 {
            return Err(Error::Config(format!("learning rate {lr} must be non-negative")));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![S::zero(); p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        let (mu, wd, lr) = (S::lit(self.momentum), S::lit(self.weight_decay), S::lit(lr));
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let Some(grad) = p.grad().map(<[S]>::to_vec) else { continue };
            for ((w, vel), g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                *vel = mu * *vel + (g + wd * *w);
                *w = *w - lr * *vel;
            }
        }
        Ok(())
    }
}

/// Single plain-SGD step on raw buffers (no momentum, no decay).
pub fn sgd_step<S: Scalar>(params: &mut [S], grads: &[S], lr: S) {
    for (w, &g) in params.iter_mut().zip(grads) {
        *w = *w - lr * g;
    }
}
