use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    steps: i32,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        Adam {
            config,
            steps: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "adam state tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        self.steps += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let one = T::one();
        let correct1 = one - T::of(c.beta1.powi(self.steps));
        let correct2 = one - T::of(c.beta2.powi(self.steps));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!(
                    "adam: parameter {:?} with gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / correct1;
                let v_hat = *vi / correct2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = vec![Tensor::<f64>::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap()];
        let g = vec![Tensor::<f64>::from_f64(vec![3], &[0.3, -4.0, 1e-3]).unwrap()];
        let mut adam = Adam::new(AdamConfig::with_lr(0.01), &p);
        adam.step(&mut p, &g).unwrap();
        let expected = [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01];
        for (a, b) in p[0].data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let init = Tensor::<f32>::from_f64(vec![2], &[0.25, -1.5]).unwrap();
        let mut p = vec![init.clone()];
        let g = vec![Tensor::zeros(vec![2])];
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &p);
        adam.step(&mut p, &g).unwrap();
        assert_eq!(p[0], init);
    }

    #[test]
    fn matches_scalar_reference_trace() {
        // independent scalar implementation of the update rule
        let (lr, b1, b2, eps) = (0.05f64, 0.9f64, 0.999f64, 1e-8f64);
        let grads = [0.5, -1.2, 0.3, 0.0, 2.5, -0.7, 0.1, 0.9, -3.0, 0.05];
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut reference = Vec::new();
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
            reference.push(w);
        }

        let mut p = vec![Tensor::<f64>::scalar(1.0)];
        let mut adam = Adam::new(AdamConfig::with_lr(lr), &p);
        for (&g, &r) in grads.iter().zip(&reference) {
            adam.step(&mut p, &[Tensor::scalar(g)]).unwrap();
            assert!((p[0].item() - r).abs() < 1e-10);
        }
    }
}
