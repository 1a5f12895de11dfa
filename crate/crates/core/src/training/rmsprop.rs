use crate::autodiff::Tensor;
use crate::{Error, Real, Result};

/// RMSprop with one running mean of squared gradients per tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub learning_rate: Real,
    pub decay: Real,
    pub eps: Real,
    pub mean_square: Vec<Tensor>,
}

impl RmsProp {
    pub fn new(shapes: &[Tensor], learning_rate: Real, decay: Real, eps: Real) -> Self {
        Self {
            learning_rate,
            decay,
            eps,
            mean_square: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// `v ← ρ v + (1-ρ) g²; w ← w - lr g / (√v + ε)`. Tensors whose gradient
    /// has a non-finite entry are left untouched; their count is returned.
    pub fn step(&mut self, weights: &mut [Tensor], grads: &[Tensor]) -> Result<usize> {
        if weights.len() != grads.len() || weights.len() != self.mean_square.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} tensors, got {} weights and {} gradients",
                self.mean_square.len(),
                weights.len(),
                grads.len()
            )));
        }
        let mut skipped = 0;
        for ((w, g), v) in weights.iter_mut().zip(grads).zip(&mut self.mean_square) {
            if w.shape() != g.shape() || w.shape() != v.shape() {
                return Err(Error::Shape(format!("weight {:?} vs gradient {:?}", w.shape(), g.shape())));
            }
            if !g.all_finite() {
                skipped += 1;
                continue;
            }
            for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.decay * *vi + (1.0 - self.decay) * gi * gi;
                *wi -= self.learning_rate * gi / (vi.sqrt() + self.eps);
            }
        }
        Ok(skipped)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_only_decays_state() {
        let mut w = vec![Tensor::from_vec(vec![1.0, -2.0])];
        let mut opt = RmsProp::new(&w, 0.1, 0.9, 1e-8);
        opt.mean_square[0] = Tensor::from_vec(vec![1.0, 4.0]);
        opt.step(&mut w, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(w[0].data(), &[1.0, -2.0]);
        assert!((opt.mean_square[0].data()[0] - 0.9).abs() < 1e-15);
        assert!((opt.mean_square[0].data()[1] - 3.6).abs() < 1e-15);
    }

    #[test]
    fn first_step_closed_form() {
        let (lr, rho, eps) = (1e-3, 0.99, 1e-8);
        let mut w = vec![Tensor::from_vec(vec![0.0, 0.0])];
        let mut opt = RmsProp::new(&w, lr, rho, eps);
        let g = [3.0, -0.5];
        opt.step(&mut w, &[Tensor::from_vec(g.to_vec())]).unwrap();
        for (wi, gi) in w[0].data().iter().zip(g) {
            let exact = -lr * gi / (((1.0 - rho) * gi * gi).sqrt() + eps);
            assert!((wi - exact).abs() < 1e-15);
            assert!((wi + lr * gi.signum() / (1.0 - rho).sqrt()).abs() < 1e-8);
        }
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut w = vec![Tensor::from_vec(vec![1.0])];
        let mut opt = RmsProp::new(&w, 1e-2, 0.99, 1e-8);
        for _ in 0..500 {
            let g = Tensor::from_vec(vec![2.0 * w[0].data()[0]]);
            opt.step(&mut w, &[g]).unwrap();
        }
        assert!(w[0].data()[0].abs() < 1e-2, "{}", w[0].data()[0]);
    }

    #[test]
    fn non_finite_gradient_skips_tensor() {
        let mut w = vec![Tensor::from_vec(vec![1.0]), Tensor::from_vec(vec![1.0])];
        let mut opt = RmsProp::new(&w, 0.1, 0.9, 1e-8);
        let skipped = opt
            .step(&mut w, &[Tensor::from_vec(vec![Real::NAN]), Tensor::from_vec(vec![1.0])])
            .unwrap();
        assert_eq!(skipped, 1);
        assert_eq!(w[0].data(), &[1.0]);
        assert!(w[1].data()[0] < 1.0);
        assert_eq!(opt.mean_square[0].data(), &[0.0]);
    }
}
