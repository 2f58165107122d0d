//! Adam with bias correction.

use fxmm_tensor::Scalar;

use crate::params::Params;
use crate::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Scalar> {
    pub lr: f64,
    /// Completed steps.
    pub steps: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &Params<T>, lr: f64) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
        Self {
            lr,
            steps: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Updates every parameter from its accumulated gradient. Parameters
    /// without a gradient are treated as having a zero one.
    pub fn step(&mut self, params: &mut Params<T>) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
        let (one, eps) = (T::one(), T::lit(EPS));
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        let lr = T::lit(self.lr);
        for ((p, m), v) in params.tensors_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad().map(<[T]>::to_vec);
            let data = p.data_mut();
            for i in 0..data.len() {
                let gi = g.as_ref().map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fxmm_tensor::Tensor;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut params = Params::<f64>::new();
        let id = params.add("w", Tensor::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap());
        params.get_mut(id).accumulate_grad(&[0.0; 3]).unwrap();
        let mut adam = Adam::new(&params, 1e-3);
        adam.step(&mut params).unwrap();
        assert_eq!(params.get(id).data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let mut params = Params::<f64>::new();
        let id = params.add("w", Tensor::zeros(vec![3]));
        params.get_mut(id).accumulate_grad(&[0.3, -5.0, 1e-3]).unwrap();
        let mut adam = Adam::new(&params, 1e-3);
        adam.step(&mut params).unwrap();
        // m̂ = g and v̂ = g², so the step is lr·g/(|g|+ε)
        for (&p, g) in params.get(id).data().iter().zip([0.3f64, -5.0, 1e-3]) {
            let want = -1e-3 * g / (g.abs() + 1e-8);
            assert!((p - want).abs() < 1e-15);
            assert!((p.abs() - 1e-3).abs() < 1e-7);
        }
    }
}
