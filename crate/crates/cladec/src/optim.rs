//! Adam optimizer with bias correction.

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment arrays plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    pub hyper: AdamHyper,
    pub t: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(hyper: AdamHyper, param_sizes: &[usize]) -> Self {
        AdamState {
            hyper,
            t: 0,
            m: param_sizes.iter().map(|&n| vec![S::ZERO; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![S::ZERO; n]).collect(),
        }
    }

    pub fn for_params(hyper: AdamHyper, params: &[&Tensor<S>]) -> Self {
        let sizes: Vec<usize> = params.iter().map(|p| p.numel()).collect();
        Self::new(hyper, &sizes)
    }

    /// One bias-corrected update over all parameters. `grads[i]` may be
    /// `None` when a parameter received no gradient this step (it is left
    /// untouched, moments included).
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Option<&[S]>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam state tracks {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let b1 = S::from_f64(self.hyper.beta1);
        let b2 = S::from_f64(self.hyper.beta2);
        let eps = S::from_f64(self.hyper.eps);
        let one = S::ONE;
        let corr1 = S::from_f64(1.0 - self.hyper.beta1.powi(self.t as i32));
        let corr2 = S::from_f64(1.0 - self.hyper.beta2.powi(self.t as i32));
        let lr = S::from_f64(self.hyper.lr);
        for (i, param) in params.iter_mut().enumerate() {
            let Some(grad) = grads[i] else { continue };
            if grad.len() != param.numel() || grad.len() != self.m[i].len() {
                return Err(Error::Shape(format!(
                    "adam parameter {i}: size {} vs grad {} vs state {}",
                    param.numel(),
                    grad.len(),
                    self.m[i].len()
                )));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in param.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let mhat = m[j] / corr1;
                let vhat = v[j] / corr2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
