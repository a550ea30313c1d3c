//! Adam optimizer.

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// First and second moments, indexed like the parameter store.
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, lr: f64) -> Self {
        Self::with_betas(params, lr, 0.9, 0.999)
    }

    pub fn with_betas(params: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let m: Vec<_> = params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        AdamState { step: 0, lr, beta1, beta2, eps: ADAM_EPS, v: m.clone(), m }
    }

    /// One bias-corrected Adam update of every trainable parameter, then
    /// clears all gradients. Frozen parameters are skipped even if a gradient
    /// buffer was set on them.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        for (p, m) in params.iter().zip(&self.m) {
            if m.shape() != p.tensor.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam moments",
                    lhs: m.shape().to_vec(),
                    rhs: p.tensor.shape().to_vec(),
                });
            }
            if !p.frozen && p.grad.is_none() {
                return Err(Error::MissingGrad(p.name.clone()));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = T::of(self.lr / bc1);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
        let eps = T::of(self.eps);
        for ((p, m), v) in params.iter_mut().zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            if p.frozen {
                continue;
            }
            let g = p.grad.take().expect("checked above");
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.tensor.data_mut());
            for (((w, mi), vi), &gi) in pd.iter_mut().zip(md.iter_mut()).zip(vd.iter_mut()).zip(g.data()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *w = *w - step_size * *mi / ((*vi).sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        params.zero_grad();
        Ok(())
    }
}
