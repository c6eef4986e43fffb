//! Bias-corrected Adam over a fixed, ordered parameter list.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

pub struct AdamState<F: Real> {
    step_count: u64,
    learning_rate: F,
    beta1: F,
    beta2: F,
    epsilon: F,
    first_moment: Vec<Vec<F>>,
    second_moment: Vec<Vec<F>>,
}

impl<F: Real> AdamState<F> {
    /// Moment buffers are allocated to match `params` exactly; every later
    /// [`step`](Self::step) must pass the same list in the same order.
    pub fn new(
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        params: &[Tensor<F>],
    ) -> Self {
        AdamState {
            step_count: 0,
            learning_rate: F::from_f64(learning_rate),
            beta1: F::from_f64(beta1),
            beta2: F::from_f64(beta2),
            epsilon: F::from_f64(epsilon),
            first_moment: params.iter().map(|p| vec![F::zero(); p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![F::zero(); p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one in-place update. Every parameter must have a populated
    /// gradient (call `zero_grads` + `backward` first).
    pub fn step(&mut self, params: &[Tensor<F>]) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(Error::Usage(format!(
                "adam_step: {} params but state was built for {}",
                params.len(),
                self.first_moment.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        let one = F::one();
        for (i, param) in params.iter().enumerate() {
            let grad = param.grad().ok_or_else(|| {
                Error::Usage(format!("adam_step: parameter {i} has no gradient"))
            })?;
            if grad.len() != self.first_moment[i].len() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: param.shape().to_vec(),
                    right: vec![self.first_moment[i].len()],
                });
            }
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            let mut data = param.data_mut();
            for j in 0..grad.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (one - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (one - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] = data[j] - self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Reset every parameter's gradient buffer to zeros.
pub fn zero_grads<F: Real>(params: &[Tensor<F>]) {
    for p in params {
        p.zero_grad();
    }
}
