//! Finite-difference verification of analytic gradients.
//!
//! Runs in `f64`: central differences with the default step `1e-5` sit well
//! below double-precision roundoff for the scales used here, so any
//! disagreement beyond ~1e-6 points at a wrong backward rule, not noise.

use crate::autodiff::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compare `backward()` gradients of `f(inputs)` against central differences.
///
/// Returns the maximum over all input coordinates of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// `f` must be deterministic; it is re-evaluated twice per coordinate.
pub fn grad_check<FN>(mut f: FN, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    FN: FnMut(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    for t in inputs {
        t.zero_grad();
    }
    let loss = f(inputs)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut max_rel = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            t.nudge(j, step);
            let up = f(inputs)?.item()?;
            t.nudge(j, -2.0 * step);
            let down = f(inputs)?.item()?;
            t.nudge(j, step);
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[ti][j];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::parameter(shape, data).unwrap()
    }

    #[test]
    fn quadratic_form_is_exact_up_to_roundoff() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_param(&mut rng, &[4]);
        let err = grad_check(|ins| Ok(ins[0].mul(&ins[0])?.sum()), &[x], DEFAULT_STEP).unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn matmul_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_param(&mut rng, &[3, 4]);
        let b = rand_param(&mut rng, &[4, 2]);
        let err = grad_check(
            |ins| Ok(ins[0].matmul(&ins[1])?.sum()),
            &[a, b],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn softmax_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_param(&mut rng, &[3, 5]);
        let w = Tensor::from_vec(
            &[3, 5],
            (0..15).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let err = grad_check(
            |ins| Ok(ins[0].softmax_rows()?.mul(&w)?.sum()),
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn layer_norm_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_param(&mut rng, &[3, 6]);
        let g = rand_param(&mut rng, &[6]);
        let b = rand_param(&mut rng, &[6]);
        let w = Tensor::from_vec(
            &[3, 6],
            (0..18).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let err = grad_check(
            |ins| Ok(ins[0].layer_norm(&ins[1], &ins[2], 1e-5)?.mul(&w)?.sum()),
            &[x, g, b],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn gelu_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_param(&mut rng, &[7]);
        let err = grad_check(|ins| Ok(ins[0].gelu().sum()), &[x], DEFAULT_STEP).unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn cross_entropy_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = rand_param(&mut rng, &[4, 3]);
        let labels = [0usize, 2, 1, 1];
        let err = grad_check(
            |ins| Tensor::cross_entropy(&ins[0], &labels),
            &[z],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }
}
