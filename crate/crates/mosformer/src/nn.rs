//! Neural building blocks: parameter initialization, sinusoidal position
//! encoding, and the pre-norm multi-head self-attention block used by every
//! encoder in the model.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;

/// Standard deviation for truncated-normal weight initialization.
pub const INIT_SIGMA: f64 = 0.02;

/// Truncated-normal parameter: N(0, sigma) resampled until |x| <= 2 sigma.
pub fn trunc_normal<F: Real>(shape: &[usize], sigma: f64, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let normal = Normal::new(0.0f64, sigma).expect("sigma must be positive");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            loop {
                let v = normal.sample(rng);
                if v.abs() <= 2.0 * sigma {
                    return F::from_f64(v);
                }
            }
        })
        .collect();
    Tensor::parameter(shape, data).expect("shape/data agree by construction")
}

pub fn zeros_param<F: Real>(shape: &[usize]) -> Tensor<F> {
    let n: usize = shape.iter().product();
    Tensor::parameter(shape, vec![F::zero(); n]).expect("shape/data agree by construction")
}

pub fn ones_param<F: Real>(shape: &[usize]) -> Tensor<F> {
    let n: usize = shape.iter().product();
    Tensor::parameter(shape, vec![F::one(); n]).expect("shape/data agree by construction")
}

pub(crate) fn sinusoid_row<F: Real>(position: f64, dim: usize) -> Vec<F> {
    let mut row = vec![F::zero(); dim];
    for i in 0..dim / 2 {
        let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
        row[2 * i] = F::from_f64((position * freq).sin());
        row[2 * i + 1] = F::from_f64((position * freq).cos());
    }
    row
}

/// Interleaved sin/cos positional encoding with frequency base 10000.
///
/// `dim` must be even. Deterministic, not trainable.
pub fn sinusoidal_encoding<F: Real>(position: usize, dim: usize) -> Result<Tensor<F>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!(
            "sinusoidal_encoding: dimension must be a positive even number, got {dim}"
        )));
    }
    Tensor::from_vec(&[dim], sinusoid_row(position as f64, dim))
}

/// One attention head's projections.
pub struct AttentionHead<F: Real> {
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub bq: Tensor<F>,
    pub bk: Tensor<F>,
    pub bv: Tensor<F>,
}

/// Pre-norm residual transformer block:
/// `x + Attn(LN(x))` followed by `x + MLP(LN(x))`, GELU MLP with expansion 4.
pub struct MhsaBlock<F: Real> {
    pub ln1_gain: Tensor<F>,
    pub ln1_bias: Tensor<F>,
    pub heads: Vec<AttentionHead<F>>,
    /// Per-head output projections `[head_dim, d]`; their sum replaces the
    /// usual concat-then-project.
    pub wo: Vec<Tensor<F>>,
    pub bo: Tensor<F>,
    pub ln2_gain: Tensor<F>,
    pub ln2_bias: Tensor<F>,
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
}

impl<F: Real> MhsaBlock<F> {
    pub fn init(dim: usize, num_heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if num_heads == 0 || dim % num_heads != 0 {
            return Err(Error::Config(format!(
                "embedding dim {dim} is not divisible by {num_heads} heads"
            )));
        }
        let head_dim = dim / num_heads;
        let hidden = 4 * dim;
        let heads = (0..num_heads)
            .map(|_| AttentionHead {
                wq: trunc_normal(&[dim, head_dim], INIT_SIGMA, rng),
                wk: trunc_normal(&[dim, head_dim], INIT_SIGMA, rng),
                wv: trunc_normal(&[dim, head_dim], INIT_SIGMA, rng),
                bq: zeros_param(&[head_dim]),
                bk: zeros_param(&[head_dim]),
                bv: zeros_param(&[head_dim]),
            })
            .collect();
        let wo = (0..num_heads)
            .map(|_| trunc_normal(&[head_dim, dim], INIT_SIGMA, rng))
            .collect();
        Ok(MhsaBlock {
            ln1_gain: ones_param(&[dim]),
            ln1_bias: zeros_param(&[dim]),
            heads,
            wo,
            bo: zeros_param(&[dim]),
            ln2_gain: ones_param(&[dim]),
            ln2_bias: zeros_param(&[dim]),
            w1: trunc_normal(&[dim, hidden], INIT_SIGMA, rng),
            b1: zeros_param(&[hidden]),
            w2: trunc_normal(&[hidden, dim], INIT_SIGMA, rng),
            b2: zeros_param(&[dim]),
        })
    }

    pub fn forward(&self, tokens: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.forward_with_attn(tokens)?.0)
    }

    /// Forward pass that also returns each head's attention matrix
    /// (row-stochastic `[n, n]`).
    pub fn forward_with_attn(&self, tokens: &Tensor<F>) -> Result<(Tensor<F>, Vec<Tensor<F>>)> {
        let eps = F::from_f64(LN_EPS);
        let normed = tokens.layer_norm(&self.ln1_gain, &self.ln1_bias, eps)?;
        let head_dim = self.heads[0].wq.shape()[1];
        let scale = F::from_f64(1.0 / (head_dim as f64).sqrt());
        let mut attn_out: Option<Tensor<F>> = None;
        let mut attns = Vec::with_capacity(self.heads.len());
        for (head, wo) in self.heads.iter().zip(&self.wo) {
            let q = normed.matmul(&head.wq)?.add_row(&head.bq)?;
            let k = normed.matmul(&head.wk)?.add_row(&head.bk)?;
            let v = normed.matmul(&head.wv)?.add_row(&head.bv)?;
            let scores = q.matmul(&k.transpose()?)?.scale(scale);
            let attn = scores.softmax_rows()?;
            attns.push(attn.clone());
            let contrib = attn.matmul(&v)?.matmul(wo)?;
            attn_out = Some(match attn_out {
                None => contrib,
                Some(acc) => acc.add(&contrib)?,
            });
        }
        let attended = attn_out
            .expect("at least one head enforced at init")
            .add_row(&self.bo)?;
        let x1 = tokens.add(&attended)?;

        let normed2 = x1.layer_norm(&self.ln2_gain, &self.ln2_bias, eps)?;
        let mlp = normed2
            .matmul(&self.w1)?
            .add_row(&self.b1)?
            .gelu()
            .matmul(&self.w2)?
            .add_row(&self.b2)?;
        Ok((x1.add(&mlp)?, attns))
    }

    pub(crate) fn collect_named(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        out.push((format!("{prefix}.ln1.gain"), self.ln1_gain.clone()));
        out.push((format!("{prefix}.ln1.bias"), self.ln1_bias.clone()));
        for (i, h) in self.heads.iter().enumerate() {
            out.push((format!("{prefix}.head{i}.wq"), h.wq.clone()));
            out.push((format!("{prefix}.head{i}.wk"), h.wk.clone()));
            out.push((format!("{prefix}.head{i}.wv"), h.wv.clone()));
            out.push((format!("{prefix}.head{i}.bq"), h.bq.clone()));
            out.push((format!("{prefix}.head{i}.bk"), h.bk.clone()));
            out.push((format!("{prefix}.head{i}.bv"), h.bv.clone()));
        }
        for (i, w) in self.wo.iter().enumerate() {
            out.push((format!("{prefix}.head{i}.wo"), w.clone()));
        }
        out.push((format!("{prefix}.bo"), self.bo.clone()));
        out.push((format!("{prefix}.ln2.gain"), self.ln2_gain.clone()));
        out.push((format!("{prefix}.ln2.bias"), self.ln2_bias.clone()));
        out.push((format!("{prefix}.mlp.w1"), self.w1.clone()));
        out.push((format!("{prefix}.mlp.b1"), self.b1.clone()));
        out.push((format!("{prefix}.mlp.w2"), self.w2.clone()));
        out.push((format!("{prefix}.mlp.b2"), self.b2.clone()));
    }
}

/// Random-valued f64 tensor helper shared by tests in several modules.
#[cfg(test)]
pub(crate) fn random_tensor64(
    shape: &[usize],
    rng: &mut ChaCha8Rng,
    lo: f64,
    hi: f64,
) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_STEP};
    use rand::SeedableRng;

    #[test]
    fn sinusoid_position_zero_alternates() {
        let enc = sinusoidal_encoding::<f64>(0, 8).unwrap().to_vec();
        assert_eq!(enc, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn sinusoid_components_bounded() {
        for pos in [0usize, 1, 13, 999] {
            let enc = sinusoidal_encoding::<f64>(pos, 16).unwrap().to_vec();
            assert!(enc.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn sinusoid_first_pair_closed_form() {
        let e0 = sinusoidal_encoding::<f64>(0, 8).unwrap().to_vec();
        let e1 = sinusoidal_encoding::<f64>(1, 8).unwrap().to_vec();
        assert!((e1[0] - e0[0] - 1.0f64.sin()).abs() < 1e-12);
        assert!((e1[1] - e0[1] - (1.0f64.cos() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn sinusoid_odd_dim_rejected() {
        assert!(matches!(
            sinusoidal_encoding::<f64>(3, 7),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn block_rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            MhsaBlock::<f32>::init(30, 4, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn block_single_token_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = MhsaBlock::<f32>::init(8, 2, &mut rng).unwrap();
        let x = Tensor::from_vec(&[1, 8], vec![0.3; 8]).unwrap();
        let y = block.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 8]);
    }

    #[test]
    fn zero_output_projections_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = MhsaBlock::<f64>::init(8, 2, &mut rng).unwrap();
        for w in &block.wo {
            w.set_data(vec![0.0; w.numel()]).unwrap();
        }
        block.w2.set_data(vec![0.0; block.w2.numel()]).unwrap();
        let x = random_tensor64(&[3, 8], &mut rng, -1.0, 1.0);
        let y = block.forward(&x).unwrap();
        for (a, b) in x.to_vec().iter().zip(y.to_vec().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = MhsaBlock::<f32>::init(4, 2, &mut rng).unwrap();
        let x = Tensor::from_vec(&[3, 4], (0..12).map(|i| i as f32 * 0.1).collect()).unwrap();
        let (_, attns) = block.forward_with_attn(&x).unwrap();
        assert_eq!(attns.len(), 2);
        for attn in attns {
            assert_eq!(attn.shape(), &[3, 3]);
            for row in attn.to_vec().chunks_exact(3) {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-5, "row sum {s}");
            }
        }
    }

    #[test]
    fn block_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = MhsaBlock::<f64>::init(6, 2, &mut rng).unwrap();
        let x = random_tensor64(&[3, 6], &mut rng, -0.5, 0.5);
        let weights = random_tensor64(&[3, 6], &mut rng, -1.0, 1.0);
        let mut named = Vec::new();
        block.collect_named("block", &mut named);
        let params: Vec<Tensor<f64>> = named.into_iter().map(|(_, t)| t).collect();
        let err = grad_check(
            |_| Ok(block.forward(&x)?.mul(&weights)?.sum()),
            &params,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }
}
