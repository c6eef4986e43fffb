//! The full network: patch embedding over a sliding window, a
//! history-augmented cls token, joint space-time decoder blocks, impression
//! late fusion, and a linear classifier head.
//!
//! Memory wiring is controlled by [`MemMode`]:
//!
//! * `None`  — plain sliding-window classifier; memory arguments are ignored.
//! * `Short` — impression token added to the decoder's cls output (late fusion).
//! * `Long`  — history token added to the cls token before the decoder (early fusion).
//! * `Full`  — both.
//!
//! Both fusions are literal element-wise additions, which keeps the memory
//! contribution inspectable: see [`ForwardOutput::cls_with_history`].

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::memory::{validate_intervals, HistoryState, DEFAULT_INTERVALS, DEFAULT_STEP_SIZE};
use crate::nn::{sinusoid_row, trunc_normal, zeros_param, MhsaBlock, INIT_SIGMA};
use crate::real::Real;

/// Which memory streams the model consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemMode {
    None,
    Short,
    Long,
    Full,
}

impl MemMode {
    pub fn uses_history(self) -> bool {
        matches!(self, MemMode::Long | MemMode::Full)
    }
    pub fn uses_impressions(self) -> bool {
        matches!(self, MemMode::Short | MemMode::Full)
    }
}

impl fmt::Display for MemMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MemMode::None => "none",
            MemMode::Short => "short",
            MemMode::Long => "long",
            MemMode::Full => "full",
        };
        f.write_str(s)
    }
}

impl FromStr for MemMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MemMode::None),
            "short" => Ok(MemMode::Short),
            "long" => Ok(MemMode::Long),
            "full" => Ok(MemMode::Full),
            other => Err(Error::Config(format!(
                "unknown mem-mode '{other}' (expected none|short|long|full)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of phase classes.
    pub num_phases: usize,
    /// Sliding-window length in frames.
    pub window: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// Embedding dimension.
    pub embed_dim: usize,
    pub heads: usize,
    /// Decoder block count.
    pub depth: usize,
    pub mem_mode: MemMode,
    /// Impression retrieval offsets (frames back from the current one).
    pub intervals: Vec<usize>,
    /// History step size for step filtering.
    pub step_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_phases: 7,
            window: 16,
            image_size: 32,
            patch_size: 16,
            channels: 1,
            embed_dim: 32,
            heads: 4,
            depth: 1,
            mem_mode: MemMode::Full,
            intervals: DEFAULT_INTERVALS.to_vec(),
            step_size: DEFAULT_STEP_SIZE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_phases == 0 {
            return Err(Error::Config("num_phases must be >= 1".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be >= 1".into()));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be >= 1".into()));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.embed_dim % 2 != 0 {
            return Err(Error::Config("embed_dim must be even".into()));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.step_size == 0 {
            return Err(Error::Config("step_size must be >= 1".into()));
        }
        validate_intervals(&self.intervals)?;
        Ok(())
    }

    /// Patches per frame.
    pub fn patches_per_frame(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Flattened patch vector length.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Pixels per frame.
    pub fn frame_len(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }
}

/// History encoder: entry rows are projected into embedding space, a
/// sinusoidal encoding of the step count is added, a learned mask embedding
/// is added scaled by the mask bit, then a query token attends over the rows.
pub struct HistoryEncoder<F: Real> {
    /// One-hot phase identity projection `[C, d]`.
    pub proj: Tensor<F>,
    /// Learned embedding `[1, d]` added to rows whose mask is set.
    pub mask_embed: Tensor<F>,
    /// Learnable query token `[1, d]` whose output becomes the history token.
    pub query: Tensor<F>,
    pub blocks: Vec<MhsaBlock<F>>,
}

/// Impression encoder: cached cls vectors plus a learnable token, two
/// attention blocks, token output returned. No positional encoding — recency
/// is implied by retrieval order.
pub struct ImpressionEncoder<F: Real> {
    pub token: Tensor<F>,
    pub blocks: Vec<MhsaBlock<F>>,
}

/// All learnable weights. The parameter set is a pure function of the config;
/// memory encoders exist only in the modes that use them.
pub struct ModelParams<F: Real> {
    config: ModelConfig,
    pub patch_w: Tensor<F>,
    pub patch_b: Tensor<F>,
    pub cls: Tensor<F>,
    pub pos_spatial: Tensor<F>,
    pub pos_temporal: Tensor<F>,
    pub blocks: Vec<MhsaBlock<F>>,
    pub history: Option<HistoryEncoder<F>>,
    pub impression: Option<ImpressionEncoder<F>>,
    pub head_w: Tensor<F>,
    pub head_b: Tensor<F>,
}

/// Number of attention blocks in each memory encoder.
pub const MEMORY_ENCODER_DEPTH: usize = 2;

/// What one forward pass yields.
pub struct ForwardOutput<F: Real> {
    /// Unnormalized class scores `[1, C]`.
    pub logits: Tensor<F>,
    /// Final augmented cls token `[1, d]` — the vector cached as this frame's
    /// impression.
    pub cls_final: Tensor<F>,
    /// The cls token right after early fusion `[1, d]`; equals `cls` when
    /// history fusion is disabled. Lets tests confirm the fusion is a literal
    /// element-wise addition.
    pub cls_with_history: Tensor<F>,
}

impl<F: Real> std::fmt::Debug for ModelParams<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelParams")
            .field("config", &self.config)
            .field("num_params", &self.num_params())
            .finish_non_exhaustive()
    }
}

impl<F: Real> ModelParams<F> {
    /// Deterministic initialization. The backbone and head draw from one
    /// seeded stream, the memory encoders from a second, so models that differ
    /// only in `mem_mode` share identical backbone and head weights.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let mut mem_rng = ChaCha8Rng::seed_from_u64(seed);
        mem_rng.set_stream(1);

        let patch_w = trunc_normal(&[config.patch_dim(), d], INIT_SIGMA, &mut rng);
        let patch_b = zeros_param(&[d]);
        let cls = trunc_normal(&[1, d], INIT_SIGMA, &mut rng);
        let pos_spatial = trunc_normal(&[config.patches_per_frame(), d], INIT_SIGMA, &mut rng);
        let pos_temporal = trunc_normal(&[config.window, d], INIT_SIGMA, &mut rng);
        let blocks = (0..config.depth)
            .map(|_| MhsaBlock::init(d, config.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head_w = trunc_normal(&[d, config.num_phases], INIT_SIGMA, &mut rng);
        let head_b = zeros_param(&[config.num_phases]);

        let history = if config.mem_mode.uses_history() {
            Some(HistoryEncoder {
                proj: trunc_normal(&[config.num_phases, d], INIT_SIGMA, &mut mem_rng),
                mask_embed: trunc_normal(&[1, d], INIT_SIGMA, &mut mem_rng),
                query: trunc_normal(&[1, d], INIT_SIGMA, &mut mem_rng),
                blocks: (0..MEMORY_ENCODER_DEPTH)
                    .map(|_| MhsaBlock::init(d, config.heads, &mut mem_rng))
                    .collect::<Result<Vec<_>>>()?,
            })
        } else {
            None
        };
        let impression = if config.mem_mode.uses_impressions() {
            Some(ImpressionEncoder {
                token: trunc_normal(&[1, d], INIT_SIGMA, &mut mem_rng),
                blocks: (0..MEMORY_ENCODER_DEPTH)
                    .map(|_| MhsaBlock::init(d, config.heads, &mut mem_rng))
                    .collect::<Result<Vec<_>>>()?,
            })
        } else {
            None
        };

        Ok(ModelParams {
            config: config.clone(),
            patch_w,
            patch_b,
            cls,
            pos_spatial,
            pos_temporal,
            blocks,
            history,
            impression,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Stable (name, tensor) listing; the order is the checkpoint payload
    /// order and the optimizer's buffer order.
    pub fn named_params(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = Vec::new();
        out.push(("patch.w".to_string(), self.patch_w.clone()));
        out.push(("patch.b".to_string(), self.patch_b.clone()));
        out.push(("cls".to_string(), self.cls.clone()));
        out.push(("pos.spatial".to_string(), self.pos_spatial.clone()));
        out.push(("pos.temporal".to_string(), self.pos_temporal.clone()));
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_named(&format!("decoder{i}"), &mut out);
        }
        if let Some(h) = &self.history {
            out.push(("history.proj".to_string(), h.proj.clone()));
            out.push(("history.mask_embed".to_string(), h.mask_embed.clone()));
            out.push(("history.query".to_string(), h.query.clone()));
            for (i, b) in h.blocks.iter().enumerate() {
                b.collect_named(&format!("history.block{i}"), &mut out);
            }
        }
        if let Some(imp) = &self.impression {
            out.push(("impression.token".to_string(), imp.token.clone()));
            for (i, b) in imp.blocks.iter().enumerate() {
                b.collect_named(&format!("impression.block{i}"), &mut out);
            }
        }
        out.push(("head.w".to_string(), self.head_w.clone()));
        out.push(("head.b".to_string(), self.head_b.clone()));
        out
    }

    /// Parameter tensors in `named_params` order.
    pub fn params(&self) -> Vec<Tensor<F>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Patch-embed a window of `T` frames into `[T*P, d]` tokens with spatial
    /// and temporal position embeddings added.
    pub fn patch_embed(&self, window: &[&[F]]) -> Result<Tensor<F>> {
        let cfg = &self.config;
        if window.len() != cfg.window {
            return Err(Error::Input(format!(
                "patch_embed: expected {} frames, got {}",
                cfg.window,
                window.len()
            )));
        }
        for (i, frame) in window.iter().enumerate() {
            if frame.len() != cfg.frame_len() {
                return Err(Error::Input(format!(
                    "patch_embed: frame {i} has {} values, expected {}",
                    frame.len(),
                    cfg.frame_len()
                )));
            }
        }
        let patches = extract_patches(window, cfg);
        let tokens = patches.matmul(&self.patch_w)?.add_row(&self.patch_b)?;
        // spatial embedding tiled per frame, temporal embedding repeated per patch
        let spatial_tiles: Vec<Tensor<F>> = (0..cfg.window).map(|_| self.pos_spatial.clone()).collect();
        let spatial = Tensor::concat_rows(&spatial_tiles)?;
        let temporal = self.pos_temporal.repeat_rows(cfg.patches_per_frame())?;
        tokens.add(&spatial)?.add(&temporal)
    }

    /// Encode the long-term history into a `[1, d]` token.
    pub fn history_token(&self, history: &HistoryState) -> Result<Tensor<F>> {
        let enc = self
            .history
            .as_ref()
            .ok_or_else(|| Error::Usage("history_token: model has no history encoder".into()))?;
        let cfg = &self.config;
        if history.num_phases() != cfg.num_phases {
            return Err(Error::Config(format!(
                "history has {} phases, model expects {}",
                history.num_phases(),
                cfg.num_phases
            )));
        }
        let c = cfg.num_phases;
        let d = cfg.embed_dim;
        let matrix = history.entry_matrix();
        // split the entry rows into their three embedding paths
        let mut one_hot = vec![F::zero(); c * c];
        let mut step_rows = Vec::with_capacity(c * d);
        let mut mask_col = vec![F::zero(); c];
        for (i, row) in matrix.iter().enumerate() {
            for j in 0..c {
                one_hot[i * c + j] = F::from_f64(row[j]);
            }
            step_rows.extend(sinusoid_row::<F>(row[c], d));
            mask_col[i] = F::from_f64(row[c + 1]);
        }
        let one_hot = Tensor::from_vec(&[c, c], one_hot)?;
        let steps = Tensor::from_vec(&[c, d], step_rows)?;
        let mask_col = Tensor::from_vec(&[c, 1], mask_col)?;

        let identity = one_hot.matmul(&enc.proj)?;
        let mask_term = mask_col.matmul(&enc.mask_embed)?;
        let rows = identity.add(&steps)?.add(&mask_term)?;
        let tokens = Tensor::concat_rows(&[rows, enc.query.clone()])?;
        let mut x = tokens;
        for block in &enc.blocks {
            x = block.forward(&x)?;
        }
        x.slice_rows(c, c + 1)
    }

    /// Encode retrieved impressions into a `[1, d]` token.
    pub fn impression_token(&self, impressions: &[Vec<F>]) -> Result<Tensor<F>> {
        let enc = self.impression.as_ref().ok_or_else(|| {
            Error::Usage("impression_token: model has no impression encoder".into())
        })?;
        let d = self.config.embed_dim;
        let mut parts = Vec::with_capacity(impressions.len() + 1);
        for (i, v) in impressions.iter().enumerate() {
            if v.len() != d {
                return Err(Error::Input(format!(
                    "impression {i} has dimension {}, expected {d}",
                    v.len()
                )));
            }
            parts.push(Tensor::from_vec(&[1, d], v.clone())?);
        }
        parts.push(enc.token.clone());
        let mut x = Tensor::concat_rows(&parts)?;
        for block in &enc.blocks {
            x = block.forward(&x)?;
        }
        x.slice_rows(impressions.len(), impressions.len() + 1)
    }

    /// Full forward pass for one window. Memory arguments are read only in
    /// the modes that use them.
    pub fn forward(
        &self,
        window: &[&[F]],
        history: &HistoryState,
        impressions: &[Vec<F>],
    ) -> Result<ForwardOutput<F>> {
        let patch_tokens = self.patch_embed(window)?;

        let cls_in = if self.config.mem_mode.uses_history() {
            let h = self.history_token(history)?;
            self.cls.add(&h)?
        } else {
            self.cls.clone()
        };

        let mut x = Tensor::concat_rows(&[cls_in.clone(), patch_tokens])?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let cls_out = x.slice_rows(0, 1)?;

        let cls_final = if self.config.mem_mode.uses_impressions() {
            let imp = self.impression_token(impressions)?;
            cls_out.add(&imp)?
        } else {
            cls_out
        };

        let logits = cls_final.matmul(&self.head_w)?.add_row(&self.head_b)?;
        Ok(ForwardOutput {
            logits,
            cls_final,
            cls_with_history: cls_in,
        })
    }
}

/// Flatten a window into `[T*P, patch_dim]`, frame-major, patches in
/// row-major scan order, each patch flattened channel-major.
fn extract_patches<F: Real>(window: &[&[F]], cfg: &ModelConfig) -> Tensor<F> {
    let side = cfg.image_size / cfg.patch_size;
    let ps = cfg.patch_size;
    let s = cfg.image_size;
    let mut data = Vec::with_capacity(cfg.window * cfg.patches_per_frame() * cfg.patch_dim());
    for frame in window {
        for py in 0..side {
            for px in 0..side {
                for ch in 0..cfg.channels {
                    let base = ch * s * s;
                    for dy in 0..ps {
                        let row = (py * ps + dy) * s + px * ps;
                        data.extend_from_slice(&frame[base + row..base + row + ps]);
                    }
                }
            }
        }
    }
    Tensor::from_vec(
        &[cfg.window * cfg.patches_per_frame(), cfg.patch_dim()],
        data,
    )
    .expect("patch buffer sized by construction")
}

/// Softmax over a logits row (utility for consumers that need probabilities).
pub fn softmax_vec<F: Real>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&v| (v - max).exp()).collect();
    let denom: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

/// Argmax with ties broken by the lowest index.
pub fn argmax<F: Real>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::ImpressionCache;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_phases: 3,
            window: 2,
            image_size: 8,
            patch_size: 4,
            channels: 1,
            embed_dim: 8,
            heads: 2,
            depth: 1,
            mem_mode: MemMode::Full,
            intervals: vec![2, 4],
            step_size: 5,
        }
    }

    fn zero_window(cfg: &ModelConfig) -> Vec<Vec<f32>> {
        vec![vec![0.0; cfg.frame_len()]; cfg.window]
    }

    fn window_refs(frames: &[Vec<f32>]) -> Vec<&[f32]> {
        frames.iter().map(|f| f.as_slice()).collect()
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny_config();
        let a = ModelParams::<f32>::init(&cfg, 9).unwrap();
        let b = ModelParams::<f32>::init(&cfg, 9).unwrap();
        for ((na, ta), (nb, tb)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec(), "param {na}");
        }
    }

    #[test]
    fn init_rejects_indivisible_dims() {
        let mut cfg = tiny_config();
        cfg.embed_dim = 30;
        cfg.heads = 4;
        assert!(matches!(
            ModelParams::<f32>::init(&cfg, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn memoryless_model_has_no_memory_params() {
        let mut cfg = tiny_config();
        cfg.mem_mode = MemMode::None;
        let p = ModelParams::<f32>::init(&cfg, 0).unwrap();
        assert!(p.history.is_none() && p.impression.is_none());
        assert!(p
            .named_params()
            .iter()
            .all(|(n, _)| !n.starts_with("history") && !n.starts_with("impression")));
    }

    #[test]
    fn backbone_shared_across_mem_modes() {
        let full = ModelParams::<f32>::init(&tiny_config(), 4).unwrap();
        let mut cfg = tiny_config();
        cfg.mem_mode = MemMode::None;
        let none = ModelParams::<f32>::init(&cfg, 4).unwrap();
        assert_eq!(full.patch_w.to_vec(), none.patch_w.to_vec());
        assert_eq!(full.head_w.to_vec(), none.head_w.to_vec());
    }

    #[test]
    fn patch_embed_token_count() {
        let mut cfg = ModelConfig::default();
        cfg.patch_size = 8;
        let p = ModelParams::<f32>::init(&cfg, 0).unwrap();
        let frames = vec![vec![0.0f32; cfg.frame_len()]; cfg.window];
        let tokens = p.patch_embed(&window_refs(&frames)).unwrap();
        assert_eq!(tokens.shape(), &[16 * 16, cfg.embed_dim]);
    }

    #[test]
    fn patch_embed_zero_frames_zero_pos_gives_equal_tokens() {
        let cfg = tiny_config();
        let p = ModelParams::<f32>::init(&cfg, 1).unwrap();
        p.pos_spatial
            .set_data(vec![0.0; p.pos_spatial.numel()])
            .unwrap();
        p.pos_temporal
            .set_data(vec![0.0; p.pos_temporal.numel()])
            .unwrap();
        let frames = zero_window(&cfg);
        let tokens = p.patch_embed(&window_refs(&frames)).unwrap();
        let v = tokens.to_vec();
        let first = &v[0..cfg.embed_dim];
        for row in v.chunks_exact(cfg.embed_dim) {
            assert_eq!(row, first);
        }
    }

    #[test]
    fn patch_embed_rejects_wrong_window() {
        let cfg = tiny_config();
        let p = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let frames = vec![vec![0.0f32; cfg.frame_len()]; cfg.window + 1];
        assert!(p.patch_embed(&window_refs(&frames)).is_err());
    }

    #[test]
    fn history_token_dimension_and_sensitivity() {
        let cfg = tiny_config();
        let p = ModelParams::<f32>::init(&cfg, 2).unwrap();
        let mut h = HistoryState::new(cfg.num_phases, cfg.step_size).unwrap();
        let base = p.history_token(&h).unwrap();
        assert_eq!(base.shape(), &[1, cfg.embed_dim]);

        // flipping one mask bit changes the output
        let flipped = h.intervene_set(1, 0, true).unwrap();
        let tok = p.history_token(&flipped).unwrap();
        assert_ne!(base.to_vec(), tok.to_vec());

        // step 0 vs step 1 differ via the sinusoidal term
        for _ in 0..cfg.step_size {
            h.observe_phase(1).unwrap();
        }
        let stepped = p.history_token(&h).unwrap();
        assert_ne!(tok.to_vec(), stepped.to_vec());
    }

    #[test]
    fn impression_token_cold_start_is_finite() {
        let cfg = tiny_config();
        let p = ModelParams::<f32>::init(&cfg, 3).unwrap();
        let zeros = vec![vec![0.0f32; cfg.embed_dim]; 8];
        let tok = p.impression_token(&zeros).unwrap();
        assert_eq!(tok.shape(), &[1, cfg.embed_dim]);
        assert!(tok.to_vec().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_softmax_sums_to_one() {
        let cfg = tiny_config();
        let p = ModelParams::<f32>::init(&cfg, 5).unwrap();
        let frames = zero_window(&cfg);
        let h = HistoryState::new(cfg.num_phases, cfg.step_size).unwrap();
        let cache = ImpressionCache::<f32>::new(cfg.embed_dim);
        let out = p
            .forward(&window_refs(&frames), &h, &cache.retrieve(0, &cfg.intervals))
            .unwrap();
        let probs = softmax_vec(&out.logits.to_vec());
        let s: f32 = probs.iter().sum();
        assert!((s - 1.0).abs() < 1e-5);
    }

    #[test]
    fn early_fusion_is_elementwise_addition() {
        let cfg = tiny_config();
        let p = ModelParams::<f32>::init(&cfg, 6).unwrap();
        let mut h = HistoryState::new(cfg.num_phases, cfg.step_size).unwrap();
        for _ in 0..10 {
            h.observe_phase(0).unwrap();
        }
        let frames = zero_window(&cfg);
        let out = p.forward(&window_refs(&frames), &h, &[]).unwrap();
        let tok = p.history_token(&h).unwrap();
        for ((inj, cls), t) in out
            .cls_with_history
            .to_vec()
            .iter()
            .zip(p.cls.to_vec().iter())
            .zip(tok.to_vec().iter())
        {
            assert!((inj - cls - t).abs() < 1e-6);
        }
    }

    #[test]
    fn argmax_tie_breaks_low() {
        assert_eq!(argmax(&[1.0f32, 1.0, 0.5]), 0);
        assert_eq!(argmax(&[0.1f32, 1.0, 1.0]), 1);
    }
}
