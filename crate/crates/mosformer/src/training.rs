//! Memory-caching training.
//!
//! Batches are drawn from a seeded random permutation of every (video, frame)
//! pair — never sequentially — while an epoch-lagged impression cache gives
//! each example the cls vectors its frames produced in the *previous* epoch:
//!
//! * Every batch reads caches first, then trains, then writes each example's
//!   fresh cls vector into the next epoch's buffer — so each frame's slot is
//!   written exactly once per epoch, and no read ever observes a value from
//!   the current epoch.
//! * History inputs come from ground-truth labels, folded over the frames
//!   strictly before the one being predicted.
//!
//! Sequential training on long same-label stretches is the known failure mode
//! here (the memory degenerates into a label leak); the permutation is a pure
//! function of `(seed, epoch)` and is exposed for audits.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::checkpoint;
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::inference::replay_video;
use crate::memory::{HistoryState, ImpressionCache};
use crate::model::{ModelConfig, ModelParams};
use crate::optim::{zero_grads, AdamState};
use crate::synthdata::ProcedureRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train: epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train: batch_size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("train: learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Double-buffered per-video impression cache: reads see the previous epoch's
/// writes, writes fill the buffer the next epoch will read.
#[derive(Clone, Debug)]
pub struct LaggedCache {
    pub read: ImpressionCache<f32>,
    pub write: ImpressionCache<f32>,
}

impl LaggedCache {
    pub fn new(dim: usize) -> Self {
        LaggedCache {
            read: ImpressionCache::new(dim),
            write: ImpressionCache::new(dim),
        }
    }

    /// End of epoch: this epoch's writes become next epoch's reads.
    pub fn flip(&mut self) {
        let dim = self.read.dim();
        self.read = std::mem::replace(&mut self.write, ImpressionCache::new(dim));
    }
}

/// Instrumentation hooks; every callback defaults to a no-op.
pub trait CacheObserver {
    fn on_batch(&mut self, _epoch: usize, _indices: &[(usize, usize)]) {}
    fn on_read(&mut self, _epoch: usize, _video: &str, _frame: usize, _impressions: &[Vec<f32>]) {}
    fn on_write(&mut self, _epoch: usize, _video: &str, _frame: usize, _cls: &[f32]) {}
    fn on_history(&mut self, _epoch: usize, _video: &str, _frame: usize, _history: &HistoryState) {}
}

pub struct NoopObserver;

impl CacheObserver for NoopObserver {}

/// Ground-truth history at frame `t`: labels `[0, t)` folded through
/// `observe_phase` — the frame being predicted is excluded.
pub fn build_gt_history(
    labels: &[usize],
    t: usize,
    num_phases: usize,
    step_size: usize,
) -> Result<HistoryState> {
    if t > labels.len() {
        return Err(Error::Input(format!(
            "build_gt_history: t={t} beyond {} labels",
            labels.len()
        )));
    }
    let mut h = HistoryState::new(num_phases, step_size)?;
    for &l in &labels[..t] {
        h.observe_phase(l)?;
    }
    Ok(h)
}

/// One assembled training example.
pub struct Example<'a> {
    pub window: Vec<&'a [f32]>,
    pub history: HistoryState,
    pub impressions: Vec<Vec<f32>>,
    pub label: usize,
}

/// Window (duplicate-first padded), ground-truth history, cached impressions,
/// and label for frame `t` of a record.
pub fn make_example<'a>(
    record: &'a ProcedureRecord,
    t: usize,
    read_cache: &ImpressionCache<f32>,
    cfg: &ModelConfig,
) -> Result<Example<'a>> {
    if t >= record.frames.len() {
        return Err(Error::Input(format!(
            "make_example: frame {t} beyond video of {} frames",
            record.frames.len()
        )));
    }
    let window = (0..cfg.window)
        .map(|j| {
            let idx = (t + 1 + j).saturating_sub(cfg.window).min(t);
            record.frames[idx].as_slice()
        })
        .collect();
    Ok(Example {
        window,
        history: build_gt_history(&record.labels, t, cfg.num_phases, cfg.step_size)?,
        impressions: read_cache.retrieve(t, &cfg.intervals),
        label: record.labels[t],
    })
}

/// The (video, frame) visit order for an epoch — a pure function of
/// `(seed, epoch)`, independent of everything else.
pub fn epoch_permutation(num_items: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..num_items).collect();
    order.shuffle(&mut rng);
    order
}

pub struct TrainState {
    pub params: ModelParams<f32>,
    pub adam: AdamState<f32>,
    /// Per-video lagged caches, keyed by video id.
    pub caches: BTreeMap<String, LaggedCache>,
    /// Completed epochs.
    pub epoch: usize,
    param_list: Vec<Tensor<f32>>,
}

impl TrainState {
    pub fn new(model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<Self> {
        train_cfg.validate()?;
        let params = ModelParams::init(model_cfg, train_cfg.seed)?;
        let param_list = params.params();
        let adam = AdamState::new(
            train_cfg.learning_rate,
            train_cfg.beta1,
            train_cfg.beta2,
            train_cfg.epsilon,
            &param_list,
        );
        Ok(TrainState {
            params,
            adam,
            caches: BTreeMap::new(),
            epoch: 0,
            param_list,
        })
    }
}

#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub examples: usize,
    pub cache_writes: usize,
    pub seconds: f64,
}

/// One pass over every (video, frame) pair in seeded random batches.
/// Cache reads happen while assembling a batch, cache writes after its
/// optimizer step; the lagged buffers are flipped by [`fit`] (or the caller)
/// once the epoch completes.
pub fn train_epoch(
    state: &mut TrainState,
    videos: &[&ProcedureRecord],
    train_cfg: &TrainConfig,
    observer: &mut dyn CacheObserver,
) -> Result<EpochStats> {
    if videos.is_empty() {
        return Err(Error::Input("train_epoch: no training videos".into()));
    }
    let start = Instant::now();
    let epoch = state.epoch + 1;
    let cfg = state.params.config().clone();
    let dim = cfg.embed_dim;
    for v in videos {
        state
            .caches
            .entry(v.video_id.clone())
            .or_insert_with(|| LaggedCache::new(dim));
    }

    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (vi, v) in videos.iter().enumerate() {
        for t in 0..v.frames.len() {
            pairs.push((vi, t));
        }
    }
    let order = epoch_permutation(pairs.len(), train_cfg.seed, epoch);

    let mut loss_sum = 0.0f64;
    let mut cache_writes = 0usize;
    for batch_ids in order.chunks(train_cfg.batch_size) {
        let batch: Vec<(usize, usize)> = batch_ids.iter().map(|&i| pairs[i]).collect();
        observer.on_batch(epoch, &batch);

        // read phase: assemble every example against the lagged read buffers
        let mut examples = Vec::with_capacity(batch.len());
        for &(vi, t) in &batch {
            let video = videos[vi];
            let cache = &state.caches[&video.video_id].read;
            let ex = make_example(video, t, cache, &cfg)?;
            observer.on_read(epoch, &video.video_id, t, &ex.impressions);
            observer.on_history(epoch, &video.video_id, t, &ex.history);
            examples.push(ex);
        }

        let mut logit_rows = Vec::with_capacity(examples.len());
        let mut cls_rows = Vec::with_capacity(examples.len());
        let mut labels = Vec::with_capacity(examples.len());
        for ex in &examples {
            let out = state.params.forward(&ex.window, &ex.history, &ex.impressions)?;
            logit_rows.push(out.logits);
            cls_rows.push(out.cls_final);
            labels.push(ex.label);
        }
        let batch_logits = Tensor::concat_rows(&logit_rows)?;
        let loss = Tensor::cross_entropy(&batch_logits, &labels)?;
        let loss_val = loss.item()?.to_f64();
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {loss_val} in epoch {epoch} after {cache_writes} examples"
            )));
        }
        loss_sum += loss_val * batch.len() as f64;

        zero_grads(&state.param_list);
        loss.backward()?;
        state.adam.step(&state.param_list)?;

        // write phase: store each example's fresh cls into next epoch's buffer
        for ((vi, t), cls) in batch.iter().zip(&cls_rows) {
            let video = videos[*vi];
            let vec = cls.to_vec();
            observer.on_write(epoch, &video.video_id, *t, &vec);
            state
                .caches
                .get_mut(&video.video_id)
                .expect("cache created above")
                .write
                .store(*t, vec)?;
            cache_writes += 1;
        }
    }

    state.epoch = epoch;
    Ok(EpochStats {
        epoch,
        mean_loss: loss_sum / pairs.len() as f64,
        examples: pairs.len(),
        cache_writes,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitLogRow {
    pub epoch: usize,
    pub loss: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

pub struct FitResult {
    /// Best-validation parameters.
    pub params: ModelParams<f32>,
    pub log: Vec<FitLogRow>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// Frame accuracy of online replay, averaged per video.
fn mean_video_accuracy(params: &ModelParams<f32>, videos: &[&ProcedureRecord]) -> Result<f64> {
    if videos.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for v in videos {
        let preds = replay_video(params, v)?;
        let correct = preds
            .iter()
            .zip(&v.labels)
            .filter(|(p, &l)| p.phase == l)
            .count();
        total += correct as f64 / v.labels.len() as f64;
    }
    Ok(total / videos.len() as f64)
}

/// Run the full training loop: `epochs` epochs over the train split,
/// validation-replay after each one, best-validation checkpoint kept.
/// Deterministic given the seed.
pub fn fit(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    observer: &mut dyn CacheObserver,
) -> Result<FitResult> {
    let train_videos = dataset.split(Split::Train);
    let val_videos = dataset.split(Split::Val);
    let mut state = TrainState::new(model_cfg, train_cfg)?;
    let mut log = Vec::with_capacity(train_cfg.epochs);
    let mut best: Option<(f64, usize, Vec<u8>)> = None;
    for _ in 0..train_cfg.epochs {
        let epoch_start = Instant::now();
        let stats = train_epoch(&mut state, &train_videos, train_cfg, observer)?;
        for cache in state.caches.values_mut() {
            cache.flip();
        }
        let val_accuracy = mean_video_accuracy(&state.params, &val_videos)?;
        log.push(FitLogRow {
            epoch: stats.epoch,
            loss: stats.mean_loss,
            val_accuracy,
            seconds: epoch_start.elapsed().as_secs_f64(),
        });
        let improved = match &best {
            None => true,
            // NaN val accuracy (no val split): keep the latest epoch
            Some((acc, _, _)) => val_accuracy.is_nan() || val_accuracy > *acc,
        };
        if improved {
            best = Some((val_accuracy, stats.epoch, checkpoint::to_bytes(&state.params)?));
        }
    }
    let (best_val_accuracy, best_epoch, bytes) = best.expect("epochs >= 1 validated");
    let params = checkpoint::from_bytes(&bytes, std::path::Path::new("<in-memory>"))?;
    Ok(FitResult {
        params,
        log,
        best_epoch,
        best_val_accuracy,
    })
}

/// Training log CSV: `epoch,loss,val_accuracy,seconds`.
pub fn write_train_log(path: &std::path::Path, rows: &[FitLogRow]) -> Result<()> {
    let mut out = String::from("epoch,loss,val_accuracy,seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch, r.loss, r.val_accuracy, r.seconds
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MemMode;
    use crate::synthdata::{sample_procedure, GeneratorConfig};

    fn toy_model() -> ModelConfig {
        ModelConfig {
            num_phases: 3,
            window: 4,
            image_size: 8,
            patch_size: 4,
            channels: 1,
            embed_dim: 8,
            heads: 2,
            depth: 1,
            mem_mode: MemMode::Full,
            intervals: vec![3, 6],
            step_size: 5,
        }
    }

    fn toy_gen() -> GeneratorConfig {
        GeneratorConfig {
            num_phases: 3,
            skip_prob: vec![0.0; 3],
            durations: vec![(8, 14); 3],
            image_size: 8,
            channels: 1,
            noise_sigma: 0.05,
            ambiguous_pairs: vec![],
            videos_train: 2,
            videos_val: 0,
            videos_test: 0,
            seed: 17,
        }
    }

    #[test]
    fn gt_history_cases() {
        // empty prefix
        let h = build_gt_history(&[0, 0, 1], 0, 3, 30).unwrap();
        assert!(h.entries().iter().all(|e| !e.mask && e.frame_count == 0));

        // forty frames of phase 0 at step 30
        let labels = vec![0usize; 40];
        let h = build_gt_history(&labels, 40, 3, 30).unwrap();
        let e = h.entry(0).unwrap();
        assert_eq!((e.frame_count, e.step_count, e.mask), (40, 1, true));

        // a 10-frame blip of phase 1 never registers at step 30
        let mut labels = vec![0usize; 35];
        labels.extend(vec![1usize; 10]);
        labels.extend(vec![2usize; 35]);
        for t in 0..=labels.len() {
            let h = build_gt_history(&labels, t, 3, 30).unwrap();
            assert!(!h.entry(1).unwrap().mask, "mask raised at t={t}");
        }

        assert!(build_gt_history(&labels, 999, 3, 30).is_err());
    }

    #[test]
    fn window_padding_rules() {
        let gen = toy_gen();
        let rec = sample_procedure(&gen, 0).unwrap();
        let mut cfg = toy_model();
        cfg.window = 4;
        let cache = ImpressionCache::new(cfg.embed_dim);

        let ex = make_example(&rec, 0, &cache, &cfg).unwrap();
        for w in &ex.window {
            assert!(std::ptr::eq(*w, rec.frames[0].as_slice()));
        }

        let ex = make_example(&rec, 10, &cache, &cfg).unwrap();
        for (j, w) in ex.window.iter().enumerate() {
            assert!(std::ptr::eq(*w, rec.frames[7 + j].as_slice()));
        }

        // cold cache: impressions are zero vectors
        assert!(ex
            .impressions
            .iter()
            .all(|v| v.iter().all(|&x| x == 0.0)));
        assert_eq!(ex.label, rec.labels[10]);
    }

    #[test]
    fn permutation_is_reproducible_and_shuffled() {
        let a = epoch_permutation(100, 7, 1);
        let b = epoch_permutation(100, 7, 1);
        assert_eq!(a, b);
        let c = epoch_permutation(100, 7, 2);
        assert_ne!(a, c);
        let sorted: Vec<usize> = (0..100).collect();
        assert_ne!(a, sorted);
    }

    struct CountingObserver {
        writes: usize,
        reads: usize,
    }

    impl CacheObserver for CountingObserver {
        fn on_read(&mut self, _e: usize, _v: &str, _f: usize, _i: &[Vec<f32>]) {
            self.reads += 1;
        }
        fn on_write(&mut self, _e: usize, _v: &str, _f: usize, _c: &[f32]) {
            self.writes += 1;
        }
    }

    #[test]
    fn one_write_per_frame_per_epoch() {
        let gen = toy_gen();
        let recs: Vec<_> = (0..2)
            .map(|i| sample_procedure(&gen, i as u64).unwrap())
            .collect();
        let videos: Vec<&ProcedureRecord> = recs.iter().collect();
        let total_frames: usize = videos.iter().map(|v| v.frames.len()).sum();

        let train_cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(&toy_model(), &train_cfg).unwrap();
        let mut obs = CountingObserver { writes: 0, reads: 0 };
        let stats = train_epoch(&mut state, &videos, &train_cfg, &mut obs).unwrap();
        assert_eq!(stats.cache_writes, total_frames);
        assert_eq!(obs.writes, total_frames);
        assert_eq!(obs.reads, total_frames);
        // every frame's slot present in the write buffer
        for v in &videos {
            let cache = &state.caches[&v.video_id].write;
            assert_eq!(cache.len(), v.frames.len());
        }
    }

    #[test]
    fn loss_decreases_on_toy_set() {
        let gen = toy_gen();
        let recs: Vec<_> = (0..2)
            .map(|i| sample_procedure(&gen, 100 + i as u64).unwrap())
            .collect();
        let videos: Vec<&ProcedureRecord> = recs.iter().collect();
        let train_cfg = TrainConfig {
            epochs: 5,
            batch_size: 8,
            seed: 1,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(&toy_model(), &train_cfg).unwrap();
        let mut losses = Vec::new();
        for _ in 0..5 {
            let stats = train_epoch(&mut state, &videos, &train_cfg, &mut NoopObserver).unwrap();
            for c in state.caches.values_mut() {
                c.flip();
            }
            losses.push(stats.mean_loss);
        }
        assert!(
            losses[4] < losses[0] * 0.8,
            "loss failed to decrease: {losses:?}"
        );
    }
}
