//! Synthetic "procedures": phase label sequences from a forward-only
//! stochastic chain plus rendered frames.
//!
//! Each phase renders as a fixed low-frequency cosine template plus Gaussian
//! pixel noise. Templates are distinct Fourier modes, so non-ambiguous phases
//! are linearly separable and a tiny model trains in minutes. Phases listed
//! in `ambiguous_pairs` share one template: their frames are drawn from the
//! same distribution, and only temporal memory can tell them apart.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_phases: usize,
    /// Probability that each phase is skipped when the chain reaches it.
    /// Index 0 must be 0 so every video has at least one phase.
    pub skip_prob: Vec<f64>,
    /// Per-phase duration law: uniform integer range `[min, max]` frames.
    pub durations: Vec<(u32, u32)>,
    pub image_size: usize,
    pub channels: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise_sigma: f64,
    /// Unordered pairs of distinct phases rendered identically.
    pub ambiguous_pairs: Vec<(usize, usize)>,
    pub videos_train: usize,
    pub videos_val: usize,
    pub videos_test: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_phases: 7,
            skip_prob: vec![0.0; 7],
            durations: vec![(40, 120); 7],
            image_size: 32,
            channels: 1,
            noise_sigma: 0.1,
            ambiguous_pairs: vec![(1, 3)],
            videos_train: 20,
            videos_val: 4,
            videos_test: 6,
            seed: 2024,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.num_phases;
        if c == 0 {
            return Err(Error::Config("generator: num_phases must be >= 1".into()));
        }
        if self.skip_prob.len() != c || self.durations.len() != c {
            return Err(Error::Config(format!(
                "generator: skip_prob and durations must each have {c} entries"
            )));
        }
        if self.skip_prob[0] != 0.0 {
            return Err(Error::Config(
                "generator: phase 0 cannot be skipped (skip_prob[0] must be 0)".into(),
            ));
        }
        if self.skip_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("generator: skip probabilities must be in [0,1]".into()));
        }
        if self.durations.iter().any(|&(lo, hi)| lo < 1 || hi < lo) {
            return Err(Error::Config(
                "generator: every duration range needs 1 <= min <= max".into(),
            ));
        }
        if self.image_size == 0 || self.channels == 0 {
            return Err(Error::Config("generator: image_size and channels must be >= 1".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("generator: noise_sigma must be >= 0".into()));
        }
        let mut seen = vec![false; c];
        for &(a, b) in &self.ambiguous_pairs {
            if a >= c || b >= c || a == b {
                return Err(Error::Config(format!(
                    "generator: ambiguous pair ({a},{b}) invalid for {c} phases"
                )));
            }
            if seen[a] || seen[b] {
                return Err(Error::Config("generator: ambiguous pairs must be disjoint".into()));
            }
            seen[a] = true;
            seen[b] = true;
        }
        if self.videos_train + self.videos_val + self.videos_test == 0 {
            return Err(Error::Config("generator: at least one video required".into()));
        }
        Ok(())
    }

    pub fn frame_len(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }

    pub fn total_videos(&self) -> usize {
        self.videos_train + self.videos_val + self.videos_test
    }

    /// The rendering template index for a phase: members of an ambiguous
    /// pair share the lower member's template.
    pub fn canonical_phase(&self, phase: usize) -> usize {
        for &(a, b) in &self.ambiguous_pairs {
            let lo = a.min(b);
            let hi = a.max(b);
            if phase == hi {
                return lo;
            }
        }
        phase
    }
}

/// One synthetic video: frames plus per-frame ground-truth phase labels,
/// fixed at 1 frame per second.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcedureRecord {
    pub video_id: String,
    pub frames: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub fps: u32,
}

impl ProcedureRecord {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }
}

/// Noise-free rendering template for a phase: a cosine Fourier mode whose
/// wave vector is indexed by the canonical phase id.
pub fn base_pattern(config: &GeneratorConfig, phase: usize) -> Vec<f32> {
    let canonical = config.canonical_phase(phase);
    // distinct low-frequency wave vectors; extendable past 12 phases by wrap
    const WAVES: [(f64, f64); 12] = [
        (0.0, 1.0),
        (1.0, 0.0),
        (1.0, 1.0),
        (0.0, 2.0),
        (2.0, 0.0),
        (1.0, 2.0),
        (2.0, 1.0),
        (2.0, 2.0),
        (0.0, 3.0),
        (3.0, 0.0),
        (1.0, 3.0),
        (3.0, 1.0),
    ];
    let (kx, ky) = WAVES[canonical % WAVES.len()];
    let s = config.image_size;
    let mut pattern = Vec::with_capacity(config.frame_len());
    for _ in 0..config.channels {
        for y in 0..s {
            for x in 0..s {
                let angle =
                    2.0 * std::f64::consts::PI * (kx * x as f64 + ky * y as f64) / s as f64;
                pattern.push(angle.cos() as f32);
            }
        }
    }
    pattern
}

/// Sample the phase visit order and durations, then render frames.
/// Fully determined by `(config, video_seed)`.
pub fn sample_procedure(config: &GeneratorConfig, video_seed: u64) -> Result<ProcedureRecord> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(video_seed);
    let noise = Normal::new(0.0f64, config.noise_sigma.max(f64::MIN_POSITIVE))
        .expect("sigma validated non-negative");

    let mut labels = Vec::new();
    for phase in 0..config.num_phases {
        // decide the skip first so the draw count per phase is fixed
        let skip_draw: f64 = rng.random_range(0.0..1.0);
        if phase > 0 && skip_draw < config.skip_prob[phase] {
            continue;
        }
        let (lo, hi) = config.durations[phase];
        let duration = rng.random_range(lo..=hi) as usize;
        labels.extend(std::iter::repeat(phase).take(duration));
    }

    let mut frames = Vec::with_capacity(labels.len());
    for &phase in &labels {
        let mut frame = base_pattern(config, phase);
        if config.noise_sigma > 0.0 {
            for px in &mut frame {
                *px += noise.sample(&mut rng) as f32;
            }
        }
        frames.push(frame);
    }

    Ok(ProcedureRecord {
        video_id: format!("video-{video_seed:016x}"),
        frames,
        labels,
        channels: config.channels,
        height: config.image_size,
        width: config.image_size,
        fps: 1,
    })
}

/// Derive the per-video seed for video `index` (splitmix64 over the base seed).
pub fn video_seed(base: u64, index: usize) -> u64 {
    let mut z = base
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
