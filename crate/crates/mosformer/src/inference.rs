//! Online streaming inference.
//!
//! An [`OnlineSession`] is strictly causal: frames arrive one at a time, the
//! window is padded with duplicates of the first frame until it fills, and
//! both memories update from the model's own outputs — the predicted phase
//! folds into the history (so brief spurious predictions never raise a mask,
//! thanks to step filtering), and the final cls vector is stored as this
//! frame's impression.
//!
//! [`counterfactual_replay`] reruns a video while surgically editing the live
//! history right before chosen frames; with no edits it is bit-identical to
//! [`replay_video`].

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::memory::{HistoryState, ImpressionCache};
use crate::model::{argmax, ModelParams};
use crate::synthdata::ProcedureRecord;

/// One frame's outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub frame: usize,
    pub phase: usize,
    pub logits: Vec<f32>,
}

impl Prediction {
    pub fn max_logit(&self) -> f32 {
        self.logits[self.phase]
    }
}

/// A single history intervention.
#[derive(Clone, Debug, PartialEq)]
pub enum EditAction {
    /// Clear the mask of each listed phase (counts untouched).
    Erase(Vec<usize>),
    /// Overwrite one entry; the step count is recomputed.
    Set {
        phase: usize,
        frame_count: u64,
        mask: bool,
    },
}

/// Edits applied immediately before processing `frame`.
#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualEdit {
    pub frame: usize,
    pub actions: Vec<EditAction>,
}

pub struct OnlineSession<'a> {
    params: &'a ModelParams<f32>,
    buffer: VecDeque<Vec<f32>>,
    frame_count: usize,
    history: HistoryState,
    cache: ImpressionCache<f32>,
    predictions: Vec<usize>,
}

impl<'a> Clone for OnlineSession<'a> {
    fn clone(&self) -> Self {
        OnlineSession {
            params: self.params,
            buffer: self.buffer.clone(),
            frame_count: self.frame_count,
            history: self.history.clone(),
            cache: self.cache.clone(),
            predictions: self.predictions.clone(),
        }
    }
}

impl<'a> OnlineSession<'a> {
    /// Fresh session: empty buffer, empty memories.
    pub fn new(params: &'a ModelParams<f32>) -> Result<Self> {
        let cfg = params.config();
        cfg.validate()?;
        Ok(OnlineSession {
            params,
            buffer: VecDeque::with_capacity(cfg.window),
            frame_count: 0,
            history: HistoryState::new(cfg.num_phases, cfg.step_size)?,
            cache: ImpressionCache::new(cfg.embed_dim),
            predictions: Vec::new(),
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn history(&self) -> &HistoryState {
        &self.history
    }

    pub fn cache(&self) -> &ImpressionCache<f32> {
        &self.cache
    }

    pub fn predictions(&self) -> &[usize] {
        &self.predictions
    }

    /// Apply a history intervention to the live session state.
    pub fn edit_history(&mut self, action: &EditAction) -> Result<()> {
        match action {
            EditAction::Erase(phases) => {
                self.history = self.history.intervene_erase(phases);
            }
            EditAction::Set {
                phase,
                frame_count,
                mask,
            } => {
                self.history = self.history.intervene_set(*phase, *frame_count, *mask)?;
            }
        }
        Ok(())
    }

    /// Process one frame: predict its phase, then store the cls impression
    /// and fold the prediction into the history. Ties break to the lowest
    /// phase id.
    pub fn push_frame(&mut self, frame: &[f32]) -> Result<Prediction> {
        let cfg = self.params.config();
        if frame.len() != cfg.frame_len() {
            return Err(Error::Input(format!(
                "push_frame: frame has {} values, expected {}",
                frame.len(),
                cfg.frame_len()
            )));
        }
        if self.buffer.len() == cfg.window {
            self.buffer.pop_front();
        }
        self.buffer.push_back(frame.to_vec());

        let t = self.frame_count;
        // duplicate-first-frame padding until the window fills
        let first = self.buffer.front().expect("buffer non-empty after push");
        let mut window: Vec<&[f32]> = Vec::with_capacity(cfg.window);
        for _ in self.buffer.len()..cfg.window {
            window.push(first.as_slice());
        }
        for f in &self.buffer {
            window.push(f.as_slice());
        }

        let impressions = self.cache.retrieve(t, &cfg.intervals);
        let out = self.params.forward(&window, &self.history, &impressions)?;
        let logits = out.logits.to_vec();
        let phase = argmax(&logits);

        self.cache.store(t, out.cls_final.to_vec())?;
        self.history.observe_phase(phase)?;
        self.predictions.push(phase);
        self.frame_count += 1;
        Ok(Prediction {
            frame: t,
            phase,
            logits,
        })
    }

    /// Recompute what the history would be if it were exactly the logged
    /// predictions folded through `observe_phase` — equal to [`history`]
    /// whenever no edits were applied.
    pub fn recompute_history(&self) -> Result<HistoryState> {
        let cfg = self.params.config();
        let mut h = HistoryState::new(cfg.num_phases, cfg.step_size)?;
        for &p in &self.predictions {
            h.observe_phase(p)?;
        }
        Ok(h)
    }
}

/// Stream a whole record through a fresh session.
pub fn replay_video(params: &ModelParams<f32>, record: &ProcedureRecord) -> Result<Vec<Prediction>> {
    counterfactual_replay(params, record, &[])
}

/// Replay with history interventions: each edit's actions are applied to the
/// live session immediately before its frame is processed, and the dynamics
/// continue from the edited state. Edit frames must be strictly increasing
/// and within the video.
pub fn counterfactual_replay(
    params: &ModelParams<f32>,
    record: &ProcedureRecord,
    edits: &[CounterfactualEdit],
) -> Result<Vec<Prediction>> {
    if record.frames.is_empty() {
        return Err(Error::Input("counterfactual_replay: empty record".into()));
    }
    for w in edits.windows(2) {
        if w[0].frame >= w[1].frame {
            return Err(Error::Input(format!(
                "counterfactual_replay: edit frames must be strictly increasing ({} then {})",
                w[0].frame, w[1].frame
            )));
        }
    }
    if let Some(last) = edits.last() {
        if last.frame >= record.frames.len() {
            return Err(Error::Input(format!(
                "counterfactual_replay: edit frame {} beyond video of {} frames",
                last.frame,
                record.frames.len()
            )));
        }
    }
    let mut session = OnlineSession::new(params)?;
    let mut next_edit = 0;
    let mut predictions = Vec::with_capacity(record.frames.len());
    for (t, frame) in record.frames.iter().enumerate() {
        while next_edit < edits.len() && edits[next_edit].frame == t {
            for action in &edits[next_edit].actions {
                session.edit_history(action)?;
            }
            next_edit += 1;
        }
        predictions.push(session.push_frame(frame)?);
    }
    Ok(predictions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MemMode, ModelConfig};
    use crate::synthdata::{sample_procedure, GeneratorConfig};

    fn test_model() -> (ModelConfig, GeneratorConfig) {
        let model = ModelConfig {
            num_phases: 4,
            window: 4,
            image_size: 8,
            patch_size: 4,
            channels: 1,
            embed_dim: 8,
            heads: 2,
            depth: 1,
            mem_mode: MemMode::Full,
            intervals: vec![2, 5],
            step_size: 5,
        };
        let gen = GeneratorConfig {
            num_phases: 4,
            skip_prob: vec![0.0; 4],
            durations: vec![(6, 12); 4],
            image_size: 8,
            channels: 1,
            noise_sigma: 0.05,
            ambiguous_pairs: vec![],
            videos_train: 1,
            videos_val: 0,
            videos_test: 0,
            seed: 3,
        };
        (model, gen)
    }

    #[test]
    fn fresh_session_is_empty() {
        let (cfg, _) = test_model();
        let params = ModelParams::init(&cfg, 8).unwrap();
        let session = OnlineSession::new(&params).unwrap();
        assert!(session.history().entries().iter().all(|e| !e.mask));
        assert!(session.cache().is_empty());
        assert_eq!(session.frame_count(), 0);
    }

    #[test]
    fn first_push_pads_and_predicts() {
        let (cfg, gen) = test_model();
        let params = ModelParams::init(&cfg, 8).unwrap();
        let rec = sample_procedure(&gen, 1).unwrap();
        let mut session = OnlineSession::new(&params).unwrap();
        let pred = session.push_frame(&rec.frames[0]).unwrap();
        assert_eq!(pred.frame, 0);
        assert!(pred.phase < cfg.num_phases);
        assert_eq!(session.cache().len(), 1);
    }

    #[test]
    fn frame_shape_is_checked() {
        let (cfg, _) = test_model();
        let params = ModelParams::init(&cfg, 8).unwrap();
        let mut session = OnlineSession::new(&params).unwrap();
        assert!(matches!(
            session.push_frame(&[0.0; 3]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn streaming_equals_replay() {
        let (cfg, gen) = test_model();
        let params = ModelParams::init(&cfg, 8).unwrap();
        let rec = sample_procedure(&gen, 2).unwrap();
        let mut session = OnlineSession::new(&params).unwrap();
        let streamed: Vec<Prediction> = rec
            .frames
            .iter()
            .map(|f| session.push_frame(f).unwrap())
            .collect();
        let replayed = replay_video(&params, &rec).unwrap();
        assert_eq!(streamed, replayed);
        assert_eq!(replayed.len(), rec.frames.len());
        // prediction-accumulated history is recomputable from the log
        assert_eq!(session.recompute_history().unwrap(), *session.history());
    }

    #[test]
    fn replay_is_deterministic() {
        let (cfg, gen) = test_model();
        let params = ModelParams::init(&cfg, 8).unwrap();
        let rec = sample_procedure(&gen, 4).unwrap();
        let a = replay_video(&params, &rec).unwrap();
        let b = replay_video(&params, &rec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn no_edits_is_identity() {
        let (cfg, gen) = test_model();
        let params = ModelParams::init(&cfg, 8).unwrap();
        let rec = sample_procedure(&gen, 5).unwrap();
        let plain = replay_video(&params, &rec).unwrap();
        let edited = counterfactual_replay(&params, &rec, &[]).unwrap();
        assert_eq!(plain, edited);
    }

    #[test]
    fn out_of_order_edits_rejected() {
        let (cfg, gen) = test_model();
        let params = ModelParams::init(&cfg, 8).unwrap();
        let rec = sample_procedure(&gen, 5).unwrap();
        let edits = vec![
            CounterfactualEdit {
                frame: 5,
                actions: vec![EditAction::Erase(vec![0])],
            },
            CounterfactualEdit {
                frame: 5,
                actions: vec![EditAction::Erase(vec![1])],
            },
        ];
        assert!(matches!(
            counterfactual_replay(&params, &rec, &edits),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn sessions_are_isolated() {
        let (cfg, gen) = test_model();
        let params = ModelParams::init(&cfg, 8).unwrap();
        let rec_a = sample_procedure(&gen, 6).unwrap();
        let rec_b = sample_procedure(&gen, 7).unwrap();
        // interleaved
        let mut sa = OnlineSession::new(&params).unwrap();
        let mut sb = OnlineSession::new(&params).unwrap();
        let n = rec_a.frames.len().min(rec_b.frames.len());
        let mut inter_a = Vec::new();
        let mut inter_b = Vec::new();
        for t in 0..n {
            inter_a.push(sa.push_frame(&rec_a.frames[t]).unwrap());
            inter_b.push(sb.push_frame(&rec_b.frames[t]).unwrap());
        }
        // separate
        let mut sa2 = OnlineSession::new(&params).unwrap();
        let mut sb2 = OnlineSession::new(&params).unwrap();
        for t in 0..n {
            assert_eq!(sa2.push_frame(&rec_a.frames[t]).unwrap(), inter_a[t]);
        }
        for t in 0..n {
            assert_eq!(sb2.push_frame(&rec_b.frames[t]).unwrap(), inter_b[t]);
        }
    }

    #[test]
    fn spurious_run_shorter_than_step_never_raises_mask() {
        let (mut cfg, gen) = test_model();
        cfg.step_size = 30;
        let params = ModelParams::init(&cfg, 8).unwrap();
        let rec = sample_procedure(&gen, 9).unwrap();
        let mut session = OnlineSession::new(&params).unwrap();
        for f in rec.frames.iter().take(10) {
            session.push_frame(f).unwrap();
        }
        // only 10 frames pushed: no phase can have accumulated 30 predictions
        assert!(session.history().entries().iter().all(|e| !e.mask));
    }
}
