//! The two memory stores.
//!
//! **Long-term history** keeps one entry per phase class: a one-hot identity,
//! a raw accumulated frame count, a step count obtained by floor-dividing the
//! frame count by a step size, and a binary presence mask. Step filtering
//! discards sub-step variation, so a phase observed fewer than `step_size`
//! frames in total never raises its mask — brief spurious segments leave no
//! trace.
//!
//! **Short-term impressions** cache the final cls vector produced for each
//! processed frame, retrieved later at fixed backward offsets.
//!
//! Both stores are rule-based and inspectable, which is what makes
//! counterfactual edits ([`HistoryState::intervene_erase`],
//! [`HistoryState::intervene_set`]) meaningful.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::real::Real;

/// Default history step size.
pub const DEFAULT_STEP_SIZE: usize = 30;

/// Default impression retrieval offsets.
pub const DEFAULT_INTERVALS: [usize; 8] = [64, 128, 192, 256, 320, 384, 448, 512];

/// floor(frame_count / step_size); rejects a zero step size.
pub fn step_filter(frame_count: u64, step_size: usize) -> Result<u64> {
    if step_size == 0 {
        return Err(Error::Config("step_filter: step_size must be >= 1".into()));
    }
    Ok(frame_count / step_size as u64)
}

/// One phase class's accumulated record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistoryEntry {
    pub phase_id: usize,
    /// Raw observed frames for this phase (accumulated across segments).
    pub frame_count: u64,
    /// `floor(frame_count / step_size)`, kept in sync by every operation.
    pub step_count: u64,
    /// Whether the phase counts as having presented in this video.
    pub mask: bool,
}

/// Long-term history: exactly one [`HistoryEntry`] per phase class, ordered
/// by phase id. Value semantics: clone freely, mutate your own copy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistoryState {
    entries: Vec<HistoryEntry>,
    step_size: usize,
}

impl HistoryState {
    pub fn new(num_phases: usize, step_size: usize) -> Result<Self> {
        if num_phases == 0 {
            return Err(Error::Config("history: need at least one phase class".into()));
        }
        if step_size == 0 {
            return Err(Error::Config("history: step_size must be >= 1".into()));
        }
        Ok(HistoryState {
            entries: (0..num_phases)
                .map(|phase_id| HistoryEntry {
                    phase_id,
                    frame_count: 0,
                    step_count: 0,
                    mask: false,
                })
                .collect(),
            step_size,
        })
    }

    pub fn num_phases(&self) -> usize {
        self.entries.len()
    }

    pub fn step_size(&self) -> usize {
        self.step_size
    }

    pub fn entries(&self) -> &[HistoryEntry] {
        &self.entries
    }

    pub fn entry(&self, phase: usize) -> Result<&HistoryEntry> {
        self.entries
            .get(phase)
            .ok_or_else(|| Error::Input(format!("phase {phase} out of range")))
    }

    /// Record one observed frame of `phase`. The mask flips to 1 exactly when
    /// the step count reaches 1 and never auto-clears afterwards; only
    /// [`intervene_erase`](Self::intervene_erase) can lower it.
    pub fn observe_phase(&mut self, phase: usize) -> Result<()> {
        let step_size = self.step_size;
        let entry = self
            .entries
            .get_mut(phase)
            .ok_or_else(|| Error::Input(format!("observe_phase: phase {phase} out of range")))?;
        entry.frame_count += 1;
        entry.step_count = step_filter(entry.frame_count, step_size)?;
        if entry.step_count >= 1 {
            entry.mask = true;
        }
        Ok(())
    }

    /// The row layout consumed by the model's history embedding and by
    /// checkpoint-compatible tooling: row `i` is
    /// `[one_hot(i) .. , step_count_i, mask_i]`, giving a `C x (C+2)` matrix.
    pub fn entry_matrix(&self) -> Vec<Vec<f64>> {
        let c = self.entries.len();
        self.entries
            .iter()
            .map(|e| {
                let mut row = vec![0.0; c + 2];
                row[e.phase_id] = 1.0;
                row[c] = e.step_count as f64;
                row[c + 1] = if e.mask { 1.0 } else { 0.0 };
                row
            })
            .collect()
    }

    /// Copy with the listed phases' masks cleared; counts stay untouched.
    /// Idempotent; out-of-range ids are ignored.
    pub fn intervene_erase(&self, phases: &[usize]) -> HistoryState {
        let mut out = self.clone();
        for &p in phases {
            if let Some(e) = out.entries.get_mut(p) {
                e.mask = false;
            }
        }
        out
    }

    /// Copy with one entry overwritten; the step count is recomputed from the
    /// written frame count. Used to substitute ground-truth history.
    pub fn intervene_set(&self, phase: usize, frame_count: u64, mask: bool) -> Result<HistoryState> {
        let mut out = self.clone();
        let step_size = out.step_size;
        let entry = out
            .entries
            .get_mut(phase)
            .ok_or_else(|| Error::Input(format!("intervene_set: phase {phase} out of range")))?;
        entry.frame_count = frame_count;
        entry.step_count = step_filter(frame_count, step_size)?;
        entry.mask = mask;
        Ok(out)
    }
}

/// Short-term impression cache: frame index -> stored cls vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ImpressionCache<F: Real> {
    dim: usize,
    slots: BTreeMap<usize, Vec<F>>,
}

impl<F: Real> ImpressionCache<F> {
    pub fn new(dim: usize) -> Self {
        ImpressionCache {
            dim,
            slots: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, frame: usize) -> Option<&[F]> {
        self.slots.get(&frame).map(|v| v.as_slice())
    }

    /// Store a cls vector at `frame`; last write wins.
    pub fn store(&mut self, frame: usize, cls: Vec<F>) -> Result<()> {
        if cls.len() != self.dim {
            return Err(Error::Input(format!(
                "impression store: vector has dimension {}, cache expects {}",
                cls.len(),
                self.dim
            )));
        }
        self.slots.insert(frame, cls);
        Ok(())
    }

    /// One vector per offset, in offset order: the slot at
    /// `current_frame - offset`, or the zero vector when the index would be
    /// negative or the slot was never written (cold start).
    pub fn retrieve(&self, current_frame: usize, intervals: &[usize]) -> Vec<Vec<F>> {
        intervals
            .iter()
            .map(|&offset| {
                current_frame
                    .checked_sub(offset)
                    .and_then(|idx| self.slots.get(&idx).cloned())
                    .unwrap_or_else(|| vec![F::zero(); self.dim])
            })
            .collect()
    }
}

/// Validate an interval sequence: non-empty and strictly increasing.
pub fn validate_intervals(intervals: &[usize]) -> Result<()> {
    if intervals.is_empty() {
        return Err(Error::Config("intervals must be non-empty".into()));
    }
    if intervals[0] == 0 {
        return Err(Error::Config("intervals must be positive offsets".into()));
    }
    if intervals.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "intervals must be strictly increasing, got {intervals:?}"
        )));
    }
    Ok(())
}
