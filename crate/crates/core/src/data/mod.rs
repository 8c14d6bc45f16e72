//! Datasets, splits, file formats, synthetic data, and batch construction.

mod batch;
mod embedding;
mod manifest;
mod synth;

pub use batch::make_batches;
pub use embedding::{load_embedding_table, write_embedding_table, EmbeddingKind, EmbeddingTable};
pub use manifest::{load_dataset, write_dataset};
pub use synth::{generate_synthetic_dataset, SynthSpec};

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One EEG trial: a `[C, L]` tensor plus its labels.
#[derive(Debug, Clone)]
pub struct Trial {
    pub eeg: Tensor,
    pub subject_id: usize,
    pub class_id: u32,
    pub exemplar_id: u32,
}

/// Which half of the class split to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Seen,
    Unseen,
}

/// An in-memory dataset: trials, geometry, and the seen/unseen class split.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    trials: Vec<Trial>,
    channel_count: usize,
    window_length: usize,
    sampling_rate_hz: f64,
    seen_classes: BTreeSet<u32>,
    unseen_classes: BTreeSet<u32>,
}

impl DatasetHandle {
    /// Validates the structural invariants: disjoint splits, every trial's
    /// class in exactly one split, uniform shapes, contiguous subject ids.
    pub fn new(
        trials: Vec<Trial>,
        channel_count: usize,
        window_length: usize,
        sampling_rate_hz: f64,
        seen_classes: BTreeSet<u32>,
        unseen_classes: BTreeSet<u32>,
    ) -> Result<Self> {
        if channel_count == 0 || window_length == 0 {
            return Err(Error::data("channel count and window length must be positive"));
        }
        if !(sampling_rate_hz.is_finite() && sampling_rate_hz > 0.0) {
            return Err(Error::data(format!("invalid sampling rate {sampling_rate_hz}")));
        }
        if let Some(overlap) = seen_classes.intersection(&unseen_classes).next() {
            return Err(Error::data(format!(
                "class {overlap} appears in both seen and unseen sets"
            )));
        }
        let mut subjects = BTreeSet::new();
        for (i, t) in trials.iter().enumerate() {
            if t.eeg.shape() != [channel_count, window_length] {
                return Err(Error::data(format!(
                    "trial {i} has shape {:?}, expected [{channel_count}, {window_length}]",
                    t.eeg.shape()
                )));
            }
            if !seen_classes.contains(&t.class_id) && !unseen_classes.contains(&t.class_id) {
                return Err(Error::data(format!(
                    "trial {i} class {} is in neither split",
                    t.class_id
                )));
            }
            subjects.insert(t.subject_id);
        }
        for (want, got) in subjects.iter().enumerate() {
            if *got != want {
                return Err(Error::data(format!(
                    "subject ids must be contiguous from 0; missing {want}"
                )));
            }
        }
        Ok(DatasetHandle {
            trials,
            channel_count,
            window_length,
            sampling_rate_hz,
            seen_classes,
            unseen_classes,
        })
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn channel_count(&self) -> usize {
        self.channel_count
    }

    pub fn window_length(&self) -> usize {
        self.window_length
    }

    pub fn sampling_rate_hz(&self) -> f64 {
        self.sampling_rate_hz
    }

    pub fn seen_classes(&self) -> &BTreeSet<u32> {
        &self.seen_classes
    }

    pub fn unseen_classes(&self) -> &BTreeSet<u32> {
        &self.unseen_classes
    }

    /// Number of subjects (ids are contiguous from 0).
    pub fn n_subjects(&self) -> usize {
        self.trials.iter().map(|t| t.subject_id + 1).max().unwrap_or(0)
    }

    pub fn classes_in(&self, split: Split) -> &BTreeSet<u32> {
        match split {
            Split::Seen => &self.seen_classes,
            Split::Unseen => &self.unseen_classes,
        }
    }

    /// Indices of trials whose class belongs to `split`, in trial order.
    pub fn trial_indices(&self, split: Split) -> Vec<usize> {
        let classes = self.classes_in(split);
        self.trials
            .iter()
            .enumerate()
            .filter(|(_, t)| classes.contains(&t.class_id))
            .map(|(i, _)| i)
            .collect()
    }
}

/// A batch of trials stacked into one `[B, C, L]` tensor.
#[derive(Debug, Clone)]
pub struct EEGBatch {
    pub eeg: Tensor,
    pub subject_ids: Vec<usize>,
    pub class_ids: Vec<u32>,
    pub exemplar_ids: Vec<u32>,
}

impl EEGBatch {
    pub fn len(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subject_ids.is_empty()
    }

    /// Stack the given trials of `handle` into a batch.
    pub fn from_trials(handle: &DatasetHandle, indices: &[usize]) -> Self {
        assert!(!indices.is_empty(), "a batch needs at least one trial");
        let (c, l) = (handle.channel_count(), handle.window_length());
        let mut eeg = Tensor::zeros(&[indices.len(), c, l]);
        let mut subject_ids = Vec::with_capacity(indices.len());
        let mut class_ids = Vec::with_capacity(indices.len());
        let mut exemplar_ids = Vec::with_capacity(indices.len());
        for (b, &idx) in indices.iter().enumerate() {
            let t = &handle.trials()[idx];
            eeg.data_mut()[b * c * l..(b + 1) * c * l].copy_from_slice(t.eeg.data());
            subject_ids.push(t.subject_id);
            class_ids.push(t.class_id);
            exemplar_ids.push(t.exemplar_id);
        }
        EEGBatch { eeg, subject_ids, class_ids, exemplar_ids }
    }
}
