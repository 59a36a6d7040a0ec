//! EEG trials and datasets, their on-disk layout, the synthetic
//! sparse-condition generator, and fold splitting.

mod folds;
mod io;
mod synth;

pub use folds::{sample_resting_batch, split_folds, FoldSplit};
pub use io::{load_dataset, read_trial_file, save_dataset, write_trial_file, TRIAL_MAGIC};
pub use synth::{synthesize_sparse_dataset, SparseGenerator, SynthConfig};

use std::collections::HashSet;
use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    MagicMismatch {
        path: PathBuf,
        found: Vec<u8>,
        expected: Vec<u8>,
    },

    #[error("{path}: truncated, file ends at byte offset {offset} but {expected} bytes were expected")]
    Truncated { path: PathBuf, offset: u64, expected: u64 },

    #[error("{path}: malformed header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("{path}: malformed manifest: {reason}")]
    MalformedManifest { path: PathBuf, reason: String },

    #[error("invalid dataset: {0}")]
    Invalid(String),

    #[error("resting-state pool is empty")]
    EmptyRestingPool,

    #[error("class {class} has {count} trials, not divisible into {k} folds")]
    IndivisibleClass { class: usize, count: usize, k: usize },

    #[error("need at least 3 folds for train/validation/test blocks, got {0}")]
    TooFewFolds(usize),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Task class index, or the resting-state sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Class(usize),
    Resting,
}

/// One `channels × samples` recording.
#[derive(Debug, Clone, PartialEq)]
pub struct EegTrial {
    pub trial_id: usize,
    pub label: Label,
    pub session: u32,
    pub n_channels: usize,
    pub n_samples: usize,
    /// Row-major, one row per channel.
    pub data: Vec<f64>,
}

impl EegTrial {
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.n_samples..(c + 1) * self.n_samples]
    }

    /// Class index, `None` for resting trials.
    pub fn class(&self) -> Option<usize> {
        match self.label {
            Label::Class(k) => Some(k),
            Label::Resting => None,
        }
    }

    /// `[channels, window]` slice starting at `offset`.
    pub fn window(&self, offset: usize, window: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.n_channels * window);
        for c in 0..self.n_channels {
            data.extend_from_slice(&self.channel(c)[offset..offset + window]);
        }
        Tensor::new(vec![self.n_channels, window], data).expect("window within trial")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EegDataset {
    pub name: String,
    pub sample_rate_hz: f64,
    pub n_channels: usize,
    pub trial_samples: usize,
    pub class_names: Vec<String>,
    /// Task trials.
    pub trials: Vec<EegTrial>,
    /// Resting-state trials, used only as adversarial "fake" inputs.
    pub resting: Vec<EegTrial>,
}

impl EegDataset {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn trials_of_class(&self, class: usize) -> impl Iterator<Item = &EegTrial> {
        self.trials.iter().filter(move |t| t.label == Label::Class(class))
    }

    pub fn trial(&self, trial_id: usize) -> Option<&EegTrial> {
        self.trials.iter().chain(&self.resting).find(|t| t.trial_id == trial_id)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::Invalid(msg));
        if self.n_channels == 0 || self.trial_samples == 0 {
            return bad("channel and sample counts must be positive".into());
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return bad(format!("sample rate {} is not positive", self.sample_rate_hz));
        }
        let mut ids = HashSet::new();
        let mut seen = vec![false; self.n_classes()];
        for t in self.trials.iter().chain(&self.resting) {
            if t.n_channels != self.n_channels || t.n_samples != self.trial_samples {
                return bad(format!(
                    "trial {} is {}x{}, dataset header says {}x{}",
                    t.trial_id, t.n_channels, t.n_samples, self.n_channels, self.trial_samples
                ));
            }
            if t.data.len() != t.n_channels * t.n_samples {
                return bad(format!("trial {} data length mismatch", t.trial_id));
            }
            if !ids.insert(t.trial_id) {
                return bad(format!("duplicate trial id {}", t.trial_id));
            }
        }
        for t in &self.trials {
            match t.label {
                Label::Class(k) if k < seen.len() => seen[k] = true,
                Label::Class(k) => return bad(format!("trial {} has class {k} out of range", t.trial_id)),
                Label::Resting => return bad(format!("resting trial {} listed among task trials", t.trial_id)),
            }
        }
        if let Some(t) = self.resting.iter().find(|t| t.label != Label::Resting) {
            return bad(format!("task trial {} listed among resting trials", t.trial_id));
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return bad(format!("class {k} has no trials"));
        }
        Ok(())
    }
}
