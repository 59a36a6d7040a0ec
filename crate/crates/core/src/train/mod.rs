//! Cropped training, the alternating discriminator/encoder update scheme,
//! crop-averaged prediction and the cross-validation driver.

mod cv;
mod epoch;

pub use cv::{derive_fold_seed, mean_orthogonality, run_log_header, select_checkpoint, train_cv, train_fold, EpochLog, FoldOutcome};
pub use epoch::{train_epoch, StepKind, StepObserver, TrainState};

use serde::{Deserialize, Serialize};

use crate::data::EegTrial;
use crate::error::{Error, Result};
use crate::net::{Branch, FactorModel, Phase};
use crate::tensor::{softmax_rows, Tape, Tensor};

/// Which encoders feed the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Full method: `C(z_c, z_s)` with adversarial and difference losses.
    Both,
    /// Class-specific encoder only: `C(z_s, z_s)`, classification loss only.
    NoFc,
    /// Class-common encoder only: `C(z_c, z_c)`, classification plus adversarial loss.
    NoFs,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Both, Mode::NoFc, Mode::NoFs];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Both => "both",
            Mode::NoFc => "no_fc",
            Mode::NoFs => "no_fs",
        }
    }

    pub fn uses_common(self) -> bool {
        self != Mode::NoFc
    }

    pub fn uses_specific(self) -> bool {
        self != Mode::NoFs
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}, expected both, no_fc or no_fs")))
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Checkpoints are only considered from the epoch after this one.
    pub checkpoint_after_epoch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub crop_window_samples: usize,
    pub crop_stride_samples: usize,
    pub sample_rate_hz: f64,
    pub seed: u64,
    pub d_steps_per_batch: usize,
    pub folds: usize,
    pub mode: Mode,
    /// Average logits instead of softmax probabilities across crops.
    pub average_logits: bool,
}

impl TrainConfig {
    /// Defaults for trials of `trial_samples` samples: full-trial crops,
    /// a 100 ms crop stride.
    pub fn new(trial_samples: usize, sample_rate_hz: f64) -> Self {
        TrainConfig {
            epochs: 400,
            checkpoint_after_epoch: 200,
            lr: 1e-3,
            weight_decay: 1e-2,
            lambda: 1.0,
            batch_size: 16,
            crop_window_samples: trial_samples,
            crop_stride_samples: ((0.1 * sample_rate_hz).round() as usize).max(1),
            sample_rate_hz,
            seed: 0,
            d_steps_per_batch: 1,
            folds: 5,
            mode: Mode::Both,
            average_logits: false,
        }
    }

    pub fn validate(&self, temporal_kernel: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.checkpoint_after_epoch >= self.epochs {
            return bad(format!(
                "checkpoint_after_epoch ({}) must be below epochs ({})",
                self.checkpoint_after_epoch, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.crop_window_samples < temporal_kernel {
            return bad(format!(
                "crop window {} is shorter than the temporal kernel {temporal_kernel}",
                self.crop_window_samples
            ));
        }
        if self.crop_stride_samples == 0 {
            return bad("crop stride must be at least 1".into());
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("learning rate must be positive and weight decay non-negative".into());
        }
        if self.folds < 3 {
            return bad(format!("need at least 3 folds, got {}", self.folds));
        }
        Ok(())
    }
}

/// Crop offsets `0, stride, 2·stride, …` while `offset + window ≤ len`.
pub fn crop_offsets(len: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if window == 0 || window > len {
        return Err(Error::invalid("make_crops", format!("window {window} does not fit a trial of {len} samples")));
    }
    if stride == 0 {
        return Err(Error::invalid("make_crops", "stride must be at least 1"));
    }
    Ok((0..=len - window).step_by(stride).collect())
}

/// `[channels, window]` crops of one trial.
pub fn make_crops(trial: &EegTrial, window: usize, stride: usize) -> Result<Vec<Tensor>> {
    Ok(crop_offsets(trial.n_samples, window, stride)?
        .into_iter()
        .map(|o| trial.window(o, window))
        .collect())
}

/// Stacks `(trial, offset)` crops into a `[B, 1, channels, window]` batch.
pub fn crop_batch<'t>(crops: impl IntoIterator<Item = (&'t EegTrial, usize)>, window: usize) -> Tensor {
    let mut data = Vec::new();
    let mut b = 0;
    let mut channels = 0;
    for (trial, offset) in crops {
        channels = trial.n_channels;
        for c in 0..trial.n_channels {
            data.extend_from_slice(&trial.channel(c)[offset..offset + window]);
        }
        b += 1;
    }
    Tensor::new(vec![b, 1, channels, window], data).expect("non-empty crop batch")
}

/// Inference-mode features of a `[B, 1, C, W]` batch under `mode`:
/// `(z_c, z_s)`, each `None` when the mode skips that encoder.
pub fn infer_features(model: &FactorModel, mode: Mode, x: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &[]);
    let input = tape.input(x.clone());
    let mut phase = Phase::Eval;
    let zc = if mode.uses_common() {
        let z = bound.encode(&mut tape, Branch::Common, input, &mut phase)?;
        Some(tape.value(z).clone())
    } else {
        None
    };
    let zs = if mode.uses_specific() {
        let z = bound.encode(&mut tape, Branch::Specific, input, &mut phase)?;
        Some(tape.value(z).clone())
    } else {
        None
    };
    Ok((zc, zs))
}

/// Classifier input pair for `mode`; the surviving map is duplicated when
/// one encoder is dropped so the classifier keeps its width.
pub(crate) fn classifier_pair<T: Copy>(mode: Mode, zc: Option<T>, zs: Option<T>) -> (T, T) {
    match mode {
        Mode::Both => (zc.expect("z_c computed"), zs.expect("z_s computed")),
        Mode::NoFc => {
            let z = zs.expect("z_s computed");
            (z, z)
        }
        Mode::NoFs => {
            let z = zc.expect("z_c computed");
            (z, z)
        }
    }
}

/// Inference-mode logits `[B, classes]` and last-hidden activations of a
/// `[B, 1, C, W]` batch.
pub fn infer_logits(model: &FactorModel, mode: Mode, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &[]);
    let input = tape.input(x.clone());
    let mut phase = Phase::Eval;
    let zc = match mode.uses_common() {
        true => Some(bound.encode(&mut tape, Branch::Common, input, &mut phase)?),
        false => None,
    };
    let zs = match mode.uses_specific() {
        true => Some(bound.encode(&mut tape, Branch::Specific, input, &mut phase)?),
        false => None,
    };
    let (a, b) = classifier_pair(mode, zc, zs);
    let (logits, hidden) = bound.classify_with_hidden(&mut tape, a, b, &mut phase)?;
    Ok((tape.value(logits).clone(), tape.value(hidden).clone()))
}

const INFER_CHUNK: usize = 32;

/// Per-crop logits of one trial, `[n_crops, classes]` row-major.
pub fn trial_crop_logits(model: &FactorModel, trial: &EegTrial, cfg: &TrainConfig) -> Result<Vec<Vec<f64>>> {
    let window = cfg.crop_window_samples;
    let offsets = crop_offsets(trial.n_samples, window, cfg.crop_stride_samples)?;
    let classes = model.config.n_classes;
    let mut rows = Vec::with_capacity(offsets.len());
    for chunk in offsets.chunks(INFER_CHUNK) {
        let x = crop_batch(chunk.iter().map(|&o| (trial, o)), window);
        let (logits, _) = infer_logits(model, cfg.mode, &x)?;
        rows.extend(logits.data().chunks(classes).map(<[f64]>::to_vec));
    }
    Ok(rows)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Class predicted from per-crop logits: mean of softmax probabilities (or
/// of the raw logits), then argmax.
pub fn average_crop_predictions(crop_logits: &[Vec<f64>], average_logits: bool) -> Result<usize> {
    let Some(first) = crop_logits.first() else {
        return Err(Error::invalid("predict_trial", "no crops"));
    };
    let width = first.len();
    let mut mean = vec![0.0; width];
    for row in crop_logits {
        if row.len() != width {
            return Err(Error::invalid("predict_trial", "crops disagree on class count"));
        }
        let values = if average_logits { row.clone() } else { softmax_rows(row, width) };
        for (m, v) in mean.iter_mut().zip(values) {
            *m += v;
        }
    }
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("crop predictions".into()));
    }
    Ok(argmax(&mean))
}

/// Crop-averaged class prediction for one trial, dropout off.
pub fn predict_trial(model: &FactorModel, trial: &EegTrial, cfg: &TrainConfig) -> Result<usize> {
    average_crop_predictions(&trial_crop_logits(model, trial, cfg)?, cfg.average_logits)
}

/// Mean cross-entropy of raw logit rows against labels.
pub(crate) fn mean_cross_entropy(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.chunks(classes).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}
