//! k-fold cross-validation: per-fold training, checkpoint selection on
//! validation loss, test accuracy and run logs.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{crop_batch, crop_offsets, infer_features, infer_logits, mean_cross_entropy, predict_trial};
use super::{train_epoch, Mode, TrainConfig, TrainState};
use crate::data::{split_folds, DataError, EegDataset, EegTrial, FoldSplit};
use crate::error::{Error, Result};
use crate::eval::{accuracy, orthogonality_index, CvReport, FoldResult};
use crate::net::{save_checkpoint, FactorModel, NetConfig};
use crate::tensor::Tensor;

/// One line of a run log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_adv_d: f64,
    pub l_adv_fc: f64,
    pub l_diff: f64,
    pub l_all: f64,
    pub val_loss: f64,
}

/// Everything one fold produces.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub result: FoldResult,
    pub log: Vec<EpochLog>,
    /// Parameters at the selected epoch.
    pub best_model: FactorModel,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of fold `fold` under base seed `base`. Mixed rather than added so
/// that fold 1 of seed 0 and fold 0 of seed 1 do not coincide.
pub fn derive_fold_seed(base: u64, fold: usize) -> u64 {
    splitmix64(splitmix64(base) ^ fold as u64)
}

const TRAIN_STREAM: u64 = 0x7472_6169_6e00_0000;

/// Index of the epoch with the lowest validation loss among epochs
/// `> after`; the earliest such epoch wins ties.
pub fn select_checkpoint(log: &[EpochLog], after: usize) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, e) in log.iter().enumerate() {
        if e.epoch > after && best.is_none_or(|b| e.val_loss < log[b].val_loss) {
            best = Some(i);
        }
    }
    best
}

fn lookup<'d>(by_id: &HashMap<usize, &'d EegTrial>, ids: &[usize]) -> Result<Vec<&'d EegTrial>> {
    ids.iter()
        .map(|id| {
            by_id
                .get(id)
                .copied()
                .ok_or_else(|| DataError::Invalid(format!("trial {id} is not a task trial")).into())
        })
        .collect()
}

/// Mean classification loss over every crop of `trials`, dropout off.
fn validation_loss(model: &FactorModel, trials: &[&EegTrial], cfg: &TrainConfig) -> Result<f64> {
    let window = cfg.crop_window_samples;
    let mut crops = Vec::new();
    for t in trials {
        for o in crop_offsets(t.n_samples, window, cfg.crop_stride_samples)? {
            crops.push((*t, o));
        }
    }
    let classes = model.config.n_classes;
    let mut total = 0.0;
    for chunk in crops.chunks(64) {
        let x = crop_batch(chunk.iter().copied(), window);
        let (logits, _) = infer_logits(model, cfg.mode, &x)?;
        let labels: Vec<usize> = chunk.iter().map(|(t, _)| t.class().expect("task trial")).collect();
        total += mean_cross_entropy(logits.data(), classes, &labels) * chunk.len() as f64;
    }
    Ok(total / crops.len() as f64)
}

/// Mean orthogonality index of the per-crop `F × T` feature maps of both
/// encoders over every crop of `trials`.
pub fn mean_orthogonality(model: &FactorModel, trials: &[&EegTrial], cfg: &TrainConfig) -> Result<f64> {
    let window = cfg.crop_window_samples;
    let (f, t) = (model.config.n_feature_maps, model.config.feature_time());
    let mut sum = 0.0;
    let mut n = 0usize;
    for trial in trials {
        let offsets = crop_offsets(trial.n_samples, window, cfg.crop_stride_samples)?;
        let x = crop_batch(offsets.iter().map(|&o| (*trial, o)), window);
        let (zc, zs) = infer_features(model, Mode::Both, &x)?;
        let (zc, zs) = (zc.expect("both encoders"), zs.expect("both encoders"));
        for (a, b) in zc.data().chunks(f * t).zip(zs.data().chunks(f * t)) {
            let a = Tensor::new(vec![f, t], a.to_vec())?;
            let b = Tensor::new(vec![f, t], b.to_vec())?;
            sum += orthogonality_index(&a, &b)?;
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

fn check_compatible(ds: &EegDataset, net: &NetConfig, cfg: &TrainConfig) -> Result<()> {
    net.validate()?;
    cfg.validate(net.temporal_kernel)?;
    ds.validate()?;
    let pairs = [
        ("dataset channels vs network channels", ds.n_channels, net.n_eeg_channels),
        ("dataset classes vs network classes", ds.n_classes(), net.n_classes),
        ("crop window vs network input length", cfg.crop_window_samples, net.n_timesamples),
    ];
    for (what, a, b) in pairs {
        if a != b {
            return Err(Error::Config(format!("{what}: {a} != {b}")));
        }
    }
    if cfg.crop_window_samples > ds.trial_samples {
        return Err(Error::Config(format!(
            "crop window {} exceeds trial length {}",
            cfg.crop_window_samples, ds.trial_samples
        )));
    }
    if ds.resting.is_empty() {
        return Err(DataError::EmptyRestingPool.into());
    }
    Ok(())
}

/// Trains one fold from a fresh model and evaluates its selected checkpoint.
pub fn train_fold(
    ds: &EegDataset,
    split: &FoldSplit,
    net: &NetConfig,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(usize, &EpochLog),
) -> Result<FoldOutcome> {
    check_compatible(ds, net, cfg)?;
    let seed = derive_fold_seed(cfg.seed, split.fold);
    let model = FactorModel::build(net.clone(), seed)?;
    let mut state = TrainState::new(model, cfg, seed ^ TRAIN_STREAM);
    let by_id: HashMap<usize, &EegTrial> = ds.trials.iter().map(|t| (t.trial_id, t)).collect();
    let val = lookup(&by_id, &split.val)?;
    let test = lookup(&by_id, &split.test)?;

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, FactorModel)> = None;
    for epoch in 1..=cfg.epochs {
        let rec = train_epoch(&mut state, ds, &split.train, cfg, &mut ())?;
        let val_loss = validation_loss(&state.model, &val, cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        let entry = EpochLog {
            epoch,
            l_cls: rec.l_cls,
            l_adv_d: rec.l_adv_d,
            l_adv_fc: rec.l_adv_fc,
            l_diff: rec.l_diff,
            l_all: rec.l_all,
            val_loss,
        };
        progress(split.fold, &entry);
        log.push(entry);
        if epoch > cfg.checkpoint_after_epoch && best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, state.model.clone()));
        }
    }
    let (val_loss, best_model) = best.expect("checkpoint_after_epoch < epochs");
    let best_epoch = log[select_checkpoint(&log, cfg.checkpoint_after_epoch).expect("some epoch eligible")].epoch;

    let mut predictions = Vec::with_capacity(test.len());
    for t in &test {
        predictions.push(predict_trial(&best_model, t, cfg)?);
    }
    let labels: Vec<usize> = test.iter().map(|t| t.class().expect("task trial")).collect();
    let result = FoldResult {
        fold: split.fold,
        accuracy: accuracy(&predictions, &labels)?,
        ortho_index: mean_orthogonality(&best_model, &test, cfg)?,
        best_epoch,
        val_loss,
        checkpoint: None,
    };
    Ok(FoldOutcome { result, log, best_model })
}

/// First run-log line: network widths and a note on the discriminator input.
pub fn run_log_header(net: &NetConfig) -> serde_json::Value {
    serde_json::json!({
        "architecture": {
            "feature_maps": [net.n_feature_maps, net.feature_time()],
            "classifier_widths": net.classifier_widths(),
            "discriminator_widths": net.discriminator_widths(),
            "note": format!(
                "discriminator input is the flattened z_c ({}); 5120 at the reference geometry \
                 applies to the classifier input, the concatenation of z_c and z_s",
                net.feature_len()
            ),
        }
    })
}

fn write_fold(out: &Path, net: &NetConfig, outcome: &mut FoldOutcome) -> Result<()> {
    let rel = format!("fold{}", outcome.result.fold);
    let dir = out.join(&rel);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let ckpt = format!("{rel}/checkpoint.fbci");
    save_checkpoint(&outcome.best_model, &out.join(&ckpt))?;
    outcome.result.checkpoint = Some(ckpt);

    let path = dir.join("run_log.jsonl");
    let mut text = serde_json::to_string(&run_log_header(net)).expect("json") + "\n";
    for e in &outcome.log {
        text += &serde_json::to_string(e).expect("json");
        text.push('\n');
    }
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))
}

/// Full cross-validation run. With `out`, writes `fold<k>/run_log.jsonl`,
/// `fold<k>/checkpoint.fbci`, `report.json` and `report.csv` under it.
pub fn train_cv(
    ds: &EegDataset,
    net: &NetConfig,
    cfg: &TrainConfig,
    out: Option<&Path>,
    progress: &mut dyn FnMut(usize, &EpochLog),
) -> Result<(CvReport, Vec<FoldOutcome>)> {
    check_compatible(ds, net, cfg)?;
    let splits = split_folds(ds, cfg.folds, cfg.seed)?;
    let mut outcomes = Vec::with_capacity(splits.len());
    for split in &splits {
        let mut outcome = train_fold(ds, split, net, cfg, progress)?;
        if let Some(out) = out {
            write_fold(out, net, &mut outcome)?;
        }
        outcomes.push(outcome);
    }
    let report = CvReport::from_folds(
        &ds.name,
        cfg.mode,
        cfg.lambda,
        cfg.seed,
        outcomes.iter().map(|o| o.result.clone()).collect(),
    )?;
    if let Some(out) = out {
        report.write(out)?;
    }
    Ok((report, outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_sparse_dataset, SynthConfig};

    fn log(vals: &[f64]) -> Vec<EpochLog> {
        vals.iter()
            .enumerate()
            .map(|(i, &v)| EpochLog {
                epoch: i + 1,
                l_cls: 0.0,
                l_adv_d: 0.0,
                l_adv_fc: 0.0,
                l_diff: 0.0,
                l_all: 0.0,
                val_loss: v,
            })
            .collect()
    }

    #[test]
    fn checkpoint_selection() {
        let l = log(&[0.1, 0.9, 0.5, 0.3, 0.3, 0.4]);
        assert_eq!(select_checkpoint(&l, 2), Some(3));
        assert_eq!(select_checkpoint(&l, 0), Some(0));
        assert_eq!(select_checkpoint(&l, 6), None);
    }

    #[test]
    fn fold_seeds_distinct() {
        let mut seen = std::collections::HashSet::new();
        for base in 0..4 {
            for fold in 0..5 {
                assert!(seen.insert(derive_fold_seed(base, fold)));
            }
        }
    }

    #[test]
    fn small_cv_run() {
        let ds = synthesize_sparse_dataset(&SynthConfig {
            n_classes: 2,
            trials_per_class: 5,
            n_resting: 2,
            n_channels: 3,
            trial_samples: 36,
            seed: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        let net = NetConfig {
            n_eeg_channels: 3,
            n_timesamples: 32,
            n_classes: 2,
            n_feature_maps: 3,
            temporal_kernel: 5,
            spatial_kernel: 3,
            pool_kernel: 6,
            pool_stride: 3,
            dropout_p: 0.3,
        };
        let cfg = TrainConfig {
            epochs: 4,
            checkpoint_after_epoch: 1,
            batch_size: 4,
            crop_window_samples: 32,
            crop_stride_samples: 2,
            seed: 3,
            ..TrainConfig::new(36, 250.0)
        };
        let dir = tempfile::tempdir().unwrap();
        let (report, outcomes) = train_cv(&ds, &net, &cfg, Some(dir.path()), &mut |_, _| {}).unwrap();
        assert_eq!(report.folds.len(), 5);
        for o in &outcomes {
            let eligible: Vec<_> = o.log.iter().filter(|e| e.epoch > 1).collect();
            let chosen = o.log.iter().find(|e| e.epoch == o.result.best_epoch).unwrap();
            assert!(eligible.iter().all(|e| chosen.val_loss <= e.val_loss));
            assert!(o.result.best_epoch > 1);
            assert!((0.0..=1.0).contains(&o.result.ortho_index));
        }
        let text = fs::read_to_string(dir.path().join("fold0/run_log.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().next().unwrap().contains("architecture"));
        assert!(dir.path().join("fold4/checkpoint.fbci").exists());
        assert!(dir.path().join("report.json").exists());

        let bad = TrainConfig { crop_window_samples: 30, ..cfg };
        assert!(matches!(train_cv(&ds, &net, &bad, None, &mut |_, _| {}), Err(Error::Config(_))));
    }
}
