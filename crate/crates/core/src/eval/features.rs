//! Feature dumps for external embedding tools.

use std::path::Path;

use crate::data::EegDataset;
use crate::error::{Error, Result};
use crate::net::FactorModel;
use crate::train::{crop_batch, crop_offsets, infer_features, infer_logits, Mode, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    /// Flattened class-common feature map.
    Zc,
    /// Flattened class-specific feature map.
    Zs,
    /// Activations of the classifier's last hidden layer.
    ClassifierHidden,
}

impl FeatureSource {
    pub const ALL: [FeatureSource; 3] = [FeatureSource::Zc, FeatureSource::Zs, FeatureSource::ClassifierHidden];

    pub fn name(self) -> &'static str {
        match self {
            FeatureSource::Zc => "z_c",
            FeatureSource::Zs => "z_s",
            FeatureSource::ClassifierHidden => "classifier_hidden",
        }
    }

    pub fn width(self, model: &FactorModel) -> usize {
        match self {
            FeatureSource::Zc | FeatureSource::Zs => model.config.feature_len(),
            FeatureSource::ClassifierHidden => model.classifier.widths().iter().rev().nth(1).copied().unwrap_or(0),
        }
    }
}

impl std::str::FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureSource::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown feature source {s:?}, expected z_c, z_s or classifier_hidden")))
    }
}

/// Writes one CSV row per (task trial, source) in dataset order, dropout
/// off. Each vector is the mean over the trial's crops. The header is
/// `trial_id,class,source,f0,f1,...` up to the widest source; narrower rows
/// leave the trailing cells empty. Returns the number of rows written.
pub fn export_features(
    model: &FactorModel,
    ds: &EegDataset,
    cfg: &TrainConfig,
    sources: &[FeatureSource],
    path: &Path,
) -> Result<usize> {
    let width = sources.iter().map(|s| s.width(model)).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["trial_id".to_string(), "class".into(), "source".into()];
    header.extend((0..width).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;

    let window = cfg.crop_window_samples;
    let mut rows = 0;
    for trial in &ds.trials {
        let offsets = crop_offsets(trial.n_samples, window, cfg.crop_stride_samples)?;
        let x = crop_batch(offsets.iter().map(|&o| (trial, o)), window);
        let (zc, zs) = infer_features(model, Mode::Both, &x)?;
        let hidden = if sources.contains(&FeatureSource::ClassifierHidden) {
            Some(infer_logits(model, cfg.mode, &x)?.1)
        } else {
            None
        };
        for &source in sources {
            let batch = match source {
                FeatureSource::Zc => zc.as_ref(),
                FeatureSource::Zs => zs.as_ref(),
                FeatureSource::ClassifierHidden => hidden.as_ref(),
            }
            .expect("computed above");
            let n = source.width(model);
            let mut mean = vec![0.0; n];
            for row in batch.data().chunks(n) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v / offsets.len() as f64;
                }
            }
            let mut record = vec![
                trial.trial_id.to_string(),
                trial.class().expect("task trial").to_string(),
                source.name().to_string(),
            ];
            record.extend(mean.iter().map(f64::to_string));
            record.resize(3 + width, String::new());
            w.write_record(&record).map_err(|e| csv_error(path, e))?;
            rows += 1;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: csv error {other:?}", path.display())),
    }
}
