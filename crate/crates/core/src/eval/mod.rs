//! Metrics, cross-validation reports, experiment runners and feature export.

mod experiments;
mod features;

pub use experiments::{lambda_sweep, run_ablation};
pub use features::{export_features, FeatureSource};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};
use crate::train::Mode;

/// Name under which the orthogonality index is labelled in reports.
pub const ORTHO_METRIC: &str = "normalized Frobenius overlap |Zc^T Zs|_F / (|Zc|_F |Zs|_F)";

/// Fraction of exact matches.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(
            "accuracy",
            format!("{} predictions for {} labels", predictions.len(), labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::invalid("accuracy", "no predictions"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `‖Zcᵀ Zs‖_F / (‖Zc‖_F ‖Zs‖_F)` for two `[N, D]` matrices; 0 when the
/// column spaces are orthogonal, at most 1.
pub fn orthogonality_index(zc: &Tensor, zs: &Tensor) -> Result<f64> {
    const OP: &str = "orthogonality_index";
    if zc.rank() != 2 {
        return Err(Error::RankMismatch { op: OP, expected: 2, shape: zc.shape().to_vec() });
    }
    if zc.shape() != zs.shape() {
        let axis = zc.shape().iter().zip(zs.shape()).position(|(a, b)| a != b).unwrap_or(0);
        return Err(Error::ShapeMismatch {
            op: OP,
            axis,
            expected: zc.shape()[axis],
            got: zs.shape().get(axis).copied().unwrap_or(0),
        });
    }
    let (n, d) = (zc.shape()[0], zc.shape()[1]);
    let norm = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let (nc, ns) = (norm(zc), norm(zs));
    if nc == 0.0 || ns == 0.0 {
        return Err(Error::invalid(OP, "zero-norm input"));
    }
    let mut cross = vec![0.0; d * d];
    gemm(d, n, d, zc.data(), true, zs.data(), false, &mut cross, 0.0);
    let overlap = cross.iter().map(|v| v * v).sum::<f64>().sqrt();
    // Rounding can push an exactly aligned pair a hair above 1.
    Ok((overlap / (nc * ns)).min(1.0))
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub accuracy: f64,
    pub ortho_index: f64,
    pub best_epoch: usize,
    pub val_loss: f64,
    /// Checkpoint path relative to the run directory.
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub dataset: String,
    pub mode: Mode,
    pub lambda: f64,
    pub seed: u64,
    pub folds: Vec<FoldResult>,
    pub mean: f64,
    /// Population standard deviation of the fold accuracies.
    pub std: f64,
    pub ortho_mean: f64,
    pub ortho_metric: String,
}

impl CvReport {
    pub fn from_folds(dataset: &str, mode: Mode, lambda: f64, seed: u64, folds: Vec<FoldResult>) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::invalid("CvReport", "no folds"));
        }
        let acc: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
        let ortho: Vec<f64> = folds.iter().map(|f| f.ortho_index).collect();
        let (mean, std) = mean_std(&acc);
        let report = CvReport {
            dataset: dataset.to_string(),
            mode,
            lambda,
            seed,
            folds,
            mean,
            std,
            ortho_mean: mean_std(&ortho).0,
            ortho_metric: ORTHO_METRIC.to_string(),
        };
        report.validate()?;
        Ok(report)
    }

    /// Accuracies in `[0, 1]` and summary statistics consistent with the folds.
    pub fn validate(&self) -> Result<()> {
        if self.folds.is_empty() {
            return Err(Error::invalid("CvReport", "no folds"));
        }
        if let Some(f) = self.folds.iter().find(|f| !(0.0..=1.0).contains(&f.accuracy)) {
            return Err(Error::invalid("CvReport", format!("fold {} accuracy {} outside [0, 1]", f.fold, f.accuracy)));
        }
        let acc: Vec<f64> = self.folds.iter().map(|f| f.accuracy).collect();
        let (mean, std) = mean_std(&acc);
        if (mean - self.mean).abs() > 1e-12 || (std - self.std).abs() > 1e-12 {
            return Err(Error::invalid("CvReport", "mean/std disagree with the fold accuracies"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: CvReport =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("malformed report JSON: {e}")))?;
        report.validate()?;
        Ok(report)
    }

    /// `fold,test_accuracy` table.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["fold", "test_accuracy"]).expect("in-memory write");
        for f in &self.folds {
            w.write_record([f.fold.to_string(), f.accuracy.to_string()]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii")
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [("report.json", self.to_json()), ("report.csv", self.to_csv())] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Aligned plain-text rendering of a report.
pub fn render_report(report: &CvReport) -> String {
    let mut out = String::new();
    out += &format!("dataset  {}\n", report.dataset);
    out += &format!("mode     {}\n", report.mode);
    out += &format!("lambda   {}\n", report.lambda);
    out += &format!("seed     {}\n", report.seed);
    out += &format!("ortho    {}\n\n", report.ortho_metric);
    out += &format!("{:>6}  {:>9}  {:>11}  {:>10}  {:>9}\n", "fold", "accuracy", "ortho_index", "best_epoch", "val_loss");
    for f in &report.folds {
        out += &format!(
            "{:>6}  {:>9.4}  {:>11.4}  {:>10}  {:>9.4}\n",
            f.fold, f.accuracy, f.ortho_index, f.best_epoch, f.val_loss
        );
    }
    out += &format!("{:>6}  {:>9.4}  {:>11.4}\n", "mean", report.mean, report.ortho_mean);
    out += &format!("{:>6}  {:>9.4}\n", "std", report.std);
    out
}
