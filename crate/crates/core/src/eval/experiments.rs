//! Ablation and λ-sweep runners built on [`train_cv`].

use std::path::Path;

use super::CvReport;
use crate::data::EegDataset;
use crate::error::{Error, Result};
use crate::net::NetConfig;
use crate::train::{train_cv, EpochLog, Mode, TrainConfig};

/// Cross-validates `mode`; results go to `<out>/<mode>/` when `out` is set.
pub fn run_ablation(
    ds: &EegDataset,
    net: &NetConfig,
    cfg: &TrainConfig,
    mode: Mode,
    out: Option<&Path>,
    progress: &mut dyn FnMut(usize, &EpochLog),
) -> Result<CvReport> {
    let cfg = TrainConfig { mode, ..cfg.clone() };
    let dir = out.map(|o| o.join(mode.name()));
    train_cv(ds, net, &cfg, dir.as_deref(), progress).map(|(report, _)| report)
}

/// One cross-validation per λ with the same base seed; results go to
/// `<out>/lambda_<λ>/` when `out` is set. All λ are checked before any
/// training starts.
pub fn lambda_sweep(
    ds: &EegDataset,
    net: &NetConfig,
    cfg: &TrainConfig,
    lambdas: &[f64],
    out: Option<&Path>,
    progress: &mut dyn FnMut(usize, &EpochLog),
) -> Result<Vec<CvReport>> {
    if let Some(l) = lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(Error::Config(format!("lambda must be finite and non-negative, got {l}")));
    }
    lambdas
        .iter()
        .map(|&lambda| {
            let cfg = TrainConfig { lambda, ..cfg.clone() };
            let dir = out.map(|o| o.join(format!("lambda_{lambda}")));
            train_cv(ds, net, &cfg, dir.as_deref(), progress).map(|(report, _)| report)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_lambda_rejected_before_training() {
        let ds = EegDataset {
            name: "empty".into(),
            sample_rate_hz: 250.0,
            n_channels: 1,
            trial_samples: 1,
            class_names: vec![],
            trials: vec![],
            resting: vec![],
        };
        let net = NetConfig::reference();
        let cfg = TrainConfig::new(997, 250.0);
        let err = lambda_sweep(&ds, &net, &cfg, &[0.0, -0.5], None, &mut |_, _| {}).unwrap_err();
        assert!(matches!(err, Error::Config(m) if m.contains("-0.5")));
    }
}
