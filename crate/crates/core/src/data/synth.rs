//! Synthetic "sparse condition" EEG.
//!
//! Every task trial on the shared channel subset is
//! `w_c · (common(t) + α · specific_k(t)) + noise`, where `common` is three
//! 8–30 Hz sinusoids with fresh random phases per trial and `specific_k` is
//! the same three components shifted in frequency and locked to class-`k`
//! phases. Channels outside the subset carry noise only. Resting trials use
//! `α = 0`. Classes therefore differ only in temporal fine structure on one
//! spatial pattern.

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use super::{DataError, EegDataset, EegTrial, Label};
use crate::SeededRng;

const N_COMPONENTS: usize = 3;
const BAND_LO_HZ: f64 = 8.0;
const BAND_HI_HZ: f64 = 30.0;
const MAX_SHIFT_HZ: f64 = 1.5;
const CLASS_NAMES: [&str; 6] = ["left", "right", "up", "down", "forward", "backward"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub trials_per_class: usize,
    pub n_resting: usize,
    pub n_channels: usize,
    pub trial_samples: usize,
    pub sample_rate_hz: f64,
    pub common_amplitude: f64,
    /// α, scale of the class-specific component.
    pub specific_amplitude: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_classes: 6,
            trials_per_class: 50,
            n_resting: 50,
            n_channels: 24,
            trial_samples: 997,
            sample_rate_hz: 250.0,
            common_amplitude: 1.0,
            specific_amplitude: 0.3,
            noise_std: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Invalid(m));
        if self.n_classes == 0 || self.trials_per_class == 0 || self.n_resting == 0 {
            return bad("class, trial and resting counts must be at least 1".into());
        }
        if self.n_channels == 0 || self.trial_samples == 0 {
            return bad("channel and sample counts must be at least 1".into());
        }
        if !(self.sample_rate_hz.is_finite() && band_hi(self.sample_rate_hz) - BAND_LO_HZ >= 2.0 * MAX_SHIFT_HZ) {
            return bad(format!(
                "sample rate {} Hz cannot represent the {BAND_LO_HZ}-{BAND_HI_HZ} Hz band",
                self.sample_rate_hz
            ));
        }
        for (name, v) in [
            ("common_amplitude", self.common_amplitude),
            ("specific_amplitude", self.specific_amplitude),
            ("noise_std", self.noise_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

fn band_hi(sample_rate_hz: f64) -> f64 {
    BAND_HI_HZ.min(0.45 * sample_rate_hz)
}

/// Structural parameters shared by every trial of one synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGenerator {
    pub config: SynthConfig,
    /// Indices of the channels carrying signal, ascending.
    pub shared_channels: Vec<usize>,
    /// Spatial weight of each shared channel.
    pub channel_weights: Vec<f64>,
    /// Common-component frequencies in Hz.
    pub frequencies: [f64; N_COMPONENTS],
    /// Per-class frequency shifts in Hz.
    pub class_shifts: Vec<[f64; N_COMPONENTS]>,
    /// Per-class phases in radians.
    pub class_phases: Vec<[f64; N_COMPONENTS]>,
    rng: SeededRng,
}

impl SparseGenerator {
    pub fn new(config: SynthConfig) -> Result<Self, DataError> {
        config.validate()?;
        let mut rng = SeededRng::seed_from_u64(config.seed);
        let n_shared = config.n_channels.div_ceil(3);
        let mut order: Vec<usize> = (0..config.n_channels).collect();
        order.shuffle(&mut rng);
        let mut shared_channels = order[..n_shared].to_vec();
        shared_channels.sort_unstable();
        let channel_weights = (0..n_shared).map(|_| rng.random_range(0.5..1.0)).collect();
        let (lo, hi) = (BAND_LO_HZ + MAX_SHIFT_HZ, band_hi(config.sample_rate_hz) - MAX_SHIFT_HZ);
        let mut frequencies = [0.0; N_COMPONENTS];
        for f in &mut frequencies {
            *f = rng.random_range(lo..=hi);
        }
        let mut class_shifts = Vec::with_capacity(config.n_classes);
        let mut class_phases = Vec::with_capacity(config.n_classes);
        for _ in 0..config.n_classes {
            let mut shift = [0.0; N_COMPONENTS];
            let mut phase = [0.0; N_COMPONENTS];
            for j in 0..N_COMPONENTS {
                shift[j] = rng.random_range(-MAX_SHIFT_HZ..=MAX_SHIFT_HZ);
                phase[j] = rng.random_range(0.0..TAU);
            }
            class_shifts.push(shift);
            class_phases.push(phase);
        }
        Ok(SparseGenerator {
            config,
            shared_channels,
            channel_weights,
            frequencies,
            class_shifts,
            class_phases,
            rng,
        })
    }

    /// Per-component amplitude; three random-phase sinusoids of this
    /// amplitude have total RMS `common_amplitude`.
    fn component_amplitude(&self) -> f64 {
        self.config.common_amplitude * (2.0 / N_COMPONENTS as f64).sqrt()
    }

    /// Noise-free class-specific waveform of class `k` (before `α` and
    /// spatial weighting).
    pub fn specific_waveform(&self, k: usize) -> Vec<f64> {
        let a = self.component_amplitude();
        let fs = self.config.sample_rate_hz;
        (0..self.config.trial_samples)
            .map(|t| {
                let time = t as f64 / fs;
                (0..N_COMPONENTS)
                    .map(|j| a * (TAU * (self.frequencies[j] + self.class_shifts[k][j]) * time + self.class_phases[k][j]).sin())
                    .sum()
            })
            .collect()
    }

    /// Draws the next trial. Random draws per trial do not depend on `α`,
    /// so two generators that differ only in `α` produce the same common
    /// component and noise.
    pub fn next_trial(&mut self, label: Label, trial_id: usize) -> EegTrial {
        let cfg = &self.config;
        let (channels, samples, fs) = (cfg.n_channels, cfg.trial_samples, cfg.sample_rate_hz);
        let a = self.component_amplitude();
        let mut phases = [0.0; N_COMPONENTS];
        for p in &mut phases {
            *p = self.rng.random_range(0.0..TAU);
        }
        let mut source: Vec<f64> = (0..samples)
            .map(|t| {
                let time = t as f64 / fs;
                (0..N_COMPONENTS)
                    .map(|j| a * (TAU * self.frequencies[j] * time + phases[j]).sin())
                    .sum()
            })
            .collect();
        if let Label::Class(k) = label {
            let alpha = cfg.specific_amplitude;
            for (s, sp) in source.iter_mut().zip(self.specific_waveform(k)) {
                *s += alpha * sp;
            }
        }
        let mut data = vec![0.0; channels * samples];
        for (&c, &w) in self.shared_channels.iter().zip(&self.channel_weights) {
            for (x, s) in data[c * samples..(c + 1) * samples].iter_mut().zip(&source) {
                *x = w * s;
            }
        }
        let noise_std = self.config.noise_std;
        for x in &mut data {
            let z: f64 = self.rng.sample(StandardNormal);
            // Stored as f32 on disk; quantize now so save/load is exact.
            *x = (*x + noise_std * z) as f32 as f64;
        }
        EegTrial {
            trial_id,
            label,
            session: 1,
            n_channels: channels,
            n_samples: samples,
            data,
        }
    }
}

/// Builds the full dataset: `trials_per_class` trials of each class in
/// class order, then `n_resting` resting trials. Trial ids count up from 0.
pub fn synthesize_sparse_dataset(cfg: &SynthConfig) -> Result<EegDataset, DataError> {
    let mut generator = SparseGenerator::new(cfg.clone())?;
    let mut trials = Vec::with_capacity(cfg.n_classes * cfg.trials_per_class);
    let mut id = 0;
    for k in 0..cfg.n_classes {
        for _ in 0..cfg.trials_per_class {
            trials.push(generator.next_trial(Label::Class(k), id));
            id += 1;
        }
    }
    let mut resting = Vec::with_capacity(cfg.n_resting);
    for _ in 0..cfg.n_resting {
        resting.push(generator.next_trial(Label::Resting, id));
        id += 1;
    }
    let class_names = (0..cfg.n_classes)
        .map(|k| match CLASS_NAMES.get(k) {
            Some(name) if cfg.n_classes <= CLASS_NAMES.len() => (*name).to_string(),
            _ => format!("class{k}"),
        })
        .collect();
    Ok(EegDataset {
        name: format!("synthetic-sparse-seed{}", cfg.seed),
        sample_rate_hz: cfg.sample_rate_hz,
        n_channels: cfg.n_channels,
        trial_samples: cfg.trial_samples,
        class_names,
        trials,
        resting,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_classes: 3,
            trials_per_class: 4,
            n_resting: 2,
            n_channels: 6,
            trial_samples: 100,
            seed: 5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_counts() {
        let ds = synthesize_sparse_dataset(&SynthConfig::default()).unwrap();
        assert_eq!(ds.trials.len(), 300);
        assert_eq!(ds.resting.len(), 50);
        assert!(ds.trials.iter().chain(&ds.resting).all(|t| t.n_channels == 24 && t.n_samples == 997));
        assert_eq!(ds.class_names, CLASS_NAMES);
        ds.validate().unwrap();
    }

    #[test]
    fn deterministic() {
        assert_eq!(synthesize_sparse_dataset(&small()).unwrap(), synthesize_sparse_dataset(&small()).unwrap());
        let other = SynthConfig { seed: 6, ..small() };
        assert_ne!(synthesize_sparse_dataset(&small()).unwrap(), synthesize_sparse_dataset(&other).unwrap());
    }

    #[test]
    fn signal_confined_to_shared_channels() {
        let cfg = SynthConfig { noise_std: 0.0, ..small() };
        let generator = SparseGenerator::new(cfg.clone()).unwrap();
        assert_eq!(generator.shared_channels.len(), 2);
        let ds = synthesize_sparse_dataset(&cfg).unwrap();
        for t in &ds.trials {
            for c in 0..cfg.n_channels {
                let energy: f64 = t.channel(c).iter().map(|x| x * x).sum();
                assert_eq!(energy > 0.0, generator.shared_channels.contains(&c), "channel {c}");
            }
        }
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            SynthConfig { n_classes: 0, ..small() },
            SynthConfig { n_resting: 0, ..small() },
            SynthConfig { specific_amplitude: -0.1, ..small() },
            SynthConfig { noise_std: f64::NAN, ..small() },
            SynthConfig { sample_rate_hz: 10.0, ..small() },
        ] {
            assert!(matches!(synthesize_sparse_dataset(&cfg), Err(DataError::Invalid(_))));
        }
    }

    #[test]
    fn values_are_f32_exact() {
        let ds = synthesize_sparse_dataset(&small()).unwrap();
        assert!(ds.trials.iter().flat_map(|t| &t.data).all(|&x| x as f32 as f64 == x));
    }
}
