use factorbci::data::{synthesize_sparse_dataset, EegDataset, SparseGenerator, SynthConfig};
use factorbci::net::NetConfig;
use factorbci::train::{train_cv, TrainConfig};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

fn centroids(ds: &EegDataset) -> Vec<Vec<f64>> {
    (0..ds.n_classes())
        .map(|k| {
            let members: Vec<_> = ds.trials_of_class(k).collect();
            let mut c = vec![0.0; members[0].data.len()];
            for t in &members {
                for (m, v) in c.iter_mut().zip(&t.data) {
                    *m += v / members.len() as f64;
                }
            }
            c
        })
        .collect()
}

fn mean_pairwise_distance(c: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0;
    for i in 0..c.len() {
        for j in i + 1..c.len() {
            sum += c[i].iter().zip(&c[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            pairs += 1;
        }
    }
    sum / pairs as f64
}

#[test]
fn class_separation_is_linear_in_alpha() {
    let distance = |alpha: f64| {
        let ds = synthesize_sparse_dataset(&SynthConfig {
            n_classes: 3,
            trials_per_class: 4000,
            n_resting: 1,
            n_channels: 1,
            trial_samples: 128,
            specific_amplitude: alpha,
            seed: 5,
            ..SynthConfig::default()
        })
        .unwrap();
        mean_pairwise_distance(&centroids(&ds))
    };
    let (d0, d1, d2) = (distance(0.0), distance(0.3), distance(0.6));
    assert!(d0 / d1 <= 0.10, "alpha 0 separation {d0} vs {d1}");
    assert!((d2 / d1 - 2.0).abs() <= 0.2, "ratio {}", d2 / d1);
}

/// Fraction of spectral power inside 8–30 Hz over outside it, DC excluded.
fn band_ratio(signals: &[&[f64]], fs: f64) -> f64 {
    let n = signals[0].len();
    let fft = FftPlanner::new().plan_fft_forward(n);
    let (mut inside, mut outside) = (0.0, 0.0);
    for s in signals {
        let mut buf: Vec<Complex<f64>> = s.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft.process(&mut buf);
        for (i, c) in buf.iter().enumerate().take(n / 2 + 1).skip(1) {
            let f = i as f64 * fs / n as f64;
            if (8.0..=30.0).contains(&f) {
                inside += c.norm_sqr();
            } else {
                outside += c.norm_sqr();
            }
        }
    }
    inside / outside
}

#[test]
fn resting_power_sits_in_the_task_band() {
    let cfg = SynthConfig::default();
    let generator = SparseGenerator::new(cfg.clone()).unwrap();
    let ds = synthesize_sparse_dataset(&cfg).unwrap();
    let shared: Vec<&[f64]> = ds
        .resting
        .iter()
        .flat_map(|t| generator.shared_channels.iter().map(move |&c| t.channel(c)))
        .collect();
    let ratio = band_ratio(&shared, cfg.sample_rate_hz);
    assert!(ratio > 2.0, "in-band / out-of-band power {ratio}");

    // Pure noise channels for contrast: white noise has most power out of band.
    let silent: Vec<&[f64]> = ds
        .resting
        .iter()
        .flat_map(|t| (0..t.n_channels).filter(|c| !generator.shared_channels.contains(c)).map(move |c| t.channel(c)))
        .collect();
    assert!(band_ratio(&silent, cfg.sample_rate_hz) < 0.5);

    for t in &ds.resting {
        let per_trial: Vec<&[f64]> = generator.shared_channels.iter().map(|&c| t.channel(c)).collect();
        assert!(band_ratio(&per_trial, cfg.sample_rate_hz) > 1.0, "resting trial {}", t.trial_id);
    }
}

#[test]
fn without_class_signal_accuracy_is_chance() {
    let net = NetConfig {
        n_feature_maps: 4,
        temporal_kernel: 9,
        spatial_kernel: 3,
        pool_kernel: 16,
        pool_stride: 8,
        ..NetConfig::new(3, 64, 6)
    };
    let mut accs = Vec::new();
    for seed in 0..3 {
        let ds = synthesize_sparse_dataset(&SynthConfig {
            n_resting: 20,
            n_channels: 3,
            trial_samples: 64,
            specific_amplitude: 0.0,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig { epochs: 8, checkpoint_after_epoch: 4, seed, ..TrainConfig::new(64, 250.0) };
        let (report, _) = train_cv(&ds, &net, &cfg, None, &mut |_, _| {}).unwrap();
        accs.push(report.mean);
    }
    let mean = accs.iter().sum::<f64>() / 3.0;
    assert!((mean - 1.0 / 6.0).abs() <= 0.08, "accuracies {accs:?}");
}
