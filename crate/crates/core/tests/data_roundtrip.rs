use factorbci::data::{load_dataset, save_dataset, EegDataset, EegTrial, Label};
use proptest::prelude::*;

fn trial(id: usize, label: Label, channels: usize, samples: usize, values: &[f32]) -> EegTrial {
    EegTrial {
        trial_id: id,
        label,
        session: 1 + (id % 3) as u32,
        n_channels: channels,
        n_samples: samples,
        data: (0..channels * samples).map(|i| values[(id * 7 + i) % values.len()] as f64).collect(),
    }
}

prop_compose! {
    fn dataset()(
        classes in 1usize..4,
        per_class in 1usize..4,
        resting in 0usize..3,
        channels in 1usize..4,
        samples in 1usize..12,
        rate in 1.0f64..1000.0,
        values in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..64),
    ) -> EegDataset {
        let mut id = 0;
        let mut next = |label| {
            id += 1;
            trial(id * 3, label, channels, samples, &values)
        };
        let trials = (0..classes * per_class).map(|i| next(Label::Class(i % classes))).collect();
        let resting = (0..resting).map(|_| next(Label::Resting)).collect();
        EegDataset {
            name: format!("random-{classes}-{per_class}"),
            sample_rate_hz: rate,
            n_channels: channels,
            trial_samples: samples,
            class_names: (0..classes).map(|k| format!("c{k}")).collect(),
            trials,
            resting,
        }
    }
}

fn bits(ds: &EegDataset) -> Vec<(usize, Label, u32, Vec<u64>)> {
    ds.trials
        .iter()
        .chain(&ds.resting)
        .map(|t| (t.trial_id, t.label, t.session, t.data.iter().map(|v| v.to_bits()).collect()))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn save_load_is_bit_exact(ds in dataset()) {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        prop_assert_eq!(&back.name, &ds.name);
        prop_assert_eq!(back.sample_rate_hz.to_bits(), ds.sample_rate_hz.to_bits());
        prop_assert_eq!((back.n_channels, back.trial_samples), (ds.n_channels, ds.trial_samples));
        prop_assert_eq!(&back.class_names, &ds.class_names);
        prop_assert_eq!(bits(&back), bits(&ds));
    }
}
