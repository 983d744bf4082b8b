use std::collections::HashMap;

use milel::candidates::{build_dataset, DatasetConfig, DatasetMode};
use milel::synth::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> impl Strategy<Value = SynthConfig> {
    (20usize..60, 0.0f64..=1.0, any::<u64>()).prop_map(|(n, noise_rate, seed)| SynthConfig {
        n_entities: n,
        n_types: 6,
        n_relations: n,
        n_train: 40,
        n_dev: 5,
        n_test: 5,
        name_pool: 12,
        noise_rate,
        seed,
        ..Default::default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn labels_agree_with_recomputed_definition(config in small_config()) {
        let data = generate(&config).unwrap();
        let kb = &data.kb.kb;
        let labels: HashMap<_, _> = data.train.noise_labels.iter().cloned().collect();
        let mode = DatasetConfig { n_neg: 0, mode: DatasetMode::Train, ..Default::default() };
        let points = build_dataset(kb, &data.train.sentences, mode, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        prop_assert_eq!(points.len(), labels.len());
        for p in &points {
            let gold = p.mention.gold.as_ref().unwrap();
            prop_assert_eq!(labels[&p.point_id()], !p.positive.contains(gold), "{}", p.point_id());
        }
    }

    #[test]
    fn generation_is_a_function_of_config(config in small_config()) {
        let a = generate(&config).unwrap();
        let b = generate(&config).unwrap();
        prop_assert_eq!(a.train, b.train);
        prop_assert_eq!(a.test, b.test);
        prop_assert_eq!(a.kb.entity_types, b.kb.entity_types);
    }
}

#[test]
fn injected_noise_rate_is_measured_back() {
    let config = SynthConfig { noise_rate: 0.4, ..Default::default() };
    let data = generate(&config).unwrap();
    assert!(data.train.noise_labels.len() >= 2000);
    let f = data.train.noise_fraction();
    assert!((f - 0.4).abs() <= 0.03, "noise fraction {f}");
}
