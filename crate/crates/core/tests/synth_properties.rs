use proptest::prelude::*;
use varfa::synth::{generate, uniform_count_mask, MeanMode, SynthSpec};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn same_seed_same_instance(seed in any::<u64>(), per_coordinate in any::<bool>()) {
        let mean_mode = if per_coordinate { MeanMode::PerCoordinate } else { MeanMode::PerFamily };
        let spec = SynthSpec { n: 12, q: 7, k: 3, seed, mean_mode, ..SynthSpec::default() };
        let a = generate(&spec);
        let b = generate(&spec);
        prop_assert_eq!(&a, &b);
        prop_assert!(a.truth.m.iter().all(|&v| v >= 0.0));
        prop_assert!(a.full_values.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn count_mask_rows_stay_in_range(seed in any::<u64>(), lo in 1usize..10) {
        let mask = uniform_count_mask(20, 10, lo, seed);
        for row in mask.outer_iter() {
            let c = row.iter().filter(|&&m| m).count();
            prop_assert!(c >= lo && c <= 10);
        }
    }
}

#[test]
fn different_seeds_differ() {
    let a = generate(&SynthSpec { seed: 1, ..SynthSpec::default() });
    let b = generate(&SynthSpec { seed: 2, ..SynthSpec::default() });
    assert_ne!(a.full_values, b.full_values);
}
