use proptest::prelude::*;

use siv_core::bayes_readout::{bayes_update_batch, classify, poisson_update, ArrivalModel, Decision, ReadoutSettings};
use siv_core::cavity_qed::CavitySystem;

fn model() -> ArrivalModel {
    let sys = CavitySystem::reference_device();
    ArrivalModel::from_cavity(&sys, sys.params.omega_c + 68.5e9, &ReadoutSettings::default(), 5.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn batch_posterior_ignores_arrival_order(
        prior in 0.01..0.99f64,
        frac in prop::collection::vec(0.0..1.0f64, 1..12),
        seed in any::<u64>(),
    ) {
        let m = model();
        let w = ReadoutSettings::default().window;
        let times: Vec<f64> = frac.iter().map(|f| f * w).collect();
        let mut shuffled = times.clone();
        // deterministic permutation from the seed
        let n = shuffled.len();
        for i in (1..n).rev() {
            let j = (seed.rotate_left(i as u32) % (i as u64 + 1)) as usize;
            shuffled.swap(i, j);
        }
        let a = bayes_update_batch(prior, &m, &times).unwrap();
        let b = bayes_update_batch(prior, &m, &shuffled).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn more_photons_favour_the_brighter_state(p in 0.01..0.99f64, n in 0u64..40, lo in 0.1..5.0f64, gap in 0.1..5.0f64) {
        let hi = lo + gap;
        let a = poisson_update(p, n, hi, lo).unwrap();
        let b = poisson_update(p, n + 1, hi, lo).unwrap();
        prop_assert!(b >= a);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn classification_is_symmetric(post in 0.0..1.0f64, eps in 0.0..0.5f64) {
        let a = classify(post, eps).unwrap();
        let b = classify(1.0 - post, eps).unwrap();
        let mirrored = match a {
            Decision::Down => Decision::Up,
            Decision::Up => Decision::Down,
            Decision::Discarded => Decision::Discarded,
        };
        // exact ties at the threshold may land on either side
        if (post - eps).abs() > 1e-12 && (1.0 - post - eps).abs() > 1e-12 && (post - 0.5).abs() > 1e-12 {
            prop_assert_eq!(b, mirrored);
        }
    }
}
