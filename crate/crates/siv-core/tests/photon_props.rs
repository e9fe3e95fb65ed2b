use proptest::prelude::*;

use siv_core::cavity_qed::CavitySystem;
use siv_core::quantum_core::{bell_overlap, DensityMatrix};
use siv_core::rng::stream;
use siv_core::spin_photon::{
    basis_probabilities, bell_fidelity_from_counts, herald_bound, storage_crossing, storage_decay, BasisCounts,
    ErrorEvents, GateKind, Reflectivities, SpinPhotonGate,
};

fn werner(v: f64) -> DensityMatrix {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let z = num_complex::Complex64::new(0.0, 0.0);
    let a = num_complex::Complex64::new(s, 0.0);
    let pure = DensityMatrix::from_pure(&[a, z, z, a]).unwrap();
    let mixed = DensityMatrix::maximally_mixed(4).unwrap();
    let m = pure.matrix() * num_complex::Complex64::new(v, 0.0) + mixed.matrix() * num_complex::Complex64::new(1.0 - v, 0.0);
    DensityMatrix::new(m).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn herald_probability_respects_reflectivity_bound(
        dw in -150e9..150e9f64,
        nbar in 1e-4..0.1f64,
        phone in any::<bool>(),
        detect in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let sys = CavitySystem::reference_device();
        let refl = Reflectivities::from_cavity(&sys, sys.params.omega_c + dw);
        let kind = if phone { GateKind::Phone } else { GateKind::ElectronPhoton };
        let gate = SpinPhotonGate::new(kind, refl, nbar).unwrap();
        let h = gate.herald(&ErrorEvents::default(), detect && phone, &mut stream(seed, "prop", 0)).unwrap();
        prop_assert!(h.herald_prob >= 0.0);
        prop_assert!(h.herald_prob <= herald_bound(&refl, nbar) * (1.0 + 1e-12));
    }

    #[test]
    fn counts_fidelity_matches_state_overlap(v in 0.0..1.0f64) {
        let rho = werner(v);
        let p = basis_probabilities(&rho).unwrap();
        let scale = 1e9;
        let tally = |q: [f64; 4]| q.map(|x| (x * scale).round() as u64);
        let c = BasisCounts { zz: tally(p[0]), xx: tally(p[1]), yy: tally(p[2]) };
        let (f, _) = bell_fidelity_from_counts(&c).unwrap();
        prop_assert!((f - bell_overlap(&rho).unwrap()).abs() < 1e-6);
        prop_assert!((f - (0.25 + 0.75 * v)).abs() < 1e-6);
    }

    #[test]
    fn storage_crossing_inverts_the_decay(f0 in 0.51..1.0f64, tau in 1e-4..1e-1f64) {
        let t = storage_crossing(f0, tau, 0.5).unwrap();
        let f = storage_decay(f0, tau, &[t]).unwrap()[0].1;
        prop_assert!((f - 0.5).abs() < 1e-12);
    }
}
