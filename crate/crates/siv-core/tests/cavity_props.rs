use proptest::prelude::*;

use siv_core::backaction::{decoherence_per_photon, echo_coherence, single_window_coherence};
use siv_core::cavity_qed::{scatter_amplitudes, CavityParams, CavitySystem, SpinLines};
use siv_core::spin::{Electron, SpinState};

fn system() -> impl Strategy<Value = CavitySystem> {
    (
        350e12..450e12f64,
        10e9..500e9f64,
        0.01..0.99f64,
        0.1e9..10e9f64,
        10e6..1e9f64,
        -100e9..100e9f64,
        0.1e9..5e9f64,
        0.1e6..20e6f64,
    )
        .prop_map(|(wc, kt, frac, g, gamma, da, de, dn)| {
            let p = CavityParams::new(wc, frac * kt, kt, g, gamma).unwrap();
            CavitySystem::new(p, SpinLines::from_splittings(wc, da, de, dn)).unwrap()
        })
}

fn spin() -> impl Strategy<Value = SpinState> {
    (0..4usize).prop_map(|i| SpinState::all()[i])
}

fn electron() -> impl Strategy<Value = Electron> {
    prop_oneof![Just(Electron::Down), Just(Electron::Up)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn scattering_conserves_probability(sys in system(), s in spin(), dw in -300e9..300e9f64) {
        let a = scatter_amplitudes(&sys, s, sys.params.omega_c + dw);
        prop_assert!((a.total_power() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn response_depends_only_on_detunings(sys in system(), s in spin(), dw in -300e9..300e9f64, shift in -1e12..1e12f64) {
        let mut moved = sys;
        moved.params.omega_c += shift;
        moved.lines = sys.lines.shifted(shift);
        let w = sys.params.omega_c + dw;
        let (a, b) = (scatter_amplitudes(&sys, s, w), scatter_amplitudes(&moved, s, w + shift));
        // absolute frequencies near 4e14 Hz limit the comparison to ~1e-6 relative detuning
        prop_assert!((a.r - b.r).norm() < 1e-5, "{} vs {}", a.r, b.r);
    }

    #[test]
    fn echo_is_modulus_squared_of_single_window(sys in system(), e in electron(), dw in -300e9..300e9f64, nbar in 0.0..50.0f64) {
        let w = sys.params.omega_c + dw;
        let rho1 = single_window_coherence(&sys, e, w, nbar).unwrap();
        let rho2 = echo_coherence(&sys, e, w, nbar).unwrap();
        prop_assert!((rho2 - rho1.norm_sqr()).abs() < 1e-12);
        prop_assert!(decoherence_per_photon(&sys, e, w) >= 0.0);
        prop_assert!(rho1.norm() <= 1.0 + 1e-12);
    }
}
