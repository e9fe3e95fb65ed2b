//! Nuclear decoherence from readout light. Each port carries a coherent state whose
//! amplitude depends on the nuclear state through the optical line position; the nuclear
//! coherence is multiplied by the overlap of those coherent states.

use num_complex::Complex64;
use serde::Serialize;

use crate::cavity_qed::{linspace, scatter_amplitudes, CavitySystem};
use crate::error::{invalid, Result};
use crate::spin::{Electron, Nuclear, SpinState};

/// Per-port amplitudes {R, T, S} for the two nuclear states at a fixed electron state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterSplit {
    pub down: [Complex64; 3],
    pub up: [Complex64; 3],
}

impl ScatterSplit {
    pub fn new(sys: &CavitySystem, electron: Electron, omega: f64) -> Self {
        let amp = |n| scatter_amplitudes(sys, SpinState::new(electron, n), omega).as_array();
        Self { down: amp(Nuclear::Down), up: amp(Nuclear::Up) }
    }

    /// Σ|ΔC|² over the ports, i.e. the decay exponent per photon.
    pub fn distance_sq(&self) -> f64 {
        self.down.iter().zip(&self.up).map(|(a, b)| (a - b).norm_sqr()).sum()
    }

    /// Σ Im(C↓* C↑), the phase per photon.
    pub fn phase_per_photon(&self) -> f64 {
        self.down.iter().zip(&self.up).map(|(a, b)| (a.conj() * b).im).sum()
    }
}

fn check_nbar(nbar: f64) -> Result<()> {
    if !(nbar >= 0.0) || !nbar.is_finite() {
        return Err(invalid("nbar", "must be finite and >= 0"));
    }
    Ok(())
}

/// ρ↓↑ after one window of mean photon number `nbar`: Π exp(−½|C↓α − C↑α|²)·e^{iφ}.
pub fn single_window_coherence(sys: &CavitySystem, electron: Electron, omega: f64, nbar: f64) -> Result<Complex64> {
    check_nbar(nbar)?;
    let split = ScatterSplit::new(sys, electron, omega);
    Ok(Complex64::from_polar((-0.5 * split.distance_sq() * nbar).exp(), split.phase_per_photon() * nbar))
}

/// Two symmetric windows around a nuclear π pulse: the phases cancel and ρ₂ = |ρ₁|².
pub fn echo_coherence(sys: &CavitySystem, electron: Electron, omega: f64, nbar_per_window: f64) -> Result<f64> {
    check_nbar(nbar_per_window)?;
    Ok((-decoherence_per_photon(sys, electron, omega) * nbar_per_window).exp())
}

/// k in ρ₂ = e^{−k·nbar}.
pub fn decoherence_per_photon(sys: &CavitySystem, electron: Electron, omega: f64) -> f64 {
    ScatterSplit::new(sys, electron, omega).distance_sq()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum XMode {
    /// One laser window: ⟨X₁⟩ = Re ρ₁.
    Asymmetric,
    /// Laser windows on both sides of a nuclear echo: ⟨X₂⟩ = ρ₂.
    Symmetric,
}

pub fn x_expectation(mode: XMode, sys: &CavitySystem, electron: Electron, omega: f64, nbar: f64) -> Result<f64> {
    match mode {
        XMode::Asymmetric => Ok(single_window_coherence(sys, electron, omega, nbar)?.re),
        XMode::Symmetric => echo_coherence(sys, electron, omega, nbar),
    }
}

/// Coherence mapped to the state infidelity of an equatorial nuclear state.
pub fn infidelity_from_coherence(coherence: f64) -> f64 {
    0.5 * (1.0 - coherence)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub omega_hz: f64,
    pub x1_re: f64,
    pub x2: f64,
    pub k_per_photon: f64,
    pub electron_state: Electron,
}

/// Laser-frequency sweep at fixed photon number for one electron state.
pub fn frequency_sweep(
    sys: &CavitySystem,
    electron: Electron,
    lo: f64,
    hi: f64,
    points: usize,
    nbar: f64,
) -> Result<Vec<SweepRow>> {
    check_nbar(nbar)?;
    if points == 0 || !(hi >= lo) {
        return Err(invalid("range", "need a non-empty frequency range"));
    }
    linspace(lo, hi, points)
        .into_iter()
        .map(|w| {
            Ok(SweepRow {
                omega_hz: w,
                x1_re: x_expectation(XMode::Asymmetric, sys, electron, w, nbar)?,
                x2: x_expectation(XMode::Symmetric, sys, electron, w, nbar)?,
                k_per_photon: decoherence_per_photon(sys, electron, w),
                electron_state: electron,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cavity_qed::resonant_readout_frequency;

    /// ⟨β|γ⟩ summed in the Fock basis.
    fn fock_overlap(beta: Complex64, gamma: Complex64) -> Complex64 {
        let mut term = Complex64::new(1.0, 0.0);
        let mut sum = term;
        for n in 1..200 {
            term *= beta.conj() * gamma / n as f64;
            sum += term;
        }
        sum * (-0.5 * (beta.norm_sqr() + gamma.norm_sqr())).exp()
    }

    #[test]
    fn zero_photons_is_identity() {
        let sys = CavitySystem::reference_device();
        let w = sys.lines.up_up;
        assert_eq!(single_window_coherence(&sys, Electron::Up, w, 0.0).unwrap(), Complex64::new(1.0, 0.0));
        assert_eq!(echo_coherence(&sys, Electron::Up, w, 0.0).unwrap(), 1.0);
        assert!(single_window_coherence(&sys, Electron::Up, w, -1.0).is_err());
    }

    #[test]
    fn matches_fock_space_overlap() {
        let sys = CavitySystem::reference_device();
        let w = resonant_readout_frequency(&sys, Nuclear::Down).unwrap();
        for nbar in [0.3f64, 1.0, 4.0] {
            for e in Electron::ALL {
                let split = ScatterSplit::new(&sys, e, w);
                let a = nbar.sqrt();
                let brute: Complex64 =
                    split.down.iter().zip(&split.up).map(|(d, u)| fock_overlap(d * a, u * a)).product();
                let got = single_window_coherence(&sys, e, w, nbar).unwrap();
                assert!((brute - got).norm() < 1e-10, "{brute} vs {got}");
            }
        }
    }

    #[test]
    fn ports_are_complete() {
        let sys = CavitySystem::reference_device();
        for w in linspace(406.677e12, 406.681e12, 50) {
            let split = ScatterSplit::new(&sys, Electron::Down, w);
            for c in [split.down, split.up] {
                let p: f64 = c.iter().map(|z| z.norm_sqr()).sum();
                assert!((p - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn degenerate_lines_do_not_decohere() {
        let mut sys = CavitySystem::reference_device();
        sys.lines = sys.lines.without_nuclear_splitting();
        let w = sys.lines.up_up;
        assert_eq!(decoherence_per_photon(&sys, Electron::Up, w), 0.0);
        assert_eq!(single_window_coherence(&sys, Electron::Up, w, 10.0).unwrap().norm(), 1.0);
    }

    #[test]
    fn echo_is_pure_exponential() {
        let sys = CavitySystem::reference_device();
        let w = sys.lines.down_down + 100e6;
        let k = decoherence_per_photon(&sys, Electron::Down, w);
        for nbar in [0.5, 1.0, 5.0] {
            let r2 = echo_coherence(&sys, Electron::Down, w, nbar).unwrap();
            assert!((r2 - (-k * nbar).exp()).abs() < 1e-12);
            let r1 = single_window_coherence(&sys, Electron::Down, w, nbar).unwrap();
            assert!((r2 - r1.norm_sqr()).abs() < 1e-12);
        }
        let slope = |a: f64, b: f64| {
            let ra = echo_coherence(&sys, Electron::Down, w, a).unwrap().ln();
            let rb = echo_coherence(&sys, Electron::Down, w, b).unwrap().ln();
            (rb - ra) / (b - a)
        };
        assert!((slope(1.0, 3.0) - slope(7.0, 20.0)).abs() < 1e-9);
    }

    #[test]
    fn asymmetric_mode_crosses_zero() {
        let sys = CavitySystem::reference_device();
        let w = sys.lines.down_down + 300e6;
        let split = ScatterSplit::new(&sys, Electron::Down, w);
        let phi = split.phase_per_photon().abs();
        assert!(phi > 0.0);
        // first zero of Re ρ₁ where the accumulated phase reaches π/2
        let n0 = std::f64::consts::FRAC_PI_2 / phi;
        let before = x_expectation(XMode::Asymmetric, &sys, Electron::Down, w, 0.9 * n0).unwrap();
        let after = x_expectation(XMode::Asymmetric, &sys, Electron::Down, w, 1.1 * n0).unwrap();
        assert!(before > 0.0 && after < 0.0, "{before} {after}");
    }
}
