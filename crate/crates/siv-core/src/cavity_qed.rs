//! Spin-dependent reflection, transmission and scattering of a two-level emitter in a
//! single-sided nanocavity.
//!
//! Configuration values are plain frequencies in Hz with FWHM rates. Conversion to angular
//! units happens inside [`scatter_amplitudes`], and every resonance denominator is built from
//! detunings relative to `omega_c` so GHz-scale differences on a 406 THz carrier never cancel.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{invalid, Result, SivError};
use crate::spin::{Electron, Nuclear, SpinState};

const TWO_PI: f64 = 2.0 * PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavityParams {
    pub omega_c: f64,
    pub kappa_in: f64,
    pub kappa_tot: f64,
    pub g: f64,
    pub gamma: f64,
}

impl CavityParams {
    pub fn new(omega_c: f64, kappa_in: f64, kappa_tot: f64, g: f64, gamma: f64) -> Result<Self> {
        let p = Self { omega_c, kappa_in, kappa_tot, g, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.omega_c, self.kappa_in, self.kappa_tot, self.g, self.gamma];
        if finite.iter().any(|x| !x.is_finite()) {
            return Err(invalid("cavity", "all parameters must be finite"));
        }
        if !(self.kappa_in > 0.0 && self.kappa_in <= self.kappa_tot) {
            return Err(invalid("cavity.kappa_in", "need 0 < kappa_in <= kappa_tot"));
        }
        if self.g < 0.0 {
            return Err(invalid("cavity.g", "coupling must be non-negative"));
        }
        if self.gamma <= 0.0 {
            return Err(invalid("cavity.gamma", "linewidth must be positive"));
        }
        Ok(())
    }

    /// The measured device: cavity at 406.610 THz, κ_in = 202 GHz, κ_tot = 250 GHz,
    /// g = 3.19 GHz, γ = 100 MHz (all /2π, FWHM).
    pub fn reference_device() -> Self {
        Self {
            omega_c: 406.610e12,
            kappa_in: 202e9,
            kappa_tot: 250e9,
            g: 3.19e9,
            gamma: 100e6,
        }
    }

    pub fn kappa_out(&self) -> f64 {
        self.kappa_tot - self.kappa_in
    }
}

/// Optical resonance of each (electron, nuclear) state, in Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpinLines {
    pub up_up: f64,
    pub up_down: f64,
    pub down_up: f64,
    pub down_down: f64,
}

impl SpinLines {
    pub fn reference_device() -> Self {
        Self {
            up_up: 406.678504e12,
            up_down: 406.678537e12,
            down_up: 406.679053e12,
            down_down: 406.679022e12,
        }
    }

    /// Builds lines from splittings: the mean ↑e line sits `delta_a` above the cavity, the
    /// ↓e pair `delta_e` above that, and each pair is split by `delta_n` with the nuclear
    /// ordering inverted between the two electron manifolds (as in the measured device).
    pub fn from_splittings(omega_c: f64, delta_a: f64, delta_e: f64, delta_n: f64) -> Self {
        let up = omega_c + delta_a;
        let down = up + delta_e;
        Self {
            up_up: up - delta_n / 2.0,
            up_down: up + delta_n / 2.0,
            down_up: down + delta_n / 2.0,
            down_down: down - delta_n / 2.0,
        }
    }

    pub fn get(&self, spin: SpinState) -> f64 {
        match (spin.e, spin.n) {
            (Electron::Up, Nuclear::Up) => self.up_up,
            (Electron::Up, Nuclear::Down) => self.up_down,
            (Electron::Down, Nuclear::Up) => self.down_up,
            (Electron::Down, Nuclear::Down) => self.down_down,
        }
    }

    pub fn all(&self) -> [f64; 4] {
        [self.up_up, self.up_down, self.down_up, self.down_down]
    }

    /// Same lines with the two electron manifolds exchanged.
    pub fn swap_electron(&self) -> Self {
        Self {
            up_up: self.down_up,
            up_down: self.down_down,
            down_up: self.up_up,
            down_down: self.up_down,
        }
    }

    pub fn shifted(&self, df: f64) -> Self {
        Self {
            up_up: self.up_up + df,
            up_down: self.up_down + df,
            down_up: self.down_up + df,
            down_down: self.down_down + df,
        }
    }

    /// Mean ↓e line minus mean ↑e line.
    pub fn electron_splitting(&self) -> f64 {
        0.5 * (self.down_up + self.down_down - self.up_up - self.up_down)
    }

    /// Lines with the nuclear splitting removed (each pair collapsed to its mean).
    pub fn without_nuclear_splitting(&self) -> Self {
        let up = 0.5 * (self.up_up + self.up_down);
        let down = 0.5 * (self.down_up + self.down_down);
        Self { up_up: up, up_down: up, down_up: down, down_down: down }
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.all();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(invalid("lines", "all line frequencies must be finite"));
        }
        for i in 0..4 {
            for j in i + 1..4 {
                if v[i] == v[j] {
                    return Err(invalid("lines", "line frequencies must be distinct"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavitySystem {
    pub params: CavityParams,
    pub lines: SpinLines,
}

impl CavitySystem {
    /// Validated constructor. Use the struct literal directly for deliberately degenerate
    /// systems (e.g. collapsed nuclear lines in limit checks).
    pub fn new(params: CavityParams, lines: SpinLines) -> Result<Self> {
        params.validate()?;
        lines.validate()?;
        Ok(Self { params, lines })
    }

    pub fn reference_device() -> Self {
        Self {
            params: CavityParams::reference_device(),
            lines: SpinLines::reference_device(),
        }
    }

    /// Frequency window that contains every spin-dependent feature of the spectrum.
    pub fn feature_window(&self) -> (f64, f64) {
        let v = self.lines.all();
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let pad = 2.0 * (hi - lo) + 20.0 * self.params.gamma;
        (lo - pad, hi + pad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Amplitudes {
    pub r: Complex64,
    pub t: Complex64,
    pub s: Complex64,
}

impl Amplitudes {
    pub fn as_array(&self) -> [Complex64; 3] {
        [self.r, self.t, self.s]
    }

    pub fn total_power(&self) -> f64 {
        self.r.norm_sqr() + self.t.norm_sqr() + self.s.norm_sqr()
    }
}

/// r, t, s for an emitter line at `omega_a` probed at `omega` (all Hz).
pub fn amplitudes_for_line(params: &CavityParams, omega_a: f64, omega: f64) -> Amplitudes {
    let dc = omega - params.omega_c;
    let da = dc - (omega_a - params.omega_c);
    let kin = TWO_PI * params.kappa_in;
    let ktot = TWO_PI * params.kappa_tot;
    let kout = TWO_PI * params.kappa_out();
    let g = TWO_PI * params.g;
    let gam = TWO_PI * params.gamma;

    let cav = Complex64::new(ktot / 2.0, TWO_PI * dc);
    let atom = Complex64::new(gam / 2.0, TWO_PI * da);
    let denom = cav + g * g / atom;
    let r = 1.0 - kin / denom;
    let t = (kin * kout).sqrt() / denom;
    let s = (kin * gam).sqrt() * g / (cav * atom + g * g);
    Amplitudes { r, t, s }
}

pub fn scatter_amplitudes(sys: &CavitySystem, spin: SpinState, omega: f64) -> Amplitudes {
    amplitudes_for_line(&sys.params, sys.lines.get(spin), omega)
}

pub fn reflectivity(sys: &CavitySystem, spin: SpinState, omega: f64) -> f64 {
    scatter_amplitudes(sys, spin, omega).r.norm_sqr()
}

/// C = 4g²/(κ_tot γ).
pub fn cooperativity(params: &CavityParams) -> f64 {
    4.0 * params.g * params.g / (params.kappa_tot * params.gamma)
}

/// |R(↓e,n) − R(↑e,n)| at `omega`.
pub fn contrast(sys: &CavitySystem, nuclear: Nuclear, omega: f64) -> f64 {
    let down = reflectivity(sys, SpinState::new(Electron::Down, nuclear), omega);
    let up = reflectivity(sys, SpinState::new(Electron::Up, nuclear), omega);
    (down - up).abs()
}

/// Electron contrast after averaging the reflectivity over both nuclear states.
pub fn contrast_nuclear_averaged(sys: &CavitySystem, omega: f64) -> f64 {
    let mean = |e: Electron| {
        0.5 * Nuclear::ALL
            .iter()
            .map(|&n| reflectivity(sys, SpinState::new(e, n), omega))
            .sum::<f64>()
    };
    (mean(Electron::Down) - mean(Electron::Up)).abs()
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Golden-section maximization of a unimodal function on [a, b].
pub fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Coarse grid argmax followed by golden-section refinement inside the bracketing cells.
pub(crate) fn grid_then_golden(
    f: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    n: usize,
    tol: f64,
) -> (f64, f64) {
    let grid = linspace(lo, hi, n);
    let (imax, _) = grid
        .iter()
        .map(|&w| f(w))
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
    let step = (hi - lo) / (n.max(2) - 1) as f64;
    let a = (grid[imax] - step).max(lo);
    let b = (grid[imax] + step).min(hi);
    let w = golden_max(&f, a, b, tol);
    // keep the grid point if refinement wandered onto a neighbouring shoulder
    if f(w) >= f(grid[imax]) {
        (w, f(w))
    } else {
        (grid[imax], f(grid[imax]))
    }
}

const CONTRAST_GRID: usize = 20_001;
const FREQ_TOL_HZ: f64 = 1e3;

fn readout_argmax(sys: &CavitySystem, f: impl Fn(f64) -> f64) -> Result<f64> {
    let (lo, hi) = sys.feature_window();
    let (w, best) = grid_then_golden(f, lo, hi, CONTRAST_GRID, FREQ_TOL_HZ);
    if best < 1e-12 {
        return Err(SivError::NoContrast);
    }
    Ok(w)
}

/// Frequency of maximum reflection contrast between electron states for a fixed nuclear state.
pub fn resonant_readout_frequency(sys: &CavitySystem, nuclear: Nuclear) -> Result<f64> {
    readout_argmax(sys, |w| contrast(sys, nuclear, w))
}

/// Maximum-contrast frequency when the nuclear state is unknown (reflectivities averaged).
pub fn resonant_readout_frequency_averaged(sys: &CavitySystem) -> Result<f64> {
    readout_argmax(sys, |w| contrast_nuclear_averaged(sys, w))
}

pub fn contrast_spectrum(
    sys: &CavitySystem,
    lo: f64,
    hi: f64,
    points: usize,
    nuclear: Nuclear,
) -> Result<Vec<(f64, f64)>> {
    if points == 0 || !(hi >= lo) {
        return Err(invalid("range", "need a non-empty frequency range"));
    }
    Ok(linspace(lo, hi, points)
        .into_iter()
        .map(|w| (w, contrast(sys, nuclear, w)))
        .collect())
}

pub fn amplitude_spectrum(
    sys: &CavitySystem,
    spin: SpinState,
    lo: f64,
    hi: f64,
    points: usize,
) -> Result<Vec<(f64, Amplitudes)>> {
    if points == 0 || !(hi >= lo) {
        return Err(invalid("range", "need a non-empty frequency range"));
    }
    Ok(linspace(lo, hi, points)
        .into_iter()
        .map(|w| (w, scatter_amplitudes(sys, spin, w)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const DD: SpinState = SpinState::new(Electron::Down, Nuclear::Down);

    #[test]
    fn impedance_matched_empty_cavity_has_no_reflection() {
        let p = CavityParams::new(400e12, 100e9, 200e9, 0.0, 1e8).unwrap();
        let a = amplitudes_for_line(&p, 400.001e12, p.omega_c);
        assert!(a.r.norm() < 1e-14);
    }

    #[test]
    fn far_detuned_is_mirror() {
        let sys = CavitySystem::reference_device();
        let w = sys.params.omega_c + 1e6 * sys.params.kappa_tot;
        assert!((scatter_amplitudes(&sys, DD, w).r.norm() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn cooperativity_values() {
        let p = CavityParams::reference_device();
        let c = cooperativity(&p);
        assert!((c - 1.628_16).abs() < 1e-4, "{c}");
        let mut q = p;
        q.g = 0.0;
        assert_eq!(cooperativity(&q), 0.0);
        q.g = 2.0 * p.g;
        assert!((cooperativity(&q) - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn zero_coupling_has_no_contrast() {
        let mut sys = CavitySystem::reference_device();
        sys.params.g = 0.0;
        assert_eq!(resonant_readout_frequency(&sys, Nuclear::Down), Err(SivError::NoContrast));
    }

    #[test]
    fn resonant_frequency_matches_dense_grid() {
        let sys = CavitySystem::reference_device();
        for n in Nuclear::ALL {
            let w = resonant_readout_frequency(&sys, n).unwrap();
            let (lo, hi) = sys.feature_window();
            let brute = linspace(lo, hi, 100_000)
                .into_iter()
                .max_by(|a, b| contrast(&sys, n, *a).total_cmp(&contrast(&sys, n, *b)))
                .unwrap();
            assert!((w - brute).abs() < 1e6, "{w} vs {brute}");
            // lies between the electron manifolds
            assert!(w > sys.lines.up_up && w < sys.lines.down_up);
        }
    }

    #[test]
    fn electron_swap_leaves_frequency_unchanged() {
        let sys = CavitySystem::reference_device();
        let swapped = CavitySystem { params: sys.params, lines: sys.lines.swap_electron() };
        let a = resonant_readout_frequency(&sys, Nuclear::Down).unwrap();
        let b = resonant_readout_frequency(&swapped, Nuclear::Down).unwrap();
        assert!((a - b).abs() < 1e3);
    }

    #[test]
    fn nuclear_states_peak_at_different_frequencies() {
        let sys = CavitySystem::reference_device();
        let a = resonant_readout_frequency(&sys, Nuclear::Down).unwrap();
        let b = resonant_readout_frequency(&sys, Nuclear::Up).unwrap();
        assert!((a - b).abs() > 10e6);
    }

    #[test]
    fn mean_reflectivity_at_readout_frequency() {
        let sys = CavitySystem::reference_device();
        let w = resonant_readout_frequency(&sys, Nuclear::Down).unwrap();
        let mean = 0.5
            * (reflectivity(&sys, DD, w)
                + reflectivity(&sys, SpinState::new(Electron::Up, Nuclear::Down), w));
        assert!((mean - 0.275).abs() < 0.03, "{mean}");
    }

    #[test]
    fn contrast_spectrum_recomputes_pointwise() {
        let sys = CavitySystem::reference_device();
        let (lo, hi) = sys.feature_window();
        for (w, c) in contrast_spectrum(&sys, lo, hi, 101, Nuclear::Up).unwrap() {
            let down = scatter_amplitudes(&sys, SpinState::new(Electron::Down, Nuclear::Up), w);
            let up = scatter_amplitudes(&sys, SpinState::new(Electron::Up, Nuclear::Up), w);
            assert_eq!(c, (down.r.norm_sqr() - up.r.norm_sqr()).abs());
        }
        let far = sys.params.omega_c + 1e16;
        assert!(contrast(&sys, Nuclear::Down, far) < 1e-6);
    }
}
