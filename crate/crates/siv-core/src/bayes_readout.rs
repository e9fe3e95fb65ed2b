//! Phase-based electron readout. Two sidebands straddle a carrier; their beat note arrives
//! at the detector with a spin-dependent phase. Arrival times and the photon count feed a
//! sequential Bayes classifier with optional postselection.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::backaction::decoherence_per_photon;
use crate::cavity_qed::{grid_then_golden, resonant_readout_frequency, scatter_amplitudes, CavitySystem};
use crate::error::{invalid, Result, SivError};
use crate::rng;
use crate::spin::{Electron, Nuclear, SpinState};

const TWO_PI: f64 = 2.0 * PI;
const TABLE_POINTS: usize = 1 << 14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutSettings {
    /// Sideband separation, which is also the beat frequency (Hz).
    pub beat_freq: f64,
    /// Detector timing jitter, Gaussian σ (s).
    pub jitter: f64,
    /// Flat fraction of detected light from carrier leakage.
    pub background_frac: f64,
    /// Detection window (s); must hold an integer number of beat periods.
    pub window: f64,
    /// Collection and detection efficiency from the cavity to the detector.
    pub path_efficiency: f64,
    pub epsilon: f64,
}

impl Default for ReadoutSettings {
    fn default() -> Self {
        Self {
            beat_freq: 600e6,
            jitter: 70e-12,
            background_frac: 0.1,
            window: 100e-9,
            path_efficiency: 0.52,
            epsilon: 0.2,
        }
    }
}

impl ReadoutSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.beat_freq > 0.0) {
            return Err(invalid("readout.beat_freq", "must be positive"));
        }
        if !(self.jitter >= 0.0) {
            return Err(invalid("readout.jitter", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.background_frac) {
            return Err(invalid("readout.background_frac", "must lie in [0, 1]"));
        }
        let periods = self.window * self.beat_freq;
        if !(periods >= 1.0) || (periods - periods.round()).abs() > 1e-6 {
            return Err(invalid("readout.window", "must be a whole number of beat periods"));
        }
        if !(self.path_efficiency > 0.0 && self.path_efficiency <= 1.0) {
            return Err(invalid("readout.path_efficiency", "must lie in (0, 1]"));
        }
        if !(0.0..=0.5).contains(&self.epsilon) {
            return Err(invalid("readout.epsilon", "must lie in [0, 0.5]"));
        }
        Ok(())
    }

    /// Visibility loss from timing jitter: exp(−(2π f σ)²/2).
    pub fn jitter_damping(&self) -> f64 {
        (-0.5 * (TWO_PI * self.beat_freq * self.jitter).powi(2)).exp()
    }
}

/// Reflection amplitude with the nucleus unknown (amplitude average over both states).
fn r_nuclear_averaged(sys: &CavitySystem, e: Electron, omega: f64) -> Complex64 {
    0.5 * Nuclear::ALL
        .iter()
        .map(|&n| scatter_amplitudes(sys, SpinState::new(e, n), omega).r)
        .sum::<Complex64>()
}

/// Beat phase, visibility and summed reflected intensity of the two sidebands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SidebandResponse {
    pub phase: f64,
    pub visibility: f64,
    pub intensity: f64,
}

pub fn sideband_response(sys: &CavitySystem, e: Electron, carrier: f64, beat_freq: f64) -> SidebandResponse {
    let hi = r_nuclear_averaged(sys, e, carrier + 0.5 * beat_freq);
    let lo = r_nuclear_averaged(sys, e, carrier - 0.5 * beat_freq);
    let intensity = hi.norm_sqr() + lo.norm_sqr();
    let visibility = if intensity > 0.0 { 2.0 * hi.norm() * lo.norm() / intensity } else { 0.0 };
    SidebandResponse { phase: (hi * lo.conj()).arg(), visibility, intensity }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalModel {
    pub beat_freq: f64,
    pub phase_down: f64,
    pub phase_up: f64,
    /// Beat visibility per spin, jitter damping included.
    pub visibility_down: f64,
    pub visibility_up: f64,
    pub nbar_down: f64,
    pub nbar_up: f64,
    pub background_frac: f64,
    pub window: f64,
    cdf: [Vec<f64>; 2],
}

impl ArrivalModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        beat_freq: f64,
        phase_down: f64,
        phase_up: f64,
        visibility_down: f64,
        visibility_up: f64,
        nbar_down: f64,
        nbar_up: f64,
        background_frac: f64,
        window: f64,
    ) -> Result<Self> {
        for (name, v) in [("visibility_down", visibility_down), ("visibility_up", visibility_up)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(name, "must lie in [0, 1]"));
            }
        }
        if !(nbar_down >= 0.0 && nbar_up >= 0.0) {
            return Err(invalid("nbar", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&background_frac) {
            return Err(invalid("background_frac", "must lie in [0, 1]"));
        }
        let periods = window * beat_freq;
        if !(beat_freq > 0.0) || !(periods >= 1.0) || (periods - periods.round()).abs() > 1e-6 {
            return Err(invalid("window", "must be a whole number of beat periods"));
        }
        let mut m = Self {
            beat_freq,
            phase_down,
            phase_up,
            visibility_down,
            visibility_up,
            nbar_down,
            nbar_up,
            background_frac,
            window,
            cdf: [Vec::new(), Vec::new()],
        };
        m.cdf = [m.period_cdf(Electron::Down), m.period_cdf(Electron::Up)];
        Ok(m)
    }

    /// Model for the sideband pair around `carrier` with mean detected photon number `nbar`
    /// (averaged over the two electron states).
    pub fn from_cavity(sys: &CavitySystem, carrier: f64, settings: &ReadoutSettings, nbar: f64) -> Result<Self> {
        settings.validate()?;
        let d = sideband_response(sys, Electron::Down, carrier, settings.beat_freq);
        let u = sideband_response(sys, Electron::Up, carrier, settings.beat_freq);
        if d.intensity + u.intensity <= 0.0 {
            return Err(SivError::NoContrast);
        }
        let damp = settings.jitter_damping();
        let scale = 2.0 * nbar / (d.intensity + u.intensity);
        Self::new(
            settings.beat_freq,
            d.phase,
            u.phase,
            damp * d.visibility,
            damp * u.visibility,
            scale * d.intensity,
            scale * u.intensity,
            settings.background_frac,
            settings.window,
        )
    }

    /// Same shape, rescaled so the spin-averaged detected photon number is `nbar`.
    pub fn with_mean_nbar(&self, nbar: f64) -> Result<Self> {
        let mean = 0.5 * (self.nbar_down + self.nbar_up);
        if mean <= 0.0 {
            return Err(invalid("nbar", "model has no detected light to rescale"));
        }
        let mut m = self.clone();
        m.nbar_down *= nbar / mean;
        m.nbar_up *= nbar / mean;
        Ok(m)
    }

    fn params(&self, spin: Electron) -> (f64, f64) {
        match spin {
            Electron::Down => (self.phase_down, self.visibility_down),
            Electron::Up => (self.phase_up, self.visibility_up),
        }
    }

    pub fn nbar(&self, spin: Electron) -> f64 {
        match spin {
            Electron::Down => self.nbar_down,
            Electron::Up => self.nbar_up,
        }
    }

    /// CDF over one beat period on a uniform phase grid, from the closed-form integral.
    fn period_cdf(&self, spin: Electron) -> Vec<f64> {
        let (phi, v) = self.params(spin);
        let bg = self.background_frac;
        (0..=TABLE_POINTS)
            .map(|k| {
                let x = TWO_PI * k as f64 / TABLE_POINTS as f64;
                ((1.0 - bg) * (x + v * ((x + phi).sin() - phi.sin())) + bg * x) / TWO_PI
            })
            .collect()
    }

    /// Inverse-CDF sample of one arrival time.
    fn sample_time<R: Rng>(&self, spin: Electron, rng: &mut R) -> f64 {
        let cdf = &self.cdf[spin.index()];
        let u: f64 = rng.random();
        let i = cdf.partition_point(|&c| c <= u).clamp(1, TABLE_POINTS);
        let (c0, c1) = (cdf[i - 1], cdf[i]);
        let frac = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
        let period = 1.0 / self.beat_freq;
        let periods = (self.window * self.beat_freq).round() as u64;
        let k = rng.random_range(0..periods);
        (k as f64 + (i as f64 - 1.0 + frac) / TABLE_POINTS as f64) * period
    }
}

/// Raised sinusoid at the beat frequency plus flat background, normalized over the window.
pub fn arrival_pdf(model: &ArrivalModel, spin: Electron, t: f64) -> Result<f64> {
    if !(0.0..=model.window).contains(&t) {
        return Err(invalid("t", "outside the detection window"));
    }
    let (phi, v) = model.params(spin);
    let bg = model.background_frac;
    let p = ((1.0 - bg) * (1.0 + v * (TWO_PI * model.beat_freq * t + phi).cos()) + bg) / model.window;
    debug_assert!(p >= 0.0);
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BayesStep {
    pub posterior: f64,
    /// Both likelihoods vanished; the prior was returned unchanged.
    pub flagged: bool,
}

/// Posterior P(↓) after one arrival at `t`: p·P↓(t) / (p·P↓(t) + (1−p)·P↑(t)).
pub fn bayes_update(prior_down: f64, model: &ArrivalModel, t: f64) -> Result<BayesStep> {
    if !(0.0..=1.0).contains(&prior_down) {
        return Err(invalid("prior_down", "must lie in [0, 1]"));
    }
    let pd = arrival_pdf(model, Electron::Down, t)?;
    let pu = arrival_pdf(model, Electron::Up, t)?;
    let norm = prior_down * pd + (1.0 - prior_down) * pu;
    if norm <= 0.0 {
        return Ok(BayesStep { posterior: prior_down, flagged: true });
    }
    Ok(BayesStep { posterior: prior_down * pd / norm, flagged: false })
}

fn log_odds(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn from_log_odds(l: f64) -> f64 {
    if l >= 0.0 {
        1.0 / (1.0 + (-l).exp())
    } else {
        let e = l.exp();
        e / (1.0 + e)
    }
}

/// Batch update in log-odds; order of `times` is irrelevant.
pub fn bayes_update_batch(prior_down: f64, model: &ArrivalModel, times: &[f64]) -> Result<f64> {
    if !(0.0..=1.0).contains(&prior_down) {
        return Err(invalid("prior_down", "must lie in [0, 1]"));
    }
    if prior_down == 0.0 || prior_down == 1.0 {
        return Ok(prior_down);
    }
    let mut l = log_odds(prior_down);
    for &t in times {
        let pd = arrival_pdf(model, Electron::Down, t)?;
        let pu = arrival_pdf(model, Electron::Up, t)?;
        if pd > 0.0 && pu > 0.0 {
            l += pd.ln() - pu.ln();
        }
    }
    Ok(from_log_odds(l))
}

/// Posterior after observing `n` photons, Poisson likelihoods evaluated in log space.
pub fn poisson_update(p_down: f64, n: u64, nbar_down: f64, nbar_up: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_down) {
        return Err(invalid("p_down", "must lie in [0, 1]"));
    }
    if !(nbar_down >= 0.0 && nbar_up >= 0.0) {
        return Err(invalid("nbar", "must be >= 0"));
    }
    if p_down == 0.0 || p_down == 1.0 || nbar_down == nbar_up {
        return Ok(p_down);
    }
    // log λ^n e^{−λ}; the n! cancels
    let ll = |lam: f64| {
        if lam == 0.0 {
            if n == 0 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        } else {
            n as f64 * lam.ln() - lam
        }
    };
    Ok(from_log_odds(log_odds(p_down) + ll(nbar_down) - ll(nbar_up)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Down,
    Up,
    Discarded,
}

pub fn classify(posterior_down: f64, epsilon: f64) -> Result<Decision> {
    if !(0.0..=0.5).contains(&epsilon) {
        return Err(invalid("epsilon", "must lie in [0, 0.5]"));
    }
    Ok(if posterior_down > 1.0 - epsilon {
        Decision::Down
    } else if posterior_down < epsilon {
        Decision::Up
    } else if epsilon == 0.5 {
        // majority rule; a tie at exactly 0.5 reads as up
        Decision::Up
    } else {
        Decision::Discarded
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReadoutRecord {
    pub true_spin: Electron,
    pub n_detected: u64,
    pub arrival_times: Vec<f64>,
    pub posterior_down: f64,
    pub decision: Decision,
    pub epsilon: f64,
}

fn draw_count<R: Rng>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

fn simulate_with<R: Rng>(true_spin: Electron, model: &ArrivalModel, epsilon: f64, rng: &mut R) -> Result<ReadoutRecord> {
    let n = draw_count(model.nbar(true_spin), rng);
    let times: Vec<f64> = (0..n).map(|_| model.sample_time(true_spin, rng)).collect();
    let p = poisson_update(0.5, n, model.nbar_down, model.nbar_up)?;
    let p = bayes_update_batch(p, model, &times)?;
    Ok(ReadoutRecord {
        true_spin,
        n_detected: n,
        arrival_times: times,
        posterior_down: p,
        decision: classify(p, epsilon)?,
        epsilon,
    })
}

/// One readout with a flat prior: Poisson count, inverse-CDF arrival times, Bayes pipeline.
pub fn simulate_readout(true_spin: Electron, model: &ArrivalModel, epsilon: f64, seed: u64) -> Result<ReadoutRecord> {
    let mut r = rng::stream(seed, "simulate_readout", true_spin.index() as u64);
    simulate_with(true_spin, model, epsilon, &mut r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorRow {
    pub nbar: f64,
    pub err_raw: f64,
    pub err_post: f64,
    pub discard_frac: f64,
    /// Number of simulated readouts behind each rate (both spins).
    pub trials: u64,
}

/// Half the shots per true spin; raw errors use the 0.5 majority rule.
fn error_point(model: &ArrivalModel, shots: u64, epsilon: f64, seed: u64, tag: u64) -> Result<ErrorRow> {
    let per_spin = shots.div_ceil(2).max(1);
    let results: Vec<Result<(bool, Option<bool>)>> = (0..2 * per_spin)
        .into_par_iter()
        .map(|i| {
            let spin = if i % 2 == 0 { Electron::Down } else { Electron::Up };
            let mut r = rng::stream(rng::derive_seed(seed, "error_curve", tag), "shot", i);
            let rec = simulate_with(spin, model, epsilon, &mut r)?;
            let raw = classify(rec.posterior_down, 0.5)?;
            let raw_wrong = (raw == Decision::Down) != (spin == Electron::Down);
            let post = match rec.decision {
                Decision::Discarded => None,
                d => Some((d == Decision::Down) != (spin == Electron::Down)),
            };
            Ok((raw_wrong, post))
        })
        .collect();
    let (mut raw, mut post, mut kept) = (0u64, 0u64, 0u64);
    for res in results {
        let (w, p) = res?;
        raw += w as u64;
        if let Some(pw) = p {
            kept += 1;
            post += pw as u64;
        }
    }
    let total = 2 * per_spin;
    Ok(ErrorRow {
        nbar: 0.5 * (model.nbar_down + model.nbar_up),
        err_raw: raw as f64 / total as f64,
        err_post: if kept > 0 { post as f64 / kept as f64 } else { 0.5 },
        discard_frac: 1.0 - kept as f64 / total as f64,
        trials: total,
    })
}

pub fn error_curve(model: &ArrivalModel, nbar_grid: &[f64], shots: u64, epsilon: f64, seed: u64) -> Result<Vec<ErrorRow>> {
    if shots < 1000 {
        return Err(invalid("shots", "need at least 1000 shots per grid point"));
    }
    nbar_grid
        .iter()
        .enumerate()
        .map(|(i, &nb)| error_point(&model.with_mean_nbar(nb)?, shots, epsilon, seed, i as u64))
        .collect()
}

/// Simulated readouts split by the final posterior, for calibration checks.
pub fn simulate_many(model: &ArrivalModel, shots: u64, epsilon: f64, seed: u64) -> Result<Vec<ReadoutRecord>> {
    (0..shots)
        .into_par_iter()
        .map(|i| {
            let spin = if i % 2 == 0 { Electron::Down } else { Electron::Up };
            let mut r = rng::stream(seed, "simulate_many", i);
            simulate_with(spin, model, epsilon, &mut r)
        })
        .collect()
}

/// Distinguishability per input photon (Hellinger-type, over one beat period) divided by
/// the mean nuclear decoherence per input photon on the two sidebands.
pub fn phase_readout_fom(sys: &CavitySystem, carrier: f64, settings: &ReadoutSettings) -> f64 {
    let damp = settings.jitter_damping();
    let bg = settings.background_frac;
    let d = sideband_response(sys, Electron::Down, carrier, settings.beat_freq);
    let u = sideband_response(sys, Electron::Up, carrier, settings.beat_freq);
    const Q: usize = 128;
    let mut hell = 0.0;
    for k in 0..Q {
        let x = TWO_PI * k as f64 / Q as f64;
        let lam = |s: &SidebandResponse| {
            0.5 * s.intensity * ((1.0 - bg) * (1.0 + damp * s.visibility * (x + s.phase).cos()) + bg)
        };
        hell += (lam(&d).sqrt() - lam(&u).sqrt()).powi(2);
    }
    let dist = 0.5 * settings.path_efficiency * hell / Q as f64;
    let k = sideband_decoherence(sys, carrier, settings.beat_freq);
    if k <= 0.0 {
        return f64::INFINITY;
    }
    dist / k
}

/// Mean decoherence exponent per input photon when the photon is split over both sidebands,
/// averaged over the electron state.
pub fn sideband_decoherence(sys: &CavitySystem, carrier: f64, beat_freq: f64) -> f64 {
    let mut k = 0.0;
    for e in Electron::ALL {
        for w in [carrier - 0.5 * beat_freq, carrier + 0.5 * beat_freq] {
            k += decoherence_per_photon(sys, e, w);
        }
    }
    k / 4.0
}

/// Carrier that maximizes [`phase_readout_fom`] across the spectral feature window.
pub fn optimal_phase_carrier(sys: &CavitySystem, settings: &ReadoutSettings) -> Result<f64> {
    settings.validate()?;
    let (lo, hi) = sys.feature_window();
    let f = |w: f64| {
        let v = phase_readout_fom(sys, w, settings);
        if v.is_finite() {
            v
        } else {
            f64::MIN
        }
    };
    let (w, best) = grid_then_golden(f, lo, hi, 4001, 1e5);
    if !(best > 0.0) {
        return Err(SivError::NoContrast);
    }
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReadoutMethod {
    Phase,
    Resonant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReadoutBudget {
    pub method: ReadoutMethod,
    pub target_fidelity: f64,
    /// Mean detected photons per readout at the target fidelity.
    pub nbar_detected: f64,
    /// Mean photons sent to the cavity per readout.
    pub n_in: f64,
    /// Mean nuclear decoherence exponent per input photon.
    pub k_per_photon: f64,
    /// Readouts before the nuclear coherence falls to 1/e; infinite when k vanishes.
    pub count: f64,
}

/// Error of an optimal count-threshold test between two Poisson means (equal priors).
pub fn poisson_discrimination_error(nbar_a: f64, nbar_b: f64) -> f64 {
    if nbar_a == nbar_b {
        return 0.5;
    }
    let (lo, hi) = if nbar_a < nbar_b { (nbar_a, nbar_b) } else { (nbar_b, nbar_a) };
    // decide "hi" when N ≥ threshold, the first N where the likelihood ratio favors hi
    let threshold = if lo == 0.0 { 1.0 } else { ((hi - lo) / (hi / lo).ln()).floor() + 1.0 };
    let (mut cdf_lo, mut cdf_hi) = (0.0, 0.0);
    let (mut p_lo, mut p_hi) = ((-lo).exp(), (-hi).exp());
    let mut n = 0.0;
    while n < threshold {
        cdf_lo += p_lo;
        cdf_hi += p_hi;
        n += 1.0;
        p_lo *= lo / n;
        p_hi *= hi / n;
    }
    0.5 * ((1.0 - cdf_lo) + cdf_hi)
}

const NBAR_CAP: f64 = 1e4;

/// Readouts before 1/e nuclear coherence loss at `target_fidelity`.
///
/// Phase method: the detected photon number reaching the target raw error is located by
/// bisection on Monte Carlo error rates (common random numbers per seed). Resonant method: a
/// single tone at the maximum-contrast frequency with the nucleus down, discriminated by the
/// optimal photon-count threshold. Each readout multiplies the nuclear coherence by
/// exp(−k̄·n_in/2), so the count is 2/(k̄·n_in).
#[allow(clippy::too_many_arguments)]
pub fn readouts_before_decoherence(
    sys: &CavitySystem,
    settings: &ReadoutSettings,
    carrier: f64,
    target_fidelity: f64,
    method: ReadoutMethod,
    shots: u64,
    seed: u64,
) -> Result<ReadoutBudget> {
    settings.validate()?;
    if !(target_fidelity > 0.5 && target_fidelity < 1.0) {
        return Err(invalid("target_fidelity", "must lie in (0.5, 1)"));
    }
    let target_err = 1.0 - target_fidelity;
    let (nbar, n_in, k) = match method {
        ReadoutMethod::Resonant => {
            let w = resonant_readout_frequency(sys, Nuclear::Down)?;
            let rd = scatter_amplitudes(sys, SpinState::new(Electron::Down, Nuclear::Down), w).r.norm_sqr();
            let ru = scatter_amplitudes(sys, SpinState::new(Electron::Up, Nuclear::Down), w).r.norm_sqr();
            let eta = settings.path_efficiency;
            let err = |n_in: f64| poisson_discrimination_error(eta * rd * n_in, eta * ru * n_in);
            let n_in = first_crossing(err, target_err, NBAR_CAP / (eta * 0.5 * (rd + ru)).max(1e-12))?;
            let k = 0.5 * Electron::ALL.iter().map(|&e| decoherence_per_photon(sys, e, w)).sum::<f64>();
            (eta * 0.5 * (rd + ru) * n_in, n_in, k)
        }
        ReadoutMethod::Phase => {
            let base = ArrivalModel::from_cavity(sys, carrier, settings, 1.0)?;
            let err = |nb: f64| {
                base.with_mean_nbar(nb)
                    .and_then(|m| error_point(&m, shots, 0.5, seed, 0))
                    .map(|row| row.err_raw)
                    .unwrap_or(0.5)
            };
            let nbar = first_crossing(err, target_err, NBAR_CAP)?;
            let d = sideband_response(sys, Electron::Down, carrier, settings.beat_freq);
            let u = sideband_response(sys, Electron::Up, carrier, settings.beat_freq);
            // each sideband carries half of the input photons
            let mean_r = 0.25 * (d.intensity + u.intensity);
            let n_in = nbar / (settings.path_efficiency * mean_r);
            (nbar, n_in, sideband_decoherence(sys, carrier, settings.beat_freq))
        }
    };
    let count = if k > 0.0 { 2.0 / (k * n_in) } else { f64::INFINITY };
    Ok(ReadoutBudget { method, target_fidelity, nbar_detected: nbar, n_in, k_per_photon: k, count })
}

/// Smallest x in (0, cap] (to bisection precision) with err(x) ≤ target, scanning upward
/// geometrically and bisecting the first bracket.
fn first_crossing(err: impl Fn(f64) -> f64, target: f64, cap: f64) -> Result<f64> {
    let mut lo = 1e-3;
    if err(lo) <= target {
        return Ok(lo);
    }
    let mut hi = lo;
    let mut best = err(lo);
    loop {
        hi *= 1.25;
        let e = err(hi);
        best = best.min(e);
        if e <= target {
            break;
        }
        if hi >= cap {
            return Err(SivError::Unreachable { target: 1.0 - target, max_fidelity: 1.0 - best });
        }
        lo = hi;
    }
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if err(mid) <= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn model() -> ArrivalModel {
        ArrivalModel::new(600e6, 0.3, 2.1, 0.8, 0.7, 20.0, 24.0, 0.1, 100e-9).unwrap()
    }

    #[test]
    fn pdf_normalizes() {
        let m = model();
        for spin in Electron::ALL {
            let n = 200_000;
            let h = m.window / n as f64;
            let s: f64 = (0..n).map(|i| arrival_pdf(&m, spin, (i as f64 + 0.5) * h).unwrap() * h).sum();
            assert!((s - 1.0).abs() < 1e-9, "{s}");
        }
    }

    #[test]
    fn full_background_is_uniform() {
        let m = ArrivalModel::new(600e6, 0.3, 2.1, 0.8, 0.7, 20.0, 24.0, 1.0, 100e-9).unwrap();
        assert!((arrival_pdf(&m, Electron::Up, 3.3e-9).unwrap() - 1e7).abs() < 1e-3);
    }

    #[test]
    fn bayes_arithmetic() {
        let m = ArrivalModel::new(600e6, 0.3, 0.3, 0.8, 0.8, 20.0, 24.0, 0.1, 100e-9).unwrap();
        assert!((bayes_update(0.37, &m, 1e-9).unwrap().posterior - 0.37).abs() < 1e-15);
        // a 2:1 likelihood ratio from a fully modulated pair
        let m = ArrivalModel::new(600e6, 0.0, PI, 1.0 / 3.0, 1.0 / 3.0, 1.0, 1.0, 0.0, 100e-9).unwrap();
        let step = bayes_update(0.5, &m, 0.0).unwrap();
        assert!((step.posterior - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn poisson_update_matches_direct_formula() {
        let fact = |n: u64| (1..=n).map(|k| k as f64).product::<f64>();
        let pmf = |n: u64, l: f64| l.powi(n as i32) * (-l).exp() / fact(n);
        for n in 0..=20 {
            let (a, b) = (7.5, 11.0);
            let direct = 0.4 * pmf(n, a) / (0.4 * pmf(n, a) + 0.6 * pmf(n, b));
            assert!((poisson_update(0.4, n, a, b).unwrap() - direct).abs() < 1e-12);
        }
        assert_eq!(poisson_update(0.3, 5, 2.0, 2.0).unwrap(), 0.3);
        assert!(poisson_update(0.5, 0, 1.0, 2.0).unwrap() > 0.5);
    }

    #[test]
    fn classify_thresholds() {
        assert_eq!(classify(0.9, 0.2).unwrap(), Decision::Down);
        assert_eq!(classify(0.5, 0.2).unwrap(), Decision::Discarded);
        assert_eq!(classify(0.1, 0.2).unwrap(), Decision::Up);
        assert_eq!(classify(0.51, 0.5).unwrap(), Decision::Down);
        assert_eq!(classify(0.5, 0.5).unwrap(), Decision::Up);
        assert!(classify(0.5, 0.6).is_err());
    }

    #[test]
    fn sampled_times_follow_pdf() {
        let m = model();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let period = 1.0 / m.beat_freq;
        let bins = 8;
        let n = 200_000;
        let mut hist = vec![0usize; bins];
        for _ in 0..n {
            let t = m.sample_time(Electron::Down, &mut r);
            assert!((0.0..m.window).contains(&t));
            hist[(((t / period).fract()) * bins as f64) as usize % bins] += 1;
        }
        for (b, &c) in hist.iter().enumerate() {
            let lo = b as f64 / bins as f64 * period;
            let hi = lo + period / bins as f64;
            let expect: f64 = (0..100)
                .map(|k| arrival_pdf(&m, Electron::Down, lo + (k as f64 + 0.5) * (hi - lo) / 100.0).unwrap())
                .sum::<f64>()
                * (hi - lo)
                / 100.0
                * m.window
                / period;
            let got = c as f64 / n as f64;
            assert!((got - expect).abs() < 5.0 * (expect / n as f64).sqrt(), "bin {b}: {got} vs {expect}");
        }
    }

    #[test]
    fn readout_is_deterministic() {
        let m = model();
        assert_eq!(simulate_readout(Electron::Up, &m, 0.2, 9).unwrap(), simulate_readout(Electron::Up, &m, 0.2, 9).unwrap());
    }

    #[test]
    fn zero_light_error_is_one_half() {
        let m = model().with_mean_nbar(1e-9).unwrap();
        let row = error_point(&m, 2000, 0.2, 1, 0).unwrap();
        assert!((row.err_raw - 0.5).abs() < 1e-12);
        assert!((poisson_discrimination_error(0.0, 0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn poisson_discrimination_oracle() {
        // brute-force likelihood-ratio decision over counts
        let (a, b) = (3.0f64, 8.0f64);
        let mut err = 0.0;
        let (mut pa, mut pb) = ((-a).exp(), (-b).exp());
        for n in 0..200 {
            if n > 0 {
                pa *= a / n as f64;
                pb *= b / n as f64;
            }
            err += 0.5 * pa.min(pb);
        }
        assert!((poisson_discrimination_error(a, b) - err).abs() < 1e-12);
    }
}
