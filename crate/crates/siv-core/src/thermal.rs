//! Temperature dependence of electron and nuclear relaxation.
//!
//! Electron: direct single-phonon and resonant two-phonon (Orbach) processes plus a constant
//! magnetic-noise term. Nucleus: electron T1, a slow Gaussian ¹³C bath and two-level
//! fluctuators whose switching rate follows the phonon occupation at their transition
//! frequency. The fluctuator echo decay has an exact transfer-matrix form that the
//! calibration uses; the event-driven Monte Carlo reproduces it trajectory by trajectory.

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SivError};
use crate::rng;

const H_OVER_K: f64 = 6.626_070_15e-34 / 1.380_649e-23;
const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(invalid("temperature", "must be positive"));
    }
    Ok(())
}

/// Phonon occupation at frequency `f` (Hz) and temperature `t` (K).
pub fn bose(f: f64, t: f64) -> f64 {
    let x = H_OVER_K * f / t;
    if x > 700.0 {
        0.0
    } else {
        1.0 / x.exp_m1()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhononParams {
    pub delta_gs: f64,
    pub omega_qubit: f64,
    /// Single-phonon rate in Hz per GHz³ of qubit frequency.
    pub prefactor_1ph: f64,
    /// Two-phonon dephasing rate at unit occupation, Hz.
    pub prefactor_2ph: f64,
    /// Two-phonon spin-flip (Orbach) rate at unit occupation, Hz.
    pub orbach_prefactor: f64,
    pub t_noise_bath: f64,
    pub t2_c13: f64,
}

impl PhononParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("thermal.delta_gs", self.delta_gs),
            ("thermal.omega_qubit", self.omega_qubit),
            ("thermal.prefactor_1ph", self.prefactor_1ph),
            ("thermal.prefactor_2ph", self.prefactor_2ph),
            ("thermal.orbach_prefactor", self.orbach_prefactor),
            ("thermal.t_noise_bath", self.t_noise_bath),
            ("thermal.t2_c13", self.t2_c13),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(name, "must be positive"));
            }
        }
        if self.delta_gs < 2.0 * self.omega_qubit {
            return Err(invalid("thermal.delta_gs", "must be much larger than the qubit frequency"));
        }
        Ok(())
    }
}

pub fn two_phonon_rate(t: f64, p: &PhononParams) -> Result<f64> {
    check_temperature(t)?;
    Ok(p.prefactor_2ph * bose(p.delta_gs, t))
}

/// prefactor·ω³·(n̄ + ½): emission (n̄ + 1) and absorption (n̄) averaged.
pub fn single_phonon_rate(t: f64, p: &PhononParams) -> Result<f64> {
    check_temperature(t)?;
    let w = p.omega_qubit / 1e9;
    Ok(p.prefactor_1ph * w * w * w * (bose(p.omega_qubit, t) + 0.5))
}

pub fn electron_t1(t: f64, p: &PhononParams) -> Result<f64> {
    Ok(1.0 / (single_phonon_rate(t, p)? + p.orbach_prefactor * bose(p.delta_gs, t)))
}

pub fn electron_t2(t: f64, p: &PhononParams) -> Result<f64> {
    Ok(1.0 / (single_phonon_rate(t, p)? + two_phonon_rate(t, p)? + 1.0 / p.t_noise_bath))
}

/// Temperature where two-phonon dephasing overtakes the single-phonon rate.
pub fn crossover_temperature(p: &PhononParams) -> Result<f64> {
    let diff = |t: f64| two_phonon_rate(t, p).unwrap() - single_phonon_rate(t, p).unwrap();
    let (mut lo, mut hi) = (1e-3, 1e4);
    if diff(lo) > 0.0 || diff(hi) < 0.0 {
        return Err(SivError::Degenerate("no single/two-phonon crossover in range".into()));
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if diff(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok((lo * hi).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fluctuator {
    /// Phonon-addressable transition frequency, Hz.
    pub omega: f64,
    /// Frequency shift imposed on the nucleus, Hz.
    pub coupling: f64,
    /// Switching rate at unit phonon occupation, Hz.
    pub base_rate: f64,
}

impl Fluctuator {
    pub fn switching_rate(&self, t: f64) -> f64 {
        self.base_rate * bose(self.omega, t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluctuatorBath {
    pub fluctuators: Vec<Fluctuator>,
    /// Correlation time of the Gaussian ¹³C field.
    pub c13_correlation_time: f64,
}

impl FluctuatorBath {
    pub fn validate(&self) -> Result<()> {
        for (i, f) in self.fluctuators.iter().enumerate() {
            if !(f.omega > 0.0) || !(f.coupling >= 0.0) || !(f.base_rate >= 0.0) {
                return Err(invalid(&format!("thermal.fluctuators[{i}]"), "frequencies positive, rates >= 0"));
            }
        }
        if !(self.c13_correlation_time > 0.0) {
            return Err(invalid("thermal.c13_correlation_time", "must be positive"));
        }
        Ok(())
    }
}

/// n π pulses spread over `total` with CPMG timing (τ/2, τ, …, τ, τ/2); n = 0 is free decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecouplingSequence {
    pub pulses: usize,
    pub total: f64,
}

impl DecouplingSequence {
    pub fn hahn(total: f64) -> Self {
        Self { pulses: 1, total }
    }

    pub fn xy8(n: usize, total: f64) -> Result<Self> {
        if n == 0 || !n.is_multiple_of(8) {
            return Err(invalid("n_pulses", "must be a positive multiple of 8"));
        }
        Ok(Self { pulses: n, total })
    }

    /// Free-evolution interval lengths; the toggling sign alternates starting at +1.
    pub fn intervals(&self) -> Vec<f64> {
        if self.pulses == 0 {
            return vec![self.total];
        }
        let tau = self.total / self.pulses as f64;
        let mut v = vec![tau; self.pulses + 1];
        v[0] = 0.5 * tau;
        v[self.pulses] = 0.5 * tau;
        v
    }

    fn pulse_times(&self) -> Vec<f64> {
        let tau = self.total / self.pulses.max(1) as f64;
        (0..self.pulses).map(|k| (k as f64 + 0.5) * tau).collect()
    }
}

/// Exact echo coherence of one symmetric telegraph fluctuator (±coupling, flip rate `rate`),
/// starting from its stationary state.
pub fn telegraph_coherence(coupling: f64, rate: f64, seq: &DecouplingSequence) -> f64 {
    let c = TWO_PI * coupling;
    if c == 0.0 {
        return 1.0;
    }
    let g = rate;
    // M = −g·I + N with N² = μ²·I, μ² = g² − c²
    let mu = Complex64::new(g * g - c * c, 0.0).sqrt();
    let mut w = [Complex64::new(0.5, 0.0); 2];
    for (k, &len) in seq.intervals().iter().enumerate() {
        let s = if k % 2 == 0 { 1.0 } else { -1.0 };
        // e^{−gL}cosh(μL) and e^{−gL}sinh(μL)/μ without overflow; μ − g = −c²/(μ + g)
        let ep = (-(c * c) / (mu + g) * len).exp();
        let em = ((-mu - g) * len).exp();
        let ch = 0.5 * (ep + em);
        let sh = if (mu * len).norm() < 1e-4 {
            (-g * len).exp() * len * (1.0 + mu * mu * len * len / 6.0)
        } else {
            (ep - em) / (2.0 * mu)
        };
        let ic = Complex64::new(0.0, s * c);
        let n00 = ic;
        let n11 = -ic;
        let (a, b) = (w[0], w[1]);
        w[0] = ch * a + sh * (n00 * a + g * b);
        w[1] = ch * b + sh * (g * a + n11 * b);
    }
    (w[0] + w[1]).re
}

/// ⟨φ²⟩ of a unit-variance Ornstein-Uhlenbeck field under the toggling filter.
fn ou_phase_variance(tau_c: f64, seq: &DecouplingSequence) -> f64 {
    let mut total = 0.0;
    let mut carry = 0.0;
    for (k, &len) in seq.intervals().iter().enumerate() {
        let s = if k % 2 == 0 { 1.0 } else { -1.0 };
        let x = len / tau_c;
        let self_term = if x < 1e-4 { x * x / 2.0 - x * x * x / 6.0 + x.powi(4) / 24.0 } else { x + (-x).exp_m1() };
        let a = -(-x).exp_m1();
        total += 2.0 * tau_c * tau_c * self_term + 2.0 * s * tau_c * tau_c * a * carry;
        carry = carry * (-x).exp() + s * a;
    }
    total
}

/// Exact coherence of the Gaussian ¹³C field whose Hahn-echo 1/e time is `t2_echo`.
pub fn c13_coherence(t2_echo: f64, tau_c: f64, seq: &DecouplingSequence) -> f64 {
    let var_hahn = ou_phase_variance(tau_c, &DecouplingSequence::hahn(t2_echo));
    let sigma2 = 2.0 / var_hahn;
    (-0.5 * sigma2 * ou_phase_variance(tau_c, seq)).exp()
}

/// Time at which a decreasing coherence first reaches 1/e; infinite if it never does.
fn one_over_e_time(coherence: impl Fn(f64) -> f64, scale: f64) -> f64 {
    let target = (-1.0f64).exp();
    let mut lo = 0.0;
    let mut hi = scale;
    while coherence(hi) > target {
        lo = hi;
        hi *= 2.0;
        if hi > 1e12 {
            return f64::INFINITY;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if coherence(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-16 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Hahn-echo dephasing rate 1/T2 from one fluctuator at temperature `t`.
pub fn fluctuator_rate(f: &Fluctuator, t: f64) -> f64 {
    let rate = f.switching_rate(t);
    if f.coupling == 0.0 {
        return 0.0;
    }
    let scale = 1.0 / (TWO_PI * f.coupling);
    1.0 / one_over_e_time(|x| telegraph_coherence(f.coupling, rate, &DecouplingSequence::hahn(x)), scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThermalModel {
    pub phonon: PhononParams,
    pub bath: FluctuatorBath,
}

impl ThermalModel {
    pub fn validate(&self) -> Result<()> {
        self.phonon.validate()?;
        self.bath.validate()
    }

    /// 1/T2 = 1/T1,e + 1/T2,¹³C + Σ 1/T2,fluctuator, each from a Hahn echo.
    pub fn nuclear_t2(&self, t: f64) -> Result<f64> {
        self.nuclear_t2_with(t, &self.bath.fluctuators)
    }

    fn nuclear_t2_with(&self, t: f64, fl: &[Fluctuator]) -> Result<f64> {
        let mut rate = 1.0 / electron_t1(t, &self.phonon)? + 1.0 / self.phonon.t2_c13;
        for f in fl {
            rate += fluctuator_rate(f, t);
        }
        Ok(1.0 / rate)
    }

    /// Same sum without the fluctuator bath.
    pub fn nuclear_t2_without_fluctuators(&self, t: f64) -> Result<f64> {
        self.nuclear_t2_with(t, &[])
    }

    /// Exact coherence under `seq`: fluctuators, ¹³C field and electron-T1 dephasing.
    pub fn nuclear_coherence(&self, t: f64, seq: &DecouplingSequence) -> Result<f64> {
        let mut c = c13_coherence(self.phonon.t2_c13, self.bath.c13_correlation_time, seq);
        for f in &self.bath.fluctuators {
            c *= telegraph_coherence(f.coupling, f.switching_rate(t), seq);
        }
        Ok(c * (-seq.total / electron_t1(t, &self.phonon)?).exp())
    }
}

/// Anchor values and shape choices for [`calibrate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermalCalibration {
    pub delta_gs: f64,
    pub omega_qubit: f64,
    pub t_low: f64,
    pub t_high: f64,
    pub t1_e_low: f64,
    pub t1_e_high: f64,
    pub t2_e_low: f64,
    pub t2_e_high: f64,
    pub t2_n_low: f64,
    pub t2_n_high: f64,
    /// Transition frequencies of the low and high fluctuator, Hz.
    pub fluctuator_omegas: [f64; 2],
    /// Switching rate of the low fluctuator at `t_low`.
    pub low_rate_at_t_low: f64,
    /// Share of the non-T1 nuclear dephasing rate at `t_low` carried by the low fluctuator.
    pub low_share_at_t_low: f64,
    /// Switching rate of the high fluctuator at `t_high`.
    pub high_rate_at_t_high: f64,
    pub c13_correlation_time: f64,
}

impl Default for ThermalCalibration {
    fn default() -> Self {
        Self {
            delta_gs: 554e9,
            omega_qubit: 12e9,
            t_low: 0.1,
            t_high: 4.3,
            t1_e_low: 2.9,
            t1_e_high: 17e-3,
            t2_e_low: 78e-6,
            t2_e_high: 400e-9,
            t2_n_low: 79e-3,
            t2_n_high: 4.5e-3,
            fluctuator_omegas: [26e9, 34e9],
            low_rate_at_t_low: 20.0,
            low_share_at_t_low: 0.3,
            high_rate_at_t_high: 1000.0,
            c13_correlation_time: 1.0,
        }
    }
}

/// Smallest coupling whose Hahn rate reaches `target`, by geometric bracketing and bisection.
fn solve_coupling(omega: f64, base_rate: f64, t: f64, target: f64) -> Result<f64> {
    if target <= 0.0 {
        return Ok(0.0);
    }
    let rate_at = |c: f64| fluctuator_rate(&Fluctuator { omega, coupling: c, base_rate }, t);
    let mut lo = 0.0;
    let mut hi = 1e-3;
    while rate_at(hi) < target {
        lo = hi;
        hi *= 1.5;
        if hi > 1e9 {
            return Err(SivError::Fit(format!("fluctuator at {:.0} GHz cannot reach {target:.3} Hz", omega / 1e9)));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate_at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Fits every prefactor so the model passes the anchors exactly.
pub fn calibrate(c: &ThermalCalibration) -> Result<ThermalModel> {
    let (tl, th) = (c.t_low, c.t_high);
    check_temperature(tl)?;
    check_temperature(th)?;
    if !(th > tl) {
        return Err(invalid("thermal.t_high", "must exceed t_low"));
    }
    let w3 = (c.omega_qubit / 1e9).powi(3);
    let occ1 = |t: f64| w3 * (bose(c.omega_qubit, t) + 0.5);
    let occ2 = |t: f64| bose(c.delta_gs, t);
    // T1: a·occ1 + b·occ2 = 1/T1 at both anchors
    let solve = |r_low: f64, r_high: f64, f: &dyn Fn(f64) -> f64, g: &dyn Fn(f64) -> f64| -> (f64, f64) {
        let det = f(tl) * g(th) - f(th) * g(tl);
        ((r_low * g(th) - r_high * g(tl)) / det, (f(tl) * r_high - f(th) * r_low) / det)
    };
    let (a1, orbach) = solve(1.0 / c.t1_e_low, 1.0 / c.t1_e_high, &occ1, &occ2);
    // T2: the same single-phonon rate, two-phonon dephasing and a constant bath
    let one = |_t: f64| 1.0;
    let r_low = 1.0 / c.t2_e_low - a1 * occ1(tl);
    let r_high = 1.0 / c.t2_e_high - a1 * occ1(th);
    let (pre2, noise) = solve(r_low, r_high, &occ2, &one);
    if !(a1 > 0.0 && orbach > 0.0 && pre2 > 0.0 && noise > 0.0) {
        return Err(SivError::Fit("anchor values admit no positive phonon prefactors".into()));
    }

    let [w_low, w_high] = c.fluctuator_omegas;
    let base_low = c.low_rate_at_t_low / bose(w_low, tl);
    let base_high = c.high_rate_at_t_high / bose(w_high, th);
    let mut phonon = PhononParams {
        delta_gs: c.delta_gs,
        omega_qubit: c.omega_qubit,
        prefactor_1ph: a1,
        prefactor_2ph: pre2,
        orbach_prefactor: orbach,
        t_noise_bath: 1.0 / noise,
        t2_c13: f64::INFINITY,
    };
    let t1_low = electron_t1(tl, &phonon)?;
    let t1_high = electron_t1(th, &phonon)?;
    let residual_low = 1.0 / c.t2_n_low - 1.0 / t1_low;
    let low_target = c.low_share_at_t_low * residual_low;
    let c_low = solve_coupling(w_low, base_low, tl, low_target)?;
    let low = Fluctuator { omega: w_low, coupling: c_low, base_rate: base_low };
    let mut high = Fluctuator { omega: w_high, coupling: 0.0, base_rate: base_high };
    let mut c13_rate = residual_low - fluctuator_rate(&low, tl);
    for _ in 0..50 {
        let need = 1.0 / c.t2_n_high - 1.0 / t1_high - c13_rate - fluctuator_rate(&low, th);
        high.coupling = solve_coupling(w_high, base_high, th, need)?;
        let next = residual_low - fluctuator_rate(&low, tl) - fluctuator_rate(&high, tl);
        let done = (next - c13_rate).abs() <= 1e-14 * c13_rate.abs();
        c13_rate = next;
        if done {
            break;
        }
    }
    if !(c13_rate > 0.0) {
        return Err(SivError::Fit("fluctuators alone exceed the low-temperature nuclear rate".into()));
    }
    phonon.t2_c13 = 1.0 / c13_rate;
    let model = ThermalModel {
        phonon,
        bath: FluctuatorBath { fluctuators: vec![low, high], c13_correlation_time: c.c13_correlation_time },
    };
    model.validate()?;
    Ok(model)
}

/// ∫₀ᵀ s(t)·f(t) dt for a telegraph path (`switches`, initial sign `s0`) against the
/// toggling function that flips at `pulses`.
fn signed_overlap(switches: &[f64], s0: f64, pulses: &[f64], total: f64) -> f64 {
    let (mut i, mut j) = (0, 0);
    let (mut t, mut s, mut f, mut acc) = (0.0, s0, 1.0, 0.0);
    loop {
        let next_sw = switches.get(i).copied().unwrap_or(f64::INFINITY);
        let next_p = pulses.get(j).copied().unwrap_or(f64::INFINITY);
        let next = next_sw.min(next_p).min(total);
        acc += s * f * (next - t);
        t = next;
        if t >= total {
            return acc;
        }
        if next_sw <= next_p {
            s = -s;
            i += 1;
        } else {
            f = -f;
            j += 1;
        }
    }
}

fn telegraph_phase<R: Rng>(f: &Fluctuator, rate: f64, pulses: &[f64], total: f64, rng: &mut R) -> f64 {
    let s0 = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let mut switches = Vec::new();
    if rate > 0.0 {
        let mut t = 0.0;
        loop {
            t += -(1.0 - rng.random::<f64>()).ln() / rate;
            if t >= total {
                break;
            }
            switches.push(t);
        }
    }
    TWO_PI * f.coupling * signed_overlap(&switches, s0, pulses, total)
}

/// Trajectory average of the fluctuator phase factor; returns (mean, standard error).
pub fn motional_mc(bath: &FluctuatorBath, t: f64, seq: &DecouplingSequence, shots: u64, seed: u64) -> Result<(f64, f64)> {
    check_temperature(t)?;
    let rates: Vec<f64> = bath.fluctuators.iter().map(|f| f.switching_rate(t)).collect();
    telegraph_mc(&bath.fluctuators, &rates, seq, shots, seed)
}

/// Same as [`motional_mc`] with explicit switching rates.
pub fn telegraph_mc(
    fluctuators: &[Fluctuator],
    rates: &[f64],
    seq: &DecouplingSequence,
    shots: u64,
    seed: u64,
) -> Result<(f64, f64)> {
    if shots < 1000 {
        return Err(invalid("shots", "need at least 1000 trajectories"));
    }
    if rates.len() != fluctuators.len() {
        return Err(SivError::Dimension("one switching rate per fluctuator".into()));
    }
    let pulses = seq.pulse_times();
    let samples: Vec<f64> = (0..shots)
        .into_par_iter()
        .map(|k| {
            let mut r = rng::stream(seed, "motional_mc", k);
            let phase: f64 = fluctuators.iter().zip(rates).map(|(f, &g)| telegraph_phase(f, g, &pulses, seq.total, &mut r)).sum();
            phase.cos()
        })
        .collect();
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct T2Row {
    pub n_pulses: usize,
    pub t2: f64,
    pub t2_err: f64,
    pub beta: f64,
    pub fit_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct T2Scaling {
    pub rows: Vec<T2Row>,
    /// Power-law exponent of T2 ∝ n^α over the rows that fitted.
    pub alpha: f64,
}

/// Weighted least squares y = a + b·x; returns (a, b, cov).
fn weighted_line(x: &[f64], y: &[f64], w: &[f64]) -> Option<(f64, f64, [[f64; 2]; 2])> {
    let (mut s, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ((&xi, &yi), &wi) in x.iter().zip(y).zip(w) {
        s += wi;
        sx += wi * xi;
        sy += wi * yi;
        sxx += wi * xi * xi;
        sxy += wi * xi * yi;
    }
    let det = s * sxx - sx * sx;
    if x.len() < 2 || det.abs() < 1e-300 {
        return None;
    }
    let b = (s * sxy - sx * sy) / det;
    let a = (sy - b * sx) / s;
    Some((a, b, [[sxx / det, -sx / det], [-sx / det, s / det]]))
}

const FIT_FRACTIONS: [f64; 8] = [0.3, 0.5, 0.7, 0.85, 1.0, 1.2, 1.5, 2.0];

/// Nuclear XY8-n coherence curves (fluctuators by Monte Carlo, ¹³C field and electron T1
/// exact) fitted to exp[−(t/T2)^β], plus the power-law exponent of T2 in n.
pub fn t2_vs_n(model: &ThermalModel, t: f64, n_list: &[usize], shots: u64, seed: u64) -> Result<T2Scaling> {
    check_temperature(t)?;
    if n_list.is_empty() {
        return Err(SivError::Empty("pulse-number list".into()));
    }
    let rates: Vec<f64> = model.bath.fluctuators.iter().map(|f| f.switching_rate(t)).collect();
    let mut rows = Vec::with_capacity(n_list.len());
    for (idx, &n) in n_list.iter().enumerate() {
        DecouplingSequence::xy8(n, 1.0)?;
        let exact = |x: f64| model.nuclear_coherence(t, &DecouplingSequence { pulses: n, total: x }).unwrap_or(0.0);
        let guess = one_over_e_time(exact, 1e-3);
        let (mut xs, mut ys, mut ws) = (Vec::new(), Vec::new(), Vec::new());
        if guess.is_finite() {
            for (j, frac) in FIT_FRACTIONS.iter().enumerate() {
                let seq = DecouplingSequence { pulses: n, total: frac * guess };
                let (mc, err) = telegraph_mc(&model.bath.fluctuators, &rates, &seq, shots, rng::derive_seed(seed, "t2_vs_n", (idx * 64 + j) as u64))?;
                let rest = c13_coherence(model.phonon.t2_c13, model.bath.c13_correlation_time, &seq)
                    * (-seq.total / electron_t1(t, &model.phonon)?).exp();
                let c = mc * rest;
                let sc = (err * rest).max(1e-6);
                if c > 0.02 && c < 0.98 {
                    let l = -c.ln();
                    xs.push(seq.total.ln());
                    ys.push(l.ln());
                    let sy = sc / (c * l);
                    ws.push(1.0 / (sy * sy));
                }
            }
        }
        let row = match weighted_line(&xs, &ys, &ws) {
            Some((a, b, cov)) if b > 0.0 => {
                let ln_t2 = -a / b;
                // gradient of −a/b with respect to (a, b)
                let (ga, gb) = (-1.0 / b, a / (b * b));
                let var = ga * ga * cov[0][0] + 2.0 * ga * gb * cov[0][1] + gb * gb * cov[1][1];
                let t2 = ln_t2.exp();
                T2Row { n_pulses: n, t2, t2_err: t2 * var.max(0.0).sqrt(), beta: b, fit_ok: true }
            }
            _ => T2Row { n_pulses: n, t2: f64::NAN, t2_err: f64::NAN, beta: f64::NAN, fit_ok: false },
        };
        rows.push(row);
    }
    let ok: Vec<&T2Row> = rows.iter().filter(|r| r.fit_ok).collect();
    let x: Vec<f64> = ok.iter().map(|r| (r.n_pulses as f64).ln()).collect();
    let y: Vec<f64> = ok.iter().map(|r| r.t2.ln()).collect();
    let alpha = weighted_line(&x, &y, &vec![1.0; x.len()]).map(|l| l.1).unwrap_or(f64::NAN);
    Ok(T2Scaling { rows, alpha })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct T1Row {
    pub temperature_k: f64,
    pub delta_gs_hz: f64,
    pub t1_norm_inverse: f64,
}

/// T1,0/T1(T) for each splitting, normalized at 0.1 K, using the calibrated prefactors.
pub fn t1_curves(splittings: &[f64], t_grid: &[f64], p: &PhononParams) -> Result<Vec<T1Row>> {
    if t_grid.iter().any(|&t| !(0.1..=5.0).contains(&t)) {
        return Err(invalid("t_grid", "temperatures must lie in [0.1, 5] K"));
    }
    let mut out = Vec::new();
    for &d in splittings {
        let q = PhononParams { delta_gs: d, ..*p };
        q.validate()?;
        let base = 1.0 / electron_t1(0.1, &q)?;
        for &t in t_grid {
            out.push(T1Row { temperature_k: t, delta_gs_hz: d, t1_norm_inverse: (1.0 / electron_t1(t, &q)?) / base });
        }
    }
    Ok(out)
}

/// Ground-state splittings compared in the T1 robustness curves.
pub const STRAIN_SPLITTINGS: [f64; 5] = [50e9, 150e9, 300e9, 416e9, 554e9];

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ThermalModel {
        calibrate(&ThermalCalibration::default()).unwrap()
    }

    #[test]
    fn bose_limits() {
        assert_eq!(bose(554e9, 1e-3), 0.0);
        let t = 300.0;
        let f = 1e9;
        assert!((bose(f, t) - t / (H_OVER_K * f)).abs() / bose(f, t) < 1e-3);
    }

    #[test]
    fn anchors_are_exact() {
        let c = ThermalCalibration::default();
        let m = model();
        let rel = |a: f64, b: f64| ((a - b) / b).abs();
        assert!(rel(electron_t2(0.1, &m.phonon).unwrap(), 78e-6) < 1e-9);
        assert!(rel(electron_t2(4.3, &m.phonon).unwrap(), 400e-9) < 1e-9);
        assert!(rel(electron_t1(0.1, &m.phonon).unwrap(), c.t1_e_low) < 1e-9);
        assert!(rel(electron_t1(4.3, &m.phonon).unwrap(), c.t1_e_high) < 1e-9);
        assert!(rel(m.nuclear_t2(0.1).unwrap(), 79e-3) < 1e-9, "{}", m.nuclear_t2(0.1).unwrap());
        assert!(rel(m.nuclear_t2(4.3).unwrap(), 4.5e-3) < 1e-9, "{}", m.nuclear_t2(4.3).unwrap());
    }

    #[test]
    fn nuclear_curve_rises_then_falls() {
        let m = model();
        let base = m.nuclear_t2(0.1).unwrap();
        let grid: Vec<f64> = (1..=45).map(|k| 0.1 * k as f64).collect();
        let vals: Vec<f64> = grid.iter().map(|&t| m.nuclear_t2(t).unwrap()).collect();
        let peak = vals.iter().cloned().fold(0.0, f64::max);
        assert!(peak > 1.2 * base, "{peak} {base}");
        assert!(*vals.last().unwrap() < base);
        let plain: Vec<f64> = grid.iter().map(|&t| m.nuclear_t2_without_fluctuators(t).unwrap()).collect();
        assert!(plain.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn electron_limits() {
        let m = model();
        assert!((electron_t2(1e-3, &m.phonon).unwrap() - 1.0 / (1.0 / m.phonon.t_noise_bath + single_phonon_rate(1e-3, &m.phonon).unwrap())).abs() < 1e-18);
        assert!(two_phonon_rate(1e-3, &m.phonon).unwrap() == 0.0);
        assert!(two_phonon_rate(0.0, &m.phonon).is_err());
        let mut q = m.phonon;
        let r0 = single_phonon_rate(1e-3, &q).unwrap();
        q.omega_qubit *= 2.0;
        assert!((single_phonon_rate(1e-3, &q).unwrap() / r0 - 8.0).abs() < 1e-9);
        let hi = |t| single_phonon_rate(t, &m.phonon).unwrap();
        assert!((hi(2000.0) / hi(1000.0) - 2.0).abs() < 1e-3);
    }

    #[test]
    fn larger_splitting_is_more_robust() {
        let m = model();
        let mut last_rate = f64::INFINITY;
        let mut last_cross = 0.0;
        for d in STRAIN_SPLITTINGS {
            let q = PhononParams { delta_gs: d, ..m.phonon };
            let r = two_phonon_rate(2.0, &q).unwrap();
            assert!(r < last_rate);
            last_rate = r;
            let x = crossover_temperature(&q).unwrap();
            assert!(x > last_cross);
            last_cross = x;
        }
        let rows = t1_curves(&STRAIN_SPLITTINGS, &[0.1, 4.0], &m.phonon).unwrap();
        let at4: Vec<f64> = rows.iter().filter(|r| r.temperature_k == 4.0).map(|r| r.t1_norm_inverse).collect();
        assert!(at4.windows(2).all(|w| w[1] < w[0]), "{at4:?}");
        assert!(rows.iter().filter(|r| r.temperature_k == 0.1).all(|r| r.t1_norm_inverse == 1.0));
    }

    #[test]
    fn telegraph_exact_limits() {
        let seq = DecouplingSequence::hahn(1e-2);
        assert_eq!(telegraph_coherence(0.0, 10.0, &seq), 1.0);
        // no switching: the echo refocuses a static shift
        assert!((telegraph_coherence(50.0, 0.0, &seq) - 1.0).abs() < 1e-12);
        // free decay with no switching is cos(2π c t)
        let fid = DecouplingSequence { pulses: 0, total: 1e-2 };
        assert!((telegraph_coherence(20.0, 0.0, &fid) - (TWO_PI * 20.0 * 1e-2).cos()).abs() < 1e-12);
        // free decay closed form e^{−γt}[cosh μt + (γ/μ) sinh μt]
        let (c, g, t): (f64, f64, f64) = (30.0, 500.0, 1e-2);
        let w = TWO_PI * c;
        let mu = (g * g - w * w).sqrt();
        let oracle = (-g * t).exp() * ((mu * t).cosh() + g / mu * (mu * t).sinh());
        let fid = DecouplingSequence { pulses: 0, total: t };
        assert!((telegraph_coherence(c, g, &fid) - oracle).abs() < 1e-12);
    }

    #[test]
    fn mc_matches_exact_telegraph() {
        let f = Fluctuator { omega: 26e9, coupling: 40.0, base_rate: 1.0 };
        for (rate, n) in [(30.0, 1), (300.0, 8), (5.0, 16)] {
            let seq = DecouplingSequence { pulses: n, total: 2e-2 };
            let (mc, err) = telegraph_mc(&[f], &[rate], &seq, 20_000, 5).unwrap();
            let exact = telegraph_coherence(f.coupling, rate, &seq);
            assert!((mc - exact).abs() < 4.0 * err + 1e-3, "{rate} {n}: {mc} ± {err} vs {exact}");
        }
    }

    #[test]
    fn c13_exact_forms() {
        let tc = 1.0;
        // Hahn anchor by construction
        assert!((c13_coherence(0.1, tc, &DecouplingSequence::hahn(0.1)) - (-1.0f64).exp()).abs() < 1e-12);
        // brute-force double integral of the OU covariance under the toggling filter
        let seq = DecouplingSequence { pulses: 8, total: 0.05 };
        let m = 4000;
        let dt = seq.total / m as f64;
        let pulses = seq.pulse_times();
        let sign = |t: f64| if pulses.iter().filter(|&&p| p < t).count() % 2 == 0 { 1.0 } else { -1.0 };
        let tc2 = 0.03;
        let mut brute = 0.0;
        for i in 0..m {
            let ti = (i as f64 + 0.5) * dt;
            for j in 0..m {
                let tj = (j as f64 + 0.5) * dt;
                brute += sign(ti) * sign(tj) * (-(ti - tj).abs() / tc2).exp() * dt * dt;
            }
        }
        let exact = ou_phase_variance(tc2, &seq);
        assert!((brute - exact).abs() < 2e-3 * exact, "{brute} {exact}");
    }

    #[test]
    fn signed_overlap_by_hand() {
        // s flips at 0.3, f flips at 0.5: +0.3 − 0.2 + 0.5
        assert!((signed_overlap(&[0.3], 1.0, &[0.5], 1.0) - 0.6).abs() < 1e-15);
        assert!((signed_overlap(&[], -1.0, &[], 2.0) + 2.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_input() {
        let f = Fluctuator { omega: 26e9, coupling: 1.0, base_rate: 1.0 };
        assert!(telegraph_mc(&[f], &[1.0], &DecouplingSequence::hahn(1.0), 10, 1).is_err());
        assert!(DecouplingSequence::xy8(12, 1.0).is_err());
        assert!(t1_curves(&[554e9], &[6.0], &model().phonon).is_err());
    }
}
