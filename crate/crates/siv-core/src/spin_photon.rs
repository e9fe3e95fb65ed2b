//! Time-bin photon interacting with the register: the electron-photon gate, the PHONE gate
//! with its electron flag, Bell-fidelity estimation, error budgets and storage decay.
//!
//! The joint space is photon {vacuum, early, late} ⊗ nucleus ⊗ electron (index
//! 4p + 2n + e). Only the single-photon sector is propagated; herald probabilities carry the
//! incident mean photon number. MW gates are ideal permutations. Their errors, electron
//! initialization errors and inter-bin dephasing are injected as Pauli events whose
//! probabilities are calibrated so the mean effect equals the budget factor.

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cavity_qed::{grid_then_golden, resonant_readout_frequency, scatter_amplitudes, CavitySystem};
use crate::error::{invalid, Result, SivError};
use crate::quantum_core::{bell_overlap, DensityMatrix, ZERO};
use crate::rng;
use crate::spin::{Electron, Nuclear, SpinState};

const DIM: usize = 12;
type Ket = [Complex64; DIM];

fn idx(p: usize, n: usize, e: usize) -> usize {
    4 * p + 2 * n + e
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    ElectronPhoton,
    Phone,
}

impl GateKind {
    pub fn name(self) -> &'static str {
        match self {
            GateKind::ElectronPhoton => "electron_photon",
            GateKind::Phone => "phone",
        }
    }

    fn mw_pulses(self) -> usize {
        match self {
            GateKind::ElectronPhoton => 2,
            GateKind::Phone => 4,
        }
    }
}

/// Multiplicative fidelity factors for one gate at one temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBudget {
    pub gate: GateKind,
    pub temperature: f64,
    pub initialization: f64,
    pub mw_gates: f64,
    pub siv_contrast: f64,
    pub dark_counts: f64,
    pub two_photon: f64,
    pub readout: f64,
    /// Only the XX and YY bases see the interferometer and dephasing factors.
    pub tdi_contrast: f64,
    pub tdi_lock: f64,
    pub t2_dephasing: f64,
}

impl ErrorBudget {
    fn factors(&self) -> [(&'static str, f64); 9] {
        [
            ("initialization", self.initialization),
            ("mw_gates", self.mw_gates),
            ("siv_contrast", self.siv_contrast),
            ("dark_counts", self.dark_counts),
            ("two_photon", self.two_photon),
            ("readout", self.readout),
            ("tdi_contrast", self.tdi_contrast),
            ("tdi_lock", self.tdi_lock),
            ("t2_dephasing", self.t2_dephasing),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in self.factors() {
            if !(f > 0.0 && f <= 1.0) {
                return Err(invalid(&format!("budget.{name}"), "factor must lie in (0, 1]"));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(invalid("budget.temperature", "must be positive"));
        }
        Ok(())
    }

    fn common(&self) -> f64 {
        self.initialization * self.mw_gates * self.siv_contrast * self.dark_counts * self.two_photon * self.readout
    }

    fn xx_only(&self) -> f64 {
        self.tdi_contrast * self.tdi_lock * self.t2_dephasing
    }
}

/// Measured budgets: electron-photon at 0.1 K and 1.5 K, PHONE at 0.1 K and 4.3 K.
pub fn default_budgets() -> Vec<ErrorBudget> {
    let ep = ErrorBudget {
        gate: GateKind::ElectronPhoton,
        temperature: 0.1,
        initialization: 0.995,
        mw_gates: 0.99,
        siv_contrast: 0.96,
        dark_counts: 0.997,
        two_photon: 0.998,
        readout: 0.995,
        tdi_contrast: 0.967,
        tdi_lock: 0.98,
        t2_dephasing: 0.997,
    };
    let phone = ErrorBudget { gate: GateKind::Phone, mw_gates: 0.94, siv_contrast: 0.94, ..ep };
    vec![
        ep,
        ErrorBudget { temperature: 1.5, ..ep },
        phone,
        ErrorBudget { temperature: 4.3, initialization: 0.970, mw_gates: 0.89, t2_dephasing: 0.680, ..phone },
    ]
}

pub fn find_budget(budgets: &[ErrorBudget], gate: GateKind, temperature: f64) -> Result<ErrorBudget> {
    budgets
        .iter()
        .find(|b| b.gate == gate && (b.temperature - temperature).abs() < 1e-9)
        .copied()
        .ok_or_else(|| SivError::Unknown {
            kind: "budget".into(),
            name: format!("{} at {temperature} K", gate.name()),
        })
}

/// F = common · (½ + ½·Π XX-only): the ZZ half of ½P_zz + ¼P_xx + ¼P_yy is exempt from the
/// interferometer and dephasing factors.
pub fn budget_product(budget: &ErrorBudget) -> Result<f64> {
    budget.validate()?;
    Ok(budget.common() * (0.5 + 0.5 * budget.xx_only()))
}

/// Same as [`budget_product`] with the SiV contrast factor replaced by `contrast_fidelity`.
pub fn budget_with_contrast(budget: &ErrorBudget, contrast_fidelity: f64) -> Result<f64> {
    budget_product(&ErrorBudget { siv_contrast: contrast_fidelity, ..*budget })
}

/// Reflection amplitudes r[e][n] at the gate frequency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reflectivities {
    pub r: [[Complex64; 2]; 2],
}

impl Reflectivities {
    pub fn from_cavity(sys: &CavitySystem, omega: f64) -> Self {
        let mut r = [[ZERO; 2]; 2];
        for e in Electron::ALL {
            for n in Nuclear::ALL {
                r[e.index()][n.index()] = scatter_amplitudes(sys, SpinState::new(e, n), omega).r;
            }
        }
        Self { r }
    }

    /// Perfect contrast: `bright` reflects fully, the other electron state not at all.
    pub fn ideal(bright: Electron) -> Self {
        let mut r = [[ZERO; 2]; 2];
        r[bright.index()] = [Complex64::new(1.0, 0.0); 2];
        Self { r }
    }

    fn bright(&self) -> Electron {
        let p = |e: Electron| self.r[e.index()].iter().map(|z| z.norm_sqr()).sum::<f64>();
        if p(Electron::Down) >= p(Electron::Up) {
            Electron::Down
        } else {
            Electron::Up
        }
    }

    fn max_reflectivity(&self) -> f64 {
        self.r.iter().flatten().map(|z| z.norm_sqr()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Pauli {
    X,
    Z,
}

/// Error events for one run.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorEvents {
    /// Electron prepared in the wrong state.
    pub init_flip: bool,
    /// Error after each MW pulse (2 for the electron-photon gate, 4 for PHONE).
    pub mw: [Option<Pauli>; 4],
    /// Electron error while it is entangled, after the early and after the late bin.
    pub dephasing: [Option<Pauli>; 2],
}

fn apply_pauli_e(psi: &mut Ket, p: Pauli) {
    for ph in 0..3 {
        for n in 0..2 {
            let (a, b) = (idx(ph, n, 0), idx(ph, n, 1));
            match p {
                Pauli::X => psi.swap(a, b),
                Pauli::Z => psi[b] = -psi[b],
            }
        }
    }
}

/// Flip the electron when the nucleus is `cond` (None: unconditional).
fn cnot_e(psi: &mut Ket, cond: Option<usize>) {
    for ph in 0..3 {
        for n in 0..2 {
            if cond.is_none_or(|c| c == n) {
                psi.swap(idx(ph, n, 0), idx(ph, n, 1));
            }
        }
    }
}

/// Ideal π/2 about y on the electron: |↓⟩ → (|↓⟩+|↑⟩)/√2.
fn half_pi_e(psi: &mut Ket) {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    for ph in 0..3 {
        for n in 0..2 {
            let (a, b) = (idx(ph, n, 0), idx(ph, n, 1));
            let (x, y) = (psi[a], psi[b]);
            psi[a] = s * (x - y);
            psi[b] = s * (x + y);
        }
    }
}

fn reflect(psi: &mut Ket, bin: usize, refl: &Reflectivities) {
    for n in 0..2 {
        for e in 0..2 {
            psi[idx(bin, n, e)] *= refl.r[e][n];
        }
    }
}

const EARLY: usize = 1;
const LATE: usize = 2;

/// Unnormalized single-photon-sector state after the gate (reflected photon only).
fn run_sequence(kind: GateKind, refl: &Reflectivities, ev: &ErrorEvents) -> Ket {
    let mut psi = [ZERO; DIM];
    let h = 0.5;
    let e0 = if ev.init_flip { 1 } else { 0 };
    let mut pulse = 0;
    let mw = |psi: &mut Ket, pulse: &mut usize| {
        if let Some(p) = ev.mw[*pulse] {
            apply_pauli_e(psi, p);
        }
        *pulse += 1;
    };
    match kind {
        GateKind::ElectronPhoton => {
            let s = std::f64::consts::FRAC_1_SQRT_2;
            for ph in [EARLY, LATE] {
                psi[idx(ph, 0, e0)] = Complex64::new(s, 0.0);
            }
            half_pi_e(&mut psi);
            mw(&mut psi, &mut pulse);
            reflect(&mut psi, EARLY, refl);
            if let Some(p) = ev.dephasing[0] {
                apply_pauli_e(&mut psi, p);
            }
            cnot_e(&mut psi, None);
            mw(&mut psi, &mut pulse);
            reflect(&mut psi, LATE, refl);
            if let Some(p) = ev.dephasing[1] {
                apply_pauli_e(&mut psi, p);
            }
        }
        GateKind::Phone => {
            for ph in [EARLY, LATE] {
                for n in 0..2 {
                    psi[idx(ph, n, e0)] = Complex64::new(h, 0.0);
                }
            }
            // nucleus-conditional window around each bin: CnNOTe pair, then CnNOTe_bar pair
            cnot_e(&mut psi, Some(0));
            mw(&mut psi, &mut pulse);
            reflect(&mut psi, EARLY, refl);
            if let Some(p) = ev.dephasing[0] {
                apply_pauli_e(&mut psi, p);
            }
            cnot_e(&mut psi, Some(0));
            mw(&mut psi, &mut pulse);
            cnot_e(&mut psi, Some(1));
            mw(&mut psi, &mut pulse);
            reflect(&mut psi, LATE, refl);
            if let Some(p) = ev.dephasing[1] {
                apply_pauli_e(&mut psi, p);
            }
            cnot_e(&mut psi, Some(1));
            mw(&mut psi, &mut pulse);
        }
    }
    psi
}

/// Frame that maps the ideal target onto |Φ⁺⟩: for each photon bin, which spin value and
/// phase the ideal gate leaves behind.
#[derive(Debug, Clone, Copy, PartialEq)]
struct BellFrame {
    /// Spin label (0/1) paired with the early and late photon.
    spin: [usize; 2],
    /// Phase of the early-late coherence that the interferometer lock removes.
    phase: f64,
}

/// Photon ⊗ target-spin reduced state (4-dim, photon early = 0) after tracing the other spin.
fn reduce(kind: GateKind, psi: &Ket) -> [[Complex64; 4]; 4] {
    let mut rho = [[ZERO; 4]; 4];
    for (pi, ph) in [EARLY, LATE].into_iter().enumerate() {
        for (pj, qh) in [EARLY, LATE].into_iter().enumerate() {
            for s in 0..2 {
                for t in 0..2 {
                    let mut acc = ZERO;
                    for other in 0..2 {
                        let (a, b) = match kind {
                            GateKind::ElectronPhoton => (idx(ph, other, s), idx(qh, other, t)),
                            GateKind::Phone => (idx(ph, s, other), idx(qh, t, other)),
                        };
                        acc += psi[a] * psi[b].conj();
                    }
                    rho[2 * pi + s][2 * pj + t] = acc;
                }
            }
        }
    }
    rho
}

fn frame_from_ideal(kind: GateKind, refl: &Reflectivities) -> Result<BellFrame> {
    let bright = refl.bright();
    let ideal = run_sequence(kind, &Reflectivities::ideal(bright), &ErrorEvents::default());
    let rho = reduce(kind, &ideal);
    let pick = |bin: usize| -> Result<usize> {
        (0..2)
            .find(|&s| rho[2 * bin + s][2 * bin + s].re > 1e-9)
            .ok_or_else(|| SivError::InvalidState("ideal gate left an empty time bin".into()))
    };
    let spin = [pick(0)?, pick(1)?];
    Ok(BellFrame { spin, phase: 0.0 })
}

fn to_bell_frame(rho4: &[[Complex64; 4]; 4], frame: &BellFrame) -> Result<DensityMatrix> {
    // early ↔ |0⟩ photon; the paired spin value becomes |0⟩, the late one |1⟩
    let map = |k: usize| -> Option<usize> {
        let (bin, s) = (k / 2, k % 2);
        let other = 1 - frame.spin[bin];
        let label = if s == frame.spin[bin] { bin } else if s == other { 1 - bin } else { return None };
        Some(2 * bin + label)
    };
    let mut m = crate::quantum_core::CMatrix::zeros(4, 4);
    let trace: f64 = (0..4).map(|k| rho4[k][k].re).sum();
    if trace <= 0.0 {
        return Err(SivError::ZeroHerald);
    }
    let late_phase = Complex64::from_polar(1.0, frame.phase);
    #[allow(clippy::needless_range_loop)]
    for i in 0..4 {
        for j in 0..4 {
            let (a, b) = (map(i).unwrap(), map(j).unwrap());
            let mut v = rho4[i][j] / trace;
            if i / 2 == 1 {
                v *= late_phase;
            }
            if j / 2 == 1 {
                v *= late_phase.conj();
            }
            m[(a, b)] = v;
        }
    }
    DensityMatrix::new(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeraldResult {
    /// Photon ⊗ spin state in the frame where the ideal output is |Φ⁺⟩.
    pub state: DensityMatrix,
    pub herald_prob: f64,
    pub flag_raised: bool,
}

/// Correlator form of a two-qubit state: (P_zz, P_xx + P_yy).
fn correlators(rho: &DensityMatrix) -> (f64, f64) {
    let pzz = rho.get(0, 0).re + rho.get(3, 3).re;
    let pxy = 4.0 * rho.get(0, 3).re;
    (pzz, pxy)
}

/// Shared machinery for both gates.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinPhotonGate {
    pub kind: GateKind,
    pub refl: Reflectivities,
    pub nbar_in: f64,
    frame: BellFrame,
}

impl SpinPhotonGate {
    pub fn new(kind: GateKind, refl: Reflectivities, nbar_in: f64) -> Result<Self> {
        if !(nbar_in > 0.0 && nbar_in <= 1.0) {
            return Err(invalid("photon.nbar_in", "must lie in (0, 1]"));
        }
        let mut frame = frame_from_ideal(kind, &refl)?;
        // lock the interferometer phase on the error-free output
        let psi = run_sequence(kind, &refl, &ErrorEvents::default());
        let norm: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
        if norm <= 1e-300 {
            return Err(SivError::ZeroHerald);
        }
        let raw = to_bell_frame(&reduce(kind, &psi), &frame)?;
        frame.phase = raw.get(0, 3).arg();
        Ok(Self { kind, refl, nbar_in, frame })
    }

    /// Heralded outcomes of one error configuration: (herald probability, flag, state). With
    /// `detect` the electron is measured and the two flag outcomes come back separately.
    pub fn branches(&self, ev: &ErrorEvents, detect: bool) -> Result<Vec<(f64, bool, DensityMatrix)>> {
        let psi = run_sequence(self.kind, &self.refl, ev);
        let norm: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
        if norm <= 1e-300 {
            return Err(SivError::ZeroHerald);
        }
        if !(detect && self.kind == GateKind::Phone) {
            let state = to_bell_frame(&reduce(self.kind, &psi), &self.frame)?;
            return Ok(vec![(self.nbar_in * norm, false, state)]);
        }
        let mut out = Vec::with_capacity(2);
        for flag in [false, true] {
            let mut part = psi;
            for (k, z) in part.iter_mut().enumerate() {
                if (k % 2 == 1) != flag {
                    *z = ZERO;
                }
            }
            let w: f64 = part.iter().map(|z| z.norm_sqr()).sum();
            if w > 1e-300 * norm {
                out.push((self.nbar_in * w, flag, to_bell_frame(&reduce(self.kind, &part), &self.frame)?));
            }
        }
        Ok(out)
    }

    /// Runs one shot with the given error events; the flag is sampled when `detect` is set.
    pub fn herald<R: Rng>(&self, ev: &ErrorEvents, detect: bool, rng: &mut R) -> Result<HeraldResult> {
        let branches = self.branches(ev, detect)?;
        let total: f64 = branches.iter().map(|b| b.0).sum();
        let mut pick = branches.len() - 1;
        if branches.len() > 1 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            for (i, b) in branches.iter().enumerate() {
                acc += b.0;
                if u < acc {
                    pick = i;
                    break;
                }
            }
        }
        let (_, flag_raised, state) = branches.into_iter().nth(pick).unwrap();
        Ok(HeraldResult { state, herald_prob: total, flag_raised })
    }

    /// Bell fidelity of the error-free, contrast-limited output.
    pub fn contrast_fidelity(&self) -> Result<f64> {
        let mut r = rng::stream(0, "contrast", 0);
        bell_overlap(&self.herald(&ErrorEvents::default(), false, &mut r)?.state)
    }
}

/// Contrast-limited fidelity at frequency `omega`.
pub fn contrast_fidelity_at(sys: &CavitySystem, kind: GateKind, omega: f64) -> Result<f64> {
    SpinPhotonGate::new(kind, Reflectivities::from_cavity(sys, omega), 5e-3)?.contrast_fidelity()
}

/// Electron-photon gate frequency: maximum electron contrast with the nucleus down.
pub fn electron_photon_frequency(sys: &CavitySystem) -> Result<f64> {
    resonant_readout_frequency(sys, Nuclear::Down)
}

/// PHONE frequency: maximum contrast-limited fidelity with both nuclear states in play.
pub fn phone_frequency(sys: &CavitySystem) -> Result<f64> {
    let (lo, hi) = sys.feature_window();
    let f = |w: f64| contrast_fidelity_at(sys, GateKind::Phone, w).unwrap_or(0.0);
    let (w, best) = grid_then_golden(f, lo, hi, 4001, 1e4);
    if best <= 0.0 {
        return Err(SivError::NoContrast);
    }
    Ok(w)
}

pub fn gate_frequency(sys: &CavitySystem, kind: GateKind) -> Result<f64> {
    match kind {
        GateKind::ElectronPhoton => electron_photon_frequency(sys),
        GateKind::Phone => phone_frequency(sys),
    }
}

/// Error-injection settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionSettings {
    /// Fraction of MW gate error that is an electron flip (flag-detectable); the rest is phase.
    pub mw_flip_fraction: f64,
    /// Fraction of inter-bin dephasing events that depolarize (flip) the electron.
    pub dephasing_flip_fraction: f64,
}

impl Default for InjectionSettings {
    fn default() -> Self {
        Self { mw_flip_fraction: 0.56, dephasing_flip_fraction: 0.05 }
    }
}

/// Per-event probabilities that reproduce the budget factors in expectation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InjectionRates {
    pub init: f64,
    pub mw_per_pulse: f64,
    pub dephasing_per_window: f64,
}

/// Gate plus calibrated noise for Monte Carlo runs.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinPhotonModel {
    pub gate: SpinPhotonGate,
    pub budget: ErrorBudget,
    pub injection: InjectionSettings,
    pub rates: InjectionRates,
}

/// Herald weight and (F, P_zz, P_xx + P_yy) of the run with the given events.
fn run_parts(gate: &SpinPhotonGate, ev: &ErrorEvents) -> Result<(f64, [f64; 3])> {
    let mut r = rng::stream(0, "calibrate", 0);
    let h = gate.herald(ev, false, &mut r)?;
    let (zz, xy) = correlators(&h.state);
    Ok((h.herald_prob, [0.5 * zz + 0.25 * xy, zz, xy]))
}

/// Herald-weighted loss w_k(Q₀ − Q_k)/w₀ of one error site, mixing the two Pauli kinds.
fn site_loss(gate: &SpinPhotonGate, base: (f64, f64), which: usize, place: impl Fn(&mut ErrorEvents, Pauli), flip: f64) -> Result<f64> {
    let (w0, q0) = base;
    let mut loss = 0.0;
    for (p, share) in [(Pauli::X, flip), (Pauli::Z, 1.0 - flip)] {
        let mut ev = ErrorEvents::default();
        place(&mut ev, p);
        let (w, q) = run_parts(gate, &ev)?;
        loss += share * w * (q0 - q[which]) / w0;
    }
    Ok(loss)
}

/// Per-site probability q with Π_k (1 − q·loss_k/Q₀) = f, so independent sites compound the
/// way paired sign flips do.
fn calibrated_rate(f: f64, q0: f64, losses: &[f64]) -> Result<f64> {
    if f >= 1.0 {
        return Ok(0.0);
    }
    if losses.iter().sum::<f64>() <= 0.0 {
        return Err(invalid("budget", "injected errors do not lower the fidelity"));
    }
    let kept = |q: f64| losses.iter().map(|l| 1.0 - q * l / q0).product::<f64>();
    // beyond q_max some site would more than cancel Q on its own
    let q_max = losses.iter().filter(|&&l| l > 0.0).map(|l| q0 / l).fold(1.0, f64::min);
    if kept(q_max) > f {
        return Err(invalid("budget", "factor too small to reach by error injection"));
    }
    let (mut lo, mut hi) = (0.0, q_max);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if kept(mid) > f {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn pauli_options(rate: f64, flip: f64) -> [(Option<Pauli>, f64); 3] {
    [(None, 1.0 - rate), (Some(Pauli::X), rate * flip), (Some(Pauli::Z), rate * (1.0 - flip))]
}

fn event_distribution(kind: GateKind, rates: &InjectionRates, inj: &InjectionSettings) -> Vec<(ErrorEvents, f64)> {
    let mut out = vec![(ErrorEvents::default(), 1.0 - rates.init), (ErrorEvents { init_flip: true, ..Default::default() }, rates.init)];
    let mw = pauli_options(rates.mw_per_pulse, inj.mw_flip_fraction);
    let deph = pauli_options(rates.dephasing_per_window, inj.dephasing_flip_fraction);
    let sites = (0..kind.mw_pulses()).map(|k| (true, k)).chain((0..2).map(|k| (false, k)));
    for (is_mw, k) in sites {
        let opts = if is_mw { mw } else { deph };
        out = out
            .into_iter()
            .flat_map(|(ev, p)| {
                opts.into_iter().filter(|o| o.1 > 0.0).map(move |(o, q)| {
                    let mut e = ev;
                    if is_mw {
                        e.mw[k] = o;
                    } else {
                        e.dephasing[k] = o;
                    }
                    (e, p * q)
                })
            })
            .collect();
    }
    out.retain(|(_, p)| *p > 0.0);
    out
}

fn exact_summary(model: &SpinPhotonModel, rates: &InjectionRates, detect: bool) -> Result<FilterSummary> {
    let (mut w_all, mut wf_all, mut w_acc, mut wf_acc) = (0.0, 0.0, 0.0, 0.0);
    for (ev, p) in event_distribution(model.gate.kind, rates, &model.injection) {
        for (w, flag, state) in model.gate.branches(&ev, detect)? {
            let f = model.run_fidelity(&state);
            w_all += p * w;
            wf_all += p * w * f;
            if !flag {
                w_acc += p * w;
                wf_acc += p * w * f;
            }
        }
    }
    if w_acc <= 0.0 {
        return Err(SivError::AllRejected);
    }
    let rejected = 1.0 - w_acc / w_all;
    Ok(FilterSummary {
        all_fidelity: wf_all / w_all,
        accepted_fidelity: wf_acc / w_acc,
        accepted_stderr: 0.0,
        rejected_fraction: rejected,
        rejected_fraction_of_attempts: rejected * w_all,
        runs: 0,
    })
}

impl SpinPhotonModel {
    pub fn calibrate(gate: SpinPhotonGate, budget: ErrorBudget, injection: InjectionSettings) -> Result<Self> {
        budget.validate()?;
        if budget.gate != gate.kind {
            return Err(invalid("budget.gate", "does not match the simulated gate"));
        }
        for (name, v) in [
            ("injection.mw_flip_fraction", injection.mw_flip_fraction),
            ("injection.dephasing_flip_fraction", injection.dephasing_flip_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(name, "must lie in [0, 1]"));
            }
        }
        let (w0, q) = run_parts(&gate, &ErrorEvents::default())?;
        let (f0, xy0) = (q[0], q[2]);
        let init_loss = site_loss(&gate, (w0, f0), 0, |ev, _| ev.init_flip = true, 1.0)?;
        let init = calibrated_rate(budget.initialization, f0, &[init_loss])?;

        let mut mw_losses = Vec::new();
        for k in 0..gate.kind.mw_pulses() {
            mw_losses.push(site_loss(&gate, (w0, f0), 0, |ev, p| ev.mw[k] = Some(p), injection.mw_flip_fraction)?);
        }
        let mw_per_pulse = calibrated_rate(budget.mw_gates, f0, &mw_losses)?;

        // dephasing is an XX/YY-only factor, so it is calibrated on P_xx + P_yy
        let mut deph_losses = Vec::new();
        for k in 0..2 {
            let flip = injection.dephasing_flip_fraction;
            deph_losses.push(site_loss(&gate, (w0, xy0), 2, |ev, p| ev.dephasing[k] = Some(p), flip)?);
        }
        let dephasing_per_window = calibrated_rate(budget.t2_dephasing, xy0, &deph_losses)?;
        let mut model = Self { gate, budget, injection, rates: InjectionRates { init, mw_per_pulse, dephasing_per_window } };
        model.rates = model.match_total()?;
        Ok(model)
    }

    /// Each class is calibrated alone, but errors from different classes can undo each other
    /// (an initialization flip and a MW flip, say). One common scale on all rates makes the exact
    /// herald-weighted mean equal the budget total.
    fn match_total(&self) -> Result<InjectionRates> {
        let r = self.rates;
        let largest = r.init.max(r.mw_per_pulse).max(r.dephasing_per_window);
        if largest == 0.0 {
            return Ok(r);
        }
        let target = self.budget_fidelity()?;
        let scaled = |s: f64| InjectionRates {
            init: r.init * s,
            mw_per_pulse: r.mw_per_pulse * s,
            dephasing_per_window: r.dephasing_per_window * s,
        };
        let excess = |s: f64| -> Result<f64> { Ok(exact_summary(self, &scaled(s), false)?.all_fidelity - target) };
        let (mut lo, mut hi) = (0.0, (0.5 / largest).min(4.0));
        if excess(hi)? > 0.0 || excess(lo)? < 0.0 {
            return Err(invalid("budget", "factors cannot be reached by error injection"));
        }
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            if excess(mid)? > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(scaled(0.5 * (lo + hi)))
    }

    /// Every error configuration with its probability under the current rates.
    pub fn event_distribution(&self) -> Vec<(ErrorEvents, f64)> {
        event_distribution(self.gate.kind, &self.rates, &self.injection)
    }

    /// Herald-weighted expectation over all error configurations, no sampling.
    pub fn exact_summary(&self, error_detection: bool) -> Result<FilterSummary> {
        exact_summary(self, &self.rates, error_detection)
    }

    fn sample_events<R: Rng>(&self, rng: &mut R) -> ErrorEvents {
        let mut ev = ErrorEvents { init_flip: rng.random::<f64>() < self.rates.init, ..Default::default() };
        for k in 0..self.gate.kind.mw_pulses() {
            if rng.random::<f64>() < self.rates.mw_per_pulse {
                ev.mw[k] = Some(if rng.random::<f64>() < self.injection.mw_flip_fraction { Pauli::X } else { Pauli::Z });
            }
        }
        for k in 0..2 {
            if rng.random::<f64>() < self.rates.dephasing_per_window {
                let flip = rng.random::<f64>() < self.injection.dephasing_flip_fraction;
                ev.dephasing[k] = Some(if flip { Pauli::X } else { Pauli::Z });
            }
        }
        ev
    }

    /// Bell fidelity of one heralded state including the factors not simulated explicitly.
    pub fn run_fidelity(&self, state: &DensityMatrix) -> f64 {
        let b = &self.budget;
        let common = b.dark_counts * b.two_photon * b.readout;
        let xx = b.tdi_contrast * b.tdi_lock;
        let (zz, xy) = correlators(state);
        common * (0.5 * zz + 0.25 * xx * xy)
    }

    /// Total fidelity predicted by the budget with the simulated contrast.
    pub fn budget_fidelity(&self) -> Result<f64> {
        budget_with_contrast(&self.budget, self.gate.contrast_fidelity()?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub herald: HeraldResult,
    pub fidelity: f64,
}

/// Monte Carlo over error events; each run is heralded and weighted by its herald probability.
pub fn simulate_runs(model: &SpinPhotonModel, shots: u64, error_detection: bool, seed: u64) -> Result<Vec<RunRecord>> {
    if shots == 0 {
        return Err(invalid("shots", "must be positive"));
    }
    (0..shots)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, model.gate.kind.name(), i);
            let ev = model.sample_events(&mut r);
            let herald = model.gate.herald(&ev, error_detection, &mut r)?;
            let fidelity = model.run_fidelity(&herald.state);
            Ok(RunRecord { herald, fidelity })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FilterSummary {
    pub all_fidelity: f64,
    pub accepted_fidelity: f64,
    /// Weighted standard error of the accepted-run fidelity.
    pub accepted_stderr: f64,
    /// Flagged runs over heralded runs.
    pub rejected_fraction: f64,
    /// Flagged runs over all attempts, heralded or not.
    pub rejected_fraction_of_attempts: f64,
    pub runs: u64,
}

pub fn error_detect_filter(runs: &[RunRecord]) -> Result<FilterSummary> {
    if runs.is_empty() {
        return Err(SivError::Empty("no runs to filter".into()));
    }
    let (mut w_all, mut wf_all, mut w_acc, mut wf_acc, mut wff_acc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut n_acc = 0u64;
    for r in runs {
        let w = r.herald.herald_prob;
        w_all += w;
        wf_all += w * r.fidelity;
        if !r.herald.flag_raised {
            w_acc += w;
            wf_acc += w * r.fidelity;
            wff_acc += w * r.fidelity * r.fidelity;
            n_acc += 1;
        }
    }
    if n_acc == 0 || w_acc <= 0.0 {
        return Err(SivError::AllRejected);
    }
    if w_all <= 0.0 {
        return Err(SivError::ZeroHerald);
    }
    let acc = wf_acc / w_acc;
    let var = (wff_acc / w_acc - acc * acc).max(0.0);
    let rejected = 1.0 - w_acc / w_all;
    let mean_herald = w_all / runs.len() as f64;
    Ok(FilterSummary {
        all_fidelity: wf_all / w_all,
        accepted_fidelity: acc,
        accepted_stderr: (var / n_acc as f64).sqrt(),
        rejected_fraction: rejected,
        rejected_fraction_of_attempts: rejected * mean_herald,
        runs: runs.len() as u64,
    })
}

/// Outcome tallies per basis, indexed 2i + j for outcome (i, j).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BasisCounts {
    pub zz: [u64; 4],
    pub xx: [u64; 4],
    pub yy: [u64; 4],
}

/// F = ½P_zz + ¼P_xx + ¼P_yy with P_zz = p⁰⁰+p¹¹, P_xx = p⁰⁰+p¹¹−p⁰¹−p¹⁰,
/// P_yy = p⁰¹+p¹⁰−p⁰⁰−p¹¹. Returns (F, standard error).
pub fn bell_fidelity_from_counts(c: &BasisCounts) -> Result<(f64, f64)> {
    let total = |v: &[u64; 4]| v.iter().sum::<u64>();
    for (name, v) in [("ZZ", &c.zz), ("XX", &c.xx), ("YY", &c.yy)] {
        if total(v) == 0 {
            return Err(SivError::MissingBasis(name.into()));
        }
    }
    let same = |v: &[u64; 4]| (v[0] + v[3]) as f64 / total(v) as f64;
    let pzz = same(&c.zz);
    let pxx = 2.0 * same(&c.xx) - 1.0;
    let pyy = 1.0 - 2.0 * same(&c.yy);
    let f = 0.5 * pzz + 0.25 * pxx + 0.25 * pyy;
    let var = 0.25 * pzz * (1.0 - pzz) / total(&c.zz) as f64
        + 0.0625 * (1.0 - pxx * pxx) / total(&c.xx) as f64
        + 0.0625 * (1.0 - pyy * pyy) / total(&c.yy) as f64;
    Ok((f, var.sqrt()))
}

/// Outcome probabilities of a two-qubit state in the ZZ, XX and YY product bases.
pub fn basis_probabilities(rho: &DensityMatrix) -> Result<[[f64; 4]; 3]> {
    if rho.dim() != 4 {
        return Err(SivError::Dimension("Bell statistics need a two-qubit state".into()));
    }
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let i = Complex64::new(0.0, 1.0);
    let one = Complex64::new(1.0, 0.0);
    // eigenvectors for outcome 0 / 1
    let bases: [[[Complex64; 2]; 2]; 3] = [
        [[one, ZERO], [ZERO, one]],
        [[s * one, s * one], [s * one, -s * one]],
        [[s * one, s * i], [s * one, -s * i]],
    ];
    let mut out = [[0.0; 4]; 3];
    for (b, vecs) in bases.iter().enumerate() {
        for a in 0..2 {
            for c in 0..2 {
                let v: Vec<Complex64> = (0..4).map(|k| vecs[a][k / 2] * vecs[c][k % 2]).collect();
                let mut acc = ZERO;
                for p in 0..4 {
                    for q in 0..4 {
                        acc += v[p].conj() * rho.get(p, q) * v[q];
                    }
                }
                out[b][2 * a + c] = acc.re.max(0.0);
            }
        }
    }
    Ok(out)
}

/// Samples `shots_per_basis` outcomes in each basis.
pub fn sample_bell_counts(rho: &DensityMatrix, shots_per_basis: u64, seed: u64) -> Result<BasisCounts> {
    let probs = basis_probabilities(rho)?;
    let mut r = rng::stream(seed, "bell_counts", 0);
    let mut tallies = [[0u64; 4]; 3];
    for (b, p) in probs.iter().enumerate() {
        let norm: f64 = p.iter().sum();
        for _ in 0..shots_per_basis {
            let u = r.random::<f64>() * norm;
            let mut acc = 0.0;
            let mut k = 3;
            for (j, pj) in p.iter().enumerate() {
                acc += pj;
                if u < acc {
                    k = j;
                    break;
                }
            }
            tallies[b][k] += 1;
        }
    }
    Ok(BasisCounts { zz: tallies[0], xx: tallies[1], yy: tallies[2] })
}

/// F(t) = ¼ + (f0 − ¼)·exp(−t/τ).
pub fn storage_decay(f0: f64, tau: f64, t_grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    if !(0.25..=1.0).contains(&f0) {
        return Err(invalid("f0", "must lie in [0.25, 1]"));
    }
    if !(tau > 0.0) {
        return Err(invalid("tau", "must be positive"));
    }
    Ok(t_grid.iter().map(|&t| (t, 0.25 + (f0 - 0.25) * (-t / tau).exp())).collect())
}

/// Time at which the storage curve falls to `level`; None if it starts at or below it.
pub fn storage_crossing(f0: f64, tau: f64, level: f64) -> Option<f64> {
    if f0 <= level || level <= 0.25 {
        return None;
    }
    Some(tau * ((f0 - 0.25) / (level - 0.25)).ln())
}

/// Spin-averaged |r|² at `omega` (nucleus down) times the path efficiency.
pub fn heralding_efficiency(sys: &CavitySystem, omega: f64, path_efficiency: f64) -> Result<f64> {
    if !(path_efficiency > 0.0 && path_efficiency <= 1.0) {
        return Err(invalid("path_efficiency", "must lie in (0, 1]"));
    }
    Ok(mean_reflectivity(sys, omega) * path_efficiency)
}

pub fn mean_reflectivity(sys: &CavitySystem, omega: f64) -> f64 {
    0.5 * Electron::ALL
        .iter()
        .map(|&e| scatter_amplitudes(sys, SpinState::new(e, Nuclear::Down), omega).r.norm_sqr())
        .sum::<f64>()
}

/// Upper bound used by the herald invariant: n̄·max|r|².
pub fn herald_bound(refl: &Reflectivities, nbar_in: f64) -> f64 {
    nbar_in * refl.max_reflectivity()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ideal(kind: GateKind) -> SpinPhotonGate {
        SpinPhotonGate::new(kind, Reflectivities::ideal(Electron::Up), 5e-3).unwrap()
    }

    #[test]
    fn ideal_gates_are_perfect() {
        for kind in [GateKind::ElectronPhoton, GateKind::Phone] {
            let g = ideal(kind);
            assert!((g.contrast_fidelity().unwrap() - 1.0).abs() < 1e-12, "{kind:?}");
        }
        let g = SpinPhotonGate::new(GateKind::Phone, Reflectivities::ideal(Electron::Down), 5e-3).unwrap();
        assert!((g.contrast_fidelity().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_reflection_cannot_herald() {
        let refl = Reflectivities { r: [[ZERO; 2]; 2] };
        assert!(matches!(SpinPhotonGate::new(GateKind::Phone, refl, 5e-3), Err(SivError::ZeroHerald)));
    }

    #[test]
    fn phone_leaves_electron_down_without_errors() {
        let sys = CavitySystem::reference_device();
        let w = phone_frequency(&sys).unwrap();
        let refl = Reflectivities::from_cavity(&sys, w);
        let psi = run_sequence(GateKind::Phone, &refl, &ErrorEvents::default());
        let up: f64 = (0..DIM).filter(|k| k % 2 == 1).map(|k| psi[k].norm_sqr()).sum();
        assert!(up < 1e-10);
    }

    #[test]
    fn flips_raise_the_flag() {
        let g = ideal(GateKind::Phone);
        let mut r = rng::stream(1, "t", 0);
        for k in 0..4 {
            let mut ev = ErrorEvents::default();
            ev.mw[k] = Some(Pauli::X);
            assert!(g.herald(&ev, true, &mut r).unwrap().flag_raised, "pulse {k}");
        }
        let ev = ErrorEvents { init_flip: true, ..Default::default() };
        assert!(g.herald(&ev, true, &mut r).unwrap().flag_raised);
        let mut ev = ErrorEvents::default();
        ev.mw[1] = Some(Pauli::Z);
        assert!(!g.herald(&ev, true, &mut r).unwrap().flag_raised);
    }

    #[test]
    fn budget_products() {
        let b = default_budgets();
        let f = |g, t| budget_product(&find_budget(&b, g, t).unwrap()).unwrap();
        assert!((f(GateKind::ElectronPhoton, 0.1) - 0.91).abs() < 0.005);
        assert!((f(GateKind::ElectronPhoton, 1.5) - 0.91).abs() < 0.005);
        assert!((f(GateKind::Phone, 0.1) - 0.85).abs() < 0.005);
        assert!((f(GateKind::Phone, 4.3) - 0.66).abs() < 0.005);
        let ones = ErrorBudget {
            initialization: 1.0,
            mw_gates: 1.0,
            siv_contrast: 1.0,
            dark_counts: 1.0,
            two_photon: 1.0,
            readout: 1.0,
            tdi_contrast: 1.0,
            tdi_lock: 1.0,
            t2_dephasing: 1.0,
            ..b[0]
        };
        assert_eq!(budget_product(&ones).unwrap(), 1.0);
        assert!(budget_product(&ErrorBudget { readout: 1.2, ..ones }).is_err());
        assert!(find_budget(&b, GateKind::Phone, 2.0).is_err());
    }

    #[test]
    fn bell_counts_limits() {
        let perfect = BasisCounts { zz: [50, 0, 0, 50], xx: [50, 0, 0, 50], yy: [0, 50, 50, 0] };
        assert!((bell_fidelity_from_counts(&perfect).unwrap().0 - 1.0).abs() < 1e-15);
        let uniform = BasisCounts { zz: [25; 4], xx: [25; 4], yy: [25; 4] };
        assert!((bell_fidelity_from_counts(&uniform).unwrap().0 - 0.25).abs() < 1e-15);
        let missing = BasisCounts { zz: [1, 0, 0, 1], ..Default::default() };
        assert!(matches!(bell_fidelity_from_counts(&missing), Err(SivError::MissingBasis(_))));
    }

    #[test]
    fn phi_plus_statistics() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let phi = DensityMatrix::from_pure(&[Complex64::new(s, 0.0), ZERO, ZERO, Complex64::new(s, 0.0)]).unwrap();
        let p = basis_probabilities(&phi).unwrap();
        assert!((p[0][0] - 0.5).abs() < 1e-12 && (p[1][0] - 0.5).abs() < 1e-12);
        assert!((p[2][1] - 0.5).abs() < 1e-12);
        let c = sample_bell_counts(&phi, 1000, 3).unwrap();
        assert!((bell_fidelity_from_counts(&c).unwrap().0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn storage_closed_form() {
        let t = storage_crossing(0.71, 4.5e-3, 0.5).unwrap();
        // oracle: solve 0.5 = 0.25 + 0.46 e^{−t/τ}
        assert!((t - 4.5e-3 * (0.46f64 / 0.25).ln()).abs() < 1e-15);
        assert!((t - 2.75e-3).abs() < 0.05e-3);
        let t = storage_crossing(0.66, 3.8e-3, 0.5).unwrap();
        assert!((t - 1.90e-3).abs() < 0.05e-3);
        let curve = storage_decay(0.71, 4.5e-3, &[0.0, 1.0]).unwrap();
        assert_eq!(curve[0].1, 0.71);
        assert!((curve[1].1 - 0.25).abs() < 1e-12);
        assert!(storage_decay(0.2, 1.0, &[0.0]).is_err());
    }

    #[test]
    fn heralding_numbers() {
        let sys = CavitySystem::reference_device();
        let w = electron_photon_frequency(&sys).unwrap();
        let eta = heralding_efficiency(&sys, w, 0.52).unwrap();
        assert!((eta - 0.143).abs() < 0.015, "{eta}");
        let a = heralding_efficiency(&sys, w, 0.25).unwrap();
        assert!((2.0 * a - heralding_efficiency(&sys, w, 0.5).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_filter_is_neutral() {
        let g = ideal(GateKind::Phone);
        let budget = ErrorBudget {
            initialization: 1.0,
            mw_gates: 1.0,
            t2_dephasing: 1.0,
            ..find_budget(&default_budgets(), GateKind::Phone, 0.1).unwrap()
        };
        let m = SpinPhotonModel::calibrate(g, budget, InjectionSettings::default()).unwrap();
        let runs = simulate_runs(&m, 500, true, 4).unwrap();
        let s = error_detect_filter(&runs).unwrap();
        assert_eq!(s.rejected_fraction, 0.0);
        assert!((s.accepted_fidelity - s.all_fidelity).abs() < 1e-15);
    }
}
