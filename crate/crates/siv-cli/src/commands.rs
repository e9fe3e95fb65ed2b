use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use siv_core::backaction::{decoherence_per_photon, frequency_sweep, x_expectation, XMode};
use siv_core::bayes_readout::{
    error_curve, readouts_before_decoherence, simulate_many, ArrivalModel, ReadoutMethod,
};
use siv_core::cavity_qed::{
    contrast, cooperativity, linspace, resonant_readout_frequency_averaged, scatter_amplitudes, CavitySystem,
};
use siv_core::optimizer::{
    achievable_system, expected_readout_budget, frequency_scan, optimize_frequency, scaled_reference_offset,
    OptimizerConfig,
};
use siv_core::quantum_core::DensityMatrix;
use siv_core::rng::derive_seed;
use siv_core::spin::{Electron, Nuclear, SpinState};
use siv_core::spin_photon::{
    basis_probabilities, bell_fidelity_from_counts, budget_product, error_detect_filter, find_budget, gate_frequency,
    heralding_efficiency, mean_reflectivity, sample_bell_counts, simulate_runs, storage_crossing, storage_decay,
    GateKind, Reflectivities, RunRecord, SpinPhotonGate, SpinPhotonModel,
};
use siv_core::spin_register::{
    build_gate, cnot_geometric_phases, fringe_phase, nuclear_ramsey_scan, nuclear_relative_phase,
    swap_hold_read_budget, Gate, NoiseModel, PulseSequence, SWAP_HOLD_READ_MEASURED_TOTAL,
};
use siv_core::survey::{
    cavity_candidates, fraction_above, sample_distribution, synthetic_spectra, Peak, PeakSpectrum,
};
use siv_core::thermal::{
    calibrate, electron_t1, electron_t2, t1_curves, t2_vs_n, telegraph_mc, DecouplingSequence, Fluctuator,
    STRAIN_SPLITTINGS,
};
use siv_core::SivError;

use crate::config::ExperimentConfig;
use crate::output::{CliError, CliResult, Staging};

/// Gate length and RF segment count of the measured decoupled CeNOTn.
pub const CENOTN_SEGMENTS: usize = 8;
pub const CENOTN_GATE_TIME: f64 = 29.2e-6;
/// Pulse numbers of the nuclear memory scan.
pub const MEMORY_PULSES: [usize; 4] = [8, 64, 256, 1024];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    CavityScan,
    ReadoutError,
    ReadoutBudget,
    Backaction,
    Gates,
    GeomPhase,
    Memory,
    EntangleE,
    Phone,
    ErrorDetect,
    Storage,
    Thermal,
    Optimize,
    Survey,
}

impl CommandKind {
    pub const ALL: [CommandKind; 14] = [
        CommandKind::CavityScan,
        CommandKind::ReadoutError,
        CommandKind::ReadoutBudget,
        CommandKind::Backaction,
        CommandKind::Gates,
        CommandKind::GeomPhase,
        CommandKind::Memory,
        CommandKind::EntangleE,
        CommandKind::Phone,
        CommandKind::ErrorDetect,
        CommandKind::Storage,
        CommandKind::Thermal,
        CommandKind::Optimize,
        CommandKind::Survey,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CommandKind::CavityScan => "cavity-scan",
            CommandKind::ReadoutError => "readout-error",
            CommandKind::ReadoutBudget => "readout-budget",
            CommandKind::Backaction => "backaction",
            CommandKind::Gates => "gates",
            CommandKind::GeomPhase => "geom-phase",
            CommandKind::Memory => "memory",
            CommandKind::EntangleE => "entangle-e",
            CommandKind::Phone => "phone",
            CommandKind::ErrorDetect => "error-detect",
            CommandKind::Storage => "storage",
            CommandKind::Thermal => "thermal",
            CommandKind::Optimize => "optimize",
            CommandKind::Survey => "survey",
        }
    }

    /// Shots used when `--shots` is absent; each keeps the statistical error of the
    /// quantity the command reports below 1%.
    pub fn default_shots(self) -> Option<u64> {
        match self {
            CommandKind::ReadoutError => Some(20_000),
            CommandKind::ReadoutBudget | CommandKind::Optimize => Some(50_000),
            CommandKind::GeomPhase => Some(200),
            CommandKind::Memory | CommandKind::Thermal => Some(10_000),
            CommandKind::EntangleE | CommandKind::Phone | CommandKind::ErrorDetect => Some(100_000),
            CommandKind::Survey => None,
            CommandKind::CavityScan | CommandKind::Backaction | CommandKind::Gates | CommandKind::Storage => None,
        }
    }

    fn uses_temperature(self) -> bool {
        matches!(self, CommandKind::Memory | CommandKind::EntangleE | CommandKind::Phone | CommandKind::ErrorDetect)
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub seed: u64,
    pub shots: Option<u64>,
    pub temperature: Option<f64>,
    pub spectra: Option<std::path::PathBuf>,
}

/// Human-readable lines plus the outputs staged for commit.
pub struct Outcome {
    pub report: Vec<String>,
    pub shots: Option<u64>,
}

pub fn run(kind: CommandKind, cfg: &ExperimentConfig, opts: &RunOptions, st: &mut Staging) -> CliResult<Outcome> {
    if opts.temperature.is_some() && !kind.uses_temperature() {
        return Err(CliError::Usage(format!("{} does not take --temperature", kind.name())));
    }
    if opts.spectra.is_some() && kind != CommandKind::Survey {
        return Err(CliError::Usage("--spectra only applies to survey".into()));
    }
    if let Some(t) = opts.temperature {
        if !(t > 0.0 && t.is_finite()) {
            return Err(CliError::Usage("--temperature must be a positive number of kelvin".into()));
        }
    }
    let shots = match (opts.shots, kind.default_shots()) {
        (Some(0), _) => return Err(CliError::Usage("--shots must be positive".into())),
        (Some(s), Some(_)) => Some(s),
        (Some(_), None) if kind == CommandKind::Survey => opts.shots,
        (Some(_), None) => return Err(CliError::Usage(format!("{} is exact and takes no --shots", kind.name()))),
        (None, d) => d,
    };
    let report = match kind {
        CommandKind::CavityScan => cavity_scan(cfg, st)?,
        CommandKind::ReadoutError => readout_error(cfg, opts.seed, shots.unwrap_or(0), st)?,
        CommandKind::ReadoutBudget => readout_budget(cfg, opts.seed, shots.unwrap_or(0), st)?,
        CommandKind::Backaction => backaction(cfg, st)?,
        CommandKind::Gates => gates(cfg, st)?,
        CommandKind::GeomPhase => geom_phase(cfg, opts.seed, shots.unwrap_or(0), st)?,
        CommandKind::Memory => memory(cfg, opts.seed, shots.unwrap_or(0), opts.temperature, st)?,
        CommandKind::EntangleE => {
            spin_photon(cfg, GateKind::ElectronPhoton, false, opts.seed, shots.unwrap_or(0), opts.temperature, st)?
        }
        CommandKind::Phone => spin_photon(cfg, GateKind::Phone, false, opts.seed, shots.unwrap_or(0), opts.temperature, st)?,
        CommandKind::ErrorDetect => {
            spin_photon(cfg, GateKind::Phone, true, opts.seed, shots.unwrap_or(0), opts.temperature, st)?
        }
        CommandKind::Storage => storage(cfg, st)?,
        CommandKind::Thermal => thermal(cfg, opts.seed, shots.unwrap_or(0), st)?,
        CommandKind::Optimize => optimize(cfg, opts.seed, shots.unwrap_or(0), st)?,
        CommandKind::Survey => survey(cfg, opts.seed, shots, opts.spectra.as_deref(), st)?,
    };
    Ok(Outcome { report, shots })
}

fn pct(x: f64) -> String {
    format!("{:.4}", x)
}

#[derive(Serialize)]
struct CavityRow {
    omega_hz: f64,
    r_down_down: f64,
    r_down_up: f64,
    r_up_down: f64,
    r_up_up: f64,
    phase_down_down: f64,
    phase_down_up: f64,
    phase_up_down: f64,
    phase_up_up: f64,
    contrast_n_down: f64,
    contrast_n_up: f64,
}

fn cavity_scan(cfg: &ExperimentConfig, st: &mut Staging) -> CliResult<Vec<String>> {
    let sys = &cfg.cavity;
    let (lo, hi) = sys.feature_window();
    let states = [
        SpinState::new(Electron::Down, Nuclear::Down),
        SpinState::new(Electron::Down, Nuclear::Up),
        SpinState::new(Electron::Up, Nuclear::Down),
        SpinState::new(Electron::Up, Nuclear::Up),
    ];
    let rows: Vec<CavityRow> = linspace(lo, hi, 2001)
        .into_iter()
        .map(|w| {
            let r: Vec<_> = states.iter().map(|&s| scatter_amplitudes(sys, s, w).r).collect();
            CavityRow {
                omega_hz: w,
                r_down_down: r[0].norm_sqr(),
                r_down_up: r[1].norm_sqr(),
                r_up_down: r[2].norm_sqr(),
                r_up_up: r[3].norm_sqr(),
                phase_down_down: r[0].arg(),
                phase_down_up: r[1].arg(),
                phase_up_down: r[2].arg(),
                phase_up_up: r[3].arg(),
                contrast_n_down: contrast(sys, Nuclear::Down, w),
                contrast_n_up: contrast(sys, Nuclear::Up, w),
            }
        })
        .collect();
    st.csv("cavity_scan.csv", &rows)?;
    let c = cooperativity(&sys.params);
    let w_res = resonant_readout_frequency_averaged(sys)?;
    let refl = mean_reflectivity(sys, w_res);
    let eta = heralding_efficiency(sys, w_res, cfg.photon.path_efficiency)?;
    let w_ep = gate_frequency(sys, GateKind::ElectronPhoton)?;
    st.json(
        "cavity_scan_summary.json",
        &json!({
            "cooperativity": c,
            "resonant_readout_hz": w_res,
            "mean_reflectivity_at_readout": refl,
            "heralding_efficiency_at_readout": eta,
            "electron_photon_frequency_hz": w_ep,
            "heralding_efficiency_at_gate": heralding_efficiency(sys, w_ep, cfg.photon.path_efficiency)?,
        }),
    )?;
    Ok(vec![
        format!("cooperativity C = {c:.4}"),
        format!("resonant readout at {:.3} MHz above the cavity", (w_res - sys.params.omega_c) / 1e6),
        format!("mean reflectivity there {}", pct(refl)),
        format!("heralding efficiency {}", pct(eta)),
    ])
}

/// Phase-readout carrier: sidebands sit at the optimizer's ω* and one beat below it.
pub fn phase_carrier(cfg: &ExperimentConfig) -> CliResult<f64> {
    let oc = OptimizerConfig { alpha: cfg.optimizer.alpha, ..OptimizerConfig::new(cfg.cavity) };
    let (w, _) = optimize_frequency(&oc)?;
    Ok(w - 0.5 * cfg.readout.settings.beat_freq)
}

/// Posterior window whose empirical ↓ fraction checks calibration.
pub const POSTERIOR_BAND: (f64, f64) = (0.78, 0.82);
/// Enough readouts to put a few thousand posteriors inside the band.
pub const CALIBRATION_READOUTS: u64 = 200_000;

#[derive(Serialize)]
struct CalibrationRow {
    posterior_lo: f64,
    posterior_hi: f64,
    records: u64,
    fraction_down: f64,
}

fn readout_error(cfg: &ExperimentConfig, seed: u64, shots: u64, st: &mut Staging) -> CliResult<Vec<String>> {
    let carrier = phase_carrier(cfg)?;
    let model = ArrivalModel::from_cavity(&cfg.cavity, carrier, &cfg.readout.settings, 1.0)?;
    let r = &cfg.readout;
    let ratio = (r.nbar_max / r.nbar_min).powf(1.0 / (r.nbar_points - 1) as f64);
    let grid: Vec<f64> = (0..r.nbar_points).map(|i| r.nbar_min * ratio.powi(i as i32)).collect();
    let rows = error_curve(&model, &grid, shots, r.settings.epsilon, derive_seed(seed, "readout-error", 0))?;
    st.csv("readout_error.csv", &rows)?;
    // calibration needs many intermediate posteriors, so use a point with 20% raw error
    let mid = rows
        .iter()
        .min_by(|a, b| (a.err_raw - 0.2).abs().total_cmp(&(b.err_raw - 0.2).abs()))
        .map(|row| row.nbar)
        .unwrap_or(grid[0]);
    let recs = simulate_many(&model.with_mean_nbar(mid)?, CALIBRATION_READOUTS, r.settings.epsilon, derive_seed(seed, "readout-error", 1))?;
    let mut cal = Vec::new();
    for k in 0..10 {
        let (lo, hi) = (0.1 * k as f64, 0.1 * (k + 1) as f64);
        let inside: Vec<_> = recs.iter().filter(|x| x.posterior_down >= lo && x.posterior_down < hi).collect();
        let down = inside.iter().filter(|x| x.true_spin == Electron::Down).count();
        cal.push(CalibrationRow {
            posterior_lo: lo,
            posterior_hi: hi,
            records: inside.len() as u64,
            fraction_down: if inside.is_empty() { f64::NAN } else { down as f64 / inside.len() as f64 },
        });
    }
    st.csv("posterior_calibration.csv", &cal)?;
    let (band_lo, band_hi) = POSTERIOR_BAND;
    let band: Vec<_> = recs.iter().filter(|x| x.posterior_down >= band_lo && x.posterior_down <= band_hi).collect();
    let band_down = band.iter().filter(|x| x.true_spin == Electron::Down).count() as f64;
    let band_frac = band_down / band.len().max(1) as f64;
    let band_err = (band_frac * (1.0 - band_frac) / band.len().max(1) as f64).sqrt();
    st.json(
        "readout_error_summary.json",
        &json!({
            "carrier_hz": carrier,
            "calibration_nbar": mid,
            "band_lo": band_lo,
            "band_hi": band_hi,
            "band_records": band.len(),
            "band_fraction_down": band_frac,
            "band_fraction_stderr": band_err,
        }),
    )?;
    let mut out = vec![format!("carrier {:.3} MHz above the cavity, {} shots per point", (carrier - cfg.cavity.params.omega_c) / 1e6, rows[0].trials)];
    out.push(format!(
        "posterior in [{band_lo}, {band_hi}] at nbar {mid:.2}: {} records, {band_frac:.4} ± {band_err:.4} truly ↓",
        band.len()
    ));
    for row in &rows {
        out.push(format!(
            "nbar {:7.3}  raw {:.4}  postselected {:.4}  discarded {:.4}",
            row.nbar, row.err_raw, row.err_post, row.discard_frac
        ));
    }
    Ok(out)
}

#[derive(Serialize)]
struct BudgetRow {
    method: String,
    target_fid: f64,
    n_readouts: f64,
    nbar_detected: f64,
    n_in: f64,
}

fn readout_budget(cfg: &ExperimentConfig, seed: u64, shots: u64, st: &mut Staging) -> CliResult<Vec<String>> {
    let s = &cfg.readout.settings;
    let target = cfg.readout.target_fidelity;
    let carrier = phase_carrier(cfg)?;
    let phase = readouts_before_decoherence(&cfg.cavity, s, carrier, target, ReadoutMethod::Phase, shots, seed)?;
    let resonant = readouts_before_decoherence(&cfg.cavity, s, carrier, target, ReadoutMethod::Resonant, shots, seed)?;
    let rows: Vec<BudgetRow> = [("phase", phase), ("resonant", resonant)]
        .iter()
        .map(|(m, b)| BudgetRow {
            method: m.to_string(),
            target_fid: target,
            n_readouts: b.count,
            nbar_detected: b.nbar_detected,
            n_in: b.n_in,
        })
        .collect();
    st.csv("readout_budget.csv", &rows)?;
    Ok(vec![
        format!("phase readout: {:.2} readouts before 1/e nuclear decoherence", phase.count),
        format!("resonant readout: {:.2}", resonant.count),
        format!("ratio {:.2}", phase.count / resonant.count),
    ])
}

#[derive(Serialize)]
struct NbarRow {
    nbar: f64,
    electron: Electron,
    x1_sideband_low: f64,
    x2_sideband_low: f64,
    x1_sideband_high: f64,
    x2_sideband_high: f64,
    x1_resonant: f64,
    x2_resonant: f64,
}

fn backaction(cfg: &ExperimentConfig, st: &mut Staging) -> CliResult<Vec<String>> {
    let sys = &cfg.cavity;
    let carrier = phase_carrier(cfg)?;
    let half = 0.5 * cfg.readout.settings.beat_freq;
    let (w_lo, w_hi) = (carrier - half, carrier + half);
    let w_res = resonant_readout_frequency_averaged(sys)?;
    let (lo, hi) = sys.feature_window();
    let mut sweep = Vec::new();
    for e in Electron::ALL {
        sweep.extend(frequency_sweep(sys, e, lo, hi, 1001, 1.0)?);
    }
    st.csv("backaction_sweep.csv", &sweep)?;
    let mut rows = Vec::new();
    for e in Electron::ALL {
        for nbar in linspace(0.0, 200.0, 41) {
            let x = |mode, w| x_expectation(mode, sys, e, w, nbar);
            rows.push(NbarRow {
                nbar,
                electron: e,
                x1_sideband_low: x(XMode::Asymmetric, w_lo)?,
                x2_sideband_low: x(XMode::Symmetric, w_lo)?,
                x1_sideband_high: x(XMode::Asymmetric, w_hi)?,
                x2_sideband_high: x(XMode::Symmetric, w_hi)?,
                x1_resonant: x(XMode::Asymmetric, w_res)?,
                x2_resonant: x(XMode::Symmetric, w_res)?,
            });
        }
    }
    st.csv("backaction_nbar.csv", &rows)?;
    let k = |w| mean_k(sys, w);
    let (k_res, k_lo, k_hi) = (k(w_res), k(w_lo), k(w_hi));
    st.json(
        "backaction_summary.json",
        &json!({
            "k_per_photon_resonant": k_res,
            "k_per_photon_sideband_low": k_lo,
            "k_per_photon_sideband_high": k_hi,
        }),
    )?;
    Ok(vec![
        format!("decoherence per photon, electron-averaged: resonant {k_res:.3e}"),
        format!("  lower sideband {k_lo:.3e}, upper sideband {k_hi:.3e}"),
    ])
}

#[derive(Serialize)]
struct GateRow {
    step: String,
    fidelity: f64,
    simulated: bool,
}

fn gates(cfg: &ExperimentConfig, st: &mut Staging) -> CliResult<Vec<String>> {
    let b = swap_hold_read_budget(&cfg.register, CENOTN_SEGMENTS, CENOTN_GATE_TIME)?;
    let rows: Vec<GateRow> =
        b.steps.iter().map(|s| GateRow { step: s.name.clone(), fidelity: s.fidelity, simulated: s.simulated }).collect();
    st.csv("gates.csv", &rows)?;
    st.json("gates_summary.json", &json!({ "total": b.total, "measured_total": SWAP_HOLD_READ_MEASURED_TOTAL }))?;
    let mut out = vec![format!("{:<24} {:>9}", "Swap-Hold-Read step", "fidelity")];
    for r in &rows {
        out.push(format!("{:<24} {:>9.4}{}", r.step, r.fidelity, if r.simulated { "  (simulated)" } else { "" }));
    }
    out.push(format!("{:<24} {:>9.4}   measured {SWAP_HOLD_READ_MEASURED_TOTAL}", "Total", b.total));
    Ok(out)
}

#[derive(Serialize)]
struct FringeRow {
    analysis_phase: f64,
    p_reference: f64,
    p_double_cnot: f64,
    p_paired_cnots: f64,
}

fn wrap_pi(x: f64) -> f64 {
    let y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y - 2.0 * PI
    } else {
        y
    }
}

fn geom_phase(cfg: &ExperimentConfig, seed: u64, shots: u64, st: &mut Staging) -> CliResult<Vec<String>> {
    let p = &cfg.register;
    if p.c13.is_some() {
        return Err(SivError::Dimension("geom-phase runs on the electron-nuclear register only".into()).into());
    }
    let c = build_gate(Gate::CnNotE, p);
    let cb = build_gate(Gate::CnNotEBar, p);
    let double = c.clone().then(&c);
    let paired = c.clone().then(&cb).then(&cb).then(&c);
    let phases: Vec<f64> = (0..16).map(|k| k as f64 * PI / 8.0).collect();
    let noise = NoiseModel::from_register(p);
    let scan = |mid: &PulseSequence, tag| nuclear_ramsey_scan(p, mid, 0.0, &phases, &noise, shots, derive_seed(seed, "geom-phase", tag));
    let reference = scan(&PulseSequence::new(vec![]), 0)?;
    let y_double = scan(&double, 1)?;
    let y_paired = scan(&paired, 2)?;
    let rows: Vec<FringeRow> = (0..phases.len())
        .map(|i| FringeRow {
            analysis_phase: phases[i],
            p_reference: reference[i],
            p_double_cnot: y_double[i],
            p_paired_cnots: y_paired[i],
        })
        .collect();
    st.csv("geom_phase_fringes.csv", &rows)?;
    let f0 = fringe_phase(&phases, &reference)?;
    // a phase θ picked up between the π/2 pulses moves the fringe by −θ
    let ph_double = (f0 - fringe_phase(&phases, &y_double)?).rem_euclid(2.0 * PI);
    let ph_paired = wrap_pi(f0 - fringe_phase(&phases, &y_paired)?);
    let (_, _, formula) = cnot_geometric_phases(p.cnot_m)?;
    let exact_double = nuclear_relative_phase(p, &double)?;
    let exact_paired = wrap_pi(nuclear_relative_phase(p, &paired)?);
    st.json(
        "geom_phase_summary.json",
        &json!({
            "double_cnot_phase_over_pi": ph_double / PI,
            "paired_cnot_phase_over_pi": ph_paired / PI,
            "double_cnot_exact_over_pi": exact_double / PI,
            "paired_cnot_exact_over_pi": exact_paired / PI,
            "geometric_formula_over_pi": formula / PI,
        }),
    )?;
    Ok(vec![
        format!("double CnNOTe Ramsey phase {:.4} π (propagator {:.4} π, closed form {:.4} π)", ph_double / PI, exact_double / PI, formula / PI),
        format!("paired CNOT sequence phase {:.4} π (propagator {:.4} π)", ph_paired / PI, exact_paired / PI),
    ])
}

fn memory(cfg: &ExperimentConfig, seed: u64, shots: u64, temperature: Option<f64>, st: &mut Staging) -> CliResult<Vec<String>> {
    let model = calibrate(&cfg.thermal)?;
    let t = temperature.unwrap_or(cfg.thermal.t_low);
    let scaling = t2_vs_n(&model, t, &MEMORY_PULSES, shots, seed)?;
    st.csv("memory_t2.csv", &scaling.rows)?;
    st.json("memory_summary.json", &json!({ "temperature_k": t, "alpha": scaling.alpha }))?;
    let mut out = vec![format!("nuclear XY8 memory at {t} K")];
    for r in &scaling.rows {
        out.push(format!("n = {:5}  T2 = {:.4e} s ± {:.1e}  stretch {:.2}", r.n_pulses, r.t2, r.t2_err, r.beta));
    }
    out.push(format!("power law T2 ∝ n^{:.3}", scaling.alpha));
    Ok(out)
}

#[derive(Serialize)]
struct SpinPhotonRow {
    gate: String,
    temperature_k: f64,
    error_detection: bool,
    budget_fidelity: f64,
    exact_all_fidelity: f64,
    mc_all_fidelity: f64,
    mc_accepted_fidelity: f64,
    mc_accepted_stderr: f64,
    rejected_fraction: f64,
    counts_fidelity: f64,
    counts_stderr: f64,
}

#[derive(Serialize)]
struct BasisRow {
    temperature_k: f64,
    basis: String,
    p00: f64,
    p01: f64,
    p10: f64,
    p11: f64,
}

/// Herald-weighted mean of the accepted photon-spin states.
fn mean_state(runs: &[RunRecord]) -> CliResult<DensityMatrix> {
    let mut acc = None;
    let mut w_tot = 0.0;
    for r in runs.iter().filter(|r| !r.herald.flag_raised) {
        let w = r.herald.herald_prob;
        let m = r.herald.state.matrix().map(|z| z * w);
        acc = Some(match acc {
            None => m,
            Some(a) => a + m,
        });
        w_tot += w;
    }
    let m = acc.ok_or(SivError::AllRejected)?;
    Ok(DensityMatrix::new(m.map(|z| z / w_tot))?)
}

fn spin_photon(
    cfg: &ExperimentConfig,
    kind: GateKind,
    detect: bool,
    seed: u64,
    shots: u64,
    temperature: Option<f64>,
    st: &mut Staging,
) -> CliResult<Vec<String>> {
    let temps: Vec<f64> = match temperature {
        Some(t) => vec![find_budget(&cfg.budgets, kind, t)?.temperature],
        None => cfg.budgets.iter().filter(|b| b.gate == kind).map(|b| b.temperature).collect(),
    };
    if temps.is_empty() {
        return Err(SivError::Empty(format!("no budget for {}", kind.name())).into());
    }
    let sys = &cfg.cavity;
    let w = gate_frequency(sys, kind)?;
    let mut rows = Vec::new();
    let mut bases = Vec::new();
    let mut out = vec![format!("{} gate at {:.3} MHz above the cavity", kind.name(), (w - sys.params.omega_c) / 1e6)];
    for (i, &t) in temps.iter().enumerate() {
        let gate = SpinPhotonGate::new(kind, Reflectivities::from_cavity(sys, w), cfg.photon.nbar_in)?;
        let budget = find_budget(&cfg.budgets, kind, t)?;
        let model = SpinPhotonModel::calibrate(gate, budget, cfg.injection)?;
        let runs = simulate_runs(&model, shots, detect, derive_seed(seed, kind.name(), i as u64))?;
        let mc = error_detect_filter(&runs)?;
        let exact = model.exact_summary(detect)?;
        let rho = mean_state(&runs)?;
        let counts = sample_bell_counts(&rho, (shots / 3).max(1), derive_seed(seed, "bell_counts", i as u64))?;
        let (fc, fc_err) = bell_fidelity_from_counts(&counts)?;
        let probs = basis_probabilities(&rho)?;
        for (b, p) in ["zz", "xx", "yy"].iter().zip(probs) {
            bases.push(BasisRow { temperature_k: t, basis: b.to_string(), p00: p[0], p01: p[1], p10: p[2], p11: p[3] });
        }
        rows.push(SpinPhotonRow {
            gate: kind.name().to_string(),
            temperature_k: t,
            error_detection: detect,
            budget_fidelity: budget_product(&budget)?,
            exact_all_fidelity: exact.all_fidelity,
            mc_all_fidelity: mc.all_fidelity,
            mc_accepted_fidelity: mc.accepted_fidelity,
            mc_accepted_stderr: mc.accepted_stderr,
            rejected_fraction: mc.rejected_fraction,
            counts_fidelity: fc,
            counts_stderr: fc_err,
        });
        if detect {
            out.push(format!(
                "T = {t} K: all runs {:.4}, accepted {:.4} ± {:.4} (gain {:+.4}), rejected {:.4}",
                mc.all_fidelity,
                mc.accepted_fidelity,
                mc.accepted_stderr,
                mc.accepted_fidelity - mc.all_fidelity,
                mc.rejected_fraction
            ));
        } else {
            out.push(format!(
                "T = {t} K: Bell fidelity {:.4} ± {:.4} (budget {:.4}); sampled correlations of the simulated errors alone {:.4} ± {:.4}",
                mc.all_fidelity,
                mc.accepted_stderr,
                budget_product(&budget)?,
                fc,
                fc_err
            ));
        }
    }
    let stem = match (kind, detect) {
        (GateKind::ElectronPhoton, _) => "entangle_e",
        (GateKind::Phone, false) => "phone",
        (GateKind::Phone, true) => "error_detect",
    };
    st.csv(&format!("{stem}.csv"), &rows)?;
    st.csv(&format!("{stem}_bases.csv"), &bases)?;
    Ok(out)
}

#[derive(Serialize)]
struct StorageRow {
    t_s: f64,
    fidelity_detected: f64,
    fidelity_plain: f64,
}

fn storage(cfg: &ExperimentConfig, st: &mut Staging) -> CliResult<Vec<String>> {
    let p = &cfg.photon;
    let grid = linspace(0.0, 6e-3, 121);
    let a = storage_decay(p.storage_f0_detected, p.storage_tau_detected, &grid)?;
    let b = storage_decay(p.storage_f0_plain, p.storage_tau_plain, &grid)?;
    let rows: Vec<StorageRow> =
        a.iter().zip(&b).map(|(x, y)| StorageRow { t_s: x.0, fidelity_detected: x.1, fidelity_plain: y.1 }).collect();
    st.csv("storage.csv", &rows)?;
    let ca = storage_crossing(p.storage_f0_detected, p.storage_tau_detected, 0.5);
    let cb = storage_crossing(p.storage_f0_plain, p.storage_tau_plain, 0.5);
    st.json("storage_summary.json", &json!({ "crossing_detected_s": ca, "crossing_plain_s": cb }))?;
    let fmt = |c: Option<f64>| c.map(|x| format!("{:.3} ms", x * 1e3)).unwrap_or_else(|| "never".into());
    Ok(vec![format!("F = 0.5 crossing with error detection {}, without {}", fmt(ca), fmt(cb))])
}

#[derive(Serialize)]
struct ThermalRow {
    temperature_k: f64,
    t1_e: f64,
    t2_e: f64,
    t2_n: f64,
    t2_n_without_fluctuators: f64,
}

#[derive(Serialize)]
struct NarrowingRow {
    rate_times_tau: f64,
    coherence: f64,
    stderr: f64,
}

/// Hahn-echo length and fluctuator shift of the motional-narrowing table.
const NARROWING_TAU: f64 = 1e-3;
const NARROWING_COUPLING: f64 = 0.5 / NARROWING_TAU;

fn thermal(cfg: &ExperimentConfig, seed: u64, shots: u64, st: &mut Staging) -> CliResult<Vec<String>> {
    let model = calibrate(&cfg.thermal)?;
    let ratio = (5.0f64 / 0.1).powf(1.0 / 59.0);
    let grid: Vec<f64> = (0..60).map(|i| (0.1 * ratio.powi(i)).min(5.0)).collect();
    let rows = grid
        .iter()
        .map(|&t| {
            Ok(ThermalRow {
                temperature_k: t,
                t1_e: electron_t1(t, &model.phonon)?,
                t2_e: electron_t2(t, &model.phonon)?,
                t2_n: model.nuclear_t2(t)?,
                t2_n_without_fluctuators: model.nuclear_t2_without_fluctuators(t)?,
            })
        })
        .collect::<siv_core::Result<Vec<_>>>()?;
    st.csv("thermal_t2.csv", &rows)?;
    st.csv("thermal_t1_strain.csv", &t1_curves(&STRAIN_SPLITTINGS, &grid, &model.phonon)?)?;
    let f = Fluctuator { omega: cfg.thermal.fluctuator_omegas[0], coupling: NARROWING_COUPLING, base_rate: 0.0 };
    let seq = DecouplingSequence::hahn(NARROWING_TAU);
    let mut narrowing = Vec::new();
    for (i, k) in [0.01, 0.1, 1.0, 10.0, 100.0].into_iter().enumerate() {
        let (c, e) = telegraph_mc(&[f], &[k / NARROWING_TAU], &seq, shots, derive_seed(seed, "narrowing", i as u64))?;
        narrowing.push(NarrowingRow { rate_times_tau: k, coherence: c, stderr: e });
    }
    st.csv("thermal_narrowing.csv", &narrowing)?;
    st.json("thermal_model.json", &model)?;
    let peak = rows.iter().max_by(|a, b| a.t2_n.total_cmp(&b.t2_n)).map(|r| r.temperature_k).unwrap_or(f64::NAN);
    Ok(vec![
        format!("T2,e: {:.3e} s at {} K, {:.3e} s at {} K", electron_t2(cfg.thermal.t_low, &model.phonon)?, cfg.thermal.t_low, electron_t2(cfg.thermal.t_high, &model.phonon)?, cfg.thermal.t_high),
        format!("T2,n: {:.3e} s at {} K, {:.3e} s at {} K, largest near {:.2} K", model.nuclear_t2(cfg.thermal.t_low)?, cfg.thermal.t_low, model.nuclear_t2(cfg.thermal.t_high)?, cfg.thermal.t_high, peak),
        format!(
            "Hahn coherence of one fluctuator: {:.4} ± {:.4} at rate 1/τ, {:.4} ± {:.4} at 100/τ",
            narrowing[2].coherence, narrowing[2].stderr, narrowing[4].coherence, narrowing[4].stderr
        ),
    ])
}

fn optimize(cfg: &ExperimentConfig, seed: u64, shots: u64, st: &mut Staging) -> CliResult<Vec<String>> {
    let oc = OptimizerConfig { alpha: cfg.optimizer.alpha, ..OptimizerConfig::new(cfg.cavity) };
    let rows = frequency_scan(&oc, cfg.optimizer.scan_points)?;
    st.csv("optimizer_scan.csv", &rows)?;
    let mut summary = BTreeMap::new();
    let mut out = Vec::new();
    for (label, sys) in [("configured", cfg.cavity), ("achievable", achievable_system())] {
        let oc = OptimizerConfig { alpha: cfg.optimizer.alpha, ..OptimizerConfig::new(sys) };
        let (w, ratio) = optimize_frequency(&oc)?;
        let (_, budget) = expected_readout_budget(&oc, &cfg.readout.settings, scaled_reference_offset(&sys), shots, derive_seed(seed, label, 0))?;
        summary.insert(
            label,
            json!({
                "omega_star_hz": w,
                "omega_star_minus_cavity_hz": w - sys.params.omega_c,
                "ratio_star": ratio,
                "readouts_before_decoherence": if budget.count.is_finite() { json!(budget.count) } else { json!("inf") },
            }),
        );
        out.push(format!(
            "{label}: ω* = cavity + {:.2} MHz, d_e/d_n = {ratio:.3}, readouts before 1/e = {:.1}",
            (w - sys.params.omega_c) / 1e6,
            budget.count
        ));
    }
    st.json("optimizer_summary.json", &summary)?;
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct PeakRecord {
    cavity_id: String,
    peak_hz: f64,
    intensity: f64,
}

pub fn read_spectra(path: &Path) -> CliResult<Vec<PeakSpectrum>> {
    let mut rdr =
        csv::Reader::from_path(path).map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    let mut groups: BTreeMap<String, Vec<Peak>> = BTreeMap::new();
    for (i, rec) in rdr.deserialize::<PeakRecord>().enumerate() {
        let rec = rec.map_err(|e| SivError::Parse { line: i + 2, msg: e.to_string() })?;
        if !rec.peak_hz.is_finite() {
            return Err(SivError::Parse { line: i + 2, msg: "peak_hz must be finite".into() }.into());
        }
        groups.entry(rec.cavity_id).or_default().push(Peak { freq: rec.peak_hz, intensity: rec.intensity });
    }
    groups.into_iter().map(|(id, peaks)| PeakSpectrum::new(id, peaks).map_err(CliError::from)).collect()
}

#[derive(Serialize)]
struct HistRow {
    delta_gs_hz: f64,
    count: u64,
}

#[derive(Serialize)]
struct CandidateRow {
    cavity_id: String,
    a_hz: f64,
    b_hz: f64,
    c_hz: f64,
    d_hz: f64,
    delta_gs_hz: f64,
}

fn survey(cfg: &ExperimentConfig, seed: u64, repeats: Option<u64>, spectra: Option<&Path>, st: &mut Staging) -> CliResult<Vec<String>> {
    let s = &cfg.survey;
    let (spectra, truth) = match spectra {
        Some(p) => (read_spectra(p)?, None),
        None => {
            let (sp, planted) = synthetic_spectra(&s.synthetic, derive_seed(seed, "survey-synthetic", 0))?;
            st.csv("survey_planted.csv", &planted)?;
            let high = planted.iter().filter(|p| p.delta_gs > s.threshold).count();
            (sp, Some(high as f64 / planted.len() as f64))
        }
    };
    let mut cands = Vec::new();
    for sp in &spectra {
        for q in cavity_candidates(sp, s.tolerance)?.candidates {
            cands.push(CandidateRow { cavity_id: sp.cavity_id.clone(), a_hz: q.a, b_hz: q.b, c_hz: q.c, d_hz: q.d, delta_gs_hz: q.delta_gs() });
        }
    }
    st.csv("survey_candidates.csv", &cands)?;
    let hist = sample_distribution(&spectra, s.mu, s.sigma, repeats.unwrap_or(s.repeats), s.tolerance, seed)?;
    let bins: Vec<HistRow> = hist.bins(s.bin_width)?.into_iter().map(|(d, c)| HistRow { delta_gs_hz: d, count: c }).collect();
    st.csv("survey_histogram.csv", &bins)?;
    let (f, e) = fraction_above(&hist, s.threshold)?;
    st.json(
        "survey_summary.json",
        &json!({
            "fraction_above_threshold": f,
            "fraction_stderr": e,
            "planted_fraction": truth,
            "skipped_draws": hist.skipped,
            "repeats": hist.repeats,
            "candidates": cands.len(),
        }),
    )?;
    let mut out = vec![format!(
        "{} cavities, {} candidate quadruples, {} draws skipped",
        spectra.len(),
        cands.len(),
        hist.skipped
    )];
    out.push(format!("fraction with ground splitting above {:.0} GHz: {f:.4} ± {e:.4}", s.threshold / 1e9));
    if let Some(t) = truth {
        out.push(format!("planted fraction {t:.4}"));
    }
    Ok(out)
}

/// Electron-averaged decoherence per photon.
pub fn mean_k(sys: &CavitySystem, w: f64) -> f64 {
    0.5 * Electron::ALL.iter().map(|&e| decoherence_per_photon(sys, e, w)).sum::<f64>()
}
