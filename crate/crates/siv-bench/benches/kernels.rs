use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use siv_core::bayes_readout::{simulate_many, ArrivalModel, ReadoutSettings};
use siv_core::cavity_qed::{scatter_amplitudes, CavitySystem};
use siv_core::optimizer::{optimize_frequency, OptimizerConfig};
use siv_core::spin::SpinState;
use siv_core::spin_photon::{
    default_budgets, find_budget, gate_frequency, simulate_runs, GateKind, InjectionSettings, Reflectivities,
    SpinPhotonGate, SpinPhotonModel,
};
use siv_core::spin_register::{swap_hold_read_budget, RegisterParams};
use siv_core::survey::{sample_distribution, synthetic_spectra, SyntheticEnsemble};
use siv_core::thermal::{telegraph_mc, DecouplingSequence, Fluctuator};

fn cavity(c: &mut Criterion) {
    let sys = CavitySystem::reference_device();
    let w = sys.params.omega_c + 68.6e9;
    c.bench_function("scatter_amplitudes", |b| {
        b.iter(|| scatter_amplitudes(black_box(&sys), SpinState::all()[0], black_box(w)))
    });
    c.bench_function("optimize_frequency", |b| {
        let cfg = OptimizerConfig::new(sys);
        b.iter(|| optimize_frequency(black_box(&cfg)).unwrap())
    });
}

fn readout(c: &mut Criterion) {
    let sys = CavitySystem::reference_device();
    let model = ArrivalModel::from_cavity(&sys, sys.params.omega_c + 68.5e9, &ReadoutSettings::default(), 5.0).unwrap();
    c.bench_function("simulate_many_1e4", |b| b.iter(|| simulate_many(&model, 10_000, 0.2, black_box(7)).unwrap()));
}

fn photon(c: &mut Criterion) {
    let sys = CavitySystem::reference_device();
    let w = gate_frequency(&sys, GateKind::Phone).unwrap();
    let gate = SpinPhotonGate::new(GateKind::Phone, Reflectivities::from_cavity(&sys, w), 5e-3).unwrap();
    let budget = find_budget(&default_budgets(), GateKind::Phone, 4.3).unwrap();
    let model = SpinPhotonModel::calibrate(gate, budget, InjectionSettings::default()).unwrap();
    c.bench_function("phone_runs_1e4", |b| b.iter(|| simulate_runs(&model, 10_000, true, black_box(3)).unwrap()));
}

fn register(c: &mut Criterion) {
    let p = RegisterParams::reference_device();
    c.bench_function("swap_hold_read_budget", |b| b.iter(|| swap_hold_read_budget(black_box(&p), 8, 29.2e-6).unwrap()));
}

fn thermal(c: &mut Criterion) {
    let f = Fluctuator { omega: 26e9, coupling: 500.0, base_rate: 0.0 };
    let seq = DecouplingSequence::xy8(64, 10e-3).unwrap();
    c.bench_function("telegraph_mc_1e4", |b| b.iter(|| telegraph_mc(&[f], &[1e3], &seq, 10_000, black_box(1)).unwrap()));
}

fn survey(c: &mut Criterion) {
    let (spectra, _) = synthetic_spectra(&SyntheticEnsemble::default(), 11).unwrap();
    c.bench_function("survey_1e3_repeats", |b| {
        b.iter(|| sample_distribution(&spectra, 3.0, 2.0, 1_000, 0.5e9, black_box(5)).unwrap())
    });
}

criterion_group!(benches, cavity, readout, photon, register, thermal, survey);
criterion_main!(benches);
