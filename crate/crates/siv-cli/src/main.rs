use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use siv_cli::commands::{run, CommandKind, RunOptions};
use siv_cli::config::{config_hash, ExperimentConfig};
use siv_cli::output::{CliError, CliResult, Manifest, Staging};

#[derive(Parser)]
#[command(name = "siv", version, about = "Diamond SiV cavity-QED network node simulator")]
struct Cli {
    /// TOML experiment configuration; the built-in defaults are used when absent
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides `seeds.seed` from the configuration
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Monte-Carlo shots for stochastic commands
    #[arg(long, global = true)]
    shots: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Cryostat temperature in kelvin (memory, entangle-e, phone, error-detect)
    #[arg(long, global = true)]
    temperature: Option<f64>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Reflection spectra and contrast of the four spin states
    CavityScan,
    /// Single-shot electron readout error against detected photon number
    ReadoutError,
    /// Readouts before nuclear decoherence, phase against resonant readout
    ReadoutBudget,
    /// Measurement backaction on the nuclear spin
    Backaction,
    /// Swap-Hold-Read fidelity budget
    Gates,
    /// Geometric phase of repeated nuclear-controlled electron flips
    GeomPhase,
    /// Nuclear T2 under XY8 decoupling against pulse number
    Memory,
    /// Electron-photon entanglement fidelity
    EntangleE,
    /// Nuclear-photon (PHONE) entanglement fidelity
    Phone,
    /// PHONE fidelity with the electron error-detection flag
    ErrorDetect,
    /// Photon-storage fidelity decay
    Storage,
    /// Electron and nuclear coherence against temperature
    Thermal,
    /// Readout-frequency optimization
    Optimize,
    /// Strain survey of ground-state splittings
    Survey {
        /// CSV with columns cavity_id,peak_hz,intensity; a synthetic ensemble is used when absent
        #[arg(long)]
        spectra: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> CliResult<()> {
    let (cfg, text) = ExperimentConfig::load(cli.config.as_deref())?;
    let (kind, spectra) = match cli.command {
        Cmd::CavityScan => (CommandKind::CavityScan, None),
        Cmd::ReadoutError => (CommandKind::ReadoutError, None),
        Cmd::ReadoutBudget => (CommandKind::ReadoutBudget, None),
        Cmd::Backaction => (CommandKind::Backaction, None),
        Cmd::Gates => (CommandKind::Gates, None),
        Cmd::GeomPhase => (CommandKind::GeomPhase, None),
        Cmd::Memory => (CommandKind::Memory, None),
        Cmd::EntangleE => (CommandKind::EntangleE, None),
        Cmd::Phone => (CommandKind::Phone, None),
        Cmd::ErrorDetect => (CommandKind::ErrorDetect, None),
        Cmd::Storage => (CommandKind::Storage, None),
        Cmd::Thermal => (CommandKind::Thermal, None),
        Cmd::Optimize => (CommandKind::Optimize, None),
        Cmd::Survey { spectra } => (CommandKind::Survey, spectra),
    };
    let opts = RunOptions {
        seed: cli.seed.unwrap_or(cfg.seeds.seed),
        shots: cli.shots,
        temperature: cli.temperature,
        spectra,
    };
    let mut staging = Staging::new(&cli.out)?;
    let outcome = run(kind, &cfg, &opts, &mut staging)?;
    let manifest = Manifest {
        command: kind.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: opts.seed,
        shots: outcome.shots,
        temperature_k: opts.temperature,
        config_sha256: config_hash(&text),
        outputs: Vec::new(),
    };
    let written = staging.commit(manifest)?;
    // a closed stdout must not undo a committed run
    let mut stdout = std::io::stdout().lock();
    for line in &outcome.report {
        let _ = writeln!(stdout, "{line}");
    }
    for p in &written {
        let _ = writeln!(stdout, "wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("siv: {e}");
            match e {
                CliError::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
