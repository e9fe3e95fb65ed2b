//! Simulator for a diamond silicon-vacancy node in a nanophotonic cavity: reflection
//! physics, the electron-nuclear register, readout and backaction, spin-photon gates,
//! temperature-dependent coherence, readout-frequency optimization and the strain survey.
//!
//! Frequencies are in Hz (not angular) and times in seconds throughout.

pub mod backaction;
pub mod bayes_readout;
pub mod cavity_qed;
pub mod error;
pub mod optimizer;
pub mod quantum_core;
pub mod rng;
pub mod spin;
pub mod spin_photon;
pub mod spin_register;
pub mod survey;
pub mod thermal;

pub use cavity_qed::{CavityParams, CavitySystem, SpinLines};
pub use error::{Result, SivError};
pub use quantum_core::{DensityMatrix, KrausChannel, UnitaryOperator};
pub use spin::{Electron, Nuclear, SpinState};
