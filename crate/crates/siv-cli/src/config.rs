use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use siv_core::bayes_readout::ReadoutSettings;
use siv_core::cavity_qed::CavitySystem;
use siv_core::spin_photon::{default_budgets, ErrorBudget, InjectionSettings};
use siv_core::spin_register::RegisterParams;
use siv_core::survey::SyntheticEnsemble;
use siv_core::thermal::ThermalCalibration;
use siv_core::{Result, SivError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutSection {
    pub settings: ReadoutSettings,
    pub target_fidelity: f64,
    /// Detected-photon grid of the error curve.
    pub nbar_min: f64,
    pub nbar_max: f64,
    pub nbar_points: usize,
}

impl Default for ReadoutSection {
    fn default() -> Self {
        Self { settings: ReadoutSettings::default(), target_fidelity: 0.95, nbar_min: 0.5, nbar_max: 30.0, nbar_points: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhotonSection {
    /// Mean photon number of each weak time-bin pulse.
    pub nbar_in: f64,
    /// Collection and detection efficiency behind the cavity.
    pub path_efficiency: f64,
    /// Storage decay after the gate: fidelity at zero delay and decay constant, with and
    /// without error detection.
    pub storage_f0_detected: f64,
    pub storage_tau_detected: f64,
    pub storage_f0_plain: f64,
    pub storage_tau_plain: f64,
}

impl Default for PhotonSection {
    fn default() -> Self {
        Self {
            nbar_in: 5e-3,
            path_efficiency: 0.52,
            storage_f0_detected: 0.71,
            storage_tau_detected: 4.5e-3,
            storage_f0_plain: 0.66,
            storage_tau_plain: 3.8e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub alpha: f64,
    pub scan_points: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self { alpha: 0.1, scan_points: 2001 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurveySection {
    pub tolerance: f64,
    pub mu: f64,
    pub sigma: f64,
    pub repeats: u64,
    pub threshold: f64,
    pub bin_width: f64,
    pub synthetic: SyntheticEnsemble,
}

/// Matching window for the synthetic ensemble: its peaks carry 0.2 GHz of jitter, so a
/// window well under the library's 2 GHz spectrometer default keeps chance matches rare.
pub const SYNTHETIC_TOLERANCE: f64 = 0.5e9;

impl Default for SurveySection {
    fn default() -> Self {
        let synthetic = SyntheticEnsemble::default();
        Self {
            tolerance: SYNTHETIC_TOLERANCE,
            mu: synthetic.sivs_per_cavity as f64,
            sigma: 2.0,
            repeats: 10_000,
            threshold: 400e9,
            bin_width: 20e9,
            synthetic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSection {
    pub seed: u64,
}

impl Default for SeedSection {
    fn default() -> Self {
        Self { seed: 20_240_601 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub cavity: CavitySystem,
    pub register: RegisterParams,
    pub budgets: Vec<ErrorBudget>,
    pub injection: InjectionSettings,
    pub thermal: ThermalCalibration,
    pub readout: ReadoutSection,
    pub photon: PhotonSection,
    pub optimizer: OptimizerSection,
    pub survey: SurveySection,
    pub seeds: SeedSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            cavity: CavitySystem::reference_device(),
            register: RegisterParams::reference_device(),
            budgets: default_budgets(),
            injection: InjectionSettings::default(),
            thermal: ThermalCalibration::default(),
            readout: ReadoutSection::default(),
            photon: PhotonSection::default(),
            optimizer: OptimizerSection::default(),
            survey: SurveySection::default(),
            seeds: SeedSection::default(),
        }
    }
}

pub const DEFAULT_CONFIG: &str = include_str!("../config/default.toml");

fn field_error(field: &str, reason: &str) -> SivError {
    SivError::InvalidParameter { field: field.to_string(), reason: reason.to_string() }
}

/// Re-roots a core validation error under the config section it came from.
fn within(section: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        SivError::InvalidParameter { field, reason } => {
            let leaf = field.rsplit('.').next().unwrap_or(&field);
            let field = if leaf == section.rsplit('.').next().unwrap_or(section) {
                section.to_string()
            } else {
                format!("{section}.{leaf}")
            };
            SivError::InvalidParameter { field, reason }
        }
        other => other,
    })
}

impl ExperimentConfig {
    /// Parses TOML; unknown or mistyped keys report their dotted path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::de::Deserializer::parse(text).map_err(|e| SivError::Parse {
            line: e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0),
            msg: e.message().to_string(),
        })?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            field_error(if path == "." { "<root>" } else { &path }, e.inner().message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<(Self, String)> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| field_error("--config", &format!("cannot read {}: {e}", p.display())))?,
            None => DEFAULT_CONFIG.to_string(),
        };
        Ok((Self::from_toml(&text)?, text))
    }

    pub fn validate(&self) -> Result<()> {
        within("cavity.params", self.cavity.params.validate())?;
        within("cavity.lines", self.cavity.lines.validate())?;
        within("register", self.register.validate())?;
        for (i, b) in self.budgets.iter().enumerate() {
            within(&format!("budgets[{i}]"), b.validate())?;
        }
        within("readout.settings", self.readout.settings.validate())?;
        if !(self.readout.target_fidelity > 0.5 && self.readout.target_fidelity < 1.0) {
            return Err(field_error("readout.target_fidelity", "must lie in (0.5, 1)"));
        }
        if !(self.readout.nbar_min > 0.0 && self.readout.nbar_max > self.readout.nbar_min) || self.readout.nbar_points < 2 {
            return Err(field_error("readout.nbar_min", "need 0 < nbar_min < nbar_max and at least two points"));
        }
        if !(self.photon.nbar_in > 0.0 && self.photon.nbar_in < 1.0) {
            return Err(field_error("photon.nbar_in", "must lie in (0, 1)"));
        }
        if !(self.photon.path_efficiency > 0.0 && self.photon.path_efficiency <= 1.0) {
            return Err(field_error("photon.path_efficiency", "must lie in (0, 1]"));
        }
        for (name, f0, tau) in [
            ("photon.storage_f0_detected", self.photon.storage_f0_detected, self.photon.storage_tau_detected),
            ("photon.storage_f0_plain", self.photon.storage_f0_plain, self.photon.storage_tau_plain),
        ] {
            if !(0.0..=1.0).contains(&f0) || !(tau > 0.0) {
                return Err(field_error(name, "need fidelity in [0, 1] and a positive decay constant"));
            }
        }
        if !(self.optimizer.alpha > 0.0) || self.optimizer.scan_points < 2 {
            return Err(field_error("optimizer.alpha", "need alpha > 0 and at least two scan points"));
        }
        let s = &self.survey;
        if !(s.tolerance > 0.0) {
            return Err(field_error("survey.tolerance", "must be positive"));
        }
        if !(s.sigma >= 0.0) || !s.mu.is_finite() || s.repeats == 0 {
            return Err(field_error("survey.sigma", "need finite mu, sigma >= 0 and repeats > 0"));
        }
        if !(s.bin_width > 0.0) {
            return Err(field_error("survey.bin_width", "must be positive"));
        }
        Ok(())
    }
}

/// Hex SHA-256 of the configuration text as read.
pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}
