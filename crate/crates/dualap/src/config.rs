use std::path::Path;

use anyhow::{Context, Result};
use dualap_core::sysid::EstimateOptions;
use dualap_core::trial::{CohortConfig, IdentificationScenario, TrialConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variable naming a config file when `--config` is absent.
pub const CONFIG_ENV: &str = "DUALAP_CONFIG";

/// Source of the control-model constants that are not identified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FixedParameters {
    /// Mapped from the patient's own plant constants.
    #[default]
    Patient,
    /// Mapped from the nominal plant for every patient.
    Nominal,
}

/// Everything that shapes a run. Missing keys take their defaults, so a
/// config file only needs the values it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub patients: usize,
    pub fixed_parameters: FixedParameters,
    pub cohort: CohortConfig,
    pub identification: IdentificationScenario,
    pub estimate: EstimateOptions,
    pub trial: TrialConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            patients: 50,
            fixed_parameters: FixedParameters::default(),
            cohort: CohortConfig::default(),
            identification: IdentificationScenario::default(),
            estimate: EstimateOptions::default(),
            trial: TrialConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Explicit path first, then the environment variable, then defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable as TOML")
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn canonical_form_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_override_changes_only_that_value() {
        let cfg = RunConfig::from_toml("seed = 7\n[trial.dosing]\nglucagon_threshold = 4.0\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.trial.dosing.glucagon_threshold, 4.0);
        assert_eq!(cfg.trial.dosing.insulin_threshold, 5.0);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 7").is_err());
    }

    #[test]
    fn hash_is_stable_hex() {
        let h = RunConfig::default().hash();
        assert_eq!(h.len(), 64);
        assert_eq!(h, RunConfig::default().hash());
    }
}
