//! Batch configuration and per-cell seed derivation.

use std::path::{Path, PathBuf};

use hamtomo::bayes::EstimatorOptions;
use hamtomo::control::PhaseOptions;
use serde::{Deserialize, Serialize};

use crate::generate::GeneratorOptions;
use crate::{HarnessError, Result};

/// Spectral seeding parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeedingOptions {
    /// Upper end of the spectrum grid.
    pub omega_max: f64,
    pub resolution_factor: f64,
    /// Frequencies below this are never peaks.
    pub dead_zone: f64,
    /// Multiplies the robust noise floor.
    pub floor_scale: f64,
    pub hann: bool,
    /// Maxima weaker than this multiple of the window leakage of stronger
    /// maxima are discarded; zero keeps every maximum.
    pub leakage_margin: f64,
}

impl Default for SeedingOptions {
    fn default() -> Self {
        Self {
            omega_max: 10.0,
            resolution_factor: 4.0,
            dead_zone: 0.1,
            floor_scale: 1.0,
            hann: true,
            leakage_margin: 10.0,
        }
    }
}

/// Second-stage (gauge phase) run against a reference system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseStageConfig {
    /// Fixed-basis grid cell used for the prior estimates.
    pub prior_n: usize,
    pub prior_ne: u64,
    /// Two-step trace lengths (samples, including `t = 0`).
    pub n_list: Vec<usize>,
    pub ne: u64,
    pub options: PhaseOptions,
}

impl Default for PhaseStageConfig {
    fn default() -> Self {
        Self {
            prior_n: 16385,
            prior_ne: 1000,
            n_list: vec![51, 201],
            ne: 5000,
            options: PhaseOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub n_systems: usize,
    pub n_list: Vec<usize>,
    pub ne_list: Vec<u64>,
    pub dt: f64,
    pub seed: u64,
    pub generator: GeneratorOptions,
    pub output_dir: PathBuf,
    pub seeding: SeedingOptions,
    pub estimator: EstimatorOptions,
    /// Run reconstruction after estimation.
    pub reconstruct: bool,
    pub phase_stage: Option<PhaseStageConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_systems: 20,
            n_list: vec![1025, 4097],
            ne_list: vec![125, 250],
            dt: 0.1,
            seed: 1,
            generator: GeneratorOptions::default(),
            output_dir: PathBuf::from("out"),
            seeding: SeedingOptions::default(),
            estimator: EstimatorOptions::default(),
            reconstruct: true,
            phase_stage: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if self.n_systems == 0 {
            return Err(HarnessError::Config("n_systems must be positive".into()));
        }
        if self.n_list.is_empty() || self.ne_list.is_empty() {
            return Err(HarnessError::Config("n_list and ne_list must be non-empty".into()));
        }
        if let Some(n) = self.n_list.iter().find(|&&n| n < 16) {
            return Err(HarnessError::Config(format!("signal length {n} is too short")));
        }
        if self.ne_list.contains(&0) {
            return Err(HarnessError::Config("ensemble sizes must be positive".into()));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(HarnessError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        let s = &self.seeding;
        if !(s.omega_max > 0.0 && s.resolution_factor > 0.0 && s.floor_scale > 0.0 && s.dead_zone >= 0.0 && s.leakage_margin >= 0.0) {
            return Err(HarnessError::Config(format!("invalid seeding options {s:?}")));
        }
        if let Some(p) = &self.phase_stage {
            if p.n_list.is_empty() || p.n_list.iter().any(|&n| n < 2) || p.ne == 0 || p.prior_ne == 0 {
                return Err(HarnessError::Config(format!("invalid phase stage {p:?}")));
            }
            if p.options.starts == 0 {
                return Err(HarnessError::Config("phase stage needs at least one start".into()));
            }
        }
        Ok(())
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a word sequence.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6a09_e667_f3bc_c909, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Tags separating the seed streams of one batch.
pub mod stream {
    pub const SYSTEM: u64 = 1;
    pub const SAMPLING: u64 = 2;
    pub const ESTIMATOR: u64 = 3;
    pub const REFERENCE: u64 = 4;
    pub const PHASE: u64 = 5;
}

pub fn system_seed(seed: u64, system: usize) -> u64 {
    derive_seed(&[seed, stream::SYSTEM, system as u64])
}

pub fn cell_seed(seed: u64, system: usize, n: usize, ne: u64) -> u64 {
    derive_seed(&[seed, stream::SAMPLING, system as u64, n as u64, ne])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"n_systems": 3, "n_list": [513]}"#).unwrap();
        assert_eq!(cfg.n_systems, 3);
        assert_eq!(cfg.ne_list, vec![125, 250]);
        assert_eq!(cfg.generator.band, (0.3, 7.0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            r#"{"n_systems": 0}"#,
            r#"{"dt": -1}"#,
            r#"{"ne_list": [0]}"#,
            r#"{"generator": {"band": [5.0, 1.0]}}"#,
        ];
        for text in bad {
            let cfg: RunConfig = serde_json::from_str(text).unwrap();
            assert!(cfg.validate().is_err(), "{text}");
        }
    }

    #[test]
    fn seeds_separate_cells() {
        let a = cell_seed(1, 0, 1025, 125);
        assert_eq!(a, cell_seed(1, 0, 1025, 125));
        assert_ne!(a, cell_seed(1, 1, 1025, 125));
        assert_ne!(a, cell_seed(1, 0, 1025, 250));
        assert_ne!(a, cell_seed(2, 0, 1025, 125));
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
    }
}
