use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tagflow_core::grid::Vec3;
use tagflow_core::harp::DEFAULT_PHASE_FLOOR;
use tagflow_core::metrics::DEFAULT_BINS;
use tagflow_core::optim::RegistrationConfig;
use tagflow_core::phantom::PhantomConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarpSettings {
    /// Tag period in voxels of the resampled grid; the phantom's when absent.
    pub wavelength: Option<f64>,
    /// Tag normals in (Av, Sh, Sv) order; the phantom's when absent.
    pub directions: Option<[Vec3; 3]>,
    /// Isotropic spacing in mm; the finest input spacing when absent.
    pub target_spacing: Option<f64>,
    pub phase_floor: f64,
}

impl Default for HarpSettings {
    fn default() -> Self {
        HarpSettings { wavelength: None, directions: None, target_spacing: None, phase_floor: DEFAULT_PHASE_FLOOR }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSettings {
    pub n_bins: usize,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        EvaluationSettings { n_bins: DEFAULT_BINS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub phantom: PhantomConfig,
    #[serde(default)]
    pub harp: HarpSettings,
    #[serde(default)]
    pub registration: RegistrationConfig,
    #[serde(default)]
    pub evaluation: EvaluationSettings,
    pub output_dir: PathBuf,
}

impl PipelineConfig {
    pub fn validate(&self) -> CliResult<()> {
        self.phantom.validate().map_err(|e| CliError::from(e).in_section("phantom"))?;
        self.registration.validate().map_err(|e| CliError::from(e).in_section("registration"))?;
        if let Some(w) = self.harp.wavelength {
            if !(w.is_finite() && w >= 3.0) {
                return Err(CliError::config("harp.wavelength", format!("{w} must be at least 3 voxels")));
            }
        }
        if let Some(t) = self.harp.target_spacing {
            if !(t.is_finite() && t > 0.0) {
                return Err(CliError::config("harp.target_spacing", format!("{t} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.harp.phase_floor) {
            return Err(CliError::config("harp.phase_floor", "must lie in [0, 1)"));
        }
        if self.evaluation.n_bins < 2 {
            return Err(CliError::config("evaluation.n_bins", "at least 2 bins are required"));
        }
        Ok(())
    }

    /// Reads and validates a config; a relative `output_dir` is resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError {
            kind: "io",
            message: format!("{}: {e}", path.display()),
            field: None,
        })?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)?;
        if cfg.output_dir.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.output_dir = dir.join(&cfg.output_dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Reads a JSON config that must not contain unknown keys.
pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError {
        kind: "io",
        message: format!("{}: {e}", path.display()),
        field: None,
    })?;
    Ok(serde_json::from_str(&text)?)
}
