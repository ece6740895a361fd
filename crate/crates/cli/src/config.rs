//! Run configuration: one TOML file, every key optional. Command-line flags
//! override file values.
//!
//! ```toml
//! [scenario]
//! preset = "case1-desk"      # or a full [scenario.custom] table
//! seed = 1
//!
//! [detect]
//! window = "cumulative"      # or "trailing:7"
//! threshold = 40.0
//! thresholds = [1.0, 5.0, 10.0, 40.0]
//!
//! [bounds]
//! signal = "use_promo"
//! min_precision = 0.9
//! min_scr = 0.95
//! min_amplification = 5.0
//! ```

use std::path::Path;

use amplify_core::scenario::ScenarioConfig;
use serde::Deserialize;

use crate::Failure;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioSection,
    pub detect: DetectSection,
    pub bounds: Bounds,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub custom: Option<ScenarioConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    pub window: Option<String>,
    pub threshold: Option<f64>,
    pub thresholds: Option<Vec<f64>>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bounds {
    pub signal: Option<String>,
    pub min_precision: Option<f64>,
    pub min_scr: Option<f64>,
    pub min_amplification: Option<f64>,
}

impl Bounds {
    pub fn is_empty(&self) -> bool {
        self.min_precision.is_none() && self.min_scr.is_none() && self.min_amplification.is_none()
    }

    /// Flag values win over file values.
    pub fn overlay(self, flags: Bounds) -> Bounds {
        Bounds {
            signal: flags.signal.or(self.signal),
            min_precision: flags.min_precision.or(self.min_precision),
            min_scr: flags.min_scr.or(self.min_scr),
            min_amplification: flags.min_amplification.or(self.min_amplification),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig, Failure> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
        toml::from_str(&text).map_err(|e| Failure::new("config", format!("{}: {}", path.display(), e.message())))
    }
}
