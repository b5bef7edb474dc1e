//! Scenario configuration file.
//!
//! TOML with one table per subsystem. Every field has a default, so an empty
//! file describes the reference experiment: four capacities, 15 requests,
//! 50 s runs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::admission::{AdmissionParams, Mode};
use crate::media::{build_ladder, GopSpec, Ladder, LadderParams, RateVariant};
use crate::network::QueueParams;
use crate::qoe::QoeParams;
use crate::source::ControllerConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Bottleneck capacities to run, bits per second.
    pub capacity_list: Vec<f64>,
    /// Run length in seconds.
    pub duration: f64,
    /// One request per second, at a random offset within that second.
    pub max_requests: u32,
    pub seed: u64,
    pub mode: Mode,
    pub ladder: LadderParams,
    pub gop: GopSpec,
    pub link: QueueParams,
    pub admission: AdmissionParams,
    pub controller: ControllerConfig,
    pub qoe: QoeParams,
    /// Sessions subscribe to the lowest variant scoring at least this MOS.
    pub sla_min_mos: u8,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            capacity_list: vec![2e6, 4e6, 6e6, 9e6],
            duration: 50.0,
            max_requests: 15,
            seed: 1,
            mode: Mode::CrossLayer,
            ladder: LadderParams::default(),
            gop: GopSpec::default(),
            link: QueueParams::default(),
            admission: AdmissionParams::default(),
            controller: ControllerConfig::default(),
            qoe: QoeParams::default(),
            sla_min_mos: 4,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.capacity_list.is_empty() {
            return Err(invalid("capacity_list is empty"));
        }
        if let Some(c) = self.capacity_list.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
            return Err(invalid(format!("capacity {c} must be positive")));
        }
        if !(self.duration.is_finite() && self.duration >= 0.0) {
            return Err(invalid("duration must be non-negative"));
        }
        if self.max_requests as f64 > self.duration.floor() {
            return Err(invalid(format!(
                "max_requests {} exceeds one request per second over {} s",
                self.max_requests, self.duration
            )));
        }
        self.gop.validate().map_err(invalid)?;
        self.link.validate().map_err(invalid)?;
        self.admission.validate().map_err(invalid)?;
        self.qoe.validate().map_err(invalid)?;
        if self.controller.downshift_step < 1 || self.controller.upshift_after < 1 {
            return Err(invalid("downshift_step and upshift_after must be at least 1"));
        }
        if !(1..=5).contains(&self.sla_min_mos) {
            return Err(invalid("sla_min_mos must lie in 1..=5"));
        }
        let ladder = build_ladder(&self.ladder).map_err(invalid)?;
        self.sla_variant(&ladder)?;
        Ok(())
    }

    pub fn ladder(&self) -> Result<Ladder, ConfigError> {
        build_ladder(&self.ladder).map_err(invalid)
    }

    /// The lowest variant that reaches `sla_min_mos` on its own.
    pub fn sla_variant<'a>(&self, ladder: &'a Ladder) -> Result<&'a RateVariant, ConfigError> {
        ladder
            .lowest_where(|v| self.qoe.psnr_to_mos(v.ref_psnr) >= self.sla_min_mos)
            .ok_or_else(|| invalid(format!("no ladder variant reaches MOS {}", self.sla_min_mos)))
    }
}
