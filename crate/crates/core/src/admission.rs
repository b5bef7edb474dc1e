//! Ingress admission control.
//!
//! The edge counts bytes offered by admitted video flows, turns them into a
//! measured aggregate rate every window, and admits a new session only when
//! that rate plus the session's subscribed rate still fits the link.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SimTime;
use crate::source::SessionId;

#[derive(Debug, Error, PartialEq)]
pub enum AdmissionError {
    #[error("session {0} was already decided")]
    DuplicateDecision(SessionId),
    #[error("invalid admission config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Rate adaptation plus measurement-based admission.
    CrossLayer,
    /// Rate adaptation only; every request up to the session cap is admitted.
    RaOnly,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::CrossLayer => "cross-layer",
            Mode::RaOnly => "ra-only",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cross-layer" => Ok(Mode::CrossLayer),
            "ra-only" => Ok(Mode::RaOnly),
            other => Err(format!("unknown mode `{other}` (expected cross-layer or ra-only)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Rate over the most recent window only.
    Instantaneous,
    /// Exponentially weighted mean of per-window rates.
    WindowAverage,
}

/// Admission settings shared by every run of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmissionParams {
    pub estimator: Estimator,
    /// Measurement window in seconds.
    pub window: f64,
    /// EWMA weight of the newest window for `WindowAverage`.
    pub alpha: f64,
    pub session_cap: u32,
}

impl Default for AdmissionParams {
    fn default() -> Self {
        Self {
            estimator: Estimator::Instantaneous,
            window: 0.1,
            alpha: 0.3,
            session_cap: 15,
        }
    }
}

impl AdmissionParams {
    pub fn validate(&self) -> Result<(), AdmissionError> {
        if !(self.window.is_finite() && self.window > 0.0) {
            return Err(AdmissionError::InvalidConfig("window must be positive"));
        }
        if SimTime::from_secs_f64(self.window) == SimTime::ZERO {
            return Err(AdmissionError::InvalidConfig("window shorter than one microsecond"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(AdmissionError::InvalidConfig("alpha must lie in (0, 1]"));
        }
        if self.session_cap < 1 {
            return Err(AdmissionError::InvalidConfig("session_cap must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmissionConfig {
    pub mode: Mode,
    pub estimator: Estimator,
    pub window: SimTime,
    pub alpha: f64,
    /// Bits per second.
    pub capacity: f64,
    pub session_cap: u32,
}

impl AdmissionConfig {
    pub fn new(mode: Mode, capacity: f64, p: &AdmissionParams) -> Result<Self, AdmissionError> {
        p.validate()?;
        Ok(Self {
            mode,
            estimator: p.estimator,
            window: SimTime::from_secs_f64(p.window),
            alpha: p.alpha,
            capacity,
            session_cap: p.session_cap,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionRequest {
    pub session_id: SessionId,
    pub requested_at: SimTime,
    /// Subscribed rate in bits per second.
    pub sla_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decision {
    Admit,
    Reject,
}

impl Decision {
    pub fn is_admit(self) -> bool {
        self == Decision::Admit
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Admit => "admit",
            Decision::Reject => "reject",
        }
    }
}

/// Measured aggregate arrival rate at the ingress.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RateMeasurement {
    /// Bytes seen since the last tick.
    pub window_bytes: u64,
    /// Bits per second.
    pub measured_rate: f64,
    pub as_of: SimTime,
    samples: u64,
}

impl RateMeasurement {
    pub fn observe(&mut self, bytes: u64) {
        self.window_bytes += bytes;
    }

    /// Closes the current window at `now`.
    pub fn tick(&mut self, now: SimTime, estimator: Estimator, window: SimTime, alpha: f64) {
        let sample = self.window_bytes as f64 * 8.0e6 / window.as_micros() as f64;
        self.measured_rate = match estimator {
            Estimator::Instantaneous => sample,
            Estimator::WindowAverage if self.samples == 0 => sample,
            Estimator::WindowAverage => alpha * sample + (1.0 - alpha) * self.measured_rate,
        };
        self.samples += 1;
        self.window_bytes = 0;
        self.as_of = now;
    }
}

/// The admission rule. Pure in its arguments.
pub fn admission_rule(req: &SessionRequest, measured_rate: f64, cfg: &AdmissionConfig, active_count: u32) -> Decision {
    let admit = match cfg.mode {
        Mode::CrossLayer => measured_rate + req.sla_rate <= cfg.capacity,
        Mode::RaOnly => active_count < cfg.session_cap,
    };
    if admit {
        Decision::Admit
    } else {
        Decision::Reject
    }
}

/// One logged decision with everything needed to replay it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionRecord {
    pub request: SessionRequest,
    pub measured_rate: f64,
    pub active_count: u32,
    pub decision: Decision,
}

/// Ingress controller: owns the measurement and the decision log.
#[derive(Debug, Clone)]
pub struct AdmissionController {
    cfg: AdmissionConfig,
    measurement: RateMeasurement,
    decided: BTreeMap<SessionId, DecisionRecord>,
    active: u32,
}

impl AdmissionController {
    pub fn new(cfg: AdmissionConfig) -> Self {
        Self {
            cfg,
            measurement: RateMeasurement::default(),
            decided: BTreeMap::new(),
            active: 0,
        }
    }

    pub fn config(&self) -> &AdmissionConfig {
        &self.cfg
    }

    pub fn measurement(&self) -> &RateMeasurement {
        &self.measurement
    }

    pub fn active_count(&self) -> u32 {
        self.active
    }

    /// Counts bytes offered by an admitted flow before the queue.
    pub fn observe(&mut self, bytes: u64) {
        self.measurement.observe(bytes);
    }

    pub fn measure(&mut self, now: SimTime) {
        self.measurement
            .tick(now, self.cfg.estimator, self.cfg.window, self.cfg.alpha);
    }

    pub fn decide(&mut self, req: SessionRequest) -> Result<Decision, AdmissionError> {
        if self.decided.contains_key(&req.session_id) {
            return Err(AdmissionError::DuplicateDecision(req.session_id));
        }
        let measured_rate = self.measurement.measured_rate;
        let decision = admission_rule(&req, measured_rate, &self.cfg, self.active);
        if decision.is_admit() {
            self.active += 1;
        }
        self.decided.insert(
            req.session_id,
            DecisionRecord {
                request: req,
                measured_rate,
                active_count: self.active - u32::from(decision.is_admit()),
                decision,
            },
        );
        Ok(decision)
    }

    pub fn log(&self) -> impl Iterator<Item = &DecisionRecord> {
        self.decided.values()
    }
}
