//! Per-session perceptual quality and run-level link metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::media::RateVariant;
use crate::network::QueueCounters;
use crate::source::SessionId;

#[derive(Debug, Error, PartialEq)]
pub enum QoeError {
    #[error("run has not reached its end; {0}")]
    IncompleteRun(String),
    #[error("invalid qoe config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QoeParams {
    /// PSNR assigned to a frame that lost any packet.
    pub loss_floor_psnr: f64,
    /// Ascending PSNR cut points; a value strictly above the k-th cut scores k+2.
    pub mos_cuts: [f64; 4],
    /// Frames that follow a lost frame in the same GoP cannot be decoded
    /// and score the loss floor too.
    pub gop_error_propagation: bool,
}

impl Default for QoeParams {
    fn default() -> Self {
        Self {
            loss_floor_psnr: 20.0,
            mos_cuts: [20.0, 25.0, 31.0, 37.0],
            gop_error_propagation: true,
        }
    }
}

impl QoeParams {
    pub fn validate(&self) -> Result<(), QoeError> {
        if !(self.loss_floor_psnr.is_finite() && self.loss_floor_psnr >= 0.0) {
            return Err(QoeError::InvalidConfig(
                "loss_floor_psnr must be finite and non-negative",
            ));
        }
        if !self.mos_cuts.iter().all(|c| c.is_finite()) || !self.mos_cuts.windows(2).all(|w| w[0] < w[1]) {
            return Err(QoeError::InvalidConfig(
                "mos_cuts must be finite and strictly ascending",
            ));
        }
        Ok(())
    }

    /// 1 (bad) through 5 (excellent). Bins are closed at the top:
    /// 31 dB scores 3 while 31.01 dB scores 4 under the default cuts.
    pub fn psnr_to_mos(&self, psnr: f64) -> u8 {
        1 + self.mos_cuts.iter().filter(|&&cut| psnr > cut).count() as u8
    }

    pub fn frame_psnr(&self, variant_at_send: &RateVariant, delivered: bool) -> f64 {
        if delivered {
            variant_at_send.ref_psnr
        } else {
            self.loss_floor_psnr
        }
    }

    /// Scores the frames of one GoP in display order. `outcomes[k]` is
    /// `Some(delivered)` once frame `k` has a final outcome; frames still
    /// pending are skipped.
    pub fn score_gop(&self, variant_at_send: &RateVariant, outcomes: &[Option<bool>], tally: &mut SessionTally) {
        let mut broken = false;
        for delivered in outcomes.iter().flatten().copied() {
            broken |= self.gop_error_propagation && !delivered;
            let psnr = self.frame_psnr(variant_at_send, delivered && !broken);
            tally.add_frame(psnr, delivered);
        }
    }
}

/// Running frame-level accounting for one admitted session.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SessionTally {
    /// Frames whose every packet has a final outcome.
    pub frames_sent: u64,
    pub frames_delivered: u64,
    pub psnr_sum: f64,
}

impl SessionTally {
    pub fn add_frame(&mut self, psnr: f64, delivered: bool) {
        self.frames_sent += 1;
        self.frames_delivered += u64::from(delivered);
        self.psnr_sum += psnr;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionQuality {
    pub session_id: SessionId,
    pub frames_sent: u64,
    pub frames_delivered: u64,
    pub mean_psnr: f64,
    pub mos: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub admitted: u32,
    pub rejected: u32,
    pub drop_ratio: f64,
    pub utilization: f64,
    pub per_session: Vec<SessionQuality>,
}

impl RunMetrics {
    pub fn mean_mos(&self) -> Option<f64> {
        if self.per_session.is_empty() {
            return None;
        }
        let total: u32 = self.per_session.iter().map(|s| s.mos as u32).sum();
        Some(total as f64 / self.per_session.len() as f64)
    }
}

/// What the run hands over once its clock has stopped.
#[derive(Debug, Clone)]
pub struct RunOutcome<'a> {
    pub ended: bool,
    pub counters: &'a QueueCounters,
    /// Bits per second.
    pub capacity: f64,
    /// Seconds.
    pub duration: f64,
    pub rejected: u32,
    pub sessions: &'a [(SessionId, SessionTally)],
}

pub fn finalize_run(run: &RunOutcome<'_>, qoe: &QoeParams) -> Result<RunMetrics, QoeError> {
    if !run.ended {
        return Err(QoeError::IncompleteRun("RunEnd was not dispatched".into()));
    }
    let c = run.counters;
    let drop_ratio = if c.bytes_arrived == 0 {
        0.0
    } else {
        c.bytes_dropped as f64 / c.bytes_arrived as f64
    };
    let utilization = if run.duration > 0.0 {
        c.bytes_delivered as f64 * 8.0 / (run.capacity * run.duration)
    } else {
        0.0
    };

    let per_session = run
        .sessions
        .iter()
        .map(|&(session_id, t)| {
            let mean_psnr = if t.frames_delivered == 0 {
                qoe.loss_floor_psnr
            } else {
                t.psnr_sum / t.frames_sent as f64
            };
            SessionQuality {
                session_id,
                frames_sent: t.frames_sent,
                frames_delivered: t.frames_delivered,
                mean_psnr,
                mos: qoe.psnr_to_mos(mean_psnr),
            }
        })
        .collect();

    Ok(RunMetrics {
        admitted: run.sessions.len() as u32,
        rejected: run.rejected,
        drop_ratio,
        utilization,
        per_session,
    })
}
