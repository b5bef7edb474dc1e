//! Adaptive video sender and its ECN-driven rate controller.

use serde::{Deserialize, Serialize};

use crate::engine::SimTime;
use crate::media::{plan_gop, GopSpec, Ladder};

pub type SessionId = u32;

/// Which ladder variant a newly admitted session starts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialVariant {
    /// The variant matching the session's subscribed rate.
    Sla,
    /// The highest variant in the ladder.
    Top,
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Variants to step down per marked or lossy GoP.
    pub downshift_step: usize,
    /// Consecutive clean GoPs before stepping up one variant.
    pub upshift_after: u32,
    pub initial_variant: InitialVariant,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            downshift_step: 1,
            upshift_after: 2,
            initial_variant: InitialVariant::Top,
        }
    }
}

impl ControllerConfig {
    pub fn initial_index(&self, ladder: &Ladder, sla_index: usize) -> usize {
        match self.initial_variant {
            InitialVariant::Sla => sla_index,
            InitialVariant::Top => ladder.top(),
            InitialVariant::Fixed(i) => i.min(ladder.top()),
        }
    }
}

/// Congestion report for one GoP, as echoed back to the sender.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GopFeedback {
    pub session_id: SessionId,
    pub gop_ordinal: u64,
    /// Some packet of the GoP was accepted with the ECN mark set.
    pub ecn_marked: bool,
    /// Some packet of the GoP was dropped.
    pub loss_seen: bool,
}

impl GopFeedback {
    pub fn congested(&self) -> bool {
        self.ecn_marked || self.loss_seen
    }
}

/// One packet the source hands to the ingress at `send_at`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Emission {
    pub send_at: SimTime,
    pub frame: u64,
    pub size: u32,
}

/// Everything a GoP boundary produces.
#[derive(Debug, Clone, PartialEq)]
pub struct GopEmission {
    pub gop_ordinal: u64,
    pub variant_index: usize,
    /// Session-wide ordinal of the GoP's first frame.
    pub first_frame: u64,
    /// Packet count of every frame, in frame order.
    pub frame_packets: Vec<u32>,
    pub packets: Vec<Emission>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceState {
    pub session_id: SessionId,
    pub current_variant_index: usize,
    pub clean_gops: u32,
    pub next_gop_at: SimTime,
    pub next_gop_ordinal: u64,
    max_index: usize,
}

impl SourceState {
    /// A source whose first GoP starts at `start`, its admission time.
    pub fn new(session_id: SessionId, initial_index: usize, max_index: usize, start: SimTime) -> Self {
        assert!(initial_index <= max_index);
        Self {
            session_id,
            current_variant_index: initial_index,
            clean_gops: 0,
            next_gop_at: start,
            next_gop_ordinal: 0,
            max_index,
        }
    }

    /// Plans the GoP starting at `next_gop_at` on the current variant.
    /// Frame `k`'s packets all leave at GoP start + k/fps.
    pub fn on_gop_boundary(&mut self, ladder: &Ladder, spec: &GopSpec) -> GopEmission {
        let start = self.next_gop_at;
        let variant = &ladder[self.current_variant_index];
        let plan = plan_gop(variant, spec);
        let first_frame = self.next_gop_ordinal * spec.gop_len as u64;

        let mut packets = Vec::with_capacity(plan.iter().map(|f| f.packet_count as usize).sum());
        for frame in &plan {
            let send_at = start + SimTime::from_micros(spec.frame_offset_micros(frame.frame_index));
            packets.extend(frame.packet_sizes(spec.payload).map(|size| Emission {
                send_at,
                frame: first_frame + frame.frame_index as u64,
                size,
            }));
        }

        let out = GopEmission {
            gop_ordinal: self.next_gop_ordinal,
            variant_index: self.current_variant_index,
            first_frame,
            frame_packets: plan.iter().map(|f| f.packet_count).collect(),
            packets,
        };
        self.next_gop_ordinal += 1;
        self.next_gop_at = start + SimTime::from_micros(spec.gop_micros());
        out
    }

    pub fn on_feedback(&mut self, fb: &GopFeedback, cfg: &ControllerConfig) -> usize {
        debug_assert_eq!(fb.session_id, self.session_id);
        if fb.congested() {
            self.current_variant_index = self.current_variant_index.saturating_sub(cfg.downshift_step);
            self.clean_gops = 0;
        } else {
            self.clean_gops += 1;
            if self.clean_gops >= cfg.upshift_after {
                self.current_variant_index = (self.current_variant_index + 1).min(self.max_index);
                self.clean_gops = 0;
            }
        }
        self.current_variant_index
    }
}
