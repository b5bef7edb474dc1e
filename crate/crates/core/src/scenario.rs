//! The experiment: session arrivals at the ingress of a dumbbell, one run
//! per (mode, capacity) pair.

use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::admission::{AdmissionConfig, AdmissionController, AdmissionError, Decision, Mode, SessionRequest};
use crate::config::{ConfigError, ScenarioConfig};
use crate::engine::{EventKind, EventQueue, Handler, SimError, SimTime, Tagged, TraceEntry};
use crate::media::{GopSpec, Ladder};
use crate::network::{
    BottleneckLink, EnqueueOutcome, FeedbackPath, LinkConfig, LinkError, Packet, PacketOutcome, QueueCounters,
};
use crate::qoe::{finalize_run, QoeError, QoeParams, RunMetrics, RunOutcome, SessionTally};
use crate::source::{ControllerConfig, GopFeedback, SessionId, SourceState};

/// RNG sub-stream used for request arrival offsets.
pub const ARRIVAL_STREAM: u64 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Admission(#[from] AdmissionError),
    #[error(transparent)]
    Qoe(#[from] QoeError),
    #[error("invariant violated in run {run_id}: {detail}")]
    Invariant { run_id: String, detail: String },
}

/// One request per second for the first `max_requests` seconds, each at a
/// uniformly random microsecond inside its second.
pub fn generate_arrivals(cfg: &ScenarioConfig, sla_rate: f64, rng: &mut ChaCha8Rng) -> Vec<SessionRequest> {
    (0..cfg.max_requests)
        .map(|k| {
            let offset = rng.gen_range(0..SimTime::MICROS_PER_SEC);
            SessionRequest {
                session_id: k,
                requested_at: SimTime::from_micros(k as u64 * SimTime::MICROS_PER_SEC + offset),
                sla_rate,
            }
        })
        .collect()
}

pub fn arrival_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ARRIVAL_STREAM);
    rng
}

pub fn run_id(mode: Mode, capacity: f64) -> String {
    format!("{}_{}k", mode, (capacity / 1000.0).round() as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionDecision {
    pub session_id: SessionId,
    pub requested_at: SimTime,
    pub decision: Decision,
    pub sla_rate: f64,
    pub measured_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Diagnostics {
    pub events: u64,
    pub wall_time: Duration,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub run_id: String,
    pub mode: Mode,
    pub capacity: f64,
    pub config: ScenarioConfig,
    pub metrics: RunMetrics,
    pub decisions: Vec<SessionDecision>,
    pub counters: QueueCounters,
    pub bytes_in_flight: u64,
    pub diagnostics: Diagnostics,
}

impl RunReport {
    pub fn requests(&self) -> usize {
        self.decisions.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Event {
    SessionRequest(SessionRequest),
    GopBoundary(SessionId),
    PacketArrival(Packet),
    ServiceComplete,
    FeedbackDelivery(GopFeedback),
    MeasurementTick,
    RunEnd,
}

impl Tagged for Event {
    fn kind(&self) -> EventKind {
        match self {
            Event::SessionRequest(_) => EventKind::SessionRequest,
            Event::GopBoundary(_) => EventKind::GopBoundary,
            Event::PacketArrival(_) => EventKind::PacketArrival,
            Event::ServiceComplete => EventKind::ServiceComplete,
            Event::FeedbackDelivery(_) => EventKind::FeedbackDelivery,
            Event::MeasurementTick => EventKind::MeasurementTick,
            Event::RunEnd => EventKind::RunEnd,
        }
    }
}

/// Frame outcomes of one GoP, scored once every frame is settled.
#[derive(Debug)]
struct OpenGop {
    variant: usize,
    first_frame: u64,
    packets_left: Vec<u32>,
    lost: Vec<bool>,
    frames_left: u32,
}

impl OpenGop {
    fn outcomes(&self) -> Vec<Option<bool>> {
        self.packets_left
            .iter()
            .zip(&self.lost)
            .map(|(&left, &lost)| (left == 0).then_some(!lost))
            .collect()
    }
}

#[derive(Debug)]
struct ActiveSession {
    source: SourceState,
    tally: SessionTally,
    gops: HashMap<u64, OpenGop>,
}

/// Mutable state of one run. Owns everything; nothing is shared.
struct Simulation<'a> {
    run_id: String,
    ladder: &'a Ladder,
    gop: GopSpec,
    controller: ControllerConfig,
    qoe: QoeParams,
    sla_index: usize,
    link: BottleneckLink,
    feedback: FeedbackPath,
    admission: AdmissionController,
    sessions: BTreeMap<SessionId, ActiveSession>,
    decisions: Vec<SessionDecision>,
    rejected: u32,
    ended: bool,
}

impl Simulation<'_> {
    fn invariant(&self, at: SimTime, detail: impl std::fmt::Display) -> SimError {
        SimError::Handler {
            at,
            reason: format!("invariant in {}: {}", self.run_id, detail),
        }
    }

    fn on_request(&mut self, now: SimTime, req: SessionRequest, q: &mut EventQueue<Event>) -> Result<(), SimError> {
        let measured_rate = self.admission.measurement().measured_rate;
        let decision = self.admission.decide(req).map_err(|e| SimError::Handler {
            at: now,
            reason: e.to_string(),
        })?;
        self.decisions.push(SessionDecision {
            session_id: req.session_id,
            requested_at: now,
            decision,
            sla_rate: req.sla_rate,
            measured_rate,
        });
        match decision {
            Decision::Admit => {
                let initial = self.controller.initial_index(self.ladder, self.sla_index);
                let source = SourceState::new(req.session_id, initial, self.ladder.top(), now);
                self.sessions.insert(
                    req.session_id,
                    ActiveSession {
                        source,
                        tally: SessionTally::default(),
                        gops: HashMap::new(),
                    },
                );
                q.schedule(now, Event::GopBoundary(req.session_id))?;
            }
            Decision::Reject => self.rejected += 1,
        }
        Ok(())
    }

    fn on_gop_boundary(&mut self, id: SessionId, q: &mut EventQueue<Event>) -> Result<(), SimError> {
        let session = self.sessions.get_mut(&id).expect("GoP for unknown session");
        let emission = session.source.on_gop_boundary(self.ladder, &self.gop);

        if !emission.packets.is_empty() {
            self.feedback
                .open_gop(id, emission.gop_ordinal, emission.packets.len() as u32);
            let frames = emission.frame_packets.len();
            session.gops.insert(
                emission.gop_ordinal,
                OpenGop {
                    variant: emission.variant_index,
                    first_frame: emission.first_frame,
                    packets_left: emission.frame_packets.clone(),
                    // empty frames carry nothing and cannot be lost
                    lost: vec![false; frames],
                    frames_left: emission.frame_packets.iter().filter(|&&n| n > 0).count() as u32,
                },
            );
        }
        for p in &emission.packets {
            q.schedule(
                p.send_at,
                Event::PacketArrival(Packet {
                    session: id,
                    gop: emission.gop_ordinal,
                    frame: p.frame,
                    size: p.size,
                    marked: false,
                }),
            )?;
        }
        q.schedule(session.source.next_gop_at, Event::GopBoundary(id))?;
        Ok(())
    }

    /// Applies one packet's final fate to its frame and its GoP.
    fn resolve(&mut self, pkt: &Packet, outcome: PacketOutcome, q: &mut EventQueue<Event>) -> Result<(), SimError> {
        let session = self.sessions.get_mut(&pkt.session).expect("packet of unknown session");
        let gop = session.gops.get_mut(&pkt.gop).expect("packet of unknown GoP");
        let k = (pkt.frame - gop.first_frame) as usize;
        gop.packets_left[k] -= 1;
        gop.lost[k] |= matches!(outcome, PacketOutcome::Dropped { .. });
        if gop.packets_left[k] == 0 {
            gop.frames_left -= 1;
            if gop.frames_left == 0 {
                let done = session.gops.remove(&pkt.gop).unwrap();
                self.qoe
                    .score_gop(&self.ladder[done.variant], &done.outcomes(), &mut session.tally);
            }
        }
        if let Some((fb, at)) = self.feedback.record(pkt.session, pkt.gop, outcome) {
            q.schedule(at, Event::FeedbackDelivery(fb))?;
        }
        Ok(())
    }

    fn on_packet_arrival(&mut self, now: SimTime, pkt: Packet, q: &mut EventQueue<Event>) -> Result<(), SimError> {
        self.admission.observe(pkt.size as u64);
        match self.link.enqueue(pkt, now) {
            EnqueueOutcome::Dropped => self.resolve(&pkt, PacketOutcome::Dropped { at: now }, q)?,
            EnqueueOutcome::Accepted { service_done_at, .. } => {
                if let Some(at) = service_done_at {
                    q.schedule(at, Event::ServiceComplete)?;
                }
            }
        }
        Ok(())
    }

    /// GoPs cut off by the end of the run contribute the frames that
    /// already have an outcome.
    fn score_truncated_gops(&mut self) {
        for session in self.sessions.values_mut() {
            let mut open: Vec<_> = session.gops.drain().collect();
            open.sort_by_key(|(ordinal, _)| *ordinal);
            for (_, gop) in open {
                self.qoe
                    .score_gop(&self.ladder[gop.variant], &gop.outcomes(), &mut session.tally);
            }
        }
    }

    fn on_service_complete(&mut self, now: SimTime, q: &mut EventQueue<Event>) -> Result<(), SimError> {
        let dep = self.link.service_complete(now);
        if let Some(at) = dep.next_service_done_at {
            q.schedule(at, Event::ServiceComplete)?;
        }
        let outcome = PacketOutcome::Delivered {
            marked: dep.packet.marked,
            at: dep.delivered_at,
        };
        self.resolve(&dep.packet, outcome, q)
    }
}

impl Handler<Event> for Simulation<'_> {
    fn accepts(&self, _kind: EventKind) -> bool {
        true
    }

    fn handle(&mut self, now: SimTime, ev: Event, q: &mut EventQueue<Event>) -> Result<(), SimError> {
        // Everything after RunEnd is cancelled, including packets of
        // GoPs that were mid-emission.
        if self.ended {
            return Ok(());
        }
        match ev {
            Event::SessionRequest(req) => self.on_request(now, req, q)?,
            Event::GopBoundary(id) => self.on_gop_boundary(id, q)?,
            Event::PacketArrival(pkt) => self.on_packet_arrival(now, pkt, q)?,
            Event::ServiceComplete => self.on_service_complete(now, q)?,
            Event::FeedbackDelivery(fb) => {
                let session = self
                    .sessions
                    .get_mut(&fb.session_id)
                    .expect("feedback for unknown session");
                session.source.on_feedback(&fb, &self.controller);
            }
            Event::MeasurementTick => {
                self.admission.measure(now);
                q.schedule_in(self.admission.config().window, Event::MeasurementTick);
            }
            Event::RunEnd => {
                self.ended = true;
                self.score_truncated_gops();
            }
        }
        if cfg!(debug_assertions) || self.ended {
            self.link
                .check_conservation()
                .map_err(|e: LinkError| self.invariant(now, e))?;
        }
        Ok(())
    }
}

/// Runs one (mode, capacity) pair. With `record_trace`, also returns the
/// dispatched event sequence.
pub fn simulate(
    cfg: &ScenarioConfig,
    mode: Mode,
    capacity: f64,
    record_trace: bool,
) -> Result<(RunReport, Option<Vec<TraceEntry>>), ScenarioError> {
    let started = Instant::now();
    cfg.validate()?;
    let ladder = cfg.ladder()?;
    let sla = *cfg.sla_variant(&ladder)?;
    let link_cfg = LinkConfig::new(capacity, &cfg.link).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let admission_cfg = AdmissionConfig::new(mode, capacity, &cfg.admission)?;
    let run_id = run_id(mode, capacity);
    let end = SimTime::from_secs_f64(cfg.duration);

    let mut sim = Simulation {
        run_id: run_id.clone(),
        ladder: &ladder,
        gop: cfg.gop,
        controller: cfg.controller,
        qoe: cfg.qoe,
        sla_index: sla.index,
        link: BottleneckLink::new(link_cfg),
        feedback: FeedbackPath::new(link_cfg.one_way_delay),
        admission: AdmissionController::new(admission_cfg),
        sessions: BTreeMap::new(),
        decisions: Vec::new(),
        rejected: 0,
        ended: false,
    };

    let mut queue = if record_trace {
        EventQueue::with_trace()
    } else {
        EventQueue::new()
    };
    queue.schedule(end, Event::RunEnd)?;
    queue.schedule(admission_cfg.window, Event::MeasurementTick)?;
    let mut rng = arrival_rng(cfg.seed);
    for req in generate_arrivals(cfg, sla.bitrate, &mut rng) {
        if req.requested_at < end {
            queue.schedule(req.requested_at, Event::SessionRequest(req))?;
        }
    }
    queue.run_until(end, &mut sim)?;
    let events = queue.dispatched();
    let trace = queue.trace().map(<[TraceEntry]>::to_vec);

    let tallies: Vec<(SessionId, SessionTally)> = sim.sessions.iter().map(|(&id, s)| (id, s.tally)).collect();
    let metrics = finalize_run(
        &RunOutcome {
            ended: sim.ended,
            counters: sim.link.counters(),
            capacity,
            duration: cfg.duration,
            rejected: sim.rejected,
            sessions: &tallies,
        },
        &cfg.qoe,
    )?;

    let report = RunReport {
        run_id,
        mode,
        capacity,
        config: cfg.clone(),
        metrics,
        decisions: sim.decisions,
        counters: *sim.link.counters(),
        bytes_in_flight: sim.link.bytes_in_flight(),
        diagnostics: Diagnostics {
            events,
            wall_time: started.elapsed(),
        },
    };
    check_report(&report)?;
    Ok((report, trace))
}

pub fn run_one(cfg: &ScenarioConfig, mode: Mode, capacity: f64) -> Result<RunReport, ScenarioError> {
    simulate(cfg, mode, capacity, false).map(|(r, _)| r)
}

/// End-of-run checks every report must pass before it is handed out.
pub fn check_report(r: &RunReport) -> Result<(), ScenarioError> {
    let fail = |detail: String| ScenarioError::Invariant {
        run_id: r.run_id.clone(),
        detail,
    };
    let c = &r.counters;
    if c.bytes_arrived != c.bytes_delivered + c.bytes_dropped + r.bytes_in_flight {
        return Err(fail(format!(
            "bytes arrived {} != delivered {} + dropped {} + in flight {}",
            c.bytes_arrived, c.bytes_delivered, c.bytes_dropped, r.bytes_in_flight
        )));
    }
    let m = &r.metrics;
    if !(0.0..=1.0).contains(&m.utilization) {
        return Err(fail(format!("utilization {} outside [0, 1]", m.utilization)));
    }
    if !(0.0..=1.0).contains(&m.drop_ratio) {
        return Err(fail(format!("drop ratio {} outside [0, 1]", m.drop_ratio)));
    }
    if (m.admitted + m.rejected) as usize != r.requests() {
        return Err(fail(format!(
            "admitted {} + rejected {} != requests {}",
            m.admitted,
            m.rejected,
            r.requests()
        )));
    }
    if let Some(s) = m.per_session.iter().find(|s| s.frames_delivered > s.frames_sent) {
        return Err(fail(format!(
            "session {} delivered more frames than it sent",
            s.session_id
        )));
    }
    Ok(())
}

/// Runs the configured mode over every capacity in the list.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<Vec<RunReport>, ScenarioError> {
    run_grid(cfg, &[cfg.mode])
}

/// Runs both architectures over every capacity in the list.
pub fn sweep(cfg: &ScenarioConfig) -> Result<Vec<RunReport>, ScenarioError> {
    run_grid(cfg, &[Mode::CrossLayer, Mode::RaOnly])
}

/// One worker thread per run; results come back in (mode, capacity) order.
fn run_grid(cfg: &ScenarioConfig, modes: &[Mode]) -> Result<Vec<RunReport>, ScenarioError> {
    cfg.validate()?;
    let jobs: Vec<(Mode, f64)> = modes
        .iter()
        .flat_map(|&m| cfg.capacity_list.iter().map(move |&c| (m, c)))
        .collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(mode, capacity)| s.spawn(move || run_one(cfg, mode, capacity)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation worker panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(duration: f64, max_requests: u32) -> ScenarioConfig {
        ScenarioConfig {
            duration,
            max_requests,
            capacity_list: vec![2e6],
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn arrivals_one_per_second() {
        let cfg = ScenarioConfig::default();
        let reqs = generate_arrivals(&cfg, 1e5, &mut arrival_rng(3));
        assert_eq!(reqs.len(), 15);
        for (k, r) in reqs.iter().enumerate() {
            assert_eq!(r.session_id, k as u32);
            assert!(r.requested_at >= SimTime::from_secs(k as u64));
            assert!(r.requested_at < SimTime::from_secs(k as u64 + 1));
        }
        assert_eq!(reqs, generate_arrivals(&cfg, 1e5, &mut arrival_rng(3)));
        assert_ne!(reqs, generate_arrivals(&cfg, 1e5, &mut arrival_rng(4)));
    }

    #[test]
    fn no_requests_no_arrivals() {
        assert!(generate_arrivals(&short(10.0, 0), 1e5, &mut arrival_rng(1)).is_empty());
    }

    #[test]
    fn zero_duration_run_is_empty() {
        let r = run_one(&short(0.0, 0), Mode::CrossLayer, 2e6).unwrap();
        assert_eq!(r.metrics.admitted, 0);
        assert_eq!(r.requests(), 0);
        assert_eq!(r.counters, QueueCounters::default());
        assert_eq!(r.metrics.utilization, 0.0);
        // RunEnd is the only event that fires
        assert_eq!(r.diagnostics.events, 1);
    }

    #[test]
    fn single_session_is_clean() {
        let r = run_one(&short(10.0, 1), Mode::CrossLayer, 2e6).unwrap();
        assert_eq!(r.metrics.admitted, 1);
        assert_eq!(r.counters.bytes_dropped, 0);
        let s = &r.metrics.per_session[0];
        assert_eq!(s.frames_sent, s.frames_delivered);
        assert!(s.mos >= 4);
    }

    #[test]
    fn run_ids() {
        assert_eq!(run_id(Mode::CrossLayer, 2e6), "cross-layer_2000k");
        assert_eq!(run_id(Mode::RaOnly, 9e6), "ra-only_9000k");
    }

    #[test]
    fn traced_runs_are_sorted_and_repeatable() {
        let cfg = short(8.0, 5);
        let (_, a) = simulate(&cfg, Mode::RaOnly, 2e6, true).unwrap();
        let (_, b) = simulate(&cfg, Mode::RaOnly, 2e6, true).unwrap();
        let a = a.unwrap();
        assert!(a.len() > 1000);
        assert!(a.windows(2).all(|w| w[0].handle < w[1].handle));
        assert_eq!(a, b.unwrap());
    }
}
