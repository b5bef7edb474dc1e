//! The shared bottleneck of the dumbbell: a drop-tail FIFO served at link
//! capacity, threshold ECN marking, and the per-GoP feedback path.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SimTime;
use crate::source::{GopFeedback, SessionId};

#[derive(Debug, Error, PartialEq)]
pub enum LinkError {
    #[error("invalid link config: {0}")]
    InvalidConfig(&'static str),
    #[error(
        "byte conservation violated: arrived {arrived} != delivered {delivered} + dropped {dropped} + queued {queued}"
    )]
    Conservation {
        arrived: u64,
        delivered: u64,
        dropped: u64,
        queued: u64,
    },
}

/// Queue and path parameters. Capacity is set per run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueueParams {
    /// Packets, including the one in service.
    pub queue_capacity: u32,
    /// Fraction of `queue_capacity` at or above which accepted packets are marked.
    pub ecn_threshold: f64,
    /// Seconds, each direction.
    pub one_way_delay: f64,
}

impl Default for QueueParams {
    fn default() -> Self {
        Self {
            queue_capacity: 50,
            ecn_threshold: 0.65,
            one_way_delay: 0.010,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkConfig {
    /// Bits per second.
    pub capacity: f64,
    pub queue_capacity: u32,
    pub ecn_threshold: f64,
    pub one_way_delay: SimTime,
}

impl LinkConfig {
    pub fn new(capacity: f64, q: &QueueParams) -> Result<Self, LinkError> {
        q.validate()?;
        if !(capacity.is_finite() && capacity > 0.0) {
            return Err(LinkError::InvalidConfig("capacity must be positive"));
        }
        Ok(Self {
            capacity,
            queue_capacity: q.queue_capacity,
            ecn_threshold: q.ecn_threshold,
            one_way_delay: SimTime::from_secs_f64(q.one_way_delay),
        })
    }

    /// Occupancy (after admitting a packet) from which packets are marked.
    pub fn mark_occupancy(&self) -> u32 {
        (self.ecn_threshold * self.queue_capacity as f64).ceil() as u32
    }

    /// Transmission time of `bytes`, rounded up to whole microseconds so the
    /// link never runs faster than its capacity.
    pub fn service_time(&self, bytes: u32) -> SimTime {
        SimTime::from_micros((bytes as f64 * 8.0e6 / self.capacity).ceil() as u64)
    }
}

impl QueueParams {
    pub fn validate(&self) -> Result<(), LinkError> {
        if self.queue_capacity < 1 {
            return Err(LinkError::InvalidConfig("queue_capacity must be at least 1"));
        }
        if !(self.ecn_threshold > 0.0 && self.ecn_threshold <= 1.0) {
            return Err(LinkError::InvalidConfig("ecn_threshold must lie in (0, 1]"));
        }
        if !(self.one_way_delay.is_finite() && self.one_way_delay >= 0.0) {
            return Err(LinkError::InvalidConfig("one_way_delay must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Packet {
    pub session: SessionId,
    pub gop: u64,
    pub frame: u64,
    pub size: u32,
    pub marked: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnqueueOutcome {
    /// `service_done_at` is set when the link was idle and the packet went
    /// straight into service.
    Accepted {
        marked: bool,
        service_done_at: Option<SimTime>,
    },
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Departure {
    pub packet: Packet,
    /// When the packet reaches the receiver.
    pub delivered_at: SimTime,
    /// Completion time of the next packet's service, if one started.
    pub next_service_done_at: Option<SimTime>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueueCounters {
    pub bytes_arrived: u64,
    pub bytes_dropped: u64,
    pub bytes_delivered: u64,
    pub bytes_marked: u64,
    pub packets_arrived: u64,
    pub packets_dropped: u64,
    pub packets_marked: u64,
}

#[derive(Debug, Clone)]
pub struct BottleneckLink {
    cfg: LinkConfig,
    // front is the packet in service while `busy`
    queue: VecDeque<Packet>,
    busy: bool,
    bytes_queued: u64,
    counters: QueueCounters,
}

impl BottleneckLink {
    pub fn new(cfg: LinkConfig) -> Self {
        Self {
            cfg,
            queue: VecDeque::with_capacity(cfg.queue_capacity as usize),
            busy: false,
            bytes_queued: 0,
            counters: QueueCounters::default(),
        }
    }

    pub fn config(&self) -> &LinkConfig {
        &self.cfg
    }

    pub fn occupancy(&self) -> u32 {
        self.queue.len() as u32
    }

    pub fn is_busy(&self) -> bool {
        self.busy
    }

    pub fn counters(&self) -> &QueueCounters {
        &self.counters
    }

    /// Bytes waiting or in service.
    pub fn bytes_in_flight(&self) -> u64 {
        self.bytes_queued
    }

    pub fn enqueue(&mut self, mut pkt: Packet, now: SimTime) -> EnqueueOutcome {
        assert!(pkt.size > 0, "empty packet");
        let size = pkt.size as u64;
        self.counters.bytes_arrived += size;
        self.counters.packets_arrived += 1;
        if self.occupancy() >= self.cfg.queue_capacity {
            self.counters.bytes_dropped += size;
            self.counters.packets_dropped += 1;
            return EnqueueOutcome::Dropped;
        }

        let marked = self.occupancy() + 1 >= self.cfg.mark_occupancy();
        pkt.marked = marked;
        if marked {
            self.counters.bytes_marked += size;
            self.counters.packets_marked += 1;
        }
        self.queue.push_back(pkt);
        self.bytes_queued += size;

        let service_done_at = if self.busy {
            None
        } else {
            self.busy = true;
            Some(now + self.cfg.service_time(pkt.size))
        };
        EnqueueOutcome::Accepted {
            marked,
            service_done_at,
        }
    }

    /// Completes service of the head-of-line packet.
    pub fn service_complete(&mut self, now: SimTime) -> Departure {
        assert!(self.busy, "service completion on an idle link");
        let packet = self.queue.pop_front().expect("busy link with empty queue");
        self.bytes_queued -= packet.size as u64;
        self.counters.bytes_delivered += packet.size as u64;

        let next_service_done_at = match self.queue.front() {
            Some(next) => Some(now + self.cfg.service_time(next.size)),
            None => {
                self.busy = false;
                None
            }
        };
        Departure {
            packet,
            delivered_at: now + self.cfg.one_way_delay,
            next_service_done_at,
        }
    }

    pub fn check_conservation(&self) -> Result<(), LinkError> {
        let c = &self.counters;
        if c.bytes_arrived != c.bytes_delivered + c.bytes_dropped + self.bytes_queued {
            return Err(LinkError::Conservation {
                arrived: c.bytes_arrived,
                delivered: c.bytes_delivered,
                dropped: c.bytes_dropped,
                queued: self.bytes_queued,
            });
        }
        Ok(())
    }
}

/// Final fate of one packet, as seen by the feedback path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketOutcome {
    Delivered { marked: bool, at: SimTime },
    Dropped { at: SimTime },
}

#[derive(Debug, Clone, Copy, Default)]
struct GopTally {
    expected: u32,
    resolved: u32,
    marked: bool,
    lost: bool,
    last_at: SimTime,
}

/// Folds packet outcomes into one acknowledgment per GoP.
#[derive(Debug, Default)]
pub struct FeedbackPath {
    one_way_delay: SimTime,
    open: HashMap<(SessionId, u64), GopTally>,
}

impl FeedbackPath {
    pub fn new(one_way_delay: SimTime) -> Self {
        Self {
            one_way_delay,
            open: HashMap::new(),
        }
    }

    pub fn open_gop(&mut self, session: SessionId, gop: u64, packets: u32) {
        assert!(packets > 0);
        let prev = self.open.insert(
            (session, gop),
            GopTally {
                expected: packets,
                ..GopTally::default()
            },
        );
        assert!(prev.is_none(), "GoP {gop} of session {session} opened twice");
    }

    pub fn pending_gops(&self) -> usize {
        self.open.len()
    }

    /// Records one packet's fate. Once every packet of the GoP is resolved,
    /// returns the feedback and the time it reaches the sender.
    pub fn record(&mut self, session: SessionId, gop: u64, outcome: PacketOutcome) -> Option<(GopFeedback, SimTime)> {
        let key = (session, gop);
        let tally = self.open.get_mut(&key).expect("outcome for unknown GoP");
        let at = match outcome {
            PacketOutcome::Delivered { marked, at } => {
                tally.marked |= marked;
                at
            }
            PacketOutcome::Dropped { at } => {
                tally.lost = true;
                at
            }
        };
        tally.last_at = tally.last_at.max(at);
        tally.resolved += 1;
        if tally.resolved < tally.expected {
            return None;
        }
        let tally = self.open.remove(&key).unwrap();
        Some((
            GopFeedback {
                session_id: session,
                gop_ordinal: gop,
                ecn_marked: tally.marked,
                loss_seen: tally.lost,
            },
            tally.last_at + self.one_way_delay,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn link(capacity: f64) -> BottleneckLink {
        BottleneckLink::new(LinkConfig::new(capacity, &QueueParams::default()).unwrap())
    }

    fn pkt(size: u32) -> Packet {
        Packet {
            session: 0,
            gop: 0,
            frame: 0,
            size,
            marked: false,
        }
    }

    #[test]
    fn empty_queue_accepts_unmarked() {
        let mut l = link(2e6);
        assert_eq!(
            l.enqueue(pkt(1000), SimTime::ZERO),
            EnqueueOutcome::Accepted {
                marked: false,
                service_done_at: Some(SimTime::from_micros(4000))
            }
        );
    }

    #[test]
    fn mark_threshold_is_ceiled() {
        let l = link(2e6);
        assert_eq!(l.config().mark_occupancy(), 33);
    }

    #[test]
    fn near_full_queue_marks_and_full_queue_drops() {
        let mut l = link(2e6);
        for _ in 0..49 {
            l.enqueue(pkt(1000), SimTime::ZERO);
        }
        assert_eq!(l.occupancy(), 49);
        assert!(matches!(
            l.enqueue(pkt(1000), SimTime::ZERO),
            EnqueueOutcome::Accepted {
                marked: true,
                service_done_at: None
            }
        ));
        assert_eq!(l.enqueue(pkt(1000), SimTime::ZERO), EnqueueOutcome::Dropped);
        assert_eq!(l.counters().bytes_dropped, 1000);
        assert_eq!(l.counters().bytes_arrived, 51_000);
        // 33rd..50th accepted packets carry the mark
        assert_eq!(l.counters().packets_marked, 18);
        l.check_conservation().unwrap();
    }

    #[test]
    fn service_time_on_2mbps() {
        assert_eq!(link(2e6).config().service_time(1000), SimTime::from_millis(4));
        // 8000 bits at 9 Mb/s is 888.9 us
        assert_eq!(link(9e6).config().service_time(1000), SimTime::from_micros(889));
    }

    #[test]
    fn fifo_back_to_back_and_idle() {
        let mut l = link(2e6);
        let t0 = SimTime::ZERO;
        let EnqueueOutcome::Accepted {
            service_done_at: Some(done),
            ..
        } = l.enqueue(Packet { frame: 1, ..pkt(1000) }, t0)
        else {
            panic!()
        };
        l.enqueue(Packet { frame: 2, ..pkt(500) }, t0);
        let d1 = l.service_complete(done);
        assert_eq!(d1.packet.frame, 1);
        assert_eq!(d1.delivered_at, SimTime::from_millis(14));
        let next = d1.next_service_done_at.unwrap();
        assert_eq!(next, SimTime::from_millis(6));
        let d2 = l.service_complete(next);
        assert_eq!(d2.packet.frame, 2);
        assert!(d2.delivered_at >= d1.delivered_at + l.config().service_time(500));
        assert!(d2.next_service_done_at.is_none());
        assert!(!l.is_busy());
        assert_eq!(l.bytes_in_flight(), 0);
        l.check_conservation().unwrap();
    }

    #[test]
    fn invalid_params() {
        let bad = QueueParams {
            ecn_threshold: 0.0,
            ..QueueParams::default()
        };
        assert!(LinkConfig::new(1e6, &bad).is_err());
        let bad = QueueParams {
            queue_capacity: 0,
            ..QueueParams::default()
        };
        assert!(LinkConfig::new(1e6, &bad).is_err());
        assert!(LinkConfig::new(0.0, &QueueParams::default()).is_err());
    }

    #[test]
    fn clean_gop_feedback() {
        let mut f = FeedbackPath::new(SimTime::from_millis(10));
        f.open_gop(1, 0, 60);
        for i in 0..59 {
            let r = f.record(
                1,
                0,
                PacketOutcome::Delivered {
                    marked: false,
                    at: SimTime::from_millis(i),
                },
            );
            assert!(r.is_none());
        }
        let (fb, at) = f
            .record(
                1,
                0,
                PacketOutcome::Delivered {
                    marked: false,
                    at: SimTime::from_millis(100),
                },
            )
            .unwrap();
        assert!(!fb.ecn_marked && !fb.loss_seen);
        assert_eq!(at, SimTime::from_millis(110));
        assert_eq!(f.pending_gops(), 0);
    }

    #[test]
    fn one_marked_packet_marks_the_gop() {
        let mut f = FeedbackPath::new(SimTime::ZERO);
        f.open_gop(1, 3, 3);
        f.record(
            1,
            3,
            PacketOutcome::Delivered {
                marked: false,
                at: SimTime::ZERO,
            },
        );
        f.record(
            1,
            3,
            PacketOutcome::Delivered {
                marked: true,
                at: SimTime::ZERO,
            },
        );
        let (fb, _) = f
            .record(
                1,
                3,
                PacketOutcome::Delivered {
                    marked: false,
                    at: SimTime::ZERO,
                },
            )
            .unwrap();
        assert_eq!((fb.ecn_marked, fb.loss_seen, fb.gop_ordinal), (true, false, 3));
    }

    #[derive(Debug, Clone, Copy, PartialEq)]
    enum Fate {
        Clean,
        Marked,
        Dropped,
    }

    #[test]
    fn three_packet_gop_matches_any_fold() {
        let fates = [Fate::Clean, Fate::Marked, Fate::Dropped];
        for a in fates {
            for b in fates {
                for c in fates {
                    let outcome = [a, b, c];
                    let want_marked = outcome.contains(&Fate::Marked);
                    let want_lost = outcome.contains(&Fate::Dropped);

                    let mut f = FeedbackPath::new(SimTime::ZERO);
                    f.open_gop(0, 0, 3);
                    let mut last = None;
                    for (i, x) in outcome.iter().enumerate() {
                        let at = SimTime::from_micros(i as u64);
                        let o = match x {
                            Fate::Clean => PacketOutcome::Delivered { marked: false, at },
                            Fate::Marked => PacketOutcome::Delivered { marked: true, at },
                            Fate::Dropped => PacketOutcome::Dropped { at },
                        };
                        last = f.record(0, 0, o);
                    }
                    let (fb, _) = last.unwrap();
                    assert_eq!((fb.ecn_marked, fb.loss_seen), (want_marked, want_lost), "{outcome:?}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn conservation_and_fifo_under_random_traffic(
            ops in proptest::collection::vec((any::<bool>(), 1u32..1500), 1..400),
            qcap in 1u32..60,
        ) {
            let q = QueueParams { queue_capacity: qcap, ..QueueParams::default() };
            let mut l = BottleneckLink::new(LinkConfig::new(1e6, &q).unwrap());
            let mut now = SimTime::ZERO;
            let mut accepted = Vec::new();
            let mut delivered = Vec::new();
            for (i, (arrive, size)) in ops.into_iter().enumerate() {
                now += SimTime::from_micros(100);
                if arrive || !l.is_busy() {
                    let p = Packet { frame: i as u64, ..pkt(size) };
                    if let EnqueueOutcome::Accepted { .. } = l.enqueue(p, now) {
                        accepted.push(i as u64);
                    }
                } else {
                    delivered.push(l.service_complete(now).packet.frame);
                }
                prop_assert!(l.occupancy() <= qcap);
                l.check_conservation().unwrap();
            }
            prop_assert_eq!(&accepted[..delivered.len()], &delivered[..]);
        }
    }
}
