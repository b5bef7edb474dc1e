//! Deterministic discrete-event core.
//!
//! Time is kept in integer microseconds. Events are ordered by
//! `(fire_at, seq)` where `seq` is a per-queue insertion counter, so two
//! events scheduled for the same instant fire in the order they were
//! scheduled.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

use thiserror::Error;

/// Simulated time in integer microseconds since the start of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MICROS_PER_SEC: u64 = 1_000_000;

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * Self::MICROS_PER_SEC)
    }

    /// Rounds a non-negative number of seconds to the nearest microsecond.
    pub fn from_secs_f64(s: f64) -> Self {
        assert!(s.is_finite() && s >= 0.0, "invalid duration {s}");
        SimTime((s * Self::MICROS_PER_SEC as f64).round() as u64)
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / Self::MICROS_PER_SEC as f64
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }
}

impl std::ops::Add for SimTime {
    type Output = SimTime;

    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.checked_add(rhs.0).expect("simulated time overflow"))
    }
}

impl std::ops::AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        *self = *self + rhs;
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}.{:06}s",
            self.0 / Self::MICROS_PER_SEC,
            self.0 % Self::MICROS_PER_SEC
        )
    }
}

/// The closed set of event kinds the simulator knows about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    SessionRequest,
    GopBoundary,
    PacketArrival,
    ServiceComplete,
    FeedbackDelivery,
    MeasurementTick,
    RunEnd,
}

impl EventKind {
    pub const ALL: [EventKind; 7] = [
        EventKind::SessionRequest,
        EventKind::GopBoundary,
        EventKind::PacketArrival,
        EventKind::ServiceComplete,
        EventKind::FeedbackDelivery,
        EventKind::MeasurementTick,
        EventKind::RunEnd,
    ];
}

/// Payloads carried by the queue report which kind they are.
pub trait Tagged {
    fn kind(&self) -> EventKind;
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("cannot schedule at {at}: clock is already at {now}")]
    SchedulingInPast { at: SimTime, now: SimTime },
    #[error("no handler registered for {0:?} events")]
    UnhandledEventKind(EventKind),
    #[error("handler failed at {at}: {reason}")]
    Handler { at: SimTime, reason: String },
}

/// Identifies a scheduled event. Unique within one queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventHandle {
    pub fire_at: SimTime,
    pub seq: u64,
}

#[derive(Debug)]
struct Pending<P> {
    handle: EventHandle,
    payload: P,
}

impl<P> PartialEq for Pending<P> {
    fn eq(&self, other: &Self) -> bool {
        self.handle == other.handle
    }
}

impl<P> Eq for Pending<P> {}

impl<P> PartialOrd for Pending<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Pending<P> {
    // BinaryHeap is a max-heap; invert so the earliest (fire_at, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.handle.cmp(&self.handle)
    }
}

/// One dispatched event as recorded by a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEntry {
    pub handle: EventHandle,
    pub kind: EventKind,
}

/// Receives events popped by [`EventQueue::run_until`].
pub trait Handler<P: Tagged> {
    /// Whether this handler can process events of `kind`.
    fn accepts(&self, kind: EventKind) -> bool;

    fn handle(&mut self, now: SimTime, payload: P, queue: &mut EventQueue<P>) -> Result<(), SimError>;
}

/// Time-ordered event queue plus the run clock.
#[derive(Debug)]
pub struct EventQueue<P> {
    pending: BinaryHeap<Pending<P>>,
    now: SimTime,
    next_seq: u64,
    dispatched: u64,
    trace: Option<Vec<TraceEntry>>,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> EventQueue<P> {
    pub fn new() -> Self {
        Self {
            pending: BinaryHeap::new(),
            now: SimTime::ZERO,
            next_seq: 0,
            dispatched: 0,
            trace: None,
        }
    }

    /// Like [`EventQueue::new`] but keeps a record of every dispatched event.
    pub fn with_trace() -> Self {
        Self {
            trace: Some(Vec::new()),
            ..Self::new()
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn trace(&self) -> Option<&[TraceEntry]> {
        self.trace.as_deref()
    }

    pub fn schedule(&mut self, at: SimTime, payload: P) -> Result<EventHandle, SimError> {
        if at < self.now {
            return Err(SimError::SchedulingInPast { at, now: self.now });
        }
        let handle = EventHandle {
            fire_at: at,
            seq: self.next_seq,
        };
        self.next_seq += 1;
        self.pending.push(Pending { handle, payload });
        Ok(handle)
    }

    /// Schedules `delay` after the current clock.
    pub fn schedule_in(&mut self, delay: SimTime, payload: P) -> EventHandle {
        let at = self.now + delay;
        self.schedule(at, payload)
            .expect("relative schedule cannot land in the past")
    }

    fn pop_due(&mut self, end: SimTime) -> Option<Pending<P>> {
        match self.pending.peek() {
            Some(top) if top.handle.fire_at <= end => self.pending.pop(),
            _ => None,
        }
    }
}

impl<P: Tagged> EventQueue<P> {
    /// Dispatches every event with `fire_at <= end` in `(fire_at, seq)`
    /// order and leaves the clock at `end`. Events past `end` stay queued.
    pub fn run_until<H: Handler<P>>(&mut self, end: SimTime, handler: &mut H) -> Result<SimTime, SimError> {
        while let Some(ev) = self.pop_due(end) {
            let kind = ev.payload.kind();
            if !handler.accepts(kind) {
                return Err(SimError::UnhandledEventKind(kind));
            }
            debug_assert!(ev.handle.fire_at >= self.now);
            self.now = ev.handle.fire_at;
            self.dispatched += 1;
            if let Some(trace) = self.trace.as_mut() {
                trace.push(TraceEntry {
                    handle: ev.handle,
                    kind,
                });
            }
            handler.handle(self.now, ev.payload, self)?;
        }
        if end > self.now {
            self.now = end;
        }
        Ok(self.now)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, Copy, PartialEq)]
    struct Tick(u32);

    impl Tagged for Tick {
        fn kind(&self) -> EventKind {
            EventKind::MeasurementTick
        }
    }

    #[derive(Default)]
    struct Recorder {
        seen: Vec<(SimTime, u32)>,
        clock_went_back: bool,
    }

    impl Handler<Tick> for Recorder {
        fn accepts(&self, kind: EventKind) -> bool {
            kind == EventKind::MeasurementTick
        }

        fn handle(&mut self, now: SimTime, p: Tick, _: &mut EventQueue<Tick>) -> Result<(), SimError> {
            if let Some(&(prev, _)) = self.seen.last() {
                self.clock_went_back |= now < prev;
            }
            self.seen.push((now, p.0));
            Ok(())
        }
    }

    #[test]
    fn first_schedule_gets_seq_zero() {
        let mut q = EventQueue::new();
        let h = q.schedule(SimTime::ZERO, Tick(0)).unwrap();
        assert_eq!(h.seq, 0);
        assert_eq!(h.fire_at, SimTime::ZERO);
    }

    #[test]
    fn equal_times_pop_in_insertion_order() {
        let mut q = EventQueue::new();
        let a = q.schedule(SimTime::from_secs(1), Tick(1)).unwrap();
        let b = q.schedule(SimTime::from_secs(1), Tick(2)).unwrap();
        assert!(a.seq < b.seq);
        let mut r = Recorder::default();
        q.run_until(SimTime::from_secs(5), &mut r).unwrap();
        assert_eq!(r.seen.iter().map(|s| s.1).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn scheduling_in_the_past_is_rejected() {
        let mut q: EventQueue<Tick> = EventQueue::new();
        q.run_until(SimTime::from_secs(1), &mut Recorder::default()).unwrap();
        let err = q.schedule(SimTime::from_millis(500), Tick(0)).unwrap_err();
        assert_eq!(
            err,
            SimError::SchedulingInPast {
                at: SimTime::from_millis(500),
                now: SimTime::from_secs(1)
            }
        );
    }

    #[test]
    fn empty_queue_runs_to_end() {
        let mut q: EventQueue<Tick> = EventQueue::new();
        let end = q.run_until(SimTime::from_secs(50), &mut Recorder::default()).unwrap();
        assert_eq!(end, SimTime::from_secs(50));
        assert_eq!(q.dispatched(), 0);
    }

    #[test]
    fn dispatch_follows_time_then_seq() {
        let mut q = EventQueue::new();
        q.schedule(SimTime::from_secs(2), Tick(0)).unwrap();
        q.schedule(SimTime::from_secs(1), Tick(1)).unwrap();
        q.schedule(SimTime::from_secs(1), Tick(2)).unwrap();
        let mut r = Recorder::default();
        q.run_until(SimTime::from_secs(10), &mut r).unwrap();
        assert_eq!(
            r.seen,
            vec![
                (SimTime::from_secs(1), 1),
                (SimTime::from_secs(1), 2),
                (SimTime::from_secs(2), 0)
            ]
        );
    }

    #[test]
    fn events_past_end_stay_queued() {
        let mut q = EventQueue::new();
        q.schedule(SimTime::from_secs(1), Tick(0)).unwrap();
        q.schedule(SimTime::from_secs(3), Tick(1)).unwrap();
        let mut r = Recorder::default();
        assert_eq!(
            q.run_until(SimTime::from_secs(2), &mut r).unwrap(),
            SimTime::from_secs(2)
        );
        assert_eq!(r.seen.len(), 1);
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn unhandled_kind_is_an_error() {
        struct Nothing;
        impl Handler<Tick> for Nothing {
            fn accepts(&self, _: EventKind) -> bool {
                false
            }
            fn handle(&mut self, _: SimTime, _: Tick, _: &mut EventQueue<Tick>) -> Result<(), SimError> {
                unreachable!()
            }
        }
        let mut q = EventQueue::new();
        q.schedule(SimTime::ZERO, Tick(0)).unwrap();
        assert_eq!(
            q.run_until(SimTime::from_secs(1), &mut Nothing),
            Err(SimError::UnhandledEventKind(EventKind::MeasurementTick))
        );
    }

    #[test]
    fn sim_time_covers_long_horizons() {
        // ten times a 50 s run, and far beyond, still fits.
        let t = SimTime::from_secs(500) + SimTime::from_secs(u32::MAX as u64);
        assert!(t > SimTime::from_secs(500));
        assert_eq!(SimTime::from_secs_f64(0.1), SimTime::from_millis(100));
        assert_eq!(SimTime::from_millis(1500).to_string(), "1.500000s");
    }

    fn lcg(state: &mut u64) -> u64 {
        *state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        *state >> 33
    }

    fn replay(seed: u64) -> Vec<TraceEntry> {
        let mut rng = seed;
        let mut q = EventQueue::with_trace();
        for i in 0..10_000 {
            let at = SimTime::from_micros(lcg(&mut rng) % 50_000_000);
            q.schedule(at, Tick(i)).unwrap();
        }
        let mut r = Recorder::default();
        q.run_until(SimTime::from_secs(50), &mut r).unwrap();
        assert!(!r.clock_went_back);
        q.trace().unwrap().to_vec()
    }

    #[test]
    fn ten_thousand_random_events_replay_identically() {
        let a = replay(7);
        let b = replay(7);
        assert_eq!(a.len(), 10_000);
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0].handle < w[1].handle));
    }
}
