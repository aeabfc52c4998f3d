//! Deterministic discrete-event kernel: a (time, seq)-ordered event queue, a
//! single logical clock, seeded named random substreams, and workload
//! generation.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Priority, Request, RequestId, SessionId, SimTime};

/// The eight event categories the simulation dispatches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    RequestArrival,
    EnvelopeArrival,
    BatchStepComplete,
    PrefillComplete,
    ControllerTick,
    MetricPoll,
    KvTransferComplete,
    HintDelivery,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::RequestArrival => "request_arrival",
            EventKind::EnvelopeArrival => "envelope_arrival",
            EventKind::BatchStepComplete => "batch_step_complete",
            EventKind::PrefillComplete => "prefill_complete",
            EventKind::ControllerTick => "controller_tick",
            EventKind::MetricPoll => "metric_poll",
            EventKind::KvTransferComplete => "kv_transfer_complete",
            EventKind::HintDelivery => "hint_delivery",
        }
    }
}

/// Kind-specific event data. The kernel only needs the kind for ordering and
/// tracing; the simulation layer supplies richer payloads.
pub trait EventPayload {
    fn kind(&self) -> EventKind;
}

impl EventPayload for EventKind {
    fn kind(&self) -> EventKind {
        *self
    }
}

#[derive(Debug, Clone)]
pub struct Event<P> {
    pub time: SimTime,
    pub seq: u64,
    pub payload: P,
}

struct Scheduled<P> {
    time: SimTime,
    seq: u64,
    payload: P,
}

impl<P> PartialEq for Scheduled<P> {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl<P> Eq for Scheduled<P> {}
impl<P> PartialOrd for Scheduled<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<P> Ord for Scheduled<P> {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap, dispatch wants min (time, seq).
        other
            .time
            .cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Strictly ordered pending-event queue. `(time, seq)` is a total order;
/// equal-time events dispatch in schedule order.
pub struct EventQueue<P> {
    heap: BinaryHeap<Scheduled<P>>,
    next_seq: u64,
    now: SimTime,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        EventQueue { heap: BinaryHeap::new(), next_seq: 0, now: SimTime::ZERO }
    }
}

impl<P> EventQueue<P> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Enqueues an event for dispatch at `time`.
    pub fn schedule(&mut self, time: SimTime, payload: P) -> Result<u64, KernelError> {
        if time < self.now {
            return Err(KernelError::TimeInPast { event_ms: time.as_ms(), now_ms: self.now.as_ms() });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Scheduled { time, seq, payload });
        Ok(seq)
    }

    /// Pops the next event with time <= t_end, advancing the clock to its
    /// timestamp. Returns None once no such event remains (the clock is then
    /// left for `finish_until` to advance).
    pub fn pop_next_until(&mut self, t_end: SimTime) -> Option<Event<P>> {
        match self.heap.peek() {
            Some(head) if head.time <= t_end => {
                let ev = self.heap.pop().unwrap();
                debug_assert!(ev.time >= self.now, "clock must never move backward");
                self.now = ev.time;
                Some(Event { time: ev.time, seq: ev.seq, payload: ev.payload })
            }
            _ => None,
        }
    }

    /// Advances the clock to the end of a `run_until` window.
    pub fn finish_until(&mut self, t_end: SimTime) {
        if t_end > self.now {
            self.now = t_end;
        }
    }
}

/// One dispatched event in exportable form.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub time_ms: f64,
    pub seq: u64,
    pub kind: EventKind,
    pub request_id: Option<RequestId>,
    pub agent_id: Option<String>,
    pub detail: String,
}

/// Ordered log of dispatched events.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventTrace {
    pub rows: Vec<TraceRow>,
}

impl EventTrace {
    pub fn push(&mut self, row: TraceRow) {
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// CSV export with columns time_ms, seq, kind, request_id, agent_id, detail.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_ms,seq,kind,request_id,agent_id,detail\n");
        for row in &self.rows {
            let req = row.request_id.map(|r| r.0.to_string()).unwrap_or_default();
            let agent = row.agent_id.clone().unwrap_or_default();
            let detail = row.detail.replace([',', '\n'], ";");
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.time_ms,
                row.seq,
                row.kind.as_str(),
                req,
                agent,
                detail
            ));
        }
        out
    }

    /// Order-sensitive content hash (FNV-1a over the CSV form).
    pub fn hash(&self) -> u64 {
        fnv1a(self.to_csv().as_bytes())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// One seeded source per run with independent named substreams, so adding a
/// consumer never perturbs the draws seen by another.
#[derive(Debug, Clone, Copy)]
pub struct RngStreams {
    seed: u64,
}

impl RngStreams {
    pub fn new(seed: u64) -> RngStreams {
        RngStreams { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, name: &str) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(splitmix64(self.seed ^ fnv1a(name.as_bytes())))
    }
}

/// Token-count distribution for generated requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "dist")]
pub enum SizeDist {
    Fixed { n: u32 },
    Uniform { lo: u32, hi: u32 },
}

impl SizeDist {
    pub fn validate(&self) -> Result<(), KernelError> {
        match self {
            SizeDist::Fixed { n } if *n >= 1 => Ok(()),
            SizeDist::Uniform { lo, hi } if *lo >= 1 && hi >= lo => Ok(()),
            _ => Err(KernelError::InvalidWorkload("token size distribution must cover values >= 1".into())),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            SizeDist::Fixed { n } => *n as f64,
            SizeDist::Uniform { lo, hi } => (*lo as f64 + *hi as f64) / 2.0,
        }
    }

    fn draw(&self, rng: &mut ChaCha12Rng) -> u32 {
        match self {
            SizeDist::Fixed { n } => *n,
            SizeDist::Uniform { lo, hi } => rng.random_range(*lo..=*hi),
        }
    }
}

/// Open-loop workload: Poisson arrivals with Bernoulli-split priorities and
/// independently drawn token sizes, fully determined by `seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub arrival_rate_per_s: f64,
    pub duration_ms: f64,
    pub interactive_fraction: f64,
    pub prompt_tokens: SizeDist,
    pub output_tokens: SizeDist,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), KernelError> {
        if self.arrival_rate_per_s.is_nan() || self.arrival_rate_per_s <= 0.0 {
            return Err(KernelError::InvalidWorkload("arrival_rate must be positive".into()));
        }
        if self.duration_ms.is_nan() || self.duration_ms <= 0.0 {
            return Err(KernelError::InvalidWorkload("duration must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.interactive_fraction) {
            return Err(KernelError::InvalidWorkload("interactive_fraction must be in [0,1]".into()));
        }
        self.prompt_tokens.validate()?;
        self.output_tokens.validate()?;
        Ok(())
    }
}

fn exp_gap_ms(rng: &mut ChaCha12Rng, mean_ms: f64) -> f64 {
    let u: f64 = rng.random();
    -mean_ms * (1.0 - u).ln()
}

/// Generates the request list for a workload. Hops and sessions are filled
/// in by the pipeline wiring; each request gets a fresh session here.
pub fn gen_arrivals(w: &WorkloadSpec) -> Result<Vec<Request>, KernelError> {
    w.validate()?;
    let streams = RngStreams::new(w.seed);
    let mut arrivals_rng = streams.stream("arrivals");
    let mut sizes_rng = streams.stream("sizes");
    let mut prio_rng = streams.stream("priorities");

    let mean_gap = 1000.0 / w.arrival_rate_per_s;
    let mut requests = Vec::new();
    let mut t = 0.0;
    let mut next_id = 0u64;
    loop {
        t += exp_gap_ms(&mut arrivals_rng, mean_gap);
        if t > w.duration_ms {
            break;
        }
        let prompt = w.prompt_tokens.draw(&mut sizes_rng);
        let output = w.output_tokens.draw(&mut sizes_rng);
        let interactive = prio_rng.random_bool(w.interactive_fraction);
        let priority = if interactive { Priority::interactive() } else { Priority::background() };
        requests.push(Request {
            id: RequestId(next_id),
            arrival: SimTime::from_ms(t),
            priority,
            prompt_tokens: prompt,
            output_tokens: output,
            slo_deadline: None,
            session: SessionId(next_id),
            hops: Vec::new(),
        });
        next_id += 1;
    }
    Ok(requests)
}

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("event at {event_ms}ms is before current time {now_ms}ms")]
    TimeInPast { event_ms: f64, now_ms: f64 },
    #[error("invalid workload: {0}")]
    InvalidWorkload(String),
}
