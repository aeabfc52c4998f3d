//! Simulated agent/tool instance: admission queue, continuous-batching
//! execution under a parametric cost model, per-envelope receive overhead,
//! and the uniform set/reset knob surface.
//!
//! An instance is a single-server occupancy timeline. Receive overheads,
//! admission prefills, and decode steps occupy it serially; a decode step
//! advances every active sequence by one token and costs
//! `decode_step_base + decode_step_per_seq * batch_size`.

use std::cmp::Reverse;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AgentId, Priority, RequestId, SessionId, SimTime};

/// Parametric serving cost model; all values in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub prefill_base_ms: f64,
    pub prefill_per_token_ms: f64,
    pub decode_step_base_ms: f64,
    pub decode_step_per_seq_ms: f64,
    pub envelope_overhead_ms: f64,
    pub kv_transfer_per_token_ms: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            prefill_base_ms: 5.0,
            prefill_per_token_ms: 0.05,
            decode_step_base_ms: 15.0,
            decode_step_per_seq_ms: 1.0,
            envelope_overhead_ms: 1.0,
            kv_transfer_per_token_ms: 0.02,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        let fields = [
            self.prefill_base_ms,
            self.prefill_per_token_ms,
            self.decode_step_base_ms,
            self.decode_step_per_seq_ms,
            self.envelope_overhead_ms,
            self.kv_transfer_per_token_ms,
        ];
        if fields.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(RuntimeError::InvalidCostModel("all cost fields must be finite and >= 0".into()));
        }
        if self.decode_step_base_ms + self.decode_step_per_seq_ms <= 0.0 {
            return Err(RuntimeError::InvalidCostModel("decode step cost must be positive".into()));
        }
        Ok(())
    }

    /// Prefill occupancy for `uncovered` context tokens; the per-pass base is
    /// only charged for invocation starts, never for incremental extensions.
    pub fn prefill_ms(&self, uncovered_tokens: u64, charge_base: bool) -> f64 {
        let base = if charge_base { self.prefill_base_ms } else { 0.0 };
        base + self.prefill_per_token_ms * uncovered_tokens as f64
    }

    /// One decode step for a batch of `b` sequences.
    pub fn step_ms(&self, b: usize) -> f64 {
        self.decode_step_base_ms + self.decode_step_per_seq_ms * b as f64
    }

    pub fn transfer_ms(&self, context_tokens: u64) -> f64 {
        self.kv_transfer_per_token_ms * context_tokens as f64
    }
}

/// Admission filter applied when refilling the batch from the wait queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmissionPolicy {
    All,
    PriorityAtLeast(u8),
}

impl AdmissionPolicy {
    pub fn admits(&self, priority: Priority) -> bool {
        match self {
            AdmissionPolicy::All => true,
            AdmissionPolicy::PriorityAtLeast(level) => priority.level >= *level,
        }
    }

    pub fn parse(text: &str) -> Result<AdmissionPolicy, RuntimeError> {
        let text = text.trim();
        if text == "all" {
            return Ok(AdmissionPolicy::All);
        }
        if let Some(level) = text.strip_prefix("priority_at_least:") {
            let level: u8 = level
                .trim()
                .parse()
                .map_err(|_| RuntimeError::ValueOutOfRange { name: "admission".into() })?;
            if level > crate::model::MAX_PRIORITY_LEVEL {
                return Err(RuntimeError::ValueOutOfRange { name: "admission".into() });
            }
            return Ok(AdmissionPolicy::PriorityAtLeast(level));
        }
        Err(RuntimeError::ValueOutOfRange { name: "admission".into() })
    }
}

impl std::fmt::Display for AdmissionPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AdmissionPolicy::All => write!(f, "all"),
            AdmissionPolicy::PriorityAtLeast(l) => write!(f, "priority_at_least:{l}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServingParams {
    pub max_num_seqs: u32,
    pub admission: AdmissionPolicy,
}

impl Default for ServingParams {
    fn default() -> Self {
        ServingParams { max_num_seqs: 8, admission: AdmissionPolicy::All }
    }
}

/// Knob values cross the control API as typed scalars or short strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KnobValue {
    Int(i64),
    Float(f64),
    Text(String),
}

impl std::fmt::Display for KnobValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KnobValue::Int(v) => write!(f, "{v}"),
            KnobValue::Float(v) => write!(f, "{v}"),
            KnobValue::Text(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KnobRange {
    IntRange(i64, i64),
    FloatMin(f64),
    CommMode,
    Admission,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnobDomain {
    Serving,
    Dataplane,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnobSpec {
    pub default: KnobValue,
    pub range: KnobRange,
    pub applies_to: KnobDomain,
}

/// Per-target table of controllable parameters, advertised at registration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnobRegistry {
    knobs: BTreeMap<String, KnobSpec>,
}

impl KnobRegistry {
    pub fn agent_defaults() -> KnobRegistry {
        let mut r = KnobRegistry::default();
        r.knobs.insert(
            "max_num_seqs".into(),
            KnobSpec {
                default: KnobValue::Int(8),
                range: KnobRange::IntRange(1, 64),
                applies_to: KnobDomain::Serving,
            },
        );
        r.knobs.insert(
            "admission".into(),
            KnobSpec {
                default: KnobValue::Text("all".into()),
                range: KnobRange::Admission,
                applies_to: KnobDomain::Serving,
            },
        );
        r
    }

    pub fn link_defaults(mode: crate::model::Granularity) -> KnobRegistry {
        let mut r = KnobRegistry::default();
        r.knobs.insert(
            "comm_mode".into(),
            KnobSpec {
                default: KnobValue::Text(mode.to_string()),
                range: KnobRange::CommMode,
                applies_to: KnobDomain::Dataplane,
            },
        );
        r.knobs.insert(
            "chunk_tokens".into(),
            KnobSpec {
                default: KnobValue::Int(16),
                range: KnobRange::IntRange(1, 8192),
                applies_to: KnobDomain::Dataplane,
            },
        );
        r.knobs.insert(
            "pacing_gap".into(),
            KnobSpec {
                default: KnobValue::Float(0.0),
                range: KnobRange::FloatMin(0.0),
                applies_to: KnobDomain::Dataplane,
            },
        );
        r
    }

    pub fn contains(&self, name: &str) -> bool {
        self.knobs.contains_key(name)
    }

    pub fn spec(&self, name: &str) -> Option<&KnobSpec> {
        self.knobs.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.knobs.keys()
    }

    /// Checks registration and range; returns the validated value.
    pub fn validate(&self, name: &str, value: &KnobValue) -> Result<(), RuntimeError> {
        let spec = self
            .knobs
            .get(name)
            .ok_or_else(|| RuntimeError::UnknownParameter(name.to_string()))?;
        let ok = match (&spec.range, value) {
            (KnobRange::IntRange(lo, hi), KnobValue::Int(v)) => v >= lo && v <= hi,
            (KnobRange::FloatMin(lo), KnobValue::Float(v)) => v >= lo && v.is_finite(),
            (KnobRange::FloatMin(lo), KnobValue::Int(v)) => (*v as f64) >= *lo,
            (KnobRange::CommMode, KnobValue::Text(t)) => crate::model::Granularity::parse(t).is_ok(),
            (KnobRange::Admission, KnobValue::Text(t)) => AdmissionPolicy::parse(t).is_ok(),
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(RuntimeError::ValueOutOfRange { name: name.to_string() })
        }
    }
}

/// Where a downstream agent's per-request output size comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputPolicy {
    FromRequest,
    Fixed { tokens: u32 },
}

/// One admission unit. Every received envelope spawns a work item: the first
/// item of a request at a hop produces and emits the agent's output; later
/// items model re-invocation over the extended context (their decode passes
/// occupy the server but emit nothing).
#[derive(Debug, Clone, PartialEq)]
pub struct WorkItem {
    pub request_id: RequestId,
    pub session: SessionId,
    pub priority: Priority,
    pub hop: usize,
    /// Payload tokens this item adds to the session context.
    pub new_tokens: u64,
    /// Session context total after this item, in tokens.
    pub context_end: u64,
    /// Charge the prefill base (invocation start); incremental stream chunks
    /// extend context at per-token cost only.
    pub charge_base: bool,
    /// First item of the request at this hop: produces the visible output.
    pub emits: bool,
    pub output_tokens: u32,
}

#[derive(Debug, Clone)]
pub struct ActiveSeq {
    pub item: WorkItem,
    pub produced: u32,
    pub first_token: Option<SimTime>,
}

type QueueKey = (Reverse<Priority>, u64);

/// A serving node. The owning simulation drives it through events; the
/// instance tracks its queue, active batch, and busy timeline.
pub struct AgentInstance {
    pub id: AgentId,
    pub cost: CostModel,
    pub params: ServingParams,
    pub knobs: KnobRegistry,
    pub output_policy: OutputPolicy,
    /// Sender-side function boundaries per produced output (>=1).
    pub function_count: u32,
    queue: BTreeMap<QueueKey, WorkItem>,
    next_queue_seq: u64,
    pub batch: Vec<ActiveSeq>,
    pub busy_until: SimTime,
    pub prefill_outstanding: bool,
    pub step_outstanding: bool,
    pub pending_overhead_ms: f64,
    busy_integral_ms: f64,
    integral_at: SimTime,
}

impl AgentInstance {
    pub fn new(
        id: AgentId,
        cost: CostModel,
        params: ServingParams,
        output_policy: OutputPolicy,
        function_count: u32,
    ) -> AgentInstance {
        AgentInstance {
            id,
            cost,
            params,
            knobs: KnobRegistry::agent_defaults(),
            output_policy,
            function_count: function_count.max(1),
            queue: BTreeMap::new(),
            next_queue_seq: 0,
            batch: Vec::new(),
            busy_until: SimTime::ZERO,
            prefill_outstanding: false,
            step_outstanding: false,
            pending_overhead_ms: 0.0,
            busy_integral_ms: 0.0,
            integral_at: SimTime::ZERO,
        }
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn batch_len(&self) -> usize {
        self.batch.len()
    }

    pub fn enqueue(&mut self, item: WorkItem) {
        let key = (Reverse(item.priority), self.next_queue_seq);
        self.next_queue_seq += 1;
        self.queue.insert(key, item);
    }

    /// First queued item that passes the admission filter; items failing the
    /// filter are skipped, not blocking. Returns its key.
    pub fn next_admission(&self) -> Option<QueueKey> {
        if self.batch.len() >= self.params.max_num_seqs as usize {
            return None;
        }
        self.queue
            .iter()
            .find(|(_, item)| self.params.admission.admits(item.priority))
            .map(|(key, _)| *key)
    }

    pub fn peek(&self, key: QueueKey) -> Option<&WorkItem> {
        self.queue.get(&key)
    }

    pub fn take(&mut self, key: QueueKey) -> WorkItem {
        self.queue.remove(&key).expect("queued item")
    }

    pub fn add_receive_overhead(&mut self) {
        self.pending_overhead_ms += self.cost.envelope_overhead_ms;
    }

    /// Folds accumulated busy time up to `now` into the integral.
    pub fn advance_busy_integral(&mut self, now: SimTime) {
        if now <= self.integral_at {
            return;
        }
        let busy_upto = self.busy_until.as_ms().min(now.as_ms());
        if busy_upto > self.integral_at.as_ms() {
            self.busy_integral_ms += busy_upto - self.integral_at.as_ms();
        }
        self.integral_at = now;
    }

    /// Marks the server busy for `[start, start + duration_ms)`.
    pub fn begin_block(&mut self, start: SimTime, duration_ms: f64) -> SimTime {
        debug_assert!(start >= self.busy_until, "server blocks never overlap");
        self.advance_busy_integral(start);
        self.busy_until = start.add_ms(duration_ms);
        self.busy_until
    }

    pub fn busy_integral_ms(&self, now: SimTime) -> f64 {
        let mut v = self.busy_integral_ms;
        if now > self.integral_at {
            let busy_upto = self.busy_until.as_ms().min(now.as_ms());
            if busy_upto > self.integral_at.as_ms() {
                v += busy_upto - self.integral_at.as_ms();
            }
        }
        v
    }

    pub fn resolve_output_tokens(&self, request_output: u32) -> u32 {
        match self.output_policy {
            OutputPolicy::FromRequest => request_output,
            OutputPolicy::Fixed { tokens } => tokens,
        }
    }

    /// Table-style control surface: set a registered knob. Values apply at
    /// the next decision point; the active batch is never evicted.
    pub fn set(&mut self, name: &str, value: KnobValue) -> Result<(), RuntimeError> {
        self.knobs.validate(name, &value)?;
        match (name, &value) {
            ("max_num_seqs", KnobValue::Int(v)) => self.params.max_num_seqs = *v as u32,
            ("admission", KnobValue::Text(t)) => self.params.admission = AdmissionPolicy::parse(t)?,
            _ => return Err(RuntimeError::ValueOutOfRange { name: name.to_string() }),
        }
        Ok(())
    }

    /// Resets a registered knob to its advertised default. Idempotent.
    pub fn reset(&mut self, name: &str) -> Result<(), RuntimeError> {
        let default = self
            .knobs
            .spec(name)
            .ok_or_else(|| RuntimeError::UnknownParameter(name.to_string()))?
            .default
            .clone();
        self.set(name, default)
    }

    /// Current value of a knob, reflecting sets immediately.
    pub fn get(&self, name: &str) -> Result<KnobValue, RuntimeError> {
        match name {
            "max_num_seqs" => Ok(KnobValue::Int(self.params.max_num_seqs as i64)),
            "admission" => Ok(KnobValue::Text(self.params.admission.to_string())),
            _ => Err(RuntimeError::UnknownParameter(name.to_string())),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RuntimeError {
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("value out of range for {name}")]
    ValueOutOfRange { name: String },
    #[error("no resident cache for session")]
    NoResidentCache,
    #[error("invalid cost model: {0}")]
    InvalidCostModel(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agent() -> AgentInstance {
        AgentInstance::new(
            AgentId::new("developer", 0),
            CostModel::default(),
            ServingParams::default(),
            OutputPolicy::FromRequest,
            4,
        )
    }

    #[test]
    fn prefill_cost_examples() {
        let cost = CostModel::default();
        // Resident KV covers old context: only the new 100 tokens prefill.
        assert!((cost.prefill_ms(100, true) - 10.0).abs() < 1e-12);
        // No resident KV, 1000-token context.
        assert!((cost.prefill_ms(1000, true) - 55.0).abs() < 1e-12);
        // Incremental extension: per-token cost only.
        assert!((cost.prefill_ms(16, false) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn step_cost_examples() {
        let cost = CostModel::default();
        assert_eq!(cost.step_ms(1), 16.0);
        assert_eq!(cost.step_ms(4), 19.0);
        assert_eq!(cost.step_ms(8), 23.0);
        // 32-token output at b=1.
        assert_eq!(cost.step_ms(1) * 32.0, 512.0);
    }

    #[test]
    fn batching_throughput_ratio_matches_step_simulation() {
        // Closed form: (8 tokens / 23 ms) / (1 token / 16 ms).
        let cost = CostModel::default();
        let closed_form = (8.0 / cost.step_ms(8)) / (1.0 / cost.step_ms(1));

        // Step-by-step: 8 concurrent 100-token sequences vs one at a time.
        let mut t_batched = 0.0;
        let mut remaining = [100u32; 8];
        while remaining.iter().any(|r| *r > 0) {
            let b = remaining.iter().filter(|r| **r > 0).count();
            t_batched += cost.step_ms(b);
            for r in remaining.iter_mut().filter(|r| **r > 0) {
                *r -= 1;
            }
        }
        let tokens = 800.0;
        let batched_rate = tokens / t_batched;
        let serial_rate = 1.0 / cost.step_ms(1);
        let simulated = batched_rate / serial_rate;

        assert!((closed_form - 5.565_217_391).abs() < 1e-6);
        assert!((simulated - closed_form).abs() < 1e-9);
    }

    #[test]
    fn transfer_vs_recompute_examples() {
        let cost = CostModel::default();
        assert!((cost.transfer_ms(1000) - 20.0).abs() < 1e-12);
        assert!(cost.transfer_ms(1000) < cost.prefill_ms(1000, true));
        assert!((cost.transfer_ms(50) - 1.0).abs() < 1e-12);
        assert!((cost.prefill_ms(50, true) - 7.5).abs() < 1e-12);
    }

    #[test]
    fn set_max_num_seqs_applies_to_refills() {
        let mut a = agent();
        a.set("max_num_seqs", KnobValue::Int(4)).unwrap();
        assert_eq!(a.get("max_num_seqs").unwrap(), KnobValue::Int(4));
        for i in 0..6 {
            a.enqueue(WorkItem {
                request_id: RequestId(i),
                session: SessionId(i),
                priority: Priority::background(),
                hop: 0,
                new_tokens: 10,
                context_end: 10,
                charge_base: true,
                emits: true,
                output_tokens: 4,
            });
        }
        let mut admitted = 0;
        while let Some(key) = a.next_admission() {
            let item = a.take(key);
            a.batch.push(ActiveSeq { item, produced: 0, first_token: None });
            admitted += 1;
        }
        assert_eq!(admitted, 4);
    }

    #[test]
    fn set_out_of_range_rejected() {
        let mut a = agent();
        assert_eq!(
            a.set("max_num_seqs", KnobValue::Int(0)).unwrap_err(),
            RuntimeError::ValueOutOfRange { name: "max_num_seqs".into() }
        );
        assert_eq!(
            a.set("nonexistent", KnobValue::Int(1)).unwrap_err(),
            RuntimeError::UnknownParameter("nonexistent".into())
        );
    }

    #[test]
    fn reset_restores_registered_default_idempotently() {
        let mut a = agent();
        a.set("max_num_seqs", KnobValue::Int(4)).unwrap();
        a.reset("max_num_seqs").unwrap();
        assert_eq!(a.get("max_num_seqs").unwrap(), KnobValue::Int(8));
        a.reset("max_num_seqs").unwrap();
        assert_eq!(a.get("max_num_seqs").unwrap(), KnobValue::Int(8));
        assert_eq!(
            a.reset("nonexistent").unwrap_err(),
            RuntimeError::UnknownParameter("nonexistent".into())
        );
    }

    #[test]
    fn admission_filter_skips_low_priority() {
        let mut a = agent();
        a.set("admission", KnobValue::Text("priority_at_least:4".into())).unwrap();
        a.enqueue(WorkItem {
            request_id: RequestId(0),
            session: SessionId(0),
            priority: Priority::background(),
            hop: 0,
            new_tokens: 1,
            context_end: 1,
            charge_base: true,
            emits: true,
            output_tokens: 1,
        });
        a.enqueue(WorkItem {
            request_id: RequestId(1),
            session: SessionId(1),
            priority: Priority::interactive(),
            hop: 0,
            new_tokens: 1,
            context_end: 1,
            charge_base: true,
            emits: true,
            output_tokens: 1,
        });
        let key = a.next_admission().unwrap();
        assert_eq!(a.peek(key).unwrap().request_id, RequestId(1));
    }

    #[test]
    fn busy_integral_tracks_blocks_and_gaps() {
        let mut a = agent();
        a.begin_block(SimTime::from_ms(0.0), 10.0);
        a.begin_block(SimTime::from_ms(20.0), 5.0);
        assert!((a.busy_integral_ms(SimTime::from_ms(22.0)) - 12.0).abs() < 1e-12);
        assert!((a.busy_integral_ms(SimTime::from_ms(100.0)) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn receive_overhead_accumulates() {
        let mut a = agent();
        a.add_receive_overhead();
        a.add_receive_overhead();
        a.add_receive_overhead();
        assert!((a.pending_overhead_ms - 3.0).abs() < 1e-12);
    }
}
