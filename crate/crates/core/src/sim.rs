//! The integrated pipeline simulation: wires agent instances, links, the
//! metrics plane, and the controller onto the event kernel and runs a
//! workload to completion.
//!
//! Execution model per agent: a single occupancy timeline. Envelope receive
//! overheads and admission prefills are charged head-of-line between decode
//! steps; a decode step advances every active sequence by one token. Every
//! received envelope spawns a work item for its session: the first item of a
//! request at a hop produces the agent's visible output, later items are
//! re-invocations over the extended context whose decode passes occupy the
//! server but emit nothing. A request completes at a hop when its emitting
//! item finishes; tokens flow downstream through the link shim under the
//! link's current granularity.

use std::collections::BTreeMap;

use crate::control::{Controller, Intent, KnobAction, KnobTarget, LinkView, RequestLevelRule, TargetRef};
use crate::kernel::{EventKind, EventPayload, EventQueue, EventTrace, KernelError, TraceRow};
use crate::metrics::{AggregationKind, Direction, MetricDescriptor, MetricSource, MetricsPlane};
use crate::model::{
    AgentId, Granularity, MessageEnvelope, Priority, Request, RequestId, SegmentKind, SessionId,
    SimTime,
};
use crate::runtime::{
    ActiveSeq, AgentInstance, CostModel, KnobRegistry, KnobValue, OutputPolicy, RuntimeError,
    ServingParams, WorkItem,
};
use crate::shim::{DataPlane, LinkConfig, LinkId};

use thiserror::Error;

/// Fraction of an already-drafted response that a context extension
/// invalidates: a re-invocation redecodes this suffix rather than the whole
/// output.
pub const REFRESH_DECODE_FRACTION: f64 = 2.0 / 3.0;

/// Decode length of a re-invocation refresh pass for an agent whose emitted
/// output is `output_tokens` long.
pub fn refresh_decode_tokens(output_tokens: u32) -> u32 {
    ((output_tokens as f64 * REFRESH_DECODE_FRACTION).ceil() as u32).max(1)
}

/// How the controller handles session state when routing across replicas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadBalancing {
    /// Static wiring: every request goes to the role's first instance and
    /// missing session state is recomputed in place.
    None,
    /// Balanced routing; a missing cache is transferred after the work
    /// arrives, stalling admissions at the head of the queue.
    PostHocTransfer,
    /// Balanced routing; the controller pre-transfers the cache at routing
    /// time so work usually arrives to a warm instance.
    Hints,
}

#[derive(Debug, Clone)]
pub struct RoleSpec {
    pub name: String,
    pub replicas: u32,
    pub cost: CostModel,
    pub serving: ServingParams,
    pub output: OutputPolicy,
    pub function_count: u32,
}

#[derive(Debug, Clone)]
pub struct RoleLinkSpec {
    pub from: String,
    pub to: String,
    pub mode: Granularity,
    pub pacing_gap_ms: f64,
    pub network_delay_ms: f64,
}

/// Session state already resident on an instance when the run starts.
#[derive(Debug, Clone)]
pub struct PlantedKv {
    pub session: SessionId,
    pub role: String,
    pub instance_index: u32,
    pub context_tokens: u64,
}

#[derive(Debug, Clone)]
pub struct SimSpec {
    pub roles: Vec<RoleSpec>,
    pub links: Vec<RoleLinkSpec>,
    pub load_balancing: LoadBalancing,
    pub adaptive: Option<Intent>,
    pub request_rules: Vec<RequestLevelRule>,
    pub planted_kv: Vec<PlantedKv>,
    pub poll_period_ms: f64,
    pub tick_period_ms: f64,
    pub poll_window_ms: f64,
    pub record_trace: bool,
}

impl SimSpec {
    pub fn new(roles: Vec<RoleSpec>, links: Vec<RoleLinkSpec>) -> SimSpec {
        SimSpec {
            roles,
            links,
            load_balancing: LoadBalancing::None,
            adaptive: None,
            request_rules: Vec::new(),
            planted_kv: Vec::new(),
            poll_period_ms: 100.0,
            tick_period_ms: 100.0,
            poll_window_ms: 1000.0,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone)]
enum Payload {
    RequestArrival(Request),
    EnvelopeArrival(MessageEnvelope),
    BatchStep { agent: usize },
    PrefillComplete { agent: usize, item: WorkItem },
    ControllerTick,
    MetricPoll,
    KvTransferComplete { session: SessionId, role: String, to: AgentId, tokens: u64 },
    HintDelivery { session: SessionId, role: String, to: AgentId },
}

impl EventPayload for Payload {
    fn kind(&self) -> EventKind {
        match self {
            Payload::RequestArrival(_) => EventKind::RequestArrival,
            Payload::EnvelopeArrival(_) => EventKind::EnvelopeArrival,
            Payload::BatchStep { .. } => EventKind::BatchStepComplete,
            Payload::PrefillComplete { .. } => EventKind::PrefillComplete,
            Payload::ControllerTick => EventKind::ControllerTick,
            Payload::MetricPoll => EventKind::MetricPoll,
            Payload::KvTransferComplete { .. } => EventKind::KvTransferComplete,
            Payload::HintDelivery { .. } => EventKind::HintDelivery,
        }
    }
}

#[derive(Debug, Clone)]
struct Residency {
    instance: AgentId,
    context_tokens: u64,
    in_flight: Option<(AgentId, SimTime)>,
}

#[derive(Debug, Clone)]
struct RequestState {
    request: Request,
    priority: Priority,
    chosen: Vec<Option<AgentId>>,
    first_item_spawned: Vec<bool>,
    first_token_final: Option<SimTime>,
    completed: Option<SimTime>,
}

/// Per-request results of one run.
#[derive(Debug, Clone)]
pub struct RequestOutcome {
    pub id: RequestId,
    pub arrival_ms: f64,
    pub interactive: bool,
    pub slo_deadline_ms: Option<f64>,
    pub completed_ms: Option<f64>,
    pub first_token_final_ms: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub requests: Vec<RequestOutcome>,
    /// Tokens produced by emitting sequences across all hops.
    pub emitted_tokens: u64,
    /// (link name, time) of every applied comm_mode change.
    pub mode_changes: Vec<(String, f64)>,
    /// Cache transfers started at admission time (missed pre-positioning).
    pub admission_transfers: u64,
    /// Cache transfers started by controller hints.
    pub hint_transfers: u64,
    pub trace: EventTrace,
    pub end_ms: f64,
}

impl SimOutcome {
    pub fn completed(&self) -> usize {
        self.requests.iter().filter(|r| r.completed_ms.is_some()).count()
    }
}

enum AdmitDecision {
    Proceed { prefill_ms: f64 },
    Blocked,
    StartTransfer { tokens: u64 },
}

pub struct Sim {
    spec: SimSpec,
    queue: EventQueue<Payload>,
    agents: Vec<AgentInstance>,
    agent_index: BTreeMap<AgentId, usize>,
    role_instances: BTreeMap<String, Vec<AgentId>>,
    dataplane: DataPlane,
    link_ids: BTreeMap<(AgentId, AgentId), LinkId>,
    link_names: BTreeMap<LinkId, String>,
    metrics: MetricsPlane,
    controller: Controller,
    residency: BTreeMap<(SessionId, String), Residency>,
    session_ctx: BTreeMap<(SessionId, String), u64>,
    requests: BTreeMap<RequestId, RequestState>,
    blocked_requests: Vec<Request>,
    last_busy_integral: Vec<f64>,
    trace: EventTrace,
    mode_changes: Vec<(String, f64)>,
    emitted_tokens: u64,
    admission_transfers: u64,
    hint_transfers: u64,
    horizon: SimTime,
}

const BUILTIN_METRICS: &[(&str, &str, Direction, AggregationKind)] = &[
    ("queue_depth", "items", Direction::LowerIsBetter, AggregationKind::Last),
    ("batch_size", "sequences", Direction::Neutral, AggregationKind::Mean),
    ("server_busy_fraction", "fraction", Direction::Neutral, AggregationKind::Mean),
    ("ttft_ms", "ms", Direction::LowerIsBetter, AggregationKind::Mean),
    ("tpt_ms", "ms", Direction::LowerIsBetter, AggregationKind::Mean),
    ("e2e_latency_ms", "ms", Direction::LowerIsBetter, AggregationKind::Mean),
    ("e2e_latency_interactive_ms", "ms", Direction::LowerIsBetter, AggregationKind::Mean),
    ("envelopes_received", "count", Direction::Neutral, AggregationKind::Sum),
];

impl Sim {
    pub fn new(spec: SimSpec) -> Result<Sim, SimError> {
        let mut agents = Vec::new();
        let mut agent_index = BTreeMap::new();
        let mut role_instances: BTreeMap<String, Vec<AgentId>> = BTreeMap::new();
        let mut metrics = MetricsPlane::new();
        let mut controller = Controller::new();
        controller.hints_enabled = spec.load_balancing == LoadBalancing::Hints;

        for role in &spec.roles {
            role.cost.validate().map_err(SimError::Runtime)?;
            for index in 0..role.replicas.max(1) {
                let id = AgentId::new(&role.name, index);
                let agent = AgentInstance::new(
                    id.clone(),
                    role.cost,
                    role.serving,
                    role.output,
                    role.function_count,
                );
                controller
                    .register_agent(&id.to_string(), agent.knobs.clone())
                    .map_err(|e| SimError::Build(e.to_string()))?;
                for (name, unit, direction, agg) in BUILTIN_METRICS {
                    metrics.register_descriptor(
                        &id.to_string(),
                        MetricDescriptor {
                            name: (*name).into(),
                            unit: (*unit).into(),
                            direction: *direction,
                            default_aggregation: agg.clone(),
                            source: MetricSource::System,
                            description: String::new(),
                        },
                    );
                }
                agent_index.insert(id.clone(), agents.len());
                role_instances.entry(role.name.clone()).or_default().push(id);
                agents.push(agent);
            }
        }

        let mut dataplane = DataPlane::new();
        let mut link_ids = BTreeMap::new();
        let mut link_names = BTreeMap::new();
        let mut link_views = Vec::new();
        let mut next_link = 0u32;
        for link in &spec.links {
            let sources = role_instances
                .get(&link.from)
                .ok_or_else(|| SimError::Build(format!("link source role {} not defined", link.from)))?
                .clone();
            let dests = role_instances
                .get(&link.to)
                .ok_or_else(|| SimError::Build(format!("link destination role {} not defined", link.to)))?
                .clone();
            for src in &sources {
                for dst in &dests {
                    let id = LinkId(next_link);
                    next_link += 1;
                    dataplane.add_link(
                        id,
                        src.clone(),
                        dst.clone(),
                        LinkConfig {
                            mode: link.mode,
                            pacing_gap_ms: link.pacing_gap_ms,
                            network_delay_ms: link.network_delay_ms,
                        },
                    );
                    let name = format!("{src}->{dst}");
                    controller
                        .register_link(&name, KnobRegistry::link_defaults(link.mode))
                        .map_err(|e| SimError::Build(e.to_string()))?;
                    controller.note_current(&KnobTarget::link(&name, "comm_mode"), &link.mode.to_string());
                    link_views.push(LinkView { name: name.clone(), downstream_node: dst.to_string() });
                    link_ids.insert((src.clone(), dst.clone()), id);
                    link_names.insert(id, name);
                }
            }
        }

        let final_role = spec
            .roles
            .last()
            .map(|r| r.name.clone())
            .ok_or_else(|| SimError::Build("pipeline needs at least one role".into()))?;
        if let Some(intent) = &spec.adaptive {
            let compiled = crate::control::compile_intent(intent, &link_views, &final_role)
                .map_err(|e| SimError::Build(e.to_string()))?;
            for rule in compiled.agent_rules {
                controller.install_agent_rule(rule).map_err(|e| SimError::Build(e.to_string()))?;
            }
            for rule in compiled.request_rules {
                controller.install_request_rule(rule).map_err(|e| SimError::Build(e.to_string()))?;
            }
        }
        for rule in &spec.request_rules {
            controller
                .install_request_rule(rule.clone())
                .map_err(|e| SimError::Build(e.to_string()))?;
        }

        let mut residency = BTreeMap::new();
        let mut session_ctx = BTreeMap::new();
        for planted in &spec.planted_kv {
            let instance = AgentId::new(&planted.role, planted.instance_index);
            if !agent_index.contains_key(&instance) {
                return Err(SimError::Build(format!("planted cache on unknown instance {instance}")));
            }
            residency.insert(
                (planted.session, planted.role.clone()),
                Residency {
                    instance,
                    context_tokens: planted.context_tokens,
                    in_flight: None,
                },
            );
            session_ctx.insert((planted.session, planted.role.clone()), planted.context_tokens);
        }

        let n_agents = agents.len();
        Ok(Sim {
            spec,
            queue: EventQueue::new(),
            agents,
            agent_index,
            role_instances,
            dataplane,
            link_ids,
            link_names,
            metrics,
            controller,
            residency,
            session_ctx,
            requests: BTreeMap::new(),
            blocked_requests: Vec::new(),
            last_busy_integral: vec![0.0; n_agents],
            trace: EventTrace::default(),
            mode_changes: Vec::new(),
            emitted_tokens: 0,
            admission_transfers: 0,
            hint_transfers: 0,
            horizon: SimTime::ZERO,
        })
    }

    pub fn controller(&mut self) -> &mut Controller {
        &mut self.controller
    }

    /// Plants session state on an instance after construction, as if the
    /// session had been served there before the run began.
    pub fn plant_kv(&mut self, planted: PlantedKv) {
        let instance = AgentId::new(&planted.role, planted.instance_index);
        debug_assert!(self.agent_index.contains_key(&instance), "planting on unknown instance");
        self.residency.insert(
            (planted.session, planted.role.clone()),
            Residency { instance, context_tokens: planted.context_tokens, in_flight: None },
        );
        let ctx = self.session_ctx.entry((planted.session, planted.role)).or_insert(0);
        *ctx = (*ctx).max(planted.context_tokens);
    }

    pub fn agent(&self, id: &AgentId) -> Option<&AgentInstance> {
        self.agent_index.get(id).map(|i| &self.agents[*i])
    }

    pub fn schedule_requests(&mut self, requests: Vec<Request>) -> Result<(), KernelError> {
        for request in requests {
            self.queue.schedule(request.arrival, Payload::RequestArrival(request))?;
        }
        Ok(())
    }

    /// Runs until `until_ms` (event dispatch stops there) and returns the
    /// collected outcome.
    pub fn run(&mut self, until_ms: f64) -> SimOutcome {
        self.horizon = SimTime::from_ms(until_ms);
        let first_poll = SimTime::from_ms(self.spec.poll_period_ms);
        let first_tick = SimTime::from_ms(self.spec.tick_period_ms);
        // Polls are scheduled ahead of ticks so equal-time pairs keep the
        // poll-before-tick ordering through the seq tie-break.
        let _ = self.queue.schedule(first_poll, Payload::MetricPoll);
        let _ = self.queue.schedule(first_tick, Payload::ControllerTick);

        while let Some(event) = self.queue.pop_next_until(self.horizon) {
            let now = event.time;
            if self.spec.record_trace {
                let row = self.trace_row(&event.payload, now, event.seq);
                self.trace.push(row);
            }
            match event.payload {
                Payload::RequestArrival(request) => self.on_request_arrival(request, now),
                Payload::EnvelopeArrival(envelope) => self.on_envelope(envelope, now),
                Payload::BatchStep { agent } => self.on_batch_step(agent, now),
                Payload::PrefillComplete { agent, item } => self.on_prefill_complete(agent, item, now),
                Payload::ControllerTick => self.on_tick(now),
                Payload::MetricPoll => self.on_poll(now),
                Payload::KvTransferComplete { session, role, to, tokens } => {
                    self.on_transfer_complete(session, role, to, tokens, now)
                }
                Payload::HintDelivery { session, role, to } => self.on_hint(session, role, to, now),
            }
        }
        self.queue.finish_until(self.horizon);

        let requests = self
            .requests
            .values()
            .map(|s| RequestOutcome {
                id: s.request.id,
                arrival_ms: s.request.arrival.as_ms(),
                interactive: s.priority.is_interactive(),
                slo_deadline_ms: s.request.slo_deadline.map(|d| d.as_ms()),
                completed_ms: s.completed.map(|t| t.as_ms()),
                first_token_final_ms: s.first_token_final.map(|t| t.as_ms()),
            })
            .collect();
        SimOutcome {
            requests,
            emitted_tokens: self.emitted_tokens,
            mode_changes: std::mem::take(&mut self.mode_changes),
            admission_transfers: self.admission_transfers,
            hint_transfers: self.hint_transfers,
            trace: std::mem::take(&mut self.trace),
            end_ms: self.queue.now().as_ms(),
        }
    }

    fn trace_row(&self, payload: &Payload, now: SimTime, seq: u64) -> TraceRow {
        let (request_id, agent_id, detail) = match payload {
            Payload::RequestArrival(r) => (
                Some(r.id),
                None,
                format!("prompt={} output={}", r.prompt_tokens, r.output_tokens),
            ),
            Payload::EnvelopeArrival(e) => (
                Some(e.request_id),
                Some(e.destination.to_string()),
                format!("seq={} payload={} final={}", e.seq, e.payload_tokens, e.is_final),
            ),
            Payload::BatchStep { agent } => (
                None,
                Some(self.agents[*agent].id.to_string()),
                format!("b={}", self.agents[*agent].batch_len()),
            ),
            Payload::PrefillComplete { agent, item } => (
                Some(item.request_id),
                Some(self.agents[*agent].id.to_string()),
                format!("context_end={}", item.context_end),
            ),
            Payload::ControllerTick => (None, None, String::new()),
            Payload::MetricPoll => (None, None, String::new()),
            Payload::KvTransferComplete { session, to, tokens, .. } => {
                (None, Some(to.to_string()), format!("session={} tokens={}", session.0, tokens))
            }
            Payload::HintDelivery { session, to, .. } => {
                (None, Some(to.to_string()), format!("session={}", session.0))
            }
        };
        TraceRow { time_ms: now.as_ms(), seq, kind: payload.kind(), request_id, agent_id, detail }
    }

    fn on_request_arrival(&mut self, mut request: Request, now: SimTime) {
        let first_role = match request.hops.first() {
            Some(role) => role.clone(),
            None => return,
        };
        if let Some(level) = self.controller.priority_override(&request, &first_role) {
            request.priority = Priority::new(request.priority.class, level);
        }
        if let Some(predicate) = self.controller.blocking_predicate(&request, &first_role) {
            if !self.controller.predicate_satisfied(predicate) {
                self.blocked_requests.push(request);
                return;
            }
        }
        self.inject(request, now);
    }

    fn inject(&mut self, request: Request, now: SimTime) {
        let first_role = request.hops[0].clone();
        let state = RequestState {
            priority: request.priority,
            chosen: vec![None; request.hops.len()],
            first_item_spawned: vec![false; request.hops.len()],
            first_token_final: None,
            completed: None,
            request: request.clone(),
        };
        self.requests.insert(request.id, state);

        // Route every hop up front: downstream instances are pinned at
        // arrival, giving cache hints their full pipeline lead time.
        for hop in (1..request.hops.len()).rev() {
            self.route_hop(&request, hop, now);
        }
        let Some(chosen) = self.route_hop(&request, 0, now) else { return };
        let idx = self.agent_index[&chosen];
        let ctx = self
            .session_ctx
            .entry((request.session, first_role.clone()))
            .or_insert(0);
        *ctx += request.prompt_tokens as u64;
        let context_end = *ctx;
        let output = self.agents[idx].resolve_output_tokens(request.output_tokens);
        let item = WorkItem {
            request_id: request.id,
            session: request.session,
            priority: request.priority,
            hop: 0,
            new_tokens: request.prompt_tokens as u64,
            context_end,
            charge_base: true,
            emits: true,
            output_tokens: output,
        };
        self.requests.get_mut(&request.id).unwrap().first_item_spawned[0] = true;
        self.enqueue_item(idx, item, now);
        self.advance_agent(idx, now);
    }

    /// Chooses the instance for `hop`, consulting the controller when load
    /// balancing is on; emits a cache hint when routing away from the
    /// session's resident instance with hints enabled.
    fn route_hop(&mut self, request: &Request, hop: usize, now: SimTime) -> Option<AgentId> {
        let role = &request.hops[hop];
        let instances = self.role_instances.get(role)?.clone();
        if instances.is_empty() {
            return None;
        }
        let state = self.requests.get(&request.id)?;
        let priority = state.priority;
        let resident = self
            .residency
            .get(&(request.session, role.clone()))
            .filter(|r| r.context_tokens > 0)
            .map(|r| r.instance.clone());

        let chosen = match self.spec.load_balancing {
            LoadBalancing::None => instances[0].clone(),
            _ => {
                let (chosen, hint) = self
                    .controller
                    .route(request, priority, role, &instances, resident.as_ref())
                    .ok()?;
                if hint {
                    let _ = self.queue.schedule(
                        now,
                        Payload::HintDelivery {
                            session: request.session,
                            role: role.clone(),
                            to: chosen.clone(),
                        },
                    );
                }
                chosen
            }
        };
        self.requests.get_mut(&request.id).unwrap().chosen[hop] = Some(chosen.clone());
        Some(chosen)
    }

    fn enqueue_item(&mut self, idx: usize, item: WorkItem, now: SimTime) {
        self.agents[idx].enqueue(item);
        let depth = self.agents[idx].queue_len() as f64;
        let node = self.agents[idx].id.to_string();
        let _ = self.metrics.record(&node, "queue_depth", depth, now);
    }

    /// Single-server service loop: charge pending receive overheads, then
    /// either start one admission prefill or one decode step.
    fn advance_agent(&mut self, idx: usize, now: SimTime) {
        if self.agents[idx].prefill_outstanding || self.agents[idx].step_outstanding {
            return;
        }
        let mut t = now.max(self.agents[idx].busy_until);
        if self.agents[idx].pending_overhead_ms > 0.0 {
            let overhead = self.agents[idx].pending_overhead_ms;
            self.agents[idx].pending_overhead_ms = 0.0;
            t = self.agents[idx].begin_block(t, overhead);
        }

        // One service block at a time: an admission schedules its prefill and
        // later advances re-enter here for the next one.
        if let Some(key) = self.agents[idx].next_admission() {
            let decision = self.admission_decision(idx, key);
            match decision {
                AdmitDecision::Blocked => {}
                AdmitDecision::StartTransfer { tokens } => {
                    self.admission_transfers += 1;
                    let item = self.agents[idx].peek(key).expect("queued item").clone();
                    let role = self.agents[idx].id.role.clone();
                    let to = self.agents[idx].id.clone();
                    let completes = t.add_ms(self.agents[idx].cost.transfer_ms(tokens));
                    let entry = self
                        .residency
                        .get_mut(&(item.session, role.clone()))
                        .expect("resident entry exists");
                    entry.in_flight = Some((to.clone(), completes));
                    let _ = self.queue.schedule(
                        completes,
                        Payload::KvTransferComplete { session: item.session, role, to, tokens },
                    );
                }
                AdmitDecision::Proceed { prefill_ms } => {
                    let item = self.agents[idx].take(key);
                    let node = self.agents[idx].id.to_string();
                    let depth = self.agents[idx].queue_len() as f64;
                    let _ = self.metrics.record(&node, "queue_depth", depth, t);
                    let end = self.agents[idx].begin_block(t, prefill_ms);
                    self.agents[idx].prefill_outstanding = true;
                    let _ = self.queue.schedule(end, Payload::PrefillComplete { agent: idx, item });
                    return;
                }
            }
        }

        if self.agents[idx].batch_len() > 0 {
            let b = self.agents[idx].batch_len();
            let node = self.agents[idx].id.to_string();
            let _ = self.metrics.record(&node, "batch_size", b as f64, t);
            let dur = self.agents[idx].cost.step_ms(b);
            let end = self.agents[idx].begin_block(t, dur);
            self.agents[idx].step_outstanding = true;
            let _ = self.queue.schedule(end, Payload::BatchStep { agent: idx });
        }
    }

    /// Decides what admitting the queue-head item entails: a plain prefill, a
    /// context rebuild, a cache transfer to await, or blocking on one already
    /// in flight. Transfer waits stall the whole queue; the active batch
    /// keeps stepping.
    fn admission_decision(&self, idx: usize, key: (std::cmp::Reverse<Priority>, u64)) -> AdmitDecision {
        let agent = &self.agents[idx];
        let item = agent.peek(key).expect("queued item");
        let role = agent.id.role.clone();
        let cost = agent.cost;
        let prior = item.context_end - item.new_tokens;
        if !item.emits {
            // Re-invocation refresh passes extend the local state left by the
            // request's emitting invocation; they never move session caches.
            return AdmitDecision::Proceed {
                prefill_ms: cost.prefill_ms(item.new_tokens, item.charge_base),
            };
        }
        match self.residency.get(&(item.session, role)) {
            None => AdmitDecision::Proceed {
                prefill_ms: cost.prefill_ms(item.context_end, item.charge_base),
            },
            Some(res) => {
                if res.in_flight.is_some() {
                    return AdmitDecision::Blocked;
                }
                if res.instance == agent.id {
                    let covered = res.context_tokens.min(item.context_end);
                    let uncovered = item.context_end - covered;
                    AdmitDecision::Proceed { prefill_ms: cost.prefill_ms(uncovered, item.charge_base) }
                } else if res.context_tokens == 0 {
                    AdmitDecision::Proceed {
                        prefill_ms: cost.prefill_ms(item.context_end, item.charge_base),
                    }
                } else {
                    match self.spec.load_balancing {
                        LoadBalancing::None => {
                            // Rebuild the missing context in place: a full
                            // prefill pass over the prior context, then the
                            // item's own prefill.
                            let rebuild = cost.prefill_ms(prior.min(res.context_tokens), true);
                            let remainder = item.context_end - prior.min(res.context_tokens);
                            AdmitDecision::Proceed {
                                prefill_ms: rebuild + cost.prefill_ms(remainder, item.charge_base),
                            }
                        }
                        LoadBalancing::PostHocTransfer | LoadBalancing::Hints => {
                            AdmitDecision::StartTransfer { tokens: res.context_tokens }
                        }
                    }
                }
            }
        }
    }

    fn on_prefill_complete(&mut self, idx: usize, item: WorkItem, now: SimTime) {
        self.agents[idx].prefill_outstanding = false;
        let role = self.agents[idx].id.role.clone();
        let id = self.agents[idx].id.clone();
        if item.emits {
            let entry = self.residency.entry((item.session, role)).or_insert_with(|| Residency {
                instance: id.clone(),
                context_tokens: 0,
                in_flight: None,
            });
            entry.instance = id;
            entry.context_tokens = entry.context_tokens.max(item.context_end);
            entry.in_flight = None;
        } else if let Some(entry) = self.residency.get_mut(&(item.session, role)) {
            // Refresh passes extend covered context only where it already lives.
            if entry.instance == id {
                entry.context_tokens = entry.context_tokens.max(item.context_end);
            }
        }
        self.agents[idx].batch.push(ActiveSeq { item, produced: 0, first_token: None });
        self.advance_agent(idx, now);
    }

    fn on_batch_step(&mut self, idx: usize, now: SimTime) {
        self.agents[idx].step_outstanding = false;
        let agent_id = self.agents[idx].id.clone();
        let node = agent_id.to_string();
        let function_count = self.agents[idx].function_count;

        struct Produced {
            request_id: RequestId,
            session: SessionId,
            priority: Priority,
            hop: usize,
            emits: bool,
            first_token: bool,
            produced: u32,
            output_tokens: u32,
            first_token_at: Option<SimTime>,
        }
        let mut productions = Vec::new();
        for seq in self.agents[idx].batch.iter_mut() {
            seq.produced += 1;
            let first = seq.first_token.is_none();
            if first {
                seq.first_token = Some(now);
            }
            productions.push(Produced {
                request_id: seq.item.request_id,
                session: seq.item.session,
                priority: seq.item.priority,
                hop: seq.item.hop,
                emits: seq.item.emits,
                first_token: first,
                produced: seq.produced,
                output_tokens: seq.item.output_tokens,
                first_token_at: seq.first_token,
            });
        }
        self.agents[idx].batch.retain(|seq| seq.produced < seq.item.output_tokens);

        for p in productions {
            let (hops, arrival_ms) = {
                let state = &self.requests[&p.request_id];
                (state.request.hops.len(), state.request.arrival.as_ms())
            };
            let is_final_hop = p.hop + 1 >= hops;
            let complete = p.produced >= p.output_tokens;

            if p.emits {
                self.emitted_tokens += 1;
                if p.first_token {
                    if is_final_hop {
                        self.requests.get_mut(&p.request_id).unwrap().first_token_final = Some(now);
                    }
                    let _ = self.metrics.record(&node, "ttft_ms", now.as_ms() - arrival_ms, now);
                }

                if !is_final_hop {
                    // Feed the produced token to the outbound link.
                    let next = self.requests[&p.request_id].chosen[p.hop + 1]
                        .clone()
                        .expect("next hop routed at admission");
                    let link = self.link_ids[&(agent_id.clone(), next)];
                    let interval = (p.output_tokens / function_count.max(1)).max(1);
                    let boundary = p.produced % interval == 0;
                    let emitted = self
                        .dataplane
                        .offer_tokens(
                            link,
                            p.request_id,
                            p.session,
                            p.priority,
                            1,
                            boundary,
                            complete,
                            now,
                        )
                        .expect("link exists");
                    if emitted > 0 {
                        self.dispatch_link(link, now);
                    }
                }

                if complete && is_final_hop {
                    let state = self.requests.get_mut(&p.request_id).unwrap();
                    state.completed = Some(now);
                    let e2e = now.as_ms() - state.request.arrival.as_ms();
                    let interactive = state.priority.is_interactive();
                    let _ = self.metrics.record(&node, "e2e_latency_ms", e2e, now);
                    if interactive {
                        let _ = self.metrics.record(&node, "e2e_latency_interactive_ms", e2e, now);
                    }
                    if p.produced > 1 {
                        let tpt = (now.as_ms() - p.first_token_at.unwrap().as_ms())
                            / (p.produced - 1) as f64;
                        let _ = self.metrics.record(&node, "tpt_ms", tpt, now);
                    }
                }
            }
        }
        self.advance_agent(idx, now);
    }

    fn dispatch_link(&mut self, link: LinkId, now: SimTime) {
        let deliveries = self.dataplane.dispatch(link, now).expect("link exists");
        for (envelope, arrival) in deliveries {
            let _ = self.queue.schedule(arrival, Payload::EnvelopeArrival(envelope));
        }
    }

    fn on_envelope(&mut self, envelope: MessageEnvelope, now: SimTime) {
        let Some(&idx) = self.agent_index.get(&envelope.destination) else { return };
        let role = self.agents[idx].id.role.clone();
        let node = self.agents[idx].id.to_string();
        self.agents[idx].add_receive_overhead();
        let _ = self.metrics.record(&node, "envelopes_received", 1.0, now);

        let Some(state) = self.requests.get(&envelope.request_id) else { return };
        let hop = match state.request.hops.iter().position(|r| *r == role) {
            Some(h) => h,
            None => return,
        };
        let ctx = self.session_ctx.entry((envelope.session, role)).or_insert(0);
        *ctx += envelope.payload_tokens as u64;
        let context_end = *ctx;

        let emits = !state.first_item_spawned[hop];
        let charge_base = emits || envelope.segment == SegmentKind::FunctionBoundary;
        let full_output = self.agents[idx].resolve_output_tokens(state.request.output_tokens);
        let output = if emits { full_output } else { refresh_decode_tokens(full_output) };
        let item = WorkItem {
            request_id: envelope.request_id,
            session: envelope.session,
            priority: envelope.priority,
            hop,
            new_tokens: envelope.payload_tokens as u64,
            context_end,
            charge_base,
            emits,
            output_tokens: output,
        };
        self.requests.get_mut(&envelope.request_id).unwrap().first_item_spawned[hop] = true;
        self.enqueue_item(idx, item, now);
        self.advance_agent(idx, now);
    }

    fn on_transfer_complete(
        &mut self,
        session: SessionId,
        role: String,
        to: AgentId,
        tokens: u64,
        now: SimTime,
    ) {
        if let Some(entry) = self.residency.get_mut(&(session, role)) {
            entry.instance = to;
            entry.context_tokens = entry.context_tokens.max(tokens);
            entry.in_flight = None;
        }
        for idx in 0..self.agents.len() {
            self.advance_agent(idx, now);
        }
    }

    /// Controller hint: pre-transfer the session cache to `to` so arriving
    /// work finds it warm.
    fn on_hint(&mut self, session: SessionId, role: String, to: AgentId, now: SimTime) {
        if self.kv_transfer(session, &role, &to, now) == Ok(true) {
            self.hint_transfers += 1;
        }
    }

    /// Starts moving a session's cache to `to`, returning whether a transfer
    /// actually began. Errors when no resident copy exists; a transfer
    /// already in flight or a copy already at `to` is a quiet no-op.
    pub fn kv_transfer(
        &mut self,
        session: SessionId,
        role: &str,
        to: &AgentId,
        now: SimTime,
    ) -> Result<bool, RuntimeError> {
        let Some(entry) = self.residency.get_mut(&(session, role.to_string())) else {
            return Err(RuntimeError::NoResidentCache);
        };
        if entry.context_tokens == 0 {
            return Err(RuntimeError::NoResidentCache);
        }
        if entry.instance == *to || entry.in_flight.is_some() {
            return Ok(false);
        }
        let tokens = entry.context_tokens;
        let idx = self.agent_index[to];
        let completes = now.add_ms(self.agents[idx].cost.transfer_ms(tokens));
        entry.in_flight = Some((to.clone(), completes));
        let _ = self.queue.schedule(
            completes,
            Payload::KvTransferComplete { session, role: role.to_string(), to: to.clone(), tokens },
        );
        Ok(true)
    }

    fn on_poll(&mut self, now: SimTime) {
        for idx in 0..self.agents.len() {
            self.agents[idx].advance_busy_integral(now);
            let integral = self.agents[idx].busy_integral_ms(now);
            let fraction = (integral - self.last_busy_integral[idx]) / self.spec.poll_period_ms;
            self.last_busy_integral[idx] = integral;
            let node = self.agents[idx].id.to_string();
            let _ = self.metrics.record(&node, "server_busy_fraction", fraction, now);
            let depth = self.agents[idx].queue_len() as f64;
            let _ = self.metrics.record(&node, "queue_depth", depth, now);
        }
        let overrides = self.controller_poll_overrides();
        let nodes: Vec<String> = self.metrics.nodes().cloned().collect();
        let names: Vec<String> = BUILTIN_METRICS.iter().map(|(n, ..)| n.to_string()).collect();
        let snapshot = self.metrics.poll(&nodes, &names, self.spec.poll_window_ms, now, &overrides);
        self.controller.ingest_snapshot(snapshot);
        let next = now.add_ms(self.spec.poll_period_ms);
        if next <= self.horizon {
            let _ = self.queue.schedule(next, Payload::MetricPoll);
        }
    }

    fn controller_poll_overrides(&self) -> BTreeMap<(String, String), AggregationKind> {
        self.controller.aggregation_overrides(|role| {
            self.role_instances
                .get(role)
                .map(|v| v.iter().map(|a| a.to_string()).collect())
                .unwrap_or_default()
        })
    }

    fn on_tick(&mut self, now: SimTime) {
        // Re-examine controller-held requests first.
        let blocked = std::mem::take(&mut self.blocked_requests);
        for request in blocked {
            let role = request.hops[0].clone();
            let release = match self.controller.blocking_predicate(&request, &role) {
                Some(p) => self.controller.predicate_satisfied(p),
                None => true,
            };
            if release {
                self.inject(request, now);
            } else {
                self.blocked_requests.push(request);
            }
        }

        let actions = self.controller.tick(now);
        let mut detail = String::new();
        for action in &actions {
            if !detail.is_empty() {
                detail.push(';');
            }
            detail.push_str(&format!("{}", action.target));
            self.apply_action(action, now);
        }
        if self.spec.record_trace && !detail.is_empty() {
            if let Some(last) = self.trace.rows.last_mut() {
                if last.kind == EventKind::ControllerTick {
                    last.detail = detail;
                }
            }
        }
        let next = now.add_ms(self.spec.tick_period_ms);
        if next <= self.horizon {
            let _ = self.queue.schedule(next, Payload::ControllerTick);
        }
    }

    fn apply_action(&mut self, action: &crate::control::ControlAction, now: SimTime) {
        match &action.target.target {
            TargetRef::Agent(name) => {
                let Some(idx) = self
                    .agents
                    .iter()
                    .position(|a| a.id.to_string() == *name)
                else {
                    return;
                };
                let result = match &action.action {
                    KnobAction::Set { value } => self.agents[idx].set(&action.target.knob, value.clone()),
                    KnobAction::Reset => self.agents[idx].reset(&action.target.knob),
                };
                debug_assert!(result.is_ok(), "validated rule failed to apply: {result:?}");
                self.advance_agent(idx, now);
            }
            TargetRef::Link(name) => {
                let Some((&link_id, _)) = self.link_names.iter().find(|(_, n)| *n == name) else {
                    return;
                };
                let value = match &action.action {
                    KnobAction::Set { value } => value.clone(),
                    KnobAction::Reset => {
                        match action.target.knob.as_str() {
                            "comm_mode" => KnobValue::Text("token_stream(16)".into()),
                            "chunk_tokens" => KnobValue::Int(16),
                            _ => KnobValue::Float(0.0),
                        }
                    }
                };
                match (action.target.knob.as_str(), value) {
                    ("comm_mode", KnobValue::Text(text)) => {
                        if let Ok(mode) = Granularity::parse(&text) {
                            let before = self.dataplane.mode(link_id).unwrap();
                            if before != mode {
                                let _ = self.dataplane.set_mode(link_id, mode, now);
                                self.mode_changes.push((name.clone(), now.as_ms()));
                                self.dispatch_link(link_id, now);
                            }
                        }
                    }
                    ("chunk_tokens", KnobValue::Int(chunk)) => {
                        if chunk >= 1 {
                            if let Ok(Granularity::TokenStream { .. }) = self.dataplane.mode(link_id) {
                                let _ = self.dataplane.set_mode(
                                    link_id,
                                    Granularity::TokenStream { chunk_tokens: chunk as u32 },
                                    now,
                                );
                                self.dispatch_link(link_id, now);
                            }
                        }
                    }
                    ("pacing_gap", KnobValue::Float(gap)) => {
                        let _ = self.dataplane.set_pacing_gap(link_id, gap);
                    }
                    ("pacing_gap", KnobValue::Int(gap)) => {
                        let _ = self.dataplane.set_pacing_gap(link_id, gap as f64);
                    }
                    _ => {}
                }
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulation build error: {0}")]
    Build(String),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}
