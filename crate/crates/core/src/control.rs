//! Logically central controller: registration of control surfaces, rule
//! installation, a snapshot-fed state store, periodic policy evaluation with
//! dwell-based hysteresis, request routing, and intent compilation.
//!
//! Every action the controller emits is a set or reset of one registered
//! knob; decisions read only the state store, never runtime internals.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{AggregationKind, Snapshot};
use crate::model::{AgentId, Priority, PriorityClass, Request, SessionId, SimTime};
use crate::runtime::{KnobRegistry, KnobValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
}

impl Comparator {
    pub fn eval(&self, lhs: f64, rhs: f64) -> bool {
        match self {
            Comparator::Lt => lhs < rhs,
            Comparator::Le => lhs <= rhs,
            Comparator::Gt => lhs > rhs,
            Comparator::Ge => lhs >= rhs,
            Comparator::Eq => lhs == rhs,
        }
    }

    /// The complementary comparison, used to turn constraints into guards.
    pub fn negate(&self) -> Comparator {
        match self {
            Comparator::Lt => Comparator::Ge,
            Comparator::Le => Comparator::Gt,
            Comparator::Gt => Comparator::Le,
            Comparator::Ge => Comparator::Lt,
            Comparator::Eq => Comparator::Eq,
        }
    }
}

/// Which node(s) a predicate reads: one instance, or any instance of a role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeSelector {
    Instance(String),
    Role(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPredicate {
    pub metric: String,
    pub node: NodeSelector,
    #[serde(default)]
    pub aggregation: Option<AggregationKind>,
    pub window_ms: f64,
    pub comparator: Comparator,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleCondition {
    Always,
    Metric(MetricPredicate),
}

/// What a knob address points at: an agent instance or an instance link.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum TargetRef {
    Agent(String),
    Link(String),
}

/// Addressable knob: `agent:<id>/<knob>` or `link:<src>-><dst>/<knob>`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct KnobTarget {
    pub target: TargetRef,
    pub knob: String,
}

impl KnobTarget {
    pub fn agent(id: &str, knob: &str) -> KnobTarget {
        KnobTarget { target: TargetRef::Agent(id.into()), knob: knob.into() }
    }

    pub fn link(name: &str, knob: &str) -> KnobTarget {
        KnobTarget { target: TargetRef::Link(name.into()), knob: knob.into() }
    }

    pub fn target_name(&self) -> &str {
        match &self.target {
            TargetRef::Agent(n) | TargetRef::Link(n) => n,
        }
    }

    pub fn parse(text: &str) -> Result<KnobTarget, ControlError> {
        let (kind, rest) = text
            .split_once(':')
            .ok_or_else(|| ControlError::BadTargetAddress(text.into()))?;
        let (name, knob) = rest
            .rsplit_once('/')
            .ok_or_else(|| ControlError::BadTargetAddress(text.into()))?;
        match kind {
            "agent" => Ok(KnobTarget::agent(name, knob)),
            "link" => Ok(KnobTarget::link(name, knob)),
            _ => Err(ControlError::BadTargetAddress(text.into())),
        }
    }
}

impl fmt::Display for KnobTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.target {
            TargetRef::Agent(n) => write!(f, "agent:{}/{}", n, self.knob),
            TargetRef::Link(n) => write!(f, "link:{}/{}", n, self.knob),
        }
    }
}

impl Serialize for KnobTarget {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for KnobTarget {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        KnobTarget::parse(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnobAction {
    Set { value: KnobValue },
    Reset,
}

pub const DEFAULT_DWELL_MS: f64 = 1000.0;

fn default_dwell() -> f64 {
    DEFAULT_DWELL_MS
}

/// Governs a default behavior of one target knob, e.g. a link's
/// communication mode. Re-fires on the same knob are spaced by `dwell_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentLevelRule {
    pub id: u32,
    pub target: KnobTarget,
    pub condition: RuleCondition,
    pub action: KnobAction,
    #[serde(default = "default_dwell")]
    pub dwell_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteSelector {
    LeastQueueDepth,
    Fixed { instance: String },
    RoundRobin,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RequestMatch {
    #[serde(default)]
    pub class: Option<PriorityClass>,
    #[serde(default)]
    pub min_level: Option<u8>,
    #[serde(default)]
    pub hop_role: Option<String>,
    #[serde(default)]
    pub session: Option<SessionId>,
}

impl RequestMatch {
    pub fn matches(&self, request: &Request, priority: Priority, hop_role: &str) -> bool {
        if let Some(class) = self.class {
            if priority.class != class {
                return false;
            }
        }
        if let Some(min) = self.min_level {
            if priority.level < min {
                return false;
            }
        }
        if let Some(role) = &self.hop_role {
            if role != hop_role {
                return false;
            }
        }
        if let Some(session) = self.session {
            if request.session != session {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestAction {
    RouteTo { selector: RouteSelector },
    BlockUntil { predicate: MetricPredicate },
    SetPriority { level: u8 },
}

/// Matched per request per hop; first matching rule (lowest id) wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestLevelRule {
    pub id: u32,
    #[serde(default)]
    pub matcher: RequestMatch,
    pub action: RequestAction,
}

/// The only verbs the controller speaks: set and reset of one knob.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlAction {
    pub target: KnobTarget,
    pub action: KnobAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    MaxThroughput,
    MinP90Latency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub metric: String,
    pub comparator: Comparator,
    pub value: f64,
    #[serde(default)]
    pub scope: Option<String>,
}

/// Operator-level goal plus optional explicit rules, compiled into ordinary
/// rules before installation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Intent {
    #[serde(default)]
    pub objective: Option<Objective>,
    #[serde(default)]
    pub constraints: Vec<Constraint>,
    #[serde(default)]
    pub agent_rules: Vec<AgentLevelRule>,
    #[serde(default)]
    pub request_rules: Vec<RequestLevelRule>,
}

/// A pipeline link as the intent compiler sees it: the addressable link name
/// and the node whose telemetry governs it.
#[derive(Debug, Clone)]
pub struct LinkView {
    pub name: String,
    pub downstream_node: String,
}

#[derive(Debug, Clone, Default)]
pub struct CompiledRules {
    pub agent_rules: Vec<AgentLevelRule>,
    pub request_rules: Vec<RequestLevelRule>,
}

/// Band thresholds for the max_throughput template.
pub const BAND_HIGH: f64 = 0.8;
pub const BAND_LOW: f64 = 0.4;

/// Expands an intent into concrete rules against the given links and final
/// role. Explicit rules pass through unchanged, after the compiled ones.
pub fn compile_intent(
    intent: &Intent,
    links: &[LinkView],
    final_role: &str,
) -> Result<CompiledRules, ControlError> {
    if intent.objective.is_none() && intent.agent_rules.is_empty() && intent.request_rules.is_empty()
    {
        return Err(ControlError::InvalidIntent);
    }
    let mut compiled = CompiledRules::default();
    let mut next_id = 0u32;
    let rule = |target: KnobTarget, condition: RuleCondition, mode: &str, id: &mut u32| {
        let r = AgentLevelRule {
            id: *id,
            target,
            condition,
            action: KnobAction::Set { value: KnobValue::Text(mode.into()) },
            dwell_ms: DEFAULT_DWELL_MS,
        };
        *id += 1;
        r
    };

    match intent.objective {
        Some(Objective::MaxThroughput) => {
            // Three-band mode policy per link, keyed on the downstream node's
            // busy fraction. Rules are evaluated in id order with first-match
            // per knob, so high band wins over the mid band.
            for link in links {
                let busy = |comparator, threshold| {
                    RuleCondition::Metric(MetricPredicate {
                        metric: "server_busy_fraction".into(),
                        node: NodeSelector::Instance(link.downstream_node.clone()),
                        aggregation: None,
                        window_ms: 1000.0,
                        comparator,
                        threshold,
                    })
                };
                let target = KnobTarget::link(&link.name, "comm_mode");
                compiled.agent_rules.push(rule(
                    target.clone(),
                    busy(Comparator::Ge, BAND_HIGH),
                    "batch_all",
                    &mut next_id,
                ));
                compiled.agent_rules.push(rule(
                    target.clone(),
                    busy(Comparator::Le, BAND_LOW),
                    "token_stream(16)",
                    &mut next_id,
                ));
                compiled.agent_rules.push(rule(
                    target,
                    busy(Comparator::Gt, BAND_LOW),
                    "per_function",
                    &mut next_id,
                ));
            }
        }
        Some(Objective::MinP90Latency) => {
            // Constraint guards first (lower ids win), then stream everywhere.
            for constraint in &intent.constraints {
                let (metric, aggregation) = constraint_metric(constraint);
                for link in links {
                    compiled.agent_rules.push(AgentLevelRule {
                        id: next_id,
                        target: KnobTarget::link(&link.name, "comm_mode"),
                        condition: RuleCondition::Metric(MetricPredicate {
                            metric: metric.clone(),
                            node: NodeSelector::Role(final_role.to_string()),
                            aggregation: aggregation.clone(),
                            window_ms: 1000.0,
                            comparator: constraint.comparator.negate(),
                            threshold: constraint.value,
                        }),
                        action: KnobAction::Set { value: KnobValue::Text("batch_all".into()) },
                        dwell_ms: DEFAULT_DWELL_MS,
                    });
                    next_id += 1;
                }
            }
            for link in links {
                compiled.agent_rules.push(rule(
                    KnobTarget::link(&link.name, "comm_mode"),
                    RuleCondition::Always,
                    "token_stream(16)",
                    &mut next_id,
                ));
            }
        }
        None => {}
    }

    for explicit in &intent.agent_rules {
        let mut r = explicit.clone();
        r.id += next_id;
        compiled.agent_rules.push(r);
    }
    compiled.request_rules.extend(intent.request_rules.iter().cloned());
    Ok(compiled)
}

/// Maps a constraint metric like `e2e_latency_p90_ms` (with optional
/// `interactive` scope) onto a built-in metric plus aggregation.
fn constraint_metric(constraint: &Constraint) -> (String, Option<AggregationKind>) {
    let mut name = constraint.metric.clone();
    let mut agg = None;
    for (suffix, kind) in [("_p90_ms", AggregationKind::P90), ("_p99_ms", AggregationKind::P99), ("_p50_ms", AggregationKind::P50)] {
        if let Some(base) = name.strip_suffix(suffix) {
            name = format!("{base}_ms");
            agg = Some(kind);
            break;
        }
    }
    if constraint.scope.as_deref() == Some("interactive") {
        if let Some(base) = name.strip_suffix("_ms") {
            name = format!("{base}_interactive_ms");
        }
    }
    (name, agg)
}

#[derive(Debug, Clone)]
struct Registration {
    knobs: KnobRegistry,
    is_link: bool,
}

/// Controller state: registrations, installed rules, the latest snapshot,
/// and last-fire bookkeeping. Pure with respect to the runtime; it emits
/// actions, it never mutates agents directly.
pub struct Controller {
    registrations: BTreeMap<String, Registration>,
    agent_rules: BTreeMap<u32, AgentLevelRule>,
    request_rules: BTreeMap<u32, RequestLevelRule>,
    snapshot: Option<Snapshot>,
    last_fire: BTreeMap<(u32, String), SimTime>,
    knob_last_change: BTreeMap<String, SimTime>,
    current: BTreeMap<String, String>,
    round_robin: BTreeMap<String, u64>,
    pub hints_enabled: bool,
}

impl Default for Controller {
    fn default() -> Self {
        Controller::new()
    }
}

impl Controller {
    pub fn new() -> Controller {
        Controller {
            registrations: BTreeMap::new(),
            agent_rules: BTreeMap::new(),
            request_rules: BTreeMap::new(),
            snapshot: None,
            last_fire: BTreeMap::new(),
            knob_last_change: BTreeMap::new(),
            current: BTreeMap::new(),
            round_robin: BTreeMap::new(),
            hints_enabled: false,
        }
    }

    /// Registers an agent's advertised knob table.
    pub fn register_agent(&mut self, id: &str, knobs: KnobRegistry) -> Result<(), ControlError> {
        self.register(id, knobs, false)
    }

    /// Links register the same way; their knobs are data-plane scoped.
    pub fn register_link(&mut self, name: &str, knobs: KnobRegistry) -> Result<(), ControlError> {
        self.register(name, knobs, true)
    }

    fn register(&mut self, name: &str, knobs: KnobRegistry, is_link: bool) -> Result<(), ControlError> {
        if self.registrations.contains_key(name) {
            return Err(ControlError::DuplicateRegistration(name.into()));
        }
        for knob in knobs.names() {
            let addr = format!("{name}/{knob}");
            let default = knobs.spec(knob).unwrap().default.clone();
            self.current.insert(addr, default.to_string());
        }
        self.registrations.insert(name.into(), Registration { knobs, is_link });
        Ok(())
    }

    pub fn is_registered(&self, name: &str) -> bool {
        self.registrations.contains_key(name)
    }

    /// Installs (or idempotently replaces, by id) an agent-level rule.
    pub fn install_agent_rule(&mut self, rule: AgentLevelRule) -> Result<(), ControlError> {
        let name = rule.target.target_name();
        let registration = self
            .registrations
            .get(name)
            .ok_or_else(|| ControlError::UnknownTarget(name.into()))?;
        if !registration.knobs.contains(&rule.target.knob) {
            return Err(ControlError::UnknownKnob {
                target: name.into(),
                knob: rule.target.knob.clone(),
            });
        }
        if let RuleCondition::Metric(p) = &rule.condition {
            if !p.threshold.is_finite() {
                return Err(ControlError::InvalidIntent);
            }
        }
        self.agent_rules.insert(rule.id, rule);
        Ok(())
    }

    pub fn install_request_rule(&mut self, rule: RequestLevelRule) -> Result<(), ControlError> {
        self.request_rules.insert(rule.id, rule);
        Ok(())
    }

    pub fn agent_rule_count(&self) -> usize {
        self.agent_rules.len()
    }

    /// Stores the latest poll result; all subsequent decisions read it.
    pub fn ingest_snapshot(&mut self, snapshot: Snapshot) {
        self.snapshot = Some(snapshot);
    }

    pub fn snapshot(&self) -> Option<&Snapshot> {
        self.snapshot.as_ref()
    }

    /// Reflects an externally applied knob change into the mirror (e.g. the
    /// initial static mode of a link).
    pub fn note_current(&mut self, target: &KnobTarget, value: &str) {
        self.current.insert(
            format!("{}/{}", target.target_name(), target.knob),
            value.to_string(),
        );
    }

    fn predicate_holds(&self, predicate: &MetricPredicate) -> bool {
        let Some(snapshot) = &self.snapshot else { return false };
        let nodes: Vec<String> = match &predicate.node {
            NodeSelector::Instance(name) => vec![name.clone()],
            NodeSelector::Role(role) => self
                .registrations
                .iter()
                .filter(|(name, reg)| !reg.is_link && name.starts_with(&format!("{role}/")))
                .map(|(name, _)| name.clone())
                .collect(),
        };
        // Missing data is omission, never zero: a predicate without samples
        // cannot hold.
        nodes.iter().any(|node| {
            snapshot
                .get(node, &predicate.metric)
                .map(|v| predicate.comparator.eval(v, predicate.threshold))
                .unwrap_or(false)
        })
    }

    /// Evaluates every agent-level rule against the stored snapshot and
    /// emits set/reset actions. A rule fires only when its condition holds,
    /// the dwell has elapsed for both the rule and the target knob, and the
    /// action would actually change the current value. Rules are visited in
    /// id order; the first firing rule claims its knob for this tick.
    pub fn tick(&mut self, now: SimTime) -> Vec<ControlAction> {
        let mut actions = Vec::new();
        let mut claimed: Vec<String> = Vec::new();
        let rules: Vec<AgentLevelRule> = self.agent_rules.values().cloned().collect();
        for rule in rules {
            let addr = format!("{}/{}", rule.target.target_name(), rule.target.knob);
            if claimed.contains(&addr) {
                continue;
            }
            let holds = match &rule.condition {
                RuleCondition::Always => true,
                RuleCondition::Metric(p) => self.predicate_holds(p),
            };
            if !holds {
                continue;
            }
            claimed.push(addr.clone());
            if let Some(last) = self.last_fire.get(&(rule.id, addr.clone())) {
                if now.as_ms() - last.as_ms() < rule.dwell_ms {
                    continue;
                }
            }
            if let Some(changed) = self.knob_last_change.get(&addr) {
                if now.as_ms() - changed.as_ms() < rule.dwell_ms {
                    continue;
                }
            }
            let desired = match &rule.action {
                KnobAction::Set { value } => value.to_string(),
                KnobAction::Reset => {
                    let reg = &self.registrations[rule.target.target_name()];
                    reg.knobs.spec(&rule.target.knob).unwrap().default.to_string()
                }
            };
            if self.current.get(&addr).map(|c| c == &desired).unwrap_or(false) {
                continue; // no-op suppression
            }
            self.last_fire.insert((rule.id, addr.clone()), now);
            self.knob_last_change.insert(addr.clone(), now);
            self.current.insert(addr, desired);
            actions.push(ControlAction { target: rule.target.clone(), action: rule.action.clone() });
        }
        actions
    }

    /// Outstanding block-until predicates to apply to a request at injection.
    pub fn blocking_predicate(&self, request: &Request, hop_role: &str) -> Option<&MetricPredicate> {
        for rule in self.request_rules.values() {
            if let RequestAction::BlockUntil { predicate } = &rule.action {
                if rule.matcher.matches(request, request.priority, hop_role) {
                    return Some(predicate);
                }
            }
        }
        None
    }

    pub fn predicate_satisfied(&self, predicate: &MetricPredicate) -> bool {
        self.predicate_holds(predicate)
    }

    /// Priority override from the first matching set_priority rule.
    pub fn priority_override(&self, request: &Request, hop_role: &str) -> Option<u8> {
        for rule in self.request_rules.values() {
            if let RequestAction::SetPriority { level } = &rule.action {
                if rule.matcher.matches(request, request.priority, hop_role) {
                    return Some(*level);
                }
            }
        }
        None
    }

    /// Picks an instance for the next hop. First matching route rule wins;
    /// the default selector is least queue depth from the latest snapshot
    /// (ties broken by lowest instance id). When the chosen instance lacks
    /// the session's cache and hints are enabled, the caller should emit a
    /// hint alongside.
    pub fn route(
        &mut self,
        request: &Request,
        priority: Priority,
        hop_role: &str,
        instances: &[AgentId],
        resident: Option<&AgentId>,
    ) -> Result<(AgentId, bool), ControlError> {
        if instances.is_empty() {
            return Err(ControlError::NoInstanceAvailable(hop_role.into()));
        }
        let selector = self
            .request_rules
            .values()
            .find_map(|rule| match &rule.action {
                RequestAction::RouteTo { selector }
                    if rule.matcher.matches(request, priority, hop_role) =>
                {
                    Some(selector.clone())
                }
                _ => None,
            })
            .unwrap_or(RouteSelector::LeastQueueDepth);

        let chosen = match selector {
            RouteSelector::Fixed { instance } => instances
                .iter()
                .find(|a| a.to_string() == instance)
                .cloned()
                .ok_or(ControlError::NoInstanceAvailable(hop_role.into()))?,
            RouteSelector::RoundRobin => {
                let counter = self.round_robin.entry(hop_role.to_string()).or_insert(0);
                let chosen = instances[(*counter as usize) % instances.len()].clone();
                *counter += 1;
                chosen
            }
            RouteSelector::LeastQueueDepth => {
                let mut sorted: Vec<&AgentId> = instances.iter().collect();
                sorted.sort();
                sorted
                    .into_iter()
                    .min_by(|a, b| {
                        let da = self.queue_depth(a);
                        let db = self.queue_depth(b);
                        da.partial_cmp(&db).unwrap()
                    })
                    .cloned()
                    .unwrap()
            }
        };
        let hint = self.hints_enabled
            && resident.map(|r| *r != chosen).unwrap_or(false);
        Ok((chosen, hint))
    }

    fn queue_depth(&self, agent: &AgentId) -> f64 {
        self.snapshot
            .as_ref()
            .and_then(|s| s.get(&agent.to_string(), "queue_depth"))
            .unwrap_or(0.0)
    }

    /// Aggregations the poller must apply for installed rule predicates that
    /// override a metric's default, keyed by (node, metric).
    pub fn aggregation_overrides<F>(&self, role_instances: F) -> BTreeMap<(String, String), AggregationKind>
    where
        F: Fn(&str) -> Vec<String>,
    {
        let mut overrides = BTreeMap::new();
        for rule in self.agent_rules.values() {
            let RuleCondition::Metric(p) = &rule.condition else { continue };
            let Some(agg) = &p.aggregation else { continue };
            let nodes = match &p.node {
                NodeSelector::Instance(name) => vec![name.clone()],
                NodeSelector::Role(role) => role_instances(role),
            };
            for node in nodes {
                overrides.insert((node, p.metric.clone()), agg.clone());
            }
        }
        overrides
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("duplicate registration for {0}")]
    DuplicateRegistration(String),
    #[error("unknown target {0}")]
    UnknownTarget(String),
    #[error("unknown knob {knob} on {target}")]
    UnknownKnob { target: String, knob: String },
    #[error("no instance available for role {0}")]
    NoInstanceAvailable(String),
    #[error("intent has neither objective nor rules")]
    InvalidIntent,
    #[error("malformed knob address {0}")]
    BadTargetAddress(String),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Snapshot;
    use crate::model::{Granularity, RequestId};

    fn request() -> Request {
        Request {
            id: RequestId(0),
            arrival: SimTime::ZERO,
            priority: Priority::interactive(),
            prompt_tokens: 100,
            output_tokens: 32,
            slo_deadline: None,
            session: SessionId(0),
            hops: vec!["developer".into(), "tester".into()],
        }
    }

    fn snapshot(entries: &[(&str, &str, f64)]) -> Snapshot {
        Snapshot {
            poll_time: SimTime::from_ms(100.0),
            entries: entries
                .iter()
                .map(|(n, m, v)| ((n.to_string(), m.to_string()), *v))
                .collect(),
        }
    }

    fn controller_with_link() -> Controller {
        let mut c = Controller::new();
        c.register_agent("tester/0", KnobRegistry::agent_defaults()).unwrap();
        c.register_link(
            "developer/0->tester/0",
            KnobRegistry::link_defaults(Granularity::PerFunction),
        )
        .unwrap();
        c
    }

    fn mode_rule(id: u32, comparator: Comparator, threshold: f64, mode: &str) -> AgentLevelRule {
        AgentLevelRule {
            id,
            target: KnobTarget::link("developer/0->tester/0", "comm_mode"),
            condition: RuleCondition::Metric(MetricPredicate {
                metric: "server_busy_fraction".into(),
                node: NodeSelector::Instance("tester/0".into()),
                aggregation: None,
                window_ms: 1000.0,
                comparator,
                threshold,
            }),
            action: KnobAction::Set { value: KnobValue::Text(mode.into()) },
            dwell_ms: 1000.0,
        }
    }

    #[test]
    fn register_and_duplicate() {
        let mut c = Controller::new();
        c.register_agent("developer/0", KnobRegistry::agent_defaults()).unwrap();
        assert_eq!(
            c.register_agent("developer/0", KnobRegistry::agent_defaults()).unwrap_err(),
            ControlError::DuplicateRegistration("developer/0".into())
        );
    }

    #[test]
    fn install_validates_target_and_knob() {
        let mut c = controller_with_link();
        assert!(c.install_agent_rule(mode_rule(1, Comparator::Ge, 0.8, "batch_all")).is_ok());

        let mut bad_target = mode_rule(2, Comparator::Ge, 0.8, "batch_all");
        bad_target.target = KnobTarget::link("nope->nope", "comm_mode");
        assert!(matches!(
            c.install_agent_rule(bad_target),
            Err(ControlError::UnknownTarget(_))
        ));

        let mut bad_knob = mode_rule(3, Comparator::Ge, 0.8, "batch_all");
        bad_knob.target = KnobTarget::link("developer/0->tester/0", "nope");
        assert!(matches!(c.install_agent_rule(bad_knob), Err(ControlError::UnknownKnob { .. })));
    }

    #[test]
    fn reinstall_same_id_replaces() {
        let mut c = controller_with_link();
        c.install_agent_rule(mode_rule(1, Comparator::Ge, 0.8, "batch_all")).unwrap();
        c.install_agent_rule(mode_rule(1, Comparator::Ge, 0.9, "batch_all")).unwrap();
        assert_eq!(c.agent_rule_count(), 1);
    }

    #[test]
    fn tick_fires_on_condition_and_changes_value() {
        let mut c = controller_with_link();
        c.install_agent_rule(mode_rule(1, Comparator::Gt, 8.0, "batch_all")).unwrap();
        c.ingest_snapshot(snapshot(&[("tester/0", "server_busy_fraction", 12.0)]));
        let actions = c.tick(SimTime::from_ms(100.0));
        assert_eq!(actions.len(), 1);
        assert_eq!(actions[0].target.knob, "comm_mode");
    }

    #[test]
    fn dwell_suppresses_refire() {
        let mut c = controller_with_link();
        c.install_agent_rule(mode_rule(1, Comparator::Gt, 0.5, "batch_all")).unwrap();
        c.install_agent_rule(mode_rule(2, Comparator::Le, 0.5, "token_stream(16)")).unwrap();
        c.ingest_snapshot(snapshot(&[("tester/0", "server_busy_fraction", 0.9)]));
        assert_eq!(c.tick(SimTime::from_ms(100.0)).len(), 1);
        // Condition flips 200ms later; the knob changed <dwell ago.
        c.ingest_snapshot(snapshot(&[("tester/0", "server_busy_fraction", 0.2)]));
        assert_eq!(c.tick(SimTime::from_ms(300.0)).len(), 0);
        // After the dwell it may fire.
        assert_eq!(c.tick(SimTime::from_ms(1300.0)).len(), 1);
    }

    #[test]
    fn noop_suppression() {
        let mut c = controller_with_link();
        c.note_current(&KnobTarget::link("developer/0->tester/0", "comm_mode"), "batch_all");
        c.install_agent_rule(mode_rule(1, Comparator::Gt, 0.5, "batch_all")).unwrap();
        c.ingest_snapshot(snapshot(&[("tester/0", "server_busy_fraction", 0.9)]));
        assert!(c.tick(SimTime::from_ms(100.0)).is_empty());
    }

    #[test]
    fn missing_metric_means_no_action() {
        let mut c = controller_with_link();
        c.install_agent_rule(mode_rule(1, Comparator::Gt, 0.5, "batch_all")).unwrap();
        c.ingest_snapshot(snapshot(&[]));
        assert!(c.tick(SimTime::from_ms(100.0)).is_empty());
    }

    #[test]
    fn route_least_depth_and_tie_break() {
        let mut c = Controller::new();
        let a = AgentId::new("tester", 0);
        let b = AgentId::new("tester", 1);
        c.ingest_snapshot(snapshot(&[("tester/0", "queue_depth", 5.0), ("tester/1", "queue_depth", 1.0)]));
        let (chosen, _) = c
            .route(&request(), Priority::interactive(), "tester", &[a.clone(), b.clone()], None)
            .unwrap();
        assert_eq!(chosen, b);

        c.ingest_snapshot(snapshot(&[("tester/0", "queue_depth", 2.0), ("tester/1", "queue_depth", 2.0)]));
        let (chosen, _) = c
            .route(&request(), Priority::interactive(), "tester", &[a.clone(), b], None)
            .unwrap();
        assert_eq!(chosen, a);
    }

    #[test]
    fn route_scaling_invariance() {
        let mut c = Controller::new();
        let instances = vec![AgentId::new("tester", 0), AgentId::new("tester", 1)];
        c.ingest_snapshot(snapshot(&[("tester/0", "queue_depth", 6.0), ("tester/1", "queue_depth", 2.0)]));
        let (before, _) = c
            .route(&request(), Priority::interactive(), "tester", &instances, None)
            .unwrap();
        c.ingest_snapshot(snapshot(&[("tester/0", "queue_depth", 600.0), ("tester/1", "queue_depth", 200.0)]));
        let (after, _) = c
            .route(&request(), Priority::interactive(), "tester", &instances, None)
            .unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn route_emits_hint_when_cache_elsewhere() {
        let mut c = Controller::new();
        c.hints_enabled = true;
        let a = AgentId::new("tester", 0);
        let b = AgentId::new("tester", 1);
        c.ingest_snapshot(snapshot(&[("tester/0", "queue_depth", 5.0), ("tester/1", "queue_depth", 1.0)]));
        let (chosen, hint) = c
            .route(&request(), Priority::interactive(), "tester", &[a.clone(), b], Some(&a))
            .unwrap();
        assert_eq!(chosen.index, 1);
        assert!(hint);
    }

    #[test]
    fn first_match_route_rule_wins() {
        let mut c = Controller::new();
        c.install_request_rule(RequestLevelRule {
            id: 1,
            matcher: RequestMatch::default(),
            action: RequestAction::RouteTo {
                selector: RouteSelector::Fixed { instance: "tester/1".into() },
            },
        })
        .unwrap();
        c.install_request_rule(RequestLevelRule {
            id: 2,
            matcher: RequestMatch::default(),
            action: RequestAction::RouteTo {
                selector: RouteSelector::Fixed { instance: "tester/0".into() },
            },
        })
        .unwrap();
        let instances = vec![AgentId::new("tester", 0), AgentId::new("tester", 1)];
        let (chosen, _) = c
            .route(&request(), Priority::interactive(), "tester", &instances, None)
            .unwrap();
        assert_eq!(chosen.index, 1);
    }

    #[test]
    fn no_instance_available() {
        let mut c = Controller::new();
        assert!(matches!(
            c.route(&request(), Priority::interactive(), "tester", &[], None),
            Err(ControlError::NoInstanceAvailable(_))
        ));
    }

    #[test]
    fn compile_max_throughput_three_bands() {
        let intent = Intent { objective: Some(Objective::MaxThroughput), ..Intent::default() };
        let links = vec![LinkView {
            name: "developer/0->tester/0".into(),
            downstream_node: "tester/0".into(),
        }];
        let compiled = compile_intent(&intent, &links, "tester").unwrap();
        assert_eq!(compiled.agent_rules.len(), 3);
        assert!(compiled.agent_rules.iter().all(|r| r.target.knob == "comm_mode"));
        // Band ordering: high band has the lowest id.
        match &compiled.agent_rules[0].condition {
            RuleCondition::Metric(p) => {
                assert_eq!(p.comparator, Comparator::Ge);
                assert_eq!(p.threshold, BAND_HIGH);
            }
            _ => panic!("expected metric condition"),
        }
    }

    #[test]
    fn compile_latency_constraint_guard() {
        let intent = Intent {
            objective: Some(Objective::MinP90Latency),
            constraints: vec![Constraint {
                metric: "e2e_latency_p90_ms".into(),
                comparator: Comparator::Le,
                value: 2000.0,
                scope: Some("interactive".into()),
            }],
            ..Intent::default()
        };
        let links = vec![LinkView {
            name: "developer/0->tester/0".into(),
            downstream_node: "tester/0".into(),
        }];
        let compiled = compile_intent(&intent, &links, "tester").unwrap();
        assert_eq!(compiled.agent_rules.len(), 2);
        match &compiled.agent_rules[0].condition {
            RuleCondition::Metric(p) => {
                assert_eq!(p.metric, "e2e_latency_interactive_ms");
                assert_eq!(p.aggregation, Some(AggregationKind::P90));
                assert_eq!(p.comparator, Comparator::Gt);
            }
            _ => panic!("expected guard requirement"),
        }
        assert_eq!(compiled.agent_rules[1].condition, RuleCondition::Always);
    }

    #[test]
    fn empty_intent_invalid() {
        assert_eq!(
            compile_intent(&Intent::default(), &[], "tester").unwrap_err(),
            ControlError::InvalidIntent
        );
    }

    #[test]
    fn knob_target_addressing_round_trip() {
        for text in ["agent:tester/0/max_num_seqs", "link:developer/0->tester/0/comm_mode"] {
            let target = KnobTarget::parse(text).unwrap();
            assert_eq!(target.to_string(), text);
        }
        assert!(KnobTarget::parse("bogus").is_err());
    }

    #[test]
    fn policy_file_json_parses_objective_constraints_and_rules() {
        let text = r#"{
            "objective": "max_throughput",
            "constraints": [
                {"metric": "e2e_latency_p90_ms", "comparator": "le", "value": 2000.0, "scope": "interactive"}
            ],
            "agent_rules": [
                {
                    "id": 1,
                    "target": "agent:tester/0/max_num_seqs",
                    "condition": {"metric": {
                        "metric": "queue_depth",
                        "node": {"instance": "tester/0"},
                        "window_ms": 1000.0,
                        "comparator": "gt",
                        "threshold": 8.0
                    }},
                    "action": {"set": {"value": 4}},
                    "dwell_ms": 500.0
                }
            ],
            "request_rules": [
                {
                    "id": 1,
                    "matcher": {"class": "interactive"},
                    "action": {"route_to": {"selector": "least_queue_depth"}}
                }
            ]
        }"#;
        let intent: Intent = serde_json::from_str(text).unwrap();
        assert_eq!(intent.objective, Some(Objective::MaxThroughput));
        assert_eq!(intent.constraints.len(), 1);
        let rule = &intent.agent_rules[0];
        assert_eq!(rule.target, KnobTarget::agent("tester/0", "max_num_seqs"));
        assert_eq!(rule.action, KnobAction::Set { value: KnobValue::Int(4) });
        assert_eq!(rule.dwell_ms, 500.0);
        match &intent.request_rules[0].action {
            RequestAction::RouteTo { selector } => {
                assert_eq!(*selector, RouteSelector::LeastQueueDepth)
            }
            other => panic!("unexpected action {other:?}"),
        }
        // Round trip preserves the structure.
        let back: Intent = serde_json::from_str(&serde_json::to_string(&intent).unwrap()).unwrap();
        assert_eq!(back, intent);
    }
}
