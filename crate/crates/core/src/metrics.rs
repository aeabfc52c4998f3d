//! Two-tier telemetry: per-node collectors backed by bounded ring buffers,
//! a central on-demand poller producing windowed snapshots, descriptor-driven
//! metric semantics, and pluggable aggregation.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::SimTime;

pub const DEFAULT_RING_CAPACITY: usize = 65_536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherIsBetter,
    LowerIsBetter,
    Neutral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricSource {
    System,
    Application,
}

/// Aggregation over an in-window sample list. Percentiles use nearest-rank:
/// the ceil(q*n)-th smallest of n samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationKind {
    Mean,
    Max,
    Min,
    Sum,
    Count,
    Last,
    P50,
    P90,
    P99,
    Custom(String),
}

/// Semantic description of a metric, registered per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricDescriptor {
    pub name: String,
    pub unit: String,
    pub direction: Direction,
    pub default_aggregation: AggregationKind,
    pub source: MetricSource,
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSample {
    pub time: SimTime,
    pub value: f64,
}

struct Ring {
    samples: VecDeque<MetricSample>,
    capacity: usize,
}

impl Ring {
    fn new(capacity: usize) -> Ring {
        Ring { samples: VecDeque::new(), capacity }
    }

    fn push(&mut self, sample: MetricSample) {
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(sample);
    }

    /// Samples with time in the half-open window (until - window, until].
    fn window(&self, until: SimTime, window_ms: f64) -> Vec<f64> {
        let lo = until.as_ms() - window_ms;
        self.samples
            .iter()
            .filter(|s| s.time.as_ms() > lo && s.time <= until)
            .map(|s| s.value)
            .collect()
    }
}

struct NodeCollector {
    descriptors: BTreeMap<String, MetricDescriptor>,
    rings: BTreeMap<String, Ring>,
}

/// A custom aggregation receives the raw in-window sample list.
pub type CustomAggFn = fn(&[f64]) -> f64;

/// Controller-facing view over all node metrics at one poll instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub poll_time: SimTime,
    /// (node, metric name) -> aggregated value. Pairs without in-window
    /// samples are omitted, never zero-filled.
    pub entries: BTreeMap<(String, String), f64>,
}

impl Snapshot {
    pub fn get(&self, node: &str, name: &str) -> Option<f64> {
        self.entries.get(&(node.to_string(), name.to_string())).copied()
    }
}

/// The metrics plane: local collectors plus central polling.
pub struct MetricsPlane {
    nodes: BTreeMap<String, NodeCollector>,
    customs: BTreeMap<String, CustomAggFn>,
    ring_capacity: usize,
}

impl Default for MetricsPlane {
    fn default() -> Self {
        MetricsPlane::new()
    }
}

impl MetricsPlane {
    pub fn new() -> MetricsPlane {
        MetricsPlane {
            nodes: BTreeMap::new(),
            customs: BTreeMap::new(),
            ring_capacity: DEFAULT_RING_CAPACITY,
        }
    }

    #[cfg(test)]
    fn with_ring_capacity(capacity: usize) -> MetricsPlane {
        MetricsPlane { ring_capacity: capacity, ..MetricsPlane::new() }
    }

    pub fn register_custom(&mut self, name: &str, f: CustomAggFn) {
        self.customs.insert(name.to_string(), f);
    }

    /// Registers a descriptor on a node, creating the node on first use.
    pub fn register_descriptor(&mut self, node: &str, descriptor: MetricDescriptor) {
        let collector = self.nodes.entry(node.to_string()).or_insert_with(|| NodeCollector {
            descriptors: BTreeMap::new(),
            rings: BTreeMap::new(),
        });
        collector.rings.entry(descriptor.name.clone()).or_insert_with({
            let cap = self.ring_capacity;
            move || Ring::new(cap)
        });
        collector.descriptors.insert(descriptor.name.clone(), descriptor);
    }

    pub fn descriptor(&self, node: &str, name: &str) -> Option<&MetricDescriptor> {
        self.nodes.get(node).and_then(|n| n.descriptors.get(name))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &String> {
        self.nodes.keys()
    }

    /// Appends a sample to the node's ring buffer for `name`.
    pub fn record(
        &mut self,
        node: &str,
        name: &str,
        value: f64,
        now: SimTime,
    ) -> Result<(), MetricsError> {
        let collector = self
            .nodes
            .get_mut(node)
            .ok_or_else(|| MetricsError::UnknownMetric { node: node.into(), name: name.into() })?;
        if !collector.descriptors.contains_key(name) {
            return Err(MetricsError::UnknownMetric { node: node.into(), name: name.into() });
        }
        collector
            .rings
            .get_mut(name)
            .expect("ring exists for every descriptor")
            .push(MetricSample { time: now, value });
        Ok(())
    }

    /// Centralized poll: aggregates each requested (node, metric) over the
    /// half-open window (now - window, now], using the descriptor's default
    /// aggregation unless overridden. Pairs without samples are omitted.
    pub fn poll(
        &self,
        nodes: &[String],
        names: &[String],
        window_ms: f64,
        now: SimTime,
        overrides: &BTreeMap<(String, String), AggregationKind>,
    ) -> Snapshot {
        let mut entries = BTreeMap::new();
        for node in nodes {
            let Some(collector) = self.nodes.get(node) else { continue };
            for name in names {
                let Some(descriptor) = collector.descriptors.get(name) else { continue };
                let samples = collector.rings[name].window(now, window_ms);
                if samples.is_empty() {
                    continue;
                }
                let kind = overrides
                    .get(&(node.clone(), name.clone()))
                    .unwrap_or(&descriptor.default_aggregation);
                if let Ok(value) = self.aggregate(&samples, kind) {
                    entries.insert((node.clone(), name.clone()), value);
                }
            }
        }
        Snapshot { poll_time: now, entries }
    }

    /// Polls every registered metric on every node.
    pub fn poll_all(&self, window_ms: f64, now: SimTime) -> Snapshot {
        let nodes: Vec<String> = self.nodes.keys().cloned().collect();
        let mut names: Vec<String> = self
            .nodes
            .values()
            .flat_map(|c| c.descriptors.keys().cloned())
            .collect();
        names.sort();
        names.dedup();
        self.poll(&nodes, &names, window_ms, now, &BTreeMap::new())
    }

    pub fn aggregate(&self, samples: &[f64], kind: &AggregationKind) -> Result<f64, MetricsError> {
        if samples.is_empty() {
            return Err(MetricsError::EmptyInput);
        }
        Ok(match kind {
            AggregationKind::Mean => samples.iter().sum::<f64>() / samples.len() as f64,
            AggregationKind::Max => samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            AggregationKind::Min => samples.iter().cloned().fold(f64::INFINITY, f64::min),
            AggregationKind::Sum => samples.iter().sum(),
            AggregationKind::Count => samples.len() as f64,
            AggregationKind::Last => *samples.last().unwrap(),
            AggregationKind::P50 => nearest_rank(samples, 0.50),
            AggregationKind::P90 => nearest_rank(samples, 0.90),
            AggregationKind::P99 => nearest_rank(samples, 0.99),
            AggregationKind::Custom(name) => {
                let f = self
                    .customs
                    .get(name)
                    .ok_or_else(|| MetricsError::UnknownCustomAggregation(name.clone()))?;
                f(samples)
            }
        })
    }
}

/// Nearest-rank percentile: the ceil(q*n)-th smallest of n samples.
pub fn nearest_rank(samples: &[f64], q: f64) -> f64 {
    debug_assert!(!samples.is_empty());
    let mut sorted: Vec<f64> = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("metric samples are never NaN"));
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.saturating_sub(1).min(sorted.len() - 1)]
}

/// Parses a descriptor file: a JSON array of descriptor objects with exactly
/// the required keys. Duplicate names within one file are rejected.
pub fn load_descriptors(text: &str) -> Result<Vec<MetricDescriptor>, MetricsError> {
    let parsed: Vec<MetricDescriptor> = serde_json::from_str(text)
        .map_err(|e| MetricsError::ParseError { line: e.line(), message: e.to_string() })?;
    let mut seen = std::collections::BTreeSet::new();
    for d in &parsed {
        if !seen.insert(d.name.clone()) {
            return Err(MetricsError::DuplicateName(d.name.clone()));
        }
    }
    Ok(parsed)
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("unknown metric {name} on node {node}")]
    UnknownMetric { node: String, name: String },
    #[error("aggregation over empty input")]
    EmptyInput,
    #[error("unknown custom aggregation {0}")]
    UnknownCustomAggregation(String),
    #[error("descriptor parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("duplicate metric name {0} in descriptor file")]
    DuplicateName(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(ms: f64) -> SimTime {
        SimTime::from_ms(ms)
    }

    fn gauge(name: &str, agg: AggregationKind) -> MetricDescriptor {
        MetricDescriptor {
            name: name.into(),
            unit: "count".into(),
            direction: Direction::Neutral,
            default_aggregation: agg,
            source: MetricSource::System,
            description: String::new(),
        }
    }

    #[test]
    fn record_then_poll_last() {
        let mut plane = MetricsPlane::new();
        plane.register_descriptor("node-a", gauge("queue_depth", AggregationKind::Last));
        plane.record("node-a", "queue_depth", 5.0, t(10.0)).unwrap();
        let snap = plane.poll_all(100.0, t(50.0));
        assert_eq!(snap.get("node-a", "queue_depth"), Some(5.0));
    }

    #[test]
    fn record_unregistered_rejected() {
        let mut plane = MetricsPlane::new();
        plane.register_descriptor("node-a", gauge("queue_depth", AggregationKind::Last));
        let err = plane.record("node-a", "nope", 1.0, t(0.0)).unwrap_err();
        assert!(matches!(err, MetricsError::UnknownMetric { .. }));
    }

    #[test]
    fn ring_evicts_oldest() {
        let mut plane = MetricsPlane::with_ring_capacity(4);
        plane.register_descriptor("n", gauge("m", AggregationKind::Min));
        for i in 0..5 {
            plane.record("n", "m", i as f64, t(i as f64)).unwrap();
        }
        // Sample 0 evicted: min over the full window is now 1.
        let snap = plane.poll_all(1_000.0, t(10.0));
        assert_eq!(snap.get("n", "m"), Some(1.0));
    }

    #[test]
    fn poll_mean_and_percentile() {
        let mut plane = MetricsPlane::new();
        plane.register_descriptor("n", gauge("m", AggregationKind::Mean));
        for v in [2.0, 4.0, 6.0] {
            plane.record("n", "m", v, t(1.0)).unwrap();
        }
        assert_eq!(plane.poll_all(10.0, t(2.0)).get("n", "m"), Some(4.0));

        let samples: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        assert_eq!(plane.aggregate(&samples, &AggregationKind::P90).unwrap(), 90.0);
        let thousand: Vec<f64> = (1..=1000).map(|v| v as f64).collect();
        assert_eq!(plane.aggregate(&thousand, &AggregationKind::P99).unwrap(), 990.0);
    }

    #[test]
    fn empty_window_omitted() {
        let mut plane = MetricsPlane::new();
        plane.register_descriptor("n", gauge("m", AggregationKind::Mean));
        plane.record("n", "m", 1.0, t(5.0)).unwrap();
        // Window (95, 100]: the sample at t=5 is outside.
        let snap = plane.poll_all(5.0, t(100.0));
        assert_eq!(snap.get("n", "m"), None);
    }

    #[test]
    fn window_boundaries_half_open() {
        let mut plane = MetricsPlane::new();
        plane.register_descriptor("n", gauge("m", AggregationKind::Sum));
        plane.record("n", "m", 1.0, t(90.0)).unwrap(); // exactly poll_time - window: excluded
        plane.record("n", "m", 2.0, t(100.0)).unwrap(); // exactly poll_time: included
        let snap = plane.poll_all(10.0, t(100.0));
        assert_eq!(snap.get("n", "m"), Some(2.0));
    }

    #[test]
    fn poll_is_pure() {
        let mut plane = MetricsPlane::new();
        plane.register_descriptor("n", gauge("m", AggregationKind::Mean));
        plane.record("n", "m", 3.0, t(1.0)).unwrap();
        let a = plane.poll_all(10.0, t(5.0));
        let b = plane.poll_all(10.0, t(5.0));
        assert_eq!(a, b);
    }

    #[test]
    fn aggregate_error_paths() {
        let plane = MetricsPlane::new();
        assert_eq!(plane.aggregate(&[], &AggregationKind::Sum), Err(MetricsError::EmptyInput));
        assert_eq!(plane.aggregate(&[3.0, 1.0, 2.0], &AggregationKind::Max), Ok(3.0));
        assert!(matches!(
            plane.aggregate(&[1.0], &AggregationKind::Custom("nope".into())),
            Err(MetricsError::UnknownCustomAggregation(_))
        ));
    }

    #[test]
    fn custom_aggregation_gets_raw_samples() {
        let mut plane = MetricsPlane::new();
        fn spread(samples: &[f64]) -> f64 {
            let max = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = samples.iter().cloned().fold(f64::INFINITY, f64::min);
            max - min
        }
        plane.register_custom("spread", spread);
        let v = plane
            .aggregate(&[4.0, 9.0, 6.0], &AggregationKind::Custom("spread".into()))
            .unwrap();
        assert_eq!(v, 5.0);
    }

    const DESCRIPTOR_FILE: &str = r#"[
        {
            "name": "gpu_util",
            "unit": "fraction",
            "direction": "higher_is_better",
            "default_aggregation": "mean",
            "source": "system",
            "description": "device busy fraction"
        }
    ]"#;

    #[test]
    fn descriptor_file_parses() {
        let ds = load_descriptors(DESCRIPTOR_FILE).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0].direction, Direction::HigherIsBetter);
    }

    #[test]
    fn duplicate_descriptor_name_rejected() {
        let text = format!(
            "[{},{}]",
            DESCRIPTOR_FILE.trim_start_matches('[').trim_end_matches(']'),
            DESCRIPTOR_FILE.trim_start_matches('[').trim_end_matches(']')
        );
        assert!(matches!(load_descriptors(&text), Err(MetricsError::DuplicateName(_))));
    }

    #[test]
    fn missing_required_field_is_parse_error() {
        let text = r#"[{"name": "x", "unit": "ms"}]"#;
        assert!(matches!(load_descriptors(text), Err(MetricsError::ParseError { .. })));
    }

    #[test]
    fn unknown_key_rejected() {
        let text = r#"[{
            "name": "x", "unit": "ms", "direction": "neutral",
            "default_aggregation": "mean", "source": "system",
            "description": "", "bogus": 1
        }]"#;
        assert!(matches!(load_descriptors(text), Err(MetricsError::ParseError { .. })));
    }
}
