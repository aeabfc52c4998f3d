//! Experiment configuration: pipeline topology, workload shape, policies,
//! and load-balancing choice. Loaded from JSON; validated with field paths.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use agentserve_core::control::Intent;
use agentserve_core::kernel::SizeDist;
use agentserve_core::model::Granularity;
use agentserve_core::runtime::{AdmissionPolicy, CostModel, OutputPolicy, ServingParams};
use agentserve_core::sim::{LoadBalancing, RoleLinkSpec, RoleSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleConfig {
    pub name: String,
    #[serde(default = "one")]
    pub replicas: u32,
    #[serde(default)]
    pub cost: Option<CostModel>,
    #[serde(default)]
    pub max_num_seqs: Option<u32>,
    #[serde(default)]
    pub admission: Option<String>,
    pub output_tokens: OutputPolicy,
    #[serde(default = "one")]
    pub function_count: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfigEntry {
    pub from: String,
    pub to: String,
    /// Initial communication mode, e.g. "token_stream(16)".
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default)]
    pub pacing_gap_ms: f64,
    #[serde(default = "default_delay")]
    pub network_delay_ms: f64,
}

fn default_mode() -> String {
    "token_stream(16)".into()
}

fn default_delay() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub roles: Vec<RoleConfig>,
    pub links: Vec<LinkConfigEntry>,
}

/// Load points either as explicit request rates or as fractions of the
/// analytic capacity under a reference mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LoadPoints {
    Factors {
        factors: Vec<f64>,
        #[serde(default = "default_capacity_mode")]
        of_mode: String,
    },
    Rates { rates_per_s: Vec<f64> },
}

fn default_capacity_mode() -> String {
    "batch_all".into()
}

/// Session structure for cache-affinity experiments: sessions arrive as a
/// Poisson process, each carrying `requests_per_session` requests and a
/// pre-existing context planted on a home instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub requests_per_session: u32,
    pub initial_context_tokens: u64,
    pub intra_gap_ms: f64,
    pub home_role: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    pub duration_ms: f64,
    #[serde(default = "default_interactive_fraction")]
    pub interactive_fraction: f64,
    pub prompt_tokens: SizeDist,
    pub output_tokens: SizeDist,
    pub load_points: LoadPoints,
    #[serde(default)]
    pub slo_interactive_ms: Option<f64>,
    #[serde(default)]
    pub sessions: Option<SessionConfig>,
}

fn default_interactive_fraction() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyConfig {
    /// All links pinned to one granularity for the whole run.
    Static { mode: String },
    /// Intent compiled to rules and installed on the controller.
    Adaptive { intent: Intent },
}

impl PolicyConfig {
    pub fn label(&self) -> String {
        match self {
            PolicyConfig::Static { mode } => format!("static:{mode}"),
            PolicyConfig::Adaptive { intent } => match intent.objective {
                Some(agentserve_core::control::Objective::MaxThroughput) => {
                    "adaptive:max_throughput".into()
                }
                Some(agentserve_core::control::Objective::MinP90Latency) => {
                    "adaptive:min_p90_latency".into()
                }
                None => "adaptive:rules".into(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadBalancingConfig {
    None,
    PostHocTransfer,
    Hints,
}

impl From<LoadBalancingConfig> for LoadBalancing {
    fn from(c: LoadBalancingConfig) -> LoadBalancing {
        match c {
            LoadBalancingConfig::None => LoadBalancing::None,
            LoadBalancingConfig::PostHocTransfer => LoadBalancing::PostHocTransfer,
            LoadBalancingConfig::Hints => LoadBalancing::Hints,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub pipeline: PipelineConfig,
    pub workload: WorkloadConfig,
    pub policies: Vec<PolicyConfig>,
    #[serde(default = "default_lb")]
    pub load_balancing: LoadBalancingConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_drain")]
    pub drain_ms: f64,
}

fn default_lb() -> LoadBalancingConfig {
    LoadBalancingConfig::None
}

fn default_seed() -> u64 {
    1
}

fn default_drain() -> f64 {
    30_000.0
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| ConfigError { path: "<root>".into(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Role names in pipeline order (topological order of the link DAG).
    pub fn hop_order(&self) -> Vec<String> {
        topo_order(&self.pipeline).expect("validated config has a DAG")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.pipeline.roles.is_empty() {
            return Err(err("pipeline.roles", "at least one role is required"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, role) in self.pipeline.roles.iter().enumerate() {
            if !seen.insert(role.name.clone()) {
                return Err(err(&format!("pipeline.roles[{i}].name"), "duplicate role name"));
            }
            if role.replicas < 1 {
                return Err(err(&format!("pipeline.roles[{i}].replicas"), "must be >= 1"));
            }
            if role.function_count < 1 {
                return Err(err(&format!("pipeline.roles[{i}].function_count"), "must be >= 1"));
            }
            if let Some(cost) = &role.cost {
                cost.validate()
                    .map_err(|e| err(&format!("pipeline.roles[{i}].cost"), &e.to_string()))?;
            }
            if let Some(m) = role.max_num_seqs {
                if !(1..=64).contains(&m) {
                    return Err(err(&format!("pipeline.roles[{i}].max_num_seqs"), "must be in 1..=64"));
                }
            }
            if let Some(a) = &role.admission {
                AdmissionPolicy::parse(a)
                    .map_err(|e| err(&format!("pipeline.roles[{i}].admission"), &e.to_string()))?;
            }
        }
        for (i, link) in self.pipeline.links.iter().enumerate() {
            for (field, role) in [("from", &link.from), ("to", &link.to)] {
                if !seen.contains(role) {
                    return Err(err(
                        &format!("pipeline.links[{i}].{field}"),
                        &format!("unknown role {role}"),
                    ));
                }
            }
            Granularity::parse(&link.mode)
                .map_err(|e| err(&format!("pipeline.links[{i}].mode"), &e.to_string()))?;
            if link.pacing_gap_ms < 0.0 || link.network_delay_ms < 0.0 {
                return Err(err(&format!("pipeline.links[{i}]"), "gaps and delays must be >= 0"));
            }
        }
        topo_order(&self.pipeline).map_err(|m| err("pipeline.links", &m))?;

        if self.workload.duration_ms.is_nan() || self.workload.duration_ms <= 0.0 {
            return Err(err("workload.duration_ms", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.workload.interactive_fraction) {
            return Err(err("workload.interactive_fraction", "must be in [0,1]"));
        }
        self.workload
            .prompt_tokens
            .validate()
            .map_err(|e| err("workload.prompt_tokens", &e.to_string()))?;
        self.workload
            .output_tokens
            .validate()
            .map_err(|e| err("workload.output_tokens", &e.to_string()))?;
        match &self.workload.load_points {
            LoadPoints::Factors { factors, of_mode } => {
                if factors.is_empty() || factors.iter().any(|f| *f <= 0.0) {
                    return Err(err("workload.load_points.factors", "must be positive"));
                }
                Granularity::parse(of_mode)
                    .map_err(|e| err("workload.load_points.of_mode", &e.to_string()))?;
            }
            LoadPoints::Rates { rates_per_s } => {
                if rates_per_s.is_empty() || rates_per_s.iter().any(|r| *r <= 0.0) {
                    return Err(err("workload.load_points.rates_per_s", "must be positive"));
                }
            }
        }
        if let Some(sessions) = &self.workload.sessions {
            if sessions.requests_per_session < 1 {
                return Err(err("workload.sessions.requests_per_session", "must be >= 1"));
            }
            if sessions.intra_gap_ms.is_nan() || sessions.intra_gap_ms < 0.0 {
                return Err(err("workload.sessions.intra_gap_ms", "must be >= 0"));
            }
            if !seen.contains(&sessions.home_role) {
                return Err(err("workload.sessions.home_role", "unknown role"));
            }
        }
        if self.policies.is_empty() {
            return Err(err("policies", "at least one policy is required"));
        }
        for (i, policy) in self.policies.iter().enumerate() {
            if let PolicyConfig::Static { mode } = policy {
                Granularity::parse(mode)
                    .map_err(|e| err(&format!("policies[{i}].mode"), &e.to_string()))?;
            }
        }
        if self.drain_ms.is_nan() || self.drain_ms < 0.0 {
            return Err(err("drain_ms", "must be >= 0"));
        }
        Ok(())
    }

    pub fn role(&self, name: &str) -> Option<&RoleConfig> {
        self.pipeline.roles.iter().find(|r| r.name == name)
    }

    /// Core role specs in declaration order.
    pub fn role_specs(&self) -> Vec<RoleSpec> {
        self.pipeline
            .roles
            .iter()
            .map(|r| {
                let mut serving = ServingParams::default();
                if let Some(m) = r.max_num_seqs {
                    serving.max_num_seqs = m;
                }
                if let Some(a) = &r.admission {
                    serving.admission = AdmissionPolicy::parse(a).expect("validated");
                }
                RoleSpec {
                    name: r.name.clone(),
                    replicas: r.replicas,
                    cost: r.cost.unwrap_or_default(),
                    serving,
                    output: r.output_tokens,
                    function_count: r.function_count,
                }
            })
            .collect()
    }

    /// Core link specs, with every link's mode forced to `mode_override`
    /// when given (static policies pin all links).
    pub fn link_specs(&self, mode_override: Option<Granularity>) -> Vec<RoleLinkSpec> {
        self.pipeline
            .links
            .iter()
            .map(|l| RoleLinkSpec {
                from: l.from.clone(),
                to: l.to.clone(),
                mode: mode_override
                    .unwrap_or_else(|| Granularity::parse(&l.mode).expect("validated")),
                pacing_gap_ms: l.pacing_gap_ms,
                network_delay_ms: l.network_delay_ms,
            })
            .collect()
    }

    /// The declared default experiment: a developer agent feeding a tester.
    /// Developer outputs 128 tokens in 4 functions; the tester answers with
    /// 64 tokens per invocation.
    pub fn default_two_agent() -> ExperimentConfig {
        ExperimentConfig {
            pipeline: PipelineConfig {
                roles: vec![
                    RoleConfig {
                        name: "developer".into(),
                        replicas: 1,
                        cost: None,
                        max_num_seqs: None,
                        admission: None,
                        output_tokens: OutputPolicy::FromRequest,
                        function_count: 4,
                    },
                    RoleConfig {
                        name: "tester".into(),
                        replicas: 1,
                        cost: None,
                        max_num_seqs: None,
                        admission: None,
                        output_tokens: OutputPolicy::Fixed { tokens: 64 },
                        function_count: 1,
                    },
                ],
                links: vec![LinkConfigEntry {
                    from: "developer".into(),
                    to: "tester".into(),
                    mode: "per_function".into(),
                    pacing_gap_ms: 0.0,
                    network_delay_ms: 1.0,
                }],
            },
            workload: WorkloadConfig {
                duration_ms: 240_000.0,
                interactive_fraction: 0.5,
                prompt_tokens: SizeDist::Uniform { lo: 64, hi: 256 },
                output_tokens: SizeDist::Fixed { n: 128 },
                load_points: LoadPoints::Factors {
                    factors: vec![0.2, 0.4, 0.6, 0.8, 0.9, 1.0],
                    of_mode: "batch_all".into(),
                },
                slo_interactive_ms: Some(8_000.0),
                sessions: None,
            },
            policies: vec![
                PolicyConfig::Static { mode: "batch_all".into() },
                PolicyConfig::Static { mode: "per_function".into() },
                PolicyConfig::Static { mode: "token_stream(16)".into() },
                PolicyConfig::Adaptive {
                    intent: Intent {
                        objective: Some(agentserve_core::control::Objective::MaxThroughput),
                        ..Intent::default()
                    },
                },
            ],
            load_balancing: LoadBalancingConfig::None,
            seed: 1,
            drain_ms: 30_000.0,
        }
    }

    /// Cache-affinity experiment: one developer, two testers joined by a
    /// slow link, and tasks whose large working context already lives on one
    /// tester. Compared across load-balancing strategies at one load point.
    pub fn kv_balance(load_balancing: LoadBalancingConfig) -> ExperimentConfig {
        ExperimentConfig {
            pipeline: PipelineConfig {
                roles: vec![
                    RoleConfig {
                        name: "developer".into(),
                        replicas: 1,
                        cost: None,
                        max_num_seqs: None,
                        admission: None,
                        output_tokens: OutputPolicy::FromRequest,
                        function_count: 6,
                    },
                    RoleConfig {
                        name: "tester".into(),
                        replicas: 2,
                        cost: None,
                        max_num_seqs: None,
                        admission: None,
                        output_tokens: OutputPolicy::Fixed { tokens: 64 },
                        function_count: 1,
                    },
                ],
                links: vec![LinkConfigEntry {
                    from: "developer".into(),
                    to: "tester".into(),
                    mode: "per_function".into(),
                    pacing_gap_ms: 0.0,
                    // Cross-zone tester pool: state movement is worth
                    // planning ahead for exactly when links are slow.
                    network_delay_ms: 3_000.0,
                }],
            },
            workload: WorkloadConfig {
                duration_ms: 600_000.0,
                interactive_fraction: 0.5,
                prompt_tokens: SizeDist::Uniform { lo: 64, hi: 256 },
                output_tokens: SizeDist::Fixed { n: 192 },
                load_points: LoadPoints::Factors {
                    factors: vec![0.8],
                    of_mode: "per_function".into(),
                },
                slo_interactive_ms: Some(8_000.0),
                sessions: Some(SessionConfig {
                    requests_per_session: 1,
                    initial_context_tokens: 160_000,
                    intra_gap_ms: 1_000.0,
                    home_role: "tester".into(),
                }),
            },
            policies: vec![PolicyConfig::Static { mode: "per_function".into() }],
            load_balancing,
            seed: 1,
            drain_ms: 30_000.0,
        }
    }
}

fn topo_order(pipeline: &PipelineConfig) -> Result<Vec<String>, String> {
    let mut indegree: BTreeMap<&str, usize> =
        pipeline.roles.iter().map(|r| (r.name.as_str(), 0)).collect();
    let mut edges: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for link in &pipeline.links {
        edges.entry(link.from.as_str()).or_default().push(link.to.as_str());
        *indegree.get_mut(link.to.as_str()).ok_or("unknown role in link")? += 1;
    }
    let mut ready: Vec<&str> = pipeline
        .roles
        .iter()
        .map(|r| r.name.as_str())
        .filter(|n| indegree[n] == 0)
        .collect();
    let mut order = Vec::new();
    while let Some(node) = ready.pop() {
        order.push(node.to_string());
        for next in edges.get(node).cloned().unwrap_or_default() {
            let d = indegree.get_mut(next).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.push(next);
            }
        }
    }
    if order.len() != pipeline.roles.len() {
        return Err("topology must be a DAG over roles".into());
    }
    Ok(order)
}

fn err(path: &str, message: &str) -> ConfigError {
    ConfigError { path: path.to_string(), message: message.to_string() }
}

#[derive(Debug, Error, PartialEq)]
#[error("config error at {path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = ExperimentConfig::default_two_agent();
        cfg.validate().unwrap();
        let json = cfg.to_json();
        let parsed = ExperimentConfig::from_json(&json).unwrap();
        assert_eq!(parsed.to_json(), json);
        assert_eq!(cfg.hop_order(), vec!["developer".to_string(), "tester".to_string()]);
    }

    #[test]
    fn kv_config_valid() {
        for lb in [
            LoadBalancingConfig::None,
            LoadBalancingConfig::PostHocTransfer,
            LoadBalancingConfig::Hints,
        ] {
            ExperimentConfig::kv_balance(lb).validate().unwrap();
        }
    }

    #[test]
    fn shipped_configs_match_builders() {
        let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../..");
        let default = std::fs::read_to_string(format!("{root}/configs/default.json")).unwrap();
        assert_eq!(default.trim_end(), ExperimentConfig::default_two_agent().to_json());
        let kv = std::fs::read_to_string(format!("{root}/configs/kv_balance.json")).unwrap();
        assert_eq!(
            kv.trim_end(),
            ExperimentConfig::kv_balance(LoadBalancingConfig::Hints).to_json()
        );
    }

    #[test]
    fn link_to_missing_role_rejected() {
        let mut cfg = ExperimentConfig::default_two_agent();
        cfg.pipeline.links[0].to = "reviewer".into();
        let e = cfg.validate().unwrap_err();
        assert!(e.path.contains("links[0].to"), "{e}");
    }

    #[test]
    fn cycle_rejected() {
        let mut cfg = ExperimentConfig::default_two_agent();
        cfg.pipeline.links.push(LinkConfigEntry {
            from: "tester".into(),
            to: "developer".into(),
            mode: "batch_all".into(),
            pacing_gap_ms: 0.0,
            network_delay_ms: 1.0,
        });
        let e = cfg.validate().unwrap_err();
        assert!(e.message.contains("DAG"), "{e}");
    }

    #[test]
    fn bad_mode_rejected() {
        let mut cfg = ExperimentConfig::default_two_agent();
        cfg.policies[0] = PolicyConfig::Static { mode: "token_stream(0)".into() };
        assert!(cfg.validate().is_err());
    }
}
