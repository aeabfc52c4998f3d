//! Experiment execution: wires a pipeline from config, runs one simulation
//! per (load point, policy), and derives report rows plus an analytic
//! capacity bound used to place load points.

use agentserve_core::kernel::EventKind;
use agentserve_core::model::{Granularity, Request, RequestId, SessionId, SimTime};
use agentserve_core::model::{Priority, PriorityClass};
use agentserve_core::sim::{LoadBalancing, Sim, SimOutcome, SimSpec};

use crate::config::{ExperimentConfig, LoadPoints, PolicyConfig};
use crate::report::{summarize, Report, ReportRow};
use crate::workload::build_workload;

/// Analytic throughput upper bound for one mode: the reciprocal of the
/// per-request busy time at the bottleneck node, using mean request sizes.
/// Covers receive overheads, prefill passes, and batched decode occupancy at
/// the configured maximum batch size; ingress requests count as one envelope
/// at the entry node. Cross-request session state is not modeled here.
pub fn compute_capacity(cfg: &ExperimentConfig, mode: Granularity) -> f64 {
    let order = cfg.hop_order();
    let mean_prompt = cfg.workload.prompt_tokens.mean();
    let mean_output = cfg.workload.output_tokens.mean();
    let resolved_output = |role: &crate::config::RoleConfig| -> f64 {
        match role.output_tokens {
            agentserve_core::runtime::OutputPolicy::FromRequest => mean_output,
            agentserve_core::runtime::OutputPolicy::Fixed { tokens } => tokens as f64,
        }
    };

    let mut worst_busy_per_replica = 0.0f64;
    for (hop, name) in order.iter().enumerate() {
        let role = cfg.role(name).expect("validated role");
        let cost = role.cost.unwrap_or_default();
        let max_seqs = role.max_num_seqs.unwrap_or(8) as f64;
        let decode_share = cost.step_ms(max_seqs.round() as usize) / max_seqs;
        let output = resolved_output(role);

        let busy = if hop == 0 {
            cost.envelope_overhead_ms
                + cost.prefill_ms(mean_prompt.round() as u64, true)
                + output * decode_share
        } else {
            let upstream = cfg.role(&order[hop - 1]).expect("validated role");
            let upstream_out = resolved_output(upstream);
            let (envelopes, base_passes) = match mode {
                Granularity::BatchAll => (1.0, 1.0),
                Granularity::PerFunction => {
                    let n = upstream.function_count.max(1) as f64;
                    (n, n)
                }
                Granularity::TokenStream { chunk_tokens } => {
                    ((upstream_out / chunk_tokens as f64).ceil(), 1.0)
                }
            };
            // One emitting invocation plus refresh passes for the remaining
            // envelopes.
            let refresh = agentserve_core::sim::refresh_decode_tokens(output.round() as u32) as f64;
            let decode_tokens = output + (envelopes - 1.0).max(0.0) * refresh;
            cost.envelope_overhead_ms * envelopes
                + cost.prefill_base_ms * base_passes
                + cost.prefill_per_token_ms * upstream_out
                + decode_tokens * decode_share
        };
        worst_busy_per_replica = worst_busy_per_replica.max(busy / role.replicas.max(1) as f64);
    }
    1000.0 / worst_busy_per_replica
}

/// The (factor, rate) pairs this config sweeps.
pub fn load_points(cfg: &ExperimentConfig) -> Vec<(Option<f64>, f64)> {
    match &cfg.workload.load_points {
        LoadPoints::Factors { factors, of_mode } => {
            let mode = Granularity::parse(of_mode).expect("validated");
            let capacity = compute_capacity(cfg, mode);
            factors.iter().map(|f| (Some(*f), f * capacity)).collect()
        }
        LoadPoints::Rates { rates_per_s } => rates_per_s.iter().map(|r| (None, *r)).collect(),
    }
}

pub fn build_sim(cfg: &ExperimentConfig, policy: &PolicyConfig, record_trace: bool) -> Sim {
    let roles = cfg.role_specs();
    let (links, adaptive) = match policy {
        PolicyConfig::Static { mode } => {
            (cfg.link_specs(Some(Granularity::parse(mode).expect("validated"))), None)
        }
        PolicyConfig::Adaptive { intent } => (cfg.link_specs(None), Some(intent.clone())),
    };
    let mut spec = SimSpec::new(roles, links);
    spec.load_balancing = LoadBalancing::from(cfg.load_balancing);
    spec.adaptive = adaptive;
    spec.record_trace = record_trace;
    Sim::new(spec).expect("validated config builds")
}

pub struct PointRun {
    pub row: ReportRow,
    pub outcome: SimOutcome,
}

pub fn run_point(
    cfg: &ExperimentConfig,
    policy: &PolicyConfig,
    load_factor: Option<f64>,
    rate_per_s: f64,
    record_trace: bool,
) -> PointRun {
    let built = build_workload(cfg, rate_per_s);
    let mut sim = build_sim(cfg, policy, record_trace);
    for planted in built.planted {
        sim.plant_kv(planted);
    }
    sim.schedule_requests(built.requests).expect("arrivals are in the future");
    let outcome = sim.run(cfg.workload.duration_ms + cfg.drain_ms);
    let row = summarize(load_factor, rate_per_s, &policy.label(), cfg.workload.duration_ms, &outcome);
    PointRun { row, outcome }
}

/// Runs every (load point, policy) combination and collects the report.
/// Requests not completed by duration + drain count as incomplete; they are
/// excluded from latency statistics but included in SLO violations.
pub fn run_experiment(cfg: &ExperimentConfig) -> Report {
    let mut rows = Vec::new();
    for (factor, rate) in load_points(cfg) {
        for policy in &cfg.policies {
            rows.push(run_point(cfg, policy, factor, rate, false).row);
        }
    }
    Report { rows }
}

/// Side-by-side sweep over all configured policies, plus the winner per load
/// point (highest goodput, ties by p90 latency).
pub fn compare_modes(cfg: &ExperimentConfig) -> Result<(Report, Vec<(f64, String)>), crate::config::ConfigError> {
    if cfg.policies.len() < 2 {
        return Err(crate::config::ConfigError {
            path: "policies".into(),
            message: "compare needs at least two policies".into(),
        });
    }
    if load_points(cfg).len() < 2 {
        return Err(crate::config::ConfigError {
            path: "workload.load_points".into(),
            message: "compare needs at least two load points".into(),
        });
    }
    let report = run_experiment(cfg);
    let winners = report.winners();
    Ok((report, winners))
}

/// Hand-trace regression scenario: one request (prompt 100, output 32) into
/// an idle developer -> tester pipeline; returns the arrival time of the
/// first envelope at the tester.
pub fn oracle_first_arrival_ms(mode: Granularity) -> f64 {
    let mut cfg = ExperimentConfig::default_two_agent();
    cfg.pipeline.links[0].mode = mode.to_string();
    cfg.policies = vec![PolicyConfig::Static { mode: mode.to_string() }];
    let mut sim = build_sim(&cfg, &cfg.policies[0], true);
    let request = Request {
        id: RequestId(0),
        arrival: SimTime::ZERO,
        priority: Priority::new(PriorityClass::Interactive, 5),
        prompt_tokens: 100,
        output_tokens: 32,
        slo_deadline: None,
        session: SessionId(0),
        hops: cfg.hop_order(),
    };
    sim.schedule_requests(vec![request]).unwrap();
    let outcome = sim.run(60_000.0);
    outcome
        .trace
        .rows
        .iter()
        .find(|r| r.kind == EventKind::EnvelopeArrival)
        .map(|r| r.time_ms)
        .expect("envelope reaches the tester")
}
