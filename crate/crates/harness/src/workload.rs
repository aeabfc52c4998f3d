//! Request-list construction for one load point: open-loop Poisson arrivals,
//! or session-structured arrivals for the cache-affinity experiments.

use rand::Rng;

use agentserve_core::kernel::{gen_arrivals, RngStreams, SizeDist, WorkloadSpec};
use agentserve_core::model::{Priority, Request, RequestId, SessionId, SimTime};
use agentserve_core::sim::PlantedKv;

use crate::config::ExperimentConfig;

pub struct BuiltWorkload {
    pub requests: Vec<Request>,
    pub planted: Vec<PlantedKv>,
}

pub fn build_workload(cfg: &ExperimentConfig, rate_per_s: f64) -> BuiltWorkload {
    let hops = cfg.hop_order();
    match &cfg.workload.sessions {
        None => build_open_loop(cfg, rate_per_s, &hops),
        Some(_) => build_sessions(cfg, rate_per_s, &hops),
    }
}

fn finalize(cfg: &ExperimentConfig, mut request: Request, hops: &[String]) -> Request {
    request.hops = hops.to_vec();
    if request.priority.is_interactive() {
        if let Some(slo) = cfg.workload.slo_interactive_ms {
            request.slo_deadline = Some(request.arrival.add_ms(slo));
        }
    }
    request
}

fn build_open_loop(cfg: &ExperimentConfig, rate_per_s: f64, hops: &[String]) -> BuiltWorkload {
    let spec = WorkloadSpec {
        arrival_rate_per_s: rate_per_s,
        duration_ms: cfg.workload.duration_ms,
        interactive_fraction: cfg.workload.interactive_fraction,
        prompt_tokens: cfg.workload.prompt_tokens,
        output_tokens: cfg.workload.output_tokens,
        seed: cfg.seed,
    };
    let requests = gen_arrivals(&spec)
        .expect("validated workload")
        .into_iter()
        .map(|r| finalize(cfg, r, hops))
        .collect();
    BuiltWorkload { requests, planted: Vec::new() }
}

/// Sessions arrive as a Poisson process at `rate / requests_per_session`;
/// within a session, requests are spaced by exponential gaps. Each session's
/// context is planted on a home instance, alternating across the home role's
/// replicas.
fn build_sessions(cfg: &ExperimentConfig, rate_per_s: f64, hops: &[String]) -> BuiltWorkload {
    let sessions = cfg.workload.sessions.as_ref().expect("session config present");
    let streams = RngStreams::new(cfg.seed);
    let mut starts_rng = streams.stream("sessions");
    let mut gaps_rng = streams.stream("session_gaps");
    let mut sizes_rng = streams.stream("sizes");
    let mut prio_rng = streams.stream("priorities");

    let replicas = cfg
        .role(&sessions.home_role)
        .map(|r| r.replicas)
        .unwrap_or(1)
        .max(1);
    let session_rate = rate_per_s / sessions.requests_per_session as f64;
    let mean_start_gap = 1000.0 / session_rate;

    let mut draw_size = |dist: &SizeDist| -> u32 {
        match dist {
            SizeDist::Fixed { n } => *n,
            SizeDist::Uniform { lo, hi } => sizes_rng.random_range(*lo..=*hi),
        }
    };

    let mut raw: Vec<(f64, SessionId, u32, u32, Priority)> = Vec::new();
    let mut planted = Vec::new();
    let mut session_start = 0.0f64;
    let mut session_id = 0u64;
    loop {
        let u: f64 = starts_rng.random();
        session_start += -mean_start_gap * (1.0 - u).ln();
        if session_start > cfg.workload.duration_ms {
            break;
        }
        planted.push(PlantedKv {
            session: SessionId(session_id),
            role: sessions.home_role.clone(),
            instance_index: (session_id % replicas as u64) as u32,
            context_tokens: sessions.initial_context_tokens,
        });
        let mut t = session_start;
        for k in 0..sessions.requests_per_session {
            if k > 0 {
                let u: f64 = gaps_rng.random();
                t += -sessions.intra_gap_ms * (1.0 - u).ln();
            }
            if t > cfg.workload.duration_ms {
                break;
            }
            let prompt = draw_size(&cfg.workload.prompt_tokens);
            let output = draw_size(&cfg.workload.output_tokens);
            let interactive = prio_rng.random_bool(cfg.workload.interactive_fraction);
            let priority =
                if interactive { Priority::interactive() } else { Priority::background() };
            raw.push((t, SessionId(session_id), prompt, output, priority));
        }
        session_id += 1;
    }

    raw.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let requests = raw
        .into_iter()
        .enumerate()
        .map(|(i, (t, session, prompt, output, priority))| {
            finalize(
                cfg,
                Request {
                    id: RequestId(i as u64),
                    arrival: SimTime::from_ms(t),
                    priority,
                    prompt_tokens: prompt,
                    output_tokens: output,
                    slo_deadline: None,
                    session,
                    hops: Vec::new(),
                },
                hops,
            )
        })
        .collect();
    BuiltWorkload { requests, planted }
}
