//! Per-load-point, per-policy result rows with CSV export that re-parses to
//! identical values.

use std::collections::BTreeMap;

use agentserve_core::metrics::nearest_rank;
use agentserve_core::sim::SimOutcome;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub load_factor: Option<f64>,
    pub rate_per_s: f64,
    pub policy: String,
    pub offered: u64,
    pub completed: u64,
    pub incomplete: u64,
    pub goodput_per_s: f64,
    pub token_throughput_per_s: f64,
    pub mean_e2e_ms: Option<f64>,
    pub p90_e2e_ms: Option<f64>,
    pub mean_e2e_interactive_ms: Option<f64>,
    pub p90_e2e_interactive_ms: Option<f64>,
    pub mean_ttft_final_ms: Option<f64>,
    pub slo_violation_fraction: f64,
    /// Per-link mode switch counts, "link:count" joined with ';'.
    pub mode_switches: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

pub fn summarize(
    load_factor: Option<f64>,
    rate_per_s: f64,
    policy: &str,
    duration_ms: f64,
    outcome: &SimOutcome,
) -> ReportRow {
    let duration_s = duration_ms / 1000.0;
    let offered = outcome.requests.len() as u64;
    let completed: Vec<&agentserve_core::sim::RequestOutcome> =
        outcome.requests.iter().filter(|r| r.completed_ms.is_some()).collect();

    let e2e: Vec<f64> =
        completed.iter().map(|r| r.completed_ms.unwrap() - r.arrival_ms).collect();
    let e2e_interactive: Vec<f64> = completed
        .iter()
        .filter(|r| r.interactive)
        .map(|r| r.completed_ms.unwrap() - r.arrival_ms)
        .collect();
    let ttft: Vec<f64> = completed
        .iter()
        .filter_map(|r| r.first_token_final_ms.map(|t| t - r.arrival_ms))
        .collect();

    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let p90 = |v: &[f64]| if v.is_empty() { None } else { Some(nearest_rank(v, 0.90)) };

    let slo_total = outcome.requests.iter().filter(|r| r.slo_deadline_ms.is_some()).count();
    let slo_violated = outcome
        .requests
        .iter()
        .filter(|r| {
            r.slo_deadline_ms
                .map(|d| r.completed_ms.map(|c| c > d).unwrap_or(true))
                .unwrap_or(false)
        })
        .count();
    let slo_fraction = if slo_total == 0 { 0.0 } else { slo_violated as f64 / slo_total as f64 };

    let mut per_link: BTreeMap<&str, u64> = BTreeMap::new();
    for (link, _) in &outcome.mode_changes {
        *per_link.entry(link.as_str()).or_default() += 1;
    }
    let mode_switches = per_link
        .iter()
        .map(|(k, v)| format!("{k}:{v}"))
        .collect::<Vec<_>>()
        .join(";");

    ReportRow {
        load_factor,
        rate_per_s,
        policy: policy.to_string(),
        offered,
        completed: completed.len() as u64,
        incomplete: offered - completed.len() as u64,
        goodput_per_s: completed.len() as f64 / duration_s,
        token_throughput_per_s: outcome.emitted_tokens as f64 / duration_s,
        mean_e2e_ms: mean(&e2e),
        p90_e2e_ms: p90(&e2e),
        mean_e2e_interactive_ms: mean(&e2e_interactive),
        p90_e2e_interactive_ms: p90(&e2e_interactive),
        mean_ttft_final_ms: mean(&ttft),
        slo_violation_fraction: slo_fraction,
        mode_switches,
    }
}

const HEADER: &str = "load_factor,rate_per_s,policy,offered,completed,incomplete,goodput_per_s,token_throughput_per_s,mean_e2e_ms,p90_e2e_ms,mean_e2e_interactive_ms,p90_e2e_interactive_ms,mean_ttft_final_ms,slo_violation_fraction,mode_switches";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn parse_opt(text: &str) -> Result<Option<f64>, ReportParseError> {
    if text.is_empty() {
        Ok(None)
    } else {
        text.parse().map(Some).map_err(|_| ReportParseError(format!("bad float {text}")))
    }
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                opt(r.load_factor),
                r.rate_per_s,
                r.policy,
                r.offered,
                r.completed,
                r.incomplete,
                r.goodput_per_s,
                r.token_throughput_per_s,
                opt(r.mean_e2e_ms),
                opt(r.p90_e2e_ms),
                opt(r.mean_e2e_interactive_ms),
                opt(r.p90_e2e_interactive_ms),
                opt(r.mean_ttft_final_ms),
                r.slo_violation_fraction,
                r.mode_switches,
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Report, ReportParseError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| ReportParseError("empty report".into()))?;
        if header != HEADER {
            return Err(ReportParseError("unexpected report header".into()));
        }
        let mut rows = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.splitn(15, ',').collect();
            if f.len() != 15 {
                return Err(ReportParseError(format!("expected 15 fields, got {}", f.len())));
            }
            let num = |s: &str| -> Result<f64, ReportParseError> {
                s.parse().map_err(|_| ReportParseError(format!("bad float {s}")))
            };
            let int = |s: &str| -> Result<u64, ReportParseError> {
                s.parse().map_err(|_| ReportParseError(format!("bad int {s}")))
            };
            rows.push(ReportRow {
                load_factor: parse_opt(f[0])?,
                rate_per_s: num(f[1])?,
                policy: f[2].to_string(),
                offered: int(f[3])?,
                completed: int(f[4])?,
                incomplete: int(f[5])?,
                goodput_per_s: num(f[6])?,
                token_throughput_per_s: num(f[7])?,
                mean_e2e_ms: parse_opt(f[8])?,
                p90_e2e_ms: parse_opt(f[9])?,
                mean_e2e_interactive_ms: parse_opt(f[10])?,
                p90_e2e_interactive_ms: parse_opt(f[11])?,
                mean_ttft_final_ms: parse_opt(f[12])?,
                slo_violation_fraction: num(f[13])?,
                mode_switches: f[14].to_string(),
            });
        }
        Ok(Report { rows })
    }

    /// Winning policy per load point: highest goodput, ties broken by lower
    /// p90 end-to-end latency.
    pub fn winners(&self) -> Vec<(f64, String)> {
        let mut by_rate: BTreeMap<u64, Vec<&ReportRow>> = BTreeMap::new();
        for row in &self.rows {
            by_rate.entry(row.rate_per_s.to_bits()).or_default().push(row);
        }
        by_rate
            .values()
            .map(|rows| {
                let best = rows
                    .iter()
                    .max_by(|a, b| {
                        a.goodput_per_s.partial_cmp(&b.goodput_per_s).unwrap().then_with(|| {
                            let pa = a.p90_e2e_ms.unwrap_or(f64::INFINITY);
                            let pb = b.p90_e2e_ms.unwrap_or(f64::INFINITY);
                            pb.partial_cmp(&pa).unwrap()
                        })
                    })
                    .unwrap();
                (best.rate_per_s, best.policy.clone())
            })
            .collect()
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("report parse error: {0}")]
pub struct ReportParseError(pub String);

#[cfg(test)]
mod tests {
    use super::*;

    fn row(rate: f64, policy: &str, goodput: f64, p90: Option<f64>) -> ReportRow {
        ReportRow {
            load_factor: Some(0.5),
            rate_per_s: rate,
            policy: policy.into(),
            offered: 100,
            completed: 90,
            incomplete: 10,
            goodput_per_s: goodput,
            token_throughput_per_s: 1234.5678,
            mean_e2e_ms: Some(1500.25),
            p90_e2e_ms: p90,
            mean_e2e_interactive_ms: None,
            p90_e2e_interactive_ms: None,
            mean_ttft_final_ms: Some(270.125),
            slo_violation_fraction: 0.1,
            mode_switches: "developer/0->tester/0:3".into(),
        }
    }

    #[test]
    fn csv_round_trip_identical() {
        let report = Report {
            rows: vec![row(1.0, "static:batch_all", 0.987654321, Some(2000.5)), row(1.0, "static:token_stream(16)", 0.5, None)],
        };
        let csv = report.to_csv();
        let parsed = Report::from_csv(&csv).unwrap();
        assert_eq!(parsed, report);
        assert_eq!(parsed.to_csv(), csv);
    }

    #[test]
    fn winner_by_goodput_then_p90() {
        let report = Report {
            rows: vec![
                row(1.0, "a", 1.0, Some(3000.0)),
                row(1.0, "b", 1.0, Some(2000.0)),
                row(1.0, "c", 0.9, Some(100.0)),
            ],
        };
        assert_eq!(report.winners(), vec![(1.0, "b".to_string())]);
    }
}
