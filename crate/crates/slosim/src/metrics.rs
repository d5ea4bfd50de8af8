//! Goodput accounting and latency statistics over simulation results.
//!
//! Token-level goodput credits per-token SLO adherence: latency-sensitive
//! requests earn ω_o per output token landing on its TTFT/TBT timeline,
//! deadline-sensitive requests earn their full weighted token count only on
//! on-time completion, compound requests earn the sum over subrequests only
//! if the final stage makes the end-to-end deadline, and best-effort work
//! earns nothing. Request-level goodput counts requests with every condition
//! met. Percentiles use the nearest-rank method.

use crate::core::{SloClass, TimeMicros, Weights};
use crate::engine::{RequestResult, SimResult};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum MetricsError {
    #[error("no reports given")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GoodputLevel {
    #[default]
    Token,
    Request,
}

/// What to score. `weights` overrides every request's own weights when set
/// (useful for re-scoring a result under a different value model).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct GoodputSpec {
    pub level: GoodputLevel,
    pub weights: Option<Weights>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoodputReport {
    pub policy: String,
    pub seed: u64,
    pub level: GoodputLevel,
    pub total_goodput: f64,
    /// Per-class contributions; they sum to `total_goodput`.
    pub by_class: BTreeMap<String, f64>,
    pub requests_total: u64,
    pub requests_attained: u64,
    /// requests_attained / requests_total (0 when the trace is empty).
    pub attainment: f64,
    pub drops: u64,
    pub preemptions: u64,
    pub tokens_generated: u64,
    pub throughput_tok_s: f64,
    pub total_sim_time_s: f64,
    pub ttft_p50_s: Option<f64>,
    pub ttft_p95_s: Option<f64>,
    pub tbt_p50_s: Option<f64>,
    pub tbt_p95_s: Option<f64>,
    pub e2el_p50_s: Option<f64>,
    pub e2el_p95_s: Option<f64>,
}

fn weights_for(r: &RequestResult, spec: &GoodputSpec) -> Weights {
    spec.weights.unwrap_or(r.weights)
}

/// Token-level goodput earned by one request with its SLO constants scaled
/// by `lambda` (1.0 = as simulated).
fn request_token_goodput(r: &RequestResult, spec: &GoodputSpec, lambda: f64) -> f64 {
    let w = weights_for(r, spec);
    match r.slo.scaled(lambda) {
        SloClass::LatencySensitive { ttft_s, tbt_s } => {
            let mut earned = 0.0;
            for (i, t) in r.token_times.iter().enumerate() {
                let due = r.arrival
                    + TimeMicros::from_secs_f64(ttft_s + i as f64 * tbt_s);
                if *t <= due {
                    earned += w.wo;
                }
            }
            earned
        }
        SloClass::DeadlineSensitive { e2el_s } => {
            let due = r.arrival + TimeMicros::from_secs_f64(e2el_s);
            match r.completion {
                Some(done) if done <= due && !r.dropped => {
                    w.wi * f64::from(r.input_len) + w.wo * f64::from(r.output_len)
                }
                _ => 0.0,
            }
        }
        SloClass::Compound { e2el_s } => {
            let due = r.arrival + TimeMicros::from_secs_f64(e2el_s);
            match r.completion {
                Some(done) if done <= due && !r.dropped => r
                    .subresults
                    .iter()
                    .filter(|s| s.kind == "llm")
                    .map(|s| w.wi * f64::from(s.input_len) + w.wo * f64::from(s.generated))
                    .sum(),
                _ => 0.0,
            }
        }
        SloClass::BestEffort { .. } => 0.0,
    }
}

/// Does the request meet every SLO condition (request-level goodput)?
fn request_attained(r: &RequestResult, lambda: f64) -> bool {
    if r.dropped {
        return false;
    }
    match r.slo.scaled(lambda) {
        SloClass::LatencySensitive { ttft_s, tbt_s } => {
            if r.completion.is_none() || r.token_times.len() != r.output_len as usize {
                return false;
            }
            r.token_times.iter().enumerate().all(|(i, t)| {
                *t <= r.arrival + TimeMicros::from_secs_f64(ttft_s + i as f64 * tbt_s)
            })
        }
        SloClass::DeadlineSensitive { e2el_s } | SloClass::Compound { e2el_s } => r
            .completion
            .is_some_and(|done| done <= r.arrival + TimeMicros::from_secs_f64(e2el_s)),
        // No timing conditions: completing at all counts.
        SloClass::BestEffort { .. } => r.completion.is_some(),
    }
}

/// Total token-level goodput with SLOs relaxed (λ>1) or tightened (λ<1)
/// after the fact, on the fixed simulated timeline.
pub fn token_goodput_scaled(result: &SimResult, spec: &GoodputSpec, lambda: f64) -> f64 {
    result
        .requests
        .iter()
        .map(|r| request_token_goodput(r, spec, lambda))
        .sum()
}

pub fn token_goodput(result: &SimResult, spec: &GoodputSpec) -> f64 {
    token_goodput_scaled(result, spec, 1.0)
}

/// Count of requests meeting every SLO condition.
pub fn request_goodput(result: &SimResult) -> u64 {
    result
        .requests
        .iter()
        .filter(|r| request_attained(r, 1.0))
        .count() as u64
}

/// Nearest-rank percentile of an unsorted sample, in the sample's unit.
pub fn percentile(samples: &[f64], p: f64) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    assert!((0.0..=100.0).contains(&p));
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.max(1) - 1])
}

/// Latency samples harvested from a result: TTFTs, inter-token gaps, and
/// end-to-end latencies, each in seconds.
pub fn latency_samples(result: &SimResult) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut ttft = Vec::new();
    let mut tbt = Vec::new();
    let mut e2el = Vec::new();
    let mut gaps = |times: &[TimeMicros]| {
        for w in times.windows(2) {
            tbt.push((w[1] - w[0]).as_secs_f64());
        }
    };
    for r in &result.requests {
        if let Some(ft) = r.first_token {
            ttft.push((ft - r.arrival).as_secs_f64());
        }
        if let Some(done) = r.completion {
            e2el.push((done - r.arrival).as_secs_f64());
        }
        gaps(&r.token_times);
        for s in &r.subresults {
            gaps(&s.token_times);
        }
    }
    (ttft, tbt, e2el)
}

/// Assemble the full report for one simulation result.
pub fn build_report(result: &SimResult, spec: &GoodputSpec) -> GoodputReport {
    let mut by_class: BTreeMap<String, f64> = BTreeMap::new();
    let mut attained: u64 = 0;
    for r in &result.requests {
        let g = match spec.level {
            GoodputLevel::Token => request_token_goodput(r, spec, 1.0),
            GoodputLevel::Request => f64::from(u8::from(request_attained(r, 1.0))),
        };
        *by_class.entry(r.class.clone()).or_insert(0.0) += g;
        attained += u64::from(request_attained(r, 1.0));
    }
    let total_goodput: f64 = by_class.values().sum();
    let requests_total = result.requests.len() as u64;
    let drops = result.requests.iter().filter(|r| r.dropped).count() as u64;
    let preemptions: u64 = result.requests.iter().map(|r| u64::from(r.preemptions)).sum();
    let tokens_generated: u64 = result.requests.iter().map(|r| u64::from(r.generated)).sum();
    let sim_s = result.total_sim_time.as_secs_f64();
    let (ttft, tbt, e2el) = latency_samples(result);
    GoodputReport {
        policy: result.policy.clone(),
        seed: result.seed,
        level: spec.level,
        total_goodput,
        by_class,
        requests_total,
        requests_attained: attained,
        attainment: if requests_total == 0 {
            0.0
        } else {
            attained as f64 / requests_total as f64
        },
        drops,
        preemptions,
        tokens_generated,
        throughput_tok_s: if sim_s > 0.0 {
            tokens_generated as f64 / sim_s
        } else {
            0.0
        },
        total_sim_time_s: sim_s,
        ttft_p50_s: percentile(&ttft, 50.0),
        ttft_p95_s: percentile(&ttft, 95.0),
        tbt_p50_s: percentile(&tbt, 50.0),
        tbt_p95_s: percentile(&tbt, 95.0),
        e2el_p50_s: percentile(&e2el, 50.0),
        e2el_p95_s: percentile(&e2el, 95.0),
    }
}

/// CSV column names matching [`report_csv_row`].
pub const REPORT_CSV_HEADER: &str = "policy,seed,level,total_goodput,attainment,requests_total,\
requests_attained,drops,preemptions,tokens_generated,throughput_tok_s,total_sim_time_s,\
ttft_p50_s,ttft_p95_s,tbt_p50_s,tbt_p95_s,e2el_p50_s,e2el_p95_s";

pub fn report_csv_row(r: &GoodputReport) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    format!(
        "{},{},{:?},{:.6},{:.6},{},{},{},{},{},{:.6},{:.6},{},{},{},{},{},{}",
        r.policy,
        r.seed,
        r.level,
        r.total_goodput,
        r.attainment,
        r.requests_total,
        r.requests_attained,
        r.drops,
        r.preemptions,
        r.tokens_generated,
        r.throughput_tok_s,
        r.total_sim_time_s,
        opt(r.ttft_p50_s),
        opt(r.ttft_p95_s),
        opt(r.tbt_p50_s),
        opt(r.tbt_p95_s),
        opt(r.e2el_p50_s),
        opt(r.e2el_p95_s),
    )
}

/// Merge reports into a flat comparison CSV: one `policy,metric,value` row
/// per (policy, metric) pair, including per-class goodput rows and a
/// `goodput_ratio` row measured against the best total goodput among them.
pub fn comparison_csv(reports: &[GoodputReport]) -> Result<String, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::Empty);
    }
    let best = reports
        .iter()
        .map(|r| r.total_goodput)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = String::from("policy,metric,value\n");
    for r in reports {
        let mut row = |metric: &str, value: f64| {
            out.push_str(&format!("{},{metric},{value:.6}\n", r.policy));
        };
        row("total_goodput", r.total_goodput);
        let ratio = if best > 0.0 { r.total_goodput / best } else { 0.0 };
        row("goodput_ratio", ratio);
        row("attainment", r.attainment);
        row("requests_total", r.requests_total as f64);
        row("requests_attained", r.requests_attained as f64);
        row("drops", r.drops as f64);
        row("preemptions", r.preemptions as f64);
        row("tokens_generated", r.tokens_generated as f64);
        row("throughput_tok_s", r.throughput_tok_s);
        row("total_sim_time_s", r.total_sim_time_s);
        for (class, g) in &r.by_class {
            row(&format!("goodput[{class}]"), *g);
        }
        for (metric, value) in [
            ("ttft_p50_s", r.ttft_p50_s),
            ("ttft_p95_s", r.ttft_p95_s),
            ("tbt_p50_s", r.tbt_p50_s),
            ("tbt_p95_s", r.tbt_p95_s),
            ("e2el_p50_s", r.e2el_p50_s),
            ("e2el_p95_s", r.e2el_p95_s),
        ] {
            if let Some(v) = value {
                row(metric, v);
            }
        }
    }
    Ok(out)
}
