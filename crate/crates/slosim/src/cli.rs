//! Trace files, run configuration, and the command entry points behind the
//! `slosim` binary: `gen`, `run`, `analyze`, and `report`.
//!
//! Traces are JSONL, one request per line; configs are TOML with every field
//! optional (defaults reproduce the reference setup); all outputs are written
//! only after a run fully succeeds, so a failed command leaves nothing behind.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, AdversaryTrace, AnalysisError, BoundParams};
use crate::core::{
    validate_request, ModelReplica, NodeKind, Request, SloClass, StageGraph, TimeMicros, Weights,
};
use crate::engine::{self, CostModel, EngineConfig, EngineError};
use crate::estimator::{
    fit_forest, snapshot_rows, Estimator, EstimatorError, FeatureVector, ForestParams,
};
use crate::metrics::{self, GoodputReport, GoodputSpec, REPORT_CSV_HEADER};
use crate::patterns::SubDeadlineMode;
use crate::scheduler::PolicyKind;

#[derive(Error, Debug)]
pub enum CliError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace line {line}: {msg}")]
    TraceParse { line: usize, msg: String },
    #[error("record {id}: {msg}")]
    BadRecord { id: u64, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("unknown trace kind `{0}` (expected chatbot, deepresearch, mixed, poisson, edf_adv, or sjf_adv)")]
    UnknownKind(String),
    #[error("unknown policy `{0}` (expected gmax, fcfs, edf, sjf_oracle, ltr_predicted, or plas)")]
    UnknownPolicy(String),
    #[error("unknown estimator `{0}` (expected oracle or forest)")]
    UnknownEstimator(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("estimator: {0}")]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("report inputs are missing, empty, or not run reports")]
    SchemaMismatch,
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

// ── Trace records ───────────────────────────────────────────────────────────

/// One request as stored in a JSONL trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub id: u64,
    pub arrival_s: f64,
    /// `latency`, `deadline`, `compound`, or `besteffort`.
    #[serde(rename = "type")]
    pub class: String,
    pub input_len: u32,
    pub output_len: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slo: Option<SloFields>,
    pub app_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<StageGraph>,
    /// `[ω_input, ω_output]`; defaults to `[1, 1]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<[f64; 2]>,
}

/// Optional SLO constants on a record; anything absent falls back to
/// [`SloDefaults`] at load time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SloFields {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ttft_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tbt_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e2el_s: Option<f64>,
}

/// SLO constants applied when a record leaves them unspecified. The compound
/// default scales with stage count: `stage_e2el_s × n_stages`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SloDefaults {
    pub ttft_s: f64,
    pub tbt_s: f64,
    pub e2el_s: f64,
    pub stage_e2el_s: f64,
    pub besteffort_s: f64,
}

impl Default for SloDefaults {
    fn default() -> Self {
        SloDefaults {
            ttft_s: 2.0,
            tbt_s: 0.1,
            e2el_s: 20.0,
            stage_e2el_s: 20.0,
            besteffort_s: 60.0,
        }
    }
}

impl TraceRecord {
    /// Build the simulator request. Stage levels are recomputed from the edge
    /// list rather than trusted from the file, and compound token totals come
    /// from the graph.
    pub fn to_request(&self, d: &SloDefaults) -> Result<Request, CliError> {
        let bad = |msg: String| CliError::BadRecord { id: self.id, msg };
        let slo = self.slo.unwrap_or_default();
        let (class, graph) = match self.class.as_str() {
            "latency" => (
                SloClass::LatencySensitive {
                    ttft_s: slo.ttft_s.unwrap_or(d.ttft_s),
                    tbt_s: slo.tbt_s.unwrap_or(d.tbt_s),
                },
                None,
            ),
            "deadline" => (
                SloClass::DeadlineSensitive {
                    e2el_s: slo.e2el_s.unwrap_or(d.e2el_s),
                },
                None,
            ),
            "besteffort" => (
                SloClass::BestEffort {
                    default_deadline_s: slo.e2el_s.unwrap_or(d.besteffort_s),
                },
                None,
            ),
            "compound" => {
                let g = self
                    .stages
                    .clone()
                    .ok_or_else(|| bad("compound record without stages".to_string()))?;
                let g = StageGraph::from_parts(g.nodes, g.edges)
                    .map_err(|e| bad(e.to_string()))?;
                let e2el = slo
                    .e2el_s
                    .unwrap_or(d.stage_e2el_s * f64::from(g.n_stages()));
                (SloClass::Compound { e2el_s: e2el }, Some(g))
            }
            other => return Err(bad(format!("unknown type `{other}`"))),
        };
        let (input_len, output_len) = match &graph {
            Some(g) => {
                let (i, o) = g.token_totals();
                (i.min(u64::from(u32::MAX)) as u32, o.min(u64::from(u32::MAX)) as u32)
            }
            None => (self.input_len, self.output_len),
        };
        let mut req = Request::new(
            self.id,
            TimeMicros::from_secs_f64(self.arrival_s),
            input_len,
            output_len,
            class,
            self.app_tag.clone(),
        );
        req.stage_graph = graph;
        if let Some(w) = self.weights {
            req.weights = Weights::from(w);
        }
        validate_request(&req).map_err(|e| bad(e.to_string()))?;
        Ok(req)
    }

    pub fn from_request(req: &Request) -> TraceRecord {
        let (class, slo) = match req.slo {
            SloClass::LatencySensitive { ttft_s, tbt_s } => (
                "latency",
                SloFields {
                    ttft_s: Some(ttft_s),
                    tbt_s: Some(tbt_s),
                    e2el_s: None,
                },
            ),
            SloClass::DeadlineSensitive { e2el_s } => (
                "deadline",
                SloFields {
                    e2el_s: Some(e2el_s),
                    ..SloFields::default()
                },
            ),
            SloClass::Compound { e2el_s } => (
                "compound",
                SloFields {
                    e2el_s: Some(e2el_s),
                    ..SloFields::default()
                },
            ),
            SloClass::BestEffort { default_deadline_s } => (
                "besteffort",
                SloFields {
                    e2el_s: Some(default_deadline_s),
                    ..SloFields::default()
                },
            ),
        };
        TraceRecord {
            id: req.id,
            arrival_s: req.arrival.as_secs_f64(),
            class: class.to_string(),
            input_len: req.input_len,
            output_len: req.true_output_len,
            slo: Some(slo),
            app_tag: req.app_tag.clone(),
            stages: req.stage_graph.clone(),
            weights: Some(req.weights.into()),
        }
    }
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>, CliError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let rec: TraceRecord =
            serde_json::from_str(line).map_err(|e| CliError::TraceParse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn trace_to_jsonl(records: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
        out.push('\n');
    }
    out
}

pub fn load_trace(path: &Path) -> Result<Vec<TraceRecord>, CliError> {
    parse_trace(&fs::read_to_string(path)?)
}

pub fn records_to_requests(
    records: &[TraceRecord],
    d: &SloDefaults,
) -> Result<Vec<Request>, CliError> {
    records.iter().map(|r| r.to_request(d)).collect()
}

// ── Run configuration ───────────────────────────────────────────────────────

/// Forest estimator fitting knobs plus the progress-snapshot expansion used
/// to build its training set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub feature_subsample: f64,
    pub snapshot_interval: u32,
    pub max_snapshots: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        let p = ForestParams::default();
        ForestConfig {
            n_trees: p.n_trees,
            max_depth: p.max_depth,
            min_leaf: p.min_leaf,
            feature_subsample: p.feature_subsample,
            snapshot_interval: 50,
            max_snapshots: 8,
        }
    }
}

/// Everything a simulation run needs, loadable from TOML. Every field has a
/// default, so an empty document is a valid config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub policy: String,
    pub seed: u64,
    /// Multiplies every SLO constant before simulation (tightening < 1).
    pub slo_scale: f64,
    /// `forest` (fitted length predictor) or `oracle` (ground truth).
    pub estimator: String,
    pub q: f64,
    pub refine_interval: u32,
    pub frame_iters: u32,
    pub cutoff_p: f64,
    pub cutoff_adapt: bool,
    pub delta_starve: f64,
    pub delta_pmtn: f64,
    pub fairness_f: f64,
    pub power_k: usize,
    pub waiting_time_s: f64,
    pub io_bandwidth_tok_s: f64,
    pub besteffort_deadline_s: f64,
    pub sub_deadline_mode: SubDeadlineMode,
    pub cost: CostModel,
    pub replicas: Vec<ModelReplica>,
    pub slo_defaults: SloDefaults,
    pub goodput: GoodputSpec,
    pub forest: ForestConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = EngineConfig::default();
        RunConfig {
            policy: PolicyKind::Gmax.name().to_string(),
            seed: e.seed,
            slo_scale: e.slo_scale,
            estimator: "forest".to_string(),
            q: e.q,
            refine_interval: e.refine_interval,
            frame_iters: e.frame_iters,
            cutoff_p: e.cutoff_p,
            cutoff_adapt: e.cutoff_adapt,
            delta_starve: e.delta_starve,
            delta_pmtn: e.delta_pmtn,
            fairness_f: e.fairness_f,
            power_k: e.power_k,
            waiting_time_s: e.waiting_time_s,
            io_bandwidth_tok_s: e.io_bandwidth_tok_s,
            besteffort_deadline_s: e.besteffort_deadline_s,
            sub_deadline_mode: e.sub_deadline_mode,
            cost: e.cost,
            replicas: e.replicas,
            slo_defaults: SloDefaults::default(),
            goodput: GoodputSpec::default(),
            forest: ForestConfig::default(),
        }
    }
}

pub fn parse_policy(name: &str) -> Result<PolicyKind, CliError> {
    Ok(match name {
        "gmax" => PolicyKind::Gmax,
        "fcfs" => PolicyKind::Fcfs,
        "edf" => PolicyKind::Edf,
        "sjf_oracle" => PolicyKind::SjfOracle,
        "ltr_predicted" => PolicyKind::LtrPredicted,
        "plas" => PolicyKind::Plas,
        other => return Err(CliError::UnknownPolicy(other.to_string())),
    })
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn engine_config(&self) -> Result<EngineConfig, CliError> {
        let cfg = EngineConfig {
            policy: parse_policy(&self.policy)?,
            replicas: self.replicas.clone(),
            cost: self.cost,
            frame_iters: self.frame_iters,
            cutoff_p: self.cutoff_p,
            delta_starve: self.delta_starve,
            delta_pmtn: self.delta_pmtn,
            fairness_f: self.fairness_f,
            power_k: self.power_k,
            q: self.q,
            refine_interval: self.refine_interval,
            waiting_time_s: self.waiting_time_s,
            io_bandwidth_tok_s: self.io_bandwidth_tok_s,
            besteffort_deadline_s: self.besteffort_deadline_s,
            slo_scale: self.slo_scale,
            sub_deadline_mode: self.sub_deadline_mode,
            cutoff_adapt: self.cutoff_adapt,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

// ── Trace generation ────────────────────────────────────────────────────────

/// Length profile: empirical mean/std of input and output token counts for
/// one application family, fitted with a moment-matched lognormal.
#[derive(Clone, Copy, Debug)]
struct LenProfile {
    in_mean: f64,
    in_std: f64,
    out_mean: f64,
    out_std: f64,
}

const CHATBOT_SINGLE: LenProfile = LenProfile {
    in_mean: 93.0,
    in_std: 244.0,
    out_mean: 318.0,
    out_std: 313.0,
};
const DEEPRESEARCH_SINGLE: LenProfile = LenProfile {
    in_mean: 1911.0,
    in_std: 2781.0,
    out_mean: 534.0,
    out_std: 644.0,
};
const CHATBOT_COMPOUND: LenProfile = LenProfile {
    in_mean: 1300.0,
    in_std: 912.0,
    out_mean: 4458.0,
    out_std: 1176.0,
};
const DEEPRESEARCH_COMPOUND: LenProfile = LenProfile {
    in_mean: 12223.0,
    in_std: 8407.0,
    out_mean: 3541.0,
    out_std: 2370.0,
};

/// Input/output correlation within one request.
const LEN_RHO: f64 = 0.8;
pub const MAX_INPUT_LEN: u32 = 32_768;
pub const MAX_OUTPUT_LEN: u32 = 8_192;

/// Lognormal parameters `(μ, σ)` matching a target mean and standard
/// deviation: `σ² = ln(1 + (std/mean)²)`, `μ = ln(mean) − σ²/2`.
fn lognormal_params(mean: f64, std: f64) -> (f64, f64) {
    let sigma2 = (1.0 + (std / mean).powi(2)).ln();
    (mean.ln() - sigma2 / 2.0, sigma2.sqrt())
}

/// Sample a correlated (input, output) pair plus the request's relative size
/// `θ = output / out_mean` (before clamping), used to scale tool latencies so
/// stage durations within one template family stay proportional.
fn sample_lengths(rng: &mut ChaCha8Rng, p: &LenProfile) -> (u32, u32, f64) {
    let (mu_i, s_i) = lognormal_params(p.in_mean, p.in_std);
    let (mu_o, s_o) = lognormal_params(p.out_mean, p.out_std);
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    let z2 = LEN_RHO * z1 + (1.0 - LEN_RHO * LEN_RHO).sqrt() * z2;
    let raw_in = (mu_i + s_i * z1).exp();
    let raw_out = (mu_o + s_o * z2).exp();
    let input = (raw_in.round() as i64).clamp(1, i64::from(MAX_INPUT_LEN)) as u32;
    let output = (raw_out.round() as i64).clamp(1, i64::from(MAX_OUTPUT_LEN)) as u32;
    (input, output, raw_out / p.out_mean)
}

/// Poisson (optionally bursty on/off) arrival clock. Bursty mode alternates
/// 20-second half-periods at 5× and 1× relative rates, normalized so the
/// long-run mean stays at `rate`.
struct Arrivals {
    t: f64,
    rate: f64,
    bursty: bool,
}

impl Arrivals {
    fn next(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        let rate = if self.bursty {
            if ((self.t / 20.0) as u64) % 2 == 0 {
                5.0 * self.rate / 3.0
            } else {
                self.rate / 3.0
            }
        } else {
            self.rate
        };
        self.t += Exp::new(rate).expect("positive rate").sample(rng);
        self.t
    }
}

fn single_record(
    rng: &mut ChaCha8Rng,
    id: u64,
    arrival_s: f64,
    class: &str,
    profile: &LenProfile,
    tag: &str,
    slo: SloFields,
) -> TraceRecord {
    let (input_len, output_len, _) = sample_lengths(rng, profile);
    TraceRecord {
        id,
        arrival_s,
        class: class.to_string(),
        input_len,
        output_len,
        slo: Some(slo),
        app_tag: tag.to_string(),
        stages: None,
        weights: None,
    }
}

/// Number of stages per compound template family.
const TEMPLATE_STAGES: [u32; 5] = [2, 3, 4, 6, 8];

/// Build one compound record from a fixed template family: a chain of stages
/// with one LLM node each, plus a tool node alongside the LLM at odd interior
/// stages. Token totals follow the app profile; per-node splits and tool
/// latencies are proportional within a family so learned stage shares carry
/// signal across requests.
fn compound_record(
    rng: &mut ChaCha8Rng,
    id: u64,
    arrival_s: f64,
    profile: &LenProfile,
    tag: &str,
) -> TraceRecord {
    let template = rng.gen_range(0..TEMPLATE_STAGES.len());
    let n_stages = TEMPLATE_STAGES[template];
    let (in_total, out_total, theta) = sample_lengths(rng, profile);
    let theta = theta.clamp(0.2, 5.0);

    let mut nodes: Vec<NodeKind> = Vec::new();
    let mut edges: Vec<(u32, u32)> = Vec::new();
    let mut llm_nodes: Vec<usize> = Vec::new();
    let mut prev_stage: Vec<u32> = Vec::new();
    for s in 0..n_stages {
        let mut cur: Vec<u32> = Vec::new();
        nodes.push(NodeKind::Llm {
            model_id: (template as u32 + s) % 3,
            input_len: 1,
            output_len: 1,
        });
        llm_nodes.push(nodes.len() - 1);
        cur.push((nodes.len() - 1) as u32);
        let interior = s > 0 && s + 1 < n_stages;
        if interior && s % 2 == 1 {
            let jitter = 0.9 + 0.2 * rng.gen::<f64>();
            nodes.push(NodeKind::Tool {
                tool_id: template as u32 * 8 + s,
                exec_time_s: (0.2 + 0.15 * f64::from(s)) * theta * jitter,
            });
            cur.push((nodes.len() - 1) as u32);
        }
        for (i, &n) in cur.iter().enumerate() {
            if !prev_stage.is_empty() {
                edges.push((prev_stage[i % prev_stage.len()], n));
            }
        }
        prev_stage = cur;
    }

    // Split totals across LLM nodes with template-fixed proportions plus
    // small jitter; every node keeps at least one token.
    let base: Vec<f64> = (0..llm_nodes.len())
        .map(|k| 1.0 + ((template + k) % 3) as f64)
        .collect();
    let split = |total: u32, cap: u32, rng: &mut ChaCha8Rng| -> Vec<u32> {
        let w: Vec<f64> = base.iter().map(|b| b * (0.9 + 0.2 * rng.gen::<f64>())).collect();
        let sum: f64 = w.iter().sum();
        w.iter()
            .map(|wk| {
                let share = f64::from(total) * wk / sum;
                (share.round() as i64).clamp(1, i64::from(cap)) as u32
            })
            .collect()
    };
    let ins = split(in_total, MAX_INPUT_LEN, rng);
    let outs = split(out_total, MAX_OUTPUT_LEN, rng);
    for (k, &ni) in llm_nodes.iter().enumerate() {
        if let NodeKind::Llm {
            input_len,
            output_len,
            ..
        } = &mut nodes[ni]
        {
            *input_len = ins[k];
            *output_len = outs[k];
        }
    }

    let graph = StageGraph::from_parts(nodes, edges).expect("template graphs are valid DAGs");
    let (ti, to) = graph.token_totals();
    TraceRecord {
        id,
        arrival_s,
        class: "compound".to_string(),
        input_len: ti as u32,
        output_len: to as u32,
        slo: Some(SloFields {
            e2el_s: Some(20.0 * f64::from(n_stages)),
            ..SloFields::default()
        }),
        app_tag: tag.to_string(),
        stages: Some(graph),
        weights: None,
    }
}

fn adversary_records(adv: &AdversaryTrace) -> Vec<TraceRecord> {
    adv.requests.iter().map(TraceRecord::from_request).collect()
}

/// Generate `count` requests of the given kind. `rate` is the mean arrival
/// rate in requests/second (ignored by the adversarial kinds, whose arrivals
/// are fixed by construction).
pub fn generate_trace(
    kind: &str,
    count: usize,
    rate: f64,
    seed: u64,
) -> Result<Vec<TraceRecord>, CliError> {
    if !(rate > 0.0) {
        return Err(CliError::Config("rate must be positive".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7ace_5eed);
    let latency_slo = SloFields {
        ttft_s: Some(2.0),
        tbt_s: Some(0.1),
        e2el_s: None,
    };
    let deadline_slo = SloFields {
        e2el_s: Some(20.0),
        ..SloFields::default()
    };
    let mut arrivals = Arrivals {
        t: 0.0,
        rate,
        bursty: kind == "poisson",
    };
    let mut records = Vec::with_capacity(count);
    match kind {
        "chatbot" => {
            for id in 0..count as u64 {
                let t = arrivals.next(&mut rng);
                records.push(single_record(
                    &mut rng,
                    id,
                    t,
                    "latency",
                    &CHATBOT_SINGLE,
                    "chatbot",
                    latency_slo,
                ));
            }
        }
        "deepresearch" => {
            for id in 0..count as u64 {
                let t = arrivals.next(&mut rng);
                records.push(single_record(
                    &mut rng,
                    id,
                    t,
                    "deadline",
                    &DEEPRESEARCH_SINGLE,
                    "deepresearch",
                    deadline_slo,
                ));
            }
        }
        // 1:1:1 latency chatbot / deadline deepresearch / compound agent mix;
        // `poisson` is the same mix under bursty on/off arrivals.
        "mixed" | "poisson" => {
            for id in 0..count as u64 {
                let t = arrivals.next(&mut rng);
                let rec = match id % 3 {
                    0 => single_record(
                        &mut rng,
                        id,
                        t,
                        "latency",
                        &CHATBOT_SINGLE,
                        "chatbot",
                        latency_slo,
                    ),
                    1 => single_record(
                        &mut rng,
                        id,
                        t,
                        "deadline",
                        &DEEPRESEARCH_SINGLE,
                        "deepresearch",
                        deadline_slo,
                    ),
                    _ => {
                        if (id / 3) % 2 == 0 {
                            compound_record(&mut rng, id, t, &CHATBOT_COMPOUND, "chatbot_agent")
                        } else {
                            compound_record(
                                &mut rng,
                                id,
                                t,
                                &DEEPRESEARCH_COMPOUND,
                                "deepresearch_agent",
                            )
                        }
                    }
                };
                records.push(rec);
            }
        }
        // Worst-case constructions; `count` sets the flyweight count N and
        // the heavyweight's value scales as max(N², 100).
        "edf_adv" | "sjf_adv" => {
            let n = count.saturating_sub(1).max(1);
            let m = ((n * n) as f64).max(100.0);
            let adv = if kind == "edf_adv" {
                analysis::edf_adversary(10.0, n, m)
            } else {
                analysis::sjf_adversary(10.0, n, m)
            };
            records = adversary_records(&adv);
        }
        other => return Err(CliError::UnknownKind(other.to_string())),
    }
    Ok(records)
}

// ── Commands ────────────────────────────────────────────────────────────────

/// Directory used for outputs when a command doesn't specify one. Set
/// `SLOSIM_OUT_DIR` to override the current directory.
pub fn default_out_dir() -> PathBuf {
    std::env::var_os("SLOSIM_OUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

pub fn cmd_gen(
    kind: &str,
    count: usize,
    rate: f64,
    seed: u64,
    out: &Path,
) -> Result<usize, CliError> {
    let records = generate_trace(kind, count, rate, seed)?;
    ensure_parent(out)?;
    fs::write(out, trace_to_jsonl(&records))?;
    Ok(records.len())
}

/// Command-line overrides applied on top of the loaded config.
#[derive(Clone, Debug, Default)]
pub struct RunOverrides {
    pub policy: Option<String>,
    pub seed: Option<u64>,
    pub slo_scale: Option<f64>,
    pub estimator: Option<String>,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub result_path: PathBuf,
    pub report_path: PathBuf,
    pub csv_path: PathBuf,
    pub report: GoodputReport,
}

/// Per-request training rows (features → true total output) extracted from a
/// trace; compound requests contribute one row per LLM node.
pub fn training_rows(records: &[TraceRecord]) -> Vec<(FeatureVector, u32)> {
    let mut rows = Vec::new();
    for r in records {
        match &r.stages {
            None => rows.push((
                FeatureVector {
                    input_len: r.input_len,
                    app_tag: r.app_tag.clone(),
                    generated_so_far: 0,
                    stage_index: 0,
                    model_id: 0,
                },
                r.output_len.max(1),
            )),
            Some(g) => {
                for (idx, node) in g.nodes.iter().enumerate() {
                    if let NodeKind::Llm {
                        model_id,
                        input_len,
                        output_len,
                    } = node
                    {
                        rows.push((
                            FeatureVector {
                                input_len: *input_len,
                                app_tag: r.app_tag.clone(),
                                generated_so_far: 0,
                                stage_index: g.stage_of[idx],
                                model_id: *model_id,
                            },
                            (*output_len).max(1),
                        ));
                    }
                }
            }
        }
    }
    rows
}

/// Build the estimator the run will consult: ground truth, or a quantile
/// forest fitted on `history` (falling back to the run trace itself when no
/// held-out history is supplied).
pub fn build_estimator(
    cfg: &RunConfig,
    trace: &[TraceRecord],
    history: Option<&Path>,
) -> Result<Estimator, CliError> {
    match cfg.estimator.as_str() {
        "oracle" => Ok(Estimator::Oracle),
        "forest" => {
            let held_out;
            let source: &[TraceRecord] = match history {
                Some(p) => {
                    held_out = load_trace(p)?;
                    &held_out
                }
                None => trace,
            };
            let rows = training_rows(source);
            let snaps = snapshot_rows(
                &rows,
                cfg.forest.snapshot_interval,
                cfg.forest.max_snapshots,
            );
            let forest = fit_forest(
                &snaps,
                ForestParams {
                    n_trees: cfg.forest.n_trees,
                    max_depth: cfg.forest.max_depth,
                    min_leaf: cfg.forest.min_leaf,
                    feature_subsample: cfg.forest.feature_subsample,
                    seed: cfg.seed,
                },
            )?;
            Ok(Estimator::Forest(forest))
        }
        other => Err(CliError::UnknownEstimator(other.to_string())),
    }
}

/// Simulate one trace under one policy. All validation and the simulation
/// itself run before any file is written, so failures leave no partial
/// output. Writes `<prefix>.result.json` (compact, byte-stable),
/// `<prefix>.report.json`, and `<prefix>.report.csv`.
pub fn cmd_run(
    trace_path: &Path,
    config_path: Option<&Path>,
    overrides: &RunOverrides,
    history: Option<&Path>,
    out_prefix: &Path,
) -> Result<RunArtifacts, CliError> {
    let mut cfg = match config_path {
        Some(p) => RunConfig::from_toml(&fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &overrides.policy {
        cfg.policy = p.clone();
    }
    if let Some(s) = overrides.seed {
        cfg.seed = s;
    }
    if let Some(l) = overrides.slo_scale {
        cfg.slo_scale = l;
    }
    if let Some(e) = &overrides.estimator {
        cfg.estimator = e.clone();
    }

    let records = load_trace(trace_path)?;
    let requests = records_to_requests(&records, &cfg.slo_defaults)?;
    let engine_cfg = cfg.engine_config()?;
    let estimator = build_estimator(&cfg, &records, history)?;
    let result = engine::run(&requests, &estimator, &engine_cfg)?;
    let report = metrics::build_report(&result, &cfg.goodput);

    let with_suffix = |suffix: &str| -> PathBuf {
        let mut s = out_prefix.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    let result_path = with_suffix(".result.json");
    let report_path = with_suffix(".report.json");
    let csv_path = with_suffix(".report.csv");
    ensure_parent(&result_path)?;
    fs::write(&result_path, serde_json::to_string(&result)?)?;
    fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    fs::write(
        &csv_path,
        format!("{REPORT_CSV_HEADER}\n{}\n", metrics::report_csv_row(&report)),
    )?;
    Ok(RunArtifacts {
        result_path,
        report_path,
        csv_path,
        report,
    })
}

/// Outcome of one policy on one adversarial construction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdversaryOutcome {
    pub t: f64,
    pub n: usize,
    pub m: f64,
    pub policy: String,
    pub policy_goodput: f64,
    pub gmax_goodput: f64,
    pub oracle_goodput: f64,
}

/// Output of `slosim analyze`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub edf: AdversaryOutcome,
    pub sjf: AdversaryOutcome,
    /// Optimal-over-EDF goodput on the EDF construction (= M/N).
    pub edf_ratio: f64,
    pub sjf_ratio: f64,
    pub bound_p1: f64,
    pub bound_p095: f64,
    /// Maximizing parameters of the p = 1 bound.
    pub argmax: BoundParams,
    pub argmax_p095: BoundParams,
    pub nominal_p1: f64,
    pub nominal_p095: f64,
    /// Percent discrepancy of the recomputed optimum against the nominal
    /// published value, `(bound/nominal − 1) × 100`.
    pub gap_p1_pct: f64,
    pub gap_p095_pct: f64,
}

/// Engine configuration matching the abstract machine model behind
/// [`analysis::SmallInstance`]: `n_slots` batch slots, flat iteration cost
/// equal to the token latency, single-iteration frames, no starvation aging,
/// and no queue drops. Abstract slot time and simulated time then agree
/// exactly, so simulated goodput is directly comparable to the oracle's.
pub fn instance_engine_config(policy: PolicyKind, v_token_s: f64, n_slots: usize) -> EngineConfig {
    EngineConfig {
        policy,
        replicas: vec![ModelReplica {
            replica_id: 0,
            v_token_s,
            b_max: n_slots,
        }],
        cost: CostModel {
            c0_s: v_token_s,
            c_att_s_per_token: 0.0,
            c_lin_s_per_slot: 0.0,
            prefill_chunk: 512,
        },
        frame_iters: 1,
        delta_starve: 0.0,
        power_k: 1,
        waiting_time_s: f64::INFINITY,
        ..EngineConfig::default()
    }
}

/// Simulated token goodput of `policy` on an adversarial trace, under the
/// single-slot abstract-model configuration.
pub fn adversary_goodput(adv: &AdversaryTrace, policy: PolicyKind) -> Result<f64, CliError> {
    let cfg = instance_engine_config(policy, adv.v_token_s, 1);
    let result = engine::run(&adv.requests, &Estimator::Oracle, &cfg)?;
    Ok(metrics::token_goodput(&result, &GoodputSpec::default()))
}

pub const NOMINAL_BOUND_P1: f64 = 1.0 / 8.13;
pub const NOMINAL_BOUND_P095: f64 = 1.0 / 8.557;

/// Reproduce the adversarial lower bounds (EDF and SJF vs. the optimum and
/// the ratio-cutoff policy) and optimize the competitive bound at p = 1 and
/// p = 0.95. Deterministic; writing the same report twice is byte-identical.
pub fn cmd_analyze(grid: usize, out: &Path) -> Result<AnalysisReport, CliError> {
    let (t, n, m) = (10.0, 9, 100.0);
    let edf_adv = analysis::edf_adversary(t, n, m);
    let sjf_adv = analysis::sjf_adversary(t, n, m);
    let edf_oracle = analysis::oracle_schedule(&edf_adv.instance)?.goodput;
    let sjf_oracle = analysis::oracle_schedule(&sjf_adv.instance)?.goodput;
    let edf = AdversaryOutcome {
        t,
        n,
        m,
        policy: PolicyKind::Edf.name().to_string(),
        policy_goodput: adversary_goodput(&edf_adv, PolicyKind::Edf)?,
        gmax_goodput: adversary_goodput(&edf_adv, PolicyKind::Gmax)?,
        oracle_goodput: edf_oracle,
    };
    let sjf = AdversaryOutcome {
        t,
        n,
        m,
        policy: PolicyKind::SjfOracle.name().to_string(),
        policy_goodput: adversary_goodput(&sjf_adv, PolicyKind::SjfOracle)?,
        gmax_goodput: adversary_goodput(&sjf_adv, PolicyKind::Gmax)?,
        oracle_goodput: sjf_oracle,
    };
    let b1 = analysis::optimize_bound(1.0, grid);
    let b095 = analysis::optimize_bound(0.95, grid);
    let report = AnalysisReport {
        edf_ratio: edf.oracle_goodput / edf.policy_goodput,
        sjf_ratio: sjf.oracle_goodput / sjf.policy_goodput,
        edf,
        sjf,
        bound_p1: b1.value,
        bound_p095: b095.value,
        argmax: b1.params,
        argmax_p095: b095.params,
        nominal_p1: NOMINAL_BOUND_P1,
        nominal_p095: NOMINAL_BOUND_P095,
        gap_p1_pct: (b1.value / NOMINAL_BOUND_P1 - 1.0) * 100.0,
        gap_p095_pct: (b095.value / NOMINAL_BOUND_P095 - 1.0) * 100.0,
    };
    ensure_parent(out)?;
    fs::write(out, serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Merge per-run report JSON files into one flat comparison CSV (one row per
/// policy/metric pair, with each policy's goodput ratio against the best).
pub fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<String, CliError> {
    if inputs.is_empty() {
        return Err(CliError::SchemaMismatch);
    }
    let mut reports = Vec::with_capacity(inputs.len());
    for p in inputs {
        let text = fs::read_to_string(p)?;
        let report: GoodputReport =
            serde_json::from_str(&text).map_err(|_| CliError::SchemaMismatch)?;
        reports.push(report);
    }
    let csv = metrics::comparison_csv(&reports).map_err(|_| CliError::SchemaMismatch)?;
    ensure_parent(out)?;
    fs::write(out, &csv)?;
    Ok(csv)
}
