//! Discrete-event serving simulator: continuous batching at iteration
//! granularity, frame-based rescheduling, compound stage orchestration with
//! pattern-store sub-deadlines, waiting-time admission drops, and preemption
//! with modeled KV swap-in stalls.
//!
//! Determinism: one event heap with a total order (time, variant rank, key,
//! push sequence), `ChaCha8Rng` for every random choice, and no hash-ordered
//! containers anywhere near results. Same trace + config + seed produces a
//! byte-identical `SimResult`.

use crate::core::{
    validate_request, ModelReplica, NodeKind, Request, RequestState, SimEvent, SloClass,
    StageGraph, TimeMicros, Weights,
};
use crate::estimator::{Estimator, FeatureVector, LengthBound};
use crate::patterns::{sub_deadline, PatternGraph, PatternStore, SubDeadlineMode};
use crate::scheduler::{
    analyze, blend_fairness, policy_order, preemption_check, select_group, starvation_inflate,
    BatchPlan, CutoffAdapter, PolicyKind, RequestEstimate, SchedError, UnitView,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::{BinaryHeap, BTreeSet, VecDeque};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum EngineError {
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("invalid engine config: {0}")]
    InvalidConfig(String),
}

// ── Cost model ──────────────────────────────────────────────────────────────

/// Iteration latency model: a fixed cost, an attention term linear in the
/// longest context, and a linear term in batch size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub c0_s: f64,
    pub c_att_s_per_token: f64,
    pub c_lin_s_per_slot: f64,
    /// Prompt tokens prefilled per iteration per request.
    pub prefill_chunk: u32,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            c0_s: 2e-3,
            c_att_s_per_token: 5e-7,
            c_lin_s_per_slot: 5e-5,
            prefill_chunk: 512,
        }
    }
}

impl CostModel {
    pub fn iteration_latency_s(&self, max_context: u32, batch: usize) -> f64 {
        self.c0_s + self.c_att_s_per_token * f64::from(max_context)
            + self.c_lin_s_per_slot * batch as f64
    }
}

// ── Config ──────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub policy: PolicyKind,
    pub replicas: Vec<ModelReplica>,
    pub cost: CostModel,
    /// Frame length Δ in iterations.
    pub frame_iters: u32,
    /// Priority cutoff fraction p.
    pub cutoff_p: f64,
    /// Goodput inflation per frame waited.
    pub delta_starve: f64,
    /// Preemption margin δ_pmtn.
    pub delta_pmtn: f64,
    /// Efficiency/fairness blend f (0 = pure goodput priority).
    pub fairness_f: f64,
    /// Power-of-K replica candidate count.
    pub power_k: usize,
    /// Estimator quantile for length upper bounds.
    pub q: f64,
    /// Re-predict bounds every this many generated tokens.
    pub refine_interval: u32,
    /// Queued requests never scheduled within this window are dropped
    /// (`f64::INFINITY` disables the check).
    pub waiting_time_s: f64,
    /// KV reload bandwidth, tokens per second.
    pub io_bandwidth_tok_s: f64,
    /// Horizon handed to best-effort (and demoted) requests.
    pub besteffort_deadline_s: f64,
    /// Multiplier applied to every SLO constant at ingest.
    pub slo_scale: f64,
    pub sub_deadline_mode: SubDeadlineMode,
    /// Online epsilon-greedy adaptation of the cutoff p.
    pub cutoff_adapt: bool,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            policy: PolicyKind::Gmax,
            replicas: vec![ModelReplica {
                replica_id: 0,
                v_token_s: 0.005,
                b_max: 16,
            }],
            cost: CostModel::default(),
            frame_iters: 50,
            cutoff_p: 0.95,
            delta_starve: 1.0,
            delta_pmtn: 0.1,
            fairness_f: 0.0,
            power_k: 2,
            q: 0.95,
            refine_interval: 50,
            waiting_time_s: 5.0,
            io_bandwidth_tok_s: 1e6,
            besteffort_deadline_s: 60.0,
            slo_scale: 1.0,
            sub_deadline_mode: SubDeadlineMode::CumulativeShare,
            cutoff_adapt: false,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::InvalidConfig(m.to_string()));
        if self.replicas.is_empty() || !self.replicas.iter().all(ModelReplica::is_valid) {
            return bad("need at least one valid replica");
        }
        let mut ids: Vec<u32> = self.replicas.iter().map(|r| r.replica_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.replicas.len() {
            return bad("replica ids must be unique");
        }
        if self.frame_iters < 1 {
            return bad("frame_iters must be >= 1");
        }
        if !(self.cutoff_p > 0.0 && self.cutoff_p <= 1.0) {
            return bad("cutoff_p must be in (0, 1]");
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return bad("q must be in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.fairness_f) {
            return bad("fairness_f must be in [0, 1]");
        }
        if self.power_k < 1 {
            return bad("power_k must be >= 1");
        }
        if self.delta_starve < 0.0 || self.delta_pmtn < 0.0 {
            return bad("delta_starve and delta_pmtn must be nonnegative");
        }
        if !(self.waiting_time_s > 0.0)
            || !(self.io_bandwidth_tok_s > 0.0)
            || !(self.besteffort_deadline_s > 0.0)
            || !(self.slo_scale > 0.0)
        {
            return bad("time/bandwidth/scale parameters must be positive");
        }
        if !(self.cost.c0_s > 0.0)
            || self.cost.c_att_s_per_token < 0.0
            || self.cost.c_lin_s_per_slot < 0.0
            || self.cost.prefill_chunk < 1
        {
            return bad("cost model: c0 > 0, others nonnegative, prefill_chunk >= 1");
        }
        Ok(())
    }
}

// ── Results ─────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubResult {
    pub node: u32,
    pub kind: String,
    pub input_len: u32,
    pub output_len: u32,
    pub generated: u32,
    pub first_token: Option<TimeMicros>,
    pub completion: Option<TimeMicros>,
    pub token_times: Vec<TimeMicros>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestResult {
    pub id: u64,
    pub class: String,
    pub app_tag: String,
    pub arrival: TimeMicros,
    pub input_len: u32,
    pub output_len: u32,
    pub generated: u32,
    pub weights: Weights,
    /// SLO after `slo_scale` was applied; metrics judge against this.
    pub slo: SloClass,
    pub dropped: bool,
    pub preemptions: u32,
    pub first_token: Option<TimeMicros>,
    pub completion: Option<TimeMicros>,
    pub token_times: Vec<TimeMicros>,
    pub subresults: Vec<SubResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameLog {
    pub at: TimeMicros,
    pub replica: u32,
    pub frame: u64,
    /// Originating request ids of the selected batch, in slot order.
    pub requests: Vec<u64>,
    pub contexts: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub seed: u64,
    pub policy: String,
    pub total_sim_time: TimeMicros,
    pub iterations: u64,
    pub requests: Vec<RequestResult>,
    pub frames: Vec<FrameLog>,
}

pub fn class_name(slo: &SloClass) -> &'static str {
    match slo {
        SloClass::LatencySensitive { .. } => "latency_sensitive",
        SloClass::DeadlineSensitive { .. } => "deadline_sensitive",
        SloClass::Compound { .. } => "compound",
        SloClass::BestEffort { .. } => "best_effort",
    }
}

// ── Internal state ──────────────────────────────────────────────────────────

/// One schedulable unit: a single request, or one LLM node of a compound.
#[derive(Clone, Debug)]
struct Unit {
    req_id: u64,
    parent: Option<(usize, usize)>, // (compound index, node index)
    arrival: TimeMicros,
    input_len: u32,
    true_out: u32,
    slo: SloClass,
    weights: Weights,
    app_tag: String,
    stage_index: u32,
    model_id: u32,
    state: RequestState,
    prefill_done: u32,
    generated: u32,
    bound: LengthBound,
    median_total: u32,
    frames_waited: u32,
    preemptions: u32,
    resume_at: TimeMicros,
    started_ever: bool,
    affinity: Vec<u32>,
    first_token: Option<TimeMicros>,
    token_times: Vec<TimeMicros>,
    completion: Option<TimeMicros>,
}

impl Unit {
    fn context_len(&self) -> u32 {
        self.prefill_done + self.generated
    }
}

#[derive(Clone, Debug)]
struct Compound {
    req_id: u64,
    arrival: TimeMicros,
    deadline_abs: TimeMicros,
    e2el_s: f64,
    graph: StageGraph,
    weights: Weights,
    app_tag: String,
    current_stage: u32,
    stage_release: TimeMicros,
    node_done: Vec<bool>,
    node_completion: Vec<Option<TimeMicros>>,
    measured_out: Vec<u32>,
    unit_of_node: Vec<Option<usize>>,
    stage_times_s: Vec<f64>,
    sub_deadline_abs: Option<TimeMicros>,
    total_generated: u32,
    preemptions: u32,
    dropped: bool,
    completion: Option<TimeMicros>,
}

struct ReplicaState {
    spec: ModelReplica,
    running: Vec<usize>,
    iters_done: u64,
    busy: bool,
    frame_pending: bool,
    iter_started_at: TimeMicros,
    lat_history: VecDeque<f64>,
}

impl ReplicaState {
    fn v_measured(&self, frame_iters: u32) -> f64 {
        if self.lat_history.is_empty() {
            self.spec.v_token_s
        } else {
            let n = self.lat_history.len().min(frame_iters as usize);
            let sum: f64 = self.lat_history.iter().rev().take(n).sum();
            sum / n as f64
        }
    }

    fn free_slots(&self) -> usize {
        self.spec.b_max.saturating_sub(self.running.len())
    }
}

#[derive(PartialEq, Eq)]
struct Ev {
    at: TimeMicros,
    rank: u8,
    key: u64,
    seq: u64,
    payload: SimEvent,
}

impl Ord for Ev {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.rank, self.key, self.seq).cmp(&(other.at, other.rank, other.key, other.seq))
    }
}

impl PartialOrd for Ev {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

struct Sim<'a> {
    cfg: &'a EngineConfig,
    estimator: &'a Estimator,
    units: Vec<Unit>,
    comps: Vec<Compound>,
    replicas: Vec<ReplicaState>,
    ready: BTreeSet<usize>,
    heap: BinaryHeap<Reverse<Ev>>,
    seq: u64,
    now: TimeMicros,
    patterns: PatternStore,
    rng: ChaCha8Rng,
    frames: Vec<FrameLog>,
    iterations: u64,
    adapter: CutoffAdapter,
    frames_since_adapt: u32,
    window_value: f64,
}

impl<'a> Sim<'a> {
    fn push_event(&mut self, at: TimeMicros, payload: SimEvent) {
        let ev = Ev {
            at,
            rank: payload.rank(),
            key: payload.key(),
            seq: self.seq,
            payload,
        };
        self.seq += 1;
        self.heap.push(Reverse(ev));
    }

    fn sample_affinity(&mut self) -> Vec<u32> {
        let n = self.cfg.replicas.len();
        let k = self.cfg.power_k.min(n);
        if k == n {
            return self.cfg.replicas.iter().map(|r| r.replica_id).collect();
        }
        let mut picks = rand::seq::index::sample(&mut self.rng, n, k).into_vec();
        picks.sort_unstable();
        picks
            .into_iter()
            .map(|i| self.cfg.replicas[i].replica_id)
            .collect()
    }

    fn features(&self, u: &Unit) -> FeatureVector {
        FeatureVector {
            input_len: u.input_len,
            app_tag: u.app_tag.clone(),
            generated_so_far: u.generated,
            stage_index: u.stage_index,
            model_id: u.model_id,
        }
    }

    /// Create a schedulable unit, its arrival event, and its admission check.
    #[allow(clippy::too_many_arguments)]
    fn spawn_unit(
        &mut self,
        req_id: u64,
        parent: Option<(usize, usize)>,
        arrival: TimeMicros,
        input_len: u32,
        true_out: u32,
        slo: SloClass,
        weights: Weights,
        app_tag: String,
        stage_index: u32,
        model_id: u32,
    ) -> usize {
        let affinity = self.sample_affinity();
        let fv = FeatureVector {
            input_len,
            app_tag: app_tag.clone(),
            generated_so_far: 0,
            stage_index,
            model_id,
        };
        let (bound, median_total) = self.estimator.estimate(&fv, self.cfg.q, true_out);
        let ui = self.units.len();
        self.units.push(Unit {
            req_id,
            parent,
            arrival,
            input_len,
            true_out,
            slo,
            weights,
            app_tag,
            stage_index,
            model_id,
            state: RequestState::Queued,
            prefill_done: 0,
            generated: 0,
            bound,
            median_total,
            frames_waited: 0,
            preemptions: 0,
            resume_at: TimeMicros::ZERO,
            started_ever: false,
            affinity,
            first_token: None,
            token_times: Vec::new(),
            completion: None,
        });
        self.push_event(arrival, SimEvent::Arrival { unit: ui as u64 });
        // An infinite waiting window disables queue drops entirely.
        if self.cfg.waiting_time_s.is_finite() {
            let check_at =
                arrival + TimeMicros::from_secs_f64(self.cfg.waiting_time_s) + TimeMicros(1);
            self.push_event(check_at, SimEvent::AdmissionSweep { unit: ui as u64 });
        }
        ui
    }

    fn release_stage(&mut self, ci: usize, stage: u32, at: TimeMicros) {
        let nodes: Vec<(usize, NodeKind)> = {
            let comp = &self.comps[ci];
            comp.graph
                .stage_nodes(stage)
                .map(|n| (n, comp.graph.nodes[n].clone()))
                .collect()
        };
        self.comps[ci].stage_release = at;
        for (n, kind) in nodes {
            match kind {
                NodeKind::Llm {
                    model_id,
                    input_len,
                    output_len,
                } => {
                    let comp = &self.comps[ci];
                    let (req_id, slo, weights, tag) = (
                        comp.req_id,
                        SloClass::Compound { e2el_s: comp.e2el_s },
                        comp.weights,
                        comp.app_tag.clone(),
                    );
                    let ui = self.spawn_unit(
                        req_id,
                        Some((ci, n)),
                        at,
                        input_len,
                        output_len,
                        slo,
                        weights,
                        tag,
                        stage,
                        model_id,
                    );
                    self.comps[ci].unit_of_node[n] = Some(ui);
                }
                NodeKind::Tool { exec_time_s, .. } => {
                    let done_at = at + TimeMicros::from_secs_f64(exec_time_s);
                    self.push_event(
                        done_at,
                        SimEvent::ToolComplete {
                            compound: ci as u64,
                            node: n as u32,
                        },
                    );
                }
            }
        }
        if stage > 0 {
            self.rematch_pattern(ci, stage, at);
        }
    }

    /// Re-match the revealed prefix against the pattern store and refresh the
    /// advisory sub-deadline for the stage just released. Stage 0 has no
    /// revealed prefix and always runs under the full compound deadline.
    fn rematch_pattern(&mut self, ci: usize, stage: u32, at: TimeMicros) {
        self.comps[ci].sub_deadline_abs = None;
        let Some(partial) = self.build_partial(ci, stage) else {
            return;
        };
        let Ok(m) = self.patterns.find_match(&partial) else {
            return;
        };
        let pattern = self.patterns.get(m.pattern_id).expect("matched id exists");
        if pattern.n_stages() <= stage as usize {
            return;
        }
        let comp = &self.comps[ci];
        let alloc_s = sub_deadline(
            pattern,
            stage as usize,
            comp.e2el_s,
            self.cfg.sub_deadline_mode,
        );
        let abs = match self.cfg.sub_deadline_mode {
            SubDeadlineMode::CumulativeShare => comp.arrival + TimeMicros::from_secs_f64(alloc_s),
            SubDeadlineMode::PerStageShare | SubDeadlineMode::RemainingShare => {
                at + TimeMicros::from_secs_f64(alloc_s)
            }
        };
        self.comps[ci].sub_deadline_abs = Some(abs.min(self.comps[ci].deadline_abs));
    }

    /// Truncate a compound to its completed stages with measured attributes.
    fn build_partial(&self, ci: usize, revealed: u32) -> Option<PatternGraph> {
        let comp = &self.comps[ci];
        let mut keep: Vec<usize> = Vec::new();
        let mut remap = vec![usize::MAX; comp.graph.nodes.len()];
        for (n, &s) in comp.graph.stage_of.iter().enumerate() {
            if s < revealed {
                remap[n] = keep.len();
                keep.push(n);
            }
        }
        let nodes: Vec<NodeKind> = keep
            .iter()
            .map(|&n| match comp.graph.nodes[n] {
                NodeKind::Llm {
                    model_id,
                    input_len,
                    ..
                } => NodeKind::Llm {
                    model_id,
                    input_len,
                    output_len: comp.measured_out[n],
                },
                NodeKind::Tool {
                    tool_id,
                    exec_time_s,
                } => NodeKind::Tool {
                    tool_id,
                    exec_time_s,
                },
            })
            .collect();
        let edges: Vec<(u32, u32)> = comp
            .graph
            .edges
            .iter()
            .filter(|&&(a, b)| {
                remap[a as usize] != usize::MAX && remap[b as usize] != usize::MAX
            })
            .map(|&(a, b)| (remap[a as usize] as u32, remap[b as usize] as u32))
            .collect();
        let stage_of: Vec<u32> = keep.iter().map(|&n| comp.graph.stage_of[n]).collect();
        let stage_times_s: Vec<f64> = comp.stage_times_s[..revealed as usize].to_vec();
        let total_s: f64 = stage_times_s.iter().sum();
        if total_s <= 0.0 {
            return None;
        }
        Some(PatternGraph {
            id: 0,
            nodes,
            edges,
            stage_of,
            stage_times_s,
            total_s,
            reuse_score: 0.0,
            last_touch: self.now,
        })
    }

    /// Stage-aggregated (remaining bound, deemed goodput) for a compound unit:
    /// revealed value so far plus the current stage's bounded contribution.
    fn compound_agg(&self, ci: usize) -> (u32, f64) {
        let comp = &self.comps[ci];
        let mut rem: u32 = 0;
        let mut value = 0.0;
        for (n, kind) in comp.graph.nodes.iter().enumerate() {
            let NodeKind::Llm { input_len, .. } = *kind else {
                continue;
            };
            let s = comp.graph.stage_of[n];
            if s < comp.current_stage {
                value += comp.weights.wi * f64::from(input_len)
                    + comp.weights.wo * f64::from(comp.measured_out[n]);
            } else if s == comp.current_stage {
                if let Some(ui) = comp.unit_of_node[n] {
                    let u = &self.units[ui];
                    rem += u.bound.total_upper.saturating_sub(u.generated);
                    value += comp.weights.wi * f64::from(input_len)
                        + comp.weights.wo * f64::from(u.bound.total_upper);
                }
            }
        }
        (rem, value)
    }

    fn unit_view(&self, ui: usize) -> UnitView {
        let u = &self.units[ui];
        let (sub_deadline_abs, stage_agg, attained) = match u.parent {
            Some((ci, _)) => {
                let comp = &self.comps[ci];
                // Without a pattern match the stage budget is the compound's
                // own absolute deadline, not stage release + E2EL.
                (
                    comp.sub_deadline_abs.or(Some(comp.deadline_abs)),
                    Some(self.compound_agg(ci)),
                    u64::from(comp.total_generated),
                )
            }
            None => (None, None, u64::from(u.generated)),
        };
        UnitView {
            id: ui as u64,
            arrival: u.arrival,
            input_len: u.input_len,
            generated: u.generated,
            slo: u.slo,
            weights: u.weights,
            bound: u.bound,
            sub_deadline_abs,
            stage_agg,
            frames_waited: u.frames_waited,
            kv_tokens: u.context_len(),
            oracle_rem: u.true_out.saturating_sub(u.generated),
            median_total: u.median_total,
            attained,
        }
    }

    /// Estimate one unit, demoting to a zero-goodput best-effort horizon when
    /// its SLO can no longer be met. A compound stage that merely blew its
    /// amortized sub-deadline is not goodput-dead — the end-to-end deadline is
    /// the binding SLO, so the stage budget widens to it and full credit
    /// stays; demotion happens only once the final deadline itself passes.
    fn estimate(&self, ui: usize, now: TimeMicros, v: f64, rid: u32) -> RequestEstimate {
        let view = self.unit_view(ui);
        let est = match analyze(&view, now, v, rid) {
            Ok(e) => e,
            Err(SchedError::ExpiredSlo) => {
                let final_dl = self.units[ui]
                    .parent
                    .map(|(ci, _)| self.comps[ci].deadline_abs)
                    .filter(|&dl| dl > now);
                if let Some(dl) = final_dl {
                    let mut widened = view;
                    widened.sub_deadline_abs = Some(dl);
                    analyze(&widened, now, v, rid).expect("final deadline unexpired")
                } else {
                    let mut demoted = view;
                    demoted.slo = SloClass::BestEffort {
                        default_deadline_s: self.cfg.besteffort_deadline_s,
                    };
                    demoted.sub_deadline_abs = None;
                    analyze(&demoted, now, v, rid).expect("best effort never expires")
                }
            }
            Err(e) => unreachable!("analyze only fails on expiry: {e}"),
        };
        let est = starvation_inflate(&est, self.cfg.delta_starve);
        if self.cfg.fairness_f > 0.0 {
            let fair = 1.0 / (1.0 + self.unit_view(ui).attained as f64);
            let priority = blend_fairness(est.priority, fair, self.cfg.fairness_f);
            RequestEstimate { priority, ..est }
        } else {
            est
        }
    }

    fn maybe_refine(&mut self, ui: usize) {
        let u = &self.units[ui];
        if u.generated.saturating_sub(u.bound.as_of_generated) < self.cfg.refine_interval {
            return;
        }
        let fv = self.features(u);
        let truth = u.true_out;
        let (bound, median) = self.estimator.estimate(&fv, self.cfg.q, truth);
        let u = &mut self.units[ui];
        u.bound = bound;
        u.median_total = median;
    }

    fn ready_for(&self, rid: u32, now: TimeMicros) -> Vec<usize> {
        self.ready
            .iter()
            .copied()
            .filter(|&ui| {
                let u = &self.units[ui];
                u.arrival <= now && u.affinity.contains(&rid)
            })
            .collect()
    }

    /// One scheduling pass over replica `r`. Full passes (frame boundaries)
    /// may reorder and preempt; backfill passes only fill free slots.
    fn sweep(&mut self, r: usize, now: TimeMicros, full: bool, frame: u64) {
        let rid = self.replicas[r].spec.replica_id;
        let b_max = self.replicas[r].spec.b_max;
        let running: Vec<usize> = self.replicas[r].running.clone();
        let ready: Vec<usize> = self.ready_for(rid, now);

        for &ui in running.iter().chain(ready.iter()) {
            self.maybe_refine(ui);
        }

        let final_plan: BatchPlan = if ready.is_empty() && running.is_empty() {
            BatchPlan {
                selected: Vec::new(),
                preempted: Vec::new(),
                frame_index: frame,
            }
        } else if self.cfg.policy == PolicyKind::Gmax {
            let v = self.replicas[r].v_measured(self.cfg.frame_iters);
            let running_ests: Vec<RequestEstimate> = running
                .iter()
                .map(|&ui| self.estimate(ui, now, v, rid))
                .collect();
            let mut all = running_ests.clone();
            all.extend(ready.iter().map(|&ui| self.estimate(ui, now, v, rid)));
            let p = if self.cfg.cutoff_adapt {
                self.adapter.current_p()
            } else {
                self.cfg.cutoff_p
            };
            let plan = select_group(&all, b_max, p, frame).expect("nonempty queue");
            if full {
                preemption_check(
                    &running_ests,
                    &all,
                    &plan,
                    b_max,
                    self.cfg.io_bandwidth_tok_s,
                    1.0 / v,
                    self.cfg.delta_pmtn,
                    f64::from(self.cfg.frame_iters) * v,
                )
            } else {
                let mut selected: Vec<u64> = running.iter().map(|&ui| ui as u64).collect();
                let mut free = b_max.saturating_sub(running.len());
                for &id in &plan.selected {
                    if free == 0 {
                        break;
                    }
                    if !selected.contains(&id) {
                        selected.push(id);
                        free -= 1;
                    }
                }
                BatchPlan {
                    selected,
                    preempted: Vec::new(),
                    frame_index: frame,
                }
            }
        } else {
            let views: Vec<UnitView> = running
                .iter()
                .chain(ready.iter())
                .map(|&ui| self.unit_view(ui))
                .collect();
            let order = policy_order(self.cfg.policy, &views, now, b_max);
            let selected: Vec<u64> = if full {
                order
            } else {
                let mut sel: Vec<u64> = running.iter().map(|&ui| ui as u64).collect();
                let mut free = b_max.saturating_sub(running.len());
                for id in order {
                    if free == 0 {
                        break;
                    }
                    if !sel.contains(&id) {
                        sel.push(id);
                        free -= 1;
                    }
                }
                sel
            };
            let preempted = running
                .iter()
                .map(|&ui| ui as u64)
                .filter(|id| !selected.contains(id))
                .collect();
            BatchPlan {
                selected,
                preempted,
                frame_index: frame,
            }
        };

        // Apply: evictions first, then admissions in plan order.
        let io = self.cfg.io_bandwidth_tok_s;
        for &ui in &running {
            if !final_plan.selected.contains(&(ui as u64)) {
                let u = &mut self.units[ui];
                u.state = RequestState::Preempted;
                u.preemptions += 1;
                u.frames_waited = 0;
                if let Some((ci, _)) = u.parent {
                    self.comps[ci].preemptions += 1;
                }
                self.ready.insert(ui);
                self.replicas[r].running.retain(|&x| x != ui);
            }
        }
        for &id in &final_plan.selected {
            let ui = id as usize;
            if running.contains(&ui) && self.units[ui].state == RequestState::Running {
                continue;
            }
            let stall = if self.units[ui].preemptions > 0 {
                let kv = f64::from(self.units[ui].context_len());
                TimeMicros::from_secs_f64(kv / io)
            } else {
                TimeMicros::ZERO
            };
            let u = &mut self.units[ui];
            u.state = RequestState::Running;
            u.started_ever = true;
            u.frames_waited = 0;
            u.resume_at = now + stall;
            self.ready.remove(&ui);
            self.replicas[r].running.push(ui);
        }
        debug_assert!(self.replicas[r].running.len() <= b_max);
        debug_assert!(
            self.replicas[r].free_slots() == 0 || self.ready_for(rid, now).is_empty(),
            "work conservation violated"
        );

        if full {
            for ui in self.ready_for(rid, now) {
                self.units[ui].frames_waited += 1;
            }
            let requests: Vec<u64> = self.replicas[r]
                .running
                .iter()
                .map(|&ui| self.units[ui].req_id)
                .collect();
            let contexts: Vec<u32> = self.replicas[r]
                .running
                .iter()
                .map(|&ui| self.units[ui].context_len())
                .collect();
            self.frames.push(FrameLog {
                at: now,
                replica: rid,
                frame,
                requests,
                contexts,
            });
            if self.cfg.cutoff_adapt {
                self.frames_since_adapt += 1;
                if self.frames_since_adapt >= 100 {
                    let value = self.window_value;
                    self.adapter.observe_window(value);
                    self.window_value = 0.0;
                    self.frames_since_adapt = 0;
                }
            }
        }
    }

    fn start_iteration(&mut self, r: usize, now: TimeMicros) {
        debug_assert!(!self.replicas[r].busy && !self.replicas[r].running.is_empty());
        let max_ctx = self.replicas[r]
            .running
            .iter()
            .map(|&ui| self.units[ui].context_len())
            .max()
            .unwrap_or(0);
        let lat = self
            .cfg
            .cost
            .iteration_latency_s(max_ctx, self.replicas[r].running.len());
        let rep = &mut self.replicas[r];
        rep.busy = true;
        rep.iter_started_at = now;
        let rid = rep.spec.replica_id;
        self.push_event(
            now + TimeMicros::from_secs_f64(lat),
            SimEvent::IterationComplete { replica: rid },
        );
    }

    fn try_backfill(&mut self, r: usize, now: TimeMicros) {
        if self.replicas[r].frame_pending || self.replicas[r].busy {
            return;
        }
        if self.replicas[r].free_slots() > 0 {
            let frame = self.replicas[r].iters_done / u64::from(self.cfg.frame_iters);
            self.sweep(r, now, false, frame);
        }
        if !self.replicas[r].running.is_empty() {
            self.start_iteration(r, now);
        }
    }

    fn on_iteration_complete(&mut self, r: usize, now: TimeMicros) {
        let started = self.replicas[r].iter_started_at;
        let dur = (now - started).as_secs_f64();
        self.replicas[r].busy = false;
        self.replicas[r].lat_history.push_back(dur);
        if self.replicas[r].lat_history.len() > self.cfg.frame_iters as usize {
            self.replicas[r].lat_history.pop_front();
        }
        self.iterations += 1;

        let batch: Vec<usize> = self.replicas[r].running.clone();
        let mut completed: Vec<usize> = Vec::new();
        for ui in batch {
            let u = &mut self.units[ui];
            if u.resume_at > started {
                continue; // swap-in stall still draining
            }
            if u.prefill_done < u.input_len {
                u.prefill_done = (u.prefill_done + self.cfg.cost.prefill_chunk).min(u.input_len);
                if u.prefill_done == u.input_len && u.true_out == 0 {
                    completed.push(ui);
                }
                continue;
            }
            u.generated += 1;
            u.token_times.push(now);
            if u.first_token.is_none() {
                u.first_token = Some(now);
            }
            if let Some((ci, _)) = u.parent {
                self.comps[ci].total_generated += 1;
            }
            if self.units[ui].generated == self.units[ui].true_out {
                completed.push(ui);
            }
        }
        for ui in completed {
            self.complete_unit(ui, r, now);
        }

        self.replicas[r].iters_done += 1;
        if self.replicas[r].iters_done % u64::from(self.cfg.frame_iters) == 0 {
            self.replicas[r].frame_pending = true;
            let rid = self.replicas[r].spec.replica_id;
            self.push_event(now, SimEvent::FrameBoundary { replica: rid });
        } else {
            self.try_backfill(r, now);
        }
    }

    fn complete_unit(&mut self, ui: usize, r: usize, now: TimeMicros) {
        {
            let u = &mut self.units[ui];
            u.state = RequestState::Done;
            u.completion = Some(now);
        }
        self.replicas[r].running.retain(|&x| x != ui);
        self.window_value += self.on_time_value(ui, now);
        if let Some((ci, node)) = self.units[ui].parent {
            self.advance_after_node(ci, node, now);
        }
    }

    /// Goodput proxy for cutoff adaptation: full request value when the unit
    /// finished within its (sub-)timeline, zero otherwise.
    fn on_time_value(&self, ui: usize, now: TimeMicros) -> f64 {
        let u = &self.units[ui];
        let deadline = match u.slo {
            SloClass::LatencySensitive { ttft_s, tbt_s } => {
                u.arrival
                    + TimeMicros::from_secs_f64(ttft_s + f64::from(u.true_out) * tbt_s)
            }
            SloClass::DeadlineSensitive { e2el_s } | SloClass::Compound { e2el_s } => {
                u.arrival + TimeMicros::from_secs_f64(e2el_s)
            }
            SloClass::BestEffort { .. } => return 0.0,
        };
        if now <= deadline {
            u.weights.wi * f64::from(u.input_len) + u.weights.wo * f64::from(u.generated)
        } else {
            0.0
        }
    }

    fn advance_after_node(&mut self, ci: usize, node: usize, now: TimeMicros) {
        {
            let comp = &mut self.comps[ci];
            comp.node_done[node] = true;
            comp.node_completion[node] = Some(now);
            if let Some(ui) = comp.unit_of_node[node] {
                comp.measured_out[node] = self.units[ui].generated;
            }
        }
        let comp = &self.comps[ci];
        let stage = comp.current_stage;
        let stage_done = comp
            .graph
            .stage_nodes(stage)
            .all(|n| comp.node_done[n]);
        if !stage_done {
            return;
        }
        let release = self.comps[ci].stage_release;
        self.comps[ci]
            .stage_times_s
            .push((now - release).as_secs_f64());
        self.comps[ci].current_stage += 1;
        let next = self.comps[ci].current_stage;
        if next >= self.comps[ci].graph.n_stages() {
            self.comps[ci].completion = Some(now);
            if !self.comps[ci].dropped {
                self.ingest_pattern(ci, now);
            }
        } else if !self.comps[ci].dropped {
            self.release_stage(ci, next, now);
        }
    }

    fn ingest_pattern(&mut self, ci: usize, now: TimeMicros) {
        let comp = &self.comps[ci];
        let nodes: Vec<NodeKind> = comp
            .graph
            .nodes
            .iter()
            .enumerate()
            .map(|(n, k)| match *k {
                NodeKind::Llm {
                    model_id,
                    input_len,
                    ..
                } => NodeKind::Llm {
                    model_id,
                    input_len,
                    output_len: comp.measured_out[n],
                },
                NodeKind::Tool {
                    tool_id,
                    exec_time_s,
                } => NodeKind::Tool {
                    tool_id,
                    exec_time_s,
                },
            })
            .collect();
        let stage_times_s = comp.stage_times_s.clone();
        let total_s: f64 = stage_times_s.iter().sum();
        if total_s <= 0.0 {
            return;
        }
        let graph = PatternGraph {
            id: 0,
            nodes,
            edges: comp.graph.edges.clone(),
            stage_of: comp.graph.stage_of.clone(),
            stage_times_s,
            total_s,
            reuse_score: 0.0,
            last_touch: now,
        };
        // Oversized graphs simply aren't remembered.
        let _ = self.patterns.ingest(graph);
        self.patterns.decay_evict(now);
    }

    fn on_admission_check(&mut self, ui: usize, now: TimeMicros) {
        let u = &self.units[ui];
        let overdue = (now - u.arrival).as_secs_f64() > self.cfg.waiting_time_s;
        if u.started_ever
            || !overdue
            || !matches!(u.state, RequestState::Queued)
        {
            return;
        }
        self.units[ui].state = RequestState::Dropped;
        self.ready.remove(&ui);
        if let Some((ci, _)) = self.units[ui].parent {
            self.comps[ci].dropped = true;
            // Queued siblings die with the compound; running ones finish.
            let siblings: Vec<usize> = self.comps[ci]
                .unit_of_node
                .iter()
                .flatten()
                .copied()
                .collect();
            for si in siblings {
                if si != ui
                    && self.units[si].state == RequestState::Queued
                    && !self.units[si].started_ever
                {
                    self.units[si].state = RequestState::Dropped;
                    self.ready.remove(&si);
                }
            }
        }
    }

    fn run_loop(&mut self) {
        while let Some(Reverse(ev)) = self.heap.pop() {
            self.now = ev.at;
            match ev.payload {
                SimEvent::Arrival { unit } => {
                    // Drain every same-instant arrival before deciding any
                    // admission, so simultaneous requests are considered
                    // together rather than first-popped-first-served.
                    let mut arrived = vec![unit as usize];
                    while let Some(Reverse(next)) = self.heap.peek() {
                        if next.at != ev.at {
                            break;
                        }
                        if let SimEvent::Arrival { unit } = next.payload {
                            arrived.push(unit as usize);
                            self.heap.pop();
                        } else {
                            break;
                        }
                    }
                    let mut fill: BTreeSet<usize> = BTreeSet::new();
                    for ui in arrived {
                        if self.units[ui].state == RequestState::Queued {
                            self.ready.insert(ui);
                            for rid in self.units[ui].affinity.clone() {
                                fill.insert(self.replica_index(rid));
                            }
                        }
                    }
                    for r in fill {
                        self.try_backfill(r, ev.at);
                    }
                }
                SimEvent::FrameBoundary { replica } => {
                    let r = self.replica_index(replica);
                    self.replicas[r].frame_pending = false;
                    let frame = self.replicas[r].iters_done / u64::from(self.cfg.frame_iters);
                    self.sweep(r, ev.at, true, frame);
                    if !self.replicas[r].busy && !self.replicas[r].running.is_empty() {
                        self.start_iteration(r, ev.at);
                    }
                }
                SimEvent::IterationComplete { replica } => {
                    let r = self.replica_index(replica);
                    self.on_iteration_complete(r, ev.at);
                }
                SimEvent::ToolComplete { compound, node } => {
                    // Any stage this unblocks spawns LLM units whose own
                    // arrival events (same timestamp) drive admission.
                    let ci = compound as usize;
                    if !self.comps[ci].dropped {
                        self.advance_after_node(ci, node as usize, ev.at);
                    }
                }
                SimEvent::AdmissionSweep { unit } => {
                    self.on_admission_check(unit as usize, ev.at);
                }
            }
        }
    }

    fn replica_index(&self, rid: u32) -> usize {
        self.replicas
            .iter()
            .position(|r| r.spec.replica_id == rid)
            .expect("replica id known")
    }

    fn into_result(self) -> SimResult {
        let mut requests: Vec<RequestResult> = Vec::new();
        for u in self.units.iter().filter(|u| u.parent.is_none()) {
            debug_assert!(
                u.completion.is_none() || u.token_times.len() == u.true_out as usize,
                "completed unit must have exactly L_o token timestamps"
            );
            requests.push(RequestResult {
                id: u.req_id,
                class: class_name(&u.slo).to_string(),
                app_tag: u.app_tag.clone(),
                arrival: u.arrival,
                input_len: u.input_len,
                output_len: u.true_out,
                generated: u.generated,
                weights: u.weights,
                slo: u.slo,
                dropped: u.state == RequestState::Dropped,
                preemptions: u.preemptions,
                first_token: u.first_token,
                completion: u.completion,
                token_times: u.token_times.clone(),
                subresults: Vec::new(),
            });
        }
        for comp in &self.comps {
            let (in_total, out_total) = comp.graph.token_totals();
            let mut subresults: Vec<SubResult> = Vec::new();
            let mut first_token: Option<TimeMicros> = None;
            for (n, kind) in comp.graph.nodes.iter().enumerate() {
                let sub = match *kind {
                    NodeKind::Llm {
                        input_len,
                        output_len,
                        ..
                    } => {
                        let (generated, ft, completion, token_times) =
                            match comp.unit_of_node[n] {
                                Some(ui) => {
                                    let u = &self.units[ui];
                                    (
                                        u.generated,
                                        u.first_token,
                                        u.completion,
                                        u.token_times.clone(),
                                    )
                                }
                                None => (0, None, None, Vec::new()),
                            };
                        if let Some(t) = ft {
                            first_token = Some(first_token.map_or(t, |f| f.min(t)));
                        }
                        SubResult {
                            node: n as u32,
                            kind: "llm".to_string(),
                            input_len,
                            output_len,
                            generated,
                            first_token: ft,
                            completion,
                            token_times,
                        }
                    }
                    NodeKind::Tool { .. } => SubResult {
                        node: n as u32,
                        kind: "tool".to_string(),
                        input_len: 0,
                        output_len: 0,
                        generated: 0,
                        first_token: None,
                        completion: comp.node_completion[n],
                        token_times: Vec::new(),
                    },
                };
                subresults.push(sub);
            }
            requests.push(RequestResult {
                id: comp.req_id,
                class: "compound".to_string(),
                app_tag: comp.app_tag.clone(),
                arrival: comp.arrival,
                input_len: in_total as u32,
                output_len: out_total as u32,
                generated: comp.total_generated,
                weights: comp.weights,
                slo: SloClass::Compound {
                    e2el_s: comp.e2el_s,
                },
                dropped: comp.dropped,
                preemptions: comp.preemptions,
                first_token,
                completion: if comp.dropped { None } else { comp.completion },
                token_times: Vec::new(),
                subresults,
            });
        }
        requests.sort_by_key(|r| r.id);
        SimResult {
            seed: self.cfg.seed,
            policy: self.cfg.policy.name().to_string(),
            total_sim_time: self.now,
            iterations: self.iterations,
            requests,
            frames: self.frames,
        }
    }
}

// ── Entry point ─────────────────────────────────────────────────────────────

/// Simulate `trace` under `cfg`. Requests must have unique ids and pass
/// validation; an empty trace yields an empty result.
pub fn run(
    trace: &[Request],
    estimator: &Estimator,
    cfg: &EngineConfig,
) -> Result<SimResult, EngineError> {
    cfg.validate()?;
    let mut ids: BTreeSet<u64> = BTreeSet::new();
    for req in trace {
        if !ids.insert(req.id) {
            return Err(EngineError::InvalidTrace(format!(
                "duplicate request id {}",
                req.id
            )));
        }
        validate_request(req)
            .map_err(|e| EngineError::InvalidTrace(format!("request {}: {e}", req.id)))?;
    }

    let mut sim = Sim {
        cfg,
        estimator,
        units: Vec::new(),
        comps: Vec::new(),
        replicas: cfg
            .replicas
            .iter()
            .map(|&spec| ReplicaState {
                spec,
                running: Vec::new(),
                iters_done: 0,
                busy: false,
                frame_pending: false,
                iter_started_at: TimeMicros::ZERO,
                lat_history: VecDeque::new(),
            })
            .collect(),
        ready: BTreeSet::new(),
        heap: BinaryHeap::new(),
        seq: 0,
        now: TimeMicros::ZERO,
        patterns: PatternStore::default(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        frames: Vec::new(),
        iterations: 0,
        adapter: CutoffAdapter::new(cfg.seed),
        frames_since_adapt: 0,
        window_value: 0.0,
    };

    // Ingest in (arrival, id) order so unit indices are reproducible even for
    // permuted input files.
    let mut order: Vec<usize> = (0..trace.len()).collect();
    order.sort_by_key(|&i| (trace[i].arrival, trace[i].id));
    for i in order {
        let req = &trace[i];
        let slo = req.slo.scaled(cfg.slo_scale);
        match (&slo, &req.stage_graph) {
            (SloClass::Compound { e2el_s }, Some(graph)) => {
                let ci = sim.comps.len();
                let n = graph.nodes.len();
                sim.comps.push(Compound {
                    req_id: req.id,
                    arrival: req.arrival,
                    deadline_abs: req.arrival + TimeMicros::from_secs_f64(*e2el_s),
                    e2el_s: *e2el_s,
                    graph: graph.clone(),
                    weights: req.weights,
                    app_tag: req.app_tag.clone(),
                    current_stage: 0,
                    stage_release: req.arrival,
                    node_done: vec![false; n],
                    node_completion: vec![None; n],
                    measured_out: vec![0; n],
                    unit_of_node: vec![None; n],
                    stage_times_s: Vec::new(),
                    sub_deadline_abs: None,
                    total_generated: 0,
                    preemptions: 0,
                    dropped: false,
                    completion: None,
                });
                sim.release_stage(ci, 0, req.arrival);
            }
            _ => {
                sim.spawn_unit(
                    req.id,
                    None,
                    req.arrival,
                    req.input_len,
                    req.true_output_len,
                    slo,
                    req.weights,
                    req.app_tag.clone(),
                    0,
                    0,
                );
            }
        }
    }

    sim.run_loop();
    Ok(sim.into_result())
}
