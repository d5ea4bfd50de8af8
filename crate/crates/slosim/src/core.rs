//! Domain types shared by every module: the simulation clock, SLO classes,
//! requests, compound stage graphs, and model replicas.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::ops::{Add, AddAssign, Sub};
use thiserror::Error;

// ── Clock ───────────────────────────────────────────────────────────────────

/// Simulation time as integer microseconds.
///
/// All engine arithmetic stays in integers so event ordering and deadline
/// comparisons are exact; float seconds exist only at the I/O boundary. The
/// same type serves as instant and duration, like a bare tick count.
#[derive(
    Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize, Debug,
)]
#[serde(transparent)]
pub struct TimeMicros(pub i64);

impl TimeMicros {
    pub const ZERO: TimeMicros = TimeMicros(0);
    pub const MAX: TimeMicros = TimeMicros(i64::MAX);

    /// Convert from seconds, rounding to the nearest microsecond.
    pub fn from_secs_f64(secs: f64) -> Self {
        TimeMicros((secs * 1e6).round() as i64)
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn saturating_sub(self, rhs: TimeMicros) -> TimeMicros {
        TimeMicros(self.0.saturating_sub(rhs.0))
    }

    pub fn max(self, rhs: TimeMicros) -> TimeMicros {
        TimeMicros(self.0.max(rhs.0))
    }

    pub fn min(self, rhs: TimeMicros) -> TimeMicros {
        TimeMicros(self.0.min(rhs.0))
    }
}

impl Add for TimeMicros {
    type Output = TimeMicros;
    fn add(self, rhs: TimeMicros) -> TimeMicros {
        TimeMicros(self.0 + rhs.0)
    }
}

impl AddAssign for TimeMicros {
    fn add_assign(&mut self, rhs: TimeMicros) {
        self.0 += rhs.0;
    }
}

impl Sub for TimeMicros {
    type Output = TimeMicros;
    fn sub(self, rhs: TimeMicros) -> TimeMicros {
        TimeMicros(self.0 - rhs.0)
    }
}

impl fmt::Display for TimeMicros {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.as_secs_f64())
    }
}

// ── SLO classes ─────────────────────────────────────────────────────────────

/// Responsiveness contract attached to a request.
///
/// Latency-sensitive requests are judged token by token against a streaming
/// timeline; deadline-sensitive and compound requests are all-or-nothing
/// against an end-to-end deadline; best-effort requests earn no goodput but
/// carry a default completion deadline so they cannot starve.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum SloClass {
    LatencySensitive { ttft_s: f64, tbt_s: f64 },
    DeadlineSensitive { e2el_s: f64 },
    Compound { e2el_s: f64 },
    BestEffort { default_deadline_s: f64 },
}

impl SloClass {
    /// All time fields strictly positive.
    pub fn is_valid(&self) -> bool {
        match *self {
            SloClass::LatencySensitive { ttft_s, tbt_s } => ttft_s > 0.0 && tbt_s > 0.0,
            SloClass::DeadlineSensitive { e2el_s } | SloClass::Compound { e2el_s } => e2el_s > 0.0,
            SloClass::BestEffort { default_deadline_s } => {
                default_deadline_s > 0.0 && default_deadline_s.is_finite()
            }
        }
    }

    /// Scale every deadline/timeline constant by `lambda` (SLO tightening or
    /// relaxation sweeps).
    pub fn scaled(&self, lambda: f64) -> SloClass {
        match *self {
            SloClass::LatencySensitive { ttft_s, tbt_s } => SloClass::LatencySensitive {
                ttft_s: ttft_s * lambda,
                tbt_s: tbt_s * lambda,
            },
            SloClass::DeadlineSensitive { e2el_s } => SloClass::DeadlineSensitive {
                e2el_s: e2el_s * lambda,
            },
            SloClass::Compound { e2el_s } => SloClass::Compound {
                e2el_s: e2el_s * lambda,
            },
            SloClass::BestEffort { default_deadline_s } => SloClass::BestEffort {
                default_deadline_s: default_deadline_s * lambda,
            },
        }
    }
}

// ── Stage graphs ────────────────────────────────────────────────────────────

/// One node of a compound request: an LLM call or a fixed-latency tool call.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeKind {
    Llm {
        model_id: u32,
        input_len: u32,
        output_len: u32,
    },
    Tool {
        tool_id: u32,
        exec_time_s: f64,
    },
}

/// Dependency DAG of a compound request. Nodes are grouped into stages
/// (topological levels); stage `s` begins only after every stage `s-1` node
/// completes.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct StageGraph {
    pub nodes: Vec<NodeKind>,
    /// (parent, child) index pairs.
    pub edges: Vec<(u32, u32)>,
    /// Topological level per node; contiguous from 0.
    pub stage_of: Vec<u32>,
}

impl StageGraph {
    /// Build a graph from nodes and edges, deriving stages as topological
    /// levels (roots at 0, child level = 1 + max parent level).
    pub fn from_parts(nodes: Vec<NodeKind>, edges: Vec<(u32, u32)>) -> Result<Self, CoreError> {
        let n = nodes.len();
        if n == 0 {
            return Err(CoreError::InvalidStageGraph("empty graph".into()));
        }
        for &(a, b) in &edges {
            if a as usize >= n || b as usize >= n || a == b {
                return Err(CoreError::InvalidStageGraph(format!(
                    "edge ({a},{b}) out of range"
                )));
            }
        }
        // Kahn toposort assigning levels; detects cycles.
        let mut indeg = vec![0u32; n];
        for &(_, b) in &edges {
            indeg[b as usize] += 1;
        }
        let mut stage_of = vec![0u32; n];
        let mut frontier: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut seen = frontier.len();
        while let Some(i) = frontier.pop() {
            for &(a, b) in &edges {
                if a as usize == i {
                    let b = b as usize;
                    stage_of[b] = stage_of[b].max(stage_of[i] + 1);
                    indeg[b] -= 1;
                    if indeg[b] == 0 {
                        frontier.push(b);
                        seen += 1;
                    }
                }
            }
        }
        if seen != n {
            return Err(CoreError::InvalidStageGraph("cycle detected".into()));
        }
        let graph = StageGraph {
            nodes,
            edges,
            stage_of,
        };
        graph.check()?;
        Ok(graph)
    }

    /// Validate structural invariants: stage levels contiguous from 0,
    /// consistent with edges, and every non-root node has at least one parent.
    pub fn check(&self) -> Result<(), CoreError> {
        let n = self.nodes.len();
        if n == 0 || self.stage_of.len() != n {
            return Err(CoreError::InvalidStageGraph("node/stage count mismatch".into()));
        }
        let max_stage = *self.stage_of.iter().max().unwrap();
        for s in 0..=max_stage {
            if !self.stage_of.contains(&s) {
                return Err(CoreError::InvalidStageGraph(format!("stage {s} empty")));
            }
        }
        for (i, &s) in self.stage_of.iter().enumerate() {
            if s > 0 {
                let has_parent = self.edges.iter().any(|&(_, b)| b as usize == i);
                if !has_parent {
                    return Err(CoreError::InvalidStageGraph(format!(
                        "non-root node {i} has no parent"
                    )));
                }
            }
        }
        for &(a, b) in &self.edges {
            if self.stage_of[a as usize] >= self.stage_of[b as usize] {
                return Err(CoreError::InvalidStageGraph(format!(
                    "edge ({a},{b}) does not advance stage"
                )));
            }
        }
        Ok(())
    }

    pub fn n_stages(&self) -> u32 {
        self.stage_of.iter().max().map_or(0, |m| m + 1)
    }

    /// Node indices of stage `s`, in index order.
    pub fn stage_nodes(&self, s: u32) -> impl Iterator<Item = usize> + '_ {
        self.stage_of
            .iter()
            .enumerate()
            .filter(move |&(_, &st)| st == s)
            .map(|(i, _)| i)
    }

    /// Total LLM input/output tokens across the graph.
    pub fn token_totals(&self) -> (u64, u64) {
        let mut ti = 0u64;
        let mut to = 0u64;
        for node in &self.nodes {
            if let NodeKind::Llm {
                input_len,
                output_len,
                ..
            } = node
            {
                ti += u64::from(*input_len);
                to += u64::from(*output_len);
            }
        }
        (ti, to)
    }
}

// ── Requests ────────────────────────────────────────────────────────────────

/// Goodput weights (ω_i, ω_o) applied to input and output token counts.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Weights {
    pub wi: f64,
    pub wo: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Weights { wi: 1.0, wo: 1.0 }
    }
}

impl From<[f64; 2]> for Weights {
    fn from(v: [f64; 2]) -> Self {
        Weights { wi: v[0], wo: v[1] }
    }
}

impl From<Weights> for [f64; 2] {
    fn from(w: Weights) -> Self {
        [w.wi, w.wo]
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestState {
    Queued,
    Running,
    Preempted,
    Done,
    Dropped,
}

/// One serving request. `true_output_len` is ground truth visible only to the
/// engine and the offline oracle — schedulers see estimator bounds instead.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub arrival: TimeMicros,
    pub input_len: u32,
    pub true_output_len: u32,
    pub slo: SloClass,
    pub app_tag: String,
    /// Present iff `slo` is `Compound`.
    pub stage_graph: Option<StageGraph>,
    pub weights: Weights,
    pub generated: u32,
    pub state: RequestState,
}

impl Request {
    pub fn new(
        id: u64,
        arrival: TimeMicros,
        input_len: u32,
        true_output_len: u32,
        slo: SloClass,
        app_tag: impl Into<String>,
    ) -> Self {
        Request {
            id,
            arrival,
            input_len,
            true_output_len,
            slo,
            app_tag: app_tag.into(),
            stage_graph: None,
            weights: Weights::default(),
            generated: 0,
            state: RequestState::Queued,
        }
    }
}

#[derive(Error, Debug, PartialEq)]
pub enum CoreError {
    #[error("nonpositive length (input_len and output_len must be >= 1)")]
    InvalidLength,
    #[error("compound request is missing its stage graph")]
    MissingStageGraph,
    #[error("non-compound request carries a stage graph")]
    UnexpectedStageGraph,
    #[error("SLO time fields must be strictly positive and finite")]
    InvalidSlo,
    #[error("goodput weights must be nonnegative and not both zero")]
    InvalidWeights,
    #[error("invalid stage graph: {0}")]
    InvalidStageGraph(String),
}

/// Check every request invariant: positive lengths, generated within bounds,
/// valid SLO constants, positive base goodput, and stage-graph presence
/// matching the SLO class.
pub fn validate_request(req: &Request) -> Result<(), CoreError> {
    if req.input_len < 1 || req.true_output_len < 1 {
        return Err(CoreError::InvalidLength);
    }
    if req.generated > req.true_output_len {
        return Err(CoreError::InvalidLength);
    }
    if !req.slo.is_valid() {
        return Err(CoreError::InvalidSlo);
    }
    if req.weights.wi < 0.0 || req.weights.wo < 0.0 || (req.weights.wi == 0.0 && req.weights.wo == 0.0)
    {
        return Err(CoreError::InvalidWeights);
    }
    match (&req.slo, &req.stage_graph) {
        (SloClass::Compound { .. }, None) => return Err(CoreError::MissingStageGraph),
        (SloClass::Compound { .. }, Some(g)) => g.check()?,
        (_, Some(_)) => return Err(CoreError::UnexpectedStageGraph),
        (_, None) => {}
    }
    Ok(())
}

/// Base goodput R = ω_i·L_i + ω_o·L_o.
pub fn base_goodput(req: &Request) -> f64 {
    req.weights.wi * f64::from(req.input_len) + req.weights.wo * f64::from(req.true_output_len)
}

// ── Replicas ────────────────────────────────────────────────────────────────

/// One model replica: a baseline per-token speed and a batch capacity.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct ModelReplica {
    pub replica_id: u32,
    /// Baseline seconds per generated token (refined online by measurement).
    pub v_token_s: f64,
    /// Maximum concurrent batch slots.
    pub b_max: usize,
}

impl ModelReplica {
    pub fn is_valid(&self) -> bool {
        self.v_token_s > 0.0 && self.b_max >= 1
    }
}

// ── Simulation events ───────────────────────────────────────────────────────

/// Discrete-event payloads. At equal timestamps events order by variant rank
/// (the declaration order below), then by `key`, then by push sequence — a
/// total order that makes every simulation replayable bit-for-bit.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SimEvent {
    /// A schedulable unit becomes visible to the scheduler.
    Arrival { unit: u64 },
    /// A replica reached a frame boundary: full rescheduling allowed.
    FrameBoundary { replica: u32 },
    /// A replica finished one batched iteration.
    IterationComplete { replica: u32 },
    /// An external tool node of a compound request finished.
    ToolComplete { compound: u64, node: u32 },
    /// Waiting-time admission check for one unit.
    AdmissionSweep { unit: u64 },
}

impl SimEvent {
    pub fn rank(&self) -> u8 {
        match self {
            SimEvent::Arrival { .. } => 0,
            SimEvent::FrameBoundary { .. } => 1,
            SimEvent::IterationComplete { .. } => 2,
            SimEvent::ToolComplete { .. } => 3,
            SimEvent::AdmissionSweep { .. } => 4,
        }
    }

    pub fn key(&self) -> u64 {
        match self {
            SimEvent::Arrival { unit } | SimEvent::AdmissionSweep { unit } => *unit,
            SimEvent::FrameBoundary { replica } | SimEvent::IterationComplete { replica } => {
                u64::from(*replica)
            }
            SimEvent::ToolComplete { compound, node } => (*compound << 16) | u64::from(*node),
        }
    }
}
