//! Historical pattern graphs for compound requests: a bounded store with
//! decayed-reuse eviction, prefix-pruned Gaussian-kernel similarity matching,
//! per-stage sub-deadline amortization, and K-medoids summarization.

use crate::core::{NodeKind, TimeMicros};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug, PartialEq)]
pub enum PatternError {
    #[error("pattern graph encodes to {bytes} bytes, which exceeds the {MAX_ENCODED_BYTES}-byte cap")]
    OversizedPattern { bytes: usize },
    #[error("no stored pattern survives prefix pruning")]
    NoMatch,
    #[error("store holds {got} graphs, fewer than k={k}")]
    TooFewGraphs { got: usize, k: usize },
    #[error("invalid pattern graph: {0}")]
    InvalidPattern(String),
    #[error("undecodable pattern bytes: {0}")]
    Decode(String),
}

/// Serialized-size budget per stored graph.
pub const MAX_ENCODED_BYTES: usize = 200;

// ── Pattern graphs ──────────────────────────────────────────────────────────

/// Compact record of one completed compound request: the stage DAG with
/// measured node attributes, per-stage wall times, and reuse bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternGraph {
    pub id: u64,
    pub nodes: Vec<NodeKind>,
    pub edges: Vec<(u32, u32)>,
    pub stage_of: Vec<u32>,
    /// Measured wall time per stage, seconds.
    pub stage_times_s: Vec<f64>,
    /// Measured total time; must equal the stage sum.
    pub total_s: f64,
    pub reuse_score: f64,
    pub last_touch: TimeMicros,
}

impl PatternGraph {
    pub fn n_stages(&self) -> usize {
        self.stage_times_s.len()
    }

    fn check(&self) -> Result<(), PatternError> {
        if self.nodes.is_empty() || self.nodes.len() != self.stage_of.len() {
            return Err(PatternError::InvalidPattern(
                "node/stage arrays inconsistent".into(),
            ));
        }
        let n_stages = self.stage_of.iter().max().map_or(0, |m| m + 1) as usize;
        if n_stages != self.stage_times_s.len() {
            return Err(PatternError::InvalidPattern(
                "stage_times length mismatch".into(),
            ));
        }
        let sum: f64 = self.stage_times_s.iter().sum();
        if self.total_s <= 0.0 || ((sum - self.total_s) / self.total_s).abs() > 1e-6 {
            return Err(PatternError::InvalidPattern(format!(
                "stage times sum {sum} != total {}",
                self.total_s
            )));
        }
        Ok(())
    }

    /// Compact binary encoding used for the per-graph size budget and the
    /// on-wire form. Lengths saturate at u16, times at u32 milliseconds.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        out.push(1u8); // format version
        out.push(self.nodes.len().min(255) as u8);
        out.push(self.edges.len().min(255) as u8);
        out.push(self.stage_times_s.len().min(255) as u8);
        for (node, &stage) in self.nodes.iter().zip(&self.stage_of) {
            out.push(stage.min(255) as u8);
            match *node {
                NodeKind::Llm {
                    model_id,
                    input_len,
                    output_len,
                } => {
                    out.push(0u8);
                    out.push(model_id.min(255) as u8);
                    out.extend((input_len.min(u16::MAX as u32) as u16).to_le_bytes());
                    out.extend((output_len.min(u16::MAX as u32) as u16).to_le_bytes());
                }
                NodeKind::Tool {
                    tool_id,
                    exec_time_s,
                } => {
                    out.push(1u8);
                    out.push(tool_id.min(255) as u8);
                    let ms = (exec_time_s * 1e3).round().clamp(0.0, u32::MAX as f64) as u32;
                    out.extend(ms.to_le_bytes());
                }
            }
        }
        for &(a, b) in &self.edges {
            out.push(a.min(255) as u8);
            out.push(b.min(255) as u8);
        }
        for &t in &self.stage_times_s {
            let ms = (t * 1e3).round().clamp(0.0, u32::MAX as f64) as u32;
            out.extend(ms.to_le_bytes());
        }
        out
    }

    /// Decode the compact form. Tolerates any byte soup with an error, never
    /// a panic (fuzzed).
    pub fn decode(bytes: &[u8]) -> Result<PatternGraph, PatternError> {
        let err = |m: &str| PatternError::Decode(m.to_string());
        let mut at = 0usize;
        let mut take = |n: usize| -> Result<&[u8], PatternError> {
            let s = bytes
                .get(at..at + n)
                .ok_or_else(|| err("truncated"))?;
            at += n;
            Ok(s)
        };
        let header = take(4)?;
        if header[0] != 1 {
            return Err(err("unknown version"));
        }
        let (n_nodes, n_edges, n_stages) =
            (header[1] as usize, header[2] as usize, header[3] as usize);
        let mut nodes = Vec::with_capacity(n_nodes);
        let mut stage_of = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let meta = take(2)?;
            stage_of.push(u32::from(meta[0]));
            match meta[1] {
                0 => {
                    let body = take(5)?;
                    nodes.push(NodeKind::Llm {
                        model_id: u32::from(body[0]),
                        input_len: u32::from(u16::from_le_bytes([body[1], body[2]])),
                        output_len: u32::from(u16::from_le_bytes([body[3], body[4]])),
                    });
                }
                1 => {
                    let body = take(5)?;
                    let ms = u32::from_le_bytes([body[1], body[2], body[3], body[4]]);
                    nodes.push(NodeKind::Tool {
                        tool_id: u32::from(body[0]),
                        exec_time_s: f64::from(ms) / 1e3,
                    });
                }
                _ => return Err(err("unknown node tag")),
            }
        }
        let mut edges = Vec::with_capacity(n_edges);
        for _ in 0..n_edges {
            let e = take(2)?;
            if usize::from(e[0]) >= n_nodes || usize::from(e[1]) >= n_nodes {
                return Err(err("edge endpoint out of range"));
            }
            edges.push((u32::from(e[0]), u32::from(e[1])));
        }
        let mut stage_times_s = Vec::with_capacity(n_stages);
        for _ in 0..n_stages {
            let t = take(4)?;
            stage_times_s.push(f64::from(u32::from_le_bytes([t[0], t[1], t[2], t[3]])) / 1e3);
        }
        let graph = PatternGraph {
            id: 0,
            nodes,
            edges,
            stage_of,
            stage_times_s: stage_times_s.clone(),
            total_s: stage_times_s.iter().sum(),
            reuse_score: 1.0,
            last_touch: TimeMicros::ZERO,
        };
        graph.check().map_err(|e| err(&e.to_string()))?;
        Ok(graph)
    }
}

// ── Similarity kernels ──────────────────────────────────────────────────────

/// Relative-bandwidth Gaussian kernel: σ = max(0.25·max(x_a, x_b), 1).
fn kernel(xa: f64, xb: f64) -> f64 {
    let sigma = (0.25 * xa.max(xb)).max(1.0);
    (-(xa - xb).powi(2) / (2.0 * sigma * sigma)).exp()
}

/// Similarity of two nodes at the same position: 0 when kinds or identities
/// differ, otherwise a Gaussian kernel over output length (LLM) or execution
/// time (tool).
pub fn node_similarity(a: &NodeKind, b: &NodeKind) -> f64 {
    match (a, b) {
        (
            NodeKind::Llm {
                model_id: ma,
                output_len: oa,
                ..
            },
            NodeKind::Llm {
                model_id: mb,
                output_len: ob,
                ..
            },
        ) => {
            if ma != mb {
                0.0
            } else {
                kernel(f64::from(*oa), f64::from(*ob))
            }
        }
        (
            NodeKind::Tool {
                tool_id: ta,
                exec_time_s: ea,
            },
            NodeKind::Tool {
                tool_id: tb,
                exec_time_s: eb,
            },
        ) => {
            if ta != tb {
                0.0
            } else {
                kernel(*ea, *eb)
            }
        }
        _ => 0.0,
    }
}

/// Similarity of two edges at the same position: Gaussian kernel over the
/// child's input length (LLM children; tool children carry no input and
/// compare equal).
pub fn edge_similarity(child_a: &NodeKind, child_b: &NodeKind) -> f64 {
    let input_of = |n: &NodeKind| match *n {
        NodeKind::Llm { input_len, .. } => f64::from(input_len),
        NodeKind::Tool { .. } => 0.0,
    };
    kernel(input_of(child_a), input_of(child_b))
}

/// Structural identity of the first `stages` stages: same node count, kinds,
/// and identities per stage (in node order), same prefix edge set.
fn prefix_identical(a: &PatternGraph, b: &PatternGraph, stages: u32) -> bool {
    let ids = |g: &PatternGraph, s: u32| -> Vec<(usize, u8, u32)> {
        g.stage_of
            .iter()
            .enumerate()
            .filter(|&(_, &st)| st == s)
            .map(|(i, _)| match g.nodes[i] {
                NodeKind::Llm { model_id, .. } => (i, 0u8, model_id),
                NodeKind::Tool { tool_id, .. } => (i, 1u8, tool_id),
            })
            .collect()
    };
    for s in 0..stages {
        let ia = ids(a, s);
        let ib = ids(b, s);
        if ia.len() != ib.len() {
            return false;
        }
        if ia
            .iter()
            .zip(&ib)
            .any(|((_, ka, ma), (_, kb, mb))| ka != kb || ma != mb)
        {
            return false;
        }
    }
    let prefix_edges = |g: &PatternGraph| -> Vec<(u32, u32)> {
        let mut e: Vec<(u32, u32)> = g
            .edges
            .iter()
            .copied()
            .filter(|&(_, b)| g.stage_of[b as usize] < stages)
            .collect();
        e.sort_unstable();
        e
    };
    prefix_edges(a) == prefix_edges(b)
}

/// Mean node+edge kernel similarity over the first `stages` stages of two
/// prefix-identical graphs.
fn prefix_similarity(a: &PatternGraph, b: &PatternGraph, stages: u32) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    let nodes_of = |g: &PatternGraph, s: u32| -> Vec<usize> {
        g.stage_of
            .iter()
            .enumerate()
            .filter(|&(_, &st)| st == s)
            .map(|(i, _)| i)
            .collect()
    };
    for s in 0..stages {
        for (&ia, &ib) in nodes_of(a, s).iter().zip(nodes_of(b, s).iter()) {
            total += node_similarity(&a.nodes[ia], &b.nodes[ib]);
            count += 1;
        }
    }
    let mut ea: Vec<(u32, u32)> = a
        .edges
        .iter()
        .copied()
        .filter(|&(_, child)| a.stage_of[child as usize] < stages)
        .collect();
    ea.sort_unstable();
    let mut eb: Vec<(u32, u32)> = b
        .edges
        .iter()
        .copied()
        .filter(|&(_, child)| b.stage_of[child as usize] < stages)
        .collect();
    eb.sort_unstable();
    for (&(_, ca), &(_, cb)) in ea.iter().zip(eb.iter()) {
        total += edge_similarity(&a.nodes[ca as usize], &b.nodes[cb as usize]);
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Whole-graph similarity: 0 unless fully structurally identical, else the
/// mean kernel over all nodes and edges. Used for dedup and clustering.
pub fn full_similarity(a: &PatternGraph, b: &PatternGraph) -> f64 {
    let sa = a.n_stages() as u32;
    if sa != b.n_stages() as u32 || !prefix_identical(a, b, sa) {
        return 0.0;
    }
    prefix_similarity(a, b, sa)
}

// ── Store ───────────────────────────────────────────────────────────────────

/// Best match for a partially revealed compound request.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pattern_id: u64,
    /// Mean prefix similarity in [0, 1].
    pub similarity: f64,
    pub matched_prefix_stages: u32,
}

/// Bounded, reuse-decayed collection of pattern graphs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternStore {
    graphs: Vec<PatternGraph>,
    pub medoids: Vec<u64>,
    pub decay_per_hour: f64,
    pub eviction_threshold: f64,
    pub cap: usize,
    next_id: u64,
}

impl Default for PatternStore {
    fn default() -> Self {
        PatternStore {
            graphs: Vec::new(),
            medoids: Vec::new(),
            decay_per_hour: 0.9,
            eviction_threshold: 0.05,
            cap: 2000,
            next_id: 0,
        }
    }
}

impl PatternStore {
    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&PatternGraph> {
        self.graphs.iter().find(|g| g.id == id)
    }

    /// Insert a completed graph. An incoming graph identical (similarity 1.0)
    /// to a stored one bumps that graph's reuse score instead of duplicating
    /// it. The store stays within `cap` by evicting the lowest-reuse graph.
    pub fn ingest(&mut self, mut completed: PatternGraph) -> Result<(), PatternError> {
        completed.check()?;
        let bytes = completed.encode().len();
        if bytes >= MAX_ENCODED_BYTES {
            return Err(PatternError::OversizedPattern { bytes });
        }
        if let Some(existing) = self
            .graphs
            .iter_mut()
            .find(|g| full_similarity(g, &completed) == 1.0)
        {
            existing.reuse_score += 1.0;
            existing.last_touch = existing.last_touch.max(completed.last_touch);
            return Ok(());
        }
        completed.id = self.next_id;
        self.next_id += 1;
        completed.reuse_score = 1.0;
        self.graphs.push(completed);
        while self.graphs.len() > self.cap {
            let victim = self
                .graphs
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    a.reuse_score
                        .partial_cmp(&b.reuse_score)
                        .unwrap()
                        .then(a.last_touch.cmp(&b.last_touch))
                        .then(a.id.cmp(&b.id))
                })
                .map(|(i, _)| i)
                .unwrap();
            let gone = self.graphs.remove(victim);
            self.medoids.retain(|&m| m != gone.id);
        }
        Ok(())
    }

    /// Match a partially revealed compound request (its graph truncated to
    /// completed stages, with measured attributes) against the store.
    ///
    /// Candidates whose identity prefix diverges at any revealed stage are
    /// pruned outright; survivors are scored by mean prefix similarity. Ties
    /// break toward higher reuse, then lower id.
    pub fn find_match(&self, partial: &PatternGraph) -> Result<MatchResult, PatternError> {
        let revealed = partial.n_stages() as u32;
        assert!(revealed >= 1, "need at least one completed stage");
        let mut best: Option<MatchResult> = None;
        for g in &self.graphs {
            if (g.n_stages() as u32) < revealed || !prefix_identical(g, partial, revealed) {
                continue;
            }
            let similarity = prefix_similarity(g, partial, revealed);
            let cand = MatchResult {
                pattern_id: g.id,
                similarity,
                matched_prefix_stages: revealed,
            };
            let better = match &best {
                None => true,
                Some(b) => {
                    similarity > b.similarity
                        || (similarity == b.similarity && {
                            let rb = self.get(b.pattern_id).unwrap().reuse_score;
                            g.reuse_score > rb
                                || (g.reuse_score == rb && g.id < b.pattern_id)
                        })
                }
            };
            if better {
                best = Some(cand);
            }
        }
        best.ok_or(PatternError::NoMatch)
    }

    /// Decay reuse scores by `decay_per_hour^hours` since each graph's last
    /// touch, then evict everything below the threshold. Returns the number
    /// evicted.
    pub fn decay_evict(&mut self, now: TimeMicros) -> usize {
        for g in &mut self.graphs {
            let hours = (now.saturating_sub(g.last_touch).0.max(0)) as f64 / 3.6e9;
            if hours > 0.0 {
                g.reuse_score *= self.decay_per_hour.powf(hours);
                g.last_touch = now;
            }
        }
        let threshold = self.eviction_threshold;
        let before = self.graphs.len();
        self.graphs.retain(|g| g.reuse_score >= threshold);
        let kept: Vec<u64> = self.graphs.iter().map(|g| g.id).collect();
        self.medoids.retain(|m| kept.contains(m));
        before - self.graphs.len()
    }

    /// K-medoids (PAM: greedy BUILD then best-improvement SWAP) over distance
    /// 1 − full_similarity. Deterministic; ties break toward lower index.
    /// Updates and returns the store's medoid set.
    pub fn cluster(&mut self, k: usize) -> Result<Vec<u64>, PatternError> {
        let n = self.graphs.len();
        if n < k || k == 0 {
            return Err(PatternError::TooFewGraphs { got: n, k });
        }
        // Dense distance matrix; stores are capped so this stays small.
        let mut dist = vec![0.0f64; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = 1.0 - full_similarity(&self.graphs[i], &self.graphs[j]);
                dist[i * n + j] = d;
                dist[j * n + i] = d;
            }
        }
        let cost = |medoids: &[usize]| -> f64 {
            (0..n)
                .map(|i| {
                    medoids
                        .iter()
                        .map(|&m| dist[i * n + m])
                        .fold(f64::INFINITY, f64::min)
                })
                .sum()
        };

        // BUILD: greedily add the medoid lowering total cost most.
        let mut medoids: Vec<usize> = Vec::with_capacity(k);
        for _ in 0..k {
            let mut best_add = usize::MAX;
            let mut best_cost = f64::INFINITY;
            for cand in 0..n {
                if medoids.contains(&cand) {
                    continue;
                }
                medoids.push(cand);
                let c = cost(&medoids);
                medoids.pop();
                if c < best_cost {
                    best_cost = c;
                    best_add = cand;
                }
            }
            medoids.push(best_add);
        }

        // SWAP: repeat best single medoid↔non-medoid exchange while it helps.
        let mut current = cost(&medoids);
        loop {
            let mut best_swap: Option<(usize, usize, f64)> = None;
            for mi in 0..medoids.len() {
                for cand in 0..n {
                    if medoids.contains(&cand) {
                        continue;
                    }
                    let old = medoids[mi];
                    medoids[mi] = cand;
                    let c = cost(&medoids);
                    medoids[mi] = old;
                    if c + 1e-12 < current
                        && best_swap.map_or(true, |(_, _, bc)| c < bc)
                    {
                        best_swap = Some((mi, cand, c));
                    }
                }
            }
            match best_swap {
                Some((mi, cand, c)) => {
                    medoids[mi] = cand;
                    current = c;
                }
                None => break,
            }
        }
        medoids.sort_unstable();
        self.medoids = medoids.iter().map(|&i| self.graphs[i].id).collect();
        Ok(self.medoids.clone())
    }

    /// One graph per line, for persistence across runs.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for g in &self.graphs {
            out.push_str(&serde_json::to_string(g).expect("pattern serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<PatternStore, PatternError> {
        let mut store = PatternStore::default();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let g: PatternGraph = serde_json::from_str(line)
                .map_err(|e| PatternError::Decode(format!("line {}: {e}", lineno + 1)))?;
            g.check()?;
            store.next_id = store.next_id.max(g.id + 1);
            store.graphs.push(g);
        }
        Ok(store)
    }

    pub fn iter(&self) -> impl Iterator<Item = &PatternGraph> {
        self.graphs.iter()
    }
}

// ── Sub-deadline amortization ───────────────────────────────────────────────

/// Cumulative share of execution time through stage `s`: φ(s) = t_≤s / t_total.
pub fn stage_share(pattern: &PatternGraph, s: usize) -> f64 {
    assert!(s < pattern.n_stages());
    let upto: f64 = pattern.stage_times_s[..=s].iter().sum();
    upto / pattern.total_s
}

/// How a compound deadline `D` is amortized into per-stage sub-deadlines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SubDeadlineMode {
    /// φ(s)·D, an absolute offset from the compound's start.
    #[default]
    CumulativeShare,
    /// (t_s/t_total)·D, a budget for stage `s` from its release.
    PerStageShare,
    /// (t_s/t_≥s)·D, a budget weighted by the stage's share of remaining work.
    RemainingShare,
}

/// Sub-deadline allotment for stage `s` under `mode`. CumulativeShare values
/// are offsets from the compound's start; the other modes yield per-stage
/// budgets from stage release. Every mode returns a value ≤ D.
pub fn sub_deadline(pattern: &PatternGraph, s: usize, d: f64, mode: SubDeadlineMode) -> f64 {
    assert!(d > 0.0 && s < pattern.n_stages());
    match mode {
        SubDeadlineMode::CumulativeShare => stage_share(pattern, s) * d,
        SubDeadlineMode::PerStageShare => pattern.stage_times_s[s] / pattern.total_s * d,
        SubDeadlineMode::RemainingShare => {
            let rem: f64 = pattern.stage_times_s[s..].iter().sum();
            pattern.stage_times_s[s] / rem * d
        }
    }
}
