//! Batch scheduling policies. The headline policy ("GMAX") ranks requests by
//! deemed goodput per unit of remaining generation time, filters by a cutoff
//! relative to the B-th highest priority, then picks the contiguous window of
//! length-sorted candidates with the best total priority — grouping requests
//! of similar context length so batchmates slow each other down as little as
//! possible. Starvation is prevented by inflating deemed goodput per frame
//! waited; preemption must clear both a net-gain and a ratio margin.
//!
//! Baselines: FCFS, preemptive EDF, oracle SJF (true remaining length,
//! labelled as such), predicted-shortest-first, and least-attained-service.

use crate::core::{SloClass, TimeMicros, Weights};
use crate::estimator::LengthBound;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Denominator guard for priority ratios, in seconds.
pub const EPSILON_S: f64 = 1e-6;

#[derive(Error, Debug, PartialEq)]
pub enum SchedError {
    #[error("request can no longer meet its SLO")]
    ExpiredSlo,
    #[error("cannot select from an empty queue")]
    EmptyQueue,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Gmax,
    Fcfs,
    Edf,
    SjfOracle,
    LtrPredicted,
    Plas,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Gmax => "gmax",
            PolicyKind::Fcfs => "fcfs",
            PolicyKind::Edf => "edf",
            PolicyKind::SjfOracle => "sjf_oracle",
            PolicyKind::LtrPredicted => "ltr_predicted",
            PolicyKind::Plas => "plas",
        }
    }
}

// ── Scheduler-visible request snapshot ──────────────────────────────────────

/// Everything the engine exposes about one schedulable unit. Fields marked
/// oracle-only exist for labelled oracle baselines; honest policies must not
/// read them.
#[derive(Clone, Debug)]
pub struct UnitView {
    pub id: u64,
    pub arrival: TimeMicros,
    pub input_len: u32,
    pub generated: u32,
    pub slo: SloClass,
    pub weights: Weights,
    pub bound: LengthBound,
    /// Absolute advisory sub-deadline of the compound's current stage.
    pub sub_deadline_abs: Option<TimeMicros>,
    /// Stage-aggregated (remaining tokens, achievable goodput) for compound
    /// units; single requests leave this empty.
    pub stage_agg: Option<(u32, f64)>,
    pub frames_waited: u32,
    /// KV footprint in tokens (preemption swap cost).
    pub kv_tokens: u32,
    /// Oracle-only: true remaining output tokens.
    pub oracle_rem: u32,
    /// Estimator median of total output length.
    pub median_total: u32,
    /// Attained service in tokens, aggregated across the whole program.
    pub attained: u64,
}

impl UnitView {
    pub fn context_len(&self) -> u32 {
        self.input_len + self.generated
    }

    /// Absolute deadline used by the EDF baseline: the SLO timeline end for
    /// latency-sensitive requests, the end-to-end deadline otherwise.
    pub fn deadline_abs(&self) -> TimeMicros {
        match self.slo {
            SloClass::LatencySensitive { ttft_s, tbt_s } => {
                self.arrival
                    + TimeMicros::from_secs_f64(
                        ttft_s + f64::from(self.bound.total_upper) * tbt_s,
                    )
            }
            SloClass::DeadlineSensitive { e2el_s } | SloClass::Compound { e2el_s } => {
                self.arrival + TimeMicros::from_secs_f64(e2el_s)
            }
            SloClass::BestEffort { default_deadline_s } => {
                self.arrival + TimeMicros::from_secs_f64(default_deadline_s)
            }
        }
    }
}

// ── Per-request analysis ────────────────────────────────────────────────────

/// Scheduling estimate for one unit at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RequestEstimate {
    pub id: u64,
    pub arrival: TimeMicros,
    pub context_len: u32,
    /// Upper-bound remaining output tokens (stage-aggregated for compound).
    pub len_rem: u32,
    /// len_rem · v_token.
    pub t_gen_s: f64,
    /// Time to the SLO boundary.
    pub t_rem_s: f64,
    /// Serving bandwidth t_gen / t_rem.
    pub bw: f64,
    /// Deemed achievable goodput on on-time completion.
    pub goodput: f64,
    /// goodput / (t_gen + ε).
    pub priority: f64,
    pub frames_waited: u32,
    pub kv_tokens: u32,
    pub replica_id: u32,
}

/// Compute the scheduling estimate for one unit on one replica.
///
/// `Err(ExpiredSlo)` means the deadline (or sub-deadline-bearing timeline) has
/// already passed; the caller decides what a dead request still deserves —
/// the engine demotes to zero-goodput best-effort. Best-effort requests never
/// expire: once past their default horizon they get a fresh one, keeping
/// every priority finite.
pub fn analyze(
    view: &UnitView,
    now: TimeMicros,
    v_token_s: f64,
    replica_id: u32,
) -> Result<RequestEstimate, SchedError> {
    let len_rem = match view.stage_agg {
        Some((rem, _)) => rem,
        None => view.bound.total_upper.saturating_sub(view.generated),
    };
    let t_gen_s = f64::from(len_rem) * v_token_s;

    let deadline_abs = match view.slo {
        SloClass::LatencySensitive { ttft_s, tbt_s } => {
            view.arrival
                + TimeMicros::from_secs_f64(ttft_s + f64::from(view.bound.total_upper) * tbt_s)
        }
        SloClass::DeadlineSensitive { e2el_s } => {
            view.arrival + TimeMicros::from_secs_f64(e2el_s)
        }
        SloClass::Compound { e2el_s } => view
            .sub_deadline_abs
            .unwrap_or(view.arrival + TimeMicros::from_secs_f64(e2el_s)),
        SloClass::BestEffort { default_deadline_s } => {
            let nominal = view.arrival + TimeMicros::from_secs_f64(default_deadline_s);
            if nominal <= now {
                now + TimeMicros::from_secs_f64(default_deadline_s)
            } else {
                nominal
            }
        }
    };
    let t_rem_s = (deadline_abs - now).as_secs_f64();
    if t_rem_s <= 0.0 && !matches!(view.slo, SloClass::BestEffort { .. }) {
        return Err(SchedError::ExpiredSlo);
    }

    let goodput = match view.slo {
        SloClass::LatencySensitive { .. } => {
            view.weights.wo * f64::from(view.bound.total_upper)
        }
        SloClass::DeadlineSensitive { .. } => {
            view.weights.wi * f64::from(view.input_len)
                + view.weights.wo * f64::from(view.bound.total_upper)
        }
        SloClass::Compound { .. } => match view.stage_agg {
            Some((_, g)) => g,
            None => {
                view.weights.wi * f64::from(view.input_len)
                    + view.weights.wo * f64::from(view.bound.total_upper)
            }
        },
        SloClass::BestEffort { .. } => 0.0,
    };

    Ok(RequestEstimate {
        id: view.id,
        arrival: view.arrival,
        context_len: view.context_len(),
        len_rem,
        t_gen_s,
        t_rem_s,
        bw: t_gen_s / t_rem_s,
        goodput,
        priority: goodput / (t_gen_s + EPSILON_S),
        frames_waited: view.frames_waited,
        kv_tokens: view.kv_tokens,
        replica_id,
    })
}

/// Anti-starvation: inflate deemed goodput by `δ_starve` per frame waited and
/// recompute the priority. Unbounded additive growth guarantees any waiting
/// request eventually outranks any fixed priority gap.
pub fn starvation_inflate(est: &RequestEstimate, delta_starve: f64) -> RequestEstimate {
    let goodput = est.goodput + delta_starve * f64::from(est.frames_waited);
    RequestEstimate {
        goodput,
        priority: goodput / (est.t_gen_s + EPSILON_S),
        ..*est
    }
}

// ── Group selection ─────────────────────────────────────────────────────────

/// A scheduling decision: which units hold batch slots next frame, and which
/// running units are evicted to make room.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub selected: Vec<u64>,
    pub preempted: Vec<u64>,
    pub frame_index: u64,
}

/// Pick the batch group: take the B-th highest priority as the bar, keep
/// candidates within the cutoff fraction `p` of it, sort them by context
/// length, and slide a window of size min(B, #candidates) maximizing total
/// priority. Ties break toward the window whose first element arrived
/// earliest, then lowest id, then leftmost window.
pub fn select_group(
    queue: &[RequestEstimate],
    b: usize,
    p: f64,
    frame_index: u64,
) -> Result<BatchPlan, SchedError> {
    assert!(b >= 1 && p > 0.0 && p <= 1.0);
    if queue.is_empty() {
        return Err(SchedError::EmptyQueue);
    }
    let mut priorities: Vec<f64> = queue.iter().map(|e| e.priority).collect();
    priorities.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let bar = priorities[b.min(priorities.len()) - 1];
    let cut = p * bar;

    let mut candidates: Vec<&RequestEstimate> =
        queue.iter().filter(|e| e.priority >= cut).collect();
    candidates.sort_by(|a, b| {
        a.context_len
            .cmp(&b.context_len)
            .then(a.arrival.cmp(&b.arrival))
            .then(a.id.cmp(&b.id))
    });

    let w = b.min(candidates.len());
    let mut prefix = vec![0.0f64; candidates.len() + 1];
    for (i, e) in candidates.iter().enumerate() {
        prefix[i + 1] = prefix[i] + e.priority;
    }
    let mut best_start = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for start in 0..=(candidates.len() - w) {
        let score = prefix[start + w] - prefix[start];
        let better = score > best_score
            || (score == best_score && {
                let cur = candidates[start];
                let inc = candidates[best_start];
                cur.arrival < inc.arrival || (cur.arrival == inc.arrival && cur.id < inc.id)
            });
        if better {
            best_score = score;
            best_start = start;
        }
    }
    Ok(BatchPlan {
        selected: candidates[best_start..best_start + w]
            .iter()
            .map(|e| e.id)
            .collect(),
        preempted: Vec::new(),
        frame_index,
    })
}

/// Gate the proposed group against what is already running. An eviction
/// (r_out for r_in) survives only when the frame-amortized goodput gain
/// exceeds the swap stall's goodput loss *and* the incomer's deemed goodput
/// clears the outgoing one by the margin `1 + δ_pmtn`. Free slots are filled
/// without any gate; running units never get evicted for nothing, and each
/// challenger may displace at most one victim.
#[allow(clippy::too_many_arguments)]
pub fn preemption_check(
    running: &[RequestEstimate],
    candidates: &[RequestEstimate],
    plan: &BatchPlan,
    b: usize,
    io_bandwidth_tok_s: f64,
    gen_speed_tok_s: f64,
    delta_pmtn: f64,
    frame_delta_s: f64,
) -> BatchPlan {
    let goodput_delta = |e: &RequestEstimate| e.goodput / e.t_rem_s * frame_delta_s;
    let mut selected: Vec<u64> = running
        .iter()
        .filter(|e| plan.selected.contains(&e.id))
        .map(|e| e.id)
        .collect();
    let mut victims: Vec<&RequestEstimate> = running
        .iter()
        .filter(|e| !plan.selected.contains(&e.id))
        .collect();
    victims.sort_by(|a, b| {
        a.priority
            .partial_cmp(&b.priority)
            .unwrap()
            .then(b.id.cmp(&a.id))
    });
    let mut evicted = Vec::new();
    let mut free = b.saturating_sub(running.len());

    for &cand_id in &plan.selected {
        if running.iter().any(|e| e.id == cand_id) {
            continue;
        }
        let Some(est_in) = candidates.iter().find(|e| e.id == cand_id) else {
            continue;
        };
        if free > 0 {
            selected.push(cand_id);
            free -= 1;
            continue;
        }
        let mut taken = None;
        for (vi, out) in victims.iter().enumerate() {
            let stall_s = f64::from(out.kv_tokens) / io_bandwidth_tok_s;
            let loss = stall_s * gen_speed_tok_s;
            let gain = goodput_delta(est_in) - goodput_delta(out);
            if gain > loss && est_in.goodput > (1.0 + delta_pmtn) * out.goodput {
                taken = Some(vi);
                break;
            }
        }
        if let Some(vi) = taken {
            evicted.push(victims.remove(vi).id);
            selected.push(cand_id);
        }
    }
    for v in victims {
        selected.push(v.id);
    }
    BatchPlan {
        selected,
        preempted: evicted,
        frame_index: plan.frame_index,
    }
}

// ── Multi-replica dispatch and fairness ─────────────────────────────────────

/// Power-of-K dispatch: analyze the unit against K candidate replicas
/// (sampled without replacement by the caller), yielding one estimate per
/// replica — faster replicas shrink t_gen and therefore raise priority. The
/// engine removes sibling estimates from every queue once one is scheduled.
pub fn expand_multi_model(
    view: &UnitView,
    now: TimeMicros,
    replicas: &[(u32, f64)], // (replica_id, v_token_s), already K-sampled
) -> Vec<Result<RequestEstimate, SchedError>> {
    replicas
        .iter()
        .map(|&(rid, v)| analyze(view, now, v, rid))
        .collect()
}

/// Convex efficiency/fairness blend: (1−f)·priority + f·fair_score.
pub fn blend_fairness(priority: f64, fair_score: f64, f: f64) -> f64 {
    assert!((0.0..=1.0).contains(&f));
    (1.0 - f) * priority + f * fair_score
}

// ── Baselines ───────────────────────────────────────────────────────────────

/// Order the queue under a baseline policy and take the top `b`.
///
/// EDF breaks deadline ties toward the smaller remaining service estimate:
/// when two requests are equally urgent, running the shorter one first is the
/// only order in which both can still finish.
pub fn policy_order(
    policy: PolicyKind,
    queue: &[UnitView],
    _now: TimeMicros,
    b: usize,
) -> Vec<u64> {
    assert!(policy != PolicyKind::Gmax, "gmax uses select_group");
    let mut idx: Vec<usize> = (0..queue.len()).collect();
    match policy {
        PolicyKind::Fcfs => idx.sort_by(|&a, &b| {
            queue[a]
                .arrival
                .cmp(&queue[b].arrival)
                .then(queue[a].id.cmp(&queue[b].id))
        }),
        PolicyKind::Edf => idx.sort_by(|&a, &b| {
            let rem = |v: &UnitView| v.bound.total_upper.saturating_sub(v.generated);
            queue[a]
                .deadline_abs()
                .cmp(&queue[b].deadline_abs())
                .then(rem(&queue[a]).cmp(&rem(&queue[b])))
                .then(queue[a].id.cmp(&queue[b].id))
        }),
        PolicyKind::SjfOracle => idx.sort_by(|&a, &b| {
            queue[a]
                .oracle_rem
                .cmp(&queue[b].oracle_rem)
                .then(queue[a].id.cmp(&queue[b].id))
        }),
        PolicyKind::LtrPredicted => idx.sort_by(|&a, &b| {
            let rem = |v: &UnitView| v.median_total.saturating_sub(v.generated);
            rem(&queue[a])
                .cmp(&rem(&queue[b]))
                .then(queue[a].id.cmp(&queue[b].id))
        }),
        PolicyKind::Plas => idx.sort_by(|&a, &b| {
            queue[a]
                .attained
                .cmp(&queue[b].attained)
                .then(queue[a].id.cmp(&queue[b].id))
        }),
        PolicyKind::Gmax => unreachable!(),
    }
    idx.into_iter().take(b).map(|i| queue[i].id).collect()
}

// ── Online cutoff adaptation ────────────────────────────────────────────────

/// Epsilon-greedy adaptation of the cutoff `p` over a fixed grid, scored by
/// goodput earned during each evaluation window.
#[derive(Clone, Debug)]
pub struct CutoffAdapter {
    grid: Vec<f64>,
    score_sum: Vec<f64>,
    score_n: Vec<u32>,
    current: usize,
    epsilon: f64,
    rng: rand_chacha::ChaCha8Rng,
}

impl CutoffAdapter {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        CutoffAdapter {
            grid: vec![0.8, 0.9, 0.95, 1.0],
            score_sum: vec![0.0; 4],
            score_n: vec![0; 4],
            current: 2, // start at 0.95
            epsilon: 0.1,
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xc0ff_ee00),
        }
    }

    pub fn current_p(&self) -> f64 {
        self.grid[self.current]
    }

    /// Record the goodput earned since the last call and pick the next arm.
    pub fn observe_window(&mut self, window_goodput: f64) {
        use rand::Rng;
        self.score_sum[self.current] += window_goodput;
        self.score_n[self.current] += 1;
        if self.rng.gen::<f64>() < self.epsilon {
            self.current = self.rng.gen_range(0..self.grid.len());
            return;
        }
        // Exploit: best mean; untried arms first.
        let mut best = 0usize;
        let mut best_mean = f64::NEG_INFINITY;
        for i in 0..self.grid.len() {
            let mean = if self.score_n[i] == 0 {
                f64::INFINITY
            } else {
                self.score_sum[i] / f64::from(self.score_n[i])
            };
            if mean > best_mean {
                best_mean = mean;
                best = i;
            }
        }
        self.current = best;
    }
}
