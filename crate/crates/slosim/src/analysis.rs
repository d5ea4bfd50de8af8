//! Executable worst-case analysis: adversarial traces on which EDF and SJF
//! collapse while the offline optimum does not, an exact branch-and-bound
//! schedule oracle for small instances, and numeric optimization of the
//! scheduler's competitive-ratio lower bound.

use crate::core::{Request, SloClass, TimeMicros, Weights};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug, PartialEq)]
pub enum AnalysisError {
    #[error("instance exceeds the {max} request oracle cap (got {got})")]
    TooLarge { got: usize, max: usize },
    #[error("invalid bound parameters: {0}")]
    InvalidParams(String),
}

// ── Small instances and the exact oracle ────────────────────────────────────

/// Hard cap on oracle instance size; branch-and-bound is exact but exponential.
pub const ORACLE_MAX_REQUESTS: usize = 12;

/// One abstract request of a small scheduling instance: release time,
/// computation demand, absolute SLO time, and the goodput earned if it
/// finishes on time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRequest {
    pub arrival_s: f64,
    pub t_comp_s: f64,
    pub t_slo_s: f64,
    pub goodput: f64,
}

/// A scheduling instance small enough for exhaustive optimization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmallInstance {
    pub n_slots: usize,
    pub requests: Vec<InstanceRequest>,
}

/// Optimal subset choice and total goodput for a [`SmallInstance`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub goodput: f64,
    /// Slot index per request, `None` when the request is left unserved.
    pub assignment: Vec<Option<usize>>,
}

/// Exact optimal on-time goodput via branch-and-bound over subset selection
/// and slot assignment.
///
/// Per-slot feasibility uses a preemptive-EDF simulation with release times,
/// which is exact for a single slot: a job set has *some* feasible schedule
/// iff earliest-deadline-first meets every deadline. Preemptive feasibility
/// also guarantees the oracle dominates every engine policy, preemptive ones
/// included. (With a common release time it coincides with the simpler
/// deadline-ordered non-preemptive check.)
pub fn oracle_schedule(inst: &SmallInstance) -> Result<OracleResult, AnalysisError> {
    let n = inst.requests.len();
    if n > ORACLE_MAX_REQUESTS {
        return Err(AnalysisError::TooLarge {
            got: n,
            max: ORACLE_MAX_REQUESTS,
        });
    }
    // Work in integer microseconds so "completes exactly at the deadline"
    // never hinges on float noise.
    #[derive(Clone, Copy)]
    struct Job {
        arrival: i64,
        comp: i64,
        deadline: i64,
        goodput: f64,
        orig: usize,
    }
    let mut jobs: Vec<Job> = inst
        .requests
        .iter()
        .enumerate()
        .map(|(i, r)| Job {
            arrival: TimeMicros::from_secs_f64(r.arrival_s).0,
            comp: TimeMicros::from_secs_f64(r.t_comp_s).0,
            deadline: TimeMicros::from_secs_f64(r.t_slo_s).0,
            goodput: r.goodput,
            orig: i,
        })
        .collect();
    // Branching in deadline order keeps per-slot sets near-EDF as they grow,
    // which makes infeasible branches fail fast.
    jobs.sort_by(|a, b| {
        a.deadline
            .cmp(&b.deadline)
            .then(a.arrival.cmp(&b.arrival))
            .then(a.orig.cmp(&b.orig))
    });

    // Preemptive EDF feasibility for one slot's job set.
    fn edf_feasible(set: &[Job]) -> bool {
        let mut rem: Vec<i64> = set.iter().map(|j| j.comp).collect();
        let mut now = i64::MIN;
        loop {
            // Earliest-deadline released unfinished job.
            let mut pick: Option<usize> = None;
            for (i, j) in set.iter().enumerate() {
                if rem[i] > 0 && j.arrival <= now {
                    if pick.map_or(true, |p| j.deadline < set[p].deadline) {
                        pick = Some(i);
                    }
                }
            }
            match pick {
                None => {
                    // Idle until the next release, or done.
                    match set
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| rem[*i] > 0)
                        .map(|(_, j)| j.arrival)
                        .min()
                    {
                        Some(next) => now = next,
                        None => return true,
                    }
                }
                Some(i) => {
                    // Run until completion or the next release.
                    let next_release = set
                        .iter()
                        .enumerate()
                        .filter(|(k, j)| rem[*k] > 0 && j.arrival > now)
                        .map(|(_, j)| j.arrival)
                        .min()
                        .unwrap_or(i64::MAX);
                    let finish = now + rem[i];
                    if finish <= next_release {
                        if finish > set[i].deadline {
                            return false;
                        }
                        rem[i] = 0;
                        now = finish;
                    } else {
                        rem[i] -= next_release - now;
                        now = next_release;
                    }
                }
            }
        }
    }

    struct Search {
        jobs: Vec<Job>,
        n_slots: usize,
        suffix_goodput: Vec<f64>,
        best: f64,
        best_assign: Vec<Option<usize>>,
    }

    impl Search {
        fn go(&mut self, idx: usize, slots: &mut Vec<Vec<Job>>, assign: &mut Vec<Option<usize>>, acc: f64) {
            if acc + self.suffix_goodput[idx] <= self.best && self.best > 0.0 {
                return;
            }
            if idx == self.jobs.len() {
                if acc > self.best {
                    self.best = acc;
                    self.best_assign = assign.clone();
                }
                return;
            }
            let job = self.jobs[idx];
            for s in 0..self.n_slots {
                slots[s].push(job);
                if edf_feasible(&slots[s]) {
                    assign[job.orig] = Some(s);
                    self.go(idx + 1, slots, assign, acc + job.goodput);
                    assign[job.orig] = None;
                }
                slots[s].pop();
                // Identical empty slots are interchangeable; trying one is enough.
                if slots[s].is_empty() {
                    break;
                }
            }
            self.go(idx + 1, slots, assign, acc);
        }
    }

    let mut suffix = vec![0.0; jobs.len() + 1];
    for i in (0..jobs.len()).rev() {
        suffix[i] = suffix[i + 1] + jobs[i].goodput;
    }
    let mut search = Search {
        jobs,
        n_slots: inst.n_slots,
        suffix_goodput: suffix,
        best: 0.0,
        best_assign: vec![None; n],
    };
    let mut slots = vec![Vec::new(); inst.n_slots];
    let mut assign = vec![None; n];
    search.go(0, &mut slots, &mut assign, 0.0);
    Ok(OracleResult {
        goodput: search.best,
        assignment: search.best_assign,
    })
}

// ── Adversarial traces ──────────────────────────────────────────────────────

/// Per-token time used when adversarial instances are lowered to engine
/// traces: 10 ms, so whole-second computation demands quantize exactly.
pub const ADVERSARY_V_TOKEN_S: f64 = 0.01;

/// An adversarial scenario in both forms: abstract (for the oracle) and as
/// engine requests (for policy simulation).
#[derive(Clone, Debug)]
pub struct AdversaryTrace {
    pub requests: Vec<Request>,
    pub instance: SmallInstance,
    /// The fixed per-token latency the engine cost model must reproduce.
    pub v_token_s: f64,
}

/// Lower one abstract request onto the engine's token model: one prefill
/// iteration plus `t_comp/v − 1` decode iterations give exactly `t_comp` of
/// slot time, and weights `(R, 0)` make its goodput exact in one multiply.
fn lower_request(id: u64, ir: &InstanceRequest, v: f64) -> Request {
    let iters = (ir.t_comp_s / v).round() as u32;
    assert!(iters >= 2, "t_comp must span at least two iterations");
    let mut req = Request::new(
        id,
        TimeMicros::from_secs_f64(ir.arrival_s),
        1,
        iters - 1,
        SloClass::DeadlineSensitive {
            e2el_s: ir.t_slo_s - ir.arrival_s,
        },
        "adversary",
    );
    req.weights = Weights {
        wi: ir.goodput,
        wo: 0.0,
    };
    req
}

/// Trace on which EDF earns `N` while the optimum earns `M`:
/// one heavyweight request `A` (arrival 0, demand `T`, deadline `T`, goodput
/// `M`) and `N` flyweights `B_i` (arrival `i·δ`, demand `δ`, deadline
/// `(i+1)·δ`, goodput 1) with `δ = T/(N+1)`. EDF always finds a `B_i` with an
/// earlier deadline than `A`, so `A` starves; the optimum runs `A` alone.
pub fn edf_adversary(t: f64, n: usize, m: f64) -> AdversaryTrace {
    assert!(t > 0.0 && n >= 1 && m > 0.0);
    let delta = t / (n as f64 + 1.0);
    let mut instance = SmallInstance {
        n_slots: 1,
        requests: vec![InstanceRequest {
            arrival_s: 0.0,
            t_comp_s: t,
            t_slo_s: t,
            goodput: m,
        }],
    };
    for i in 1..=n {
        instance.requests.push(InstanceRequest {
            arrival_s: i as f64 * delta,
            t_comp_s: delta,
            t_slo_s: (i + 1) as f64 * delta,
            goodput: 1.0,
        });
    }
    let requests = instance
        .requests
        .iter()
        .enumerate()
        .map(|(i, ir)| lower_request(i as u64, ir, ADVERSARY_V_TOKEN_S))
        .collect();
    AdversaryTrace {
        requests,
        instance,
        v_token_s: ADVERSARY_V_TOKEN_S,
    }
}

/// Trace on which SJF earns `N` while the optimum earns `M`. The construction
/// matches [`edf_adversary`] — each `B_i` has remaining demand `δ` against
/// `A`'s `T`, so shortest-job-first always preempts `A` — and each `B_i` must
/// finish within `δ` of its arrival for its goodput to count.
pub fn sjf_adversary(t: f64, n: usize, m: f64) -> AdversaryTrace {
    edf_adversary(t, n, m)
}

/// Random oracle-sized instance for dominance and near-optimality checks.
///
/// All requests share release time 0 (so abstract slot time and engine batch
/// time agree under every policy) and demands are whole multiples of the
/// adversary token latency.
pub fn random_small_instance(
    rng: &mut impl Rng,
    max_requests: usize,
    n_slots: usize,
) -> SmallInstance {
    let n = rng.gen_range(2..=max_requests.max(2));
    let mut requests = Vec::with_capacity(n);
    for _ in 0..n {
        let iters = rng.gen_range(5..=60);
        let t_comp = iters as f64 * ADVERSARY_V_TOKEN_S;
        // Deadlines from "barely fits alone" to "fits after most of the rest".
        let slack = rng.gen_range(0.0..1.5f64);
        let t_slo = t_comp * (1.0 + slack) + rng.gen_range(0.0..0.3);
        let t_slo = (t_slo / ADVERSARY_V_TOKEN_S).ceil() * ADVERSARY_V_TOKEN_S;
        requests.push(InstanceRequest {
            arrival_s: 0.0,
            t_comp_s: t_comp,
            t_slo_s: t_slo,
            goodput: rng.gen_range(1..=100) as f64,
        });
    }
    SmallInstance { n_slots, requests }
}

/// Engine requests for a [`SmallInstance`] (weights `(R, 0)`, deadlines
/// relative to arrival).
pub fn instance_to_requests(inst: &SmallInstance) -> Vec<Request> {
    inst.requests
        .iter()
        .enumerate()
        .map(|(i, ir)| lower_request(i as u64, ir, ADVERSARY_V_TOKEN_S))
        .collect()
}

// ── Competitive-ratio bound ─────────────────────────────────────────────────

/// Parameters of the competitive-ratio lower bound: the preemption margin
/// `δ_pmtn` and credit-split constants `(α, β, γ)` with `α + β + γ ≤ 1`,
/// scaled by the cutoff `p`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub delta_pmtn: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub p: f64,
}

impl BoundParams {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if !(self.delta_pmtn > 0.0) {
            return Err(AnalysisError::InvalidParams("delta_pmtn must be > 0".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(AnalysisError::InvalidParams(
                "alpha, beta, gamma must be nonnegative".into(),
            ));
        }
        if self.alpha + self.beta + self.gamma > 1.0 + 1e-12 {
            return Err(AnalysisError::InvalidParams(
                "alpha + beta + gamma must be <= 1".into(),
            ));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(AnalysisError::InvalidParams("p must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Guaranteed fraction of the offline-optimal goodput:
/// `p · δ/(1+δ) · min(α/(1+δ), β/(1+δ), γ·(1+δ)³)`.
pub fn bound_value(bp: &BoundParams) -> f64 {
    let u = 1.0 + bp.delta_pmtn;
    let m = (bp.alpha / u).min(bp.beta / u).min(bp.gamma * u * u * u);
    bp.p * (bp.delta_pmtn / u) * m
}

/// Result of [`optimize_bound`]: the best guarantee found and where.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundOptimum {
    pub value: f64,
    pub params: BoundParams,
}

/// Maximize [`bound_value`] over `δ ∈ (0, 3]` and the simplex
/// `α + β + γ ≤ 1` by grid search plus local refinement. Deterministic.
///
/// The maximizer always sits on the simplex boundary `α + β + γ = 1` (the
/// bound is monotone in each credit constant), so the grid walks `(δ, α, β)`
/// with `γ = 1 − α − β`.
pub fn optimize_bound(p: f64, grid_resolution: usize) -> BoundOptimum {
    assert!(grid_resolution >= 100, "need >= 100 grid points per axis");
    let g = grid_resolution;

    // Best credit split for a fixed margin: coarse simplex grid, then a
    // shrinking box around the incumbent. The inner objective is concave and
    // piecewise linear in (α, β), so the box search pins the kink point to
    // the final resolution.
    let inner = |delta: f64| -> (f64, f64, f64) {
        let mut bv = f64::NEG_INFINITY;
        let (mut ba, mut bb) = (1.0 / 3.0, 1.0 / 3.0);
        let consider = |alpha: f64, beta: f64, bv: &mut f64, ba: &mut f64, bb: &mut f64| {
            if alpha < 0.0 || beta < 0.0 || alpha + beta > 1.0 {
                return;
            }
            let bp = BoundParams {
                delta_pmtn: delta,
                alpha,
                beta,
                gamma: 1.0 - alpha - beta,
                p,
            };
            let v = bound_value(&bp);
            if v > *bv {
                (*bv, *ba, *bb) = (v, alpha, beta);
            }
        };
        for ai in 0..=g {
            for bi in 0..=(g - ai) {
                consider(
                    ai as f64 / g as f64,
                    bi as f64 / g as f64,
                    &mut bv,
                    &mut ba,
                    &mut bb,
                );
            }
        }
        let mut span = 1.0 / g as f64;
        for _ in 0..40 {
            let (ca, cb) = (ba, bb);
            for ai in -6..=6i32 {
                for bi in -6..=6i32 {
                    consider(
                        ca + span * f64::from(ai) / 6.0,
                        cb + span * f64::from(bi) / 6.0,
                        &mut bv,
                        &mut ba,
                        &mut bb,
                    );
                }
            }
            span /= 2.0;
        }
        (bv, ba, bb)
    };

    // Coarse margin scan, then ternary refinement of the one-dimensional
    // envelope δ ↦ max_{α,β} value, which is smooth and unimodal.
    let mut best_di = 1;
    let mut best = (f64::NEG_INFINITY, 1.0 / 3.0, 1.0 / 3.0, 1.0);
    for di in 1..=g {
        let delta = 3.0 * di as f64 / g as f64;
        let (v, a, b) = inner(delta);
        if v > best.0 {
            best = (v, a, b, delta);
            best_di = di;
        }
    }
    let mut lo = 3.0 * (best_di as f64 - 1.0).max(0.1) / g as f64;
    let mut hi = 3.0 * (best_di as f64 + 1.0).min(g as f64) / g as f64;
    for _ in 0..60 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if inner(m1).0 < inner(m2).0 {
            lo = m1;
        } else {
            hi = m2;
        }
    }
    let delta = 0.5 * (lo + hi);
    let (v, a, b) = inner(delta);
    if v > best.0 {
        best = (v, a, b, delta);
    }
    BoundOptimum {
        value: best.0,
        params: BoundParams {
            delta_pmtn: best.3,
            alpha: best.1,
            beta: best.2,
            gamma: 1.0 - best.1 - best.2,
            p,
        },
    }
}
