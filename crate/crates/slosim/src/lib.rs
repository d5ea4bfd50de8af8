//! SLO-aware LLM serving: scheduling library and discrete-event simulator.
//!
//! The crate is organized around a pure scheduling core and a deterministic
//! simulation engine that drives it:
//!
//! - [`core`]: domain types — requests, SLO classes, stage graphs, replicas,
//!   and the microsecond simulation clock.
//! - [`estimator`]: quantile regression forest producing upper bounds on
//!   response length, refined online as tokens stream out.
//! - [`patterns`]: historical pattern-graph store for compound (multi-call)
//!   requests — prefix-pruned similarity matching, sub-deadline amortization,
//!   K-medoids summarization, decay-based eviction.
//! - [`scheduler`]: the grouped margin goodput-maximization policy (priority =
//!   goodput / generation time, cutoff filter, length-sorted sliding-window
//!   batch selection, starvation inflation, preemption test) plus FCFS, EDF,
//!   oracle-SJF, predicted-shortest-first, and least-attained-service
//!   baselines, with multi-replica dispatch and a fairness blend.
//! - [`engine`]: event-driven replica simulator with a batch-composition-aware
//!   iteration cost model, chunked prefill, admission control, and compound
//!   stage orchestration.
//! - [`metrics`]: token- and request-level goodput, SLO attainment, and
//!   latency percentiles over simulation results.
//! - [`analysis`]: adversarial traces that separate EDF/SJF from the optimum,
//!   an exact branch-and-bound schedule oracle for small instances, and
//!   numeric optimization of the policy's competitive-ratio lower bound.
//! - [`cli`]: workload generation, trace/config I/O, run orchestration, and
//!   report emission for the `slosim` binary.

pub mod analysis;
pub mod cli;
pub mod core;
pub mod engine;
pub mod estimator;
pub mod metrics;
pub mod patterns;
pub mod scheduler;
