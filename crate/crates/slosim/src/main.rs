use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use slosim::cli::{
    cmd_analyze, cmd_gen, cmd_report, cmd_run, default_out_dir, CliError, RunOverrides,
};

/// Discrete-event simulator for SLO-aware LLM serving schedulers.
#[derive(Parser)]
#[command(name = "slosim", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic trace (JSONL, one request per line).
    Gen {
        /// chatbot | deepresearch | mixed | poisson | edf_adv | sjf_adv
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Mean arrival rate in requests/second.
        #[arg(long, default_value_t = 2.0)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output path; defaults to <out-dir>/<kind>.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate a trace under one scheduling policy.
    Run {
        #[arg(long)]
        trace: PathBuf,
        /// TOML run config; every field optional.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the configured policy.
        #[arg(long)]
        policy: Option<String>,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Multiply every SLO constant before simulation.
        #[arg(long = "slo-scale")]
        slo_scale: Option<f64>,
        /// Override the configured estimator (oracle | forest).
        #[arg(long)]
        estimator: Option<String>,
        /// Held-out trace the forest estimator trains on (defaults to the
        /// run trace itself).
        #[arg(long)]
        history: Option<PathBuf>,
        /// Artifact prefix; defaults to <out-dir>/<trace-stem>-<policy>.
        #[arg(long = "out-prefix")]
        out_prefix: Option<PathBuf>,
    },
    /// Reproduce the adversarial lower bounds and the competitive-bound
    /// optimum.
    Analyze {
        /// Grid points per axis for the bound search (>= 100).
        #[arg(long, default_value_t = 200)]
        grid: usize,
        /// Output path; defaults to <out-dir>/analysis.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge per-run report JSON files into one comparison CSV.
    Report {
        /// Paths to <prefix>.report.json files.
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// Output path; defaults to <out-dir>/comparison.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn real_main() -> Result<(), CliError> {
    match Cli::parse().cmd {
        Cmd::Gen {
            kind,
            count,
            rate,
            seed,
            out,
        } => {
            let out = out.unwrap_or_else(|| default_out_dir().join(format!("{kind}.jsonl")));
            let n = cmd_gen(&kind, count, rate, seed, &out)?;
            println!("wrote {n} requests to {}", out.display());
        }
        Cmd::Run {
            trace,
            config,
            policy,
            seed,
            slo_scale,
            estimator,
            history,
            out_prefix,
        } => {
            let overrides = RunOverrides {
                policy,
                seed,
                slo_scale,
                estimator,
            };
            let out_prefix = out_prefix.unwrap_or_else(|| {
                let stem = trace
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "run".to_string());
                let policy = overrides.policy.as_deref().unwrap_or("config");
                default_out_dir().join(format!("{stem}-{policy}"))
            });
            let art = cmd_run(
                &trace,
                config.as_deref(),
                &overrides,
                history.as_deref(),
                &out_prefix,
            )?;
            let r = &art.report;
            println!(
                "policy={} goodput={:.3} attainment={:.3} requests={} drops={}",
                r.policy, r.total_goodput, r.attainment, r.requests_total, r.drops
            );
            println!(
                "wrote {} / {} / {}",
                art.result_path.display(),
                art.report_path.display(),
                art.csv_path.display()
            );
        }
        Cmd::Analyze { grid, out } => {
            let out = out.unwrap_or_else(|| default_out_dir().join("analysis.json"));
            let rep = cmd_analyze(grid, &out)?;
            println!(
                "edf: policy={} oracle={} ratio={:.3}  (ratio-cutoff policy keeps {})",
                rep.edf.policy_goodput, rep.edf.oracle_goodput, rep.edf_ratio, rep.edf.gmax_goodput
            );
            println!(
                "sjf: policy={} oracle={} ratio={:.3}  (ratio-cutoff policy keeps {})",
                rep.sjf.policy_goodput, rep.sjf.oracle_goodput, rep.sjf_ratio, rep.sjf.gmax_goodput
            );
            println!(
                "bound p=1:    {:.6} at delta={:.4} (nominal {:.6}, {:+.2}%)",
                rep.bound_p1, rep.argmax.delta_pmtn, rep.nominal_p1, rep.gap_p1_pct
            );
            println!(
                "bound p=0.95: {:.6} at delta={:.4} (nominal {:.6}, {:+.2}%)",
                rep.bound_p095,
                rep.argmax_p095.delta_pmtn,
                rep.nominal_p095,
                rep.gap_p095_pct
            );
            println!("wrote {}", out.display());
        }
        Cmd::Report { inputs, out } => {
            let out = out.unwrap_or_else(|| default_out_dir().join("comparison.csv"));
            let csv = cmd_report(&inputs, &out)?;
            println!(
                "wrote {} ({} rows)",
                out.display(),
                csv.lines().count().saturating_sub(1)
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
