use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use pdsim::config::{ExperimentConfig, SweepAxis, SyntheticKind, ValidationErrors};
use pdsim::experiment;
use pdsim::report::{self, GoodputReport, RunReport};
use pdsim::trace;

#[derive(Parser)]
#[command(
    name = "pdsim",
    version,
    about = "Discrete-event simulator for prefill/decode scheduling on LLM serving clusters"
)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed` (and `run.seeds` for multi-seed commands).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Drop requests no instance can serve within the TTFT bound instead of
    /// routing them to a random instance.
    #[arg(long, global = true)]
    early_reject: bool,
    /// Worker threads for multi-run commands.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Single simulation run.
    Run {
        /// Also write events.jsonl.
        #[arg(long)]
        events: bool,
    },
    /// One run per value of a slider or the request rate.
    Sweep {
        /// R_PD, S_P, S_D or QPS; defaults to `sweep.axis`.
        #[arg(long)]
        axis: Option<SweepAxis>,
        /// Comma-separated values, e.g. `4:4,5:3,6:2`; defaults to `sweep.values`.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Highest grid rate whose mean attainment meets the target.
    Goodput {
        /// Comma-separated request rates; defaults to `goodput.qps_grid`.
        #[arg(long, value_delimiter = ',')]
        qps_grid: Vec<f64>,
    },
    /// Staged ablation from a uniform-chunk baseline to the full scheduler.
    Breakdown {
        /// Chunk size of the baseline stage; defaults to `breakdown.base_chunk_tokens`.
        #[arg(long)]
        base_chunk: Option<u32>,
    },
    /// Writes a synthetic trace, or with `--config` the arrival stream of
    /// the configured workload.
    GenTrace {
        #[arg(long, value_enum)]
        kind: Option<Kind>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Chat,
    Summarization,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if let Some(v) = err.downcast_ref::<ValidationErrors>() {
                eprintln!("invalid config:");
                for e in &v.0 {
                    eprintln!("  {e}");
                }
            } else {
                eprintln!("error: {err:#}");
            }
            ExitCode::FAILURE
        }
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_deref().context("--config is required for this command")?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
        cfg.run.seeds = vec![seed];
    }
    if let Some(dir) = &cli.out_dir {
        cfg.output.dir = dir.clone();
    }
    cfg.run.early_reject |= cli.early_reject;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Run { events } => {
            let mut cfg = load(&cli)?;
            cfg.output.write_events |= events;
            let records = cfg.load_records()?;
            let out = experiment::run_once(&cfg, &records, cfg.run.seed)?;
            let rep = RunReport::new(cfg.mode, cfg.run.seed, &out);
            report::write_run(&cfg.output.dir, &rep, &out)?;
            let a = &rep.aggregates;
            println!(
                "attainment {:.4}  p90 ttft {:.1} ms  p90 tpot {:.2} ms  ({} completed, {} rejected)",
                a.attainment, a.ttft_ms.p90, a.tpot_ms.p90, a.n_completed, a.n_rejected
            );
            println!("wrote {}", cfg.output.dir.display());
        }
        Command::Sweep { axis, values } => {
            let cfg = load(&cli)?;
            let axis = axis
                .or(cfg.sweep.as_ref().map(|s| s.axis))
                .context("no sweep axis given (--axis or [sweep].axis)")?;
            let values = if values.is_empty() {
                cfg.sweep.as_ref().map(|s| s.values.clone()).unwrap_or_default()
            } else {
                values.clone()
            };
            let records = cfg.load_records()?;
            let rows = experiment::with_jobs(cli.jobs, || {
                experiment::sweep(&cfg, &records, axis, &values, cfg.run.seed)
            })??;
            report::write_sweep(&cfg.output.dir, &rows)?;
            for r in &rows {
                match (&r.point, &r.error) {
                    (Some(p), _) => println!(
                        "{}={:<8} attainment {:.4}  p90 ttft {:.1} ms  p90 tpot {:.2} ms",
                        axis, r.value, p.attainment, p.p90_ttft_ms, p.p90_tpot_ms
                    ),
                    (None, Some(e)) => println!("{}={:<8} failed: {e}", axis, r.value),
                    (None, None) => unreachable!(),
                }
            }
        }
        Command::Goodput { qps_grid } => {
            let cfg = load(&cli)?;
            let grid = if qps_grid.is_empty() {
                cfg.goodput
                    .as_ref()
                    .map(|g| g.qps_grid.clone())
                    .context("no QPS grid given (--qps-grid or [goodput].qps_grid)")?
            } else {
                qps_grid.clone()
            };
            let records = cfg.load_records()?;
            let result =
                experiment::with_jobs(cli.jobs, || experiment::goodput(&cfg, &records, &grid, &cfg.run.seeds))??;
            println!(
                "goodput {} req/s at attainment target {}",
                result.goodput_qps, result.attainment_target
            );
            report::write_goodput(
                &cfg.output.dir,
                &GoodputReport {
                    mode: cfg.mode,
                    slo: cfg.slo,
                    result,
                },
            )?;
        }
        Command::Breakdown { base_chunk } => {
            let cfg = load(&cli)?;
            let chunk = base_chunk
                .or(cfg.breakdown.as_ref().map(|b| b.base_chunk_tokens))
                .context("no baseline chunk given (--base-chunk or [breakdown].base_chunk_tokens)")?;
            let records = cfg.load_records()?;
            let table = experiment::with_jobs(cli.jobs, || {
                experiment::breakdown(&cfg, &records, chunk, &cfg.run.seeds)
            })??;
            report::write_breakdown(&cfg.output.dir, &table)?;
            for s in &table.stages {
                println!(
                    "{:<22} attainment {:.4}  migrations {} degrade / {} backflow",
                    s.label, s.mean_attainment, s.degrade_migrations, s.backflow_migrations
                );
            }
        }
        Command::GenTrace { kind, n, output } => gen_trace(&cli, *kind, *n, output)?,
    }
    Ok(())
}

fn gen_trace(cli: &Cli, kind: Option<Kind>, n: usize, output: &Path) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match (kind, &cli.config) {
        (Some(kind), _) => {
            let model = match kind {
                Kind::Chat => SyntheticKind::Chat,
                Kind::Summarization => SyntheticKind::Summarization,
            }
            .model();
            let records = model.generate(n, seed);
            trace::save_trace(output, &records).with_context(|| format!("writing {}", output.display()))?;
        }
        (None, Some(_)) => {
            let cfg = load(cli)?;
            let records = cfg.load_records()?;
            let arrivals = cfg.arrivals(&records, cfg.run.seed);
            let mut out = std::io::BufWriter::new(
                std::fs::File::create(output).with_context(|| format!("creating {}", output.display()))?,
            );
            trace::write_arrivals(&mut out, &arrivals)?;
            out.flush()?;
        }
        (None, None) => anyhow::bail!("gen-trace needs --kind or --config"),
    }
    println!("wrote {}", output.display());
    Ok(())
}
