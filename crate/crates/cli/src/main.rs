//! `cobackup` — run scenarios, batches and the standalone estimator.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage, parse or config error.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use cobackup::model::{DataItem, TerminalId, VersionKey};
use cobackup::reliability::{composite_success, ChannelEstimate, DepState, ReliabilityTable, TableLookup};
use cobackup::sim::{self, BatchReport, MetricsReport, ScenarioConfig, SimError};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "cobackup", version, about = "Cooperative backup simulator and restore-probability estimator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and report its metrics.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Format::Human)]
        format: Format,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Writes the event log as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run replications with consecutive seeds and report means and 95% intervals.
    Batch {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        replications: u64,
        #[arg(long, value_enum, default_value_t = Format::Human)]
        format: Format,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Restore probability of one item from its fragments' channel estimates.
    ///
    /// Each probability is one fragment on its own terminal; `PxM` is M
    /// fragments on one terminal in one session.
    Estimate {
        #[arg(long)]
        k: u8,
        #[arg(required = true, value_parser = parse_save)]
        probs: Vec<Save>,
        /// A temporal dependency not yet on the server, as `K:P[,P…]`.
        #[arg(long = "dep", value_parser = parse_dep)]
        deps: Vec<Dep>,
        #[arg(long, value_enum, default_value_t = Format::Human)]
        format: Format,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Human,
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug)]
struct Save {
    p: ChannelEstimate,
    m: u32,
}

#[derive(Clone, Debug)]
struct Dep {
    k: u8,
    saves: Vec<Save>,
}

fn parse_save(s: &str) -> Result<Save, String> {
    let (p, m) = match s.split_once(['x', 'X']) {
        Some((p, m)) => (p, m.parse::<u32>().map_err(|e| format!("fragment count in {s:?}: {e}"))?),
        None => (s, 1),
    };
    if m == 0 {
        return Err(format!("fragment count in {s:?} must be positive"));
    }
    let p: f64 = p.parse().map_err(|e| format!("probability {p:?}: {e}"))?;
    let p = ChannelEstimate::new(p).map_err(|e| e.to_string())?;
    Ok(Save { p, m })
}

fn parse_dep(s: &str) -> Result<Dep, String> {
    let (k, probs) = s.split_once(':').ok_or_else(|| format!("expected K:P[,P...], got {s:?}"))?;
    let k = k.parse().map_err(|e| format!("k in {s:?}: {e}"))?;
    let saves = probs.split(',').map(parse_save).collect::<Result<_, _>>()?;
    Ok(Dep { k, saves })
}

/// Marks errors that map to exit code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run {
            scenario,
            seed,
            format,
            output,
            trace,
        } => {
            let cfg = load_scenario(&scenario, seed)?;
            let (report, records) = if trace.is_some() {
                sim::run_traced(&cfg).map_err(sim_error)?
            } else {
                (sim::run(&cfg).map_err(sim_error)?, Vec::new())
            };
            if let Some(path) = trace {
                let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                sim::write_trace(io::BufWriter::new(file), &records)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            emit(output.as_deref(), &render_run(&report, format)?)
        }
        Command::Batch {
            scenario,
            seed,
            replications,
            format,
            output,
        } => {
            let cfg = load_scenario(&scenario, seed)?;
            let batch = sim::run_batch(&cfg, replications, true).map_err(sim_error)?;
            emit(output.as_deref(), &render_batch(&batch, format)?)
        }
        Command::Estimate { k, probs, deps, format } => {
            let success = estimate(k, &probs, &deps)?;
            let out = match format {
                Format::Human => format!("{success:.12}\n"),
                Format::Json => {
                    #[derive(Serialize)]
                    struct Estimate {
                        k: u8,
                        success: f64,
                    }
                    serde_json::to_string_pretty(&Estimate { k, success })? + "\n"
                }
                Format::Csv => format!("metric,value\nsuccess,{success:.12}\n"),
            };
            emit(None, &out)
        }
    }
}

fn sim_error(e: SimError) -> anyhow::Error {
    if e.is_config() {
        usage(e.to_string())
    } else {
        anyhow!(e)
    }
}

/// Reads and validates a scenario; every failure here is a usage error
/// naming the file and, for parse errors, the line, column and field.
fn load_scenario(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let mut cfg: ScenarioConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        usage(format!(
            "{}:{}:{}: field `{field}`: {inner}",
            path.display(),
            inner.line(),
            inner.column()
        ))
    })?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn render_run(report: &MetricsReport, format: Format) -> Result<String> {
    Ok(match format {
        Format::Json => serde_json::to_string_pretty(report)? + "\n",
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["metric", "value"])?;
            for (k, v) in report.scalars() {
                w.write_record([k, v.to_string()])?;
            }
            String::from_utf8(w.into_inner()?)?
        }
        Format::Human => {
            let mut s = format!(
                "seed {}  horizon {}  peer backup {}\n",
                report.seed,
                report.horizon,
                if report.peer_backup { "on" } else { "off" }
            );
            for (k, v) in report.scalars() {
                writeln!(s, "  {k:<32} {}", human(v))?;
            }
            for c in &report.conflicts {
                writeln!(
                    s,
                    "  conflict on {}: restored v{} ({:?}), newer v{} ({:?})",
                    c.item, c.restored.version, c.restored.location, c.newer.version, c.newer.location
                )?;
            }
            s
        }
    })
}

fn render_batch(batch: &BatchReport, format: Format) -> Result<String> {
    Ok(match format {
        Format::Json => serde_json::to_string_pretty(batch)? + "\n",
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["metric", "n", "mean", "std_err", "ci95_low", "ci95_high"])?;
            for (k, m) in &batch.metrics {
                w.write_record([
                    k.clone(),
                    m.n.to_string(),
                    m.mean.to_string(),
                    m.std_err.to_string(),
                    m.ci95_low.to_string(),
                    m.ci95_high.to_string(),
                ])?;
            }
            String::from_utf8(w.into_inner()?)?
        }
        Format::Human => {
            let mut s = format!("{} replications from seed {}\n", batch.replications, batch.base_seed);
            for (k, m) in &batch.metrics {
                writeln!(
                    s,
                    "  {k:<32} {:>12}  95% [{}, {}]",
                    human(m.mean),
                    human(m.ci95_low),
                    human(m.ci95_high)
                )?;
            }
            s
        }
    })
}

fn human(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.0}")
    } else {
        format!("{v:.4}")
    }
}

struct Tables(Vec<(VersionKey, ReliabilityTable, Vec<VersionKey>)>);

impl TableLookup for Tables {
    fn lookup(&self, key: &VersionKey) -> Option<DepState<'_>> {
        self.0
            .iter()
            .find(|(k, ..)| k == key)
            .map(|(_, table, deps)| DepState::Partial { table, deps })
    }
}

fn table(k: u8, saves: &[Save]) -> Result<ReliabilityTable> {
    let mut t = ReliabilityTable::new(k).map_err(|e| usage(e.to_string()))?;
    for s in saves {
        t.add_batch_same_terminal(s.p, s.m).map_err(|e| usage(e.to_string()))?;
    }
    Ok(t)
}

/// The item is version 1 + deps of one item id; each dependency is an
/// independent older version.
fn estimate(k: u8, saves: &[Save], deps: &[Dep]) -> Result<f64> {
    let dep_keys: Vec<VersionKey> = (0..deps.len() as u64).map(|i| VersionKey::new(0, i + 1)).collect();
    let own = VersionKey::new(0, deps.len() as u64 + 1);
    let mut tables = vec![(own, table(k, saves)?, dep_keys.clone())];
    for (key, d) in dep_keys.iter().zip(deps) {
        tables.push((*key, table(d.k, &d.saves)?, Vec::new()));
    }
    let n = saves.iter().map(|s| s.m).sum::<u32>().max(u32::from(k)).min(255) as u8;
    let item = DataItem::new(0, TerminalId(0), 1, 1.0, n, k)
        .with_version(own.version)
        .with_deps(dep_keys);
    composite_success(&item, &Tables(tables)).map_err(|e| anyhow!(e))
}
