use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lrthr_core::config::{PolicyKind, ScenarioConfig};
use lrthr_core::experiments::{self, Experiment, Preset, Scale};
use lrthr_core::metrics::{write_energy_csv, write_packets_csv};
use lrthr_core::simulator::Simulator;
use lrthr_core::topology::place_scenario;

#[derive(Parser)]
#[command(
    name = "lrthr",
    version,
    about = "Deadline-aware sensor network routing simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Dotted `section.key=value` setting applied last; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario for each configured deadline and seed.
    Run {
        /// Scenario file; built-in defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        policy: Option<PolicyKind>,
        /// Run this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Write event, decision, estimator and energy traces.
        #[arg(long)]
        trace: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Run a preset batch: every policy, parameter value and seed.
    Experiment {
        preset: Preset,
        #[arg(long, default_value = "desk")]
        scale: Scale,
        /// Master seed; per-run seeds derive from it.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Number of seeds per point instead of the preset's.
        #[arg(long)]
        seeds: Option<usize>,
        /// Restrict to these policies; repeatable.
        #[arg(long)]
        policy: Vec<PolicyKind>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Check a scenario file and report the first problem with its line.
    Validate {
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Re-run the batch a manifest describes and compare curve hashes.
    Replay {
        manifest: PathBuf,
        #[arg(long, default_value = "replay")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run {
            config,
            policy,
            seed,
            trace,
            common,
        } => {
            let mut scenario = match &config {
                Some(path) => ScenarioConfig::load(path, &common.overrides)?,
                None => ScenarioConfig::from_toml_str("", &common.overrides)?,
            };
            if let Some(p) = policy {
                scenario.protocol.policy = p;
            }
            if let Some(s) = seed {
                scenario.run.seeds = vec![s];
            }
            scenario.run.trace |= trace;
            run_scenario(&scenario, &common.out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Experiment {
            preset,
            scale,
            seed,
            seeds,
            policy,
            jobs,
            common,
        } => {
            let mut exp = Experiment::preset(preset, scale, seed, &common.overrides)?;
            if let Some(n) = seeds {
                exp = exp.with_seed_count(n);
            }
            if !policy.is_empty() {
                exp = exp.with_policies(policy);
            }
            let report = experiments::run_batch(&exp, &common.out, jobs)?;
            println!(
                "{preset} ({scale}): {} runs executed, {} resumed, output in {}",
                report.executed,
                report.skipped,
                common.out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { config, overrides } => {
            match ScenarioConfig::load(&config, &overrides) {
                Ok(_) => {
                    println!("{}: ok", config.display());
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => {
                    eprintln!("{e}");
                    Ok(ExitCode::from(2))
                }
            }
        }
        Command::Replay {
            manifest,
            out,
            jobs,
        } => {
            if out.join("manifest.json").exists() {
                bail!(
                    "{} already holds a batch; pick an empty directory",
                    out.display()
                );
            }
            let report = experiments::replay(&manifest, &out, jobs)?;
            if report.identical() {
                println!("replay identical: {} curve files match", report.checked);
                Ok(ExitCode::SUCCESS)
            } else {
                for file in &report.mismatched {
                    eprintln!("mismatch: {file}");
                }
                Ok(ExitCode::from(3))
            }
        }
    }
}

fn run_scenario(scenario: &ScenarioConfig, out: &Path) -> Result<()> {
    scenario.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    scenario
        .save(&out.join("config.toml"))
        .with_context(|| format!("writing {}", out.join("config.toml").display()))?;
    let policy = scenario.protocol.policy;
    for &deadline in &scenario.run.deadlines {
        for &seed in &scenario.run.seeds {
            let topology = place_scenario(seed, &scenario.layout())?;
            let mut sim = Simulator::new(scenario, topology, deadline, seed)?;
            let result = sim.run_to_end();
            let dir = out.join(policy.name()).join(format!("{deadline:.3}"));
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let stem = dir.join(format!("seed-{seed}"));
            write_file(&stem.with_extension("csv"), |f| {
                write_packets_csv(f, &result.packets)
            })?;
            write_file(&stem.with_extension("energy.csv"), |f| {
                write_energy_csv(f, &result.metrics.energy_by_node)
            })?;
            let json = serde_json::to_string_pretty(&result.metrics)?;
            fs::write(stem.with_extension("json"), json + "\n")?;
            if let Some(trace) = &result.trace {
                for (name, text) in [
                    ("events", &trace.events),
                    ("decisions", &trace.decisions),
                    ("estimators", &trace.estimators),
                    ("energy_trace", &trace.energy),
                ] {
                    fs::write(stem.with_extension(format!("{name}.csv")), text)?;
                }
            }
            let m = &result.metrics;
            println!(
                "{policy} deadline={deadline} seed={seed} generated={} on_time={} dmr={} ecpp={} delay_avg={} delay_worst={}",
                m.generated,
                m.delivered_on_time,
                fmt_opt(m.dmr),
                fmt_opt(m.ecpp),
                fmt_opt(m.delay_avg),
                fmt_opt(m.delay_worst),
            );
        }
    }
    Ok(())
}

fn write_file<E>(path: &Path, f: impl FnOnce(fs::File) -> Result<(), E>) -> Result<()>
where
    E: std::error::Error + Send + Sync + 'static,
{
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f(file).with_context(|| format!("writing {}", path.display()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.4}"))
}
