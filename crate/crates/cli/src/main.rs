use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use gtsim::runner::{self, ExperimentConfig, ExperimentResult, SweepSpec};
use gtsim::scheduler;

#[derive(Parser)]
#[command(name = "gtsim", version, about = "Asynchronous gradient-tracking simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every replicate of an experiment config.
    Run {
        #[command(flatten)]
        common: Common,
        /// Also dump per-event trace files.
        #[arg(long)]
        trace: bool,
    },
    /// Run a parameter sweep file.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Check the activation-window and delay-bound assumptions on a trace.
    Verify {
        /// Trace file (line-delimited JSON).
        #[arg(long)]
        trace: PathBuf,
        /// Take m, T and D from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        max_delay: Option<usize>,
    },
    /// Re-execute a dumped trace under a config.
    Replay {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trace: PathBuf,
    },
    /// Write the generated problem instance as TOML.
    Instance {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the one in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run this single replicate seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    snapshot_interval: Option<u64>,
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ExperimentConfig::from_toml(&text)?)
}

fn apply_overrides(config: &mut ExperimentConfig, common: &Common) {
    if let Some(seed) = common.seed {
        config.seeds = vec![seed];
    }
    if let Some(interval) = common.snapshot_interval {
        config.snapshot_interval = interval;
    }
    if let Some(out) = &common.out {
        config.output_dir = Some(out.clone());
    }
}

fn output_dir(config: &ExperimentConfig) -> PathBuf {
    config.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn report(result: &ExperimentResult, dir: &Path) {
    let s = &result.summary;
    println!("config {}  seeds {:?}  events {}", s.config_hash, s.seeds, s.events);
    println!(
        "terminal: grad_inf {:.3e}  dev_inf_avg {:.3e}  merit {:.3e}  mass_conserved {}",
        s.terminal.grad_inf, s.terminal.dev_inf_avg, s.terminal.merit, s.mass_conserved
    );
    println!("outputs in {}", dir.display());
}

fn run(common: Common, trace: bool) -> Result<()> {
    let mut config = load_config(&common.config)?;
    apply_overrides(&mut config, &common);
    let result = runner::run_experiment_with(&config, trace)?;
    let dir = output_dir(&config);
    runner::write_outputs(&result, &dir)?;
    report(&result, &dir);
    Ok(())
}

fn sweep(common: Common) -> Result<()> {
    let text = fs::read_to_string(&common.config).with_context(|| format!("reading {}", common.config.display()))?;
    let mut spec = SweepSpec::from_toml(&text)?;
    apply_overrides(&mut spec.base, &common);
    let configs = spec.configs()?;
    let (summary, runs) = runner::sweep(&spec.parameter, &configs);
    let dir = output_dir(&spec.base);
    runner::write_sweep_outputs(&summary, &runs, &dir)?;
    for row in &summary.rows {
        match &row.outcome {
            runner::SweepOutcome::Completed { terminal, .. } => println!(
                "{} = {}: grad_inf {:.3e}  dev_inf_avg {:.3e}",
                summary.parameter, row.label, terminal.grad_inf, terminal.dev_inf_avg
            ),
            runner::SweepOutcome::Failed { error } => println!("{} = {}: failed: {error}", summary.parameter, row.label),
        }
    }
    println!("outputs in {}", dir.display());
    Ok(())
}

fn verify(
    trace: PathBuf,
    config: Option<PathBuf>,
    agents: Option<usize>,
    window: Option<usize>,
    max_delay: Option<usize>,
) -> Result<bool> {
    let (mut m, mut t, mut d) = (agents, window, max_delay);
    if let Some(path) = config {
        let config = load_config(&path)?;
        let cm = config.graph.m();
        m = m.or(Some(cm));
        t = t.or(Some(config.schedule.activation.window(cm)));
        d = d.or(Some(config.schedule.delay.max_delay()));
    }
    let (Some(m), Some(t), Some(d)) = (m, t, d) else {
        bail!("need --config or all of --agents, --window, --max-delay");
    };
    let file = fs::File::open(&trace).with_context(|| format!("opening {}", trace.display()))?;
    let events = scheduler::read_trace(BufReader::new(file))?;
    let rep = runner::verify_trace(&events, m, t, d);
    println!("{}", serde_json::to_string_pretty(&rep)?);
    Ok(rep.coverage_ok && rep.delay_bound_ok)
}

fn replay(common: Common, trace: PathBuf) -> Result<()> {
    let mut config = load_config(&common.config)?;
    apply_overrides(&mut config, &common);
    let seed = match config.seeds.as_slice() {
        [seed] => *seed,
        _ => bail!("replay needs exactly one seed; pass --seed"),
    };
    let file = fs::File::open(&trace).with_context(|| format!("opening {}", trace.display()))?;
    let events = scheduler::read_trace(BufReader::new(file))?;
    let prep = config.prepare()?;
    let rep = runner::run_replay(&config, &prep, seed, &events, true)?;
    config.events = events.len() as u64;
    let result = runner::aggregate(&config, &prep, vec![rep]);
    let dir = output_dir(&config);
    runner::write_outputs(&result, &dir)?;
    report(&result, &dir);
    Ok(())
}

fn instance(config: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let config = load_config(&config)?;
    let prep = config.prepare()?;
    let text = toml::to_string(&prep.oracle)?;
    match out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { common, trace } => run(common, trace).map(|_| true),
        Command::Sweep { common } => sweep(common).map(|_| true),
        Command::Verify { trace, config, agents, window, max_delay } => verify(trace, config, agents, window, max_delay),
        Command::Replay { common, trace } => replay(common, trace).map(|_| true),
        Command::Instance { config, out } => instance(config, out).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
