//! Experiment orchestration: configuration, step sizes, the event loop,
//! replicate aggregation, rate fitting, sweeps and output files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{self, Digraph, GraphError, MixingPair};
use crate::metrics::{self, MetricsError, MetricsSnapshot};
use crate::oracle::{NoiseModel, ObjectiveOracle, OracleError, ProblemSpec, SampleDraw};
use crate::protocol::{ProtocolError, Simulation};
use crate::scheduler::{self, ActivationPolicy, DelayModel, ScheduleError, ScheduleEvent, Scheduler};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config invalid: {field}: {msg}")]
    ConfigInvalid { field: String, msg: String },
    #[error("seed {seed}, event {k}: {source}")]
    Protocol { seed: u64, k: u64, source: ProtocolError },
    #[error("seed {seed}, snapshot {k}: {source}")]
    Metrics { seed: u64, k: u64, source: MetricsError },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(String),
}

fn invalid(field: &str, msg: impl Into<String>) -> RunError {
    RunError::ConfigInvalid { field: field.to_string(), msg: msg.into() }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("need at least {needed} tail points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("non-positive or non-finite value {value} at k={k}; audit floor reached")]
    DegenerateSeries { k: f64, value: f64 },
}

/// Minimum tail length accepted by [`fit_rate`].
pub const MIN_FIT_POINTS: usize = 100;

/// Least-squares slope of `log(value)` against `log(k)` over the last
/// `tail_fraction` of the series.
pub fn fit_rate(series: &[(f64, f64)], tail_fraction: f64) -> Result<f64, FitError> {
    let len = series.len();
    let take = ((len as f64) * tail_fraction.clamp(0.0, 1.0)).round() as usize;
    let tail = &series[len - take.min(len)..];
    if tail.len() < MIN_FIT_POINTS {
        return Err(FitError::TooFewPoints { needed: MIN_FIT_POINTS, got: tail.len() });
    }
    if let Some(&(k, value)) = tail.iter().find(|&&(k, v)| !(v > 0.0 && v.is_finite() && k > 0.0)) {
        return Err(FitError::DegenerateSeries { k, value });
    }
    let pts: Vec<(f64, f64)> = tail.iter().map(|&(k, v)| (k.ln(), v.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum StepSchedule {
    /// `gamma0 / (k + 1)^alpha`.
    PowerDecay { gamma0: f64, alpha: f64 },
    /// `gamma0 / factor^floor(k / interval)`.
    Stepwise { gamma0: f64, interval: u64, factor: f64 },
    Constant { gamma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSpec {
    #[serde(flatten)]
    pub schedule: StepSchedule,
    /// From this global iteration on the step size is zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freeze_after: Option<u64>,
}

impl StepSpec {
    pub fn new(schedule: StepSchedule) -> Self {
        Self { schedule, freeze_after: None }
    }

    /// Step size for global iteration `k`.
    pub fn gamma(&self, k: u64) -> f64 {
        if self.freeze_after.is_some_and(|f| k >= f) {
            return 0.0;
        }
        match self.schedule {
            StepSchedule::PowerDecay { gamma0, alpha } => gamma0 / ((k + 1) as f64).powf(alpha),
            StepSchedule::Stepwise { gamma0, interval, factor } => gamma0 / factor.powi((k / interval) as i32),
            StepSchedule::Constant { gamma } => gamma,
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let unit = |g: f64| g > 0.0 && g <= 1.0;
        match self.schedule {
            StepSchedule::PowerDecay { gamma0, alpha } => {
                if !unit(gamma0) {
                    return Err(invalid("step.gamma0", "must lie in (0, 1]"));
                }
                if !(alpha > 0.5 && alpha <= 1.0) {
                    return Err(invalid("step.alpha", "must lie in (1/2, 1]"));
                }
            }
            StepSchedule::Stepwise { gamma0, interval, factor } => {
                if !unit(gamma0) {
                    return Err(invalid("step.gamma0", "must lie in (0, 1]"));
                }
                if interval == 0 {
                    return Err(invalid("step.interval", "must be positive"));
                }
                if !(factor > 1.0) {
                    return Err(invalid("step.factor", "must exceed 1"));
                }
            }
            StepSchedule::Constant { gamma } => {
                if !(0.0..=1.0).contains(&gamma) {
                    return Err(invalid("step.gamma", "must lie in [0, 1]"));
                }
            }
        }
        Ok(())
    }

    /// Whether the sequence is non-summable but square-summable, decided by mode.
    pub fn diminishing_conditions_hold(&self) -> bool {
        self.freeze_after.is_none() && matches!(self.schedule, StepSchedule::PowerDecay { alpha, .. } if alpha > 0.5 && alpha <= 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "kebab-case")]
pub enum GraphSpec {
    RingPlusRandom { m: usize, extra: usize, seed: u64 },
    Connectivity { m: usize, p: f64, seed: u64 },
    Explicit { m: usize, edges: Vec<(usize, usize)> },
}

impl GraphSpec {
    pub fn m(&self) -> usize {
        match self {
            Self::RingPlusRandom { m, .. } | Self::Connectivity { m, .. } | Self::Explicit { m, .. } => *m,
        }
    }

    pub fn build(&self) -> Result<Digraph, GraphError> {
        match self {
            Self::RingPlusRandom { m, extra, seed } => graph::generate_ring_plus_random(*m, *extra, *seed),
            Self::Connectivity { m, p, seed } => graph::generate_connectivity(*m, *p, *seed),
            Self::Explicit { m, edges } => Digraph::new(*m, edges.iter().copied()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum OracleSpec {
    Generated {
        n: usize,
        sigma: f64,
        seed: u64,
        problem: ProblemSpec,
        #[serde(default)]
        noise: NoiseModel,
    },
    Inline { instance: ObjectiveOracle },
}

impl OracleSpec {
    pub fn build(&self, m: usize) -> Result<ObjectiveOracle, OracleError> {
        match self {
            Self::Generated { n, sigma, seed, problem, noise } => {
                ObjectiveOracle::generate(problem, m, *n, *sigma, *noise, *seed)
            }
            Self::Inline { instance } => Ok(instance.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub activation: ActivationPolicy,
    pub delay: DelayModel,
}

fn default_tail() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub events: u64,
    pub snapshot_interval: u64,
    pub seeds: Vec<u64>,
    /// Tail fraction of the snapshot series used for rate fits.
    #[serde(default = "default_tail")]
    pub fit_tail: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub graph: GraphSpec,
    pub oracle: OracleSpec,
    pub schedule: ScheduleSpec,
    pub step: StepSpec,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        toml::from_str(text).map_err(|e| invalid("config", e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, RunError> {
        toml::to_string(self).map_err(|e| RunError::Serde(e.to_string()))
    }

    /// SHA-256 over the canonical JSON form without the output directory, hex encoded.
    pub fn hash(&self) -> String {
        let mut bare = self.clone();
        bare.output_dir = None;
        let canonical = serde_json::to_vec(&bare).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    /// Checks every module precondition and builds the shared run inputs.
    pub fn prepare(&self) -> Result<Prepared, RunError> {
        if self.events == 0 {
            return Err(invalid("events", "must be positive"));
        }
        if self.snapshot_interval == 0 {
            return Err(invalid("snapshot_interval", "must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "need at least one replicate seed"));
        }
        if !(self.fit_tail > 0.0 && self.fit_tail <= 1.0) {
            return Err(invalid("fit_tail", "must lie in (0, 1]"));
        }
        self.step.validate()?;
        let graph = self.graph.build().map_err(|e| invalid("graph", e.to_string()))?;
        let mixing = graph::build_mixing(&graph).map_err(|e| invalid("graph", e.to_string()))?;
        let oracle = self.oracle.build(graph.m()).map_err(|e| invalid("oracle", e.to_string()))?;
        if oracle.m != graph.m() {
            return Err(invalid("oracle", format!("instance has {} components for {} agents", oracle.m, graph.m())));
        }
        // Surface schedule errors (window, weights) before any run starts.
        Scheduler::new(&graph, self.schedule.activation.clone(), self.schedule.delay.clone(), 0)
            .map_err(|e| invalid("schedule", e.to_string()))?;
        Ok(Prepared { graph, mixing, oracle })
    }
}

/// Validated, built inputs shared by all replicates of one config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub graph: Digraph,
    pub mixing: MixingPair,
    pub oracle: ObjectiveOracle,
}

/// One line of a trace dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: u64,
    pub agent: usize,
    pub delays: Vec<(usize, usize)>,
    pub stamps: Vec<u64>,
    pub gamma: f64,
    /// Conservation residual after the event.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateResult {
    pub seed: u64,
    pub snapshots: Vec<MetricsSnapshot>,
    pub trace: Option<Vec<TraceRecord>>,
    /// Uniform average of the agents' `x` after the last event.
    pub final_x_avg: Vec<f64>,
    pub elapsed: Duration,
}

/// Decorrelates the schedule stream from the sample streams of the same seed.
pub fn schedule_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xD1B5_4A32_D192_ED03
}

enum EventSource<'e> {
    Generated(Scheduler),
    Replay(std::slice::Iter<'e, ScheduleEvent>),
}

impl EventSource<'_> {
    fn next(&mut self) -> Option<ScheduleEvent> {
        match self {
            Self::Generated(s) => Some(s.next_event()),
            Self::Replay(it) => it.next().cloned(),
        }
    }
}

/// Runs one replicate with generated events.
pub fn run_replicate(config: &ExperimentConfig, prep: &Prepared, seed: u64, record_trace: bool) -> Result<ReplicateResult, RunError> {
    let sched = Scheduler::new(
        &prep.graph,
        config.schedule.activation.clone(),
        config.schedule.delay.clone(),
        schedule_seed(seed),
    )?;
    drive(config, prep, seed, EventSource::Generated(sched), config.events, record_trace)
}

/// Re-executes a recorded schedule.
pub fn run_replay(config: &ExperimentConfig, prep: &Prepared, seed: u64, events: &[ScheduleEvent], record_trace: bool) -> Result<ReplicateResult, RunError> {
    drive(config, prep, seed, EventSource::Replay(events.iter()), events.len() as u64, record_trace)
}

fn drive(
    config: &ExperimentConfig,
    prep: &Prepared,
    seed: u64,
    mut source: EventSource<'_>,
    events: u64,
    record_trace: bool,
) -> Result<ReplicateResult, RunError> {
    let start = Instant::now();
    let max_delay = config.schedule.delay.max_delay();
    let mut sim = Simulation::new(&prep.oracle, &prep.graph, &prep.mixing, seed, max_delay, true)
        .map_err(|source| RunError::Protocol { seed, k: 0, source })?;
    let mut snapshots = Vec::with_capacity((events / config.snapshot_interval + 2) as usize);
    let mut trace = record_trace.then(Vec::new);
    let mut max_seen = 0;
    let mut last_agent = 0;
    let snap = |sim: &Simulation<'_>, k: u64, agent: usize, max_seen: usize| {
        MetricsSnapshot::compute(sim.states(), &prep.oracle, k, agent, max_delay, max_seen)
            .map_err(|source| RunError::Metrics { seed, k, source })
    };
    for k in 0..events {
        let event = source
            .next()
            .ok_or_else(|| invalid("trace", format!("ran out of events at k={k}")))?;
        if k % config.snapshot_interval == 0 {
            snapshots.push(snap(&sim, k, event.agent, max_seen)?);
        }
        max_seen = max_seen.max(event.max_delay());
        let gamma = config.step.gamma(k);
        let record = sim.activate(&event, gamma).map_err(|source| RunError::Protocol { seed, k, source })?;
        last_agent = event.agent;
        if let Some(t) = trace.as_mut() {
            t.push(TraceRecord {
                k: record.k,
                agent: record.agent,
                delays: record.delays,
                stamps: record.stamps,
                gamma,
                residual: metrics::mass_residual(sim.states()),
            });
        }
    }
    snapshots.push(snap(&sim, events, last_agent, max_seen)?);
    Ok(ReplicateResult { seed, snapshots, trace, final_x_avg: metrics::average_x(sim.states()), elapsed: start.elapsed() })
}

/// Plain SGD on `F` with the same step schedule and sample streams:
/// `x_{t+1} = x_t - gamma_t * sum_i g_i(x_t, draw(seed, i, t))`. Returns `x_0..=x_events`.
pub fn run_sgd_reference(oracle: &ObjectiveOracle, step: &StepSpec, events: u64, seed: u64) -> Vec<Vec<f64>> {
    let mut x = vec![0.0; oracle.n];
    let mut traj = Vec::with_capacity(events as usize + 1);
    traj.push(x.clone());
    for t in 0..events {
        let mut g = oracle.stoch_grad(0, &x, SampleDraw::new(seed, 0, t));
        for i in 1..oracle.m {
            for (gd, v) in g.iter_mut().zip(oracle.stoch_grad(i, &x, SampleDraw::new(seed, i, t))) {
                *gd += v;
            }
        }
        let gamma = step.gamma(t);
        for (xd, gd) in x.iter_mut().zip(&g) {
            *xd = *xd - gamma * gd;
        }
        traj.push(x.clone());
    }
    traj
}

/// A fitted log-log slope, or why none was fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateFit {
    Slope(f64),
    Unfitted(String),
}

impl RateFit {
    pub fn slope(&self) -> Option<f64> {
        match self {
            Self::Slope(s) => Some(*s),
            Self::Unfitted(_) => None,
        }
    }
}

impl From<Result<f64, FitError>> for RateFit {
    fn from(r: Result<f64, FitError>) -> Self {
        match r {
            Ok(s) => Self::Slope(s),
            Err(e) => Self::Unfitted(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFits {
    pub e_t: RateFit,
    pub e_c: RateFit,
    pub e_z: RateFit,
    pub merit: RateFit,
    pub grad_inf: RateFit,
    pub dev_inf_avg: RateFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalMetrics {
    pub e_t: f64,
    pub e_c: f64,
    pub e_z: f64,
    pub merit: f64,
    pub grad_inf: f64,
    pub dev_inf_avg: f64,
    pub f_avg: f64,
    pub mass_residual: f64,
}

impl TerminalMetrics {
    fn mean_of(snaps: &[&MetricsSnapshot]) -> Self {
        let mean = |f: fn(&MetricsSnapshot) -> f64| snaps.iter().map(|s| f(s)).sum::<f64>() / snaps.len() as f64;
        Self {
            e_t: mean(|s| s.e_t),
            e_c: mean(|s| s.e_c),
            e_z: mean(|s| s.e_z),
            merit: mean(|s| s.merit),
            grad_inf: mean(|s| s.grad_inf),
            dev_inf_avg: mean(|s| s.dev_inf_avg),
            f_avg: mean(|s| s.f_avg),
            mass_residual: snaps.iter().map(|s| s.mass_residual).fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub events: u64,
    pub snapshot_interval: u64,
    pub family: String,
    pub agents: usize,
    pub dimension: usize,
    pub edges: usize,
    pub min_weight: f64,
    /// Online stand-ins used in place of unobservable theoretical quantities.
    pub surrogates: Vec<String>,
    pub step_conditions_hold: bool,
    pub mass_conserved: bool,
    pub max_observed_delay: usize,
    /// Replicate mean of the final snapshot.
    pub terminal: TerminalMetrics,
    pub terminal_per_seed: Vec<TerminalMetrics>,
    /// Fits on the replicate-mean series.
    pub rates: RateFits,
    /// Replicate mean of `||x_avg - x*||` at the end, when `x*` exists.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub minimizer_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub replicates: Vec<ReplicateResult>,
    pub summary: Summary,
}

/// Replicate-mean `(k, value)` series of one snapshot field.
pub fn mean_series(replicates: &[ReplicateResult], field: impl Fn(&MetricsSnapshot) -> f64) -> Vec<(f64, f64)> {
    let len = replicates.iter().map(|r| r.snapshots.len()).min().unwrap_or(0);
    (0..len)
        .map(|idx| {
            let k = replicates[0].snapshots[idx].k as f64;
            let v = replicates.iter().map(|r| field(&r.snapshots[idx])).sum::<f64>() / replicates.len() as f64;
            (k, v)
        })
        .collect()
}

fn summarize(config: &ExperimentConfig, prep: &Prepared, replicates: &[ReplicateResult]) -> Summary {
    let finals: Vec<&MetricsSnapshot> = replicates.iter().filter_map(|r| r.snapshots.last()).collect();
    let fit = |f: fn(&MetricsSnapshot) -> f64| -> RateFit {
        // k = 0 has no logarithm.
        let series: Vec<(f64, f64)> = mean_series(replicates, f).into_iter().filter(|(k, _)| *k > 0.0).collect();
        fit_rate(&series, config.fit_tail).into()
    };
    let minimizer_distance = prep.oracle.minimizer().ok().flatten().map(|xs| {
        let dist = |x: &[f64]| x.iter().zip(&xs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        replicates.iter().map(|r| dist(&r.final_x_avg)).sum::<f64>() / replicates.len() as f64
    });
    Summary {
        config_hash: config.hash(),
        seeds: config.seeds.clone(),
        events: config.events,
        snapshot_interval: config.snapshot_interval,
        family: prep.oracle.family().to_string(),
        agents: prep.graph.m(),
        dimension: prep.oracle.n,
        edges: prep.graph.edge_count(),
        min_weight: prep.mixing.min_weight,
        surrogates: vec![
            "e_c: deviations measured from the uniform average x_avg".into(),
            "e_t: active agent's mass share estimated by the weight channel as w_i/m".into(),
        ],
        step_conditions_hold: config.step.diminishing_conditions_hold(),
        mass_conserved: replicates.iter().flat_map(|r| &r.snapshots).all(MetricsSnapshot::mass_conserved),
        max_observed_delay: replicates
            .iter()
            .filter_map(|r| r.snapshots.last())
            .map(|s| s.max_delay)
            .max()
            .unwrap_or(0),
        terminal: TerminalMetrics::mean_of(&finals),
        terminal_per_seed: finals.iter().map(|s| TerminalMetrics::mean_of(&[*s])).collect(),
        rates: RateFits {
            e_t: fit(|s| s.e_t),
            e_c: fit(|s| s.e_c),
            e_z: fit(|s| s.e_z),
            merit: fit(|s| s.merit),
            grad_inf: fit(|s| s.grad_inf),
            dev_inf_avg: fit(|s| s.dev_inf_avg),
        },
        minimizer_distance,
    }
}

/// Runs every replicate seed (in parallel) and aggregates.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult, RunError> {
    run_experiment_with(config, false)
}

pub fn run_experiment_with(config: &ExperimentConfig, record_trace: bool) -> Result<ExperimentResult, RunError> {
    let prep = config.prepare()?;
    let replicates = config
        .seeds
        .par_iter()
        .map(|&seed| run_replicate(config, &prep, seed, record_trace))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(aggregate(config, &prep, replicates))
}

/// Builds the cross-replicate summary for already-run replicates.
pub fn aggregate(config: &ExperimentConfig, prep: &Prepared, replicates: Vec<ReplicateResult>) -> ExperimentResult {
    let summary = summarize(config, prep, &replicates);
    ExperimentResult { config: config.clone(), replicates, summary }
}

/// A sweep: one base config and a dotted parameter path set to each value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub parameter: String,
    pub values: Vec<toml::Value>,
    pub base: ExperimentConfig,
}

impl SweepSpec {
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        toml::from_str(text).map_err(|e| invalid("sweep", e.to_string()))
    }

    /// The concrete configs, labelled by the swept value.
    pub fn configs(&self) -> Result<Vec<(String, ExperimentConfig)>, RunError> {
        let base = toml::Value::try_from(&self.base).map_err(|e| RunError::Serde(e.to_string()))?;
        self.values
            .iter()
            .map(|value| {
                let mut doc = base.clone();
                set_path(&mut doc, &self.parameter, value.clone())?;
                let config: ExperimentConfig =
                    doc.try_into().map_err(|e: toml::de::Error| invalid(&self.parameter, e.to_string()))?;
                Ok((value.to_string(), config))
            })
            .collect()
    }
}

fn set_path(doc: &mut toml::Value, path: &str, value: toml::Value) -> Result<(), RunError> {
    let mut cur = doc;
    let mut parts = path.split('.').peekable();
    while let Some(part) = parts.next() {
        let table = cur.as_table_mut().ok_or_else(|| invalid(path, "path crosses a non-table value"))?;
        if parts.peek().is_none() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table.get_mut(part).ok_or_else(|| invalid(path, format!("no key `{part}`")))?;
    }
    Err(invalid(path, "empty parameter path"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepOutcome {
    Completed { terminal: TerminalMetrics, rates: RateFits },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub config_hash: String,
    pub outcome: SweepOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SweepSummary {
    pub parameter: String,
    pub rows: Vec<SweepRow>,
}

/// Runs each labelled config independently; failures are kept as rows.
pub fn sweep(parameter: &str, configs: &[(String, ExperimentConfig)]) -> (SweepSummary, Vec<Option<ExperimentResult>>) {
    let results: Vec<(SweepRow, Option<ExperimentResult>)> = configs
        .par_iter()
        .map(|(label, config)| {
            let config_hash = config.hash();
            match run_experiment(config) {
                Ok(res) => (
                    SweepRow {
                        label: label.clone(),
                        config_hash,
                        outcome: SweepOutcome::Completed {
                            terminal: res.summary.terminal.clone(),
                            rates: res.summary.rates.clone(),
                        },
                    },
                    Some(res),
                ),
                Err(e) => (SweepRow { label: label.clone(), config_hash, outcome: SweepOutcome::Failed { error: e.to_string() } }, None),
            }
        })
        .collect();
    let (rows, runs) = results.into_iter().unzip();
    (SweepSummary { parameter: parameter.to_string(), rows }, runs)
}

/// Writes the snapshot table as CSV with a header row.
pub fn write_snapshots<W: Write>(snapshots: &[MetricsSnapshot], out: W) -> Result<(), RunError> {
    let mut wtr = csv::Writer::from_writer(out);
    for s in snapshots {
        wtr.serialize(s).map_err(|e| RunError::Serde(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_trace_records<W: Write>(records: &[TraceRecord], mut out: W) -> Result<(), RunError> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| RunError::Serde(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes `config.toml`, `summary.json`, `timing.json`, one
/// `snapshots_seed<S>.csv` per replicate and, when recorded, `trace_seed<S>.jsonl`.
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> Result<(), RunError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), result.config.to_toml()?)?;
    let summary = serde_json::to_string_pretty(&result.summary).map_err(|e| RunError::Serde(e.to_string()))?;
    fs::write(dir.join("summary.json"), summary + "\n")?;
    let timing = serde_json::to_string_pretty(&timing(result)).map_err(|e| RunError::Serde(e.to_string()))?;
    fs::write(dir.join("timing.json"), timing + "\n")?;
    for rep in &result.replicates {
        let file = fs::File::create(dir.join(format!("snapshots_seed{}.csv", rep.seed)))?;
        write_snapshots(&rep.snapshots, BufWriter::new(file))?;
        if let Some(trace) = &rep.trace {
            let file = fs::File::create(dir.join(format!("trace_seed{}.jsonl", rep.seed)))?;
            let mut w = BufWriter::new(file);
            write_trace_records(trace, &mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

/// Wall-clock cost per replicate. Kept out of the summary, which must be
/// reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub seed: u64,
    pub events: u64,
    pub seconds: f64,
    pub ns_per_event: f64,
    pub max_delay: usize,
}

pub fn timing(result: &ExperimentResult) -> Vec<TimingRow> {
    result
        .replicates
        .iter()
        .map(|r| {
            let events = r.snapshots.last().map_or(0, |s| s.k);
            let seconds = r.elapsed.as_secs_f64();
            TimingRow {
                seed: r.seed,
                events,
                seconds,
                ns_per_event: if events > 0 { seconds * 1e9 / events as f64 } else { 0.0 },
                max_delay: r.snapshots.last().map_or(0, |s| s.max_delay),
            }
        })
        .collect()
}

#[derive(Serialize)]
struct SweepCsvRow<'a> {
    parameter: &'a str,
    value: &'a str,
    config_hash: &'a str,
    status: &'a str,
    error: &'a str,
    grad_inf: Option<f64>,
    dev_inf_avg: Option<f64>,
    merit: Option<f64>,
    e_t: Option<f64>,
    e_c: Option<f64>,
    e_z: Option<f64>,
    f_avg: Option<f64>,
    slope_e_c: Option<f64>,
    slope_e_z: Option<f64>,
    slope_merit: Option<f64>,
}

/// One row per swept value; metric cells are empty for failed configs.
pub fn write_sweep_table<W: Write>(summary: &SweepSummary, out: W) -> Result<(), RunError> {
    let mut wtr = csv::Writer::from_writer(out);
    for row in &summary.rows {
        let (status, error, t, r) = match &row.outcome {
            SweepOutcome::Completed { terminal, rates } => ("ok", "", Some(terminal), Some(rates)),
            SweepOutcome::Failed { error } => ("failed", error.as_str(), None, None),
        };
        wtr.serialize(SweepCsvRow {
            parameter: &summary.parameter,
            value: &row.label,
            config_hash: &row.config_hash,
            status,
            error,
            grad_inf: t.map(|t| t.grad_inf),
            dev_inf_avg: t.map(|t| t.dev_inf_avg),
            merit: t.map(|t| t.merit),
            e_t: t.map(|t| t.e_t),
            e_c: t.map(|t| t.e_c),
            e_z: t.map(|t| t.e_z),
            f_avg: t.map(|t| t.f_avg),
            slope_e_c: r.and_then(|r| r.e_c.slope()),
            slope_e_z: r.and_then(|r| r.e_z.slope()),
            slope_merit: r.and_then(|r| r.merit.slope()),
        })
        .map_err(|e| RunError::Serde(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes `sweep.json`, `sweep.csv` and each completed run under `<dir>/<index>_<value>/`.
pub fn write_sweep_outputs(summary: &SweepSummary, runs: &[Option<ExperimentResult>], dir: &Path) -> Result<(), RunError> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(summary).map_err(|e| RunError::Serde(e.to_string()))?;
    fs::write(dir.join("sweep.json"), json + "\n")?;
    write_sweep_table(summary, BufWriter::new(fs::File::create(dir.join("sweep.csv"))?))?;
    for (idx, (row, run)) in summary.rows.iter().zip(runs).enumerate() {
        if let Some(run) = run {
            let tag: String = row.label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect();
            write_outputs(run, &dir.join(format!("{idx:02}_{tag}")))?;
        }
    }
    Ok(())
}

/// Assumption checks over a recorded schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub events: usize,
    pub window: usize,
    pub max_delay: usize,
    pub coverage_ok: bool,
    pub delay_bound_ok: bool,
    pub max_observed_delay: usize,
}

pub fn verify_trace(trace: &[ScheduleEvent], m: usize, window: usize, max_delay: usize) -> VerifyReport {
    VerifyReport {
        events: trace.len(),
        window,
        max_delay,
        coverage_ok: scheduler::verify_coverage(trace, m, window),
        delay_bound_ok: scheduler::verify_delay_bound(trace, max_delay),
        max_observed_delay: scheduler::max_observed_delay(trace),
    }
}
