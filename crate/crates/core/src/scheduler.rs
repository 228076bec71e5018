//! Activation and delay schedules.
//!
//! A schedule is the sequence of `(agent, delays)` pairs that drives the
//! global iteration counter. Every policy guarantees that each window of `T`
//! consecutive events activates every agent, and every delay model keeps
//! delays in `[0, D]`. Both bounds hold by construction, not by rejection.

use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Digraph;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("trace line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One global iteration: which agent fires and how stale each in-neighbor's
/// information is.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEvent {
    pub k: u64,
    pub agent: usize,
    /// `(in-neighbor, delay)` pairs, ascending by neighbor.
    pub delays: Vec<(usize, usize)>,
}

impl ScheduleEvent {
    pub fn max_delay(&self) -> usize {
        self.delays.iter().map(|&(_, d)| d).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum ActivationPolicy {
    RoundRobin,
    RandomWithCoverage { window: usize },
    WeightedRandomWithCoverage { window: usize, weights: Vec<f64> },
}

impl ActivationPolicy {
    /// The coverage window `T` this policy guarantees on `m` agents.
    pub fn window(&self, m: usize) -> usize {
        match self {
            Self::RoundRobin => m,
            Self::RandomWithCoverage { window } | Self::WeightedRandomWithCoverage { window, .. } => *window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum DelayModel {
    Zero,
    /// Independent uniform delays on `{0, ..., max_delay}`.
    Uniform { max_delay: usize },
    /// Each edge draws one delay at construction and keeps it.
    PerEdgeFixed { max_delay: usize },
    /// Each sender has a fixed slowness in `[0, 1)`; reads from slow senders
    /// lag by about `slowness * max_delay` plus a small jitter, clamped.
    HeterogeneousSpeed { max_delay: usize },
}

impl DelayModel {
    pub fn max_delay(&self) -> usize {
        match self {
            Self::Zero => 0,
            Self::Uniform { max_delay } | Self::PerEdgeFixed { max_delay } | Self::HeterogeneousSpeed { max_delay } => {
                *max_delay
            }
        }
    }
}

enum DelayState {
    Zero,
    Uniform,
    Fixed(Vec<Vec<usize>>),
    Speed { slowness: Vec<f64>, jitter: usize },
}

/// Deterministic stream of [`ScheduleEvent`]s for one graph.
pub struct Scheduler {
    in_nbrs: Vec<Vec<usize>>,
    policy: ActivationPolicy,
    window: usize,
    max_delay: usize,
    weights: Option<WeightedIndex<f64>>,
    /// Latest event index by which each agent must fire again.
    deadlines: Vec<i64>,
    next_rr: usize,
    delay_state: DelayState,
    pick_rng: ChaCha8Rng,
    delay_rng: ChaCha8Rng,
    k: u64,
}

impl Scheduler {
    pub fn new(g: &Digraph, policy: ActivationPolicy, delay: DelayModel, seed: u64) -> Result<Self, ScheduleError> {
        let m = g.m();
        let window = policy.window(m);
        if window < m {
            return Err(ScheduleError::InvalidArgument(format!(
                "coverage window T={window} cannot cover m={m} agents"
            )));
        }
        let weights = match &policy {
            ActivationPolicy::WeightedRandomWithCoverage { weights, .. } => {
                if weights.len() != m || weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
                    return Err(ScheduleError::InvalidArgument(format!(
                        "need {m} positive finite activation weights"
                    )));
                }
                Some(WeightedIndex::new(weights).map_err(|e| ScheduleError::InvalidArgument(e.to_string()))?)
            }
            _ => None,
        };
        let in_nbrs: Vec<Vec<usize>> = (0..m).map(|i| g.in_neighbors(i).to_vec()).collect();
        let max_delay = delay.max_delay();

        let mut pick_rng = ChaCha8Rng::seed_from_u64(seed);
        pick_rng.set_stream(1);
        let mut delay_rng = ChaCha8Rng::seed_from_u64(seed);
        delay_rng.set_stream(2);

        let delay_state = match delay {
            DelayModel::Zero => DelayState::Zero,
            DelayModel::Uniform { .. } => DelayState::Uniform,
            DelayModel::PerEdgeFixed { .. } => DelayState::Fixed(
                in_nbrs
                    .iter()
                    .map(|nbrs| nbrs.iter().map(|_| delay_rng.random_range(0..=max_delay)).collect())
                    .collect(),
            ),
            DelayModel::HeterogeneousSpeed { .. } => DelayState::Speed {
                slowness: (0..m).map(|_| delay_rng.random::<f64>()).collect(),
                jitter: (max_delay / 4).max(1),
            },
        };

        Ok(Self {
            in_nbrs,
            policy,
            window,
            max_delay,
            weights,
            deadlines: vec![window as i64 - 1; m],
            next_rr: 0,
            delay_state,
            pick_rng,
            delay_rng,
            k: 0,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn max_delay(&self) -> usize {
        self.max_delay
    }

    /// Produces the event for the current global iteration and advances.
    pub fn next_event(&mut self) -> ScheduleEvent {
        let k = self.k;
        let agent = self.pick_agent(k as i64);
        self.deadlines[agent] = k as i64 + self.window as i64;
        let delays = self.draw_delays(agent);
        self.k += 1;
        ScheduleEvent { k, agent, delays }
    }

    fn pick_agent(&mut self, k: i64) -> usize {
        let m = self.deadlines.len();
        let candidate = match &self.policy {
            ActivationPolicy::RoundRobin => {
                let a = self.next_rr;
                self.next_rr = (self.next_rr + 1) % m;
                return a;
            }
            ActivationPolicy::RandomWithCoverage { .. } => self.pick_rng.random_range(0..m),
            ActivationPolicy::WeightedRandomWithCoverage { .. } => {
                self.weights.as_ref().expect("weights set for weighted policy").sample(&mut self.pick_rng)
            }
        };
        if self.feasible_after(candidate, k) {
            candidate
        } else {
            // Earliest deadline first always preserves feasibility.
            (0..m).min_by_key(|&a| (self.deadlines[a], a)).expect("m > 0")
        }
    }

    /// Whether every agent can still meet its deadline if `chosen` fires at `k`.
    fn feasible_after(&self, chosen: usize, k: i64) -> bool {
        let mut ds: Vec<i64> = self
            .deadlines
            .iter()
            .enumerate()
            .map(|(a, &d)| if a == chosen { k + self.window as i64 } else { d })
            .collect();
        ds.sort_unstable();
        ds.iter().enumerate().all(|(r, &d)| d >= k + 1 + r as i64)
    }

    fn draw_delays(&mut self, agent: usize) -> Vec<(usize, usize)> {
        let d_max = self.max_delay;
        self.in_nbrs[agent]
            .iter()
            .enumerate()
            .map(|(slot, &j)| {
                let d = match &self.delay_state {
                    DelayState::Zero => 0,
                    DelayState::Uniform => self.delay_rng.random_range(0..=d_max),
                    DelayState::Fixed(table) => table[agent][slot],
                    DelayState::Speed { slowness, jitter } => {
                        let base = (slowness[j] * d_max as f64).floor() as usize;
                        (base + self.delay_rng.random_range(0..=*jitter)).min(d_max)
                    }
                };
                (j, d)
            })
            .collect()
    }
}

/// True iff every window of `window` consecutive events activates all `m`
/// agents. Traces shorter than one window are vacuously accepted.
pub fn verify_coverage(trace: &[ScheduleEvent], m: usize, window: usize) -> bool {
    if window == 0 || trace.iter().any(|e| e.agent >= m) {
        return false;
    }
    if trace.len() < window {
        return true;
    }
    let mut counts = vec![0usize; m];
    let mut covered = 0;
    for (idx, ev) in trace.iter().enumerate() {
        if counts[ev.agent] == 0 {
            covered += 1;
        }
        counts[ev.agent] += 1;
        if idx >= window {
            let old = trace[idx - window].agent;
            counts[old] -= 1;
            if counts[old] == 0 {
                covered -= 1;
            }
        }
        if idx + 1 >= window && covered < m {
            return false;
        }
    }
    true
}

/// True iff every recorded delay is at most `max_delay`.
pub fn verify_delay_bound(trace: &[ScheduleEvent], max_delay: usize) -> bool {
    trace.iter().all(|e| e.delays.iter().all(|&(_, d)| d <= max_delay))
}

pub fn max_observed_delay(trace: &[ScheduleEvent]) -> usize {
    trace.iter().map(ScheduleEvent::max_delay).max().unwrap_or(0)
}

/// Writes one JSON record per event.
pub fn write_trace<W: Write>(trace: &[ScheduleEvent], mut out: W) -> Result<(), ScheduleError> {
    for ev in trace {
        serde_json::to_writer(&mut out, ev).map_err(|e| ScheduleError::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads line-delimited event records; unknown fields are ignored so richer
/// protocol trace dumps load as schedules too.
pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<ScheduleEvent>, ScheduleError> {
    let mut out = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev = serde_json::from_str(&line).map_err(|e| ScheduleError::Parse { line: idx + 1, msg: e.to_string() })?;
        out.push(ev);
    }
    Ok(out)
}
