//! Error terms, merit, diagnostics and conservation audits over a state snapshot.
//!
//! Two online surrogates stand in for quantities the theory defines but an
//! execution cannot observe:
//!
//! * the consensus error is measured against the uniform average `x_avg`
//!   instead of the `psi`-weighted average;
//! * the asymptotic mass share of the active agent is estimated by the weight
//!   channel, a unit-input replica of the tracking bookkeeping, as `w_i / m`.
//!
//! All functions are pure over the snapshot.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::ObjectiveOracle;
use crate::protocol::{AgentState, MassChannel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("weight channel is cold: agent {agent} has weight {weight}")]
    WeightChannelCold { agent: usize, weight: f64 },
    #[error("shadow channel disabled; exact-gradient metrics unavailable")]
    ShadowDisabled,
    #[error("v history of agent {agent} cannot serve time {t}")]
    HistoryTooShallow { agent: usize, t: u64 },
    #[error("agent {0} out of range")]
    BadAgent(usize),
}

/// Neumaier compensated summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Which mass channel an audit looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Tracking,
    Shadow,
    Weight,
}

fn channel(st: &AgentState, which: Channel) -> Option<&MassChannel> {
    match which {
        Channel::Tracking => Some(&st.tracking),
        Channel::Shadow => st.shadow.as_ref(),
        Channel::Weight => Some(&st.weight),
    }
}

/// Per coordinate: `(sum z + sum in-flight, sum g_last)`, compensated.
///
/// In-flight mass on edge `j -> i` is `rho_out` at `j` minus `i`'s buffer for `j`.
pub fn mass_totals(states: &[AgentState], which: Channel) -> Option<(Vec<f64>, Vec<f64>)> {
    let dim = channel(states.first()?, which)?.z.len();
    let mut held = vec![CompensatedSum::default(); dim];
    let mut source = vec![CompensatedSum::default(); dim];
    for st in states {
        let ch = channel(st, which)?;
        for d in 0..dim {
            held[d].add(ch.z[d]);
            source[d].add(ch.g_last[d]);
        }
        for ((counter, &rx), &to) in ch.rho_out.iter().zip(&st.out_rx_slot).zip(&st.out_neighbors) {
            let buf = &channel(&states[to], which)?.rho_buf[rx];
            for d in 0..dim {
                held[d].add(counter[d]);
                held[d].add(-buf[d]);
            }
        }
    }
    Some((held.iter().map(CompensatedSum::value).collect(), source.iter().map(CompensatedSum::value).collect()))
}

/// `| sum z + in-flight - sum g_last |_inf` on the stochastic channel.
pub fn mass_residual(states: &[AgentState]) -> f64 {
    channel_residual(states, Channel::Tracking).unwrap_or(0.0)
}

pub fn channel_residual(states: &[AgentState], which: Channel) -> Option<f64> {
    let (held, source) = mass_totals(states, which)?;
    Some(held.iter().zip(&source).map(|(h, s)| (h - s).abs()).fold(0.0, f64::max))
}

/// `| sum g_last |_inf`, the scale the residual is judged against.
pub fn mass_scale(states: &[AgentState]) -> f64 {
    mass_totals(states, Channel::Tracking)
        .map(|(_, s)| s.iter().fold(0.0_f64, |a, v| a.max(v.abs())))
        .unwrap_or(0.0)
}

/// Empirical mass shares from the weight channel.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightChannel {
    pub weights: Vec<f64>,
    pub in_flight: f64,
}

impl WeightChannel {
    pub fn from_states(states: &[AgentState]) -> Self {
        let weights: Vec<f64> = states.iter().map(|s| s.weight.z[0]).collect();
        let (held, _) = mass_totals(states, Channel::Weight).unwrap_or((vec![0.0], vec![0.0]));
        let mut on_agents = CompensatedSum::default();
        for &w in &weights {
            on_agents.add(w);
        }
        Self { in_flight: held[0] - on_agents.value(), weights }
    }

    /// Agents' weights plus in-flight weight; equals `m` by conservation.
    pub fn total(&self) -> f64 {
        self.weights.iter().sum::<f64>() + self.in_flight
    }

    /// Estimated share `w_i / m` of agent `i`.
    pub fn share(&self, i: usize) -> Result<f64, MetricsError> {
        if let Some((agent, &weight)) = self.weights.iter().enumerate().find(|(_, w)| !(**w > 0.0)) {
            return Err(MetricsError::WeightChannelCold { agent, weight });
        }
        let w = *self.weights.get(i).ok_or(MetricsError::BadAgent(i))?;
        Ok(w / self.weights.len() as f64)
    }
}

pub fn average_x(states: &[AgentState]) -> Vec<f64> {
    let n = states[0].x.len();
    let mut avg = vec![0.0; n];
    for st in states {
        for (a, x) in avg.iter_mut().zip(&st.x) {
            *a += x;
        }
    }
    let inv = 1.0 / states.len() as f64;
    avg.iter_mut().for_each(|a| *a *= inv);
    avg
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `|h - 1 (x) x_avg|^2` where `h` stacks the current `x` with every agent's
/// `v` as seen at times `k, k-1, ..., k-D`.
pub fn consensus_error(states: &[AgentState], k: u64, max_delay: usize) -> Result<f64, MetricsError> {
    let avg = average_x(states);
    let mut total = CompensatedSum::default();
    for st in states {
        total.add(sq_dist(&st.x, &avg));
    }
    for d in 0..=max_delay as u64 {
        let t = k.saturating_sub(d);
        for st in states {
            let v = st.v_at(t).ok_or(MetricsError::HistoryTooShallow { agent: st.id, t })?;
            total.add(sq_dist(v, &avg));
        }
    }
    Ok(total.value())
}

/// `|zbar_i - (w_i / m) * S|^2`, with `S` the total exact-gradient mass
/// (agents plus in flight), which by conservation is `sum_j gbar_last_j`.
pub fn tracking_error(states: &[AgentState], agent: usize) -> Result<f64, MetricsError> {
    let share = WeightChannel::from_states(states).share(agent)?;
    let (_, total) = mass_totals(states, Channel::Shadow).ok_or(MetricsError::ShadowDisabled)?;
    let zbar = &states[agent].shadow.as_ref().ok_or(MetricsError::ShadowDisabled)?.z;
    Ok(zbar.iter().zip(&total).map(|(z, s)| (z - share * s).powi(2)).sum())
}

/// `|zbar_i|^2` at the active agent.
pub fn gradient_norm_error(states: &[AgentState], agent: usize) -> Result<f64, MetricsError> {
    let st = states.get(agent).ok_or(MetricsError::BadAgent(agent))?;
    let zbar = &st.shadow.as_ref().ok_or(MetricsError::ShadowDisabled)?.z;
    Ok(zbar.iter().map(|z| z * z).sum())
}

pub fn merit(e_t: f64, e_c: f64, e_z: f64) -> f64 {
    e_t + e_c + e_z
}

/// `(1/m) sum_i |x_i - x_avg|_inf`.
pub fn dev_inf_avg(states: &[AgentState]) -> f64 {
    let avg = average_x(states);
    states
        .iter()
        .map(|st| st.x.iter().zip(&avg).map(|(x, a)| (x - a).abs()).fold(0.0, f64::max))
        .sum::<f64>()
        / states.len() as f64
}

/// One row of the snapshot table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub k: u64,
    /// Agent that fires at iteration `k`; the error terms are measured at it.
    pub agent: usize,
    pub e_t: f64,
    pub e_c: f64,
    pub e_z: f64,
    pub merit: f64,
    pub grad_inf: f64,
    pub dev_inf_avg: f64,
    pub f_avg: f64,
    pub mass_residual: f64,
    pub mass_scale: f64,
    pub max_delay: usize,
}

impl MetricsSnapshot {
    pub fn compute(
        states: &[AgentState],
        oracle: &ObjectiveOracle,
        k: u64,
        agent: usize,
        max_delay: usize,
        max_delay_so_far: usize,
    ) -> Result<Self, MetricsError> {
        let e_t = tracking_error(states, agent)?;
        let e_c = consensus_error(states, k, max_delay)?;
        let e_z = gradient_norm_error(states, agent)?;
        let avg = average_x(states);
        let grad_inf = oracle.full_grad_sum(&avg).iter().fold(0.0_f64, |a, g| a.max(g.abs()));
        Ok(Self {
            k,
            agent,
            e_t,
            e_c,
            e_z,
            merit: merit(e_t, e_c, e_z),
            grad_inf,
            dev_inf_avg: dev_inf_avg(states),
            f_avg: oracle.total_value(&avg),
            mass_residual: mass_residual(states),
            mass_scale: mass_scale(states),
            max_delay: max_delay_so_far,
        })
    }

    /// Residual within `1e-9 * (1 + |sum g_last|)`.
    pub fn mass_conserved(&self) -> bool {
        self.mass_residual <= 1e-9 * (1.0 + self.mass_scale)
    }
}
