//! Per-agent state machine for asynchronous stochastic gradient descent with
//! robust gradient tracking.
//!
//! One activation of agent `i` at global iteration `k`:
//!
//! 1. pick, for each in-neighbor `j`, the freshest publication not younger than
//!    the delay allows (`tau_ij = max(tau_ij, newest stamp <= k - d_j)`);
//! 2. local step `v = x - gamma * z`;
//! 3. consensus `x = w_ii v + sum_j w_ij v_j[tau_ij]`;
//! 4. tracking: absorb unconsumed mass `rho_ij[tau_ij] - rho_buf_ij`, add the
//!    gradient correction `g(x_new) - g_last`, keep `a_ii` of the result and
//!    accumulate `a_ji` of it into the outgoing counters `rho_ji`;
//! 5. publish `(v, rho)` with stamp `k + 1`.
//!
//! Every other agent's state is left untouched. Counters are cumulative, so
//! receiving an old or repeated counter never double-counts mass. Delayed
//! reads are served from [`NetworkStore`], an append-only per-sender log.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Digraph, MixingPair};
use crate::oracle::{ObjectiveOracle, SampleDraw};
use crate::scheduler::ScheduleEvent;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error("delay {delay} from agent {sender} exceeds the bound {max_delay}")]
    DelayOutOfBound { sender: usize, delay: usize, max_delay: usize },
    #[error("no publication of agent {sender} at or before stamp {stamp}")]
    MissingPublication { sender: usize, stamp: u64 },
    #[error("mixing weights do not match the graph: {0}")]
    Mixing(String),
}

/// Tracking mass with its cumulative push counters and consumption buffers.
///
/// The same bookkeeping runs on three channels: the stochastic tracker `z`,
/// its exact-gradient shadow, and a scalar weight channel with unit input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassChannel {
    pub z: Vec<f64>,
    /// Gradient sample most recently folded into `z`.
    pub g_last: Vec<f64>,
    /// Cumulative mass pushed to each out-neighbor (aligned with `out_neighbors`).
    pub rho_out: Vec<Vec<f64>>,
    /// Last consumed counter from each in-neighbor (aligned with `in_neighbors`).
    pub rho_buf: Vec<Vec<f64>>,
}

impl MassChannel {
    pub fn new(initial: Vec<f64>, n_out: usize, n_in: usize) -> Self {
        let dim = initial.len();
        Self { z: initial.clone(), g_last: initial, rho_out: vec![vec![0.0; dim]; n_out], rho_buf: vec![vec![0.0; dim]; n_in] }
    }

    /// Sum step, push step and buffer update.
    ///
    /// `fetched[s]` is in-neighbor `s`'s counter toward this agent at the
    /// selected stamp. `new_grad = None` means no gradient correction.
    pub fn tracking_update(&mut self, fetched: &[&[f64]], new_grad: Option<&[f64]>, a_self: f64, a_out: &[f64]) {
        debug_assert_eq!(fetched.len(), self.rho_buf.len());
        debug_assert_eq!(a_out.len(), self.rho_out.len());
        let mut half = self.z.clone();
        for (rho, buf) in fetched.iter().zip(&self.rho_buf) {
            for ((h, r), b) in half.iter_mut().zip(rho.iter()).zip(buf) {
                *h += r - b;
            }
        }
        if let Some(g) = new_grad {
            // (z - g_last) + g: with z == g_last this yields g bit-for-bit.
            for ((h, old), new) in half.iter_mut().zip(&self.g_last).zip(g) {
                *h = (*h - old) + new;
            }
            self.g_last.copy_from_slice(g);
        }
        for (z, h) in self.z.iter_mut().zip(&half) {
            *z = a_self * h;
        }
        for (counter, share) in self.rho_out.iter_mut().zip(a_out) {
            for (c, h) in counter.iter_mut().zip(&half) {
                *c += share * h;
            }
        }
        for (buf, rho) in self.rho_buf.iter_mut().zip(fetched) {
            buf.copy_from_slice(rho);
        }
    }
}

/// What an agent puts on the wire at one stamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Publication {
    pub sender: usize,
    pub stamp: u64,
    pub v: Vec<f64>,
    /// Counter snapshots, aligned with the sender's out-neighbors.
    pub rho: Vec<Vec<f64>>,
    pub rho_shadow: Option<Vec<Vec<f64>>>,
    pub rho_weight: Vec<Vec<f64>>,
}

/// Per-sender log of publications, ordered by stamp.
///
/// With a retention bound `D`, entries that no reader can select any more
/// (older than the newest entry at or before `now - D`) are dropped on append.
#[derive(Debug, Clone)]
pub struct NetworkStore {
    logs: Vec<VecDeque<Publication>>,
    retention: Option<usize>,
}

impl NetworkStore {
    pub fn new(m: usize, retention: Option<usize>) -> Self {
        Self { logs: vec![VecDeque::new(); m], retention }
    }

    /// Appends `publication`; stamps must strictly increase per sender.
    pub fn append(&mut self, publication: Publication) -> Result<(), ProtocolError> {
        let sender = publication.sender;
        let stamp = publication.stamp;
        let log = self
            .logs
            .get_mut(sender)
            .ok_or_else(|| ProtocolError::InvalidEvent(format!("unknown sender {sender}")))?;
        if log.back().is_some_and(|last| last.stamp >= stamp) {
            return Err(ProtocolError::InvalidEvent(format!("non-increasing stamp {stamp} from agent {sender}")));
        }
        log.push_back(publication);
        if let Some(d) = self.retention {
            let horizon = stamp.saturating_sub(d as u64);
            let keep_from = log.partition_point(|p| p.stamp <= horizon).saturating_sub(1);
            log.drain(..keep_from);
        }
        Ok(())
    }

    /// Newest publication of `sender` with stamp `<= t`.
    pub fn latest_at_or_before(&self, sender: usize, t: u64) -> Option<&Publication> {
        let log = self.logs.get(sender)?;
        let idx = log.partition_point(|p| p.stamp <= t);
        idx.checked_sub(1).map(|i| &log[i])
    }

    /// The publication of `sender` with exactly this stamp.
    pub fn get(&self, sender: usize, stamp: u64) -> Option<&Publication> {
        self.latest_at_or_before(sender, stamp).filter(|p| p.stamp == stamp)
    }

    pub fn newest(&self, sender: usize) -> Option<&Publication> {
        self.logs.get(sender)?.back()
    }

    pub fn len(&self, sender: usize) -> usize {
        self.logs.get(sender).map_or(0, VecDeque::len)
    }
}

/// All local variables of one agent plus its fixed neighborhood and weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: usize,
    pub x: Vec<f64>,
    pub tracking: MassChannel,
    pub shadow: Option<MassChannel>,
    pub weight: MassChannel,
    /// Last used stamp per in-neighbor.
    pub tau: Vec<u64>,
    /// The last `D + 1` published `v`, oldest first, with their stamps.
    pub v_history: VecDeque<(u64, Vec<f64>)>,
    pub in_neighbors: Vec<usize>,
    pub out_neighbors: Vec<usize>,
    /// For each out-neighbor, this agent's position in that neighbor's in-list.
    pub out_rx_slot: Vec<usize>,
    /// For each in-neighbor, this agent's position in that neighbor's out-list.
    pub in_tx_slot: Vec<usize>,
    pub w_self: f64,
    pub w_in: Vec<f64>,
    pub a_self: f64,
    pub a_out: Vec<f64>,
    history_depth: usize,
}

impl AgentState {
    /// Records and returns `tau = max(tau, newest stamp of j <= k - d)` for in-neighbor slot `slot`.
    pub fn select_stamp(&mut self, slot: usize, k: u64, d: usize, store: &NetworkStore) -> Result<u64, ProtocolError> {
        let sender = self.in_neighbors[slot];
        let horizon = k.saturating_sub(d as u64);
        let candidate = store
            .latest_at_or_before(sender, horizon)
            .ok_or(ProtocolError::MissingPublication { sender, stamp: horizon })?
            .stamp;
        let tau = self.tau[slot].max(candidate);
        self.tau[slot] = tau;
        Ok(tau)
    }

    /// Local stochastic gradient step `v = x - gamma * z`.
    pub fn sgd_step(&self, gamma: f64) -> Vec<f64> {
        self.x.iter().zip(&self.tracking.z).map(|(x, z)| x - gamma * z).collect()
    }

    /// Row-stochastic average of the fresh own `v` and fetched neighbor `v`s.
    pub fn consensus_step(&self, v_new: &[f64], fetched: &[&[f64]]) -> Vec<f64> {
        let mut x: Vec<f64> = v_new.iter().map(|v| self.w_self * v).collect();
        for (w, vj) in self.w_in.iter().zip(fetched) {
            for (xd, vd) in x.iter_mut().zip(vj.iter()) {
                *xd += w * vd;
            }
        }
        x
    }

    pub fn history_depth(&self) -> usize {
        self.history_depth
    }

    /// `v` of this agent as seen at global time `t` (newest stamp `<= t`).
    pub fn v_at(&self, t: u64) -> Option<&[f64]> {
        self.v_history.iter().rev().find(|(s, _)| *s <= t).map(|(_, v)| v.as_slice())
    }

    fn record_v(&mut self, stamp: u64, v: Vec<f64>) {
        self.v_history.push_back((stamp, v));
        while self.v_history.len() > self.history_depth {
            self.v_history.pop_front();
        }
    }
}

/// Initial states (`x = 0`, `z = g_last = stochastic gradient at 0`) and the
/// stamp-0 publications that make every delayed read well defined.
pub fn init_states(
    oracle: &ObjectiveOracle,
    g: &Digraph,
    mixing: &MixingPair,
    seed: u64,
    max_delay: usize,
    shadow: bool,
) -> Result<(Vec<AgentState>, Vec<Publication>), ProtocolError> {
    let m = g.m();
    if oracle.m != m || mixing.m() != m {
        return Err(ProtocolError::Mixing(format!(
            "graph has {m} agents, oracle {}, mixing {}",
            oracle.m,
            mixing.m()
        )));
    }
    let n = oracle.n;
    let mut states = Vec::with_capacity(m);
    let mut pubs = Vec::with_capacity(m);
    for i in 0..m {
        let ins = g.in_neighbors(i).to_vec();
        let outs = g.out_neighbors(i).to_vec();
        let w_in: Vec<f64> = ins.iter().map(|&j| mixing.w[i][j]).collect();
        let a_out: Vec<f64> = outs.iter().map(|&j| mixing.a[j][i]).collect();
        let (w_self, a_self) = (mixing.w[i][i], mixing.a[i][i]);
        if w_self <= 0.0 || a_self <= 0.0 || w_in.iter().chain(&a_out).any(|&w| w <= 0.0) {
            return Err(ProtocolError::Mixing(format!("agent {i} has a non-positive weight on its neighborhood")));
        }
        let out_rx_slot = outs
            .iter()
            .map(|&j| g.in_neighbors(j).binary_search(&i).expect("edge present in both lists"))
            .collect();
        let in_tx_slot = ins
            .iter()
            .map(|&j| g.out_neighbors(j).binary_search(&i).expect("edge present in both lists"))
            .collect();
        let zero = vec![0.0; n];
        let g0 = oracle.stoch_grad(i, &zero, SampleDraw::new(seed, i, 0));
        let shadow_channel = shadow.then(|| MassChannel::new(oracle.grad(i, &zero), outs.len(), ins.len()));
        let mut state = AgentState {
            id: i,
            x: zero.clone(),
            tracking: MassChannel::new(g0, outs.len(), ins.len()),
            shadow: shadow_channel,
            weight: MassChannel::new(vec![1.0], outs.len(), ins.len()),
            tau: vec![0; ins.len()],
            v_history: VecDeque::new(),
            in_neighbors: ins,
            out_neighbors: outs,
            out_rx_slot,
            in_tx_slot,
            w_self,
            w_in,
            a_self,
            a_out,
            history_depth: max_delay + 1,
        };
        state.record_v(0, zero.clone());
        pubs.push(publication_of(&state, 0, zero));
        states.push(state);
    }
    Ok((states, pubs))
}

fn publication_of(state: &AgentState, stamp: u64, v: Vec<f64>) -> Publication {
    Publication {
        sender: state.id,
        stamp,
        v,
        rho: state.tracking.rho_out.clone(),
        rho_shadow: state.shadow.as_ref().map(|c| c.rho_out.clone()),
        rho_weight: state.weight.rho_out.clone(),
    }
}

/// What one activation read and used; the basis of trace dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub k: u64,
    pub agent: usize,
    pub delays: Vec<(usize, usize)>,
    /// Selected stamp per in-neighbor, aligned with `delays`.
    pub stamps: Vec<u64>,
    pub gamma: f64,
}

/// Single-threaded reference execution of the protocol under a global
/// iteration counter.
#[derive(Debug, Clone)]
pub struct Simulation<'a> {
    oracle: &'a ObjectiveOracle,
    states: Vec<AgentState>,
    store: NetworkStore,
    seed: u64,
    max_delay: usize,
    k: u64,
}

impl<'a> Simulation<'a> {
    pub fn new(
        oracle: &'a ObjectiveOracle,
        g: &Digraph,
        mixing: &MixingPair,
        seed: u64,
        max_delay: usize,
        shadow: bool,
    ) -> Result<Self, ProtocolError> {
        let (states, pubs) = init_states(oracle, g, mixing, seed, max_delay, shadow)?;
        let mut store = NetworkStore::new(g.m(), Some(max_delay));
        for p in pubs {
            store.append(p)?;
        }
        Ok(Self { oracle, states, store, seed, max_delay, k: 0 })
    }

    pub fn states(&self) -> &[AgentState] {
        &self.states
    }

    /// Mutable access for fault-injection tests.
    pub fn states_mut(&mut self) -> &mut [AgentState] {
        &mut self.states
    }

    pub fn store(&self) -> &NetworkStore {
        &self.store
    }

    pub fn oracle(&self) -> &ObjectiveOracle {
        self.oracle
    }

    /// Current global iteration (number of completed events).
    pub fn k(&self) -> u64 {
        self.k
    }

    pub fn max_delay(&self) -> usize {
        self.max_delay
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Executes one global iteration for `event.agent`.
    pub fn activate(&mut self, event: &ScheduleEvent, gamma: f64) -> Result<ActivationRecord, ProtocolError> {
        let k = self.k;
        if event.k != k {
            return Err(ProtocolError::InvalidEvent(format!("event for k={} at k={k}", event.k)));
        }
        let i = event.agent;
        let state = self
            .states
            .get(i)
            .ok_or_else(|| ProtocolError::InvalidEvent(format!("agent {i} out of range")))?;
        if event.delays.len() != state.in_neighbors.len()
            || event.delays.iter().zip(&state.in_neighbors).any(|(&(j, _), &nb)| j != nb)
        {
            return Err(ProtocolError::InvalidEvent(format!(
                "delays for agent {i} must list in-neighbors {:?}",
                state.in_neighbors
            )));
        }
        if let Some(&(sender, delay)) = event.delays.iter().find(|&&(_, d)| d > self.max_delay) {
            return Err(ProtocolError::DelayOutOfBound { sender, delay, max_delay: self.max_delay });
        }

        let mut state = self.states[i].clone();
        let mut stamps = Vec::with_capacity(event.delays.len());
        for (slot, &(_, d)) in event.delays.iter().enumerate() {
            stamps.push(state.select_stamp(slot, k, d, &self.store)?);
        }
        let fetched: Vec<&Publication> = state
            .in_neighbors
            .iter()
            .zip(&stamps)
            .map(|(&j, &s)| self.store.get(j, s).ok_or(ProtocolError::MissingPublication { sender: j, stamp: s }))
            .collect::<Result<_, _>>()?;

        let v_new = state.sgd_step(gamma);
        let fetched_v: Vec<&[f64]> = fetched.iter().map(|p| p.v.as_slice()).collect();
        let x_new = state.consensus_step(&v_new, &fetched_v);

        let stamp = k + 1;
        let new_grad = self.oracle.stoch_grad(i, &x_new, SampleDraw::new(self.seed, i, stamp));
        let rho: Vec<&[f64]> =
            fetched.iter().zip(&state.in_tx_slot).map(|(p, &s)| p.rho[s].as_slice()).collect();
        state.tracking.tracking_update(&rho, Some(&new_grad), state.a_self, &state.a_out);
        if let Some(shadow) = state.shadow.as_mut() {
            let exact = self.oracle.grad(i, &x_new);
            let rho_shadow: Vec<&[f64]> = fetched
                .iter()
                .zip(&state.in_tx_slot)
                .map(|(p, &s)| p.rho_shadow.as_ref().map(|r| r[s].as_slice()).unwrap_or(&[]))
                .collect();
            shadow.tracking_update(&rho_shadow, Some(&exact), state.a_self, &state.a_out);
        }
        let rho_weight: Vec<&[f64]> =
            fetched.iter().zip(&state.in_tx_slot).map(|(p, &s)| p.rho_weight[s].as_slice()).collect();
        state.weight.tracking_update(&rho_weight, None, state.a_self, &state.a_out);

        state.x = x_new;
        state.record_v(stamp, v_new.clone());
        let publication = publication_of(&state, stamp, v_new);
        self.store.append(publication)?;
        self.states[i] = state;
        self.k = stamp;
        Ok(ActivationRecord { k, agent: i, delays: event.delays.clone(), stamps, gamma })
    }
}
