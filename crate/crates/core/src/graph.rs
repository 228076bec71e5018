//! Communication topology: directed graphs, generators and mixing weights.
//!
//! An edge `(i, j)` means agent `i` can send to agent `j`. Self-loops are
//! never stored; every agent implicitly keeps a positive share of its own
//! state through the diagonal of the mixing matrices.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("graph is not strongly connected")]
    NotStronglyConnected,
    #[error("edge list line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Directed graph over agents `0..m`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Digraph {
    m: usize,
    edges: BTreeSet<(usize, usize)>,
    in_nbrs: Vec<Vec<usize>>,
    out_nbrs: Vec<Vec<usize>>,
}

impl Digraph {
    pub fn new(m: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, GraphError> {
        if m == 0 {
            return Err(GraphError::InvalidArgument("agent count must be positive".into()));
        }
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i >= m || j >= m {
                return Err(GraphError::InvalidArgument(format!(
                    "edge ({i}, {j}) out of range for m={m}"
                )));
            }
            if i == j {
                return Err(GraphError::InvalidArgument(format!("self-loop on agent {i}")));
            }
            set.insert((i, j));
        }
        let mut in_nbrs = vec![Vec::new(); m];
        let mut out_nbrs = vec![Vec::new(); m];
        // BTreeSet iteration keeps both adjacency lists sorted.
        for &(i, j) in &set {
            out_nbrs[i].push(j);
            in_nbrs[j].push(i);
        }
        for list in &mut in_nbrs {
            list.sort_unstable();
        }
        Ok(Self { m, edges: set, in_nbrs, out_nbrs })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges.contains(&(from, to))
    }

    /// Agents that can send to `i`, ascending.
    pub fn in_neighbors(&self, i: usize) -> &[usize] {
        &self.in_nbrs[i]
    }

    /// Agents `i` can send to, ascending.
    pub fn out_neighbors(&self, i: usize) -> &[usize] {
        &self.out_nbrs[i]
    }

    /// Edge density among the `m(m-1)` possible directed edges.
    pub fn density(&self) -> f64 {
        if self.m < 2 {
            return 0.0;
        }
        self.edges.len() as f64 / (self.m * (self.m - 1)) as f64
    }

    /// Plain-text edge list: `m=<count>` followed by one `i j` line per edge.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("m={}\n", self.m);
        for (i, j) in self.edges() {
            let _ = writeln!(out, "{i} {j}");
        }
        out
    }

    pub fn from_edge_list(text: &str) -> Result<Self, GraphError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(GraphError::Parse { line: 1, msg: "empty input".into() })?;
        let m = header
            .trim()
            .strip_prefix("m=")
            .and_then(|s| s.trim().parse::<usize>().ok())
            .ok_or_else(|| GraphError::Parse { line: 1, msg: format!("expected `m=<count>`, got `{header}`") })?;
        let mut edges = Vec::new();
        for (idx, line) in lines {
            let mut parts = line.split_whitespace();
            let parse = |p: Option<&str>| p.and_then(|s| s.parse::<usize>().ok());
            match (parse(parts.next()), parse(parts.next()), parts.next()) {
                (Some(i), Some(j), None) => edges.push((i, j)),
                _ => {
                    return Err(GraphError::Parse { line: idx + 1, msg: format!("expected `i j`, got `{line}`") })
                }
            }
        }
        Self::new(m, edges)
    }
}

fn reaches_all(m: usize, start: usize, next: impl Fn(usize) -> Vec<usize>) -> bool {
    let mut seen = vec![false; m];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for v in next(u) {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count == m
}

/// True iff every agent reaches every other along edge direction.
///
/// Forward and reverse reachability from agent 0 are sufficient.
pub fn is_strongly_connected(g: &Digraph) -> bool {
    reaches_all(g.m, 0, |u| g.out_nbrs[u].clone()) && reaches_all(g.m, 0, |u| g.in_nbrs[u].clone())
}

/// Directed cycle `i -> i+1 mod m` plus `extra` distinct random out-neighbors per agent.
pub fn generate_ring_plus_random(m: usize, extra: usize, seed: u64) -> Result<Digraph, GraphError> {
    if m < 2 {
        return Err(GraphError::InvalidArgument(format!("need m >= 2, got {m}")));
    }
    if extra > m - 2 {
        return Err(GraphError::InvalidArgument(format!("extra={extra} exceeds m-2={}", m - 2)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::with_capacity(m * (extra + 1));
    for i in 0..m {
        let succ = (i + 1) % m;
        edges.push((i, succ));
        let candidates: Vec<usize> = (0..m).filter(|&j| j != i && j != succ).collect();
        for pick in index::sample(&mut rng, candidates.len(), extra) {
            edges.push((i, candidates[pick]));
        }
    }
    Digraph::new(m, edges)
}

/// Base directed cycle plus random extra edges until the edge density reaches `p`.
///
/// The target edge count is `ceil(p * m * (m - 1))`.
pub fn generate_connectivity(m: usize, p: f64, seed: u64) -> Result<Digraph, GraphError> {
    if m < 2 {
        return Err(GraphError::InvalidArgument(format!("need m >= 2, got {m}")));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(GraphError::InvalidArgument(format!("density p={p} must lie in (0, 1]")));
    }
    let total = m * (m - 1);
    let cycle_density = 1.0 / (m - 1) as f64;
    if p < cycle_density - 1e-12 {
        return Err(GraphError::InvalidArgument(format!(
            "density p={p} below the base cycle density {cycle_density}"
        )));
    }
    let target = ((p * total as f64) - 1e-9).ceil().max(m as f64) as usize;
    let target = target.min(total);

    let mut edges: Vec<(usize, usize)> = (0..m).map(|i| (i, (i + 1) % m)).collect();
    let mut rest: Vec<(usize, usize)> = (0..m)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && j != (i + 1) % m)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rest.shuffle(&mut rng);
    edges.extend(rest.into_iter().take(target - m));
    Digraph::new(m, edges)
}

/// Row-stochastic consensus weights `W` and column-stochastic push weights `A`.
///
/// `w[i][j] > 0` iff `j` sends to `i` or `i == j`; `a[i][j]` is the share of
/// `j`'s tracking mass pushed to `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingPair {
    pub w: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    pub min_weight: f64,
}

impl MixingPair {
    pub fn m(&self) -> usize {
        self.w.len()
    }

    pub fn max_row_sum_error(&self) -> f64 {
        self.w.iter().map(|row| (row.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn max_col_sum_error(&self) -> f64 {
        let m = self.m();
        (0..m)
            .map(|j| ((0..m).map(|i| self.a[i][j]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Uniform neighbor weighting: `1/(|in_i|+1)` along row `i` of `W`, `1/(|out_j|+1)` down column `j` of `A`.
pub fn build_mixing(g: &Digraph) -> Result<MixingPair, GraphError> {
    if !is_strongly_connected(g) {
        return Err(GraphError::NotStronglyConnected);
    }
    let m = g.m();
    let mut w = vec![vec![0.0; m]; m];
    let mut a = vec![vec![0.0; m]; m];
    for i in 0..m {
        let share = 1.0 / (g.in_neighbors(i).len() + 1) as f64;
        w[i][i] = share;
        for &j in g.in_neighbors(i) {
            w[i][j] = share;
        }
        let push = 1.0 / (g.out_neighbors(i).len() + 1) as f64;
        a[i][i] = push;
        for &j in g.out_neighbors(i) {
            a[j][i] = push;
        }
    }
    let min_weight = w
        .iter()
        .chain(a.iter())
        .flatten()
        .copied()
        .filter(|&x| x > 0.0)
        .fold(f64::INFINITY, f64::min);
    Ok(MixingPair { w, a, min_weight })
}
