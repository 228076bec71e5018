#![allow(dead_code)]

use gtsim::graph::{build_mixing, Digraph};
use gtsim::oracle::{NoiseModel, ObjectiveOracle, ProblemSpec, SampleDraw};
use gtsim::runner::{ExperimentConfig, GraphSpec, OracleSpec, ScheduleSpec, StepSchedule, StepSpec};
use gtsim::scheduler::{ActivationPolicy, DelayModel, ScheduleEvent};
use nalgebra::DMatrix;

/// Strong connectivity by a BFS from every node over a dense adjacency matrix.
pub fn reaches_all_from_everywhere(g: &Digraph) -> bool {
    let m = g.m();
    let mut adj = vec![vec![false; m]; m];
    for (a, b) in g.edges() {
        adj[a][b] = true;
    }
    (0..m).all(|src| {
        let mut seen = vec![false; m];
        seen[src] = true;
        let mut queue = std::collections::VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            for v in 0..m {
                if adj[u][v] && !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    })
}

/// The whole algorithm rewritten as products of explicit augmented matrices.
///
/// Parameters: `h = [x_1..x_m, V_0, .., V_D]` where `V_s` holds every agent's
/// `v` as seen `s` events ago; `h' = W_k h + input`.
/// Tracking: `y = [z_1..z_m, per-edge packet slots by age 0..=D, older]`;
/// `y' = A_k (y + e_i delta)` where `delta` is the gradient correction.
/// Stamps are kept in time form: `tau = max(tau, k - d)`.
pub struct MatrixForm<'a> {
    pub oracle: &'a ObjectiveOracle,
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    w: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    /// Edges `(from, to)`.
    edges: Vec<(usize, usize)>,
    tau: Vec<u64>,
    pub h: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub y_shadow: DMatrix<f64>,
    pub y_weight: DMatrix<f64>,
    pub g_last: DMatrix<f64>,
    pub g_last_shadow: DMatrix<f64>,
    pub k: u64,
}

impl<'a> MatrixForm<'a> {
    pub fn new(oracle: &'a ObjectiveOracle, g: &Digraph, d: usize, seed: u64) -> Self {
        let mix = build_mixing(g).unwrap();
        let (m, n) = (g.m(), oracle.n);
        let edges: Vec<(usize, usize)> = g.edges().collect();
        let ny = m + edges.len() * (d + 2);
        let zero = vec![0.0; n];
        let mut g_last = DMatrix::zeros(m, n);
        let mut g_last_shadow = DMatrix::zeros(m, n);
        let mut y = DMatrix::zeros(ny, n);
        let mut y_shadow = DMatrix::zeros(ny, n);
        let mut y_weight = DMatrix::zeros(ny, 1);
        for i in 0..m {
            let g0 = oracle.stoch_grad(i, &zero, SampleDraw::new(seed, i, 0));
            let e0 = oracle.grad(i, &zero);
            for c in 0..n {
                g_last[(i, c)] = g0[c];
                y[(i, c)] = g0[c];
                g_last_shadow[(i, c)] = e0[c];
                y_shadow[(i, c)] = e0[c];
            }
            y_weight[(i, 0)] = 1.0;
        }
        Self {
            oracle,
            m,
            n,
            d,
            seed,
            w: mix.w,
            a: mix.a,
            tau: vec![0; edges.len()],
            edges,
            h: DMatrix::zeros(m * (d + 2), n),
            y,
            y_shadow,
            y_weight,
            g_last,
            g_last_shadow,
            k: 0,
        }
    }

    fn hv(&self, s: usize, j: usize) -> usize {
        self.m + s * self.m + j
    }

    fn slot(&self, e: usize, age: usize) -> usize {
        self.m + e * (self.d + 2) + age
    }

    fn edge(&self, from: usize, to: usize) -> usize {
        self.edges.iter().position(|&e| e == (from, to)).unwrap()
    }

    /// Consensus matrix of event `k` for agent `i` with per-neighbor ages.
    pub fn w_matrix(&self, i: usize, ages: &[(usize, usize)]) -> DMatrix<f64> {
        let dim = self.h.nrows();
        let mut p = DMatrix::zeros(dim, dim);
        for l in 0..self.m {
            if l != i {
                p[(l, l)] = 1.0;
            }
        }
        p[(i, i)] = self.w[i][i];
        for &(j, s) in ages {
            p[(i, self.hv(s, j))] += self.w[i][j];
        }
        for j in 0..self.m {
            let src = if j == i { i } else { self.hv(0, j) };
            p[(self.hv(0, j), src)] = 1.0;
            for s in 1..=self.d {
                p[(self.hv(s, j), self.hv(s - 1, j))] = 1.0;
            }
        }
        p
    }

    /// `(consume, split_shift)` of event `k` for agent `i`; `A_k` is their product.
    pub fn a_factors(&self, i: usize, ages: &[(usize, usize)]) -> (DMatrix<f64>, DMatrix<f64>) {
        let dim = self.y.nrows();
        let mut consume = DMatrix::identity(dim, dim);
        for &(j, s) in ages {
            let e = self.edge(j, i);
            for age in s..=self.d + 1 {
                let col = self.slot(e, age);
                consume[(i, col)] += 1.0;
                consume[(col, col)] = 0.0;
            }
        }
        let mut ss = DMatrix::zeros(dim, dim);
        for l in 0..self.m {
            ss[(l, l)] = if l == i { self.a[i][i] } else { 1.0 };
        }
        for (e, &(from, to)) in self.edges.iter().enumerate() {
            if from == i {
                ss[(self.slot(e, 0), i)] = self.a[to][i];
            }
            for age in 1..=self.d {
                ss[(self.slot(e, age), self.slot(e, age - 1))] = 1.0;
            }
            ss[(self.slot(e, self.d + 1), self.slot(e, self.d))] = 1.0;
            ss[(self.slot(e, self.d + 1), self.slot(e, self.d + 1))] = 1.0;
        }
        (consume, ss)
    }

    pub fn step(&mut self, event: &ScheduleEvent, gamma: f64) {
        let (k, i) = (self.k, event.agent);
        let ages: Vec<(usize, usize)> = event
            .delays
            .iter()
            .map(|&(j, dj)| {
                let e = self.edge(j, i);
                self.tau[e] = self.tau[e].max(k.saturating_sub(dj as u64));
                (j, (k - self.tau[e]) as usize)
            })
            .collect();

        let z_i = self.y.row(i).into_owned();
        let mut h = self.w_matrix(i, &ages) * &self.h;
        let w_ii = self.w[i][i];
        for c in 0..self.n {
            h[(i, c)] -= gamma * w_ii * z_i[c];
            let r = self.hv(0, i);
            h[(r, c)] -= gamma * z_i[c];
        }
        self.h = h;

        let x_new: Vec<f64> = (0..self.n).map(|c| self.h[(i, c)]).collect();
        let g_new = self.oracle.stoch_grad(i, &x_new, SampleDraw::new(self.seed, i, k + 1));
        let e_new = self.oracle.grad(i, &x_new);
        let (consume, ss) = self.a_factors(i, &ages);
        let advance = |y: &DMatrix<f64>, last: &mut DMatrix<f64>, new: &[f64]| {
            let mut c = &consume * y;
            for col in 0..new.len() {
                c[(i, col)] += new[col] - last[(i, col)];
                last[(i, col)] = new[col];
            }
            &ss * c
        };
        self.y = advance(&self.y, &mut self.g_last, &g_new);
        self.y_shadow = advance(&self.y_shadow, &mut self.g_last_shadow, &e_new);
        self.y_weight = &ss * (&consume * &self.y_weight);
        self.k += 1;
    }

    pub fn x(&self, i: usize) -> Vec<f64> {
        self.h.row(i).iter().copied().collect()
    }

    pub fn z(&self, i: usize) -> Vec<f64> {
        self.y.row(i).iter().copied().collect()
    }

    pub fn x_avg(&self) -> Vec<f64> {
        (0..self.n).map(|c| (0..self.m).map(|i| self.h[(i, c)]).sum::<f64>() / self.m as f64).collect()
    }

    pub fn consensus_error(&self) -> f64 {
        let avg = self.x_avg();
        let mut total = 0.0;
        for r in 0..self.h.nrows() {
            for c in 0..self.n {
                total += (self.h[(r, c)] - avg[c]).powi(2);
            }
        }
        total
    }

    /// Tracking error at agent `i` on the exact-gradient channel.
    pub fn tracking_error(&self, i: usize) -> f64 {
        let share = self.y_weight[(i, 0)] / self.m as f64;
        (0..self.n)
            .map(|c| {
                let s: f64 = self.g_last_shadow.column(c).sum();
                (self.y_shadow[(i, c)] - share * s).powi(2)
            })
            .sum()
    }

    pub fn tracking_error_all(&self) -> f64 {
        (0..self.m).map(|i| self.tracking_error(i)).sum()
    }
}

pub fn quadratic_config(m: usize, extra: usize, sigma: f64, events: u64) -> ExperimentConfig {
    ExperimentConfig {
        events,
        snapshot_interval: 500,
        seeds: vec![1],
        fit_tail: 0.5,
        output_dir: None,
        graph: GraphSpec::RingPlusRandom { m, extra, seed: 3 },
        oracle: OracleSpec::Generated {
            n: 5,
            sigma,
            seed: 4,
            problem: ProblemSpec::Quadratic { rows: 200, scale: 1.5 },
            noise: NoiseModel::Gaussian,
        },
        schedule: ScheduleSpec {
            activation: ActivationPolicy::RandomWithCoverage { window: 2 * m.max(1) },
            delay: DelayModel::Uniform { max_delay: 5 },
        },
        step: StepSpec::new(StepSchedule::PowerDecay { gamma0: 0.5, alpha: 0.6 }),
    }
}

pub fn sigmoid_config(m: usize, sigma: f64, events: u64) -> ExperimentConfig {
    ExperimentConfig {
        events,
        snapshot_interval: 1000,
        seeds: vec![1],
        fit_tail: 0.5,
        output_dir: None,
        graph: GraphSpec::RingPlusRandom { m, extra: 2, seed: 7 },
        oracle: OracleSpec::Generated {
            n: 10,
            sigma,
            seed: 11,
            problem: ProblemSpec::NonconvexSigmoid { c_min: 0.5, c_max: 2.0, t_scale: 1.0, mu: 0.01 },
            noise: NoiseModel::Gaussian,
        },
        schedule: ScheduleSpec {
            activation: ActivationPolicy::RandomWithCoverage { window: 32 },
            delay: DelayModel::Uniform { max_delay: 20 },
        },
        step: StepSpec::new(StepSchedule::PowerDecay { gamma0: 0.5, alpha: 0.6 }),
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
