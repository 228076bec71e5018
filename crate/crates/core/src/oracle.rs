//! Sum-structured objectives `F(x) = sum_i f_i(x)` with exact per-agent
//! gradients and unbiased stochastic gradients.
//!
//! Three families are provided:
//!
//! * `quadratic`: `f_i(x) = 1/2 |A_i x - b_i|^2`, convex with a closed-form
//!   minimizer of the sum.
//! * `nonconvex-sigmoid`: `f_i(x) = sum_d c_{i,d} u(x_d - t_{i,d}) + mu/2 |x|^2`
//!   with `u(s) = s^2 / (1 + s^2)`.
//! * `nonconvex-logistic`: mean logistic loss on a small per-agent dataset plus
//!   the nonconvex penalty `alpha * sum_d x_d^2 / (1 + x_d^2)`.
//!
//! Stochastic gradients either add isotropic Gaussian noise with total variance
//! `sigma^2`, or (logistic only) average a uniformly drawn minibatch.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("normal equations are singular (smallest eigenvalue {min_eig:e})")]
    SingularSystem { min_eig: f64 },
}

/// Identifies one reproducible random sample: the same `(seed, agent, label)`
/// always yields the same draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleDraw {
    pub seed: u64,
    pub agent: usize,
    pub label: u64,
}

impl SampleDraw {
    pub fn new(seed: u64, agent: usize, label: u64) -> Self {
        Self { seed, agent, label }
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        // 2^40 labels per agent before streams could collide.
        rng.set_stream(((self.agent as u64) << 40) ^ self.label);
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum NoiseModel {
    /// Additive `N(0, sigma^2 / n)` per coordinate.
    #[default]
    Gaussian,
    /// Uniform minibatch (with replacement) of the per-agent dataset.
    Minibatch { batch: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Problem {
    Quadratic {
        /// `a[i]` is agent i's matrix, stored row by row.
        a: Vec<Vec<Vec<f64>>>,
        b: Vec<Vec<f64>>,
    },
    NonconvexSigmoid {
        c: Vec<Vec<f64>>,
        t: Vec<Vec<f64>>,
        mu: f64,
    },
    NonconvexLogistic {
        features: Vec<Vec<Vec<f64>>>,
        /// Labels in {-1, +1}.
        labels: Vec<Vec<f64>>,
        alpha: f64,
    },
}

/// Parameters from which a [`Problem`] instance is generated deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ProblemSpec {
    Quadratic {
        /// Rows of each `A_i`.
        rows: usize,
        /// Entries of `A_i` are `N(0, scale^2 / rows)`.
        scale: f64,
    },
    NonconvexSigmoid {
        /// `c_{i,d}` uniform in `[c_min, c_max]`.
        c_min: f64,
        c_max: f64,
        /// `t_{i,d}` are `N(0, t_scale^2)`.
        t_scale: f64,
        mu: f64,
    },
    NonconvexLogistic {
        samples: usize,
        alpha: f64,
        /// Probability of flipping each planted label.
        label_noise: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveOracle {
    pub m: usize,
    pub n: usize,
    pub sigma: f64,
    #[serde(default)]
    pub noise: NoiseModel,
    pub problem: Problem,
}

impl ObjectiveOracle {
    pub fn new(problem: Problem, sigma: f64, noise: NoiseModel) -> Result<Self, OracleError> {
        let (m, n) = problem_shape(&problem)?;
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(OracleError::InvalidArgument(format!("sigma={sigma} must be finite and >= 0")));
        }
        if let NoiseModel::Minibatch { batch } = noise {
            if !matches!(problem, Problem::NonconvexLogistic { .. }) {
                return Err(OracleError::InvalidArgument(
                    "minibatch noise needs a dataset-backed family (nonconvex-logistic)".into(),
                ));
            }
            if batch == 0 {
                return Err(OracleError::InvalidArgument("minibatch size must be positive".into()));
            }
        }
        Ok(Self { m, n, sigma, noise, problem })
    }

    /// Builds a random instance of the requested family.
    pub fn generate(spec: &ProblemSpec, m: usize, n: usize, sigma: f64, noise: NoiseModel, seed: u64) -> Result<Self, OracleError> {
        if m == 0 || n == 0 {
            return Err(OracleError::InvalidArgument("m and n must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gauss = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
        let problem = match *spec {
            ProblemSpec::Quadratic { rows, scale } => {
                if rows == 0 {
                    return Err(OracleError::InvalidArgument("rows must be positive".into()));
                }
                let s = scale / (rows as f64).sqrt();
                let a = (0..m)
                    .map(|_| (0..rows).map(|_| (0..n).map(|_| s * gauss(&mut rng)).collect()).collect())
                    .collect();
                let b = (0..m).map(|_| (0..rows).map(|_| gauss(&mut rng)).collect()).collect();
                Problem::Quadratic { a, b }
            }
            ProblemSpec::NonconvexSigmoid { c_min, c_max, t_scale, mu } => {
                if !(0.0 <= c_min && c_min <= c_max) || mu < 0.0 {
                    return Err(OracleError::InvalidArgument("need 0 <= c_min <= c_max and mu >= 0".into()));
                }
                let c = (0..m).map(|_| (0..n).map(|_| rng.random_range(c_min..=c_max)).collect()).collect();
                let t = (0..m).map(|_| (0..n).map(|_| t_scale * gauss(&mut rng)).collect()).collect();
                Problem::NonconvexSigmoid { c, t, mu }
            }
            ProblemSpec::NonconvexLogistic { samples, alpha, label_noise } => {
                if samples == 0 {
                    return Err(OracleError::InvalidArgument("samples must be positive".into()));
                }
                let planted: Vec<f64> = (0..n).map(|_| gauss(&mut rng)).collect();
                let mut features = Vec::with_capacity(m);
                let mut labels = Vec::with_capacity(m);
                for _ in 0..m {
                    let rows: Vec<Vec<f64>> =
                        (0..samples).map(|_| (0..n).map(|_| gauss(&mut rng)).collect()).collect();
                    let ys = rows
                        .iter()
                        .map(|r| {
                            let y = if dot(r, &planted) >= 0.0 { 1.0 } else { -1.0 };
                            if rng.random::<f64>() < label_noise { -y } else { y }
                        })
                        .collect();
                    features.push(rows);
                    labels.push(ys);
                }
                Problem::NonconvexLogistic { features, labels, alpha }
            }
        };
        Self::new(problem, sigma, noise)
    }

    pub fn family(&self) -> &'static str {
        match self.problem {
            Problem::Quadratic { .. } => "quadratic",
            Problem::NonconvexSigmoid { .. } => "nonconvex-sigmoid",
            Problem::NonconvexLogistic { .. } => "nonconvex-logistic",
        }
    }

    /// `f_i(x)`.
    pub fn value(&self, i: usize, x: &[f64]) -> f64 {
        match &self.problem {
            Problem::Quadratic { a, b } => {
                let r = residual(&a[i], &b[i], x);
                0.5 * dot(&r, &r)
            }
            Problem::NonconvexSigmoid { c, t, mu } => {
                let mut f = 0.5 * mu * dot(x, x);
                for d in 0..self.n {
                    let s = x[d] - t[i][d];
                    f += c[i][d] * s * s / (1.0 + s * s);
                }
                f
            }
            Problem::NonconvexLogistic { features, labels, alpha } => {
                let rows = &features[i];
                let loss: f64 = rows.iter().zip(&labels[i]).map(|(r, y)| softplus(-y * dot(r, x))).sum();
                let reg: f64 = x.iter().map(|v| alpha * v * v / (1.0 + v * v)).sum();
                loss / rows.len() as f64 + reg
            }
        }
    }

    pub fn total_value(&self, x: &[f64]) -> f64 {
        (0..self.m).map(|i| self.value(i, x)).sum()
    }

    /// Exact gradient of `f_i` at `x`.
    pub fn grad(&self, i: usize, x: &[f64]) -> Vec<f64> {
        match &self.problem {
            Problem::Quadratic { a, b } => {
                let r = residual(&a[i], &b[i], x);
                let mut g = vec![0.0; self.n];
                for (row, ri) in a[i].iter().zip(&r) {
                    for (gd, ad) in g.iter_mut().zip(row) {
                        *gd += ad * ri;
                    }
                }
                g
            }
            Problem::NonconvexSigmoid { c, t, mu } => (0..self.n)
                .map(|d| {
                    let s = x[d] - t[i][d];
                    let q = 1.0 + s * s;
                    c[i][d] * 2.0 * s / (q * q) + mu * x[d]
                })
                .collect(),
            Problem::NonconvexLogistic { features, labels, alpha } => {
                let rows = &features[i];
                let mut g = vec![0.0; self.n];
                for (r, y) in rows.iter().zip(&labels[i]) {
                    accumulate_logistic(&mut g, r, *y, x);
                }
                let inv = 1.0 / rows.len() as f64;
                for (gd, xd) in g.iter_mut().zip(x) {
                    *gd = *gd * inv + penalty_grad(*alpha, *xd);
                }
                g
            }
        }
    }

    /// Unbiased stochastic estimate of `grad(i, x)` for the sample `draw`.
    pub fn stoch_grad(&self, i: usize, x: &[f64], draw: SampleDraw) -> Vec<f64> {
        match (self.noise, &self.problem) {
            (NoiseModel::Minibatch { batch }, Problem::NonconvexLogistic { features, labels, alpha }) => {
                let mut rng = draw.rng();
                let rows = &features[i];
                let mut g = vec![0.0; self.n];
                for _ in 0..batch {
                    let k = rng.random_range(0..rows.len());
                    accumulate_logistic(&mut g, &rows[k], labels[i][k], x);
                }
                let inv = 1.0 / batch as f64;
                for (gd, xd) in g.iter_mut().zip(x) {
                    *gd = *gd * inv + penalty_grad(*alpha, *xd);
                }
                g
            }
            _ => {
                let mut g = self.grad(i, x);
                if self.sigma > 0.0 {
                    let normal = Normal::new(0.0, self.sigma / (self.n as f64).sqrt())
                        .expect("finite positive std");
                    let mut rng = draw.rng();
                    for gd in &mut g {
                        *gd += normal.sample(&mut rng);
                    }
                }
                g
            }
        }
    }

    /// `sum_i grad(i, x) = grad F(x)`.
    pub fn full_grad_sum(&self, x: &[f64]) -> Vec<f64> {
        let mut total = self.grad(0, x);
        for i in 1..self.m {
            for (t, g) in total.iter_mut().zip(self.grad(i, x)) {
                *t += g;
            }
        }
        total
    }

    /// Closed-form minimizer of `F`; `None` for the nonconvex families.
    pub fn minimizer(&self) -> Result<Option<Vec<f64>>, OracleError> {
        let Problem::Quadratic { a, b } = &self.problem else {
            return Ok(None);
        };
        let n = self.n;
        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut rhs = DVector::<f64>::zeros(n);
        for (ai, bi) in a.iter().zip(b) {
            let am = to_matrix(ai, n);
            h += am.transpose() * &am;
            rhs += am.transpose() * DVector::from_column_slice(bi);
        }
        let eig = h.clone().symmetric_eigen();
        let max_eig = eig.eigenvalues.max();
        let min_eig = eig.eigenvalues.min();
        if min_eig <= 1e-12 * max_eig.max(1.0) {
            return Err(OracleError::SingularSystem { min_eig });
        }
        let chol = h.cholesky().ok_or(OracleError::SingularSystem { min_eig })?;
        Ok(Some(chol.solve(&rhs).iter().copied().collect()))
    }

    /// Lipschitz constant of `grad f_i`.
    pub fn lipschitz(&self, i: usize) -> f64 {
        match &self.problem {
            Problem::Quadratic { a, .. } => {
                let am = to_matrix(&a[i], self.n);
                (am.transpose() * am).symmetric_eigen().eigenvalues.max()
            }
            // |u''| <= 2 everywhere.
            Problem::NonconvexSigmoid { c, mu, .. } => 2.0 * c[i].iter().fold(0.0_f64, |acc, v| acc.max(v.abs())) + mu,
            Problem::NonconvexLogistic { features, alpha, .. } => {
                let am = to_matrix(&features[i], self.n);
                let curv = (am.transpose() * am).symmetric_eigen().eigenvalues.max();
                curv / (4.0 * features[i].len() as f64) + 2.0 * alpha
            }
        }
    }

    /// A lower bound on `F`; every family is nonnegative.
    pub fn lower_bound(&self) -> f64 {
        0.0
    }
}

fn problem_shape(problem: &Problem) -> Result<(usize, usize), OracleError> {
    let bad = |msg: &str| Err(OracleError::InvalidArgument(msg.to_string()));
    let (m, n) = match problem {
        Problem::Quadratic { a, b } => {
            let m = a.len();
            let n = a.first().and_then(|ai| ai.first()).map_or(0, Vec::len);
            if b.len() != m {
                return bad("quadratic: a and b disagree on agent count");
            }
            for (ai, bi) in a.iter().zip(b) {
                if ai.is_empty() || ai.len() != bi.len() || ai.iter().any(|row| row.len() != n) {
                    return bad("quadratic: ragged A_i or mismatched b_i");
                }
            }
            (m, n)
        }
        Problem::NonconvexSigmoid { c, t, mu } => {
            let m = c.len();
            let n = c.first().map_or(0, Vec::len);
            if t.len() != m || c.iter().chain(t).any(|v| v.len() != n) {
                return bad("sigmoid: c and t must both be m x n");
            }
            if *mu < 0.0 || c.iter().flatten().any(|&v| v < 0.0) {
                return bad("sigmoid: c and mu must be nonnegative");
            }
            (m, n)
        }
        Problem::NonconvexLogistic { features, labels, alpha } => {
            let m = features.len();
            let n = features.first().and_then(|f| f.first()).map_or(0, Vec::len);
            if labels.len() != m || *alpha < 0.0 {
                return bad("logistic: labels/features mismatch or negative alpha");
            }
            for (fi, li) in features.iter().zip(labels) {
                if fi.is_empty() || fi.len() != li.len() || fi.iter().any(|r| r.len() != n) {
                    return bad("logistic: ragged dataset");
                }
            }
            (m, n)
        }
    };
    if m == 0 || n == 0 {
        return bad("problem must have at least one agent and one dimension");
    }
    Ok((m, n))
}

fn to_matrix(rows: &[Vec<f64>], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), n, |r, c| rows[r][c])
}

fn residual(a: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(row, bi)| dot(row, x) - bi).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn accumulate_logistic(g: &mut [f64], row: &[f64], y: f64, x: &[f64]) {
    let coef = -y * sigmoid(-y * dot(row, x));
    for (gd, rd) in g.iter_mut().zip(row) {
        *gd += coef * rd;
    }
}

fn penalty_grad(alpha: f64, v: f64) -> f64 {
    let q = 1.0 + v * v;
    alpha * 2.0 * v / (q * q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(o: &ObjectiveOracle, i: usize, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|d| {
                let mut p = x.to_vec();
                let mut q = x.to_vec();
                p[d] += h;
                q[d] -= h;
                (o.value(i, &p) - o.value(i, &q)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn quadratic_identity_gradient() {
        let problem = Problem::Quadratic {
            a: vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]],
            b: vec![vec![0.0, 0.0]],
        };
        let o = ObjectiveOracle::new(problem, 0.0, NoiseModel::Gaussian).unwrap();
        assert_eq!(o.grad(0, &[1.0, 2.0]), vec![1.0, 2.0]);
        assert_eq!(o.minimizer().unwrap(), Some(vec![0.0, 0.0]));
    }

    #[test]
    fn sigmoid_unit_gradient() {
        let problem = Problem::NonconvexSigmoid { c: vec![vec![1.0]], t: vec![vec![0.0]], mu: 0.0 };
        let o = ObjectiveOracle::new(problem, 0.0, NoiseModel::Gaussian).unwrap();
        let g = o.grad(0, &[1.0]);
        assert!((g[0] - 0.5).abs() < 1e-15);
        let fd = central_diff(&o, 0, &[1.0], 1e-6);
        assert!((fd[0] - 0.5).abs() < 1e-6);
        assert_eq!(o.minimizer().unwrap(), None);
    }

    #[test]
    fn two_agent_scalar_minimizer() {
        let problem = Problem::Quadratic { a: vec![vec![vec![1.0]], vec![vec![2.0]]], b: vec![vec![1.0], vec![2.0]] };
        let o = ObjectiveOracle::new(problem, 0.0, NoiseModel::Gaussian).unwrap();
        let x = o.minimizer().unwrap().unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn singular_normal_equations() {
        let problem = Problem::Quadratic { a: vec![vec![vec![1.0, 1.0]]], b: vec![vec![1.0]] };
        let o = ObjectiveOracle::new(problem, 0.0, NoiseModel::Gaussian).unwrap();
        assert!(matches!(o.minimizer(), Err(OracleError::SingularSystem { .. })));
    }

    #[test]
    fn zero_sigma_is_exact() {
        let spec = ProblemSpec::NonconvexSigmoid { c_min: 0.5, c_max: 1.5, t_scale: 1.0, mu: 0.1 };
        let o = ObjectiveOracle::generate(&spec, 3, 4, 0.0, NoiseModel::Gaussian, 9).unwrap();
        let x = [0.3, -1.0, 2.0, 0.0];
        assert_eq!(o.stoch_grad(1, &x, SampleDraw::new(1, 1, 5)), o.grad(1, &x));
    }

    #[test]
    fn single_agent_full_grad_is_grad() {
        let spec = ProblemSpec::Quadratic { rows: 3, scale: 1.0 };
        let o = ObjectiveOracle::generate(&spec, 1, 3, 0.0, NoiseModel::Gaussian, 2).unwrap();
        let x = [0.1, 0.2, -0.3];
        assert_eq!(o.full_grad_sum(&x), o.grad(0, &x));
    }

    #[test]
    fn same_draw_same_sample() {
        let spec = ProblemSpec::Quadratic { rows: 3, scale: 1.0 };
        let o = ObjectiveOracle::generate(&spec, 2, 3, 1.0, NoiseModel::Gaussian, 2).unwrap();
        let x = [0.1, 0.2, -0.3];
        let d = SampleDraw::new(4, 1, 77);
        assert_eq!(o.stoch_grad(1, &x, d), o.stoch_grad(1, &x, d));
        assert_ne!(o.stoch_grad(1, &x, d), o.stoch_grad(1, &x, SampleDraw::new(4, 1, 78)));
        assert_ne!(o.stoch_grad(1, &x, d), o.stoch_grad(1, &x, SampleDraw::new(4, 0, 77)));
    }

    #[test]
    fn minibatch_requires_dataset() {
        let spec = ProblemSpec::Quadratic { rows: 3, scale: 1.0 };
        let err = ObjectiveOracle::generate(&spec, 2, 3, 0.0, NoiseModel::Minibatch { batch: 4 }, 2);
        assert!(matches!(err, Err(OracleError::InvalidArgument(_))));
    }

    #[test]
    fn shape_validation() {
        let problem = Problem::NonconvexSigmoid { c: vec![vec![1.0, 2.0]], t: vec![vec![0.0]], mu: 0.0 };
        assert!(ObjectiveOracle::new(problem, 0.0, NoiseModel::Gaussian).is_err());
        let problem = Problem::NonconvexSigmoid { c: vec![vec![1.0]], t: vec![vec![0.0]], mu: 0.0 };
        assert!(ObjectiveOracle::new(problem, -1.0, NoiseModel::Gaussian).is_err());
    }
}
