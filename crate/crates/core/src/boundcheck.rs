//! Numerical check of the Lipschitz pessimism bound.
//!
//! With `Q*` L*-Lipschitz, `Q_hat` L_hat-Lipschitz and `|Q_hat - Q*| <= eps` on the
//! data, any `lambda >= L_hat + L* + eps / d_min` gives
//! `Q_hat(z) - lambda * d(z, D) <= Q*(z)` at every query `z` with `d(z, D) >= d_min`.
//!
//! `Q_hat` here is a scalar network over embedding space. Off the state-action
//! lattice, `Q*` is taken as its lower McShane extension
//! `max_j (Q*_j - L* |z - z_j|)`, which agrees with the table on the lattice
//! and keeps the same Lipschitz constant. The training penalty uses the mean
//! distance to `k` neighbours, which is never smaller than the nearest-neighbour
//! distance used here, so a fixed `lambda` above the threshold also bounds it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approximator::{empirical_slope, Adam, AdamConfig, Mlp};
use crate::dataset::{compute_norm_stats, ActionRef, Actions, NormStats, TransitionDataset};
use crate::envbench::{solve_tabular, GridMdp, GRID_ACTIONS};
use crate::error::{Error, Result};
use crate::geometry::{embed, DiscreteEmbedding};
use crate::knn::NeighborIndex;

pub const VIOLATION_TOLERANCE: f64 = 1e-6;

/// Exact `Q*` on every state-action pair of a finite MDP, embedded, with the dataset's support marked.
#[derive(Clone, Debug)]
pub struct BoundProblem {
    pub dim: usize,
    /// Row-major lattice embeddings.
    pub lattice: Vec<f64>,
    pub q_star: Vec<f64>,
    pub in_data: Vec<bool>,
    pub l_star: f64,
    data_index: NeighborIndex,
    data_rows: Vec<usize>,
}

impl BoundProblem {
    pub fn new(dim: usize, lattice: Vec<f64>, q_star: Vec<f64>, in_data: Vec<bool>) -> Result<Self> {
        let n = q_star.len();
        if dim == 0 || lattice.len() != n * dim || in_data.len() != n {
            return Err(Error::validation("lattice, values and support flags disagree in length"));
        }
        let data_rows: Vec<usize> = (0..n).filter(|&i| in_data[i]).collect();
        if data_rows.is_empty() {
            return Err(Error::validation("no lattice point is covered by the dataset"));
        }
        let pts = data_rows.iter().flat_map(|&i| lattice[i * dim..(i + 1) * dim].iter().copied()).collect();
        let data_index = NeighborIndex::build(pts, dim)?;
        let l_star = max_pairwise_slope(&lattice, &q_star, dim);
        Ok(BoundProblem { dim, lattice, q_star, in_data, l_star, data_index, data_rows })
    }

    pub fn len(&self) -> usize {
        self.q_star.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q_star.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.lattice[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data_points(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.data_rows.iter().map(|&i| (self.point(i), self.q_star[i]))
    }

    /// Distance from `z` to the nearest covered lattice point.
    pub fn distance_to_data(&self, z: &[f64]) -> Result<f64> {
        Ok(self.data_index.nearest(z)?.distance)
    }

    /// Lower McShane extension of the table.
    pub fn q_star_at(&self, z: &[f64]) -> f64 {
        (0..self.len())
            .map(|j| self.q_star[j] - self.l_star * dist(z, self.point(j)))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Lattice of a grid MDP. States are cell coordinates normalised with the
    /// dataset's statistics; a pair is covered when some row starts in that
    /// cell with that action.
    pub fn from_grid(g: &GridMdp, ds: &TransitionDataset, gamma: f64) -> Result<(Self, NormStats)> {
        let Actions::Discrete(acts) = ds.actions() else {
            return Err(Error::Unsupported("grid bound check needs a discrete dataset".into()));
        };
        if ds.state_dim() != 2 {
            return Err(Error::Dimension { expected: 2, got: ds.state_dim() });
        }
        let norm = compute_norm_stats(ds);
        let sol = solve_tabular(&g.to_tabular(), gamma)?;
        let mut covered = vec![false; g.n_cells() * GRID_ACTIONS];
        for i in 0..ds.len() {
            let c = g
                .cell_of(ds.state(i))
                .ok_or_else(|| Error::validation(format!("row {i} is not a state of this grid")))?;
            covered[g.index(c) * GRID_ACTIONS + acts[i] as usize] = true;
        }
        let mut lattice = Vec::new();
        let mut q_star = Vec::new();
        let mut in_data = Vec::new();
        for idx in 0..g.n_cells() {
            let c = g.cell(idx);
            if g.is_wall(c) || c == g.goal {
                continue;
            }
            let s = [c.0 as f32, c.1 as f32];
            for a in 0..GRID_ACTIONS {
                let z = embed(&s, ActionRef::Discrete(a as u32), &norm)?;
                lattice.extend_from_slice(z.as_slice());
                q_star.push(sol.q(idx, a));
                in_data.push(covered[idx * GRID_ACTIONS + a]);
            }
        }
        let dim = 2 + DiscreteEmbedding::Index.action_width(ds.action_space());
        Ok((BoundProblem::new(dim, lattice, q_star, in_data)?, norm))
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Largest `|v_i - v_j| / |z_i - z_j|` over all pairs of distinct points.
pub fn max_pairwise_slope(points: &[f64], values: &[f64], dim: usize) -> f64 {
    let n = values.len();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let zi = &points[i * dim..(i + 1) * dim];
            let mut best: f64 = 0.0;
            for j in i + 1..n {
                let d = dist(zi, &points[j * dim..(j + 1) * dim]);
                if d > 0.0 {
                    best = best.max((values[i] - values[j]).abs() / d);
                }
            }
            best
        })
        .reduce(|| 0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub z: Vec<f64>,
    pub q_star: f64,
    pub distance: f64,
}

/// Every uncovered lattice pair plus `n_random` points drawn uniformly from
/// the lattice bounding box at least `min_distance` away from the data.
pub fn sample_queries(problem: &BoundProblem, n_random: usize, min_distance: f64, seed: u64) -> Result<Vec<Query>> {
    let dim = problem.dim;
    let mut queries = Vec::new();
    for i in 0..problem.len() {
        if !problem.in_data[i] {
            let z = problem.point(i).to_vec();
            let distance = problem.distance_to_data(&z)?;
            queries.push(Query { z, q_star: problem.q_star[i], distance });
        }
    }
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for i in 0..problem.len() {
        for (j, &x) in problem.point(i).iter().enumerate() {
            lo[j] = lo[j].min(x);
            hi[j] = hi[j].max(x);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drawn = 0;
    let mut attempts = 0usize;
    while drawn < n_random {
        attempts += 1;
        if attempts > 1000 * n_random.max(1) {
            return Err(Error::validation("could not place queries at the requested distance from the data"));
        }
        let z: Vec<f64> = (0..dim).map(|j| rng.gen_range(lo[j]..=hi[j])).collect();
        let distance = problem.distance_to_data(&z)?;
        if distance < min_distance {
            continue;
        }
        let q_star = problem.q_star_at(&z);
        queries.push(Query { z, q_star, distance });
        drawn += 1;
    }
    Ok(queries)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub l_hat: f64,
    pub l_hat_sampled: f64,
    pub l_star: f64,
    pub epsilon_fit: f64,
    pub d_min: f64,
}

impl Constants {
    pub fn lambda_threshold(&self) -> f64 {
        self.l_hat + self.l_star + self.epsilon_fit / self.d_min
    }
}

fn eval(net: &Mlp<f64>, z: &[f64]) -> Result<f64> {
    Ok(net.forward(z, 1)?[0])
}

fn check_qhat(qhat: &Mlp<f32>, problem: &BoundProblem) -> Result<()> {
    if qhat.input_dim() != problem.dim || qhat.output_dim() != 1 {
        return Err(Error::Dimension { expected: problem.dim, got: qhat.input_dim() });
    }
    Ok(())
}

pub fn estimate_constants(qhat: &Mlp<f32>, problem: &BoundProblem, queries: &[Query]) -> Result<Constants> {
    check_qhat(qhat, problem)?;
    if queries.is_empty() {
        return Err(Error::invalid("bound check needs at least one query"));
    }
    let wide = qhat.cast::<f64>();
    let mut epsilon_fit: f64 = 0.0;
    for (z, q) in problem.data_points() {
        epsilon_fit = epsilon_fit.max((eval(&wide, z)? - q).abs());
    }
    let d_min = queries.iter().map(|q| q.distance).fold(f64::INFINITY, f64::min);
    if !(d_min > 0.0) {
        return Err(Error::validation("a query coincides with the data; d_min = 0 leaves the threshold undefined"));
    }
    // sampled slope between each query and its nearest datum, for diagnostics
    let f32s = |z: &[f64]| z.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    let mut pairs = Vec::new();
    for q in queries.iter().take(2000) {
        let nn = problem.data_index.nearest(&q.z)?;
        pairs.push((f32s(&q.z), f32s(problem.point(problem.data_rows[nn.index]))));
    }
    Ok(Constants {
        l_hat: qhat.lipschitz_upper_estimate(),
        l_hat_sampled: empirical_slope(qhat, &pairs)?,
        l_star: problem.l_star,
        epsilon_fit,
        d_min,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    #[serde(flatten)]
    pub constants: Constants,
    pub lambda_threshold: f64,
    pub lambda: f64,
    pub queries: usize,
    pub violations: usize,
    /// Largest `Q_tilde - Q*` over the queries; positive beyond the tolerance means a violation.
    pub worst_margin: f64,
    /// Queries where `|Q_hat - Q*| > (L_hat + L*) d + eps`.
    pub combined_bound_failures: usize,
}

impl BoundReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{} lambda={:.6} threshold={:.6} violations={}/{} worst_margin={:.6e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.lambda,
            self.lambda_threshold,
            self.violations,
            self.queries,
            self.worst_margin
        )
    }
}

pub fn check_pessimism(qhat: &Mlp<f32>, problem: &BoundProblem, queries: &[Query], lambda: f64) -> Result<BoundReport> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("lambda must be a finite non-negative number"));
    }
    let constants = estimate_constants(qhat, problem, queries)?;
    let wide = qhat.cast::<f64>();
    let per_query: Vec<(f64, bool)> = queries
        .par_iter()
        .map(|q| {
            let qh = eval(&wide, &q.z)?;
            let margin = qh - lambda * q.distance - q.q_star;
            let combined = (qh - q.q_star).abs()
                > (constants.l_hat + constants.l_star) * q.distance + constants.epsilon_fit + VIOLATION_TOLERANCE;
            Ok((margin, combined))
        })
        .collect::<Result<_>>()?;
    let violations = per_query.iter().filter(|(m, _)| *m > VIOLATION_TOLERANCE).count();
    let worst_margin = per_query.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let combined_bound_failures = per_query.iter().filter(|p| p.1).count();
    Ok(BoundReport {
        lambda_threshold: constants.lambda_threshold(),
        constants,
        lambda,
        queries: queries.len(),
        violations,
        worst_margin,
        combined_bound_failures,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { hidden: vec![64, 64], steps: 3000, learning_rate: 1e-3, seed: 0 }
    }
}

/// Full-batch least-squares fit of a scalar network to `Q*` on the covered
/// lattice. With `inflate = Some((queries, delta))` the network is also pushed
/// towards `Q* + delta` on those queries, an over-optimistic estimate off the data.
pub fn fit_qhat(problem: &BoundProblem, inflate: Option<(&[Query], f64)>, cfg: &FitConfig) -> Result<Mlp<f32>> {
    let mut inputs: Vec<f32> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    for (z, q) in problem.data_points() {
        inputs.extend(z.iter().map(|&x| x as f32));
        targets.push(q);
    }
    if let Some((queries, delta)) = inflate {
        for q in queries {
            inputs.extend(q.z.iter().map(|&x| x as f32));
            targets.push(q.q_star + delta);
        }
    }
    let n = targets.len();
    let mut sizes = vec![problem.dim];
    sizes.extend(&cfg.hidden);
    sizes.push(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Mlp::new_uniform(&sizes, &mut rng)?;
    let mut opt = Adam::new(&net, AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() });
    for _ in 0..cfg.steps {
        let cache = net.forward_cached(&inputs, n)?;
        let grad: Vec<f32> = cache
            .output()
            .iter()
            .zip(&targets)
            .map(|(&o, &t)| (2.0 * (o as f64 - t) / n as f64) as f32)
            .collect();
        let g = net.backward_cached(&cache, &grad)?;
        opt.step(&mut net, &g)?;
    }
    Ok(net)
}
