//! Shared fixtures and independent reference implementations for the integration tests.
#![allow(dead_code)]

use geo_iql::approximator::Mlp;
use geo_iql::checkpoint::{Checkpoint, ACTOR, Q1, Q1_TARGET, Q2, Q2_TARGET, VALUE};
use geo_iql::dataset::{ActionSpace, Actions, NormStats, TransitionDataset};
use rand::Rng;

/// Random rows with trajectory flags; the final row always closes a trajectory.
pub fn random_dataset<R: Rng>(rng: &mut R, n: usize, d_s: usize, space: ActionSpace) -> TransitionDataset {
    let states: Vec<f32> = (0..n * d_s).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
    let next_states: Vec<f32> = (0..n * d_s).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
    let actions = match space {
        ActionSpace::Discrete { count } => Actions::Discrete((0..n).map(|_| rng.gen_range(0..count as u32)).collect()),
        ActionSpace::Continuous { dim } => Actions::Continuous((0..n * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()),
    };
    let rewards = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let mut terminals: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.03)).collect();
    let mut timeouts: Vec<bool> = (0..n).map(|i| !terminals[i] && rng.gen_bool(0.02)).collect();
    terminals[n - 1] = true;
    timeouts[n - 1] = false;
    TransitionDataset::new(d_s, space, states, actions, rewards, next_states, terminals, timeouts).unwrap()
}

/// Two-pass mean and population standard deviation per state dimension.
pub fn two_pass_norm(ds: &TransitionDataset) -> (Vec<f64>, Vec<f64>) {
    let d = ds.state_dim();
    let n = ds.len() as f64;
    let mut mean = vec![0.0; d];
    for row in ds.states().chunks(d) {
        for j in 0..d {
            mean[j] += row[j] as f64;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; d];
    for row in ds.states().chunks(d) {
        for j in 0..d {
            let e = row[j] as f64 - mean[j];
            var[j] += e * e;
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt().max(1e-6)).collect();
    (mean, std)
}

pub struct BruteTable {
    pub u_tilde: Vec<f64>,
    pub tau: f64,
    pub sigma: f64,
    pub u: Vec<f64>,
    pub rho: Vec<f64>,
    pub lambda_adapt: Vec<f64>,
    pub penalty: Vec<f64>,
}

/// Quadratic-time penalty table. `alpha_tenths` fixes alpha to a multiple of
/// 0.1 so the quantile rank is an exact integer ceiling.
pub fn brute_table(ds: &TransitionDataset, k: usize, alpha_tenths: usize, lambda_base: f64, epsilon: f64) -> BruteTable {
    let (mean, std) = two_pass_norm(ds);
    let (mean, std): (Vec<f64>, Vec<f64>) = (
        mean.iter().map(|&m| m as f32 as f64).collect(),
        std.iter().map(|&s| s as f32 as f64).collect(),
    );
    let n = ds.len();
    let d = ds.state_dim();
    let emb: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut v: Vec<f64> = (0..d).map(|j| (ds.states()[i * d + j] as f64 - mean[j]) / std[j]).collect();
            match ds.actions() {
                Actions::Discrete(a) => v.push(a[i] as f64),
                Actions::Continuous(a) => {
                    let w = a.len() / n;
                    v.extend(a[i * w..(i + 1) * w].iter().map(|&x| x as f64));
                }
            }
            v
        })
        .collect();
    let mut u_tilde = Vec::with_capacity(n);
    for i in 0..n {
        let mut dist: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| emb[i].iter().zip(&emb[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .collect();
        dist.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = dist[..k].iter().sum::<f64>() / k as f64;
        u_tilde.push(m as f32 as f64);
    }
    let mut sorted = u_tilde.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = (alpha_tenths * n).div_ceil(10).max(1);
    let tau = sorted[rank - 1];
    let mut dev: Vec<f64> = u_tilde.iter().map(|x| (x - tau).abs()).collect();
    dev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = if n % 2 == 1 { dev[n / 2] } else { (dev[n / 2 - 1] + dev[n / 2]) / 2.0 };
    let sigma = med + epsilon;
    let u: Vec<f64> = u_tilde.iter().map(|x| (x - tau) / sigma).collect();
    let rho: Vec<f64> = u.iter().map(|&x| 1.0 / (1.0 + if x > 0.0 { x } else { 0.0 })).collect();
    let lambda_adapt: Vec<f64> = rho.iter().map(|r| lambda_base * (2.0 - 1.5 * r)).collect();
    let penalty = u.iter().zip(&lambda_adapt).map(|(&x, l)| if x > 0.0 { l * x } else { 0.0 }).collect();
    BruteTable { u_tilde, tau, sigma, u, rho, lambda_adapt, penalty }
}

/// Outcome of a central-difference check over every parameter of a network.
pub struct GradCheck {
    pub params: usize,
    pub max_relative: f64,
}

/// A network role the trainer builds, with the loss that trains it.
#[derive(Clone, Copy, Debug)]
pub enum Role {
    /// Expectile regression of a scalar output.
    Value { tau: f64 },
    /// Half squared error on one output column per sample.
    Critic,
    /// Weighted negative log-likelihood of a softmax.
    DiscreteActor,
    /// Weighted squared error on every output.
    ContinuousActor,
}

pub struct LossInputs {
    pub role: Role,
    pub targets: Vec<f64>,
    pub columns: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Loss and its gradient with respect to the network outputs, written out independently.
pub fn role_loss(out: &[f64], width: usize, li: &LossInputs) -> (f64, Vec<f64>) {
    let b = out.len() / width;
    let inv = 1.0 / b as f64;
    let mut g = vec![0.0; out.len()];
    let mut loss = 0.0;
    for i in 0..b {
        let row = &out[i * width..(i + 1) * width];
        match li.role {
            Role::Value { tau } => {
                let u = li.targets[i] - row[0];
                let w = if u < 0.0 { 1.0 - tau } else { tau };
                loss += w * u * u * inv;
                g[i] = -2.0 * w * u * inv;
            }
            Role::Critic => {
                let c = li.columns[i];
                let e = row[c] - li.targets[i];
                loss += 0.5 * e * e * inv;
                g[i * width + c] = e * inv;
            }
            Role::DiscreteActor => {
                let c = li.columns[i];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
                let w = li.weights[i];
                loss -= w * ((row[c] - m) - z.ln()) * inv;
                for j in 0..width {
                    let p = (row[j] - m).exp() / z;
                    g[i * width + j] = w * (p - if j == c { 1.0 } else { 0.0 }) * inv;
                }
            }
            Role::ContinuousActor => {
                let w = li.weights[i];
                for j in 0..width {
                    let e = row[j] - li.targets[i * width + j];
                    loss += w * e * e * inv;
                    g[i * width + j] = 2.0 * w * e * inv;
                }
            }
        }
    }
    (loss, g)
}

/// Compares `backward` against central differences of `role_loss` with step `h`.
pub fn grad_check(net: &Mlp<f64>, input: &[f64], batch: usize, li: &LossInputs, h: f64) -> GradCheck {
    let width = net.output_dim();
    let out = net.forward(input, batch).unwrap();
    let (_, og) = role_loss(&out, width, li);
    let analytic = net.backward(input, batch, &og).unwrap().flat();
    let sizes = net.sizes().to_vec();
    let base = net.flat_params();
    let loss_at = |p: Vec<f64>| {
        let m = Mlp::from_flat(&sizes, p).unwrap();
        role_loss(&m.forward(input, batch).unwrap(), width, li).0
    };
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fd = (loss_at(plus) - loss_at(minus)) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    GradCheck { params: base.len(), max_relative: worst }
}

/// Smallest absolute hidden pre-activation over a batch; keeps finite differences away from rectifier kinks.
pub fn min_hidden_preactivation(net: &Mlp<f64>, input: &[f64], batch: usize) -> f64 {
    let mut x = input.to_vec();
    let mut worst = f64::INFINITY;
    let layers = net.layers();
    for (li, l) in layers.iter().enumerate() {
        let mut y = vec![0.0; batch * l.n_out];
        for b in 0..batch {
            for o in 0..l.n_out {
                let mut s = l.bias[o];
                for i in 0..l.n_in {
                    s += l.weights[o * l.n_in + i] * x[b * l.n_in + i];
                }
                if li + 1 < layers.len() {
                    worst = worst.min(s.abs());
                    s = s.max(0.0);
                }
                y[b * l.n_out + o] = s;
            }
        }
        x = y;
    }
    worst
}

/// A checkpoint whose networks are single affine layers `out = W s + b`, with states left unnormalised.
pub fn affine_checkpoint(d_s: usize, count: usize, actor: (Vec<f32>, Vec<f32>), q1: (Vec<f32>, Vec<f32>), q2: (Vec<f32>, Vec<f32>)) -> Checkpoint {
    let layer = |(w, b): (Vec<f32>, Vec<f32>), out: usize| {
        let mut flat = w;
        flat.extend(b);
        Mlp::from_flat(&[d_s, out], flat).unwrap()
    };
    let q1 = layer(q1, count);
    let q2 = layer(q2, count);
    Checkpoint {
        step: 0,
        action_space: ActionSpace::Discrete { count },
        norm: NormStats { state_mean: vec![0.0; d_s], state_std: vec![1.0; d_s] },
        action_low: vec![],
        action_high: vec![],
        networks: vec![
            (Q1.into(), q1.clone()),
            (Q2.into(), q2.clone()),
            (VALUE.into(), Mlp::zeros(&[d_s, 1]).unwrap()),
            (ACTOR.into(), layer(actor, count)),
            (Q1_TARGET.into(), q1),
            (Q2_TARGET.into(), q2),
        ],
    }
}

/// Golden-section minimiser of a unimodal function on `[lo, hi]`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - r * (hi - lo);
    let mut d = lo + r * (hi - lo);
    while hi - lo > tol {
        if f(c) < f(d) {
            hi = d;
        } else {
            lo = c;
        }
        c = hi - r * (hi - lo);
        d = lo + r * (hi - lo);
    }
    0.5 * (lo + hi)
}

pub fn geoiql_bin() -> std::path::PathBuf {
    std::path::PathBuf::from(env!("CARGO_BIN_EXE_geoiql"))
}
