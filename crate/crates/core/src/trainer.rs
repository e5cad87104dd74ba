//! Implicit Q-learning with an optional precomputed reward penalty.
//!
//! Each step samples a batch of row indices, fits `V` by expectile regression
//! towards `min(Q1_target, Q2_target)`, regresses both critics onto
//! `r - penalty + gamma * (1 - terminal) * V(s')`, soft-updates the targets and
//! fits the actor by advantage-weighted regression. The three modes share
//! every update; they differ only in the critic target (`geo-iql`) and the
//! actor weights (`bc` uses weight 1).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::approximator::{Adam, AdamConfig, ForwardCache, Mlp};
use crate::checkpoint::{Checkpoint, ACTOR, Q1, Q1_TARGET, Q2, Q2_TARGET, VALUE};
use crate::dataset::{compute_norm_stats, ActionSpace, Actions, NormStats, TransitionDataset};
use crate::error::{Error, Result};
use crate::geometry::PenaltyTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Iql,
    GeoIql,
    Bc,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Iql => "iql",
            Mode::GeoIql => "geo-iql",
            Mode::Bc => "bc",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iql" => Ok(Mode::Iql),
            "geo-iql" => Ok(Mode::GeoIql),
            "bc" => Ok(Mode::Bc),
            _ => Err(Error::invalid(format!("unknown mode '{s}' (iql, geo-iql, bc)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub gamma: f64,
    pub expectile: f64,
    pub awr_beta: f64,
    pub awr_weight_cap: f64,
    pub target_soft_rate: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub log_interval: usize,
    /// Emit a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_interval: usize,
    /// Treat timeout rows like terminals in the critic target.
    pub mask_timeouts: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Iql,
            gamma: 0.99,
            expectile: 0.7,
            awr_beta: 3.0,
            awr_weight_cap: 100.0,
            target_soft_rate: 0.005,
            batch_size: 256,
            total_steps: 100_000,
            seed: 0,
            hidden: vec![256, 256],
            learning_rate: 3e-4,
            log_interval: 1000,
            checkpoint_interval: 0,
            mask_timeouts: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.expectile > 0.5 && self.expectile < 1.0) {
            return bad("expectile must lie in (0.5, 1)");
        }
        if !(self.awr_beta > 0.0 && self.awr_beta.is_finite()) {
            return bad("awr_beta must be positive");
        }
        if !(self.awr_weight_cap > 0.0) {
            return bad("awr_weight_cap must be positive");
        }
        if !(self.target_soft_rate > 0.0 && self.target_soft_rate <= 1.0) {
            return bad("target_soft_rate must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return bad("batch_size and total_steps must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.log_interval == 0 {
            return bad("log_interval must be positive");
        }
        Ok(())
    }
}

/// `|tau - 1(u < 0)| * u^2`.
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    w * u * u
}

pub fn critic_target(r: f64, penalty: f64, v_next: f64, terminal: bool, gamma: f64, mode: Mode) -> f64 {
    let shaped = if mode == Mode::GeoIql { r - penalty } else { r };
    let cont = if terminal { 0.0 } else { 1.0 };
    shaped + gamma * cont * v_next
}

/// Advantage-weighted-regression weight; behaviour cloning weighs every row equally.
pub fn actor_weight(advantage: f64, beta: f64, cap: f64, mode: Mode) -> f64 {
    match mode {
        Mode::Bc => 1.0,
        Mode::Iql | Mode::GeoIql => (beta * advantage).exp().min(cap),
    }
}

pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let e: Vec<f64> = logits.iter().map(|&x| (x as f64 - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Continuous(Vec<f32>),
    Discrete(u32),
}

/// Evaluation-time view of a checkpoint's actor.
#[derive(Clone, Debug)]
pub struct Policy {
    actor: Mlp<f32>,
    norm: NormStats,
    space: ActionSpace,
    low: Vec<f32>,
    high: Vec<f32>,
}

impl Policy {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let actor = ck.network(ACTOR)?.clone();
        let out = match ck.action_space {
            ActionSpace::Continuous { dim } => dim,
            ActionSpace::Discrete { count } => count,
        };
        if actor.input_dim() != ck.norm.dim() || actor.output_dim() != out {
            return Err(Error::validation("actor shape does not match checkpoint action space"));
        }
        Ok(Policy {
            actor,
            norm: ck.norm.clone(),
            space: ck.action_space,
            low: ck.action_low.clone(),
            high: ck.action_high.clone(),
        })
    }

    pub fn action_space(&self) -> ActionSpace {
        self.space
    }

    pub fn raw_output(&self, state: &[f32]) -> Result<Vec<f32>> {
        if state.len() != self.norm.dim() {
            return Err(Error::Dimension { expected: self.norm.dim(), got: state.len() });
        }
        let mut x = vec![0f32; state.len()];
        self.norm.normalize_into(state, &mut x);
        self.actor.forward(&x, 1)
    }

    /// `pi(. | s)` for discrete action spaces.
    pub fn probabilities(&self, state: &[f32]) -> Result<Vec<f64>> {
        if !self.space.is_discrete() {
            return Err(Error::Unsupported("action probabilities need a discrete action space".into()));
        }
        Ok(softmax(&self.raw_output(state)?))
    }

    pub fn greedy(&self, state: &[f32]) -> Result<Action> {
        let out = self.raw_output(state)?;
        Ok(match self.space {
            ActionSpace::Discrete { .. } => {
                let wide: Vec<f64> = out.iter().map(|&x| x as f64).collect();
                Action::Discrete(argmax(&wide) as u32)
            }
            ActionSpace::Continuous { .. } => Action::Continuous(
                out.iter()
                    .enumerate()
                    .map(|(j, &x)| x.clamp(self.low[j], self.high[j]))
                    .collect(),
            ),
        })
    }
}

pub fn greedy_action(ck: &Checkpoint, state: &[f32]) -> Result<Action> {
    Policy::from_checkpoint(ck)?.greedy(state)
}

/// `min(Q1, Q2)` over all actions of a discrete checkpoint.
#[derive(Clone, Debug)]
pub struct Critic {
    q1: Mlp<f32>,
    q2: Mlp<f32>,
    norm: NormStats,
}

impl Critic {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let ActionSpace::Discrete { count } = ck.action_space else {
            return Err(Error::Unsupported("per-action critic values need a discrete action space".into()));
        };
        let q1 = ck.network(Q1)?.clone();
        let q2 = ck.network(Q2)?.clone();
        for q in [&q1, &q2] {
            if q.input_dim() != ck.norm.dim() || q.output_dim() != count {
                return Err(Error::validation("critic shape does not match checkpoint"));
            }
        }
        Ok(Critic { q1, q2, norm: ck.norm.clone() })
    }

    pub fn q_values(&self, state: &[f32]) -> Result<Vec<f64>> {
        let mut x = vec![0f32; state.len()];
        if state.len() != self.norm.dim() {
            return Err(Error::Dimension { expected: self.norm.dim(), got: state.len() });
        }
        self.norm.normalize_into(state, &mut x);
        let a = self.q1.forward(&x, 1)?;
        let b = self.q2.forward(&x, 1)?;
        Ok(a.iter().zip(&b).map(|(&x, &y)| x.min(y) as f64).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss_v: f64,
    pub loss_q: f64,
    pub loss_actor: f64,
    pub mean_penalty_in_batch: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub loss_v: f64,
    pub loss_q: f64,
    pub loss_actor: f64,
    pub mean_penalty: f64,
}

pub enum TrainEvent<'a> {
    Log(&'a LogRecord),
    Checkpoint(&'a Checkpoint),
}

pub struct Trainer<'a> {
    ds: &'a TransitionDataset,
    table: Option<&'a PenaltyTable>,
    cfg: TrainConfig,
    norm: NormStats,
    states: Vec<f32>,
    next_states: Vec<f32>,
    action_low: Vec<f32>,
    action_high: Vec<f32>,
    q1: Mlp<f32>,
    q2: Mlp<f32>,
    q1_target: Mlp<f32>,
    q2_target: Mlp<f32>,
    value: Mlp<f32>,
    actor: Mlp<f32>,
    opt_q1: Adam,
    opt_q2: Adam,
    opt_value: Adam,
    opt_actor: Adam,
    rng: ChaCha8Rng,
    step: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(ds: &'a TransitionDataset, table: Option<&'a PenaltyTable>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if let Some(t) = table {
            t.check_matches(ds)?;
        } else if cfg.mode == Mode::GeoIql {
            return Err(Error::invalid("mode geo-iql needs a penalty table"));
        }
        if let Some(t) = table {
            if let Some(i) = t.penalty.iter().position(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::validation(format!("penalty at row {i} is not a finite non-negative value")));
            }
        }
        let norm = compute_norm_stats(ds);
        let d = ds.state_dim();
        let mut states = vec![0f32; ds.states().len()];
        let mut next_states = vec![0f32; ds.states().len()];
        for i in 0..ds.len() {
            norm.normalize_into(ds.state(i), &mut states[i * d..(i + 1) * d]);
            norm.normalize_into(ds.next_state(i), &mut next_states[i * d..(i + 1) * d]);
        }
        let (q_in, q_out, actor_out) = match ds.action_space() {
            ActionSpace::Discrete { count } => (d, count, count),
            ActionSpace::Continuous { dim } => (d + dim, 1, dim),
        };
        let (action_low, action_high) = match ds.actions() {
            Actions::Discrete(_) => (Vec::new(), Vec::new()),
            Actions::Continuous(a) => {
                let dim = ds.action_space().embed_dim();
                let mut lo = vec![f32::INFINITY; dim];
                let mut hi = vec![f32::NEG_INFINITY; dim];
                for row in a.chunks_exact(dim) {
                    for j in 0..dim {
                        lo[j] = lo[j].min(row[j]);
                        hi[j] = hi[j].max(row[j]);
                    }
                }
                (lo, hi)
            }
        };
        let sizes = |input: usize, output: usize| -> Vec<usize> {
            let mut s = vec![input];
            s.extend(&cfg.hidden);
            s.push(output);
            s
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let q1 = Mlp::new_uniform(&sizes(q_in, q_out), &mut rng)?;
        let q2 = Mlp::new_uniform(&sizes(q_in, q_out), &mut rng)?;
        let value = Mlp::new_uniform(&sizes(d, 1), &mut rng)?;
        let actor = Mlp::new_uniform(&sizes(d, actor_out), &mut rng)?;
        let adam = AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() };
        Ok(Trainer {
            ds,
            table,
            norm,
            states,
            next_states,
            action_low,
            action_high,
            opt_q1: Adam::new(&q1, adam),
            opt_q2: Adam::new(&q2, adam),
            opt_value: Adam::new(&value, adam),
            opt_actor: Adam::new(&actor, adam),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            value,
            actor,
            rng,
            step: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    fn gather_states(&self, src: &[f32], idx: &[usize]) -> Vec<f32> {
        let d = self.ds.state_dim();
        idx.iter().flat_map(|&i| src[i * d..(i + 1) * d].iter().copied()).collect()
    }

    fn critic_input(&self, states: &[f32], idx: &[usize]) -> Vec<f32> {
        match self.ds.actions() {
            Actions::Discrete(_) => states.to_vec(),
            Actions::Continuous(a) => {
                let d = self.ds.state_dim();
                let da = self.ds.action_space().embed_dim();
                let mut out = Vec::with_capacity(idx.len() * (d + da));
                for (b, &i) in idx.iter().enumerate() {
                    out.extend_from_slice(&states[b * d..(b + 1) * d]);
                    out.extend_from_slice(&a[i * da..(i + 1) * da]);
                }
                out
            }
        }
    }

    /// Column of each row's dataset action in a critic output block.
    fn action_columns(&self, idx: &[usize]) -> Vec<usize> {
        match self.ds.actions() {
            Actions::Discrete(a) => idx.iter().map(|&i| a[i] as usize).collect(),
            Actions::Continuous(_) => vec![0; idx.len()],
        }
    }

    fn select(out: &[f32], width: usize, cols: &[usize]) -> Vec<f32> {
        cols.iter().enumerate().map(|(b, &c)| out[b * width + c]).collect()
    }

    /// Samples a batch from the trainer's generator and applies one update.
    pub fn step(&mut self) -> Result<StepLosses> {
        let n = self.ds.len();
        let idx: Vec<usize> = (0..self.cfg.batch_size).map(|_| self.rng.gen_range(0..n)).collect();
        self.update(&idx)
    }

    /// One full update on the given dataset rows.
    pub fn update(&mut self, idx: &[usize]) -> Result<StepLosses> {
        let batch = idx.len();
        let inv_b = 1.0 / batch as f64;
        let s = self.gather_states(&self.states, idx);
        let s_next = self.gather_states(&self.next_states, idx);
        let q_in = self.critic_input(&s, idx);
        let cols = self.action_columns(idx);
        let q_width = self.q1.output_dim();

        // bootstrap values and advantages use the networks as they stand before this step
        let t1 = Self::select(&self.q1_target.forward(&q_in, batch)?, q_width, &cols);
        let t2 = Self::select(&self.q2_target.forward(&q_in, batch)?, q_width, &cols);
        let target_q: Vec<f32> = t1.iter().zip(&t2).map(|(a, b)| a.min(*b)).collect();
        let next_v = self.value.forward(&s_next, batch)?;

        let v_cache = self.value.forward_cached(&s, batch)?;
        let (loss_v, v_grad, adv) = value_objective(v_cache.output(), &target_q, self.cfg.expectile);
        let gv = self.value.backward_cached(&v_cache, &v_grad)?;
        self.opt_value.step(&mut self.value, &gv)?;

        let penalties: Vec<f32> = match self.table {
            Some(t) => t.penalties_for(idx).collect(),
            None => vec![0.0; batch],
        };
        let mean_penalty = penalties.iter().map(|&p| p as f64).sum::<f64>() * inv_b;
        let y: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(b, &i)| {
                let done = self.ds.terminals()[i] || (self.cfg.mask_timeouts && self.ds.timeouts()[i]);
                critic_target(
                    self.ds.rewards()[i] as f64,
                    penalties[b] as f64,
                    next_v[b] as f64,
                    done,
                    self.cfg.gamma,
                    self.cfg.mode,
                )
            })
            .collect();
        let mut loss_q = 0.0;
        for (net, opt) in [(&mut self.q1, &mut self.opt_q1), (&mut self.q2, &mut self.opt_q2)] {
            let cache = net.forward_cached(&q_in, batch)?;
            let out = cache.output();
            let mut grad = vec![0f32; batch * q_width];
            for b in 0..batch {
                let diff = out[b * q_width + cols[b]] as f64 - y[b];
                loss_q += 0.5 * diff * diff * inv_b;
                grad[b * q_width + cols[b]] = (diff * inv_b) as f32;
            }
            let g = net.backward_cached(&cache, &grad)?;
            opt.step(net, &g)?;
        }
        let rate = self.cfg.target_soft_rate as f32;
        self.q1_target.soft_update_from(&self.q1, rate);
        self.q2_target.soft_update_from(&self.q2, rate);

        let weights: Vec<f64> = adv
            .iter()
            .map(|&a| actor_weight(a, self.cfg.awr_beta, self.cfg.awr_weight_cap, self.cfg.mode))
            .collect();
        let a_cache = self.actor.forward_cached(&s, batch)?;
        let (loss_actor, a_grad) = self.actor_objective(&a_cache, idx, &weights);
        let ga = self.actor.backward_cached(&a_cache, &a_grad)?;
        self.opt_actor.step(&mut self.actor, &ga)?;

        self.step += 1;
        let losses = StepLosses { loss_v, loss_q, loss_actor, mean_penalty };
        if !(loss_v.is_finite() && loss_q.is_finite() && loss_actor.is_finite()) {
            return Err(Error::NonFinite(format!(
                "loss at step {}: v = {loss_v}, q = {loss_q}, actor = {loss_actor}, mean penalty = {mean_penalty}",
                self.step
            )));
        }
        Ok(losses)
    }

    fn actor_objective(&self, cache: &ForwardCache<f32>, idx: &[usize], weights: &[f64]) -> (f64, Vec<f32>) {
        actor_objective(cache.output(), self.actor.output_dim(), self.ds.actions(), idx, weights)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            action_space: self.ds.action_space(),
            norm: self.norm.clone(),
            action_low: self.action_low.clone(),
            action_high: self.action_high.clone(),
            networks: vec![
                (Q1.into(), self.q1.clone()),
                (Q2.into(), self.q2.clone()),
                (VALUE.into(), self.value.clone()),
                (ACTOR.into(), self.actor.clone()),
                (Q1_TARGET.into(), self.q1_target.clone()),
                (Q2_TARGET.into(), self.q2_target.clone()),
            ],
        }
    }

    /// Runs the remaining steps, reporting interval logs and checkpoints to `sink`.
    pub fn run(&mut self, sink: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>) -> Result<Checkpoint> {
        let total = self.cfg.total_steps as u64;
        let mut window = StepLosses::default();
        let mut in_window = 0usize;
        while self.step < total {
            let l = self.step()?;
            window.loss_v += l.loss_v;
            window.loss_q += l.loss_q;
            window.loss_actor += l.loss_actor;
            window.mean_penalty += l.mean_penalty;
            in_window += 1;
            if self.step % self.cfg.log_interval as u64 == 0 || self.step == total {
                let k = in_window as f64;
                let rec = LogRecord {
                    step: self.step,
                    loss_v: window.loss_v / k,
                    loss_q: window.loss_q / k,
                    loss_actor: window.loss_actor / k,
                    mean_penalty_in_batch: window.mean_penalty / k,
                };
                sink(TrainEvent::Log(&rec))?;
                window = StepLosses::default();
                in_window = 0;
            }
            let every = self.cfg.checkpoint_interval as u64;
            if every > 0 && self.step % every == 0 && self.step != total {
                sink(TrainEvent::Checkpoint(&self.checkpoint()))?;
            }
        }
        let last = self.checkpoint();
        sink(TrainEvent::Checkpoint(&last))?;
        Ok(last)
    }
}

/// Expectile loss of `target_q - v` with its gradient w.r.t. `v`; also returns the advantages.
pub fn value_objective(v: &[f32], target_q: &[f32], tau: f64) -> (f64, Vec<f32>, Vec<f64>) {
    let inv_b = 1.0 / v.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(v.len());
    let mut adv = Vec::with_capacity(v.len());
    for (&vb, &tq) in v.iter().zip(target_q) {
        let u = tq as f64 - vb as f64;
        let w = if u < 0.0 { 1.0 - tau } else { tau };
        loss += w * u * u * inv_b;
        grad.push((-2.0 * w * u * inv_b) as f32);
        adv.push(u);
    }
    (loss, grad, adv)
}

/// Weighted negative log-likelihood (discrete) or weighted squared error (continuous).
pub fn actor_objective(
    out: &[f32],
    width: usize,
    actions: &Actions,
    idx: &[usize],
    weights: &[f64],
) -> (f64, Vec<f32>) {
    let inv_b = 1.0 / idx.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0f32; out.len()];
    for (b, &i) in idx.iter().enumerate() {
        let row = &out[b * width..(b + 1) * width];
        let g = &mut grad[b * width..(b + 1) * width];
        let w = weights[b];
        match actions {
            Actions::Discrete(a) => {
                let a = a[i] as usize;
                let p = softmax(row);
                loss -= w * p[a].max(f64::MIN_POSITIVE).ln() * inv_b;
                for (j, gj) in g.iter_mut().enumerate() {
                    let onehot = if j == a { 1.0 } else { 0.0 };
                    *gj = (w * (p[j] - onehot) * inv_b) as f32;
                }
            }
            Actions::Continuous(a) => {
                let target = &a[i * width..(i + 1) * width];
                for j in 0..width {
                    let diff = row[j] as f64 - target[j] as f64;
                    loss += w * diff * diff * inv_b;
                    g[j] = (2.0 * w * diff * inv_b) as f32;
                }
            }
        }
    }
    (loss, grad)
}

/// Everything a finished run produced.
pub struct TrainOutput {
    pub final_checkpoint: Checkpoint,
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<LogRecord>,
}

/// Trains to completion, keeping checkpoints and log records in memory.
pub fn train(ds: &TransitionDataset, table: Option<&PenaltyTable>, cfg: &TrainConfig) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(ds, table, cfg.clone())?;
    let mut checkpoints = Vec::new();
    let mut log = Vec::new();
    let final_checkpoint = trainer.run(&mut |ev| {
        match ev {
            TrainEvent::Log(r) => log.push(r.clone()),
            TrainEvent::Checkpoint(c) => checkpoints.push(c.clone()),
        }
        Ok(())
    })?;
    Ok(TrainOutput { final_checkpoint, checkpoints, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GeometryStats;

    #[test]
    fn expectile_examples() {
        for u in [-2.0, -0.3, 0.0, 0.4, 3.0] {
            assert_eq!(expectile_loss(u, 0.5), 0.5 * u * u);
        }
        assert!((expectile_loss(-1.0, 0.7) - 0.3).abs() < 1e-15);
        assert_eq!(expectile_loss(1.0, 0.7), 0.7);
    }

    #[test]
    fn critic_target_examples() {
        let iql = critic_target(1.0, 3.0, 2.0, false, 0.99, Mode::Iql);
        assert!((iql - 2.98).abs() < 1e-12);
        let geo = critic_target(1.0, 3.0, 2.0, false, 0.99, Mode::GeoIql);
        assert!((geo + 0.02).abs() < 1e-12);
        assert_eq!(critic_target(1.0, 3.0, 2.0, true, 0.99, Mode::GeoIql), -2.0);
        assert_eq!(critic_target(1.0, 3.0, 2.0, true, 0.99, Mode::Iql), 1.0);
    }

    #[test]
    fn softmax_and_argmax() {
        let p = softmax(&[0.0; 25]);
        assert!(p.iter().all(|&x| (x - 0.04).abs() < 1e-12));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(argmax(&p), 0);
        let mut logits = vec![0.0f32; 10];
        logits[7] = 1.0;
        assert_eq!(argmax(&softmax(&logits).to_vec()), 7);
        let big = softmax(&[1000.0, -1000.0]);
        assert!(big[0] > 0.999999 && big.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn awr_weight_is_capped() {
        assert_eq!(actor_weight(10.0, 3.0, 100.0, Mode::Iql), 100.0);
        assert_eq!(actor_weight(0.0, 3.0, 100.0, Mode::GeoIql), 1.0);
        assert_eq!(actor_weight(-5.0, 3.0, 100.0, Mode::Bc), 1.0);
    }

    fn toy_discrete(n: usize) -> TransitionDataset {
        let states: Vec<f32> = (0..n).map(|i| (i % 7) as f32).collect();
        TransitionDataset::new(
            1,
            ActionSpace::Discrete { count: 3 },
            states.clone(),
            Actions::Discrete((0..n).map(|i| (i % 3) as u32).collect()),
            (0..n).map(|i| (i % 5) as f32 * 0.1).collect(),
            states.iter().map(|s| (s + 1.0) % 7.0).collect(),
            (0..n).map(|i| i % 11 == 10).collect(),
            (0..n).map(|i| i == n - 1 && (n - 1) % 11 != 10).collect(),
        )
        .unwrap()
    }

    fn table_with(ds: &TransitionDataset, penalty: impl Fn(usize) -> f32) -> PenaltyTable {
        let n = ds.len();
        PenaltyTable {
            u_tilde: vec![0.0; n],
            u: vec![0.0; n],
            rho: vec![1.0; n],
            lambda_adapt: vec![0.5; n],
            penalty: (0..n).map(penalty).collect(),
            stats: GeometryStats { k: 10, alpha: 0.3, lambda_base: 1.0, tau: 0.0, sigma_mad: 1.0, epsilon: 1e-8 },
        }
    }

    fn small_cfg(mode: Mode) -> TrainConfig {
        TrainConfig { mode, hidden: vec![8, 8], batch_size: 16, total_steps: 30, log_interval: 10, ..Default::default() }
    }

    #[test]
    fn geo_needs_table() {
        let ds = toy_discrete(40);
        assert!(Trainer::new(&ds, None, small_cfg(Mode::GeoIql)).is_err());
        let short = toy_discrete(39);
        let t = table_with(&short, |_| 0.0);
        assert!(Trainer::new(&ds, Some(&t), small_cfg(Mode::GeoIql)).is_err());
    }

    #[test]
    fn value_and_actor_losses_do_not_depend_on_mode() {
        let ds = toy_discrete(60);
        let t = table_with(&ds, |i| (i % 4) as f32);
        let idx: Vec<usize> = (0..60).step_by(3).collect();
        let mut a = Trainer::new(&ds, Some(&t), small_cfg(Mode::Iql)).unwrap();
        let mut b = Trainer::new(&ds, Some(&t), small_cfg(Mode::GeoIql)).unwrap();
        let la = a.update(&idx).unwrap();
        let lb = b.update(&idx).unwrap();
        assert_eq!(la.loss_v, lb.loss_v);
        assert_eq!(la.loss_actor, lb.loss_actor);
        assert_ne!(la.loss_q, lb.loss_q);
        // only the critics moved apart
        let (ca, cb) = (a.checkpoint(), b.checkpoint());
        assert_eq!(ca.network(VALUE).unwrap(), cb.network(VALUE).unwrap());
        assert_eq!(ca.network(ACTOR).unwrap(), cb.network(ACTOR).unwrap());
        assert_ne!(ca.network(Q1).unwrap(), cb.network(Q1).unwrap());
    }

    #[test]
    fn run_logs_and_checkpoints() {
        let ds = toy_discrete(50);
        let cfg = TrainConfig { checkpoint_interval: 10, ..small_cfg(Mode::Iql) };
        let out = train(&ds, None, &cfg).unwrap();
        assert_eq!(out.log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![10, 20, 30]);
        assert_eq!(out.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(), vec![10, 20, 30]);
        assert_eq!(out.final_checkpoint.step, 30);
        assert!(out.log.iter().all(|r| r.mean_penalty_in_batch == 0.0));
    }

    #[test]
    fn continuous_greedy_is_clamped() {
        let n = 30;
        let ds = TransitionDataset::new(
            1,
            ActionSpace::Continuous { dim: 2 },
            (0..n).map(|i| i as f32).collect(),
            Actions::Continuous((0..2 * n).map(|i| ((i % 5) as f32 - 2.0) * 0.5).collect()),
            vec![0.0; n],
            (0..n).map(|i| i as f32).collect(),
            (0..n).map(|i| i == n - 1).collect(),
            vec![false; n],
        )
        .unwrap();
        let trainer = Trainer::new(&ds, None, small_cfg(Mode::Bc)).unwrap();
        let mut ck = trainer.checkpoint();
        assert_eq!(ck.action_low, vec![-1.0, -1.0]);
        assert_eq!(ck.action_high, vec![1.0, 1.0]);
        // actor with huge bias pushes outside the box
        let sizes = ck.network(ACTOR).unwrap().sizes().to_vec();
        let mut flat = vec![0.0f32; crate::approximator::param_count(&sizes)];
        let len = flat.len();
        flat[len - 2] = 50.0;
        flat[len - 1] = -50.0;
        let actor = Mlp::from_flat(&sizes, flat).unwrap();
        for (tag, net) in ck.networks.iter_mut() {
            if tag == ACTOR {
                *net = actor.clone();
            }
        }
        assert_eq!(greedy_action(&ck, &[3.0]).unwrap(), Action::Continuous(vec![1.0, -1.0]));
    }
}
