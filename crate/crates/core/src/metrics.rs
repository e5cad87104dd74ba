//! Online scores and offline agreement metrics against logged (clinician) actions.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{ActionSpace, Actions, TransitionDataset};
use crate::envbench::{rollout, Env, FractureRegion};
use crate::error::{Error, Result};
use crate::trainer::{argmax, Critic, Policy};

pub fn normalized_score(mean_return: f64, random_return: f64, expert_return: f64) -> Result<f64> {
    let span = expert_return - random_return;
    if span == 0.0 || !span.is_finite() {
        return Err(Error::invalid("expert and random returns must differ"));
    }
    Ok(100.0 * (mean_return - random_return) / span)
}

/// Neumaier-compensated running mean.
#[derive(Clone, Copy, Debug, Default)]
struct Mean {
    sum: f64,
    comp: f64,
    n: usize,
}

impl Mean {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
        self.n += 1;
    }

    fn get(&self) -> Option<f64> {
        (self.n > 0).then(|| (self.sum + self.comp) / self.n as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Trailing steps of each trajectory that count towards terminal agreement.
    pub terminal_window: usize,
    pub kl_smoothing: f64,
    /// `|A| = m1 * m2` with `a = i1 * m2 + i2`; `None` treats the actions as one axis.
    pub action_factors: Option<(usize, usize)>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { terminal_window: 5, kl_smoothing: 1e-6, action_factors: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: usize,
    pub agreement: f64,
    pub prob_clin_action: f64,
    pub kl_divergence: f64,
    pub delta_q: f64,
    pub entropy: f64,
    pub terminal_rows: usize,
    pub terminal_agreement: Option<f64>,
    pub action_factors: (usize, usize),
    pub dose_deviation: Vec<f64>,
    pub extreme_rows: usize,
    pub extreme_agreement: Option<f64>,
}

impl MetricsReport {
    pub fn csv_header(&self) -> String {
        let mut cols = vec![
            "rows", "agreement", "prob_clin_action", "kl_divergence", "delta_q", "entropy", "terminal_rows",
            "terminal_agreement",
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
        cols.extend((0..self.dose_deviation.len()).map(|i| format!("dose_deviation_{i}")));
        cols.push("extreme_rows".into());
        cols.push("extreme_agreement".into());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let mut cells = vec![
            self.rows.to_string(),
            self.agreement.to_string(),
            self.prob_clin_action.to_string(),
            self.kl_divergence.to_string(),
            self.delta_q.to_string(),
            self.entropy.to_string(),
            self.terminal_rows.to_string(),
            opt(self.terminal_agreement),
        ];
        cells.extend(self.dose_deviation.iter().map(|d| d.to_string()));
        cells.push(self.extreme_rows.to_string());
        cells.push(opt(self.extreme_agreement));
        cells.join(",")
    }
}

fn factors(cfg: &MetricsConfig, count: usize) -> Result<(usize, usize)> {
    let f = cfg.action_factors.unwrap_or((count, 1));
    if f.0 == 0 || f.1 == 0 || f.0 * f.1 != count {
        return Err(Error::invalid(format!("action factors {}x{} do not multiply to {count}", f.0, f.1)));
    }
    Ok(f)
}

fn smoothed(p: impl Iterator<Item = f64>, eps: f64) -> Vec<f64> {
    let v: Vec<f64> = p.map(|x| x + eps).collect();
    let z: f64 = v.iter().sum();
    v.into_iter().map(|x| x / z).collect()
}

pub fn offline_report(ck: &Checkpoint, ds: &TransitionDataset, cfg: &MetricsConfig) -> Result<MetricsReport> {
    let Actions::Discrete(clin) = ds.actions() else {
        return Err(Error::Unsupported("offline metrics need a discrete action space".into()));
    };
    if ck.action_space != ds.action_space() || ck.norm.dim() != ds.state_dim() {
        return Err(Error::validation("checkpoint does not match the dataset's state and action spaces"));
    }
    if !(cfg.kl_smoothing > 0.0) {
        return Err(Error::invalid("kl_smoothing must be positive"));
    }
    let ActionSpace::Discrete { count } = ds.action_space() else {
        unreachable!("discrete actions imply a discrete action space");
    };
    let (m1, m2) = factors(cfg, count)?;
    if ds.is_empty() {
        return Err(Error::validation("dataset is empty"));
    }
    let trajectories = ds.trajectories()?;
    let mut in_window = vec![false; ds.len()];
    for t in &trajectories {
        let from = t.end.saturating_sub(cfg.terminal_window).max(t.start);
        for w in &mut in_window[from..t.end] {
            *w = true;
        }
    }
    let policy = Policy::from_checkpoint(ck)?;
    let critic = Critic::from_checkpoint(ck)?;
    let (mut agree, mut prob, mut kl, mut dq, mut ent) =
        (Mean::default(), Mean::default(), Mean::default(), Mean::default(), Mean::default());
    let mut term = Mean::default();
    let mut extreme = Mean::default();
    let mut dose = vec![Mean::default(), Mean::default()];
    for i in 0..ds.len() {
        let s = ds.state(i);
        let a = clin[i] as usize;
        let p = policy.probabilities(s)?;
        let q = critic.q_values(s)?;
        let pick = argmax(&p);
        let hit = if pick == a { 1.0 } else { 0.0 };
        agree.add(hit);
        prob.add(p[a]);
        let target = smoothed((0..count).map(|j| if j == a { 1.0 } else { 0.0 }), cfg.kl_smoothing);
        let model = smoothed(p.iter().copied(), cfg.kl_smoothing);
        kl.add(target.iter().zip(&model).map(|(t, m)| t * (t / m).ln()).sum());
        dq.add(q[pick] - q[a]);
        ent.add(-p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>());
        if in_window[i] {
            term.add(hit);
        }
        if a == 0 || a == count - 1 {
            extreme.add(hit);
        }
        dose[0].add(((pick / m2) as f64 - (a / m2) as f64).abs());
        dose[1].add(((pick % m2) as f64 - (a % m2) as f64).abs());
    }
    Ok(MetricsReport {
        rows: ds.len(),
        agreement: agree.get().unwrap_or(0.0),
        prob_clin_action: prob.get().unwrap_or(0.0),
        kl_divergence: kl.get().unwrap_or(0.0).max(0.0),
        delta_q: dq.get().unwrap_or(0.0),
        entropy: ent.get().unwrap_or(0.0).max(0.0),
        terminal_rows: term.n,
        terminal_agreement: term.get(),
        action_factors: (m1, m2),
        dose_deviation: dose.iter().map(|d| d.get().unwrap_or(0.0)).collect(),
        extreme_rows: extreme.n,
        extreme_agreement: extreme.get(),
    })
}

/// `delta_q` of each checkpoint, in the order given.
pub fn q_improvement_curve(checkpoints: &[Checkpoint], ds: &TransitionDataset) -> Result<Vec<(u64, f64)>> {
    if checkpoints.is_empty() {
        return Err(Error::invalid("q_improvement_curve needs at least one checkpoint"));
    }
    let cfg = MetricsConfig::default();
    checkpoints.iter().map(|ck| Ok((ck.step, offline_report(ck, ds, &cfg)?.delta_q))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineReport {
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub seed_means: Vec<f64>,
    pub mean_return: f64,
    /// Sample standard deviation of the per-seed means.
    pub std_return: f64,
    pub fracture_rate: f64,
    pub normalized_score: Option<f64>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Greedy rollouts of a checkpoint over several evaluation seeds.
pub fn online_report(
    env: &Env,
    ck: &Checkpoint,
    episodes: usize,
    seeds: &[u64],
    fracture: &FractureRegion,
    reference: Option<(f64, f64)>,
) -> Result<OnlineReport> {
    if episodes == 0 || seeds.is_empty() {
        return Err(Error::invalid("online evaluation needs at least one episode and one seed"));
    }
    if ck.action_space != env.action_space() || ck.norm.dim() != env.state_dim() {
        return Err(Error::validation("checkpoint does not match the environment"));
    }
    let policy = Policy::from_checkpoint(ck)?;
    let mut seed_means = Vec::with_capacity(seeds.len());
    let mut entered = 0usize;
    for &seed in seeds {
        let stats = rollout(env, &mut |s| policy.greedy(s), episodes, seed, fracture)?;
        entered += stats.entered_fracture.iter().filter(|&&e| e).count();
        seed_means.push(stats.mean_return());
    }
    let (mean_return, std_return) = mean_std(&seed_means);
    let normalized_score = match reference {
        Some((random, expert)) => Some(normalized_score(mean_return, random, expert)?),
        None => None,
    };
    Ok(OnlineReport {
        episodes,
        seeds: seeds.to_vec(),
        seed_means,
        mean_return,
        std_return,
        fracture_rate: entered as f64 / (episodes * seeds.len()) as f64,
        normalized_score,
    })
}
