//! Small synthetic environments with exact ground truth and fractured-dataset generators.
//!
//! Grid states are observed as `[x, y]` cell coordinates, optionally with a
//! uniform sub-cell offset (`jitter`) so distinct visits to a cell are not
//! exact duplicates in embedding space. Dynamics and values depend only on the
//! cell.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ActionSpace, Actions, TransitionDataset};
use crate::error::{Error, Result};
use crate::trainer::Action;

pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;
pub const GRID_ACTIONS: usize = 4;

pub type Cell = (usize, usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridMdp {
    pub width: usize,
    pub height: usize,
    pub walls: Vec<Cell>,
    pub start: Cell,
    pub goal: Cell,
    pub step_reward: f64,
    pub goal_reward: f64,
    pub horizon: usize,
    /// Probability that the chosen move is replaced by a uniformly random one.
    pub slip: f64,
    #[serde(default)]
    pub jitter: f64,
}

impl GridMdp {
    /// 8x8 grid. The goal (top right) sits behind a two-row wall whose only gap
    /// is at the far left, so the true route from the start (bottom right) is a
    /// long detour. A dead-end pocket is cut into the wall right below the goal.
    pub fn trap_grid() -> Self {
        let mut walls = Vec::new();
        for x in 1..8 {
            for y in [3, 4] {
                if (x, y) != (7, 3) {
                    walls.push((x, y));
                }
            }
        }
        GridMdp {
            width: 8,
            height: 8,
            walls,
            start: (7, 2),
            goal: (7, 7),
            step_reward: -1.0,
            goal_reward: 0.0,
            horizon: 50,
            slip: 0.0,
            jitter: 0.5,
        }
    }

    /// The pocket of [`GridMdp::trap_grid`].
    pub fn trap_fracture() -> FractureRegion {
        FractureRegion::Cells { cells: vec![(7, 3)] }
    }

    /// Scripted truncated approach into the pocket from the start cell.
    pub fn trap_poison() -> Poison {
        Poison { episodes: 10, actions: vec![UP] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("grid must have positive width and height"));
        }
        for &c in self.walls.iter().chain([&self.start, &self.goal]) {
            if c.0 >= self.width || c.1 >= self.height {
                return Err(Error::invalid(format!("cell {c:?} lies outside the grid")));
            }
        }
        if self.is_wall(self.start) || self.is_wall(self.goal) {
            return Err(Error::invalid("start and goal must not be walls"));
        }
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.slip) {
            return Err(Error::invalid("slip must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::invalid("jitter must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn index(&self, c: Cell) -> usize {
        c.1 * self.width + c.0
    }

    pub fn cell(&self, i: usize) -> Cell {
        (i % self.width, i / self.width)
    }

    pub fn is_wall(&self, c: Cell) -> bool {
        self.walls.contains(&c)
    }

    /// Deterministic move; walls and borders leave the agent in place.
    pub fn moved(&self, c: Cell, a: usize) -> Cell {
        let (x, y) = c;
        let n = match a {
            UP if y + 1 < self.height => (x, y + 1),
            DOWN if y > 0 => (x, y - 1),
            LEFT if x > 0 => (x - 1, y),
            RIGHT if x + 1 < self.width => (x + 1, y),
            _ => c,
        };
        if self.is_wall(n) {
            c
        } else {
            n
        }
    }

    /// Outcome distribution of taking `a` in `c`, merged by destination.
    pub fn outcomes(&self, c: Cell, a: usize) -> Vec<(Cell, f64)> {
        let mut out: Vec<(Cell, f64)> = Vec::with_capacity(4);
        let mut add = |n: Cell, p: f64| {
            if p == 0.0 {
                return;
            }
            match out.iter_mut().find(|(m, _)| *m == n) {
                Some(e) => e.1 += p,
                None => out.push((n, p)),
            }
        };
        add(self.moved(c, a), 1.0 - self.slip);
        for b in 0..GRID_ACTIONS {
            add(self.moved(c, b), self.slip / GRID_ACTIONS as f64);
        }
        out
    }

    pub fn reward(&self, next: Cell) -> f64 {
        if next == self.goal {
            self.goal_reward
        } else {
            self.step_reward
        }
    }

    /// Cell containing an observed state, if any.
    pub fn cell_of(&self, s: &[f32]) -> Option<Cell> {
        if s.len() != 2 {
            return None;
        }
        let x = s[0].round();
        let y = s[1].round();
        if x < 0.0 || y < 0.0 || (x as usize) >= self.width || (y as usize) >= self.height {
            return None;
        }
        let c = (x as usize, y as usize);
        let dx = (s[0] - x).abs() as f64;
        let dy = (s[1] - y).abs() as f64;
        let half = self.jitter / 2.0 + 1e-6;
        (dx <= half && dy <= half && !self.is_wall(c)).then_some(c)
    }

    fn observe<R: Rng>(&self, c: Cell, rng: &mut R) -> [f32; 2] {
        let jx: f64 = rng.gen::<f64>() - 0.5;
        let jy: f64 = rng.gen::<f64>() - 0.5;
        [(c.0 as f64 + self.jitter * jx) as f32, (c.1 as f64 + self.jitter * jy) as f32]
    }

    fn sample_next<R: Rng>(&self, c: Cell, a: usize, rng: &mut R) -> Cell {
        let u: f64 = rng.gen();
        let b = rng.gen_range(0..GRID_ACTIONS);
        if u < self.slip {
            self.moved(c, b)
        } else {
            self.moved(c, a)
        }
    }

    pub fn to_tabular(&self) -> TabularMdp {
        let mut transitions = Vec::with_capacity(self.n_cells());
        for i in 0..self.n_cells() {
            let c = self.cell(i);
            let row = (0..GRID_ACTIONS)
                .map(|a| {
                    if self.is_wall(c) || c == self.goal {
                        return Vec::new();
                    }
                    self.outcomes(c, a)
                        .into_iter()
                        .map(|(n, p)| Outcome {
                            next: self.index(n),
                            prob: p,
                            reward: self.reward(n),
                            terminal: n == self.goal,
                        })
                        .collect()
                })
                .collect();
            transitions.push(row);
        }
        TabularMdp { n_actions: GRID_ACTIONS, transitions }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outcome {
    pub next: usize,
    pub prob: f64,
    pub reward: f64,
    pub terminal: bool,
}

/// Finite MDP; an action with no outcomes is absorbing with zero value.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    pub n_actions: usize,
    pub transitions: Vec<Vec<Vec<Outcome>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularSolution {
    /// Row-major `[state][action]`.
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub n_actions: usize,
    pub residual: f64,
    pub iterations: usize,
}

impl TabularSolution {
    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.n_actions + a]
    }

    pub fn greedy(&self, s: usize) -> usize {
        let row = &self.q[s * self.n_actions..(s + 1) * self.n_actions];
        crate::trainer::argmax(row)
    }
}

pub const VALUE_ITERATION_TOLERANCE: f64 = 1e-10;

/// Value iteration until the sup-norm Bellman residual drops below 1e-10.
pub fn solve_tabular(mdp: &TabularMdp, gamma: f64) -> Result<TabularSolution> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::invalid("value iteration needs gamma in [0, 1)"));
    }
    let n = mdp.transitions.len();
    let na = mdp.n_actions;
    let mut v = vec![0.0; n];
    let mut q = vec![0.0; n * na];
    let max_iter = 1_000_000;
    for it in 1..=max_iter {
        let mut residual: f64 = 0.0;
        for s in 0..n {
            for a in 0..na {
                q[s * na + a] = mdp.transitions[s][a]
                    .iter()
                    .map(|o| o.prob * (o.reward + if o.terminal { 0.0 } else { gamma * v[o.next] }))
                    .sum();
            }
        }
        for s in 0..n {
            let best = if mdp.transitions[s].iter().all(|t| t.is_empty()) {
                0.0
            } else {
                q[s * na..(s + 1) * na].iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            };
            residual = residual.max((best - v[s]).abs());
            v[s] = best;
        }
        if residual < VALUE_ITERATION_TOLERANCE {
            return Ok(TabularSolution { q, v, n_actions: na, residual, iterations: it });
        }
    }
    Err(Error::validation("value iteration did not converge"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointMass2d {
    pub start: [f64; 2],
    pub goal: [f64; 2],
    pub horizon: usize,
}

impl Default for PointMass2d {
    fn default() -> Self {
        PointMass2d { start: [-0.8, -0.8], goal: [0.8, 0.8], horizon: 100 }
    }
}

impl PointMass2d {
    pub fn validate(&self) -> Result<()> {
        let inside = |p: &[f64; 2]| p.iter().all(|x| (-1.0..=1.0).contains(x));
        if !inside(&self.start) || !inside(&self.goal) {
            return Err(Error::invalid("start and goal must lie in [-1, 1]^2"));
        }
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        Ok(())
    }

    pub fn initial_state(&self) -> [f32; 4] {
        [self.start[0] as f32, self.start[1] as f32, 0.0, 0.0]
    }

    /// `p' = clamp(p + 0.1 v)`, `v' = clamp(v + 0.1 a)`, reward `-|p' - goal|`.
    pub fn step(&self, s: &[f32], a: &[f32]) -> ([f32; 4], f64) {
        let c = |x: f64| x.clamp(-1.0, 1.0);
        let a: Vec<f64> = a.iter().map(|&x| c(x as f64)).collect();
        let p = [c(s[0] as f64 + 0.1 * s[2] as f64), c(s[1] as f64 + 0.1 * s[3] as f64)];
        let v = [c(s[2] as f64 + 0.1 * a[0]), c(s[3] as f64 + 0.1 * a[1])];
        let r = -((p[0] - self.goal[0]).powi(2) + (p[1] - self.goal[1]).powi(2)).sqrt();
        ([p[0] as f32, p[1] as f32, v[0] as f32, v[1] as f32], r)
    }

    /// Damped proportional controller towards the goal.
    pub fn controller(&self, s: &[f32]) -> [f32; 2] {
        let mut out = [0f32; 2];
        for j in 0..2 {
            let u = 2.0 * (self.goal[j] - s[j] as f64) - 3.0 * s[j + 2] as f64;
            out[j] = u.clamp(-1.0, 1.0) as f32;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Env {
    Grid(GridMdp),
    PointMass(PointMass2d),
}

impl Env {
    pub fn by_name(name: &str) -> Result<Env> {
        match name {
            "trap-grid" => Ok(Env::Grid(GridMdp::trap_grid())),
            "point-mass" => Ok(Env::PointMass(PointMass2d::default())),
            _ => Err(Error::invalid(format!("unknown environment '{name}' (trap-grid, point-mass)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Env::Grid(g) => g.validate(),
            Env::PointMass(p) => p.validate(),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Env::Grid(_) => 2,
            Env::PointMass(_) => 4,
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match self {
            Env::Grid(_) => ActionSpace::Discrete { count: GRID_ACTIONS },
            Env::PointMass(_) => ActionSpace::Continuous { dim: 2 },
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Env::Grid(g) => g.horizon,
            Env::PointMass(p) => p.horizon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FractureRegion {
    None,
    Cells { cells: Vec<Cell> },
    /// Axis-aligned box over the point-mass position.
    Box { low: [f64; 2], high: [f64; 2] },
}

impl FractureRegion {
    pub fn contains(&self, env: &Env, s: &[f32]) -> bool {
        match (self, env) {
            (FractureRegion::None, _) => false,
            (FractureRegion::Cells { cells }, Env::Grid(g)) => g.cell_of(s).is_some_and(|c| cells.contains(&c)),
            (FractureRegion::Box { low, high }, Env::PointMass(_)) => {
                (0..2).all(|j| (low[j]..=high[j]).contains(&(s[j] as f64)))
            }
            _ => false,
        }
    }

    fn check(&self, env: &Env) -> Result<()> {
        match (self, env) {
            (FractureRegion::None, _) | (FractureRegion::Cells { .. }, Env::Grid(_)) | (FractureRegion::Box { .. }, Env::PointMass(_)) => Ok(()),
            _ => Err(Error::invalid("fracture region kind does not match the environment")),
        }
    }
}

/// Truncated scripted trajectories that walk from the start into the fracture region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Poison {
    pub episodes: usize,
    /// Grid: action indices. Point mass: the first entry is repeated as `[a, a]` acceleration sign.
    pub actions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub seed: u64,
    pub episodes: usize,
    pub random_frac: f64,
    pub mediocre_frac: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub fracture: FractureRegion,
    pub poison: Option<Poison>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            seed: 0,
            episodes: 200,
            random_frac: 0.5,
            mediocre_frac: 0.5,
            epsilon: 0.3,
            gamma: 0.99,
            fracture: FractureRegion::None,
            poison: None,
        }
    }
}

impl GenerateConfig {
    pub fn trap_grid(seed: u64) -> Self {
        GenerateConfig {
            seed,
            fracture: GridMdp::trap_fracture(),
            poison: Some(GridMdp::trap_poison()),
            ..Default::default()
        }
    }
}

#[derive(Default)]
struct Rows {
    states: Vec<f32>,
    actions_d: Vec<u32>,
    actions_c: Vec<f32>,
    rewards: Vec<f32>,
    next_states: Vec<f32>,
    terminals: Vec<bool>,
    timeouts: Vec<bool>,
}

impl Rows {
    fn push(&mut self, s: &[f32], a: &Action, r: f64, s2: &[f32], terminal: bool, timeout: bool) {
        self.states.extend_from_slice(s);
        match a {
            Action::Discrete(i) => self.actions_d.push(*i),
            Action::Continuous(v) => self.actions_c.extend_from_slice(v),
        }
        self.rewards.push(r as f32);
        self.next_states.extend_from_slice(s2);
        self.terminals.push(terminal);
        self.timeouts.push(timeout);
    }

    fn len(&self) -> usize {
        self.rewards.len()
    }

    fn into_dataset(self, env: &Env) -> Result<TransitionDataset> {
        let actions = match env.action_space() {
            ActionSpace::Discrete { .. } => Actions::Discrete(self.actions_d),
            ActionSpace::Continuous { .. } => Actions::Continuous(self.actions_c),
        };
        TransitionDataset::new(
            env.state_dim(),
            env.action_space(),
            self.states,
            actions,
            self.rewards,
            self.next_states,
            self.terminals,
            self.timeouts,
        )
    }
}

/// One simulated step.
struct Step {
    s: Vec<f32>,
    a: Action,
    r: f64,
    s2: Vec<f32>,
    terminal: bool,
    timeout: bool,
}

/// Episode-level environment simulator driven by a per-episode generator.
struct Sim<'a> {
    env: &'a Env,
    cell: Cell,
    state: Vec<f32>,
    t: usize,
    done: bool,
}

impl<'a> Sim<'a> {
    fn new(env: &'a Env, rng: &mut ChaCha8Rng) -> Self {
        match env {
            Env::Grid(g) => {
                let state = g.observe(g.start, rng).to_vec();
                Sim { env, cell: g.start, state, t: 0, done: false }
            }
            Env::PointMass(p) => Sim { env, cell: (0, 0), state: p.initial_state().to_vec(), t: 0, done: false },
        }
    }

    fn step(&mut self, a: Action, rng: &mut ChaCha8Rng) -> Result<Step> {
        let s = self.state.clone();
        let (s2, r, terminal) = match (self.env, &a) {
            (Env::Grid(g), Action::Discrete(i)) => {
                if *i as usize >= GRID_ACTIONS {
                    return Err(Error::invalid(format!("grid action {i} out of range")));
                }
                let next = g.sample_next(self.cell, *i as usize, rng);
                let obs = g.observe(next, rng).to_vec();
                self.cell = next;
                (obs, g.reward(next), next == g.goal)
            }
            (Env::PointMass(p), Action::Continuous(v)) if v.len() == 2 => {
                let (s2, r) = p.step(&s, v);
                (s2.to_vec(), r, false)
            }
            _ => return Err(Error::invalid("action does not match the environment")),
        };
        self.t += 1;
        let timeout = !terminal && self.t >= self.env.horizon();
        self.done = terminal || timeout;
        self.state = s2.clone();
        Ok(Step { s, a, r, s2, terminal, timeout })
    }
}

fn episode_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn random_action(env: &Env, rng: &mut ChaCha8Rng) -> Action {
    match env {
        Env::Grid(_) => Action::Discrete(rng.gen_range(0..GRID_ACTIONS) as u32),
        Env::PointMass(_) => Action::Continuous(vec![rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)]),
    }
}

/// Rolls out uniform-random and epsilon-greedy episodes, removes every
/// transition touching the fracture region and appends poisoned rows.
pub fn generate_fractured(env: &Env, cfg: &GenerateConfig) -> Result<TransitionDataset> {
    env.validate()?;
    cfg.fracture.check(env)?;
    if cfg.random_frac < 0.0 || cfg.mediocre_frac < 0.0 || (cfg.random_frac + cfg.mediocre_frac - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("random_frac and mediocre_frac must be non-negative and sum to 1"));
    }
    if !(0.0..=1.0).contains(&cfg.epsilon) {
        return Err(Error::invalid("epsilon must lie in [0, 1]"));
    }
    let solution = match env {
        Env::Grid(g) => Some(solve_tabular(&g.to_tabular(), cfg.gamma)?),
        Env::PointMass(_) => None,
    };
    let n_random = (cfg.episodes as f64 * cfg.random_frac).round() as usize;
    let mut rows = Rows::default();
    for ep in 0..cfg.episodes {
        let mut rng = episode_rng(cfg.seed, ep as u64);
        let mut sim = Sim::new(env, &mut rng);
        let mut kept_prev = false;
        while !sim.done {
            let explore = ep < n_random || rng.gen::<f64>() < cfg.epsilon;
            let a = if explore {
                random_action(env, &mut rng)
            } else {
                match (env, &solution) {
                    (Env::Grid(g), Some(sol)) => Action::Discrete(sol.greedy(g.index(sim.cell)) as u32),
                    (Env::PointMass(p), _) => Action::Continuous(p.controller(&sim.state).to_vec()),
                    _ => unreachable!("grid environments always carry a solution"),
                }
            };
            let st = sim.step(a, &mut rng)?;
            if cfg.fracture.contains(env, &st.s) || cfg.fracture.contains(env, &st.s2) {
                if kept_prev {
                    let last = rows.len() - 1;
                    if !rows.terminals[last] {
                        rows.timeouts[last] = true;
                    }
                }
                kept_prev = false;
                continue;
            }
            rows.push(&st.s, &st.a, st.r, &st.s2, st.terminal, st.timeout);
            kept_prev = true;
        }
    }
    if let Some(p) = &cfg.poison {
        for ep in 0..p.episodes {
            append_poison(env, cfg, p, &mut rows, (cfg.episodes + ep) as u64)?;
        }
    }
    if rows.len() == 0 {
        return Err(Error::validation("dataset is empty after removing the fracture region"));
    }
    rows.into_dataset(env)
}

fn append_poison(env: &Env, cfg: &GenerateConfig, p: &Poison, rows: &mut Rows, stream: u64) -> Result<()> {
    if p.actions.is_empty() {
        return Err(Error::invalid("poison needs at least one action"));
    }
    let mut rng = episode_rng(cfg.seed, stream);
    let mut sim = Sim::new(env, &mut rng);
    let start = rows.len();
    let budget = env.horizon();
    for t in 0..budget {
        let a = match env {
            Env::Grid(g) => {
                let a = p.actions[t.min(p.actions.len() - 1)];
                // poisoned walks follow the commanded move so they always reach the region
                let next = g.moved(sim.cell, a);
                let s = sim.state.clone();
                let obs = g.observe(next, &mut rng).to_vec();
                let inside = cfg.fracture.contains(env, &obs);
                rows.push(&s, &Action::Discrete(a as u32), g.reward(next), &obs, next == g.goal, inside);
                sim.cell = next;
                sim.state = obs;
                if inside || next == g.goal {
                    return finish_poison(rows, start, inside);
                }
                continue;
            }
            Env::PointMass(_) => {
                let sign = if p.actions[0] == 0 { 1.0 } else { -1.0 };
                Action::Continuous(vec![sign, sign])
            }
        };
        let st = sim.step(a, &mut rng)?;
        let inside = cfg.fracture.contains(env, &st.s2);
        rows.push(&st.s, &st.a, st.r, &st.s2, st.terminal, inside || st.timeout);
        if inside || sim.done {
            return finish_poison(rows, start, inside);
        }
    }
    finish_poison(rows, start, false)
}

fn finish_poison(rows: &mut Rows, start: usize, reached: bool) -> Result<()> {
    if !reached || rows.len() == start {
        return Err(Error::invalid("poison script never reaches the fracture region"));
    }
    Ok(())
}

/// Whether a logged transition is a possible outcome of the environment.
pub fn consistent_transition(env: &Env, s: &[f32], a: &Action, r: f32, s2: &[f32], terminal: bool) -> bool {
    match (env, a) {
        (Env::Grid(g), Action::Discrete(i)) => {
            let (Some(c), Some(n)) = (g.cell_of(s), g.cell_of(s2)) else {
                return false;
            };
            let reachable = g.outcomes(c, *i as usize).iter().any(|(m, p)| *m == n && *p > 0.0);
            reachable && (r as f64 - g.reward(n)).abs() < 1e-6 && terminal == (n == g.goal)
        }
        (Env::PointMass(p), Action::Continuous(v)) => {
            let (want, rw) = p.step(s, v);
            !terminal && want.iter().zip(s2).all(|(x, y)| x == y) && (rw as f32 - r).abs() < 1e-6
        }
        _ => false,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutStats {
    pub returns: Vec<f64>,
    pub lengths: Vec<usize>,
    pub entered_fracture: Vec<bool>,
}

impl RolloutStats {
    pub fn mean_return(&self) -> f64 {
        self.returns.iter().sum::<f64>() / self.returns.len() as f64
    }

    pub fn fracture_rate(&self) -> f64 {
        self.entered_fracture.iter().filter(|&&e| e).count() as f64 / self.entered_fracture.len() as f64
    }
}

/// Undiscounted returns of `policy`. Episode `i` draws its randomness from
/// stream `i` of `seed`, so two policies evaluated with the same seed face the
/// same noise.
pub fn rollout(
    env: &Env,
    policy: &mut dyn FnMut(&[f32]) -> Result<Action>,
    episodes: usize,
    seed: u64,
    fracture: &FractureRegion,
) -> Result<RolloutStats> {
    env.validate()?;
    let mut stats = RolloutStats { returns: Vec::new(), lengths: Vec::new(), entered_fracture: Vec::new() };
    for ep in 0..episodes {
        let mut rng = episode_rng(seed, ep as u64);
        let mut sim = Sim::new(env, &mut rng);
        let mut ret = 0.0;
        let mut entered = fracture.contains(env, &sim.state);
        while !sim.done {
            let a = policy(&sim.state)?;
            let st = sim.step(a, &mut rng)?;
            ret += st.r;
            entered |= fracture.contains(env, &st.s2);
        }
        stats.returns.push(ret);
        stats.lengths.push(sim.t);
        stats.entered_fracture.push(entered);
    }
    Ok(stats)
}

/// Greedy policy with respect to the exact tabular solution of a grid.
pub fn optimal_grid_policy<'a>(g: &'a GridMdp, sol: &TabularSolution) -> impl FnMut(&[f32]) -> Result<Action> + 'a {
    let sol = sol.clone();
    move |s| {
        let c = g.cell_of(s).ok_or_else(|| Error::invalid("state is not a grid cell"))?;
        Ok(Action::Discrete(sol.greedy(g.index(c)) as u32))
    }
}

/// Uniform-random policy driven by its own seeded generator.
pub fn random_policy(env: &Env, seed: u64) -> impl FnMut(&[f32]) -> Result<Action> + '_ {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    move |_| Ok(random_action(env, &mut rng))
}
