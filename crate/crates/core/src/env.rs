//! Toy grid environments with known reward, behaviour policies and rollouts.
//!
//! Both worlds use four moves (up, down, left, right); bumping into a wall or
//! the border leaves the agent in place. Observations are the normalized
//! position `(x / (w - 1), y / (h - 1))` and nothing else.
//!
//! * `grid_nav`: walls force a long detour to the goal. Entering the goal
//!   pays 1 and ends the episode.
//! * `key_door`: the goal sits behind a door cell next to the key corner.
//!   Every step that ends on the goal while the key has been collected pays
//!   1. Key possession is not observed, so the reward is a function of the
//!   visited history rather than the current observation. Episodes run for
//!   a fixed number of steps.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Segment;

pub const NUM_ACTIONS: usize = 4;
/// Up, down, left, right.
pub const MOVES: [(i32, i32); NUM_ACTIONS] = [(0, 1), (0, -1), (-1, 0), (1, 0)];

pub type Cell = (i32, i32);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridNav {
    pub width: i32,
    pub height: i32,
    pub walls: Vec<Cell>,
    pub goal: Cell,
    pub max_steps: usize,
}

impl Default for GridNav {
    fn default() -> Self {
        let mut walls: Vec<Cell> = (0..7).map(|x| (x, 3)).collect();
        walls.extend((2..9).map(|x| (x, 6)));
        Self {
            width: 9,
            height: 9,
            walls,
            goal: (8, 8),
            max_steps: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyDoor {
    pub width: i32,
    pub height: i32,
    pub walls: Vec<Cell>,
    pub key: Cell,
    pub goal: Cell,
    /// Every episode lasts exactly this many steps.
    pub episode_len: usize,
}

impl Default for KeyDoor {
    fn default() -> Self {
        Self {
            width: 5,
            height: 5,
            walls: vec![(3, 3), (4, 3)],
            key: (0, 4),
            goal: (4, 4),
            episode_len: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Env {
    GridNav(GridNav),
    KeyDoor(KeyDoor),
}

/// Full simulator state, including what the agent cannot observe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct State {
    pub pos: Cell,
    pub has_key: bool,
    pub t: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub next: State,
    pub reward: f64,
    pub done: bool,
}

impl Env {
    pub fn grid_nav() -> Self {
        Env::GridNav(GridNav::default())
    }

    pub fn key_door() -> Self {
        Env::KeyDoor(KeyDoor::default())
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "grid_nav" | "gridnav" | "grid-nav" => Ok(Self::grid_nav()),
            "key_door" | "keydoor" | "key-door" => Ok(Self::key_door()),
            other => Err(Error::Config(format!("unknown environment `{other}`"))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Env::GridNav(_) => "grid_nav",
            Env::KeyDoor(_) => "key_door",
        }
    }

    pub fn size(&self) -> (i32, i32) {
        match self {
            Env::GridNav(g) => (g.width, g.height),
            Env::KeyDoor(k) => (k.width, k.height),
        }
    }

    pub fn walls(&self) -> &[Cell] {
        match self {
            Env::GridNav(g) => &g.walls,
            Env::KeyDoor(k) => &k.walls,
        }
    }

    pub fn goal(&self) -> Cell {
        match self {
            Env::GridNav(g) => g.goal,
            Env::KeyDoor(k) => k.goal,
        }
    }

    pub fn key(&self) -> Option<Cell> {
        match self {
            Env::GridNav(_) => None,
            Env::KeyDoor(k) => Some(k.key),
        }
    }

    pub fn max_steps(&self) -> usize {
        match self {
            Env::GridNav(g) => g.max_steps,
            Env::KeyDoor(k) => k.episode_len,
        }
    }

    pub fn state_dim(&self) -> usize {
        2
    }

    pub fn action_dim(&self) -> usize {
        NUM_ACTIONS
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.size();
        if w < 2 || h < 2 || self.max_steps() == 0 {
            return Err(Error::Config("grid must be at least 2x2 with a positive horizon".into()));
        }
        let mut special = vec![self.goal()];
        special.extend(self.key());
        for c in &special {
            if !self.in_bounds(*c) || self.is_wall(*c) {
                return Err(Error::Config(format!("cell {c:?} is blocked or out of bounds")));
            }
        }
        let dist = self.distances(self.goal());
        if self.free_cells().iter().any(|&c| dist[self.cell_index(c)].is_none()) {
            return Err(Error::Config("goal unreachable from some free cell".into()));
        }
        Ok(())
    }

    pub fn in_bounds(&self, (x, y): Cell) -> bool {
        let (w, h) = self.size();
        (0..w).contains(&x) && (0..h).contains(&y)
    }

    pub fn is_wall(&self, c: Cell) -> bool {
        self.walls().contains(&c)
    }

    pub fn cell_index(&self, (x, y): Cell) -> usize {
        (y * self.size().0 + x) as usize
    }

    pub fn num_cells(&self) -> usize {
        let (w, h) = self.size();
        (w * h) as usize
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        let (w, h) = self.size();
        (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|&c| !self.is_wall(c))
            .collect()
    }

    /// Cell reached by `action`; blocked moves stay put.
    pub fn move_from(&self, pos: Cell, action: usize) -> Cell {
        let (dx, dy) = MOVES[action];
        let q = (pos.0 + dx, pos.1 + dy);
        if self.in_bounds(q) && !self.is_wall(q) {
            q
        } else {
            pos
        }
    }

    /// Shortest-path step counts to `target`, indexed by [`Self::cell_index`].
    pub fn distances(&self, target: Cell) -> Vec<Option<u32>> {
        let mut dist = vec![None; self.num_cells()];
        dist[self.cell_index(target)] = Some(0);
        let mut queue = VecDeque::from([target]);
        while let Some(p) = queue.pop_front() {
            let d = dist[self.cell_index(p)].unwrap();
            for a in 0..NUM_ACTIONS {
                let q = self.move_from(p, a);
                if dist[self.cell_index(q)].is_none() {
                    dist[self.cell_index(q)] = Some(d + 1);
                    queue.push_back(q);
                }
            }
        }
        dist
    }

    /// Uniform free start cell, never the goal or the key.
    pub fn reset<R: Rng>(&self, rng: &mut R) -> State {
        let cells: Vec<Cell> = self
            .free_cells()
            .into_iter()
            .filter(|&c| c != self.goal() && Some(c) != self.key())
            .collect();
        State {
            pos: cells[rng.random_range(0..cells.len())],
            has_key: false,
            t: 0,
        }
    }

    pub fn observe(&self, s: &State) -> Vec<f64> {
        let (w, h) = self.size();
        vec![s.pos.0 as f64 / (w - 1) as f64, s.pos.1 as f64 / (h - 1) as f64]
    }

    pub fn step(&self, s: &State, action: usize) -> Transition {
        let pos = self.move_from(s.pos, action);
        let t = s.t + 1;
        match self {
            Env::GridNav(g) => {
                let reached = pos == g.goal;
                Transition {
                    next: State {
                        pos,
                        has_key: false,
                        t,
                    },
                    reward: if reached { 1.0 } else { 0.0 },
                    done: reached || t >= g.max_steps,
                }
            }
            Env::KeyDoor(k) => {
                let has_key = s.has_key || pos == k.key;
                Transition {
                    next: State { pos, has_key, t },
                    reward: if has_key && pos == k.goal { 1.0 } else { 0.0 },
                    done: t >= k.episode_len,
                }
            }
        }
    }

    /// True when the episode ended because of the task, not the time limit.
    pub fn is_terminal(&self, s: &State) -> bool {
        match self {
            Env::GridNav(g) => s.pos == g.goal,
            Env::KeyDoor(_) => false,
        }
    }

    /// Index of the planning state: position, plus key possession where it
    /// matters.
    pub fn latent_index(&self, s: &State) -> usize {
        let cell = self.cell_index(s.pos);
        match self {
            Env::GridNav(_) => cell,
            Env::KeyDoor(_) => 2 * cell + s.has_key as usize,
        }
    }

    /// Step at which the key was collected, if it was.
    pub fn key_pickup(&self, traj: &Trajectory) -> Option<usize> {
        match self {
            Env::GridNav(_) => None,
            Env::KeyDoor(_) => traj.truth.latent.windows(2).position(|w| w[0] % 2 == 0 && w[1] % 2 == 1),
        }
    }

    pub fn num_latent(&self) -> usize {
        match self {
            Env::GridNav(_) => self.num_cells(),
            Env::KeyDoor(_) => 2 * self.num_cells(),
        }
    }

    /// Default data-collection mixture.
    pub fn behaviour_mix(&self) -> Vec<(f64, Behaviour)> {
        match self {
            Env::GridNav(_) => vec![(0.8, Behaviour::EpsGreedy { eps: 0.3 }), (0.2, Behaviour::Random)],
            Env::KeyDoor(_) => vec![
                (0.1, Behaviour::Random),
                (0.2, Behaviour::KeyThenGoal { eps: 0.3 }),
                (0.2, Behaviour::GoalFirst { eps: 0.3 }),
                (0.5, Behaviour::Shuttle { eps: 0.3 }),
            ],
        }
    }
}

pub fn one_hot(action: usize) -> Vec<f64> {
    let mut v = vec![0.0; NUM_ACTIONS];
    v[action] = 1.0;
    v
}

/// Simulator-side information that learners must never see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Task reward of each step.
    pub rewards: Vec<f64>,
    /// Planning-state index before each step and after the last, `T + 1`.
    pub latent: Vec<usize>,
    /// Ended in a task terminal (not a time-out).
    pub terminated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: u64,
    pub env_id: String,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub truth: GroundTruth,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn true_return(&self) -> f64 {
        self.truth.rewards.iter().sum()
    }

    pub fn window_return(&self, start: usize, len: usize) -> f64 {
        self.truth.rewards[start..start + len].iter().sum()
    }

    /// Observation-only window `[start, start + len)` with one-hot actions.
    pub fn segment(&self, start: usize, len: usize) -> Result<Segment> {
        if len == 0 || start + len > self.len() {
            return Err(Error::Shape(format!(
                "window {start}..{} outside trajectory of length {}",
                start + len,
                self.len()
            )));
        }
        Segment::new(
            self.env_id.clone(),
            self.id,
            start,
            self.observations[start..start + len].to_vec(),
            self.actions[start..start + len].iter().map(|&a| one_hot(a)).collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        if t == 0
            || self.observations.len() != t
            || self.truth.rewards.len() != t
            || self.truth.latent.len() != t + 1
            || self.actions.iter().any(|&a| a >= NUM_ACTIONS)
        {
            return Err(Error::Dataset(format!("trajectory {} is malformed", self.id)));
        }
        Ok(())
    }
}

/// Scripted data-collection policies. They may read the full state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Behaviour {
    Random,
    /// Shortest path to the goal, random action with probability `eps`.
    EpsGreedy { eps: f64 },
    /// Key first, then the goal, then stay.
    KeyThenGoal { eps: f64 },
    /// Goal first, linger there, then fetch the key.
    GoalFirst { eps: f64 },
    /// Alternate between key and goal with random pauses at each.
    Shuttle { eps: f64 },
}

/// A behaviour plus its per-episode memory.
#[derive(Debug, Clone)]
pub struct Policy {
    pub behaviour: Behaviour,
    phase: u8,
    timer: u32,
    target_key: bool,
}

impl Policy {
    pub fn new(behaviour: Behaviour) -> Self {
        Self {
            behaviour,
            phase: 0,
            timer: 0,
            target_key: false,
        }
    }

    fn begin<R: Rng>(&mut self, rng: &mut R) {
        self.phase = 0;
        self.timer = match self.behaviour {
            Behaviour::GoalFirst { .. } => rng.random_range(4..14),
            Behaviour::Shuttle { .. } => rng.random_range(0..6),
            _ => 0,
        };
        self.target_key = rng.random_bool(0.5);
    }

    pub fn act<R: Rng>(&mut self, env: &Env, s: &State, rng: &mut R) -> usize {
        let eps = match self.behaviour {
            Behaviour::Random => return rng.random_range(0..NUM_ACTIONS),
            Behaviour::EpsGreedy { eps }
            | Behaviour::KeyThenGoal { eps }
            | Behaviour::GoalFirst { eps }
            | Behaviour::Shuttle { eps } => eps,
        };
        if rng.random::<f64>() < eps {
            return rng.random_range(0..NUM_ACTIONS);
        }
        let goal = env.goal();
        let key = env.key().unwrap_or(goal);
        let target = match self.behaviour {
            Behaviour::EpsGreedy { .. } | Behaviour::Random => goal,
            Behaviour::KeyThenGoal { .. } => {
                if s.has_key {
                    goal
                } else {
                    key
                }
            }
            Behaviour::GoalFirst { .. } => match self.phase {
                0 => {
                    if s.pos == goal {
                        self.phase = 1;
                    }
                    goal
                }
                1 => {
                    self.timer = self.timer.saturating_sub(1);
                    if self.timer == 0 {
                        self.phase = 2;
                    }
                    goal
                }
                _ if s.has_key => return rng.random_range(0..NUM_ACTIONS),
                _ => key,
            },
            Behaviour::Shuttle { .. } => {
                let here = if self.target_key { key } else { goal };
                if s.pos == here {
                    if self.timer == 0 {
                        self.target_key = !self.target_key;
                        self.timer = rng.random_range(0..6);
                    } else {
                        self.timer -= 1;
                    }
                }
                if self.target_key {
                    key
                } else {
                    goal
                }
            }
        };
        greedy_action(env, s.pos, target, rng)
    }
}

/// A uniformly chosen action that shortens the path to `target`; at the
/// target, one that stays put.
pub fn greedy_action<R: Rng>(env: &Env, pos: Cell, target: Cell, rng: &mut R) -> usize {
    let dist = env.distances(target);
    let here = dist[env.cell_index(pos)];
    let closer: Vec<usize> = (0..NUM_ACTIONS)
        .filter(|&a| dist[env.cell_index(env.move_from(pos, a))] < here)
        .collect();
    let options = if closer.is_empty() || here == Some(0) {
        let stay: Vec<usize> = (0..NUM_ACTIONS).filter(|&a| env.move_from(pos, a) == pos).collect();
        if stay.is_empty() {
            vec![0]
        } else {
            stay
        }
    } else {
        closer
    };
    options[rng.random_range(0..options.len())]
}

/// One episode from `env.reset`.
pub fn rollout(env: &Env, policy: &mut Policy, id: u64, seed: u64) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = env.reset(&mut rng);
    rollout_from(env, policy, id, start, &mut rng)
}

pub fn rollout_from<R: Rng>(env: &Env, policy: &mut Policy, id: u64, start: State, rng: &mut R) -> Trajectory {
    policy.begin(rng);
    let mut s = start;
    let mut traj = Trajectory {
        id,
        env_id: env.id().to_string(),
        observations: Vec::new(),
        actions: Vec::new(),
        truth: GroundTruth {
            rewards: Vec::new(),
            latent: vec![env.latent_index(&s)],
            terminated: false,
        },
    };
    loop {
        let a = policy.act(env, &s, rng);
        let tr = env.step(&s, a);
        traj.observations.push(env.observe(&s));
        traj.actions.push(a);
        traj.truth.rewards.push(tr.reward);
        traj.truth.latent.push(env.latent_index(&tr.next));
        s = tr.next;
        if tr.done {
            traj.truth.terminated = env.is_terminal(&s);
            return traj;
        }
    }
}

/// `n` episodes from the environment's behaviour mixture. Episode `i` uses
/// its own random stream, so the result does not depend on generation order.
pub fn generate_dataset(env: &Env, n: usize, seed: u64) -> Vec<Trajectory> {
    let mix = env.behaviour_mix();
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut behaviour = mix[mix.len() - 1].1;
            for &(p, b) in &mix {
                acc += p;
                if u < acc {
                    behaviour = b;
                    break;
                }
            }
            let start = env.reset(&mut rng);
            rollout_from(env, &mut Policy::new(behaviour), i as u64, start, &mut rng)
        })
        .collect()
}
