//! Offline fitted Q-iteration over dataset transitions and greedy rollouts.
//!
//! Planning runs on the simulator's latent state (position, plus key
//! possession in `key_door`). Only state-action pairs present in the dataset
//! are backed up; states never visited are valued pessimistically at
//! `r_min / (1 − γ)`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Env, Trajectory, NUM_ACTIONS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TabularConfig {
    pub gamma: f64,
    pub episodes: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once no Q-value moves by more than this.
    pub tolerance: f64,
}

impl Default for TabularConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            episodes: 100,
            seed: 0,
            max_iters: 20_000,
            tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub success_rate: f64,
    pub mean_return: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    pub q: Vec<[f64; NUM_ACTIONS]>,
    pub seen: Vec<[bool; NUM_ACTIONS]>,
    pub iterations: usize,
}

impl TabularPolicy {
    /// Knows nothing, so acts uniformly at random everywhere.
    pub fn random(env: &Env) -> Self {
        Self {
            q: vec![[0.0; NUM_ACTIONS]; env.num_latent()],
            seen: vec![[false; NUM_ACTIONS]; env.num_latent()],
            iterations: 0,
        }
    }

    /// Greedy over actions seen in the data, ties broken at random. Unseen
    /// states fall back to a uniform action.
    pub fn act<R: Rng>(&self, state: usize, rng: &mut R) -> usize {
        let seen = &self.seen[state];
        let best = (0..NUM_ACTIONS)
            .filter(|&a| seen[a])
            .map(|a| self.q[state][a])
            .fold(f64::NEG_INFINITY, f64::max);
        if best == f64::NEG_INFINITY {
            return rng.random_range(0..NUM_ACTIONS);
        }
        let tol = 1e-9 * (1.0 + best.abs());
        let ties: Vec<usize> = (0..NUM_ACTIONS)
            .filter(|&a| seen[a] && self.q[state][a] >= best - tol)
            .collect();
        ties[rng.random_range(0..ties.len())]
    }
}

struct Backup {
    state: usize,
    action: usize,
    reward: f64,
    /// `(next state, terminal, probability)`.
    next: Vec<(usize, bool, f64)>,
}

/// Fitted Q-iteration with `rewards[i][t]` as the reward of step `t` of
/// trajectory `i`.
pub fn fitted_q(env: &Env, trajs: &[Trajectory], rewards: &[Vec<f64>], config: &TabularConfig) -> Result<TabularPolicy> {
    if !(0.0..1.0).contains(&config.gamma) {
        return Err(Error::Config(format!("gamma {} not in [0, 1)", config.gamma)));
    }
    if trajs.len() != rewards.len() {
        return Err(Error::Dataset(format!(
            "{} trajectories but {} reward series",
            trajs.len(),
            rewards.len()
        )));
    }
    let n = env.num_latent();
    // (s, a) -> (reward sum, count, (s', done) -> count)
    let mut table: BTreeMap<(usize, usize), (f64, usize, BTreeMap<(usize, bool), usize>)> = BTreeMap::new();
    let mut r_min = f64::INFINITY;
    for (traj, r) in trajs.iter().zip(rewards) {
        traj.validate()?;
        if r.len() != traj.len() {
            return Err(Error::Dataset(format!("reward series for trajectory {} has wrong length", traj.id)));
        }
        let last = traj.len() - 1;
        for t in 0..traj.len() {
            let (s, s2) = (traj.truth.latent[t], traj.truth.latent[t + 1]);
            if s >= n || s2 >= n {
                return Err(Error::Dataset(format!("trajectory {} has states outside the environment", traj.id)));
            }
            let done = t == last && traj.truth.terminated;
            let e = table.entry((s, traj.actions[t])).or_default();
            e.0 += r[t];
            e.1 += 1;
            *e.2.entry((s2, done)).or_default() += 1;
            r_min = r_min.min(r[t]);
        }
    }
    if table.is_empty() {
        return Err(Error::Dataset("no transitions to plan over".into()));
    }
    let backups: Vec<Backup> = table
        .into_iter()
        .map(|((state, action), (sum, count, next))| Backup {
            state,
            action,
            reward: sum / count as f64,
            next: next
                .into_iter()
                .map(|((s2, done), c)| (s2, done, c as f64 / count as f64))
                .collect(),
        })
        .collect();

    let mut policy = TabularPolicy::random(env);
    for b in &backups {
        policy.seen[b.state][b.action] = true;
    }
    let pessimistic = r_min / (1.0 - config.gamma);
    let mut v = vec![0.0; n];
    for it in 1..=config.max_iters {
        for (s, vs) in v.iter_mut().enumerate() {
            let best = (0..NUM_ACTIONS)
                .filter(|&a| policy.seen[s][a])
                .map(|a| policy.q[s][a])
                .fold(f64::NEG_INFINITY, f64::max);
            *vs = if best == f64::NEG_INFINITY { pessimistic } else { best };
        }
        let mut delta: f64 = 0.0;
        for b in &backups {
            let future: f64 = b
                .next
                .iter()
                .map(|&(s2, done, p)| if done { 0.0 } else { p * v[s2] })
                .sum();
            let q = b.reward + config.gamma * future;
            delta = delta.max((q - policy.q[b.state][b.action]).abs());
            policy.q[b.state][b.action] = q;
        }
        policy.iterations = it;
        if delta <= config.tolerance {
            break;
        }
    }
    Ok(policy)
}

/// Rolls the greedy policy out for `episodes` seeded episodes. Success means
/// a positive task return.
pub fn evaluate_policy(env: &Env, policy: &TabularPolicy, episodes: usize, seed: u64) -> EvalReport {
    let mut successes = 0usize;
    let mut total = 0.0;
    for i in 0..episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut s = env.reset(&mut rng);
        let mut ret = 0.0;
        loop {
            let a = policy.act(env.latent_index(&s), &mut rng);
            let tr = env.step(&s, a);
            ret += tr.reward;
            s = tr.next;
            if tr.done {
                break;
            }
        }
        successes += (ret > 0.0) as usize;
        total += ret;
    }
    let n = episodes.max(1) as f64;
    EvalReport {
        success_rate: successes as f64 / n,
        mean_return: total / n,
        episodes,
    }
}

pub fn tabular_eval(
    env: &Env,
    trajs: &[Trajectory],
    rewards: &[Vec<f64>],
    config: &TabularConfig,
) -> Result<(TabularPolicy, EvalReport)> {
    let policy = fitted_q(env, trajs, rewards, config)?;
    let report = evaluate_policy(env, &policy, config.episodes, config.seed);
    Ok((policy, report))
}

/// Ground-truth task rewards of each trajectory.
pub fn true_rewards(trajs: &[Trajectory]) -> Vec<Vec<f64>> {
    trajs.iter().map(|t| t.truth.rewards.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::generate_dataset;

    #[test]
    fn empty_dataset_is_an_error() {
        let env = Env::grid_nav();
        assert!(fitted_q(&env, &[], &[], &TabularConfig::default()).is_err());
    }

    #[test]
    fn true_reward_solves_grid_nav() {
        let env = Env::grid_nav();
        let trajs = generate_dataset(&env, 300, 0);
        let (_, report) = tabular_eval(&env, &trajs, &true_rewards(&trajs), &TabularConfig::default()).unwrap();
        assert!(report.success_rate >= 0.95, "{report:?}");
    }

    #[test]
    fn zero_reward_is_no_better_than_random() {
        let env = Env::grid_nav();
        let trajs = generate_dataset(&env, 300, 0);
        let zeros: Vec<Vec<f64>> = trajs.iter().map(|t| vec![0.0; t.len()]).collect();
        let cfg = TabularConfig::default();
        let (_, learned) = tabular_eval(&env, &trajs, &zeros, &cfg).unwrap();
        let random = evaluate_policy(&env, &TabularPolicy::random(&env), 400, 1);
        assert!(learned.success_rate <= random.success_rate + 0.15, "{learned:?} vs {random:?}");
    }
}
