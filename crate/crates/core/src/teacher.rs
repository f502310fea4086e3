//! Query sampling and synthetic teachers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::Trajectory;
use crate::error::{Error, Result};
use crate::preference::{PreferenceRecord, Query, TeacherTag};

/// Where one side of a query was cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowRef {
    /// Index into the trajectory list.
    pub trajectory: usize,
    pub start: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRef {
    pub id: u64,
    pub first: WindowRef,
    pub second: WindowRef,
    pub len: usize,
}

impl QueryRef {
    pub fn query(&self, trajectories: &[Trajectory]) -> Result<Query> {
        let cut = |w: WindowRef| trajectories[w.trajectory].segment(w.start, self.len);
        Ok(Query {
            id: self.id,
            first: cut(self.first)?,
            second: cut(self.second)?,
        })
    }

    /// Ground-truth returns of both windows.
    pub fn returns(&self, trajectories: &[Trajectory]) -> (f64, f64) {
        let ret = |w: WindowRef| trajectories[w.trajectory].window_return(w.start, self.len);
        (ret(self.first), ret(self.second))
    }
}

/// `n` pairs of length-`h` windows, each side drawn independently and
/// uniformly over every valid `(trajectory, start)`. Trajectories shorter
/// than `h` contribute no windows.
pub fn sample_queries(trajectories: &[Trajectory], n: usize, h: usize, seed: u64) -> Result<Vec<QueryRef>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if h == 0 {
        return Err(Error::Config("segment length must be positive".into()));
    }
    // Cumulative window counts for inverse-CDF draws.
    let mut cumulative = Vec::with_capacity(trajectories.len());
    let mut total = 0usize;
    for t in trajectories {
        total += (t.len() + 1).saturating_sub(h);
        cumulative.push(total);
    }
    if total == 0 {
        return Err(Error::Dataset(format!("no trajectory has length ≥ {h}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| {
        let k = rng.random_range(0..total);
        let trajectory = cumulative.partition_point(|&c| c <= k);
        let before = if trajectory == 0 {
            0
        } else {
            cumulative[trajectory - 1]
        };
        WindowRef {
            trajectory,
            start: k - before,
        }
    };
    Ok((0..n as u64)
        .map(|id| QueryRef {
            id,
            first: draw(&mut rng),
            second: draw(&mut rng),
            len: h,
        })
        .collect())
}

/// Labels by ground-truth segment return.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptedTeacher {
    /// Rationality. `f64::INFINITY` picks the higher return outright.
    pub beta: f64,
}

impl ScriptedTeacher {
    pub fn deterministic() -> Self {
        Self { beta: f64::INFINITY }
    }

    pub fn boltzmann(beta: f64) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {beta}")));
        }
        Ok(Self { beta })
    }

    pub fn tag(&self) -> TeacherTag {
        if self.beta.is_infinite() {
            TeacherTag::Scripted
        } else {
            TeacherTag::Boltzmann
        }
    }

    /// Probability of `y = 1` under the Boltzmann model.
    pub fn preference_probability(&self, r0: f64, r1: f64) -> f64 {
        if self.beta.is_infinite() {
            return match r1.partial_cmp(&r0) {
                Some(std::cmp::Ordering::Greater) => 1.0,
                Some(std::cmp::Ordering::Less) => 0.0,
                _ => 0.5,
            };
        }
        crate::tape::pair_probability(self.beta * r0, self.beta * r1)
    }

    /// `β = ∞`: argmax of the returns, 0.5 on exact ties. Otherwise a
    /// Bernoulli draw of `y = 1`.
    pub fn label<R: Rng>(&self, r0: f64, r1: f64, rng: &mut R) -> f64 {
        let p = self.preference_probability(r0, r1);
        if self.beta.is_infinite() {
            p
        } else if rng.random::<f64>() < p {
            1.0
        } else {
            0.0
        }
    }

    /// Labels every query. Boltzmann draws use a stream seeded by `seed`.
    pub fn label_queries(
        &self,
        trajectories: &[Trajectory],
        queries: &[QueryRef],
        seed: u64,
    ) -> Result<Vec<PreferenceRecord>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        queries
            .iter()
            .map(|q| {
                let (r0, r1) = q.returns(trajectories);
                let y = self.label(r0, r1, &mut rng);
                PreferenceRecord::new(q.query(trajectories)?, y, self.tag(), 0)
            })
            .collect()
    }
}

/// Fraction of agreeing labels. A 0.5 on either side counts as half an
/// agreement.
pub fn agreement_rate(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dataset(format!(
            "label lists differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Dataset("no labels to compare".into()));
    }
    let score: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == 0.5 || y == 0.5 {
                0.5
            } else if x == y {
                1.0
            } else {
                0.0
            }
        })
        .sum();
    Ok(score / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_teacher_cases() {
        let t = ScriptedTeacher::deterministic();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(t.label(3.0, 5.0, &mut rng), 1.0);
        assert_eq!(t.label(5.0, 3.0, &mut rng), 0.0);
        assert_eq!(t.label(4.0, 4.0, &mut rng), 0.5);
    }

    #[test]
    fn boltzmann_probability_is_analytic() {
        let beta = 2.0;
        let t = ScriptedTeacher::boltzmann(beta).unwrap();
        let p = t.preference_probability(0.0, 3f64.ln() / beta);
        assert!((p - 0.75).abs() < 1e-12);
    }

    #[test]
    fn agreement_conventions() {
        assert_eq!(agreement_rate(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(agreement_rate(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(agreement_rate(&[0.5, 1.0], &[1.0, 1.0]).unwrap(), 0.75);
        assert!(agreement_rate(&[0.0], &[]).is_err());
    }
}
