//! Non-Markovian reward model: an LSTM reads `(s_1, a_1), ..., (s_t, a_t)`
//! and emits `r̂_t` from its hidden state; the segment score is `Σ_t r̂_t`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{linear, ForwardVars, InputDims, SegmentBatch};
use crate::error::{Error, Result};
use crate::params::{truncated_normal, Bound, ParamStore};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LstmConfig {
    /// Width of the ReLU input projection.
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden_dim: 64,
        }
    }
}

impl LstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("LSTM sizes must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) fn init_params<R: Rng>(c: &LstmConfig, dims: InputDims, rng: &mut R) -> ParamStore {
    let (e, h) = (c.embed_dim, c.hidden_dim);
    let fan_in = dims.state_dim + dims.action_dim;
    let mut p = ParamStore::new();
    p.insert(
        "lstm.embed.w",
        truncated_normal(&[fan_in, e], (2.0 / fan_in as f64).sqrt(), rng),
    );
    p.insert("lstm.embed.b", Tensor::zeros(&[e]));
    p.insert("lstm.input.w", truncated_normal(&[e, 4 * h], (1.0 / e as f64).sqrt(), rng));
    // Gate order i, f, g, o; forget bias starts at 1.
    p.insert(
        "lstm.input.b",
        Tensor::from_fn(&[4 * h], |i| if (h..2 * h).contains(&i) { 1.0 } else { 0.0 }),
    );
    p.insert("lstm.recur", truncated_normal(&[h, 4 * h], (1.0 / h as f64).sqrt(), rng));
    p.insert("lstm.head.w", Tensor::zeros(&[h, 1]));
    p.insert("lstm.head.b", Tensor::zeros(&[1]));
    p
}

pub(crate) fn forward(
    c: &LstmConfig,
    tape: &mut Tape,
    bound: &Bound,
    batch: &SegmentBatch,
) -> Result<ForwardVars> {
    let (b, t, h) = (batch.batch_size(), batch.len(), c.hidden_dim);
    let states = tape.constant(batch.states.clone());
    let actions = tape.constant(batch.actions.clone());
    let x = tape.concat_last(&[states, actions])?;
    let x = linear(tape, bound, x, "lstm.embed")?;
    let x = tape.relu(x);
    let gates_in = linear(tape, bound, x, "lstm.input")?;
    let recur = bound.var("lstm.recur")?;

    let mut hidden = tape.constant(Tensor::zeros(&[b, h]));
    let mut cell = tape.constant(Tensor::zeros(&[b, h]));
    let mut rewards = Vec::with_capacity(t);
    for step in 0..t {
        let g = tape.gather_rows(gates_in, &[step])?;
        let g = tape.reshape(g, vec![b, 4 * h])?;
        let hr = tape.matmul(hidden, recur)?;
        let g = tape.add(g, hr)?;
        let gi = tape.slice_last(g, 0, h)?;
        let gf = tape.slice_last(g, h, h)?;
        let gg = tape.slice_last(g, 2 * h, h)?;
        let go = tape.slice_last(g, 3 * h, h)?;
        let i = tape.sigmoid(gi);
        let f = tape.sigmoid(gf);
        let u = tape.tanh(gg);
        let o = tape.sigmoid(go);
        let keep = tape.mul(f, cell)?;
        let write = tape.mul(i, u)?;
        cell = tape.add(keep, write)?;
        let squashed = tape.tanh(cell);
        hidden = tape.mul(o, squashed)?;
        rewards.push(linear(tape, bound, hidden, "lstm.head")?);
    }
    let rewards = tape.concat_last(&rewards)?;
    let scores = tape.sum_axis(rewards, 1)?;
    Ok(ForwardVars {
        scores,
        rewards,
        weights: None,
        outputs: None,
        hidden: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, RewardModel, Segment};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> RewardModel {
        let spec = ModelSpec::Nmr(LstmConfig {
            embed_dim: 6,
            hidden_dim: 5,
        });
        let dims = InputDims {
            state_dim: 2,
            action_dim: 2,
        };
        let mut m = RewardModel::new(spec, dims, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (_, t) in m.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.4..0.4));
        }
        m
    }

    fn seg(values: &[f64]) -> Segment {
        let states = values.iter().map(|&v| vec![v, -v]).collect();
        let actions = values.iter().map(|_| vec![1.0, 0.0]).collect();
        Segment::new("t", 0, 0, states, actions).unwrap()
    }

    #[test]
    fn rewards_depend_on_history_only() {
        let m = model();
        let a = m.score(&seg(&[0.1, 0.2, 0.3, 0.4])).unwrap();
        let b = m.score(&seg(&[0.1, 0.2, 0.3, 0.9])).unwrap();
        let c = m.score(&seg(&[0.5, 0.2, 0.3, 0.4])).unwrap();
        assert_eq!(a.rewards[..3], b.rewards[..3]);
        assert_ne!(a.rewards[3], b.rewards[3]);
        // Same step input, different history.
        assert_ne!(a.rewards[1], c.rewards[1]);
        assert!((a.score - a.rewards.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn zero_head_at_init() {
        let spec = ModelSpec::Nmr(LstmConfig::default());
        let dims = InputDims {
            state_dim: 2,
            action_dim: 2,
        };
        let m = RewardModel::new(spec, dims, 0).unwrap();
        assert_eq!(m.score(&seg(&[0.3, 0.1])).unwrap().score, 0.0);
    }
}
