//! Markovian reward model: `r̂(s, a)` from a ReLU MLP, segment score
//! `Σ_t r̂(s_t, a_t)`.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{linear, step_inputs, ForwardVars, InputDims, SegmentBatch};
use crate::error::{Error, Result};
use crate::params::{truncated_normal, Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::Config("MLP layers must be non-empty".into()));
        }
        Ok(())
    }
}

pub(crate) fn init_params<R: Rng>(c: &MlpConfig, dims: InputDims, rng: &mut R) -> ParamStore {
    let mut p = ParamStore::new();
    let mut fan_in = dims.state_dim + dims.action_dim;
    for (i, &width) in c.hidden.iter().enumerate() {
        let std = (2.0 / fan_in as f64).sqrt();
        p.insert(format!("mlp.fc{i}.w"), truncated_normal(&[fan_in, width], std, rng));
        p.insert(format!("mlp.fc{i}.b"), Tensor::zeros(&[width]));
        fan_in = width;
    }
    p.insert("mlp.out.w", Tensor::zeros(&[fan_in, 1]));
    p.insert("mlp.out.b", Tensor::zeros(&[1]));
    p
}

/// Collapses repeated `(s, a)` rows. Returns the distinct rows and, for each
/// input row, the index of its representative.
pub fn dedupe_rows(rows: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut unique = Vec::new();
    let index = rows
        .iter()
        .map(|row| {
            let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
            *seen.entry(key).or_insert_with(|| {
                unique.push(row.clone());
                unique.len() - 1
            })
        })
        .collect();
    (unique, index)
}

/// Per-row rewards `[N, 1]` for an `[N, in]` input.
pub fn step_rewards(c: &MlpConfig, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..c.hidden.len() {
        h = linear(tape, bound, h, &format!("mlp.fc{i}"))?;
        h = tape.relu(h);
    }
    linear(tape, bound, h, "mlp.out")
}

pub(crate) fn forward(
    c: &MlpConfig,
    tape: &mut Tape,
    bound: &Bound,
    batch: &SegmentBatch,
) -> Result<ForwardVars> {
    let (b, t) = (batch.batch_size(), batch.len());
    let (unique, index) = dedupe_rows(&step_inputs(batch));
    let x = tape.constant(Tensor::from_rows(&unique)?);
    let r = step_rewards(c, tape, bound, x)?;
    let r = tape.gather_rows(r, &index)?;
    let rewards = tape.reshape(r, vec![b, t])?;
    let scores = tape.sum_axis(rewards, 1)?;
    Ok(ForwardVars {
        scores,
        rewards,
        weights: None,
        outputs: None,
        hidden: None,
    })
}
