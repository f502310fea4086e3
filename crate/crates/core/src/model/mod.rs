//! Reward models behind a common "score a segment" interface.
//!
//! * [`transformer`]: causal transformer plus preference attention. Scores
//!   are importance-weighted sums of non-Markovian rewards.
//! * [`mlp`]: Markovian per-step rewards, summed with equal weight.
//! * [`recurrent`]: LSTM rewards over the running prefix, summed with equal
//!   weight.

pub mod mlp;
pub mod recurrent;
pub mod transformer;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use mlp::MlpConfig;
pub use recurrent::LstmConfig;
pub use transformer::{AttentionMask, TransformerConfig};

/// A fixed-length window of consecutive (state, action) pairs.
///
/// Only observations live here. Ground-truth rewards stay with the source
/// trajectory so that nothing downstream of a `Segment` can see them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub env_id: String,
    pub trajectory_id: u64,
    pub start: usize,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

impl Segment {
    pub fn new(
        env_id: impl Into<String>,
        trajectory_id: u64,
        start: usize,
        states: Vec<Vec<f64>>,
        actions: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let seg = Self {
            env_id: env_id.into(),
            trajectory_id,
            start,
            states,
            actions,
        };
        seg.validate()?;
        Ok(seg)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn action_dim(&self) -> usize {
        self.actions.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.is_empty() || self.states.len() != self.actions.len() {
            return Err(Error::Shape(format!(
                "segment needs equal non-zero state/action lengths, got {} and {}",
                self.states.len(),
                self.actions.len()
            )));
        }
        let (sd, ad) = (self.state_dim(), self.action_dim());
        if self.states.iter().any(|s| s.len() != sd) || self.actions.iter().any(|a| a.len() != ad) {
            return Err(Error::Shape("ragged segment rows".into()));
        }
        Ok(())
    }

    /// Sub-window `[from, to)` keeping provenance.
    pub fn window(&self, from: usize, to: usize) -> Segment {
        Segment {
            env_id: self.env_id.clone(),
            trajectory_id: self.trajectory_id,
            start: self.start + from,
            states: self.states[from..to].to_vec(),
            actions: self.actions[from..to].to_vec(),
        }
    }
}

/// Per-timestep rewards, importance weights and attention outputs of one
/// segment under the preference attention layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardAttribution {
    pub rewards: Vec<f64>,
    pub weights: Vec<f64>,
    pub outputs: Vec<f64>,
}

impl RewardAttribution {
    /// `Σ_t w_t · r̂_t`.
    pub fn weighted_sum(&self) -> f64 {
        self.weights.iter().zip(&self.rewards).map(|(w, r)| w * r).sum()
    }

    /// Mean of the attention outputs; equals [`Self::weighted_sum`].
    pub fn mean_output(&self) -> f64 {
        self.outputs.iter().sum::<f64>() / self.outputs.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Pt,
    Mr,
    Nmr,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Pt => "pt",
            ModelKind::Mr => "mr",
            ModelKind::Nmr => "nmr",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pt" => Ok(ModelKind::Pt),
            "mr" => Ok(ModelKind::Mr),
            "nmr" => Ok(ModelKind::Nmr),
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub state_dim: usize,
    pub action_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Pt(TransformerConfig),
    Mr(MlpConfig),
    Nmr(LstmConfig),
}

impl ModelSpec {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelSpec::Pt(_) => ModelKind::Pt,
            ModelSpec::Mr(_) => ModelKind::Mr,
            ModelSpec::Nmr(_) => ModelKind::Nmr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Pt(c) => c.validate(),
            ModelSpec::Mr(c) => c.validate(),
            ModelSpec::Nmr(c) => c.validate(),
        }
    }
}

/// Forward pass mode. Dropout is active only in training.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Tape handles produced by a batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `[B]` preference logits.
    pub scores: Var,
    /// `[B, T]` per-step rewards.
    pub rewards: Var,
    /// `[B, T]` importance weights (transformer only).
    pub weights: Option<Var>,
    /// `[B, T]` preference attention outputs (transformer only).
    pub outputs: Option<Var>,
    /// `[B, T, d]` causal hidden states (transformer only).
    pub hidden: Option<Var>,
}

/// Evaluated score of one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentScore {
    pub score: f64,
    pub rewards: Vec<f64>,
    pub attribution: Option<RewardAttribution>,
}

/// Segments of equal length packed as `[B, T, dim]` tensors.
#[derive(Debug, Clone)]
pub struct SegmentBatch {
    pub states: Tensor,
    pub actions: Tensor,
}

impl SegmentBatch {
    pub fn new(segments: &[&Segment]) -> Result<Self> {
        let first = segments
            .first()
            .ok_or_else(|| Error::Shape("empty segment batch".into()))?;
        let (t, sd, ad) = (first.len(), first.state_dim(), first.action_dim());
        let mut states = Vec::with_capacity(segments.len() * t * sd);
        let mut actions = Vec::with_capacity(segments.len() * t * ad);
        for seg in segments {
            seg.validate()?;
            if seg.len() != t || seg.state_dim() != sd || seg.action_dim() != ad {
                return Err(Error::Shape(format!(
                    "segment batch mixes shapes ({t}, {sd}, {ad}) and ({}, {}, {})",
                    seg.len(),
                    seg.state_dim(),
                    seg.action_dim()
                )));
            }
            seg.states.iter().for_each(|s| states.extend_from_slice(s));
            seg.actions.iter().for_each(|a| actions.extend_from_slice(a));
        }
        let b = segments.len();
        Ok(Self {
            states: Tensor::new(vec![b, t, sd], states)?,
            actions: Tensor::new(vec![b, t, ad], actions)?,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.states.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A reward model: architecture spec, input dimensions and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub spec: ModelSpec,
    pub dims: InputDims,
    pub params: ParamStore,
}

impl RewardModel {
    /// Fresh parameters from `seed`.
    pub fn new(spec: ModelSpec, dims: InputDims, seed: u64) -> Result<Self> {
        spec.validate()?;
        if dims.state_dim == 0 || dims.action_dim == 0 {
            return Err(Error::Config("state and action dims must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = match &spec {
            ModelSpec::Pt(c) => transformer::init_params(c, dims, &mut rng),
            ModelSpec::Mr(c) => mlp::init_params(c, dims, &mut rng),
            ModelSpec::Nmr(c) => recurrent::init_params(c, dims, &mut rng),
        };
        Ok(Self { spec, dims, params })
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind()
    }

    /// Longest segment the model accepts.
    pub fn max_len(&self) -> Option<usize> {
        match &self.spec {
            ModelSpec::Pt(c) => Some(c.segment_len),
            _ => None,
        }
    }

    pub fn check_segment(&self, seg: &Segment) -> Result<()> {
        seg.validate()?;
        if seg.state_dim() != self.dims.state_dim || seg.action_dim() != self.dims.action_dim {
            return Err(Error::Config(format!(
                "segment dims (state {}, action {}) do not match model (state {}, action {})",
                seg.state_dim(),
                seg.action_dim(),
                self.dims.state_dim,
                self.dims.action_dim
            )));
        }
        if let Some(max) = self.max_len() {
            if seg.len() > max {
                return Err(Error::Config(format!(
                    "segment length {} exceeds model maximum {max}",
                    seg.len()
                )));
            }
        }
        Ok(())
    }

    /// Batched forward pass on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &SegmentBatch,
        mode: Mode<'_>,
    ) -> Result<ForwardVars> {
        let (sd, ad) = (batch.states.shape()[2], batch.actions.shape()[2]);
        if sd != self.dims.state_dim || ad != self.dims.action_dim {
            return Err(Error::Config(format!(
                "batch dims (state {sd}, action {ad}) do not match model (state {}, action {})",
                self.dims.state_dim, self.dims.action_dim
            )));
        }
        match &self.spec {
            ModelSpec::Pt(c) => transformer::forward(c, tape, bound, batch, mode),
            ModelSpec::Mr(c) => mlp::forward(c, tape, bound, batch),
            ModelSpec::Nmr(c) => recurrent::forward(c, tape, bound, batch),
        }
    }

    /// Eval-mode score of a single segment.
    pub fn score(&self, seg: &Segment) -> Result<SegmentScore> {
        Ok(self.score_many(&[seg])?.remove(0))
    }

    /// Eval-mode scores of equal-length segments, in one pass.
    pub fn score_many(&self, segs: &[&Segment]) -> Result<Vec<SegmentScore>> {
        for s in segs {
            self.check_segment(s)?;
        }
        let batch = SegmentBatch::new(segs)?;
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &self.params, false);
        let out = self.forward(&mut tape, &bound, &batch, Mode::Eval)?;
        let t = batch.len();
        let scores = tape.value(out.scores).data();
        let rewards = tape.value(out.rewards).data();
        let weights = out.weights.map(|w| tape.value(w).data());
        let outputs = out.outputs.map(|z| tape.value(z).data());
        Ok((0..segs.len())
            .map(|i| {
                let span = i * t..(i + 1) * t;
                SegmentScore {
                    score: scores[i],
                    rewards: rewards[span.clone()].to_vec(),
                    attribution: weights.zip(outputs).map(|(w, z)| RewardAttribution {
                        rewards: rewards[span.clone()].to_vec(),
                        weights: w[span.clone()].to_vec(),
                        outputs: z[span.clone()].to_vec(),
                    }),
                }
            })
            .collect())
    }
}

/// Causal (prefix-only) hidden states of a transformer for one segment,
/// one row per timestep.
pub fn causal_hidden(model: &RewardModel, seg: &Segment) -> Result<Vec<Vec<f64>>> {
    let ModelSpec::Pt(_) = &model.spec else {
        return Err(Error::Config("causal hidden states need a transformer".into()));
    };
    model.check_segment(seg)?;
    let batch = SegmentBatch::new(&[seg])?;
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &model.params, false);
    let out = model.forward(&mut tape, &bound, &batch, Mode::Eval)?;
    let h = tape.value(out.hidden.expect("transformer hidden"));
    let d = *h.shape().last().unwrap();
    Ok(h.data().chunks_exact(d).map(<[f64]>::to_vec).collect())
}

/// Concatenated `[state, action]` rows of a batch, `[B·T, sd + ad]`.
pub(crate) fn step_inputs(batch: &SegmentBatch) -> Vec<Vec<f64>> {
    let (b, t, sd) = (
        batch.states.shape()[0],
        batch.states.shape()[1],
        batch.states.shape()[2],
    );
    let ad = batch.actions.shape()[2];
    let s = batch.states.data();
    let a = batch.actions.data();
    (0..b * t)
        .map(|i| {
            let mut row = Vec::with_capacity(sd + ad);
            row.extend_from_slice(&s[i * sd..(i + 1) * sd]);
            row.extend_from_slice(&a[i * ad..(i + 1) * ad]);
            row
        })
        .collect()
}

/// `x · W + b` for `x: [.., in]`.
pub(crate) fn linear(tape: &mut Tape, bound: &Bound, x: Var, name: &str) -> Result<Var> {
    let w = bound.var(&format!("{name}.w"))?;
    let b = bound.var(&format!("{name}.b"))?;
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}
