//! Preference Transformer: a GPT-style causal transformer over interleaved
//! state/action tokens, followed by a single-head bidirectional preference
//! attention layer whose values are scalar rewards.
//!
//! For a segment of length `T` the causal stack reads `2T` tokens
//! `(s_1, a_1, ..., s_T, a_T)`; the output at the action token of step `t`
//! becomes `x_t`, so `x_t` depends only on `(s_i, a_i)` for `i ≤ t`. The
//! preference layer maps each `x_t` to a query, a key and a scalar reward
//! `r̂_t`. With `A` the row-softmax of query/key products, the outputs are
//! `z = A r̂`, the importance weights are the column means
//! `w_t = (1/T) Σ_i A[i, t]`, and the segment score is
//! `mean(z) = Σ_t w_t r̂_t`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{linear, ForwardVars, InputDims, Mode, SegmentBatch, SegmentScore};
use crate::error::{Error, Result};
use crate::params::{truncated_normal, Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

/// Which token pairs the causal stack may attend over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMask {
    /// Token `i` sees tokens `j ≤ i`.
    #[default]
    Causal,
    /// Token `i` sees only earlier-or-equal tokens of its own timestep, so
    /// `x_t` is a function of `(s_t, a_t)` and position `t` alone.
    CurrentStep,
    /// No mask. Breaks causality; only for ablations.
    Full,
}

impl AttentionMask {
    fn allows(self, i: usize, j: usize) -> bool {
        match self {
            AttentionMask::Causal => j <= i,
            AttentionMask::CurrentStep => j <= i && j / 2 == i / 2,
            AttentionMask::Full => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    /// Hidden width of the block MLP as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    pub dropout: f64,
    /// Maximum segment length (size of the positional table).
    pub segment_len: usize,
    pub attention_mask: AttentionMask,
    /// Scale preference-attention logits by `1/√d`.
    pub scale_preference_logits: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            num_layers: 1,
            num_heads: 4,
            embed_dim: 64,
            mlp_ratio: 4,
            dropout: 0.1,
            segment_len: 25,
            attention_mask: AttentionMask::Causal,
            scale_preference_logits: true,
        }
    }
}

impl TransformerConfig {
    /// Full-size model: width 256 and length-100 segments.
    pub fn full_scale() -> Self {
        Self {
            embed_dim: 256,
            segment_len: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.num_heads == 0
            || self.embed_dim == 0
            || self.segment_len == 0
            || self.mlp_ratio == 0
        {
            return Err(Error::Config("transformer sizes must be positive".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.embed_dim < 2 {
            return Err(Error::Config("embed_dim must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

pub(crate) fn init_params<R: Rng>(c: &TransformerConfig, dims: InputDims, rng: &mut R) -> ParamStore {
    let d = c.embed_dim;
    let hidden = c.mlp_ratio * d;
    let mut p = ParamStore::new();
    let dense = |p: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R| {
        p.insert(format!("{name}.w"), truncated_normal(&[fan_in, fan_out], INIT_STD, rng));
        p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    };
    let norm = |p: &mut ParamStore, name: &str| {
        p.insert(format!("{name}.g"), Tensor::ones(&[d]));
        p.insert(format!("{name}.b"), Tensor::zeros(&[d]));
    };
    dense(&mut p, "embed.state", dims.state_dim, d, rng);
    norm(&mut p, "embed.state_ln");
    dense(&mut p, "embed.action", dims.action_dim, d, rng);
    norm(&mut p, "embed.action_ln");
    p.insert("embed.pos", truncated_normal(&[c.segment_len, d], INIT_STD, rng));
    for layer in 0..c.num_layers {
        let pre = format!("block{layer}");
        norm(&mut p, &format!("{pre}.ln1"));
        dense(&mut p, &format!("{pre}.attn.qkv"), d, 3 * d, rng);
        dense(&mut p, &format!("{pre}.attn.proj"), d, d, rng);
        norm(&mut p, &format!("{pre}.ln2"));
        dense(&mut p, &format!("{pre}.mlp.fc"), d, hidden, rng);
        dense(&mut p, &format!("{pre}.mlp.out"), hidden, d, rng);
    }
    norm(&mut p, "final_ln");
    dense(&mut p, "pref.query", d, d, rng);
    dense(&mut p, "pref.key", d, d, rng);
    p.insert("pref.value.w", Tensor::zeros(&[d, 1]));
    p.insert("pref.value.b", Tensor::zeros(&[1]));
    p
}

fn dropout(tape: &mut Tape, x: Var, rate: f64, mode: &mut Mode<'_>) -> Result<Var> {
    match mode {
        Mode::Train(rng) => tape.dropout(x, rate, *rng),
        Mode::Eval => Ok(x),
    }
}

fn layer_norm(tape: &mut Tape, bound: &Bound, x: Var, name: &str) -> Result<Var> {
    let g = bound.var(&format!("{name}.g"))?;
    let b = bound.var(&format!("{name}.b"))?;
    tape.layer_norm(x, g, b)
}

/// Per-modality linear + layer norm, shared positional rows added to both
/// the state and action token of each timestep, interleaved to
/// `[B, 2T, d]`. Positions start at `offset`.
pub fn embed_segment(
    c: &TransformerConfig,
    tape: &mut Tape,
    bound: &Bound,
    batch: &SegmentBatch,
    offset: usize,
) -> Result<Var> {
    let t = batch.len();
    if offset + t > c.segment_len {
        return Err(Error::Config(format!(
            "positions {offset}..{} exceed table of {}",
            offset + t,
            c.segment_len
        )));
    }
    let states = tape.constant(batch.states.clone());
    let actions = tape.constant(batch.actions.clone());
    let s = linear(tape, bound, states, "embed.state")?;
    let s = layer_norm(tape, bound, s, "embed.state_ln")?;
    let a = linear(tape, bound, actions, "embed.action")?;
    let a = layer_norm(tape, bound, a, "embed.action_ln")?;
    let table = bound.var("embed.pos")?;
    let rows: Vec<usize> = (offset..offset + t).collect();
    let pos = tape.gather_rows(table, &rows)?;
    let s = tape.add(s, pos)?;
    let a = tape.add(a, pos)?;
    tape.interleave_rows(s, a)
}

fn attention_block(
    c: &TransformerConfig,
    tape: &mut Tape,
    bound: &Bound,
    x: Var,
    pre: &str,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let d = c.embed_dim;
    let dh = d / c.num_heads;
    let h = layer_norm(tape, bound, x, &format!("{pre}.ln1"))?;
    let qkv = linear(tape, bound, h, &format!("{pre}.attn.qkv"))?;
    let mut heads = Vec::with_capacity(c.num_heads);
    let scale = 1.0 / (dh as f64).sqrt();
    for head in 0..c.num_heads {
        let q = tape.slice_last(qkv, head * dh, dh)?;
        let k = tape.slice_last(qkv, d + head * dh, dh)?;
        let v = tape.slice_last(qkv, 2 * d + head * dh, dh)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale);
        let mask = c.attention_mask;
        let att = tape.masked_softmax(scores, |i, j| mask.allows(i, j))?;
        let att = dropout(tape, att, c.dropout, mode)?;
        heads.push(tape.matmul(att, v)?);
    }
    let merged = tape.concat_last(&heads)?;
    let y = linear(tape, bound, merged, &format!("{pre}.attn.proj"))?;
    let y = dropout(tape, y, c.dropout, mode)?;
    let x = tape.add(x, y)?;

    let h = layer_norm(tape, bound, x, &format!("{pre}.ln2"))?;
    let h = linear(tape, bound, h, &format!("{pre}.mlp.fc"))?;
    let h = tape.gelu(h);
    let h = linear(tape, bound, h, &format!("{pre}.mlp.out"))?;
    let h = dropout(tape, h, c.dropout, mode)?;
    tape.add(x, h)
}

/// Causal transformer over `[B, 2T, d]` tokens; returns the `[B, T, d]`
/// outputs at the action tokens.
pub fn causal_forward(
    c: &TransformerConfig,
    tape: &mut Tape,
    bound: &Bound,
    tokens: Var,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let mut x = dropout(tape, tokens, c.dropout, mode)?;
    for layer in 0..c.num_layers {
        x = attention_block(c, tape, bound, x, &format!("block{layer}"), mode)?;
    }
    let x = layer_norm(tape, bound, x, "final_ln")?;
    let shape = tape.shape(x);
    let t = shape[shape.len() - 2] / 2;
    let action_rows: Vec<usize> = (0..t).map(|i| 2 * i + 1).collect();
    tape.gather_rows(x, &action_rows)
}

/// Tape handles of the preference attention layer.
#[derive(Debug, Clone, Copy)]
pub struct PreferenceVars {
    /// `[B, T]`
    pub rewards: Var,
    /// `[B, T]`
    pub weights: Var,
    /// `[B, T]`
    pub outputs: Var,
    /// `[B]`
    pub scores: Var,
}

/// Bidirectional single-head attention with scalar values `r̂_t`.
pub fn preference_attention(
    c: &TransformerConfig,
    tape: &mut Tape,
    bound: &Bound,
    hidden: Var,
) -> Result<PreferenceVars> {
    let shape = tape.shape(hidden).to_vec();
    let (b, t) = (shape[0], shape[1]);
    let q = linear(tape, bound, hidden, "pref.query")?;
    let k = linear(tape, bound, hidden, "pref.key")?;
    let r = linear(tape, bound, hidden, "pref.value")?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = if c.scale_preference_logits {
        tape.scale(logits, 1.0 / (c.embed_dim as f64).sqrt())
    } else {
        logits
    };
    let att = tape.softmax(logits, 2)?;
    let z = tape.matmul(att, r)?;
    let outputs = tape.reshape(z, vec![b, t])?;
    let rewards = tape.reshape(r, vec![b, t])?;
    let weights = tape.mean_axis(att, 1)?;
    let scores = tape.mean_axis(outputs, 1)?;
    Ok(PreferenceVars {
        rewards,
        weights,
        outputs,
        scores,
    })
}

pub(crate) fn forward(
    c: &TransformerConfig,
    tape: &mut Tape,
    bound: &Bound,
    batch: &SegmentBatch,
    mode: Mode<'_>,
) -> Result<ForwardVars> {
    forward_at(c, tape, bound, batch, mode, 0)
}

/// Forward pass with positions starting at `offset`.
pub fn forward_at(
    c: &TransformerConfig,
    tape: &mut Tape,
    bound: &Bound,
    batch: &SegmentBatch,
    mut mode: Mode<'_>,
    offset: usize,
) -> Result<ForwardVars> {
    let tokens = embed_segment(c, tape, bound, batch, offset)?;
    let hidden = causal_forward(c, tape, bound, tokens, &mut mode)?;
    let pref = preference_attention(c, tape, bound, hidden)?;
    Ok(ForwardVars {
        scores: pref.scores,
        rewards: pref.rewards,
        weights: Some(pref.weights),
        outputs: Some(pref.outputs),
        hidden: Some(hidden),
    })
}

/// Eval-mode score of a segment whose first step sits at position `offset`.
pub fn score_at_offset(
    model: &super::RewardModel,
    seg: &super::Segment,
    offset: usize,
) -> Result<SegmentScore> {
    let super::ModelSpec::Pt(c) = &model.spec else {
        return Err(Error::Config("position offsets need a transformer".into()));
    };
    model.check_segment(seg)?;
    let batch = SegmentBatch::new(&[seg])?;
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &model.params, false);
    let out = forward_at(c, &mut tape, &bound, &batch, Mode::Eval, offset)?;
    let rewards = tape.value(out.rewards).data().to_vec();
    Ok(SegmentScore {
        score: tape.value(out.scores).data()[0],
        attribution: Some(super::RewardAttribution {
            rewards: rewards.clone(),
            weights: tape.value(out.weights.unwrap()).data().to_vec(),
            outputs: tape.value(out.outputs.unwrap()).data().to_vec(),
        }),
        rewards,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{causal_hidden, ModelSpec, RewardModel, Segment};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> TransformerConfig {
        TransformerConfig {
            embed_dim: 8,
            num_heads: 2,
            segment_len: 6,
            dropout: 0.0,
            ..TransformerConfig::default()
        }
    }

    fn dims() -> InputDims {
        InputDims {
            state_dim: 2,
            action_dim: 3,
        }
    }

    fn random_segment(rng: &mut ChaCha8Rng, len: usize) -> Segment {
        let states = (0..len).map(|_| vec![rng.random(), rng.random()]).collect();
        let actions = (0..len)
            .map(|_| {
                let k = rng.random_range(0..3);
                (0..3).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
            })
            .collect();
        Segment::new("test", 0, 0, states, actions).unwrap()
    }

    /// Model with every parameter randomized, including the value head.
    fn randomized(c: TransformerConfig, seed: u64) -> RewardModel {
        let mut m = RewardModel::new(ModelSpec::Pt(c), dims(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for (_, t) in m.params.iter_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        m
    }

    #[test]
    fn rejects_indivisible_heads() {
        let c = TransformerConfig {
            embed_dim: 10,
            num_heads: 4,
            ..tiny()
        };
        assert!(RewardModel::new(ModelSpec::Pt(c), dims(), 0).is_err());
    }

    #[test]
    fn single_step_tokens_share_positional_row() {
        let c = tiny();
        let mut m = RewardModel::new(ModelSpec::Pt(c.clone()), dims(), 1).unwrap();
        // Zero linears: both tokens are LN(bias) + pos[0] = pos[0].
        for (name, t) in m.params.iter_mut() {
            if name.starts_with("embed.state.") || name.starts_with("embed.action.") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let seg = Segment::new("t", 0, 0, vec![vec![0.0, 0.0]], vec![vec![0.0; 3]]).unwrap();
        let batch = SegmentBatch::new(&[&seg]).unwrap();
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &m.params, false);
        let tok = embed_segment(&c, &mut tape, &bound, &batch, 0).unwrap();
        let v = tape.value(tok);
        assert_eq!(v.shape(), &[1, 2, 8]);
        let pos = &m.params.get("embed.pos").unwrap().data()[..8];
        assert_eq!(&v.data()[..8], pos);
        assert_eq!(&v.data()[8..], pos);
    }

    #[test]
    fn zero_value_head_scores_zero() {
        let m = RewardModel::new(ModelSpec::Pt(tiny()), dims(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let seg = random_segment(&mut rng, 5);
        let s = m.score(&seg).unwrap();
        assert_eq!(s.score, 0.0);
        assert!(s.rewards.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn one_step_segment_has_unit_weight() {
        let m = randomized(tiny(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seg = random_segment(&mut rng, 1);
        let s = m.score(&seg).unwrap();
        let a = s.attribution.unwrap();
        assert_eq!(a.weights, vec![1.0]);
        assert_eq!(a.outputs[0], a.rewards[0]);
        assert_eq!(s.score, a.rewards[0]);
    }

    #[test]
    fn zeroed_query_key_gives_uniform_weights() {
        let mut m = randomized(tiny(), 5);
        for (name, t) in m.params.iter_mut() {
            if name.starts_with("pref.query") || name.starts_with("pref.key") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seg = random_segment(&mut rng, 6);
        let s = m.score(&seg).unwrap();
        let a = s.attribution.unwrap();
        assert!(a.weights.iter().all(|&w| (w - 1.0 / 6.0).abs() < 1e-15));
        let mean = a.rewards.iter().sum::<f64>() / 6.0;
        assert!((s.score - mean).abs() < 1e-12);
    }

    #[test]
    fn weights_form_probability_vector_and_match_outputs() {
        let m = randomized(tiny(), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let seg = random_segment(&mut rng, 6);
            let s = m.score(&seg).unwrap();
            let a = s.attribution.unwrap();
            assert!(a.weights.iter().all(|&w| w >= 0.0));
            assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((a.mean_output() - a.weighted_sum()).abs() < 1e-12);
            assert!((s.score - a.mean_output()).abs() < 1e-15);
            let lo = a.rewards.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = a.rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(a.outputs.iter().all(|&z| z >= lo - 1e-12 && z <= hi + 1e-12));
        }
    }

    #[test]
    fn last_step_perturbation_leaves_earlier_hidden_states_bitwise() {
        let m = randomized(tiny(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seg = random_segment(&mut rng, 6);
        let base = causal_hidden(&m, &seg).unwrap();
        let mut moved = seg.clone();
        moved.states[5].iter_mut().for_each(|v| *v += 10.0);
        moved.actions[5].iter_mut().for_each(|v| *v += 10.0);
        let after = causal_hidden(&m, &moved).unwrap();
        assert_eq!(base[..5], after[..5]);
        assert_ne!(base[5], after[5]);
    }

    #[test]
    fn unmasked_ablation_leaks_the_future() {
        let c = TransformerConfig {
            attention_mask: AttentionMask::Full,
            ..tiny()
        };
        let m = randomized(c, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let seg = random_segment(&mut rng, 6);
        let base = causal_hidden(&m, &seg).unwrap();
        let mut moved = seg.clone();
        moved.states[5].iter_mut().for_each(|v| *v += 10.0);
        let after = causal_hidden(&m, &moved).unwrap();
        assert_ne!(base[0], after[0]);
    }

    #[test]
    fn dropout_only_in_training() {
        let c = TransformerConfig {
            dropout: 0.5,
            ..tiny()
        };
        let m = randomized(c.clone(), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let seg = random_segment(&mut rng, 4);
        let batch = SegmentBatch::new(&[&seg]).unwrap();
        let run = |mode: Mode<'_>| {
            let mut tape = Tape::new();
            let bound = Bound::new(&mut tape, &m.params, false);
            let out = forward(&c, &mut tape, &bound, &batch, mode).unwrap();
            tape.value(out.scores).data()[0]
        };
        let eval_a = run(Mode::Eval);
        let eval_b = run(Mode::Eval);
        assert_eq!(eval_a, eval_b);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let train_a = run(Mode::Train(&mut r1));
        let train_b = run(Mode::Train(&mut r2));
        assert_eq!(train_a, train_b);
        assert_ne!(train_a, eval_a);
    }
}
