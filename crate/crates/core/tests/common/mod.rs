#![allow(dead_code)]

use pref_transformer::env::{generate_dataset, Env, Trajectory};
use pref_transformer::model::{InputDims, Mode, ModelSpec, RewardModel, Segment};
use pref_transformer::preference::PreferenceRecord;
use pref_transformer::tape::{Tape, Var};
use pref_transformer::teacher::{sample_queries, ScriptedTeacher};
use pref_transformer::tensor::Tensor;
use pref_transformer::train::batch_gradients;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PROBE: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Relative error with a floor so that near-zero gradients are compared on
/// an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Reverse-mode gradient of `sum(f(inputs) ⊙ probe)` against central
/// differences. Returns the worst relative error.
pub fn op_grad_error(inputs: &[Tensor], seed: u64, f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |ins: &[Tensor], keep: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.param(t)).collect();
        let out = f(&mut tape, &vars);
        let shape = tape.value(out).shape().to_vec();
        let mut r = rng(seed ^ 0xabcdef);
        let w = tape.constant(random_tensor(&shape, &mut r));
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod);
        let value = tape.value(loss).data()[0];
        let grads = keep.then(|| {
            let g = tape.backward(loss).unwrap();
            vars.iter()
                .zip(ins)
                .map(|(&v, t)| g.get(v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
                .collect::<Vec<_>>()
        });
        (value, grads)
    };
    let (_, grads) = eval(inputs, true);
    let grads = grads.unwrap();
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += PROBE;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= PROBE;
            let fd = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * PROBE);
            worst = worst.max(rel_err(grads[i][j], fd));
        }
    }
    worst
}

/// Worst relative error between the training gradient of every parameter
/// and central differences of the eval-mode batch loss.
pub fn model_grad_error(model: &RewardModel, records: &[PreferenceRecord]) -> (f64, usize) {
    let batch: Vec<&PreferenceRecord> = records.iter().collect();
    let (_, grads) = batch_gradients(model, &batch, Mode::Eval).unwrap();
    let loss_at = |m: &RewardModel| batch_gradients(m, &batch, Mode::Eval).unwrap().0;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut probe = model.clone();
    let names: Vec<String> = model.params.names().cloned().collect();
    for name in names {
        let n = model.params.get(&name).unwrap().numel();
        for j in 0..n {
            let orig = model.params.get(&name).unwrap().data()[j];
            probe.params.get_mut(&name).unwrap().data_mut()[j] = orig + PROBE;
            let up = loss_at(&probe);
            probe.params.get_mut(&name).unwrap().data_mut()[j] = orig - PROBE;
            let down = loss_at(&probe);
            probe.params.get_mut(&name).unwrap().data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * PROBE);
            worst = worst.max(rel_err(grads[&name][j], fd));
            checked += 1;
        }
    }
    (worst, checked)
}

/// Replaces every zero-initialized head so that the model is not trivially
/// symmetric.
pub fn randomize(model: &mut RewardModel, seed: u64) {
    let mut r = rng(seed);
    for (_, t) in model.params.iter_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
        }
    }
}

pub fn dims() -> InputDims {
    InputDims {
        state_dim: 2,
        action_dim: 4,
    }
}

pub fn random_segment(len: usize, r: &mut ChaCha8Rng) -> Segment {
    let states = (0..len).map(|_| vec![r.random_range(0.0..1.0), r.random_range(0.0..1.0)]).collect();
    let actions = (0..len)
        .map(|_| {
            let mut a = vec![0.0; 4];
            a[r.random_range(0..4)] = 1.0;
            a
        })
        .collect();
    Segment::new("test", 0, 0, states, actions).unwrap()
}

pub fn model(spec: ModelSpec, seed: u64) -> RewardModel {
    let mut m = RewardModel::new(spec, dims(), seed).unwrap();
    randomize(&mut m, seed + 1);
    m
}

/// Trajectories and scripted labels.
pub fn scripted(env: &Env, episodes: usize, queries: usize, h: usize, seed: u64) -> (Vec<Trajectory>, Vec<PreferenceRecord>) {
    let trajs = generate_dataset(env, episodes, seed);
    let refs = sample_queries(&trajs, queries, h, seed + 1).unwrap();
    let recs = ScriptedTeacher::deterministic()
        .label_queries(&trajs, &refs, seed + 2)
        .unwrap();
    (trajs, recs)
}
