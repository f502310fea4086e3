//! Reverse-mode gradients against central differences, op by op and for
//! whole reward models.

mod common;

use common::*;
use pref_transformer::env::Env;
use pref_transformer::model::{LstmConfig, MlpConfig, ModelSpec};
use pref_transformer::tape::Tape;
use pref_transformer::tensor::Tensor;
use proptest::prelude::*;

const TOL: f64 = 1e-4;

fn dims(max: usize) -> impl Strategy<Value = usize> {
    1..=max
}

/// Keeps entries away from the ReLU kink.
fn off_kink(mut t: Tensor) -> Tensor {
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = v.signum() * (0.05 + v.abs()));
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_batched_and_shared(b in dims(3), m in dims(4), k in dims(4), n in dims(4), seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_tensor(&[b, m, k], &mut r);
        let w = random_tensor(&[k, n], &mut r);
        let w3 = random_tensor(&[b, k, n], &mut r);
        let shared = op_grad_error(&[a.clone(), w], seed, |t, v| t.matmul(v[0], v[1]).unwrap());
        let batched = op_grad_error(&[a, w3], seed, |t, v| t.matmul(v[0], v[1]).unwrap());
        prop_assert!(shared < TOL, "shared {shared}");
        prop_assert!(batched < TOL, "batched {batched}");
    }

    #[test]
    fn transpose(b in dims(3), m in dims(4), n in dims(4), seed in any::<u64>()) {
        let a = random_tensor(&[b, m, n], &mut rng(seed));
        prop_assert!(op_grad_error(&[a], seed, |t, v| t.transpose(v[0]).unwrap()) < TOL);
    }

    #[test]
    fn broadcast_arithmetic(b in dims(3), m in dims(4), n in dims(4), seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_tensor(&[b, m, n], &mut r);
        let full = random_tensor(&[b, m, n], &mut r);
        let row = random_tensor(&[n], &mut r);
        for other in [full, row] {
            let ins = [a.clone(), other];
            prop_assert!(op_grad_error(&ins, seed, |t, v| t.add(v[0], v[1]).unwrap()) < TOL);
            prop_assert!(op_grad_error(&ins, seed, |t, v| t.sub(v[0], v[1]).unwrap()) < TOL);
            prop_assert!(op_grad_error(&ins, seed, |t, v| t.mul(v[0], v[1]).unwrap()) < TOL);
        }
    }

    #[test]
    fn pointwise(m in dims(5), n in dims(5), seed in any::<u64>()) {
        let a = off_kink(random_tensor(&[m, n], &mut rng(seed)).map_scale(3.0));
        prop_assert!(op_grad_error(&[a.clone()], seed, |t, v| t.relu(v[0])) < TOL);
        prop_assert!(op_grad_error(&[a.clone()], seed, |t, v| t.gelu(v[0])) < TOL);
        prop_assert!(op_grad_error(&[a.clone()], seed, |t, v| t.tanh(v[0])) < TOL);
        prop_assert!(op_grad_error(&[a.clone()], seed, |t, v| t.sigmoid(v[0])) < TOL);
        prop_assert!(op_grad_error(&[a], seed, |t, v| t.affine(v[0], -1.7, 0.3)) < TOL);
    }

    #[test]
    fn softmax_any_axis(b in dims(3), m in dims(4), n in dims(4), axis in 0usize..3, seed in any::<u64>()) {
        let a = random_tensor(&[b, m, n], &mut rng(seed)).map_scale(4.0);
        prop_assert!(op_grad_error(&[a], seed, |t, v| t.softmax(v[0], axis).unwrap()) < TOL);
    }

    #[test]
    fn causal_masked_softmax(b in dims(3), n in dims(5), seed in any::<u64>()) {
        let a = random_tensor(&[b, n, n], &mut rng(seed)).map_scale(4.0);
        prop_assert!(op_grad_error(&[a], seed, |t, v| t.masked_softmax(v[0], |i, j| j <= i).unwrap()) < TOL);
    }

    #[test]
    fn layer_norm(b in dims(3), m in dims(3), d in 2usize..=6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = random_tensor(&[b, m, d], &mut r).map_scale(2.0);
        let g = random_tensor(&[d], &mut r);
        let bias = random_tensor(&[d], &mut r);
        prop_assert!(op_grad_error(&[x, g, bias], seed, |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap()) < TOL);
    }

    #[test]
    fn slicing_and_concatenation(m in dims(4), n in 2usize..=6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_tensor(&[m, n], &mut r);
        let c = random_tensor(&[m, 3], &mut r);
        prop_assert!(op_grad_error(&[a.clone()], seed, |t, v| t.slice_last(v[0], 1, n - 1).unwrap()) < TOL);
        prop_assert!(op_grad_error(&[a, c], seed, |t, v| t.concat_last(&[v[0], v[1]]).unwrap()) < TOL);
    }

    #[test]
    fn row_gather_and_interleave(b in dims(3), rows in dims(4), d in dims(4), seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_tensor(&[b, rows, d], &mut r);
        let c = random_tensor(&[b, rows, d], &mut r);
        let index: Vec<usize> = (0..rows + 2).map(|i| (i * 7 + 3) % rows).collect();
        prop_assert!(op_grad_error(&[a.clone()], seed, |t, v| t.gather_rows(v[0], &index).unwrap()) < TOL);
        prop_assert!(op_grad_error(&[a, c], seed, |t, v| t.interleave_rows(v[0], v[1]).unwrap()) < TOL);
    }

    #[test]
    fn reductions_and_reshape(b in dims(3), m in dims(4), n in dims(4), axis in 0usize..3, seed in any::<u64>()) {
        let a = random_tensor(&[b, m, n], &mut rng(seed));
        prop_assert!(op_grad_error(&[a.clone()], seed, |t, v| t.sum_axis(v[0], axis).unwrap()) < TOL);
        prop_assert!(op_grad_error(&[a.clone()], seed, |t, v| t.mean_axis(v[0], axis).unwrap()) < TOL);
        prop_assert!(op_grad_error(&[a], seed, |t, v| t.reshape(v[0], vec![b * m, n]).unwrap()) < TOL);
    }

    #[test]
    fn pair_cross_entropy(n in dims(6), seed in any::<u64>()) {
        let mut r = rng(seed);
        let l0 = random_tensor(&[n], &mut r).map_scale(3.0);
        let l1 = random_tensor(&[n], &mut r).map_scale(3.0);
        let labels: Vec<f64> = (0..n).map(|i| [0.0, 0.5, 1.0][(i + seed as usize) % 3]).collect();
        prop_assert!(op_grad_error(&[l0, l1], seed, |t, v| t.pair_cross_entropy(v[0], v[1], &labels).unwrap()) < TOL);
    }
}

trait MapScale {
    fn map_scale(self, s: f64) -> Self;
}

impl MapScale for Tensor {
    fn map_scale(mut self, s: f64) -> Self {
        self.data_mut().iter_mut().for_each(|v| *v *= s);
        self
    }
}

#[test]
fn matmul_sum_gradient_is_ones_times_b_transposed() {
    let mut r = rng(11);
    let a = random_tensor(&[3, 4], &mut r);
    let b = random_tensor(&[4, 2], &mut r);
    let mut tape = Tape::new();
    let va = tape.param(&a);
    let vb = tape.param(&b);
    let c = tape.matmul(va, vb).unwrap();
    let loss = tape.sum(c);
    let g = tape.backward(loss).unwrap();
    let ga = g.get(va).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let expect: f64 = (0..2).map(|j| b.data()[k * 2 + j]).sum();
            assert!((ga[i * 4 + k] - expect).abs() < 1e-12);
        }
    }
    assert!(op_grad_error(&[a, b], 1, |t, v| t.matmul(v[0], v[1]).unwrap()) < 1e-5);
}

#[test]
fn mlp_reward_model_gradients() {
    let env = Env::grid_nav();
    let (_, recs) = scripted(&env, 20, 6, 5, 3);
    let m = model(ModelSpec::Mr(MlpConfig { hidden: vec![6, 5] }), 4);
    let (err, n) = model_grad_error(&m, &recs);
    assert!(n > 0);
    assert!(err < TOL, "worst relative error {err}");
}

#[test]
fn lstm_reward_model_gradients() {
    let env = Env::key_door();
    let (_, recs) = scripted(&env, 20, 4, 6, 5);
    let m = model(
        ModelSpec::Nmr(LstmConfig {
            embed_dim: 4,
            hidden_dim: 3,
        }),
        6,
    );
    let (err, _) = model_grad_error(&m, &recs);
    assert!(err < TOL, "worst relative error {err}");
}
