//! Finite-difference gradient checks for every differentiable tape op, plus
//! the naive-summation convolution oracle. The op suites live in
//! `common::suite` so the acceptance gate can run them too.

mod common;

use common::{rand_tensor, suite};
use cyclesteg::kernels::PadMode;
use cyclesteg::tape::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CASES: usize = 20;

#[test]
fn conv2d_matches_naive_oracle() {
    suite::conv_matches_oracle(CASES);
}

#[test]
fn conv2d_fixed_example_matches_oracle() {
    // random [3,8,8] input and [4,3,3,3] kernel from the contract
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let x = rand_tensor(&mut rng, &[3, 8, 8], -1.0, 1.0);
    let k = rand_tensor(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let kv = tape.leaf(k.clone(), false);
    let y = tape.conv2d(xv, kv, 1, 1, PadMode::Zero).unwrap();
    let oracle = common::naive_conv2d(&x, &k, 1, 1, PadMode::Zero);
    for (a, b) in tape.value(y).data().iter().zip(oracle.data()) {
        let denom = a.abs().max(b.abs()).max(1e-9);
        assert!((a - b).abs() / denom <= 1e-12);
    }
}

#[test]
fn conv2d_gradients() {
    suite::conv2d_grads(CASES);
}

#[test]
fn conv_transpose2d_gradients() {
    suite::conv_transpose_grads(CASES);
}

#[test]
fn instance_norm_gradients() {
    suite::instance_norm_grads(CASES);
}

#[test]
fn elementwise_op_gradients() {
    suite::elementwise_grads(CASES);
}

#[test]
fn structural_op_gradients() {
    suite::structural_grads(CASES);
}

#[test]
fn loss_op_gradients() {
    suite::loss_grads(CASES);
}

#[test]
fn forward_backward_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = rand_tensor(&mut rng, &[2, 6, 6], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
        let mut tape = Tape::new();
        let xv = tape.leaf(x, true);
        let kv = tape.leaf(k, true);
        let y = tape.conv2d(xv, kv, 1, 1, PadMode::Reflect).unwrap();
        let y = tape.tanh(y);
        let l = tape.sum(y);
        let out = tape.value(y).clone();
        let grads = tape.backward(l).unwrap();
        (out, grads.get(xv).unwrap().clone(), grads.get(kv).unwrap().clone())
    };
    let (o1, gx1, gk1) = run();
    let (o2, gx2, gk2) = run();
    assert_eq!(o1, o2);
    assert_eq!(gx1, gx2);
    assert_eq!(gk1, gk2);
}
