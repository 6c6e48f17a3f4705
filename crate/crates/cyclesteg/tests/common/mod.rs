//! Shared test oracles: naive convolution and finite-difference gradients.
//! These stay independent of the tape's backward path.

#![allow(dead_code)]

use cyclesteg::kernels::PadMode;
use cyclesteg::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Direct quadruple-loop cross-correlation, no im2col.
pub fn naive_conv2d(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
    mode: PadMode,
) -> Tensor {
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (cout, kh, kw) = (kernels.shape()[0], kernels.shape()[2], kernels.shape()[3]);
    assert_eq!(kernels.shape()[1], cin);
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    assert_eq!((h + 2 * padding - kh) % stride, 0);
    let fetch = |c: usize, y: isize, x: isize| -> f64 {
        let map = |t: isize, n: usize| -> Option<usize> {
            if t >= 0 && (t as usize) < n {
                Some(t as usize)
            } else {
                match mode {
                    PadMode::Zero => None,
                    PadMode::Reflect => {
                        let m = if t < 0 { -t } else { 2 * (n as isize - 1) - t };
                        Some(m as usize)
                    }
                }
            }
        };
        match (map(y, h), map(x, w)) {
            (Some(yy), Some(xx)) => input.data()[(c * h + yy) * w + xx],
            _ => 0.0,
        }
    };
    let mut out = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for u in 0..kh {
                        for v in 0..kw {
                            let y = (oh * stride + u) as isize - padding as isize;
                            let x = (ow * stride + v) as isize - padding as isize;
                            acc += fetch(ci, y, x)
                                * kernels.data()[((co * cin + ci) * kh + u) * kw + v];
                        }
                    }
                }
                out[(co * ho + oh) * wo + ow] = acc;
            }
        }
    }
    Tensor::new(vec![cout, ho, wo], out).unwrap()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Central finite differences of a scalar function of several tensors,
/// compared against analytic gradients at relative tolerance `rtol`.
pub fn check_grads(
    inputs: &[Tensor],
    f: &dyn Fn(&[Tensor]) -> f64,
    analytic: &[Option<Tensor>],
    step: f64,
    rtol: f64,
    label: &str,
) {
    for (ti, t) in inputs.iter().enumerate() {
        let Some(an) = &analytic[ti] else { continue };
        assert_eq!(an.shape(), t.shape(), "{label}: grad shape");
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[j] -= step;
            let fd = (f(&plus) - f(&minus)) / (2.0 * step);
            let a = an.data()[j];
            let denom = fd.abs().max(a.abs()).max(1e-6);
            assert!(
                (fd - a).abs() / denom <= rtol,
                "{label}: input {ti} elem {j}: fd {fd} vs analytic {a}"
            );
        }
    }
}

/// The full differentiable-op suite, shared by the per-op tests and the
/// acceptance gate: finite differences at step 1e-4 / rtol 1e-4, plus the
/// naive-summation convolution oracle at 1e-12.
pub mod suite {
    use super::*;
    use cyclesteg::tape::{Tape, VarId};
    use rand::SeedableRng;

    pub const FD_STEP: f64 = 1e-4;
    pub const FD_RTOL: f64 = 1e-4;

    fn reduce_loss(tape: &mut Tape, out: VarId, target: &Tensor) -> VarId {
        let t = tape.leaf(target.clone(), false);
        tape.mse_loss(out, t).unwrap()
    }

    pub fn conv_matches_oracle(cases: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for case in 0..cases {
            let (mode, stride, padding, h) = match case % 4 {
                0 => (PadMode::Zero, 1, 1, 8),
                1 => (PadMode::Reflect, 1, 1, 8),
                2 => (PadMode::Zero, 2, 1, 9),
                _ => (PadMode::Reflect, 1, 2, 7),
            };
            let cin = rng.gen_range(1..4);
            let cout = rng.gen_range(1..5);
            let x = rand_tensor(&mut rng, &[cin, h, h], -1.0, 1.0);
            let k = rand_tensor(&mut rng, &[cout, cin, 3, 3], -1.0, 1.0);
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), false);
            let kv = tape.leaf(k.clone(), false);
            let y = tape.conv2d(xv, kv, stride, padding, mode).unwrap();
            let oracle = naive_conv2d(&x, &k, stride, padding, mode);
            assert_eq!(tape.value(y).shape(), oracle.shape());
            for (a, b) in tape.value(y).data().iter().zip(oracle.data()) {
                let denom = a.abs().max(b.abs()).max(1e-9);
                assert!((a - b).abs() / denom <= 1e-12, "case {case}: {a} vs {b}");
            }
        }
    }

    pub fn conv2d_grads(cases: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for case in 0..cases {
            let (mode, stride, padding, h) = match case % 4 {
                0 => (PadMode::Zero, 1, 1, 5),
                1 => (PadMode::Reflect, 1, 1, 5),
                2 => (PadMode::Zero, 2, 1, 5),
                _ => (PadMode::Reflect, 1, 0, 5),
            };
            let x = rand_tensor(&mut rng, &[2, h, h], -1.0, 1.0);
            let k = rand_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
            let hout = (h + 2 * padding - 3) / stride + 1;
            let target = rand_tensor(&mut rng, &[2, hout, hout], -1.0, 1.0);
            let f = |ins: &[Tensor]| {
                let mut tape = Tape::new();
                let xv = tape.leaf(ins[0].clone(), false);
                let kv = tape.leaf(ins[1].clone(), false);
                let y = tape.conv2d(xv, kv, stride, padding, mode).unwrap();
                let l = reduce_loss(&mut tape, y, &target);
                tape.value(l).item()
            };
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let kv = tape.leaf(k.clone(), true);
            let y = tape.conv2d(xv, kv, stride, padding, mode).unwrap();
            let l = reduce_loss(&mut tape, y, &target);
            let grads = tape.backward(l).unwrap();
            check_grads(
                &[x, k],
                &f,
                &[grads.get(xv).cloned(), grads.get(kv).cloned()],
                FD_STEP,
                FD_RTOL,
                &format!("conv2d case {case}"),
            );
        }
    }

    pub fn conv_transpose_grads(cases: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for case in 0..cases {
            let x = rand_tensor(&mut rng, &[2, 4, 4], -1.0, 1.0);
            let k = rand_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
            let target = rand_tensor(&mut rng, &[3, 8, 8], -1.0, 1.0);
            let f = |ins: &[Tensor]| {
                let mut tape = Tape::new();
                let xv = tape.leaf(ins[0].clone(), false);
                let kv = tape.leaf(ins[1].clone(), false);
                let y = tape.conv_transpose2d(xv, kv, 2, 1).unwrap();
                let l = reduce_loss(&mut tape, y, &target);
                tape.value(l).item()
            };
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let kv = tape.leaf(k.clone(), true);
            let y = tape.conv_transpose2d(xv, kv, 2, 1).unwrap();
            let l = reduce_loss(&mut tape, y, &target);
            let grads = tape.backward(l).unwrap();
            check_grads(
                &[x, k],
                &f,
                &[grads.get(xv).cloned(), grads.get(kv).cloned()],
                FD_STEP,
                FD_RTOL,
                &format!("convT case {case}"),
            );
        }
    }

    pub fn instance_norm_grads(cases: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in 0..cases {
            let x = rand_tensor(&mut rng, &[2, 4, 4], -1.0, 1.0);
            let gamma = rand_tensor(&mut rng, &[2], 0.5, 1.5);
            let beta = rand_tensor(&mut rng, &[2], -0.5, 0.5);
            let target = rand_tensor(&mut rng, &[2, 4, 4], -1.0, 1.0);
            let f = |ins: &[Tensor]| {
                let mut tape = Tape::new();
                let xv = tape.leaf(ins[0].clone(), false);
                let gv = tape.leaf(ins[1].clone(), false);
                let bv = tape.leaf(ins[2].clone(), false);
                let y = tape.instance_norm(xv, gv, bv, 1e-5).unwrap();
                let l = reduce_loss(&mut tape, y, &target);
                tape.value(l).item()
            };
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let gv = tape.leaf(gamma.clone(), true);
            let bv = tape.leaf(beta.clone(), true);
            let y = tape.instance_norm(xv, gv, bv, 1e-5).unwrap();
            let l = reduce_loss(&mut tape, y, &target);
            let grads = tape.backward(l).unwrap();
            check_grads(
                &[x, gamma, beta],
                &f,
                &[
                    grads.get(xv).cloned(),
                    grads.get(gv).cloned(),
                    grads.get(bv).cloned(),
                ],
                FD_STEP,
                FD_RTOL,
                &format!("instance_norm case {case}"),
            );
        }
    }

    pub fn elementwise_grads(cases: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for case in 0..cases {
            // keep leaky-relu inputs away from the kink at 0
            let x = Tensor::from_fn(&[2, 3, 3], |_| {
                let v: f64 = rng.gen_range(0.05..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            });
            let target = rand_tensor(&mut rng, &[2, 3, 3], -1.0, 1.0);
            for op in 0..4 {
                let apply = |tape: &mut Tape, v: VarId| match op {
                    0 => tape.leaky_relu(v, 0.2),
                    1 => tape.tanh(v),
                    2 => tape.scale(v, -1.7),
                    _ => tape.avg_pool2(v).unwrap(),
                };
                let tgt = if op == 3 {
                    rand_tensor(&mut rng, &[2, 1, 1], -1.0, 1.0)
                } else {
                    target.clone()
                };
                // avg_pool needs even extents
                let xin = if op == 3 {
                    rand_tensor(&mut rng, &[2, 2, 2], -1.0, 1.0)
                } else {
                    x.clone()
                };
                let f = |ins: &[Tensor]| {
                    let mut tape = Tape::new();
                    let xv = tape.leaf(ins[0].clone(), false);
                    let y = apply(&mut tape, xv);
                    let l = reduce_loss(&mut tape, y, &tgt);
                    tape.value(l).item()
                };
                let mut tape = Tape::new();
                let xv = tape.leaf(xin.clone(), true);
                let y = apply(&mut tape, xv);
                let l = reduce_loss(&mut tape, y, &tgt);
                let grads = tape.backward(l).unwrap();
                check_grads(
                    &[xin],
                    &f,
                    &[grads.get(xv).cloned()],
                    FD_STEP,
                    FD_RTOL,
                    &format!("elementwise op {op} case {case}"),
                );
            }
        }
    }

    pub fn structural_grads(cases: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..cases {
            let a = rand_tensor(&mut rng, &[3, 3, 3], -1.0, 1.0);
            let b = rand_tensor(&mut rng, &[3, 3, 3], -1.0, 1.0);
            let bias = rand_tensor(&mut rng, &[3], -0.5, 0.5);
            let target = rand_tensor(&mut rng, &[3, 3, 3], -1.0, 1.0);
            let tgt_slice = rand_tensor(&mut rng, &[2, 3, 3], -1.0, 1.0);
            let f = |ins: &[Tensor]| {
                let mut tape = Tape::new();
                let av = tape.leaf(ins[0].clone(), false);
                let bv = tape.leaf(ins[1].clone(), false);
                let biasv = tape.leaf(ins[2].clone(), false);
                let s = tape.add(av, bv).unwrap();
                let s = tape.bias_add(s, biasv).unwrap();
                let sl = tape.slice_channels(s, 1, 2).unwrap();
                let l1 = reduce_loss(&mut tape, s, &target);
                let l2 = reduce_loss(&mut tape, sl, &tgt_slice);
                let l = tape.add(l1, l2).unwrap();
                tape.value(l).item()
            };
            let mut tape = Tape::new();
            let av = tape.leaf(a.clone(), true);
            let bv = tape.leaf(b.clone(), true);
            let biasv = tape.leaf(bias.clone(), true);
            let s = tape.add(av, bv).unwrap();
            let s = tape.bias_add(s, biasv).unwrap();
            let sl = tape.slice_channels(s, 1, 2).unwrap();
            let l1 = reduce_loss(&mut tape, s, &target);
            let l2 = reduce_loss(&mut tape, sl, &tgt_slice);
            let l = tape.add(l1, l2).unwrap();
            let grads = tape.backward(l).unwrap();
            check_grads(
                &[a, b, bias],
                &f,
                &[
                    grads.get(av).cloned(),
                    grads.get(bv).cloned(),
                    grads.get(biasv).cloned(),
                ],
                FD_STEP,
                FD_RTOL,
                &format!("structural case {case}"),
            );
        }
    }

    pub fn loss_grads(cases: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for case in 0..cases {
            // keep |a - b| away from the L1 kink
            let b = rand_tensor(&mut rng, &[2, 3, 3], -1.0, 1.0);
            let a = Tensor::from_fn(&[2, 3, 3], |i| {
                let off: f64 = rng.gen_range(0.05..0.5);
                b.data()[i] + if rng.gen_bool(0.5) { off } else { -off }
            });
            for op in 0..4 {
                let f = |ins: &[Tensor]| {
                    let mut tape = Tape::new();
                    let av = tape.leaf(ins[0].clone(), false);
                    let bv = tape.leaf(ins[1].clone(), false);
                    let l = match op {
                        0 => tape.l1_loss(av, bv).unwrap(),
                        1 => tape.mse_loss(av, bv).unwrap(),
                        2 => tape.sum(av),
                        _ => tape.bce_with_logits(av, 1.0),
                    };
                    tape.value(l).item()
                };
                let mut tape = Tape::new();
                let av = tape.leaf(a.clone(), true);
                let bv = tape.leaf(b.clone(), true);
                let l = match op {
                    0 => tape.l1_loss(av, bv).unwrap(),
                    1 => tape.mse_loss(av, bv).unwrap(),
                    2 => tape.sum(av),
                    _ => tape.bce_with_logits(av, 1.0),
                };
                let grads = tape.backward(l).unwrap();
                check_grads(
                    &[a.clone(), b.clone()],
                    &f,
                    &[grads.get(av).cloned(), grads.get(bv).cloned()],
                    FD_STEP,
                    FD_RTOL,
                    &format!("loss op {op} case {case}"),
                );
            }
        }
    }

    /// Every op family at the given case count.
    pub fn run_all(cases: usize) {
        conv_matches_oracle(cases);
        conv2d_grads(cases);
        conv_transpose_grads(cases);
        instance_norm_grads(cases);
        elementwise_grads(cases);
        structural_grads(cases);
        loss_grads(cases);
    }
}
