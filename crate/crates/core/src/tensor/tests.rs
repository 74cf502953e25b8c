use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    // keep values away from the relu kink and from each other
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.5);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Contracts the op output with a fixed random tensor so every output
/// coordinate contributes a distinct weight to the checked scalar.
fn project(tape: &mut Tape, out: Var, seed: u64) -> crate::Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rand_tensor(&mut rng, &shape);
    let r = tape.constant(r);
    let m = tape.mul(out, r)?;
    tape.sum(m)
}

/// Checks the gradient of `kind` with respect to input `which`.
fn check(kind: OpKind, inputs: &[Tensor], which: usize) -> GradCheckReport {
    let others = inputs.to_vec();
    let kind2 = kind.clone();
    grad_check(
        move |tape, x| {
            let vars: Vec<Var> = others
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    if i == which {
                        x
                    } else {
                        tape.constant(t.clone())
                    }
                })
                .collect();
            let out = tape.apply(kind2.clone(), &vars)?;
            if tape.value(out).is_scalar() {
                Ok(out)
            } else {
                project(tape, out, 99)
            }
        },
        &inputs[which],
        1e-5,
        1e-4,
    )
    .unwrap()
}

fn assert_all_inputs(kind: OpKind, inputs: &[Tensor]) {
    for which in 0..inputs.len() {
        let r = check(kind.clone(), inputs, which);
        assert!(r.passed, "{} input {which}: {r:?}", kind.name());
    }
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
    assert_eq!(tape.shape(c), &[2, 1]);

    let m = Tensor::new(&[3, 3], (0..9).map(|i| i as f64 * 0.5 - 1.0).collect()).unwrap();
    let i3 = tape.constant(Tensor::eye(3));
    let mv = tape.constant(m.clone());
    let out = tape.matmul(i3, mv).unwrap();
    assert_eq!(tape.value(out), &m);
}

#[test]
fn relu_example() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, Error::ShapeMismatch { .. }));
}

#[test]
fn non_finite_output_rejected() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(&[1], vec![1e300]).unwrap());
    let err = tape.mul(a, a).unwrap_err();
    assert!(matches!(err, Error::NonFinite { op: "mul" }));
}

#[test]
fn backward_examples() {
    // sum(x) -> ones
    let mut tape = Tape::new();
    let x = tape.leaf(
        Tensor::new(&[2, 2], vec![1.0, -2.0, 3.0, 0.5])
            .unwrap()
            .with_requires_grad(),
    );
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);

    // sum(x^2) at [1,2] -> [2,4]
    let mut tape = Tape::new();
    let x = tape.leaf(
        Tensor::new(&[2], vec![1.0, 2.0])
            .unwrap()
            .with_requires_grad(),
    );
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);

    // sum(relu(x)) at [-1,3] -> [0,1]
    let mut tape = Tape::new();
    let x = tape.leaf(
        Tensor::new(&[2], vec![-1.0, 3.0])
            .unwrap()
            .with_requires_grad(),
    );
    let r = tape.relu(x).unwrap();
    let s = tape.sum(r).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[1], vec![0.0]).unwrap().with_requires_grad());
    let r = tape.relu(x).unwrap();
    let s = tape.sum(r).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0]);
}

#[test]
fn max_ties_route_to_first_index() {
    let mut tape = Tape::new();
    let x = tape.leaf(
        Tensor::new(&[1, 3], vec![2.0, 2.0, 1.0])
            .unwrap()
            .with_requires_grad(),
    );
    let m = tape.max_axis(x, 1).unwrap();
    tape.backward(m).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar_and_foreign_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]).with_requires_grad());
    assert!(tape.backward(x).is_err());
    let mut other = Tape::new();
    let y = other.leaf(Tensor::scalar(1.0));
    assert!(tape.backward(y).is_err());
}

#[test]
fn repeated_backward_accumulates() {
    let mut tape = Tape::new();
    let x = tape.leaf(
        Tensor::new(&[2], vec![1.0, 2.0])
            .unwrap()
            .with_requires_grad(),
    );
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward(s).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0]);
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = rand_tensor(&mut rng, &[3, 4]);
    let w0 = rand_tensor(&mut rng, &[4, 2]);
    let build = |tape: &mut Tape| {
        let x = tape.leaf(x0.clone().with_requires_grad());
        let w = tape.constant(w0.clone());
        let h = tape.matmul(x, w).unwrap();
        let l1 = {
            let r = tape.relu(h).unwrap();
            tape.sum(r).unwrap()
        };
        let l2 = {
            let t = tape.tanh(h).unwrap();
            let sq = tape.mul(t, t).unwrap();
            tape.sum(sq).unwrap()
        };
        (x, l1, l2)
    };
    let mut t1 = Tape::new();
    let (x1, a, _) = build(&mut t1);
    t1.backward(a).unwrap();
    let mut t2 = Tape::new();
    let (x2, _, b) = build(&mut t2);
    t2.backward(b).unwrap();
    let mut t3 = Tape::new();
    let (x3, a3, b3) = build(&mut t3);
    let both = t3.add(a3, b3).unwrap();
    t3.backward(both).unwrap();
    for i in 0..12 {
        let sum = t1.grad(x1).unwrap()[i] + t2.grad(x2).unwrap()[i];
        assert!((t3.grad(x3).unwrap()[i] - sum).abs() < 1e-12);
    }
}

#[test]
fn ops_are_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[2, 6, 6, 3]);
    let w = rand_tensor(&mut rng, &[27, 5]);
    let run = || {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let y = tape.conv2d(xv, wv, 3, 2, 1).unwrap();
        tape.value(y).clone()
    };
    let a = run();
    let b = run();
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn conv2d_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, h, w, c, co, k, s, p) = (1, 5, 4, 2, 3, 3, 2, 1);
    let x = rand_tensor(&mut rng, &[b, h, w, c]);
    let wt = rand_tensor(&mut rng, &[k * k * c, co]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(wt.clone());
    let y = tape.conv2d(xv, wv, k, s, p).unwrap();
    let (oh, ow) = ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1);
    assert_eq!(tape.shape(y), &[b, oh, ow, co]);
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..co {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        let ix = (ox * s + kx) as isize - p as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..c {
                            let xi = x.data()[((iy as usize) * w + ix as usize) * c + ci];
                            let wi = wt.data()[((ky * k + kx) * c + ci) * co + o];
                            acc += xi * wi;
                        }
                    }
                }
                let got = tape.value(y).data()[(oy * ow + ox) * co + o];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn strided_conv_requires_divisible_extents() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 4, 1]));
    let w = tape.constant(Tensor::zeros(&[4, 1]));
    assert!(tape.strided_conv2d(x, w, 2).is_err());
}

#[test]
fn scatter_max_empty_rows_are_zero() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[2, 1], vec![-3.0, -1.0]).unwrap());
    let y = tape.scatter_max_rows(x, vec![0, 0], 2).unwrap();
    assert_eq!(tape.value(y).data(), &[-1.0, 0.0]);
}

#[test]
fn log_softmax_rows_normalize() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap());
    let y = tape.log_softmax(x).unwrap();
    for r in 0..2 {
        let s: f64 = tape.value(y).row(r).iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

/// Every op kind passes the finite-difference check on 10 random shapes.
#[test]
fn every_op_kind_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..10 {
        let d = |rng: &mut ChaCha8Rng| rng.gen_range(1..=4usize);
        let (m, k, n) = (d(&mut rng), d(&mut rng), d(&mut rng));

        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = rand_tensor(&mut rng, &if ta { [k, m] } else { [m, k] });
            let b = rand_tensor(&mut rng, &if tb { [n, k] } else { [k, n] });
            assert_all_inputs(
                OpKind::MatMul {
                    trans_a: ta,
                    trans_b: tb,
                },
                &[a, b],
            );
        }

        let (bsz, c, co) = (rng.gen_range(1..=2), d(&mut rng), d(&mut rng));
        let kern = rng.gen_range(1..=3usize);
        let stride = rng.gen_range(1..=2usize);
        let pad = rng.gen_range(0..=1usize);
        let h = rng.gen_range(kern.max(2)..=5);
        let w = rng.gen_range(kern.max(2)..=5);
        let x = rand_tensor(&mut rng, &[bsz, h, w, c]);
        let wt = rand_tensor(&mut rng, &[kern * kern * c, co]);
        assert_all_inputs(
            OpKind::Conv2d {
                kernel: kern,
                stride,
                pad,
            },
            &[x, wt],
        );

        let s = rng.gen_range(1..=2usize);
        let x = rand_tensor(&mut rng, &[bsz, 2 * s, 2 * s, c]);
        let wt = rand_tensor(&mut rng, &[s * s * c, co]);
        assert_all_inputs(OpKind::StridedConv2d { stride: s }, &[x, wt]);

        let t = rng.gen_range(3..=7usize);
        let x = rand_tensor(&mut rng, &[t, c]);
        let wt = rand_tensor(&mut rng, &[3 * c, co]);
        assert_all_inputs(OpKind::Conv1d { kernel: 3, pad: 1 }, &[x, wt]);

        let shape = [m, n];
        for kind in [OpKind::Add, OpKind::Sub, OpKind::Mul] {
            let a = rand_tensor(&mut rng, &shape);
            let b = rand_tensor(&mut rng, &shape);
            assert_all_inputs(kind.clone(), &[a.clone(), b]);
            let bias = rand_tensor(&mut rng, &[n]);
            assert_all_inputs(kind, &[a, bias]);
        }

        for kind in [
            OpKind::Scale(-1.7),
            OpKind::Relu,
            OpKind::Sigmoid,
            OpKind::Tanh,
            OpKind::Exp,
            OpKind::LogSoftmax,
            OpKind::SumAll,
        ] {
            let a = rand_tensor(&mut rng, &shape);
            assert_all_inputs(kind, &[a]);
        }

        let cube = [m, k, n];
        for axis in 0..3 {
            let a = rand_tensor(&mut rng, &cube);
            assert_all_inputs(OpKind::MaxOverAxis { axis }, std::slice::from_ref(&a));
            assert_all_inputs(OpKind::MeanOverAxis { axis }, &[a]);
        }

        let a = rand_tensor(&mut rng, &[m, n]);
        let b = rand_tensor(&mut rng, &[k, n]);
        assert_all_inputs(OpKind::Concat { axis: 0 }, &[a.clone(), b]);
        let b = rand_tensor(&mut rng, &[m, k]);
        assert_all_inputs(OpKind::Concat { axis: 1 }, &[a.clone(), b]);

        let idx: Vec<usize> = (0..rng.gen_range(1..=6))
            .map(|_| rng.gen_range(0..m))
            .collect();
        assert_all_inputs(
            OpKind::GatherRows { indices: idx },
            std::slice::from_ref(&a),
        );

        let rows = rng.gen_range(1..=4usize);
        let idx: Vec<usize> = (0..m).map(|_| rng.gen_range(0..rows)).collect();
        assert_all_inputs(
            OpKind::ScatterAddRows {
                indices: idx.clone(),
                rows,
            },
            std::slice::from_ref(&a),
        );
        assert_all_inputs(
            OpKind::ScatterMaxRows { indices: idx, rows },
            std::slice::from_ref(&a),
        );

        assert_all_inputs(OpKind::Reshape { shape: vec![m * n] }, &[a]);

        let steps = rng.gen_range(2..=5usize);
        let classes = rng.gen_range(2..=4usize);
        let len = rng.gen_range(0..=(steps / 2));
        let target: Vec<usize> = (0..len).map(|_| rng.gen_range(1..classes)).collect();
        let lp = rand_tensor(&mut rng, &[steps, classes]);
        let r = check(
            OpKind::CtcLoss {
                target: target.clone(),
            },
            &[lp],
            0,
        );
        assert!(r.passed, "ctc trial {trial} target {target:?}: {r:?}");
    }
}
