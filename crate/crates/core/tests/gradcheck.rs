//! Backward rules against central finite differences.

use dann_core::autodiff::{finite_diff_gradient, PoolKind, ReversalScale, Tape, Tensor};
use dann_core::seed;
use proptest::prelude::*;
use rand::Rng;

const EPS: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Elementwise relative error with denominators floored at 1e-4 so that
/// gradients that are zero up to rounding compare absolutely.
fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

/// Weighted sum of an op's output, so every output element carries a
/// distinct upstream gradient.
fn weighted(tape: &mut Tape, y: dann_core::NodeId, weights: &Tensor) -> dann_core::NodeId {
    let w = tape.leaf(weights.clone());
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

/// Checks `d loss / d inputs[which]` for a graph builder over a list of inputs.
fn check(
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[dann_core::NodeId]) -> dann_core::NodeId,
) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids);
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (which, x) in inputs.iter().enumerate() {
        let numeric = finite_diff_gradient(
            |probe| {
                let mut t = Tape::new();
                let ids: Vec<_> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, v)| t.leaf(if i == which { probe.clone() } else { v.clone() }))
                    .collect();
                let l = build(&mut t, &ids);
                t.value(l).data()[0]
            },
            x,
            EPS,
        );
        worst = worst.max(max_rel_err(grads.get(ids[which]).unwrap(), &numeric));
    }
    worst
}

#[test]
fn elementwise_ops_match_finite_differences() {
    for s in 0..20 {
        let mut rng = seed::rng(s);
        let (a, b, w) = (random(&[3, 4], &mut rng), random(&[3, 4], &mut rng), random(&[3, 4], &mut rng));
        for op in 0..5 {
            let w = w.clone();
            let err = check(&[a.clone(), b.clone()], move |t, ids| {
                let y = match op {
                    0 => t.add(ids[0], ids[1]).unwrap(),
                    1 => t.sub(ids[0], ids[1]).unwrap(),
                    2 => t.mul(ids[0], ids[1]).unwrap(),
                    3 => {
                        let r = t.relu(ids[0]);
                        t.add(r, ids[1]).unwrap()
                    }
                    _ => {
                        let sc = t.scale(ids[0], -1.7);
                        t.mul(sc, ids[1]).unwrap()
                    }
                };
                weighted(t, y, &w)
            });
            assert!(err < 1e-5, "seed {s} op {op}: {err}");
        }
    }
}

#[test]
fn matmul_matches_finite_differences() {
    for s in 0..20 {
        let mut rng = seed::rng(100 + s);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let w = random(&[3, 2], &mut rng);
        let err = check(&[a, b], |t, ids| {
            let y = t.matmul(ids[0], ids[1]).unwrap();
            weighted(t, y, &w)
        });
        assert!(err < 1e-6, "seed {s}: {err}");
    }
}

#[test]
fn conv2d_matches_finite_differences() {
    for s in 0..20 {
        let mut rng = seed::rng(200 + s);
        let x = random(&[2, 2, 6, 6], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let (stride, pad) = [(1, 0), (1, 1), (2, 1)][s as usize % 3];
        let out = (6 + 2 * pad - 3) / stride + 1;
        let w = random(&[2, 3, out, out], &mut rng);
        let err = check(&[x, k, b], |t, ids| {
            let y = t.conv2d(ids[0], ids[1], ids[2], stride, pad).unwrap();
            weighted(t, y, &w)
        });
        assert!(err < 1e-6, "seed {s}: {err}");
    }
}

#[test]
fn pooling_matches_finite_differences() {
    for s in 0..20 {
        let mut rng = seed::rng(300 + s);
        let x = random(&[2, 3, 6, 6], &mut rng);
        for kind in [PoolKind::Max, PoolKind::Avg] {
            let w = random(&[2, 3, 3, 3], &mut rng);
            let err = check(std::slice::from_ref(&x), |t, ids| {
                let y = t.pool2d(kind, ids[0], 2, 2).unwrap();
                weighted(t, y, &w)
            });
            assert!(err < 1e-5, "seed {s} {kind:?}: {err}");
        }
        let w = random(&[2, 3], &mut rng);
        let err = check(std::slice::from_ref(&x), |t, ids| {
            let y = t.global_avg_pool(ids[0]).unwrap();
            weighted(t, y, &w)
        });
        assert!(err < 1e-5, "seed {s} gap: {err}");
    }
}

#[test]
fn cross_entropy_matches_finite_differences() {
    for s in 0..20 {
        let mut rng = seed::rng(400 + s);
        let logits = random(&[4, 6], &mut rng);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..6)).collect();
        let err = check(&[logits], |t, ids| t.softmax_cross_entropy(ids[0], &labels).unwrap().0);
        assert!(err < 1e-6, "seed {s}: {err}");
    }
}

#[test]
fn grad_reversal_matches_scaled_finite_differences() {
    // Finite differences see the identity; the analytic gradient must be the
    // identity gradient times -(lambda * tau).
    for s in 0..20 {
        let mut rng = seed::rng(500 + s);
        let x = random(&[5], &mut rng);
        let w = random(&[5], &mut rng);
        let scale = ReversalScale::new(1.3, 0.6).unwrap();
        let mut tape = Tape::new();
        let id = tape.leaf(x.clone());
        let r = tape.grad_reversal(id, scale);
        let l = weighted(&mut tape, r, &w);
        let grads = tape.backward(l).unwrap();
        let numeric = finite_diff_gradient(|p| p.data().iter().zip(w.data()).map(|(a, b)| a * b).sum(), &x, EPS);
        for (a, n) in grads.get(id).unwrap().data().iter().zip(numeric.data()) {
            assert!((a - scale.multiplier() * n).abs() < 1e-9);
        }
    }
}

#[test]
fn two_layer_toy_net_matches_finite_differences() {
    for s in 0..20 {
        let mut rng = seed::rng(600 + s);
        let x = random(&[5, 4], &mut rng);
        let w1 = random(&[4, 6], &mut rng);
        let b1 = random(&[6], &mut rng);
        let w2 = random(&[6, 3], &mut rng);
        let b2 = random(&[3], &mut rng);
        let labels = [0usize, 2, 1, 1, 0];
        let err = check(&[w1, b1, w2, b2, x], |t, ids| {
            let h = t.matmul(ids[4], ids[0]).unwrap();
            let h = t.add_bias(h, ids[1]).unwrap();
            let h = t.relu(h);
            let o = t.matmul(h, ids[2]).unwrap();
            let o = t.add_bias(o, ids[3]).unwrap();
            t.softmax_cross_entropy(o, &labels).unwrap().0
        });
        assert!(err < 1e-5, "seed {s}: {err}");
    }
}

#[test]
fn backward_is_deterministic() {
    let mut rng = seed::rng(9);
    let x = random(&[2, 2, 6, 6], &mut rng);
    let k = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let mut tape = Tape::new();
    let (xi, ki, bi) = (tape.leaf(x), tape.leaf(k), tape.leaf(b));
    let y = tape.conv2d(xi, ki, bi, 1, 1).unwrap();
    let y = tape.relu(y);
    let y = tape.pool2d(PoolKind::Max, y, 2, 2).unwrap();
    let l = tape.sum(y);
    let bits = |g: &dann_core::autodiff::Gradients| {
        [xi, ki, bi]
            .iter()
            .flat_map(|&i| g.get(i).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    let first = tape.backward(l).unwrap();
    let second = tape.backward(l).unwrap();
    assert_eq!(bits(&first), bits(&second));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_normalized_and_loss_nonnegative(
        vals in proptest::collection::vec(-50.0f64..50.0, 12),
        label in 0usize..4,
    ) {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![3, 4], vals).unwrap());
        let (loss, probs) = tape.softmax_cross_entropy(logits, &[label, 0, 3]).unwrap();
        for row in probs.data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        prop_assert!(tape.value(loss).data()[0] >= 0.0);
    }

    #[test]
    fn grad_reversal_forward_is_bitwise_identity_and_backward_scales(
        vals in proptest::collection::vec(-1e6f64..1e6, 1..16),
        upstream in -10.0f64..10.0,
        lambda in 0.0f64..5.0,
        tau in 0.0f64..0.999,
    ) {
        let x = Tensor::from_vec(vals);
        let scale = ReversalScale::new(lambda, tau).unwrap();
        let mut tape = Tape::new();
        let id = tape.leaf(x.clone());
        let r = tape.grad_reversal(id, scale);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(tape.value(r)), bits(&x));
        let s = tape.scale(r, upstream);
        let l = tape.sum(s);
        let grads = tape.backward(l).unwrap();
        for g in grads.get(id).unwrap().data() {
            prop_assert_eq!(g.to_bits(), (upstream * -(lambda * tau)).to_bits());
        }
    }

    #[test]
    fn tape_inputs_precede_nodes(depth in 1usize..12) {
        let mut tape = Tape::new();
        let mut cur = tape.leaf(Tensor::from_vec(vec![0.5, -0.25]));
        let other = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        for i in 0..depth {
            cur = match i % 3 {
                0 => tape.add(cur, other).unwrap(),
                1 => tape.relu(cur),
                _ => tape.mul(cur, other).unwrap(),
            };
        }
        for id in tape.ids() {
            for input in tape.inputs_of(id) {
                prop_assert!(input < id);
            }
        }
    }
}
