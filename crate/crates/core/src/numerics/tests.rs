use std::cell::Cell;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn store_of(inputs: Vec<(&str, Tensor)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in inputs {
        s.add(n, t);
    }
    s
}

/// `sum(out ⊙ weights)` with fixed pseudo-random weights, so every output
/// entry carries a distinct upstream gradient.
fn weighted_sum<'a>(g: &mut Graph<'a>, out: Var) -> crate::Result<Var> {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n)
        .map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4)
        .collect();
    let w = g.constant(Tensor::new(&shape, w)?);
    let p = g.mul(out, w)?;
    g.sum(p)
}

#[test]
fn matmul_identity_and_hand_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::randn(&[3, 3], 1.0, &mut rng);
    assert_eq!(Tensor::eye(3).matmul(&a).unwrap(), a);

    let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
    assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let store = store_of(vec![
        ("a", Tensor::randn(&[3, 4], 1.0, &mut rng)),
        ("b", Tensor::randn(&[4, 2], 1.0, &mut rng)),
    ]);
    let report = grad_check(
        |g, s| {
            let a = g.param(s, ParamId(0));
            let b = g.param(s, ParamId(1));
            let c = g.matmul(a, b)?;
            g.sum(c)
        },
        &store,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn elementwise_basics() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
    let z = g.constant(Tensor::zeros(&[2]));
    let s = g.add(a, z).unwrap();
    assert_eq!(g.value(s), g.value(a));
    let r = g.relu(a).unwrap();
    assert_eq!(g.value(r), &[0.0, 2.0]);
}

#[test]
fn log_of_non_positive_is_a_domain_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
    assert!(matches!(g.log(a), Err(Error::Domain { op: "log", .. })));
}

#[test]
fn non_broadcastable_shapes_are_rejected() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2]));
    assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
}

#[test]
fn gelu_gradient_at_half() {
    let store = store_of(vec![("x", Tensor::scalar(0.5))]);
    let report = grad_check(
        |g, s| {
            let x = g.param(s, ParamId(0));
            g.gelu(x)
        },
        &store,
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    // the documented tanh form, evaluated by hand
    let x: f64 = 0.5;
    let expected = 0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x.powi(3))).tanh());
    assert_eq!(gelu(x), expected);
}

#[test]
fn log_softmax_cases() {
    let t = Tensor::zeros(&[1, 4]);
    for v in t.log_softmax(1).unwrap().data() {
        assert!((v - 0.25f64.ln()).abs() < 1e-15);
    }
    let t = Tensor::new(&[2], vec![1000.0, 0.0]).unwrap();
    let out = t.log_softmax(0).unwrap();
    assert!(out.data()[0].abs() < 1e-12);
    assert!((out.data()[1] + 1000.0).abs() < 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = Tensor::randn(&[5, 7], 3.0, &mut rng);
    let out = t.log_softmax(1).unwrap();
    for i in 0..5 {
        let s: f64 = out.row(i).iter().map(|x| x.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    let out = t.log_softmax(0).unwrap();
    for j in 0..7 {
        let s: f64 = (0..5).map(|i| out.at(i, j).exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    assert!(t.log_softmax(2).is_err());
}

#[test]
fn backward_simple_losses() {
    let a = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
    let mut g = Graph::new();
    let x = g.input(a.clone());
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.input(a.clone());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
}

#[test]
fn repeated_backward_accumulates_until_zeroed() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    g.zero_grad();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[2]));
    let y = g.scale(x, 2.0).unwrap();
    assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
}

#[test]
fn grad_check_trivial_functions() {
    let store = store_of(vec![("x", Tensor::scalar(3.0))]);
    let report = grad_check(
        |g, s| {
            let x = g.param(s, ParamId(0));
            let y = g.mul(x, x)?;
            g.sum(y)
        },
        &store,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.entries[0].max_abs_err < 1e-6);
    assert!(report.passed());

    let report = grad_check(
        |g, s| {
            let x = g.param(s, ParamId(0));
            let z = g.scale(x, 0.0)?;
            let c = g.offset(z, 4.0)?;
            g.sum(c)
        },
        &store,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert_eq!(report.entries[0].max_abs_err, 0.0);
}

#[test]
fn grad_check_detects_non_determinism() {
    let calls = Cell::new(0u32);
    let store = store_of(vec![("x", Tensor::scalar(1.0))]);
    let res = grad_check(
        |g, s| {
            calls.set(calls.get() + 1);
            let x = g.param(s, ParamId(0));
            g.offset(x, calls.get() as f64)
        },
        &store,
        1e-5,
        1e-6,
    );
    assert!(matches!(res, Err(Error::NonDeterministic { .. })));
}

#[test]
fn grad_check_rejects_bad_eps() {
    let store = store_of(vec![("x", Tensor::scalar(1.0))]);
    let res = grad_check(|g, s| Ok(g.param(s, ParamId(0))), &store, 0.5, 1e-6);
    assert!(matches!(res, Err(Error::InvalidArgument(_))));
}

#[test]
fn finite_checks_catch_overflow() {
    let mut g = Graph::new();
    g.set_finite_checks(true);
    let x = g.constant(Tensor::scalar(1000.0));
    assert!(matches!(g.exp(x), Err(Error::NonFinite { op: "exp" })));
}

#[test]
fn row_cosine_zero_norm_without_guard() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[1, 3]));
    let b = g.constant(Tensor::ones(&[1, 3]));
    assert!(matches!(
        g.row_cosine(a, b, None),
        Err(Error::Domain { .. })
    ));
    let c = g.row_cosine(a, b, Some(1e-8)).unwrap();
    assert_eq!(g.value(c), &[0.0]);
}

#[test]
fn backward_visits_nodes_in_reverse_topological_order() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(2.0));
    let y = g.mul(x, x).unwrap();
    let z = g.add(y, x).unwrap();
    for v in [y, z] {
        assert!(g.inputs(v).iter().all(|i| i.index() < v.index()));
    }
    g.backward(z).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[5.0]);
    assert_eq!(g.op_name(z), "add");
}

/// Every registered op, wrapped so a single scalar comes out.
fn op_zoo(which: usize, g: &mut Graph<'_>, [a, b, c, d]: [Var; 4]) -> crate::Result<Var> {
    // a: [3×4], b: [3×4], c: [4], d: [9×2]
    let out = match which {
        0 => g.add(a, b)?,
        1 => g.sub(a, c)?,
        2 => g.mul(a, b)?,
        3 => g.mul(a, c)?,
        4 => g.gelu(a)?,
        5 => g.exp(a)?,
        6 => {
            let e = g.exp(a)?;
            g.log(e)?
        }
        7 => g.tanh(a)?,
        8 => g.sin(a)?,
        9 => g.cos(a)?,
        10 => g.log_sigmoid(a)?,
        11 => g.unary(Unary::Sigmoid, a)?,
        12 => g.matmul_nt(a, b)?,
        13 => {
            let t = g.transpose(b)?;
            g.matmul(a, t)?
        }
        14 => g.log_softmax(a, 0)?,
        15 => g.log_softmax(a, 1)?,
        16 => g.softmax(a)?,
        17 => g.layer_norm(a, 1e-5)?,
        18 => g.concat_cols(&[a, b, a])?,
        19 => g.slice_cols(a, 1, 2)?,
        20 => g.gather(a, &[2, 0, 2, 1])?,
        21 => {
            // x: [N=4 × Cin=3], kernel: [(K=3·Cin=3) × Cout=2]
            let x = g.transpose(a)?;
            g.conv1d(x, d, 3)?
        }
        22 => {
            let k = g.slice_cols(b, 0, 4)?; // [3×4]: K=3, C=4
            g.depthwise_conv1d(a, k)?
        }
        23 => g.row_cosine(a, b, Some(1e-8))?,
        24 => g.abs(a)?,
        25 => {
            let m = g.mean(a)?;
            g.add(a, m)?
        }
        _ => unreachable!(),
    };
    weighted_sum(g, out)
}

const OPS: usize = 26;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_op_matches_finite_differences(seed in any::<u64>()) {
      for which in 0..OPS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        // keep |x| away from the kink of abs
        if which == 24 {
            a = a.map(|x| if x.abs() < 0.05 { x + 0.2 } else { x });
        }
        let store = store_of(vec![
            ("a", a),
            ("b", Tensor::randn(&[3, 4], 1.0, &mut rng)),
            ("c", Tensor::randn(&[4], 1.0, &mut rng)),
            ("d", Tensor::randn(&[9, 2], 1.0, &mut rng)),
        ]);
        let report = grad_check(
            |g, s| {
                let a = g.param(s, ParamId(0));
                let b = g.param(s, ParamId(1));
                let c = g.param(s, ParamId(2));
                let d = g.param(s, ParamId(3));
                op_zoo(which, g, [a, b, c, d])
            },
            &store,
            1e-5,
            1e-5,
        ).unwrap();
        prop_assert!(report.passed(), "op {} failed: {:?}", which, report.worst());
      }
    }

    #[test]
    fn forward_is_bitwise_deterministic(seed in any::<u64>(), which in 0..OPS) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let c = Tensor::randn(&[4], 1.0, &mut rng);
        let d = Tensor::randn(&[9, 2], 1.0, &mut rng);
        let run = || {
            let mut g = Graph::new();
            let vars = [a.clone(), b.clone(), c.clone(), d.clone()].map(|t| g.input(t));
            let out = op_zoo(which, &mut g, vars).unwrap();
            g.scalar(out).to_bits()
        };
        prop_assert_eq!(run(), run());
    }
}
