use abc_core::gradcheck::{gradcheck, relative_error, GradcheckOptions};
use abc_core::graph::NodeId;
use abc_core::{Graph64, Tensor64};
use proptest::prelude::*;

// Canonical SELU constants, typed independently of the crate.
const LAMBDA: f64 = 1.050_700_987_355_480_5;
const ALPHA: f64 = 1.673_263_242_354_377_2;

fn selu_ref(x: f64) -> f64 {
    if x > 0.0 {
        LAMBDA * x
    } else {
        LAMBDA * ALPHA * (x.exp() - 1.0)
    }
}

fn vector(v: &[f64]) -> Tensor64 {
    Tensor64::vector(v.to_vec())
}

fn matrix(r: usize, c: usize, v: &[f64]) -> Tensor64 {
    Tensor64::matrix(r, c, v.to_vec()).unwrap()
}

#[test]
fn selu_values() {
    let mut g = Graph64::new();
    let x = g.constant(vector(&[0.0, 1.0, -1.0, 2.5, -0.3]));
    let y = g.selu(x).unwrap();
    let out = g.value(y).data().to_vec();
    assert_eq!(out[0], 0.0);
    assert!((out[1] - 1.050_700_987_3).abs() < 1e-10);
    assert!((out[2] + 1.111_330_737_8).abs() < 1e-10);
    for (x, y) in [0.0, 1.0, -1.0, 2.5, -0.3].iter().zip(&out) {
        assert!((selu_ref(*x) - y).abs() < 1e-15);
    }
}

#[test]
fn identity_matmul_returns_vector() {
    let mut g = Graph64::new();
    let i = g.constant(matrix(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    let v = g.constant(matrix(2, 1, &[3.5, -7.25]));
    let y = g.matmul(i, v).unwrap();
    assert_eq!(g.value(y).data(), &[3.5, -7.25]);
}

#[test]
fn dot_self_gradient_is_twice_w() {
    let mut g = Graph64::new();
    let w = g.param("w", vector(&[1.0, 2.0]), true).unwrap();
    let l = g.dot(w, w).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get("w").unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn log_exp_gradient_is_one() {
    for a0 in [-3.0, 0.0, 0.7, 5.0] {
        let mut g = Graph64::new();
        let a = g.param("a", vector(&[a0]), true).unwrap();
        let e = g.exp(a).unwrap();
        let l = g.log(e).unwrap();
        let s = g.sum_all(l).unwrap();
        let grads = g.backward(s).unwrap();
        assert!((grads.get("a").unwrap().data()[0] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn normalize_then_dot_matches_finite_differences() {
    let w0 = [0.3, -1.2, 0.8, 0.05];
    let u = [0.5, 0.25, -1.0, 2.0];
    let f = |w: &[f64]| {
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        w.iter().zip(&u).map(|(a, b)| a / n * b).sum::<f64>()
    };
    let mut g = Graph64::new();
    let w = g.param("w", vector(&w0), true).unwrap();
    let c = g.constant(vector(&u));
    let n = g.l2_normalize(w).unwrap();
    let l = g.dot(n, c).unwrap();
    let grads = g.backward(l).unwrap();
    let h = 1e-5;
    for i in 0..4 {
        let (mut p, mut m) = (w0, w0);
        p[i] += h;
        m[i] -= h;
        let numeric = (f(&p) - f(&m)) / (2.0 * h);
        let analytic = grads.get("w").unwrap().data()[i];
        assert!(relative_error(analytic, numeric) < 1e-6, "coord {i}: {analytic} vs {numeric}");
    }
}

#[test]
fn backward_of_non_scalar_is_an_error() {
    let mut g = Graph64::new();
    let w = g.param("w", vector(&[1.0, 2.0]), true).unwrap();
    let e = g.exp(w).unwrap();
    assert!(g.backward(e).is_err());
}

#[test]
fn frozen_leaf_is_absent_not_zero() {
    let mut g = Graph64::new();
    let w = g.param("w", vector(&[1.0, 2.0]), true).unwrap();
    let f = g.param("f", vector(&[3.0, 4.0]), false).unwrap();
    let l = g.dot(w, f).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.contains("w"));
    assert!(!grads.contains("f"));
}

#[test]
fn forward_is_bitwise_repeatable() {
    let build = || {
        let mut g = Graph64::new();
        let a = g.param("a", matrix(2, 3, &[0.1, -0.4, 0.9, 1.3, -2.0, 0.25]), true).unwrap();
        let b = g.param("b", matrix(3, 2, &[0.7, 0.2, -0.5, 1.1, 0.3, -0.8]), true).unwrap();
        let m = g.matmul(a, b).unwrap();
        let s = g.softmax(m, None).unwrap();
        let l = g.sum_all(s).unwrap();
        (g, l)
    };
    let (g1, l1) = build();
    let (g2, l2) = build();
    assert_eq!(g1.value(l1).item().to_bits(), g2.value(l2).item().to_bits());
}

#[test]
fn gradcheck_flags_a_corrupted_matmul_adjoint_by_leaf() {
    let mut g = Graph64::new();
    let a = g.param("left", matrix(2, 2, &[0.3, -0.2, 0.7, 0.1]), true).unwrap();
    let b = g.param("right", matrix(2, 2, &[1.0, 0.5, -0.5, 2.0]), true).unwrap();
    let m = g.matmul(a, b).unwrap();
    let e = g.exp(m).unwrap();
    let l = g.sum_all(e).unwrap();
    g.inject_matmul_adjoint_fault(1.5);
    let r = gradcheck(&mut g, l, GradcheckOptions::new(1e-5, 1e-4)).unwrap();
    assert!(!r.passed());
    assert_eq!(r.failing_leaves(), vec!["right"]);
}

/// Reduces `out` to a scalar through a fixed random weighting and gradchecks
/// every trainable leaf on 10 coordinates.
fn check(mut g: Graph64, out: NodeId, weights: &[f64]) -> Result<(), TestCaseError> {
    let shape = g.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor64::new(shape, weights.iter().cycle().take(n).copied().collect()).unwrap();
    let c = g.constant(w);
    let l = g.dot(out, c).unwrap();
    let r = gradcheck(&mut g, l, GradcheckOptions::new(1e-5, 1e-4).probes(10, 3)).unwrap();
    prop_assert!(r.passed(), "{:?}", r);
    Ok(())
}

fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

fn positive(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.3f64..3.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_primitives(a in vals(6), b in vals(6), p in positive(6), w in vals(6), c in -2.0f64..2.0) {
        let ops: [&dyn Fn(&mut Graph64, NodeId, NodeId, NodeId) -> NodeId; 8] = [
            &|g, a, b, _| g.add(a, b).unwrap(),
            &|g, a, b, _| g.sub(a, b).unwrap(),
            &|g, a, _, _| g.scale(a, c).unwrap(),
            &|g, a, b, _| g.mul(a, b).unwrap(),
            &|g, a, _, _| g.exp(a).unwrap(),
            &|g, _, _, p| g.log(p).unwrap(),
            &|g, a, _, _| g.selu(a).unwrap(),
            &|g, a, b, _| { let s = g.dot(b, b).unwrap(); g.scale_by(a, s).unwrap() },
        ];
        for op in ops {
            let mut g = Graph64::new();
            let an = g.param("a", matrix(2, 3, &a), true).unwrap();
            let bn = g.param("b", matrix(2, 3, &b), true).unwrap();
            let pn = g.param("p", matrix(2, 3, &p), true).unwrap();
            let out = op(&mut g, an, bn, pn);
            check(g, out, &w)?;
        }
    }

    #[test]
    fn matmul_both_orientations(a in vals(6), b in vals(12), w in vals(8)) {
        let mut g = Graph64::new();
        let an = g.param("a", matrix(2, 3, &a), true).unwrap();
        let bn = g.param("b", matrix(3, 4, &b), true).unwrap();
        let out = g.matmul(an, bn).unwrap();
        check(g, out, &w)?;

        let mut g = Graph64::new();
        let an = g.param("a", matrix(2, 3, &a), true).unwrap();
        let bn = g.param("b", matrix(4, 3, &b), true).unwrap();
        let out = g.matmul_nt(an, bn).unwrap();
        check(g, out, &w)?;
    }

    #[test]
    fn reductions_and_normalization(a in vals(12), w in vals(12), mask in prop::collection::vec(any::<bool>(), 4)) {
        let mut mask = mask;
        mask[0] = true;
        for axis in 0..2 {
            let mut g = Graph64::new();
            let x = g.param("x", matrix(4, 3, &a), true).unwrap();
            let out = g.mean(x, axis).unwrap();
            check(g, out, &w)?;
        }
        let mut g = Graph64::new();
        let x = g.param("x", matrix(4, 3, &a), true).unwrap();
        let out = g.masked_mean(x, 0, mask.clone()).unwrap();
        check(g, out, &w)?;

        let mut g = Graph64::new();
        let x = g.param("x", matrix(4, 3, &a), true).unwrap();
        let out = g.l2_normalize(x).unwrap();
        check(g, out, &w)?;
    }

    #[test]
    fn softmax_variants(a in vals(8), w in vals(8), mask in prop::collection::vec(any::<bool>(), 8)) {
        let mut mask = mask;
        mask[0] = true;
        mask[4] = true;
        for m in [None, Some(mask.clone())] {
            let mut g = Graph64::new();
            let x = g.param("x", matrix(2, 4, &a), true).unwrap();
            let out = g.softmax(x, m.clone()).unwrap();
            check(g, out, &w)?;

            let mut g = Graph64::new();
            let x = g.param("x", matrix(2, 4, &a), true).unwrap();
            let out = g.log_softmax(x, m).unwrap();
            let masked: Vec<f64> = w.iter().zip(&mask).map(|(w, k)| if *k { *w } else { 0.0 }).collect();
            check(g, out, &masked)?;
        }
    }

    #[test]
    fn structural_ops(t in vals(15), a in vals(6), b in vals(4), w in vals(12), ids in prop::collection::vec(0usize..5, 4)) {
        let mut g = Graph64::new();
        let table = g.param("table", matrix(5, 3, &t), true).unwrap();
        let out = g.embedding(table, ids.clone(), vec![ids.len()]).unwrap();
        check(g, out, &w)?;

        let mut g = Graph64::new();
        let x = g.param("x", matrix(2, 3, &a), true).unwrap();
        let y = g.param("y", matrix(2, 2, &b), true).unwrap();
        let cat = g.concat(vec![x, y], 1).unwrap();
        check(g, cat, &w)?;

        let mut g = Graph64::new();
        let x = g.param("x", matrix(2, 3, &a), true).unwrap();
        let out = g.narrow(x, 1, 1, 2).unwrap();
        check(g, out, &w)?;
    }
}
