use abc_core::gradcheck::{gradcheck, relative_error, GradcheckOptions};
use abc_core::graph::Graph;
use abc_core::objective::{contrastive_loss, contrastive_loss_node, loss_with_stop_gradient, BatchLayout};
use abc_core::tensor::Tensor;
use proptest::prelude::*;

/// Direct summation of the loss definition, no log-space tricks.
fn oracle(s: &[Vec<f64>], pos: &[usize], tau: f64) -> f64 {
    let n = s.len() as f64;
    let mut total = 0.0;
    for (i, row) in s.iter().enumerate() {
        let mut denom = 0.0;
        for v in row {
            denom += (v / tau).exp();
        }
        let num = (row[pos[i]] / tau).exp();
        total += -(num / denom).ln();
    }
    total / n
}

/// A general layout: positives at a permutation of `0..n` slots, every other
/// candidate owned round-robin.
fn layout_for(n: usize, m: usize, pos: &[usize]) -> BatchLayout {
    let mut owner = vec![None; m];
    let mut q = 0;
    for (j, o) in owner.iter_mut().enumerate() {
        if !pos.contains(&j) {
            *o = Some(q % n);
            q += 1;
        }
    }
    BatchLayout::new(n, m, pos.to_vec(), owner).unwrap()
}

fn arb_case() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>, f64)> {
    (1usize..=3)
        .prop_flat_map(|n| (Just(n), n..=3 * n))
        .prop_flat_map(|(n, m)| {
            (
                prop::collection::vec(prop::collection::vec(-1.0f64..1.0, m), n),
                Just((0..m).collect::<Vec<_>>()).prop_shuffle(),
                0.05f64..2.0,
            )
                .prop_map(move |(s, perm, tau)| (s, perm[..n].to_vec(), tau))
        })
}

fn tensor(s: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(s).unwrap()
}

proptest! {
    #[test]
    fn matches_direct_summation((s, pos, tau) in arb_case()) {
        let m = s[0].len();
        let layout = layout_for(s.len(), m, &pos);
        let got = contrastive_loss(&tensor(&s), &layout, tau).unwrap();
        let want = oracle(&s, &pos, tau);
        prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn loss_is_non_negative((s, pos, tau) in arb_case()) {
        let layout = layout_for(s.len(), s[0].len(), &pos);
        prop_assert!(contrastive_loss(&tensor(&s), &layout, tau).unwrap() >= 0.0);
    }

    #[test]
    fn scaling_s_equals_dividing_tau((s, pos, tau) in arb_case(), c in 0.25f64..4.0) {
        let layout = layout_for(s.len(), s[0].len(), &pos);
        let scaled: Vec<Vec<f64>> = s.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
        let a = contrastive_loss(&tensor(&scaled), &layout, tau).unwrap();
        let b = contrastive_loss(&tensor(&s), &layout, tau / c).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn raising_the_positive_lowers_loss((s, pos, tau) in arb_case(), bump in 0.01f64..0.5) {
        // with a single candidate the loss is identically zero
        prop_assume!(s[0].len() > 1);
        let layout = layout_for(s.len(), s[0].len(), &pos);
        let before = contrastive_loss(&tensor(&s), &layout, tau).unwrap();
        let mut s2 = s.clone();
        s2[0][pos[0]] += bump;
        let after = contrastive_loss(&tensor(&s2), &layout, tau).unwrap();
        prop_assert!(after < before);
    }

    #[test]
    fn candidate_permutation_invariance((s, pos, tau) in arb_case(), seed in any::<u64>()) {
        let m = s[0].len();
        let layout = layout_for(s.len(), m, &pos);
        // a deterministic permutation derived from the seed
        let mut perm: Vec<usize> = (0..m).collect();
        let mut x = seed | 1;
        for i in (1..m).rev() {
            x ^= x << 13; x ^= x >> 7; x ^= x << 17;
            perm.swap(i, (x % (i as u64 + 1)) as usize);
        }
        // new column perm[j] holds old column j
        let mut s2 = vec![vec![0.0; m]; s.len()];
        for (i, row) in s.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                s2[i][perm[j]] = *v;
            }
        }
        let mut owner2 = vec![None; m];
        for (j, o) in layout.owner.iter().enumerate() {
            owner2[perm[j]] = *o;
        }
        let pos2: Vec<usize> = pos.iter().map(|&p| perm[p]).collect();
        let layout2 = BatchLayout::new(layout.n, m, pos2, owner2).unwrap();
        let a = contrastive_loss(&tensor(&s), &layout, tau).unwrap();
        let b = contrastive_loss(&tensor(&s2), &layout2, tau).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn graph_and_value_paths_agree((s, pos, tau) in arb_case()) {
        let layout = layout_for(s.len(), s[0].len(), &pos);
        let mut g = Graph::new();
        let sn = g.constant(tensor(&s));
        let lt = g.constant(Tensor::scalar(tau.ln()));
        let node = contrastive_loss_node(&mut g, sn, lt, &layout).unwrap();
        let want = contrastive_loss(&tensor(&s), &layout, tau).unwrap();
        prop_assert!((g.value(node).item() - want).abs() <= 1e-12 * want.max(1.0));
    }
}

#[test]
fn zero_loss_only_for_lone_positive() {
    let s = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
    let l = contrastive_loss(&s, &BatchLayout::new(1, 2, vec![0], vec![None, Some(0)]).unwrap(), 0.07).unwrap();
    assert!(l > 0.0);
}

fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor<f64> {
    let mut x = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let row: Vec<f64> = (0..d)
            .map(|_| {
                x ^= x << 13;
                x ^= x >> 7;
                x ^= x << 17;
                (x % 2000) as f64 / 1000.0 - 1.0
            })
            .collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(row.into_iter().map(|v| v / norm));
    }
    Tensor::new(vec![n, d], data).unwrap()
}

fn two_by_four() -> BatchLayout {
    BatchLayout::new(2, 4, vec![0, 1], vec![None, None, Some(0), Some(1)]).unwrap()
}

#[test]
fn stop_gradient_detaches_candidates() {
    let layout = two_by_four();
    for candidate_grads in [false, true] {
        let mut g = Graph::new();
        let q = g.param("q", unit_rows(2, 3, 1), true).unwrap();
        let c = g.param("c", unit_rows(4, 3, 2), true).unwrap();
        let lt = g.param("log_tau", Tensor::scalar(0.07f64.ln()), true).unwrap();
        let loss = loss_with_stop_gradient(&mut g, q, c, lt, &layout, candidate_grads).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.contains("q"));
        assert!(grads.contains("log_tau"));
        assert_eq!(grads.contains("c"), candidate_grads);
    }
}

#[test]
fn frozen_tau_receives_no_gradient() {
    let mut g = Graph::new();
    let q = g.param("q", unit_rows(2, 3, 1), true).unwrap();
    let c = g.param("c", unit_rows(4, 3, 2), false).unwrap();
    let lt = g.param("log_tau", Tensor::scalar(0.07f64.ln()), false).unwrap();
    let loss = loss_with_stop_gradient(&mut g, q, c, lt, &two_by_four(), false).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.names().collect::<Vec<_>>(), vec!["q"]);
}

#[test]
fn tau_gradient_matches_finite_difference() {
    let layout = two_by_four();
    let q = unit_rows(2, 3, 5);
    let c = unit_rows(4, 3, 6);
    let s = abc_core::objective::similarity_matrix(&q, &c).unwrap();

    // d loss / d tau by central differences on the value path
    let h = 1e-7;
    let tau = 0.07;
    let fd = (contrastive_loss(&s, &layout, tau + h).unwrap() - contrastive_loss(&s, &layout, tau - h).unwrap())
        / (2.0 * h);

    let mut g = Graph::new();
    let sn = g.constant(s);
    let lt = g.param("log_tau", Tensor::scalar(tau.ln()), true).unwrap();
    let loss = contrastive_loss_node(&mut g, sn, lt, &layout).unwrap();
    let grads = g.backward(loss).unwrap();
    // chain rule through log space: dL/dτ = dL/dlogτ / τ
    let analytic = grads.get("log_tau").unwrap().item() / tau;
    assert!(relative_error(analytic, fd) < 1e-4, "{analytic} vs {fd}");
}

#[test]
fn full_loss_gradcheck_on_embeddings() {
    let mut g = Graph::new();
    let q = g.param("q", unit_rows(2, 3, 9), true).unwrap();
    let c = g.param("c", unit_rows(4, 3, 10), true).unwrap();
    let qn = g.l2_normalize(q).unwrap();
    let cn = g.l2_normalize(c).unwrap();
    let lt = g.param("log_tau", Tensor::scalar(0.07f64.ln()), true).unwrap();
    let loss = loss_with_stop_gradient(&mut g, qn, cn, lt, &two_by_four(), true).unwrap();
    let report = gradcheck(&mut g, loss, GradcheckOptions::new(1e-5, 1e-4)).unwrap();
    assert!(report.passed(), "{report:?}");
}
