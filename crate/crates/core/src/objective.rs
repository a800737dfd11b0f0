//! Contrastive loss over image queries and text candidates.
//!
//! For `N` queries and `M` candidates with similarity matrix `S`,
//!
//! ```text
//! loss = (1/N) Σᵢ −log( exp(S[i, pos(i)] / τ) / Σⱼ exp(S[i, j] / τ) )
//! ```
//!
//! where `j` ranges over every candidate in the batch: other queries'
//! positives act as in-batch negatives and every mined negative appears in
//! every denominator, regardless of which query owns it.

use thiserror::Error;

use crate::graph::{Graph, NodeId};
use crate::scalar::Real;
use crate::tensor::{Tensor, TensorError};

/// Tolerance on `‖row‖₂ − 1` accepted by [`similarity_matrix`].
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("{side} row {row} has norm {norm}, expected unit norm")]
    NotUnitNorm { side: &'static str, row: usize, norm: f64 },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTau(f64),
    #[error("invalid batch layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Geometry of one batch: which candidate is each query's positive and which
/// query each mined negative was drawn for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchLayout {
    pub n: usize,
    pub m: usize,
    pub pos_index: Vec<usize>,
    /// One entry per candidate: `Some(i)` for a mined negative owned by
    /// query `i`, `None` for a positive.
    pub owner: Vec<Option<usize>>,
}

impl BatchLayout {
    /// Checks the general invariants: `M ≥ N`, positives in range and
    /// distinct, owners in range, and positives carry no owner.
    pub fn new(n: usize, m: usize, pos_index: Vec<usize>, owner: Vec<Option<usize>>) -> Result<Self, ObjectiveError> {
        let bad = |msg: String| Err(ObjectiveError::Layout(msg));
        if n == 0 {
            return bad("no queries".into());
        }
        if m < n {
            return bad(format!("M={m} is smaller than N={n}"));
        }
        if pos_index.len() != n {
            return bad(format!("{} positive indices for {n} queries", pos_index.len()));
        }
        if owner.len() != m {
            return bad(format!("{} owner entries for {m} candidates", owner.len()));
        }
        let mut is_pos = vec![false; m];
        for (i, &p) in pos_index.iter().enumerate() {
            if p >= m {
                return bad(format!("query {i} positive {p} out of range"));
            }
            if is_pos[p] {
                return bad(format!("candidate {p} is the positive of two queries"));
            }
            is_pos[p] = true;
        }
        for (j, o) in owner.iter().enumerate() {
            match *o {
                Some(q) if q >= n => return bad(format!("candidate {j} owned by missing query {q}")),
                Some(_) if is_pos[j] => return bad(format!("positive candidate {j} has an owner")),
                _ => {}
            }
        }
        Ok(Self { n, m, pos_index, owner })
    }

    /// Positives only, candidate `i` belonging to query `i` (`M == N`).
    pub fn in_batch(n: usize) -> Self {
        Self {
            n,
            m: n,
            pos_index: (0..n).collect(),
            owner: vec![None; n],
        }
    }

    /// Number of mined negatives owned by each query.
    pub fn negatives_per_query(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n];
        for q in self.owner.iter().flatten() {
            counts[*q] += 1;
        }
        counts
    }

    /// Pretraining geometry: `M mod N == 0`, every candidate is either a
    /// positive or owned, and each query owns exactly `M/N − 1` negatives.
    pub fn validate_pretrain(&self) -> Result<(), ObjectiveError> {
        if !self.m.is_multiple_of(self.n) {
            return Err(ObjectiveError::Layout(format!("M={} is not a multiple of N={}", self.m, self.n)));
        }
        let per = self.m / self.n - 1;
        let positives = self.pos_index.len();
        let owned = self.owner.iter().filter(|o| o.is_some()).count();
        if positives + owned != self.m {
            return Err(ObjectiveError::Layout("candidate that is neither positive nor owned".into()));
        }
        for (q, c) in self.negatives_per_query().into_iter().enumerate() {
            if c != per {
                return Err(ObjectiveError::Layout(format!(
                    "query {q} owns {c} mined negatives, expected {per}"
                )));
            }
        }
        Ok(())
    }

    /// One-hot `[N × M]` selector of the positives.
    pub fn positive_mask<T: Real>(&self) -> Tensor<T> {
        let mut t = Tensor::zeros(&[self.n, self.m]);
        for (i, &p) in self.pos_index.iter().enumerate() {
            t.data_mut()[i * self.m + p] = T::one();
        }
        t
    }
}

fn check_unit_rows<T: Real>(t: &Tensor<T>, side: &'static str) -> Result<(), ObjectiveError> {
    for r in 0..t.rows() {
        let norm = t.row(r).iter().map(|&v| v * v).sum::<T>().sqrt().to_f64_lossy();
        if !((norm - 1.0).abs() <= UNIT_NORM_TOL) {
            return Err(ObjectiveError::NotUnitNorm { side, row: r, norm });
        }
    }
    Ok(())
}

/// `S[i][j] = ⟨Qᵢ, Cⱼ⟩` for unit rows `Q: [N × d]` and `C: [M × d]`.
pub fn similarity_matrix<T: Real>(q: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>, ObjectiveError> {
    if q.rank() != 2 || c.rank() != 2 || q.shape()[1] != c.shape()[1] {
        return Err(TensorError::ShapeMismatch {
            op: "similarity_matrix",
            left: q.shape().to_vec(),
            right: c.shape().to_vec(),
        }
        .into());
    }
    check_unit_rows(q, "query")?;
    check_unit_rows(c, "candidate")?;
    let (n, m) = (q.shape()[0], c.shape()[0]);
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let qi = q.row(i);
        for j in 0..m {
            out.push(qi.iter().zip(c.row(j)).map(|(&a, &b)| a * b).sum());
        }
    }
    Ok(Tensor::new(vec![n, m], out)?)
}

fn check_s<T: Real>(s: &Tensor<T>, layout: &BatchLayout) -> Result<(), ObjectiveError> {
    if s.shape() != [layout.n, layout.m] {
        return Err(ObjectiveError::Layout(format!(
            "similarity shape {:?} does not match N={} M={}",
            s.shape(),
            layout.n,
            layout.m
        )));
    }
    Ok(())
}

/// Loss value only, evaluated in log space with max subtraction.
pub fn contrastive_loss<T: Real>(s: &Tensor<T>, layout: &BatchLayout, tau: T) -> Result<T, ObjectiveError> {
    if !(tau > T::zero()) {
        return Err(ObjectiveError::NonPositiveTau(tau.to_f64_lossy()));
    }
    check_s(s, layout)?;
    let mut total = T::zero();
    for (i, &p) in layout.pos_index.iter().enumerate() {
        let row = s.row(i);
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b / tau));
        let lse = max + row.iter().map(|&v| (v / tau - max).exp()).sum::<T>().ln();
        total += lse - row[p] / tau;
    }
    Ok(total / T::from_usize(layout.n).unwrap())
}

/// Loss node over a similarity node `s: [N × M]` and a scalar `log τ` node.
pub fn contrastive_loss_node<T: Real>(
    g: &mut Graph<T>,
    s: NodeId,
    log_tau: NodeId,
    layout: &BatchLayout,
) -> Result<NodeId, ObjectiveError> {
    check_s(g.value(s), layout)?;
    let tau = g.value(log_tau).item().exp();
    if !(tau > T::zero()) {
        return Err(ObjectiveError::NonPositiveTau(tau.to_f64_lossy()));
    }
    let neg = g.scale(log_tau, -T::one())?;
    let inv_tau = g.exp(neg)?;
    let logits = g.scale_by(s, inv_tau)?;
    let log_p = g.log_softmax(logits, None)?;
    let mask = g.constant(layout.positive_mask());
    let picked = g.mul(log_p, mask)?;
    let total = g.sum_all(picked)?;
    Ok(g.scale(total, -T::one() / T::from_usize(layout.n).unwrap())?)
}

/// Full objective from query and candidate embedding nodes. With
/// `candidate_grads == false` the candidate side is detached, so no leaf
/// reachable only through candidates receives a gradient.
pub fn loss_with_stop_gradient<T: Real>(
    g: &mut Graph<T>,
    queries: NodeId,
    candidates: NodeId,
    log_tau: NodeId,
    layout: &BatchLayout,
    candidate_grads: bool,
) -> Result<NodeId, ObjectiveError> {
    let c = if candidate_grads {
        candidates
    } else {
        g.stop_gradient(candidates)?
    };
    let s = g.matmul_nt(queries, c)?;
    contrastive_loss_node(g, s, log_tau, layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthonormal_basis_gives_identity() {
        let i3 = Tensor::<f64>::identity(3);
        assert_eq!(similarity_matrix(&i3, &i3).unwrap(), i3);
    }

    #[test]
    fn antipodal_rows_give_minus_one() {
        let q = Tensor::<f64>::from_rows(&[vec![0.6, 0.8], vec![1.0, 0.0]]).unwrap();
        let c = q.map(|v| -v);
        let s = similarity_matrix(&q, &c).unwrap();
        assert_eq!(s.data()[0], -1.0);
        assert_eq!(s.data()[3], -1.0);
    }

    #[test]
    fn hand_set_similarities() {
        let q = Tensor::<f64>::from_rows(&[vec![0.6, 0.8], vec![0.0, 1.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0], vec![0.8, 0.6]]).unwrap();
        let s = similarity_matrix(&q, &c).unwrap();
        let want = [0.6, -0.8, 0.96, 0.0, -1.0, 0.6];
        for (a, b) in s.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_unnormalized_rows() {
        let q = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let err = similarity_matrix(&q, &q).unwrap_err();
        assert!(matches!(err, ObjectiveError::NotUnitNorm { side: "query", row: 0, .. }));
    }

    #[test]
    fn single_positive_has_zero_loss() {
        let s = Tensor::matrix(1, 1, vec![0.3]).unwrap();
        assert_eq!(contrastive_loss(&s, &BatchLayout::in_batch(1), 0.07).unwrap(), 0.0);
    }

    #[test]
    fn uniform_similarities_give_ln_m() {
        let layout = BatchLayout::new(2, 6, vec![0, 3], vec![None, Some(0), Some(0), None, Some(1), Some(1)]).unwrap();
        let s = Tensor::full(&[2, 6], 0.4);
        let l = contrastive_loss(&s, &layout, 0.05).unwrap();
        assert!((l - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_candidate_hand_softmax() {
        let layout = BatchLayout::new(1, 2, vec![0], vec![None, Some(0)]).unwrap();
        let s = Tensor::<f64>::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let l = contrastive_loss(&s, &layout, 1.0).unwrap();
        assert!((l - 0.313_261_687_518_222_86).abs() < 1e-15);
    }

    #[test]
    fn non_positive_tau_rejected() {
        let s = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        assert_eq!(
            contrastive_loss(&s, &BatchLayout::in_batch(1), 0.0),
            Err(ObjectiveError::NonPositiveTau(0.0))
        );
    }

    #[test]
    fn graph_loss_matches_value_loss() {
        let layout = BatchLayout::new(2, 4, vec![0, 1], vec![None, None, Some(0), Some(1)]).unwrap();
        let s = Tensor::<f64>::matrix(2, 4, vec![0.9, 0.1, 0.5, -0.3, 0.2, 0.7, 0.1, 0.65]).unwrap();
        let mut g = Graph::new();
        let sn = g.param("s", s.clone(), true).unwrap();
        let lt = g.param("log_tau", Tensor::scalar(0.07f64.ln()), true).unwrap();
        let loss = contrastive_loss_node(&mut g, sn, lt, &layout).unwrap();
        let want = contrastive_loss(&s, &layout, 0.07).unwrap();
        assert!((g.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn layout_validation() {
        assert!(BatchLayout::new(2, 1, vec![0, 0], vec![None]).is_err());
        assert!(BatchLayout::new(2, 2, vec![0, 0], vec![None, None]).is_err());
        assert!(BatchLayout::new(1, 2, vec![0], vec![Some(0), Some(0)]).is_err());
        let l = BatchLayout::new(2, 4, vec![0, 1], vec![None, None, Some(0), Some(0)]).unwrap();
        assert!(l.validate_pretrain().is_err());
        let l = BatchLayout::new(2, 4, vec![0, 1], vec![None, None, Some(0), Some(1)]).unwrap();
        l.validate_pretrain().unwrap();
        BatchLayout::in_batch(5).validate_pretrain().unwrap();
    }
}
