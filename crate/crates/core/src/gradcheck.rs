//! Central finite-difference verification of graph gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, NodeId};
use crate::scalar::Real;
use crate::tensor::{Result, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub h: f64,
    pub rel_tol: f64,
    /// Probe at most this many coordinates per leaf (chosen by `seed`); `None` checks all.
    pub max_coords_per_leaf: Option<usize>,
    pub seed: u64,
}

impl GradcheckOptions {
    pub fn new(h: f64, rel_tol: f64) -> Self {
        Self {
            h,
            rel_tol,
            max_coords_per_leaf: None,
            seed: 0,
        }
    }

    pub fn probes(mut self, n: usize, seed: u64) -> Self {
        self.max_coords_per_leaf = Some(n);
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeafReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    /// Coordinates whose relative error exceeded the tolerance.
    pub failures: Vec<usize>,
    /// Coordinates whose `±h` stencil crossed a SELU kink and were re-probed
    /// with a smaller step.
    pub refined: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub per_leaf: Vec<LeafReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.per_leaf.iter().all(|l| l.failures.is_empty())
    }

    pub fn failing_leaves(&self) -> Vec<&str> {
        self.per_leaf
            .iter()
            .filter(|l| !l.failures.is_empty())
            .map(|l| l.name.as_str())
            .collect()
    }
}

/// Relative error with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Step shrinks tried when a stencil crosses a kink: `h`, `h/10`, ..., `h/1000`.
const REFINE_STEPS: usize = 4;

/// Compares backward gradients of `loss` against `(f(θ+h) − f(θ−h)) / 2h` for
/// every trainable leaf. Leaf values are restored before returning.
///
/// The difference quotient only estimates the derivative when `θ±h` stay on the
/// same smooth piece as `θ`. If a SELU input changes sign inside the stencil,
/// `h` is divided by 10 until it does not (at most three times).
pub fn gradcheck<T: Real>(graph: &mut Graph<T>, loss: NodeId, opts: GradcheckOptions) -> Result<GradcheckReport> {
    graph.recompute()?;
    let grads = graph.backward(loss)?;
    let signs = graph.selu_signs();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut per_leaf = Vec::new();
    let mut overall = 0.0f64;

    for (name, id) in graph.trainable_leaves() {
        let base = graph.value(id).clone();
        let n = base.numel();
        let coords: Vec<usize> = match opts.max_coords_per_leaf {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let analytic = grads.get(&name);
        let mut report = LeafReport {
            name: name.clone(),
            checked: coords.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            failures: Vec::new(),
            refined: Vec::new(),
        };
        for &c in &coords {
            let mut step = opts.h;
            let mut numeric = 0.0;
            for attempt in 0..REFINE_STEPS {
                let (fp, sp) = probe(graph, id, &base, c, T::lit(step), loss)?;
                let (fm, sm) = probe(graph, id, &base, c, T::lit(-step), loss)?;
                numeric = (fp - fm) / (2.0 * step);
                if sp == signs && sm == signs {
                    break;
                }
                if attempt == 0 {
                    report.refined.push(c);
                }
                step /= 10.0;
            }
            let a = analytic.map_or(0.0, |g| g.data()[c].to_f64_lossy());
            let err = relative_error(a, numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_index = c;
            }
            if err > opts.rel_tol {
                report.failures.push(c);
            }
        }
        graph.set_value(id, base)?;
        overall = overall.max(report.max_rel_err);
        per_leaf.push(report);
    }
    graph.recompute()?;
    Ok(GradcheckReport {
        max_rel_err: overall,
        per_leaf,
    })
}

/// Loss and SELU sign pattern with coordinate `c` of leaf `id` shifted by `delta`.
fn probe<T: Real>(
    graph: &mut Graph<T>,
    id: NodeId,
    base: &Tensor<T>,
    c: usize,
    delta: T,
    loss: NodeId,
) -> Result<(f64, Vec<bool>)> {
    let mut shifted = base.clone();
    shifted.data_mut()[c] += delta;
    graph.set_value(id, shifted)?;
    graph.recompute()?;
    Ok((graph.value(loss).item().to_f64_lossy(), graph.selu_signs()))
}
