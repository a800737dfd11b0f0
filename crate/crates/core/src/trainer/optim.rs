use std::collections::{BTreeMap, BTreeSet};

use crate::encoder::EncoderParams;
use crate::graph::Gradients;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const ADAM_EPS: f64 = 1e-8;

/// One AdamW update of a single tensor at step `t ≥ 1`.
///
/// The decay term `lr·wd·w` is taken from the pre-update weights and applied
/// separately from the bias-corrected adaptive step.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Real>(
    w: &mut Tensor<T>,
    g: &Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    t: u64,
    lr: f64,
    betas: (f64, f64),
    weight_decay: f64,
) {
    assert!(t >= 1, "AdamW step count starts at 1");
    assert_eq!(w.shape(), g.shape(), "gradient shape");
    let (b1, b2) = (T::lit(betas.0), T::lit(betas.1));
    let c1 = T::one() - T::lit(betas.0.powi(t as i32));
    let c2 = T::one() - T::lit(betas.1.powi(t as i32));
    let lr = T::lit(lr);
    let decay = lr * T::lit(weight_decay);
    let eps = T::lit(ADAM_EPS);
    let ws = w.data_mut();
    for (((wi, &gi), mi), vi) in ws.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
        *mi = b1 * *mi + (T::one() - b1) * gi;
        *vi = b2 * *vi + (T::one() - b2) * gi * gi;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        let decayed = *wi - decay * *wi;
        *wi = decayed - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient contained NaN or infinity; nothing was changed.
    Diverged,
}

/// AdamW state over named encoder tensors.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub betas: (f64, f64),
    pub weight_decay: f64,
    /// Tensors updated without weight decay.
    pub no_decay: BTreeSet<String>,
    t: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> AdamW<T> {
    pub fn new(betas: (f64, f64), weight_decay: f64) -> Self {
        Self {
            betas,
            weight_decay,
            no_decay: ["log_tau".to_string()].into(),
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Updates every non-frozen tensor that has a gradient.
    pub fn step(&mut self, params: &mut EncoderParams<T>, grads: &Gradients<T>, lr: f64) -> StepOutcome {
        if !grads.all_finite() {
            return StepOutcome::Diverged;
        }
        self.t += 1;
        let frozen = params.frozen.clone();
        for (name, w) in params.named_mut() {
            if frozen.contains(&name) {
                continue;
            }
            let Some(g) = grads.get(&name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(w.shape()), Tensor::zeros(w.shape())));
            let wd = if self.no_decay.contains(&name) { 0.0 } else { self.weight_decay };
            adamw_update(w, g, m, v, self.t, lr, self.betas, wd);
        }
        StepOutcome::Applied
    }
}

/// Number of warmup steps: `ceil(warmup_frac · total_steps)`.
pub fn warmup_steps(total_steps: usize, warmup_frac: f64) -> usize {
    (warmup_frac * total_steps as f64).ceil() as usize
}

/// Linear warmup `lr·(step+1)/W` for `step < W`, then constant `lr`.
pub fn lr_schedule(step: usize, total_steps: usize, lr: f64, warmup_frac: f64) -> f64 {
    let w = warmup_steps(total_steps, warmup_frac);
    if step < w {
        lr * (step + 1) as f64 / w as f64
    } else {
        lr
    }
}
