use std::collections::BTreeMap;

use crate::rng::{derive_seed, gaussian, seeded};
use crate::scalar::Real;
use crate::tensor::Tensor;

use super::{EncoderError, EncoderParams};

/// Low-rank factors for one target weight `W: [d_in × d_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<T> {
    /// `[d_in × r]`
    pub down: Tensor<T>,
    /// `[r × d_out]`
    pub up: Tensor<T>,
}

/// Adapter whose effective update on each target is `(alpha / rank) · down · up`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub rank: usize,
    pub alpha: f64,
    /// Keyed by target name, e.g. `layers.0.wq`.
    pub pairs: BTreeMap<String, LoraPair<T>>,
}

impl<T: Real> LoraAdapter<T> {
    /// Gaussian `down` (std `1/√d_in`) and zero `up`, so the adapter starts as a no-op.
    pub fn init(params: &EncoderParams<T>, rank: usize, alpha: f64, seed: u64) -> Result<Self, EncoderError> {
        if rank == 0 {
            return Err(EncoderError::InvalidConfig("LoRA rank must be >= 1".into()));
        }
        let mut pairs = BTreeMap::new();
        for (i, target) in params.linear_targets().into_iter().enumerate() {
            let w = params
                .linear(&target)
                .ok_or_else(|| EncoderError::MissingTensor(target.clone()))?;
            let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
            let mut rng = seeded(derive_seed(seed, 1000 + i as u64));
            let down = gaussian(&mut rng, &[d_in, rank], 1.0 / (d_in as f64).sqrt());
            pairs.insert(
                target,
                LoraPair {
                    down,
                    up: Tensor::zeros(&[rank, d_out]),
                },
            );
        }
        Ok(Self { rank, alpha, pairs })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `(alpha / r) · down · up` for one target.
    pub fn delta(&self, target: &str) -> Result<Tensor<T>, EncoderError> {
        let pair = self
            .pairs
            .get(target)
            .ok_or_else(|| EncoderError::MissingTensor(format!("lora.{target}")))?;
        let s = T::lit(self.scale());
        Ok(pair.down.matmul(&pair.up)?.map(|v| v * s))
    }

    pub fn cast<U: Real>(&self) -> LoraAdapter<U> {
        LoraAdapter {
            rank: self.rank,
            alpha: self.alpha,
            pairs: self
                .pairs
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        LoraPair {
                            down: p.down.cast(),
                            up: p.up.cast(),
                        },
                    )
                })
                .collect(),
        }
    }
}

impl<T: Real> EncoderParams<T> {
    /// Attaches a fresh adapter on every block linear map.
    pub fn attach_lora(&mut self, rank: usize, alpha: f64, seed: u64) -> Result<(), EncoderError> {
        self.lora = Some(LoraAdapter::init(self, rank, alpha, seed)?);
        Ok(())
    }

    /// Folds the adapter into its targets (`W ← W + (α/r)·down·up`) and drops it.
    pub fn lora_fuse(&self) -> Result<Self, EncoderError> {
        let lora = self.lora.as_ref().ok_or(EncoderError::NoAdapter)?;
        let mut fused = self.clone();
        for target in lora.pairs.keys() {
            let delta = lora.delta(target)?;
            let w = fused
                .linear_mut(target)
                .ok_or_else(|| EncoderError::MissingTensor(target.clone()))?;
            // Same operation order as the graph's effective-weight path.
            let data = w.data().iter().zip(delta.data()).map(|(&p, &q)| p + q).collect();
            *w = Tensor::new(w.shape().to_vec(), data)?;
        }
        fused.lora = None;
        fused.frozen.retain(|n| !n.starts_with("lora."));
        Ok(fused)
    }
}
