use std::collections::BTreeSet;

use crate::graph::Graph;
use crate::rng::{derive_seed, gaussian, seeded};
use crate::scalar::Real;
use crate::tensor::Tensor;

use super::forward::head_nodes;
use super::{EncoderConfig, EncoderError, LoraAdapter};

/// Names of the linear maps inside one attention block, in storage order.
pub const LINEAR_NAMES: [&str; 6] = ["wq", "wk", "wv", "wo", "w1", "w2"];

const INIT_STD: f64 = 0.02;
const DEFAULT_TAU: f64 = 0.07;

/// One attention block. Linear maps are stored `[d_in × d_out]` and applied as `x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
}

impl<T: Real> LayerParams<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        Some(match name {
            "wq" => &self.wq,
            "wk" => &self.wk,
            "wv" => &self.wv,
            "wo" => &self.wo,
            "w1" => &self.w1,
            "w2" => &self.w2,
            _ => return None,
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        Some(match name {
            "wq" => &mut self.wq,
            "wk" => &mut self.wk,
            "wv" => &mut self.wv,
            "wo" => &mut self.wo,
            "w1" => &mut self.w1,
            "w2" => &mut self.w2,
            _ => return None,
        })
    }

    fn all_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 6] {
        let LayerParams { wq, wk, wv, wo, w1, w2 } = self;
        [("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo), ("w1", w1), ("w2", w2)]
    }
}

/// All trainable state of the encoder.
///
/// The projection head computes `x + A · SELU(B · x)` with
/// `head_b: [head_hidden × d_model]` and `head_a: [d_model × head_hidden]`.
/// The temperature lives in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub head_a: Tensor<T>,
    pub head_b: Tensor<T>,
    pub log_tau: Tensor<T>,
    pub lora: Option<LoraAdapter<T>>,
    /// Names of tensors that never receive gradients.
    pub frozen: BTreeSet<String>,
}

impl<T: Real> EncoderParams<T> {
    /// Deterministic initialization: Gaussian weights (std 0.02), a zero
    /// `head_b` so the head starts as the identity, and `τ = 0.07`.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let d = config.d_model;
        let mut stream = 0u64;
        let mut next = |shape: &[usize]| {
            stream += 1;
            gaussian::<T>(&mut seeded(derive_seed(seed, stream)), shape, INIT_STD)
        };
        let tok_emb = next(&[config.vocab_size, d]);
        let pos_emb = next(&[config.max_seq, d]);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                wq: next(&[d, d]),
                wk: next(&[d, d]),
                wv: next(&[d, d]),
                wo: next(&[d, d]),
                w1: next(&[d, config.ffn_hidden]),
                w2: next(&[config.ffn_hidden, d]),
            })
            .collect();
        let head_a = next(&[d, config.head_hidden]);
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            head_a,
            head_b: Tensor::zeros(&[config.head_hidden, d]),
            log_tau: Tensor::scalar(T::lit(DEFAULT_TAU.ln())),
            lora: None,
            frozen: BTreeSet::new(),
        })
    }

    pub fn tau(&self) -> T {
        self.log_tau.item().exp()
    }

    pub fn set_tau(&mut self, tau: f64) {
        self.log_tau = Tensor::scalar(T::lit(tau.ln()));
    }

    /// Names of the non-adapter tensors in canonical order.
    pub fn base_names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for i in 0..self.layers.len() {
            names.extend(LINEAR_NAMES.iter().map(|n| format!("layers.{i}.{n}")));
        }
        names.extend(["head.a", "head.b", "log_tau"].map(String::from));
        names
    }

    /// Every tensor with its canonical name: base tensors, then adapter pairs.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for n in LINEAR_NAMES {
                out.push((format!("layers.{i}.{n}"), layer.get(n).unwrap()));
            }
        }
        out.push(("head.a".into(), &self.head_a));
        out.push(("head.b".into(), &self.head_b));
        out.push(("log_tau".into(), &self.log_tau));
        if let Some(lora) = &self.lora {
            for (target, pair) in &lora.pairs {
                out.push((format!("lora.{target}.down"), &pair.down));
                out.push((format!("lora.{target}.up"), &pair.up));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (n, t) in layer.all_mut() {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("head.a".into(), &mut self.head_a));
        out.push(("head.b".into(), &mut self.head_b));
        out.push(("log_tau".into(), &mut self.log_tau));
        if let Some(lora) = &mut self.lora {
            for (target, pair) in lora.pairs.iter_mut() {
                out.push((format!("lora.{target}.down"), &mut pair.down));
                out.push((format!("lora.{target}.up"), &mut pair.up));
            }
        }
        out
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.named().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn linear(&self, target: &str) -> Option<&Tensor<T>> {
        let rest = target.strip_prefix("layers.")?;
        let (idx, name) = rest.split_once('.')?;
        self.layers.get(idx.parse::<usize>().ok()?)?.get(name)
    }

    pub fn linear_mut(&mut self, target: &str) -> Option<&mut Tensor<T>> {
        let rest = target.strip_prefix("layers.")?;
        let (idx, name) = rest.split_once('.')?;
        self.layers.get_mut(idx.parse::<usize>().ok()?)?.get_mut(name)
    }

    /// Every linear map inside the blocks; embeddings and head excluded.
    pub fn linear_targets(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| LINEAR_NAMES.iter().map(move |n| format!("layers.{i}.{n}")))
            .collect()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// Freezes every non-adapter tensor.
    pub fn freeze_base(&mut self) {
        self.frozen.extend(self.base_names());
    }

    pub fn freeze(&mut self, name: &str) {
        self.frozen.insert(name.to_string());
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// `x + A · SELU(B · x)` for one `d_model` vector.
    pub fn mlp_head(&self, x: &[T]) -> Result<Vec<T>, EncoderError> {
        let mut g = Graph::new();
        let xn = g.constant(Tensor::new(vec![1, x.len()], x.to_vec())?);
        let a = g.constant(self.head_a.clone());
        let b = g.constant(self.head_b.clone());
        let y = head_nodes(&mut g, xn, a, b)?;
        Ok(g.value(y).data().to_vec())
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        EncoderParams {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    w1: l.w1.cast(),
                    w2: l.w2.cast(),
                })
                .collect(),
            head_a: self.head_a.cast(),
            head_b: self.head_b.cast(),
            log_tau: self.log_tau.cast(),
            lora: self.lora.as_ref().map(LoraAdapter::cast),
            frozen: self.frozen.clone(),
        }
    }
}
