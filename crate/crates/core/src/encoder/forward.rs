use std::collections::BTreeMap;

use crate::graph::{Graph, NodeId};
use crate::scalar::Real;
use crate::tensor::Tensor;

use super::{AttnMode, EncoderConfig, EncoderError, EncoderParams, TokenSeq, LINEAR_NAMES, PAD};

/// `x + SELU(x · Bᵀ) · Aᵀ` for row vectors `x: [n × d]`.
pub(crate) fn head_nodes<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    head_a: NodeId,
    head_b: NodeId,
) -> Result<NodeId, EncoderError> {
    let bx = g.matmul_nt(x, head_b)?;
    let act = g.selu(bx)?;
    let abx = g.matmul_nt(act, head_a)?;
    Ok(g.add(x, abx)?)
}

/// Encoder parameters bound as leaves of one graph.
pub struct BoundEncoder {
    config: EncoderConfig,
    tok_emb: NodeId,
    pos_emb: NodeId,
    layers: Vec<[NodeId; 6]>,
    head_a: NodeId,
    head_b: NodeId,
    log_tau: NodeId,
    lora: BTreeMap<String, (NodeId, NodeId)>,
    lora_scale: f64,
    effective_lora: Option<Vec<[NodeId; 6]>>,
}

impl BoundEncoder {
    /// Adds every tensor of `params` as a named leaf. With `trainable`, leaves
    /// not listed in `params.frozen` receive gradients; otherwise all are frozen.
    pub fn bind<T: Real>(
        g: &mut Graph<T>,
        params: &EncoderParams<T>,
        trainable: bool,
    ) -> Result<Self, EncoderError> {
        let mut leaf = |name: &str, t: &Tensor<T>| -> Result<NodeId, EncoderError> {
            Ok(g.param(name, t.clone(), trainable && !params.is_frozen(name))?)
        };
        let tok_emb = leaf("tok_emb", &params.tok_emb)?;
        let pos_emb = leaf("pos_emb", &params.pos_emb)?;
        let mut layers = Vec::with_capacity(params.layers.len());
        for (i, layer) in params.layers.iter().enumerate() {
            let ids = LINEAR_NAMES
                .iter()
                .map(|n| leaf(&format!("layers.{i}.{n}"), layer.get(n).unwrap()))
                .collect::<Result<Vec<_>, _>>()?;
            layers.push(<[NodeId; 6]>::try_from(ids).expect("six linear maps"));
        }
        let head_a = leaf("head.a", &params.head_a)?;
        let head_b = leaf("head.b", &params.head_b)?;
        let log_tau = leaf("log_tau", &params.log_tau)?;
        let mut lora = BTreeMap::new();
        let mut lora_scale = 0.0;
        if let Some(adapter) = &params.lora {
            lora_scale = adapter.scale();
            for (target, pair) in &adapter.pairs {
                let d = leaf(&format!("lora.{target}.down"), &pair.down)?;
                let u = leaf(&format!("lora.{target}.up"), &pair.up)?;
                lora.insert(target.clone(), (d, u));
            }
        }
        Ok(Self {
            config: params.config.clone(),
            tok_emb,
            pos_emb,
            layers,
            head_a,
            head_b,
            log_tau,
            lora,
            lora_scale,
            effective_lora: None,
        })
    }

    pub fn log_tau(&self) -> NodeId {
        self.log_tau
    }

    pub fn has_lora(&self) -> bool {
        !self.lora.is_empty()
    }

    fn weights<T: Real>(&mut self, g: &mut Graph<T>, use_lora: bool) -> Result<Vec<[NodeId; 6]>, EncoderError> {
        if !use_lora || self.lora.is_empty() {
            return Ok(self.layers.clone());
        }
        if let Some(w) = &self.effective_lora {
            return Ok(w.clone());
        }
        let s = T::lit(self.lora_scale);
        let mut out = self.layers.clone();
        for (i, layer) in out.iter_mut().enumerate() {
            for (slot, n) in LINEAR_NAMES.iter().enumerate() {
                if let Some(&(down, up)) = self.lora.get(&format!("layers.{i}.{n}")) {
                    let du = g.matmul(down, up)?;
                    let scaled = g.scale(du, s)?;
                    layer[slot] = g.add(layer[slot], scaled)?;
                }
            }
        }
        self.effective_lora = Some(out.clone());
        Ok(out)
    }

    fn check(&self, seq: &TokenSeq) -> Result<(), EncoderError> {
        if seq.is_empty() {
            return Err(EncoderError::EmptySequence);
        }
        if seq.len() > self.config.max_seq {
            return Err(EncoderError::SequenceTooLong {
                len: seq.len(),
                max: self.config.max_seq,
            });
        }
        if let Some(&bad) = seq.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(EncoderError::UnknownToken {
                token: bad,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Encodes a batch into unit rows `[B × d_model]`.
    ///
    /// Sequences are right-padded with PAD; padded positions are excluded
    /// from attention keys and from the mean pool.
    pub fn encode_batch<T: Real>(
        &mut self,
        g: &mut Graph<T>,
        seqs: &[TokenSeq],
        use_lora: bool,
    ) -> Result<NodeId, EncoderError> {
        if seqs.is_empty() {
            return Err(EncoderError::EmptySequence);
        }
        for s in seqs {
            self.check(s)?;
        }
        let cfg = self.config.clone();
        let b = seqs.len();
        let l = seqs.iter().map(|s| s.len()).max().unwrap();
        let d = cfg.d_model;
        let dh = cfg.head_dim();

        let mut ids = Vec::with_capacity(b * l);
        let mut positions = Vec::with_capacity(b * l);
        let mut valid = Vec::with_capacity(b * l);
        for s in seqs {
            for p in 0..l {
                let tok = s.get(p).copied();
                ids.push(tok.unwrap_or(PAD) as usize);
                positions.push(p);
                valid.push(tok.is_some());
            }
        }
        let mut attn_mask = Vec::with_capacity(b * l * l);
        for bi in 0..b {
            for i in 0..l {
                for j in 0..l {
                    let causal_ok = cfg.attn_mode == AttnMode::Bidirectional || j <= i;
                    attn_mask.push(valid[bi * l + j] && causal_ok);
                }
            }
        }

        let weights = self.weights(g, use_lora)?;
        let tok = g.embedding(self.tok_emb, ids, vec![b, l])?;
        let pos = g.embedding(self.pos_emb, positions, vec![b, l])?;
        let mut x = g.add(tok, pos)?;
        let inv_sqrt = T::one() / T::from_usize(dh).unwrap().sqrt();

        for w in &weights {
            let [wq, wk, wv, wo, w1, w2] = *w;
            let mut attn_out: Option<NodeId> = None;
            for h in 0..cfg.n_heads {
                let wq_h = g.narrow(wq, 1, h * dh, dh)?;
                let wk_h = g.narrow(wk, 1, h * dh, dh)?;
                let wv_h = g.narrow(wv, 1, h * dh, dh)?;
                let wo_h = g.narrow(wo, 0, h * dh, dh)?;
                let q = g.matmul(x, wq_h)?;
                let k = g.matmul(x, wk_h)?;
                let v = g.matmul(x, wv_h)?;
                let scores = g.matmul_nt(q, k)?;
                let scores = g.scale(scores, inv_sqrt)?;
                let probs = g.softmax(scores, Some(attn_mask.clone()))?;
                let ctx = g.matmul(probs, v)?;
                let out = g.matmul(ctx, wo_h)?;
                attn_out = Some(match attn_out {
                    Some(acc) => g.add(acc, out)?,
                    None => out,
                });
            }
            if let Some(a) = attn_out {
                x = g.add(x, a)?;
            }
            let hidden = g.matmul(x, w1)?;
            let hidden = g.selu(hidden)?;
            let ff = g.matmul(hidden, w2)?;
            x = g.add(x, ff)?;
        }

        let pooled = g.masked_mean(x, 1, valid)?;
        debug_assert_eq!(g.value(pooled).shape(), &[b, d]);
        let projected = head_nodes(g, pooled, self.head_a, self.head_b)?;
        Ok(g.l2_normalize(projected)?)
    }
}

/// Unit-norm embedding of a single sequence.
pub fn encode<T: Real>(params: &EncoderParams<T>, tokens: &TokenSeq, use_lora: bool) -> Result<Vec<T>, EncoderError> {
    let mut g = Graph::new();
    let mut enc = BoundEncoder::bind(&mut g, params, false)?;
    let out = enc.encode_batch(&mut g, std::slice::from_ref(tokens), use_lora)?;
    Ok(g.value(out).data().to_vec())
}

/// Embeds many sequences with frozen parameters, `batch` at a time.
/// Returns `[n × d_model]`.
pub fn embed<T: Real>(
    params: &EncoderParams<T>,
    seqs: &[TokenSeq],
    use_lora: bool,
    batch: usize,
) -> Result<Tensor<T>, EncoderError> {
    let d = params.config.d_model;
    let mut data = Vec::with_capacity(seqs.len() * d);
    for chunk in seqs.chunks(batch.max(1)) {
        let mut g = Graph::new();
        let mut enc = BoundEncoder::bind(&mut g, params, false)?;
        let out = enc.encode_batch(&mut g, chunk, use_lora)?;
        data.extend_from_slice(g.value(out).data());
    }
    Ok(Tensor::new(vec![seqs.len(), d], data)?)
}
