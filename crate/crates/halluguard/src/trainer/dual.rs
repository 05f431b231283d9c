//! Dual sentence encoder for cross-lingual similarity.
//!
//! Each side has its own embedding table; a single shared self-attention
//! layer plus layer norm feeds mean pooling and length normalization, so a
//! sentence maps to a unit vector and similarity is a plain dot product.
//! Trained with a bidirectional additive-margin softmax over in-batch
//! negatives.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::TranslationRecord;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::transformer::checkpoint::{load_params, save_params, KIND_DUAL_ENCODER};
use crate::transformer::{sinusoidal_positions, GraphParams, LN_EPS, RESERVED_TOKENS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

impl Side {
    fn table(self) -> &'static str {
        match self {
            Side::Source => "src.embed",
            Side::Target => "tgt.embed",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DualEncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub max_len: usize,
}

impl Default for DualEncoderConfig {
    fn default() -> Self {
        DualEncoderConfig { vocab_size: 64, d_model: 32, max_len: 32 }
    }
}

impl DualEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= RESERVED_TOKENS {
            return Err(Error::invalid("vocab_size must exceed the reserved range"));
        }
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(Error::invalid("d_model must be even and positive"));
        }
        if self.max_len == 0 {
            return Err(Error::invalid("max_len must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub config: DualEncoderConfig,
    params: BTreeMap<String, Tensor>,
}

impl DualEncoder {
    pub fn new(config: DualEncoderConfig, rng: &Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut params = BTreeMap::new();
        for table in ["src.embed", "tgt.embed"] {
            let mut r = rng.derive(table);
            params.insert(
                table.to_string(),
                Tensor::rand_normal(&mut r, vec![config.vocab_size, d], 1.0 / (d as f64).sqrt()),
            );
        }
        for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            let mut r = rng.derive(w);
            let limit = (6.0 / (2 * d) as f64).sqrt();
            params.insert(w.to_string(), Tensor::rand_uniform(&mut r, vec![d, d], -limit, limit));
        }
        for b in ["attn.bq", "attn.bk", "attn.bv", "attn.bo"] {
            params.insert(b.to_string(), Tensor::zeros(vec![1, d]));
        }
        params.insert("ln.gain".to_string(), Tensor::full(vec![1, d], 1.0));
        params.insert("ln.bias".to_string(), Tensor::zeros(vec![1, d]));
        Ok(DualEncoder { config, params })
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("cannot embed an empty sentence"));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::Overlength { len: tokens.len(), max: self.config.max_len });
        }
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::OutOfVocab { token: t, vocab_size: self.config.vocab_size });
            }
        }
        Ok(())
    }

    /// Unit-norm sentence embedding as a 1 x d graph node.
    fn embed_graph(
        &self,
        g: &mut Graph,
        p: &GraphParams,
        side: Side,
        tokens: &[u32],
    ) -> Result<Var> {
        self.check_tokens(tokens)?;
        let d = self.config.d_model;
        let e = g.embed(p.var(side.table()), tokens)?;
        let e = g.scale(e, (d as f64).sqrt())?;
        let pos = g.leaf(sinusoidal_positions(tokens.len(), d, 0))?;
        let x = g.add(e, pos)?;
        let linear = |g: &mut Graph, x: Var, w: &str, b: &str| -> Result<Var> {
            let xw = g.matmul(x, p.var(w))?;
            g.add_row(xw, p.var(b))
        };
        let q = linear(g, x, "attn.wq", "attn.bq")?;
        let k = linear(g, x, "attn.wk", "attn.bk")?;
        let v = linear(g, x, "attn.wv", "attn.bv")?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
        let probs = g.masked_softmax(scores, None)?;
        let ctx = g.matmul(probs, v)?;
        let ctx = linear(g, ctx, "attn.wo", "attn.bo")?;
        let h = g.add(x, ctx)?;
        let h = g.layer_norm(h, p.var("ln.gain"), p.var("ln.bias"), LN_EPS)?;
        let pooled = g.mean_rows(h)?;
        g.normalize_rows(pooled)
    }

    /// Unit-norm sentence embedding as plain numbers.
    pub fn embed(&self, side: Side, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = GraphParams::from_tensors(&mut g, &self.params)?;
        let v = self.embed_graph(&mut g, &p, side, tokens)?;
        Ok(g.value(v).data().to_vec())
    }

    /// Cosine similarity between a source sentence and a target-side
    /// sentence; both embeddings are unit vectors so this is their dot
    /// product, clamped against rounding spill.
    pub fn cosine(&self, src: &[u32], tgt: &[u32]) -> Result<f64> {
        let u = self.embed(Side::Source, src)?;
        let v = self.embed(Side::Target, tgt)?;
        let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        Ok(dot.clamp(-1.0, 1.0))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let config = serde_json::to_value(&self.config).map_err(|e| Error::json(path, e))?;
        save_params(path, KIND_DUAL_ENCODER, &config, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (kind, config, params) = load_params(path)?;
        if kind != KIND_DUAL_ENCODER {
            return Err(Error::CorruptFile {
                path: path.to_path_buf(),
                reason: format!("expected a {KIND_DUAL_ENCODER} checkpoint, found {kind:?}"),
            });
        }
        let config: DualEncoderConfig =
            serde_json::from_value(config).map_err(|e| Error::json(path, e))?;
        config.validate()?;
        let fresh = DualEncoder::new(config.clone(), &Rng::new(0))?;
        for (name, t) in &fresh.params {
            let got = params
                .get(name)
                .ok_or_else(|| Error::CorruptFile {
                    path: path.to_path_buf(),
                    reason: format!("missing parameter {name}"),
                })?;
            if got.shape() != t.shape() {
                return Err(Error::CorruptFile {
                    path: path.to_path_buf(),
                    reason: format!("parameter {name} has shape {:?}", got.shape()),
                });
            }
        }
        if params.len() != fresh.params.len() {
            return Err(Error::CorruptFile {
                path: path.to_path_buf(),
                reason: "unexpected extra parameters".into(),
            });
        }
        Ok(DualEncoder { config, params })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualTrainSpec {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Additive margin subtracted from the aligned-pair logit.
    pub margin: f64,
    /// Temperature multiplier applied to cosines before the softmax.
    pub scale: f64,
    pub seed: u64,
    pub log_every: u64,
}

impl Default for DualTrainSpec {
    fn default() -> Self {
        DualTrainSpec {
            steps: 300,
            batch_size: 8,
            lr: 2e-3,
            margin: 0.2,
            scale: 16.0,
            seed: 7,
            log_every: 50,
        }
    }
}

impl DualTrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2 for in-batch negatives"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("lr must be finite and positive"));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::invalid("margin must lie in [0, 1)"));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::invalid("scale must be finite and positive"));
        }
        if self.log_every == 0 {
            return Err(Error::invalid("log_every must be at least 1"));
        }
        Ok(())
    }
}

/// Additive-margin softmax over one batch, averaged over both directions.
fn batch_loss_graph(
    encoder: &DualEncoder,
    g: &mut Graph,
    p: &GraphParams,
    batch: &[&TranslationRecord],
    spec: &DualTrainSpec,
) -> Result<Var> {
    let b = batch.len();
    let mut us = Vec::with_capacity(b);
    let mut vs = Vec::with_capacity(b);
    for record in batch {
        us.push(encoder.embed_graph(g, p, Side::Source, &record.src)?);
        vs.push(encoder.embed_graph(g, p, Side::Target, &record.reference)?);
    }
    let u = g.concat_rows(&us)?;
    let v = g.concat_rows(&vs)?;
    let vt = g.transpose(v)?;
    let cos = g.matmul(u, vt)?;
    // Margin matrix: -scale * margin on the diagonal.
    let mut m = Tensor::zeros(vec![b, b]);
    for i in 0..b {
        m.data_mut()[i * b + i] = -spec.scale * spec.margin;
    }
    let margin = g.leaf(m)?;
    let targets: Vec<u32> = (0..b as u32).collect();
    let forward = {
        let logits = g.scale(cos, spec.scale)?;
        let logits = g.add(logits, margin)?;
        let logp = g.log_softmax(logits)?;
        g.nll(logp, &targets, 0.0)?
    };
    let backward = {
        let cos_t = g.transpose(cos)?;
        let logits = g.scale(cos_t, spec.scale)?;
        let logits = g.add(logits, margin)?;
        let logp = g.log_softmax(logits)?;
        g.nll(logp, &targets, 0.0)?
    };
    let sum = g.add(forward, backward)?;
    g.scale(sum, 0.5)
}

pub fn train_dual_encoder(
    encoder: &mut DualEncoder,
    train: &[TranslationRecord],
    spec: &DualTrainSpec,
) -> Result<Vec<super::LossRow>> {
    spec.validate()?;
    if spec.steps > 0 && train.len() < spec.batch_size {
        return Err(Error::data(format!(
            "need at least {} training pairs, have {}",
            spec.batch_size,
            train.len()
        )));
    }
    let order_root = Rng::new(spec.seed).derive("dual-order");
    let mut adam = Adam::new(spec.lr);
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    let mut cursor = 0usize;
    let mut rows = Vec::new();
    let mut window = (0.0, 0usize);
    for step in 1..=spec.steps {
        let mut batch = Vec::with_capacity(spec.batch_size);
        while batch.len() < spec.batch_size {
            if cursor >= order.len() {
                order = (0..train.len()).collect();
                order_root.derive_u64(epoch).shuffle(&mut order);
                epoch += 1;
                cursor = 0;
            }
            batch.push(&train[order[cursor]]);
            cursor += 1;
        }
        let mut g = Graph::new();
        let p = GraphParams::from_tensors(&mut g, &encoder.params)?;
        let loss = match batch_loss_graph(encoder, &mut g, &p, &batch, spec) {
            Ok(v) => v,
            Err(Error::NonFinite(what)) => {
                return Err(Error::Diverged { step, reason: format!("non-finite {what}") })
            }
            Err(e) => return Err(e),
        };
        g.backward(loss)?;
        let loss_value = g.scalar_value(loss);
        for (name, var) in p.iter() {
            let grad = g.grad(*var).to_vec();
            let params = encoder
                .params
                .get_mut(name)
                .expect("graph params mirror encoder params");
            adam.update(name, params.data_mut(), &grad, spec.lr)?;
        }
        window.0 += loss_value;
        window.1 += 1;
        if step % spec.log_every == 0 || step == spec.steps {
            rows.push(super::LossRow {
                step,
                train_loss: window.0 / window.1 as f64,
                dev_loss: None,
            });
            log::info!("dual step {step}: loss {:.4}", window.0 / window.1 as f64);
            window = (0.0, 0);
        }
    }
    Ok(rows)
}
