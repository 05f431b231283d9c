//! Encoder-decoder transformer with post-layer-norm residual blocks.
//!
//! Two forward paths exist: a graph path (this module) used for training,
//! scoring, and attribution traces, and an incremental path (`incremental`)
//! used for generation. Both are built from the same kernels with the same
//! accumulation order, so they agree bit for bit; tests rely on that.

pub mod checkpoint;
pub mod incremental;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const RESERVED_TOKENS: usize = 3;

/// One epsilon for every layer norm in the model; attribution freezes the
/// recorded variance against the same constant.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ffn: usize,
    pub dropout_rate: f64,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ffn: 256,
            dropout_rate: 0.1,
            max_len: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= RESERVED_TOKENS {
            return Err(Error::invalid(format!(
                "vocab_size {} leaves no room beyond the {} reserved symbols",
                self.vocab_size, RESERVED_TOKENS
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 || self.d_ffn == 0 || self.max_len < 2 {
            return Err(Error::invalid("degenerate model dimensions"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Deterministic dropout: the mask bit for (site, position, unit) is a pure
/// function of the plan's key, independent of evaluation order, so the
/// teacher-forced and incremental paths see identical masks.
#[derive(Debug, Clone)]
pub struct DropoutPlan {
    root: Rng,
    pub rate: f64,
}

impl DropoutPlan {
    pub fn new(rng: &Rng, rate: f64) -> Self {
        DropoutPlan {
            root: rng.clone(),
            rate,
        }
    }

    pub fn from_seed(seed: u64, rate: f64) -> Self {
        DropoutPlan::new(&Rng::new(seed).derive("dropout"), rate)
    }

    fn keep(&self, site: &Rng, index: u64) -> f64 {
        let u = (site.at(index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        if u >= self.rate {
            1.0 / (1.0 - self.rate)
        } else {
            0.0
        }
    }

    /// Mask values for one position of a site laid out as (position × unit).
    pub fn mask_row(&self, site: &str, row: usize, width: usize) -> Vec<f64> {
        let sub = self.root.derive(site);
        (0..width)
            .map(|c| self.keep(&sub, (row * width + c) as u64))
            .collect()
    }

    /// Mask rows [row_offset, row_offset+rows) of a site laid out as
    /// (position × unit).
    pub fn mask(&self, site: &str, rows: usize, cols: usize, row_offset: usize) -> Tensor {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            data.extend(self.mask_row(site, row_offset + r, cols));
        }
        Tensor::matrix(rows, cols, data).expect("mask values are finite")
    }
}

/// Attention weights and surrounding activations for one attention sublayer,
/// recorded during a graph forward; the raw material for attribution.
#[derive(Debug, Clone)]
pub struct AttnRecord {
    /// Per-head row-stochastic attention matrices (queries × keys).
    pub heads: Vec<Tensor>,
    /// Residual-stream input to this sublayer (queries × d_model).
    pub query_input: Tensor,
    /// Token vectors feeding the key/value projections (keys × d_model).
    pub key_input: Tensor,
    /// Sublayer output after the post-norm (queries × d_model).
    pub output: Tensor,
    /// (mean, variance) recorded by the post-norm, one per query row.
    pub ln_stats: Vec<(f64, f64)>,
    /// Parameter names: value/output projections and the post-norm affine.
    pub wv: String,
    pub bv: String,
    pub wo: String,
    pub bo: String,
    pub ln_gain: String,
    pub ln_bias: String,
    pub causal: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub encoder: Vec<AttnRecord>,
    pub decoder_self: Vec<AttnRecord>,
    pub decoder_cross: Vec<AttnRecord>,
}

/// Parameter leaves of one graph, keyed by parameter name.
pub struct GraphParams {
    vars: BTreeMap<String, Var>,
}

impl GraphParams {
    /// Insert every tensor as a graph leaf, keyed by name.
    pub fn from_tensors(g: &mut Graph, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, t) in tensors {
            vars.insert(name.clone(), g.leaf(t.clone())?);
        }
        Ok(GraphParams { vars })
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub config: ModelConfig,
    params: BTreeMap<String, Tensor>,
}

/// Sinusoidal position encodings for positions [offset, offset+len).
pub fn sinusoidal_positions(len: usize, d: usize, offset: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for p in 0..len {
        let pos = (offset + p) as f64;
        for i in 0..d / 2 {
            let angle = pos / 10_000f64.powf(2.0 * i as f64 / d as f64);
            data[p * d + 2 * i] = angle.sin();
            data[p * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::matrix(len, d, data).expect("finite encodings")
}

impl TransformerModel {
    pub fn new(config: ModelConfig, rng: &Rng) -> Result<Self> {
        config.validate()?;
        let mut params = BTreeMap::new();
        let d = config.d_model;
        let v = config.vocab_size;

        // Every parameter draws from its own substream keyed by name, so the
        // initialization is independent of insertion order.
        let embed = |name: &str, params: &mut BTreeMap<String, Tensor>| {
            let mut r = rng.derive(name);
            let t = Tensor::rand_normal(&mut r, vec![v, d], 1.0 / (d as f64).sqrt());
            params.insert(name.to_string(), t);
        };
        embed("src_embed", &mut params);
        embed("tgt_embed", &mut params);

        let linear = |name: &str, d_in: usize, d_out: usize, params: &mut BTreeMap<String, Tensor>| {
            let mut r = rng.derive(name);
            let limit = (6.0 / (d_in + d_out) as f64).sqrt();
            params.insert(
                name.to_string(),
                Tensor::rand_uniform(&mut r, vec![d_in, d_out], -limit, limit),
            );
        };
        let bias = |name: &str, width: usize, params: &mut BTreeMap<String, Tensor>| {
            params.insert(name.to_string(), Tensor::zeros(vec![1, width]));
        };
        let norm = |prefix: &str, params: &mut BTreeMap<String, Tensor>| {
            params.insert(format!("{prefix}.gain"), Tensor::full(vec![1, d], 1.0));
            params.insert(format!("{prefix}.bias"), Tensor::zeros(vec![1, d]));
        };
        let attn = |prefix: &str, params: &mut BTreeMap<String, Tensor>| {
            for w in ["wq", "wk", "wv", "wo"] {
                linear(&format!("{prefix}.{w}"), d, d, params);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                bias(&format!("{prefix}.{b}"), d, params);
            }
        };
        let ffn = |prefix: &str, params: &mut BTreeMap<String, Tensor>| {
            linear(&format!("{prefix}.w1"), d, config.d_ffn, params);
            bias(&format!("{prefix}.b1"), config.d_ffn, params);
            linear(&format!("{prefix}.w2"), config.d_ffn, d, params);
            bias(&format!("{prefix}.b2"), d, params);
        };

        for l in 0..config.n_enc_layers {
            attn(&format!("enc.{l}.attn"), &mut params);
            norm(&format!("enc.{l}.ln1"), &mut params);
            ffn(&format!("enc.{l}.ffn"), &mut params);
            norm(&format!("enc.{l}.ln2"), &mut params);
        }
        for l in 0..config.n_dec_layers {
            attn(&format!("dec.{l}.self"), &mut params);
            norm(&format!("dec.{l}.ln1"), &mut params);
            attn(&format!("dec.{l}.cross"), &mut params);
            norm(&format!("dec.{l}.ln2"), &mut params);
            ffn(&format!("dec.{l}.ffn"), &mut params);
            norm(&format!("dec.{l}.ln3"), &mut params);
        }
        linear("out.w", d, v, &mut params);
        bias("out.b", v, &mut params);

        Ok(TransformerModel { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let fresh = TransformerModel::new(config.clone(), &Rng::new(0))?;
        if fresh.params.len() != params.len() {
            return Err(Error::invalid(format!(
                "parameter set has {} entries, config implies {}",
                params.len(),
                fresh.params.len()
            )));
        }
        for (name, t) in &params {
            let want = fresh
                .params
                .get(name)
                .ok_or_else(|| Error::invalid(format!("unexpected parameter {name}")))?;
            if want.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name}: shape {:?} vs expected {:?}",
                    t.shape(),
                    want.shape()
                )));
            }
        }
        Ok(TransformerModel { config, params })
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Multiply the cross-attention value projections (weights and biases)
    /// of every decoder layer by `lambda`. The λ=0 ablation severs all
    /// source-to-target information flow through cross-attention.
    pub fn scale_cross_value_projections(&mut self, lambda: f64) {
        for l in 0..self.config.n_dec_layers {
            for name in [format!("dec.{l}.cross.wv"), format!("dec.{l}.cross.bv")] {
                let t = self.params.get_mut(&name).expect("cross projection exists");
                for v in t.data_mut() {
                    *v *= lambda;
                }
            }
        }
    }

    fn check_tokens(&self, tokens: &[u32], what: &str) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid(format!("empty {what} sequence")));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::Overlength {
                len: tokens.len(),
                max: self.config.max_len,
            });
        }
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::OutOfVocab {
                    token: t,
                    vocab_size: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    // -- graph construction ----------------------------------------------

    pub fn graph_params(&self, g: &mut Graph) -> Result<GraphParams> {
        GraphParams::from_tensors(g, &self.params)
    }

    fn linear(&self, g: &mut Graph, p: &GraphParams, x: Var, w: &str, b: &str) -> Result<Var> {
        let xw = g.matmul(x, p.var(w))?;
        g.add_row(xw, p.var(b))
    }

    fn dropout(
        &self,
        g: &mut Graph,
        x: Var,
        plan: Option<&DropoutPlan>,
        site: &str,
    ) -> Result<Var> {
        match plan {
            Some(plan) => {
                let (rows, cols) = (g.value(x).rows(), g.value(x).cols());
                let mask = g.leaf(plan.mask(site, rows, cols, 0))?;
                g.mul(x, mask)
            }
            None => Ok(x),
        }
    }

    fn embed_tokens(
        &self,
        g: &mut Graph,
        p: &GraphParams,
        table: &str,
        tokens: &[u32],
        dropout: Option<&DropoutPlan>,
        site: &str,
    ) -> Result<Var> {
        let e = g.embed(p.var(table), tokens)?;
        let e = g.scale(e, (self.config.d_model as f64).sqrt())?;
        let pos = g.leaf(sinusoidal_positions(tokens.len(), self.config.d_model, 0))?;
        let e = g.add(e, pos)?;
        self.dropout(g, e, dropout, site)
    }

    /// Multi-head attention sublayer output (before dropout/residual/norm)
    /// plus the per-head attention matrices.
    fn attention(
        &self,
        g: &mut Graph,
        p: &GraphParams,
        x_q: Var,
        x_kv: Var,
        prefix: &str,
        causal: bool,
    ) -> Result<(Var, Vec<Tensor>)> {
        let dh = self.config.head_dim();
        let q = self.linear(g, p, x_q, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.linear(g, p, x_kv, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.linear(g, p, x_kv, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let q_len = g.value(x_q).rows();
        let k_len = g.value(x_kv).rows();
        let mask: Option<Vec<bool>> =
            causal.then(|| (0..q_len * k_len).map(|i| i % k_len <= i / k_len).collect());
        let mut heads = Vec::with_capacity(self.config.n_heads);
        let mut weights = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let probs = g.masked_softmax(scores, mask.as_deref())?;
            weights.push(g.value(probs).clone());
            heads.push(g.matmul(probs, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        let out = self.linear(g, p, cat, &format!("{prefix}.wo"), &format!("{prefix}.bo"))?;
        Ok((out, weights))
    }

    /// dropout → residual add → post-norm; returns the normed stream and the
    /// recorded statistics.
    fn close_sublayer(
        &self,
        g: &mut Graph,
        p: &GraphParams,
        x: Var,
        sub_out: Var,
        ln_prefix: &str,
        dropout: Option<&DropoutPlan>,
        site: &str,
    ) -> Result<(Var, Vec<(f64, f64)>)> {
        let dropped = self.dropout(g, sub_out, dropout, site)?;
        let z = g.add(x, dropped)?;
        let y = g.layer_norm(
            z,
            p.var(&format!("{ln_prefix}.gain")),
            p.var(&format!("{ln_prefix}.bias")),
            LN_EPS,
        )?;
        let stats = g
            .layer_norm_stats(y)
            .expect("layer_norm node records stats")
            .to_vec();
        Ok((y, stats))
    }

    fn attn_record(
        &self,
        g: &Graph,
        heads: Vec<Tensor>,
        x_q: Var,
        x_kv: Var,
        out: Var,
        stats: Vec<(f64, f64)>,
        prefix: &str,
        ln_prefix: &str,
        causal: bool,
    ) -> AttnRecord {
        AttnRecord {
            heads,
            query_input: g.value(x_q).clone(),
            key_input: g.value(x_kv).clone(),
            output: g.value(out).clone(),
            ln_stats: stats,
            wv: format!("{prefix}.wv"),
            bv: format!("{prefix}.bv"),
            wo: format!("{prefix}.wo"),
            bo: format!("{prefix}.bo"),
            ln_gain: format!("{ln_prefix}.gain"),
            ln_bias: format!("{ln_prefix}.bias"),
            causal,
        }
    }

    fn ffn_block(
        &self,
        g: &mut Graph,
        p: &GraphParams,
        x: Var,
        prefix: &str,
        dropout: Option<&DropoutPlan>,
    ) -> Result<Var> {
        let h = self.linear(g, p, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = g.relu(h)?;
        let h = self.dropout(g, h, dropout, &format!("{prefix}.hidden"))?;
        self.linear(g, p, h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    /// Full encoder stack; returns final states and per-layer attention records.
    pub fn encoder_graph(
        &self,
        g: &mut Graph,
        p: &GraphParams,
        src: &[u32],
        dropout: Option<&DropoutPlan>,
    ) -> Result<(Var, Vec<AttnRecord>)> {
        self.check_tokens(src, "source")?;
        let mut x = self.embed_tokens(g, p, "src_embed", src, dropout, "emb.enc")?;
        let mut records = Vec::with_capacity(self.config.n_enc_layers);
        for l in 0..self.config.n_enc_layers {
            let attn = format!("enc.{l}.attn");
            let (sub, heads) = self.attention(g, p, x, x, &attn, false)?;
            let (y, stats) =
                self.close_sublayer(g, p, x, sub, &format!("enc.{l}.ln1"), dropout, &attn)?;
            records.push(self.attn_record(g, heads, x, x, y, stats, &attn, &format!("enc.{l}.ln1"), false));
            let ffn = format!("enc.{l}.ffn");
            let sub = self.ffn_block(g, p, y, &ffn, dropout)?;
            let (y2, _) =
                self.close_sublayer(g, p, y, sub, &format!("enc.{l}.ln2"), dropout, &format!("{ffn}.out"))?;
            x = y2;
        }
        Ok((x, records))
    }

    /// Decoder stack over `tgt_in` (BOS-prefixed, no final symbol) attending
    /// to `enc`; returns row log-probabilities over the vocabulary and the
    /// self/cross attention records.
    pub fn decoder_graph(
        &self,
        g: &mut Graph,
        p: &GraphParams,
        enc: Var,
        tgt_in: &[u32],
        dropout: Option<&DropoutPlan>,
    ) -> Result<(Var, Vec<AttnRecord>, Vec<AttnRecord>)> {
        self.check_tokens(tgt_in, "target")?;
        let mut x = self.embed_tokens(g, p, "tgt_embed", tgt_in, dropout, "emb.dec")?;
        let mut selfs = Vec::with_capacity(self.config.n_dec_layers);
        let mut crosses = Vec::with_capacity(self.config.n_dec_layers);
        for l in 0..self.config.n_dec_layers {
            let self_p = format!("dec.{l}.self");
            let (sub, heads) = self.attention(g, p, x, x, &self_p, true)?;
            let (y, stats) =
                self.close_sublayer(g, p, x, sub, &format!("dec.{l}.ln1"), dropout, &self_p)?;
            selfs.push(self.attn_record(g, heads, x, x, y, stats, &self_p, &format!("dec.{l}.ln1"), true));

            let cross_p = format!("dec.{l}.cross");
            let (sub, heads) = self.attention(g, p, y, enc, &cross_p, false)?;
            let (y2, stats) =
                self.close_sublayer(g, p, y, sub, &format!("dec.{l}.ln2"), dropout, &cross_p)?;
            crosses.push(self.attn_record(g, heads, y, enc, y2, stats, &cross_p, &format!("dec.{l}.ln2"), false));

            let ffn = format!("dec.{l}.ffn");
            let sub = self.ffn_block(g, p, y2, &ffn, dropout)?;
            let (y3, _) = self.close_sublayer(
                g,
                p,
                y2,
                sub,
                &format!("dec.{l}.ln3"),
                dropout,
                &format!("{ffn}.out"),
            )?;
            x = y3;
        }
        let logits = self.linear(g, p, x, "out.w", "out.b")?;
        let logp = g.log_softmax(logits)?;
        Ok((logp, selfs, crosses))
    }

    /// Teacher-forced loss over one (source, target) pair; target must be
    /// BOS-prefixed and include its final symbol.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        p: &GraphParams,
        src: &[u32],
        tgt: &[u32],
        label_smoothing: f64,
        dropout: Option<&DropoutPlan>,
    ) -> Result<Var> {
        if tgt.len() < 2 || tgt[0] != BOS {
            return Err(Error::invalid("target must start with BOS and predict at least one symbol"));
        }
        let (enc, _) = self.encoder_graph(g, p, src, dropout)?;
        let (logp, _, _) = self.decoder_graph(g, p, enc, &tgt[..tgt.len() - 1], dropout)?;
        g.nll(logp, &tgt[1..], label_smoothing)
    }

    // -- public inference -------------------------------------------------

    /// Encoder states and trace for a source sentence (no dropout).
    pub fn encode(&self, src: &[u32]) -> Result<(Tensor, ForwardTrace)> {
        let mut g = Graph::new();
        let p = self.graph_params(&mut g)?;
        let (states, records) = self.encoder_graph(&mut g, &p, src, None)?;
        let trace = ForwardTrace {
            encoder: records,
            ..Default::default()
        };
        Ok((g.value(states).clone(), trace))
    }

    /// Per-position log P(y_k | y_<k, x); `tgt` must start with BOS, and a
    /// log-probability is produced for every following symbol including the
    /// final one.
    pub fn decode_logprobs(
        &self,
        src: &[u32],
        tgt: &[u32],
        dropout: Option<&DropoutPlan>,
    ) -> Result<(Vec<f64>, ForwardTrace)> {
        if tgt.len() < 2 || tgt[0] != BOS {
            return Err(Error::invalid("target must start with BOS and contain at least one symbol"));
        }
        self.check_tokens(tgt, "target")?;
        let mut g = Graph::new();
        let p = self.graph_params(&mut g)?;
        let (enc, enc_records) = self.encoder_graph(&mut g, &p, src, dropout)?;
        let (logp, selfs, crosses) =
            self.decoder_graph(&mut g, &p, enc, &tgt[..tgt.len() - 1], dropout)?;
        let lp = g.value(logp);
        let mut out = Vec::with_capacity(tgt.len() - 1);
        for (i, &next) in tgt[1..].iter().enumerate() {
            out.push(lp.at2(i, next as usize));
        }
        let trace = ForwardTrace {
            encoder: enc_records,
            decoder_self: selfs,
            decoder_cross: crosses,
        };
        Ok((out, trace))
    }
}
