//! Step-by-step decoding with cached keys/values.
//!
//! Mirrors the graph forward operation by operation, using the same kernels
//! in the same accumulation order, so a token sequence scores identically
//! whether decoded incrementally or teacher-forced. Dropout masks are
//! addressed by absolute position, which keeps that equality under MC
//! dropout as well.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

use super::{sinusoidal_positions, DropoutPlan, TransformerModel, LN_EPS};

/// Decoder-side state for one partial hypothesis: per-layer self-attention
/// key/value rows, flattened (len × d_model). Cloning a cursor forks the
/// hypothesis, which is how beam search branches.
#[derive(Debug, Clone, Default)]
pub struct Cursor {
    k_cache: Vec<Vec<f64>>,
    v_cache: Vec<Vec<f64>>,
    pub len: usize,
}

/// Shared per-source decoding context: encoder states and the cross-attention
/// projections, computed once.
pub struct IncrementalDecoder<'m> {
    model: &'m TransformerModel,
    dropout: Option<DropoutPlan>,
    pub enc_states: Tensor,
    cross_k: Vec<Tensor>,
    cross_v: Vec<Tensor>,
}

fn row_linear(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let mut out = kernels::matmul(x, 1, w.rows(), w.data(), w.cols());
    for (o, &bv) in out.iter_mut().zip(b.data()) {
        *o += bv;
    }
    out
}

fn mat_linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut out = kernels::matmul(x.data(), x.rows(), x.cols(), w.data(), w.cols());
    let cols = w.cols();
    for i in 0..x.rows() {
        for (o, &bv) in out[i * cols..(i + 1) * cols].iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Tensor::matrix(x.rows(), cols, out).expect("finite linear output")
}

impl<'m> IncrementalDecoder<'m> {
    pub fn new(
        model: &'m TransformerModel,
        src: &[u32],
        dropout: Option<DropoutPlan>,
    ) -> Result<Self> {
        // Encoder runs once through the graph path; the decoder loop below
        // only ever consumes its output states.
        let enc_states = {
            let mut g = crate::autograd::Graph::new();
            let p = model.graph_params(&mut g)?;
            let (states, _) = model.encoder_graph(&mut g, &p, src, dropout.as_ref())?;
            g.value(states).clone()
        };
        let mut cross_k = Vec::with_capacity(model.config.n_dec_layers);
        let mut cross_v = Vec::with_capacity(model.config.n_dec_layers);
        for l in 0..model.config.n_dec_layers {
            cross_k.push(mat_linear(
                &enc_states,
                model.param(&format!("dec.{l}.cross.wk")),
                model.param(&format!("dec.{l}.cross.bk")),
            ));
            cross_v.push(mat_linear(
                &enc_states,
                model.param(&format!("dec.{l}.cross.wv")),
                model.param(&format!("dec.{l}.cross.bv")),
            ));
        }
        Ok(IncrementalDecoder {
            model,
            dropout,
            enc_states,
            cross_k,
            cross_v,
        })
    }

    pub fn start(&self) -> Cursor {
        Cursor {
            k_cache: vec![Vec::new(); self.model.config.n_dec_layers],
            v_cache: vec![Vec::new(); self.model.config.n_dec_layers],
            len: 0,
        }
    }

    fn apply_dropout_row(&self, x: &mut [f64], site: &str, row: usize) {
        if let Some(plan) = &self.dropout {
            let mask = plan.mask_row(site, row, x.len());
            for (v, m) in x.iter_mut().zip(mask) {
                *v *= m;
            }
        }
    }

    /// Attention of one query row over cached keys/values laid out (n_ctx × d),
    /// heads sliced out of the full width.
    fn attend(&self, prefix: &str, q: &[f64], keys: &[f64], values: &[f64], n_ctx: usize) -> Vec<f64> {
        let cfg = &self.model.config;
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let inv = 1.0 / (dh as f64).sqrt();
        let mut cat = vec![0.0; d];
        let mut scores = vec![0.0; n_ctx];
        for h in 0..cfg.n_heads {
            let off = h * dh;
            let qh = &q[off..off + dh];
            for j in 0..n_ctx {
                scores[j] = kernels::dot(qh, &keys[j * d + off..j * d + off + dh]) * inv;
            }
            kernels::softmax_row(&mut scores);
            let out = &mut cat[off..off + dh];
            for j in 0..n_ctx {
                let p = scores[j];
                if p == 0.0 {
                    continue;
                }
                let vh = &values[j * d + off..j * d + off + dh];
                for (o, &v) in out.iter_mut().zip(vh) {
                    *o += p * v;
                }
            }
        }
        row_linear(
            &cat,
            self.model.param(&format!("{prefix}.wo")),
            self.model.param(&format!("{prefix}.bo")),
        )
    }

    fn ln_row(&self, x: &[f64], prefix: &str) -> Vec<f64> {
        let gain = self.model.param(&format!("{prefix}.gain"));
        let bias = self.model.param(&format!("{prefix}.bias"));
        let mut out = vec![0.0; x.len()];
        kernels::layer_norm_row(x, gain.data(), bias.data(), LN_EPS, &mut out);
        out
    }

    /// Feed `token` at position `cursor.len`; returns the advanced cursor and
    /// log-probabilities for the next position.
    pub fn advance(&self, cursor: &Cursor, token: u32) -> Result<(Cursor, Vec<f64>)> {
        let cfg = &self.model.config;
        let t = cursor.len;
        if t >= cfg.max_len {
            return Err(Error::Overlength {
                len: t + 1,
                max: cfg.max_len,
            });
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::OutOfVocab {
                token,
                vocab_size: cfg.vocab_size,
            });
        }
        let d = cfg.d_model;
        let sqrt_d = (d as f64).sqrt();
        let table = self.model.param("tgt_embed");
        let pos = sinusoidal_positions(1, d, t);
        let mut x: Vec<f64> = table
            .row(token as usize)
            .iter()
            .zip(pos.data())
            .map(|(&e, &p)| e * sqrt_d + p)
            .collect();
        self.apply_dropout_row(&mut x, "emb.dec", t);

        let mut cur = cursor.clone();
        for l in 0..cfg.n_dec_layers {
            let self_p = format!("dec.{l}.self");
            let q = row_linear(
                &x,
                self.model.param(&format!("{self_p}.wq")),
                self.model.param(&format!("{self_p}.bq")),
            );
            let k_new = row_linear(
                &x,
                self.model.param(&format!("{self_p}.wk")),
                self.model.param(&format!("{self_p}.bk")),
            );
            let v_new = row_linear(
                &x,
                self.model.param(&format!("{self_p}.wv")),
                self.model.param(&format!("{self_p}.bv")),
            );
            cur.k_cache[l].extend_from_slice(&k_new);
            cur.v_cache[l].extend_from_slice(&v_new);
            let mut sub = self.attend(&self_p, &q, &cur.k_cache[l], &cur.v_cache[l], t + 1);
            self.apply_dropout_row(&mut sub, &self_p, t);
            let z: Vec<f64> = x.iter().zip(&sub).map(|(a, b)| a + b).collect();
            x = self.ln_row(&z, &format!("dec.{l}.ln1"));

            let cross_p = format!("dec.{l}.cross");
            let q = row_linear(
                &x,
                self.model.param(&format!("{cross_p}.wq")),
                self.model.param(&format!("{cross_p}.bq")),
            );
            let mut sub = self.attend(
                &cross_p,
                &q,
                self.cross_k[l].data(),
                self.cross_v[l].data(),
                self.enc_states.rows(),
            );
            self.apply_dropout_row(&mut sub, &cross_p, t);
            let z: Vec<f64> = x.iter().zip(&sub).map(|(a, b)| a + b).collect();
            x = self.ln_row(&z, &format!("dec.{l}.ln2"));

            let ffn = format!("dec.{l}.ffn");
            let mut h = row_linear(
                &x,
                self.model.param(&format!("{ffn}.w1")),
                self.model.param(&format!("{ffn}.b1")),
            );
            for v in h.iter_mut() {
                if *v <= 0.0 {
                    *v = 0.0;
                }
            }
            self.apply_dropout_row(&mut h, &format!("{ffn}.hidden"), t);
            let mut sub = row_linear(
                &h,
                self.model.param(&format!("{ffn}.w2")),
                self.model.param(&format!("{ffn}.b2")),
            );
            self.apply_dropout_row(&mut sub, &format!("{ffn}.out"), t);
            let z: Vec<f64> = x.iter().zip(&sub).map(|(a, b)| a + b).collect();
            x = self.ln_row(&z, &format!("dec.{l}.ln3"));
        }

        let logits = row_linear(&x, self.model.param("out.w"), self.model.param("out.b"));
        let mut logp = vec![0.0; cfg.vocab_size];
        kernels::log_softmax_row(&logits, &mut logp);
        kernels::ensure_finite(&logp, "incremental decode step")?;
        cur.len = t + 1;
        Ok((cur, logp))
    }

    /// Score a BOS-prefixed target by stepping through it; the convenience
    /// mirror of `decode_logprobs` on this path.
    pub fn score(&self, tgt: &[u32]) -> Result<Vec<f64>> {
        if tgt.len() < 2 || tgt[0] != super::BOS {
            return Err(Error::invalid("target must start with BOS"));
        }
        let mut cursor = self.start();
        let mut out = Vec::with_capacity(tgt.len() - 1);
        for w in tgt.windows(2) {
            let (next, logp) = self.advance(&cursor, w[0])?;
            cursor = next;
            out.push(logp[w[1] as usize]);
        }
        Ok(out)
    }
}
