//! Token-level contribution analysis of a forward trace.
//!
//! Each attention sublayer is decomposed into per-token affine contributions:
//! the value/output path of token j, scaled by its attention weight, plus the
//! residual stream. The post-norm is folded in as an affine map with the
//! recorded variance frozen (centering stays exactly linear). A token's
//! contribution score is how much removing its term moves the sublayer
//! output; scores are row-normalized and chained across layers, giving each
//! decoder position a relevance distribution over source and target-prefix
//! tokens. The mean source share is the attribution signal used for
//! detection: detached continuations show the decoder feeding on its own
//! prefix instead of the source.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transformer::{AttnRecord, ForwardTrace, TransformerModel, LN_EPS};

/// Sublayer reconstruction must match the recorded output this tightly.
pub const RECONSTRUCTION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    L1,
    L2,
}

impl Norm {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            other => Err(Error::invalid(format!("unknown norm {other:?}, expected l1 or l2"))),
        }
    }

    fn measure(self, v: &[f64]) -> f64 {
        match self {
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }
}

/// Row-normalized contribution shares for one attention sublayer.
///
/// With the residual folded (self-attention), `matrix` rows sum to 1 and the
/// residual share sits on the diagonal. Kept separate (cross-attention),
/// `matrix[i]` sums to `1 - residual[i]`.
#[derive(Debug, Clone)]
pub struct SublayerContributions {
    pub matrix: Tensor,
    pub residual: Option<Vec<f64>>,
    /// Largest absolute reconstruction error across positions.
    pub reconstruction_residual: f64,
}

fn param<'p>(
    params: &'p BTreeMap<String, Tensor>,
    name: &str,
) -> Result<&'p Tensor> {
    params
        .get(name)
        .ok_or_else(|| Error::invalid(format!("model has no parameter {name}")))
}

/// Decompose one recorded sublayer into token contribution shares.
pub fn sublayer_contributions(
    params: &BTreeMap<String, Tensor>,
    rec: &AttnRecord,
    norm: Norm,
    fold_residual: bool,
) -> Result<SublayerContributions> {
    let q_len = rec.query_input.rows();
    let k_len = rec.key_input.rows();
    let d = rec.query_input.cols();
    let n_heads = rec.heads.len();
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Shape(format!("{} heads over width {d}", n_heads)));
    }
    let dh = d / n_heads;
    let wv = param(params, &rec.wv)?;
    let bv = param(params, &rec.bv)?;
    let wo = param(params, &rec.wo)?;
    let bo = param(params, &rec.bo)?;
    let gain = param(params, &rec.ln_gain)?;
    let bias = param(params, &rec.ln_bias)?;
    if rec.ln_stats.len() != q_len || rec.output.rows() != q_len {
        return Err(Error::Shape("trace rows disagree with query length".into()));
    }

    // Per head: the token-j path through value and output projections,
    // p_h[j] = (x_j Wv_h + bv_h) Wo_h, independent of the query position.
    let mut paths = vec![vec![0.0; k_len * d]; n_heads];
    for (h, path) in paths.iter_mut().enumerate() {
        for j in 0..k_len {
            let x = rec.key_input.row(j);
            let mut value = vec![0.0; dh];
            for (c, value_c) in value.iter_mut().enumerate() {
                let col = h * dh + c;
                let mut acc = bv.data()[col];
                for i in 0..d {
                    acc += x[i] * wv.at2(i, col);
                }
                *value_c = acc;
            }
            for e in 0..d {
                let mut acc = 0.0;
                for (c, &value_c) in value.iter().enumerate() {
                    acc += value_c * wo.at2(h * dh + c, e);
                }
                path[j * d + e] = acc;
            }
        }
    }

    // Frozen-variance affine view of the post-norm: centering is linear and
    // kept per contribution; the constant part (output bias and norm bias)
    // is shared, not attributed to any token.
    let affine = |v: &[f64], sigma: f64, out: &mut [f64]| {
        let mean = v.iter().sum::<f64>() / d as f64;
        for (o, (&x, g)) in out.iter_mut().zip(v.iter().zip(gain.data())) {
            *o = (x - mean) / sigma * g;
        }
    };

    let mut matrix = Tensor::zeros(vec![q_len, k_len]);
    let mut residual_share = vec![0.0; q_len];
    let mut worst_recon = 0.0f64;
    let mut tilde = vec![0.0; d];
    for i in 0..q_len {
        let sigma = (rec.ln_stats[i].1 + LN_EPS).sqrt();
        let y = rec.output.row(i);
        let y_norm = norm.measure(y);
        let mut recon = vec![0.0; d];
        affine(bo.data(), sigma, &mut recon);
        for (r, b) in recon.iter_mut().zip(bias.data()) {
            *r += b;
        }
        let mut raw = vec![0.0; k_len + 1];
        let mut contribution = vec![0.0; d];
        for j in 0..k_len {
            for e in 0..d {
                let mut acc = 0.0;
                for (h, path) in paths.iter().enumerate() {
                    acc += rec.heads[h].at2(i, j) * path[j * d + e];
                }
                contribution[e] = acc;
            }
            affine(&contribution, sigma, &mut tilde);
            for (r, &t) in recon.iter_mut().zip(&tilde) {
                *r += t;
            }
            let removed: Vec<f64> = y.iter().zip(&tilde).map(|(a, b)| a - b).collect();
            raw[j] = (y_norm - norm.measure(&removed)).max(0.0);
        }
        affine(rec.query_input.row(i), sigma, &mut tilde);
        for (r, &t) in recon.iter_mut().zip(&tilde) {
            *r += t;
        }
        let removed: Vec<f64> = y.iter().zip(&tilde).map(|(a, b)| a - b).collect();
        raw[k_len] = (y_norm - norm.measure(&removed)).max(0.0);

        let err = recon
            .iter()
            .zip(y)
            .map(|(r, o)| (r - o).abs())
            .fold(0.0f64, f64::max);
        worst_recon = worst_recon.max(err);
        if err > RECONSTRUCTION_TOLERANCE {
            let site = rec.wv.trim_end_matches(".wv").to_string();
            return Err(Error::Reconstruction {
                site,
                residual: err,
                tolerance: RECONSTRUCTION_TOLERANCE,
            });
        }

        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            log::warn!(
                "all-zero contribution row {i} in {}; falling back to uniform",
                rec.wv.trim_end_matches(".wv")
            );
            raw.fill(1.0 / (k_len + 1) as f64);
        } else {
            for r in raw.iter_mut() {
                *r /= total;
            }
        }
        for j in 0..k_len {
            *matrix.at2_mut(i, j) = raw[j];
        }
        residual_share[i] = raw[k_len];
        if fold_residual {
            if i >= k_len {
                return Err(Error::Shape(
                    "residual folding requires query and key streams to coincide".into(),
                ));
            }
            *matrix.at2_mut(i, i) += raw[k_len];
        }
    }
    Ok(SublayerContributions {
        matrix,
        residual: if fold_residual { None } else { Some(residual_share) },
        reconstruction_residual: worst_recon,
    })
}

/// Chain the encoder's self-attention sublayers: row i of the result is the
/// relevance distribution of final encoder state i over source positions.
pub fn encoder_rollout(
    params: &BTreeMap<String, Tensor>,
    trace: &ForwardTrace,
    norm: Norm,
) -> Result<Tensor> {
    let first = trace
        .encoder
        .first()
        .ok_or_else(|| Error::invalid("trace has no encoder records"))?;
    let n = first.query_input.rows();
    let mut rollout = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        *rollout.at2_mut(i, i) = 1.0;
    }
    for rec in &trace.encoder {
        let c = sublayer_contributions(params, rec, norm, true)?;
        rollout = c.matrix.matmul(&rollout)?;
    }
    Ok(rollout)
}

#[derive(Debug, Clone)]
pub struct AttributionResult {
    /// Source share of each decoder position, in [0, 1].
    pub per_position: Vec<f64>,
    /// Mean of `per_position`: the sentence-level attribution score.
    pub source_contribution: f64,
    /// Decoder positions x source positions.
    pub source_relevance: Tensor,
    /// Decoder positions x target-prefix positions.
    pub target_relevance: Tensor,
}

/// Relevance recursion through the decoder. Self-attention mixes the running
/// relevance rows; cross-attention splits each row between the residual share
/// (continuing the target stream) and fresh source relevance routed through
/// the encoder rollout.
pub fn decoder_source_attribution(
    params: &BTreeMap<String, Tensor>,
    trace: &ForwardTrace,
    norm: Norm,
) -> Result<AttributionResult> {
    if trace.decoder_self.len() != trace.decoder_cross.len() {
        return Err(Error::invalid("decoder trace is missing sublayers"));
    }
    let first = trace
        .decoder_self
        .first()
        .ok_or_else(|| Error::invalid("trace has no decoder records"))?;
    let rollout = encoder_rollout(params, trace, norm)?;
    let t_len = first.query_input.rows();
    let s_len = rollout.rows();
    let mut r_src = Tensor::zeros(vec![t_len, s_len]);
    let mut r_tgt = Tensor::zeros(vec![t_len, t_len]);
    for i in 0..t_len {
        *r_tgt.at2_mut(i, i) = 1.0;
    }
    for (self_rec, cross_rec) in trace.decoder_self.iter().zip(&trace.decoder_cross) {
        let self_c = sublayer_contributions(params, self_rec, norm, true)?;
        r_src = self_c.matrix.matmul(&r_src)?;
        r_tgt = self_c.matrix.matmul(&r_tgt)?;
        let cross = sublayer_contributions(params, cross_rec, norm, false)?;
        let rho = cross.residual.as_ref().expect("unfolded contributions keep the residual");
        let routed = cross.matrix.matmul(&rollout)?;
        for i in 0..t_len {
            for j in 0..s_len {
                *r_src.at2_mut(i, j) = rho[i] * r_src.at2(i, j) + routed.at2(i, j);
            }
            for k in 0..t_len {
                *r_tgt.at2_mut(i, k) *= rho[i];
            }
        }
    }
    let per_position: Vec<f64> = (0..t_len)
        .map(|i| (0..s_len).map(|j| r_src.at2(i, j)).sum())
        .collect();
    let source_contribution = per_position.iter().sum::<f64>() / t_len as f64;
    Ok(AttributionResult {
        per_position,
        source_contribution,
        source_relevance: r_src,
        target_relevance: r_tgt,
    })
}

/// Teacher-force `tgt` and attribute it in one pass: per-position
/// log-probabilities plus the attribution result.
pub fn attribute(
    model: &TransformerModel,
    src: &[u32],
    tgt: &[u32],
    norm: Norm,
) -> Result<(AttributionResult, Vec<f64>)> {
    let (logprobs, trace) = model.decode_logprobs(src, tgt, None)?;
    let result = decoder_source_attribution(model.params(), &trace, norm)?;
    Ok((result, logprobs))
}
