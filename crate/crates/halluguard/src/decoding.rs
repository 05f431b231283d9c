//! Hypothesis generation over a trained model. Every strategy shares one
//! incremental beam core, so the documented reductions (diverse beam with
//! one group, diverse decoding with rate 0, nucleus with p = 1) are
//! bit-exact, not merely statistical.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::trainer::frame_source;
use crate::transformer::incremental::IncrementalDecoder;
use crate::transformer::{DropoutPlan, TransformerModel, BOS, EOS, PAD};

/// One decoded candidate. `tokens` is the emitted sequence including the
/// final EOS when one was produced; `truncated` marks length-cap stops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub logprobs: Vec<f64>,
    pub strategy: String,
    pub seed: u64,
    pub dropout: bool,
    pub truncated: bool,
}

impl Hypothesis {
    /// Mean per-token logprob, the final-ranking criterion.
    pub fn normalized(&self) -> f64 {
        self.logprob / self.tokens.len() as f64
    }

    /// Output tokens without the terminating EOS.
    pub fn surface(&self) -> &[u32] {
        match self.tokens.split_last() {
            Some((&last, rest)) if last == EOS => rest,
            _ => &self.tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Default,
    Beam,
    Sampling,
    Nucleus,
    Dbs,
    Ddec,
    McGreedy,
    McBeam,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Default => "default",
            Strategy::Beam => "beam",
            Strategy::Sampling => "sampling",
            Strategy::Nucleus => "nucleus",
            Strategy::Dbs => "dbs",
            Strategy::Ddec => "ddec",
            Strategy::McGreedy => "mc_greedy",
            Strategy::McBeam => "mc_beam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "default" => Strategy::Default,
            "beam" => Strategy::Beam,
            "sampling" => Strategy::Sampling,
            "nucleus" => Strategy::Nucleus,
            "dbs" => Strategy::Dbs,
            "ddec" => Strategy::Ddec,
            "mc_greedy" => Strategy::McGreedy,
            "mc_beam" => Strategy::McBeam,
            other => return Err(Error::invalid(format!("unknown strategy {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub strategy: Strategy,
    pub n: usize,
    pub beam_size: usize,
    pub nucleus_p: f64,
    pub dbs_groups: usize,
    pub dbs_lambda: f64,
    pub ddec_r: f64,
    pub seed: u64,
    /// MC-dropout inference rate; None means the model's training rate.
    pub mc_rate: Option<f64>,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            strategy: Strategy::Default,
            n: 10,
            beam_size: 5,
            nucleus_p: 0.8,
            dbs_groups: 5,
            dbs_lambda: 0.5,
            ddec_r: 1.0,
            seed: 7,
            mc_rate: None,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::invalid("n must be at least 1"));
        }
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return Err(Error::invalid("nucleus p must lie in (0, 1]"));
        }
        if self.beam_size < 1 {
            return Err(Error::invalid("beam size must be at least 1"));
        }
        match self.strategy {
            Strategy::Beam | Strategy::Ddec if self.beam_size < self.n => Err(Error::invalid(
                format!("beam size {} cannot yield {} hypotheses", self.beam_size, self.n),
            )),
            Strategy::Dbs if self.beam_size % self.dbs_groups != 0 => Err(Error::invalid(
                format!("beam size {} not divisible into {} groups", self.beam_size, self.dbs_groups),
            )),
            Strategy::Dbs if self.beam_size < self.n => Err(Error::invalid(
                format!("beam size {} cannot yield {} hypotheses", self.beam_size, self.n),
            )),
            Strategy::Ddec if self.ddec_r < 0.0 => {
                Err(Error::invalid("diversity rate must be non-negative"))
            }
            _ => Ok(()),
        }
    }
}

/// Generated length cap: 2 x source length + 4, clipped so the output can
/// still be teacher-forced with BOS and EOS framing for rescoring.
pub fn max_output_len(model: &TransformerModel, src_len: usize) -> usize {
    (2 * src_len + 4).min(model.config.max_len.saturating_sub(2))
}

/// PAD and BOS are never candidate outputs; EOS and real tokens are.
fn allowed_tokens(vocab_size: usize) -> impl Iterator<Item = u32> {
    (0..vocab_size as u32).filter(|&t| t != PAD && t != BOS)
}

struct Partial {
    cursor: crate::transformer::incremental::Cursor,
    next_logp: Vec<f64>,
    tokens: Vec<u32>,
    logprobs: Vec<f64>,
    total: f64,
}

struct Finished {
    tokens: Vec<u32>,
    logprobs: Vec<f64>,
    total: f64,
    truncated: bool,
}

struct BeamParams {
    beam_size: usize,
    n_best: usize,
    groups: usize,
    lambda: f64,
    sibling_r: f64,
    strategy: Strategy,
    seed: u64,
    dropout: bool,
}

/// The shared search. All live beams feed one candidate pool per step;
/// groups select from it in order, each holding a slot budget of
/// beam_size / groups. A slot is consumed permanently when its hypothesis
/// emits EOS, so the live width shrinks as hypotheses finish and under a
/// dominant sibling penalty every parent contributes exactly its top
/// child. Group g's selection is penalized by lambda times the count of
/// that token among earlier groups' picks at this position (Hamming
/// diversity); within a parent, the k-th ranked expansion (k from 0) is
/// penalized by sibling_r * k. Penalties steer selection only; stored
/// logprobs are always the model's.
fn beam_core(
    model: &TransformerModel,
    src: &[u32],
    params: BeamParams,
    dropout: Option<DropoutPlan>,
) -> Result<Vec<Hypothesis>> {
    let cap = max_output_len(model, src.len());
    let dec = IncrementalDecoder::new(model, &frame_source(src), dropout)?;
    let (root_cursor, root_logp) = dec.advance(&dec.start(), BOS)?;
    let mut budgets = vec![params.beam_size / params.groups; params.groups];
    let mut actives = vec![Partial {
        cursor: root_cursor,
        next_logp: root_logp,
        tokens: Vec::new(),
        logprobs: Vec::new(),
        total: 0.0,
    }];
    let mut finished: Vec<Finished> = Vec::new();

    for _step in 0..cap {
        // (selection score with sibling penalty, parent index, token, logprob)
        let mut pool: Vec<(f64, usize, u32, f64)> = Vec::new();
        for (pi, b) in actives.iter().enumerate() {
            let mut ranked: Vec<(u32, f64)> = allowed_tokens(model.config.vocab_size)
                .map(|t| (t, b.next_logp[t as usize]))
                .collect();
            ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for (k, (t, lp)) in ranked.into_iter().enumerate() {
                pool.push((b.total + lp - params.sibling_r * k as f64, pi, t, lp));
            }
        }
        let mut emitted: Vec<u32> = Vec::new();
        let mut next: Vec<Partial> = Vec::new();
        for g in 0..params.groups {
            if budgets[g] == 0 || pool.is_empty() {
                continue;
            }
            // Hamming counts are frozen at round start: only earlier
            // groups' picks penalize this one.
            pool.sort_by(|a, b| {
                let pa = a.0 - params.lambda * emitted.iter().filter(|&&e| e == a.2).count() as f64;
                let pb = b.0 - params.lambda * emitted.iter().filter(|&&e| e == b.2).count() as f64;
                pb.partial_cmp(&pa).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
            });
            let take = budgets[g].min(pool.len());
            for (_, pi, t, lp) in pool.drain(..take) {
                emitted.push(t);
                let parent = &actives[pi];
                let mut tokens = parent.tokens.clone();
                tokens.push(t);
                let mut logprobs = parent.logprobs.clone();
                logprobs.push(lp);
                let total = parent.total + lp;
                if t == EOS {
                    budgets[g] -= 1;
                    finished.push(Finished { tokens, logprobs, total, truncated: false });
                } else {
                    let (cursor, next_logp) = dec.advance(&parent.cursor, t)?;
                    next.push(Partial { cursor, next_logp, tokens, logprobs, total });
                }
            }
        }
        actives = next;
        if actives.is_empty() {
            break;
        }
    }
    for b in actives {
        finished.push(Finished {
            tokens: b.tokens,
            logprobs: b.logprobs,
            total: b.total,
            truncated: true,
        });
    }
    finished.sort_by(|a, b| {
        let na = a.total / a.tokens.len() as f64;
        let nb = b.total / b.tokens.len() as f64;
        nb.partial_cmp(&na).unwrap().then(a.tokens.cmp(&b.tokens))
    });
    Ok(finished
        .into_iter()
        .take(params.n_best)
        .map(|f| Hypothesis {
            tokens: f.tokens,
            logprob: f.total,
            logprobs: f.logprobs,
            strategy: params.strategy.name().to_string(),
            seed: params.seed,
            dropout: params.dropout,
            truncated: f.truncated,
        })
        .collect())
}

pub fn beam_search(
    model: &TransformerModel,
    src: &[u32],
    beam_size: usize,
    n_best: usize,
) -> Result<Vec<Hypothesis>> {
    if beam_size < n_best || n_best < 1 {
        return Err(Error::invalid("need beam_size >= n_best >= 1"));
    }
    beam_core(
        model,
        src,
        BeamParams {
            beam_size,
            n_best,
            groups: 1,
            lambda: 0.0,
            sibling_r: 0.0,
            strategy: Strategy::Beam,
            seed: 0,
            dropout: false,
        },
        None,
    )
}

/// Beam 5, top 1: the pipeline's default translation.
pub fn default_translation(model: &TransformerModel, src: &[u32]) -> Result<Hypothesis> {
    let mut hyps = beam_core(
        model,
        src,
        BeamParams {
            beam_size: 5,
            n_best: 1,
            groups: 1,
            lambda: 0.0,
            sibling_r: 0.0,
            strategy: Strategy::Default,
            seed: 0,
            dropout: false,
        },
        None,
    )?;
    hyps.pop().ok_or_else(|| Error::invalid("beam search produced no hypotheses"))
}

pub fn diverse_beam_search(
    model: &TransformerModel,
    src: &[u32],
    beam_size: usize,
    groups: usize,
    lambda: f64,
) -> Result<Vec<Hypothesis>> {
    if groups < 1 || beam_size % groups != 0 {
        return Err(Error::invalid(format!(
            "beam size {beam_size} not divisible into {groups} groups"
        )));
    }
    beam_core(
        model,
        src,
        BeamParams {
            beam_size,
            n_best: beam_size,
            groups,
            lambda,
            sibling_r: 0.0,
            strategy: Strategy::Dbs,
            seed: 0,
            dropout: false,
        },
        None,
    )
}

pub fn diverse_decoding(
    model: &TransformerModel,
    src: &[u32],
    beam_size: usize,
    r: f64,
) -> Result<Vec<Hypothesis>> {
    if r < 0.0 {
        return Err(Error::invalid("diversity rate must be non-negative"));
    }
    beam_core(
        model,
        src,
        BeamParams {
            beam_size,
            n_best: beam_size,
            groups: 1,
            lambda: 0.0,
            sibling_r: r,
            strategy: Strategy::Ddec,
            seed: 0,
            dropout: false,
        },
        None,
    )
}

/// Smallest prefix of the probability-sorted candidates reaching mass p,
/// renormalized. Input need not be normalized; ties sort by token id.
fn nucleus_filter(dist: &mut Vec<(u32, f64)>, p: f64) {
    dist.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let total: f64 = dist.iter().map(|d| d.1).sum();
    let mut cum = 0.0;
    let mut keep = dist.len();
    for (i, d) in dist.iter().enumerate() {
        cum += d.1 / total;
        if cum >= p - 1e-12 {
            keep = i + 1;
            break;
        }
    }
    dist.truncate(keep);
    let kept: f64 = dist.iter().map(|d| d.1).sum();
    for d in dist.iter_mut() {
        d.1 /= kept;
    }
}

/// Inverse-CDF draw from a normalized, sorted distribution.
fn sample_from(dist: &[(u32, f64)], u: f64) -> u32 {
    let mut cum = 0.0;
    for &(t, p) in dist {
        cum += p;
        if u < cum {
            return t;
        }
    }
    dist.last().expect("non-empty distribution").0
}

pub fn nucleus_sample(
    model: &TransformerModel,
    src: &[u32],
    n: usize,
    p: f64,
    seed: u64,
) -> Result<Vec<Hypothesis>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid("nucleus p must lie in (0, 1]"));
    }
    let cap = max_output_len(model, src.len());
    let dec = IncrementalDecoder::new(model, &frame_source(src), None)?;
    let (root_cursor, root_logp) = dec.advance(&dec.start(), BOS)?;
    let strategy = if p == 1.0 { Strategy::Sampling } else { Strategy::Nucleus };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = Rng::new(seed).derive("sample").derive_u64(i as u64);
        let mut cursor = root_cursor.clone();
        let mut logp = root_logp.clone();
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        let mut truncated = true;
        while tokens.len() < cap {
            let mut dist: Vec<(u32, f64)> = allowed_tokens(model.config.vocab_size)
                .map(|t| (t, logp[t as usize].exp()))
                .collect();
            nucleus_filter(&mut dist, p);
            let t = sample_from(&dist, rng.next_f64());
            tokens.push(t);
            logprobs.push(logp[t as usize]);
            if t == EOS {
                truncated = false;
                break;
            }
            let (c, lp) = dec.advance(&cursor, t)?;
            cursor = c;
            logp = lp;
        }
        out.push(Hypothesis {
            logprob: logprobs.iter().sum(),
            tokens,
            logprobs,
            strategy: strategy.name().to_string(),
            seed,
            dropout: false,
            truncated,
        });
    }
    Ok(out)
}

/// Ancestral sampling from the full (renormalized) distribution; the p = 1
/// nucleus case by definition.
pub fn sample(model: &TransformerModel, src: &[u32], n: usize, seed: u64) -> Result<Vec<Hypothesis>> {
    nucleus_sample(model, src, n, 1.0, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McMode {
    Greedy,
    Beam,
}

/// n independent dropout draws (mask seed = seed + i), each decoded
/// greedily or by beam taking the top candidate. Duplicates are kept;
/// downstream deduplication is the pipeline's job.
pub fn mc_dropout_generate(
    model: &TransformerModel,
    src: &[u32],
    n: usize,
    mode: McMode,
    beam_size: usize,
    seed: u64,
    rate: Option<f64>,
) -> Result<Vec<Hypothesis>> {
    if n < 1 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let rate = rate.unwrap_or(model.config.dropout_rate);
    let (strategy, width) = match mode {
        McMode::Greedy => (Strategy::McGreedy, 1),
        McMode::Beam => (Strategy::McBeam, beam_size.max(1)),
    };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mask_seed = seed + i as u64;
        let plan = DropoutPlan::from_seed(mask_seed, rate);
        let mut hyps = beam_core(
            model,
            src,
            BeamParams {
                beam_size: width,
                n_best: 1,
                groups: 1,
                lambda: 0.0,
                sibling_r: 0.0,
                strategy,
                seed: mask_seed,
                dropout: rate > 0.0,
            },
            Some(plan),
        )?;
        out.push(hyps.pop().ok_or_else(|| Error::invalid("empty beam result"))?);
    }
    Ok(out)
}

/// Strategy dispatch used by the pipeline and CLI.
pub fn generate(model: &TransformerModel, src: &[u32], spec: &GenSpec) -> Result<Vec<Hypothesis>> {
    spec.validate()?;
    match spec.strategy {
        Strategy::Default => Ok(vec![default_translation(model, src)?]),
        Strategy::Beam => beam_search(model, src, spec.beam_size, spec.n),
        Strategy::Sampling => sample(model, src, spec.n, spec.seed),
        Strategy::Nucleus => nucleus_sample(model, src, spec.n, spec.nucleus_p, spec.seed),
        Strategy::Dbs => Ok(diverse_beam_search(
            model,
            src,
            spec.beam_size,
            spec.dbs_groups,
            spec.dbs_lambda,
        )?
        .into_iter()
        .take(spec.n)
        .collect()),
        Strategy::Ddec => Ok(diverse_decoding(model, src, spec.beam_size, spec.ddec_r)?
            .into_iter()
            .take(spec.n)
            .collect()),
        Strategy::McGreedy => {
            mc_dropout_generate(model, src, spec.n, McMode::Greedy, 1, spec.seed, spec.mc_rate)
        }
        Strategy::McBeam => mc_dropout_generate(
            model,
            src,
            spec.n,
            McMode::Beam,
            10,
            spec.seed,
            spec.mc_rate,
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRow {
    pub id: u64,
    pub strategy: String,
    pub seed: u64,
    pub tokens: Vec<u32>,
    pub logprob: f64,
}

pub fn write_hypotheses(path: &Path, rows: &[(u64, &Hypothesis)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for &(id, h) in rows {
        let row = HypothesisRow {
            id,
            strategy: h.strategy.clone(),
            seed: h.seed,
            tokens: h.tokens.clone(),
            logprob: h.logprob,
        };
        let line = serde_json::to_string(&row).map_err(|e| Error::json(path, e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_hypotheses(path: &Path) -> Result<Vec<HypothesisRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: HypothesisRow = serde_json::from_str(&line)
            .map_err(|e| Error::json(path, format!("line {}: {e}", lineno + 1)))?;
        out.push(row);
    }
    Ok(out)
}
