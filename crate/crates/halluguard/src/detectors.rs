//! Detection scores under one orientation convention: higher risk means more
//! likely hallucination. Every detector keeps its natural raw value and
//! declares the fixed monotone transform that maps raw to risk, so score
//! files round-trip exactly and rankings by risk always mirror rankings by
//! raw.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus;
use crate::error::{Error, Result};
use crate::trainer::dual::{DualEncoder, Side};
use crate::trainer::{frame_source, frame_target};
use crate::transformer::TransformerModel;

/// Registry names for the built-in detectors.
pub mod names {
    pub const SEQ_LOGPROB: &str = "seq_logprob";
    pub const ALTI: &str = "alti";
    pub const DUAL_COS: &str = "dual_cos";
    pub const BIDIR_PRODUCT: &str = "bidir_product";
    pub const CHRF_PP: &str = "chrf_pp";
    pub const IMPORTED_PREFIX: &str = "imported:";
}

/// Fixed raw-to-risk transform; strictly monotone decreasing in goodness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// risk = -raw (raw is a quality score).
    Negate,
    /// risk = 1 - raw (raw is a share in [0, 1]).
    OneMinus,
    /// risk = raw (raw is already a risk).
    Identity,
}

impl Orientation {
    pub fn apply(self, raw: f64) -> f64 {
        match self {
            Orientation::Negate => -raw,
            Orientation::OneMinus => 1.0 - raw,
            Orientation::Identity => raw,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Orientation::Negate => "negate",
            Orientation::OneMinus => "one_minus",
            Orientation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "negate" => Ok(Orientation::Negate),
            "one_minus" => Ok(Orientation::OneMinus),
            "identity" => Ok(Orientation::Identity),
            other => Err(Error::invalid(format!("unknown orientation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub detector: String,
    pub raw: f64,
    pub orientation: Orientation,
    pub risk: f64,
}

impl DetectionScore {
    pub fn new(detector: impl Into<String>, raw: f64, orientation: Orientation) -> Result<Self> {
        if !raw.is_finite() {
            return Err(Error::NonFinite("detection score".into()));
        }
        Ok(DetectionScore {
            detector: detector.into(),
            raw,
            orientation,
            risk: orientation.apply(raw),
        })
    }
}

/// Length-normalized sequence log-probability from precomputed per-position
/// values (EOS included).
pub fn seq_logprob_from_logprobs(logprobs: &[f64]) -> Result<DetectionScore> {
    if logprobs.is_empty() {
        return Err(Error::invalid("no positions to average"));
    }
    let raw = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    DetectionScore::new(names::SEQ_LOGPROB, raw, Orientation::Negate)
}

pub fn seq_logprob(
    model: &TransformerModel,
    src: &[u32],
    out: &[u32],
) -> Result<DetectionScore> {
    if out.is_empty() {
        return Err(Error::invalid("cannot score an empty output"));
    }
    let (logprobs, _) = model.decode_logprobs(&frame_source(src), &frame_target(out), None)?;
    seq_logprob_from_logprobs(&logprobs)
}

/// Mean source contribution of the output under teacher forcing.
pub fn alti_risk(model: &TransformerModel, src: &[u32], out: &[u32]) -> Result<DetectionScore> {
    if out.is_empty() {
        return Err(Error::invalid("cannot attribute an empty output"));
    }
    let (result, _) = crate::attribution::attribute(
        model,
        &frame_source(src),
        &frame_target(out),
        crate::attribution::Norm::L1,
    )?;
    DetectionScore::new(names::ALTI, result.source_contribution, Orientation::OneMinus)
}

/// Cosine of two unit embeddings; rejects non-unit inputs.
pub fn cosine_from_embeddings(u: &[f64], v: &[f64]) -> Result<DetectionScore> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::Shape("embedding lengths differ".into()));
    }
    for e in [u, v] {
        let norm: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::data("zero-norm embedding"));
        }
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("embedding norm {norm} is not 1")));
        }
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    DetectionScore::new(names::DUAL_COS, dot.clamp(-1.0, 1.0), Orientation::Negate)
}

pub fn cosine_similarity_risk(
    encoder: &DualEncoder,
    src: &[u32],
    out: &[u32],
) -> Result<DetectionScore> {
    let u = encoder.embed(Side::Source, src)?;
    let v = encoder.embed(Side::Target, out)?;
    cosine_from_embeddings(&u, &v)
}

/// Product of two directional [0, 1] scores (entailment-style backends are
/// supplied externally via plug-in or score file).
pub fn bidirectional_product_risk(forward: f64, backward: f64) -> Result<DetectionScore> {
    for (label, v) in [("forward", forward), ("backward", backward)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("{label} score {v} outside [0, 1]")));
        }
    }
    DetectionScore::new(names::BIDIR_PRODUCT, forward * backward, Orientation::OneMinus)
}

/// chrF++: character n-grams (orders 1..6, whitespace excluded) averaged
/// with word n-grams (orders 1..2), F-score with beta = 2, scaled to
/// [0, 100]. Orders empty on both sides are skipped from the average.
pub fn chrf_pp(output: &str, reference: &str) -> Result<f64> {
    if output.trim().is_empty() || reference.trim().is_empty() {
        return Err(Error::invalid("chrF++ requires non-empty output and reference"));
    }
    const BETA_SQ: f64 = 4.0;
    let mut precisions = Vec::new();
    let mut recalls = Vec::new();
    let out_chars: Vec<char> = output.chars().filter(|c| !c.is_whitespace()).collect();
    let ref_chars: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    for n in 1..=6 {
        push_order(ngram_stats(&out_chars, &ref_chars, n), &mut precisions, &mut recalls);
    }
    let out_words: Vec<&str> = output.split_whitespace().collect();
    let ref_words: Vec<&str> = reference.split_whitespace().collect();
    for n in 1..=2 {
        push_order(ngram_stats(&out_words, &ref_words, n), &mut precisions, &mut recalls);
    }
    if precisions.is_empty() {
        return Err(Error::invalid("no n-grams on either side"));
    }
    let p = precisions.iter().sum::<f64>() / precisions.len() as f64;
    let r = recalls.iter().sum::<f64>() / recalls.len() as f64;
    if p + r == 0.0 {
        return Ok(0.0);
    }
    Ok(100.0 * (1.0 + BETA_SQ) * p * r / (BETA_SQ * p + r))
}

fn ngram_stats<T: std::hash::Hash + Eq>(
    out: &[T],
    reference: &[T],
    n: usize,
) -> Option<(f64, f64)> {
    fn count<'a, T: std::hash::Hash + Eq>(items: &'a [T], n: usize) -> HashMap<&'a [T], usize> {
        let mut m = HashMap::new();
        if items.len() >= n {
            for w in items.windows(n) {
                *m.entry(w).or_insert(0) += 1;
            }
        }
        m
    }
    let h = count(out, n);
    let r = count(reference, n);
    let h_total: usize = h.values().sum();
    let r_total: usize = r.values().sum();
    if h_total + r_total == 0 {
        return None;
    }
    let matches: usize = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    let p = if h_total > 0 { matches as f64 / h_total as f64 } else { 0.0 };
    let rec = if r_total > 0 { matches as f64 / r_total as f64 } else { 0.0 };
    Some((p, rec))
}

fn push_order(stats: Option<(f64, f64)>, precisions: &mut Vec<f64>, recalls: &mut Vec<f64>) {
    if let Some((p, r)) = stats {
        precisions.push(p);
        recalls.push(r);
    }
}

/// Reference-based oracle detector over detokenized records.
pub fn chrf_pp_score(out: &[u32], reference: &[u32]) -> Result<DetectionScore> {
    let score = chrf_pp(&corpus::detokenize(out), &corpus::detokenize(reference))?;
    DetectionScore::new(names::CHRF_PP, score, Orientation::Negate)
}

/// All reference-free built-in scores for one record's output.
pub fn built_in_scores(
    model: &TransformerModel,
    encoder: Option<&DualEncoder>,
    src: &[u32],
    out: &[u32],
) -> Result<Vec<DetectionScore>> {
    let mut scores = vec![seq_logprob(model, src, out)?, alti_risk(model, src, out)?];
    if let Some(encoder) = encoder {
        scores.push(cosine_similarity_risk(encoder, src, out)?);
    }
    Ok(scores)
}

/// Write scores as TSV (id, detector, raw, orientation), sorted by id then
/// detector name. Raw values are printed in full round-trip precision.
pub fn export_scores(
    path: &Path,
    scores: &BTreeMap<u64, Vec<DetectionScore>>,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "id\tdetector\traw\torientation").map_err(|e| Error::io(path, e))?;
    for (id, row) in scores {
        let mut row: Vec<&DetectionScore> = row.iter().collect();
        row.sort_by(|a, b| a.detector.cmp(&b.detector));
        for s in row {
            writeln!(w, "{id}\t{}\t{:?}\t{}", s.detector, s.raw, s.orientation.name())
                .map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a score TSV. Detector names gain the `imported:` prefix unless they
/// already carry it; ids must belong to `known_ids`; duplicate
/// (id, detector) rows are rejected.
pub fn import_scores(
    path: &Path,
    known_ids: &BTreeSet<u64>,
) -> Result<BTreeMap<u64, Vec<DetectionScore>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut out: BTreeMap<u64, Vec<DetectionScore>> = BTreeMap::new();
    let mut seen: BTreeSet<(u64, String)> = BTreeSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if lineno == 0 {
            if line.trim() != "id\tdetector\traw\torientation" {
                return Err(Error::data(format!(
                    "{}: expected header 'id\\tdetector\\traw\\torientation'",
                    path.display()
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let context = format!("{}:{}", path.display(), lineno + 1);
        if fields.len() != 4 {
            return Err(Error::data(format!("{context}: expected 4 tab-separated fields")));
        }
        let id: u64 = fields[0]
            .parse()
            .map_err(|_| Error::data(format!("{context}: bad id {:?}", fields[0])))?;
        if !known_ids.contains(&id) {
            return Err(Error::data(format!("{context}: unknown record id {id}")));
        }
        let detector = if fields[1].starts_with(names::IMPORTED_PREFIX) {
            fields[1].to_string()
        } else {
            format!("{}{}", names::IMPORTED_PREFIX, fields[1])
        };
        let raw: f64 = fields[2]
            .parse()
            .map_err(|_| Error::data(format!("{context}: bad raw value {:?}", fields[2])))?;
        let orientation = Orientation::parse(fields[3])
            .map_err(|e| Error::data(format!("{context}: {e}")))?;
        if !seen.insert((id, detector.clone())) {
            return Err(Error::data(format!(
                "{context}: duplicate score for id {id} detector {detector}"
            )));
        }
        out.entry(id).or_default().push(DetectionScore::new(detector, raw, orientation)?);
    }
    Ok(out)
}

/// Combine per-id forward/backward entailment-style scores (detector names
/// `bidir_forward` / `bidir_backward`, possibly `imported:`-prefixed) into
/// bidir_product scores. Ids with only one direction are an error.
pub fn combine_bidirectional(
    scores: &BTreeMap<u64, Vec<DetectionScore>>,
) -> Result<BTreeMap<u64, DetectionScore>> {
    let find = |row: &[DetectionScore], name: &str| -> Option<f64> {
        row.iter()
            .find(|s| s.detector == name || s.detector == format!("{}{name}", names::IMPORTED_PREFIX))
            .map(|s| s.raw)
    };
    let mut out = BTreeMap::new();
    for (&id, row) in scores {
        let f = find(row, "bidir_forward");
        let b = find(row, "bidir_backward");
        match (f, b) {
            (Some(f), Some(b)) => {
                out.insert(id, bidirectional_product_risk(f, b)?);
            }
            (None, None) => {}
            _ => {
                return Err(Error::data(format!(
                    "record {id} has only one bidirectional direction"
                )))
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::transformer::ModelConfig;

    fn model() -> TransformerModel {
        let config = ModelConfig {
            vocab_size: 16,
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ffn: 32,
            max_len: 12,
            dropout_rate: 0.0,
        };
        TransformerModel::new(config, &Rng::new(17)).unwrap()
    }

    #[test]
    fn seq_logprob_is_the_arithmetic_mean() {
        let s = seq_logprob_from_logprobs(&[-1.0, -2.0, -3.0]).unwrap();
        assert_eq!(s.raw, -2.0);
        assert_eq!(s.risk, 2.0);
        assert_eq!(s.detector, names::SEQ_LOGPROB);
    }

    #[test]
    fn seq_logprob_matches_decode_logprobs() {
        let m = model();
        let src = [5, 7, 9];
        let out = [6, 8];
        let s = seq_logprob(&m, &src, &out).unwrap();
        let (lps, _) = m
            .decode_logprobs(&frame_source(&src), &frame_target(&out), None)
            .unwrap();
        let mean = lps.iter().sum::<f64>() / lps.len() as f64;
        assert!((s.raw - mean).abs() < 1e-12);
    }

    #[test]
    fn alti_risk_is_a_share_and_zero_under_cross_ablation() {
        let m = model();
        let s = alti_risk(&m, &[5, 7, 9], &[6, 8, 10]).unwrap();
        assert!(s.raw > 0.0 && s.raw < 1.0);
        assert!((s.risk - (1.0 - s.raw)).abs() < 1e-15);
        let mut ablated = m.clone();
        ablated.scale_cross_value_projections(0.0);
        let s = alti_risk(&ablated, &[5, 7, 9], &[6, 8, 10]).unwrap();
        assert_eq!(s.raw, 0.0);
        assert_eq!(s.risk, 1.0);
    }

    #[test]
    fn cosine_trivial_geometry() {
        let s = cosine_from_embeddings(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(s.raw, 0.0);
        let s = cosine_from_embeddings(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(s.raw, 1.0);
        assert_eq!(s.risk, -1.0);
        assert!(cosine_from_embeddings(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn shared_table_gives_cosine_one() {
        use crate::trainer::dual::DualEncoderConfig;
        let config = DualEncoderConfig { vocab_size: 16, d_model: 8, max_len: 8 };
        let mut enc = DualEncoder::new(config, &Rng::new(2)).unwrap();
        let shared = enc.params()["src.embed"].clone();
        enc.params_mut().insert("tgt.embed".into(), shared);
        let s = cosine_similarity_risk(&enc, &[4, 6, 9], &[4, 6, 9]).unwrap();
        assert!((s.raw - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bidirectional_product_examples() {
        assert_eq!(bidirectional_product_risk(1.0, 1.0).unwrap().risk, 0.0);
        assert_eq!(bidirectional_product_risk(0.7, 0.0).unwrap().raw, 0.0);
        let s = bidirectional_product_risk(0.8, 0.5).unwrap();
        assert!((s.raw - 0.4).abs() < 1e-15);
        assert!((s.risk - 0.6).abs() < 1e-15);
        assert!(bidirectional_product_risk(1.2, 0.5).is_err());
        assert!(bidirectional_product_risk(0.5, -0.1).is_err());
    }

    #[test]
    fn chrf_extremes_and_frozen_value() {
        assert_eq!(chrf_pp("kemi loru", "kemi loru").unwrap(), 100.0);
        assert_eq!(chrf_pp("aaaa", "zzzz").unwrap(), 0.0);
        // Hand-derived: char orders 1..4 give P=R of 3/4, 2/3, 1/2, 0; the
        // word unigram order gives 0; orders 5, 6 and word bigrams are empty
        // on both sides. Mean = 23/60, and F2 with P == R collapses to P.
        let got = chrf_pp("abcd", "abce").unwrap();
        assert!((got - 100.0 * 23.0 / 60.0).abs() < 1e-9, "{got}");
        assert!(chrf_pp("", "abc").is_err());
        assert!(chrf_pp("abc", " ").is_err());
    }

    #[test]
    fn chrf_is_asymmetric() {
        let a = chrf_pp("ab", "abcd").unwrap();
        let b = chrf_pp("abcd", "ab").unwrap();
        assert!((a - b).abs() > 1e-9, "{a} vs {b}");
    }

    #[test]
    fn score_file_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.tsv");
        let mut scores: BTreeMap<u64, Vec<DetectionScore>> = BTreeMap::new();
        scores.insert(2, vec![
            DetectionScore::new("imported:comet", 0.123456789012345, Orientation::Negate).unwrap(),
            DetectionScore::new("imported:lmr", 1.0 / 3.0, Orientation::Identity).unwrap(),
        ]);
        scores.insert(5, vec![
            DetectionScore::new("imported:comet", -2.5e-17, Orientation::Negate).unwrap(),
        ]);
        export_scores(&path, &scores).unwrap();
        let known: BTreeSet<u64> = [2u64, 5].into_iter().collect();
        let back = import_scores(&path, &known).unwrap();
        assert_eq!(back, scores);
    }

    #[test]
    fn import_rejects_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let known: BTreeSet<u64> = [1u64].into_iter().collect();

        let empty = dir.path().join("empty.tsv");
        std::fs::write(&empty, "id\tdetector\traw\torientation\n").unwrap();
        assert!(import_scores(&empty, &known).unwrap().is_empty());

        let dup = dir.path().join("dup.tsv");
        std::fs::write(
            &dup,
            "id\tdetector\traw\torientation\n1\tx\t0.5\tidentity\n1\tx\t0.6\tidentity\n",
        )
        .unwrap();
        let err = import_scores(&dup, &known).unwrap_err().to_string();
        assert!(err.contains("duplicate") && err.contains("id 1"), "{err}");

        let unknown = dir.path().join("unknown.tsv");
        std::fs::write(&unknown, "id\tdetector\traw\torientation\n9\tx\t0.5\tidentity\n").unwrap();
        assert!(import_scores(&unknown, &known).is_err());

        let short = dir.path().join("short.tsv");
        std::fs::write(&short, "id\tdetector\traw\torientation\n1\tx\t0.5\n").unwrap();
        assert!(import_scores(&short, &known).is_err());
    }

    #[test]
    fn bidirectional_scores_combine_from_imports() {
        let mut scores: BTreeMap<u64, Vec<DetectionScore>> = BTreeMap::new();
        scores.insert(1, vec![
            DetectionScore::new("imported:bidir_forward", 0.8, Orientation::Identity).unwrap(),
            DetectionScore::new("imported:bidir_backward", 0.5, Orientation::Identity).unwrap(),
        ]);
        scores.insert(2, vec![
            DetectionScore::new("imported:other", 0.1, Orientation::Identity).unwrap(),
        ]);
        let combined = combine_bidirectional(&scores).unwrap();
        assert_eq!(combined.len(), 1);
        assert!((combined[&1].raw - 0.4).abs() < 1e-15);
        scores.get_mut(&2).unwrap().push(
            DetectionScore::new("imported:bidir_forward", 0.9, Orientation::Identity).unwrap(),
        );
        assert!(combine_bidirectional(&scores).is_err());
    }

    #[test]
    fn risk_ordering_mirrors_raw_ordering() {
        let raws = [-3.0, 0.2, 1.5, -0.7, 0.0];
        for orientation in [Orientation::Negate, Orientation::OneMinus] {
            let mut by_raw: Vec<usize> = (0..raws.len()).collect();
            by_raw.sort_by(|&a, &b| raws[a].partial_cmp(&raws[b]).unwrap());
            let risks: Vec<f64> = raws.iter().map(|&r| orientation.apply(r)).collect();
            let mut by_risk: Vec<usize> = (0..raws.len()).collect();
            by_risk.sort_by(|&a, &b| risks[b].partial_cmp(&risks[a]).unwrap());
            assert_eq!(by_raw, by_risk, "{orientation:?}");
        }
    }
}
