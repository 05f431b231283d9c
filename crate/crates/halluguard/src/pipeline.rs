//! Detect-then-rewrite mitigation: flag risky records, regenerate
//! candidates, rerank with a reference-free detector, and report pathology
//! rates before and after. The record's existing output is the "default"
//! translation and always competes in reranking.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::pathology::{auto_label, PathologyLabel, ALL_LABELS};
use crate::corpus::TranslationRecord;
use crate::decoding::{self, GenSpec};
use crate::detectors::{self, names, DetectionScore};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::trainer::dual::{DualEncoder, Side};
use crate::transformer::TransformerModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagRule {
    /// Flag the ceil(fraction * N) highest-risk records; ties broken by id.
    Fraction(f64),
    /// Flag every record with risk at or above the cutoff.
    Threshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Flag(FlagRule),
    /// Seeded sample of up to `per_label` records per current pathology
    /// label, independent of detector scores.
    Stratified { per_label: usize },
}

impl SelectionMode {
    pub fn name(&self) -> &'static str {
        match self {
            SelectionMode::Flag(_) => "flag",
            SelectionMode::Stratified { .. } => "stratified",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSpec {
    /// Detector whose precomputed risk drives flagging.
    pub detector: String,
    pub mode: SelectionMode,
    pub gen: GenSpec,
    pub reranker: String,
    pub seed: u64,
    /// Test-only escape hatch letting the chrF++ oracle rerank.
    #[serde(default)]
    pub allow_oracle_reranker: bool,
}

impl Default for PipelineSpec {
    fn default() -> Self {
        PipelineSpec {
            detector: names::SEQ_LOGPROB.to_string(),
            mode: SelectionMode::Flag(FlagRule::Fraction(0.1)),
            gen: GenSpec {
                strategy: decoding::Strategy::McBeam,
                ..GenSpec::default()
            },
            reranker: names::ALTI.to_string(),
            seed: 7,
            allow_oracle_reranker: false,
        }
    }
}

impl PipelineSpec {
    pub fn validate(&self) -> Result<()> {
        if let SelectionMode::Flag(FlagRule::Fraction(f)) = self.mode {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid(format!("flag fraction {f} outside [0, 1]")));
            }
        }
        self.gen.validate()?;
        validate_reranker(&self.reranker, self.allow_oracle_reranker)
    }
}

/// Rerankers must score arbitrary new candidates without a reference:
/// the chrF++ oracle is refused (unless explicitly forced for oracle
/// comparisons) and file-backed detectors cannot score unseen outputs.
pub fn validate_reranker(name: &str, allow_oracle: bool) -> Result<()> {
    match name {
        n if n == names::SEQ_LOGPROB || n == names::ALTI || n == names::DUAL_COS => Ok(()),
        n if n == names::CHRF_PP => {
            if allow_oracle {
                Ok(())
            } else {
                Err(Error::invalid(
                    "chrf_pp needs a reference and cannot rerank new translations",
                ))
            }
        }
        n if n == names::BIDIR_PRODUCT || n.starts_with(names::IMPORTED_PREFIX) => Err(
            Error::invalid(format!("{n} scores come from a file and cannot rerank new candidates")),
        ),
        other => Err(Error::invalid(format!("unknown reranker {other:?}"))),
    }
}

/// Deterministic per-record generation seed.
pub fn per_record_seed(global_seed: u64, record_id: u64) -> u64 {
    Rng::new(global_seed).derive("mitigate").derive_u64(record_id).at(0)
}

/// Model-backed risk computation for the detectors that can score any
/// (source, output) pair.
pub struct Scorer<'a> {
    pub model: &'a TransformerModel,
    pub encoder: Option<&'a DualEncoder>,
}

impl<'a> Scorer<'a> {
    pub fn risk(
        &self,
        detector: &str,
        src: &[u32],
        out: &[u32],
        reference: Option<&[u32]>,
    ) -> Result<f64> {
        let score = match detector {
            n if n == names::SEQ_LOGPROB => detectors::seq_logprob(self.model, src, out)?,
            n if n == names::ALTI => detectors::alti_risk(self.model, src, out)?,
            n if n == names::DUAL_COS => {
                let encoder = self
                    .encoder
                    .ok_or_else(|| Error::invalid("no dual encoder available for dual_cos"))?;
                detectors::cosine_similarity_risk(encoder, src, out)?
            }
            n if n == names::CHRF_PP => {
                let reference =
                    reference.ok_or_else(|| Error::invalid("chrf_pp requires a reference"))?;
                detectors::chrf_pp_score(out, reference)?
            }
            other => return Err(Error::invalid(format!("cannot compute {other:?} here"))),
        };
        Ok(score.risk)
    }
}

/// Fill each record's score map (risk values keyed by detector name) with
/// every model-computable detector; the chrF++ oracle only when asked.
pub fn score_corpus(
    model: &TransformerModel,
    encoder: Option<&DualEncoder>,
    records: &mut [TranslationRecord],
    include_oracle: bool,
) -> Result<()> {
    for r in records.iter_mut() {
        let out = r.output()?.to_vec();
        let seq = detectors::seq_logprob(model, &r.src, &out)?;
        r.scores.insert(seq.detector.clone(), seq.risk);
        let alti = detectors::alti_risk(model, &r.src, &out)?;
        r.scores.insert(alti.detector.clone(), alti.risk);
        if let Some(encoder) = encoder {
            let cos = detectors::cosine_similarity_risk(encoder, &r.src, &out)?;
            r.scores.insert(cos.detector.clone(), cos.risk);
        }
        if include_oracle {
            let chrf = detectors::chrf_pp_score(&out, &r.reference)?;
            r.scores.insert(chrf.detector.clone(), chrf.risk);
        }
    }
    Ok(())
}

/// Merge imported file scores into the records and derive bidir_product
/// wherever both directions are present.
pub fn attach_imported(
    records: &mut [TranslationRecord],
    imported: &BTreeMap<u64, Vec<DetectionScore>>,
) -> Result<()> {
    let mut by_id: BTreeMap<u64, &mut TranslationRecord> =
        records.iter_mut().map(|r| (r.id, r)).collect();
    for (id, row) in imported {
        let record = by_id
            .get_mut(id)
            .ok_or_else(|| Error::data(format!("imported score for unknown record id {id}")))?;
        for s in row {
            record.scores.insert(s.detector.clone(), s.risk);
        }
    }
    for (id, combined) in detectors::combine_bidirectional(imported)? {
        let record = by_id.get_mut(&id).expect("id checked above");
        record.scores.insert(combined.detector.clone(), combined.risk);
    }
    Ok(())
}

/// Records selected for rewriting, as a set of ids.
pub fn flag(
    records: &[TranslationRecord],
    detector: &str,
    rule: FlagRule,
) -> Result<BTreeSet<u64>> {
    let mut scored = Vec::with_capacity(records.len());
    for r in records {
        let risk = r.scores.get(detector).copied().ok_or_else(|| {
            Error::data(format!("record {} has no {detector} score", r.id))
        })?;
        scored.push((r.id, risk));
    }
    match rule {
        FlagRule::Fraction(f) => {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid(format!("flag fraction {f} outside [0, 1]")));
            }
            let k = (f * scored.len() as f64).ceil() as usize;
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            Ok(scored.into_iter().take(k).map(|(id, _)| id).collect())
        }
        FlagRule::Threshold(t) => {
            Ok(scored.into_iter().filter(|&(_, r)| r >= t).map(|(id, _)| id).collect())
        }
    }
}

/// Seeded stratified sample: up to per_label ids for each pathology label
/// currently exhibited by the outputs.
pub fn stratified_sample(
    records: &[TranslationRecord],
    per_label: usize,
    seed: u64,
) -> Result<BTreeSet<u64>> {
    let mut groups: BTreeMap<PathologyLabel, Vec<u64>> = BTreeMap::new();
    for r in records {
        let label = auto_label(r.output()?, &r.reference);
        groups.entry(label).or_default().push(r.id);
    }
    let mut out = BTreeSet::new();
    for (label, mut ids) in groups {
        ids.sort();
        let mut rng = Rng::new(seed).derive("stratified").derive_u64(label.severity() as u64);
        rng.shuffle(&mut ids);
        out.extend(ids.into_iter().take(per_label));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub tokens: Vec<u32>,
    pub risk: f64,
    pub strategy: String,
    pub is_default: bool,
    pub chosen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteAudit {
    pub record_id: u64,
    pub seed: u64,
    /// Set when no candidate was scoreable and the default passed through.
    pub fallback: bool,
    pub rows: Vec<AuditRow>,
}

/// Minimum risk wins; ties prefer the default, then the lexicographically
/// smallest token sequence.
fn select_min_risk(rows: &[AuditRow]) -> usize {
    let mut best = 0;
    for i in 1..rows.len() {
        let (a, b) = (&rows[i], &rows[best]);
        let better = match a.risk.partial_cmp(&b.risk).unwrap() {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Greater => false,
            std::cmp::Ordering::Equal => match (a.is_default, b.is_default) {
                (true, false) => true,
                (false, true) => false,
                _ => a.tokens < b.tokens,
            },
        };
        if better {
            best = i;
        }
    }
    best
}

/// Rewrite one flagged record: generate alternatives, rerank the deduplicated
/// candidate set (default included), return the winner's surface tokens.
pub fn rewrite(
    record: &TranslationRecord,
    scorer: &Scorer,
    gen: &GenSpec,
    reranker: &str,
    allow_oracle: bool,
    seed: u64,
) -> Result<(Vec<u32>, RewriteAudit)> {
    validate_reranker(reranker, allow_oracle)?;
    let default = record.output()?.to_vec();
    let gen_spec = GenSpec { seed, ..gen.clone() };
    let generated = decoding::generate(scorer.model, &record.src, &gen_spec)?;

    let mut seen: BTreeSet<Vec<u32>> = BTreeSet::new();
    let mut rows: Vec<AuditRow> = Vec::new();
    let mut push = |tokens: Vec<u32>, strategy: String, is_default: bool| {
        if !tokens.is_empty() && seen.insert(tokens.clone()) {
            rows.push(AuditRow { tokens, risk: 0.0, strategy, is_default, chosen: false });
        }
    };
    push(default.clone(), "default".to_string(), true);
    for h in &generated {
        push(h.surface().to_vec(), h.strategy.clone(), false);
    }

    if rows.is_empty() {
        log::warn!(
            "record {}: no non-empty candidates, keeping the default output",
            record.id
        );
        return Ok((
            default,
            RewriteAudit { record_id: record.id, seed, fallback: true, rows },
        ));
    }
    for row in rows.iter_mut() {
        row.risk = scorer.risk(reranker, &record.src, &row.tokens, Some(&record.reference))?;
    }
    let chosen = select_min_risk(&rows);
    rows[chosen].chosen = true;
    let tokens = rows[chosen].tokens.clone();
    Ok((tokens, RewriteAudit { record_id: record.id, seed, fallback: false, rows }))
}

/// Pathology counts over current outputs, zero-filled for all labels.
pub fn label_counts(records: &[TranslationRecord]) -> Result<BTreeMap<String, usize>> {
    let mut counts: BTreeMap<String, usize> =
        ALL_LABELS.iter().map(|l| (l.name().to_string(), 0)).collect();
    for r in records {
        let label = auto_label(r.output()?, &r.reference);
        *counts.get_mut(label.name()).expect("all labels present") += 1;
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationSummary {
    pub mode: String,
    pub selected: usize,
    pub fallbacks: usize,
    pub before: BTreeMap<String, usize>,
    pub after: BTreeMap<String, usize>,
}

impl MitigationSummary {
    pub fn hallucination_count(counts: &BTreeMap<String, usize>) -> usize {
        ALL_LABELS
            .iter()
            .filter(|l| l.is_hallucination())
            .map(|l| counts.get(l.name()).copied().unwrap_or(0))
            .sum()
    }
}

/// The full loop: select records, rewrite them, leave the rest untouched.
/// Returns the updated records, per-record audits, and the before/after
/// pathology summary.
pub fn mitigate_corpus(
    records: &[TranslationRecord],
    scorer: &Scorer,
    spec: &PipelineSpec,
) -> Result<(Vec<TranslationRecord>, Vec<RewriteAudit>, MitigationSummary)> {
    spec.validate()?;
    let selected = match spec.mode {
        SelectionMode::Flag(rule) => flag(records, &spec.detector, rule)?,
        SelectionMode::Stratified { per_label } => {
            stratified_sample(records, per_label, spec.seed)?
        }
    };
    let before = label_counts(records)?;
    let mut updated = records.to_vec();
    let mut audits = Vec::with_capacity(selected.len());
    let mut fallbacks = 0;
    for r in updated.iter_mut() {
        if !selected.contains(&r.id) {
            continue;
        }
        let seed = per_record_seed(spec.seed, r.id);
        let (tokens, audit) =
            rewrite(r, scorer, &spec.gen, &spec.reranker, spec.allow_oracle_reranker, seed)?;
        if audit.fallback {
            fallbacks += 1;
        }
        r.label = Some(auto_label(&tokens, &r.reference));
        r.out = Some(tokens);
        audits.push(audit);
    }
    let after = label_counts(&updated)?;
    let summary = MitigationSummary {
        mode: spec.mode.name().to_string(),
        selected: selected.len(),
        fallbacks,
        before,
        after,
    };
    Ok((updated, audits, summary))
}

/// Re-draw each FullyDetached output as the donor reference the model itself
/// scores most fluent, keeping zero token overlap with the record's own
/// reference. Models the high-confidence detached regime: text the model
/// would happily emit, where likelihood-based detectors lose separation while
/// source-attribution detectors should not. At most `limit` candidates per
/// record are scored, drawn in seeded random order. Returns the number of
/// records rewritten.
pub fn fluent_detached(
    model: &TransformerModel,
    records: &mut [TranslationRecord],
    donors: &[TranslationRecord],
    limit: usize,
    seed: u64,
) -> Result<usize> {
    if limit == 0 {
        return Err(Error::invalid("fluent_detached limit must be positive"));
    }
    let mut rewritten = 0;
    for rec in records.iter_mut() {
        if rec.label != Some(PathologyLabel::FullyDetached) {
            continue;
        }
        let own: BTreeSet<u32> = rec.reference.iter().copied().collect();
        let mut order: Vec<usize> = (0..donors.len()).collect();
        Rng::new(seed).derive("fluent-detached").derive_u64(rec.id).shuffle(&mut order);
        let mut best: Option<(f64, &[u32])> = None;
        let mut scored = 0usize;
        for &j in &order {
            let d = &donors[j];
            if d.id == rec.id || d.reference.is_empty() {
                continue;
            }
            if d.reference.iter().any(|t| own.contains(t)) {
                continue;
            }
            if auto_label(&d.reference, &rec.reference) != PathologyLabel::FullyDetached {
                continue;
            }
            let risk = detectors::seq_logprob(model, &rec.src, &d.reference)?.risk;
            if best.as_ref().is_none_or(|(b, _)| risk < *b) {
                best = Some((risk, &d.reference));
            }
            scored += 1;
            if scored >= limit {
                break;
            }
        }
        let Some((_, donor)) = best else {
            return Err(Error::invalid(format!(
                "no disjoint donor available for record {}",
                rec.id
            )));
        };
        rec.out = Some(donor.to_vec());
        rewritten += 1;
    }
    Ok(rewritten)
}

/// Embedding-level cosine for a record pair via the dual encoder; exposed
/// for the CLI score path.
pub fn dual_cosine(encoder: &DualEncoder, src: &[u32], out: &[u32]) -> Result<f64> {
    let u = encoder.embed(Side::Source, src)?;
    let v = encoder.embed(Side::Target, out)?;
    Ok(u.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::Strategy;
    use crate::trainer::dual::DualEncoderConfig;
    use crate::transformer::{ModelConfig, EOS};

    fn model() -> TransformerModel {
        let config = ModelConfig {
            vocab_size: 12,
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ffn: 32,
            max_len: 24,
            dropout_rate: 0.1,
        };
        TransformerModel::new(config, &Rng::new(77)).unwrap()
    }

    fn record(id: u64, risk: f64) -> TranslationRecord {
        let mut r = TranslationRecord::new(id, vec![3, 4, 5], vec![6, 7, 8]);
        r.out = Some(vec![6, 7, 8]);
        r.scores.insert("d".to_string(), risk);
        r
    }

    #[test]
    fn flag_fraction_rules() {
        let records: Vec<TranslationRecord> =
            (0..10).map(|i| record(i, i as f64 / 10.0)).collect();
        assert_eq!(flag(&records, "d", FlagRule::Fraction(1.0)).unwrap().len(), 10);
        assert!(flag(&records, "d", FlagRule::Fraction(0.0)).unwrap().is_empty());
        let top3 = flag(&records, "d", FlagRule::Fraction(0.3)).unwrap();
        assert_eq!(top3, [7u64, 8, 9].into_iter().collect());
        // ceil(0.25 * 10) = 3
        assert_eq!(flag(&records, "d", FlagRule::Fraction(0.25)).unwrap().len(), 3);
        assert!(flag(&records, "d", FlagRule::Fraction(1.5)).is_err());
    }

    #[test]
    fn flag_ties_break_by_id_and_threshold_is_inclusive() {
        let mut records: Vec<TranslationRecord> =
            (0..5).map(|i| record(i, 0.1)).collect();
        for id in [1u64, 2, 4] {
            records[id as usize].scores.insert("d".to_string(), 0.9);
        }
        let two = flag(&records, "d", FlagRule::Fraction(0.4)).unwrap();
        assert_eq!(two, [1u64, 2].into_iter().collect());
        let th = flag(&records, "d", FlagRule::Threshold(0.9)).unwrap();
        assert_eq!(th, [1u64, 2, 4].into_iter().collect());
        records[0].scores.clear();
        let err = flag(&records, "d", FlagRule::Fraction(0.5)).unwrap_err().to_string();
        assert!(err.contains("record 0"), "{err}");
    }

    #[test]
    fn selection_tie_rules() {
        let row = |tokens: Vec<u32>, risk: f64, is_default: bool| AuditRow {
            tokens,
            risk,
            strategy: "x".into(),
            is_default,
            chosen: false,
        };
        let rows = vec![
            row(vec![9, 9], 0.5, true),
            row(vec![1, 1], 0.5, false),
            row(vec![5], 0.7, false),
        ];
        assert_eq!(select_min_risk(&rows), 0);
        let rows = vec![
            row(vec![9, 9], 0.5, false),
            row(vec![1, 1], 0.5, false),
            row(vec![2], 0.5, false),
        ];
        assert_eq!(select_min_risk(&rows), 1);
        let rows = vec![row(vec![9], 0.5, true), row(vec![1], 0.2, false)];
        assert_eq!(select_min_risk(&rows), 1);
    }

    #[test]
    fn reranker_validation_rules() {
        assert!(validate_reranker(names::SEQ_LOGPROB, false).is_ok());
        assert!(validate_reranker(names::ALTI, false).is_ok());
        assert!(validate_reranker(names::DUAL_COS, false).is_ok());
        assert!(validate_reranker(names::CHRF_PP, false).is_err());
        assert!(validate_reranker(names::CHRF_PP, true).is_ok());
        assert!(validate_reranker(names::BIDIR_PRODUCT, false).is_err());
        assert!(validate_reranker("imported:comet", false).is_err());
        assert!(validate_reranker("nonsense", false).is_err());
    }

    #[test]
    fn degenerate_generation_returns_default() {
        let m = model();
        let scorer = Scorer { model: &m, encoder: None };
        let mut r = TranslationRecord::new(1, vec![3, 4, 5], vec![6, 7, 8]);
        let default = decoding::default_translation(&m, &r.src).unwrap();
        r.out = Some(default.surface().to_vec());
        let gen = GenSpec { strategy: Strategy::Default, ..GenSpec::default() };
        let (tokens, audit) =
            rewrite(&r, &scorer, &gen, names::SEQ_LOGPROB, false, 5).unwrap();
        assert_eq!(tokens, default.surface());
        assert_eq!(audit.rows.len(), 1);
        assert!(audit.rows[0].is_default && audit.rows[0].chosen);
        assert!(!audit.fallback);
    }

    #[test]
    fn output_is_audited_and_no_worse_than_default() {
        let m = model();
        let scorer = Scorer { model: &m, encoder: None };
        let mut r = TranslationRecord::new(2, vec![3, 4, 5, 6], vec![7, 8, 9]);
        r.out = Some(vec![7, 8, 9]);
        let gen = GenSpec {
            strategy: Strategy::McGreedy,
            n: 4,
            seed: 11,
            ..GenSpec::default()
        };
        let (tokens, audit) = rewrite(&r, &scorer, &gen, names::SEQ_LOGPROB, false, 11).unwrap();
        let chosen: Vec<&AuditRow> = audit.rows.iter().filter(|row| row.chosen).collect();
        assert_eq!(chosen.len(), 1);
        assert_eq!(chosen[0].tokens, tokens);
        let default_row = audit.rows.iter().find(|row| row.is_default).unwrap();
        assert!(chosen[0].risk <= default_row.risk);
        let dedup: BTreeSet<&Vec<u32>> = audit.rows.iter().map(|row| &row.tokens).collect();
        assert_eq!(dedup.len(), audit.rows.len());
    }

    #[test]
    fn empty_candidates_fall_back_to_default() {
        let mut m = model();
        // Forcing EOS first makes every generated surface empty.
        *m.params_mut().get_mut("out.b").unwrap().at2_mut(0, EOS as usize) = 1e9;
        let scorer = Scorer { model: &m, encoder: None };
        let mut r = TranslationRecord::new(3, vec![3, 4], vec![5, 6]);
        r.out = Some(Vec::new());
        let gen = GenSpec { strategy: Strategy::Beam, n: 1, beam_size: 1, ..GenSpec::default() };
        let (tokens, audit) = rewrite(&r, &scorer, &gen, names::SEQ_LOGPROB, false, 9).unwrap();
        assert!(tokens.is_empty());
        assert!(audit.fallback);
        assert!(audit.rows.is_empty());
    }

    #[test]
    fn chosen_risk_is_monotone_in_hypothesis_count() {
        let m = model();
        let scorer = Scorer { model: &m, encoder: None };
        let mut r = TranslationRecord::new(4, vec![3, 4, 5], vec![6, 7]);
        r.out = Some(vec![6, 7]);
        let mut last = f64::INFINITY;
        for n in [1usize, 2, 4, 8] {
            let gen = GenSpec {
                strategy: Strategy::McGreedy,
                n,
                seed: 3,
                ..GenSpec::default()
            };
            let (_, audit) = rewrite(&r, &scorer, &gen, names::SEQ_LOGPROB, false, 3).unwrap();
            let risk = audit.rows.iter().find(|row| row.chosen).unwrap().risk;
            assert!(risk <= last + 1e-12, "risk {risk} rose above {last} at n={n}");
            last = risk;
        }
    }

    #[test]
    fn mitigate_fraction_zero_is_identity() {
        let m = model();
        let scorer = Scorer { model: &m, encoder: None };
        let mut records: Vec<TranslationRecord> = (0..4)
            .map(|i| {
                let mut r = TranslationRecord::new(i, vec![3, 4, 5], vec![6, 7, 8]);
                r.out = Some(vec![6, 7, 8]);
                r.scores.insert(names::SEQ_LOGPROB.to_string(), i as f64);
                r
            })
            .collect();
        records[2].out = Some(vec![9, 9, 9, 9, 9, 9]);
        let spec = PipelineSpec {
            mode: SelectionMode::Flag(FlagRule::Fraction(0.0)),
            ..PipelineSpec::default()
        };
        let (updated, audits, summary) = mitigate_corpus(&records, &scorer, &spec).unwrap();
        assert_eq!(updated, records);
        assert!(audits.is_empty());
        assert_eq!(summary.before, summary.after);
        assert_eq!(summary.selected, 0);
    }

    #[test]
    fn mitigation_is_deterministic() {
        let m = model();
        let scorer = Scorer { model: &m, encoder: None };
        let records: Vec<TranslationRecord> = (0..3)
            .map(|i| {
                let mut r =
                    TranslationRecord::new(i, vec![3 + i as u32, 4, 5], vec![6, 7, 8]);
                r.out = Some(vec![6, 7, 8]);
                r.scores.insert(names::SEQ_LOGPROB.to_string(), i as f64);
                r
            })
            .collect();
        let spec = PipelineSpec {
            mode: SelectionMode::Flag(FlagRule::Fraction(0.5)),
            gen: GenSpec { strategy: Strategy::McGreedy, n: 3, ..GenSpec::default() },
            reranker: names::SEQ_LOGPROB.to_string(),
            ..PipelineSpec::default()
        };
        let a = mitigate_corpus(&records, &scorer, &spec).unwrap();
        let b = mitigate_corpus(&records, &scorer, &spec).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        assert_eq!(a.2.selected, 2);
    }

    #[test]
    fn stratified_sampling_is_per_label_and_seeded() {
        let mut records = Vec::new();
        for i in 0..6u64 {
            let mut r = TranslationRecord::new(i, vec![3, 4, 5, 6], vec![6, 7, 8, 9]);
            // Even ids correct, odd ids fully detached.
            r.out = Some(if i % 2 == 0 { vec![6, 7, 8, 9] } else { vec![10, 11, 3, 4] });
            records.push(r);
        }
        let one = stratified_sample(&records, 1, 5).unwrap();
        assert_eq!(one.len(), 2);
        let again = stratified_sample(&records, 1, 5).unwrap();
        assert_eq!(one, again);
        let all = stratified_sample(&records, 10, 5).unwrap();
        assert_eq!(all.len(), 6);
        let labels: BTreeSet<PathologyLabel> = one
            .iter()
            .map(|id| {
                let r = &records[*id as usize];
                auto_label(r.out.as_ref().unwrap(), &r.reference)
            })
            .collect();
        assert_eq!(labels.len(), 2);
    }

    #[test]
    fn scoring_fills_every_available_detector() {
        let m = model();
        let enc = DualEncoder::new(
            DualEncoderConfig { vocab_size: 12, d_model: 8, max_len: 16 },
            &Rng::new(4),
        )
        .unwrap();
        let mut records = vec![TranslationRecord::new(1, vec![3, 4, 5], vec![6, 7, 8])];
        records[0].out = Some(vec![6, 7, 8]);
        score_corpus(&m, Some(&enc), &mut records, true).unwrap();
        for key in [names::SEQ_LOGPROB, names::ALTI, names::DUAL_COS, names::CHRF_PP] {
            assert!(records[0].scores[key].is_finite(), "{key}");
        }
        let direct = detectors::seq_logprob(&m, &records[0].src, &[6, 7, 8]).unwrap();
        assert_eq!(records[0].scores[names::SEQ_LOGPROB], direct.risk);

        let imported: BTreeMap<u64, Vec<DetectionScore>> = [(1u64, vec![
            DetectionScore::new(
                "imported:bidir_forward",
                0.9,
                detectors::Orientation::Identity,
            )
            .unwrap(),
            DetectionScore::new(
                "imported:bidir_backward",
                0.5,
                detectors::Orientation::Identity,
            )
            .unwrap(),
        ])]
        .into_iter()
        .collect();
        attach_imported(&mut records, &imported).unwrap();
        assert!((records[0].scores[names::BIDIR_PRODUCT] - (1.0 - 0.45)).abs() < 1e-12);
        assert_eq!(records[0].scores["imported:bidir_forward"], 0.9);

        let missing: BTreeMap<u64, Vec<DetectionScore>> = [(9u64, Vec::new())].into_iter().collect();
        assert!(attach_imported(&mut records, &missing).is_err());
    }
}
