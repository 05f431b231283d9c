//! Pathology taxonomy, induction, and the oracle labeler.
//!
//! Synthetic ground truth replaces human annotation: pathologies are induced
//! by construction and recovered by `auto_label` from token-overlap,
//! repetition, and length statistics. `induce_pathology` verifies its own
//! output against `auto_label` (retrying rare collisions), so the round-trip
//! label is stable by construction.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::TranslationRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PathologyLabel {
    Correct,
    Error,
    Undertranslation,
    StronglyDetached,
    Oscillatory,
    FullyDetached,
}

pub const ALL_LABELS: [PathologyLabel; 6] = [
    PathologyLabel::Correct,
    PathologyLabel::Error,
    PathologyLabel::Undertranslation,
    PathologyLabel::StronglyDetached,
    PathologyLabel::Oscillatory,
    PathologyLabel::FullyDetached,
];

impl PathologyLabel {
    /// Severity scale; StronglyDetached and Oscillatory share a rank.
    pub fn severity(self) -> u8 {
        match self {
            PathologyLabel::Correct => 0,
            PathologyLabel::Error => 1,
            PathologyLabel::Undertranslation => 2,
            PathologyLabel::StronglyDetached | PathologyLabel::Oscillatory => 3,
            PathologyLabel::FullyDetached => 4,
        }
    }

    /// Detachment pathologies count as hallucinations; content errors and
    /// undertranslations do not.
    pub fn is_hallucination(self) -> bool {
        matches!(
            self,
            PathologyLabel::StronglyDetached
                | PathologyLabel::Oscillatory
                | PathologyLabel::FullyDetached
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            PathologyLabel::Correct => "Correct",
            PathologyLabel::Error => "Error",
            PathologyLabel::Undertranslation => "Undertranslation",
            PathologyLabel::StronglyDetached => "StronglyDetached",
            PathologyLabel::Oscillatory => "Oscillatory",
            PathologyLabel::FullyDetached => "FullyDetached",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ALL_LABELS
            .iter()
            .copied()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown pathology label {s:?}")))
    }
}

impl std::fmt::Display for PathologyLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Multiset token overlap normalized by the longer sequence.
pub fn token_overlap(a: &[u32], b: &[u32]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let mut counts: HashMap<u32, i64> = HashMap::new();
    for &t in a {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut shared = 0i64;
    for &t in b {
        let c = counts.entry(t).or_insert(0);
        if *c > 0 {
            *c -= 1;
            shared += 1;
        }
    }
    shared as f64 / a.len().max(b.len()) as f64
}

/// Levenshtein distance over token sequences.
pub fn token_edit_distance(a: &[u32], b: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &at) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &bt) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(at != bt);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Highest occurrence count of any 2- or 3-token n-gram.
pub fn top_ngram_count(tokens: &[u32]) -> usize {
    let mut best = 0;
    for g in 2..=3usize {
        if tokens.len() < g {
            continue;
        }
        let mut counts: HashMap<&[u32], usize> = HashMap::new();
        for w in tokens.windows(g) {
            let c = counts.entry(w).or_insert(0);
            *c += 1;
            best = best.max(*c);
        }
    }
    best
}

/// Oracle labeler. Order matters: repetition first, then the
/// truncated-prefix test, then overlap bands split by edit distance.
pub fn auto_label(output: &[u32], reference: &[u32]) -> PathologyLabel {
    // Oscillation: a short n-gram looping at least three times while the
    // output runs well past the reference length.
    if top_ngram_count(output) >= 3 && 10 * output.len() >= 13 * reference.len() {
        return PathologyLabel::Oscillatory;
    }
    // Undertranslation: a faithful prefix covering at most half the reference.
    if !output.is_empty()
        && 2 * output.len() <= reference.len()
        && reference.starts_with(output)
    {
        return PathologyLabel::Undertranslation;
    }
    let overlap = token_overlap(output, reference);
    if overlap >= 0.9 {
        if token_edit_distance(output, reference) <= 2 {
            PathologyLabel::Correct
        } else {
            PathologyLabel::Error
        }
    } else if overlap >= 0.5 {
        PathologyLabel::Error
    } else if overlap >= 0.1 {
        PathologyLabel::StronglyDetached
    } else {
        PathologyLabel::FullyDetached
    }
}

fn disjoint(a: &[u32], b: &[u32]) -> bool {
    b.iter().all(|t| !a.contains(t))
}

/// Donor search: a reference sharing no tokens with `avoid` and at least
/// `min_len` long, scanned from a seeded random start.
fn find_donor<'a>(
    donors: &'a [TranslationRecord],
    avoid: &[u32],
    self_id: u64,
    min_len: usize,
    rng: &mut Rng,
) -> Result<&'a [u32]> {
    if donors.is_empty() {
        return Err(Error::data("no donor sentences available"));
    }
    let start = rng.below(donors.len());
    for i in 0..donors.len() {
        let d = &donors[(start + i) % donors.len()];
        if d.id != self_id && d.reference.len() >= min_len && disjoint(avoid, &d.reference) {
            return Ok(&d.reference);
        }
    }
    Err(Error::data(format!(
        "corpus too small to find an unrelated donor sentence for record {self_id}"
    )))
}

/// Real (non-reserved) token ids for substitution draws.
fn random_real_token(vocab_size: usize, rng: &mut Rng) -> u32 {
    (crate::transformer::RESERVED_TOKENS + rng.below(vocab_size - crate::transformer::RESERVED_TOKENS))
        as u32
}

/// Produce a perturbed output realizing `label` for this record. The result
/// is re-checked against `auto_label`; mismatching draws (possible for the
/// donor-based labels when a donor accidentally mimics another pathology)
/// are retried.
pub fn induce_pathology(
    record: &TranslationRecord,
    label: PathologyLabel,
    donors: &[TranslationRecord],
    vocab_size: usize,
    rng: &mut Rng,
) -> Result<Vec<u32>> {
    let reference = &record.reference;
    if reference.is_empty() {
        return Err(Error::data(format!("record {} has an empty reference", record.id)));
    }
    let len = reference.len();
    for _attempt in 0..50 {
        let candidate = match label {
            PathologyLabel::Correct => reference.clone(),
            PathologyLabel::Error => {
                let subs = if len < 6 { 1 } else { 2 };
                let mut out = reference.clone();
                let mut positions = Vec::new();
                while positions.len() < subs {
                    let p = rng.below(len);
                    if !positions.contains(&p) {
                        positions.push(p);
                    }
                }
                for p in positions {
                    loop {
                        let t = random_real_token(vocab_size, rng);
                        if t != reference[p] {
                            out[p] = t;
                            break;
                        }
                    }
                }
                out
            }
            PathologyLabel::Undertranslation => reference[..(len / 2).max(1)].to_vec(),
            PathologyLabel::StronglyDetached => {
                let span = len.div_ceil(2).max((6 * len).div_ceil(10)).min(len - 1);
                let start = rng.below(len - span + 1);
                let donor = find_donor(donors, reference, record.id, span, rng)?;
                let mut out = reference.clone();
                out[start..start + span].copy_from_slice(&donor[..span]);
                out
            }
            PathologyLabel::Oscillatory => {
                let g = 2 + rng.below(2);
                let g = g.min(len);
                let p = rng.below(len - g + 1);
                let gram = reference[p..p + g].to_vec();
                let mut out = reference[..p + g].to_vec();
                let target_len = (3 * len).div_ceil(2);
                let mut copies = 1;
                while out.len() < target_len || copies < 3 {
                    out.extend_from_slice(&gram);
                    copies += 1;
                }
                out
            }
            PathologyLabel::FullyDetached => {
                find_donor(donors, reference, record.id, 1, rng)?.to_vec()
            }
        };
        if auto_label(&candidate, reference) == label {
            return Ok(candidate);
        }
    }
    Err(Error::data(format!(
        "could not realize label {label} for record {} in 50 attempts",
        record.id
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};

    #[test]
    fn severity_ordering_matches_taxonomy() {
        use PathologyLabel::*;
        assert!(Correct.severity() < Error.severity());
        assert!(Error.severity() < Undertranslation.severity());
        assert!(Undertranslation.severity() < StronglyDetached.severity());
        assert_eq!(StronglyDetached.severity(), Oscillatory.severity());
        assert!(Oscillatory.severity() < FullyDetached.severity());
        assert!(!Undertranslation.is_hallucination());
        assert!(StronglyDetached.is_hallucination());
    }

    #[test]
    fn overlap_and_distance_basics() {
        assert_eq!(token_overlap(&[3, 4, 5], &[3, 4, 5]), 1.0);
        assert_eq!(token_overlap(&[3, 4], &[5, 6]), 0.0);
        // Multiset: [3,3,4] vs [3,4,4] share one 3 and one 4.
        assert!((token_overlap(&[3, 3, 4], &[3, 4, 4]) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(token_edit_distance(&[3, 4, 5], &[3, 4, 5]), 0);
        assert_eq!(token_edit_distance(&[3, 4, 5], &[3, 9, 5]), 1);
        assert_eq!(token_edit_distance(&[3, 4], &[3, 4, 5, 6]), 2);
    }

    #[test]
    fn labeler_trivial_cases() {
        let reference = vec![5, 6, 7, 8, 9, 10];
        assert_eq!(auto_label(&reference, &reference), PathologyLabel::Correct);
        // Disjoint output of comparable length: fully detached.
        assert_eq!(
            auto_label(&[20, 21, 22, 23, 24, 25], &reference),
            PathologyLabel::FullyDetached
        );
        // Faithful half-prefix.
        assert_eq!(auto_label(&[5, 6, 7], &reference), PathologyLabel::Undertranslation);
        // Single substitution.
        assert_eq!(
            auto_label(&[5, 6, 7, 8, 9, 30], &reference),
            PathologyLabel::Error
        );
        // Looping bigram overruns the reference.
        assert_eq!(
            auto_label(&[5, 6, 5, 6, 5, 6, 5, 6, 5, 6], &reference),
            PathologyLabel::Oscillatory
        );
        // Half replaced with unrelated content.
        assert_eq!(
            auto_label(&[5, 6, 40, 41, 42, 43], &reference),
            PathologyLabel::StronglyDetached
        );
    }

    #[test]
    fn induce_round_trips_on_a_thousand_seeded_samples() {
        let spec = CorpusSpec {
            train_size: 0,
            dev_size: 0,
            eval_size: 250,
            seed: 5,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let donors = &corpus.eval;
        let mut rng = Rng::new(99);
        let mut checked = 0;
        for label in ALL_LABELS {
            for record in donors.iter().take(1000 / ALL_LABELS.len()) {
                let out = induce_pathology(record, label, donors, spec.vocab_size, &mut rng)
                    .unwrap_or_else(|e| panic!("{label}: {e}"));
                assert_eq!(auto_label(&out, &record.reference), label, "record {}", record.id);
                checked += 1;
            }
        }
        assert!(checked >= 900);
    }

    #[test]
    fn fully_detached_has_negligible_overlap() {
        let spec = CorpusSpec {
            train_size: 0,
            dev_size: 0,
            eval_size: 100,
            seed: 6,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let mut rng = Rng::new(3);
        for record in corpus.eval.iter().take(30) {
            let out = induce_pathology(
                record,
                PathologyLabel::FullyDetached,
                &corpus.eval,
                spec.vocab_size,
                &mut rng,
            )
            .unwrap();
            assert!(token_overlap(&out, &record.reference) < 0.05);
        }
    }

    #[test]
    fn oscillatory_statistics_match_definition() {
        let spec = CorpusSpec {
            train_size: 0,
            dev_size: 0,
            eval_size: 50,
            seed: 7,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let mut rng = Rng::new(4);
        for record in corpus.eval.iter().take(20) {
            let out = induce_pathology(
                record,
                PathologyLabel::Oscillatory,
                &corpus.eval,
                spec.vocab_size,
                &mut rng,
            )
            .unwrap();
            assert!(top_ngram_count(&out) >= 3);
            assert!(2 * out.len() >= 3 * record.reference.len());
        }
    }
}
