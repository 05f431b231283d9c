//! Detection-quality metrics and distribution analyses over labeled,
//! risk-scored records.

pub mod report;
pub mod stats;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::pathology::{auto_label, PathologyLabel};
use crate::corpus::TranslationRecord;
use crate::error::{Error, Result};

pub use stats::{fleiss_kappa, majority_vote, paired_t_test, TTest, Verdict};

/// Parallel arrays of risk, binary hallucination ground truth, and the full
/// pathology label, ordered by record id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScores {
    pub ids: Vec<u64>,
    pub risks: Vec<f64>,
    pub hallucination: Vec<bool>,
    pub labels: Vec<PathologyLabel>,
}

impl LabeledScores {
    pub fn new(
        ids: Vec<u64>,
        risks: Vec<f64>,
        labels: Vec<PathologyLabel>,
    ) -> Result<Self> {
        if ids.len() != risks.len() || risks.len() != labels.len() {
            return Err(Error::Shape("parallel arrays differ in length".into()));
        }
        if risks.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("risk score".into()));
        }
        let hallucination = labels.iter().map(|l| l.is_hallucination()).collect();
        Ok(LabeledScores { ids, risks, hallucination, labels })
    }

    /// Pull one detector's risks out of scored records; the label is the
    /// stored one, or the automatic label of the output when absent.
    pub fn from_records(records: &[TranslationRecord], detector: &str) -> Result<Self> {
        let mut ids = Vec::with_capacity(records.len());
        let mut risks = Vec::with_capacity(records.len());
        let mut labels = Vec::with_capacity(records.len());
        for r in records {
            let risk = r.scores.get(detector).copied().ok_or_else(|| {
                Error::data(format!("record {} has no {detector} score", r.id))
            })?;
            ids.push(r.id);
            risks.push(risk);
            labels.push(match r.label {
                Some(label) => label,
                None => auto_label(r.output()?, &r.reference),
            });
        }
        Self::new(ids, risks, labels)
    }

    pub fn len(&self) -> usize {
        self.risks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.risks.is_empty()
    }

    fn class_counts(&self) -> (usize, usize) {
        let pos = self.hallucination.iter().filter(|&&h| h).count();
        (pos, self.len() - pos)
    }

    /// Indices of the worst-k set: k = ceil(fraction * N), highest risk
    /// first, ties by record id.
    pub fn worst_indices(&self, fraction: f64) -> Result<Vec<usize>> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::invalid(format!("fraction {fraction} outside [0, 1]")));
        }
        let k = (fraction * self.len() as f64).ceil() as usize;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            self.risks[b]
                .partial_cmp(&self.risks[a])
                .unwrap()
                .then(self.ids[a].cmp(&self.ids[b]))
        });
        order.truncate(k);
        Ok(order)
    }
}

/// Mann-Whitney ROC AUC: P(risk_pos > risk_neg) + half credit for ties,
/// with hallucinations as the positive class.
pub fn roc_auc(scores: &LabeledScores) -> Result<f64> {
    let (pos, neg) = scores.class_counts();
    if pos == 0 || neg == 0 {
        return Err(Error::data("roc_auc needs both classes present"));
    }
    let mut wins = 0.0;
    for i in 0..scores.len() {
        if !scores.hallucination[i] {
            continue;
        }
        for j in 0..scores.len() {
            if scores.hallucination[j] {
                continue;
            }
            wins += match scores.risks[i].partial_cmp(&scores.risks[j]).unwrap() {
                std::cmp::Ordering::Greater => 1.0,
                std::cmp::Ordering::Equal => 0.5,
                std::cmp::Ordering::Less => 0.0,
            };
        }
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Precision at the largest risk cutoff whose recall reaches the target
/// (descending sweep; items tied with the cutoff are all flagged).
pub fn precision_at_recall(scores: &LabeledScores, target_recall: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&target_recall) {
        return Err(Error::invalid(format!("target recall {target_recall} outside [0, 1]")));
    }
    let (pos, neg) = scores.class_counts();
    if pos == 0 || neg == 0 {
        return Err(Error::data("precision_at_recall needs both classes present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores.risks[b].partial_cmp(&scores.risks[a]).unwrap());
    let mut tp = 0usize;
    let mut flagged = 0usize;
    let mut i = 0;
    while i < order.len() {
        // Consume the whole tie group at this cutoff.
        let cutoff = scores.risks[order[i]];
        while i < order.len() && scores.risks[order[i]] == cutoff {
            if scores.hallucination[order[i]] {
                tp += 1;
            }
            flagged += 1;
            i += 1;
        }
        if tp as f64 / pos as f64 >= target_recall {
            return Ok(tp as f64 / flagged as f64);
        }
    }
    unreachable!("recall reaches 1.0 once everything is flagged");
}

/// Recall per pathology label within the worst-k set. Labels absent from
/// the data are absent from the map.
pub fn recall_by_type(
    scores: &LabeledScores,
    fraction: f64,
) -> Result<BTreeMap<PathologyLabel, f64>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction {fraction} outside (0, 1]")));
    }
    let worst: std::collections::BTreeSet<usize> =
        scores.worst_indices(fraction)?.into_iter().collect();
    let mut totals: BTreeMap<PathologyLabel, (usize, usize)> = BTreeMap::new();
    for (i, &label) in scores.labels.iter().enumerate() {
        let entry = totals.entry(label).or_insert((0, 0));
        entry.1 += 1;
        if worst.contains(&i) {
            entry.0 += 1;
        }
    }
    Ok(totals
        .into_iter()
        .map(|(label, (hit, total))| (label, hit as f64 / total as f64))
        .collect())
}

/// Share of each pathology label within the worst-k set; shares sum to 1.
pub fn type_distribution(
    scores: &LabeledScores,
    fraction: f64,
) -> Result<BTreeMap<PathologyLabel, f64>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction {fraction} outside (0, 1]")));
    }
    let worst = scores.worst_indices(fraction)?;
    if worst.is_empty() {
        return Err(Error::data("empty flagged set"));
    }
    let mut counts: BTreeMap<PathologyLabel, usize> = BTreeMap::new();
    for &i in &worst {
        *counts.entry(scores.labels[i]).or_insert(0) += 1;
    }
    let n = worst.len() as f64;
    Ok(counts.into_iter().map(|(label, c)| (label, c as f64 / n)).collect())
}

/// Per-label histogram over common bin edges; densities integrate to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub edges: Vec<f64>,
    pub counts: BTreeMap<PathologyLabel, Vec<usize>>,
    pub densities: BTreeMap<PathologyLabel, Vec<f64>>,
}

pub fn score_histogram(scores: &LabeledScores, bins: usize) -> Result<ScoreHistogram> {
    if bins < 2 {
        return Err(Error::invalid("need at least two bins"));
    }
    if scores.is_empty() {
        return Err(Error::data("no scores to bin"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &r in &scores.risks {
        lo = lo.min(r);
        hi = hi.max(r);
    }
    if lo == hi {
        // One distinct value still gets a real bin width.
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + i as f64 * width).collect();
    let mut counts: BTreeMap<PathologyLabel, Vec<usize>> = BTreeMap::new();
    for (i, &r) in scores.risks.iter().enumerate() {
        let mut bin = ((r - lo) / width) as usize;
        if bin >= bins {
            bin = bins - 1;
        }
        counts.entry(scores.labels[i]).or_insert_with(|| vec![0; bins])[bin] += 1;
    }
    let densities = counts
        .iter()
        .map(|(&label, row)| {
            let n: usize = row.iter().sum();
            let d = row.iter().map(|&c| c as f64 / (n as f64 * width)).collect();
            (label, d)
        })
        .collect();
    Ok(ScoreHistogram { edges, counts, densities })
}
