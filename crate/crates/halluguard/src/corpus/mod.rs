//! Synthetic parallel corpus with a known transduction rule.
//!
//! Sources are drawn from a skewed Markov chain over the real vocabulary, so
//! the target side carries genuine language-model structure in addition to
//! the source signal. References are a bijective token substitution followed
//! by deterministic adjacent swaps inside fixed-width blocks; the rule is
//! exactly invertible, which gives free oracle references.

pub mod pathology;

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::transformer::RESERVED_TOKENS;

pub use pathology::{
    auto_label, induce_pathology, token_edit_distance, token_overlap, top_ngram_count,
    PathologyLabel, ALL_LABELS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    /// Total vocabulary including the reserved ids.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Block width for the deterministic reorder; 0 or 1 disables it.
    pub swap_window: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub eval_size: usize,
    /// Zipf exponent sharpening the Markov transition tables. Higher values
    /// make the target side more predictable from its own history.
    pub markov_skew: f64,
    /// Proportions per pathology label used when annotating an eval set.
    pub pathology_mix: BTreeMap<PathologyLabel, f64>,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        let mut mix = BTreeMap::new();
        mix.insert(PathologyLabel::Correct, 0.40);
        mix.insert(PathologyLabel::Error, 0.15);
        mix.insert(PathologyLabel::Undertranslation, 0.10);
        mix.insert(PathologyLabel::StronglyDetached, 0.125);
        mix.insert(PathologyLabel::Oscillatory, 0.10);
        mix.insert(PathologyLabel::FullyDetached, 0.125);
        CorpusSpec {
            vocab_size: 64,
            min_len: 5,
            max_len: 14,
            swap_window: 2,
            train_size: 4000,
            dev_size: 400,
            eval_size: 400,
            markov_skew: 1.5,
            pathology_mix: mix,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= RESERVED_TOKENS + 1 {
            return Err(Error::invalid(format!(
                "vocab_size {} leaves no room for a bijection over real tokens",
                self.vocab_size
            )));
        }
        if self.min_len < 4 || self.max_len < self.min_len {
            return Err(Error::invalid(format!(
                "sentence length range [{}, {}] must satisfy 4 <= min <= max",
                self.min_len, self.max_len
            )));
        }
        if !self.markov_skew.is_finite() || self.markov_skew < 0.0 {
            return Err(Error::invalid("markov_skew must be finite and non-negative"));
        }
        if !self.pathology_mix.is_empty() {
            let total: f64 = self.pathology_mix.values().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "pathology_mix proportions sum to {total}, expected 1"
                )));
            }
            if self.pathology_mix.values().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::invalid("pathology_mix proportions must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// One parallel sentence with optional system output and oracle label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationRecord {
    pub id: u64,
    pub src: Vec<u32>,
    #[serde(rename = "ref")]
    pub reference: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathologyLabel>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scores: BTreeMap<String, f64>,
}

impl TranslationRecord {
    pub fn new(id: u64, src: Vec<u32>, reference: Vec<u32>) -> Self {
        TranslationRecord { id, src, reference, out: None, label: None, scores: BTreeMap::new() }
    }

    pub fn output(&self) -> Result<&[u32]> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::data(format!("record {} has no output", self.id)))
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<TranslationRecord>,
    pub dev: Vec<TranslationRecord>,
    pub eval: Vec<TranslationRecord>,
}

/// The deterministic source-to-reference rule: bijective substitution over
/// real tokens, then a swap of each non-overlapping adjacent pair inside
/// blocks of `window` positions. The swap step is an involution, so the
/// inverse applies the same swaps before the inverse substitution.
#[derive(Debug, Clone)]
pub struct Transduction {
    subst: Vec<u32>,
    inverse: Vec<u32>,
    window: usize,
}

impl Transduction {
    pub fn new(subst: Vec<u32>, window: usize) -> Result<Self> {
        let n = subst.len();
        if n <= RESERVED_TOKENS {
            return Err(Error::invalid("substitution table smaller than the reserved range"));
        }
        let mut inverse = vec![u32::MAX; n];
        for (from, &to) in subst.iter().enumerate() {
            let to = to as usize;
            if to >= n || inverse[to] != u32::MAX {
                return Err(Error::invalid("substitution table is not a bijection"));
            }
            inverse[to] = from as u32;
        }
        for r in 0..RESERVED_TOKENS {
            if subst[r] != r as u32 {
                return Err(Error::invalid("substitution must fix the reserved ids"));
            }
        }
        Ok(Transduction { subst, inverse, window })
    }

    pub fn from_spec(spec: &CorpusSpec) -> Result<Self> {
        let mut rng = Rng::new(spec.seed).derive("transduction");
        let mut real: Vec<u32> = (RESERVED_TOKENS as u32..spec.vocab_size as u32).collect();
        rng.shuffle(&mut real);
        let mut subst: Vec<u32> = (0..RESERVED_TOKENS as u32).collect();
        subst.extend(real);
        Transduction::new(subst, spec.swap_window)
    }

    pub fn identity(vocab_size: usize, window: usize) -> Result<Self> {
        Transduction::new((0..vocab_size as u32).collect(), window)
    }

    fn swap_blocks(tokens: &mut [u32], window: usize) {
        if window < 2 {
            return;
        }
        for block in tokens.chunks_mut(window) {
            let mut i = 0;
            while i + 1 < block.len() {
                block.swap(i, i + 1);
                i += 2;
            }
        }
    }

    pub fn apply(&self, src: &[u32]) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(src.len());
        for &t in src {
            let t = t as usize;
            if t >= self.subst.len() {
                return Err(Error::OutOfVocab { token: t as u32, vocab_size: self.subst.len() });
            }
            out.push(self.subst[t]);
        }
        Self::swap_blocks(&mut out, self.window);
        Ok(out)
    }

    pub fn invert(&self, reference: &[u32]) -> Result<Vec<u32>> {
        let mut out = reference.to_vec();
        Self::swap_blocks(&mut out, self.window);
        for t in &mut out {
            let i = *t as usize;
            if i >= self.inverse.len() {
                return Err(Error::OutOfVocab { token: *t, vocab_size: self.inverse.len() });
            }
            *t = self.inverse[i];
        }
        Ok(out)
    }
}

/// Zipf-weighted choice over a per-context permutation of the real tokens.
struct MarkovTables {
    /// cdf[context][k] is cumulative weight of the k-th preferred token;
    /// context 0 is the sentence start, context 1 + r follows real index r.
    cdf: Vec<Vec<f64>>,
    perm: Vec<Vec<u32>>,
}

impl MarkovTables {
    fn build(spec: &CorpusSpec, rng: &Rng) -> Self {
        let reals = spec.vocab_size - RESERVED_TOKENS;
        let weights: Vec<f64> =
            (0..reals).map(|r| 1.0 / ((r + 1) as f64).powf(spec.markov_skew)).collect();
        let total: f64 = weights.iter().sum();
        let mut contexts = Vec::with_capacity(reals + 1);
        let mut perms = Vec::with_capacity(reals + 1);
        for c in 0..=reals {
            let mut perm: Vec<u32> =
                (RESERVED_TOKENS as u32..spec.vocab_size as u32).collect();
            rng.derive("markov").derive_u64(c as u64).shuffle(&mut perm);
            let mut cdf = Vec::with_capacity(reals);
            let mut acc = 0.0;
            for w in &weights {
                acc += w / total;
                cdf.push(acc);
            }
            *cdf.last_mut().expect("non-empty vocab") = 1.0;
            contexts.push(cdf);
            perms.push(perm);
        }
        MarkovTables { cdf: contexts, perm: perms }
    }

    fn sample(&self, prev: Option<u32>, rng: &mut Rng) -> u32 {
        let ctx = match prev {
            None => 0,
            Some(t) => 1 + (t as usize - RESERVED_TOKENS),
        };
        let u = rng.next_f64();
        let cdf = &self.cdf[ctx];
        let k = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        self.perm[ctx][k]
    }
}

fn sample_sentence(spec: &CorpusSpec, tables: &MarkovTables, rng: &mut Rng) -> Vec<u32> {
    let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
    let mut sentence = Vec::with_capacity(len);
    let mut prev = None;
    for _ in 0..len {
        let t = tables.sample(prev, rng);
        sentence.push(t);
        prev = Some(t);
    }
    sentence
}

/// Draw `train + dev + eval` distinct sources, pair each with its reference,
/// and split in order. Distinctness across the whole draw keeps the splits
/// disjoint. Record ids are global and stable under the seed.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let transduction = Transduction::from_spec(spec)?;
    let root = Rng::new(spec.seed);
    let tables = MarkovTables::build(spec, &root);
    let total = spec.train_size + spec.dev_size + spec.eval_size;
    let mut seen: HashSet<Vec<u32>> = HashSet::with_capacity(total);
    let mut records = Vec::with_capacity(total);
    let sentence_root = root.derive("sentence");
    for i in 0..total {
        let mut src = None;
        for attempt in 0..200u64 {
            let mut rng = sentence_root.derive_u64(i as u64 * 1000 + attempt);
            let candidate = sample_sentence(spec, &tables, &mut rng);
            if seen.insert(candidate.clone()) {
                src = Some(candidate);
                break;
            }
        }
        let src = src.ok_or_else(|| {
            Error::data(format!(
                "could not draw {total} distinct sentences from a {}-token vocabulary",
                spec.vocab_size
            ))
        })?;
        let reference = transduction.apply(&src)?;
        records.push(TranslationRecord::new(i as u64, src, reference));
    }
    let eval = records.split_off(spec.train_size + spec.dev_size);
    let dev = records.split_off(spec.train_size);
    Ok(Corpus { train: records, dev, eval })
}

/// Annotate an eval split with induced outputs following `spec.pathology_mix`.
/// Label counts are fixed by the proportions (largest remainder on ties);
/// assignment to records is a seeded shuffle.
pub fn apply_pathology_mix(
    records: &mut [TranslationRecord],
    spec: &CorpusSpec,
    seed: u64,
) -> Result<()> {
    if records.is_empty() {
        return Ok(());
    }
    if spec.pathology_mix.is_empty() {
        return Err(Error::invalid("pathology_mix is empty"));
    }
    spec.validate()?;
    let n = records.len();
    // Integer apportionment: floor everything, then hand out remainders by
    // largest fractional part (label order breaks ties deterministically).
    let mut counts: Vec<(PathologyLabel, usize, f64)> = spec
        .pathology_mix
        .iter()
        .map(|(&l, &p)| {
            let exact = p * n as f64;
            (l, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = counts.iter().map(|c| c.1).sum();
    let mut leftovers: Vec<usize> = (0..counts.len()).collect();
    leftovers.sort_by(|&a, &b| {
        counts[b].2.partial_cmp(&counts[a].2).expect("finite fractions").then(a.cmp(&b))
    });
    for &i in leftovers.iter().take(n - assigned) {
        counts[i].1 += 1;
    }
    let mut labels = Vec::with_capacity(n);
    for (label, count, _) in &counts {
        labels.extend(std::iter::repeat(*label).take(*count));
    }
    let mut rng = Rng::new(seed).derive("pathology-mix");
    rng.shuffle(&mut labels);
    let donors: Vec<TranslationRecord> = records.to_vec();
    for (record, label) in records.iter_mut().zip(labels) {
        let mut record_rng = rng.derive("induce").derive_u64(record.id);
        let out =
            induce_pathology(record, label, &donors, spec.vocab_size, &mut record_rng)?;
        record.out = Some(out);
        record.label = Some(label);
    }
    Ok(())
}

/// Surface form for a token id: reserved ids get bracketed names, real ids a
/// synthetic two-syllable word. Injective for ids below 70.
pub fn token_text(id: u32) -> String {
    const RESERVED_NAMES: [&str; RESERVED_TOKENS] = ["<pad>", "<bos>", "<eos>"];
    if (id as usize) < RESERVED_TOKENS {
        return RESERVED_NAMES[id as usize].to_string();
    }
    const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let syllable = |k: u32| {
        let k = k as usize % (CONSONANTS.len() * VOWELS.len());
        let c = CONSONANTS[k / VOWELS.len()] as char;
        let v = VOWELS[k % VOWELS.len()] as char;
        format!("{c}{v}")
    };
    format!("{}{}", syllable(id), syllable(id.wrapping_mul(37).wrapping_add(11)))
}

/// Space-joined surface text; reserved ids are skipped.
pub fn detokenize(tokens: &[u32]) -> String {
    let words: Vec<String> = tokens
        .iter()
        .filter(|&&t| t as usize >= RESERVED_TOKENS)
        .map(|&t| token_text(t))
        .collect();
    words.join(" ")
}

pub fn write_jsonl(path: &Path, records: &[TranslationRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).map_err(|e| Error::json(path, e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TranslationRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TranslationRecord = serde_json::from_str(&line)
            .map_err(|e| Error::json(path, format!("line {}: {e}", lineno + 1)))?;
        if !ids.insert(record.id) {
            return Err(Error::data(format!(
                "duplicate record id {} at {}:{}",
                record.id,
                path.display(),
                lineno + 1
            )));
        }
        records.push(record);
    }
    Ok(records)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabSidecar {
    pub vocab_size: usize,
    pub pad: u32,
    pub bos: u32,
    pub eos: u32,
    pub tokens: Vec<String>,
}

impl VocabSidecar {
    pub fn for_size(vocab_size: usize) -> Self {
        VocabSidecar {
            vocab_size,
            pad: crate::transformer::PAD as u32,
            bos: crate::transformer::BOS as u32,
            eos: crate::transformer::EOS as u32,
            tokens: (0..vocab_size as u32).map(token_text).collect(),
        }
    }
}

pub fn write_vocab(path: &Path, vocab_size: usize) -> Result<()> {
    let sidecar = VocabSidecar::for_size(vocab_size);
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_vocab(path: &Path) -> Result<VocabSidecar> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}
