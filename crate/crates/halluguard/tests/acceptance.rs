//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! with its headline numbers. Expensive fixtures (trained models) are built
//! once per process and shared; tests run alphabetically, so the lab boots
//! inside the first test that needs it.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use halluguard::attribution::{self, Norm};
use halluguard::autograd::{check_gradients_multi, Graph, Var};
use halluguard::corpus::pathology::PathologyLabel;
use halluguard::corpus::{apply_pathology_mix, generate_corpus, Corpus, CorpusSpec, TranslationRecord};
use halluguard::decoding::{self, McMode};
use halluguard::detectors::{self, names};
use halluguard::evaluation::{self, LabeledScores};
use halluguard::pipeline::{self, FlagRule, MitigationSummary, PipelineSpec, Scorer, SelectionMode};
use halluguard::trainer::dual::{train_dual_encoder, DualEncoder, DualEncoderConfig, DualTrainSpec};
use halluguard::trainer::{frame_source, frame_target, train_translator, TrainSpec};
use halluguard::transformer::{ModelConfig, TransformerModel, EOS};
use halluguard::{Rng, Tensor};

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn timed<T>(label: &str, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let v = f();
    eprintln!("[accept] {label}: {:.1}s", t.elapsed().as_secs_f64());
    v
}

// -- shared labs ------------------------------------------------------------

/// Default corpus and default-trained translator.
struct TranslatorLab {
    corpus: Corpus,
    model: TransformerModel,
}

fn translator_lab() -> &'static TranslatorLab {
    static LAB: OnceLock<TranslatorLab> = OnceLock::new();
    LAB.get_or_init(|| {
        let spec = CorpusSpec::default();
        let corpus = timed("default corpus", || generate_corpus(&spec).expect("corpus"));
        let train_spec = TrainSpec::default();
        let mut model = TransformerModel::new(
            ModelConfig::default(),
            &Rng::new(train_spec.seed).derive("model-init"),
        )
        .expect("model init");
        timed("default training", || {
            train_translator(&mut model, &corpus.train, &corpus.dev, &train_spec, None)
                .expect("training")
        });
        TranslatorLab { corpus, model }
    })
}

/// Harder corpus (sharper target-side Markov tables) and a translator trained
/// with a larger detached-target fraction: the regime where the model keeps
/// producing fluent text after attention loses the source, which is what the
/// detection experiments need to exhibit.
struct DetectionLab {
    corpus_spec: CorpusSpec,
    corpus: Corpus,
    model: TransformerModel,
    /// 200 Correct + 200 FullyDetached eval records. Detached outputs are
    /// the most model-fluent disjoint training references, so the likelihood
    /// detector faces confident hallucinations rather than easy outliers.
    split: Vec<TranslationRecord>,
}

fn detection_corpus_spec() -> CorpusSpec {
    let mut mix = BTreeMap::new();
    mix.insert(PathologyLabel::Correct, 0.5);
    mix.insert(PathologyLabel::FullyDetached, 0.5);
    CorpusSpec { markov_skew: 2.5, pathology_mix: mix, ..CorpusSpec::default() }
}

fn detection_lab() -> &'static DetectionLab {
    static LAB: OnceLock<DetectionLab> = OnceLock::new();
    LAB.get_or_init(|| {
        let corpus_spec = detection_corpus_spec();
        let corpus = timed("detection corpus", || generate_corpus(&corpus_spec).expect("corpus"));
        let train_spec = TrainSpec { detached_target_fraction: 0.30, ..TrainSpec::default() };
        let mut model = TransformerModel::new(
            ModelConfig::default(),
            &Rng::new(train_spec.seed).derive("model-init"),
        )
        .expect("model init");
        timed("detection training", || {
            train_translator(&mut model, &corpus.train, &corpus.dev, &train_spec, None)
                .expect("training")
        });
        let mut split = corpus.eval.clone();
        apply_pathology_mix(&mut split, &corpus_spec, corpus_spec.seed).expect("mix");
        timed("fluent donor selection", || {
            pipeline::fluent_detached(&model, &mut split, &corpus.train, 160, 23).expect("donors")
        });
        timed("detector scoring", || {
            pipeline::score_corpus(&model, None, &mut split, false).expect("scoring")
        });
        DetectionLab { corpus_spec, corpus, model, split }
    })
}

fn dual_lab() -> &'static DualEncoder {
    static LAB: OnceLock<DualEncoder> = OnceLock::new();
    LAB.get_or_init(|| {
        let lab = detection_lab();
        let spec = DualTrainSpec::default();
        let mut encoder =
            DualEncoder::new(DualEncoderConfig::default(), &Rng::new(spec.seed).derive("encoder-init"))
                .expect("encoder init");
        timed("dual encoder training", || {
            train_dual_encoder(&mut encoder, &lab.corpus.train, &spec).expect("encoder training")
        });
        encoder
    })
}

fn auc_for(records: &[TranslationRecord], detector: &str) -> f64 {
    let scores = LabeledScores::from_records(records, detector).expect("labeled scores");
    evaluation::roc_auc(&scores).expect("auc")
}

// -- criterion 1: autograd vs central finite differences --------------------

const OP_COUNT: usize = 18;

/// One focused graph per primitive; the scalar head multiplies by a random
/// weight tensor so every coordinate carries a distinct gradient.
fn grad_case(op: usize, rng: &mut Rng) -> (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> halluguard::Result<Var>>) {
    let m = 2 + rng.below(3);
    let n = 2 + rng.below(3);
    let k = 2 + rng.below(3);
    let t = |rng: &mut Rng, r: usize, c: usize| Tensor::rand_uniform(rng, vec![r, c], -1.0, 1.0);
    let weighted = |g: &mut Graph, x: Var, w: Var| -> halluguard::Result<Var> {
        let p = g.mul(x, w)?;
        g.sum_all(p)
    };
    match op {
        0 => {
            let pts = vec![t(rng, m, k), t(rng, k, n), t(rng, m, n)];
            (pts, Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                let p = g.mul(y, v[2])?;
                g.sum_all(p)
            }))
        }
        1 => {
            let pts = vec![t(rng, m, n), t(rng, n, m)];
            (pts, Box::new(move |g, v| {
                let y = g.transpose(v[0])?;
                let p = g.mul(y, v[1])?;
                g.sum_all(p)
            }))
        }
        2 => {
            let pts = vec![t(rng, m, n), t(rng, m, n), t(rng, m, n)];
            (pts, Box::new(move |g, v| {
                let y = g.add(v[0], v[1])?;
                weighted(g, y, v[2])
            }))
        }
        3 => {
            let pts = vec![t(rng, m, n), t(rng, 1, n), t(rng, m, n)];
            (pts, Box::new(move |g, v| {
                let y = g.add_row(v[0], v[1])?;
                weighted(g, y, v[2])
            }))
        }
        4 => {
            let pts = vec![t(rng, m, n), t(rng, m, n), t(rng, m, n)];
            (pts, Box::new(move |g, v| {
                let y = g.mul(v[0], v[1])?;
                weighted(g, y, v[2])
            }))
        }
        5 => {
            let c = rng.uniform(-2.0, 2.0);
            let pts = vec![t(rng, m, n), t(rng, m, n)];
            (pts, Box::new(move |g, v| {
                let y = g.scale(v[0], c)?;
                weighted(g, y, v[1])
            }))
        }
        6 => {
            // Keep inputs away from the relu kink so the central difference
            // stays on one side.
            let mut x = t(rng, m, n);
            for e in x.data_mut() {
                if e.abs() < 0.05 {
                    *e += 0.1_f64.copysign(*e + 0.5);
                }
            }
            let pts = vec![x, t(rng, m, n)];
            (pts, Box::new(move |g, v| {
                let y = g.relu(v[0])?;
                weighted(g, y, v[1])
            }))
        }
        7 => {
            let mut mask = vec![false; m * n];
            for i in 0..m {
                loop {
                    for j in 0..n {
                        mask[i * n + j] = rng.below(3) > 0;
                    }
                    if mask[i * n..(i + 1) * n].iter().any(|&b| b) {
                        break;
                    }
                }
            }
            let pts = vec![t(rng, m, n), t(rng, m, n)];
            (pts, Box::new(move |g, v| {
                let y = g.masked_softmax(v[0], Some(&mask))?;
                weighted(g, y, v[1])
            }))
        }
        8 => {
            let pts = vec![t(rng, m, n), t(rng, m, n)];
            (pts, Box::new(move |g, v| {
                let y = g.log_softmax(v[0])?;
                weighted(g, y, v[1])
            }))
        }
        9 => {
            let pts = vec![t(rng, m, n), t(rng, 1, n), t(rng, 1, n), t(rng, m, n)];
            (pts, Box::new(move |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted(g, y, v[3])
            }))
        }
        10 => {
            let rows = 4 + rng.below(3);
            // Duplicate ids exercise gradient accumulation into the table.
            let ids: Vec<u32> =
                (0..m + 2).map(|_| rng.below(rows) as u32).collect();
            let pts = vec![t(rng, rows, n), t(rng, ids.len(), n)];
            (pts, Box::new(move |g, v| {
                let y = g.embed(v[0], &ids)?;
                weighted(g, y, v[1])
            }))
        }
        11 => {
            let start = rng.below(n);
            let len = 1 + rng.below(n - start);
            let pts = vec![t(rng, m, n), t(rng, m, len)];
            (pts, Box::new(move |g, v| {
                let y = g.slice_cols(v[0], start, len)?;
                weighted(g, y, v[1])
            }))
        }
        12 => {
            let pts = vec![t(rng, m, n), t(rng, m, k), t(rng, m, n + k)];
            (pts, Box::new(move |g, v| {
                let y = g.concat_cols(&[v[0], v[1]])?;
                weighted(g, y, v[2])
            }))
        }
        13 => {
            let pts = vec![t(rng, m, n), t(rng, k, n), t(rng, m + k, n)];
            (pts, Box::new(move |g, v| {
                let y = g.concat_rows(&[v[0], v[1]])?;
                weighted(g, y, v[2])
            }))
        }
        14 => {
            let pts = vec![t(rng, m, n), t(rng, 1, n)];
            (pts, Box::new(move |g, v| {
                let y = g.mean_rows(v[0])?;
                weighted(g, y, v[1])
            }))
        }
        15 => {
            let pts = vec![t(rng, m, n), t(rng, m, n)];
            (pts, Box::new(move |g, v| {
                let p = g.mul(v[0], v[1])?;
                g.sum_all(p)
            }))
        }
        16 => {
            // Rows bounded away from zero norm.
            let pts = vec![
                Tensor::rand_uniform(rng, vec![m, n], 0.5, 1.5),
                t(rng, m, n),
            ];
            (pts, Box::new(move |g, v| {
                let y = g.normalize_rows(v[0])?;
                weighted(g, y, v[1])
            }))
        }
        17 => {
            let targets: Vec<u32> = (0..m).map(|_| rng.below(n) as u32).collect();
            let pts = vec![t(rng, m, n)];
            (pts, Box::new(move |g, v| {
                let y = g.log_softmax(v[0])?;
                g.nll(y, &targets, 1e-9)
            }))
        }
        _ => unreachable!("op index"),
    }
}

#[test]
fn criterion_01_autograd_matches_finite_differences() {
    let start = Instant::now();
    let tolerance = 1e-4;
    let mut covered = [false; OP_COUNT];
    let mut worst = 0.0_f64;
    for i in 0..50 {
        let op = i % OP_COUNT;
        covered[op] = true;
        let mut rng = Rng::new(9000 + i as u64);
        let (points, f) = grad_case(op, &mut rng);
        let report = check_gradients_multi(|g, v| f(g, v), &points, tolerance)
            .unwrap_or_else(|e| panic!("graph {i} (op {op}) failed to evaluate: {e}"));
        assert!(
            report.pass,
            "graph {i} (op {op}): max rel error {:.3e} at input {} coord {} (analytic {:.6e}, numeric {:.6e})",
            report.max_rel_error, report.worst_input, report.worst_coord, report.analytic, report.numeric
        );
        worst = worst.max(report.max_rel_error);
    }
    let all_ops = covered.iter().all(|&c| c);
    let elapsed = start.elapsed().as_secs_f64();
    let ok = all_ops && worst < tolerance;
    println!(
        "criterion 01 {}: 50 graphs over {OP_COUNT} primitives, max rel error {worst:.3e} (< {tolerance:.0e}), {elapsed:.1}s",
        verdict(ok)
    );
    assert!(ok);
}

// -- criterion 2: default recipe calibration ---------------------------------

#[test]
fn criterion_02_default_recipe_reaches_chrf_90() {
    let start = Instant::now();
    let lab = translator_lab();
    let mut total = 0.0;
    for r in &lab.corpus.eval {
        let hyp = decoding::default_translation(&lab.model, &r.src).expect("translation");
        let score = detectors::chrf_pp_score(hyp.surface(), &r.reference).expect("chrf");
        total += -score.risk;
    }
    let mean = total / lab.corpus.eval.len() as f64;
    let elapsed = start.elapsed().as_secs_f64();
    let ok = mean > 90.0;
    println!(
        "criterion 02 {}: default corpus + default training, eval chrF++ {mean:.2} (> 90), {elapsed:.1}s",
        verdict(ok)
    );
    assert!(ok, "mean chrF++ {mean:.2} <= 90");
}

// -- criterion 3: attribution soundness ---------------------------------------

#[test]
fn criterion_03_attribution_rows_reconstruction_ablation() {
    let start = Instant::now();
    let lab = detection_lab();
    let mut ablated = lab.model.clone();
    ablated.scale_cross_value_projections(0.0);

    let mut worst_row = 0.0_f64;
    let mut worst_recon = 0.0_f64;
    let mut worst_ablated = 0.0_f64;
    let params = lab.model.params();
    for r in lab.corpus.eval.iter().take(100) {
        let hyp = decoding::default_translation(&lab.model, &r.src).expect("translation");
        let fs = frame_source(&r.src);
        let ft = frame_target(hyp.surface());
        let (_, trace) = lab.model.decode_logprobs(&fs, &ft, None).expect("trace");
        for rec in trace.encoder.iter().chain(&trace.decoder_self) {
            let c = attribution::sublayer_contributions(params, rec, Norm::L1, true)
                .expect("contributions");
            worst_recon = worst_recon.max(c.reconstruction_residual);
            for i in 0..c.matrix.rows() {
                let sum: f64 = c.matrix.row(i).iter().sum();
                worst_row = worst_row.max((sum - 1.0).abs());
            }
        }
        for rec in &trace.decoder_cross {
            let c = attribution::sublayer_contributions(params, rec, Norm::L1, false)
                .expect("contributions");
            worst_recon = worst_recon.max(c.reconstruction_residual);
            let rho = c.residual.as_ref().expect("unfolded residual");
            for i in 0..c.matrix.rows() {
                let sum: f64 = c.matrix.row(i).iter().sum::<f64>() + rho[i];
                worst_row = worst_row.max((sum - 1.0).abs());
            }
        }
        let (zeroed, _) = attribution::attribute(&ablated, &fs, &ft, Norm::L1).expect("ablated");
        worst_ablated = worst_ablated.max(zeroed.source_contribution.abs());
    }
    let elapsed = start.elapsed().as_secs_f64();
    let ok = worst_row <= 1e-6 && worst_recon < 1e-6 && worst_ablated == 0.0;
    println!(
        "criterion 03 {}: 100 decodes, row-sum dev {worst_row:.2e} (<= 1e-6), reconstruction {worst_recon:.2e} (< 1e-6), ablated source share {worst_ablated:.1e} (== 0), {elapsed:.1}s",
        verdict(ok)
    );
    assert!(ok);
}

// -- criterion 4: attribution vs likelihood on detached outputs ---------------

#[test]
fn criterion_04_attribution_beats_logprob_on_detached() {
    let start = Instant::now();
    let lab = detection_lab();
    let (mut fd, mut correct) = (0, 0);
    for r in &lab.split {
        match r.label {
            Some(PathologyLabel::FullyDetached) => fd += 1,
            Some(PathologyLabel::Correct) => correct += 1,
            other => panic!("unexpected label {other:?}"),
        }
    }
    let alti = auc_for(&lab.split, names::ALTI);
    let seq = auc_for(&lab.split, names::SEQ_LOGPROB);
    let elapsed = start.elapsed().as_secs_f64();
    let ok = fd == 200 && correct == 200 && alti >= 0.90 && seq >= 0.70 && alti >= seq;
    println!(
        "criterion 04 {}: {fd} detached + {correct} correct, ALTI AUC {alti:.4} (>= 0.90), Seq-Logprob AUC {seq:.4} (>= 0.70), ALTI >= Seq-Logprob, {elapsed:.1}s",
        verdict(ok)
    );
    assert!(ok, "alti {alti:.4} seq {seq:.4} fd {fd} correct {correct}");
}

// -- criterion 5: dual encoder separation and severity ordering ---------------

#[test]
fn criterion_05_dual_encoder_separates_and_ranks() {
    let start = Instant::now();
    let lab = detection_lab();
    let encoder = dual_lab();

    let mut split = lab.split.clone();
    for r in &mut split {
        let out = r.output().expect("output").to_vec();
        let s = detectors::cosine_similarity_risk(encoder, &r.src, &out).expect("cosine");
        r.scores.insert(s.detector.clone(), s.risk);
    }
    let auc = auc_for(&split, names::DUAL_COS);

    // Severity ordering needs the middle class too: a fresh three-way mix
    // over the same eval sentences, compared by mean raw cosine.
    let mut mix = BTreeMap::new();
    mix.insert(PathologyLabel::Correct, 0.34);
    mix.insert(PathologyLabel::StronglyDetached, 0.33);
    mix.insert(PathologyLabel::FullyDetached, 0.33);
    let probe_spec = CorpusSpec { pathology_mix: mix, ..lab.corpus_spec.clone() };
    let mut probe = lab.corpus.eval.clone();
    apply_pathology_mix(&mut probe, &probe_spec, 41).expect("mix");
    let mut sums: BTreeMap<PathologyLabel, (f64, usize)> = BTreeMap::new();
    for r in &probe {
        let out = r.output().expect("output");
        let cos = pipeline::dual_cosine(encoder, &r.src, out).expect("cosine");
        let e = sums.entry(r.label.expect("label")).or_insert((0.0, 0));
        e.0 += cos;
        e.1 += 1;
    }
    let mean = |l: PathologyLabel| {
        let (s, c) = sums[&l];
        s / c as f64
    };
    let (m_fd, m_sd, m_c) = (
        mean(PathologyLabel::FullyDetached),
        mean(PathologyLabel::StronglyDetached),
        mean(PathologyLabel::Correct),
    );
    let elapsed = start.elapsed().as_secs_f64();
    let ok = auc >= 0.90 && m_fd < m_sd && m_sd < m_c;
    println!(
        "criterion 05 {}: dual_cos AUC {auc:.4} (>= 0.90), mean cosine detached {m_fd:.3} < strongly {m_sd:.3} < correct {m_c:.3}, {elapsed:.1}s",
        verdict(ok)
    );
    assert!(ok, "auc {auc:.4} means {m_fd:.3}/{m_sd:.3}/{m_c:.3}");
}

// -- criterion 6: metric oracles ----------------------------------------------

/// Rank-based Mann-Whitney AUC: an independent route to the same statistic.
fn rank_auc(risks: &[f64], positive: &[bool]) -> f64 {
    let n = risks.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| risks[a].partial_cmp(&risks[b]).unwrap());
    let mut rank = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && risks[idx[j]] == risks[idx[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        for &p in &idx[i..j] {
            rank[p] = avg;
        }
        i = j;
    }
    let pos = positive.iter().filter(|&&b| b).count();
    let neg = n - pos;
    let r_pos: f64 = (0..n).filter(|&k| positive[k]).map(|k| rank[k]).sum();
    let u = r_pos - (pos * (pos + 1)) as f64 / 2.0;
    u / (pos * neg) as f64
}

/// Threshold sweep recomputed from scratch at every unique cutoff.
fn sweep_precision_at_recall(risks: &[f64], positive: &[bool], target: f64) -> f64 {
    let mut cuts = risks.to_vec();
    cuts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    cuts.dedup();
    let pos = positive.iter().filter(|&&b| b).count();
    for c in cuts {
        let tp = risks
            .iter()
            .zip(positive)
            .filter(|&(r, &p)| *r >= c && p)
            .count();
        let flagged = risks.iter().filter(|&&r| r >= c).count();
        if tp as f64 / pos as f64 >= target {
            return tp as f64 / flagged as f64;
        }
    }
    unreachable!("recall reaches 1.0 at the lowest cutoff");
}

fn oracle_chrf(output: &str, reference: &str) -> f64 {
    fn counts(items: &[String], n: usize) -> HashMap<Vec<String>, usize> {
        let mut m = HashMap::new();
        if items.len() >= n {
            for w in items.windows(n) {
                *m.entry(w.to_vec()).or_insert(0) += 1;
            }
        }
        m
    }
    let mut precisions = Vec::new();
    let mut recalls = Vec::new();
    let mut push = |h: HashMap<Vec<String>, usize>, r: HashMap<Vec<String>, usize>| {
        let h_total: usize = h.values().sum();
        let r_total: usize = r.values().sum();
        if h_total + r_total == 0 {
            return;
        }
        let overlap: usize = h
            .iter()
            .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
            .sum();
        precisions.push(if h_total > 0 { overlap as f64 / h_total as f64 } else { 0.0 });
        recalls.push(if r_total > 0 { overlap as f64 / r_total as f64 } else { 0.0 });
    };
    let chars = |s: &str| -> Vec<String> {
        s.chars().filter(|c| !c.is_whitespace()).map(|c| c.to_string()).collect()
    };
    let (oc, rc) = (chars(output), chars(reference));
    for n in 1..=6 {
        push(counts(&oc, n), counts(&rc, n));
    }
    let words = |s: &str| -> Vec<String> { s.split_whitespace().map(|w| w.to_string()).collect() };
    let (ow, rw) = (words(output), words(reference));
    for n in 1..=2 {
        push(counts(&ow, n), counts(&rw, n));
    }
    let p = precisions.iter().sum::<f64>() / precisions.len() as f64;
    let r = recalls.iter().sum::<f64>() / recalls.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        100.0 * 5.0 * p * r / (4.0 * p + r)
    }
}

fn oracle_fleiss(counts: &[Vec<usize>], raters: usize) -> Option<f64> {
    // Pairwise-agreement route: P_i = agreeing pairs / total pairs.
    let pairs = |c: usize| if c < 2 { 0.0 } else { (c * (c - 1) / 2) as f64 };
    let n = counts.len() as f64;
    let r = raters as f64;
    let denom = r * (r - 1.0) / 2.0;
    let p_bar = counts
        .iter()
        .map(|row| row.iter().map(|&c| pairs(c)).sum::<f64>() / denom)
        .sum::<f64>()
        / n;
    let cats = counts[0].len();
    let pe: f64 = (0..cats)
        .map(|j| {
            let total: usize = counts.iter().map(|row| row[j]).sum();
            let share = total as f64 / (n * r);
            share * share
        })
        .sum();
    if (1.0 - pe).abs() < 1e-12 {
        None
    } else {
        Some((p_bar - pe) / (1.0 - pe))
    }
}

/// Gamma((nu+1)/2) / Gamma(nu/2) by the two-step recursion.
fn gamma_half_ratio(nu: usize) -> f64 {
    match nu {
        1 => 1.0 / PI.sqrt(),
        2 => PI.sqrt() / 2.0,
        _ => gamma_half_ratio(nu - 2) * (nu as f64 - 1.0) / (nu as f64 - 2.0),
    }
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: usize) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = (a + b) / 2.0;
        let fm = f(m);
        (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
    }
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        m: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let (lm, flm, left) = simpson(f, a, fa, m, fm);
        let (rm, frm, right) = simpson(f, m, fm, b, fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            recurse(f, a, fa, m, fm, lm, flm, left, tol / 2.0, depth - 1)
                + recurse(f, m, fm, b, fb, rm, frm, right, tol / 2.0, depth - 1)
        }
    }
    let (fa, fb) = (f(a), f(b));
    let (m, fm, whole) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, m, fm, whole, tol, depth)
}

/// Two-sided Student p by direct numeric integration of the t density.
fn oracle_student_p(t: f64, df: usize) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    if t == 0.0 {
        return 1.0;
    }
    let nu = df as f64;
    let c = gamma_half_ratio(df) / (nu * PI).sqrt();
    let density = move |x: f64| c * (1.0 + x * x / nu).powf(-(nu + 1.0) / 2.0);
    let integral = adaptive_simpson(&density, 0.0, t.abs(), 1e-13, 48);
    (1.0 - 2.0 * integral).max(0.0)
}

fn labeled(risks: Vec<f64>, positive: &[bool]) -> LabeledScores {
    let labels: Vec<PathologyLabel> = positive
        .iter()
        .map(|&p| if p { PathologyLabel::FullyDetached } else { PathologyLabel::Correct })
        .collect();
    let ids: Vec<u64> = (0..risks.len() as u64).collect();
    LabeledScores::new(ids, risks, labels).expect("labeled scores")
}

#[test]
fn criterion_06_metric_oracles() {
    let start = Instant::now();

    // roc_auc and precision_at_recall: 1000 tied-grid instances, exact match.
    let mut rng = Rng::new(6001);
    for i in 0..1000 {
        let n = 2 + rng.below(11);
        let mut risks: Vec<f64>;
        let mut positive: Vec<bool>;
        loop {
            risks = (0..n).map(|_| rng.below(9) as f64 / 4.0).collect();
            positive = (0..n).map(|_| rng.below(2) == 1).collect();
            let pos = positive.iter().filter(|&&b| b).count();
            if pos > 0 && pos < n {
                break;
            }
        }
        let scores = labeled(risks.clone(), &positive);
        let auc = evaluation::roc_auc(&scores).expect("auc");
        let auc_oracle = rank_auc(&risks, &positive);
        assert!(auc == auc_oracle, "instance {i}: auc {auc} != oracle {auc_oracle}");
        let target = [0.5, 0.75, 0.9, 1.0][rng.below(4)];
        let p = evaluation::precision_at_recall(&scores, target).expect("p@r");
        let p_oracle = sweep_precision_at_recall(&risks, &positive, target);
        assert!(p == p_oracle, "instance {i}: p@r {p} != oracle {p_oracle}");
    }

    eprintln!("[accept] roc/p@r oracles done");
    // chrF++ against an independent hash-count implementation.
    let mut rng = Rng::new(6002);
    let mut worst_chrf = 0.0_f64;
    for i in 0..100 {
        let word = |rng: &mut Rng| -> String {
            (0..1 + rng.below(4)).map(|_| (b'a' + rng.below(5) as u8) as char).collect()
        };
        let sentence = |rng: &mut Rng| -> String {
            (0..1 + rng.below(6)).map(|_| word(rng)).collect::<Vec<_>>().join(" ")
        };
        let a = sentence(&mut rng);
        let b = if rng.below(2) == 0 { a.clone() } else { sentence(&mut rng) };
        let got = detectors::chrf_pp(&a, &b).expect("chrf");
        let want = oracle_chrf(&a, &b);
        worst_chrf = worst_chrf.max((got - want).abs());
        assert!((got - want).abs() <= 1e-9, "instance {i}: chrF {got} vs oracle {want} ({a:?} / {b:?})");
    }

    eprintln!("[accept] chrf oracle done");
    // Fleiss kappa against the pairwise-agreement formula.
    let mut rng = Rng::new(6003);
    let mut worst_kappa = 0.0_f64;
    for i in 0..200 {
        let items = 2 + rng.below(7);
        let raters = 3;
        let rows: Vec<Vec<usize>> = (0..items)
            .map(|_| {
                let mut row = vec![0usize; 3];
                if rng.below(10) == 0 {
                    row[0] = raters;
                } else {
                    for _ in 0..raters {
                        row[rng.below(3)] += 1;
                    }
                }
                row
            })
            .collect();
        let got = evaluation::fleiss_kappa(&rows, raters).expect("kappa");
        let want = oracle_fleiss(&rows, raters);
        match (got, want) {
            (None, None) => {}
            (Some(g), Some(w)) => {
                worst_kappa = worst_kappa.max((g - w).abs());
                assert!((g - w).abs() <= 1e-8, "instance {i}: kappa {g} vs oracle {w}");
            }
            other => panic!("instance {i}: kappa definedness mismatch {other:?}"),
        }
    }

    eprintln!("[accept] fleiss oracle done");
    // Paired t-test against direct integration of the t density.
    let mut rng = Rng::new(6004);
    let mut worst_p = 0.0_f64;
    for i in 0..200 {
        let n = 2 + rng.below(9);
        let d: Vec<f64> = if rng.below(6) == 0 {
            vec![(rng.below(9) as f64 - 4.0) / 4.0; n]
        } else {
            (0..n).map(|_| (rng.below(9) as f64 - 4.0) / 4.0).collect()
        };
        let zeros = vec![0.0; n];
        let got = evaluation::paired_t_test(&d, &zeros).expect("t-test");
        let mean = d.iter().sum::<f64>() / n as f64;
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let t_oracle = if var == 0.0 {
            if mean == 0.0 { 0.0 } else { mean.signum() * f64::INFINITY }
        } else {
            mean / (var / n as f64).sqrt()
        };
        let p_oracle = oracle_student_p(t_oracle, n - 1);
        if got.t.is_finite() {
            assert!((got.t - t_oracle).abs() <= 1e-8, "instance {i}: t {} vs {t_oracle}", got.t);
        } else {
            assert_eq!(got.t, t_oracle, "instance {i}: infinite t mismatch");
        }
        worst_p = worst_p.max((got.p - p_oracle).abs());
        assert!(
            (got.p - p_oracle).abs() <= 1e-8,
            "instance {i}: p {} vs oracle {p_oracle} (t {t_oracle}, df {})",
            got.p,
            n - 1
        );
        assert_eq!(got.degrees, n - 1);
    }

    let elapsed = start.elapsed().as_secs_f64();
    println!(
        "criterion 06 PASS: roc/p@r exact on 1000 instances, chrF++ dev {worst_chrf:.1e} (<= 1e-9), kappa dev {worst_kappa:.1e}, t-test p dev {worst_p:.1e} (<= 1e-8), {elapsed:.1}s",
    );
}

// -- criterion 7: decoding reductions ------------------------------------------

fn tiny_model(seed: u64, vocab: usize, max_len: usize) -> TransformerModel {
    let config = ModelConfig {
        vocab_size: vocab,
        d_model: 16,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ffn: 32,
        dropout_rate: 0.1,
        max_len,
    };
    TransformerModel::new(config, &Rng::new(seed)).expect("model")
}

fn random_src(rng: &mut Rng, vocab: usize, len: usize) -> Vec<u32> {
    (0..len).map(|_| (3 + rng.below(vocab - 3)) as u32).collect()
}

#[test]
fn criterion_07_decoding_reductions() {
    let start = Instant::now();

    // dbs(groups=1) and ddec(r=0) collapse to plain beam search bit-exactly.
    for seed in 0..5u64 {
        let model = tiny_model(200 + seed, 12, 16);
        let src = random_src(&mut Rng::new(777 + seed), 12, 5);
        let beam = decoding::beam_search(&model, &src, 4, 4).expect("beam");
        let dbs = decoding::diverse_beam_search(&model, &src, 4, 1, 0.7).expect("dbs");
        let ddec = decoding::diverse_decoding(&model, &src, 4, 0.0).expect("ddec");
        for (label, other) in [("dbs", &dbs), ("ddec", &ddec)] {
            assert_eq!(beam.len(), other.len(), "{label} count");
            for (a, b) in beam.iter().zip(other.iter()) {
                assert_eq!(a.tokens, b.tokens, "{label} tokens");
                assert_eq!(a.logprob.to_bits(), b.logprob.to_bits(), "{label} logprob");
                assert_eq!(a.truncated, b.truncated, "{label} truncated");
            }
        }
    }

    // nucleus(p=1) and ancestral sampling share the rng stream exactly.
    for seed in 0..5u64 {
        let model = tiny_model(230 + seed, 12, 16);
        let src = random_src(&mut Rng::new(900 + seed), 12, 5);
        let nucleus = decoding::nucleus_sample(&model, &src, 6, 1.0, 55 + seed).expect("nucleus");
        let sampled = decoding::sample(&model, &src, 6, 55 + seed).expect("sample");
        assert_eq!(nucleus, sampled, "nucleus(p=1) != sample");
    }

    // mc(rate=0) is the deterministic decode, greedy and beam.
    for seed in 0..5u64 {
        let model = tiny_model(260 + seed, 12, 16);
        let src = random_src(&mut Rng::new(1100 + seed), 12, 5);
        let greedy = decoding::beam_search(&model, &src, 1, 1).expect("greedy");
        let mc = decoding::mc_dropout_generate(&model, &src, 3, McMode::Greedy, 1, 5, Some(0.0))
            .expect("mc greedy");
        for h in &mc {
            assert_eq!(h.tokens, greedy[0].tokens, "mc greedy tokens");
            assert_eq!(h.logprob.to_bits(), greedy[0].logprob.to_bits(), "mc greedy logprob");
            assert!(!h.dropout);
        }
        let beam = decoding::beam_search(&model, &src, 5, 1).expect("beam");
        let mc_beam = decoding::mc_dropout_generate(&model, &src, 2, McMode::Beam, 5, 5, Some(0.0))
            .expect("mc beam");
        for h in &mc_beam {
            assert_eq!(h.tokens, beam[0].tokens, "mc beam tokens");
            assert_eq!(h.logprob.to_bits(), beam[0].logprob.to_bits(), "mc beam logprob");
        }
    }

    // Exhaustive-width beam recovers the enumerated argmax over all length<=3
    // outputs from a 3-symbol vocabulary (ranking is length-normalized).
    let content = [3u32, 4, 5];
    for seed in 0..10u64 {
        let model = tiny_model(300 + seed, 6, 5);
        let src: Vec<u32> = (0..3)
            .map(|i| content[Rng::new(4000 + seed).at(i) as usize % 3])
            .collect();
        let fs = frame_source(&src);
        let mut candidates: Vec<(f64, f64, Vec<u32>)> = Vec::new();
        let mut stack: Vec<Vec<u32>> = vec![vec![]];
        while let Some(seq) = stack.pop() {
            if seq.len() <= 2 {
                // Terminated: sequence plus EOS fits within the 3-step cap.
                let (lp, _) = model.decode_logprobs(&fs, &frame_target(&seq), None).expect("lp");
                let total: f64 = lp.iter().sum();
                let mut tokens = seq.clone();
                tokens.push(EOS);
                candidates.push((total / tokens.len() as f64, total, tokens));
            }
            if seq.len() == 3 {
                // Truncated at the cap: no EOS emitted, so its logprob is
                // excluded from the total.
                let (lp, _) = model.decode_logprobs(&fs, &frame_target(&seq), None).expect("lp");
                let total: f64 = lp[..3].iter().sum();
                candidates.push((total / 3.0, total, seq.clone()));
            } else {
                for &t in &content {
                    let mut next = seq.clone();
                    next.push(t);
                    stack.push(next);
                }
            }
        }
        assert_eq!(candidates.len(), 1 + 3 + 9 + 27, "enumeration size");
        candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.2.cmp(&b.2)));
        let top = decoding::beam_search(&model, &src, 64, 1).expect("beam");
        let best = &candidates[0];
        assert_eq!(top[0].tokens, best.2, "instance {seed}: argmax tokens");
        assert!(
            (top[0].logprob - best.1).abs() <= 1e-9,
            "instance {seed}: logprob {} vs enumerated {}",
            top[0].logprob,
            best.1
        );
    }

    let elapsed = start.elapsed().as_secs_f64();
    println!(
        "criterion 07 PASS: dbs(1)=ddec(0)=beam, nucleus(1)=sample, mc(0)=deterministic, exhaustive beam = enumerated argmax on 10 instances, {elapsed:.1}s",
    );
}

// -- criterion 8: mitigation end-to-end -----------------------------------------

fn mitigation_mix() -> BTreeMap<PathologyLabel, f64> {
    let mut mix = BTreeMap::new();
    mix.insert(PathologyLabel::Correct, 0.25);
    mix.insert(PathologyLabel::Error, 0.15);
    mix.insert(PathologyLabel::Undertranslation, 0.15);
    mix.insert(PathologyLabel::StronglyDetached, 0.15);
    mix.insert(PathologyLabel::Oscillatory, 0.15);
    mix.insert(PathologyLabel::FullyDetached, 0.15);
    mix
}

#[test]
fn criterion_08_mitigation_halves_hallucinations() {
    let start = Instant::now();
    let lab = detection_lab();
    let encoder = dual_lab();

    let mix_spec = CorpusSpec { pathology_mix: mitigation_mix(), ..lab.corpus_spec.clone() };
    let mut records: Vec<TranslationRecord> = lab.corpus.eval[..200].to_vec();
    apply_pathology_mix(&mut records, &mix_spec, 29).expect("mix");
    let scorer = Scorer { model: &lab.model, encoder: Some(encoder) };
    timed("mitigation scoring", || {
        pipeline::score_corpus(&lab.model, Some(encoder), &mut records, false).expect("scoring")
    });

    let spec = PipelineSpec {
        detector: names::ALTI.to_string(),
        mode: SelectionMode::Flag(FlagRule::Fraction(0.5)),
        gen: decoding::GenSpec {
            strategy: decoding::Strategy::McBeam,
            n: 10,
            ..decoding::GenSpec::default()
        },
        reranker: names::ALTI.to_string(),
        seed: 11,
        allow_oracle_reranker: false,
    };
    let (updated, _, summary) = timed("mitigation", || {
        pipeline::mitigate_corpus(&records, &scorer, &spec).expect("mitigation")
    });

    let before_h = MitigationSummary::hallucination_count(&summary.before);
    let after_h = MitigationSummary::hallucination_count(&summary.after);
    let after_by_id: BTreeMap<u64, PathologyLabel> =
        updated.iter().map(|r| (r.id, r.label.expect("label"))).collect();
    let originally_correct: Vec<u64> = records
        .iter()
        .filter(|r| r.label == Some(PathologyLabel::Correct))
        .map(|r| r.id)
        .collect();
    let still_correct = originally_correct
        .iter()
        .filter(|id| after_by_id[id] == PathologyLabel::Correct)
        .count();
    let retention = still_correct as f64 / originally_correct.len() as f64;
    let elapsed = start.elapsed().as_secs_f64();
    let ok = before_h >= 2 * after_h.max(1) && retention >= 0.95 && summary.selected == 100;
    println!(
        "criterion 08 {}: hallucinations {before_h} -> {after_h} (factor {:.2} >= 2), correct retention {still_correct}/{} ({:.1}% >= 95%), {} flagged, {elapsed:.1}s",
        verdict(ok),
        before_h as f64 / after_h.max(1) as f64,
        originally_correct.len(),
        100.0 * retention,
        summary.selected
    );
    assert!(ok, "before {before_h} after {after_h} retention {retention:.3}");
}

// -- criterion 9: reranker risk shrinks with hypothesis count --------------------

#[test]
fn criterion_09_risk_monotone_in_hypothesis_count() {
    let start = Instant::now();
    let lab = detection_lab();
    let probe: Vec<TranslationRecord> = lab
        .split
        .iter()
        .filter(|r| r.label == Some(PathologyLabel::FullyDetached))
        .take(30)
        .cloned()
        .collect();
    assert_eq!(probe.len(), 30);
    let scorer = Scorer { model: &lab.model, encoder: None };

    let mut means = Vec::new();
    for n in [1usize, 5, 10, 20] {
        let spec = PipelineSpec {
            detector: names::ALTI.to_string(),
            mode: SelectionMode::Flag(FlagRule::Fraction(1.0)),
            gen: decoding::GenSpec {
                strategy: decoding::Strategy::McBeam,
                n,
                ..decoding::GenSpec::default()
            },
            reranker: names::ALTI.to_string(),
            seed: 13,
            allow_oracle_reranker: false,
        };
        let (_, audits, _) = timed(&format!("pipeline n={n}"), || {
            pipeline::mitigate_corpus(&probe, &scorer, &spec).expect("mitigation")
        });
        assert_eq!(audits.len(), probe.len());
        let mean = audits
            .iter()
            .map(|a| a.rows.iter().find(|row| row.chosen).expect("chosen row").risk)
            .sum::<f64>()
            / audits.len() as f64;
        means.push((n, mean));
    }
    // Per-draw seeds depend only on the record and draw index, so candidate
    // pools nest across n and each chosen risk is a min over a superset.
    let monotone = means.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-12);
    let elapsed = start.elapsed().as_secs_f64();
    let summary = means
        .iter()
        .map(|(n, m)| format!("n={n}: {m:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    println!(
        "criterion 09 {}: mean chosen reranker risk non-increasing ({summary}), {elapsed:.1}s",
        verdict(monotone)
    );
    assert!(monotone, "{summary}");
}

// -- criterion 10: end-to-end determinism ----------------------------------------

fn run_cli(args: &[&str]) -> PathBuf {
    let out = Command::new(env!("CARGO_BIN_EXE_halluguard"))
        .args(args)
        .env_remove("HALLUGUARD_OUT_DIR")
        .output()
        .expect("spawn cli");
    assert!(
        out.status.success(),
        "cli {:?} exited {:?}\nstderr: {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).expect("utf8 stdout");
    let line = stdout
        .lines()
        .rev()
        .find(|l| l.starts_with("artifacts in "))
        .unwrap_or_else(|| panic!("no artifacts line in {stdout:?}"));
    PathBuf::from(line.trim_start_matches("artifacts in ").trim())
}

/// The whole seeded recipe under one output root; returns every CSV/SVG
/// artifact keyed by step and file name.
fn full_recipe(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let roots = root.to_str().expect("utf8 root");
    let gen = run_cli(&[
        "gen-data", "--out-dir", roots, "--vocab-size", "48", "--min-len", "5", "--max-len", "9",
        "--train-size", "240", "--dev-size", "48", "--eval-size", "48", "--seed", "5",
    ]);
    let train_jsonl = gen.join("train.jsonl");
    let train_jsonl = train_jsonl.to_str().expect("utf8");
    let train = run_cli(&[
        "train", "--out-dir", roots, "--data", train_jsonl,
        "--dev", gen.join("dev.jsonl").to_str().expect("utf8"),
        "--steps", "80", "--log-every", "20", "--d-model", "32", "--n-heads", "2",
        "--n-enc-layers", "1", "--n-dec-layers", "1", "--d-ffn", "64", "--max-len", "24",
        "--vocab-size", "48", "--seed", "5",
    ]);
    let ckpt = train.join("checkpoint-final.hlgd");
    let ckpt = ckpt.to_str().expect("utf8");
    let enc = run_cli(&[
        "train-encoder", "--out-dir", roots, "--data", train_jsonl, "--vocab-size", "48",
        "--d-model", "16", "--max-len", "24", "--steps", "40", "--seed", "5",
    ]);
    let encoder = enc.join("encoder.hlgd");
    let encoder = encoder.to_str().expect("utf8");
    let translate = run_cli(&[
        "translate", "--out-dir", roots, "--data", gen.join("dev.jsonl").to_str().expect("utf8"),
        "--model", ckpt, "--strategy", "beam", "--beam-size", "3", "--n", "1", "--seed", "5",
    ]);
    let score = run_cli(&[
        "score", "--out-dir", roots, "--data", gen.join("eval.jsonl").to_str().expect("utf8"),
        "--model", ckpt, "--encoder", encoder, "--oracle", "--seed", "5",
    ]);
    let scored = score.join("scored.jsonl");
    let scored = scored.to_str().expect("utf8");
    let detect = run_cli(&[
        "detect", "--out-dir", roots, "--data", scored, "--detector", "alti",
        "--fraction", "0.25", "--seed", "5",
    ]);
    let mitigate = run_cli(&[
        "mitigate", "--out-dir", roots, "--data", scored, "--model", ckpt,
        "--encoder", encoder, "--detector", "alti", "--fraction", "0.3",
        "--strategy", "mc_beam", "--n", "3", "--reranker", "seq_logprob", "--seed", "5",
    ]);
    let evaluate = run_cli(&[
        "evaluate", "--out-dir", roots, "--data", scored,
        "--detectors", "seq_logprob,alti,dual_cos,chrf_pp", "--fraction", "0.1",
        "--bins", "12", "--seed", "5",
    ]);
    let report = run_cli(&[
        "report", "--out-dir", roots, "--tables", evaluate.to_str().expect("utf8"),
        "--fraction", "0.1", "--seed", "5",
    ]);

    let steps = [
        ("gen-data", gen),
        ("train", train),
        ("train-encoder", enc),
        ("translate", translate),
        ("score", score),
        ("detect", detect),
        ("mitigate", mitigate),
        ("evaluate", evaluate),
        ("report", report),
    ];
    let mut artifacts = BTreeMap::new();
    for (step, dir) in steps {
        for entry in std::fs::read_dir(&dir).expect("run dir") {
            let path = entry.expect("entry").path();
            let name = path.file_name().unwrap().to_string_lossy().to_string();
            if name.ends_with(".csv") || name.ends_with(".svg") {
                artifacts
                    .insert(format!("{step}/{name}"), std::fs::read(&path).expect("artifact"));
            }
        }
    }
    artifacts
}

#[test]
fn criterion_10_recipe_determinism() {
    let start = Instant::now();
    let base = tempfile::tempdir().expect("tempdir");
    let first = timed("recipe run 1", || full_recipe(&base.path().join("a")));
    let second = timed("recipe run 2", || full_recipe(&base.path().join("b")));

    let keys: Vec<&String> = first.keys().collect();
    assert_eq!(
        keys,
        second.keys().collect::<Vec<_>>(),
        "artifact sets differ between runs"
    );
    for expected in [
        "train/loss.csv",
        "train-encoder/encoder_loss.csv",
        "detect/detect.csv",
        "mitigate/summary.csv",
        "evaluate/metrics.csv",
        "evaluate/recall_by_type.csv",
        "evaluate/type_distribution.csv",
        "evaluate/histogram.csv",
        "report/metrics.svg",
    ] {
        assert!(first.contains_key(expected), "missing artifact {expected}");
    }
    let mut mismatched = Vec::new();
    for (key, bytes) in &first {
        if second[key] != *bytes {
            mismatched.push(key.clone());
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let ok = mismatched.is_empty();
    println!(
        "criterion 10 {}: {} CSV/SVG artifacts byte-identical across two full recipe runs, {elapsed:.1}s",
        verdict(ok),
        first.len()
    );
    assert!(ok, "differing artifacts: {mismatched:?}");
}
