//! Report assembly: per-detector metrics plus distribution analyses,
//! rendered as CSV tables and self-contained SVG figures.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::pathology::PathologyLabel;
use crate::corpus::TranslationRecord;
use crate::error::{Error, Result};

use super::{
    precision_at_recall, recall_by_type, roc_auc, score_histogram, type_distribution,
    LabeledScores, ScoreHistogram,
};

pub const DEFAULT_BINS: usize = 40;
pub const RECALL_TARGET: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorEval {
    pub detector: String,
    pub auc: f64,
    pub p_at_r90: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub detectors: Vec<DetectorEval>,
    pub fraction: f64,
    pub recall_by_type: BTreeMap<String, f64>,
    pub type_distribution: BTreeMap<String, f64>,
    /// One histogram per detector, keyed by detector name.
    pub histograms: BTreeMap<String, ScoreHistogram>,
}

/// Metrics for every named detector; the distribution analyses use the
/// first detector's ranking.
pub fn build_report(
    records: &[TranslationRecord],
    detectors: &[String],
    fraction: f64,
    bins: usize,
) -> Result<EvalReport> {
    let lead = detectors
        .first()
        .ok_or_else(|| Error::invalid("need at least one detector"))?;
    let mut evals = Vec::with_capacity(detectors.len());
    let mut histograms = BTreeMap::new();
    for name in detectors {
        let scores = LabeledScores::from_records(records, name)?;
        evals.push(DetectorEval {
            detector: name.clone(),
            auc: roc_auc(&scores)?,
            p_at_r90: precision_at_recall(&scores, RECALL_TARGET)?,
        });
        histograms.insert(name.clone(), score_histogram(&scores, bins)?);
    }
    let lead_scores = LabeledScores::from_records(records, lead)?;
    let recall = recall_by_type(&lead_scores, fraction)?
        .into_iter()
        .map(|(l, v)| (l.name().to_string(), v))
        .collect();
    let dist = type_distribution(&lead_scores, fraction)?
        .into_iter()
        .map(|(l, v)| (l.name().to_string(), v))
        .collect();
    Ok(EvalReport {
        detectors: evals,
        fraction,
        recall_by_type: recall,
        type_distribution: dist,
        histograms,
    })
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

pub fn metrics_csv(report: &EvalReport) -> String {
    let mut out = String::from("detector,auc,p_at_r90\n");
    for d in &report.detectors {
        let _ = writeln!(out, "{},{},{}", d.detector, fmt(d.auc), fmt(d.p_at_r90));
    }
    out
}

pub fn recall_by_type_csv(report: &EvalReport) -> String {
    let mut out = String::from("label,recall\n");
    for (label, v) in &report.recall_by_type {
        let _ = writeln!(out, "{label},{}", fmt(*v));
    }
    out
}

pub fn type_distribution_csv(report: &EvalReport) -> String {
    let mut out = String::from("label,share\n");
    for (label, v) in &report.type_distribution {
        let _ = writeln!(out, "{label},{}", fmt(*v));
    }
    out
}

pub fn histogram_csv(report: &EvalReport) -> String {
    let mut out = String::from("detector,label,bin_lo,bin_hi,count,density\n");
    for (detector, h) in &report.histograms {
        for (label, row) in &h.counts {
            let densities = &h.densities[label];
            for (b, (&count, &density)) in row.iter().zip(densities).enumerate() {
                let _ = writeln!(
                    out,
                    "{detector},{},{},{},{count},{}",
                    label.name(),
                    fmt(h.edges[b]),
                    fmt(h.edges[b + 1]),
                    fmt(density)
                );
            }
        }
    }
    out
}

const SVG_W: f64 = 720.0;
const SVG_H: f64 = 420.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 60.0;

const PALETTE: [&str; 6] = [
    "#4269d0", "#efb118", "#ff725c", "#6cc5b0", "#9c6b4e", "#97bbf5",
];

fn svg_open(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" \
         viewBox=\"0 0 {SVG_W} {SVG_H}\" font-family=\"sans-serif\">\n"
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{}</text>",
        SVG_W / 2.0,
        escape(title)
    );
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn plot_area() -> (f64, f64, f64, f64) {
    (MARGIN_L, MARGIN_T, SVG_W - MARGIN_L - MARGIN_R, SVG_H - MARGIN_T - MARGIN_B)
}

fn axes(s: &mut String, y_max: f64) {
    let (x0, y0, w, h) = plot_area();
    let _ = writeln!(
        s,
        "<line x1=\"{x0}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>",
        y0 + h,
        x0 + w,
        y0 + h
    );
    let _ = writeln!(s, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{}\" stroke=\"#333\"/>", y0 + h);
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = y0 + h - h * i as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{v:.2}</text>",
            x0 - 6.0,
            y + 4.0
        );
        let _ = writeln!(
            s,
            "<line x1=\"{x0}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#ddd\" stroke-dasharray=\"3,3\"/>",
            x0 + w
        );
    }
}

/// Grouped bar chart: one group per category, one bar per series.
pub fn bar_chart_svg(
    title: &str,
    categories: &[String],
    series: &[(String, Vec<f64>)],
) -> String {
    let mut s = svg_open(title);
    let (x0, y0, w, h) = plot_area();
    let y_max = series
        .iter()
        .flat_map(|(_, v)| v.iter())
        .fold(0.0_f64, |m, &v| m.max(v))
        .max(1e-12);
    axes(&mut s, y_max);
    let groups = categories.len().max(1) as f64;
    let group_w = w / groups;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (gi, cat) in categories.iter().enumerate() {
        let gx = x0 + gi as f64 * group_w;
        for (si, (_, values)) in series.iter().enumerate() {
            let v = values.get(gi).copied().unwrap_or(0.0);
            let bh = h * v / y_max;
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"{bar_w}\" height=\"{bh}\" fill=\"{}\"/>",
                gx + group_w * 0.1 + si as f64 * bar_w,
                y0 + h - bh,
                PALETTE[si % PALETTE.len()]
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            gx + group_w / 2.0,
            y0 + h + 16.0,
            escape(cat)
        );
    }
    legend(&mut s, series.iter().map(|(n, _)| n.as_str()));
    s.push_str("</svg>\n");
    s
}

/// Step-line chart over shared x edges, one polyline per series.
pub fn line_chart_svg(
    title: &str,
    edges: &[f64],
    series: &[(String, Vec<f64>)],
) -> String {
    let mut s = svg_open(title);
    let (x0, y0, w, h) = plot_area();
    let y_max = series
        .iter()
        .flat_map(|(_, v)| v.iter())
        .fold(0.0_f64, |m, &v| m.max(v))
        .max(1e-12);
    axes(&mut s, y_max);
    let (lo, hi) = (edges[0], edges[edges.len() - 1]);
    let span = (hi - lo).max(1e-12);
    for (si, (_, values)) in series.iter().enumerate() {
        let mut points = String::new();
        for (b, &v) in values.iter().enumerate() {
            let xa = x0 + w * (edges[b] - lo) / span;
            let xb = x0 + w * (edges[b + 1] - lo) / span;
            let y = y0 + h - h * v / y_max;
            let _ = write!(points, "{xa:.2},{y:.2} {xb:.2},{y:.2} ");
        }
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>",
            points.trim_end(),
            PALETTE[si % PALETTE.len()]
        );
    }
    for i in 0..=4 {
        let v = lo + span * i as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{v:.2}</text>",
            x0 + w * i as f64 / 4.0,
            y0 + h + 16.0
        );
    }
    legend(&mut s, series.iter().map(|(n, _)| n.as_str()));
    s.push_str("</svg>\n");
    s
}

fn legend<'a>(s: &mut String, names: impl Iterator<Item = &'a str>) {
    let (x0, _, _, _) = plot_area();
    for (i, name) in names.enumerate() {
        let x = x0 + i as f64 * 150.0;
        let y = SVG_H - 14.0;
        let _ = writeln!(
            s,
            "<rect x=\"{x}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/>",
            y - 9.0,
            PALETTE[i % PALETTE.len()]
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{y}\" font-size=\"11\">{}</text>",
            x + 14.0,
            escape(name)
        );
    }
}

pub fn metrics_svg(report: &EvalReport) -> String {
    let categories: Vec<String> = report.detectors.iter().map(|d| d.detector.clone()).collect();
    let auc: Vec<f64> = report.detectors.iter().map(|d| d.auc).collect();
    let p: Vec<f64> = report.detectors.iter().map(|d| d.p_at_r90).collect();
    bar_chart_svg(
        "Detector quality",
        &categories,
        &[("auc".into(), auc), ("p_at_r90".into(), p)],
    )
}

pub fn recall_by_type_svg(report: &EvalReport) -> String {
    let categories: Vec<String> = report.recall_by_type.keys().cloned().collect();
    let values: Vec<f64> = report.recall_by_type.values().copied().collect();
    bar_chart_svg(
        &format!("Recall by type (worst {:.0}%)", report.fraction * 100.0),
        &categories,
        &[("recall".into(), values)],
    )
}

pub fn type_distribution_svg(report: &EvalReport) -> String {
    let categories: Vec<String> = report.type_distribution.keys().cloned().collect();
    let values: Vec<f64> = report.type_distribution.values().copied().collect();
    bar_chart_svg(
        &format!("Flagged-type shares (worst {:.0}%)", report.fraction * 100.0),
        &categories,
        &[("share".into(), values)],
    )
}

pub fn histogram_svg(detector: &str, h: &ScoreHistogram) -> String {
    let series: Vec<(String, Vec<f64>)> = h
        .densities
        .iter()
        .map(|(label, d)| (label.name().to_string(), d.clone()))
        .collect();
    line_chart_svg(&format!("Risk densities ({detector})"), &h.edges, &series)
}

fn parse_f64(field: &str, line: usize) -> Result<f64> {
    field
        .parse()
        .map_err(|_| Error::data(format!("line {line}: bad number {field:?}")))
}

fn rows<'a>(text: &'a str, header: &str) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == header => {}
        other => {
            return Err(Error::data(format!(
                "expected header {header:?}, found {:?}",
                other.map(|(_, h)| h).unwrap_or("")
            )))
        }
    }
    let want = header.split(',').count();
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != want {
            return Err(Error::data(format!("line {}: expected {want} fields", i + 1)));
        }
        out.push((i + 1, fields));
    }
    Ok(out)
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<DetectorEval>> {
    rows(text, "detector,auc,p_at_r90")?
        .into_iter()
        .map(|(i, f)| {
            Ok(DetectorEval {
                detector: f[0].to_string(),
                auc: parse_f64(f[1], i)?,
                p_at_r90: parse_f64(f[2], i)?,
            })
        })
        .collect()
}

/// Parses the two label-keyed tables (recall and share).
pub fn parse_label_csv(text: &str, header: &str) -> Result<BTreeMap<String, f64>> {
    rows(text, header)?
        .into_iter()
        .map(|(i, f)| Ok((f[0].to_string(), parse_f64(f[1], i)?)))
        .collect()
}

pub fn parse_histogram_csv(text: &str) -> Result<BTreeMap<String, ScoreHistogram>> {
    let mut grouped: BTreeMap<String, BTreeMap<PathologyLabel, Vec<(f64, f64, usize, f64)>>> =
        BTreeMap::new();
    for (i, f) in rows(text, "detector,label,bin_lo,bin_hi,count,density")? {
        let label = PathologyLabel::parse(f[1])?;
        let count = f[4]
            .parse()
            .map_err(|_| Error::data(format!("line {i}: bad count {:?}", f[4])))?;
        grouped.entry(f[0].to_string()).or_default().entry(label).or_default().push((
            parse_f64(f[2], i)?,
            parse_f64(f[3], i)?,
            count,
            parse_f64(f[5], i)?,
        ));
    }
    let mut out = BTreeMap::new();
    for (detector, labels) in grouped {
        let bins = labels.values().next().map(|r| r.len()).unwrap_or(0);
        if bins == 0 || labels.values().any(|r| r.len() != bins) {
            return Err(Error::data(format!("{detector}: labels disagree on bin count")));
        }
        let first = labels.values().next().unwrap();
        let mut edges: Vec<f64> = first.iter().map(|r| r.0).collect();
        edges.push(first[bins - 1].1);
        let counts = labels.iter().map(|(&l, r)| (l, r.iter().map(|x| x.2).collect())).collect();
        let densities =
            labels.iter().map(|(&l, r)| (l, r.iter().map(|x| x.3).collect())).collect();
        out.insert(detector, ScoreHistogram { edges, counts, densities });
    }
    Ok(out)
}

/// Write every table and figure under `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = vec![
        ("metrics.csv".to_string(), metrics_csv(report)),
        ("recall_by_type.csv".to_string(), recall_by_type_csv(report)),
        ("type_distribution.csv".to_string(), type_distribution_csv(report)),
        ("histogram.csv".to_string(), histogram_csv(report)),
        ("metrics.svg".to_string(), metrics_svg(report)),
        ("recall_by_type.svg".to_string(), recall_by_type_svg(report)),
        ("type_distribution.svg".to_string(), type_distribution_svg(report)),
    ];
    for (detector, h) in &report.histograms {
        files.push((
            format!("histogram_{}.svg", detector.replace(':', "_")),
            histogram_svg(detector, h),
        ));
    }
    let mut written = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
