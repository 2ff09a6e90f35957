//! Average precision over IoU or L1 threshold sweeps.
//!
//! Matching is greedy in confidence order: each detection takes the
//! best-scoring unmatched ground truth of its image that clears the
//! threshold. AP is the exact area under the monotone precision envelope
//! (all-points interpolation). A sweep with no ground truth and no
//! detections scores 1.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{Labels, LINE_POINTS};
use crate::geometry::{self, l1_dist, Point2, Polygon};
use crate::model::ScoredObject;
use crate::task::Task;

pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];
pub const L1_THRESHOLDS: [f64; 10] = [0.10, 0.09, 0.08, 0.07, 0.06, 0.05, 0.04, 0.03, 0.02, 0.01];

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: usize,
    pub object: Vec<Point2>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: usize,
    pub object: Vec<Point2>,
}

/// How a detection is compared with a ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    /// Filled-region IoU ≥ threshold.
    Iou,
    /// Single-point L1 distance ≤ threshold.
    PointL1,
    /// Sum of index-aligned vertex L1 distances ≤ threshold.
    LineL1,
}

impl MatchRule {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Gates | Task::Polygons => MatchRule::Iou,
            Task::Points => MatchRule::PointL1,
            Task::Line => MatchRule::LineL1,
        }
    }

    pub fn thresholds(&self) -> &'static [f64] {
        match self {
            MatchRule::Iou => &IOU_THRESHOLDS,
            _ => &L1_THRESHOLDS,
        }
    }

    /// Whether a larger score means a closer match.
    fn higher_is_better(&self) -> bool {
        *self == MatchRule::Iou
    }

    fn accepts(&self, score: f64, threshold: f64) -> bool {
        if self.higher_is_better() {
            score >= threshold
        } else {
            score <= threshold
        }
    }
}

/// `true` iff both point lists have 8 entries and the index-aligned L1
/// distances sum to at most `threshold`.
pub fn line_score(pred: &[Point2], gt: &[Point2], threshold: f64) -> bool {
    line_distance(pred, gt).is_some_and(|d| d <= threshold)
}

fn line_distance(pred: &[Point2], gt: &[Point2]) -> Option<f64> {
    if pred.len() != LINE_POINTS || gt.len() != LINE_POINTS {
        return None;
    }
    Some(pred.iter().zip(gt).map(|(&p, &q)| l1_dist(p, q)).sum())
}

fn bbox(points: &[Point2]) -> (f64, f64, f64, f64) {
    points.iter().fold(
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |(x0, y0, x1, y1), p| (x0.min(p.x), y0.min(p.y), x1.max(p.x), y1.max(p.y)),
    )
}

/// IoU of two vertex lists; degenerate or invalid shapes score 0.
pub fn object_iou(a: &[Point2], b: &[Point2]) -> f64 {
    let (ax0, ay0, ax1, ay1) = bbox(a);
    let (bx0, by0, bx1, by1) = bbox(b);
    if ax1 <= bx0 || bx1 <= ax0 || ay1 <= by0 || by1 <= ay0 {
        return 0.0;
    }
    match (Polygon::new(a.to_vec()), Polygon::new(b.to_vec())) {
        (Ok(pa), Ok(pb)) if pa.area() >= geometry::MIN_AREA && pb.area() >= geometry::MIN_AREA => {
            geometry::iou(&pa, &pb).unwrap_or(0.0)
        }
        _ => 0.0,
    }
}

/// Detection-vs-GT score, `None` when the pair can never match.
fn score(rule: MatchRule, det: &[Point2], gt: &[Point2]) -> Option<f64> {
    match rule {
        MatchRule::Iou => Some(object_iou(det, gt)),
        MatchRule::PointL1 => match (det, gt) {
            ([p], [q]) => Some(l1_dist(*p, *q)),
            _ => None,
        },
        MatchRule::LineL1 => line_distance(det, gt),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub threshold: f64,
    pub ap: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(recall, precision)` starting at `(0, 1)`, then one point per ranked
    /// detection.
    pub curve: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalDiagnostics {
    /// Detections that could not be compared with any ground truth
    /// (wrong vertex count for the rule).
    pub malformed_detections: usize,
    /// Images whose model output needed salvaging.
    pub malformed_outputs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub rule: MatchRule,
    pub map: f64,
    pub per_threshold: Vec<ThresholdResult>,
    pub num_detections: usize,
    pub num_ground_truths: usize,
    pub diagnostics: EvalDiagnostics,
}

impl EvalReport {
    pub fn ap_at(&self, threshold: f64) -> Option<f64> {
        self.per_threshold
            .iter()
            .find(|r| (r.threshold - threshold).abs() < 1e-12)
            .map(|r| r.ap)
    }
}

/// Confidence-descending order, ties broken by image id then input index.
fn ranking(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap_or(Ordering::Equal)
            .then(dets[a].image_id.cmp(&dets[b].image_id))
            .then(a.cmp(&b))
    });
    order
}

/// Pairwise scores of each detection against the GTs of its image, computed
/// once for the whole sweep.
struct ScoreTable {
    /// Per detection: `(gt index, score)` for comparable GTs of its image.
    rows: Vec<Vec<(usize, f64)>>,
    malformed: usize,
}

fn score_table(dets: &[Detection], gts: &[GroundTruth], rule: MatchRule) -> ScoreTable {
    let mut by_image: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id).or_default().push(i);
    }
    let mut malformed = 0;
    let rows = dets
        .iter()
        .map(|d| {
            let row: Vec<(usize, f64)> = by_image
                .get(&d.image_id)
                .map(|ids| ids.iter().filter_map(|&j| score(rule, &d.object, &gts[j].object).map(|s| (j, s))).collect())
                .unwrap_or_default();
            let comparable = match rule {
                MatchRule::Iou => d.object.len() >= 3,
                MatchRule::PointL1 => d.object.len() == 1,
                MatchRule::LineL1 => d.object.len() == LINE_POINTS,
            };
            if !comparable {
                malformed += 1;
            }
            row
        })
        .collect();
    ScoreTable { rows, malformed }
}

fn sweep_one(dets: &[Detection], n_gt: usize, order: &[usize], table: &ScoreTable, rule: MatchRule, threshold: f64) -> ThresholdResult {
    let mut matched = vec![false; n_gt];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(order.len() + 1);
    curve.push((0.0, 1.0));
    for &d in order {
        let mut best: Option<(usize, f64)> = None;
        for &(j, s) in &table.rows[d] {
            if matched[j] || !rule.accepts(s, threshold) {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, b)) => {
                    if rule.higher_is_better() {
                        s > b
                    } else {
                        s < b
                    }
                }
            };
            if better {
                best = Some((j, s));
            }
        }
        match best {
            Some((j, _)) => {
                matched[j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        let recall = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
        curve.push((recall, tp as f64 / (tp + fp) as f64));
    }
    let ap = if n_gt == 0 {
        if dets.is_empty() {
            1.0
        } else {
            0.0
        }
    } else {
        area_under_envelope(&curve)
    };
    ThresholdResult {
        threshold,
        ap,
        tp,
        fp,
        fn_: n_gt - tp,
        curve,
    }
}

/// Exact area under the right-to-left running maximum of precision.
pub fn area_under_envelope(curve: &[(f64, f64)]) -> f64 {
    let mut env: Vec<f64> = curve.iter().map(|&(_, p)| p).collect();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut ap = 0.0;
    for i in 1..curve.len() {
        ap += (curve[i].0 - curve[i - 1].0) * env[i];
    }
    ap.clamp(0.0, 1.0)
}

/// Sweeps `thresholds` with `rule`; `mAP` is their arithmetic mean.
pub fn evaluate(task: Task, dets: &[Detection], gts: &[GroundTruth], rule: MatchRule, thresholds: &[f64]) -> EvalReport {
    let order = ranking(dets);
    let table = score_table(dets, gts, rule);
    let per_threshold: Vec<ThresholdResult> = thresholds
        .iter()
        .map(|&t| sweep_one(dets, gts.len(), &order, &table, rule, t))
        .collect();
    let map = per_threshold.iter().map(|r| r.ap).sum::<f64>() / per_threshold.len().max(1) as f64;
    EvalReport {
        task,
        rule,
        map,
        per_threshold,
        num_detections: dets.len(),
        num_ground_truths: gts.len(),
        diagnostics: EvalDiagnostics {
            malformed_detections: table.malformed,
            malformed_outputs: 0,
        },
    }
}

pub fn ap_at_iou(dets: &[Detection], gts: &[GroundTruth], threshold: f64) -> f64 {
    evaluate(Task::Gates, dets, gts, MatchRule::Iou, &[threshold]).map
}

/// mAP over IoU thresholds 0.50, 0.55, …, 0.95.
pub fn map_iou(task: Task, dets: &[Detection], gts: &[GroundTruth]) -> EvalReport {
    evaluate(task, dets, gts, MatchRule::Iou, &IOU_THRESHOLDS)
}

/// mAP over point L1 thresholds 0.10, 0.09, …, 0.01.
pub fn map_l1_points(dets: &[Detection], gts: &[GroundTruth]) -> EvalReport {
    evaluate(Task::Points, dets, gts, MatchRule::PointL1, &L1_THRESHOLDS)
}

/// mAP over summed line L1 thresholds 0.10, 0.09, …, 0.01.
pub fn map_line(dets: &[Detection], gts: &[GroundTruth]) -> EvalReport {
    evaluate(Task::Line, dets, gts, MatchRule::LineL1, &L1_THRESHOLDS)
}

/// Flattens per-image labels into ground truths with image ids `0..`.
pub fn ground_truths(labels: &[Labels]) -> Vec<GroundTruth> {
    labels
        .iter()
        .enumerate()
        .flat_map(|(image_id, l)| {
            l.objects.iter().map(move |o| GroundTruth {
                image_id,
                object: o.clone(),
            })
        })
        .collect()
}

pub fn detections(per_image: &[Vec<ScoredObject>]) -> Vec<Detection> {
    per_image
        .iter()
        .enumerate()
        .flat_map(|(image_id, objs)| {
            objs.iter().map(move |o| Detection {
                image_id,
                object: o.points.clone(),
                confidence: o.confidence,
            })
        })
        .collect()
}

/// The task's metric on per-image predictions, with its standard sweep.
pub fn evaluate_task(task: Task, predictions: &[Vec<ScoredObject>], labels: &[Labels], thresholds: Option<&[f64]>) -> EvalReport {
    let rule = MatchRule::for_task(task);
    let th = thresholds.unwrap_or(rule.thresholds());
    evaluate(task, &detections(predictions), &ground_truths(labels), rule, th)
}

/// CSV with header `threshold,recall,precision,ap`, one row per curve point.
pub fn curves_csv(report: &EvalReport) -> String {
    let mut s = String::from("threshold,recall,precision,ap\n");
    for r in &report.per_threshold {
        for &(rec, prec) in &r.curve {
            let _ = writeln!(s, "{:.2},{:.10},{:.10},{:.10}", r.threshold, rec, prec, r.ap);
        }
    }
    s
}

#[derive(Serialize)]
struct Summary<'a> {
    task: Task,
    #[serde(rename = "mAP")]
    map: f64,
    per_threshold: std::collections::BTreeMap<String, f64>,
    counts: Vec<Counts>,
    diagnostics: &'a EvalDiagnostics,
}

#[derive(Serialize)]
struct Counts {
    threshold: f64,
    tp: usize,
    fp: usize,
    #[serde(rename = "fn")]
    fn_: usize,
}

pub fn summary_json(report: &EvalReport) -> String {
    let s = Summary {
        task: report.task,
        map: report.map,
        per_threshold: report.per_threshold.iter().map(|r| (format!("{:.2}", r.threshold), r.ap)).collect(),
        counts: report
            .per_threshold
            .iter()
            .map(|r| Counts {
                threshold: r.threshold,
                tp: r.tp,
                fp: r.fp,
                fn_: r.fn_,
            })
            .collect(),
        diagnostics: &report.diagnostics,
    };
    serde_json::to_string_pretty(&s).expect("summary serializes") + "\n"
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// A labelled polyline in unit coordinates for [`line_plot_svg`].
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Deterministic SVG line plot of unit-range series with a legend entry per
/// series.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h, m) = (480.0, 360.0, 50.0);
    let (pw, ph) = (w - 2.0 * m, h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{}" font-family="sans-serif" font-size="11">"#, h + 20.0 * series.len() as f64);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, w / 2.0, xml_escape(title));
    let _ = writeln!(s, r#"<rect x="{m}" y="{m}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let x = m + v * pw;
        let y = m + ph - v * ph;
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{v:.1}</text>"#, m + ph + 15.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, m - 5.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 10.0, xml_escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        xml_escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", m + x.clamp(0.0, 1.0) * pw, m + ph - y.clamp(0.0, 1.0) * ph))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let ly = h + 20.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{m}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, m + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" class="legend">{}</text>"#, m + 26.0, ly + 4.0, xml_escape(&ser.label));
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Precision-recall curves of every threshold as an SVG plot.
pub fn curves_svg(report: &EvalReport) -> String {
    let series: Vec<Series> = report
        .per_threshold
        .iter()
        .map(|r| Series {
            label: format!("t={:.2} AP={:.3}", r.threshold, r.ap),
            points: r.curve.clone(),
        })
        .collect();
    line_plot_svg(&format!("{} PR curves, mAP {:.4}", report.task, report.map), "recall", "precision", &series)
}

/// AP-versus-threshold curves of several labelled reports in one plot,
/// with thresholds mapped linearly onto the x axis.
pub fn ap_threshold_svg(title: &str, reports: &[(String, Vec<(f64, f64)>)]) -> String {
    let all = reports.iter().flat_map(|(_, pts)| pts.iter().map(|p| p.0));
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| (lo.min(t), hi.max(t)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let series: Vec<Series> = reports
        .iter()
        .map(|(label, pts)| {
            let mut pts: Vec<(f64, f64)> = pts.iter().map(|&(t, ap)| ((t - lo) / span, ap)).collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series {
                label: label.clone(),
                points: pts,
            }
        })
        .collect();
    let x_label = if lo.is_finite() {
        format!("threshold ({lo:.2} to {hi:.2})")
    } else {
        "threshold".to_string()
    };
    line_plot_svg(title, &x_label, "AP", &series)
}

fn write_file(path: &Path, contents: &str) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(contents.as_bytes())?;
    f.sync_all()
}

/// Writes `curves.csv`, `summary.json` and `curves.svg` into `dir`.
pub fn emit_curves(report: &EvalReport, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    write_file(&dir.join("curves.csv"), &curves_csv(report))?;
    write_file(&dir.join("summary.json"), &summary_json(report))?;
    write_file(&dir.join("curves.svg"), &curves_svg(report))
}
