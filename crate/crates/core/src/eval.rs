//! Detection matching, all-point AP, mAP@0.5 and the F1/confidence sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::BenchStats;
use crate::error::{Error, Result};
use crate::imaging::LabelBox;
use crate::postprocess::{iou, Detection};

pub const DEFAULT_IOU_MATCH: f32 = 0.5;
pub const SWEEP_POINTS: usize = 101;

/// One evaluated frame: detections in pixels, ground truth normalised to
/// the frame size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub width: usize,
    pub height: usize,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<LabelBox>,
}

fn gt_box(g: &LabelBox, width: usize, height: usize) -> Detection {
    let [x1, y1, x2, y2] = g.to_pixels(width, height);
    Detection { x1, y1, x2, y2, class_id: g.class_id, score: 1.0 }
}

fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// TP/FP flag per detection (input order). Detections are visited by
/// descending score; each claims the unmatched same-class GT of highest IoU
/// provided that IoU reaches `iou_match`.
pub fn match_detections(
    dets: &[Detection],
    gts: &[LabelBox],
    width: usize,
    height: usize,
    iou_match: f32,
) -> Vec<bool> {
    let gt_boxes: Vec<Detection> = gts.iter().map(|g| gt_box(g, width, height)).collect();
    let mut taken = vec![false; gts.len()];
    let mut flags = vec![false; dets.len()];
    for i in score_order(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f32)> = None;
        for (j, g) in gt_boxes.iter().enumerate() {
            if taken[j] || g.class_id != d.class_id {
                continue;
            }
            let v = iou(d, g);
            if v >= iou_match && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            flags[i] = true;
        }
    }
    flags
}

/// (recall, precision) at every distinct score threshold, descending.
fn pr_points(tp_flags: &[bool], scores: &[f32], num_gt: usize) -> Vec<(f32, f32)> {
    let n = tp_flags.len().min(scores.len());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::new();
    for (k, &i) in order.iter().enumerate() {
        if tp_flags[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let group_ends = order.get(k + 1).is_none_or(|&j| scores[j] != scores[i]);
        if group_ends {
            let recall = (tp as f64 / num_gt as f64).min(1.0) as f32;
            points.push((recall, (tp as f64 / (tp + fp) as f64) as f32));
        }
    }
    points
}

/// Area under the precision envelope of the PR curve (all-point
/// interpolation). Detections sharing a score enter as one threshold step.
pub fn average_precision(tp_flags: &[bool], scores: &[f32], num_gt: usize) -> f32 {
    if num_gt == 0 {
        return 0.0;
    }
    let points = pr_points(tp_flags, scores, num_gt);
    let mut envelope: Vec<f64> = points.iter().map(|&(_, p)| p as f64).collect();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0f64;
    let mut prev_r = 0.0f64;
    for (&(r, _), &p) in points.iter().zip(&envelope) {
        ap += (r as f64 - prev_r) * p;
        prev_r = r as f64;
    }
    ap.clamp(0.0, 1.0) as f32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    /// AP per class with at least one ground-truth box.
    pub per_class_ap: BTreeMap<String, f32>,
    pub per_class_gt: BTreeMap<String, usize>,
    pub map50: f32,
    pub iou_match: f32,
    pub conf_threshold: f32,
    pub precision: f32,
    pub recall: f32,
    /// (confidence, F1) on a uniform grid over [0, 1].
    pub f1_curve: Vec<(f32, f32)>,
    /// (recall, interpolated precision) on a uniform recall grid.
    pub pr_curve: Vec<(f32, f32)>,
    pub best_f1: f32,
    pub best_confidence: f32,
    pub timing: Option<BenchStats>,
}

struct ClassTally {
    /// Scores descending with their TP flags.
    scores: Vec<f32>,
    tp: Vec<bool>,
    /// Prefix TP counts: `cum_tp[k]` = TPs among the first k detections.
    cum_tp: Vec<usize>,
    num_gt: usize,
}

impl ClassTally {
    fn precision_recall(&self, conf: f32) -> (f64, f64) {
        let k = self.scores.partition_point(|&s| s >= conf);
        let tp = self.cum_tp[k] as f64;
        let p = if k == 0 { 0.0 } else { tp / k as f64 };
        (p, tp / self.num_gt as f64)
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-class AP at `iou_match`, mAP over classes present in ground truth,
/// class-averaged precision/recall at `conf_threshold` and the F1 sweep.
pub fn evaluate(
    frames: &[FrameEval],
    class_names: &[String],
    conf_threshold: f32,
    iou_match: f32,
) -> Result<EvalReport> {
    if !(iou_match > 0.0 && iou_match <= 1.0) {
        return Err(Error::invalid(format!("iou_match {iou_match} outside (0, 1]")));
    }
    if !(0.0..=1.0).contains(&conf_threshold) {
        return Err(Error::invalid(format!("conf threshold {conf_threshold} outside [0, 1]")));
    }
    let nc = class_names.len();
    let mut per_class: Vec<(Vec<f32>, Vec<bool>, usize)> = vec![(Vec::new(), Vec::new(), 0); nc];
    for f in frames {
        let flags = match_detections(&f.detections, &f.ground_truth, f.width, f.height, iou_match);
        for (d, tp) in f.detections.iter().zip(flags) {
            let slot = per_class
                .get_mut(d.class_id)
                .ok_or_else(|| Error::invalid(format!("detection class {} out of range", d.class_id)))?;
            slot.0.push(d.score);
            slot.1.push(tp);
        }
        for g in &f.ground_truth {
            let slot = per_class
                .get_mut(g.class_id)
                .ok_or_else(|| Error::invalid(format!("label class {} out of range", g.class_id)))?;
            slot.2 += 1;
        }
    }

    let mut tallies = Vec::new();
    let mut per_class_ap = BTreeMap::new();
    let mut per_class_gt = BTreeMap::new();
    let mut pr_sum = vec![0.0f64; SWEEP_POINTS];
    for (c, (scores, tp, num_gt)) in per_class.into_iter().enumerate() {
        if num_gt == 0 {
            continue;
        }
        let ap = average_precision(&tp, &scores, num_gt);
        per_class_ap.insert(class_names[c].clone(), ap);
        per_class_gt.insert(class_names[c].clone(), num_gt);

        let points = pr_points(&tp, &scores, num_gt);
        for (k, acc) in pr_sum.iter_mut().enumerate() {
            let r = k as f32 / (SWEEP_POINTS - 1) as f32;
            let p = points
                .iter()
                .filter(|&&(pr, _)| pr >= r)
                .map(|&(_, pp)| pp)
                .fold(0.0f32, f32::max);
            *acc += p as f64;
        }

        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let sorted_scores: Vec<f32> = order.iter().map(|&i| scores[i]).collect();
        let sorted_tp: Vec<bool> = order.iter().map(|&i| tp[i]).collect();
        let mut cum_tp = vec![0usize; sorted_tp.len() + 1];
        for (k, &t) in sorted_tp.iter().enumerate() {
            cum_tp[k + 1] = cum_tp[k] + t as usize;
        }
        tallies.push(ClassTally { scores: sorted_scores, tp: sorted_tp, cum_tp, num_gt });
    }

    let present = tallies.len();
    let mean = |f: &dyn Fn(&ClassTally) -> f64| -> f32 {
        if present == 0 {
            0.0
        } else {
            (tallies.iter().map(f).sum::<f64>() / present as f64) as f32
        }
    };
    let map50 = if present == 0 {
        0.0
    } else {
        (per_class_ap.values().map(|&v| v as f64).sum::<f64>() / present as f64) as f32
    };
    let precision = mean(&|t| t.precision_recall(conf_threshold).0);
    let recall = mean(&|t| t.precision_recall(conf_threshold).1);
    let f1_curve: Vec<(f32, f32)> = (0..SWEEP_POINTS)
        .map(|k| {
            let conf = k as f32 / (SWEEP_POINTS - 1) as f32;
            let v = mean(&|t| {
                let (p, r) = t.precision_recall(conf);
                f1(p, r)
            });
            (conf, v)
        })
        .collect();
    let (best_confidence, best_f1) = f1_curve
        .iter()
        .copied()
        .fold((0.0f32, f32::NEG_INFINITY), |acc, (c, v)| if v > acc.1 { (c, v) } else { acc });
    let pr_curve = pr_sum
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let r = k as f32 / (SWEEP_POINTS - 1) as f32;
            (r, if present == 0 { 0.0 } else { (s / present as f64) as f32 })
        })
        .collect();
    debug_assert!(tallies.iter().all(|t| t.tp.len() == t.scores.len()));

    Ok(EvalReport {
        class_names: class_names.to_vec(),
        per_class_ap,
        per_class_gt,
        map50,
        iou_match,
        conf_threshold,
        precision,
        recall,
        f1_curve,
        pr_curve,
        best_f1: best_f1.max(0.0),
        best_confidence,
        timing: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    /// Self-describing JSON that parses back into an equal report.
    Structured,
    /// One-row CSV with the table columns.
    Tabular,
    /// Standalone SVG with the PR and F1/confidence curves.
    PrPlot,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Structured => "json",
            ReportFormat::Tabular => "csv",
            ReportFormat::PrPlot => "svg",
        }
    }
}

pub fn write_report(r: &EvalReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        ReportFormat::Structured => serde_json::to_string_pretty(r)
            .map_err(|e| Error::invalid(format!("report serialization: {e}")))?,
        ReportFormat::Tabular => tabular(r),
        ReportFormat::PrPlot => pr_plot(r),
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Header plus one data row; per-class columns follow the class order and
/// stay empty for classes without ground truth.
pub fn tabular(r: &EvalReport) -> String {
    let mut header = vec![
        "Confidence threshold".to_string(),
        "IoU threshold".to_string(),
        "mAP (all classes) %".to_string(),
    ];
    let mut row = vec![
        format!("{}", r.conf_threshold),
        format!("{}", r.iou_match),
        format!("{:.1}", r.map50 * 100.0),
    ];
    for name in &r.class_names {
        header.push(csv_field(&format!("{name} mAP %")));
        row.push(r.per_class_ap.get(name).map_or(String::new(), |ap| format!("{:.1}", ap * 100.0)));
    }
    header.extend(
        ["Precision", "Recall", "Best F1", "Best F1 confidence"].map(String::from),
    );
    row.extend([
        format!("{:.3}", r.precision),
        format!("{:.3}", r.recall),
        format!("{:.3}", r.best_f1),
        format!("{:.3}", r.best_confidence),
    ]);
    header.push("Average inference time/frame (ms)".into());
    header.push("Minimum inference time (ms)".into());
    match &r.timing {
        Some(t) => {
            row.push(format!("{:.3}", t.avg_ms));
            row.push(format!("{:.3}", t.min_ms));
        }
        None => row.extend([String::new(), String::new()]),
    }
    format!("{}\n{}\n", header.join(","), row.join(","))
}

fn polyline(points: &[(f32, f32)], x0: f32, y0: f32, size: f32) -> String {
    points
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", x0 + x * size, y0 + (1.0 - y) * size))
        .collect::<Vec<_>>()
        .join(" ")
}

fn axes(svg: &mut String, x0: f32, y0: f32, size: f32, title: &str, xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        svg,
        r##"<rect x="{x0}" y="{y0}" width="{size}" height="{size}" fill="none" stroke="#000"/>"##
    );
    for k in 0..=4 {
        let t = k as f32 / 4.0;
        let gx = x0 + t * size;
        let gy = y0 + (1.0 - t) * size;
        let _ = writeln!(
            svg,
            r##"<line x1="{gx}" y1="{y0}" x2="{gx}" y2="{}" stroke="#ddd"/><text x="{gx}" y="{}" font-size="10" text-anchor="middle">{t:.2}</text>"##,
            y0 + size,
            y0 + size + 14.0
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{x0}" y1="{gy}" x2="{}" y2="{gy}" stroke="#ddd"/><text x="{}" y="{}" font-size="10" text-anchor="end">{t:.2}</text>"##,
            x0 + size,
            x0 - 4.0,
            gy + 3.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">{title}</text>"#,
        x0 + size / 2.0,
        y0 - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{xlabel}</text>"#,
        x0 + size / 2.0,
        y0 + size + 32.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="11" text-anchor="middle" transform="rotate(-90 {} {})">{ylabel}</text>"#,
        x0 - 34.0,
        y0 + size / 2.0,
        x0 - 34.0,
        y0 + size / 2.0
    );
}

pub fn pr_plot(r: &EvalReport) -> String {
    let size = 300.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="820" height="400" viewBox="0 0 820 400">"#
    );
    let _ = writeln!(svg, r##"<rect width="820" height="400" fill="#fff"/>"##);
    axes(
        &mut svg,
        60.0,
        40.0,
        size,
        &format!("Precision-Recall (mAP@{} {:.3})", r.iou_match, r.map50),
        "Recall",
        "Precision",
    );
    let _ = writeln!(
        svg,
        r##"<polyline id="pr" fill="none" stroke="#1f77b4" stroke-width="2" points="{}"/>"##,
        polyline(&r.pr_curve, 60.0, 40.0, size)
    );
    axes(
        &mut svg,
        480.0,
        40.0,
        size,
        &format!("F1-Confidence (all classes {:.2} at {:.3})", r.best_f1, r.best_confidence),
        "Confidence",
        "F1",
    );
    let _ = writeln!(
        svg,
        r##"<polyline id="f1" fill="none" stroke="#d62728" stroke-width="2" points="{}"/>"##,
        polyline(&r.f1_curve, 480.0, 40.0, size)
    );
    svg.push_str("</svg>\n");
    svg
}
