//! Head decoding, confidence filtering and class-aware greedy NMS.

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::error::{Error, Result};
use crate::imaging::LetterboxMap;
use crate::tensor::kernels::sigmoid;
use crate::tensor::Tensor;

pub const DEFAULT_MAX_DETECTIONS: usize = 300;

/// Axis-aligned box in pixels with its class and score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
    pub class_id: usize,
    pub score: f32,
}

impl Detection {
    pub fn area(&self) -> f32 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    fn is_finite(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2, self.score]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Intersection over union; 0 for disjoint or degenerate pairs.
pub fn iou(a: &Detection, b: &Detection) -> f32 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeStats {
    pub candidates: usize,
    pub nonfinite: usize,
}

pub fn decode_head(
    head: &Tensor,
    anchors: &[(f32, f32); 3],
    stride: usize,
    num_classes: usize,
) -> Result<Vec<Detection>> {
    let mut stats = DecodeStats::default();
    decode_head_counted(head, anchors, stride, num_classes, 0.0, &mut stats)
}

/// Decodes one head, keeping candidates with score ≥ `min_score`.
/// Non-finite candidates are skipped and counted in `stats`.
pub fn decode_head_counted(
    head: &Tensor,
    anchors: &[(f32, f32); 3],
    stride: usize,
    num_classes: usize,
    min_score: f32,
    stats: &mut DecodeStats,
) -> Result<Vec<Detection>> {
    let d = head.dims();
    let per = 5 + num_classes;
    if d.n != 1 || d.c != 3 * per {
        return Err(Error::shape(format!(
            "head {} does not carry 3·(5+{num_classes}) = {} channels",
            d,
            3 * per
        )));
    }
    let x = head.as_f32()?;
    let plane = d.plane();
    let s = stride as f32;
    let mut out = Vec::new();
    for (a, &(aw, ah)) in anchors.iter().enumerate() {
        let ch = |k: usize| &x[(a * per + k) * plane..(a * per + k + 1) * plane];
        let (tx, ty, tw, th, tobj) = (ch(0), ch(1), ch(2), ch(3), ch(4));
        for i in 0..d.h {
            for j in 0..d.w {
                let p = i * d.w + j;
                stats.candidates += 1;
                let (mut best_c, mut best_logit) = (0usize, f32::NEG_INFINITY);
                for c in 0..num_classes {
                    let v = x[(a * per + 5 + c) * plane + p];
                    if v > best_logit || c == 0 {
                        best_c = c;
                        best_logit = v;
                    }
                }
                let score = sigmoid(tobj[p]) * sigmoid(best_logit);
                if score.is_nan() {
                    stats.nonfinite += 1;
                    continue;
                }
                if score < min_score {
                    continue;
                }
                let bx = (2.0 * sigmoid(tx[p]) - 0.5 + j as f32) * s;
                let by = (2.0 * sigmoid(ty[p]) - 0.5 + i as f32) * s;
                let gw = 2.0 * sigmoid(tw[p]);
                let gh = 2.0 * sigmoid(th[p]);
                let (bw, bh) = (gw * gw * aw, gh * gh * ah);
                let det = Detection {
                    x1: bx - bw / 2.0,
                    y1: by - bh / 2.0,
                    x2: bx + bw / 2.0,
                    y2: by + bh / 2.0,
                    class_id: best_c,
                    score,
                };
                if !det.is_finite() || !(det.x2 > det.x1 && det.y2 > det.y1) {
                    stats.nonfinite += 1;
                    continue;
                }
                out.push(det);
            }
        }
    }
    Ok(out)
}

/// Descending score, ties broken by ascending position in the input.
fn ranked(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy class-aware NMS. A detection is suppressed when an already kept
/// detection of the same class overlaps it with IoU above the threshold.
pub fn nms(dets: &[Detection], iou_threshold: f32, max_out: usize) -> Vec<Detection> {
    let order = ranked(dets);
    let num_classes = dets.iter().map(|d| d.class_id + 1).max().unwrap_or(0);
    let mut kept_by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    let mut kept = Vec::new();
    for &i in &order {
        let d = &dets[i];
        let bucket = &mut kept_by_class[d.class_id];
        if bucket.iter().any(|&k| iou(&dets[k], d) > iou_threshold) {
            continue;
        }
        bucket.push(i);
        kept.push(i);
        if kept.len() == max_out {
            break;
        }
    }
    kept.into_iter().map(|i| dets[i]).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    pub conf_threshold: f32,
    pub iou_threshold: f32,
    pub max_out: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            conf_threshold: 0.25,
            iou_threshold: 0.45,
            max_out: DEFAULT_MAX_DETECTIONS,
        }
    }
}

/// Decodes all heads (stride order 8, 16, 32), filters by confidence, runs
/// NMS and maps the survivors back into original-frame pixels.
pub fn postprocess_pipeline(
    heads: &[Tensor; 3],
    anchors: &AnchorSet,
    conf_threshold: f32,
    iou_threshold: f32,
    map: &LetterboxMap,
) -> Result<Vec<Detection>> {
    let cfg = PostprocessConfig {
        conf_threshold,
        iou_threshold,
        ..PostprocessConfig::default()
    };
    Ok(postprocess_with(heads, anchors, &cfg, map)?.0)
}

pub fn postprocess_with(
    heads: &[Tensor; 3],
    anchors: &AnchorSet,
    cfg: &PostprocessConfig,
    map: &LetterboxMap,
) -> Result<(Vec<Detection>, DecodeStats)> {
    for (name, v) in [("conf", cfg.conf_threshold), ("iou", cfg.iou_threshold)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("{name} threshold {v} outside [0, 1]")));
        }
    }
    let c = heads[0].dims().c;
    if !c.is_multiple_of(3) || c / 3 < 6 {
        return Err(Error::shape(format!("head has {c} channels")));
    }
    let num_classes = c / 3 - 5;
    let mut stats = DecodeStats::default();
    let mut candidates = Vec::new();
    for (k, head) in heads.iter().enumerate() {
        candidates.extend(decode_head_counted(
            head,
            &anchors.for_stride_index(k),
            anchors.strides[k],
            num_classes,
            cfg.conf_threshold,
            &mut stats,
        )?);
    }
    let kept = nms(&candidates, cfg.iou_threshold, cfg.max_out);
    let (fw, fh) = (map.src_width as f32, map.src_height as f32);
    let mapped = kept
        .into_iter()
        .filter_map(|d| {
            let (x1, y1) = map.to_source(d.x1, d.y1);
            let (x2, y2) = map.to_source(d.x2, d.y2);
            let out = Detection {
                x1: x1.clamp(0.0, fw),
                y1: y1.clamp(0.0, fh),
                x2: x2.clamp(0.0, fw),
                y2: y2.clamp(0.0, fh),
                ..d
            };
            (out.x2 > out.x1 && out.y2 > out.y1).then_some(out)
        })
        .collect();
    Ok((mapped, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    fn det(x1: f32, y1: f32, x2: f32, y2: f32, class_id: usize, score: f32) -> Detection {
        Detection { x1, y1, x2, y2, class_id, score }
    }

    #[test]
    fn iou_cases() {
        let a = det(0.0, 0.0, 2.0, 2.0, 0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &det(5.0, 5.0, 6.0, 6.0, 0, 1.0)), 0.0);
        let b = det(1.0, 1.0, 3.0, 3.0, 0, 1.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-7);
        assert_eq!(iou(&a, &b), iou(&b, &a));
    }

    #[test]
    fn zero_logits_decode_to_anchor_at_cell_center() {
        let head = Tensor::zeros(Dims::new(1, 33, 4, 5));
        let dets = decode_head(&head, &[(10.0, 13.0), (16.0, 30.0), (33.0, 23.0)], 8, 6).unwrap();
        assert_eq!(dets.len(), 3 * 20);
        let d = dets[5 + 2]; // anchor 0, row 1, column 2
        assert_eq!(d.center(), ((2.0 + 0.5) * 8.0, (1.0 + 0.5) * 8.0));
        assert_eq!((d.x2 - d.x1, d.y2 - d.y1), (10.0, 13.0));
        assert_eq!(d.score, 0.25);
    }

    #[test]
    fn saturated_logits_give_unit_score() {
        let mut head = Tensor::zeros(Dims::new(1, 33, 1, 1));
        let x = head.as_f32_mut().unwrap();
        x[4] = 100.0;
        x[5 + 3] = 100.0;
        let dets = decode_head(&head, &[(1.0, 1.0); 3], 8, 6).unwrap();
        assert_eq!(dets[0].score, 1.0);
        assert_eq!(dets[0].class_id, 3);
    }

    #[test]
    fn width_grows_with_tw_up_to_four_anchors() {
        let mut prev = 0.0;
        for tw in [-4.0f32, -1.0, 0.0, 1.0, 10.0, 50.0] {
            let mut head = Tensor::zeros(Dims::new(1, 18, 1, 1));
            head.as_f32_mut().unwrap()[2] = tw;
            let d = decode_head(&head, &[(5.0, 5.0); 3], 8, 1).unwrap()[0];
            let w = d.x2 - d.x1;
            assert!(w > prev && w <= 4.0 * 5.0);
            prev = w;
        }
        assert_eq!(prev, 20.0);
    }

    #[test]
    fn decode_rejects_bad_channel_count() {
        let head = Tensor::zeros(Dims::new(1, 30, 2, 2));
        assert!(decode_head(&head, &[(1.0, 1.0); 3], 8, 6).is_err());
    }

    #[test]
    fn nonfinite_candidates_are_counted_not_fatal() {
        let mut head = Tensor::zeros(Dims::new(1, 18, 1, 2));
        head.as_f32_mut().unwrap()[0] = f32::NAN;
        let mut stats = DecodeStats::default();
        let dets =
            decode_head_counted(&head, &[(1.0, 1.0); 3], 8, 1, 0.0, &mut stats).unwrap();
        assert_eq!(stats.nonfinite, 1);
        assert_eq!(dets.len(), 5);
    }

    #[test]
    fn nms_duplicates_and_classes() {
        let a = det(0.0, 0.0, 10.0, 10.0, 0, 0.9);
        let b = det(0.0, 0.0, 10.0, 10.0, 0, 0.8);
        assert_eq!(nms(&[b, a], 0.5, 300), vec![a]);
        let c = det(0.0, 0.0, 10.0, 10.0, 1, 0.8);
        assert_eq!(nms(&[a, c], 0.5, 300), vec![a, c]);
    }

    #[test]
    fn nms_ties_keep_earlier_index() {
        let a = det(0.0, 0.0, 10.0, 10.0, 0, 0.5);
        let b = det(1.0, 0.0, 11.0, 10.0, 0, 0.5);
        assert_eq!(nms(&[a, b], 0.3, 300), vec![a]);
        assert_eq!(nms(&[b, a], 0.3, 300), vec![b]);
    }

    #[test]
    fn nms_caps_output() {
        let dets: Vec<_> = (0..10)
            .map(|i| det(20.0 * i as f32, 0.0, 20.0 * i as f32 + 10.0, 10.0, 0, 0.1 * i as f32))
            .collect();
        let out = nms(&dets, 0.5, 3);
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].score, dets[9].score);
    }

    fn heads_with_one_box(size: usize) -> [Tensor; 3] {
        let mut h0 = Tensor::full(Dims::new(1, 33, size / 8, size / 8), -20.0);
        let plane = (size / 8) * (size / 8);
        let x = h0.as_f32_mut().unwrap();
        for k in 0..4 {
            x[k * plane] = 0.0;
        }
        x[4 * plane] = 5.0;
        x[(5 + 2) * plane] = 5.0;
        [
            h0,
            Tensor::full(Dims::new(1, 33, size / 16, size / 16), -20.0),
            Tensor::full(Dims::new(1, 33, size / 32, size / 32), -20.0),
        ]
    }

    #[test]
    fn pipeline_filters_and_maps() {
        let heads = heads_with_one_box(64);
        let map = LetterboxMap::identity(64);
        let out = postprocess_pipeline(&heads, &AnchorSet::default(), 0.4, 0.4, &map).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].class_id, 2);
        assert!(out.iter().all(|d| d.score >= 0.4));
        // Anchor (10, 13) centered on cell (0, 0) at stride 8, clipped at 0.
        assert_eq!((out[0].x1, out[0].x2), (0.0, 9.0));
        for (c, i) in [(0.2, 0.2), (0.4, 0.4), (0.3, 0.6)] {
            assert!(postprocess_pipeline(&heads, &AnchorSet::default(), c, i, &map).is_ok());
        }
        assert!(postprocess_pipeline(&heads, &AnchorSet::default(), 1.5, 0.4, &map).is_err());
    }

    #[test]
    fn pipeline_undoes_letterbox() {
        let heads = heads_with_one_box(64);
        let map = LetterboxMap::new(128, 96, 64);
        let out = postprocess_pipeline(&heads, &AnchorSet::default(), 0.4, 0.4, &map).unwrap();
        let (sx1, _) = map.to_source(4.0 - 5.0, 0.0);
        assert_eq!(out[0].x1, sx1.max(0.0));
        assert_eq!(out[0].x2, map.to_source(9.0, 0.0).0);
    }
}
