//! Auto-anchor: best-possible-recall scoring of an anchor set against label
//! sizes, IoU k-means, genetic refinement, and the keep-or-recompute rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RATIO_THRESHOLD: f32 = 4.0;
pub const DEFAULT_BPR_KEEP: f32 = 0.98;
pub const KMEANS_MAX_ITERS: usize = 300;

/// Nine (w, h) anchors in input pixels, three per detection stride,
/// ascending by area.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub anchors: [[[f32; 2]; 3]; 3],
    pub strides: [usize; 3],
}

impl Default for AnchorSet {
    /// The COCO anchors shipped with the v5 recipe.
    fn default() -> Self {
        AnchorSet {
            anchors: [
                [[10.0, 13.0], [16.0, 30.0], [33.0, 23.0]],
                [[30.0, 61.0], [62.0, 45.0], [59.0, 119.0]],
                [[116.0, 90.0], [156.0, 198.0], [373.0, 326.0]],
            ],
            strides: [8, 16, 32],
        }
    }
}

impl AnchorSet {
    /// Sorts nine pairs by area and assigns them to strides 8, 16, 32.
    pub fn from_pairs(pairs: &[(f32, f32)]) -> Result<Self> {
        if pairs.len() != 9 {
            return Err(Error::invalid(format!(
                "an anchor set needs 9 pairs, got {}",
                pairs.len()
            )));
        }
        if pairs
            .iter()
            .any(|&(w, h)| !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()))
        {
            return Err(Error::invalid("anchor sizes must be positive and finite"));
        }
        let mut sorted = pairs.to_vec();
        sorted.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
        let mut anchors = [[[0.0; 2]; 3]; 3];
        for (i, (w, h)) in sorted.into_iter().enumerate() {
            anchors[i / 3][i % 3] = [w, h];
        }
        Ok(AnchorSet {
            anchors,
            strides: [8, 16, 32],
        })
    }

    pub fn pairs(&self) -> Vec<(f32, f32)> {
        self.anchors
            .iter()
            .flatten()
            .map(|&[w, h]| (w, h))
            .collect()
    }

    pub fn for_stride_index(&self, i: usize) -> [(f32, f32); 3] {
        let g = &self.anchors[i];
        [(g[0][0], g[0][1]), (g[1][0], g[1][1]), (g[2][0], g[2][1])]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorFitReport {
    pub bpr: f32,
    pub anchors_per_target: f32,
    pub threshold: f32,
}

impl std::fmt::Display for AnchorFitReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:.2} anchors/target, {:.3} Best Possible Recall (BPR)",
            self.anchors_per_target, self.bpr
        )
    }
}

/// Worst-side ratio between a label and an anchor; 1.0 is a perfect fit.
#[inline]
pub fn fit_ratio(label: (f32, f32), anchor: (f32, f32)) -> f32 {
    let rw = label.0 / anchor.0;
    let rh = label.1 / anchor.1;
    rw.max(1.0 / rw).max(rh).max(1.0 / rh)
}

fn check_labels(labels: &[(f32, f32)]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Empty("anchor fitting needs at least one label"));
    }
    if labels
        .iter()
        .any(|&(w, h)| !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()))
    {
        return Err(Error::invalid("label sizes must be positive and finite"));
    }
    Ok(())
}

pub fn anchor_fit(
    labels: &[(f32, f32)],
    anchors: &AnchorSet,
    ratio_threshold: f32,
) -> Result<AnchorFitReport> {
    check_labels(labels)?;
    if !(ratio_threshold > 1.0) {
        return Err(Error::invalid("ratio threshold must exceed 1"));
    }
    let pairs = anchors.pairs();
    let (matched, total) = labels.iter().fold((0usize, 0usize), |(m, t), &l| {
        let n = pairs
            .iter()
            .filter(|&&a| fit_ratio(l, a) < ratio_threshold)
            .count();
        (m + usize::from(n > 0), t + n)
    });
    Ok(AnchorFitReport {
        bpr: matched as f32 / labels.len() as f32,
        anchors_per_target: total as f32 / labels.len() as f32,
        threshold: ratio_threshold,
    })
}

/// 1 − IoU of two boxes sharing a center.
#[inline]
pub fn iou_distance(a: (f32, f32), b: (f32, f32)) -> f32 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    1.0 - inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

fn nearest(label: (f32, f32), centroids: &[(f32, f32)]) -> (usize, f32) {
    centroids
        .iter()
        .enumerate()
        .map(|(i, &c)| (i, iou_distance(label, c)))
        .fold((0, f32::INFINITY), |best, cur| {
            if cur.1 < best.1 {
                cur
            } else {
                best
            }
        })
}

/// Mean distance from each label to its nearest centroid.
pub fn kmeans_objective(labels: &[(f32, f32)], centroids: &[(f32, f32)]) -> f64 {
    labels
        .iter()
        .map(|&l| nearest(l, centroids).1 as f64)
        .sum::<f64>()
        / labels.len() as f64
}

/// Result of [`kmeans_anchors_traced`]: centroids plus the objective after
/// every iteration.
#[derive(Clone, Debug)]
pub struct KmeansTrace {
    pub centroids: Vec<(f32, f32)>,
    pub objective: Vec<f64>,
    pub iterations: usize,
}

pub fn kmeans_anchors(labels: &[(f32, f32)], k: usize, seed: u64) -> Result<Vec<(f32, f32)>> {
    Ok(kmeans_anchors_traced(labels, k, seed)?.centroids)
}

/// Lloyd iterations under the co-centered IoU distance, seeded with
/// k-means++. A cluster's mean only replaces its centroid when that lowers the
/// cluster's total distance, which keeps the objective non-increasing.
pub fn kmeans_anchors_traced(labels: &[(f32, f32)], k: usize, seed: u64) -> Result<KmeansTrace> {
    check_labels(labels)?;
    if k == 0 || labels.len() < k {
        return Err(Error::invalid(format!(
            "k-means needs at least k={k} labels, got {}",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = vec![labels[rng.gen_range(0..labels.len())]];
    while centroids.len() < k {
        let weights: Vec<f64> = labels
            .iter()
            .map(|&l| {
                let d = nearest(l, &centroids).1 as f64;
                d * d
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut idx = labels.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if target < *w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.gen_range(0..labels.len())
        };
        centroids.push(labels[pick]);
    }

    let mut assign: Vec<usize> = labels.iter().map(|&l| nearest(l, &centroids).0).collect();
    let mut objective = vec![kmeans_objective(labels, &centroids)];
    let mut iterations = 0;
    for _ in 0..KMEANS_MAX_ITERS {
        iterations += 1;
        // Update step.
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<(f32, f32)> = labels
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == c)
                .map(|(&l, _)| l)
                .collect();
            if members.is_empty() {
                continue;
            }
            let n = members.len() as f64;
            let (sw, sh) = members
                .iter()
                .fold((0.0f64, 0.0f64), |acc, &(w, h)| (acc.0 + w as f64, acc.1 + h as f64));
            let mean = ((sw / n) as f32, (sh / n) as f32);
            let cost = |c: (f32, f32)| -> f64 {
                members.iter().map(|&m| iou_distance(m, c) as f64).sum()
            };
            if cost(mean) < cost(*centroid) {
                *centroid = mean;
            }
        }
        // Assignment step.
        let next: Vec<usize> = labels.iter().map(|&l| nearest(l, &centroids).0).collect();
        objective.push(kmeans_objective(labels, &centroids));
        if next == assign {
            break;
        }
        assign = next;
    }
    Ok(KmeansTrace {
        centroids,
        objective,
        iterations,
    })
}

/// Mean over labels of the best anchor's inverse fit ratio, zeroed where the
/// best ratio misses the threshold.
pub fn anchor_fitness(labels: &[(f32, f32)], anchors: &[(f32, f32)], ratio_threshold: f32) -> f64 {
    labels
        .iter()
        .map(|&l| {
            let best = anchors
                .iter()
                .map(|&a| 1.0 / fit_ratio(l, a))
                .fold(0.0f32, f32::max);
            if best > 1.0 / ratio_threshold {
                best as f64
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / labels.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct AutoAnchorConfig {
    pub ratio_threshold: f32,
    pub bpr_keep: f32,
    pub generations: usize,
    pub mutation_prob: f32,
    pub mutation_range: f32,
}

impl Default for AutoAnchorConfig {
    fn default() -> Self {
        AutoAnchorConfig {
            ratio_threshold: DEFAULT_RATIO_THRESHOLD,
            bpr_keep: DEFAULT_BPR_KEEP,
            generations: 1000,
            mutation_prob: 0.9,
            mutation_range: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AutoAnchorOutcome {
    pub anchors: AnchorSet,
    pub before: AnchorFitReport,
    pub after: AnchorFitReport,
    pub recomputed: bool,
}

pub fn autoanchor(
    labels: &[(f32, f32)],
    current: &AnchorSet,
    bpr_keep: f32,
    seed: u64,
) -> Result<AnchorSet> {
    let cfg = AutoAnchorConfig {
        bpr_keep,
        ..AutoAnchorConfig::default()
    };
    Ok(autoanchor_with(labels, current, &cfg, seed)?.anchors)
}

/// Keeps `current` when its BPR reaches `bpr_keep`; otherwise recomputes with
/// k-means (k = 9) plus genetic refinement, and only adopts the result if its
/// BPR is not lower.
pub fn autoanchor_with(
    labels: &[(f32, f32)],
    current: &AnchorSet,
    cfg: &AutoAnchorConfig,
    seed: u64,
) -> Result<AutoAnchorOutcome> {
    if !(cfg.bpr_keep > 0.0 && cfg.bpr_keep <= 1.0) {
        return Err(Error::invalid("bpr_keep must lie in (0, 1]"));
    }
    let before = anchor_fit(labels, current, cfg.ratio_threshold)?;
    if before.bpr >= cfg.bpr_keep {
        return Ok(AutoAnchorOutcome {
            anchors: current.clone(),
            after: before.clone(),
            before,
            recomputed: false,
        });
    }

    let mut anchors = kmeans_anchors(labels, 9, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut best = anchor_fitness(labels, &anchors, cfg.ratio_threshold);
    for _ in 0..cfg.generations {
        let mut candidate = anchors.clone();
        let mut changed = false;
        while !changed {
            for a in candidate.iter_mut() {
                for dim in [&mut a.0, &mut a.1] {
                    if rng.gen::<f32>() < cfg.mutation_prob {
                        let f = rng.gen_range(1.0 - cfg.mutation_range..1.0 + cfg.mutation_range);
                        *dim = (*dim * f).max(2.0);
                        changed = true;
                    }
                }
            }
        }
        let fit = anchor_fitness(labels, &candidate, cfg.ratio_threshold);
        if fit > best {
            best = fit;
            anchors = candidate;
        }
    }

    let proposed = AnchorSet::from_pairs(&anchors)?;
    let after = anchor_fit(labels, &proposed, cfg.ratio_threshold)?;
    if after.bpr < before.bpr {
        return Ok(AutoAnchorOutcome {
            anchors: current.clone(),
            after: before.clone(),
            before,
            recomputed: false,
        });
    }
    Ok(AutoAnchorOutcome {
        anchors: proposed,
        before,
        after,
        recomputed: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_fit_has_full_recall() {
        let set = AnchorSet::default();
        let labels = set.pairs();
        let r = anchor_fit(&labels, &set, 4.0).unwrap();
        assert_eq!(r.bpr, 1.0);
    }

    #[test]
    fn ratio_beyond_threshold_matches_nothing() {
        let set = AnchorSet::from_pairs(&[(10.0, 10.0); 9]).unwrap();
        let r = anchor_fit(&[(100.0, 100.0); 5], &set, 4.0).unwrap();
        assert_eq!(r.bpr, 0.0);
        assert_eq!(r.anchors_per_target, 0.0);
    }

    #[test]
    fn anchors_per_target_counts_matches() {
        // Five anchors within ratio 4 of both labels, four far away.
        let mut pairs = vec![(20.0, 20.0); 5];
        pairs.extend(vec![(500.0, 500.0); 4]);
        let set = AnchorSet::from_pairs(&pairs).unwrap();
        let labels = [(20.0, 20.0), (30.0, 25.0)];
        let brute: usize = labels
            .iter()
            .map(|&l| pairs.iter().filter(|&&a| fit_ratio(l, a) < 4.0).count())
            .sum();
        assert_eq!(brute, 10);
        let r = anchor_fit(&labels, &set, 4.0).unwrap();
        assert_eq!(r.anchors_per_target, 5.0);
    }

    #[test]
    fn empty_labels_error() {
        assert!(matches!(
            anchor_fit(&[], &AnchorSet::default(), 4.0),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn from_pairs_sorts_by_area() {
        let pairs: Vec<_> = (1..=9).rev().map(|i| (i as f32, 2.0 * i as f32)).collect();
        let set = AnchorSet::from_pairs(&pairs).unwrap();
        let areas: Vec<f32> = set.pairs().iter().map(|(w, h)| w * h).collect();
        assert!(areas.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn kmeans_degenerate_cluster() {
        let c = kmeans_anchors(&[(12.0, 34.0); 20], 1, 0).unwrap();
        assert_eq!(c, vec![(12.0, 34.0)]);
    }

    #[test]
    fn kmeans_two_clusters() {
        let mut labels = vec![(10.0, 10.0); 50];
        labels.extend(vec![(100.0, 100.0); 50]);
        let mut c = kmeans_anchors(&labels, 2, 7).unwrap();
        c.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!((c[0].0 - 10.0).abs() < 1.0 && (c[0].1 - 10.0).abs() < 1.0);
        assert!((c[1].0 - 100.0).abs() < 1.0 && (c[1].1 - 100.0).abs() < 1.0);
    }

    #[test]
    fn kmeans_contract_and_errors() {
        let labels: Vec<_> = (1..40).map(|i| (i as f32, (i * 2) as f32)).collect();
        let c = kmeans_anchors(&labels, 9, 1).unwrap();
        assert_eq!(c.len(), 9);
        assert!(c.iter().all(|&(w, h)| w > 0.0 && h > 0.0));
        assert!(kmeans_anchors(&labels[..3], 9, 1).is_err());
    }

    #[test]
    fn good_anchors_kept() {
        let set = AnchorSet::default();
        let labels = set.pairs();
        let out = autoanchor_with(&labels, &set, &AutoAnchorConfig::default(), 0).unwrap();
        assert!(!out.recomputed);
        assert_eq!(out.anchors, set);
    }

    #[test]
    fn report_display_mirrors_log_line() {
        let r = AnchorFitReport {
            bpr: 0.999,
            anchors_per_target: 4.81,
            threshold: 4.0,
        };
        assert_eq!(
            r.to_string(),
            "4.81 anchors/target, 0.999 Best Possible Recall (BPR)"
        );
    }
}
