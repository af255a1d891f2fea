//! Average precision for event scores and detections, and late fusion.

use serde::{Deserialize, Serialize};

use crate::detection::BBox;
use crate::error::{Error, Result};

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredPrediction {
    pub score: f64,
    pub is_positive: bool,
}

/// Indices ordered by descending score; equal scores keep input order.
fn ranking(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Sum of precision at each relevant rank, divided by `num_relevant`.
fn ranked_ap(relevant_in_rank_order: impl Iterator<Item = bool>, num_relevant: usize) -> f64 {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, rel) in relevant_in_rank_order.enumerate() {
        if rel {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    total / num_relevant as f64
}

fn check_scores(op: &str, scores: impl Iterator<Item = f64>) -> Result<()> {
    for (i, s) in scores.enumerate() {
        if !s.is_finite() {
            return Err(Error::NonFinite {
                op: op.to_string(),
                detail: format!("score {} at index {}", s, i),
            });
        }
    }
    Ok(())
}

/// All-points average precision: mean of the precision at the rank of each
/// positive, ranking by descending score with ties in input order.
pub fn average_precision(preds: &[ScoredPrediction]) -> Result<f64> {
    check_scores("average_precision", preds.iter().map(|p| p.score))?;
    let num_pos = preds.iter().filter(|p| p.is_positive).count();
    if num_pos == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive".into(),
        ));
    }
    let order = ranking(preds.iter().map(|p| p.score));
    Ok(ranked_ap(
        order.iter().map(|&i| preds[i].is_positive),
        num_pos,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub bbox: BBox,
    pub cls: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub image: usize,
    pub bbox: BBox,
    pub cls: usize,
}

/// TP/FP flag of every detection of class `cls`, in ranked order, plus the
/// number of ground-truth boxes of that class.
///
/// Detections are visited by descending score. Each takes the unmatched
/// same-image, same-class ground-truth box it overlaps most; it is a true
/// positive when that IoU exceeds `iou_thresh`.
pub fn match_detections(
    dets: &[Detection],
    gt: &[GroundTruth],
    iou_thresh: f64,
    cls: usize,
) -> Result<(Vec<bool>, usize)> {
    check_scores("detection_ap", dets.iter().map(|d| d.score))?;
    let gt: Vec<&GroundTruth> = gt.iter().filter(|g| g.cls == cls).collect();
    let dets: Vec<&Detection> = dets.iter().filter(|d| d.cls == cls).collect();
    let mut matched = vec![false; gt.len()];
    let order = ranking(dets.iter().map(|d| d.score));
    let mut flags = Vec::with_capacity(dets.len());
    for i in order {
        let d = dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.iter().enumerate() {
            if matched[j] || g.image != d.image {
                continue;
            }
            let v = d.bbox.iou(&g.bbox);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        let tp = match best {
            Some((j, v)) if v > iou_thresh => {
                matched[j] = true;
                true
            }
            _ => false,
        };
        flags.push(tp);
    }
    Ok((flags, gt.len()))
}

/// Per-class detection AP; unmatched ground truth lowers recall, so the
/// precision sum is normalized by the ground-truth count.
pub fn detection_ap(
    dets: &[Detection],
    gt: &[GroundTruth],
    iou_thresh: f64,
    cls: usize,
) -> Result<f64> {
    let (flags, num_gt) = match_detections(dets, gt, iou_thresh, cls)?;
    if num_gt == 0 {
        return Err(Error::UndefinedMetric(format!(
            "no ground-truth boxes of class {}",
            cls
        )));
    }
    Ok(ranked_ap(flags.into_iter(), num_gt))
}

/// Macro-average of [`detection_ap`] over classes that have ground truth.
pub fn mean_detection_ap(
    dets: &[Detection],
    gt: &[GroundTruth],
    iou_thresh: f64,
    num_classes: usize,
) -> Result<f64> {
    let mut aps = Vec::new();
    for cls in 0..num_classes {
        match detection_ap(dets, gt, iou_thresh, cls) {
            Ok(ap) => aps.push(ap),
            Err(Error::UndefinedMetric(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if aps.is_empty() {
        return Err(Error::UndefinedMetric(
            "no class has ground-truth boxes".into(),
        ));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fused {
    pub scores: Vec<f64>,
    /// Tasks whose scores were constant; they contribute that constant.
    pub constant_tasks: Vec<usize>,
}

/// Weighted sum of per-task scores after min-max normalizing each task over
/// the evaluation set.
pub fn late_fusion(score_sets: &[Vec<f64>], weights: &[f64]) -> Result<Fused> {
    if score_sets.is_empty() || score_sets.len() != weights.len() {
        return Err(Error::shape(
            "late_fusion",
            format!(
                "{} weights for {} score sets",
                weights.len(),
                score_sets.len()
            ),
        ));
    }
    let n = score_sets[0].len();
    if let Some((t, s)) = score_sets.iter().enumerate().find(|(_, s)| s.len() != n) {
        return Err(Error::shape(
            "late_fusion",
            format!("task {} has {} scores, task 0 has {}", t, s.len(), n),
        ));
    }
    let wsum: f64 = weights.iter().sum();
    if weights.iter().any(|w| !w.is_finite()) || (wsum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(
            "late_fusion",
            format!("weights must be finite and sum to 1, got {:?}", weights),
        ));
    }
    for s in score_sets {
        check_scores("late_fusion", s.iter().copied())?;
    }
    let mut fused = vec![0.0; n];
    let mut constant_tasks = Vec::new();
    for (t, (scores, &w)) in score_sets.iter().zip(weights).enumerate() {
        let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        if n > 0 && range <= 0.0 {
            log::warn!("late fusion: task {} has constant scores", t);
            constant_tasks.push(t);
        }
        for (f, &s) in fused.iter_mut().zip(scores) {
            let norm = if range > 0.0 { (s - lo) / range } else { s };
            *f += w * norm;
        }
    }
    Ok(Fused {
        scores: fused,
        constant_tasks,
    })
}

/// One row of a metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub split: String,
    pub ap: f64,
    pub num_pos: usize,
    pub num_images: usize,
    /// Hex digest of the architecture configuration.
    pub config_hash: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(score: f64, is_positive: bool) -> ScoredPrediction {
        ScoredPrediction { score, is_positive }
    }

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bb(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(5.0, 5.0, 6.0, 6.0)), 0.0);
        // two overlapping unit cells out of six covered
        assert!((iou(&a, &bb(1.0, 0.0, 3.0, 2.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ap_perfect_and_reversed() {
        assert_eq!(
            average_precision(&[p(0.9, true), p(0.8, true), p(0.1, false)]).unwrap(),
            1.0
        );
        // positive at rank 2: precision 1/2
        assert_eq!(
            average_precision(&[p(0.1, true), p(0.9, false)]).unwrap(),
            0.5
        );
    }

    #[test]
    fn ap_ties_follow_input_order() {
        assert_eq!(
            average_precision(&[p(0.5, true), p(0.5, false)]).unwrap(),
            1.0
        );
        assert_eq!(
            average_precision(&[p(0.5, false), p(0.5, true)]).unwrap(),
            0.5
        );
    }

    #[test]
    fn ap_needs_a_positive() {
        assert!(matches!(
            average_precision(&[p(0.3, false)]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(average_precision(&[p(f64::NAN, true)]).is_err());
    }

    fn gt(image: usize, b: BBox, cls: usize) -> GroundTruth {
        GroundTruth {
            image,
            bbox: b,
            cls,
        }
    }

    fn det(image: usize, b: BBox, cls: usize, score: f64) -> Detection {
        Detection {
            image,
            bbox: b,
            cls,
            score,
        }
    }

    #[test]
    fn detection_ap_perfect() {
        let boxes = [bb(0.0, 0.0, 8.0, 8.0), bb(10.0, 10.0, 20.0, 20.0)];
        let g: Vec<_> = boxes
            .iter()
            .enumerate()
            .map(|(i, b)| gt(i, *b, i))
            .collect();
        let d: Vec<_> = boxes
            .iter()
            .enumerate()
            .map(|(i, b)| det(i, *b, i, 1.0))
            .collect();
        assert_eq!(detection_ap(&d, &g, 0.5, 0).unwrap(), 1.0);
        assert_eq!(detection_ap(&d, &g, 0.5, 1).unwrap(), 1.0);
        assert_eq!(mean_detection_ap(&d, &g, 0.5, 3).unwrap(), 1.0);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let b = bb(0.0, 0.0, 8.0, 8.0);
        let g = [gt(0, b, 0)];
        let d = [det(0, b, 0, 0.9), det(0, b, 0, 0.8)];
        let (flags, n) = match_detections(&d, &g, 0.5, 0).unwrap();
        assert_eq!((flags, n), (vec![true, false], 1));
        // the only TP sits at rank 1
        assert_eq!(detection_ap(&d, &g, 0.5, 0).unwrap(), 1.0);
        // the higher-scoring overlapping box takes the match
        let d2 = [det(0, b, 0, 0.8), det(0, bb(0.0, 0.0, 7.0, 8.0), 0, 0.9)];
        let (flags, _) = match_detections(&d2, &g, 0.5, 0).unwrap();
        assert_eq!(flags, vec![true, false]);
    }

    #[test]
    fn missed_ground_truth_lowers_ap() {
        let g = [
            gt(0, bb(0.0, 0.0, 8.0, 8.0), 0),
            gt(1, bb(0.0, 0.0, 8.0, 8.0), 0),
        ];
        let d = [det(0, bb(0.0, 0.0, 8.0, 8.0), 0, 0.7)];
        assert_eq!(detection_ap(&d, &g, 0.5, 0).unwrap(), 0.5);
        assert_eq!(detection_ap(&[], &g, 0.5, 0).unwrap(), 0.0);
        assert!(matches!(
            detection_ap(&d, &g, 0.5, 2),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn detections_only_match_their_image() {
        let b = bb(0.0, 0.0, 8.0, 8.0);
        let (flags, _) = match_detections(&[det(1, b, 0, 0.9)], &[gt(0, b, 0)], 0.5, 0).unwrap();
        assert_eq!(flags, vec![false]);
    }

    #[test]
    fn iou_threshold_is_strict() {
        // IoU exactly 0.5: 8x8 box against 8x4 half
        let g = [gt(0, bb(0.0, 0.0, 8.0, 8.0), 0)];
        let d = [det(0, bb(0.0, 0.0, 8.0, 4.0), 0, 1.0)];
        assert_eq!(detection_ap(&d, &g, 0.5, 0).unwrap(), 0.0);
    }

    #[test]
    fn fusion_single_task_is_normalization() {
        let f = late_fusion(&[vec![2.0, 4.0, 3.0]], &[1.0]).unwrap();
        assert_eq!(f.scores, vec![0.0, 1.0, 0.5]);
        assert!(f.constant_tasks.is_empty());
    }

    #[test]
    fn fusion_flags_constant_task() {
        let f = late_fusion(&[vec![0.2, 0.6], vec![0.7, 0.7]], &[0.5, 0.5]).unwrap();
        assert_eq!(f.constant_tasks, vec![1]);
        assert!((f.scores[0] - 0.35).abs() < 1e-15 && (f.scores[1] - 0.85).abs() < 1e-15);
    }

    #[test]
    fn fusion_rejects_bad_input() {
        assert!(late_fusion(&[vec![1.0], vec![1.0, 2.0]], &[0.5, 0.5]).is_err());
        assert!(late_fusion(&[vec![1.0]], &[0.7]).is_err());
        assert!(late_fusion(&[vec![1.0]], &[0.5, 0.5]).is_err());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn preds() -> impl Strategy<Value = Vec<ScoredPrediction>> {
        // coarse dyadic scores so ties are common and transforms stay exact
        prop::collection::vec((-16i32..16, any::<bool>()), 1..40).prop_map(|v| {
            v.into_iter()
                .map(|(k, is_positive)| ScoredPrediction {
                    score: k as f64 * 0.125,
                    is_positive,
                })
                .collect()
        })
    }

    fn bbox() -> impl Strategy<Value = BBox> {
        (0u8..20, 0u8..20, 1u8..10, 1u8..10).prop_map(|(x, y, w, h)| {
            BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64).unwrap()
        })
    }

    proptest! {
        #[test]
        fn ap_is_invariant_under_monotone_maps(preds in preds()) {
            prop_assume!(preds.iter().any(|p| p.is_positive));
            let base = average_precision(&preds).unwrap();
            prop_assert!((0.0..=1.0).contains(&base));
            for f in [|s: f64| 2.0 * s + 5.0, |s: f64| s * s * s + s, f64::exp] {
                let mapped: Vec<_> = preds
                    .iter()
                    .map(|p| ScoredPrediction { score: f(p.score), ..*p })
                    .collect();
                prop_assert_eq!(average_precision(&mapped).unwrap(), base);
            }
        }

        #[test]
        fn detection_ap_is_ap_of_matched_flags(
            dets in prop::collection::vec((0usize..3, bbox(), 0usize..2, 0u8..8), 0..25),
            gts in prop::collection::vec((0usize..3, bbox(), 0usize..2), 1..10),
        ) {
            let dets: Vec<Detection> = dets
                .into_iter()
                .map(|(image, bbox, cls, s)| Detection { image, bbox, cls, score: s as f64 })
                .collect();
            let gts: Vec<GroundTruth> = gts
                .into_iter()
                .map(|(image, bbox, cls)| GroundTruth { image, bbox, cls })
                .collect();
            for cls in 0..2 {
                let (flags, num_gt) = match_detections(&dets, &gts, 0.5, cls).unwrap();
                let tp = flags.iter().filter(|&&f| f).count();
                prop_assert!(tp <= num_gt);
                let Ok(ap) = detection_ap(&dets, &gts, 0.5, cls) else {
                    prop_assert_eq!(num_gt, 0);
                    continue;
                };
                // same precision sum as event AP over the flags, normalized
                // by the ground-truth count instead of the true positives
                if tp == 0 {
                    prop_assert_eq!(ap, 0.0);
                } else {
                    let labels: Vec<ScoredPrediction> = flags
                        .iter()
                        .enumerate()
                        .map(|(r, &f)| ScoredPrediction { score: -(r as f64), is_positive: f })
                        .collect();
                    let expected = average_precision(&labels).unwrap() * tp as f64 / num_gt as f64;
                    prop_assert!((ap - expected).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn identical_tasks_fuse_to_the_same_ranking(
            scores in prop::collection::vec(0u8..50, 2..30),
            w in 0.0f64..1.0,
        ) {
            let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
            let fused = late_fusion(&[s.clone(), s.clone()], &[w, 1.0 - w]).unwrap();
            let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..s.len() {
                for j in 0..s.len() {
                    if s[i] < s[j] {
                        prop_assert!(fused.scores[i] < fused.scores[j]);
                    }
                }
                if hi > lo {
                    prop_assert!((fused.scores[i] - (s[i] - lo) / (hi - lo)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn no_detections_means_zero_ap() {
        let gt = [GroundTruth {
            image: 0,
            bbox: BBox::new(0.0, 0.0, 4.0, 4.0).unwrap(),
            cls: 0,
        }];
        assert_eq!(detection_ap(&[], &gt, 0.5, 0).unwrap(), 0.0);
    }
}
