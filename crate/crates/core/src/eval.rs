//! COCO-style single-class detection metrics.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::image::BBox;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Descending confidence; equal confidences fall back to ascending x, then y.
pub fn confidence_order(a: &BBox, b: &BBox) -> Ordering {
    let (sa, sb) = (a.score.unwrap_or(0.0), b.score.unwrap_or(0.0));
    sb.total_cmp(&sa)
        .then(a.x.total_cmp(&b.x))
        .then(a.y.total_cmp(&b.y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// `(confidence, is_true_positive)` in processing order.
    pub flags: Vec<(f64, bool)>,
    pub unmatched_gt: usize,
}

/// Greedy matching: each prediction, in confidence order, claims the
/// unmatched ground truth with the highest IoU at or above `iou_thresh`.
pub fn match_detections(preds: &[BBox], gts: &[BBox], iou_thresh: f64) -> Matching {
    let mut order: Vec<&BBox> = preds.iter().collect();
    order.sort_by(|a, b| confidence_order(a, b));
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(order.len());
    for p in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let v = iou(p, g);
            if v >= iou_thresh && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
        }
        flags.push((p.score.unwrap_or(0.0), best.is_some()));
    }
    Matching {
        flags,
        unmatched_gt: taken.iter().filter(|&&t| !t).count(),
    }
}

/// A precision-recall point after each ranked detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

pub fn pr_curve(flags: &[bool], total_gt: usize) -> Vec<PrPoint> {
    let mut tp = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(i, &hit)| {
            tp += usize::from(hit);
            PrPoint {
                recall: if total_gt == 0 { 0.0 } else { tp as f64 / total_gt as f64 },
                precision: tp as f64 / (i + 1) as f64,
            }
        })
        .collect()
}

/// 101-point interpolated AP over flags already sorted by confidence.
pub fn average_precision(flags: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return if flags.is_empty() { 1.0 } else { 0.0 };
    }
    let curve = pr_curve(flags, total_gt);
    // precision envelope: max precision at any later (higher-recall) point
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        while k < curve.len() && curve[k].recall < r {
            k += 1;
        }
        if k < curve.len() {
            sum += envelope[k];
        }
    }
    sum / 101.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub map50: f64,
    pub map75: f64,
    pub map5095: f64,
    /// `(threshold, AP)` for each COCO threshold.
    pub per_threshold: Vec<(f64, f64)>,
    /// Precision-recall curve at IoU 0.50.
    pub pr50: Vec<PrPoint>,
}

/// mAP@50, mAP@75 and mAP@50:95 over a set of images keyed by id.
pub fn map_suite(
    preds: &BTreeMap<String, Vec<BBox>>,
    gts: &BTreeMap<String, Vec<BBox>>,
) -> Result<EvalResult> {
    if preds.len() != gts.len() || preds.keys().zip(gts.keys()).any(|(a, b)| a != b) {
        return Err(Error::Input("prediction and ground-truth image ids differ".into()));
    }
    let total_gt: usize = gts.values().map(Vec::len).sum();
    let mut per_threshold = Vec::with_capacity(10);
    let mut pr50 = Vec::new();
    for (ti, thr) in coco_thresholds().into_iter().enumerate() {
        let mut ranked: Vec<(f64, &str, usize, bool)> = Vec::new();
        for (id, p) in preds {
            let m = match_detections(p, &gts[id], thr);
            for (rank, (conf, hit)) in m.flags.into_iter().enumerate() {
                ranked.push((conf, id.as_str(), rank, hit));
            }
        }
        // global order: confidence, then image id, then within-image rank
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
        let flags: Vec<bool> = ranked.iter().map(|r| r.3).collect();
        if ti == 0 {
            pr50 = pr_curve(&flags, total_gt);
        }
        per_threshold.push((thr, average_precision(&flags, total_gt)));
    }
    let map5095 = per_threshold.iter().map(|p| p.1).sum::<f64>() / per_threshold.len() as f64;
    Ok(EvalResult {
        map50: per_threshold[0].1,
        map75: per_threshold[5].1,
        map5095,
        per_threshold,
        pr50,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h)
    }

    #[test]
    fn iou_cases() {
        assert_eq!(iou(&b(1.0, 1.0, 3.0, 3.0), &b(1.0, 1.0, 3.0, 3.0)), 1.0);
        assert_eq!(iou(&b(0.0, 0.0, 1.0, 1.0), &b(5.0, 5.0, 1.0, 1.0)), 0.0);
        assert!((iou(&b(0.0, 0.0, 2.0, 2.0), &b(1.0, 0.0, 2.0, 2.0)) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&b(0.0, 0.0, 0.0, 0.0), &b(0.0, 0.0, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn matching_cases() {
        let gt = [b(0.0, 0.0, 4.0, 4.0)];
        let none = match_detections(&[], &gt, 0.5);
        assert!(none.flags.is_empty());
        assert_eq!(none.unmatched_gt, 1);
        let one = match_detections(&[gt[0].with_score(0.7)], &gt, 0.5);
        assert_eq!(one.flags, vec![(0.7, true)]);
        let two = match_detections(&[b(0.0, 0.0, 4.0, 3.8).with_score(0.8), gt[0].with_score(0.9)], &gt, 0.5);
        assert_eq!(two.flags, vec![(0.9, true), (0.8, false)]);
    }

    #[test]
    fn ap_hand_traces() {
        assert_eq!(average_precision(&[true, true], 2), 1.0);
        let ap = average_precision(&[true, false, true], 2);
        assert!((ap - (51.0 + 50.0 * 2.0 / 3.0) / 101.0).abs() < 1e-12);
        assert!((ap - 0.8350).abs() < 1e-4);
        assert_eq!(average_precision(&[false], 1), 0.0);
        assert_eq!(average_precision(&[], 0), 1.0);
        assert_eq!(average_precision(&[false], 0), 0.0);
    }

    fn map(entries: Vec<(&str, Vec<BBox>)>) -> BTreeMap<String, Vec<BBox>> {
        entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gts = map(vec![("a", vec![b(0.0, 0.0, 5.0, 5.0), b(10.0, 10.0, 4.0, 4.0)]), ("b", vec![b(3.0, 3.0, 6.0, 6.0)])]);
        let perfect: BTreeMap<_, _> = gts
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|x| x.with_score(0.9)).collect()))
            .collect();
        let r = map_suite(&perfect, &gts).unwrap();
        assert_eq!((r.map50, r.map75, r.map5095), (1.0, 1.0, 1.0));
        let empty = map(vec![("a", vec![]), ("b", vec![])]);
        let r = map_suite(&empty, &gts).unwrap();
        assert_eq!((r.map50, r.map75, r.map5095), (0.0, 0.0, 0.0));
        assert!(map_suite(&map(vec![("a", vec![])]), &gts).is_err());
    }

    proptest::proptest! {
        #[test]
        fn trailing_false_positive_never_raises_ap(flags in proptest::collection::vec(proptest::bool::ANY, 0..30), extra in 0usize..5) {
            let gt = flags.iter().filter(|&&f| f).count() + extra;
            let mut longer = flags.clone();
            longer.push(false);
            proptest::prop_assert!(average_precision(&longer, gt) <= average_precision(&flags, gt) + 1e-15);
        }

        #[test]
        fn promoting_a_false_positive_never_lowers_ap(flags in proptest::collection::vec(proptest::bool::ANY, 1..30), pick in 0usize..30, extra in 1usize..5) {
            let i = pick % flags.len();
            let gt = flags.iter().filter(|&&f| f).count() + extra;
            let mut better = flags.clone();
            better[i] = true;
            proptest::prop_assert!(average_precision(&better, gt) + 1e-15 >= average_precision(&flags, gt));
        }
    }
}
