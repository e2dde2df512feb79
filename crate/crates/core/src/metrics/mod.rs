//! Detection evaluation: greedy IoU matching, all-point interpolated AP,
//! mAP over IoU ranges, precision/recall/FAR, group AP, quantization
//! degradation and throughput.

mod report;

pub use report::{degradation, degradation_of, pct_change, Degradation, EvalReport, PrecisionLevel};

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detector::{Annotation, BBox, Detection};
use crate::error::{Error, Result};

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn iou_range() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Outcome of matching one image's detections against its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Matched ground-truth index per detection; `None` is a false positive.
    pub detections: Vec<Option<usize>>,
    pub gt_matched: Vec<bool>,
    pub iou_threshold: f64,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.detections.iter().filter(|m| m.is_some()).count()
    }

    pub fn false_positives(&self) -> usize {
        self.detections.len() - self.true_positives()
    }
}

/// Greedy matching in the given (confidence-descending) order: each detection
/// takes the unmatched same-class ground truth of highest IoU, if that IoU
/// reaches the threshold. IoU ties go to the lower ground-truth index.
pub fn match_detections(dets: &[Detection], gts: &[Annotation], iou_threshold: f64) -> Result<MatchResult> {
    if dets.windows(2).any(|w| w[0].confidence < w[1].confidence) {
        return Err(Error::Contract("detections must be sorted by confidence, descending".into()));
    }
    Ok(match_sorted(dets.iter(), gts, iou_threshold))
}

fn match_sorted<'a>(dets: impl Iterator<Item = &'a Detection>, gts: &[Annotation], iou_threshold: f64) -> MatchResult {
    let mut gt_matched = vec![false; gts.len()];
    let detections = dets
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if gt_matched[j] || g.class_id != d.class_id {
                    continue;
                }
                let v = d.bbox.iou(&g.bbox);
                if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            best.map(|(j, _)| {
                gt_matched[j] = true;
                j
            })
        })
        .collect();
    MatchResult {
        detections,
        gt_matched,
        iou_threshold,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    /// Always `1 − precision`.
    pub far: f64,
}

/// Precision 1 without detections, recall 1 without ground truth.
pub fn precision_recall_counts(tp: usize, fp: usize, total_gts: usize) -> Result<PrecisionRecall> {
    if tp > total_gts {
        return Err(Error::Contract(format!("{tp} true positives for {total_gts} ground truths")));
    }
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if total_gts == 0 { 1.0 } else { tp as f64 / total_gts as f64 };
    Ok(PrecisionRecall {
        precision,
        recall,
        far: 1.0 - precision,
    })
}

pub fn precision_recall(matches: &MatchResult, total_gts: usize) -> Result<PrecisionRecall> {
    precision_recall_counts(matches.true_positives(), matches.false_positives(), total_gts)
}

/// Detections and ground truth of one image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<Annotation>,
}

/// Per-detection TP flags and confidences over all images, in global
/// confidence order (stable in image, then detection order).
fn ranked_matches(images: &[ImageEval], classes: &dyn Fn(usize) -> bool, iou_threshold: f64) -> (Vec<(f32, bool)>, usize) {
    let mut ranked = Vec::new();
    let mut total = 0;
    for img in images {
        let gts: Vec<Annotation> = img.ground_truth.iter().filter(|g| classes(g.class_id)).copied().collect();
        total += gts.len();
        let mut dets: Vec<&Detection> = img.detections.iter().filter(|d| classes(d.class_id)).collect();
        dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let m = match_sorted(dets.iter().copied(), &gts, iou_threshold);
        ranked.extend(dets.iter().zip(&m.detections).map(|(d, t)| (d.confidence, t.is_some())));
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    (ranked, total)
}

/// All-point interpolated AP from confidence-ranked TP flags. Detections of
/// equal confidence enter the curve together. `None` without ground truth.
pub fn ap_from_ranked(ranked: &[(f32, bool)], total_gts: usize) -> Option<f64> {
    if total_gts == 0 {
        return None;
    }
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < ranked.len() {
        let c = ranked[i].0;
        while i < ranked.len() && ranked[i].0 == c {
            if ranked[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp as f64 / total_gts as f64, tp as f64 / (tp + fp) as f64));
    }
    // monotone envelope: max precision at any recall at or beyond point k
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    for k in (0..points.len()).rev() {
        envelope = envelope.max(points[k].1);
        let lower = if k == 0 { 0.0 } else { points[k - 1].0 };
        ap += (points[k].0 - lower) * envelope;
    }
    Some(ap)
}

/// AP over `images` for the classes accepted by `classes`; a detection only
/// matches ground truth of its own class.
pub fn average_precision_for(images: &[ImageEval], classes: &dyn Fn(usize) -> bool, iou_threshold: f64) -> Option<f64> {
    let (ranked, total) = ranked_matches(images, classes, iou_threshold);
    ap_from_ranked(&ranked, total)
}

pub fn average_precision(images: &[ImageEval], class_id: usize, iou_threshold: f64) -> Option<f64> {
    average_precision_for(images, &|c| c == class_id, iou_threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub map50: f64,
    pub map50_95: f64,
    /// AP50 per class id; `None` for classes without ground truth.
    pub per_class_ap50: Vec<Option<f64>>,
}

/// Mean AP at IoU 0.5 and over 0.50:0.95, averaged over classes that have
/// ground truth.
pub fn map_range(images: &[ImageEval], num_classes: usize) -> Result<MapSummary> {
    let mut per_class_ap50 = Vec::with_capacity(num_classes);
    let mut ranged = Vec::new();
    for c in 0..num_classes {
        let ap50 = average_precision(images, c, 0.5);
        if ap50.is_some() {
            let sum: f64 = iou_range()
                .iter()
                .map(|&t| average_precision(images, c, t).expect("class has ground truth"))
                .sum();
            ranged.push(sum / 10.0);
        }
        per_class_ap50.push(ap50);
    }
    let present: Vec<f64> = per_class_ap50.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Evaluation("no class has ground truth".into()));
    }
    Ok(MapSummary {
        map50: present.iter().sum::<f64>() / present.len() as f64,
        map50_95: ranged.iter().sum::<f64>() / ranged.len() as f64,
        per_class_ap50,
    })
}

/// Precision/recall of all detections with confidence ≥ `threshold`, matched
/// at `iou_threshold` across every class.
pub fn precision_recall_at(images: &[ImageEval], threshold: f64, iou_threshold: f64) -> PrecisionRecall {
    let (ranked, total) = ranked_matches(images, &|_| true, iou_threshold);
    let (mut tp, mut fp) = (0, 0);
    for &(c, t) in &ranked {
        if (c as f64) < threshold {
            break;
        }
        if t {
            tp += 1;
        } else {
            fp += 1;
        }
    }
    precision_recall_counts(tp, fp, total).expect("greedy matching never exceeds ground truth")
}

/// Outcome of searching a confidence threshold whose recall matches a target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallMatch {
    pub target_recall: f64,
    pub reachable: bool,
    pub threshold: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Confidence threshold whose recall is within `tolerance` of
/// `target_recall`. The `start` threshold (typically the reference's
/// operating point) is tried first; otherwise a binary search over the
/// distinct confidence levels finds the highest threshold whose recall
/// reaches `target − tolerance`. Recall is non-increasing in the threshold,
/// which is checked along the way.
pub fn match_recall(
    images: &[ImageEval],
    target_recall: f64,
    tolerance: f64,
    iou_threshold: f64,
    start: Option<f64>,
) -> Result<RecallMatch> {
    let (ranked, total) = ranked_matches(images, &|_| true, iou_threshold);
    // cumulative counts at the end of each confidence level
    let mut levels: Vec<(f64, PrecisionRecall)> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < ranked.len() {
        let c = ranked[i].0;
        while i < ranked.len() && ranked[i].0 == c {
            if ranked[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        levels.push((c as f64, precision_recall_counts(tp, fp, total)?));
    }
    if levels.windows(2).any(|w| w[1].1.recall < w[0].1.recall) {
        return Err(Error::Evaluation("recall is not monotone in the threshold".into()));
    }
    let unreachable = RecallMatch {
        target_recall,
        reachable: false,
        threshold: None,
        precision: None,
        recall: None,
    };
    if let Some(t) = start {
        let pr = precision_recall_at(images, t, iou_threshold);
        if (pr.recall - target_recall).abs() <= tolerance {
            return Ok(RecallMatch {
                target_recall,
                reachable: true,
                threshold: Some(t),
                precision: Some(pr.precision),
                recall: Some(pr.recall),
            });
        }
    }
    let goal = target_recall - tolerance;
    if levels.last().is_none_or(|l| l.1.recall < goal) {
        return Ok(unreachable);
    }
    let (mut lo, mut hi) = (0usize, levels.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if levels[mid].1.recall >= goal {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let (thr, pr) = levels[lo];
    if (pr.recall - target_recall).abs() > tolerance {
        return Ok(RecallMatch {
            recall: Some(pr.recall),
            ..unreachable
        });
    }
    Ok(RecallMatch {
        target_recall,
        reachable: true,
        threshold: Some(thr),
        precision: Some(pr.precision),
        recall: Some(pr.recall),
    })
}

/// Named, possibly overlapping sets of class ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMapping {
    pub groups: Vec<(String, Vec<usize>)>,
}

impl GroupMapping {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for (name, members) in &self.groups {
            if members.is_empty() {
                return Err(Error::Config(format!("group `{name}` has no classes")));
            }
            if let Some(c) = members.iter().find(|&&c| c >= num_classes) {
                return Err(Error::Config(format!("group `{name}` names unknown class {c}")));
            }
        }
        Ok(())
    }
}

/// Group AP50 as the mean of member-class AP50s (classes without ground
/// truth are skipped; `None` when no member has any).
pub fn group_map(per_class_ap50: &[Option<f64>], mapping: &GroupMapping) -> Result<BTreeMap<String, Option<f64>>> {
    mapping.validate(per_class_ap50.len())?;
    Ok(mapping
        .groups
        .iter()
        .map(|(name, members)| {
            let aps: Vec<f64> = members.iter().filter_map(|&c| per_class_ap50[c]).collect();
            let v = (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64);
            (name.clone(), v)
        })
        .collect())
}

/// Group AP50 by pooling member-class detections into one ranking.
pub fn group_map_pooled(images: &[ImageEval], mapping: &GroupMapping, num_classes: usize) -> Result<BTreeMap<String, Option<f64>>> {
    mapping.validate(num_classes)?;
    Ok(mapping
        .groups
        .iter()
        .map(|(name, members)| (name.clone(), average_precision_for(images, &|c| members.contains(&c), 0.5)))
        .collect())
}

/// Mean over groups that have a value.
pub fn mean_defined<'a>(values: impl IntoIterator<Item = &'a Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Frames per second of `infer` over `iterations` timed calls after
/// `warmup` untimed ones.
pub fn throughput(mut infer: impl FnMut() -> Result<()>, warmup: usize, iterations: usize) -> Result<f64> {
    if iterations == 0 {
        return Err(Error::Parameter("iterations must be at least 1".into()));
    }
    for _ in 0..warmup {
        infer()?;
    }
    let start = Instant::now();
    for _ in 0..iterations {
        infer()?;
    }
    let secs = start.elapsed().as_secs_f64().max(1e-12);
    Ok(iterations as f64 / secs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(x: f32, y: f32, s: f32, class_id: usize, confidence: f32) -> Detection {
        Detection {
            bbox: BBox::new(x, y, x + s, y + s),
            class_id,
            confidence,
        }
    }

    fn gt(x: f32, y: f32, s: f32, class_id: usize) -> Annotation {
        Annotation {
            bbox: BBox::new(x, y, x + s, y + s),
            class_id,
        }
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(2.0, 2.0, 3.0, 3.0)), 0.0);
        assert!((iou(&a, &BBox::new(0.5, 0.0, 1.5, 1.0)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &BBox::new(0.0, 0.0, 0.0, 1.0)), 0.0);
    }

    #[test]
    fn matching_examples() {
        let g = [gt(0.0, 0.0, 10.0, 0)];
        let m = match_detections(&[det(0.0, 0.0, 10.0, 0, 0.9)], &g, 0.5).unwrap();
        assert_eq!((m.true_positives(), m.false_positives()), (1, 0));
        let m = match_detections(&[det(0.0, 0.0, 10.0, 0, 0.9), det(0.0, 0.0, 10.0, 0, 0.8)], &g, 0.5).unwrap();
        assert_eq!(m.detections, vec![Some(0), None]);
        assert!(match_detections(&[det(0.0, 0.0, 1.0, 0, 0.1), det(0.0, 0.0, 1.0, 0, 0.2)], &g, 0.5).is_err());
    }

    /// Independent greedy reference: repeatedly scans the full IoU table.
    fn greedy_oracle(dets: &[Detection], gts: &[Annotation], thr: f64) -> Vec<Option<usize>> {
        let table: Vec<Vec<f64>> = dets
            .iter()
            .map(|d| {
                gts.iter()
                    .map(|g| if g.class_id == d.class_id { d.bbox.iou(&g.bbox) } else { -1.0 })
                    .collect()
            })
            .collect();
        let mut taken = vec![false; gts.len()];
        let mut out = vec![None; dets.len()];
        for (i, row) in table.iter().enumerate() {
            let mut cand: Vec<usize> = (0..gts.len()).filter(|&j| !taken[j] && row[j] >= thr).collect();
            cand.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            if let Some(&j) = cand.first() {
                taken[j] = true;
                out[i] = Some(j);
            }
        }
        out
    }

    fn random_case(rng: &mut ChaCha8Rng, max_dets: usize, max_gts: usize) -> (Vec<Detection>, Vec<Annotation>) {
        let n_d = rng.random_range(0..=max_dets);
        let n_g = rng.random_range(0..=max_gts);
        let mut dets: Vec<Detection> = (0..n_d)
            .map(|_| {
                let conf = [0.9f32, 0.7, 0.5, 0.3][rng.random_range(0..4)];
                det(rng.random_range(0.0..6.0), rng.random_range(0.0..6.0), rng.random_range(3.0..6.0), rng.random_range(0..2), conf)
            })
            .collect();
        dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let gts = (0..n_g)
            .map(|_| gt(rng.random_range(0.0..6.0), rng.random_range(0.0..6.0), rng.random_range(3.0..6.0), rng.random_range(0..2)))
            .collect();
        (dets, gts)
    }

    #[test]
    fn matching_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let (dets, gts) = random_case(&mut rng, 5, 5);
            let m = match_detections(&dets, &gts, 0.5).unwrap();
            assert_eq!(m.detections, greedy_oracle(&dets, &gts, 0.5));
            let mut used: Vec<usize> = m.detections.iter().flatten().copied().collect();
            let n = used.len();
            used.dedup();
            used.sort();
            used.dedup();
            assert_eq!(used.len(), n);
            assert!(m.true_positives() <= dets.len().min(gts.len()));
        }
    }

    #[test]
    fn precision_recall_examples() {
        let pr = precision_recall_counts(3, 1, 5).unwrap();
        assert_eq!((pr.precision, pr.recall, pr.far), (0.75, 0.6, 0.25));
        let pr = precision_recall_counts(0, 0, 0).unwrap();
        assert_eq!((pr.precision, pr.recall, pr.far), (1.0, 1.0, 0.0));
        let far: f64 = 1.0 - 0.748;
        assert!((far - 0.252).abs() < 1e-12);
        assert!(precision_recall_counts(3, 0, 2).is_err());
    }

    fn one_image(dets: Vec<Detection>, gts: Vec<Annotation>) -> Vec<ImageEval> {
        vec![ImageEval {
            detections: dets,
            ground_truth: gts,
        }]
    }

    #[test]
    fn ap_examples() {
        let g = gt(0.0, 0.0, 10.0, 0);
        let imgs = one_image(vec![det(0.0, 0.0, 10.0, 0, 0.9)], vec![g]);
        assert_eq!(average_precision(&imgs, 0, 0.5), Some(1.0));
        let g2 = gt(20.0, 20.0, 10.0, 0);
        let imgs = one_image(
            vec![
                det(0.0, 0.0, 10.0, 0, 0.9),
                det(40.0, 40.0, 10.0, 0, 0.8),
                det(20.0, 20.0, 10.0, 0, 0.7),
            ],
            vec![g, g2],
        );
        let ap = average_precision(&imgs, 0, 0.5).unwrap();
        assert!((ap - (0.5 + 2.0 / 3.0 * 0.5)).abs() < 1e-12, "{ap}");
        assert_eq!(average_precision(&imgs, 1, 0.5), None);
    }

    /// Brute force: evaluate precision/recall at every candidate threshold,
    /// then integrate `r ↦ max{P(t) : R(t) ≥ r}` over the recall breakpoints.
    fn sweep_oracle(images: &[ImageEval], class_id: usize, thr: f64) -> Option<f64> {
        let total: usize = images.iter().map(|i| i.ground_truth.iter().filter(|g| g.class_id == class_id).count()).sum();
        if total == 0 {
            return None;
        }
        let mut thresholds: Vec<f32> = images
            .iter()
            .flat_map(|i| i.detections.iter().filter(|d| d.class_id == class_id).map(|d| d.confidence))
            .collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut pts = vec![];
        for &t in &thresholds {
            let (mut tp, mut n) = (0, 0);
            for img in images {
                let mut dets: Vec<Detection> = img.detections.iter().filter(|d| d.class_id == class_id && d.confidence >= t).copied().collect();
                dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
                let gts: Vec<Annotation> = img.ground_truth.iter().filter(|g| g.class_id == class_id).copied().collect();
                let m = greedy_oracle(&dets, &gts, thr);
                tp += m.iter().filter(|x| x.is_some()).count();
                n += dets.len();
            }
            pts.push((tp as f64 / total as f64, tp as f64 / n as f64));
        }
        let mut recalls: Vec<f64> = pts.iter().map(|p| p.0).collect();
        recalls.push(0.0);
        recalls.sort_by(|a, b| a.partial_cmp(b).unwrap());
        recalls.dedup();
        let mut ap = 0.0;
        for w in recalls.windows(2) {
            let best = pts.iter().filter(|p| p.0 >= w[1]).map(|p| p.1).fold(0.0, f64::max);
            ap += (w[1] - w[0]) * best;
        }
        Some(ap)
    }

    #[test]
    fn ap_matches_sweep_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let images: Vec<ImageEval> = (0..rng.random_range(1..3))
                .map(|_| {
                    let (d, g) = random_case(&mut rng, 3, 3);
                    ImageEval { detections: d, ground_truth: g }
                })
                .collect();
            for c in 0..2 {
                let a = average_precision(&images, c, 0.5);
                let b = sweep_oracle(&images, c, 0.5);
                match (a, b) {
                    (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "{a} vs {b}"),
                    (a, b) => assert_eq!(a, b),
                }
            }
        }
    }

    #[test]
    fn map_examples() {
        let imgs = one_image(
            vec![det(0.0, 0.0, 10.0, 0, 0.9), det(20.0, 20.0, 5.0, 1, 0.8)],
            vec![gt(0.0, 0.0, 10.0, 0), gt(20.0, 20.0, 5.0, 1)],
        );
        let s = map_range(&imgs, 3).unwrap();
        assert_eq!((s.map50, s.map50_95), (1.0, 1.0));
        assert_eq!(s.per_class_ap50, vec![Some(1.0), Some(1.0), None]);
        let imgs = one_image(vec![det(40.0, 40.0, 10.0, 0, 0.9)], vec![gt(0.0, 0.0, 10.0, 0)]);
        let s = map_range(&imgs, 1).unwrap();
        assert_eq!((s.map50, s.map50_95), (0.0, 0.0));
        assert!(map_range(&one_image(vec![], vec![]), 2).is_err());
    }

    #[test]
    fn ranged_map_never_exceeds_map50() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let images: Vec<ImageEval> = (0..3)
                .map(|_| {
                    let (d, g) = random_case(&mut rng, 6, 4);
                    ImageEval { detections: d, ground_truth: g }
                })
                .collect();
            if let Ok(s) = map_range(&images, 2) {
                assert!(s.map50_95 <= s.map50 + 1e-12);
            }
        }
    }

    #[test]
    fn group_examples() {
        let per = [Some(0.9), Some(0.4), Some(0.6), None];
        let m = GroupMapping {
            groups: vec![
                ("a".into(), vec![0]),
                ("b".into(), vec![1, 2]),
                ("c".into(), vec![3]),
                ("d".into(), vec![2, 3]),
            ],
        };
        let g = group_map(&per, &m).unwrap();
        assert_eq!(g["a"], Some(0.9));
        assert_eq!(g["b"], Some(0.5));
        assert_eq!(g["c"], None);
        assert_eq!(g["d"], Some(0.6));
        assert_eq!(mean_defined(g.values()), Some((0.9 + 0.5 + 0.6) / 3.0));
        let empty = GroupMapping { groups: vec![("e".into(), vec![])] };
        assert!(matches!(group_map(&per, &empty), Err(Error::Config(_))));
    }

    #[test]
    fn recall_search() {
        let imgs = one_image(
            vec![det(0.0, 0.0, 10.0, 0, 0.9), det(40.0, 40.0, 10.0, 0, 0.8), det(20.0, 20.0, 10.0, 0, 0.7)],
            vec![gt(0.0, 0.0, 10.0, 0), gt(20.0, 20.0, 10.0, 0)],
        );
        let m = match_recall(&imgs, 0.5, 0.02, 0.5, None).unwrap();
        assert!(m.reachable);
        assert_eq!((m.threshold, m.precision), (Some(0.9f32 as f64), Some(1.0)));
        // the start threshold wins when its recall is already in tolerance
        let m = match_recall(&imgs, 0.5, 0.02, 0.5, Some(0.8)).unwrap();
        assert_eq!((m.threshold, m.precision), (Some(0.8), Some(0.5)));
        let m = match_recall(&imgs, 1.0, 0.02, 0.5, None).unwrap();
        assert_eq!(m.precision, Some(2.0 / 3.0));
        let few = one_image(vec![det(0.0, 0.0, 10.0, 0, 0.9)], vec![gt(0.0, 0.0, 10.0, 0), gt(20.0, 20.0, 10.0, 0)]);
        assert!(!match_recall(&few, 0.9, 0.02, 0.5, None).unwrap().reachable);
    }

    #[test]
    fn throughput_counts_iterations() {
        let mut n = 0;
        let fps = throughput(
            || {
                n += 1;
                Ok(())
            },
            5,
            20,
        )
        .unwrap();
        assert_eq!(n, 25);
        assert!(fps > 0.0);
        assert!(throughput(|| Ok(()), 0, 0).is_err());
    }
}
