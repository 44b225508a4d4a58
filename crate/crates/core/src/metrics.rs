//! Segmentation metrics under validity masking: per-class IoU, mIoU,
//! pixelwise average precision, and the balanced static/dynamic IoU.
//!
//! Masks and score maps are flat `C x Z x W` buffers; validity is `Z x W`.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Binarisation threshold (strict `>`).
pub const OCCUPANCY_THRESHOLD: f64 = 0.5;

pub fn binarize(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&p| p > threshold).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ClassCounts {
    pub fn union(&self) -> u64 {
        self.tp + self.fp + self.fn_
    }

    pub fn iou(&self) -> Option<f64> {
        let u = self.union();
        (u > 0).then(|| self.tp as f64 / u as f64)
    }
}

fn check_layout(len: usize, validity: &[bool], classes: usize) -> Result<usize> {
    let plane = validity.len();
    if classes == 0 || plane == 0 || len != classes * plane {
        bail!(
            Shape,
            "buffer of {} values does not match {} classes x {} cells",
            len,
            classes,
            plane
        );
    }
    Ok(plane)
}

/// TP / FP / FN per class over valid cells.
pub fn class_counts(pred: &[bool], gt: &[bool], validity: &[bool], classes: usize) -> Result<Vec<ClassCounts>> {
    if pred.len() != gt.len() {
        bail!(Shape, "prediction has {} values, ground truth {}", pred.len(), gt.len());
    }
    let plane = check_layout(pred.len(), validity, classes)?;
    let mut counts = vec![ClassCounts::default(); classes];
    for (c, counts) in counts.iter_mut().enumerate() {
        let p = &pred[c * plane..(c + 1) * plane];
        let g = &gt[c * plane..(c + 1) * plane];
        for ((&pv, &gv), &ok) in p.iter().zip(g).zip(validity) {
            if !ok {
                continue;
            }
            match (pv, gv) {
                (true, true) => counts.tp += 1,
                (true, false) => counts.fp += 1,
                (false, true) => counts.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(counts)
}

/// IoU per class; `None` for classes with an empty valid union.
pub fn iou_per_class(pred: &[bool], gt: &[bool], validity: &[bool], classes: usize) -> Result<Vec<Option<f64>>> {
    Ok(class_counts(pred, gt, validity, classes)?
        .iter()
        .map(ClassCounts::iou)
        .collect())
}

/// Mean over the `Some` entries; `None` if there are none.
pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Area under the monotone-interpolated precision/recall curve obtained by
/// sweeping every distinct score. `None` without positives.
pub fn average_precision_from_pairs(pairs: &mut [(f64, bool)]) -> Option<f64> {
    let positives = pairs.iter().filter(|p| p.1).count();
    if positives == 0 {
        return None;
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let s = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == s {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp as f64 / positives as f64, tp as f64 / (tp + fp) as f64));
    }
    // precision envelope, right to left
    for k in (0..points.len().saturating_sub(1)).rev() {
        points[k].1 = points[k].1.max(points[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    Some(ap)
}

/// Per-class AP over valid cells and their mean.
pub fn average_precision(
    scores: &[f64],
    gt: &[bool],
    validity: &[bool],
    classes: usize,
) -> Result<(Vec<Option<f64>>, Option<f64>)> {
    if scores.len() != gt.len() {
        bail!(Shape, "scores have {} values, ground truth {}", scores.len(), gt.len());
    }
    let plane = check_layout(scores.len(), validity, classes)?;
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let mut pairs: Vec<(f64, bool)> = (0..plane)
                .filter(|&k| validity[k])
                .map(|k| (scores[c * plane + k], gt[c * plane + k]))
                .collect();
            average_precision_from_pairs(&mut pairs)
        })
        .collect();
    let map = mean_defined(&per_class);
    Ok((per_class, map))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalancedIou {
    pub iou_st: f64,
    pub iou_dy: f64,
    pub bamiou: f64,
}

fn group_sum(ious: &[Option<f64>], ids: &[usize], weights: &[f64]) -> f64 {
    let covered: f64 = ids
        .iter()
        .zip(weights)
        .filter(|(&i, _)| ious[i].is_some())
        .map(|(_, &w)| w)
        .sum();
    if covered == 0.0 {
        return 0.0;
    }
    ids.iter()
        .zip(weights)
        .filter_map(|(&i, &w)| ious[i].map(|v| w * v))
        .sum::<f64>()
        / covered
}

/// Balanced IoU: weighted static sum plus weighted dynamic sum, each group's
/// weights summing to one. `None` weights mean uniform. Classes without an
/// IoU hand their weight proportionally to the rest of their group.
pub fn bamiou(
    per_class_iou: &[Option<f64>],
    static_ids: &[usize],
    dynamic_ids: &[usize],
    group_weights: Option<(&[f64], &[f64])>,
) -> Result<BalancedIou> {
    let n = per_class_iou.len();
    let mut seen = vec![false; n];
    for &i in static_ids.iter().chain(dynamic_ids) {
        if i >= n || seen[i] {
            bail!(Config, "class id {} repeated or out of range", i);
        }
        seen[i] = true;
    }
    if seen.iter().any(|s| !s) {
        bail!(Config, "static and dynamic ids must partition the class set");
    }
    let uniform = |k: usize| vec![1.0 / k as f64; k];
    let (ws, wd) = match group_weights {
        Some((ws, wd)) => (ws.to_vec(), wd.to_vec()),
        None => (uniform(static_ids.len()), uniform(dynamic_ids.len())),
    };
    for (ids, w, name) in [(static_ids, &ws, "static"), (dynamic_ids, &wd, "dynamic")] {
        if w.len() != ids.len() {
            bail!(Shape, "{} weights for {} {} classes", w.len(), ids.len(), name);
        }
        if w.iter().any(|&v| v < 0.0) {
            bail!(Shape, "{} group weights must be non-negative", name);
        }
        if !ids.is_empty() && (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            bail!(Shape, "{} group weights must sum to 1", name);
        }
    }
    let iou_st = group_sum(per_class_iou, static_ids, &ws);
    let iou_dy = group_sum(per_class_iou, dynamic_ids, &wd);
    Ok(BalancedIou {
        iou_st,
        iou_dy,
        bamiou: iou_st + iou_dy,
    })
}

/// Serialised evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub per_class_ap: Vec<Option<f64>>,
    pub map: Option<f64>,
    pub iou_st: f64,
    pub iou_dy: f64,
    pub bamiou: f64,
    pub counts: Vec<ClassCounts>,
    pub evaluated_cells: u64,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Order-independent accumulation of metrics over many samples.
#[derive(Debug, Clone)]
pub struct MetricAccumulator {
    classes: usize,
    counts: Vec<ClassCounts>,
    pairs: Vec<Vec<(f64, bool)>>,
    evaluated_cells: u64,
}

impl MetricAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![ClassCounts::default(); classes],
            pairs: vec![Vec::new(); classes],
            evaluated_cells: 0,
        }
    }

    /// Adds one sample's scores (`C x Z x W`), labels and validity.
    pub fn add(&mut self, scores: &[f64], gt: &[bool], validity: &[bool]) -> Result<()> {
        let pred = binarize(scores, OCCUPANCY_THRESHOLD);
        let counts = class_counts(&pred, gt, validity, self.classes)?;
        let plane = validity.len();
        for (c, cc) in counts.iter().enumerate() {
            self.counts[c].tp += cc.tp;
            self.counts[c].fp += cc.fp;
            self.counts[c].fn_ += cc.fn_;
            for k in (0..plane).filter(|&k| validity[k]) {
                self.pairs[c].push((scores[c * plane + k], gt[c * plane + k]));
            }
        }
        self.evaluated_cells += validity.iter().filter(|&&v| v).count() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: MetricAccumulator) {
        for c in 0..self.classes {
            self.counts[c].tp += other.counts[c].tp;
            self.counts[c].fp += other.counts[c].fp;
            self.counts[c].fn_ += other.counts[c].fn_;
        }
        for (a, b) in self.pairs.iter_mut().zip(other.pairs) {
            a.extend(b);
        }
        self.evaluated_cells += other.evaluated_cells;
    }

    pub fn finish(mut self, static_ids: &[usize], dynamic_ids: &[usize]) -> Result<MetricReport> {
        let per_class_iou: Vec<Option<f64>> = self.counts.iter().map(ClassCounts::iou).collect();
        let per_class_ap: Vec<Option<f64>> = self
            .pairs
            .iter_mut()
            .map(|p| average_precision_from_pairs(p))
            .collect();
        let b = bamiou(&per_class_iou, static_ids, dynamic_ids, None)?;
        Ok(MetricReport {
            miou: mean_defined(&per_class_iou),
            map: mean_defined(&per_class_ap),
            per_class_iou,
            per_class_ap,
            iou_st: b.iou_st,
            iou_dy: b.iou_dy,
            bamiou: b.bamiou,
            counts: self.counts,
            evaluated_cells: self.evaluated_cells,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_is_strict() {
        assert_eq!(binarize(&[0.5, 0.75, 0.0, 0.5000001], 0.5), vec![false, true, false, true]);
    }

    #[test]
    fn iou_basic_cases() {
        let valid = vec![true; 64];
        let mut gt = vec![false; 64];
        for k in 0..16 {
            gt[k] = true;
        }
        assert_eq!(iou_per_class(&gt, &gt, &valid, 1).unwrap(), vec![Some(1.0)]);
        let disjoint: Vec<bool> = gt.iter().map(|g| !g).collect();
        assert_eq!(iou_per_class(&disjoint, &gt, &valid, 1).unwrap(), vec![Some(0.0)]);
        let mut half = vec![false; 64];
        for k in 0..8 {
            half[k] = true;
        }
        assert_eq!(iou_per_class(&half, &gt, &valid, 1).unwrap(), vec![Some(0.5)]);
        assert_eq!(iou_per_class(&[false; 64], &[false; 64], &valid, 1).unwrap(), vec![None]);
    }

    #[test]
    fn iou_shape_mismatch() {
        assert!(iou_per_class(&[true; 8], &[true; 7], &[true; 4], 2).is_err());
        assert!(iou_per_class(&[true; 8], &[true; 8], &[true; 3], 2).is_err());
    }

    #[test]
    fn ap_cases() {
        let gt = [true, false, false, true, false];
        let valid = [true; 5];
        let perfect: Vec<f64> = gt.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect();
        let (ap, _) = average_precision(&perfect, &gt, &valid, 1).unwrap();
        assert_eq!(ap[0], Some(1.0));
        let (ap, _) = average_precision(&[0.7; 5], &gt, &valid, 1).unwrap();
        assert!((ap[0].unwrap() - 0.4).abs() < 1e-12);
        let inverted: Vec<f64> = perfect.iter().map(|p| 1.0 - p).collect();
        let (ap, _) = average_precision(&inverted, &gt, &valid, 1).unwrap();
        assert!((ap[0].unwrap() - 0.4).abs() < 1e-12);
        let (ap, map) = average_precision(&[0.1; 5], &[false; 5], &valid, 1).unwrap();
        assert_eq!(ap[0], None);
        assert_eq!(map, None);
    }

    #[test]
    fn bamiou_cases() {
        let ious = [Some(0.6), Some(0.4), Some(0.2), Some(0.4)];
        let b = bamiou(&ious, &[0, 1], &[2, 3], None).unwrap();
        assert!((b.iou_st - 0.5).abs() < 1e-12);
        assert!((b.iou_dy - 0.3).abs() < 1e-12);
        assert!((b.bamiou - 0.8).abs() < 1e-12);
        let b = bamiou(&[Some(1.0); 4], &[0, 1], &[2, 3], None).unwrap();
        assert_eq!(b.bamiou, 2.0);
        let b = bamiou(&[Some(0.37), Some(0.9)], &[0], &[1], None).unwrap();
        assert_eq!(b.iou_st, 0.37);
    }

    #[test]
    fn bamiou_rejects_bad_weights_and_partitions() {
        let ious = [Some(0.6), Some(0.4), Some(0.2)];
        assert!(bamiou(&ious, &[0], &[1, 2], Some((&[1.0], &[0.7, 0.7]))).is_err());
        assert!(bamiou(&ious, &[0], &[1], None).is_err());
        assert!(bamiou(&ious, &[0, 1], &[1, 2], None).is_err());
        assert!(bamiou(&ious, &[0], &[1, 2], Some((&[1.0], &[0.25, 0.75]))).is_ok());
    }
}
