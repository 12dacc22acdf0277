//! COCO-style average precision.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::anchors::{iou, GroundTruth};
use crate::error::{Error, Result};
use crate::inference::Detection;

/// IoU thresholds 0.50, 0.55, ..., 0.95, written out so that boundary
/// values such as 0.65 are exact.
pub const COCO_IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// Recall levels at which precision is sampled.
pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct APResult {
    /// Mean over IoU 0.50:0.05:0.95.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// AP over the COCO IoU thresholds. `detections[s]` and `ground_truth[s]`
/// belong to scene `s`. Classes without ground truth are left out of the
/// mean; an error is returned if no class has any.
pub fn evaluate_ap(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GroundTruth>],
    num_classes: usize,
) -> Result<APResult> {
    let per_threshold = evaluate_ap_at(detections, ground_truth, num_classes, &COCO_IOU_THRESHOLDS)?;
    Ok(APResult {
        ap: per_threshold.iter().sum::<f64>() / per_threshold.len() as f64,
        ap50: per_threshold[0],
        ap75: per_threshold[5],
    })
}

/// Class-averaged AP at each of `thresholds`.
pub fn evaluate_ap_at(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GroundTruth>],
    num_classes: usize,
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    if detections.len() != ground_truth.len() {
        return Err(Error::Contract(alloc::format!(
            "{} detection lists for {} scenes",
            detections.len(),
            ground_truth.len()
        )));
    }
    let classes: Vec<usize> = (1..=num_classes)
        .filter(|&c| ground_truth.iter().flatten().any(|g| g.class == c))
        .collect();
    if classes.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    Ok(thresholds
        .iter()
        .map(|&thr| {
            classes
                .iter()
                .map(|&c| class_ap(detections, ground_truth, c, thr))
                .sum::<f64>()
                / classes.len() as f64
        })
        .collect())
}

/// True/false positive flags of class `class` detections in global score
/// order, and the number of ground-truth objects of that class.
pub fn match_detections(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GroundTruth>],
    class: usize,
    iou_threshold: f64,
) -> (Vec<bool>, usize) {
    let mut order: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(s, dets)| dets.iter().filter(|d| d.class == class).map(move |d| (s, d)))
        .collect();
    // stable: equal scores keep scene order, then per-scene order
    order.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap_or(Ordering::Equal));

    let mut taken: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let n_gt = ground_truth.iter().flatten().filter(|g| g.class == class).count();
    let flags = order
        .iter()
        .map(|(s, d)| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in ground_truth[*s].iter().enumerate() {
                if gt.class != class || taken[*s][g] {
                    continue;
                }
                let v = iou(&d.bbox, &gt.bbox);
                if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[*s][g] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (flags, n_gt)
}

fn class_ap(detections: &[Vec<Detection>], ground_truth: &[Vec<GroundTruth>], class: usize, thr: f64) -> f64 {
    let (flags, n_gt) = match_detections(detections, ground_truth, class, thr);
    interpolated_ap(&flags, n_gt)
}

/// 101-point interpolated AP from score-ordered TP flags.
pub fn interpolated_ap(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 || flags.is_empty() {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (i, &hit) in flags.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len() - 1).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&v| v < level);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}
