//! Score combination, per-class NMS and the detection pipeline.

use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::anchors::{decode_box, iou, BBox};
use crate::error::{Error, Result};
use crate::math;
use crate::model::{refine_objectness_infer, Detector, HeadOutputs};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Class id in `1..=K`.
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
    /// Anchor the detection was decoded from.
    pub anchor: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectOptions {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self {
            score_threshold: 0.001,
            nms_threshold: 0.45,
            max_detections: 100,
        }
    }
}

/// `p_k * o` per anchor and class; `p_k` unchanged when there is no
/// objectness. `class_probs` holds `A * K` values, `objectness` `A`.
pub fn combine_scores(class_probs: &[f64], objectness: Option<&[f64]>, k: usize) -> Vec<f64> {
    match objectness {
        None => class_probs.to_vec(),
        Some(obj) => class_probs
            .chunks_exact(k)
            .zip(obj)
            .flat_map(|(row, &o)| row.iter().map(move |&p| p * o))
            .collect(),
    }
}

/// Descending score, then ascending anchor, then ascending class.
fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.anchor.cmp(&b.anchor))
        .then(a.class.cmp(&b.class))
}

/// Greedy per-class NMS: a detection survives unless a higher-ranked kept
/// detection of its class overlaps it with IoU above `iou_threshold`.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<Detection> = detections.to_vec();
    order.sort_by(rank);
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        let suppressed = kept
            .iter()
            .any(|k| k.class == d.class && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Scores and decoded boxes for every anchor of one scene, reusable across
/// thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredAnchors {
    pub num_classes: usize,
    /// `A * K` combined scores.
    pub scores: Vec<f64>,
    /// Decoded boxes clipped to the scene; `None` when clipping leaves no area.
    pub boxes: Vec<Option<BBox>>,
}

impl ScoredAnchors {
    pub fn from_heads(
        heads: &HeadOutputs,
        anchors: &[BBox],
        num_classes: usize,
        use_objectness: bool,
        bounds: (f64, f64),
    ) -> Result<Self> {
        let a = anchors.len();
        if heads.class_logits.len() != a * num_classes || heads.box_deltas.len() != a * 4 {
            return Err(Error::Contract(alloc::format!(
                "head outputs do not match {a} anchors with {num_classes} classes"
            )));
        }
        let class_probs: Vec<f64> = heads.class_logits.data().iter().map(|&z| math::sigmoid(z)).collect();
        let obj = if use_objectness {
            let o = refine_objectness_infer(&heads.obj_logits, &heads.residual_logits)?;
            Some(o.data().iter().map(|&z| math::sigmoid(z)).collect::<Vec<_>>())
        } else {
            None
        };
        let scores = combine_scores(&class_probs, obj.as_deref(), num_classes);
        let boxes = anchors
            .iter()
            .zip(heads.box_deltas.data().chunks_exact(4))
            .map(|(anchor, d)| {
                let b = decode_box(anchor, &[d[0], d[1], d[2], d[3]]).clipped(bounds.0, bounds.1);
                b.is_valid().then_some(b)
            })
            .collect();
        Ok(Self {
            num_classes,
            scores,
            boxes,
        })
    }

    /// Threshold, NMS and cap.
    pub fn detections(&self, opts: &DetectOptions) -> Vec<Detection> {
        let k = self.num_classes;
        let mut candidates = Vec::new();
        for (i, &score) in self.scores.iter().enumerate() {
            if score < opts.score_threshold || !score.is_finite() {
                continue;
            }
            let anchor = i / k;
            if let Some(bbox) = self.boxes[anchor] {
                candidates.push(Detection {
                    class: i % k + 1,
                    score,
                    bbox,
                    anchor,
                });
            }
        }
        let mut kept = nms(&candidates, opts.nms_threshold);
        kept.truncate(opts.max_detections);
        kept
    }
}

/// Full pipeline on a `[C, H, W]` scene input.
pub fn detect(
    model: &Detector,
    anchors: &[BBox],
    use_objectness: bool,
    input: &Tensor,
    opts: &DetectOptions,
) -> Result<Vec<Detection>> {
    let heads = model.predict(input)?;
    let bounds = (model.config.layout.grid_w as f64, model.config.layout.grid_h as f64);
    let scored = ScoredAnchors::from_heads(&heads, anchors, model.config.num_classes, use_objectness, bounds)?;
    Ok(scored.detections(opts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn det(class: usize, score: f64, b: BBox, anchor: usize) -> Detection {
        Detection {
            class,
            score,
            bbox: b,
            anchor,
        }
    }

    #[test]
    fn combine_examples() {
        assert_eq!(combine_scores(&[0.3, 0.6], Some(&[1.0]), 2), vec![0.3, 0.6]);
        assert_eq!(combine_scores(&[0.3, 0.6], Some(&[0.0]), 2), vec![0.0, 0.0]);
        assert_eq!(combine_scores(&[0.8], Some(&[0.5]), 1), vec![0.4]);
        assert_eq!(combine_scores(&[0.8, 0.1], None, 2), vec![0.8, 0.1]);
    }

    #[test]
    fn nms_single_and_duplicates() {
        let b = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(nms(&[det(1, 0.5, b, 0)], 0.45).len(), 1);
        let kept = nms(&[det(1, 0.8, b, 1), det(1, 0.9, b, 0)], 0.45);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_is_per_class() {
        let b = BBox::new(0.0, 0.0, 2.0, 2.0);
        let kept = nms(&[det(1, 0.8, b, 0), det(2, 0.7, b, 0)], 0.45);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn score_ties_prefer_lower_anchor() {
        let b = BBox::new(0.0, 0.0, 2.0, 2.0);
        let kept = nms(&[det(1, 0.5, b, 7), det(1, 0.5, b, 3)], 0.45);
        assert_eq!(kept[0].anchor, 3);
    }

    /// Textbook O(n^2) suppression over a sorted array.
    fn exhaustive_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
        let mut sorted = dets.to_vec();
        sorted.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then(a.anchor.cmp(&b.anchor))
                .then(a.class.cmp(&b.class))
        });
        let mut suppressed = vec![false; sorted.len()];
        for i in 0..sorted.len() {
            if suppressed[i] {
                continue;
            }
            for j in i + 1..sorted.len() {
                if sorted[j].class == sorted[i].class && iou(&sorted[i].bbox, &sorted[j].bbox) > thr {
                    suppressed[j] = true;
                }
            }
        }
        sorted
            .into_iter()
            .zip(suppressed)
            .filter(|(_, s)| !s)
            .map(|(d, _)| d)
            .collect()
    }

    fn arb_dets(max: usize) -> impl Strategy<Value = Vec<Detection>> {
        proptest::collection::vec(
            (1usize..3, 0.0..1.0f64, 0.0..6.0f64, 0.0..6.0f64, 0.5..4.0f64, 0.5..4.0f64),
            0..=max,
        )
        .prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (c, s, x, y, w, h))| det(c, s, BBox::new(x, y, x + w, y + h), i))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn nms_matches_exhaustive_oracle(dets in arb_dets(12), thr in 0.1..1.0f64) {
            let kept = nms(&dets, thr);
            prop_assert_eq!(&kept, &exhaustive_nms(&dets, thr));
            for (i, a) in kept.iter().enumerate() {
                prop_assert!(dets.contains(a));
                for b in &kept[i + 1..] {
                    prop_assert!(a.class != b.class || iou(&a.bbox, &b.bbox) <= thr);
                    prop_assert!(a.score >= b.score);
                }
            }
        }

        #[test]
        fn combine_preserves_argmax(probs in proptest::collection::vec(0.0..1.0f64, 4), o in 0.01..1.0f64) {
            let combined = combine_scores(&probs, Some(&[o]), 4);
            let argmax = |v: &[f64]| {
                v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
            };
            prop_assert_eq!(argmax(&probs), argmax(&combined));
        }
    }
}
