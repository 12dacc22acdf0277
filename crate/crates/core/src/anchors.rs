//! Anchor grids, IoU, ground-truth assignment and box deltas.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Axis-aligned box in continuous grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && self.area().is_finite()
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn clipped(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// One anchor shape: width `scale * sqrt(ratio)`, height `scale / sqrt(ratio)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorTemplate {
    pub scale: f64,
    pub ratio: f64,
}

impl AnchorTemplate {
    pub const fn new(scale: f64, ratio: f64) -> Self {
        Self { scale, ratio }
    }

    fn size(&self) -> (f64, f64) {
        let r = math::sqrt(self.ratio);
        (self.scale * r, self.scale / r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorLayout {
    pub grid_h: usize,
    pub grid_w: usize,
    pub templates: Vec<AnchorTemplate>,
}

impl AnchorLayout {
    pub fn per_cell(&self) -> usize {
        self.templates.len()
    }

    pub fn total(&self) -> usize {
        self.grid_h * self.grid_w * self.per_cell()
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::Contract("anchor grid must be at least 1x1".into()));
        }
        if self.templates.is_empty() {
            return Err(Error::Contract("anchor layout needs at least one template".into()));
        }
        for t in &self.templates {
            if !(t.scale > 0.0 && t.scale.is_finite()) || !(t.ratio > 0.0 && t.ratio.is_finite()) {
                return Err(Error::Contract(format!(
                    "anchor template scale and ratio must be positive, got ({}, {})",
                    t.scale, t.ratio
                )));
            }
        }
        Ok(())
    }
}

impl Default for AnchorLayout {
    fn default() -> Self {
        Self {
            grid_h: 32,
            grid_w: 32,
            templates: alloc::vec![
                AnchorTemplate::new(4.0, 1.0),
                AnchorTemplate::new(6.0, 1.0),
                AnchorTemplate::new(5.0, 0.5),
                AnchorTemplate::new(5.0, 2.0),
            ],
        }
    }
}

/// One box per (cell, template), centred on the cell, ordered row-major over
/// cells and then by template index.
pub fn generate_anchors(layout: &AnchorLayout) -> Result<Vec<BBox>> {
    layout.validate()?;
    let mut out = Vec::with_capacity(layout.total());
    for y in 0..layout.grid_h {
        for x in 0..layout.grid_w {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            for t in &layout.templates {
                let (w, h) = t.size();
                out.push(BBox::from_center(cx, cy, w, h));
            }
        }
    }
    Ok(out)
}

/// Ground-truth object: box plus class in `1..=K`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorStatus {
    Positive { class: usize, gt: usize },
    Negative,
    Ignore,
}

impl AnchorStatus {
    pub fn is_positive(&self) -> bool {
        matches!(self, AnchorStatus::Positive { .. })
    }

    pub fn is_negative(&self) -> bool {
        matches!(self, AnchorStatus::Negative)
    }

    pub fn is_ignored(&self) -> bool {
        matches!(self, AnchorStatus::Ignore)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorLabels {
    pub status: Vec<AnchorStatus>,
    pub positives: usize,
    pub negatives: usize,
}

impl AnchorLabels {
    pub fn len(&self) -> usize {
        self.status.len()
    }

    pub fn is_empty(&self) -> bool {
        self.status.is_empty()
    }

    pub fn ignored(&self) -> usize {
        self.status.len() - self.positives - self.negatives
    }

    pub fn positive_mask(&self) -> Vec<bool> {
        self.status.iter().map(AnchorStatus::is_positive).collect()
    }

    pub fn negative_mask(&self) -> Vec<bool> {
        self.status.iter().map(AnchorStatus::is_negative).collect()
    }

    /// Anchors that take part in classification and objectness losses.
    pub fn active_mask(&self) -> Vec<bool> {
        self.status.iter().map(|s| !s.is_ignored()).collect()
    }

    /// `1` for positives, `0` otherwise.
    pub fn objectness_targets(&self) -> Vec<f64> {
        self.status
            .iter()
            .map(|s| if s.is_positive() { 1.0 } else { 0.0 })
            .collect()
    }

    /// `max(P, 1)`, the loss normalizer.
    pub fn normalizer(&self) -> f64 {
        self.positives.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssignThresholds {
    pub positive: f64,
    pub negative_low: f64,
    pub negative_high: f64,
}

impl Default for AssignThresholds {
    fn default() -> Self {
        Self {
            positive: 0.5,
            negative_low: 0.0,
            negative_high: 0.4,
        }
    }
}

/// Positive when the best IoU reaches `positive` (argmax ground truth,
/// lowest index on ties), negative when it falls in
/// `[negative_low, negative_high)`, ignored otherwise.
pub fn assign_labels(
    anchors: &[BBox],
    gts: &[GroundTruth],
    thresholds: &AssignThresholds,
) -> Result<AnchorLabels> {
    if thresholds.negative_high > thresholds.positive {
        return Err(Error::Contract(format!(
            "negative upper threshold {} exceeds positive threshold {}",
            thresholds.negative_high, thresholds.positive
        )));
    }
    let mut status = Vec::with_capacity(anchors.len());
    let (mut positives, mut negatives) = (0, 0);
    for anchor in anchors {
        let mut best = (0.0_f64, usize::MAX);
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(anchor, &gt.bbox);
            if best.1 == usize::MAX || v > best.0 {
                best = (v, g);
            }
        }
        let s = if best.1 != usize::MAX && best.0 >= thresholds.positive {
            positives += 1;
            AnchorStatus::Positive {
                class: gts[best.1].class,
                gt: best.1,
            }
        } else if best.0 >= thresholds.negative_low && best.0 < thresholds.negative_high {
            negatives += 1;
            AnchorStatus::Negative
        } else {
            AnchorStatus::Ignore
        };
        status.push(s);
    }
    Ok(AnchorLabels {
        status,
        positives,
        negatives,
    })
}

/// Log-size terms are clamped to this magnitude when decoding.
pub const MAX_LOG_SIZE_DELTA: f64 = 4.0;

/// `(dcx / w_a, dcy / h_a, ln(w_g / w_a), ln(h_g / h_a))`.
pub fn encode_box(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (gcx - acx) / aw,
        (gcy - acy) / ah,
        math::ln(gt.width() / aw),
        math::ln(gt.height() / ah),
    ]
}

pub fn decode_box(anchor: &BBox, deltas: &[f64; 4]) -> BBox {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let dw = deltas[2].clamp(-MAX_LOG_SIZE_DELTA, MAX_LOG_SIZE_DELTA);
    let dh = deltas[3].clamp(-MAX_LOG_SIZE_DELTA, MAX_LOG_SIZE_DELTA);
    BBox::from_center(
        acx + deltas[0] * aw,
        acy + deltas[1] * ah,
        aw * math::exp(dw),
        ah * math::exp(dh),
    )
}

/// Regression targets `[A, 4]`; rows of non-positive anchors are zero.
pub fn box_targets(anchors: &[BBox], labels: &AnchorLabels, gts: &[GroundTruth]) -> Tensor {
    let mut data = alloc::vec![0.0; anchors.len() * 4];
    for (i, s) in labels.status.iter().enumerate() {
        if let AnchorStatus::Positive { gt, .. } = s {
            data[i * 4..i * 4 + 4].copy_from_slice(&encode_box(&anchors[i], &gts[*gt].bbox));
        }
    }
    Tensor::new(alloc::vec![anchors.len(), 4], data).expect("A x 4")
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn gt(b: BBox, class: usize) -> GroundTruth {
        GroundTruth { bbox: b, class }
    }

    #[test]
    fn single_cell_unit_anchor() {
        let layout = AnchorLayout {
            grid_h: 1,
            grid_w: 1,
            templates: vec![AnchorTemplate::new(1.0, 1.0)],
        };
        assert_eq!(generate_anchors(&layout).unwrap(), vec![BBox::new(0.0, 0.0, 1.0, 1.0)]);
    }

    #[test]
    fn two_by_two_grid_centres() {
        let layout = AnchorLayout {
            grid_h: 2,
            grid_w: 2,
            templates: vec![AnchorTemplate::new(1.0, 1.0)],
        };
        let centres: Vec<_> = generate_anchors(&layout).unwrap().iter().map(BBox::center).collect();
        assert_eq!(centres, vec![(0.5, 0.5), (1.5, 0.5), (0.5, 1.5), (1.5, 1.5)]);
    }

    #[test]
    fn multi_template_grid_matches_enumeration() {
        let templates = vec![
            AnchorTemplate::new(1.0, 1.0),
            AnchorTemplate::new(2.0, 1.0),
            AnchorTemplate::new(1.0, 2.0),
        ];
        let layout = AnchorLayout {
            grid_h: 4,
            grid_w: 4,
            templates: templates.clone(),
        };
        let anchors = generate_anchors(&layout).unwrap();
        assert_eq!(anchors.len(), 48);
        // independent enumeration: index = (row * 4 + col) * 3 + template
        for row in 0..4 {
            for col in 0..4 {
                for (t, tpl) in templates.iter().enumerate() {
                    let a = anchors[(row * 4 + col) * 3 + t];
                    let w = tpl.scale * libm::sqrt(tpl.ratio);
                    let h = tpl.scale / libm::sqrt(tpl.ratio);
                    assert!((a.x1 - (col as f64 + 0.5 - w / 2.0)).abs() < 1e-12);
                    assert!((a.y2 - (row as f64 + 0.5 + h / 2.0)).abs() < 1e-12);
                }
            }
        }
        // (1, 2): w = sqrt 2, h = 1 / sqrt 2
        let a = anchors[2];
        assert!((a.width() - core::f64::consts::SQRT_2).abs() < 1e-12);
        assert!((a.height() - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn non_positive_scale_is_rejected() {
        let layout = AnchorLayout {
            grid_h: 1,
            grid_w: 1,
            templates: vec![AnchorTemplate::new(0.0, 1.0)],
        };
        assert!(matches!(generate_anchors(&layout), Err(Error::Contract(_))));
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        let b = BBox::new(1.0, 0.0, 3.0, 2.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iou_matches_rasterized_overlap() {
        // Point-sampled overlap on a 0.01 lattice.
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 0.0, 3.0, 2.0);
        let step = 0.01;
        let (mut inter, mut union) = (0usize, 0usize);
        for i in 0..400 {
            for j in 0..300 {
                let (x, y) = ((j as f64 + 0.5) * step, (i as f64 + 0.5) * step);
                let ina = x < a.x2 && y < a.y2 && x > a.x1 && y > a.y1;
                let inb = x < b.x2 && y < b.y2 && x > b.x1 && y > b.y1;
                inter += (ina && inb) as usize;
                union += (ina || inb) as usize;
            }
        }
        let raster = inter as f64 / union as f64;
        assert!((iou(&a, &b) - raster).abs() < 1e-3);
    }

    #[test]
    fn assignment_cases() {
        let th = AssignThresholds::default();
        let g = BBox::new(0.0, 0.0, 4.0, 4.0);
        // anchor 0 == gt; anchor 1 disjoint; anchor 2 overlaps with IoU 0.45
        let w = 4.0 * 0.45 / (1.0 + 0.45) * 2.0; // 4w / (16 + 16 - 4w) = 0.45 with height 4
        let anchors = vec![
            g,
            BBox::new(10.0, 10.0, 12.0, 12.0),
            BBox::new(4.0 - w, 0.0, 8.0 - w, 4.0),
        ];
        assert!((iou(&anchors[2], &g) - 0.45).abs() < 1e-12);
        let labels = assign_labels(&anchors, &[gt(g, 2)], &th).unwrap();
        assert_eq!(labels.status[0], AnchorStatus::Positive { class: 2, gt: 0 });
        assert_eq!(labels.status[1], AnchorStatus::Negative);
        assert_eq!(labels.status[2], AnchorStatus::Ignore);
        assert_eq!((labels.positives, labels.negatives, labels.ignored()), (1, 1, 1));
    }

    #[test]
    fn ties_go_to_lowest_gt_index() {
        let b = BBox::new(0.0, 0.0, 2.0, 2.0);
        let labels = assign_labels(&[b], &[gt(b, 3), gt(b, 1)], &AssignThresholds::default()).unwrap();
        assert_eq!(labels.status[0], AnchorStatus::Positive { class: 3, gt: 0 });
    }

    #[test]
    fn no_ground_truth_means_all_negative() {
        let anchors = vec![BBox::new(0.0, 0.0, 1.0, 1.0); 5];
        let labels = assign_labels(&anchors, &[], &AssignThresholds::default()).unwrap();
        assert_eq!(labels.negatives, 5);
    }

    #[test]
    fn inverted_thresholds_rejected() {
        let th = AssignThresholds {
            positive: 0.3,
            negative_low: 0.0,
            negative_high: 0.4,
        };
        assert!(assign_labels(&[], &[], &th).is_err());
    }

    #[test]
    fn encode_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(encode_box(&a, &a), [0.0, 0.0, 0.0, 0.0]);
        let d = encode_box(&a, &BBox::new(0.0, 0.0, 4.0, 2.0));
        assert!((d[0] - 0.5).abs() < 1e-15);
        assert_eq!(d[1], 0.0);
        assert!((d[2] - core::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(d[3], 0.0);
    }

    #[test]
    fn decode_clamps_log_terms() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        let b = decode_box(&a, &[0.0, 0.0, 100.0, -100.0]);
        assert!((b.width() - libm::exp(4.0)).abs() < 1e-9);
        assert!((b.height() - libm::exp(-4.0)).abs() < 1e-12);
    }

    #[test]
    fn round_trip_thousand_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let rand_box = |rng: &mut rand_chacha::ChaCha8Rng| {
                let x: f64 = rng.random_range(-10.0..10.0);
                let y: f64 = rng.random_range(-10.0..10.0);
                let w: f64 = rng.random_range(0.5..8.0);
                let h: f64 = rng.random_range(0.5..8.0);
                BBox::new(x, y, x + w, y + h)
            };
            let a = rand_box(&mut rng);
            let g = rand_box(&mut rng);
            let back = decode_box(&a, &encode_box(&a, &g));
            for (u, v) in [(back.x1, g.x1), (back.y1, g.y1), (back.x2, g.x2), (back.y2, g.y2)] {
                worst = worst.max((u - v).abs());
            }
        }
        assert!(worst < 1e-9, "{worst}");
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-20.0..20.0f64, -20.0..20.0f64, 0.1..10.0f64, 0.1..10.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let u = iou(&a, &b);
            prop_assert_eq!(u, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&u));
            prop_assert_eq!(iou(&a, &a), 1.0);
            if a != b {
                prop_assert!(u < 1.0);
            }
        }

        #[test]
        fn assignment_partitions_anchors(
            anchors in proptest::collection::vec(arb_box(), 1..40),
            gts in proptest::collection::vec((arb_box(), 1usize..4), 0..4),
        ) {
            let gts: Vec<_> = gts.into_iter().map(|(b, c)| gt(b, c)).collect();
            let labels = assign_labels(&anchors, &gts, &AssignThresholds::default()).unwrap();
            prop_assert_eq!(labels.positives + labels.negatives + labels.ignored(), anchors.len());
            for (a, s) in anchors.iter().zip(&labels.status) {
                let best = gts.iter().map(|g| iou(a, &g.bbox)).fold(0.0, f64::max);
                match s {
                    AnchorStatus::Positive { gt, .. } => {
                        prop_assert!(best >= 0.5);
                        prop_assert_eq!(iou(a, &gts[*gt].bbox), best);
                    }
                    AnchorStatus::Negative => prop_assert!(best < 0.4),
                    AnchorStatus::Ignore => prop_assert!((0.4..0.5).contains(&best)),
                }
            }
        }
    }
}
