//! Training objectives.
//!
//! Classification and objectness sums are divided by `max(P, 1)`; ignored
//! anchors never contribute. Every loss is built on the tape from
//! primitives so a single gradient check covers all of them.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorLabels, AnchorStatus};
use crate::error::{Error, Result};
use crate::grad::{NodeId, Tape};
use crate::math::{self, CompensatedSum};
use crate::model::{refine_objectness_train, GradientFlow, HeadNodes};
use crate::tensor::Tensor;

/// Smooth-L1 transition point for box regression.
pub const BOX_BETA: f64 = 1.0 / 9.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalConfig {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

/// Stable `-[t log sigmoid(z) + (1 - t) log(1 - sigmoid(z))]`.
pub fn bce_with_logits(logit: f64, target: f64) -> f64 {
    -(target * math::log_sigmoid(logit) + (1.0 - target) * math::log_sigmoid(-logit))
}

/// Elementwise BCE of `logits` against constant `targets` (same shape).
pub fn bce_elementwise(tape: &mut Tape, logits: NodeId, targets: &Tensor) -> Result<NodeId> {
    let shape = tape.value(logits).shape().to_vec();
    let t = tape.constant(targets.clone());
    let one_minus = tape.constant(targets.map(|v| 1.0 - v));
    let log_p = tape.log_sigmoid(logits)?;
    let neg = tape.scale(logits, -1.0)?;
    let log_q = tape.log_sigmoid(neg)?;
    let a = tape.mul(t, log_p)?;
    let b = tape.mul(one_minus, log_q)?;
    let s = tape.add(a, b)?;
    debug_assert_eq!(tape.value(s).shape(), shape.as_slice());
    Ok(tape.scale(s, -1.0)?)
}

/// Which anchors the class loss covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassSelection {
    /// Positives and negatives (the CE and focal baselines).
    AllAnchors,
    /// Positives only (objectness modes, where negatives are left to
    /// the objectness head).
    PositivesOnly,
}

/// One-hot `[A, K]` targets; errors if a positive's class is outside `1..=K`.
pub fn class_targets(labels: &AnchorLabels, k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * k];
    for (i, s) in labels.status.iter().enumerate() {
        if let AnchorStatus::Positive { class, .. } = *s {
            if class == 0 || class > k {
                return Err(Error::Contract(format!(
                    "anchor {i} has class {class}, expected 1..={k}"
                )));
            }
            data[i * k + class - 1] = 1.0;
        }
    }
    Ok(Tensor::new(vec![labels.len(), k], data)?)
}

fn selection_mask(labels: &AnchorLabels, sel: ClassSelection) -> Vec<bool> {
    match sel {
        ClassSelection::AllAnchors => labels.active_mask(),
        ClassSelection::PositivesOnly => labels.positive_mask(),
    }
}

fn flat_logits(tape: &mut Tape, logits: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
    let n = tape.value(logits).len();
    if n != rows * cols {
        return Err(Error::Contract(format!(
            "expected {rows}x{cols} logits, got {n} values"
        )));
    }
    Ok(tape.reshape(logits, &[rows, cols])?)
}

fn zero(tape: &mut Tape) -> NodeId {
    tape.constant(Tensor::scalar(0.0))
}

/// Unnormalized sum of K-way one-vs-all sigmoid CE over the selected anchors.
pub fn class_loss(
    tape: &mut Tape,
    class_logits: NodeId,
    labels: &AnchorLabels,
    k: usize,
    selection: ClassSelection,
) -> Result<NodeId> {
    let targets = class_targets(labels, k)?;
    let logits = flat_logits(tape, class_logits, labels.len(), k)?;
    let mask = selection_mask(labels, selection);
    let selected = mask.iter().filter(|&&m| m).count();
    if selected == 0 {
        return Ok(zero(tape));
    }
    let picked = tape.masked_select(logits, mask.clone())?;
    let picked_targets = select_rows(&targets, &mask);
    let bce = bce_elementwise(tape, picked, &picked_targets)?;
    Ok(tape.sum(bce)?)
}

/// Focal loss over non-ignored anchors, per anchor-class term, divided by
/// `max(P, 1)`.
pub fn focal_loss(
    tape: &mut Tape,
    class_logits: NodeId,
    labels: &AnchorLabels,
    k: usize,
    cfg: &FocalConfig,
) -> Result<NodeId> {
    if !(cfg.gamma >= 0.0) || !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::Config(format!(
            "focal loss needs gamma >= 0 and alpha in (0, 1), got gamma={} alpha={}",
            cfg.gamma, cfg.alpha
        )));
    }
    let targets = class_targets(labels, k)?;
    let logits = flat_logits(tape, class_logits, labels.len(), k)?;
    let mask = labels.active_mask();
    if !mask.iter().any(|&m| m) {
        return Ok(zero(tape));
    }
    let picked = tape.masked_select(logits, mask.clone())?;
    let t = select_rows(&targets, &mask);
    let ce = bce_elementwise(tape, picked, &t)?;

    // log(1 - p_t) = log sigmoid(-z) for t = 1 and log sigmoid(z) for t = 0,
    // i.e. log sigmoid(s z) with s = 1 - 2t.
    let sign = tape.constant(t.map(|v| 1.0 - 2.0 * v));
    let signed = tape.mul(sign, picked)?;
    let log_q = tape.log_sigmoid(signed)?;
    let scaled = tape.scale(log_q, cfg.gamma)?;
    let modulator = tape.exp(scaled)?;
    let alpha_t = tape.constant(t.map(|v| if v > 0.5 { cfg.alpha } else { 1.0 - cfg.alpha }));
    let weighted = tape.mul(modulator, ce)?;
    let weighted = tape.mul(alpha_t, weighted)?;
    let total = tape.sum(weighted)?;
    Ok(tape.scale(total, 1.0 / labels.normalizer())?)
}

/// Smooth-L1 over positive anchors, divided by `max(P, 1)`.
pub fn box_loss(tape: &mut Tape, box_deltas: NodeId, labels: &AnchorLabels, targets: &Tensor) -> Result<NodeId> {
    let deltas = flat_logits(tape, box_deltas, labels.len(), 4)?;
    if targets.shape() != [labels.len(), 4] {
        return Err(Error::Contract(format!(
            "box targets have shape {:?}, expected {:?}",
            targets.shape(),
            [labels.len(), 4]
        )));
    }
    if labels.positives == 0 {
        return Ok(zero(tape));
    }
    let mask = labels.positive_mask();
    let pred = tape.masked_select(deltas, mask.clone())?;
    let tgt = tape.constant(select_rows(targets, &mask));
    let diff = tape.sub(pred, tgt)?;
    let sl1 = tape.smooth_l1(diff, BOX_BETA)?;
    let total = tape.sum(sl1)?;
    Ok(tape.scale(total, 1.0 / labels.normalizer())?)
}

/// BCE of objectness logits against positive/negative labels, summed over
/// anchors where `mask` is set and not ignored. Unnormalized.
fn objectness_bce(tape: &mut Tape, logits: NodeId, labels: &AnchorLabels, mask: &[bool]) -> Result<NodeId> {
    let n = labels.len();
    if tape.value(logits).len() != n {
        return Err(Error::Contract(format!(
            "objectness has {} values for {} anchors",
            tape.value(logits).len(),
            n
        )));
    }
    let keep: Vec<bool> = mask
        .iter()
        .zip(&labels.status)
        .map(|(&m, s)| m && !s.is_ignored())
        .collect();
    if !keep.iter().any(|&k| k) {
        return Ok(zero(tape));
    }
    let flat = tape.reshape(logits, &[n])?;
    let picked = tape.masked_select(flat, keep.clone())?;
    let targets: Vec<f64> = labels
        .objectness_targets()
        .into_iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(t, _)| t)
        .collect();
    let bce = bce_elementwise(tape, picked, &Tensor::from_vec(targets))?;
    Ok(tape.sum(bce)?)
}

fn select_rows(t: &Tensor, mask: &[bool]) -> Tensor {
    let rows = t.shape()[0];
    let width = t.len() / rows.max(1);
    let mut data = Vec::new();
    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        data.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = data.len() / width.max(1);
    Tensor::new(shape, data).expect("row selection")
}

/// Training mode: which loss family drives the detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Sigmoid cross-entropy over all anchors.
    #[serde(rename = "ce")]
    Ce,
    #[serde(rename = "focal_loss")]
    FocalLoss,
    /// Single objectness head, no refinement.
    #[serde(rename = "obj")]
    Obj,
    /// Objectness head refined by residual subnets.
    #[serde(rename = "res_obj")]
    ResObj,
}

impl Mode {
    pub fn uses_objectness(self) -> bool {
        matches!(self, Mode::Obj | Mode::ResObj)
    }
}

/// Loss components as tape nodes; every component is already normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGraph {
    pub total: NodeId,
    pub class: NodeId,
    pub boxes: NodeId,
    pub objectness: Option<NodeId>,
    pub residual: Vec<NodeId>,
    pub normalizer: f64,
    pub degenerate: bool,
    /// Refinement masks, one per residual step.
    pub masks: Vec<Vec<bool>>,
}

/// Loss values read back from the tape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub class: f64,
    pub boxes: f64,
    pub objectness: Option<f64>,
    pub residual: Vec<f64>,
    pub normalizer: f64,
    pub degenerate: bool,
}

impl LossGraph {
    pub fn report(&self, tape: &Tape) -> LossReport {
        let v = |n: NodeId| tape.value(n).item();
        LossReport {
            total: v(self.total),
            class: v(self.class),
            boxes: v(self.boxes),
            objectness: self.objectness.map(v),
            residual: self.residual.iter().map(|&n| v(n)).collect(),
            normalizer: self.normalizer,
            degenerate: self.degenerate,
        }
    }

    /// Sum of the residual components, if any.
    pub fn residual_total(&self, tape: &mut Tape) -> Result<NodeId> {
        let mut acc = zero(tape);
        for &r in &self.residual {
            acc = tape.add(acc, r)?;
        }
        Ok(acc)
    }
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.class.is_finite()
            && self.boxes.is_finite()
            && self.objectness.is_none_or(f64::is_finite)
            && self.residual.iter().all(|v| v.is_finite())
    }

    pub fn breakdown(&self) -> alloc::string::String {
        format!(
            "total={} class={} box={} objectness={:?} residual={:?}",
            self.total, self.class, self.boxes, self.objectness, self.residual
        )
    }
}

fn sum_nodes(tape: &mut Tape, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = tape.add(acc, n)?;
    }
    Ok(acc)
}

fn normalized(tape: &mut Tape, node: NodeId, labels: &AnchorLabels) -> Result<NodeId> {
    Ok(tape.scale(node, 1.0 / labels.normalizer())?)
}

/// Objectness over all non-ignored anchors, positives-only class CE and box
/// regression. Residual logits in `heads` are not used.
pub fn objectness_total_loss(
    tape: &mut Tape,
    heads: &HeadNodes,
    labels: &AnchorLabels,
    k: usize,
    box_targets: &Tensor,
) -> Result<LossGraph> {
    let only_obj = HeadNodes {
        residual_logits: Vec::new(),
        ..heads.clone()
    };
    residual_objectness_loss(tape, &only_obj, labels, k, box_targets, GradientFlow::Isolated)
}

/// Objectness loss on `o_0`, one residual loss per refinement step over that
/// step's mask, positives-only class CE and box regression. With no
/// residual logits this is exactly [`objectness_total_loss`].
pub fn residual_objectness_loss(
    tape: &mut Tape,
    heads: &HeadNodes,
    labels: &AnchorLabels,
    k: usize,
    box_targets: &Tensor,
    flow: GradientFlow,
) -> Result<LossGraph> {
    let all = vec![true; labels.len()];
    let obj_raw = objectness_bce(tape, heads.obj_logits, labels, &all)?;
    let objectness = normalized(tape, obj_raw, labels)?;

    let n = labels.len();
    let o0 = tape.reshape(heads.obj_logits, &[n])?;
    let residuals = heads
        .residual_logits
        .iter()
        .map(|&r| tape.reshape(r, &[n]))
        .collect::<core::result::Result<Vec<_>, _>>()?;
    let refinement = refine_objectness_train(tape, o0, &residuals, &labels.positive_mask(), flow)?;
    let mut residual = Vec::with_capacity(residuals.len());
    for (t, mask) in refinement.masks.iter().enumerate() {
        let raw = objectness_bce(tape, refinement.logits[t + 1], labels, mask)?;
        residual.push(normalized(tape, raw, labels)?);
    }

    let class_raw = class_loss(tape, heads.class_logits, labels, k, ClassSelection::PositivesOnly)?;
    let class = normalized(tape, class_raw, labels)?;
    let boxes = box_loss(tape, heads.box_deltas, labels, box_targets)?;

    let mut parts = vec![class, boxes, objectness];
    parts.extend_from_slice(&residual);
    let total = sum_nodes(tape, &parts)?;
    Ok(LossGraph {
        total,
        class,
        boxes,
        objectness: Some(objectness),
        residual,
        normalizer: labels.normalizer(),
        degenerate: refinement.degenerate && !heads.residual_logits.is_empty(),
        masks: refinement.masks,
    })
}

/// Loss for `mode`. CE and focal modes ignore the objectness outputs.
pub fn detection_loss(
    tape: &mut Tape,
    mode: Mode,
    heads: &HeadNodes,
    labels: &AnchorLabels,
    k: usize,
    box_targets: &Tensor,
    focal: &FocalConfig,
    flow: GradientFlow,
) -> Result<LossGraph> {
    match mode {
        Mode::Ce | Mode::FocalLoss => {
            let class = if mode == Mode::Ce {
                let raw = class_loss(tape, heads.class_logits, labels, k, ClassSelection::AllAnchors)?;
                normalized(tape, raw, labels)?
            } else {
                focal_loss(tape, heads.class_logits, labels, k, focal)?
            };
            let boxes = box_loss(tape, heads.box_deltas, labels, box_targets)?;
            let total = tape.add(class, boxes)?;
            Ok(LossGraph {
                total,
                class,
                boxes,
                objectness: None,
                residual: Vec::new(),
                normalizer: labels.normalizer(),
                degenerate: false,
                masks: Vec::new(),
            })
        }
        Mode::Obj => objectness_total_loss(tape, heads, labels, k, box_targets),
        Mode::ResObj => residual_objectness_loss(tape, heads, labels, k, box_targets, flow),
    }
}

/// Negative-anchor loss of the K-way class head against that of the single
/// objectness head, both without focal modulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegativeLossRatio {
    /// `sum_neg sum_k -log(1 - p_k)`.
    pub class_negative: f64,
    /// `sum_neg -log(1 - o)`.
    pub objectness_negative: f64,
    /// `None` when the objectness term is zero.
    pub ratio: Option<f64>,
}

/// `class_logits` is `[A, K]` (any shape with `A * K` values),
/// `obj_logits` has `A` values and `negatives` marks background anchors.
pub fn negative_loss_ratio(
    class_logits: &Tensor,
    obj_logits: &Tensor,
    negatives: &[bool],
) -> Result<NegativeLossRatio> {
    let a = negatives.len();
    if obj_logits.len() != a || a == 0 || !class_logits.len().is_multiple_of(a) {
        return Err(Error::Contract(format!(
            "negative_loss_ratio: {} class logits, {} objectness logits, {} anchors",
            class_logits.len(),
            obj_logits.len(),
            a
        )));
    }
    let k = class_logits.len() / a;
    let mut class_sum = CompensatedSum::default();
    let mut objectness_sum = CompensatedSum::default();
    for (i, _) in negatives.iter().enumerate().filter(|(_, &n)| n) {
        for &z in &class_logits.data()[i * k..(i + 1) * k] {
            class_sum.add(bce_with_logits(z, 0.0));
        }
        objectness_sum.add(bce_with_logits(obj_logits.data()[i], 0.0));
    }
    let (class_negative, objectness_negative) = (class_sum.value(), objectness_sum.value());
    let ratio = (objectness_negative > 0.0).then(|| class_negative / objectness_negative);
    Ok(NegativeLossRatio {
        class_negative,
        objectness_negative,
        ratio,
    })
}
