//! Finite-difference gradient checks of every training loss on small random
//! detectors.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::anchors::{generate_anchors, AnchorLayout, AnchorTemplate};
use crate::data::{generate_scene, SceneConfig};
use crate::error::{Error, Result};
use crate::grad::{finite_diff_check, GradCheck, Primitive, Tape};
use crate::losses::{box_loss, detection_loss, FocalConfig, Mode};
use crate::model::{init_model, Detector, GradientFlow, ModelConfig, ResidualSource};
use crate::train::{prepare_scene, PreparedScene};

/// Central-difference step.
pub const EPSILON: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-5;
/// Instances whose ReLU inputs come closer to zero than this are skipped, so
/// no perturbation crosses a kink.
const RELU_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    Focal,
    Obj,
    ResObj,
    Box,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [Self::Ce, Self::Focal, Self::Obj, Self::ResObj, Self::Box];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ce => "ce",
            Self::Focal => "focal",
            Self::Obj => "obj",
            Self::ResObj => "resobj",
            Self::Box => "box",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    fn steps(self) -> usize {
        if self == Self::ResObj {
            2
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidelityResult {
    pub kind: LossKind,
    pub instance: u64,
    pub check: GradCheck,
}

impl FidelityResult {
    pub fn passed(&self) -> bool {
        self.check.max_relative_error <= TOLERANCE
    }
}

fn instance_scene_config() -> SceneConfig {
    SceneConfig {
        grid_h: 5,
        grid_w: 6,
        num_classes: 2,
        min_objects: 1,
        max_objects: 2,
        min_size: 2,
        max_size: 4,
        ..SceneConfig::default()
    }
}

fn instance_model_config(kind: LossKind, seed: u64) -> ModelConfig {
    ModelConfig {
        num_classes: 2,
        input_channels: 3,
        layout: AnchorLayout {
            grid_h: 5,
            grid_w: 6,
            templates: alloc::vec![AnchorTemplate::new(3.0, 1.0), AnchorTemplate::new(4.0, 0.5)],
        },
        steps: kind.steps(),
        trunk_channels: 3,
        head_depth: 1,
        residual_source: if seed.is_multiple_of(2) {
            ResidualSource::ObjectnessHead
        } else {
            ResidualSource::ClassHead
        },
        gradient_flow: if seed % 4 < 2 {
            GradientFlow::Isolated
        } else {
            GradientFlow::Coupled
        },
        seed,
        ..ModelConfig::default()
    }
}

/// A small detector with every parameter jittered (so residual outputs are
/// nonzero) and a scene with at least one positive anchor. Deterministic in
/// `seed`.
pub fn random_instance(kind: LossKind, seed: u64) -> Result<(Detector, PreparedScene)> {
    let cfg = instance_model_config(kind, seed);
    let mut model = init_model(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f1de);
    for i in 0..model.params.len() {
        for v in model.params.by_id_mut(crate::grad::ParamId(i)).data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += 0.1 * z;
        }
    }
    let anchors = generate_anchors(&cfg.layout)?;
    let scene_cfg = instance_scene_config();
    let mut index = seed.wrapping_mul(64);
    loop {
        let prepared = prepare_scene(generate_scene(&scene_cfg, index)?, &anchors)?;
        if prepared.labels.positives > 0 {
            return Ok((model, prepared));
        }
        index += 1;
    }
}

fn build_loss(
    kind: LossKind,
    model: &Detector,
    prepared: &PreparedScene,
    tape: &mut Tape,
    leaves: &[crate::grad::NodeId],
) -> Result<crate::grad::NodeId> {
    let heads = model.forward_with(tape, leaves, &prepared.scene.input)?;
    if kind == LossKind::Box {
        return box_loss(tape, heads.box_deltas, &prepared.labels, &prepared.box_targets);
    }
    let mode = match kind {
        LossKind::Ce => Mode::Ce,
        LossKind::Focal => Mode::FocalLoss,
        LossKind::Obj => Mode::Obj,
        _ => Mode::ResObj,
    };
    let graph = detection_loss(
        tape,
        mode,
        &heads,
        &prepared.labels,
        model.config.num_classes,
        &prepared.box_targets,
        &FocalConfig::default(),
        model.config.gradient_flow,
    )?;
    Ok(graph.total)
}

/// Smallest |input| over every ReLU evaluated for this instance.
fn relu_margin(kind: LossKind, model: &Detector, prepared: &PreparedScene) -> Result<f64> {
    let mut tape = Tape::new();
    let leaves = model.register(&mut tape);
    build_loss(kind, model, prepared, &mut tape, &leaves)?;
    let mut margin = f64::INFINITY;
    for (_, node) in tape.nodes() {
        if node.primitive() == Some(&Primitive::Relu) {
            for &v in tape.value(node.inputs()[0]).data() {
                margin = margin.min(v.abs());
            }
        }
    }
    Ok(margin)
}

/// Checks `kind` on `count` random instances. Instances too close to a ReLU
/// kink are replaced by the next seed, so results depend only on
/// (`kind`, `count`, `first_seed`).
pub fn check_loss(kind: LossKind, count: usize, first_seed: u64) -> Result<Vec<FidelityResult>> {
    let mut out = Vec::with_capacity(count);
    let mut seed = first_seed;
    while out.len() < count {
        let (model, prepared) = random_instance(kind, seed)?;
        if relu_margin(kind, &model, &prepared)? >= RELU_MARGIN {
            let check = finite_diff_check(
                |tape, leaves| -> Result<_, Error> { build_loss(kind, &model, &prepared, tape, leaves) },
                &model.params.tensors(),
                EPSILON,
            )?;
            out.push(FidelityResult {
                kind,
                instance: seed,
                check,
            });
        }
        seed += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in LossKind::ALL {
            assert_eq!(LossKind::parse(k.name()), Some(k));
        }
        assert_eq!(LossKind::parse("mse"), None);
    }

    #[test]
    fn instances_are_deterministic_and_nontrivial() {
        let (a, pa) = random_instance(LossKind::ResObj, 3).unwrap();
        let (b, pb) = random_instance(LossKind::ResObj, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(pa.scene, pb.scene);
        assert!(pa.labels.positives > 0);
        let heads = a.predict(&pa.scene.input).unwrap();
        assert!(heads.residual_logits[0].data().iter().any(|&r| r != 0.0));
    }

    #[test]
    fn every_loss_passes_on_a_few_instances() {
        for k in LossKind::ALL {
            for r in check_loss(k, 2, 0).unwrap() {
                assert!(r.passed(), "{r:?}");
            }
        }
    }
}
