//! Central-difference checks of the full detector loss in every mode.

use resobj_core::anchors::{box_targets, generate_anchors, assign_labels, AnchorLayout, AnchorTemplate, AssignThresholds};
use resobj_core::data::{generate_scene, SceneConfig};
use resobj_core::grad::finite_diff_check;
use resobj_core::losses::{detection_loss, FocalConfig, Mode};
use resobj_core::model::{init_model, GradientFlow, ModelConfig, ResidualSource};
use resobj_core::Error;

fn tiny(steps: usize, flow: GradientFlow, source: ResidualSource, seed: u64) -> ModelConfig {
    ModelConfig {
        num_classes: 2,
        input_channels: 3,
        layout: AnchorLayout {
            grid_h: 6,
            grid_w: 6,
            templates: vec![AnchorTemplate::new(3.0, 1.0), AnchorTemplate::new(4.0, 2.0)],
        },
        steps,
        trunk_channels: 3,
        head_depth: 1,
        residual_source: source,
        gradient_flow: flow,
        seed,
        ..ModelConfig::default()
    }
}

fn scene_cfg() -> SceneConfig {
    SceneConfig {
        grid_h: 6,
        grid_w: 6,
        num_classes: 2,
        min_objects: 1,
        max_objects: 2,
        min_size: 2,
        max_size: 4,
        ..SceneConfig::default()
    }
}

fn check(mode: Mode, cfg: ModelConfig, scene_index: u64) -> f64 {
    let model = init_model(&cfg).unwrap();
    let anchors = generate_anchors(&cfg.layout).unwrap();
    let scene = generate_scene(&scene_cfg(), scene_index).unwrap();
    let labels = assign_labels(&anchors, &scene.objects, &AssignThresholds::default()).unwrap();
    let targets = box_targets(&anchors, &labels, &scene.objects);
    let focal = FocalConfig::default();
    let params = model.params.tensors();
    let result = finite_diff_check(
        |tape, leaves| -> Result<_, Error> {
            let heads = model.forward_with(tape, leaves, &scene.input)?;
            let g = detection_loss(tape, mode, &heads, &labels, cfg.num_classes, &targets, &focal, cfg.gradient_flow)?;
            Ok(g.total)
        },
        &params,
        1e-5,
    )
    .unwrap();
    result.max_relative_error
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for seed in 0..3 {
        for (mode, steps) in [(Mode::Ce, 0), (Mode::FocalLoss, 0), (Mode::Obj, 0), (Mode::ResObj, 2)] {
            for flow in [GradientFlow::Isolated, GradientFlow::Coupled] {
                let cfg = tiny(steps, flow, ResidualSource::ObjectnessHead, seed);
                let err = check(mode, cfg, seed);
                assert!(err <= 1e-5, "{mode:?} {flow:?} seed {seed}: {err}");
            }
        }
    }
}

#[test]
fn class_sourced_residuals_match_finite_differences() {
    let cfg = tiny(2, GradientFlow::Coupled, ResidualSource::ClassHead, 5);
    let err = check(Mode::ResObj, cfg, 5);
    assert!(err <= 1e-5, "{err}");
}
