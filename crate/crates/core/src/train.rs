//! SGD training loop, score-dynamics logging and evaluation helpers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::anchors::{assign_labels, box_targets, generate_anchors, AnchorLabels, AssignThresholds, BBox};
use crate::data::{training_scene, validation_scene, Scene, SceneConfig};
use crate::error::{Error, Result};
use crate::grad::{ParamId, Tape};
use crate::inference::{DetectOptions, Detection, ScoredAnchors};
use crate::losses::{detection_loss, FocalConfig, LossReport, Mode};
use crate::math;
use crate::metrics::{evaluate_ap, APResult};
use crate::model::{init_model, objectness_per_step, Detector, ModelConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub model: ModelConfig,
    pub scene: SceneConfig,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Fractions of `iterations` at which the learning rate is multiplied by
    /// `lr_decay_factor`.
    pub lr_decay_points: Vec<f64>,
    pub lr_decay_factor: f64,
    /// The learning rate ramps linearly from `warmup_factor * learning_rate`
    /// to `learning_rate` over the first `warmup_iterations` iterations.
    pub warmup_iterations: usize,
    pub warmup_factor: f64,
    /// Each parameter tensor's batch gradient is rescaled to at most this
    /// L2 norm; `inf` disables clipping.
    pub max_grad_norm: f64,
    pub log_interval: usize,
    /// Validation AP every `eval_interval` iterations; 0 evaluates only at
    /// the end.
    pub eval_interval: usize,
    /// Held-out scenes whose objectness averages are logged.
    pub probe_scenes: usize,
    /// Held-out scenes used for AP.
    pub val_scenes: usize,
    pub focal: FocalConfig,
    pub detect: DetectOptions,
    /// Seeds the training scene stream.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::ResObj,
            model: ModelConfig::default(),
            scene: SceneConfig::default(),
            iterations: 4000,
            batch_size: 1,
            learning_rate: 0.01,
            momentum: 0.9,
            lr_decay_points: vec![2.0 / 3.0, 8.0 / 9.0],
            lr_decay_factor: 0.1,
            warmup_iterations: 0,
            warmup_factor: 1.0 / 3.0,
            max_grad_norm: 2.0,
            log_interval: 250,
            eval_interval: 0,
            probe_scenes: 64,
            val_scenes: 100,
            focal: FocalConfig::default(),
            detect: DetectOptions::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Checks consistency and returns the configuration with `steps` forced
    /// to 0 for modes without residual refinement.
    pub fn normalized(&self) -> Result<Self> {
        let mut cfg = self.clone();
        match cfg.mode {
            Mode::ResObj if cfg.model.steps == 0 => {
                return Err(Error::Config("mode res_obj requires steps >= 1".into()))
            }
            Mode::ResObj => {}
            _ => cfg.model.steps = 0,
        }
        cfg.model.validate()?;
        cfg.scene.validate()?;
        let (m, s) = (&cfg.model, &cfg.scene);
        if m.layout.grid_h != s.grid_h || m.layout.grid_w != s.grid_w {
            return Err(Error::Config(format!(
                "anchor grid {}x{} does not match scene grid {}x{}",
                m.layout.grid_h, m.layout.grid_w, s.grid_h, s.grid_w
            )));
        }
        if m.input_channels != s.channels || m.num_classes != s.num_classes {
            return Err(Error::Config(
                "model input_channels/num_classes must match the scene configuration".into(),
            ));
        }
        if cfg.batch_size == 0 || cfg.log_interval == 0 {
            return Err(Error::Config("batch_size and log_interval must be positive".into()));
        }
        if !(cfg.max_grad_norm > 0.0) {
            return Err(Error::Config("max_grad_norm must be positive".into()));
        }
        if !(cfg.learning_rate >= 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
            return Err(Error::Config("learning_rate must be >= 0 and momentum in [0, 1)".into()));
        }
        Ok(cfg)
    }

    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        let passed = self
            .lr_decay_points
            .iter()
            .filter(|&&f| iteration >= (f * self.iterations as f64) as usize)
            .count();
        let mut lr = self.learning_rate;
        if iteration < self.warmup_iterations {
            let frac = iteration as f64 / self.warmup_iterations as f64;
            lr *= self.warmup_factor + (1.0 - self.warmup_factor) * frac;
        }
        for _ in 0..passed {
            lr *= self.lr_decay_factor;
        }
        lr
    }
}

/// One logged training event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub learning_rate: f64,
    /// Batch-mean loss at this iteration.
    pub loss: LossReport,
    /// Mean objectness score of probe positives after each step `0..=T`;
    /// empty for modes without objectness.
    pub pos_obj: Vec<f64>,
    pub neg_obj: Vec<f64>,
    pub eval: Option<APResult>,
}

/// Trained parameters with the iteration count they correspond to.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Detector,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

/// Anchors, labels and regression targets of a scene.
pub struct PreparedScene {
    pub scene: Scene,
    pub labels: AnchorLabels,
    pub box_targets: Tensor,
}

pub fn prepare_scene(scene: Scene, anchors: &[BBox]) -> Result<PreparedScene> {
    let labels = assign_labels(anchors, &scene.objects, &AssignThresholds::default())?;
    let targets = box_targets(anchors, &labels, &scene.objects);
    Ok(PreparedScene {
        scene,
        labels,
        box_targets: targets,
    })
}

/// Mean objectness scores of positive and negative anchors after each
/// refinement step, pooled over `probe`. Steps accumulate residuals over all
/// anchors, as at inference.
pub fn probe_objectness(model: &Detector, probe: &[PreparedScene]) -> Result<(Vec<f64>, Vec<f64>)> {
    let steps = model.config.steps + 1;
    let (mut pos, mut neg) = (vec![0.0; steps], vec![0.0; steps]);
    let (mut np, mut nn) = (0usize, 0usize);
    for p in probe {
        let heads = model.predict(&p.scene.input)?;
        let per_step = objectness_per_step(&heads.obj_logits, &heads.residual_logits)?;
        for (t, logits) in per_step.iter().enumerate() {
            for (z, s) in logits.data().iter().zip(&p.labels.status) {
                if s.is_positive() {
                    pos[t] += math::sigmoid(*z);
                } else if s.is_negative() {
                    neg[t] += math::sigmoid(*z);
                }
            }
        }
        np += p.labels.positives;
        nn += p.labels.negatives;
    }
    for v in &mut pos {
        *v /= np.max(1) as f64;
    }
    for v in &mut neg {
        *v /= nn.max(1) as f64;
    }
    Ok((pos, neg))
}

/// Detections and ground truth on validation scenes `0..n`.
pub fn validation_detections(
    model: &Detector,
    mode: Mode,
    scene_cfg: &SceneConfig,
    n: usize,
    opts: &DetectOptions,
) -> Result<(Vec<Vec<Detection>>, Vec<Vec<crate::anchors::GroundTruth>>)> {
    let scored = score_validation(model, mode, scene_cfg, n)?;
    Ok((
        scored.iter().map(|(s, _)| s.detections(opts)).collect(),
        scored.into_iter().map(|(_, g)| g).collect(),
    ))
}

/// Per-scene anchor scores and ground truth, reusable across thresholds.
pub fn score_validation(
    model: &Detector,
    mode: Mode,
    scene_cfg: &SceneConfig,
    n: usize,
) -> Result<Vec<(ScoredAnchors, Vec<crate::anchors::GroundTruth>)>> {
    let anchors = generate_anchors(&model.config.layout)?;
    let bounds = (model.config.layout.grid_w as f64, model.config.layout.grid_h as f64);
    (0..n)
        .map(|j| {
            let scene = validation_scene(scene_cfg, j as u64)?;
            let heads = model.predict(&scene.input)?;
            let scored = ScoredAnchors::from_heads(
                &heads,
                &anchors,
                model.config.num_classes,
                mode.uses_objectness(),
                bounds,
            )?;
            Ok((scored, scene.objects))
        })
        .collect()
}

pub fn evaluate_model(
    model: &Detector,
    mode: Mode,
    scene_cfg: &SceneConfig,
    n: usize,
    opts: &DetectOptions,
) -> Result<APResult> {
    let (dets, gts) = validation_detections(model, mode, scene_cfg, n, opts)?;
    evaluate_ap(&dets, &gts, model.config.num_classes)
}

/// One sweep cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub result: APResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Index of the row with the highest AP (first on ties).
    pub best: usize,
}

/// AP for every (score threshold, NMS threshold) pair, score thresholds
/// outermost.
pub fn sweep_inference(
    model: &Detector,
    mode: Mode,
    scene_cfg: &SceneConfig,
    n_val: usize,
    score_thresholds: &[f64],
    nms_thresholds: &[f64],
    max_detections: usize,
) -> Result<SweepTable> {
    let scored = score_validation(model, mode, scene_cfg, n_val)?;
    let gts: Vec<_> = scored.iter().map(|(_, g)| g.clone()).collect();
    let mut rows = Vec::with_capacity(score_thresholds.len() * nms_thresholds.len());
    for &st in score_thresholds {
        for &nt in nms_thresholds {
            let opts = DetectOptions {
                score_threshold: st,
                nms_threshold: nt,
                max_detections,
            };
            let dets: Vec<_> = scored.iter().map(|(s, _)| s.detections(&opts)).collect();
            rows.push(SweepRow {
                score_threshold: st,
                nms_threshold: nt,
                result: evaluate_ap(&dets, &gts, model.config.num_classes)?,
            });
        }
    }
    let best = rows
        .iter()
        .enumerate()
        .fold(0, |b, (i, r)| if r.result.ap > rows[b].result.ap { i } else { b });
    Ok(SweepTable { rows, best })
}

/// Loss and gradients of one scene.
fn scene_step(
    model: &Detector,
    cfg: &TrainConfig,
    prepared: &PreparedScene,
) -> Result<(LossReport, crate::grad::GradMap)> {
    let mut tape = Tape::new();
    let heads = model.forward(&mut tape, &prepared.scene.input)?;
    let graph = detection_loss(
        &mut tape,
        cfg.mode,
        &heads,
        &prepared.labels,
        model.config.num_classes,
        &prepared.box_targets,
        &cfg.focal,
        model.config.gradient_flow,
    )?;
    let report = graph.report(&tape);
    let grads = tape.backward(graph.total)?;
    Ok((report, grads))
}

fn mean_reports(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let steps = reports[0].residual.len();
    LossReport {
        total: mean(&|r| r.total),
        class: mean(&|r| r.class),
        boxes: mean(&|r| r.boxes),
        objectness: reports[0].objectness.map(|_| mean(&|r| r.objectness.unwrap_or(0.0))),
        residual: (0..steps).map(|t| mean(&|r| r.residual[t])).collect(),
        normalizer: mean(&|r| r.normalizer),
        degenerate: reports.iter().any(|r| r.degenerate),
    }
}

/// Trains from `config`, logging every `log_interval` iterations and at the
/// end. Deterministic for a given configuration.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    let cfg = config.normalized()?;
    let model = init_model(&cfg.model)?;
    train_from(&cfg, model, |_| {})
}

/// Trains `model` in place from iteration 0; `on_row` sees each metrics row
/// as it is produced.
pub fn train_from(config: &TrainConfig, mut model: Detector, mut on_row: impl FnMut(&MetricsRow)) -> Result<TrainOutcome> {
    let cfg = config.normalized()?;
    if model.config != cfg.model {
        return Err(Error::Config("model does not match the training configuration".into()));
    }
    let anchors = generate_anchors(&cfg.model.layout)?;
    let probe: Vec<PreparedScene> = if cfg.mode.uses_objectness() {
        (0..cfg.probe_scenes)
            .map(|j| prepare_scene(validation_scene(&cfg.scene, j as u64)?, &anchors))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut velocity: Vec<Tensor> = model.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut metrics = Vec::new();

    for it in 0..=cfg.iterations {
        let mut reports = Vec::with_capacity(cfg.batch_size);
        let mut grad_sum: Vec<Tensor> = velocity.iter().map(|v| Tensor::zeros(v.shape())).collect();
        for b in 0..cfg.batch_size {
            let index = (it * cfg.batch_size + b) as u64;
            let prepared = prepare_scene(training_scene(&cfg.scene, cfg.seed, index)?, &anchors)?;
            let (report, grads) = scene_step(&model, &cfg, &prepared)?;
            if !report.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: it,
                    breakdown: report.breakdown(),
                });
            }
            for (i, acc) in grad_sum.iter_mut().enumerate() {
                let g = grads.get(ParamId(i)).expect("all params registered");
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
            reports.push(report);
        }
        let lr = cfg.learning_rate_at(it);

        let log_now = it % cfg.log_interval == 0 || it == cfg.iterations;
        if log_now {
            let (pos_obj, neg_obj) = if cfg.mode.uses_objectness() {
                probe_objectness(&model, &probe)?
            } else {
                (Vec::new(), Vec::new())
            };
            let eval_now =
                it == cfg.iterations || (cfg.eval_interval > 0 && it % cfg.eval_interval == 0);
            let eval = if eval_now && cfg.val_scenes > 0 {
                match evaluate_model(&model, cfg.mode, &cfg.scene, cfg.val_scenes, &cfg.detect) {
                    Ok(r) => Some(r),
                    Err(Error::NoGroundTruth) => None,
                    Err(e) => return Err(e),
                }
            } else {
                None
            };
            let row = MetricsRow {
                iteration: it,
                learning_rate: lr,
                loss: mean_reports(&reports),
                pos_obj,
                neg_obj,
                eval,
            };
            on_row(&row);
            metrics.push(row);
        }
        if it == cfg.iterations {
            break;
        }

        let scale = 1.0 / cfg.batch_size as f64;
        for (i, (v, g)) in velocity.iter_mut().zip(&grad_sum).enumerate() {
            let p = model.params.by_id_mut(ParamId(i));
            // per-tensor clipping keeps isolated subnets' updates independent
            let norm = scale * math::sqrt(g.data().iter().map(|x| x * x).sum::<f64>());
            let clip = if norm > cfg.max_grad_norm { cfg.max_grad_norm / norm } else { 1.0 };
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = cfg.momentum * *vv + gv * scale * clip;
                *pv -= lr * *vv;
            }
        }
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            iteration: cfg.iterations,
        },
        metrics,
    })
}
