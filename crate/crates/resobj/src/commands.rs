//! Subcommand bodies. Each writes its outputs and returns what it printed,
//! so runs can be replayed and compared byte for byte.

use std::path::Path;

use resobj_core::fidelity::{check_loss, FidelityResult, LossKind, TOLERANCE};
use resobj_core::inference::DetectOptions;
use resobj_core::train::{sweep_inference, train_from, validation_detections, TrainConfig};
use resobj_core::metrics::evaluate_ap;
use resobj_core::model::init_model;

use crate::checkpoint::{load_checkpoint_for, save_checkpoint};
use crate::config::{config_to_toml, load_config};
use crate::dataset::dump_validation_scenes;
use crate::error::{Error, Result};
use crate::experiments::{default_variants, run_ablation, Axis, Variant};
use crate::report::{detections_csv, metrics_csv, sweep_csv};

pub const CHECKPOINT_FILE: &str = "checkpoint.robj";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";

/// Score thresholds and NMS thresholds of the default sweep grid.
pub const SWEEP_SCORE_THRESHOLDS: [f64; 5] = [0.1, 0.05, 0.01, 0.005, 0.001];
pub const SWEEP_NMS_THRESHOLDS: [f64; 2] = [0.45, 0.5];

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn gen_data(config: &Path, count: usize, out: &Path) -> Result<String> {
    let cfg = load_config(config)?;
    let paths = dump_validation_scenes(&cfg.scene, count, out)?;
    Ok(format!("wrote {} scenes to {}\n", paths.len(), out.display()))
}

/// Trains and writes the checkpoint, metrics and normalized config to `out`.
/// Metrics rows are also appended to the returned log as they are produced.
pub fn train(config: &Path, out: &Path) -> Result<String> {
    let cfg = load_config(config)?;
    create_dir(out)?;
    let model = init_model(&cfg.model)?;
    let mut log = String::new();
    let outcome = train_from(&cfg, model, |row| {
        let line = format!("iter {:>6} loss {:.6}\n", row.iteration, row.loss.total);
        eprint!("{line}");
        log += &line;
    })?;
    write(&out.join(CONFIG_FILE), config_to_toml(&cfg).as_bytes())?;
    save_checkpoint(&outcome.checkpoint, &out.join(CHECKPOINT_FILE))?;
    write(
        &out.join(METRICS_FILE),
        &metrics_csv(&outcome.metrics, cfg.model.steps, cfg.mode.uses_objectness()),
    )?;
    if let Some(eval) = outcome.metrics.last().and_then(|r| r.eval) {
        log += &format!("final AP {} AP50 {} AP75 {}\n", eval.ap, eval.ap50, eval.ap75);
    }
    Ok(log)
}

fn load_pair(checkpoint: &Path, config: &Path) -> Result<(TrainConfig, resobj_core::model::Detector)> {
    let cfg = load_config(config)?;
    let ckpt = load_checkpoint_for(checkpoint, &cfg.model)?;
    Ok((cfg, ckpt.model))
}

/// Evaluates on the configured validation scenes; writes detections to
/// `detections_out` when given.
pub fn eval(
    checkpoint: &Path,
    config: &Path,
    score_threshold: Option<f64>,
    nms_threshold: Option<f64>,
    detections_out: Option<&Path>,
) -> Result<String> {
    let (cfg, model) = load_pair(checkpoint, config)?;
    let opts = DetectOptions {
        score_threshold: score_threshold.unwrap_or(cfg.detect.score_threshold),
        nms_threshold: nms_threshold.unwrap_or(cfg.detect.nms_threshold),
        max_detections: cfg.detect.max_detections,
    };
    let (dets, gts) = validation_detections(&model, cfg.mode, &cfg.scene, cfg.val_scenes, &opts)?;
    let r = evaluate_ap(&dets, &gts, model.config.num_classes)?;
    if let Some(path) = detections_out {
        write(path, &detections_csv(&dets))?;
    }
    Ok(format!("AP {} AP50 {} AP75 {}\n", r.ap, r.ap50, r.ap75))
}

/// The sweep table as CSV; also written to `out` when given.
pub fn sweep(
    checkpoint: &Path,
    config: &Path,
    score_thresholds: &[f64],
    nms_thresholds: &[f64],
    out: Option<&Path>,
) -> Result<String> {
    let (cfg, model) = load_pair(checkpoint, config)?;
    let table = sweep_inference(
        &model,
        cfg.mode,
        &cfg.scene,
        cfg.val_scenes,
        score_thresholds,
        nms_thresholds,
        cfg.detect.max_detections,
    )?;
    let csv = sweep_csv(&table);
    if let Some(path) = out {
        write(path, &csv)?;
    }
    Ok(String::from_utf8(csv).expect("csv is utf-8"))
}

/// Runs the ablation; writes `ablation.json` and `ablation.txt` to `out`
/// when given.
pub fn ablate(axis: Axis, config: &Path, seeds: usize, values: Option<&[Variant]>, out: Option<&Path>) -> Result<String> {
    let cfg = load_config(config)?;
    let variants = values.map(<[Variant]>::to_vec).unwrap_or_else(|| default_variants(axis));
    let report = run_ablation(axis, &variants, &cfg, seeds)?;
    let text = report.to_text();
    if let Some(dir) = out {
        create_dir(dir)?;
        let json = serde_json::to_vec_pretty(&report).expect("report serializes");
        write(&dir.join("ablation.json"), &json)?;
        write(&dir.join("ablation.txt"), text.as_bytes())?;
    }
    Ok(text)
}

pub fn format_fidelity(results: &[FidelityResult]) -> String {
    let mut s = String::new();
    for kind in LossKind::ALL {
        let of_kind: Vec<_> = results.iter().filter(|r| r.kind == kind).collect();
        if of_kind.is_empty() {
            continue;
        }
        let worst = of_kind
            .iter()
            .map(|r| r.check.max_relative_error)
            .fold(0.0, f64::max);
        let failed = of_kind.iter().filter(|r| !r.passed()).count();
        s += &format!(
            "{:<7} instances {:>3} worst relative error {:.3e} (tolerance {:.0e}) {}\n",
            kind.name(),
            of_kind.len(),
            worst,
            TOLERANCE,
            if failed == 0 { "ok" } else { "FAILED" }
        );
    }
    s
}

/// Runs the finite-difference suite; a failing loss is an error carrying
/// the report.
pub fn gradcheck(kind: Option<LossKind>, instances: usize) -> Result<String> {
    let kinds: Vec<LossKind> = kind.map(|k| vec![k]).unwrap_or_else(|| LossKind::ALL.to_vec());
    let mut results = Vec::new();
    for k in kinds {
        results.extend(check_loss(k, instances, 0)?);
    }
    let text = format_fidelity(&results);
    if results.iter().all(FidelityResult::passed) {
        Ok(text)
    } else {
        Err(Error::GradCheck(text))
    }
}

pub fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| Error::Usage(format!("`{p}` in list `{s}`: {e}")))
        })
        .collect()
}

/// Parses axis values such as `0,1,2` (steps) or `isolated,coupled`.
pub fn parse_variants(axis: Axis, s: &str) -> Result<Vec<Variant>> {
    use resobj_core::model::{GradientFlow, ResidualSource};
    s.split(',')
        .map(|p| {
            let p = p.trim();
            let v = match axis {
                Axis::Steps => p.parse().ok().map(Variant::Steps),
                Axis::GradientFlow => match p {
                    "isolated" => Some(Variant::GradientFlow(GradientFlow::Isolated)),
                    "coupled" => Some(Variant::GradientFlow(GradientFlow::Coupled)),
                    _ => None,
                },
                Axis::ResidualSource => match p {
                    "objectness_head" => Some(Variant::ResidualSource(ResidualSource::ObjectnessHead)),
                    "class_head" => Some(Variant::ResidualSource(ResidualSource::ClassHead)),
                    _ => None,
                },
            };
            v.ok_or_else(|| Error::Usage(format!("`{p}` is not a value of axis {axis:?}")))
        })
        .collect()
}
