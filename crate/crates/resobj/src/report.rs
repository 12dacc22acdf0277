//! CSV writers for metrics, detections and sweep tables.

use std::io::Write;

use resobj_core::inference::Detection;
use resobj_core::train::{MetricsRow, SweepTable};

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn finish(w: csv::Writer<Vec<u8>>) -> Vec<u8> {
    w.into_inner().expect("in-memory writer")
}

/// One row per log event. Score columns are `pos_obj_t{t}` / `neg_obj_t{t}`
/// for `t` in `0..=steps`; evaluation columns are empty when AP was not
/// computed at that iteration.
pub fn metrics_csv(rows: &[MetricsRow], steps: usize, with_objectness: bool) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["iteration", "learning_rate", "loss_total", "loss_class", "loss_box", "loss_objectness"]
        .map(String::from)
        .to_vec();
    header.extend((1..=steps).map(|t| format!("loss_residual_t{t}")));
    header.extend(["normalizer", "degenerate"].map(String::from));
    if with_objectness {
        header.extend((0..=steps).map(|t| format!("pos_obj_t{t}")));
        header.extend((0..=steps).map(|t| format!("neg_obj_t{t}")));
    }
    header.extend(["ap", "ap50", "ap75"].map(String::from));
    w.write_record(&header).expect("in-memory writer");

    for r in rows {
        let mut rec = vec![
            r.iteration.to_string(),
            r.learning_rate.to_string(),
            r.loss.total.to_string(),
            r.loss.class.to_string(),
            r.loss.boxes.to_string(),
            opt(r.loss.objectness),
        ];
        rec.extend((0..steps).map(|t| opt(r.loss.residual.get(t).copied())));
        rec.push(r.loss.normalizer.to_string());
        rec.push(r.loss.degenerate.to_string());
        if with_objectness {
            rec.extend((0..=steps).map(|t| opt(r.pos_obj.get(t).copied())));
            rec.extend((0..=steps).map(|t| opt(r.neg_obj.get(t).copied())));
        }
        rec.push(opt(r.eval.map(|e| e.ap)));
        rec.push(opt(r.eval.map(|e| e.ap50)));
        rec.push(opt(r.eval.map(|e| e.ap75)));
        w.write_record(&rec).expect("in-memory writer");
    }
    finish(w)
}

/// `scene_id,class,score,x1,y1,x2,y2`, scenes in order, detections in
/// ranked order within a scene.
pub fn detections_csv(per_scene: &[Vec<Detection>]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scene_id", "class", "score", "x1", "y1", "x2", "y2"])
        .expect("in-memory writer");
    for (s, dets) in per_scene.iter().enumerate() {
        for d in dets {
            w.write_record([
                s.to_string(),
                d.class.to_string(),
                d.score.to_string(),
                d.bbox.x1.to_string(),
                d.bbox.y1.to_string(),
                d.bbox.x2.to_string(),
                d.bbox.y2.to_string(),
            ])
            .expect("in-memory writer");
        }
    }
    finish(w)
}

/// One row per threshold pair plus a `best` flag on the argmax row.
pub fn sweep_csv(table: &SweepTable) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["score_threshold", "nms_threshold", "ap", "ap50", "ap75", "best"])
        .expect("in-memory writer");
    for (i, r) in table.rows.iter().enumerate() {
        w.write_record([
            r.score_threshold.to_string(),
            r.nms_threshold.to_string(),
            r.result.ap.to_string(),
            r.result.ap50.to_string(),
            r.result.ap75.to_string(),
            (i == table.best).to_string(),
        ])
        .expect("in-memory writer");
    }
    finish(w)
}

/// Writes `bytes` to stdout.
pub fn emit(bytes: &[u8]) -> std::io::Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(bytes)?;
    out.flush()
}
