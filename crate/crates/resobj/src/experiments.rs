//! Multi-seed ablations over one configuration axis.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use resobj_core::losses::Mode;
use resobj_core::metrics::APResult;
use resobj_core::model::{GradientFlow, ResidualSource};
use resobj_core::train::{train, TrainConfig};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    GradientFlow,
    ResidualSource,
    Steps,
}

impl Axis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gradient-flow" | "gradient_flow" => Some(Self::GradientFlow),
            "residual-source" | "residual_source" => Some(Self::ResidualSource),
            "steps" => Some(Self::Steps),
            _ => None,
        }
    }
}

/// One value along an axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    GradientFlow(GradientFlow),
    ResidualSource(ResidualSource),
    /// `0` trains plain objectness, larger values residual objectness.
    Steps(usize),
}

impl Variant {
    pub fn label(&self) -> String {
        match self {
            Self::GradientFlow(GradientFlow::Isolated) => "isolated".into(),
            Self::GradientFlow(GradientFlow::Coupled) => "coupled".into(),
            Self::ResidualSource(ResidualSource::ObjectnessHead) => "objectness_head".into(),
            Self::ResidualSource(ResidualSource::ClassHead) => "class_head".into(),
            Self::Steps(t) => format!("T={t}"),
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match *self {
            Self::GradientFlow(f) => cfg.model.gradient_flow = f,
            Self::ResidualSource(s) => cfg.model.residual_source = s,
            Self::Steps(0) => {
                cfg.mode = Mode::Obj;
                cfg.model.steps = 0;
            }
            Self::Steps(t) => {
                cfg.mode = Mode::ResObj;
                cfg.model.steps = t;
            }
        }
        cfg
    }
}

pub fn default_variants(axis: Axis) -> Vec<Variant> {
    match axis {
        Axis::GradientFlow => vec![
            Variant::GradientFlow(GradientFlow::Isolated),
            Variant::GradientFlow(GradientFlow::Coupled),
        ],
        Axis::ResidualSource => vec![
            Variant::ResidualSource(ResidualSource::ObjectnessHead),
            Variant::ResidualSource(ResidualSource::ClassHead),
        ],
        Axis::Steps => (0..=3).map(Variant::Steps).collect(),
    }
}

/// Seed `s` of a run offsets both the initialization and the training
/// stream seed of the base configuration.
pub fn seeded(cfg: &TrainConfig, s: u64) -> TrainConfig {
    let mut c = cfg.clone();
    c.model.seed = cfg.model.seed.wrapping_add(s);
    c.seed = cfg.seed.wrapping_add(s);
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub eval: APResult,
    /// Final-iteration average objectness of probe positives per step.
    pub pos_obj: Vec<f64>,
    pub neg_obj: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub label: String,
    pub variant: Variant,
    /// Dotted config paths in which this variant differs from the base.
    pub config_diff: Vec<String>,
    pub runs: Vec<SeedOutcome>,
    pub mean_ap: f64,
    /// Sample standard deviation of AP across seeds.
    pub spread_ap: f64,
    pub mean_ap50: f64,
    pub mean_ap75: f64,
    /// Seed-averaged `pos_obj` / `neg_obj` curves.
    pub mean_pos_obj: Vec<f64>,
    pub mean_neg_obj: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: Axis,
    pub seeds: usize,
    pub variants: Vec<VariantSummary>,
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, serde_json::Value>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

/// Dotted paths of the fields that differ between two configurations.
pub fn config_diff(a: &TrainConfig, b: &TrainConfig) -> Vec<String> {
    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    flatten("", &serde_json::to_value(a).expect("config serializes"), &mut fa);
    flatten("", &serde_json::to_value(b).expect("config serializes"), &mut fb);
    fa.keys()
        .chain(fb.keys())
        .filter(|k| fa.get(*k) != fb.get(*k))
        .cloned()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn mean(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count();
    v.sum::<f64>() / n.max(1) as f64
}

/// Trains every variant with seeds `0..seeds` and summarizes final AP and
/// objectness curves. Runs are independent and may execute in parallel;
/// results are collected in (variant, seed) order.
pub fn run_ablation(axis: Axis, variants: &[Variant], base: &TrainConfig, seeds: usize) -> Result<AblationReport> {
    if seeds < 3 {
        return Err(Error::Usage(format!("an ablation needs at least 3 seeds, got {seeds}")));
    }
    let base = base.normalized()?;
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| (0..seeds as u64).map(move |s| (v, s)))
        .collect();
    let outcomes: Vec<Result<SeedOutcome>> = jobs
        .par_iter()
        .map(|&(v, s)| {
            let cfg = seeded(&variants[v].apply(&base), s);
            let out = train(&cfg)?;
            let last = out.metrics.last().expect("final row is always logged");
            let eval = last
                .eval
                .ok_or_else(|| Error::Usage("ablation runs need val_scenes > 0".into()))?;
            Ok(SeedOutcome {
                seed: s,
                eval,
                pos_obj: last.pos_obj.clone(),
                neg_obj: last.neg_obj.clone(),
            })
        })
        .collect();
    let mut outcomes = outcomes.into_iter();

    let mut summaries = Vec::with_capacity(variants.len());
    for variant in variants {
        let runs: Vec<SeedOutcome> = outcomes.by_ref().take(seeds).collect::<Result<_>>()?;
        let aps = runs.iter().map(|r| r.eval.ap);
        let mean_ap = mean(aps.clone());
        let spread_ap = (aps.map(|a| (a - mean_ap).powi(2)).sum::<f64>() / (seeds - 1) as f64).sqrt();
        let steps = runs[0].pos_obj.len();
        summaries.push(VariantSummary {
            label: variant.label(),
            variant: *variant,
            config_diff: config_diff(&base, &variant.apply(&base)),
            mean_ap,
            spread_ap,
            mean_ap50: mean(runs.iter().map(|r| r.eval.ap50)),
            mean_ap75: mean(runs.iter().map(|r| r.eval.ap75)),
            mean_pos_obj: (0..steps).map(|t| mean(runs.iter().map(|r| r.pos_obj[t]))).collect(),
            mean_neg_obj: (0..steps).map(|t| mean(runs.iter().map(|r| r.neg_obj[t]))).collect(),
            runs,
        });
    }
    Ok(AblationReport {
        axis,
        seeds,
        variants: summaries,
    })
}

impl AblationReport {
    /// A fixed-width table: one line per variant.
    pub fn to_text(&self) -> String {
        let mut s = format!("axis: {:?}, seeds: {}\n", self.axis, self.seeds);
        s += &format!(
            "{:<16} {:>16} {:>8} {:>8}  {:<28} {:<28} {}\n",
            "variant", "AP (mean±sd)", "AP50", "AP75", "pos_obj by step", "neg_obj by step", "config diff"
        );
        let curve = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
        for v in &self.variants {
            s += &format!(
                "{:<16} {:>9.4}±{:<6.4} {:>8.4} {:>8.4}  {:<28} {:<28} {}\n",
                v.label,
                v.mean_ap,
                v.spread_ap,
                v.mean_ap50,
                v.mean_ap75,
                curve(&v.mean_pos_obj),
                curve(&v.mean_neg_obj),
                v.config_diff.join(",")
            );
        }
        s
    }
}
