//! Synthetic detection scenes with heavy foreground-background imbalance.
//!
//! Scene `i` of a configuration is drawn from its own ChaCha stream
//! (`base_seed`, stream `i`), so any scene can be regenerated without the
//! ones before it. Training scenes use even indices of a run-specific seed;
//! validation scenes use odd indices of the configured seed.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::anchors::{assign_labels, generate_anchors, AnchorLayout, AssignThresholds, BBox, GroundTruth};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side lengths in cells, inclusive range.
    pub min_size: usize,
    pub max_size: usize,
    pub noise_std: f64,
    pub base_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            grid_h: 32,
            grid_w: 32,
            channels: 3,
            num_classes: 3,
            min_objects: 1,
            max_objects: 3,
            min_size: 3,
            max_size: 7,
            noise_std: 0.6,
            base_seed: 2024,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.channels == 0 {
            return Err(Error::Config("scene needs at least one class and one channel".into()));
        }
        if self.min_objects > self.max_objects || self.min_size > self.max_size || self.min_size == 0 {
            return Err(Error::Config("scene object ranges must satisfy min <= max, size >= 1".into()));
        }
        if self.max_size > self.grid_h || self.max_size > self.grid_w {
            return Err(Error::Config(format!(
                "objects up to {} cells do not fit a {}x{} grid",
                self.max_size, self.grid_h, self.grid_w
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `[C, H, W]`.
    pub input: Tensor,
    pub objects: Vec<GroundTruth>,
}

/// Channel intensity of class `class` (1-based): the class's own channel is
/// at full intensity, the others at a level that distinguishes classes
/// sharing a channel.
pub fn class_pattern(class: usize, channels: usize) -> Vec<f64> {
    let own = (class - 1) % channels;
    let level = (class - 1) / channels;
    (0..channels)
        .map(|c| {
            if c == own {
                1.0
            } else {
                let phase = (level * (c + 1)) as f64 * 0.618_033_988_749_895;
                0.2 + 0.6 * (phase - libm::floor(phase))
            }
        })
        .collect()
}

const PLACEMENT_TRIES: usize = 50;

fn overlaps(a: &BBox, b: &BBox) -> bool {
    a.x1 < b.x2 && b.x1 < a.x2 && a.y1 < b.y2 && b.y1 < a.y2
}

/// Scene `index` of `config`.
pub fn generate_scene(config: &SceneConfig, index: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.base_seed);
    rng.set_stream(index);
    let (h, w, c) = (config.grid_h, config.grid_w, config.channels);

    let count = rng.random_range(config.min_objects..=config.max_objects);
    let mut objects: Vec<GroundTruth> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(1..=config.num_classes);
        let bw = rng.random_range(config.min_size..=config.max_size);
        let bh = rng.random_range(config.min_size..=config.max_size);
        for _ in 0..PLACEMENT_TRIES {
            let x0 = rng.random_range(0..=w - bw);
            let y0 = rng.random_range(0..=h - bh);
            let bbox = BBox::new(x0 as f64, y0 as f64, (x0 + bw) as f64, (y0 + bh) as f64);
            if objects.iter().all(|o| !overlaps(&o.bbox, &bbox)) {
                objects.push(GroundTruth { bbox, class });
                break;
            }
        }
    }

    let mut data = vec![0.0; c * h * w];
    for obj in &objects {
        let pattern = class_pattern(obj.class, c);
        let (x0, y0, x1, y1) = (
            obj.bbox.x1 as usize,
            obj.bbox.y1 as usize,
            obj.bbox.x2 as usize,
            obj.bbox.y2 as usize,
        );
        for (ch, &v) in pattern.iter().enumerate() {
            for y in y0..y1 {
                data[(ch * h + y) * w + x0..(ch * h + y) * w + x1].fill(v);
            }
        }
    }
    if config.noise_std > 0.0 {
        for v in &mut data {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += config.noise_std * n;
        }
    }
    Ok(Scene {
        input: Tensor::new(vec![c, h, w], data)?,
        objects,
    })
}

/// Mixes a run seed into the scene seed so different runs see different
/// training streams.
pub fn run_stream_seed(base_seed: u64, run_seed: u64) -> u64 {
    let mut z = base_seed ^ run_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `i`-th training scene of run `run_seed`.
pub fn training_scene(config: &SceneConfig, run_seed: u64, i: u64) -> Result<Scene> {
    let cfg = SceneConfig {
        base_seed: run_stream_seed(config.base_seed, run_seed),
        ..config.clone()
    };
    generate_scene(&cfg, 2 * i)
}

/// `j`-th validation scene.
pub fn validation_scene(config: &SceneConfig, j: u64) -> Result<Scene> {
    generate_scene(config, 2 * j + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceStats {
    pub mean_positives: f64,
    pub mean_negatives: f64,
    /// `P / (P + N)` over all scenes.
    pub positive_fraction: f64,
    /// Fraction of objects matched by at least one positive anchor.
    pub object_coverage: f64,
}

/// Anchor assignment statistics over validation scenes `0..n_scenes`.
pub fn imbalance_stats(config: &SceneConfig, layout: &AnchorLayout, n_scenes: usize) -> Result<ImbalanceStats> {
    if n_scenes == 0 {
        return Err(Error::Contract("imbalance_stats needs at least one scene".into()));
    }
    let anchors = generate_anchors(layout)?;
    let th = AssignThresholds::default();
    let (mut p, mut n, mut objects, mut covered) = (0usize, 0usize, 0usize, 0usize);
    for j in 0..n_scenes {
        let scene = validation_scene(config, j as u64)?;
        let labels = assign_labels(&anchors, &scene.objects, &th)?;
        p += labels.positives;
        n += labels.negatives;
        objects += scene.objects.len();
        let mut hit = vec![false; scene.objects.len()];
        for s in &labels.status {
            if let crate::anchors::AnchorStatus::Positive { gt, .. } = s {
                hit[*gt] = true;
            }
        }
        covered += hit.iter().filter(|&&h| h).count();
    }
    let total = (p + n).max(1) as f64;
    Ok(ImbalanceStats {
        mean_positives: p as f64 / n_scenes as f64,
        mean_negatives: n as f64 / n_scenes as f64,
        positive_fraction: p as f64 / total,
        object_coverage: if objects == 0 { 1.0 } else { covered as f64 / objects as f64 },
    })
}
