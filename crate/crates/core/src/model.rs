//! The toy detector and the objectness refinement cascade.
//!
//! ```text
//! input ─ trunk ─┬─ class subnet ─┬─ class projection          (K per anchor)
//!                │                └─ objectness subnet ─┬─ o0    (1 per anchor)
//!                │                                      └─ residual subnets r1..rT
//!                └─ box subnet ─ box projection          (4 per anchor)
//! ```
//!
//! Residual subnets read the penultimate features of either the objectness
//! subnet or the class subnet. With [`GradientFlow::Isolated`] those features
//! enter through a stop-gradient, so residual losses never reach the
//! objectness, class or trunk parameters.
//!
//! All activations are channels-last (`[H, W, C]`), so a head's output
//! `[H, W, A * n]` is already in anchor order.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorLayout;
use crate::error::{Error, Result};
use crate::grad::{NodeId, ParamId, Tape};
use crate::math;
use crate::tensor::Tensor;

/// Which head's penultimate features feed the residual subnets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualSource {
    ObjectnessHead,
    ClassHead,
}

/// Whether residual losses may update the subnets upstream of the residual
/// subnets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientFlow {
    Isolated,
    Coupled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub input_channels: usize,
    pub layout: AnchorLayout,
    /// Number of residual refinement steps `T`.
    pub steps: usize,
    pub trunk_channels: usize,
    /// Convolution layers per subnet before its 1x1 projection.
    pub head_depth: usize,
    /// Initial class probability.
    pub init_prior: f64,
    pub residual_source: ResidualSource,
    pub gradient_flow: GradientFlow,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            input_channels: 3,
            layout: AnchorLayout::default(),
            steps: 2,
            trunk_channels: 8,
            head_depth: 2,
            init_prior: 0.01,
            residual_source: ResidualSource::ObjectnessHead,
            gradient_flow: GradientFlow::Isolated,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if self.input_channels == 0 || self.trunk_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(self.init_prior > 0.0 && self.init_prior < 1.0) {
            return Err(Error::Config(format!(
                "init_prior must lie in (0, 1), got {}",
                self.init_prior
            )));
        }
        self.layout.validate()
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.layout.per_cell()
    }

    pub fn total_anchors(&self) -> usize {
        self.layout.total()
    }

    /// Initial objectness probability, `1/K` kept inside
    /// `[init_prior, 1 - init_prior]` so that `K = 1` has a finite bias.
    pub fn objectness_prior(&self) -> f64 {
        let p = 1.0 / self.num_classes as f64;
        p.clamp(self.init_prior.min(0.5), 1.0 - self.init_prior.min(0.5))
    }
}

/// Named parameter tensors in a fixed order; a parameter's position is its
/// [`ParamId`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push((name.into(), value));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn by_id(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn by_id_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Ids of every parameter whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, (n, _))| n.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }
}

/// Subnet name prefixes used in parameter names.
pub mod subnet {
    pub const TRUNK: &str = "trunk.";
    pub const CLASS: &str = "class.";
    pub const BOX: &str = "box.";
    pub const OBJECTNESS: &str = "obj.";

    /// Prefix of residual subnet `t` (1-based).
    pub fn residual(t: usize) -> alloc::string::String {
        alloc::format!("res{t}.")
    }
}

/// Shape of one parameter, in creation order.
struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Clone, Copy)]
enum Init {
    /// He-normal, `std = sqrt(2 / fan_in)`.
    Hidden { fan_in: usize },
    Gaussian(f64),
    Constant(f64),
}

fn param_specs(cfg: &ModelConfig) -> Vec<Spec> {
    let f = cfg.trunk_channels;
    let a = cfg.anchors_per_cell();
    let k = cfg.num_classes;
    let mut specs = Vec::new();

    let conv_stack = |specs: &mut Vec<Spec>, prefix: &str, depth: usize, cin: usize| {
        for i in 0..depth {
            let ci = if i == 0 { cin } else { f };
            specs.push(Spec {
                name: format!("{prefix}{i}.weight"),
                shape: vec![3, 3, ci, f],
                init: Init::Hidden { fan_in: 9 * ci },
            });
            specs.push(Spec {
                name: format!("{prefix}{i}.bias"),
                shape: vec![f],
                init: Init::Constant(0.0),
            });
        }
    };
    let projection = |specs: &mut Vec<Spec>, prefix: &str, out: usize, w: Init, b: Init| {
        specs.push(Spec {
            name: format!("{prefix}out.weight"),
            shape: vec![f, out],
            init: w,
        });
        specs.push(Spec {
            name: format!("{prefix}out.bias"),
            shape: vec![out],
            init: b,
        });
    };

    conv_stack(&mut specs, subnet::TRUNK, 2, cfg.input_channels);

    conv_stack(&mut specs, subnet::CLASS, cfg.head_depth, f);
    let class_bias = -math::ln((1.0 - cfg.init_prior) / cfg.init_prior);
    projection(&mut specs, subnet::CLASS, a * k, Init::Gaussian(0.01), Init::Constant(class_bias));

    conv_stack(&mut specs, subnet::BOX, cfg.head_depth, f);
    projection(&mut specs, subnet::BOX, a * 4, Init::Gaussian(0.01), Init::Constant(0.0));

    conv_stack(&mut specs, subnet::OBJECTNESS, cfg.head_depth, f);
    let q = cfg.objectness_prior();
    let obj_bias = -math::ln((1.0 - q) / q);
    projection(&mut specs, subnet::OBJECTNESS, a, Init::Gaussian(0.01), Init::Constant(obj_bias));

    for t in 1..=cfg.steps {
        let prefix = subnet::residual(t);
        conv_stack(&mut specs, &prefix, cfg.head_depth, f);
        projection(&mut specs, &prefix, a, Init::Constant(0.0), Init::Constant(0.0));
    }
    specs
}

/// Model parameters drawn from `config.seed`.
pub fn init_model(config: &ModelConfig) -> Result<Detector> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParamSet::new();
    for spec in param_specs(config) {
        let n: usize = spec.shape.iter().product();
        let data: Vec<f64> = match spec.init {
            Init::Hidden { fan_in } => {
                let std = math::sqrt(2.0 / fan_in as f64);
                (0..n).map(|_| std * sample_normal(&mut rng)).collect()
            }
            Init::Gaussian(std) => (0..n).map(|_| std * sample_normal(&mut rng)).collect(),
            Init::Constant(c) => vec![c; n],
        };
        params.push(spec.name, Tensor::new(spec.shape, data)?);
    }
    Ok(Detector {
        config: config.clone(),
        params,
    })
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Head outputs for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    /// `[H, W, A * K]`.
    pub class_logits: Tensor,
    /// `[H, W, A * 4]`.
    pub box_deltas: Tensor,
    /// `[H, W, A]`.
    pub obj_logits: Tensor,
    /// `T` tensors of shape `[H, W, A]`.
    pub residual_logits: Vec<Tensor>,
}

/// Head outputs as tape nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadNodes {
    pub class_logits: NodeId,
    pub box_deltas: NodeId,
    pub obj_logits: NodeId,
    pub residual_logits: Vec<NodeId>,
}

impl HeadNodes {
    pub fn values(&self, tape: &Tape) -> HeadOutputs {
        HeadOutputs {
            class_logits: tape.value(self.class_logits).clone(),
            box_deltas: tape.value(self.box_deltas).clone(),
            obj_logits: tape.value(self.obj_logits).clone(),
            residual_logits: self
                .residual_logits
                .iter()
                .map(|&r| tape.value(r).clone())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Detector {
    /// Adopts `params` for `config`, checking every expected tensor's
    /// presence and shape.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        let mut ordered = ParamSet::new();
        for spec in specs {
            let t = params
                .get(&spec.name)
                .ok_or_else(|| Error::MissingParam(spec.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::ParamShape {
                    name: spec.name,
                    expected: spec.shape,
                    found: t.shape().to_vec(),
                });
            }
            ordered.push(spec.name, t.clone());
        }
        if ordered.len() != params.len() {
            let extra = params
                .iter()
                .find(|(n, _)| ordered.get(n).is_none())
                .map(|(n, _)| String::from(n))
                .unwrap_or_default();
            return Err(Error::Config(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self {
            config,
            params: ordered,
        })
    }

    /// The same network with `steps` residual subnets. Existing subnets are
    /// kept; new ones start zero-initialized at their output layer.
    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        let mut cfg = self.config.clone();
        cfg.steps = steps;
        let fresh = init_model(&cfg)?;
        let mut params = ParamSet::new();
        for (name, t) in fresh.params.iter() {
            params.push(name, self.params.get(name).unwrap_or(t).clone());
        }
        Self::from_params(cfg, params)
    }

    /// Registers every parameter on `tape` as `ParamId(position)`.
    pub fn register(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, (_, t))| tape.param(ParamId(i), t))
            .collect()
    }

    /// Forward pass on an input of shape `[C, H, W]`.
    pub fn forward(&self, tape: &mut Tape, input: &Tensor) -> Result<HeadNodes> {
        let leaves = self.register(tape);
        self.forward_with(tape, &leaves, input)
    }

    /// Forward pass using already registered parameter leaves (one per
    /// parameter, in [`ParamSet`] order).
    pub fn forward_with(&self, tape: &mut Tape, leaves: &[NodeId], input: &Tensor) -> Result<HeadNodes> {
        let cfg = &self.config;
        let (h, w) = (cfg.layout.grid_h, cfg.layout.grid_w);
        if input.shape() != [cfg.input_channels, h, w] {
            return Err(Error::Contract(format!(
                "scene input has shape {:?}, model expects {:?}",
                input.shape(),
                [cfg.input_channels, h, w]
            )));
        }
        if leaves.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} parameter leaves supplied, model has {}",
                leaves.len(),
                self.params.len()
            )));
        }
        let net = Net {
            params: &self.params,
            leaves,
            h,
            w,
        };
        let x = tape.constant(chw_to_hwc(input));
        let trunk = net.conv_stack(tape, subnet::TRUNK, 2, x)?;

        let class_feat = net.conv_stack(tape, subnet::CLASS, cfg.head_depth, trunk)?;
        let class_logits = net.projection(tape, subnet::CLASS, class_feat)?;

        let box_feat = net.conv_stack(tape, subnet::BOX, cfg.head_depth, trunk)?;
        let box_deltas = net.projection(tape, subnet::BOX, box_feat)?;

        let obj_feat = net.conv_stack(tape, subnet::OBJECTNESS, cfg.head_depth, class_feat)?;
        let obj_logits = net.projection(tape, subnet::OBJECTNESS, obj_feat)?;

        let source = match cfg.residual_source {
            ResidualSource::ObjectnessHead => obj_feat,
            ResidualSource::ClassHead => class_feat,
        };
        let mut residual_logits = Vec::with_capacity(cfg.steps);
        for t in 1..=cfg.steps {
            let input = match cfg.gradient_flow {
                GradientFlow::Isolated => tape.stop_gradient(source)?,
                GradientFlow::Coupled => source,
            };
            let prefix = subnet::residual(t);
            let feat = net.conv_stack(tape, &prefix, cfg.head_depth, input)?;
            residual_logits.push(net.projection(tape, &prefix, feat)?);
        }

        Ok(HeadNodes {
            class_logits,
            box_deltas,
            obj_logits,
            residual_logits,
        })
    }

    /// Forward pass returning plain tensors.
    pub fn predict(&self, input: &Tensor) -> Result<HeadOutputs> {
        let mut tape = Tape::new();
        let nodes = self.forward(&mut tape, input)?;
        Ok(nodes.values(&tape))
    }
}

struct Net<'a> {
    params: &'a ParamSet,
    leaves: &'a [NodeId],
    h: usize,
    w: usize,
}

impl Net<'_> {
    fn leaf(&self, name: &str) -> Result<NodeId> {
        self.params
            .id(name)
            .map(|id| self.leaves[id.0])
            .ok_or_else(|| Error::MissingParam(name.into()))
    }

    fn conv_stack(&self, tape: &mut Tape, prefix: &str, depth: usize, mut x: NodeId) -> Result<NodeId> {
        for i in 0..depth {
            let wt = self.leaf(&format!("{prefix}{i}.weight"))?;
            let b = self.leaf(&format!("{prefix}{i}.bias"))?;
            let y = tape.conv2d(x, wt)?;
            let shape = tape.value(y).shape().to_vec();
            let bb = tape.broadcast(b, &shape)?;
            let y = tape.add(y, bb)?;
            x = tape.relu(y)?;
        }
        Ok(x)
    }

    fn projection(&self, tape: &mut Tape, prefix: &str, x: NodeId) -> Result<NodeId> {
        let wt = self.leaf(&format!("{prefix}out.weight"))?;
        let b = self.leaf(&format!("{prefix}out.bias"))?;
        let c = *tape.value(x).shape().last().expect("HWC features");
        let out = tape.value(wt).shape()[1];
        let flat = tape.reshape(x, &[self.h * self.w, c])?;
        let y = tape.matmul(flat, wt)?;
        let bb = tape.broadcast(b, &[self.h * self.w, out])?;
        let y = tape.add(y, bb)?;
        Ok(tape.reshape(y, &[self.h, self.w, out])?)
    }
}

/// `[C, H, W]` to `[H, W, C]`.
pub fn chw_to_hwc(input: &Tensor) -> Tensor {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let src = input.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(y * w + x) * c + ch] = src[(ch * h + y) * w + x];
            }
        }
    }
    Tensor::new(vec![h, w, c], out).expect("same size")
}

/// Per-step objectness logits and refinement masks from the training-time
/// cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    /// `o_0 .. o_T`.
    pub logits: Vec<NodeId>,
    /// `masks[t - 1]` is the set of anchors refined at step `t`.
    pub masks: Vec<Vec<bool>>,
    /// No positive anchors: nothing was refined.
    pub degenerate: bool,
}

/// Training-time refinement. At step `t` the anchors scoring at least the
/// lowest-scoring positive under `o_{t-1}` (every positive plus the
/// negatives that are not yet well separated) get `o_t = o_{t-1} + r_t`;
/// all others keep `o_{t-1}`. Under [`GradientFlow::Isolated`] `o_{t-1}`
/// enters the sum through a stop-gradient.
pub fn refine_objectness_train(
    tape: &mut Tape,
    o0: NodeId,
    residuals: &[NodeId],
    positive: &[bool],
    flow: GradientFlow,
) -> Result<Refinement> {
    let n = tape.value(o0).len();
    if positive.len() != n {
        return Err(Error::Contract(format!(
            "positive mask has {} entries for {} anchors",
            positive.len(),
            n
        )));
    }
    let shape = tape.value(o0).shape().to_vec();
    let degenerate = !positive.iter().any(|&p| p);
    let mut logits = vec![o0];
    let mut masks = Vec::with_capacity(residuals.len());
    for &r in residuals {
        let prev = *logits.last().expect("o0");
        if tape.value(r).shape() != shape.as_slice() {
            return Err(Error::Contract(format!(
                "residual logits {:?} do not match objectness logits {:?}",
                tape.value(r).shape(),
                shape
            )));
        }
        // The mask is a selection and carries no gradient; deriving it from
        // a stop-gradient copy lets gradient checks hold it fixed.
        let gate = tape.stop_gradient(prev)?;
        // sigmoid is strictly increasing, so comparing logits selects the
        // same anchors as comparing scores without saturation ties
        let values = tape.value(gate).data();
        let min_positive = values
            .iter()
            .zip(positive)
            .filter(|(_, &p)| p)
            .map(|(&v, _)| v)
            .fold(f64::INFINITY, f64::min);
        let mask: Vec<bool> = values.iter().map(|&v| !degenerate && v >= min_positive).collect();

        let base = match flow {
            GradientFlow::Isolated => gate,
            GradientFlow::Coupled => prev,
        };
        let m = tape.constant(Tensor::new(
            shape.clone(),
            mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )?);
        let masked = tape.mul(m, r)?;
        logits.push(tape.add(base, masked)?);
        masks.push(mask);
    }
    Ok(Refinement {
        logits,
        masks,
        degenerate,
    })
}

/// Inference-time objectness: `o_0 + sum_t r_t` over every anchor.
pub fn refine_objectness_infer(o0: &Tensor, residuals: &[Tensor]) -> Result<Tensor> {
    let mut out = o0.clone();
    for r in residuals {
        if r.shape() != o0.shape() {
            return Err(Error::Contract(format!(
                "residual logits {:?} do not match objectness logits {:?}",
                r.shape(),
                o0.shape()
            )));
        }
        for (o, v) in out.data_mut().iter_mut().zip(r.data()) {
            *o += v;
        }
    }
    Ok(out)
}

/// Same cumulative sums as [`refine_objectness_infer`], one per step `0..=T`.
pub fn objectness_per_step(o0: &Tensor, residuals: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut steps = vec![o0.clone()];
    for t in 1..=residuals.len() {
        steps.push(refine_objectness_infer(o0, &residuals[..t])?);
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::AnchorTemplate;

    fn small_config(steps: usize) -> ModelConfig {
        ModelConfig {
            num_classes: 2,
            input_channels: 2,
            layout: AnchorLayout {
                grid_h: 4,
                grid_w: 5,
                templates: vec![AnchorTemplate::new(2.0, 1.0), AnchorTemplate::new(3.0, 1.0)],
            },
            steps,
            trunk_channels: 3,
            head_depth: 1,
            ..ModelConfig::default()
        }
    }

    fn input(cfg: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.input_channels * cfg.layout.grid_h * cfg.layout.grid_w;
        Tensor::new(
            vec![cfg.input_channels, cfg.layout.grid_h, cfg.layout.grid_w],
            (0..n).map(|_| sample_normal(&mut rng)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn output_shapes() {
        let cfg = small_config(2);
        let model = init_model(&cfg).unwrap();
        let out = model.predict(&input(&cfg, 1)).unwrap();
        assert_eq!(out.class_logits.shape(), &[4, 5, 4]);
        assert_eq!(out.box_deltas.shape(), &[4, 5, 8]);
        assert_eq!(out.obj_logits.shape(), &[4, 5, 2]);
        assert_eq!(out.residual_logits.len(), 2);
    }

    #[test]
    fn zero_steps_has_no_residuals() {
        let cfg = small_config(0);
        let out = init_model(&cfg).unwrap().predict(&input(&cfg, 1)).unwrap();
        assert!(out.residual_logits.is_empty());
    }

    #[test]
    fn residuals_start_at_exactly_zero() {
        let cfg = small_config(3);
        let out = init_model(&cfg).unwrap().predict(&input(&cfg, 2)).unwrap();
        for r in &out.residual_logits {
            assert!(r.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn two_classes_start_at_half_objectness() {
        let cfg = small_config(0);
        let out = init_model(&cfg).unwrap().predict(&input(&cfg, 3)).unwrap();
        let mean = out.obj_logits.data().iter().map(|&v| math::sigmoid(v)).sum::<f64>()
            / out.obj_logits.len() as f64;
        assert!((mean - 0.5).abs() < 0.05, "{mean}");
    }

    #[test]
    fn zero_weights_give_prior_scores() {
        let cfg = small_config(1);
        let mut model = init_model(&cfg).unwrap();
        for id in model.params.ids_with_prefix(subnet::TRUNK) {
            model.params.by_id_mut(id).data_mut().fill(0.0);
        }
        let out = model.predict(&input(&cfg, 4)).unwrap();
        for &v in out.class_logits.data() {
            assert!((math::sigmoid(v) - 0.01).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let cfg = small_config(0);
        let model = init_model(&cfg).unwrap();
        assert!(matches!(
            model.predict(&Tensor::zeros(&[2, 5, 4])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = small_config(2);
        assert_eq!(init_model(&cfg).unwrap(), init_model(&cfg).unwrap());
    }

    #[test]
    fn from_params_reports_mismatched_tensor() {
        let small = init_model(&small_config(0)).unwrap();
        let mut other = small_config(0);
        other.num_classes = 5;
        match Detector::from_params(other, small.params.clone()) {
            Err(Error::ParamShape { name, .. }) => assert_eq!(name, "class.out.weight"),
            r => panic!("unexpected {r:?}"),
        }
    }

    #[test]
    fn with_steps_keeps_shared_parameters() {
        let model = init_model(&small_config(2)).unwrap();
        let twin = model.with_steps(0).unwrap();
        assert_eq!(twin.params.len() + 2 * 4, model.params.len());
        for (name, t) in twin.params.iter() {
            assert_eq!(model.params.get(name), Some(t));
        }
    }

    fn refine_values(o0: &[f64], residuals: &[&[f64]], positive: &[bool]) -> (Vec<Vec<f64>>, Vec<Vec<bool>>) {
        let mut tape = Tape::new();
        let o = tape.constant(Tensor::from_vec(o0.to_vec()));
        let rs: Vec<_> = residuals
            .iter()
            .map(|r| tape.constant(Tensor::from_vec(r.to_vec())))
            .collect();
        let refined = refine_objectness_train(&mut tape, o, &rs, positive, GradientFlow::Isolated).unwrap();
        (
            refined.logits.iter().map(|&n| tape.value(n).data().to_vec()).collect(),
            refined.masks,
        )
    }

    #[test]
    fn zero_residuals_are_identity() {
        let o0 = [0.3, -2.0, 1.5, 0.0];
        let (logits, _) = refine_values(&o0, &[&[0.0; 4], &[0.0; 4]], &[true, false, false, true]);
        assert_eq!(logits.last().unwrap().as_slice(), &o0);
    }

    #[test]
    fn mask_keeps_positives_and_hard_negatives() {
        // positive at score 0.6, negatives at 0.7 and 0.1
        let logit = |p: f64| libm::log(p / (1.0 - p));
        let o0 = [logit(0.6), logit(0.7), logit(0.1)];
        let (logits, masks) = refine_values(&o0, &[&[1.0, 1.0, 1.0]], &[true, false, false]);
        assert_eq!(masks[0], vec![true, true, false]);
        assert_eq!(logits[1][2], o0[2]);
        assert!((logits[1][0] - (o0[0] + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn masked_step_from_zero() {
        let (logits, _) = refine_values(&[0.0], &[&[1.0]], &[true]);
        assert!((math::sigmoid(logits[1][0]) - 0.7310585786300049).abs() < 1e-12);
    }

    #[test]
    fn no_positives_is_degenerate() {
        let mut tape = Tape::new();
        let o = tape.constant(Tensor::from_vec(vec![0.5, -0.5]));
        let r = tape.constant(Tensor::from_vec(vec![3.0, 3.0]));
        let refined = refine_objectness_train(&mut tape, o, &[r], &[false, false], GradientFlow::Coupled).unwrap();
        assert!(refined.degenerate);
        assert_eq!(refined.masks[0], vec![false, false]);
        assert_eq!(tape.value(refined.logits[1]).data(), &[0.5, -0.5]);
    }

    #[test]
    fn inference_sums_all_steps() {
        let o = Tensor::from_vec(vec![0.0]);
        let r1 = Tensor::from_vec(vec![2.0]);
        let r2 = Tensor::from_vec(vec![-2.0]);
        let out = refine_objectness_infer(&o, &[r1, r2]).unwrap();
        assert_eq!(out.data(), &[0.0]);
        assert_eq!(math::sigmoid(out.data()[0]), 0.5);
        assert_eq!(refine_objectness_infer(&o, &[]).unwrap(), o);
    }

    #[test]
    fn inference_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut draw = || Tensor::from_vec((0..50).map(|_| 3.0 * sample_normal(&mut rng)).collect());
        let (o, r1, r2) = (draw(), draw(), draw());
        let out = refine_objectness_infer(&o, &[r1.clone(), r2.clone()]).unwrap();
        for i in 0..50 {
            let naive = o.data()[i] + r1.data()[i] + r2.data()[i];
            assert!((out.data()[i] - naive).abs() <= 1e-12);
        }
    }

    #[test]
    fn positives_always_refined() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let o0: Vec<f64> = (0..30).map(|_| 2.0 * sample_normal(&mut rng)).collect();
            let r1: Vec<f64> = (0..30).map(|_| sample_normal(&mut rng)).collect();
            let r2: Vec<f64> = (0..30).map(|_| sample_normal(&mut rng)).collect();
            let positive: Vec<bool> = (0..30).map(|i| i % 7 == 0).collect();
            let (_, masks) = refine_values(&o0, &[&r1, &r2], &positive);
            for m in masks {
                for (p, m) in positive.iter().zip(m) {
                    assert!(!p || m);
                }
            }
        }
    }
}
