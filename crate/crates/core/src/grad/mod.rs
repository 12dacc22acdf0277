//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every primitive appends a node to a [`Tape`]; node ids grow strictly in
//! creation order so the tape is a topologically sorted DAG and
//! [`Tape::backward`] is a single reverse sweep. Trainable parameters enter
//! as [`ParamId`]-tagged leaves and their gradients come back as a
//! [`GradMap`].
//!
//! [`Tape::stop_gradient`] is an identity in the forward pass and a wall in
//! the backward pass: nothing upstream of it receives gradient through it.

mod check;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::GradError;
use crate::math;
use crate::tensor::Tensor;

pub use check::{finite_diff_check, GradCheck};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identity of a trainable parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Primitive operations understood by the tape.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Subtract,
    Multiply,
    /// `[m, k] x [k, n] -> [m, n]`.
    MatMul,
    /// Input `[H, W, Cin]`, kernel `[kh, kw, Cin, Cout]` with odd `kh, kw`;
    /// stride 1, zero "same" padding.
    Conv2d,
    Relu,
    Sigmoid,
    Log,
    /// `log(sigmoid(x))`, evaluated without overflow.
    LogSigmoid,
    Exp,
    /// Multiply by a constant.
    Scale(f64),
    /// Reduce to a scalar.
    Sum,
    /// Mean of all elements, as a scalar.
    Mean,
    /// Keep the leading-dimension slices whose mask entry is set.
    MaskedSelect(Vec<bool>),
    /// Repeat the input over leading dimensions; its shape must be a suffix
    /// of the target shape.
    Broadcast(Vec<usize>),
    Reshape(Vec<usize>),
    /// Elementwise smooth-L1 with transition point `beta`.
    SmoothL1 { beta: f64 },
    StopGradient,
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Subtract => "subtract",
            Primitive::Multiply => "multiply",
            Primitive::MatMul => "matmul",
            Primitive::Conv2d => "conv2d",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Log => "log",
            Primitive::LogSigmoid => "log_sigmoid",
            Primitive::Exp => "exp",
            Primitive::Scale(_) => "scale",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::MaskedSelect(_) => "masked_select",
            Primitive::Broadcast(_) => "broadcast",
            Primitive::Reshape(_) => "reshape",
            Primitive::SmoothL1 { .. } => "smooth_l1",
            Primitive::StopGradient => "stop_gradient",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Primitive::Add
            | Primitive::Subtract
            | Primitive::Multiply
            | Primitive::MatMul
            | Primitive::Conv2d => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
enum Origin {
    Constant,
    Param(ParamId),
    Op(Primitive, Vec<NodeId>),
}

/// A recorded value together with how it was produced.
#[derive(Debug, Clone)]
pub struct TapeNode {
    origin: Origin,
    value: Tensor,
}

impl TapeNode {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn inputs(&self) -> &[NodeId] {
        match &self.origin {
            Origin::Op(_, inputs) => inputs,
            _ => &[],
        }
    }

    pub fn primitive(&self) -> Option<&Primitive> {
        match &self.origin {
            Origin::Op(p, _) => Some(p),
            _ => None,
        }
    }

    /// Set on nodes that pass no gradient to their inputs.
    pub fn stops_gradient(&self) -> bool {
        matches!(self.origin, Origin::Op(Primitive::StopGradient, _))
    }
}

/// Gradients keyed by parameter id; one entry per parameter registered on
/// the tape, shaped like the parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradMap {
    grads: BTreeMap<ParamId, Tensor>,
}

impl GradMap {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Records primitives for one forward pass. Not shared across threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
    params: BTreeMap<ParamId, NodeId>,
    // Finite-difference runs replay stop-gradient outputs from the base run
    // so the numeric derivative sees the same surrogate the backward pass does.
    frozen_stops: Option<Vec<Tensor>>,
    stops_seen: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose k-th stop-gradient node outputs `values[k]` instead of
    /// its input.
    pub fn with_frozen_stops(values: Vec<Tensor>) -> Self {
        Self {
            frozen_stops: Some(values),
            ..Self::default()
        }
    }

    /// Outputs of every stop-gradient node, in creation order.
    pub fn stop_gradient_values(&self) -> Vec<Tensor> {
        self.nodes
            .iter()
            .filter(|n| n.stops_gradient())
            .map(|n| n.value.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every node in creation order.
    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &TapeNode)> {
        self.nodes.iter().enumerate().map(|(i, n)| (NodeId(i), n))
    }

    pub fn node(&self, id: NodeId) -> &TapeNode {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, origin: Origin, value: Tensor) -> NodeId {
        self.nodes.push(TapeNode { origin, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Origin::Constant, value)
    }

    /// Registers a trainable leaf. Registering the same id twice returns the
    /// existing node.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> NodeId {
        if let Some(&node) = self.params.get(&id) {
            return node;
        }
        let node = self.push(Origin::Param(id), value.clone());
        self.params.insert(id, node);
        node
    }

    pub fn param_node(&self, id: ParamId) -> Option<NodeId> {
        self.params.get(&id).copied()
    }

    /// Applies `kind` to `inputs`, records the node and returns its id.
    pub fn apply(&mut self, kind: Primitive, inputs: &[NodeId]) -> Result<NodeId, GradError> {
        if inputs.len() != kind.arity() {
            return Err(GradError::Contract(format!(
                "{} takes {} input(s), got {}",
                kind.name(),
                kind.arity(),
                inputs.len()
            )));
        }
        let value = match &kind {
            Primitive::StopGradient => {
                let k = self.stops_seen;
                self.stops_seen += 1;
                let live = self.value(inputs[0]);
                match self.frozen_stops.as_ref().and_then(|f| f.get(k)) {
                    Some(frozen) if frozen.shape() == live.shape() => frozen.clone(),
                    Some(frozen) => {
                        return Err(GradError::ShapeMismatch {
                            op: "stop_gradient",
                            shapes: vec![live.shape().to_vec(), frozen.shape().to_vec()],
                        })
                    }
                    None => live.clone(),
                }
            }
            _ => {
                let args: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                forward(&kind, &args)?
            }
        };
        Ok(self.push(Origin::Op(kind, inputs.to_vec()), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::Subtract, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::Multiply, &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::Conv2d, &[input, kernel])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::Log, &[x])
    }

    pub fn log_sigmoid(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::LogSigmoid, &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::Exp, &[x])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, GradError> {
        self.apply(Primitive::Scale(c), &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::Mean, &[x])
    }

    pub fn masked_select(&mut self, x: NodeId, mask: Vec<bool>) -> Result<NodeId, GradError> {
        self.apply(Primitive::MaskedSelect(mask), &[x])
    }

    pub fn broadcast(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, GradError> {
        self.apply(Primitive::Broadcast(shape.to_vec()), &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, GradError> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[x])
    }

    pub fn smooth_l1(&mut self, x: NodeId, beta: f64) -> Result<NodeId, GradError> {
        self.apply(Primitive::SmoothL1 { beta }, &[x])
    }

    pub fn stop_gradient(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        self.apply(Primitive::StopGradient, &[x])
    }

    /// Reverse sweep from a scalar `loss`. Every registered parameter gets an
    /// entry; parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap, GradError> {
        let loss_value = self.value(loss);
        if !loss_value.shape().is_empty() {
            return Err(GradError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = GradMap::default();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.origin {
                Origin::Constant => {}
                Origin::Param(pid) => {
                    out.grads.insert(*pid, g);
                }
                Origin::Op(Primitive::StopGradient, _) => {}
                Origin::Op(kind, inputs) => {
                    let args: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                    let input_grads = backward_rule(kind, &args, &node.value, g);
                    for (input, ig) in inputs.iter().zip(input_grads) {
                        if let Some(ig) = ig {
                            accumulate(&mut grads[input.0], ig);
                        }
                    }
                }
            }
        }

        for (&pid, &node) in &self.params {
            out.grads
                .entry(pid)
                .or_insert_with(|| Tensor::zeros(self.value(node).shape()));
        }
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn mismatch(kind: &Primitive, args: &[&Tensor]) -> GradError {
    GradError::ShapeMismatch {
        op: kind.name(),
        shapes: args.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn with_data(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("shape preserved")
}

fn forward(kind: &Primitive, args: &[&Tensor]) -> Result<Tensor, GradError> {
    let x = args[0];
    Ok(match kind {
        Primitive::Add | Primitive::Subtract | Primitive::Multiply => {
            let y = args[1];
            if x.shape() != y.shape() {
                return Err(mismatch(kind, args));
            }
            match kind {
                Primitive::Add => elementwise(x, y, |a, b| a + b),
                Primitive::Subtract => elementwise(x, y, |a, b| a - b),
                _ => elementwise(x, y, |a, b| a * b),
            }
        }
        Primitive::MatMul => {
            let y = args[1];
            let (m, k, n) = match (x.shape(), y.shape()) {
                (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
                _ => return Err(mismatch(kind, args)),
            };
            let mut out = vec![0.0; m * n];
            matmul_into(x.data(), y.data(), &mut out, m, k, n);
            with_data(&[m, n], out)
        }
        Primitive::Conv2d => {
            let k = args[1];
            let geom = ConvGeom::new(x.shape(), k.shape()).ok_or_else(|| mismatch(kind, args))?;
            let mut out = vec![0.0; geom.h * geom.w * geom.co];
            conv2d_forward(&geom, x.data(), k.data(), &mut out);
            with_data(&[geom.h, geom.w, geom.co], out)
        }
        Primitive::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
        Primitive::Sigmoid => x.map(math::sigmoid),
        Primitive::Log => {
            if let Some(bad) = x.data().iter().find(|&&v| !(v > 0.0)) {
                return Err(GradError::Domain {
                    op: "log",
                    detail: format!("non-positive argument {bad}"),
                });
            }
            x.map(math::ln)
        }
        Primitive::LogSigmoid => x.map(math::log_sigmoid),
        Primitive::Exp => x.map(math::exp),
        Primitive::Scale(c) => {
            let c = *c;
            x.map(|v| v * c)
        }
        Primitive::Sum => Tensor::scalar(x.data().iter().sum()),
        Primitive::Mean => {
            if x.is_empty() {
                return Err(GradError::Domain {
                    op: "mean",
                    detail: "empty tensor".into(),
                });
            }
            Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
        }
        Primitive::MaskedSelect(mask) => {
            let rows = x.shape().first().copied().unwrap_or(0);
            if x.shape().is_empty() || mask.len() != rows {
                return Err(GradError::ShapeMismatch {
                    op: "masked_select",
                    shapes: vec![x.shape().to_vec(), vec![mask.len()]],
                });
            }
            let row = x.len() / rows.max(1);
            let mut data = Vec::new();
            for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                data.extend_from_slice(&x.data()[r * row..(r + 1) * row]);
            }
            let mut shape = x.shape().to_vec();
            shape[0] = mask.iter().filter(|&&m| m).count();
            with_data(&shape, data)
        }
        Primitive::Broadcast(target) => {
            if !target.ends_with(x.shape()) {
                return Err(GradError::ShapeMismatch {
                    op: "broadcast",
                    shapes: vec![x.shape().to_vec(), target.clone()],
                });
            }
            let total: usize = target.iter().product();
            let data = if x.is_empty() {
                Vec::new()
            } else {
                x.data().iter().copied().cycle().take(total).collect()
            };
            with_data(target, data)
        }
        Primitive::Reshape(shape) => x.clone().reshaped(shape)?,
        Primitive::SmoothL1 { beta } => {
            let beta = *beta;
            if !(beta > 0.0) {
                return Err(GradError::Domain {
                    op: "smooth_l1",
                    detail: format!("beta must be positive, got {beta}"),
                });
            }
            x.map(|v| {
                let a = math::abs(v);
                if a < beta {
                    0.5 * v * v / beta
                } else {
                    a - 0.5 * beta
                }
            })
        }
        Primitive::StopGradient => x.clone(),
    })
}

/// Gradients of each input given the output gradient `g`.
fn backward_rule(kind: &Primitive, args: &[&Tensor], out: &Tensor, g: Tensor) -> Vec<Option<Tensor>> {
    let x = args[0];
    match kind {
        Primitive::Add => vec![Some(g.clone()), Some(g)],
        Primitive::Subtract => {
            let neg = g.map(|v| -v);
            vec![Some(g), Some(neg)]
        }
        Primitive::Multiply => {
            let y = args[1];
            vec![
                Some(elementwise(&g, y, |a, b| a * b)),
                Some(elementwise(&g, x, |a, b| a * b)),
            ]
        }
        Primitive::MatMul => {
            let y = args[1];
            let (m, k) = (x.shape()[0], x.shape()[1]);
            let n = y.shape()[1];
            // dX = G Y^T ; dY = X^T G
            let mut dx = vec![0.0; m * k];
            for i in 0..m {
                let grow = &g.data()[i * n..(i + 1) * n];
                for p in 0..k {
                    let yrow = &y.data()[p * n..(p + 1) * n];
                    dx[i * k + p] = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                }
            }
            let mut dy = vec![0.0; k * n];
            for i in 0..m {
                let grow = &g.data()[i * n..(i + 1) * n];
                for p in 0..k {
                    let xv = x.data()[i * k + p];
                    if xv == 0.0 {
                        continue;
                    }
                    let dyrow = &mut dy[p * n..(p + 1) * n];
                    for (d, gv) in dyrow.iter_mut().zip(grow) {
                        *d += xv * gv;
                    }
                }
            }
            vec![Some(with_data(&[m, k], dx)), Some(with_data(&[k, n], dy))]
        }
        Primitive::Conv2d => {
            let kernel = args[1];
            let geom = ConvGeom::new(x.shape(), kernel.shape()).expect("validated in forward");
            let mut dx = vec![0.0; x.len()];
            let mut dk = vec![0.0; kernel.len()];
            conv2d_backward(&geom, x.data(), kernel.data(), g.data(), &mut dx, &mut dk);
            vec![
                Some(with_data(x.shape(), dx)),
                Some(with_data(kernel.shape(), dk)),
            ]
        }
        Primitive::Relu => vec![Some(elementwise(&g, x, |gv, v| if v > 0.0 { gv } else { 0.0 }))],
        Primitive::Sigmoid => vec![Some(elementwise(&g, out, |gv, s| gv * s * (1.0 - s)))],
        Primitive::Log => vec![Some(elementwise(&g, x, |gv, v| gv / v))],
        Primitive::LogSigmoid => vec![Some(elementwise(&g, x, |gv, v| gv * math::sigmoid(-v)))],
        Primitive::Exp => vec![Some(elementwise(&g, out, |gv, e| gv * e))],
        Primitive::Scale(c) => {
            let c = *c;
            vec![Some(g.map(|v| v * c))]
        }
        Primitive::Sum => {
            let gv = g.item();
            vec![Some(Tensor::full(x.shape(), gv))]
        }
        Primitive::Mean => {
            let gv = g.item() / x.len() as f64;
            vec![Some(Tensor::full(x.shape(), gv))]
        }
        Primitive::MaskedSelect(mask) => {
            let rows = x.shape()[0];
            let row = x.len() / rows.max(1);
            let mut dx = vec![0.0; x.len()];
            let mut src = 0;
            for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                dx[r * row..(r + 1) * row].copy_from_slice(&g.data()[src * row..(src + 1) * row]);
                src += 1;
            }
            vec![Some(with_data(x.shape(), dx))]
        }
        Primitive::Broadcast(_) => {
            let n = x.len();
            let mut dx = vec![0.0; n];
            if n > 0 {
                for chunk in g.data().chunks_exact(n) {
                    for (d, v) in dx.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
            }
            vec![Some(with_data(x.shape(), dx))]
        }
        Primitive::Reshape(_) => vec![Some(with_data(x.shape(), g.into_data()))],
        Primitive::SmoothL1 { beta } => {
            let beta = *beta;
            vec![Some(elementwise(&g, x, |gv, v| {
                if math::abs(v) < beta {
                    gv * v / beta
                } else if v > 0.0 {
                    gv
                } else {
                    -gv
                }
            }))]
        }
        Primitive::StopGradient => vec![None],
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

struct ConvGeom {
    h: usize,
    w: usize,
    ci: usize,
    co: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize]) -> Option<Self> {
        match (input, kernel) {
            (&[h, w, ci], &[kh, kw, kci, co]) if ci == kci && kh % 2 == 1 && kw % 2 == 1 => {
                Some(Self { h, w, ci, co, kh, kw })
            }
            _ => None,
        }
    }

    /// Input positions touched by output row `y` and kernel row `ky`.
    #[inline]
    fn src(&self, out: usize, k: usize, extent: usize, ksize: usize) -> Option<usize> {
        let pos = out + k;
        let pad = ksize / 2;
        if pos < pad || pos - pad >= extent {
            None
        } else {
            Some(pos - pad)
        }
    }
}

fn conv2d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64], out: &mut [f64]) {
    for y in 0..g.h {
        for x in 0..g.w {
            let orow = &mut out[(y * g.w + x) * g.co..(y * g.w + x + 1) * g.co];
            for ky in 0..g.kh {
                let Some(iy) = g.src(y, ky, g.h, g.kh) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(x, kx, g.w, g.kw) else { continue };
                    let px = &input[(iy * g.w + ix) * g.ci..(iy * g.w + ix + 1) * g.ci];
                    let kbase = (ky * g.kw + kx) * g.ci;
                    for (c, &v) in px.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let krow = &kernel[(kbase + c) * g.co..(kbase + c + 1) * g.co];
                        for (o, kv) in orow.iter_mut().zip(krow) {
                            *o += v * kv;
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    grad_in: &mut [f64],
    grad_kernel: &mut [f64],
) {
    for y in 0..g.h {
        for x in 0..g.w {
            let grow = &grad_out[(y * g.w + x) * g.co..(y * g.w + x + 1) * g.co];
            if grow.iter().all(|&v| v == 0.0) {
                continue;
            }
            for ky in 0..g.kh {
                let Some(iy) = g.src(y, ky, g.h, g.kh) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(x, kx, g.w, g.kw) else { continue };
                    let pix = (iy * g.w + ix) * g.ci;
                    let kbase = (ky * g.kw + kx) * g.ci;
                    for c in 0..g.ci {
                        let krange = (kbase + c) * g.co..(kbase + c + 1) * g.co;
                        let krow = &kernel[krange.clone()];
                        grad_in[pix + c] += grow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                        let v = input[pix + c];
                        if v != 0.0 {
                            for (d, gv) in grad_kernel[krange].iter_mut().zip(grow) {
                                *d += v * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).item(), 0.5);
    }

    #[test]
    fn add_elementwise() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn conv2d_center_of_ones_is_nine() {
        // Direct summation: the center output sees the full 3x3 window.
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3, 3, 1], 1.0));
        let k = tape.constant(Tensor::full(&[3, 3, 1, 1], 1.0));
        let y = tape.conv2d(x, k).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[3, 3, 1]);
        assert_eq!(out.data()[4], 9.0);
        // corners see a 2x2 window, edges 2x3
        assert_eq!(out.data()[0], 4.0);
        assert_eq!(out.data()[1], 6.0);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        match tape.add(a, b) {
            Err(GradError::ShapeMismatch { op, shapes }) => {
                assert_eq!(op, "add");
                assert_eq!(shapes, vec![vec![2], vec![3]]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.log(a), Err(GradError::Domain { op: "log", .. })));
    }

    #[test]
    fn stop_gradient_is_forward_identity() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), &t(&[1], &[0.3]));
        let s = tape.stop_gradient(x).unwrap();
        assert_eq!(tape.value(s).data(), &[0.3]);
        assert!(tape.node(s).stops_gradient());
    }

    #[test]
    fn stop_gradient_blocks_backward() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), &t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.stop_gradient(x).unwrap();
        let loss = tape.sum(s).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[0.0, 0.0, 0.0]);

        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), &t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.stop_gradient(x).unwrap();
        let y = tape.add(x, s).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_simple_product() {
        let mut tape = Tape::new();
        let w = tape.param(ParamId(0), &t(&[1], &[2.0]));
        let x = tape.constant(t(&[1], &[3.0]));
        let wx = tape.mul(w, x).unwrap();
        let loss = tape.sum(wx).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[3.0]);
    }

    #[test]
    fn backward_sigmoid_at_zero() {
        let mut tape = Tape::new();
        let z = tape.param(ParamId(0), &Tensor::scalar(0.0));
        let s = tape.sigmoid(z).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().item(), 0.25);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), &Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(GradError::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_params_get_zeros() {
        let mut tape = Tape::new();
        let a = tape.param(ParamId(0), &Tensor::full(&[2], 1.0));
        let _b = tape.param(ParamId(1), &Tensor::full(&[2, 2], 1.0));
        let loss = tape.sum(a).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.get(ParamId(1)).unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn node_ids_increase() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(1.0));
        let b = tape.exp(a).unwrap();
        let c = tape.add(a, b).unwrap();
        assert!(a < b && b < c);
        assert!(tape.node(c).inputs().iter().all(|&i| i < c));
    }

    #[test]
    fn masked_select_and_broadcast_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let s = tape.masked_select(x, vec![true, false, true]).unwrap();
        assert_eq!(tape.value(s).shape(), &[2, 2]);
        assert_eq!(tape.value(s).data(), &[1.0, 2.0, 5.0, 6.0]);

        let b = tape.constant(t(&[2], &[1.0, -1.0]));
        let bb = tape.broadcast(b, &[2, 2, 2]).unwrap();
        assert_eq!(tape.value(bb).data(), &[1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
        assert!(tape.broadcast(b, &[2, 3]).is_err());
    }

    #[test]
    fn smooth_l1_pieces() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.05, -0.5, 2.0]));
        let y = tape.smooth_l1(x, 0.1).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.5 * 0.0025 / 0.1).abs() < 1e-15);
        assert!((v[1] - 0.45).abs() < 1e-15);
        assert!((v[2] - 1.95).abs() < 1e-15);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-800.0, 0.0, 800.0]));
        let y = tape.log_sigmoid(x).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[0], -800.0);
        assert!((v[1] + core::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(v[2], 0.0);
    }
}
