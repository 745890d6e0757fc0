//! Layered network descriptions with named segmentation (m_0 … m_fc),
//! per-parameter freeze masks and seeded (re)initialization.
//!
//! A [`ModelGraph`] is a topologically ordered layer list. Most layers read
//! the previous layer's output; residual joins and shortcut branches name
//! their sources explicitly, so a residual block is still a contiguous span
//! of the list and segments stay contiguous.

mod zoo;

pub use zoo::{build_mini_resnet, build_mini_vgg, Architecture};

use std::collections::BTreeSet;
use std::ops::Range;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Tape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    BatchNorm2d {
        channels: usize,
        momentum: f64,
        eps: f64,
    },
    Relu,
    MaxPool2d {
        size: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    /// Residual join of two equally shaped sources.
    Add,
}

impl LayerKind {
    pub fn is_parameterized(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d { .. } | LayerKind::BatchNorm2d { .. } | LayerKind::Linear { .. }
        )
    }

    fn label(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::BatchNorm2d { .. } => "batchnorm2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Linear { .. } => "linear",
            LayerKind::Add => "add",
        }
    }
}

/// Where a layer reads its input from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Image,
    Layer(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub sources: Vec<Source>,
    /// Trainable tensors: `[weight, bias?]` or `[gamma, beta]`.
    pub params: Vec<Tensor>,
    /// Batch-norm running mean and variance.
    pub buffers: Vec<Tensor>,
    /// Per-sample output shape (C, H, W) or (F).
    pub out_shape: Vec<usize>,
}

impl Layer {
    pub fn param_names(&self) -> &'static [&'static str] {
        match self.kind {
            LayerKind::Conv2d { bias: true, .. } | LayerKind::Linear { .. } => &["weight", "bias"],
            LayerKind::Conv2d { bias: false, .. } => &["weight"],
            LayerKind::BatchNorm2d { .. } => &["gamma", "beta"],
            _ => &[],
        }
    }

    pub fn buffer_names(&self) -> &'static [&'static str] {
        match self.kind {
            LayerKind::BatchNorm2d { .. } => &["running_mean", "running_var"],
            _ => &[],
        }
    }

    /// Redraw parameters and reset buffers: He-normal weights, zero biases,
    /// unit gamma, zero beta, running mean 0 and variance 1.
    fn initialize(&mut self, rng: &mut seed::StreamRng) {
        match self.kind {
            LayerKind::Conv2d {
                in_channels,
                kernel,
                ..
            } => {
                he_normal(&mut self.params[0], in_channels * kernel * kernel, rng);
                if let Some(b) = self.params.get_mut(1) {
                    b.data_mut().fill(0.0);
                }
            }
            LayerKind::Linear { in_features, .. } => {
                he_normal(&mut self.params[0], in_features, rng);
                self.params[1].data_mut().fill(0.0);
            }
            LayerKind::BatchNorm2d { .. } => {
                self.params[0].data_mut().fill(1.0);
                self.params[1].data_mut().fill(0.0);
                self.buffers[0].data_mut().fill(0.0);
                self.buffers[1].data_mut().fill(1.0);
            }
            _ => {}
        }
    }
}

fn he_normal(t: &mut Tensor, fan_in: usize, rng: &mut seed::StreamRng) {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    t.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub layers: Range<usize>,
}

/// Ordered, contiguous, non-overlapping segments covering every layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    segments: Vec<Segment>,
}

impl Segmentation {
    pub fn new(segments: Vec<Segment>, layer_count: usize) -> Result<Self> {
        let mut next = 0;
        let mut names = BTreeSet::new();
        for s in &segments {
            if s.layers.start != next || s.layers.end <= s.layers.start {
                return Err(Error::invalid(format!(
                    "segment {} spans {:?}; expected a non-empty span starting at {next}",
                    s.name, s.layers
                )));
            }
            if !names.insert(s.name.clone()) {
                return Err(Error::invalid(format!("duplicate segment name {}", s.name)));
            }
            next = s.layers.end;
        }
        if next != layer_count {
            return Err(Error::invalid(format!(
                "segments cover {next} of {layer_count} layers"
            )));
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.segments.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.segments
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::UnknownSegment(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Segment> {
        Ok(&self.segments[self.position(name)?])
    }

    pub fn segment_of_layer(&self, layer: usize) -> Option<&Segment> {
        self.segments.iter().find(|s| s.layers.contains(&layer))
    }
}

/// Per-parameter trainable flags, in [`ModelGraph::parameters`] order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeMask {
    trainable: Vec<bool>,
    layer_offsets: Vec<usize>,
}

impl FreezeMask {
    fn from_layers(model: &ModelGraph, trainable_layer: impl Fn(usize) -> bool) -> Self {
        let mut trainable = Vec::new();
        let mut layer_offsets = Vec::with_capacity(model.layers.len() + 1);
        for (i, layer) in model.layers.iter().enumerate() {
            layer_offsets.push(trainable.len());
            trainable.extend(std::iter::repeat_n(trainable_layer(i), layer.params.len()));
        }
        layer_offsets.push(trainable.len());
        Self {
            trainable,
            layer_offsets,
        }
    }

    pub fn all_trainable(model: &ModelGraph) -> Self {
        Self::from_layers(model, |_| true)
    }

    pub fn all_frozen(model: &ModelGraph) -> Self {
        Self::from_layers(model, |_| false)
    }

    /// Only the parameters of the listed layers are trainable.
    pub fn from_layer_set(model: &ModelGraph, layers: &BTreeSet<usize>) -> Result<Self> {
        if let Some(&bad) = layers.iter().find(|&&l| l >= model.layers.len()) {
            return Err(Error::invalid(format!(
                "layer {bad} out of range for a {}-layer model",
                model.layers.len()
            )));
        }
        Ok(Self::from_layers(model, |i| layers.contains(&i)))
    }

    pub fn flags(&self) -> &[bool] {
        &self.trainable
    }

    pub fn len(&self) -> usize {
        self.trainable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trainable.is_empty()
    }

    pub fn is_trainable(&self, param: usize) -> bool {
        self.trainable[param]
    }

    /// A layer is trainable when all of its parameters are; parameterless
    /// layers report false.
    pub fn layer_trainable(&self, layer: usize) -> bool {
        let span = self.layer_offsets[layer]..self.layer_offsets[layer + 1];
        !span.is_empty() && self.trainable[span].iter().all(|&t| t)
    }

    pub fn any_trainable(&self) -> bool {
        self.trainable.iter().any(|&t| t)
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable.iter().filter(|&&t| t).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running-statistics update produced by a train-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Tape handles produced by one [`ModelGraph::forward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    /// Output of every layer, indexed like the layer list.
    pub outputs: Vec<Var>,
    /// Tape leaves for each layer's parameters.
    pub params: Vec<Vec<Var>>,
    pub bn_updates: Vec<BnUpdate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    architecture: Architecture,
    input_shape: [usize; 3],
    classes: usize,
    layers: Vec<Layer>,
    segmentation: Segmentation,
}

impl ModelGraph {
    /// Validates shapes and segmentation, then initializes every layer from
    /// `seed`. Each layer draws from its own stream keyed by its index, so a
    /// later reinit of any subset reproduces the fresh-build values exactly.
    pub(crate) fn assemble(
        architecture: Architecture,
        input_shape: [usize; 3],
        classes: usize,
        mut layers: Vec<Layer>,
        segments: Vec<Segment>,
        seed: u64,
    ) -> Result<Self> {
        for i in 0..layers.len() {
            let in_shapes: Vec<Vec<usize>> = layers[i]
                .sources
                .iter()
                .map(|s| match *s {
                    Source::Image => Ok(input_shape.to_vec()),
                    Source::Layer(j) if j < i => Ok(layers[j].out_shape.clone()),
                    Source::Layer(j) => Err(Error::invalid(format!(
                        "layer {i} reads layer {j}, which does not precede it"
                    ))),
                })
                .collect::<Result<_>>()?;
            let out = infer_shape(&layers[i], &in_shapes)?;
            let layer = &mut layers[i];
            layer.out_shape = out;
            let (params, buffers) = allocate(&layer.kind);
            layer.params = params;
            layer.buffers = buffers;
        }
        let last = layers.last().ok_or_else(|| Error::invalid("model has no layers"))?;
        if last.out_shape != [classes] {
            return Err(Error::shape(format!(
                "model head produces {:?}, expected [{classes}]",
                last.out_shape
            )));
        }
        let segmentation = Segmentation::new(segments, layers.len())?;
        let mut model = Self {
            architecture,
            input_shape,
            classes,
            layers,
            segmentation,
        };
        let all: Vec<usize> = (0..model.layers.len()).collect();
        model.reinit_layers(&all, seed);
        Ok(model)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn segmentation(&self) -> &Segmentation {
        &self.segmentation
    }

    pub fn parameterized_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].kind.is_parameterized())
            .collect()
    }

    /// All trainable tensors in layer order, with qualified names.
    pub fn parameters(&self) -> impl Iterator<Item = (String, &Tensor)> {
        self.layers.iter().flat_map(|l| {
            l.param_names()
                .iter()
                .zip(&l.params)
                .map(move |(n, t)| (format!("{}.{n}", l.name), t))
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.params)
            .map(Tensor::numel)
            .sum()
    }

    /// Every persisted tensor (parameters, then buffers, per layer) with its name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for l in &self.layers {
            for (n, t) in l.param_names().iter().zip(&l.params) {
                out.push((format!("{}.{n}", l.name), t));
            }
            for (n, t) in l.buffer_names().iter().zip(&l.buffers) {
                out.push((format!("{}.{n}", l.name), t));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            let pn = l.param_names();
            let bn = l.buffer_names();
            let name = l.name.clone();
            for (n, t) in pn.iter().zip(l.params.iter_mut()) {
                out.push((format!("{name}.{n}"), t));
            }
            for (n, t) in bn.iter().zip(l.buffers.iter_mut()) {
                out.push((format!("{name}.{n}"), t));
            }
        }
        out
    }

    /// SHA-256 over the bit patterns of every tensor in the given layers.
    pub fn layers_digest(&self, layers: Range<usize>) -> [u8; 32] {
        let mut h = Sha256::new();
        for l in &self.layers[layers] {
            for t in l.params.iter().chain(&l.buffers) {
                for v in t.data() {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        h.finalize().into()
    }

    pub fn segment_digest(&self, name: &str) -> Result<[u8; 32]> {
        Ok(self.layers_digest(self.segmentation.get(name)?.layers.clone()))
    }

    fn segment_layers(&self, names: &[&str]) -> Result<BTreeSet<usize>> {
        let mut set = BTreeSet::new();
        for n in names {
            set.extend(self.segmentation.get(n)?.layers.clone());
        }
        Ok(set)
    }

    /// Mask with exactly the listed segments trainable.
    pub fn freeze_except(&self, trainable_segments: &[&str]) -> Result<FreezeMask> {
        let set = self.segment_layers(trainable_segments)?;
        FreezeMask::from_layer_set(self, &set)
    }

    /// Redraws the listed segments from the initialization scheme; every
    /// other tensor is left bit-identical.
    pub fn reinit_segments(&mut self, names: &[&str], seed: u64) -> Result<()> {
        let layers: Vec<usize> = self.segment_layers(names)?.into_iter().collect();
        self.reinit_layers(&layers, seed);
        Ok(())
    }

    pub fn reinit_layers(&mut self, layers: &[usize], seed: u64) {
        for &i in layers {
            let mut rng = seed::stream(seed, "init", i as u64);
            self.layers[i].initialize(&mut rng);
        }
    }

    /// Runs the graph on a batch `x` (N×C×H×W) recorded on `tape`.
    ///
    /// Parameters whose flag is set in `trainable` enter the tape as
    /// gradient-requiring leaves; `None` freezes everything. In train mode,
    /// batch norm layers with trainable parameters normalize with batch
    /// statistics and report [`BnUpdate`]s; frozen batch norm layers always
    /// use their running statistics and are never updated.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        trainable: Option<&FreezeMask>,
    ) -> Result<ForwardPass> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1..] != self.input_shape {
            return Err(Error::shape(format!(
                "model expects N×{:?} input, got {shape:?}",
                self.input_shape
            )));
        }
        let mut outputs: Vec<Var> = Vec::with_capacity(self.layers.len());
        let mut params = Vec::with_capacity(self.layers.len());
        let mut bn_updates = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let train_layer = trainable.is_some_and(|m| m.layer_trainable(i));
            let pv: Vec<Var> = layer
                .params
                .iter()
                .map(|p| tape.leaf(p.clone(), train_layer))
                .collect();
            let src: Vec<Var> = layer
                .sources
                .iter()
                .map(|s| match *s {
                    Source::Image => x,
                    Source::Layer(j) => outputs[j],
                })
                .collect();
            let out = match layer.kind {
                LayerKind::Conv2d {
                    stride, padding, ..
                } => tape.conv2d(src[0], pv[0], pv.get(1).copied(), stride, padding)?,
                LayerKind::BatchNorm2d { eps, .. } => {
                    let batch_stats = mode == Mode::Train && train_layer;
                    let r = tape.batch_norm(
                        src[0],
                        pv[0],
                        pv[1],
                        layer.buffers[0].data(),
                        layer.buffers[1].data(),
                        batch_stats,
                        eps,
                    )?;
                    if let (Some(mean), Some(var)) = (r.batch_mean, r.batch_var) {
                        bn_updates.push(BnUpdate { layer: i, mean, var });
                    }
                    r.output
                }
                LayerKind::Relu => tape.relu(src[0])?,
                LayerKind::MaxPool2d { size, stride } => tape.max_pool2d(src[0], size, stride)?,
                LayerKind::GlobalAvgPool => tape.global_avg_pool(src[0])?,
                LayerKind::Linear { .. } => tape.linear(src[0], pv[0], Some(pv[1]))?,
                LayerKind::Add => tape.add(src[0], src[1])?,
            };
            outputs.push(out);
            params.push(pv);
        }
        Ok(ForwardPass {
            logits: *outputs.last().expect("non-empty model"),
            outputs,
            params,
            bn_updates,
        })
    }

    /// Eval-mode logits for a batch, without recording gradients.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let fp = self.forward(&mut tape, xv, Mode::Eval, None)?;
        Ok(tape.value(fp.logits).clone())
    }

    /// Blend train-mode batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let layer = &mut self.layers[u.layer];
            let LayerKind::BatchNorm2d { momentum, .. } = layer.kind else {
                continue;
            };
            let (rm, rv) = layer.buffers.split_at_mut(1);
            for (r, b) in rm[0].data_mut().iter_mut().zip(&u.mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            for (r, b) in rv[0].data_mut().iter_mut().zip(&u.var) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
}

fn infer_shape(layer: &Layer, inputs: &[Vec<usize>]) -> Result<Vec<usize>> {
    let bad = |msg: String| Error::shape(format!("layer {} ({}): {msg}", layer.name, layer.kind.label()));
    let expected_sources = if layer.kind == LayerKind::Add { 2 } else { 1 };
    if inputs.len() != expected_sources {
        return Err(bad(format!("expects {expected_sources} sources, got {}", inputs.len())));
    }
    let x = &inputs[0];
    let spatial = |x: &Vec<usize>| -> Result<(usize, usize, usize)> {
        match x[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(bad(format!("expects a C×H×W input, got {x:?}"))),
        }
    };
    match layer.kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            let (c, h, w) = spatial(x)?;
            if c != in_channels {
                return Err(bad(format!("input has {c} channels, expected {in_channels}")));
            }
            if stride == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel {
                return Err(bad(format!("kernel {kernel} does not fit {h}x{w}")));
            }
            Ok(vec![
                out_channels,
                (h + 2 * padding - kernel) / stride + 1,
                (w + 2 * padding - kernel) / stride + 1,
            ])
        }
        LayerKind::BatchNorm2d { channels, .. } => {
            let (c, _, _) = spatial(x)?;
            if c != channels {
                return Err(bad(format!("input has {c} channels, expected {channels}")));
            }
            Ok(x.clone())
        }
        LayerKind::Relu => Ok(x.clone()),
        LayerKind::MaxPool2d { size, stride } => {
            let (c, h, w) = spatial(x)?;
            if h < size || w < size || stride == 0 {
                return Err(bad(format!("window {size} does not fit {h}x{w}")));
            }
            Ok(vec![c, (h - size) / stride + 1, (w - size) / stride + 1])
        }
        LayerKind::GlobalAvgPool => {
            let (c, _, _) = spatial(x)?;
            Ok(vec![c])
        }
        LayerKind::Linear {
            in_features,
            out_features,
        } => {
            if x[..] != [in_features] {
                return Err(bad(format!("input {x:?}, expected [{in_features}]")));
            }
            Ok(vec![out_features])
        }
        LayerKind::Add => {
            if inputs[0] != inputs[1] {
                return Err(bad(format!("operands differ: {:?} vs {:?}", inputs[0], inputs[1])));
            }
            Ok(x.clone())
        }
    }
}

fn allocate(kind: &LayerKind) -> (Vec<Tensor>, Vec<Tensor>) {
    match *kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            bias,
            ..
        } => {
            let mut p = vec![Tensor::zeros(&[out_channels, in_channels, kernel, kernel])];
            if bias {
                p.push(Tensor::zeros(&[out_channels]));
            }
            (p, vec![])
        }
        LayerKind::BatchNorm2d { channels, .. } => (
            vec![Tensor::ones(&[channels]), Tensor::zeros(&[channels])],
            vec![Tensor::zeros(&[channels]), Tensor::ones(&[channels])],
        ),
        LayerKind::Linear {
            in_features,
            out_features,
        } => (
            vec![
                Tensor::zeros(&[out_features, in_features]),
                Tensor::zeros(&[out_features]),
            ],
            vec![],
        ),
        _ => (vec![], vec![]),
    }
}
