use serde::{Deserialize, Serialize};

use super::{Layer, LayerKind, ModelGraph, Segment, Source, BN_EPS, BN_MOMENTUM};
use crate::error::{Error, Result};

/// Serializable description sufficient to rebuild a model skeleton.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    MiniVgg {
        input_shape: [usize; 3],
        classes: usize,
        width_multiplier: f64,
    },
    MiniResnet {
        input_shape: [usize; 3],
        classes: usize,
        blocks_per_stage: usize,
        base_width: usize,
    },
}

impl Architecture {
    pub fn build(&self, seed: u64) -> Result<ModelGraph> {
        match *self {
            Architecture::MiniVgg {
                input_shape,
                classes,
                width_multiplier,
            } => build_mini_vgg(input_shape, classes, width_multiplier, seed),
            Architecture::MiniResnet {
                input_shape,
                classes,
                blocks_per_stage,
                base_width,
            } => build_mini_resnet(input_shape, classes, blocks_per_stage, base_width, seed),
        }
    }
}

/// Per-stage conv widths of the VGG analog at width multiplier 1.
pub const MINI_VGG_WIDTHS: [&[usize]; 5] = [&[16], &[32], &[64, 64], &[128, 128], &[128, 128]];

pub const SEGMENT_NAMES: [&str; 6] = ["m_0", "m_1", "m_2", "m_3", "m_4", "m_fc"];

#[derive(Default)]
struct Builder {
    layers: Vec<Layer>,
}

impl Builder {
    fn push(&mut self, name: String, kind: LayerKind, sources: Vec<Source>) -> usize {
        self.layers.push(Layer {
            name,
            kind,
            sources,
            params: vec![],
            buffers: vec![],
            out_shape: vec![],
        });
        self.layers.len() - 1
    }

    /// Source for a layer that reads its predecessor.
    fn prev(&self) -> Vec<Source> {
        match self.layers.len() {
            0 => vec![Source::Image],
            n => vec![Source::Layer(n - 1)],
        }
    }

    fn chain(&mut self, name: String, kind: LayerKind) -> usize {
        let src = self.prev();
        self.push(name, kind, src)
    }

    fn conv(&mut self, name: String, src: Vec<Source>, cin: usize, cout: usize, k: usize, stride: usize) -> usize {
        self.push(
            name,
            LayerKind::Conv2d {
                in_channels: cin,
                out_channels: cout,
                kernel: k,
                stride,
                padding: k / 2,
                bias: false,
            },
            src,
        )
    }

    fn bn(&mut self, name: String, channels: usize) -> usize {
        self.chain(
            name,
            LayerKind::BatchNorm2d {
                channels,
                momentum: BN_MOMENTUM,
                eps: BN_EPS,
            },
        )
    }

    fn head(&mut self, channels: usize, classes: usize) {
        self.chain("head.gap".into(), LayerKind::GlobalAvgPool);
        self.chain(
            "head.fc".into(),
            LayerKind::Linear {
                in_features: channels,
                out_features: classes,
            },
        );
    }
}

fn check_input(input_shape: [usize; 3], classes: usize) -> Result<()> {
    let [c, h, w] = input_shape;
    if c == 0 || classes < 2 {
        return Err(Error::invalid(format!(
            "need at least one input channel and two classes, got {c} channels and {classes} classes"
        )));
    }
    if h < 32 || w < 32 {
        return Err(Error::invalid(format!(
            "input spatial extent {h}x{w} is too small for five down-sampling stages (minimum 32x32)"
        )));
    }
    Ok(())
}

/// VGG analog: five conv/bn/relu stacks, each closed by a 2×2 max pool, then
/// global average pooling and a linear head.
///
/// Segments: `m_0`…`m_4` end at the pooling layers, `m_fc` is GAP + head.
pub fn build_mini_vgg(
    input_shape: [usize; 3],
    classes: usize,
    width_multiplier: f64,
    seed: u64,
) -> Result<ModelGraph> {
    check_input(input_shape, classes)?;
    if !(width_multiplier > 0.0) || !width_multiplier.is_finite() {
        return Err(Error::invalid(format!("width multiplier {width_multiplier} must be positive")));
    }
    let mut b = Builder::default();
    let mut segments = Vec::new();
    let mut channels = input_shape[0];
    for (stage, widths) in MINI_VGG_WIDTHS.iter().enumerate() {
        let start = b.layers.len();
        for (j, &base) in widths.iter().enumerate() {
            let width = ((base as f64 * width_multiplier).round() as usize).max(1);
            let src = b.prev();
            b.conv(format!("s{stage}.conv{j}"), src, channels, width, 3, 1);
            b.bn(format!("s{stage}.bn{j}"), width);
            b.chain(format!("s{stage}.relu{j}"), LayerKind::Relu);
            channels = width;
        }
        b.chain(format!("s{stage}.pool"), LayerKind::MaxPool2d { size: 2, stride: 2 });
        segments.push(Segment {
            name: SEGMENT_NAMES[stage].into(),
            layers: start..b.layers.len(),
        });
    }
    let start = b.layers.len();
    b.head(channels, classes);
    segments.push(Segment {
        name: "m_fc".into(),
        layers: start..b.layers.len(),
    });
    let arch = Architecture::MiniVgg {
        input_shape,
        classes,
        width_multiplier,
    };
    ModelGraph::assemble(arch, input_shape, classes, b.layers, segments, seed)
}

/// Residual analog: a conv/bn/relu stem (`m_0`), four stages of basic blocks
/// whose first block down-samples with stride 2 (`m_1`…`m_4`, widths
/// `base_width`·2^k), then GAP and a linear head (`m_fc`).
pub fn build_mini_resnet(
    input_shape: [usize; 3],
    classes: usize,
    blocks_per_stage: usize,
    base_width: usize,
    seed: u64,
) -> Result<ModelGraph> {
    check_input(input_shape, classes)?;
    if blocks_per_stage == 0 || base_width == 0 {
        return Err(Error::invalid("blocks per stage and base width must be positive"));
    }
    let mut b = Builder::default();
    let mut segments = Vec::new();
    b.conv("stem.conv".into(), vec![Source::Image], input_shape[0], base_width, 3, 1);
    b.bn("stem.bn".into(), base_width);
    b.chain("stem.relu".into(), LayerKind::Relu);
    segments.push(Segment {
        name: "m_0".into(),
        layers: 0..b.layers.len(),
    });
    let mut channels = base_width;
    for stage in 1..=4 {
        let start = b.layers.len();
        let width = base_width << (stage - 1);
        for block in 0..blocks_per_stage {
            let stride = if block == 0 { 2 } else { 1 };
            let p = format!("s{stage}.b{block}");
            let block_in = b.prev();
            b.conv(format!("{p}.conv1"), block_in.clone(), channels, width, 3, stride);
            b.bn(format!("{p}.bn1"), width);
            b.chain(format!("{p}.relu1"), LayerKind::Relu);
            let src = b.prev();
            b.conv(format!("{p}.conv2"), src, width, width, 3, 1);
            let branch = b.bn(format!("{p}.bn2"), width);
            let shortcut = if stride != 1 || channels != width {
                b.conv(format!("{p}.down.conv"), block_in, channels, width, 1, stride);
                vec![Source::Layer(b.bn(format!("{p}.down.bn"), width))]
            } else {
                block_in
            };
            b.push(
                format!("{p}.add"),
                LayerKind::Add,
                vec![Source::Layer(branch), shortcut[0]],
            );
            b.chain(format!("{p}.relu2"), LayerKind::Relu);
            channels = width;
        }
        segments.push(Segment {
            name: SEGMENT_NAMES[stage].into(),
            layers: start..b.layers.len(),
        });
    }
    let start = b.layers.len();
    b.head(channels, classes);
    segments.push(Segment {
        name: "m_fc".into(),
        layers: start..b.layers.len(),
    });
    let arch = Architecture::MiniResnet {
        input_shape,
        classes,
        blocks_per_stage,
        base_width,
    };
    ModelGraph::assemble(arch, input_shape, classes, b.layers, segments, seed)
}
