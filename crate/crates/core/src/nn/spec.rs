//! Architecture descriptions and the named presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
    /// Whether a dynamic pruning gate may be attached to this convolution.
    pub gated: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            stride: 1,
            padding: kernel_size / 2,
            bias: false,
            gated: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn gated(mut self) -> Self {
        self.gated = true;
        self
    }

    /// `floor((n + 2p - k) / s) + 1`, or `None` when the kernel does not fit.
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel_size || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel_size) / self.stride + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d(ConvSpec),
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    /// Channel-wise batch normalization.
    Norm { channels: usize },
    /// Non-overlapping average pooling with a square window.
    AvgPool { size: usize },
    GlobalAvgPool,
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }

    pub fn conv(name: impl Into<String>, conv: ConvSpec) -> Self {
        Self::new(name, LayerKind::Conv2d(conv))
    }
}

/// `relu(body(x) + shortcut(x))`; an empty shortcut is the identity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualSpec {
    pub name: String,
    pub body: Vec<LayerSpec>,
    pub shortcut: Vec<LayerSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Block {
    Layer(LayerSpec),
    Residual(ResidualSpec),
}

/// Activation shape of a single sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Image { c: usize, h: usize, w: usize },
    Flat(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// Per-sample input as `[channels, height, width]`.
    pub input: [usize; 3],
    pub num_classes: usize,
    pub blocks: Vec<Block>,
}

pub const PRESETS: [&str; 4] = ["tiny-vgg", "tiny-resnet", "vgg11-shape", "resnet32-shape"];

impl ModelSpec {
    /// Looks a preset up by name using its natural input size and class count.
    pub fn preset(name: &str) -> Result<ModelSpec> {
        match name {
            "tiny-vgg" => tiny_vgg([3, 8, 8], 4),
            "tiny-resnet" => tiny_resnet([3, 8, 8], 4),
            "vgg11-shape" => vgg11_shape([3, 32, 32], 10),
            "resnet32-shape" => resnet32_shape([3, 32, 32], 10),
            other => Err(unknown_preset(other)),
        }
    }

    pub fn preset_with(name: &str, input: [usize; 3], num_classes: usize) -> Result<ModelSpec> {
        match name {
            "tiny-vgg" => tiny_vgg(input, num_classes),
            "tiny-resnet" => tiny_resnet(input, num_classes),
            "vgg11-shape" => vgg11_shape(input, num_classes),
            "resnet32-shape" => resnet32_shape(input, num_classes),
            other => Err(unknown_preset(other)),
        }
    }

    /// Checks channel consistency and spatial extents; returns the logits width.
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Structural(format!(
                "model `{}`: input extents must be positive",
                self.name
            )));
        }
        let mut shape = Shape::Image { c, h, w };
        let mut seen_conv = false;
        for block in &self.blocks {
            match block {
                Block::Layer(layer) => {
                    if let LayerKind::Conv2d(conv) = &layer.kind {
                        if !seen_conv && conv.gated {
                            return Err(Error::Structural(format!(
                                "first convolution `{}` cannot be gated",
                                layer.name
                            )));
                        }
                        seen_conv = true;
                    }
                    shape = infer_layer(layer, shape)?;
                }
                Block::Residual(res) => {
                    if !seen_conv {
                        return Err(Error::Structural(format!(
                            "residual block `{}` before the stem convolution",
                            res.name
                        )));
                    }
                    shape = infer_residual(res, shape)?;
                }
            }
        }
        match shape {
            Shape::Flat(n) if n == self.num_classes => Ok(()),
            other => Err(Error::Structural(format!(
                "model `{}` ends in {other:?}, expected {} logits",
                self.name, self.num_classes
            ))),
        }
    }
}

fn unknown_preset(name: &str) -> Error {
    Error::Config(format!(
        "unknown model preset `{name}` (expected one of {})",
        PRESETS.join(", ")
    ))
}

pub(crate) fn infer_layer(layer: &LayerSpec, shape: Shape) -> Result<Shape> {
    let err = |msg: String| Error::Structural(format!("layer `{}`: {msg}", layer.name));
    match (&layer.kind, shape) {
        (LayerKind::Conv2d(conv), Shape::Image { c, h, w }) => {
            if conv.in_channels != c {
                return Err(err(format!("expects {} input channels, got {c}", conv.in_channels)));
            }
            if conv.out_channels == 0 || conv.kernel_size == 0 {
                return Err(err("empty convolution".into()));
            }
            let oh = conv.output_extent(h).filter(|&v| v >= 1);
            let ow = conv.output_extent(w).filter(|&v| v >= 1);
            match (oh, ow) {
                (Some(h), Some(w)) => Ok(Shape::Image {
                    c: conv.out_channels,
                    h,
                    w,
                }),
                _ => Err(err(format!("kernel does not fit a {h}x{w} input"))),
            }
        }
        (LayerKind::Norm { channels }, Shape::Image { c, .. }) => {
            if *channels != c {
                return Err(err(format!("normalizes {channels} channels, input has {c}")));
            }
            Ok(shape)
        }
        (LayerKind::Relu, s) => Ok(s),
        (LayerKind::AvgPool { size }, Shape::Image { c, h, w }) => {
            if *size == 0 || h / size == 0 || w / size == 0 {
                return Err(err(format!("pool of {size} does not fit {h}x{w}")));
            }
            Ok(Shape::Image {
                c,
                h: h / size,
                w: w / size,
            })
        }
        (LayerKind::GlobalAvgPool, Shape::Image { c, .. }) => Ok(Shape::Image { c, h: 1, w: 1 }),
        (LayerKind::Flatten, Shape::Image { c, h, w }) => Ok(Shape::Flat(c * h * w)),
        (LayerKind::Flatten, Shape::Flat(n)) => Ok(Shape::Flat(n)),
        (
            LayerKind::Linear {
                in_features,
                out_features,
            },
            Shape::Flat(n),
        ) => {
            if *in_features != n {
                return Err(err(format!("expects {in_features} features, got {n}")));
            }
            Ok(Shape::Flat(*out_features))
        }
        (kind, s) => Err(err(format!("{kind:?} cannot consume {s:?}"))),
    }
}

pub(crate) fn infer_residual(res: &ResidualSpec, shape: Shape) -> Result<Shape> {
    let mut body = shape;
    for layer in &res.body {
        body = infer_layer(layer, body)?;
    }
    let mut short = shape;
    for layer in &res.shortcut {
        if matches!(&layer.kind, LayerKind::Conv2d(c) if c.gated) {
            return Err(Error::Structural(format!(
                "shortcut convolution `{}` cannot be gated",
                layer.name
            )));
        }
        short = infer_layer(layer, short)?;
    }
    if body != short {
        return Err(Error::Structural(format!(
            "residual `{}`: body yields {body:?} but shortcut yields {short:?}",
            res.name
        )));
    }
    if !matches!(body, Shape::Image { .. }) {
        return Err(Error::Structural(format!(
            "residual `{}` must operate on feature maps",
            res.name
        )));
    }
    Ok(body)
}

fn conv_bn_relu(out: &mut Vec<Block>, name: &str, conv: ConvSpec) {
    let c = conv.out_channels;
    out.push(Block::Layer(LayerSpec::conv(format!("{name}.conv"), conv)));
    out.push(Block::Layer(LayerSpec::new(
        format!("{name}.bn"),
        LayerKind::Norm { channels: c },
    )));
    out.push(Block::Layer(LayerSpec::new(format!("{name}.relu"), LayerKind::Relu)));
}

fn pool(out: &mut Vec<Block>, name: &str) {
    out.push(Block::Layer(LayerSpec::new(name, LayerKind::AvgPool { size: 2 })));
}

fn head(out: &mut Vec<Block>, features: usize, classes: usize) {
    out.push(Block::Layer(LayerSpec::new("gap", LayerKind::GlobalAvgPool)));
    out.push(Block::Layer(LayerSpec::new("flatten", LayerKind::Flatten)));
    out.push(Block::Layer(LayerSpec::new(
        "fc",
        LayerKind::Linear {
            in_features: features,
            out_features: classes,
        },
    )));
}

/// Four conv blocks (8, 16, 32, 32 channels) with two 2x2 poolings.
pub fn tiny_vgg(input: [usize; 3], num_classes: usize) -> Result<ModelSpec> {
    let mut blocks = Vec::new();
    conv_bn_relu(&mut blocks, "block1", ConvSpec::new(input[0], 8, 3));
    conv_bn_relu(&mut blocks, "block2", ConvSpec::new(8, 16, 3).gated());
    pool(&mut blocks, "pool2");
    conv_bn_relu(&mut blocks, "block3", ConvSpec::new(16, 32, 3).gated());
    conv_bn_relu(&mut blocks, "block4", ConvSpec::new(32, 32, 3).gated());
    pool(&mut blocks, "pool4");
    head(&mut blocks, 32, num_classes);
    finish("tiny-vgg", input, num_classes, blocks)
}

fn basic_block(name: &str, cin: usize, cout: usize, stride: usize) -> Block {
    let body = vec![
        LayerSpec::conv(
            format!("{name}.conv1"),
            ConvSpec::new(cin, cout, 3).stride(stride).gated(),
        ),
        LayerSpec::new(format!("{name}.bn1"), LayerKind::Norm { channels: cout }),
        LayerSpec::new(format!("{name}.relu1"), LayerKind::Relu),
        LayerSpec::conv(format!("{name}.conv2"), ConvSpec::new(cout, cout, 3)),
        LayerSpec::new(format!("{name}.bn2"), LayerKind::Norm { channels: cout }),
    ];
    let shortcut = if stride != 1 || cin != cout {
        vec![
            LayerSpec::conv(
                format!("{name}.shortcut.conv"),
                ConvSpec::new(cin, cout, 1).stride(stride),
            ),
            LayerSpec::new(format!("{name}.shortcut.bn"), LayerKind::Norm { channels: cout }),
        ]
    } else {
        Vec::new()
    };
    Block::Residual(ResidualSpec {
        name: name.into(),
        body,
        shortcut,
    })
}

fn resnet(
    name: &str,
    input: [usize; 3],
    num_classes: usize,
    widths: [usize; 3],
    blocks_per_stage: usize,
) -> Result<ModelSpec> {
    let mut blocks = Vec::new();
    conv_bn_relu(&mut blocks, "stem", ConvSpec::new(input[0], widths[0], 3));
    let mut cin = widths[0];
    for (stage, &cout) in widths.iter().enumerate() {
        for b in 0..blocks_per_stage {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            blocks.push(basic_block(
                &format!("stage{}.block{b}", stage + 1),
                cin,
                cout,
                stride,
            ));
            cin = cout;
        }
    }
    head(&mut blocks, cin, num_classes);
    finish(name, input, num_classes, blocks)
}

/// Three single-block residual stages (8, 16, 32 channels).
pub fn tiny_resnet(input: [usize; 3], num_classes: usize) -> Result<ModelSpec> {
    resnet("tiny-resnet", input, num_classes, [8, 16, 32], 1)
}

/// VGG-11 feature stack (configuration "A" with batch normalization) and a
/// single linear classifier over the flattened final feature map.
///
/// At 32x32 input this is the CIFAR-10 variant. With 224x224 input the
/// convolutions alone cost 14.97 GFLOPs (1 MAC = 2 FLOPs), the scale of the
/// 15.48 G figure usually quoted for VGG-11.
pub fn vgg11_shape(input: [usize; 3], num_classes: usize) -> Result<ModelSpec> {
    const CFG: [Option<usize>; 13] = [
        Some(64),
        None,
        Some(128),
        None,
        Some(256),
        Some(256),
        None,
        Some(512),
        Some(512),
        None,
        Some(512),
        Some(512),
        None,
    ];
    let mut blocks = Vec::new();
    let (mut c, mut h, mut w) = (input[0], input[1], input[2]);
    let mut conv_idx = 0;
    for (i, entry) in CFG.iter().enumerate() {
        match entry {
            Some(out) => {
                conv_idx += 1;
                let mut conv = ConvSpec::new(c, *out, 3);
                if conv_idx > 1 {
                    conv = conv.gated();
                }
                conv_bn_relu(&mut blocks, &format!("features.{conv_idx}"), conv);
                c = *out;
            }
            None => {
                pool(&mut blocks, &format!("pool{i}"));
                h /= 2;
                w /= 2;
            }
        }
    }
    blocks.push(Block::Layer(LayerSpec::new("flatten", LayerKind::Flatten)));
    blocks.push(Block::Layer(LayerSpec::new(
        "classifier",
        LayerKind::Linear {
            in_features: c * h.max(1) * w.max(1),
            out_features: num_classes,
        },
    )));
    finish("vgg11-shape", input, num_classes, blocks)
}

/// CIFAR ResNet-32: three stages of five basic blocks (16, 32, 64 channels).
pub fn resnet32_shape(input: [usize; 3], num_classes: usize) -> Result<ModelSpec> {
    resnet("resnet32-shape", input, num_classes, [16, 32, 64], 5)
}

fn finish(
    name: &str,
    input: [usize; 3],
    num_classes: usize,
    blocks: Vec<Block>,
) -> Result<ModelSpec> {
    let spec = ModelSpec {
        name: name.into(),
        input,
        num_classes,
        blocks,
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_formula() {
        let c = ConvSpec::new(1, 1, 3).stride(2).padding(1);
        assert_eq!(c.output_extent(8), Some(4));
        assert_eq!(c.output_extent(7), Some(4));
        assert_eq!(ConvSpec::new(1, 1, 5).padding(0).output_extent(4), None);
        assert_eq!(ConvSpec::new(1, 1, 2).padding(0).output_extent(2), Some(1));
    }

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            ModelSpec::preset(name).unwrap();
        }
        assert!(ModelSpec::preset("alexnet").is_err());
    }

    #[test]
    fn gated_first_conv_rejected() {
        let mut spec = ModelSpec::preset("tiny-vgg").unwrap();
        if let Block::Layer(LayerSpec {
            kind: LayerKind::Conv2d(c),
            ..
        }) = &mut spec.blocks[0]
        {
            c.gated = true;
        }
        assert!(spec.validate().is_err());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut spec = ModelSpec::preset("tiny-vgg").unwrap();
        spec.blocks[3] = Block::Layer(LayerSpec::conv("x", ConvSpec::new(9, 16, 3)));
        assert!(matches!(spec.validate(), Err(Error::Structural(_))));
    }

    #[test]
    fn too_small_input_rejected() {
        assert!(tiny_vgg([3, 2, 2], 4).is_err());
    }
}
