//! Architecture descriptions: a topologically ordered DAG of layers.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Plain,
    Residual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum LayerKind {
    Input {
        channels: usize,
        height: usize,
        width: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        #[serde(default, skip_serializing_if = "is_false")]
        gated: bool,
    },
    BatchNorm {
        channels: usize,
        #[serde(default, skip_serializing_if = "is_false")]
        gated: bool,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Flatten,
    Add,
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

fn is_false(v: &bool) -> bool {
    !*v
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::GlobalAvgPool => "avgpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Add => "add",
            LayerKind::Linear { .. } => "linear",
        }
    }

    pub fn is_gated(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d { gated: true, .. } | LayerKind::BatchNorm { gated: true, .. }
        )
    }

    /// Operators that pass every channel through unchanged and in place.
    pub fn preserves_channels(&self) -> bool {
        matches!(
            self,
            LayerKind::Relu | LayerKind::MaxPool { .. } | LayerKind::GlobalAvgPool | LayerKind::Flatten
        )
    }

    fn arity(&self) -> usize {
        match self {
            LayerKind::Input { .. } => 0,
            LayerKind::Add => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub inputs: Vec<String>,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        LayerSpec {
            id: id.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Per-sample activation shape: `(channels, height, width)` for feature maps,
/// `(features, 1, 1)` after flattening.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub flat: bool,
}

impl ActShape {
    pub fn elements(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn batch_shape(&self, n: usize) -> Vec<usize> {
        if self.flat {
            vec![n, self.channels]
        } else {
            vec![n, self.channels, self.height, self.width]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// `[channels, height, width]`
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    /// Indices of each layer's inputs.
    pub fn input_indices(&self) -> Vec<Vec<usize>> {
        let pos: HashMap<&str, usize> = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (l.id.as_str(), i))
            .collect();
        self.layers
            .iter()
            .map(|l| l.inputs.iter().map(|id| pos[id.as_str()]).collect())
            .collect()
    }

    /// Indices of each layer's consumers.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.layers.len()];
        for (i, inputs) in self.input_indices().into_iter().enumerate() {
            for j in inputs {
                out[j].push(i);
            }
        }
        out
    }

    /// Checks ordering, arity and channel consistency, returning the inferred
    /// per-sample shape of every layer.
    pub fn validate(&self) -> Result<Vec<ActShape>> {
        if self.layers.is_empty() {
            return Err(Error::Structure("model has no layers".into()));
        }
        let mut pos: HashMap<&str, usize> = HashMap::new();
        let mut shapes: Vec<ActShape> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            if pos.insert(layer.id.as_str(), i).is_some() {
                return Err(Error::shape(&layer.id, "duplicate layer id"));
            }
            if matches!(layer.kind, LayerKind::Input { .. }) != (i == 0) {
                return Err(Error::shape(&layer.id, "exactly one input layer, placed first"));
            }
            if layer.inputs.len() != layer.kind.arity() {
                return Err(Error::shape(
                    &layer.id,
                    format!("{} expects {} inputs, has {}", layer.kind.name(), layer.kind.arity(), layer.inputs.len()),
                ));
            }
            let mut ins = Vec::with_capacity(layer.inputs.len());
            for id in &layer.inputs {
                match pos.get(id.as_str()) {
                    Some(&j) if j < i => ins.push(shapes[j]),
                    _ => {
                        return Err(Error::shape(
                            &layer.id,
                            format!("predecessor `{id}` missing or not earlier in topological order"),
                        ))
                    }
                }
            }
            shapes.push(infer(layer, &ins, self.input_shape)?);
        }
        let consumers = self.consumers();
        for (i, c) in consumers.iter().enumerate() {
            if c.is_empty() && i + 1 != self.layers.len() {
                return Err(Error::shape(&self.layers[i].id, "dangling layer (no consumers)"));
            }
        }
        let last = self.layers.last().expect("non-empty");
        match last.kind {
            LayerKind::Linear { out_features, .. } if out_features == self.classes => {}
            _ => {
                return Err(Error::shape(
                    &last.id,
                    format!("output layer must be linear with {} outputs", self.classes),
                ))
            }
        }
        Ok(shapes)
    }

    pub fn shapes(&self) -> Vec<ActShape> {
        self.validate().expect("model spec previously validated")
    }
}

fn infer(layer: &LayerSpec, ins: &[ActShape], input_shape: [usize; 3]) -> Result<ActShape> {
    let fail = |msg: String| Err(Error::shape(&layer.id, msg));
    let spatial = |s: &ActShape| -> Result<()> {
        if s.flat {
            return Err(Error::shape(&layer.id, "expects a feature map, got flat features"));
        }
        Ok(())
    };
    match &layer.kind {
        LayerKind::Input { channels, height, width } => {
            if [*channels, *height, *width] != input_shape {
                return fail("input layer disagrees with model input shape".into());
            }
            if *channels == 0 || *height == 0 || *width == 0 {
                return fail("zero extent".into());
            }
            Ok(ActShape {
                channels: *channels,
                height: *height,
                width: *width,
                flat: false,
            })
        }
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            let s = ins[0];
            spatial(&s)?;
            if s.channels != *in_channels {
                return fail(format!("in_channels {in_channels} but predecessor has {}", s.channels));
            }
            if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                return fail("zero extent".into());
            }
            if s.height + 2 * padding < *kernel || s.width + 2 * padding < *kernel {
                return fail("kernel larger than padded input".into());
            }
            Ok(ActShape {
                channels: *out_channels,
                height: (s.height + 2 * padding - kernel) / stride + 1,
                width: (s.width + 2 * padding - kernel) / stride + 1,
                flat: false,
            })
        }
        LayerKind::BatchNorm { channels, .. } => {
            let s = ins[0];
            spatial(&s)?;
            if s.channels != *channels {
                return fail(format!("channels {channels} but predecessor has {}", s.channels));
            }
            Ok(s)
        }
        LayerKind::Relu => Ok(ins[0]),
        LayerKind::MaxPool { kernel, stride } => {
            let s = ins[0];
            spatial(&s)?;
            if *kernel == 0 || *stride == 0 || s.height < *kernel || s.width < *kernel {
                return fail(format!("pool window {kernel} does not fit {}x{}", s.height, s.width));
            }
            Ok(ActShape {
                height: (s.height - kernel) / stride + 1,
                width: (s.width - kernel) / stride + 1,
                ..s
            })
        }
        LayerKind::GlobalAvgPool => {
            let s = ins[0];
            spatial(&s)?;
            Ok(ActShape {
                height: 1,
                width: 1,
                ..s
            })
        }
        LayerKind::Flatten => {
            let s = ins[0];
            Ok(ActShape {
                channels: s.elements(),
                height: 1,
                width: 1,
                flat: true,
            })
        }
        LayerKind::Add => {
            if ins[0] != ins[1] {
                return fail(format!(
                    "operand shapes differ: {}x{}x{} vs {}x{}x{}",
                    ins[0].channels, ins[0].height, ins[0].width, ins[1].channels, ins[1].height, ins[1].width
                ));
            }
            Ok(ins[0])
        }
        LayerKind::Linear {
            in_features,
            out_features,
        } => {
            let s = ins[0];
            if !s.flat {
                return fail("linear expects flattened input".into());
            }
            if s.channels != *in_features {
                return fail(format!("in_features {in_features} but predecessor has {}", s.channels));
            }
            Ok(ActShape {
                channels: *out_features,
                height: 1,
                width: 1,
                flat: true,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PlainCnnOptions {
    /// Insert a 2×2 max pool after every `pool_every`-th block (never after the last).
    pub pool_every: usize,
    /// Conv→BN→ReLU blocks when set; biased Conv→ReLU blocks otherwise.
    pub batch_norm: bool,
}

impl Default for PlainCnnOptions {
    fn default() -> Self {
        PlainCnnOptions {
            pool_every: 1,
            batch_norm: true,
        }
    }
}

struct Builder {
    layers: Vec<LayerSpec>,
    last: String,
}

impl Builder {
    fn new(input_shape: [usize; 3]) -> Self {
        let [channels, height, width] = input_shape;
        Builder {
            layers: vec![LayerSpec::new("input", LayerKind::Input { channels, height, width }, &[])],
            last: "input".into(),
        }
    }

    fn push(&mut self, id: String, kind: LayerKind, inputs: &[&str]) -> String {
        self.layers.push(LayerSpec::new(id.clone(), kind, inputs));
        self.last = id.clone();
        id
    }

    fn then(&mut self, id: String, kind: LayerKind) -> String {
        let prev = self.last.clone();
        self.push(id, kind, &[&prev])
    }

    fn conv(&mut self, id: String, from: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> String {
        self.push(
            id,
            LayerKind::Conv2d {
                in_channels: cin,
                out_channels: cout,
                kernel: k,
                stride,
                padding: k / 2,
                bias,
                gated: false,
            },
            &[from],
        )
    }

    fn bn(&mut self, id: String, channels: usize) -> String {
        self.then(id, LayerKind::BatchNorm { channels, gated: false })
    }

    fn head(&mut self, features: usize, classes: usize) {
        self.then("gap".into(), LayerKind::GlobalAvgPool);
        self.then("flatten".into(), LayerKind::Flatten);
        self.then(
            "fc".into(),
            LayerKind::Linear {
                in_features: features,
                out_features: classes,
            },
        );
    }
}

/// VGG-style plain network: `widths.len()` conv blocks with periodic 2×2 max
/// pooling, global average pooling and a linear classifier.
pub fn build_plain_cnn(widths: &[usize], input_shape: [usize; 3], classes: usize, opts: &PlainCnnOptions) -> Result<ModelSpec> {
    if widths.is_empty() || widths.contains(&0) {
        return Err(Error::Argument("widths must be non-empty and positive".into()));
    }
    check_common(input_shape, classes)?;
    if opts.pool_every == 0 {
        return Err(Error::Argument("pool_every must be at least 1".into()));
    }
    let pools = (widths.len() - 1) / opts.pool_every;
    let (mut h, mut w) = (input_shape[1], input_shape[2]);
    for _ in 0..pools {
        if h < 2 || w < 2 {
            return Err(Error::Argument(format!(
                "input {}x{} too small for {pools} pooling stages",
                input_shape[1], input_shape[2]
            )));
        }
        h /= 2;
        w /= 2;
    }

    let mut b = Builder::new(input_shape);
    let mut cin = input_shape[0];
    for (i, &width) in widths.iter().enumerate() {
        let n = i + 1;
        let prev = b.last.clone();
        b.conv(format!("conv{n}"), &prev, cin, width, 3, 1, !opts.batch_norm);
        if opts.batch_norm {
            b.bn(format!("bn{n}"), width);
        }
        b.then(format!("relu{n}"), LayerKind::Relu);
        if n < widths.len() && n % opts.pool_every == 0 {
            b.then(format!("pool{n}"), LayerKind::MaxPool { kernel: 2, stride: 2 });
        }
        cin = width;
    }
    b.head(cin, classes);
    let spec = ModelSpec {
        architecture: Architecture::Plain,
        input_shape,
        classes,
        layers: b.layers,
    };
    spec.validate()?;
    Ok(spec)
}

/// Residual network: a conv-BN-ReLU stem followed by stages of basic blocks
/// (conv-BN-ReLU-conv-BN, add, ReLU). The first block of every later stage
/// downsamples by 2 and uses a projection (1×1 conv-BN) shortcut; every other
/// shortcut is a pure identity.
pub fn build_mini_resnet(
    stage_widths: &[usize],
    blocks_per_stage: &[usize],
    input_shape: [usize; 3],
    classes: usize,
) -> Result<ModelSpec> {
    if stage_widths.is_empty() || stage_widths.contains(&0) {
        return Err(Error::Argument("stage widths must be non-empty and positive".into()));
    }
    if blocks_per_stage.len() != stage_widths.len() || blocks_per_stage.contains(&0) {
        return Err(Error::Argument("need one positive block count per stage".into()));
    }
    check_common(input_shape, classes)?;
    let (mut h, mut w) = (input_shape[1], input_shape[2]);
    for _ in 1..stage_widths.len() {
        if h < 2 || w < 2 {
            return Err(Error::Argument(format!(
                "input {}x{} too small for {} downsampling stages",
                input_shape[1],
                input_shape[2],
                stage_widths.len() - 1
            )));
        }
        h = h.div_ceil(2);
        w = w.div_ceil(2);
    }

    let mut b = Builder::new(input_shape);
    b.conv("stem.conv".into(), "input", input_shape[0], stage_widths[0], 3, 1, false);
    b.bn("stem.bn".into(), stage_widths[0]);
    b.then("stem.relu".into(), LayerKind::Relu);
    let mut cin = stage_widths[0];
    for (s, (&width, &blocks)) in stage_widths.iter().zip(blocks_per_stage).enumerate() {
        for blk in 0..blocks {
            let p = format!("s{}b{}", s + 1, blk + 1);
            let block_in = b.last.clone();
            let stride = if s > 0 && blk == 0 { 2 } else { 1 };
            b.conv(format!("{p}.conv1"), &block_in, cin, width, 3, stride, false);
            b.bn(format!("{p}.bn1"), width);
            b.then(format!("{p}.relu1"), LayerKind::Relu);
            let prev = b.last.clone();
            b.conv(format!("{p}.conv2"), &prev, width, width, 3, 1, false);
            let main = b.bn(format!("{p}.bn2"), width);
            let shortcut = if stride != 1 || cin != width {
                b.conv(format!("{p}.proj.conv"), &block_in, cin, width, 1, stride, false);
                b.bn(format!("{p}.proj.bn"), width)
            } else {
                block_in
            };
            b.push(format!("{p}.add"), LayerKind::Add, &[&main, &shortcut]);
            b.then(format!("{p}.relu2"), LayerKind::Relu);
            cin = width;
        }
    }
    b.head(cin, classes);
    let spec = ModelSpec {
        architecture: Architecture::Residual,
        input_shape,
        classes,
        layers: b.layers,
    };
    spec.validate()?;
    Ok(spec)
}

fn check_common(input_shape: [usize; 3], classes: usize) -> Result<()> {
    if input_shape.contains(&0) {
        return Err(Error::Argument("input extents must be positive".into()));
    }
    if classes < 2 {
        return Err(Error::Argument("need at least two classes".into()));
    }
    Ok(())
}

/// Counts `(pure, projection)` shortcuts. An add whose operands both come
/// straight out of a conv or BN layer has a convolution on its side branch;
/// otherwise one operand is a bare skip.
pub fn count_shortcuts(spec: &ModelSpec) -> (usize, usize) {
    let is_module = |id: &str| {
        matches!(
            spec.layer(id).map(|l| &l.kind),
            Some(LayerKind::Conv2d { .. } | LayerKind::BatchNorm { .. })
        )
    };
    let mut pure = 0;
    let mut projection = 0;
    for layer in spec.layers.iter().filter(|l| matches!(l.kind, LayerKind::Add)) {
        if layer.inputs.iter().all(|id| is_module(id)) {
            projection += 1;
        } else {
            pure += 1;
        }
    }
    (pure, projection)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_cnn_small() {
        let spec = build_plain_cnn(&[8, 16], [1, 8, 8], 2, &PlainCnnOptions::default()).unwrap();
        let convs = spec
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv2d { .. }))
            .count();
        assert_eq!(convs, 2);
        assert_eq!(
            spec.layers.last().unwrap().kind,
            LayerKind::Linear {
                in_features: 16,
                out_features: 2
            }
        );
    }

    #[test]
    fn plain_cnn_rejects_empty_widths() {
        assert!(matches!(
            build_plain_cnn(&[], [1, 8, 8], 2, &PlainCnnOptions::default()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn plain_cnn_rejects_tiny_input() {
        assert!(matches!(
            build_plain_cnn(&[4, 4, 4, 4], [1, 4, 4], 2, &PlainCnnOptions::default()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn resnet_shortcut_counts() {
        let spec = build_mini_resnet(&[8, 16], &[2, 2], [1, 8, 8], 2).unwrap();
        assert_eq!(count_shortcuts(&spec), (3, 1));
        let spec = build_mini_resnet(&[8], &[1], [1, 8, 8], 2).unwrap();
        assert_eq!(count_shortcuts(&spec), (1, 0));
    }

    #[test]
    fn add_with_mismatched_operands_is_rejected() {
        let mut spec = build_mini_resnet(&[8], &[1], [1, 8, 8], 2).unwrap();
        let i = spec.index_of("s1b1.bn2").unwrap();
        spec.layers[i].kind = LayerKind::BatchNorm { channels: 7, gated: false };
        let j = spec.index_of("s1b1.conv2").unwrap();
        if let LayerKind::Conv2d { out_channels, .. } = &mut spec.layers[j].kind {
            *out_channels = 7;
        }
        let err = spec.validate().unwrap_err();
        assert!(matches!(err, Error::Shape { ref node, .. } if node == "s1b1.add"), "{err}");
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = build_mini_resnet(&[4, 8], &[1, 1], [3, 8, 8], 5).unwrap();
        let text = serde_json::to_string(&spec).unwrap();
        let back: ModelSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(spec, back);
    }
}
