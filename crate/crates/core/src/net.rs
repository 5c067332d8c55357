//! Network description and the ideal digital forward operators.
//!
//! A [`NetworkSpec`] is an ordered list of [`LayerSpec`]s plus the converter
//! ranges attached to each analog layer. Convolutions are lowered to GEMM via
//! [`im2col`]; depthwise convolutions can be expanded into the block-diagonal
//! dense form they occupy on a crossbar ([`depthwise_expand`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    DepthwiseConv2d,
    Dense,
    Relu,
    AvgPool,
    MaxPool,
    ScaleBias,
}

impl LayerKind {
    pub fn is_conv_like(self) -> bool {
        matches!(self, LayerKind::Conv2d | LayerKind::DepthwiseConv2d)
    }

    /// Layers that hold a weight matrix eligible for crossbar execution.
    pub fn is_weighted(self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d | LayerKind::DepthwiseConv2d | LayerKind::Dense
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<(usize, usize)>,
    #[serde(default)]
    pub in_channels: usize,
    #[serde(default)]
    pub out_channels: usize,
    /// Flattened weights; `None` until trained. Shapes:
    /// conv2d `[out, in*kh*kw]`, depthwise `[out, kh*kw]`, dense `[out, in]`,
    /// scale_bias `[channels]` (the per-channel scale).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Tensor>,
    /// Digital per-output-channel bias, applied after the (possibly analog) GEMM.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<Tensor>,
    /// Whether the layer executes on the crossbar. Pooling, ReLU and
    /// scale/bias always run on the digital datapath.
    #[serde(default)]
    pub analog: bool,
}

impl LayerSpec {
    pub fn conv2d(in_channels: usize, out_channels: usize, kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d,
            kernel: Some(kernel),
            stride: Some(stride),
            padding: Some(padding),
            in_channels,
            out_channels,
            weights: None,
            bias: None,
            analog: true,
        }
    }

    pub fn depthwise_conv2d(channels: usize, multiplier: usize, kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Self {
        LayerSpec {
            kind: LayerKind::DepthwiseConv2d,
            kernel: Some(kernel),
            stride: Some(stride),
            padding: Some(padding),
            in_channels: channels,
            out_channels: channels * multiplier,
            weights: None,
            bias: None,
            analog: true,
        }
    }

    pub fn dense(in_features: usize, out_features: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Dense,
            kernel: None,
            stride: None,
            padding: None,
            in_channels: in_features,
            out_channels: out_features,
            weights: None,
            bias: None,
            analog: true,
        }
    }

    pub fn relu() -> Self {
        LayerSpec {
            kind: LayerKind::Relu,
            kernel: None,
            stride: None,
            padding: None,
            in_channels: 0,
            out_channels: 0,
            weights: None,
            bias: None,
            analog: false,
        }
    }

    pub fn avg_pool(kernel: (usize, usize), stride: (usize, usize)) -> Self {
        LayerSpec {
            kind: LayerKind::AvgPool,
            kernel: Some(kernel),
            stride: Some(stride),
            padding: None,
            in_channels: 0,
            out_channels: 0,
            weights: None,
            bias: None,
            analog: false,
        }
    }

    pub fn max_pool(kernel: (usize, usize), stride: (usize, usize)) -> Self {
        LayerSpec {
            kind: LayerKind::MaxPool,
            stride: Some(stride),
            kernel: Some(kernel),
            padding: None,
            in_channels: 0,
            out_channels: 0,
            weights: None,
            bias: None,
            analog: false,
        }
    }

    pub fn scale_bias(channels: usize) -> Self {
        LayerSpec {
            kind: LayerKind::ScaleBias,
            kernel: None,
            stride: None,
            padding: None,
            in_channels: channels,
            out_channels: channels,
            weights: None,
            bias: None,
            analog: false,
        }
    }

    pub fn kernel_or_1(&self) -> (usize, usize) {
        self.kernel.unwrap_or((1, 1))
    }

    pub fn stride_or_1(&self) -> (usize, usize) {
        self.stride.unwrap_or((1, 1))
    }

    pub fn padding_or_0(&self) -> (usize, usize) {
        self.padding.unwrap_or((0, 0))
    }

    /// GEMM dimensions as seen by the crossbar: (rows, cols, structural nonzeros).
    /// Rows are DAC inputs, cols are ADC outputs; a depthwise layer expanded to
    /// dense form occupies the full rectangle but holds only `out*kh*kw` live cells.
    pub fn crossbar_dims(&self) -> Option<(usize, usize, usize)> {
        match self.kind {
            LayerKind::Conv2d => {
                let (kh, kw) = self.kernel_or_1();
                let rows = self.in_channels * kh * kw;
                Some((rows, self.out_channels, rows * self.out_channels))
            }
            LayerKind::DepthwiseConv2d => {
                let (kh, kw) = self.kernel_or_1();
                let rows = self.in_channels * kh * kw;
                Some((rows, self.out_channels, self.out_channels * kh * kw))
            }
            LayerKind::Dense => Some((self.in_channels, self.out_channels, self.in_channels * self.out_channels)),
            _ => None,
        }
    }

    fn expected_weight_shape(&self) -> Option<Vec<usize>> {
        let (kh, kw) = self.kernel_or_1();
        match self.kind {
            LayerKind::Conv2d => Some(vec![self.out_channels, self.in_channels * kh * kw]),
            LayerKind::DepthwiseConv2d => Some(vec![self.out_channels, kh * kw]),
            LayerKind::Dense => Some(vec![self.out_channels, self.in_channels]),
            LayerKind::ScaleBias => Some(vec![self.out_channels]),
            _ => None,
        }
    }
}

/// Converter ranges serialized alongside the layer list.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerRanges {
    pub layer: usize,
    pub bits_adc: u32,
    pub bits_dac: u32,
    pub r_adc: f64,
    pub r_dac: f64,
    /// Static weight clipping bounds frozen at training time.
    pub w_min: f64,
    pub w_max: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct NetConverters {
    /// Shared ADC gain; identical across layers by construction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_layer: Vec<LayerRanges>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    pub layers: Vec<LayerSpec>,
    #[serde(default, skip_serializing_if = "converters_empty")]
    pub converters: NetConverters,
    /// Free-form provenance note (e.g. marking a spec as a non-authoritative
    /// reconstruction).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

fn converters_empty(c: &NetConverters) -> bool {
    c.global_s.is_none() && c.per_layer.is_empty()
}

/// Activation shape at a point in the network: either an image or a flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActShape {
    Chw(usize, usize, usize),
    Flat(usize),
}

impl ActShape {
    pub fn elements(&self) -> usize {
        match *self {
            ActShape::Chw(c, h, w) => c * h * w,
            ActShape::Flat(f) => f,
        }
    }

    fn from_input(shape: &[usize]) -> Result<Self> {
        match shape.len() {
            1 => Ok(ActShape::Flat(shape[0])),
            3 => Ok(ActShape::Chw(shape[0], shape[1], shape[2])),
            _ => Err(Error::dimension("input_shape", "[F] or [C,H,W]", format!("{shape:?}"))),
        }
    }
}

pub fn conv_output_hw(h: usize, w: usize, kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Result<(usize, usize)> {
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let (ph, pw) = padding;
    if sh == 0 || sw == 0 || kh == 0 || kw == 0 {
        return Err(Error::Config("kernel and stride must be >= 1".into()));
    }
    if h + 2 * ph < kh || w + 2 * pw < kw {
        return Err(Error::dimension("conv input", format!("at least {kh}x{kw}"), format!("{h}x{w} with padding {ph},{pw}")));
    }
    Ok(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
}

impl NetworkSpec {
    pub fn new(input_shape: Vec<usize>, class_count: usize, layers: Vec<LayerSpec>) -> Self {
        NetworkSpec {
            input_shape,
            class_count,
            layers,
            converters: NetConverters::default(),
            notes: None,
        }
    }

    /// Indexes of layers that execute on the crossbar.
    pub fn analog_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.analog && l.kind.is_weighted())
            .map(|(i, _)| i)
            .collect()
    }

    /// Propagate shapes through every layer; returns the activation shape
    /// *entering* each layer plus the final output shape.
    pub fn shape_plan(&self) -> Result<(Vec<ActShape>, ActShape)> {
        let mut shape = ActShape::from_input(&self.input_shape)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            // Dense layers consume a flattened view of image activations.
            if layer.kind == LayerKind::Dense {
                shape = ActShape::Flat(shape.elements());
            }
            inputs.push(shape.clone());
            shape = self.layer_output_shape(idx, &shape)?;
        }
        Ok((inputs, shape))
    }

    fn layer_output_shape(&self, idx: usize, input: &ActShape) -> Result<ActShape> {
        let layer = &self.layers[idx];
        let ctx = format!("layer {idx} ({:?})", layer.kind);
        match layer.kind {
            LayerKind::Conv2d | LayerKind::DepthwiseConv2d => {
                let ActShape::Chw(c, h, w) = *input else {
                    return Err(Error::dimension(&ctx, "image input", "flat input"));
                };
                if c != layer.in_channels {
                    return Err(Error::dimension(&ctx, layer.in_channels, c));
                }
                if layer.kind == LayerKind::DepthwiseConv2d && layer.out_channels % layer.in_channels != 0 {
                    return Err(Error::dimension(&ctx, "out_channels divisible by in_channels", layer.out_channels));
                }
                let (oh, ow) = conv_output_hw(h, w, layer.kernel_or_1(), layer.stride_or_1(), layer.padding_or_0())?;
                Ok(ActShape::Chw(layer.out_channels, oh, ow))
            }
            LayerKind::Dense => {
                let ActShape::Flat(f) = *input else {
                    return Err(Error::dimension(&ctx, "flat input", "image input"));
                };
                if f != layer.in_channels {
                    return Err(Error::dimension(&ctx, layer.in_channels, f));
                }
                Ok(ActShape::Flat(layer.out_channels))
            }
            LayerKind::Relu => Ok(input.clone()),
            LayerKind::AvgPool | LayerKind::MaxPool => {
                let ActShape::Chw(c, h, w) = *input else {
                    return Err(Error::dimension(&ctx, "image input", "flat input"));
                };
                let (kh, kw) = layer.kernel_or_1();
                let (sh, sw) = layer.stride_or_1();
                if h < kh || w < kw {
                    return Err(Error::dimension(&ctx, format!("at least {kh}x{kw}"), format!("{h}x{w}")));
                }
                Ok(ActShape::Chw(c, (h - kh) / sh + 1, (w - kw) / sw + 1))
            }
            LayerKind::ScaleBias => {
                match *input {
                    ActShape::Chw(c, _, _) if c == layer.in_channels => Ok(input.clone()),
                    ActShape::Flat(f) if f == layer.in_channels => Ok(input.clone()),
                    _ => Err(Error::dimension(&ctx, layer.in_channels, format!("{input:?}"))),
                }
            }
        }
    }

    /// Check shape composition, weight shapes where present, and the
    /// one-quantizer-pair-per-analog-layer rule when converters are attached.
    pub fn validate(&self) -> Result<()> {
        let (_, out) = self.shape_plan()?;
        if out.elements() != self.class_count {
            return Err(Error::dimension("network output", self.class_count, out.elements()));
        }
        for (idx, layer) in self.layers.iter().enumerate() {
            if let (Some(w), Some(expect)) = (&layer.weights, layer.expected_weight_shape()) {
                if w.shape != expect {
                    return Err(Error::dimension(
                        format!("layer {idx} weights"),
                        format!("{expect:?}"),
                        format!("{:?}", w.shape),
                    ));
                }
            }
            if layer.analog && !layer.kind.is_weighted() {
                return Err(Error::Config(format!(
                    "layer {idx} ({:?}) cannot be analog; only weighted GEMM layers run on the crossbar",
                    layer.kind
                )));
            }
        }
        if !self.converters.per_layer.is_empty() {
            let analog = self.analog_layers();
            let mut covered: Vec<usize> = self.converters.per_layer.iter().map(|r| r.layer).collect();
            covered.sort_unstable();
            if covered != analog {
                return Err(Error::Config(format!(
                    "converter attachments {covered:?} do not match analog layers {analog:?}"
                )));
            }
            for r in &self.converters.per_layer {
                if r.bits_dac != r.bits_adc + 1 {
                    return Err(Error::Config(format!(
                        "layer {}: DAC bits must be ADC bits + 1 (got {} and {})",
                        r.layer, r.bits_dac, r.bits_adc
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn ranges_for(&self, layer: usize) -> Option<&LayerRanges> {
        self.converters.per_layer.iter().find(|r| r.layer == layer)
    }
}

/// Unroll conv input patches into a `(C*kh*kw) x (N*oh*ow)` matrix.
///
/// Row index is `c*kh*kw + i*kw + j`; column index enumerates output positions
/// row-major, batch-major. Zero padding only.
pub fn im2col(input: &Tensor, layer: &LayerSpec) -> Result<Tensor> {
    if !layer.kind.is_conv_like() {
        return Err(Error::Config(format!("im2col requires a conv layer, got {:?}", layer.kind)));
    }
    let (n, c, h, w) = match input.shape.as_slice() {
        [c, h, w] => (1, *c, *h, *w),
        [n, c, h, w] => (*n, *c, *h, *w),
        other => return Err(Error::dimension("im2col input", "[C,H,W] or [N,C,H,W]", format!("{other:?}"))),
    };
    if c != layer.in_channels {
        return Err(Error::dimension("im2col channels", layer.in_channels, c));
    }
    let (kh, kw) = layer.kernel_or_1();
    let (sh, sw) = layer.stride_or_1();
    let (ph, pw) = layer.padding_or_0();
    let (oh, ow) = conv_output_hw(h, w, (kh, kw), (sh, sw), (ph, pw))?;

    let rows = c * kh * kw;
    let cols = n * oh * ow;
    let mut out = vec![0.0f32; rows * cols];
    let img_stride = c * h * w;
    for b in 0..n {
        let img = &input.data[b * img_stride..(b + 1) * img_stride];
        for oy in 0..oh {
            for ox in 0..ow {
                let col = b * oh * ow + oy * ow + ox;
                for ch in 0..c {
                    for i in 0..kh {
                        for j in 0..kw {
                            let iy = (oy * sh + i) as isize - ph as isize;
                            let ix = (ox * sw + j) as isize - pw as isize;
                            let v = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                img[ch * h * w + iy as usize * w + ix as usize]
                            } else {
                                0.0
                            };
                            let row = ch * kh * kw + i * kw + j;
                            out[row * cols + col] = v;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![rows, cols], out)
}

/// Expand a depthwise layer into the dense `(C*kh*kw) x out_channels` matrix it
/// occupies on a crossbar. Column `o` is nonzero only in the `kh*kw` rows of
/// its input channel `o / multiplier`, so per-column density is `1/C`.
pub fn depthwise_expand(layer: &LayerSpec) -> Result<Tensor> {
    if layer.kind != LayerKind::DepthwiseConv2d {
        return Err(Error::Config(format!("depthwise_expand requires depthwise layer, got {:?}", layer.kind)));
    }
    let weights = layer
        .weights
        .as_ref()
        .ok_or_else(|| Error::Config("depthwise_expand: layer has no weights".into()))?;
    let (kh, kw) = layer.kernel_or_1();
    let c = layer.in_channels;
    let out = layer.out_channels;
    if out % c != 0 {
        return Err(Error::dimension("depthwise multiplier", "out_channels divisible by in_channels", out));
    }
    let multiplier = out / c;
    let k = kh * kw;
    if weights.shape != vec![out, k] {
        return Err(Error::dimension("depthwise weights", format!("[{out}, {k}]"), format!("{:?}", weights.shape)));
    }
    let rows = c * k;
    let mut dense = vec![0.0f32; rows * out];
    for o in 0..out {
        let ch = o / multiplier;
        for idx in 0..k {
            let row = ch * k + idx;
            dense[row * out + o] = weights.data[o * k + idx];
        }
    }
    Tensor::new(vec![rows, out], dense)
}

/// `weights (out x K)` times `cols (K x P)`, plus optional bias per output row.
fn gemm_bias(weights: &Tensor, cols: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (out, k) = (weights.shape[0], weights.shape[1]);
    if cols.shape[0] != k {
        return Err(Error::dimension("gemm", k, cols.shape[0]));
    }
    let p = cols.shape[1];
    let mut y = vec![0.0f32; out * p];
    for o in 0..out {
        let wrow = &weights.data[o * k..(o + 1) * k];
        let b = bias.map(|b| b.data[o]).unwrap_or(0.0);
        for col in 0..p {
            let mut acc = 0.0f32;
            for i in 0..k {
                acc += wrow[i] * cols.data[i * p + col];
            }
            y[o * p + col] = acc + b;
        }
    }
    Tensor::new(vec![out, p], y)
}

fn require_weights<'a>(layer: &'a LayerSpec, idx: usize) -> Result<&'a Tensor> {
    layer
        .weights
        .as_ref()
        .ok_or_else(|| Error::Config(format!("layer {idx} has no trained weights")))
}

/// Ideal digital forward pass: deterministic, no noise, no quantization.
/// Accepts `[C,H,W]`/`[F]` single inputs or `[N,...]` batches; returns logits
/// `[class_count]` or `[N, class_count]`.
pub fn forward(net: &NetworkSpec, input: &Tensor) -> Result<Tensor> {
    let batched = input.rank() == 4 || (input.rank() == 2 && net.input_shape.len() == 1);
    let n = if batched { input.shape[0] } else { 1 };
    let (_, out_shape) = net.shape_plan()?;

    let mut logits = Vec::with_capacity(n * net.class_count);
    let per = input.len() / n;
    for b in 0..n {
        let sample = Tensor::new(net.input_shape.clone(), input.data[b * per..(b + 1) * per].to_vec())?;
        let out = forward_single(net, sample)?;
        logits.extend_from_slice(&out.data);
    }
    let _ = out_shape;
    if batched {
        Tensor::new(vec![n, net.class_count], logits)
    } else {
        Tensor::new(vec![net.class_count], logits)
    }
}

fn forward_single(net: &NetworkSpec, input: Tensor) -> Result<Tensor> {
    let mut act = input;
    let mut shape = ActShape::from_input(&net.input_shape)?;
    for (idx, layer) in net.layers.iter().enumerate() {
        if layer.kind == LayerKind::Dense {
            shape = ActShape::Flat(shape.elements());
            act = act.reshaped(vec![shape.elements()])?;
        }
        let (next_shape, next_act) = apply_layer(net, idx, &shape, act)?;
        shape = next_shape;
        act = next_act;
    }
    Ok(act)
}

fn apply_layer(net: &NetworkSpec, idx: usize, shape: &ActShape, act: Tensor) -> Result<(ActShape, Tensor)> {
    let layer = &net.layers[idx];
    let out_shape = net.layer_output_shape(idx, shape)?;
    let out = match layer.kind {
        LayerKind::Conv2d => {
            let w = require_weights(layer, idx)?;
            let cols = im2col(&act, layer)?;
            let y = gemm_bias(w, &cols, layer.bias.as_ref())?;
            let ActShape::Chw(c, h, wd) = out_shape else { unreachable!() };
            y.reshaped(vec![c, h, wd])?
        }
        LayerKind::DepthwiseConv2d => {
            let expanded = depthwise_expand(layer)?;
            let cols = im2col(&act, layer)?;
            // Expanded matrix maps patch-rows to output channels: y = expandedᵀ · cols.
            let (rows, out_ch) = (expanded.shape[0], expanded.shape[1]);
            let p = cols.shape[1];
            let mut y = vec![0.0f32; out_ch * p];
            for o in 0..out_ch {
                let b = layer.bias.as_ref().map(|b| b.data[o]).unwrap_or(0.0);
                for col in 0..p {
                    let mut acc = 0.0f32;
                    for r in 0..rows {
                        acc += expanded.data[r * out_ch + o] * cols.data[r * p + col];
                    }
                    y[o * p + col] = acc + b;
                }
            }
            let ActShape::Chw(c, h, wd) = out_shape else { unreachable!() };
            Tensor::new(vec![c, h, wd], y)?
        }
        LayerKind::Dense => {
            let w = require_weights(layer, idx)?;
            let x = act.reshaped(vec![layer.in_channels, 1])?;
            let y = gemm_bias(w, &x, layer.bias.as_ref())?;
            y.reshaped(vec![layer.out_channels])?
        }
        LayerKind::Relu => {
            let mut t = act;
            for v in &mut t.data {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            t
        }
        LayerKind::AvgPool | LayerKind::MaxPool => pool(&act, layer, &out_shape)?,
        LayerKind::ScaleBias => {
            let scale = require_weights(layer, idx)?;
            let mut t = act;
            let c = layer.in_channels;
            let per = t.len() / c;
            for ch in 0..c {
                let s = scale.data[ch];
                let b = layer.bias.as_ref().map(|b| b.data[ch]).unwrap_or(0.0);
                for i in 0..per {
                    let v = &mut t.data[ch * per + i];
                    *v = *v * s + b;
                }
            }
            t
        }
    };
    Ok((out_shape, out))
}

fn pool(act: &Tensor, layer: &LayerSpec, out_shape: &ActShape) -> Result<Tensor> {
    let [c, h, w] = act.shape.as_slice() else {
        return Err(Error::dimension("pool input", "[C,H,W]", format!("{:?}", act.shape)));
    };
    let (c, h, w) = (*c, *h, *w);
    let ActShape::Chw(_, oh, ow) = *out_shape else { unreachable!() };
    let (kh, kw) = layer.kernel_or_1();
    let (sh, sw) = layer.stride_or_1();
    let avg = layer.kind == LayerKind::AvgPool;
    let mut out = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = if avg { 0.0 } else { f32::NEG_INFINITY };
                for i in 0..kh {
                    for j in 0..kw {
                        let v = act.data[ch * h * w + (oy * sh + i) * w + (ox * sw + j)];
                        if avg {
                            acc += v;
                        } else if v > acc {
                            acc = v;
                        }
                    }
                }
                out[ch * oh * ow + oy * ow + ox] = if avg { acc / (kh * kw) as f32 } else { acc };
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}
