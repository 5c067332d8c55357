//! Layer-wise reverse-mode engine over the network operator set.
//!
//! Forward passes run in one of three quantizer regimes (off / training with
//! stochastic bypass / always-on eval) and can capture per-layer contexts for
//! the backward pass. Round, clip and weight-noise all backpropagate through
//! straight-through estimators: weight gradients are computed with the
//! clipped, noise-perturbed weights and applied to the master weights; the
//! quantizer range gradient follows the differentiable form of the
//! clip-and-round quantizer (`(code - x/step)/max_code` in range, `sign(x)`
//! when clipped).
//!
//! For gradient checking, a pass can be re-run with the rounding residuals and
//! clip masks frozen from a reference forward. The frozen pass is a smooth
//! function whose analytic gradient coincides with the straight-through
//! backward at the reference point, so central finite differences of the
//! frozen loss validate the whole chain.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{col2im_accumulate, im2col, ConvGeom, ImgDims, Mat};
use crate::net::{LayerKind, NetworkSpec};
use crate::pcm::seeded_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActDims {
    Img { n: usize, c: usize, h: usize, w: usize },
    Flat { n: usize, f: usize },
}

impl ActDims {
    pub fn batch(&self) -> usize {
        match *self {
            ActDims::Img { n, .. } => n,
            ActDims::Flat { n, .. } => n,
        }
    }

    pub fn per_sample(&self) -> usize {
        match *self {
            ActDims::Img { c, h, w, .. } => c * h * w,
            ActDims::Flat { f, .. } => f,
        }
    }

    pub fn len(&self) -> usize {
        self.batch() * self.per_sample()
    }

    fn flattened(&self) -> ActDims {
        ActDims::Flat { n: self.batch(), f: self.per_sample() }
    }
}

#[derive(Debug, Clone)]
pub struct Act {
    pub dims: ActDims,
    pub data: Vec<f64>,
}

impl Act {
    pub fn new(dims: ActDims, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.len(), data.len());
        Act { dims, data }
    }

    /// Interpret a `[N, ...]` tensor (or a single sample) against the network
    /// input shape.
    pub fn from_tensor(t: &Tensor, input_shape: &[usize]) -> Result<Self> {
        let per: usize = input_shape.iter().product();
        if t.len() % per != 0 {
            return Err(Error::dimension("input batch", format!("multiple of {per}"), t.len()));
        }
        let n = t.len() / per;
        let dims = match input_shape.len() {
            1 => ActDims::Flat { n, f: input_shape[0] },
            3 => ActDims::Img { n, c: input_shape[0], h: input_shape[1], w: input_shape[2] },
            _ => return Err(Error::dimension("input shape", "[F] or [C,H,W]", format!("{input_shape:?}"))),
        };
        Ok(Act::new(dims, t.data.iter().map(|v| *v as f64).collect()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// No quantization nodes at all (stage 1).
    Off,
    /// Quantizers active with stochastic bypass (stage-2 training steps).
    Train,
    /// Quantizers always active, no bypass (deployment-equivalent eval).
    Eval,
}

#[derive(Debug, Clone, Copy)]
pub struct FwdMode {
    pub weight_noise: bool,
    pub quant: QuantMode,
}

impl FwdMode {
    pub fn eval_quantized() -> Self {
        FwdMode { weight_noise: false, quant: QuantMode::Eval }
    }

    pub fn eval_fp() -> Self {
        FwdMode { weight_noise: false, quant: QuantMode::Off }
    }

    pub fn train_stage1() -> Self {
        FwdMode { weight_noise: false, quant: QuantMode::Off }
    }

    pub fn train_stage2() -> Self {
        FwdMode { weight_noise: true, quant: QuantMode::Train }
    }
}

/// Rounding residuals and clip masks of one quantizer application, reusable as
/// a frozen smooth surrogate.
#[derive(Debug, Clone, Default)]
pub struct QuantCtx {
    pub bypassed: bool,
    /// Per-element bypass mask (stochastic quantization noise at element
    /// granularity); empty unless enabled.
    pub elem_bypass: Vec<bool>,
    /// `code - x/step` per element (zero where clipped).
    pub rho: Vec<f64>,
    pub in_range: Vec<bool>,
    pub sign: Vec<f64>,
}

/// Frozen quantizer contexts per analog layer: (DAC, ADC).
pub type FrozenPass = Vec<(Option<QuantCtx>, Option<QuantCtx>)>;

fn max_code(bits: u32) -> f64 {
    ((1i64 << (bits - 1)) - 1) as f64
}

/// Apply one quantizer node in place; returns the captured context.
fn quant_forward(xs: &mut [f64], r: f64, bits: u32, bypass: Option<&[bool]>, node_bypass: bool) -> QuantCtx {
    let n = max_code(bits);
    let delta = r / n;
    if node_bypass {
        return QuantCtx { bypassed: true, ..QuantCtx::default() };
    }
    let mut ctx = QuantCtx {
        bypassed: false,
        elem_bypass: bypass.map(|b| b.to_vec()).unwrap_or_default(),
        rho: vec![0.0; xs.len()],
        in_range: vec![false; xs.len()],
        sign: vec![0.0; xs.len()],
    };
    for (i, x) in xs.iter_mut().enumerate() {
        if bypass.map(|b| b[i]).unwrap_or(false) {
            ctx.in_range[i] = true;
            continue; // element passes through untouched, rho stays 0
        }
        if x.abs() <= r {
            let z = *x / delta;
            let k = z.round();
            ctx.rho[i] = k - z;
            ctx.in_range[i] = true;
            *x = k * delta;
        } else {
            ctx.sign[i] = x.signum();
            *x = x.signum() * r;
        }
    }
    ctx
}

/// Re-apply a quantizer with frozen residuals/masks: a smooth surrogate that
/// matches the straight-through gradients at the point where it was captured.
fn quant_forward_frozen(xs: &mut [f64], r: f64, bits: u32, frozen: &QuantCtx) {
    if frozen.bypassed {
        return;
    }
    let delta = r / max_code(bits);
    for (i, x) in xs.iter_mut().enumerate() {
        if frozen.elem_bypass.get(i).copied().unwrap_or(false) {
            continue;
        }
        if frozen.in_range[i] {
            *x += frozen.rho[i] * delta;
        } else {
            *x = frozen.sign[i] * r;
        }
    }
}

/// Backward through a quantizer node: rewrites the incoming gradient in place
/// and returns the accumulated range gradient.
fn quant_backward(grads: &mut [f64], ctx: &QuantCtx, bits: u32) -> f64 {
    if ctx.bypassed {
        return 0.0;
    }
    let n = max_code(bits);
    let mut dr = 0.0;
    for (i, g) in grads.iter_mut().enumerate() {
        if ctx.elem_bypass.get(i).copied().unwrap_or(false) {
            continue;
        }
        if ctx.in_range[i] {
            dr += *g * ctx.rho[i] / n;
        } else {
            dr += *g * ctx.sign[i];
            *g = 0.0;
        }
    }
    dr
}

#[derive(Debug, Clone)]
pub struct TrainLayer {
    pub kind: LayerKind,
    pub analog: bool,
    pub in_ch: usize,
    pub out_ch: usize,
    pub geom: Option<ConvGeom>,
    /// Master weights: conv/dense `(out, K)`, depthwise `(out, kh*kw)`,
    /// scale_bias `(1, C)`.
    pub w0: Mat,
    pub bias: Vec<f64>,
    pub vel_w: Vec<f64>,
    pub vel_b: Vec<f64>,
    pub w_min: f64,
    pub w_max: f64,
    /// Ordinal among analog layers (index into range parameters).
    pub analog_ord: Option<usize>,
}

impl TrainLayer {
    fn has_params(&self) -> bool {
        !self.w0.data.is_empty()
    }

    fn clipped_weights(&self) -> Mat {
        let mut w = self.w0.clone();
        if self.kind != LayerKind::ScaleBias {
            for v in &mut w.data {
                *v = v.clamp(self.w_min, self.w_max);
            }
        }
        w
    }
}

pub enum LayerCtx {
    Gemm {
        cols: Mat,
        w_eff: Mat,
        dac: Option<QuantCtx>,
        adc: Option<QuantCtx>,
        in_dims: ActDims,
        out_hw: (usize, usize),
    },
    Relu { mask: Vec<bool> },
    AvgPool { in_dims: ActDims },
    MaxPool { in_dims: ActDims, argmax: Vec<usize> },
    ScaleBias { x: Vec<f64> },
    Passthrough,
}

#[derive(Debug, Clone, Default)]
pub struct Grads {
    /// Per spec-layer weight/bias gradients (empty where no params).
    pub d_w: Vec<Vec<f64>>,
    pub d_bias: Vec<Vec<f64>>,
    /// Direct ADC-range gradients per analog ordinal.
    pub d_r_adc: Vec<f64>,
    /// DAC-range gradients per analog ordinal (to be chained through the gain
    /// constraint).
    pub d_r_dac: Vec<f64>,
}

/// Trainable state: master weights, clip bounds, converter ranges and the
/// shared gain, plus the seeded RNG that makes runs bit-reproducible.
#[derive(Clone)]
pub struct Trainer {
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    pub layers: Vec<TrainLayer>,
    /// Spec indices of analog layers, in network order.
    pub analog_layers: Vec<usize>,
    /// Trainable ADC range per analog ordinal.
    pub r_adc: Vec<f64>,
    /// Trainable shared ADC gain.
    pub s: f64,
    pub bits_adc: u32,
    pub eta: f64,
    pub quant_noise_p: f64,
    pub quant_noise_per_element: bool,
    pub momentum: f64,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    pub fn from_network(net: &NetworkSpec, bits_adc: u32, seed: u64) -> Result<Self> {
        net.shape_plan()?;
        if bits_adc < 2 {
            return Err(Error::Config(format!("ADC precision must be >= 2 bits, got {bits_adc}")));
        }
        let mut rng = seeded_rng(seed, 0x7261696e); // "rain" stream tag
        let analog_layers = net.analog_layers();
        let mut layers = Vec::with_capacity(net.layers.len());
        for (idx, spec) in net.layers.iter().enumerate() {
            let geom = spec.kernel.map(|kernel| ConvGeom {
                kernel,
                stride: spec.stride_or_1(),
                padding: spec.padding_or_0(),
            });
            let (w_rows, w_cols) = match spec.kind {
                LayerKind::Conv2d => (spec.out_channels, spec.in_channels * spec.kernel_or_1().0 * spec.kernel_or_1().1),
                LayerKind::DepthwiseConv2d => (spec.out_channels, spec.kernel_or_1().0 * spec.kernel_or_1().1),
                LayerKind::Dense => (spec.out_channels, spec.in_channels),
                LayerKind::ScaleBias => (1, spec.in_channels),
                _ => (0, 0),
            };
            let w0 = if w_rows * w_cols == 0 {
                Mat::zeros(0, 0)
            } else if let Some(w) = &spec.weights {
                if w.len() != w_rows * w_cols {
                    return Err(Error::dimension(format!("layer {idx} weights"), w_rows * w_cols, w.len()));
                }
                Mat::from_vec(w_rows, w_cols, w.data.iter().map(|v| *v as f64).collect())
            } else if spec.kind == LayerKind::ScaleBias {
                Mat::from_vec(1, w_cols, vec![1.0; w_cols])
            } else {
                // Uniform fan-based init from the seeded stream.
                let bound = (6.0 / (w_rows + w_cols) as f64).sqrt();
                let data = (0..w_rows * w_cols).map(|_| rng.gen_range(-bound..bound)).collect();
                Mat::from_vec(w_rows, w_cols, data)
            };
            let bias_len = if spec.kind.is_weighted() || spec.kind == LayerKind::ScaleBias {
                spec.out_channels
            } else {
                0
            };
            let bias = spec
                .bias
                .as_ref()
                .map(|b| b.data.iter().map(|v| *v as f64).collect())
                .unwrap_or_else(|| vec![0.0; bias_len]);
            let n_w = w0.data.len();
            layers.push(TrainLayer {
                kind: spec.kind,
                analog: spec.analog,
                in_ch: spec.in_channels,
                out_ch: spec.out_channels,
                geom,
                w0,
                vel_w: vec![0.0; n_w],
                vel_b: vec![0.0; bias.len()],
                bias,
                w_min: f64::NEG_INFINITY,
                w_max: f64::INFINITY,
                analog_ord: None,
            });
        }
        for (ord, &idx) in analog_layers.iter().enumerate() {
            layers[idx].analog_ord = Some(ord);
        }
        Ok(Trainer {
            input_shape: net.input_shape.clone(),
            class_count: net.class_count,
            layers,
            r_adc: vec![1.0; analog_layers.len()],
            s: 1.0,
            analog_layers,
            bits_adc,
            eta: 0.0,
            quant_noise_p: 0.5,
            quant_noise_per_element: false,
            momentum: 0.9,
            rng,
        })
    }

    pub fn bits_dac(&self) -> u32 {
        self.bits_adc + 1
    }

    /// Derived DAC range of an analog layer under the shared-gain constraint.
    pub fn r_dac(&self, ord: usize) -> f64 {
        let spec_idx = self.analog_layers[ord];
        self.r_adc[ord] * self.s.abs() / self.layers[spec_idx].w_max
    }

    /// Refresh clip bounds to +-2 std of the unclipped master weights.
    pub fn refresh_clip_bounds(&mut self) {
        for layer in &mut self.layers {
            if !layer.kind.is_weighted() || !layer.has_params() {
                continue;
            }
            let n = layer.w0.data.len() as f64;
            let mean = layer.w0.data.iter().sum::<f64>() / n;
            let var = layer.w0.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let two_sigma = 2.0 * var.sqrt();
            if two_sigma > 0.0 {
                layer.w_min = -two_sigma;
                layer.w_max = two_sigma;
            }
        }
    }

    /// Forward pass capturing per-layer contexts for backward.
    pub fn forward(&mut self, input: &Act, mode: FwdMode, frozen: Option<&FrozenPass>) -> Result<(Act, Vec<LayerCtx>)> {
        let mut act = input.clone();
        let mut ctxs = Vec::with_capacity(self.layers.len());
        for idx in 0..self.layers.len() {
            let (next, ctx) = self.forward_layer(idx, act, mode, frozen)?;
            act = next;
            ctxs.push(ctx);
        }
        Ok((act, ctxs))
    }

    fn forward_layer(&mut self, idx: usize, mut act: Act, mode: FwdMode, frozen: Option<&FrozenPass>) -> Result<(Act, LayerCtx)> {
        let kind = self.layers[idx].kind;
        match kind {
            LayerKind::Conv2d | LayerKind::DepthwiseConv2d | LayerKind::Dense => self.forward_gemm(idx, act, mode, frozen),
            LayerKind::Relu => {
                let mask: Vec<bool> = act.data.iter().map(|v| *v > 0.0).collect();
                for v in &mut act.data {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                Ok((act, LayerCtx::Relu { mask }))
            }
            LayerKind::AvgPool | LayerKind::MaxPool => self.forward_pool(idx, act),
            LayerKind::ScaleBias => {
                let layer = &self.layers[idx];
                let x_saved = act.data.clone();
                let c = layer.in_ch;
                let per = match act.dims {
                    ActDims::Img { h, w, .. } => h * w,
                    ActDims::Flat { .. } => 1,
                };
                let n = act.dims.batch();
                let per_sample = act.dims.per_sample();
                for b in 0..n {
                    for ch in 0..c {
                        for i in 0..per {
                            let v = &mut act.data[b * per_sample + ch * per + i];
                            *v = *v * layer.w0.data[ch] + layer.bias[ch];
                        }
                    }
                }
                Ok((act, LayerCtx::ScaleBias { x: x_saved }))
            }
        }
    }

    fn forward_gemm(&mut self, idx: usize, act: Act, mode: FwdMode, frozen: Option<&FrozenPass>) -> Result<(Act, LayerCtx)> {
        let quant_here = self.layers[idx].analog && mode.quant != QuantMode::Off && self.layers[idx].analog_ord.is_some();
        let ord = self.layers[idx].analog_ord;

        // Stochastic-bypass draws happen unconditionally (fixed draw schedule
        // keeps runs reproducible regardless of branch outcomes).
        let (dac_bypass, adc_bypass, dac_elems, adc_elems) = if quant_here && mode.quant == QuantMode::Train {
            if self.quant_noise_per_element {
                let p = self.quant_noise_p;
                let d: Vec<bool> = (0..act.data.len()).map(|_| self.rng.gen_range(0.0..1.0) < p).collect();
                (false, false, Some(d), true)
            } else {
                let a = self.rng.gen_range(0.0..1.0) < self.quant_noise_p;
                let b = self.rng.gen_range(0.0..1.0) < self.quant_noise_p;
                (a, b, None, false)
            }
        } else {
            (false, false, None, false)
        };

        // DAC node on the layer input.
        let mut x = act.data.clone();
        let dac_ctx = if quant_here {
            let ord = ord.unwrap();
            let r = self.r_dac(ord);
            if let Some(f) = frozen {
                if let Some(fq) = &f[ord].0 {
                    quant_forward_frozen(&mut x, r, self.bits_dac(), fq);
                    Some(fq.clone())
                } else {
                    None
                }
            } else {
                Some(quant_forward(&mut x, r, self.bits_dac(), dac_elems.as_deref(), dac_bypass))
            }
        } else {
            None
        };

        // Lower to a (K, P) patch/sample matrix.
        let layer = &self.layers[idx];
        let (cols, in_dims, out_hw) = match layer.kind {
            LayerKind::Dense => {
                let dims = act.dims.flattened();
                let ActDims::Flat { n, f } = dims else { unreachable!() };
                if f != layer.in_ch {
                    return Err(Error::dimension(format!("dense layer {idx}"), layer.in_ch, f));
                }
                let mut m = Mat::zeros(f, n);
                for b in 0..n {
                    for i in 0..f {
                        m.data[i * n + b] = x[b * f + i];
                    }
                }
                (m, dims, (1, 1))
            }
            _ => {
                let ActDims::Img { n, c, h, w } = act.dims else {
                    return Err(Error::dimension(format!("conv layer {idx}"), "image input", "flat"));
                };
                if c != layer.in_ch {
                    return Err(Error::dimension(format!("conv layer {idx}"), layer.in_ch, c));
                }
                let geom = layer.geom.expect("conv layer has kernel geometry");
                let (oh, ow) = geom.output_hw(h, w);
                (im2col(&x, ImgDims { n, c, h, w }, geom), act.dims, (oh, ow))
            }
        };

        // Clip + optional noise on the weights.
        let mut w_eff = self.layers[idx].clipped_weights();
        if mode.weight_noise && self.eta > 0.0 {
            let sigma = self.eta * self.layers[idx].w_max;
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::Training(e.to_string()))?;
            for v in &mut w_eff.data {
                *v += normal.sample(&mut self.rng);
            }
        }

        // y = W_eff x cols, depthwise contracting only its diagonal block rows.
        let layer = &self.layers[idx];
        let p = cols.cols;
        let mut y = match layer.kind {
            LayerKind::DepthwiseConv2d => {
                let k = layer.geom.unwrap().kernel.0 * layer.geom.unwrap().kernel.1;
                let multiplier = layer.out_ch / layer.in_ch;
                let mut y = Mat::zeros(layer.out_ch, p);
                for o in 0..layer.out_ch {
                    let ch = o / multiplier;
                    for pi in 0..p {
                        let mut acc = 0.0;
                        for i in 0..k {
                            acc += w_eff.data[o * k + i] * cols.data[(ch * k + i) * p + pi];
                        }
                        y.data[o * p + pi] = acc;
                    }
                }
                y
            }
            _ => w_eff.matmul(&cols),
        };

        // ADC node on the pre-activation, then digital bias.
        let adc_ctx = if quant_here {
            let ord = ord.unwrap();
            let r = self.r_adc[ord];
            if let Some(f) = frozen {
                if let Some(fq) = &f[ord].1 {
                    quant_forward_frozen(&mut y.data, r, self.bits_adc, fq);
                    Some(fq.clone())
                } else {
                    None
                }
            } else {
                let adc_elems: Option<Vec<bool>> = if adc_elems && self.quant_noise_per_element {
                    let pquant = self.quant_noise_p;
                    Some((0..y.data.len()).map(|_| self.rng.gen_range(0.0..1.0) < pquant).collect())
                } else {
                    None
                };
                Some(quant_forward(&mut y.data, r, self.bits_adc, adc_elems.as_deref(), adc_bypass))
            }
        } else {
            None
        };

        let layer = &self.layers[idx];
        if !layer.bias.is_empty() {
            for o in 0..layer.out_ch {
                let b = layer.bias[o];
                for pi in 0..p {
                    y.data[o * p + pi] += b;
                }
            }
        }

        // Reorder (out, P) into the batch-major activation layout.
        let n = in_dims.batch();
        let out_act = match layer.kind {
            LayerKind::Dense => {
                let mut data = vec![0.0f64; n * layer.out_ch];
                for o in 0..layer.out_ch {
                    for b in 0..n {
                        data[b * layer.out_ch + o] = y.data[o * n + b];
                    }
                }
                Act::new(ActDims::Flat { n, f: layer.out_ch }, data)
            }
            _ => {
                let (oh, ow) = out_hw;
                let per = oh * ow;
                let mut data = vec![0.0f64; n * layer.out_ch * per];
                for o in 0..layer.out_ch {
                    for b in 0..n {
                        for pi in 0..per {
                            data[b * layer.out_ch * per + o * per + pi] = y.data[o * p + b * per + pi];
                        }
                    }
                }
                Act::new(ActDims::Img { n, c: layer.out_ch, h: oh, w: ow }, data)
            }
        };
        Ok((out_act, LayerCtx::Gemm { cols, w_eff, dac: dac_ctx, adc: adc_ctx, in_dims, out_hw }))
    }

    fn forward_pool(&self, idx: usize, act: Act) -> Result<(Act, LayerCtx)> {
        let layer = &self.layers[idx];
        let ActDims::Img { n, c, h, w } = act.dims else {
            return Err(Error::dimension(format!("pool layer {idx}"), "image input", "flat"));
        };
        let geom = layer.geom.expect("pool layer has kernel geometry");
        let (kh, kw) = geom.kernel;
        let (sh, sw) = geom.stride;
        let (oh, ow) = ((h - kh) / sh + 1, (w - kw) / sw + 1);
        let avg = layer.kind == LayerKind::AvgPool;
        let mut out = vec![0.0f64; n * c * oh * ow];
        let mut argmax = if avg { Vec::new() } else { vec![0usize; n * c * oh * ow] };
        for b in 0..n {
            for ch in 0..c {
                let base = b * c * h * w + ch * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let oi = b * c * oh * ow + ch * oh * ow + oy * ow + ox;
                        if avg {
                            let mut acc = 0.0;
                            for i in 0..kh {
                                for j in 0..kw {
                                    acc += act.data[base + (oy * sh + i) * w + (ox * sw + j)];
                                }
                            }
                            out[oi] = acc / (kh * kw) as f64;
                        } else {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_i = 0;
                            for i in 0..kh {
                                for j in 0..kw {
                                    let fi = base + (oy * sh + i) * w + (ox * sw + j);
                                    if act.data[fi] > best {
                                        best = act.data[fi];
                                        best_i = fi;
                                    }
                                }
                            }
                            out[oi] = best;
                            argmax[oi] = best_i;
                        }
                    }
                }
            }
        }
        let out_act = Act::new(ActDims::Img { n, c, h: oh, w: ow }, out);
        let ctx = if avg {
            LayerCtx::AvgPool { in_dims: act.dims }
        } else {
            LayerCtx::MaxPool { in_dims: act.dims, argmax }
        };
        Ok((out_act, ctx))
    }

    /// Backward pass from the logits gradient; gradients of master weights are
    /// the straight-through gradients of the clipped, perturbed weights.
    pub fn backward(&self, ctxs: &[LayerCtx], d_logits: Act) -> Result<Grads> {
        let mut grads = Grads {
            d_w: self.layers.iter().map(|l| vec![0.0; l.w0.data.len()]).collect(),
            d_bias: self.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            d_r_adc: vec![0.0; self.analog_layers.len()],
            d_r_dac: vec![0.0; self.analog_layers.len()],
        };
        let mut d_act = d_logits;
        for idx in (0..self.layers.len()).rev() {
            d_act = self.backward_layer(idx, &ctxs[idx], d_act, &mut grads)?;
        }
        Ok(grads)
    }

    fn backward_layer(&self, idx: usize, ctx: &LayerCtx, mut d_act: Act, grads: &mut Grads) -> Result<Act> {
        let layer = &self.layers[idx];
        match ctx {
            LayerCtx::Relu { mask } => {
                for (g, &m) in d_act.data.iter_mut().zip(mask) {
                    if !m {
                        *g = 0.0;
                    }
                }
                Ok(d_act)
            }
            LayerCtx::AvgPool { in_dims } => {
                let ActDims::Img { n, c, h, w } = *in_dims else { unreachable!() };
                let geom = layer.geom.unwrap();
                let (kh, kw) = geom.kernel;
                let (sh, sw) = geom.stride;
                // A downstream dense layer may have flattened the gradient
                // dims; the layout is unchanged, so recompute the pool grid.
                let (oh, ow) = ((h - kh) / sh + 1, (w - kw) / sw + 1);
                let mut dx = vec![0.0f64; in_dims.len()];
                let scale = 1.0 / (kh * kw) as f64;
                for b in 0..n {
                    for ch in 0..c {
                        let base = b * c * h * w + ch * h * w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = d_act.data[b * c * oh * ow + ch * oh * ow + oy * ow + ox] * scale;
                                for i in 0..kh {
                                    for j in 0..kw {
                                        dx[base + (oy * sh + i) * w + (ox * sw + j)] += g;
                                    }
                                }
                            }
                        }
                    }
                }
                Ok(Act::new(*in_dims, dx))
            }
            LayerCtx::MaxPool { in_dims, argmax } => {
                let mut dx = vec![0.0f64; in_dims.len()];
                for (g, &src) in d_act.data.iter().zip(argmax) {
                    dx[src] += g;
                }
                Ok(Act::new(*in_dims, dx))
            }
            LayerCtx::ScaleBias { x } => {
                let c = layer.in_ch;
                let per = match d_act.dims {
                    ActDims::Img { h, w, .. } => h * w,
                    ActDims::Flat { .. } => 1,
                };
                let n = d_act.dims.batch();
                let per_sample = d_act.dims.per_sample();
                for b in 0..n {
                    for ch in 0..c {
                        for i in 0..per {
                            let gi = b * per_sample + ch * per + i;
                            let g = d_act.data[gi];
                            grads.d_w[idx][ch] += g * x[gi];
                            grads.d_bias[idx][ch] += g;
                            d_act.data[gi] = g * layer.w0.data[ch];
                        }
                    }
                }
                Ok(d_act)
            }
            LayerCtx::Gemm { cols, w_eff, dac, adc, in_dims, out_hw } => {
                let p = cols.cols;
                let n = in_dims.batch();
                // Reorder activation-layout gradients into (out, P).
                let mut dy = Mat::zeros(layer.out_ch, p);
                match layer.kind {
                    LayerKind::Dense => {
                        for o in 0..layer.out_ch {
                            for b in 0..n {
                                dy.data[o * n + b] = d_act.data[b * layer.out_ch + o];
                            }
                        }
                    }
                    _ => {
                        let per = out_hw.0 * out_hw.1;
                        for o in 0..layer.out_ch {
                            for b in 0..n {
                                for pi in 0..per {
                                    dy.data[o * p + b * per + pi] = d_act.data[b * layer.out_ch * per + o * per + pi];
                                }
                            }
                        }
                    }
                }

                // Bias sits after the ADC.
                if !layer.bias.is_empty() {
                    for o in 0..layer.out_ch {
                        for pi in 0..p {
                            grads.d_bias[idx][o] += dy.data[o * p + pi];
                        }
                    }
                }
                if let (Some(adc_ctx), Some(ord)) = (adc, layer.analog_ord) {
                    grads.d_r_adc[ord] += quant_backward(&mut dy.data, adc_ctx, self.bits_adc);
                }

                // Weight and input gradients with the effective weights.
                let mut dcols = Mat::zeros(cols.rows, cols.cols);
                match layer.kind {
                    LayerKind::DepthwiseConv2d => {
                        let k = layer.geom.unwrap().kernel.0 * layer.geom.unwrap().kernel.1;
                        let multiplier = layer.out_ch / layer.in_ch;
                        for o in 0..layer.out_ch {
                            let ch = o / multiplier;
                            for i in 0..k {
                                let row = ch * k + i;
                                let mut acc = 0.0;
                                for pi in 0..p {
                                    let g = dy.data[o * p + pi];
                                    acc += g * cols.data[row * p + pi];
                                    dcols.data[row * p + pi] += g * w_eff.data[o * k + i];
                                }
                                grads.d_w[idx][o * k + i] += acc;
                            }
                        }
                    }
                    _ => {
                        let dw = dy.matmul_nt(cols);
                        for (g, v) in grads.d_w[idx].iter_mut().zip(&dw.data) {
                            *g += v;
                        }
                        dcols = w_eff.matmul_tn(&dy);
                    }
                }

                // Fold the patch-matrix gradient back to the input layout.
                let mut dx = match layer.kind {
                    LayerKind::Dense => {
                        let ActDims::Flat { n, f } = *in_dims else { unreachable!() };
                        let mut dx = vec![0.0f64; n * f];
                        for b in 0..n {
                            for i in 0..f {
                                dx[b * f + i] = dcols.data[i * n + b];
                            }
                        }
                        dx
                    }
                    _ => {
                        let ActDims::Img { n, c, h, w } = *in_dims else { unreachable!() };
                        col2im_accumulate(&dcols, ImgDims { n, c, h, w }, layer.geom.unwrap())
                    }
                };

                if let (Some(dac_ctx), Some(ord)) = (dac, layer.analog_ord) {
                    grads.d_r_dac[ord] += quant_backward(&mut dx, dac_ctx, self.bits_dac());
                }
                Ok(Act::new(*in_dims, dx))
            }
            LayerCtx::Passthrough => Ok(d_act),
        }
    }

    /// Capture frozen quantizer contexts from an eval-mode reference pass.
    pub fn freeze_quantizers(&mut self, input: &Act) -> Result<FrozenPass> {
        let (_, ctxs) = self.forward(input, FwdMode::eval_quantized(), None)?;
        let mut frozen: FrozenPass = vec![(None, None); self.analog_layers.len()];
        for (idx, ctx) in ctxs.iter().enumerate() {
            if let (LayerCtx::Gemm { dac, adc, .. }, Some(ord)) = (ctx, self.layers[idx].analog_ord) {
                frozen[ord] = (dac.clone(), adc.clone());
            }
        }
        Ok(frozen)
    }

    /// Mean softmax cross-entropy and its logits gradient.
    pub fn softmax_ce(logits: &Act, labels: &[usize]) -> (f64, Act) {
        let ActDims::Flat { n, f } = logits.dims else {
            panic!("loss expects flat logits");
        };
        assert_eq!(labels.len(), n);
        let mut loss = 0.0;
        let mut grad = vec![0.0f64; n * f];
        for b in 0..n {
            let row = &logits.data[b * f..(b + 1) * f];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            loss += -(exps[labels[b]] / sum).ln();
            for k in 0..f {
                grad[b * f + k] = (exps[k] / sum - if k == labels[b] { 1.0 } else { 0.0 }) / n as f64;
            }
        }
        (loss / n as f64, Act::new(logits.dims, grad))
    }

    /// SGD-with-momentum step on weights and biases.
    pub fn sgd_step(&mut self, grads: &Grads, lr: f64) {
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            if layer.w0.data.is_empty() {
                continue;
            }
            for ((w, v), g) in layer.w0.data.iter_mut().zip(&mut layer.vel_w).zip(&grads.d_w[idx]) {
                *v = self.momentum * *v + g;
                *w -= lr * *v;
            }
            for ((b, v), g) in layer.bias.iter_mut().zip(&mut layer.vel_b).zip(&grads.d_bias[idx]) {
                *v = self.momentum * *v + g;
                *b -= lr * *v;
            }
        }
    }

    /// Plain gradient step on the converter ranges and the shared gain,
    /// applying the gain-constraint chain rule and the S-gradient clip.
    /// Returns the applied (clipped) S gradient.
    pub fn range_step(&mut self, grads: &Grads, lr: f64, s_grad_clip: f64) -> f64 {
        let mut d_s = 0.0;
        for ord in 0..self.r_adc.len() {
            let spec_idx = self.analog_layers[ord];
            let w_max = self.layers[spec_idx].w_max;
            let chained = grads.d_r_adc[ord] + grads.d_r_dac[ord] * self.s.abs() / w_max;
            self.r_adc[ord] = (self.r_adc[ord] - lr * chained).max(1e-6);
            d_s += grads.d_r_dac[ord] * self.r_adc[ord] / w_max * sign_subgradient(self.s);
        }
        let d_s = d_s.clamp(-s_grad_clip, s_grad_clip);
        self.s -= lr * d_s;
        d_s
    }

    /// Sample one weight-noise realization for a layer (test hook for the
    /// noise-level contract).
    pub fn sample_weight_noise(&mut self, idx: usize) -> Vec<f64> {
        let sigma = self.eta * self.layers[idx].w_max;
        let n = self.layers[idx].w0.data.len();
        (0..n)
            .map(|_| {
                let u: f64 = StandardNormal.sample(&mut self.rng);
                sigma * u
            })
            .collect()
    }
}

/// Subgradient of |s|, taken as 0 at the origin.
pub fn sign_subgradient(s: f64) -> f64 {
    if s > 0.0 {
        1.0
    } else if s < 0.0 {
        -1.0
    } else {
        0.0
    }
}
