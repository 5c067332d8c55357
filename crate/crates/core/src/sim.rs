//! Inference-time analog simulation: deploy a trained network onto
//! conductance states, execute noisy MVMs through the DAC/ADC quantizers at
//! given wall-clock times, and run the repeated-evaluation accuracy protocol.
//!
//! Each evaluation run programs a fresh chip (new programming noise and drift
//! coefficients); drift within a run is evaluated analytically on that one
//! programmed state, matching hardware practice of programming once and
//! reading out over time.

use serde::{Deserialize, Serialize};

use rand_chacha::ChaCha8Rng;

use crate::converters::{fake_quant, ConverterRole, QuantizerParams};
use crate::error::{Error, Result};
use crate::linalg::{im2col, ConvGeom, ImgDims, Mat};
use crate::mapper::{weights_to_conductances, MappingPlan};
use crate::net::{LayerKind, LayerSpec, NetworkSpec};
use crate::pcm::{derive_seed, gdc_factor_at, probe_reference, program, read, seeded_rng, ConductanceState, NoiseParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeploymentTimes {
    /// Seconds after programming; must be ascending and >= the programming
    /// reference time.
    pub checkpoints: Vec<f64>,
}

impl Default for DeploymentTimes {
    fn default() -> Self {
        // 25 s, 1 hour, 1 day, 1 month, 1 year.
        DeploymentTimes { checkpoints: vec![25.0, 3600.0, 86_400.0, 2.592e6, 3.1536e7] }
    }
}

impl DeploymentTimes {
    pub fn validate(&self, t_c: f64) -> Result<()> {
        if self.checkpoints.is_empty() {
            return Err(Error::Config("deployment times: empty checkpoint list".into()));
        }
        if self.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("deployment times must be strictly ascending".into()));
        }
        if self.checkpoints[0] < t_c {
            return Err(Error::Config(format!(
                "first checkpoint {} s precedes the programming reference {} s",
                self.checkpoints[0], t_c
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ReadNoiseGranularity {
    /// One conductance realization per layer per (run, time) evaluation.
    #[default]
    PerEvaluation,
    /// Fresh realization per layer per input sample.
    PerInference,
    /// Fresh realization per streamed input vector (fidelity mode).
    PerVector,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub n_runs: usize,
    pub gdc: bool,
    #[serde(default)]
    pub read_noise: ReadNoiseGranularity,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol { n_runs: 25, gdc: true, read_noise: ReadNoiseGranularity::PerEvaluation }
    }
}

/// One analog layer as programmed on the array.
#[derive(Debug, Clone)]
pub struct AnalogLayer {
    pub spec_idx: usize,
    pub kind: LayerKind,
    pub geom: Option<ConvGeom>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub state: ConductanceState,
    /// Rescale factor `max|clipped W|` mapping normalized currents back to
    /// weight units.
    pub w_absmax: f64,
    pub dac: QuantizerParams,
    pub adc: QuantizerParams,
    pub bias: Vec<f64>,
    /// Drift-compensation probe response recorded right after programming.
    pub gdc_reference: f64,
}

#[derive(Debug, Clone)]
pub struct DeployedModel {
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    /// All layers in network order; analog ones carry an index into `analog`.
    pub spec: NetworkSpec,
    pub analog: Vec<AnalogLayer>,
    pub analog_of_spec: Vec<Option<usize>>,
    pub noise: NoiseParams,
}

/// Program a trained network onto conductance states. Requires converter
/// ranges on every analog layer and a plan placing each of them.
pub fn deploy(net: &NetworkSpec, plan: &MappingPlan, noise: &NoiseParams, seed: u64) -> Result<DeployedModel> {
    net.validate()?;
    noise.validate()?;
    let mut analog = Vec::new();
    let mut analog_of_spec = vec![None; net.layers.len()];
    for (ord, idx) in net.analog_layers().into_iter().enumerate() {
        if plan.placements_for(idx).is_empty() {
            return Err(Error::Config(format!("analog layer {idx} is not placed in the mapping plan")));
        }
        let layer = &net.layers[idx];
        let ranges = net
            .ranges_for(idx)
            .ok_or_else(|| Error::Config(format!("analog layer {idx} has no converter ranges attached")))?;
        let (mut state, w_absmax) = weights_to_conductances(layer, idx, ranges.w_min, ranges.w_max)?;
        program(&mut state, noise, derive_seed(seed, ord as u64))?;
        let gdc_reference = probe_reference(&state);
        analog_of_spec[idx] = Some(analog.len());
        analog.push(AnalogLayer {
            spec_idx: idx,
            kind: layer.kind,
            geom: layer.kernel.map(|kernel| ConvGeom {
                kernel,
                stride: layer.stride_or_1(),
                padding: layer.padding_or_0(),
            }),
            in_ch: layer.in_channels,
            out_ch: layer.out_channels,
            state,
            w_absmax,
            dac: QuantizerParams::new(ranges.bits_dac, ranges.r_dac, ConverterRole::Dac)?,
            adc: QuantizerParams::new(ranges.bits_adc, ranges.r_adc, ConverterRole::Adc)?,
            bias: layer.bias.as_ref().map(|b| b.data.iter().map(|v| *v as f64).collect()).unwrap_or_default(),
            gdc_reference,
        });
    }
    Ok(DeployedModel {
        input_shape: net.input_shape.clone(),
        class_count: net.class_count,
        spec: net.clone(),
        analog,
        analog_of_spec,
        noise: noise.clone(),
    })
}

/// Effective differential matrix `(g+ - g-)` at time `t` with one fresh read
/// noise draw; crossbar orientation (rows x cols).
fn effective_diff(layer: &AnalogLayer, noise: &NoiseParams, t: f64, rng: &mut ChaCha8Rng) -> Result<Mat> {
    let (pos, neg) = read(&layer.state, noise, t, rng)?;
    let mut m = Mat::zeros(layer.state.rows, layer.state.cols);
    for i in 0..m.data.len() {
        m.data[i] = pos[i] - neg[i];
    }
    Ok(m)
}

/// One analog layer MVM: DAC quantization of the input columns, noisy
/// differential accumulation at time `t`, ADC quantization, digital drift
/// compensation, then the digital bias. `cols` is `(K, P)`; returns `(out, P)`.
pub fn analog_mvm(
    layer: &AnalogLayer,
    cols: &Mat,
    noise: &NoiseParams,
    t: f64,
    gdc_on: bool,
    granularity: ReadNoiseGranularity,
    rng: &mut ChaCha8Rng,
    shared: Option<&Mat>,
) -> Result<Mat> {
    let rows = layer.state.rows;
    let out_ch = layer.state.cols;
    if cols.rows != rows {
        return Err(Error::dimension("analog_mvm", rows, cols.rows));
    }
    let mut xq = cols.clone();
    for v in &mut xq.data {
        *v = fake_quant(*v, &layer.dac);
    }
    let alpha = if gdc_on {
        gdc_factor_at(layer.gdc_reference, &layer.state, noise, t)?
    } else {
        1.0
    };

    let p = cols.cols;
    let mut y = Mat::zeros(out_ch, p);
    let run_columns = |w: &Mat, lo: usize, hi: usize, y: &mut Mat| {
        for o in 0..out_ch {
            for pi in lo..hi {
                let mut acc = 0.0;
                for r in 0..rows {
                    acc += w.data[r * out_ch + o] * xq.data[r * p + pi];
                }
                // The ADC sees the accumulated current scaled back to weight
                // units; compensation applies to its digital output.
                let converted = fake_quant(layer.w_absmax * acc, &layer.adc);
                y.data[o * p + pi] = converted * alpha + layer.bias.get(o).copied().unwrap_or(0.0);
            }
        }
    };

    match granularity {
        ReadNoiseGranularity::PerVector => {
            for pi in 0..p {
                let w = effective_diff(layer, noise, t, rng)?;
                run_columns(&w, pi, pi + 1, &mut y);
            }
        }
        _ => {
            let owned;
            let w = match shared {
                Some(w) => w,
                None => {
                    owned = effective_diff(layer, noise, t, rng)?;
                    &owned
                }
            };
            run_columns(w, 0, p, &mut y);
        }
    }
    Ok(y)
}

/// Full forward pass of the deployed model at wall-clock time `t`.
pub fn forward_analog(
    deployed: &DeployedModel,
    x: &Tensor,
    t: f64,
    protocol: &EvalProtocol,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    // Shared per-evaluation noise realizations.
    let shared: Option<Vec<Mat>> = match protocol.read_noise {
        ReadNoiseGranularity::PerEvaluation => Some(
            deployed
                .analog
                .iter()
                .map(|l| effective_diff(l, &deployed.noise, t, rng))
                .collect::<Result<Vec<_>>>()?,
        ),
        _ => None,
    };

    let per: usize = deployed.input_shape.iter().product();
    if x.len() % per != 0 {
        return Err(Error::dimension("forward_analog input", format!("multiple of {per}"), x.len()));
    }
    let n = x.len() / per;
    let mut logits = Vec::with_capacity(n * deployed.class_count);
    for b in 0..n {
        let sample: Vec<f64> = x.data[b * per..(b + 1) * per].iter().map(|v| *v as f64).collect();
        let out = forward_one(deployed, sample, t, protocol, rng, shared.as_deref())?;
        logits.extend(out.iter().map(|v| *v as f32));
    }
    if x.rank() == deployed.input_shape.len() {
        Tensor::new(vec![deployed.class_count], logits)
    } else {
        Tensor::new(vec![n, deployed.class_count], logits)
    }
}

fn forward_one(
    deployed: &DeployedModel,
    mut act: Vec<f64>,
    t: f64,
    protocol: &EvalProtocol,
    rng: &mut ChaCha8Rng,
    shared: Option<&[Mat]>,
) -> Result<Vec<f64>> {
    let mut dims = SampleDims::from_shape(&deployed.input_shape)?;
    for (idx, layer) in deployed.spec.layers.iter().enumerate() {
        match deployed.analog_of_spec[idx] {
            Some(ord) => {
                let a = &deployed.analog[ord];
                let cols = build_cols(&act, &dims, layer)?;
                let y = analog_mvm(
                    a,
                    &cols,
                    &deployed.noise,
                    t,
                    protocol.gdc,
                    protocol.read_noise,
                    rng,
                    shared.map(|s| &s[ord]),
                )?;
                dims = dims.after_gemm(layer)?;
                act = y_to_act(&y, &dims);
            }
            None => {
                let (next_dims, next) = digital_layer(&act, &dims, layer, idx)?;
                dims = next_dims;
                act = next;
            }
        }
    }
    Ok(act)
}

#[derive(Debug, Clone, Copy)]
enum SampleDims {
    Img { c: usize, h: usize, w: usize },
    Flat { f: usize },
}

impl SampleDims {
    fn from_shape(shape: &[usize]) -> Result<Self> {
        match shape {
            [f] => Ok(SampleDims::Flat { f: *f }),
            [c, h, w] => Ok(SampleDims::Img { c: *c, h: *h, w: *w }),
            other => Err(Error::dimension("sample shape", "[F] or [C,H,W]", format!("{other:?}"))),
        }
    }

    fn elements(&self) -> usize {
        match *self {
            SampleDims::Img { c, h, w } => c * h * w,
            SampleDims::Flat { f } => f,
        }
    }

    fn after_gemm(&self, layer: &LayerSpec) -> Result<SampleDims> {
        match layer.kind {
            LayerKind::Dense => Ok(SampleDims::Flat { f: layer.out_channels }),
            _ => {
                let SampleDims::Img { h, w, .. } = *self else {
                    return Err(Error::dimension("conv layer", "image input", "flat"));
                };
                let g = ConvGeom {
                    kernel: layer.kernel_or_1(),
                    stride: layer.stride_or_1(),
                    padding: layer.padding_or_0(),
                };
                let (oh, ow) = g.output_hw(h, w);
                Ok(SampleDims::Img { c: layer.out_channels, h: oh, w: ow })
            }
        }
    }
}

/// Patch/sample matrix (K, P) for one sample entering a GEMM layer.
fn build_cols(act: &[f64], dims: &SampleDims, layer: &LayerSpec) -> Result<Mat> {
    match layer.kind {
        LayerKind::Dense => {
            let f = dims.elements();
            if f != layer.in_channels {
                return Err(Error::dimension("dense input", layer.in_channels, f));
            }
            Ok(Mat::from_vec(f, 1, act.to_vec()))
        }
        LayerKind::Conv2d | LayerKind::DepthwiseConv2d => {
            let SampleDims::Img { c, h, w } = *dims else {
                return Err(Error::dimension("conv input", "image", "flat"));
            };
            let g = ConvGeom {
                kernel: layer.kernel_or_1(),
                stride: layer.stride_or_1(),
                padding: layer.padding_or_0(),
            };
            Ok(im2col(act, ImgDims { n: 1, c, h, w }, g))
        }
        other => Err(Error::Config(format!("layer kind {other:?} has no GEMM form"))),
    }
}

fn y_to_act(y: &Mat, dims: &SampleDims) -> Vec<f64> {
    match dims {
        SampleDims::Flat { .. } => y.data.clone(),
        SampleDims::Img { c, h, w } => {
            let per = h * w;
            let mut act = vec![0.0; c * per];
            for o in 0..*c {
                for p in 0..per {
                    act[o * per + p] = y.data[o * per + p];
                }
            }
            act
        }
    }
}

/// Digital-datapath execution of non-analog layers (and of weighted layers
/// marked digital).
fn digital_layer(act: &[f64], dims: &SampleDims, layer: &LayerSpec, idx: usize) -> Result<(SampleDims, Vec<f64>)> {
    match layer.kind {
        LayerKind::Relu => Ok((*dims, act.iter().map(|v| v.max(0.0)).collect())),
        LayerKind::AvgPool | LayerKind::MaxPool => {
            let SampleDims::Img { c, h, w } = *dims else {
                return Err(Error::dimension(format!("pool layer {idx}"), "image", "flat"));
            };
            let (kh, kw) = layer.kernel_or_1();
            let (sh, sw) = layer.stride_or_1();
            let (oh, ow) = ((h - kh) / sh + 1, (w - kw) / sw + 1);
            let avg = layer.kind == LayerKind::AvgPool;
            let mut out = vec![0.0; c * oh * ow];
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = if avg { 0.0 } else { f64::NEG_INFINITY };
                        for i in 0..kh {
                            for j in 0..kw {
                                let v = act[ch * h * w + (oy * sh + i) * w + (ox * sw + j)];
                                if avg {
                                    acc += v;
                                } else {
                                    acc = acc.max(v);
                                }
                            }
                        }
                        out[ch * oh * ow + oy * ow + ox] = if avg { acc / (kh * kw) as f64 } else { acc };
                    }
                }
            }
            Ok((SampleDims::Img { c, h: oh, w: ow }, out))
        }
        LayerKind::ScaleBias => {
            let scale = layer
                .weights
                .as_ref()
                .ok_or_else(|| Error::Config(format!("scale_bias layer {idx} has no parameters")))?;
            let c = layer.in_channels;
            let per = act.len() / c;
            let mut out = act.to_vec();
            for ch in 0..c {
                let s = scale.data[ch] as f64;
                let b = layer.bias.as_ref().map(|b| b.data[ch] as f64).unwrap_or(0.0);
                for i in 0..per {
                    out[ch * per + i] = out[ch * per + i] * s + b;
                }
            }
            Ok((*dims, out))
        }
        LayerKind::Conv2d | LayerKind::DepthwiseConv2d | LayerKind::Dense => {
            // Off-crossbar weighted layer: plain floating-point GEMM.
            let cols = build_cols(act, dims, layer)?;
            let w = layer
                .weights
                .as_ref()
                .ok_or_else(|| Error::Config(format!("layer {idx} has no weights")))?;
            let next = dims.after_gemm(layer)?;
            let p = cols.cols;
            let mut y = Mat::zeros(layer.out_channels, p);
            match layer.kind {
                LayerKind::DepthwiseConv2d => {
                    let (kh, kw) = layer.kernel_or_1();
                    let k = kh * kw;
                    let multiplier = layer.out_channels / layer.in_channels;
                    for o in 0..layer.out_channels {
                        let ch = o / multiplier;
                        for pi in 0..p {
                            let mut acc = 0.0;
                            for i in 0..k {
                                acc += w.data[o * k + i] as f64 * cols.data[(ch * k + i) * p + pi];
                            }
                            y.data[o * p + pi] = acc;
                        }
                    }
                }
                _ => {
                    let kdim = cols.rows;
                    for o in 0..layer.out_channels {
                        for pi in 0..p {
                            let mut acc = 0.0;
                            for r in 0..kdim {
                                acc += w.data[o * kdim + r] as f64 * cols.data[r * p + pi];
                            }
                            y.data[o * p + pi] = acc;
                        }
                    }
                }
            }
            if let Some(b) = &layer.bias {
                for o in 0..layer.out_channels {
                    for pi in 0..p {
                        y.data[o * p + pi] += b.data[o] as f64;
                    }
                }
            }
            Ok((next, y_to_act(&y, &next)))
        }
    }
}

/// Digital twin of the deployed math: clip weights, fake-quantize layer inputs
/// and pre-activations with the attached converter ranges, no analog noise.
/// This is the independent route the noiseless analog path must reproduce.
pub fn digital_forward_quantized(net: &NetworkSpec, x: &Tensor) -> Result<Tensor> {
    net.validate()?;
    let per: usize = net.input_shape.iter().product();
    let n = x.len() / per;
    let mut logits = Vec::with_capacity(n * net.class_count);
    for b in 0..n {
        let mut act: Vec<f64> = x.data[b * per..(b + 1) * per].iter().map(|v| *v as f64).collect();
        let mut dims = SampleDims::from_shape(&net.input_shape)?;
        for (idx, layer) in net.layers.iter().enumerate() {
            if layer.analog && layer.kind.is_weighted() {
                let ranges = net
                    .ranges_for(idx)
                    .ok_or_else(|| Error::Config(format!("analog layer {idx} has no converter ranges")))?;
                let dac = QuantizerParams::new(ranges.bits_dac, ranges.r_dac, ConverterRole::Dac)?;
                let adc = QuantizerParams::new(ranges.bits_adc, ranges.r_adc, ConverterRole::Adc)?;
                let mut xq = act.clone();
                for v in &mut xq {
                    *v = fake_quant(*v, &dac);
                }
                let cols = build_cols(&xq, &dims, layer)?;
                let w = layer.weights.as_ref().unwrap();
                let p = cols.cols;
                let mut y = Mat::zeros(layer.out_channels, p);
                match layer.kind {
                    LayerKind::DepthwiseConv2d => {
                        let (kh, kw) = layer.kernel_or_1();
                        let k = kh * kw;
                        let multiplier = layer.out_channels / layer.in_channels;
                        for o in 0..layer.out_channels {
                            let ch = o / multiplier;
                            for pi in 0..p {
                                let mut acc = 0.0;
                                for i in 0..k {
                                    let wv = (w.data[o * k + i] as f64).clamp(ranges.w_min, ranges.w_max);
                                    acc += wv * cols.data[(ch * k + i) * p + pi];
                                }
                                y.data[o * p + pi] = acc;
                            }
                        }
                    }
                    _ => {
                        let kdim = cols.rows;
                        for o in 0..layer.out_channels {
                            for pi in 0..p {
                                let mut acc = 0.0;
                                for r in 0..kdim {
                                    let wv = (w.data[o * kdim + r] as f64).clamp(ranges.w_min, ranges.w_max);
                                    acc += wv * cols.data[r * p + pi];
                                }
                                y.data[o * p + pi] = acc;
                            }
                        }
                    }
                }
                for v in &mut y.data {
                    *v = fake_quant(*v, &adc);
                }
                if let Some(bias) = &layer.bias {
                    for o in 0..layer.out_channels {
                        for pi in 0..p {
                            y.data[o * p + pi] += bias.data[o] as f64;
                        }
                    }
                }
                dims = dims.after_gemm(layer)?;
                act = y_to_act(&y, &dims);
            } else {
                let (next_dims, next) = digital_layer(&act, &dims, layer, idx)?;
                dims = next_dims;
                act = next;
            }
        }
        logits.extend(act.iter().map(|v| *v as f32));
    }
    Tensor::new(vec![n, net.class_count], logits)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub run: usize,
    pub time_s: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub time_s: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResults {
    pub records: Vec<EvalRecord>,
    pub summary: Vec<CheckpointSummary>,
}

pub fn accuracy_of_logits(logits: &Tensor, labels: &[usize]) -> f64 {
    let n = labels.len();
    let classes = logits.len() / n;
    let mut correct = 0;
    for b in 0..n {
        let row = &logits.data[b * classes..(b + 1) * classes];
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if pred == labels[b] {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

/// Repeated-evaluation protocol: `n_runs` independent programmings, each
/// evaluated at every checkpoint on the full dataset.
pub fn evaluate(
    net: &NetworkSpec,
    plan: &MappingPlan,
    noise: &NoiseParams,
    dataset: (&Tensor, &[usize]),
    times: &DeploymentTimes,
    protocol: &EvalProtocol,
    seed: u64,
) -> Result<EvalResults> {
    let (inputs, labels) = dataset;
    if labels.is_empty() {
        return Err(Error::Config("evaluate: empty dataset".into()));
    }
    if protocol.n_runs < 2 {
        return Err(Error::Config("evaluate: protocol needs at least 2 runs for a std".into()));
    }
    times.validate(noise.t_c)?;

    let mut records = Vec::with_capacity(protocol.n_runs * times.checkpoints.len());
    for run in 0..protocol.n_runs {
        let run_seed = derive_seed(seed, run as u64);
        let deployed = deploy(net, plan, noise, run_seed)?;
        for (ti, &t) in times.checkpoints.iter().enumerate() {
            let mut rng = seeded_rng(run_seed, 0x1000 + ti as u64);
            let logits = forward_analog(&deployed, inputs, t, protocol, &mut rng)?;
            records.push(EvalRecord { run, time_s: t, accuracy: accuracy_of_logits(&logits, labels) });
        }
    }

    let mut summary = Vec::new();
    for &t in &times.checkpoints {
        let accs: Vec<f64> = records.iter().filter(|r| r.time_s == t).map(|r| r.accuracy).collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (accs.len() - 1) as f64;
        summary.push(CheckpointSummary { time_s: t, mean, std: var.sqrt() });
    }
    Ok(EvalResults { records, summary })
}
