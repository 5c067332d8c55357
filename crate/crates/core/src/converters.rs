//! DAC/ADC abstraction: symmetric uniform quantizers with the shared ADC gain
//! constraint, plus the fallback heuristics for deriving scales when no
//! trained ranges are available.
//!
//! Codes live in the symmetric range `[-(2^(b-1)-1), +(2^(b-1)-1)]`; the most
//! negative two's-complement code is unused. Rounding is half-away-from-zero
//! so that the quantizer stays odd.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConverterRole {
    Dac,
    Adc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerParams {
    pub bits: u32,
    pub r_max: f64,
    pub role: ConverterRole,
}

impl QuantizerParams {
    pub fn new(bits: u32, r_max: f64, role: ConverterRole) -> Result<Self> {
        if bits < 2 {
            return Err(Error::Config(format!("quantizer bits must be >= 2, got {bits}")));
        }
        if !(r_max > 0.0) {
            return Err(Error::Config(format!("quantizer range must be positive, got {r_max}")));
        }
        Ok(QuantizerParams { bits, r_max, role })
    }

    /// Largest code magnitude, `2^(b-1) - 1`.
    pub fn max_code(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }

    /// Step size between adjacent codes.
    pub fn delta(&self) -> f64 {
        self.r_max / self.max_code() as f64
    }
}

pub fn max_code(bits: u32) -> f64 {
    ((1i64 << (bits - 1)) - 1) as f64
}

fn round_half_away(x: f64) -> f64 {
    // f64::round already rounds half away from zero.
    x.round()
}

/// Quantize to an integer code, saturating at the symmetric code bounds.
pub fn quantize(x: f64, q: &QuantizerParams) -> i64 {
    let n = q.max_code() as f64;
    let clipped = x.clamp(-q.r_max, q.r_max);
    let code = round_half_away(clipped / q.delta());
    code.clamp(-n, n) as i64
}

pub fn dequantize(code: i64, q: &QuantizerParams) -> f64 {
    code as f64 * q.delta()
}

/// Quantize-dequantize in one step (the value the digital side observes).
pub fn fake_quant(x: f64, q: &QuantizerParams) -> f64 {
    dequantize(quantize(x, q), q)
}

/// DAC/ADC pair attached to one analog layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConverterAttachment {
    pub layer_id: usize,
    pub dac: QuantizerParams,
    pub adc: QuantizerParams,
    pub trained: bool,
}

impl ConverterAttachment {
    pub fn new(layer_id: usize, bits_adc: u32, r_dac: f64, r_adc: f64) -> Result<Self> {
        let attach = ConverterAttachment {
            layer_id,
            dac: QuantizerParams::new(bits_adc + 1, r_dac, ConverterRole::Dac)?,
            adc: QuantizerParams::new(bits_adc, r_adc, ConverterRole::Adc)?,
            trained: false,
        };
        Ok(attach)
    }

    pub fn check_paired_bits(&self) -> Result<()> {
        if self.dac.bits != self.adc.bits + 1 {
            return Err(Error::Config(format!(
                "layer {}: DAC bits ({}) must be ADC bits ({}) + 1",
                self.layer_id, self.dac.bits, self.adc.bits
            )));
        }
        Ok(())
    }
}

/// Shared ADC gain and the per-layer weight maxima it couples to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GainState {
    pub s: f64,
    pub per_layer_w_max: Vec<f64>,
}

/// Rewrite every DAC range as `r_dac = r_adc * |S| / W_max` so the defining
/// ratio `S = r_dac * W_max / r_adc` holds for every layer.
pub fn enforce_gain_constraint(attachments: &mut [ConverterAttachment], gain: &GainState) -> Result<()> {
    if attachments.len() != gain.per_layer_w_max.len() {
        return Err(Error::Config(format!(
            "gain state covers {} layers, attachments cover {}",
            gain.per_layer_w_max.len(),
            attachments.len()
        )));
    }
    for (attach, &w_max) in attachments.iter_mut().zip(&gain.per_layer_w_max) {
        if !(w_max > 0.0) {
            return Err(Error::DegenerateLayer {
                layer: attach.layer_id,
                reason: format!("W_max must be positive to share an ADC gain, got {w_max}"),
            });
        }
        attach.dac.r_max = attach.adc.r_max * gain.s.abs() / w_max;
    }
    Ok(())
}

/// `Scale_inp = (2^(n_dac-1)-1) / percentile_in`, the per-layer DAC scale
/// derived from the 99.995th percentile of input activations.
pub fn heuristic_input_scale(percentile_in: f64, n_dac: u32) -> Result<f64> {
    if !(percentile_in > 0.0) {
        return Err(Error::Calibration(format!(
            "input percentile must be positive, got {percentile_in}"
        )));
    }
    Ok(max_code(n_dac) / percentile_in)
}

/// Parameters for the statistical output-scale rule used when no trained
/// ranges exist. Defaults follow the published crossbar sizing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputScaleParams {
    pub n_adc: u32,
    pub n_dac: u32,
    pub g_max: f64,
    pub crossbar_rows: usize,
    pub n_std_in: f64,
    pub n_std_out: f64,
    /// Weight-std multiplier; no published value, kept configurable.
    pub n_w_std: f64,
}

impl Default for OutputScaleParams {
    fn default() -> Self {
        OutputScaleParams {
            n_adc: 8,
            n_dac: 9,
            g_max: 25e-6,
            crossbar_rows: 1024,
            n_std_in: 4.0,
            n_std_out: 4.0,
            n_w_std: 1.0,
        }
    }
}

/// `Scale_out = ((2^(n_adc-1)-1)/n_std_out) / ((2^(n_dac-1)-1) * g_max * sqrt(rows))
///              * n_std_in * n_w_std`
///
/// The grouping above is the one implemented and covered by the hand-evaluated
/// tests; the denominator collects the DAC full-scale code, the maximum cell
/// conductance and the row-count accumulation factor.
pub fn heuristic_output_scale(p: &OutputScaleParams) -> f64 {
    (max_code(p.n_adc) / p.n_std_out)
        / (max_code(p.n_dac) * p.g_max * (p.crossbar_rows as f64).sqrt())
        * p.n_std_in
        * p.n_w_std
}

/// Fold per-layer trained converter ranges into one global ADC scale:
/// averages `trained_adc_l * g_max / w_max_l * (2^(n_adc-1)-1) / trained_dac_l`
/// over layers and returns `Scale_out = (2^(n_adc-1)-1) / trained_ADC`.
pub fn trained_adc_scale(
    trained_adc_ranges: &[f64],
    trained_dac_ranges: &[f64],
    w_max: &[f64],
    g_max: f64,
    n_adc: u32,
) -> Result<f64> {
    let l = trained_adc_ranges.len();
    if l == 0 {
        return Err(Error::Config("trained_adc_scale needs at least one layer".into()));
    }
    if trained_dac_ranges.len() != l || w_max.len() != l {
        return Err(Error::dimension("trained_adc_scale", l, format!("{}/{}", trained_dac_ranges.len(), w_max.len())));
    }
    let code = max_code(n_adc);
    let mut acc = 0.0;
    for i in 0..l {
        if !(trained_adc_ranges[i] > 0.0 && trained_dac_ranges[i] > 0.0 && w_max[i] > 0.0) {
            return Err(Error::Config(format!("trained_adc_scale: non-positive entry at layer {i}")));
        }
        acc += trained_adc_ranges[i] * g_max / w_max[i] * code / trained_dac_ranges[i];
    }
    let trained_adc = acc / l as f64;
    Ok(code / trained_adc)
}

/// Linear-interpolation percentile over a calibration sample, `p` in [0, 100].
pub fn percentile(samples: &[f64], p: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Calibration("percentile of empty sample".into()));
    }
    let mut sorted: Vec<f64> = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("NaN in percentile input"));
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        return Ok(sorted[lo]);
    }
    let frac = rank - lo as f64;
    Ok(sorted[lo] * (1.0 - frac) + sorted[hi] * frac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(bits: u32, r: f64) -> QuantizerParams {
        QuantizerParams::new(bits, r, ConverterRole::Adc).unwrap()
    }

    #[test]
    fn quantize_zero_and_full_scale() {
        let p = q(8, 1.0);
        assert_eq!(quantize(0.0, &p), 0);
        assert_eq!(quantize(1.0, &p), 127);
        assert_eq!(quantize(-10.0, &p), -127, "saturating clip");
    }

    #[test]
    fn dequantize_inverts_scale() {
        let p = q(8, 2.0);
        assert!((dequantize(127, &p) - 2.0).abs() < 1e-12);
        assert!((dequantize(-64, &p) + 64.0 * 2.0 / 127.0).abs() < 1e-12);
    }

    #[test]
    fn enforce_gain_identity_case() {
        let mut attach = vec![ConverterAttachment::new(0, 8, 0.5, 1.0).unwrap()];
        let gain = GainState { s: 1.0, per_layer_w_max: vec![1.0] };
        enforce_gain_constraint(&mut attach, &gain).unwrap();
        assert!((attach[0].dac.r_max - 1.0).abs() < 1e-15);
    }

    #[test]
    fn enforce_gain_uses_absolute_value() {
        let mut attach = vec![
            ConverterAttachment::new(0, 8, 0.5, 1.0).unwrap(),
            ConverterAttachment::new(2, 8, 0.5, 3.0).unwrap(),
        ];
        let gain = GainState { s: -2.0, per_layer_w_max: vec![0.5, 4.0] };
        enforce_gain_constraint(&mut attach, &gain).unwrap();
        assert!(attach.iter().all(|a| a.dac.r_max > 0.0));
        assert!((attach[0].dac.r_max - 1.0 * 2.0 / 0.5).abs() < 1e-15);
        assert!((attach[1].dac.r_max - 3.0 * 2.0 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn gain_round_trip_recovers_s() {
        let mut attach = vec![
            ConverterAttachment::new(0, 6, 0.1, 0.73).unwrap(),
            ConverterAttachment::new(1, 6, 0.2, 2.41).unwrap(),
            ConverterAttachment::new(2, 6, 0.3, 0.02).unwrap(),
        ];
        let gain = GainState { s: 1.7, per_layer_w_max: vec![0.31, 1.9, 0.007] };
        enforce_gain_constraint(&mut attach, &gain).unwrap();
        for (a, &w) in attach.iter().zip(&gain.per_layer_w_max) {
            let s_back = a.dac.r_max * w / a.adc.r_max;
            assert!((s_back - gain.s.abs()).abs() / gain.s.abs() < 1e-12);
        }
    }

    #[test]
    fn gain_rejects_zero_w_max() {
        let mut attach = vec![ConverterAttachment::new(0, 8, 0.5, 1.0).unwrap()];
        let gain = GainState { s: 1.0, per_layer_w_max: vec![0.0] };
        assert!(matches!(
            enforce_gain_constraint(&mut attach, &gain),
            Err(Error::DegenerateLayer { .. })
        ));
    }

    #[test]
    fn input_scale_hand_values() {
        assert!((heuristic_input_scale(1.27, 8).unwrap() - 100.0).abs() < 1e-12);
        assert!((heuristic_input_scale(127.0, 8).unwrap() - 1.0).abs() < 1e-12);
        assert!((heuristic_input_scale(3.0, 5).unwrap() - 5.0).abs() < 1e-12);
        assert!(heuristic_input_scale(0.0, 8).is_err());
    }

    #[test]
    fn output_scale_symbolic_cancellation() {
        // n_std_in == n_std_out, n_w_std = 1, g_max = 1, rows = 1:
        // everything cancels except the code ratio 127/255 at 8/9 bits.
        let p = OutputScaleParams {
            n_adc: 8,
            n_dac: 9,
            g_max: 1.0,
            crossbar_rows: 1,
            n_std_in: 4.0,
            n_std_out: 4.0,
            n_w_std: 1.0,
        };
        assert!((heuristic_output_scale(&p) - 127.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn output_scale_sqrt_row_law() {
        let mut p = OutputScaleParams::default();
        let base = heuristic_output_scale(&p);
        p.crossbar_rows = 4096;
        assert!((heuristic_output_scale(&p) - base * 0.5).abs() < 1e-12 * base);
    }

    #[test]
    fn output_scale_hand_evaluation_published_defaults() {
        // ((127)/4) / (255 * 25e-6 * 32) * 4 * 1
        let p = OutputScaleParams::default();
        let by_hand: f64 = (127.0 / 4.0) / (255.0 * 25e-6 * 32.0) * 4.0;
        assert!((by_hand - 622.549_019_607_843).abs() < 1e-9);
        assert!((heuristic_output_scale(&p) - by_hand).abs() < 1e-12 * by_hand);
    }

    #[test]
    fn trained_adc_scale_single_identity_term() {
        // Choose trained_adc so the layer term equals 1:
        // adc * g_max / w_max * 127 / dac = 1.
        let g_max = 25e-6;
        let w_max = 0.5;
        let dac = 2.0;
        let adc = w_max * dac / (g_max * 127.0);
        let scale = trained_adc_scale(&[adc], &[dac], &[w_max], g_max, 8).unwrap();
        assert!((scale - 127.0).abs() < 1e-9);
    }

    #[test]
    fn trained_adc_scale_mean_of_constants() {
        let g_max = 25e-6;
        let one = trained_adc_scale(&[1.5], &[0.7], &[0.4], g_max, 8).unwrap();
        let three = trained_adc_scale(&[1.5; 3], &[0.7; 3], &[0.4; 3], g_max, 8).unwrap();
        assert!((one - three).abs() < 1e-12 * one.abs());
    }

    #[test]
    fn trained_adc_scale_spreadsheet_check() {
        let adc = [1.0, 2.0, 0.5];
        let dac = [0.5, 1.0, 2.0];
        let w_max = [0.25, 0.5, 1.0];
        let g_max = 25e-6;
        // Hand-evaluated terms: 0.0254, 0.0127, 0.00079375; mean 0.0129645833...
        let t1: f64 = 1.0 * g_max / 0.25 * 127.0 / 0.5;
        let t2: f64 = 2.0 * g_max / 0.5 * 127.0 / 1.0;
        let t3: f64 = 0.5 * g_max / 1.0 * 127.0 / 2.0;
        assert!((t1 - 0.0254).abs() < 1e-12);
        assert!((t2 - 0.0127).abs() < 1e-12);
        assert!((t3 - 0.00079375).abs() < 1e-12);
        let expected = 127.0 / ((t1 + t2 + t3) / 3.0);
        let got = trained_adc_scale(&adc, &dac, &w_max, g_max, 8).unwrap();
        assert!((got - expected).abs() < 1e-9 * expected);
        assert!(trained_adc_scale(&[], &[], &[], g_max, 8).is_err());
    }

    #[test]
    fn percentile_linear_interpolation() {
        let samples = [1.0, 2.0, 3.0, 4.0];
        assert!((percentile(&samples, 0.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((percentile(&samples, 100.0).unwrap() - 4.0).abs() < 1e-12);
        assert!((percentile(&samples, 50.0).unwrap() - 2.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn quantizer_is_odd(x in -10.0f64..10.0, r in 0.01f64..10.0, bits in 2u32..12) {
            let p = q(bits, r);
            prop_assert_eq!(quantize(-x, &p), -quantize(x, &p));
        }

        #[test]
        fn quantization_error_within_half_step(x in -1.0f64..1.0, bits in 2u32..12) {
            let p = q(bits, 1.0);
            let err = (x - fake_quant(x, &p)).abs();
            prop_assert!(err <= p.delta() / 2.0 + 1e-15);
        }

        #[test]
        fn codes_never_exceed_bounds(x in -1e6f64..1e6, r in 0.01f64..100.0, bits in 2u32..12) {
            let p = q(bits, r);
            let code = quantize(x, &p);
            prop_assert!(code.abs() <= p.max_code());
        }
    }
}
