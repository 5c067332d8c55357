//! Analytic latency/energy/area model of the layer-serial accelerator.
//!
//! Latency follows the conversion-phase model: a layer occupying `cols`
//! logical columns needs `p = ceil(cols / adc_count)` conversion phases per
//! input vector, each lasting one array cycle `t_cim(bits)`; the digital
//! datapath runs in parallel at `ceil(cols / fp_units) * fp_ops_per_output`
//! clocks. The slower of the two sides sets the per-vector latency; pipeline
//! fill/drain is ignored (layer runs are thousands of vectors long).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapper::{AdcMux, CrossbarConfig, MappingPlan};
use crate::net::{ActShape, LayerKind, NetworkSpec};

/// Per-bit-width constant (supported activation precisions: 4, 6, 8).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BitsMap {
    pub b4: f64,
    pub b6: f64,
    pub b8: f64,
}

impl BitsMap {
    pub fn zero() -> Self {
        BitsMap { b4: 0.0, b6: 0.0, b8: 0.0 }
    }

    pub fn get(&self, bits: u32) -> Result<f64> {
        match bits {
            4 => Ok(self.b4),
            6 => Ok(self.b6),
            8 => Ok(self.b8),
            other => Err(Error::Config(format!("unsupported activation precision {other} (expected 4, 6 or 8)"))),
        }
    }

    pub fn set(&mut self, bits: u32, v: f64) -> Result<()> {
        match bits {
            4 => self.b4 = v,
            6 => self.b6 = v,
            8 => self.b8 = v,
            other => return Err(Error::Config(format!("unsupported activation precision {other}"))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingParams {
    /// Array cycle time per activation precision, seconds. The PWM DAC makes
    /// this grow steeply with bit count.
    pub t_cim: BitsMap,
    /// Digital datapath clock period, seconds.
    pub t_digital: f64,
    /// Pipelined digital slots needed per output word (two FP scalings).
    pub fp_ops_per_output: usize,
}

impl Default for TimingParams {
    fn default() -> Self {
        TimingParams {
            t_cim: BitsMap { b4: 10e-9, b6: 34e-9, b8: 130e-9 },
            t_digital: 1.25e-9,
            fp_ops_per_output: 2,
        }
    }
}

/// Energy constants. Only the aggregate per-cycle energy and the static power
/// are observable in full-utilization efficiency tables; see
/// [`calibrate_energy`] for how the split is pinned.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyParams {
    /// Energy per DAC conversion, joules, per activation precision.
    pub e_dac: BitsMap,
    /// Energy per ADC conversion, joules, per activation precision.
    pub e_adc: BitsMap,
    /// Energy per digital scaling op, joules.
    pub e_fp: f64,
    /// Energy per SRAM word access, joules. Not observable in peak-efficiency
    /// tables; placeholder default, override in config if characterized.
    pub e_sram: f64,
    /// Static (leakage/bias) power, watts.
    pub p_static: f64,
}

impl EnergyParams {
    pub fn zero() -> Self {
        EnergyParams {
            e_dac: BitsMap::zero(),
            e_adc: BitsMap::zero(),
            e_fp: 0.0,
            e_sram: 0.0,
            p_static: 0.0,
        }
    }
}

impl Default for EnergyParams {
    // Fitted to the published full-utilization efficiency points of the
    // 1024x512 array (see calibrate_energy round-trip tests).
    fn default() -> Self {
        EnergyParams {
            e_dac: BitsMap { b4: 3.764_714_770_989_759e-12, b6: 5.996_288_230_832_575_6e-12, b8: 1.466_566_556_424_465e-11 },
            e_adc: BitsMap { b4: 1.882_357_385_494_879_6e-12, b6: 2.998_144_115_416_287_8e-12, b8: 7.332_832_782_122_326e-12 },
            e_fp: 0.0,
            e_sram: 1.0e-14,
            p_static: 0.112_720_015_430_119_32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AreaParams {
    /// Crossbar macro area for the 1024x512 array, mm^2.
    pub a_cim: f64,
    /// Digital datapath + SRAM area, mm^2.
    pub a_digital_sram: f64,
    /// Published totals per mux scheme for the 1024x512 array, mm^2.
    pub totals: BTreeMap<String, f64>,
}

impl Default for AreaParams {
    fn default() -> Self {
        let mut totals = BTreeMap::new();
        totals.insert("M1".to_string(), 4.11);
        totals.insert("M2".to_string(), 3.60);
        totals.insert("M4".to_string(), 3.34);
        AreaParams { a_cim: 3.07, a_digital_sram: 0.15, totals }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AreaBreakdown {
    pub cim_mm2: f64,
    pub digital_sram_mm2: f64,
    pub periphery_mm2: f64,
    pub total_mm2: f64,
}

/// Peak throughput in TOPS at 100% utilization: `2 * rows * cols` ops per
/// `adc_mux * t_cim(bits)` seconds (one MAC counts as two ops).
pub fn peak_throughput(cfg: &CrossbarConfig, bits: u32, timing: &TimingParams) -> Result<f64> {
    let ops_per_cycle = 2.0 * cfg.rows as f64 * cfg.cols as f64;
    let cycle = cfg.adc_mux.factor() as f64 * timing.t_cim.get(bits)?;
    Ok(ops_per_cycle / cycle / 1e12)
}

/// Latency of one placed rectangle for `n_vectors` input vectors.
pub fn layer_latency(
    cols_used: usize,
    n_vectors: usize,
    bits: u32,
    cfg: &CrossbarConfig,
    timing: &TimingParams,
) -> Result<f64> {
    if cols_used == 0 {
        return Err(Error::Config("latency of an unplaced layer".into()));
    }
    let phases = cols_used.div_ceil(cfg.adc_count());
    let analog = phases as f64 * timing.t_cim.get(bits)?;
    let digital = cols_used.div_ceil(cfg.fp_units) as f64 * timing.fp_ops_per_output as f64 * timing.t_digital;
    Ok(n_vectors as f64 * analog.max(digital))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerPerf {
    pub layer_id: usize,
    pub ops: f64,
    pub n_vectors: usize,
    /// Conversion phases per input vector, summed over sub-GEMMs.
    pub phases: usize,
    pub latency_s: f64,
    pub energy_j: f64,
    pub tops: f64,
    pub tops_per_w: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerfReport {
    pub bits: u32,
    pub adc_mux: AdcMux,
    pub rows: usize,
    pub cols: usize,
    pub fp_units: usize,
    pub per_layer: Vec<LayerPerf>,
    pub latency_per_inference_s: f64,
    pub inferences_per_s: f64,
    pub energy_per_inference_j: f64,
    pub mean_tops: f64,
    pub mean_tops_per_w: f64,
    pub utilization: f64,
    pub area: AreaBreakdown,
}

/// Number of input vectors one inference streams through an analog layer:
/// output spatial positions for conv layers, one for dense layers.
fn vectors_per_inference(net: &NetworkSpec, layer_id: usize) -> Result<usize> {
    let (inputs, _) = net.shape_plan()?;
    let layer = &net.layers[layer_id];
    match layer.kind {
        LayerKind::Dense => Ok(1),
        LayerKind::Conv2d | LayerKind::DepthwiseConv2d => {
            let ActShape::Chw(_, h, w) = inputs[layer_id] else {
                return Err(Error::dimension("conv input", "image", "flat"));
            };
            let (oh, ow) = crate::net::conv_output_hw(h, w, layer.kernel_or_1(), layer.stride_or_1(), layer.padding_or_0())?;
            Ok(oh * ow)
        }
        other => Err(Error::Config(format!("layer kind {other:?} does not run on the array"))),
    }
}

/// Evaluate the full analytic model for one (plan, bits) configuration.
pub fn model_perf(
    plan: &MappingPlan,
    net: &NetworkSpec,
    bits: u32,
    timing: &TimingParams,
    energy: &EnergyParams,
    area_params: &AreaParams,
) -> Result<PerfReport> {
    let cfg = CrossbarConfig {
        rows: plan.rows,
        cols: plan.cols,
        adc_mux: plan.adc_mux,
        fp_units: plan.fp_units,
        max_tiles: None,
    };
    let e_dac = energy.e_dac.get(bits)?;
    let e_adc = energy.e_adc.get(bits)?;

    let mut per_layer = Vec::new();
    for layer_id in net.analog_layers() {
        let rects = plan.placements_for(layer_id);
        if rects.is_empty() {
            return Err(Error::Config(format!("layer {layer_id} is not placed in the plan")));
        }
        let n_vectors = vectors_per_inference(net, layer_id)?;
        let mut latency = 0.0;
        let mut ops = 0.0;
        let mut dyn_energy = 0.0;
        let mut phases = 0;
        for r in &rects {
            latency += layer_latency(r.cols_used, n_vectors, bits, &cfg, timing)?;
            ops += 2.0 * r.rows_used as f64 * r.cols_used as f64 * n_vectors as f64;
            phases += r.cols_used.div_ceil(cfg.adc_count());
            let per_vector = r.rows_used as f64 * e_dac
                + r.cols_used as f64 * e_adc
                + r.cols_used as f64 * timing.fp_ops_per_output as f64 * energy.e_fp
                + r.cols_used as f64 * 2.0 * energy.e_sram;
            dyn_energy += n_vectors as f64 * per_vector;
        }
        let energy_total = dyn_energy + energy.p_static * latency;
        per_layer.push(LayerPerf {
            layer_id,
            ops,
            n_vectors,
            phases,
            latency_s: latency,
            energy_j: energy_total,
            tops: ops / latency / 1e12,
            tops_per_w: if energy_total > 0.0 { ops / energy_total / 1e12 } else { f64::INFINITY },
        });
    }

    let latency_per_inference: f64 = per_layer.iter().map(|l| l.latency_s).sum();
    let total_ops: f64 = per_layer.iter().map(|l| l.ops).sum();
    let total_energy: f64 = per_layer.iter().map(|l| l.energy_j).sum();
    Ok(PerfReport {
        bits,
        adc_mux: plan.adc_mux,
        rows: plan.rows,
        cols: plan.cols,
        fp_units: plan.fp_units,
        latency_per_inference_s: latency_per_inference,
        inferences_per_s: 1.0 / latency_per_inference,
        energy_per_inference_j: total_energy,
        mean_tops: total_ops / latency_per_inference / 1e12,
        mean_tops_per_w: if total_energy > 0.0 { total_ops / total_energy / 1e12 } else { f64::INFINITY },
        utilization: plan.utilization,
        area: area(&cfg, area_params, plan.tiles_used),
        per_layer,
    })
}

/// Area model: table lookup for the published 1024x512 schemes, otherwise the
/// crossbar macro scales with cell count and the converter periphery is
/// interpolated linearly in ADC count between the tabulated anchors.
pub fn area(cfg: &CrossbarConfig, params: &AreaParams, tiles: usize) -> AreaBreakdown {
    let tiles = tiles.max(1) as f64;
    let full_cells = 1024.0 * 512.0;
    let periphery_anchor = |mux: &str| params.totals.get(mux).map(|t| t - params.a_cim - params.a_digital_sram);
    let (p_m4, p_m1) = (periphery_anchor("M4"), periphery_anchor("M1"));

    let cim = params.a_cim * (cfg.cells() as f64 / full_cells) * tiles;
    let periphery_per_tile = match (p_m4, p_m1) {
        (Some(p4), Some(p1)) => {
            let n = cfg.adc_count() as f64;
            p4 + (n - 128.0) * (p1 - p4) / (512.0 - 128.0)
        }
        _ => 0.0,
    };
    let is_reference_geometry = cfg.rows == 1024 && cfg.cols == 512 && tiles == 1.0;
    let total = if is_reference_geometry {
        if let Some(t) = params.totals.get(&cfg.adc_mux.to_string()) {
            *t
        } else {
            cim + params.a_digital_sram + periphery_per_tile
        }
    } else {
        cim + params.a_digital_sram + periphery_per_tile * tiles
    };
    AreaBreakdown {
        cim_mm2: cim,
        digital_sram_mm2: params.a_digital_sram,
        periphery_mm2: total - cim - params.a_digital_sram,
        total_mm2: total,
    }
}

/// One full-utilization efficiency observation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalPoint {
    pub rows: usize,
    pub cols: usize,
    pub adc_mux: AdcMux,
    pub bits: u32,
    pub tops_per_w: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalResidual {
    pub adc_mux: AdcMux,
    pub bits: u32,
    pub observed_w: f64,
    pub fitted_w: f64,
    /// Signed relative residual (fitted - observed) / observed.
    pub relative: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub params: EnergyParams,
    pub residuals: Vec<CalResidual>,
    /// Per-cycle dynamic energy identified per precision, joules.
    pub cycle_energy: BTreeMap<u32, f64>,
    pub condition_estimate: f64,
}

/// Fit energy constants to full-utilization TOPS/W observations.
///
/// The model power at a point is
/// `rows*e_dac(b)/T + cols*e_adc(b)/T + fp_ops*cols*e_fp/T + p_static`
/// with `T = adc_mux * t_cim(b)`. On a mux/bits grid only the aggregate
/// per-cycle energy `x_b = rows*e_dac(b) + cols*(e_adc(b) + fp_ops*e_fp)` and
/// `p_static` are identifiable: within one precision the three per-conversion
/// columns are collinear over a mux sweep. The solver therefore least-squares
/// fits `{x_b}` and `p_static`, errors on a rank-deficient reduced system, and
/// pins the remaining gauge freedom by attributing `x_b` to `e_dac`/`e_adc`
/// proportionally to conversion counts with `e_fp` reported as zero (folding
/// the shared FP energy into the column-proportional ADC term is exact for
/// every workload, not only at full utilization).
pub fn calibrate_energy(points: &[CalPoint], timing: &TimingParams) -> Result<CalibrationReport> {
    if points.len() < 8 {
        return Err(Error::Config(format!(
            "energy calibration needs at least 8 points, got {}",
            points.len()
        )));
    }
    let (rows, cols) = (points[0].rows, points[0].cols);
    if points.iter().any(|p| p.rows != rows || p.cols != cols) {
        return Err(Error::Config("calibration table must share one crossbar geometry".into()));
    }

    let mut bits_set: Vec<u32> = points.iter().map(|p| p.bits).collect();
    bits_set.sort_unstable();
    bits_set.dedup();
    let m = bits_set.len();

    // Observed power per point.
    let mut powers = Vec::with_capacity(points.len());
    for p in points {
        if !(p.tops_per_w > 0.0) {
            return Err(Error::Calibration(format!("non-positive TOPS/W at {} {}b", p.adc_mux, p.bits)));
        }
        let cfg = CrossbarConfig {
            rows,
            cols,
            adc_mux: p.adc_mux,
            fp_units: 32,
            max_tiles: None,
        };
        let tops = peak_throughput(&cfg, p.bits, timing)?;
        powers.push(tops / p.tops_per_w);
    }

    // Reduced least squares: unknowns [x_b per distinct precision..., p_static].
    let n_unknowns = m + 1;
    let mut design: Vec<Vec<f64>> = Vec::with_capacity(points.len());
    for p in points {
        let t = p.adc_mux.factor() as f64 * timing.t_cim.get(p.bits)?;
        let mut row = vec![0.0f64; n_unknowns];
        let bi = bits_set.iter().position(|&b| b == p.bits).unwrap();
        row[bi] = 1.0 / t;
        row[m] = 1.0;
        design.push(row);
    }
    // Equilibrate columns: 1/T entries dwarf the static-power column by ~8
    // orders of magnitude, which would otherwise masquerade as deficiency.
    let mut col_scale = vec![0.0f64; n_unknowns];
    for row in &design {
        for (j, v) in row.iter().enumerate() {
            col_scale[j] += v * v;
        }
    }
    for s in &mut col_scale {
        *s = s.sqrt();
        if *s == 0.0 {
            *s = 1.0;
        }
    }
    let mut ata = vec![vec![0.0f64; n_unknowns]; n_unknowns];
    let mut atb = vec![0.0f64; n_unknowns];
    for (row, &power) in design.iter().zip(&powers) {
        for i in 0..n_unknowns {
            let ri = row[i] / col_scale[i];
            for j in 0..n_unknowns {
                ata[i][j] += ri * row[j] / col_scale[j];
            }
            atb[i] += ri * power;
        }
    }

    let (scaled, condition) = solve_spd(&mut ata, &mut atb).map_err(|cond| {
        Error::Calibration(format!(
            "rank-deficient calibration system (condition estimate {cond:.3e}); \
             the table must span several mux schemes per precision"
        ))
    })?;
    let solution: Vec<f64> = scaled.iter().zip(&col_scale).map(|(v, s)| v / s).collect();

    let p_static = solution[m];
    let mut params = EnergyParams {
        e_dac: BitsMap::zero(),
        e_adc: BitsMap::zero(),
        e_fp: 0.0,
        e_sram: EnergyParams::default().e_sram,
        p_static,
    };
    let mut cycle_energy = BTreeMap::new();
    let norm = (rows * rows + cols * cols) as f64;
    for (i, &b) in bits_set.iter().enumerate() {
        let x_b = solution[i];
        cycle_energy.insert(b, x_b);
        params.e_dac.set(b, x_b * rows as f64 / norm)?;
        params.e_adc.set(b, x_b * cols as f64 / norm)?;
    }

    let mut residuals = Vec::new();
    for (p, &power) in points.iter().zip(&powers) {
        let t = p.adc_mux.factor() as f64 * timing.t_cim.get(p.bits)?;
        let x_b = cycle_energy[&p.bits];
        let fitted = x_b / t + p_static;
        residuals.push(CalResidual {
            adc_mux: p.adc_mux,
            bits: p.bits,
            observed_w: power,
            fitted_w: fitted,
            relative: (fitted - power) / power,
        });
    }

    Ok(CalibrationReport { params, residuals, cycle_energy, condition_estimate: condition })
}

/// Gaussian elimination with partial pivoting for the (tiny) normal system.
/// Returns Err(condition proxy) when a pivot collapses.
fn solve_spd(a: &mut [Vec<f64>], b: &mut [f64]) -> std::result::Result<(Vec<f64>, f64), f64> {
    let n = b.len();
    let mut max_pivot: f64 = 0.0;
    let mut min_pivot = f64::INFINITY;
    for col in 0..n {
        let (pivot_row, pivot_val) = (col..n)
            .map(|r| (r, a[r][col].abs()))
            .max_by(|x, y| x.1.partial_cmp(&y.1).unwrap())
            .unwrap();
        max_pivot = max_pivot.max(pivot_val);
        min_pivot = min_pivot.min(pivot_val);
        if pivot_val <= max_pivot * 1e-10 {
            return Err(if min_pivot > 0.0 { max_pivot / min_pivot } else { f64::INFINITY });
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0f64; n];
    for r in (0..n).rev() {
        let mut acc = b[r];
        for c in r + 1..n {
            acc -= a[r][c] * x[c];
        }
        x[r] = acc / a[r][r];
    }
    Ok((x, max_pivot / min_pivot))
}

/// The published full-utilization efficiency table for the 1024x512 array.
pub fn reference_cal_points() -> Vec<CalPoint> {
    let rows = 1024;
    let cols = 512;
    let entries = [
        (AdcMux::M1, 4, 176.34),
        (AdcMux::M1, 6, 91.12),
        (AdcMux::M1, 8, 31.37),
        (AdcMux::M2, 4, 148.26),
        (AdcMux::M2, 6, 68.37),
        (AdcMux::M2, 8, 21.81),
        (AdcMux::M4, 4, 112.44),
        (AdcMux::M4, 6, 45.55),
        (AdcMux::M4, 8, 13.55),
    ];
    entries
        .iter()
        .map(|&(adc_mux, bits, tops_per_w)| CalPoint { rows, cols, adc_mux, bits, tops_per_w })
        .collect()
}

/// Synthesize the TOPS/W a parameter set implies at one point (test/round-trip
/// helper; inverse of the calibration model).
pub fn model_tops_per_w(rows: usize, cols: usize, adc_mux: AdcMux, bits: u32, timing: &TimingParams, energy: &EnergyParams) -> Result<f64> {
    let t = adc_mux.factor() as f64 * timing.t_cim.get(bits)?;
    let cycle = rows as f64 * energy.e_dac.get(bits)?
        + cols as f64 * energy.e_adc.get(bits)?
        + cols as f64 * timing.fp_ops_per_output as f64 * energy.e_fp;
    let power = cycle / t + energy.p_static;
    let cfg = CrossbarConfig { rows, cols, adc_mux, fp_units: 32, max_tiles: None };
    Ok(peak_throughput(&cfg, bits, timing)? / power)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapper::place;
    use crate::net::{LayerSpec, NetworkSpec};
    use crate::tensor::Tensor;

    fn cfg(mux: AdcMux) -> CrossbarConfig {
        CrossbarConfig { adc_mux: mux, ..CrossbarConfig::default() }
    }

    #[test]
    fn peak_throughput_published_m4_values() {
        let t = TimingParams::default();
        let tops4 = peak_throughput(&cfg(AdcMux::M4), 4, &t).unwrap();
        let tops6 = peak_throughput(&cfg(AdcMux::M4), 6, &t).unwrap();
        let tops8 = peak_throughput(&cfg(AdcMux::M4), 8, &t).unwrap();
        assert!((tops4 - 26.2144).abs() < 1e-4);
        assert!((tops6 - 7.7101).abs() < 1e-4);
        assert!((tops8 - 2.0165).abs() < 1e-4);
    }

    #[test]
    fn peak_throughput_m1_and_small_array() {
        let t = TimingParams::default();
        assert!((peak_throughput(&cfg(AdcMux::M1), 4, &t).unwrap() - 104.8576).abs() < 1e-4);
        let small = CrossbarConfig { rows: 256, cols: 256, adc_mux: AdcMux::M2, fp_units: 32, max_tiles: None };
        let tops = peak_throughput(&small, 4, &t).unwrap();
        assert!((tops - 131072.0 / 20.0 / 1e3).abs() < 1e-6, "2*256*256 ops in 20 ns");
    }

    #[test]
    fn latency_adjusted_pipeline_case() {
        // 128 columns on M4 (128 ADCs): one phase. 4-bit analog = 10 ns;
        // digital = ceil(128/32)*2*1.25 = 10 ns. Exactly adjusted.
        let t = TimingParams::default();
        let lat = layer_latency(128, 1, 4, &cfg(AdcMux::M4), &t).unwrap();
        assert!((lat - 10e-9).abs() < 1e-15);
    }

    #[test]
    fn latency_analog_dominates_two_phases() {
        let t = TimingParams::default();
        let lat = layer_latency(192, 1, 4, &cfg(AdcMux::M4), &t).unwrap();
        assert!((lat - 20e-9).abs() < 1e-15, "two phases at 10 ns beat 15 ns digital");
    }

    #[test]
    fn latency_full_parallel_conversion_single_phase() {
        let t = TimingParams::default();
        for bits in [4, 6, 8] {
            let analog = t.t_cim.get(bits).unwrap();
            let digital = 512f64.div_euclid(32.0) * 2.0 * t.t_digital;
            let lat = layer_latency(512, 1, bits, &cfg(AdcMux::M1), &t).unwrap();
            assert!((lat - analog.max(digital)).abs() < 1e-15);
        }
    }

    #[test]
    fn latency_monotone_in_bits_mux_and_fp_units() {
        let t = TimingParams::default();
        for cols in [32usize, 100, 217, 512] {
            for &(b1, b2) in &[(4u32, 6u32), (6, 8)] {
                let l1 = layer_latency(cols, 7, b1, &cfg(AdcMux::M2), &t).unwrap();
                let l2 = layer_latency(cols, 7, b2, &cfg(AdcMux::M2), &t).unwrap();
                assert!(l2 >= l1);
            }
            let m1 = layer_latency(cols, 7, 6, &cfg(AdcMux::M1), &t).unwrap();
            let m4 = layer_latency(cols, 7, 6, &cfg(AdcMux::M4), &t).unwrap();
            assert!(m4 >= m1);
            let mut few_fp = cfg(AdcMux::M4);
            few_fp.fp_units = 8;
            let lf = layer_latency(cols, 7, 6, &few_fp, &t).unwrap();
            assert!(lf >= m4);
        }
    }

    fn full_array_net() -> NetworkSpec {
        let mut l = LayerSpec::dense(1024, 512);
        l.weights = Some(Tensor::new(vec![512, 1024], vec![1.0; 1024 * 512]).unwrap());
        NetworkSpec::new(vec![1024], 512, vec![l])
    }

    #[test]
    fn single_full_array_layer_hits_peak_throughput() {
        let net = full_array_net();
        let plan = place(&net, &cfg(AdcMux::M4)).unwrap();
        let t = TimingParams::default();
        for bits in [4, 6, 8] {
            let report = model_perf(&plan, &net, bits, &t, &EnergyParams::zero(), &AreaParams::default()).unwrap();
            let peak = peak_throughput(&cfg(AdcMux::M4), bits, &t).unwrap();
            assert!(
                (report.mean_tops - peak).abs() < 1e-9 * peak,
                "bits {bits}: {} vs {}",
                report.mean_tops,
                peak
            );
        }
    }

    #[test]
    fn zero_energy_params_give_zero_energy_finite_tops() {
        let net = full_array_net();
        let plan = place(&net, &cfg(AdcMux::M4)).unwrap();
        let report = model_perf(&plan, &net, 8, &TimingParams::default(), &EnergyParams::zero(), &AreaParams::default()).unwrap();
        assert_eq!(report.energy_per_inference_j, 0.0);
        assert!(report.mean_tops.is_finite());
    }

    #[test]
    fn energy_per_inference_is_additive_over_layers() {
        // The model charges energy as a plain sum over layers, so a chain
        // must cost exactly what its layers cost in isolation.
        let dense = |i: usize, o: usize| {
            let mut l = LayerSpec::dense(i, o);
            l.weights = Some(Tensor::new(vec![o, i], vec![0.5; i * o]).unwrap());
            l
        };
        let t = TimingParams::default();
        let e = EnergyParams::default();
        let run = |net: &NetworkSpec| {
            let plan = place(net, &cfg(AdcMux::M4)).unwrap();
            model_perf(&plan, net, 8, &t, &e, &AreaParams::default()).unwrap()
        };
        let chain = run(&NetworkSpec::new(vec![300], 77, vec![dense(300, 128), dense(128, 77)]));
        let first = run(&NetworkSpec::new(vec![300], 128, vec![dense(300, 128)]));
        let second = run(&NetworkSpec::new(vec![128], 77, vec![dense(128, 77)]));
        let sum = first.energy_per_inference_j + second.energy_per_inference_j;
        assert!((chain.energy_per_inference_j - sum).abs() <= 1e-15 * sum);
    }

    #[test]
    fn area_published_values_and_interpolation() {
        let p = AreaParams::default();
        assert_eq!(area(&cfg(AdcMux::M4), &p, 1).total_mm2, 3.34);
        assert_eq!(area(&cfg(AdcMux::M1), &p, 1).total_mm2, 4.11);
        // M2 table value is within 2% of the linear-in-ADC-count interpolation.
        let m2_interp = {
            let p4 = 3.34 - 3.07 - 0.15;
            let p1 = 4.11 - 3.07 - 0.15;
            3.07 + 0.15 + p4 + (256.0 - 128.0) * (p1 - p4) / (512.0 - 128.0)
        };
        let m2_table = area(&cfg(AdcMux::M2), &p, 1).total_mm2;
        assert_eq!(m2_table, 3.60);
        assert!((m2_interp - m2_table).abs() / m2_table < 0.02);
    }

    #[test]
    fn calibration_reproduces_reference_points() {
        let timing = TimingParams::default();
        let report = calibrate_energy(&reference_cal_points(), &timing).unwrap();
        for r in &report.residuals {
            assert!(
                r.relative.abs() < 0.05,
                "{} {}b residual {:.4}",
                r.adc_mux,
                r.bits,
                r.relative
            );
        }
    }

    #[test]
    fn calibration_round_trip_is_self_consistent() {
        // Fit once, synthesize a table from the fit, re-fit: the constants in
        // the documented gauge must come back to 1e-6 relative.
        let timing = TimingParams::default();
        let first = calibrate_energy(&reference_cal_points(), &timing).unwrap();
        let synth: Vec<CalPoint> = reference_cal_points()
            .iter()
            .map(|p| CalPoint {
                tops_per_w: model_tops_per_w(p.rows, p.cols, p.adc_mux, p.bits, &timing, &first.params).unwrap(),
                ..*p
            })
            .collect();
        let second = calibrate_energy(&synth, &timing).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * a.abs().max(b.abs());
        for bits in [4, 6, 8] {
            assert!(close(first.params.e_dac.get(bits).unwrap(), second.params.e_dac.get(bits).unwrap()));
            assert!(close(first.params.e_adc.get(bits).unwrap(), second.params.e_adc.get(bits).unwrap()));
        }
        assert!(close(first.params.p_static, second.params.p_static));
    }

    #[test]
    fn calibration_recovers_planted_powers_for_any_params() {
        // Arbitrary planted constants (including nonzero e_fp) are not
        // individually identifiable, but the fitted model must reproduce every
        // planted power essentially exactly.
        let timing = TimingParams::default();
        let planted = EnergyParams {
            e_dac: BitsMap { b4: 2e-12, b6: 5e-12, b8: 11e-12 },
            e_adc: BitsMap { b4: 7e-12, b6: 9e-12, b8: 21e-12 },
            e_fp: 3e-13,
            e_sram: 0.0,
            p_static: 0.08,
        };
        let synth: Vec<CalPoint> = reference_cal_points()
            .iter()
            .map(|p| CalPoint {
                tops_per_w: model_tops_per_w(p.rows, p.cols, p.adc_mux, p.bits, &timing, &planted).unwrap(),
                ..*p
            })
            .collect();
        let report = calibrate_energy(&synth, &timing).unwrap();
        for r in &report.residuals {
            assert!(r.relative.abs() < 1e-9, "residual {}", r.relative);
        }
        assert!((report.params.p_static - planted.p_static).abs() < 1e-9);
    }

    #[test]
    fn default_energy_params_match_reference_fit() {
        let timing = TimingParams::default();
        let report = calibrate_energy(&reference_cal_points(), &timing).unwrap();
        let d = EnergyParams::default();
        for bits in [4u32, 6, 8] {
            let fit = report.params.e_dac.get(bits).unwrap();
            let def = d.e_dac.get(bits).unwrap();
            assert!((fit - def).abs() < 1e-12 * fit.abs().max(1e-15), "bits {bits}: {fit:e} vs {def:e}");
        }
        assert!((report.params.p_static - d.p_static).abs() < 1e-9);
    }

    #[test]
    fn constant_power_table_degenerates_to_static_only() {
        let timing = TimingParams::default();
        let target_power = 0.25;
        let synth: Vec<CalPoint> = reference_cal_points()
            .iter()
            .map(|p| {
                let cfg = CrossbarConfig { rows: p.rows, cols: p.cols, adc_mux: p.adc_mux, fp_units: 32, max_tiles: None };
                let tops = peak_throughput(&cfg, p.bits, &timing).unwrap();
                CalPoint { tops_per_w: tops / target_power, ..*p }
            })
            .collect();
        let report = calibrate_energy(&synth, &timing).unwrap();
        assert!((report.params.p_static - target_power).abs() < 1e-9);
        for (_, x) in report.cycle_energy.iter() {
            assert!(x.abs() < 1e-15, "cycle energy should vanish, got {x:e}");
        }
    }

    #[test]
    fn single_mux_scheme_is_rank_deficient() {
        let timing = TimingParams::default();
        let mut pts = Vec::new();
        for bits in [4u32, 6, 8] {
            for _ in 0..3 {
                pts.push(CalPoint { rows: 1024, cols: 512, adc_mux: AdcMux::M1, bits, tops_per_w: 100.0 });
            }
        }
        assert!(matches!(calibrate_energy(&pts, &timing), Err(Error::Calibration(_))));
    }

    #[test]
    fn mean_tops_identical_across_schemes_when_all_layers_fit_one_phase() {
        // Every layer at or below 128 columns converts in one phase on all
        // schemes, so throughput cannot depend on the mux factor.
        let mut a = LayerSpec::dense(900, 128);
        a.weights = Some(Tensor::new(vec![128, 900], vec![0.5; 900 * 128]).unwrap());
        let mut b = LayerSpec::dense(128, 96);
        b.weights = Some(Tensor::new(vec![96, 128], vec![0.5; 128 * 96]).unwrap());
        let net = NetworkSpec::new(vec![900], 96, vec![a, b]);
        let t = TimingParams::default();
        let mut tops = Vec::new();
        for mux in [AdcMux::M1, AdcMux::M2, AdcMux::M4] {
            let plan = place(&net, &cfg(mux)).unwrap();
            let r = model_perf(&plan, &net, 8, &t, &EnergyParams::default(), &AreaParams::default()).unwrap();
            tops.push(r.mean_tops);
        }
        assert!((tops[0] - tops[1]).abs() < 1e-12 && (tops[1] - tops[2]).abs() < 1e-12);
    }
}
