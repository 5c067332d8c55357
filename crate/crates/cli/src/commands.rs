//! Subcommand implementations. Every command is deterministic given an
//! identical config and seed; output files are written atomically
//! (temp-then-rename) so interrupted runs never leave half-written artifacts.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use cimflow_core::error::{Error, Result};
use cimflow_core::mapper::{place, AdcMux, CrossbarConfig};
use cimflow_core::net::NetworkSpec;
use cimflow_core::perf::{
    calibrate_energy, model_perf, model_tops_per_w, peak_throughput, CalPoint, EnergyParams, PerfReport,
};
use cimflow_core::sim::evaluate;
use cimflow_core::train::{new_trainer, save_checkpoint, stage1_train, stage2_train};

use crate::config::{parse_tile, SweepSection, ToolConfig};

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn out_dir(cfg: &ToolConfig, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn seed_of(cfg: &ToolConfig, flag: Option<u64>) -> u64 {
    flag.or(cfg.seed).unwrap_or(42)
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

pub fn cmd_train(cfg: &ToolConfig, seed_flag: Option<u64>, out_flag: &Option<PathBuf>) -> Result<()> {
    let seed = seed_of(cfg, seed_flag);
    let out = out_dir(cfg, out_flag);
    let net = cfg.load_network()?;
    let (train_data, test_data) = cfg.load_datasets(seed)?;
    let mut train_cfg = cfg.train.clone().unwrap_or_default();
    train_cfg.seed = seed;

    let mut trainer = new_trainer(&net, &train_cfg)?;
    stage1_train(&mut trainer, &train_data, &train_cfg)?;
    let stage1_acc = cimflow_core::train::accuracy(&mut trainer, &test_data, cimflow_core::train::FwdMode::eval_fp())?;
    let model = stage2_train(&mut trainer, &train_data, &train_cfg)?;
    let final_acc =
        cimflow_core::train::accuracy(&mut trainer, &test_data, cimflow_core::train::FwdMode::eval_quantized())?;

    let ckpt = out.join("checkpoint");
    std::fs::create_dir_all(&ckpt)?;
    save_checkpoint(&ckpt, &model)?;
    println!("checkpoint written to {}", ckpt.display());
    println!("stage-1 test accuracy (fp): {stage1_acc:.4}");
    println!("stage-2 test accuracy (quantized, noiseless): {final_acc:.4}");
    println!("trained ADC gain S = {:.6}", model.net.converters.global_s.unwrap_or(1.0));
    Ok(())
}

fn load_plan_inputs(cfg: &ToolConfig) -> Result<(NetworkSpec, CrossbarConfig)> {
    let net = cfg.load_network()?;
    let xbar = cfg.crossbar.clone().unwrap_or_default().to_config()?;
    Ok((net, xbar))
}

pub fn cmd_map(
    cfg: &ToolConfig,
    out_flag: &Option<PathBuf>,
    scheme: Option<String>,
    tile: Option<String>,
) -> Result<()> {
    let out = out_dir(cfg, out_flag);
    let (net, mut xbar) = load_plan_inputs(cfg)?;
    if let Some(s) = scheme {
        xbar.adc_mux = AdcMux::parse(&s)?;
    }
    if let Some(t) = tile {
        let (rows, cols) = parse_tile(&t)?;
        xbar.rows = rows;
        xbar.cols = cols;
        if rows != 1024 || cols != 512 {
            xbar.max_tiles = None;
        }
        xbar.validate()?;
    }
    let plan = place(&net, &xbar)?;
    write_atomic(&out.join("plan.json"), plan.to_json()?.as_bytes())?;
    write_atomic(&out.join("occupancy.txt"), plan.ascii_map(64, 24).as_bytes())?;
    println!("tiles used: {}", plan.tiles_used);
    println!("utilization: {:.4}", plan.utilization);
    for lu in &plan.per_layer {
        println!(
            "layer {:>2}: occupied {:>8} cells, live {:>8}, effective utilization {:.4} (1/{:.0})",
            lu.layer_id,
            lu.occupied_cells,
            lu.nonzero_cells,
            lu.effective,
            if lu.effective > 0.0 { 1.0 / lu.effective } else { f64::INFINITY }
        );
    }
    println!("plan written to {}", out.join("plan.json").display());
    Ok(())
}

pub fn cmd_simulate(cfg: &ToolConfig, seed_flag: Option<u64>, out_flag: &Option<PathBuf>) -> Result<()> {
    let seed = seed_of(cfg, seed_flag);
    let out = out_dir(cfg, out_flag);
    let (net, xbar) = load_plan_inputs(cfg)?;
    if net.converters.per_layer.is_empty() {
        return Err(Error::Config(
            "network has no converter ranges; run `train` first or attach ranges to the spec".into(),
        ));
    }
    let (_, test_data) = cfg.load_datasets(seed)?;
    let plan = place(&net, &xbar)?;
    let eval = cfg.eval.clone().unwrap_or_default();
    let noise = cfg.noise();
    let results = evaluate(
        &net,
        &plan,
        &noise,
        (&test_data.inputs, &test_data.labels),
        &eval.times(),
        &eval.protocol(),
        seed,
    )?;

    let mut csv = csv::WriterBuilder::new().from_writer(Vec::new());
    csv.write_record(["run", "time_s", "accuracy"]).map_err(csv_err)?;
    for r in &results.records {
        csv.write_record(&[r.run.to_string(), format!("{}", r.time_s), format!("{}", r.accuracy)])
            .map_err(csv_err)?;
    }
    let bytes = csv.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&out.join("accuracy.csv"), &bytes)?;
    write_atomic(&out.join("accuracy_summary.json"), &json_bytes(&results.summary)?)?;
    for s in &results.summary {
        println!("t = {:>12.0} s : accuracy {:.4} +/- {:.4}", s.time_s, s.mean, s.std);
    }
    println!("results written to {}", out.join("accuracy.csv").display());
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv write error: {e}"))
}

fn resolve_energy(cfg: &ToolConfig, timing: &cimflow_core::perf::TimingParams) -> Result<EnergyParams> {
    if let Some(section) = &cfg.energy {
        if let Some(p) = &section.params {
            return Ok(p.clone());
        }
        if let Some(table) = &section.calibration_table {
            let points = read_cal_table(table, cfg)?;
            return Ok(calibrate_energy(&points, timing)?.params);
        }
    }
    Ok(EnergyParams::default())
}

fn read_cal_table(path: &Path, cfg: &ToolConfig) -> Result<Vec<CalPoint>> {
    if !path.exists() {
        return Err(Error::Config(format!("calibration table not found: {}", path.display())));
    }
    let xbar = cfg.crossbar.clone().unwrap_or_default();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Config(e.to_string()))?;
    let mut points = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Config(e.to_string()))?;
        if row.len() != 3 {
            return Err(Error::Config("calibration table rows must be scheme,bits,tops_per_w".into()));
        }
        points.push(CalPoint {
            rows: xbar.rows,
            cols: xbar.cols,
            adc_mux: AdcMux::parse(&row[0])?,
            bits: row[1].parse().map_err(|_| Error::Config(format!("bad bits value '{}'", &row[1])))?,
            tops_per_w: row[2]
                .parse()
                .map_err(|_| Error::Config(format!("bad tops_per_w value '{}'", &row[2])))?,
        });
    }
    Ok(points)
}

#[derive(Serialize)]
struct PerfSummary {
    scheme: String,
    bits: u32,
    rows: usize,
    cols: usize,
    fp_units: usize,
    tiles_used: usize,
    utilization: f64,
    peak_tops: f64,
    peak_tops_per_w: f64,
    mean_tops: f64,
    mean_tops_per_w: f64,
    inferences_per_s: f64,
    energy_per_inference_j: f64,
    latency_per_inference_s: f64,
    area_total_mm2: f64,
}

fn summarize(report: &PerfReport, cfg_x: &CrossbarConfig, timing: &cimflow_core::perf::TimingParams, energy: &EnergyParams) -> Result<PerfSummary> {
    Ok(PerfSummary {
        scheme: cfg_x.adc_mux.to_string(),
        bits: report.bits,
        rows: report.rows,
        cols: report.cols,
        fp_units: report.fp_units,
        tiles_used: 0,
        utilization: report.utilization,
        peak_tops: peak_throughput(cfg_x, report.bits, timing)?,
        peak_tops_per_w: model_tops_per_w(cfg_x.rows, cfg_x.cols, cfg_x.adc_mux, report.bits, timing, energy)?,
        mean_tops: report.mean_tops,
        mean_tops_per_w: report.mean_tops_per_w,
        inferences_per_s: report.inferences_per_s,
        energy_per_inference_j: report.energy_per_inference_j,
        latency_per_inference_s: report.latency_per_inference_s,
        area_total_mm2: report.area.total_mm2,
    })
}

fn perf_csv_rows(csv: &mut csv::Writer<Vec<u8>>, scheme: &str, report: &PerfReport) -> Result<()> {
    for l in &report.per_layer {
        csv.write_record(&[
            scheme.to_string(),
            report.bits.to_string(),
            format!("{}x{}", report.rows, report.cols),
            report.fp_units.to_string(),
            l.layer_id.to_string(),
            format!("{}", l.ops),
            l.n_vectors.to_string(),
            l.phases.to_string(),
            format!("{}", l.latency_s),
            format!("{}", l.energy_j),
            format!("{}", l.tops),
            format!("{}", l.tops_per_w),
        ])
        .map_err(csv_err)?;
    }
    csv.write_record(&[
        scheme.to_string(),
        report.bits.to_string(),
        format!("{}x{}", report.rows, report.cols),
        report.fp_units.to_string(),
        "model".to_string(),
        format!("{}", report.per_layer.iter().map(|l| l.ops).sum::<f64>()),
        "".to_string(),
        "".to_string(),
        format!("{}", report.latency_per_inference_s),
        format!("{}", report.energy_per_inference_j),
        format!("{}", report.mean_tops),
        format!("{}", report.mean_tops_per_w),
    ])
    .map_err(csv_err)
}

const PERF_HEADER: [&str; 12] = [
    "scheme", "bits", "tile", "fp_units", "layer", "ops", "n_vectors", "phases", "latency_s", "energy_j", "tops",
    "tops_per_w",
];

pub fn cmd_perf(cfg: &ToolConfig, out_flag: &Option<PathBuf>, bits_flag: Option<u32>, scheme: Option<String>) -> Result<()> {
    let out = out_dir(cfg, out_flag);
    let (net, mut xbar) = load_plan_inputs(cfg)?;
    if let Some(s) = scheme {
        xbar.adc_mux = AdcMux::parse(&s)?;
    }
    let bits = bits_flag.unwrap_or(8);
    let timing = cfg.timing();
    let energy = resolve_energy(cfg, &timing)?;
    let area = cfg.area();
    let plan = place(&net, &xbar)?;
    let report = model_perf(&plan, &net, bits, &timing, &energy, &area)?;

    let mut csv = csv::WriterBuilder::new().from_writer(Vec::new());
    csv.write_record(PERF_HEADER).map_err(csv_err)?;
    perf_csv_rows(&mut csv, &xbar.adc_mux.to_string(), &report)?;
    let bytes = csv.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&out.join("perf.csv"), &bytes)?;

    let mut summary = summarize(&report, &xbar, &timing, &energy)?;
    summary.tiles_used = plan.tiles_used;
    write_atomic(&out.join("perf_summary.json"), &json_bytes(&summary)?)?;
    println!(
        "{} {}b {}x{}: peak {:.2} TOPS @ {:.2} TOPS/W | model {:.4} TOPS @ {:.2} TOPS/W, {:.0} inf/s, {:.3e} J/inf, area {:.2} mm2",
        xbar.adc_mux,
        bits,
        xbar.rows,
        xbar.cols,
        summary.peak_tops,
        summary.peak_tops_per_w,
        summary.mean_tops,
        summary.mean_tops_per_w,
        summary.inferences_per_s,
        summary.energy_per_inference_j,
        summary.area_total_mm2,
    );
    println!("report written to {}", out.join("perf.csv").display());
    Ok(())
}

pub fn cmd_sweep(cfg: &ToolConfig, out_flag: &Option<PathBuf>, jobs: usize) -> Result<()> {
    let out = out_dir(cfg, out_flag);
    let net = cfg.load_network()?;
    let sweep: SweepSection = cfg.sweep.clone().unwrap_or_default();
    let base = cfg.crossbar.clone().unwrap_or_default();
    let timing = cfg.timing();
    let energy = resolve_energy(cfg, &timing)?;
    let area = cfg.area();

    let mut configs = Vec::new();
    for tile in &sweep.tiles {
        let (rows, cols) = parse_tile(tile)?;
        for scheme in &sweep.schemes {
            let mux = AdcMux::parse(scheme)?;
            if cols % mux.factor() != 0 {
                continue;
            }
            for &fp in &sweep.fp_units {
                for &bits in &sweep.bits {
                    configs.push((rows, cols, mux, fp, bits));
                }
            }
        }
    }

    let run_one = |&(rows, cols, mux, fp, bits): &(usize, usize, AdcMux, usize, u32)| -> Result<(PerfReport, PerfSummary)> {
        let xbar = CrossbarConfig {
            rows,
            cols,
            adc_mux: mux,
            fp_units: fp,
            max_tiles: if (rows, cols) == (base.rows, base.cols) && base.max_tiles != 0 {
                Some(base.max_tiles)
            } else {
                None
            },
        };
        let plan = place(&net, &xbar)?;
        let report = model_perf(&plan, &net, bits, &timing, &energy, &area)?;
        let mut summary = summarize(&report, &xbar, &timing, &energy)?;
        summary.tiles_used = plan.tiles_used;
        Ok((report, summary))
    };

    let results: Vec<Result<(PerfReport, PerfSummary)>> = if jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| configs.par_iter().map(run_one).collect())
    } else {
        configs.iter().map(run_one).collect()
    };

    let mut csv = csv::WriterBuilder::new().from_writer(Vec::new());
    csv.write_record(PERF_HEADER).map_err(csv_err)?;
    let mut summaries = Vec::new();
    for (cfg_tuple, result) in configs.iter().zip(results) {
        let (report, summary) = result?;
        perf_csv_rows(&mut csv, &cfg_tuple.2.to_string(), &report)?;
        summaries.push(summary);
    }
    let bytes = csv.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&out.join("sweep.csv"), &bytes)?;
    write_atomic(&out.join("sweep_summary.json"), &json_bytes(&summaries)?)?;
    println!("swept {} configurations -> {}", summaries.len(), out.join("sweep.csv").display());
    Ok(())
}

pub fn cmd_calibrate(cfg: &ToolConfig, out_flag: &Option<PathBuf>, table_flag: Option<PathBuf>) -> Result<()> {
    let out = out_dir(cfg, out_flag);
    let table_path = table_flag
        .or_else(|| cfg.energy.as_ref().and_then(|e| e.calibration_table.clone()))
        .ok_or_else(|| Error::Config("no calibration table given (flag --table or [energy].calibration_table)".into()))?;
    let points = read_cal_table(&table_path, cfg)?;
    let timing = cfg.timing();
    let report = calibrate_energy(&points, &timing)?;
    write_atomic(&out.join("energy.json"), &json_bytes(&report)?)?;
    let worst = report
        .residuals
        .iter()
        .map(|r| r.relative.abs())
        .fold(0.0f64, f64::max);
    println!(
        "fitted {} points, worst residual {:.3}%, p_static {:.4} W, condition {:.2}",
        report.residuals.len(),
        worst * 100.0,
        report.params.p_static,
        report.condition_estimate
    );
    println!("constants written to {}", out.join("energy.json").display());
    Ok(())
}

pub fn cmd_report(input: &Path) -> Result<()> {
    if !input.exists() {
        return Err(Error::Config(format!("report input not found: {}", input.display())));
    }
    let text = std::fs::read_to_string(input)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    print_value("", &value);
    Ok(())
}

fn print_value(prefix: &str, v: &serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                print_value(&key, v);
            }
        }
        serde_json::Value::Array(items) => {
            for (i, item) in items.iter().enumerate() {
                print_value(&format!("{prefix}[{i}]"), item);
            }
        }
        other => println!("{prefix:<48} {other}"),
    }
}

/// Self-check against the golden tables shipped with the library; used by the
/// `report --golden` convenience flag.
pub fn golden_summary() -> Result<String> {
    use cimflow_core::fixtures::{check, fixture_path, GoldenTable};
    let timing = cimflow_core::perf::TimingParams::default();
    let table = GoldenTable::load(&fixture_path("peak_tops.json"))?;
    let mut computed = BTreeMap::new();
    for row in &table.rows {
        let parts: Vec<&str> = row.key.split('/').collect();
        let (rows, cols) = parse_tile(parts[0])?;
        let mux = AdcMux::parse(parts[1])?;
        let bits: u32 = parts[2].trim_end_matches('b').parse().map_err(|_| Error::Config("bad bits".into()))?;
        let cfg_x = CrossbarConfig { rows, cols, adc_mux: mux, fp_units: 32, max_tiles: None };
        computed.insert(row.key.clone(), peak_throughput(&cfg_x, bits, &timing)?);
    }
    let report = check(&table, &computed)?;
    Ok(format!("{report}"))
}
