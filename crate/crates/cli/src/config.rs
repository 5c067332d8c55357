//! TOML configuration shared by all subcommands. Sections mirror the library
//! parameter types; command-line flags override file values so sweep configs
//! stay diffable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cimflow_core::error::{Error, Result};
use cimflow_core::mapper::{AdcMux, CrossbarConfig};
use cimflow_core::net::NetworkSpec;
use cimflow_core::pcm::NoiseParams;
use cimflow_core::perf::{AreaParams, EnergyParams, TimingParams};
use cimflow_core::sim::{DeploymentTimes, EvalProtocol};
use cimflow_core::train::{Dataset, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ToolConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub dataset: Option<DatasetSection>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub crossbar: Option<CrossbarSection>,
    #[serde(default)]
    pub timing: Option<TimingParams>,
    #[serde(default)]
    pub energy: Option<EnergySection>,
    #[serde(default)]
    pub noise: Option<NoiseParams>,
    #[serde(default)]
    pub eval: Option<EvalSection>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// Path to a network description JSON (structure, optionally weights).
    #[serde(default)]
    pub spec: Option<PathBuf>,
    /// Path to a checkpoint directory produced by `train`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSection {
    /// Bundled 4-class 16x16 pattern generator.
    Patterns16 {
        n_train_per_class: usize,
        n_test_per_class: usize,
        #[serde(default = "default_noise_std")]
        noise_std: f64,
        #[serde(default = "default_shift")]
        max_shift: usize,
    },
    /// Gaussian class blobs in feature space.
    Blobs {
        classes: usize,
        features: usize,
        n_train_per_class: usize,
        n_test_per_class: usize,
        #[serde(default = "default_spread")]
        spread: f64,
    },
    /// User tensors in the flat binary format.
    Tensors {
        train_inputs: PathBuf,
        train_labels: PathBuf,
        test_inputs: PathBuf,
        test_labels: PathBuf,
    },
}

fn default_noise_std() -> f64 {
    0.35
}

fn default_shift() -> usize {
    2
}

fn default_spread() -> f64 {
    0.3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossbarSection {
    #[serde(default = "default_rows")]
    pub rows: usize,
    #[serde(default = "default_cols")]
    pub cols: usize,
    #[serde(default = "default_mux")]
    pub adc_mux: String,
    #[serde(default = "default_fp_units")]
    pub fp_units: usize,
    /// 0 means unlimited tiles.
    #[serde(default = "default_max_tiles")]
    pub max_tiles: usize,
}

fn default_rows() -> usize {
    1024
}
fn default_cols() -> usize {
    512
}
fn default_mux() -> String {
    "M4".into()
}
fn default_fp_units() -> usize {
    32
}
fn default_max_tiles() -> usize {
    1
}

impl Default for CrossbarSection {
    fn default() -> Self {
        CrossbarSection {
            rows: default_rows(),
            cols: default_cols(),
            adc_mux: default_mux(),
            fp_units: default_fp_units(),
            max_tiles: default_max_tiles(),
        }
    }
}

impl CrossbarSection {
    pub fn to_config(&self) -> Result<CrossbarConfig> {
        let cfg = CrossbarConfig {
            rows: self.rows,
            cols: self.cols,
            adc_mux: AdcMux::parse(&self.adc_mux)?,
            fp_units: self.fp_units,
            max_tiles: if self.max_tiles == 0 { None } else { Some(self.max_tiles) },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EnergySection {
    /// Explicit constants (overrides calibration).
    #[serde(default)]
    pub params: Option<EnergyParams>,
    /// CSV of full-utilization efficiency points to calibrate from:
    /// header `scheme,bits,tops_per_w`.
    #[serde(default)]
    pub calibration_table: Option<PathBuf>,
    #[serde(default)]
    pub area: Option<AreaParams>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_runs")]
    pub n_runs: usize,
    #[serde(default)]
    pub checkpoints: Option<Vec<f64>>,
    #[serde(default = "default_true")]
    pub gdc: bool,
}

fn default_runs() -> usize {
    25
}
fn default_true() -> bool {
    true
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { n_runs: default_runs(), checkpoints: None, gdc: true }
    }
}

impl EvalSection {
    pub fn times(&self) -> DeploymentTimes {
        match &self.checkpoints {
            Some(c) => DeploymentTimes { checkpoints: c.clone() },
            None => DeploymentTimes::default(),
        }
    }

    pub fn protocol(&self) -> EvalProtocol {
        EvalProtocol { n_runs: self.n_runs, gdc: self.gdc, ..EvalProtocol::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "default_schemes")]
    pub schemes: Vec<String>,
    #[serde(default = "default_bits")]
    pub bits: Vec<u32>,
    /// Tile geometries as `ROWSxCOLS` strings.
    #[serde(default = "default_tiles")]
    pub tiles: Vec<String>,
    #[serde(default = "default_fp_list")]
    pub fp_units: Vec<usize>,
}

fn default_schemes() -> Vec<String> {
    vec!["M1".into(), "M2".into(), "M4".into()]
}
fn default_bits() -> Vec<u32> {
    vec![4, 6, 8]
}
fn default_tiles() -> Vec<String> {
    vec!["1024x512".into()]
}
fn default_fp_list() -> Vec<usize> {
    vec![32]
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            schemes: default_schemes(),
            bits: default_bits(),
            tiles: default_tiles(),
            fp_units: default_fp_list(),
        }
    }
}

pub fn parse_tile(s: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    if parts.len() != 2 {
        return Err(Error::Config(format!("tile '{s}' must look like 1024x512")));
    }
    let rows = parts[0]
        .parse()
        .map_err(|_| Error::Config(format!("bad tile rows in '{s}'")))?;
    let cols = parts[1]
        .parse()
        .map_err(|_| Error::Config(format!("bad tile cols in '{s}'")))?;
    Ok((rows, cols))
}

impl ToolConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("config parse error: {e}")))
    }

    /// Resolve the network description: checkpoint takes precedence.
    pub fn load_network(&self) -> Result<NetworkSpec> {
        if let Some(dir) = &self.network.checkpoint {
            if !dir.exists() {
                return Err(Error::Config(format!("checkpoint directory not found: {}", dir.display())));
            }
            return cimflow_core::train::load_checkpoint(dir);
        }
        if let Some(spec) = &self.network.spec {
            if !spec.exists() {
                return Err(Error::Config(format!("network spec not found: {}", spec.display())));
            }
            let net = NetworkSpec::from_json(&std::fs::read_to_string(spec)?)?;
            net.validate()?;
            return Ok(net);
        }
        Err(Error::Config("config names neither network.spec nor network.checkpoint".into()))
    }

    pub fn load_datasets(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        use cimflow_core::pcm::derive_seed;
        use cimflow_core::train::{gaussian_blobs, pattern_set_16x16};
        let Some(section) = &self.dataset else {
            return Err(Error::Config("config has no [dataset] section".into()));
        };
        match section {
            DatasetSection::Patterns16 { n_train_per_class, n_test_per_class, noise_std, max_shift } => Ok((
                pattern_set_16x16(*n_train_per_class, *noise_std, *max_shift, derive_seed(seed, 100)),
                pattern_set_16x16(*n_test_per_class, *noise_std, *max_shift, derive_seed(seed, 101)),
            )),
            DatasetSection::Blobs { classes, features, n_train_per_class, n_test_per_class, spread } => Ok((
                gaussian_blobs(*classes, *features, *n_train_per_class, *spread, derive_seed(seed, 100)),
                gaussian_blobs(*classes, *features, *n_test_per_class, *spread, derive_seed(seed, 101)),
            )),
            DatasetSection::Tensors { train_inputs, train_labels, test_inputs, test_labels } => {
                for p in [train_inputs, train_labels, test_inputs, test_labels] {
                    if !p.exists() {
                        return Err(Error::Config(format!("dataset file not found: {}", p.display())));
                    }
                }
                Ok((Dataset::load(train_inputs, train_labels)?, Dataset::load(test_inputs, test_labels)?))
            }
        }
    }

    pub fn timing(&self) -> TimingParams {
        self.timing.clone().unwrap_or_default()
    }

    pub fn noise(&self) -> NoiseParams {
        self.noise.clone().unwrap_or_default()
    }

    pub fn area(&self) -> AreaParams {
        self.energy
            .as_ref()
            .and_then(|e| e.area.clone())
            .unwrap_or_default()
    }
}
