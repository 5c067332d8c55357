//! Statistical PCM device model: programming noise, conductance drift, read
//! noise and per-layer global drift compensation.
//!
//! Devices are stored as normalized conductances `g = G / g_max` in [0, 1].
//! The programming-noise polynomial and the read-noise `Q` factor are
//! evaluated on the normalized value with their outputs divided by `g_max`
//! expressed in microsiemens (the published coefficients are microsiemens-
//! valued at normalized argument). `SigmaArgMode::MicroSiemens` switches to
//! evaluating the polynomial on `G` in microsiemens instead.

use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum SigmaArgMode {
    /// Evaluate the noise polynomial / Q factor on g in [0, 1] (default).
    #[default]
    Normalized,
    /// Evaluate on G = g * g_max in microsiemens.
    MicroSiemens,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseParams {
    /// Programming-noise polynomial (a2, a1, a0), microsiemens-valued.
    pub prog_poly: (f64, f64, f64),
    /// Programming reference time, seconds.
    pub t_c: f64,
    /// Read reference time, seconds.
    pub t_r: f64,
    pub q_coeff: f64,
    pub q_exp: f64,
    pub q_cap: f64,
    /// Drift coefficient distribution. No published values exist for the mean
    /// and spread; these defaults are placeholders and should be treated as
    /// configuration, not as characterization data.
    pub drift_nu_mean: f64,
    pub drift_nu_std: f64,
    /// Maximum device conductance, siemens.
    pub g_max: f64,
    #[serde(default)]
    pub sigma_arg_mode: SigmaArgMode,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            prog_poly: (-1.1731, 1.9650, 0.2635),
            t_c: 25.0,
            t_r: 250e-9,
            q_coeff: 0.0088,
            q_exp: 0.65,
            q_cap: 0.2,
            drift_nu_mean: 0.06,
            drift_nu_std: 0.01,
            g_max: 25e-6,
            sigma_arg_mode: SigmaArgMode::Normalized,
        }
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_c > 0.0 && self.t_r > 0.0) {
            return Err(Error::Config("reference times must be positive".into()));
        }
        if !(self.q_cap > 0.0 && self.q_cap <= 1.0) {
            return Err(Error::Config(format!("q_cap must be in (0, 1], got {}", self.q_cap)));
        }
        if !(self.g_max > 0.0) {
            return Err(Error::Config("g_max must be positive".into()));
        }
        if self.drift_nu_std < 0.0 || self.drift_nu_mean < 0.0 {
            return Err(Error::Config("drift coefficient distribution must be non-negative".into()));
        }
        Ok(())
    }

    fn g_max_us(&self) -> f64 {
        self.g_max * 1e6
    }

    /// Raw programming-noise polynomial `max(a2 g^2 + a1 g + a0, 0)` in
    /// microsiemens, evaluated per `sigma_arg_mode`.
    pub fn sigma_prog_us(&self, g_target: f64) -> f64 {
        let g = match self.sigma_arg_mode {
            SigmaArgMode::Normalized => g_target,
            SigmaArgMode::MicroSiemens => g_target * self.g_max_us(),
        };
        let (a2, a1, a0) = self.prog_poly;
        (a2 * g * g + a1 * g + a0).max(0.0)
    }

    /// Programming-noise standard deviation in normalized conductance units.
    pub fn sigma_prog(&self, g_target: f64) -> f64 {
        self.sigma_prog_us(g_target) / self.g_max_us()
    }

    /// Read-noise prefactor `Q = min(q_coeff / g_target^q_exp, q_cap)`.
    /// `g_target = 0` hits the cap (the ratio diverges as g -> 0).
    pub fn q_factor(&self, g_target: f64) -> f64 {
        let g = match self.sigma_arg_mode {
            SigmaArgMode::Normalized => g_target,
            SigmaArgMode::MicroSiemens => g_target * self.g_max_us(),
        };
        if g <= 0.0 {
            return self.q_cap;
        }
        (self.q_coeff / g.powf(self.q_exp)).min(self.q_cap)
    }

    /// Instantaneous read-noise std `g_drifted * Q(g_target) * sqrt(ln((t + t_r)/t_r))`.
    pub fn read_sigma(&self, g_drifted: f64, g_target: f64, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        g_drifted * self.q_factor(g_target) * ((t + self.t_r) / self.t_r).ln().sqrt()
    }

    /// Power-law drift `g * (t / t_c)^(-nu)`. Requires `t >= t_c`.
    pub fn drift(&self, g_programmed: f64, nu: f64, t: f64) -> Result<f64> {
        if t < self.t_c {
            return Err(Error::Config(format!(
                "drift time {t} s precedes programming reference {} s",
                self.t_c
            )));
        }
        Ok(g_programmed * (t / self.t_c).powf(-nu))
    }
}

/// Differential conductance arrays for one placed layer, in crossbar
/// orientation: `rows` are DAC inputs, `cols` are ADC outputs. Nonnegative
/// weights live in the positive array, magnitudes of negative weights in the
/// negative array; the complementary device of each pair is zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConductanceState {
    pub rows: usize,
    pub cols: usize,
    pub g_target_pos: Vec<f64>,
    pub g_target_neg: Vec<f64>,
    pub g_programmed_pos: Vec<f64>,
    pub g_programmed_neg: Vec<f64>,
    pub nu_pos: Vec<f64>,
    pub nu_neg: Vec<f64>,
}

impl ConductanceState {
    pub fn from_targets(rows: usize, cols: usize, pos: Vec<f64>, neg: Vec<f64>) -> Result<Self> {
        let n = rows * cols;
        if pos.len() != n || neg.len() != n {
            return Err(Error::dimension("conductance targets", n, format!("{}/{}", pos.len(), neg.len())));
        }
        if pos.iter().chain(neg.iter()).any(|&g| !(0.0..=1.0).contains(&g)) {
            return Err(Error::Config("normalized targets must lie in [0, 1]".into()));
        }
        Ok(ConductanceState {
            rows,
            cols,
            g_programmed_pos: vec![0.0; n],
            g_programmed_neg: vec![0.0; n],
            nu_pos: vec![0.0; n],
            nu_neg: vec![0.0; n],
            g_target_pos: pos,
            g_target_neg: neg,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differential target matrix `g+ - g-` (the noiseless normalized weights).
    pub fn target_diff(&self) -> Vec<f64> {
        self.g_target_pos
            .iter()
            .zip(&self.g_target_neg)
            .map(|(p, n)| p - n)
            .collect()
    }
}

/// Build a deterministic RNG for a (seed, stream) pair. Streams keep the
/// per-layer / per-run draws independent while remaining reproducible.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mix a master seed with an index into a derived sub-seed (splitmix64 step).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Apply programming noise `g_p = g_t + N(0, sigma_prog(g_t))` to every device
/// and sample per-device drift coefficients. Reproducible from the seed.
pub fn program(state: &mut ConductanceState, params: &NoiseParams, seed: u64) -> Result<()> {
    params.validate()?;
    let mut rng = seeded_rng(seed, 0);
    let unit = Normal::new(0.0, 1.0).map_err(|e| Error::Calibration(e.to_string()))?;
    let nu_dist = if params.drift_nu_std > 0.0 {
        Some(Normal::new(params.drift_nu_mean, params.drift_nu_std).map_err(|e| Error::Calibration(e.to_string()))?)
    } else {
        None
    };

    let mut run = |targets: &[f64], programmed: &mut [f64], nu: &mut [f64]| {
        for i in 0..targets.len() {
            let sigma = params.sigma_prog(targets[i]);
            let noise: f64 = unit.sample(&mut rng) * sigma;
            programmed[i] = targets[i] + noise;
            nu[i] = match &nu_dist {
                // Truncated at zero; with the default (0.06, 0.01) parameters a
                // negative draw is a 6-sigma event.
                Some(d) => d.sample(&mut rng).max(0.0),
                None => params.drift_nu_mean,
            };
        }
    };
    let (pos_t, neg_t) = (state.g_target_pos.clone(), state.g_target_neg.clone());
    run(&pos_t, &mut state.g_programmed_pos, &mut state.nu_pos);
    run(&neg_t, &mut state.g_programmed_neg, &mut state.nu_neg);
    Ok(())
}

/// Drifted conductances of both arrays at time `t` (deterministic given nu).
pub fn drift_state(state: &ConductanceState, params: &NoiseParams, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let pos = state
        .g_programmed_pos
        .iter()
        .zip(&state.nu_pos)
        .map(|(&g, &nu)| params.drift(g, nu, t))
        .collect::<Result<Vec<_>>>()?;
    let neg = state
        .g_programmed_neg
        .iter()
        .zip(&state.nu_neg)
        .map(|(&g, &nu)| params.drift(g, nu, t))
        .collect::<Result<Vec<_>>>()?;
    Ok((pos, neg))
}

/// Effective conductances at time `t`: drifted values plus one fresh draw of
/// instantaneous read noise per device.
pub fn read(
    state: &ConductanceState,
    params: &NoiseParams,
    t: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (mut pos, mut neg) = drift_state(state, params, t)?;
    let unit = Normal::new(0.0, 1.0).map_err(|e| Error::Calibration(e.to_string()))?;
    let elapsed = t - params.t_c;
    for (g, &gt) in pos.iter_mut().zip(&state.g_target_pos) {
        let sigma = params.read_sigma(*g, gt, elapsed.max(0.0));
        *g += unit.sample(rng) * sigma;
    }
    for (g, &gt) in neg.iter_mut().zip(&state.g_target_neg) {
        let sigma = params.read_sigma(*g, gt, elapsed.max(0.0));
        *g += unit.sample(rng) * sigma;
    }
    Ok((pos, neg))
}

/// Probe response of the freshly programmed arrays (the reference the drift
/// compensation is calibrated against right after programming).
pub fn probe_reference(state: &ConductanceState) -> f64 {
    probe_response(&state.g_programmed_pos, &state.g_programmed_neg, state.rows, state.cols)
}

/// Per-layer global drift compensation factor
/// `alpha(t) = |response at t_c| / |response at t|` for a deterministic
/// all-ones full-scale probe on the layer rows. Multiplying layer outputs by
/// `alpha(t)` removes the common drift component.
pub fn gdc_factor(state: &ConductanceState, params: &NoiseParams, t: f64) -> Result<f64> {
    gdc_factor_at(probe_reference(state), state, params, t)
}

/// As [`gdc_factor`] with a precomputed programming-time reference.
pub fn gdc_factor_at(reference: f64, state: &ConductanceState, params: &NoiseParams, t: f64) -> Result<f64> {
    let (pos, neg) = drift_state(state, params, t)?;
    let now = probe_response(&pos, &neg, state.rows, state.cols);
    if now == 0.0 {
        return Err(Error::Calibration(
            "drift compensation probe produced a zero response".into(),
        ));
    }
    Ok(reference / now)
}

/// Manifest accompanying a dumped conductance state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateManifest {
    pub rows: usize,
    pub cols: usize,
    pub created_unix_s: u64,
    /// Array name -> file name, all in the flat tensor binary format
    /// (targets, programmed values and drift coefficients).
    pub files: std::collections::BTreeMap<String, String>,
}

const STATE_ARRAYS: [&str; 6] = [
    "g_target_pos",
    "g_target_neg",
    "g_programmed_pos",
    "g_programmed_neg",
    "nu_pos",
    "nu_neg",
];

/// Dump a state as tensor binaries plus a JSON manifest under `dir/name.*`.
pub fn save_state(state: &ConductanceState, dir: &std::path::Path, name: &str) -> Result<()> {
    use crate::tensor::Tensor;
    std::fs::create_dir_all(dir)?;
    let arrays: [&Vec<f64>; 6] = [
        &state.g_target_pos,
        &state.g_target_neg,
        &state.g_programmed_pos,
        &state.g_programmed_neg,
        &state.nu_pos,
        &state.nu_neg,
    ];
    let mut files = std::collections::BTreeMap::new();
    for (tag, data) in STATE_ARRAYS.iter().zip(arrays) {
        let file = format!("{name}.{tag}.bin");
        let t = Tensor::new(vec![state.rows, state.cols], data.iter().map(|v| *v as f32).collect())?;
        t.save(dir.join(&file))?;
        files.insert((*tag).to_string(), file);
    }
    let manifest = StateManifest {
        rows: state.rows,
        cols: state.cols,
        created_unix_s: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        files,
    };
    std::fs::write(dir.join(format!("{name}.manifest.json")), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Restore a state from a manifest written by [`save_state`].
pub fn load_state(dir: &std::path::Path, name: &str) -> Result<ConductanceState> {
    use crate::tensor::Tensor;
    let manifest: StateManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{name}.manifest.json")))?)?;
    let mut arrays = Vec::with_capacity(6);
    for tag in STATE_ARRAYS {
        let file = manifest
            .files
            .get(tag)
            .ok_or_else(|| Error::TensorFormat(format!("state manifest missing array '{tag}'")))?;
        let t = Tensor::load(dir.join(file))?;
        if t.shape != vec![manifest.rows, manifest.cols] {
            return Err(Error::dimension(
                format!("state array {tag}"),
                format!("[{}, {}]", manifest.rows, manifest.cols),
                format!("{:?}", t.shape),
            ));
        }
        arrays.push(t.data.iter().map(|v| *v as f64).collect::<Vec<f64>>());
    }
    let mut it = arrays.into_iter();
    Ok(ConductanceState {
        rows: manifest.rows,
        cols: manifest.cols,
        g_target_pos: it.next().unwrap(),
        g_target_neg: it.next().unwrap(),
        g_programmed_pos: it.next().unwrap(),
        g_programmed_neg: it.next().unwrap(),
        nu_pos: it.next().unwrap(),
        nu_neg: it.next().unwrap(),
    })
}

/// Summed absolute column response to an all-ones input vector.
fn probe_response(pos: &[f64], neg: &[f64], rows: usize, cols: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..cols {
        let mut acc = 0.0;
        for r in 0..rows {
            acc += pos[r * cols + c] - neg[r * cols + c];
        }
        total += acc.abs();
    }
    total
}
