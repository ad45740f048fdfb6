//! Experiment configuration files (TOML).
//!
//! Four top-level keys are required: `recipe`, `seeds`, `output_dir` and
//! `mnist_dir`. Everything else lives in optional sections whose defaults
//! reproduce the reference experiments.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xbsim::decomp::Algorithm;
use xbsim::quant::{QuantConfig, Rounding};
use xbsim::xbar::{FullScale, Polling};

pub const REQUIRED_KEYS: [&str; 4] = ["recipe", "seeds", "output_dir", "mnist_dir"];

#[derive(Debug)]
pub enum ConfigError {
    Io(PathBuf, std::io::Error),
    Parse(String),
    Missing(Vec<&'static str>),
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(p, e) => write!(f, "cannot read {}: {e}", p.display()),
            ConfigError::Parse(m) => write!(f, "{m}"),
            ConfigError::Missing(keys) => write!(f, "missing required keys: {}", keys.join(", ")),
            ConfigError::Invalid(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Recipe {
    Train,
    Infer,
    Landscape,
    DecompSweep,
    FtSweep,
    AdcSweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[default]
    Software,
    Hardware,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    Fefet,
    AnalyticalIdeal,
    AnalyticalReal,
    /// A tabular model stored in the `XBT-TAB` text format (see `device_file`).
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RoundingKey {
    Nearest,
    Stochastic,
}

impl From<RoundingKey> for Rounding {
    fn from(r: RoundingKey) -> Self {
        match r {
            RoundingKey::Nearest => Rounding::Nearest,
            RoundingKey::Stochastic => Rounding::Stochastic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DecompKey {
    pub algo: String,
    pub rank: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iters: Option<usize>,
}

impl DecompKey {
    /// Iteration budget; defaults to 50 for NMF and 10 otherwise.
    pub fn iters(&self) -> usize {
        self.iters.unwrap_or(if self.algo.eq_ignore_ascii_case("nmf") { 50 } else { 10 })
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: TrainMode,
    pub sizes: Vec<usize>,
    pub lr: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub device: DeviceKind,
    pub device_file: Option<PathBuf>,
    pub variability: f64,
    pub p_max: Option<u32>,
    pub g_min: f64,
    pub g_max: f64,
    pub wage: Option<[u32; 4]>,
    pub wage_rounding: RoundingKey,
    pub decomp: Option<DecompKey>,
    pub sbpca_chunks: usize,
    pub gains: Option<Vec<f64>>,
    pub init_half_width: Option<Vec<f64>>,
    pub train_samples: Option<usize>,
    pub test_samples: Option<usize>,
    /// Start from the last snapshot of a checkpoint file instead of training.
    pub weights: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            mode: TrainMode::Software,
            sizes: vec![784, 150, 10],
            lr: None,
            batch_size: 4096,
            epochs: 50,
            device: DeviceKind::Fefet,
            device_file: None,
            variability: 0.01,
            p_max: None,
            g_min: 133.0,
            g_max: 233.0,
            wage: None,
            wage_rounding: RoundingKey::Nearest,
            decomp: None,
            sbpca_chunks: 8,
            gains: None,
            init_half_width: None,
            train_samples: None,
            test_samples: None,
            weights: None,
        }
    }
}

impl TrainSection {
    /// The configured learning rate, or the reference value: 4.76 for
    /// hardware-aware training with quantized weights, 0.1 otherwise.
    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or(if self.mode == TrainMode::Hardware && self.quantized() { 4.76 } else { 0.1 })
    }

    fn quantized(&self) -> bool {
        self.wage.is_some_and(|w| w[0] > 0)
    }

    /// The configured pulse count for a full traversal, or the reference
    /// value: 3 when weights are quantized, 100 otherwise.
    pub fn pulses(&self) -> u32 {
        self.p_max.unwrap_or(if self.quantized() { 3 } else { 100 })
    }

    pub fn quant(&self) -> Result<QuantConfig, ConfigError> {
        match self.wage {
            None => Ok(QuantConfig::DISABLED),
            Some([w, a, g, e]) => QuantConfig::new(w, a, g, e, self.wage_rounding.into())
                .map_err(|e| ConfigError::Invalid(format!("train.wage: {e}"))),
        }
    }

    pub fn algorithm(&self) -> Result<Option<(Algorithm, usize, usize)>, ConfigError> {
        match &self.decomp {
            None => Ok(None),
            Some(d) => {
                let a = d.algo.parse::<Algorithm>().map_err(|e| ConfigError::Invalid(format!("train.decomp.algo: {e}")))?;
                Ok(Some((a, d.rank, d.iters())))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PollingKey {
    Single,
    #[default]
    Average,
}

impl From<PollingKey> for Polling {
    fn from(p: PollingKey) -> Self {
        match p {
            PollingKey::Single => Polling::Single,
            PollingKey::Average => Polling::Average,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FullScaleKey {
    #[default]
    WorstCase,
    Calibrated,
}

impl From<FullScaleKey> for FullScale {
    fn from(f: FullScaleKey) -> Self {
        match f {
            FullScaleKey::WorstCase => FullScale::WorstCase,
            FullScaleKey::Calibrated => FullScale::Calibrated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcceleratorSection {
    pub rows: usize,
    pub cols: usize,
    pub g_min: f64,
    pub g_max: f64,
    pub v_read: f64,
    pub read_noise: f64,
    pub write_noise: f64,
    pub stuck_percent: f64,
    pub stuck_high_probability: f64,
    pub adc_bits: u32,
    pub dac_bits: u32,
    pub redundancy: usize,
    pub polling: PollingKey,
    pub full_scale: FullScaleKey,
    pub exact_read_noise: bool,
    /// Run inference through the stateless streaming path (no device state).
    pub stateless: bool,
    pub dump_maps: bool,
}

impl Default for AcceleratorSection {
    fn default() -> Self {
        Self {
            rows: 2500,
            cols: 2500,
            g_min: 133.0,
            g_max: 233.0,
            v_read: 0.3,
            read_noise: 10.0,
            write_noise: 50.0,
            stuck_percent: 0.0,
            stuck_high_probability: 0.5,
            adc_bits: 8,
            dac_bits: 8,
            redundancy: 1,
            polling: PollingKey::Average,
            full_scale: FullScaleKey::WorstCase,
            exact_read_noise: false,
            stateless: false,
            dump_maps: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub algorithms: Vec<String>,
    pub ranks: Vec<usize>,
    pub redundancy: Vec<usize>,
    pub stuck_percent: Vec<f64>,
    pub bits: Vec<u32>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            algorithms: vec!["sbpca".into(), "nmf".into()],
            ranks: vec![1, 2, 4, 8],
            redundancy: vec![1, 2, 4, 6],
            stuck_percent: vec![0.0, 5.0, 10.0, 20.0],
            bits: vec![2, 4, 8, 12],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandscapeSection {
    pub points: usize,
    pub span: f64,
    pub filter_norm: bool,
    pub layers: Option<Vec<usize>>,
    pub samples: Option<usize>,
}

impl Default for LandscapeSection {
    fn default() -> Self {
        Self { points: 21, span: 1.0, filter_norm: true, layers: None, samples: Some(2000) }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub recipe: Recipe,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub mnist_dir: PathBuf,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub accelerator: AcceleratorSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub landscape: LandscapeSection,
}

/// Environment overrides applied after parsing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

impl Overrides {
    pub fn from_env() -> Result<Self, ConfigError> {
        let seed = match std::env::var("XBT_SEED") {
            Ok(s) => Some(s.trim().parse().map_err(|_| ConfigError::Invalid(format!("XBT_SEED is not an integer: {s:?}")))?),
            Err(_) => None,
        };
        let output_dir = std::env::var_os("XBT_OUT").map(PathBuf::from);
        Ok(Self { seed, output_dir })
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")), overrides)
    }

    /// Parses and validates `text`; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let missing: Vec<&'static str> = REQUIRED_KEYS.iter().copied().filter(|k| !table.contains_key(*k)).collect();
        if !missing.is_empty() {
            return Err(ConfigError::Missing(missing));
        }
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if let Some(s) = overrides.seed {
            cfg.seeds = vec![s];
        }
        if let Some(o) = &overrides.output_dir {
            cfg.output_dir = o.clone();
        }
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.output_dir);
        resolve(&mut cfg.mnist_dir);
        if let Some(p) = cfg.train.device_file.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.train.weights.as_mut() {
            resolve(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.seeds.is_empty() {
            return bad("seeds: at least one seed is required".into());
        }
        for f in ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"] {
            if !self.mnist_dir.join(f).is_file() {
                return bad(format!("mnist_dir: {} not found in {}", f, self.mnist_dir.display()));
            }
        }
        let t = &self.train;
        if t.sizes.len() < 2 || t.sizes.contains(&0) {
            return bad(format!("train.sizes: need at least two positive sizes, got {:?}", t.sizes));
        }
        if !(t.learning_rate() > 0.0) {
            return bad("train.lr must be positive".into());
        }
        if t.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        if t.pulses() == 0 {
            return bad("train.p_max must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&t.variability) {
            return bad(format!("train.variability must be in [0, 1], got {}", t.variability));
        }
        if t.device == DeviceKind::File {
            match &t.device_file {
                Some(p) if p.is_file() => {}
                Some(p) => return bad(format!("train.device_file: {} not found", p.display())),
                None => return bad("train.device = \"file\" needs train.device_file".into()),
            }
        }
        if let Some(w) = &t.weights {
            if !w.is_file() {
                return bad(format!("train.weights: {} not found", w.display()));
            }
        }
        let layers = t.sizes.len() - 1;
        for (name, v) in [("train.gains", &t.gains), ("train.init_half_width", &t.init_half_width)] {
            if let Some(v) = v {
                if v.len() != layers {
                    return bad(format!("{name}: expected {layers} values, got {}", v.len()));
                }
            }
        }
        t.quant()?;
        if let Some((_, rank, _)) = t.algorithm()? {
            if rank == 0 {
                return bad("train.decomp.rank must be at least 1".into());
            }
        }
        let a = &self.accelerator;
        if !(0.0..=100.0).contains(&a.stuck_percent) {
            return bad(format!("accelerator.stuck_percent must be in [0, 100], got {}", a.stuck_percent));
        }
        if a.redundancy == 0 {
            return bad("accelerator.redundancy must be at least 1".into());
        }
        for b in [a.adc_bits, a.dac_bits].iter().chain(&self.sweep.bits) {
            if !(2..=52).contains(b) {
                return bad(format!("converter bits must be in 2..=52, got {b}"));
            }
        }
        for alg in &self.sweep.algorithms {
            alg.parse::<Algorithm>().map_err(|e| ConfigError::Invalid(format!("sweep.algorithms: {e}")))?;
        }
        if self.sweep.ranks.contains(&0) || self.sweep.redundancy.contains(&0) {
            return bad("sweep ranks and redundancies must be at least 1".into());
        }
        if self.sweep.stuck_percent.iter().any(|p| !(0.0..=100.0).contains(p)) {
            return bad("sweep.stuck_percent entries must be in [0, 100]".into());
        }
        if self.landscape.points < 2 || !(self.landscape.span > 0.0) {
            return bad("landscape: need points >= 2 and span > 0".into());
        }
        if self.recipe == Recipe::Train && t.epochs == 0 {
            return bad("train.epochs must be at least 1 for TRAIN".into());
        }
        Ok(())
    }

    /// Redundancy levels the recipe will map at.
    pub fn redundancies(&self) -> Vec<usize> {
        match self.recipe {
            Recipe::FtSweep => self.sweep.redundancy.clone(),
            Recipe::Infer | Recipe::AdcSweep => vec![self.accelerator.redundancy],
            _ => vec![],
        }
    }

    /// Devices a mapping of the configured network needs at redundancy `r`.
    pub fn required_devices(&self, r: usize) -> usize {
        2 * r * self.train.sizes.windows(2).map(|w| w[0] * w[1]).sum::<usize>()
    }
}
