//! Training configuration and its `key = value` text form.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::knn::DEFAULT_NEIGHBORS;
use crate::masking::DEFAULT_THRESHOLD;
use crate::model::DEFAULT_HIDDEN;
use crate::quant::QuantConfig;

/// Exponential decay from `start` at step 0 to `end` at the last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
}

impl LrSchedule {
    pub const fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn at(&self, step: u64, total_steps: u64) -> f64 {
        if total_steps <= 1 {
            return self.start;
        }
        let t = (step.min(total_steps - 1)) as f64 / (total_steps - 1) as f64;
        self.start * (self.end / self.start).powf(t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub seed: u64,
    pub resolution: usize,
    pub channels: usize,
    pub hidden: usize,
    pub neighbors: usize,
    pub quant: QuantConfig,
    pub lambda_entropy: f64,
    pub lambda_mask: f64,
    pub lambda_wavelet: f64,
    pub lambda_tri: f64,
    /// Divisor of the entropy term; `None` means `N (38 + 3k)`.
    pub entropy_scale: Option<f64>,
    /// Per-group weights of the fidelity term, which is measured in units of `q`.
    pub fidelity_weights: [f64; 3],
    /// Fraction of the steps trained without noise, masks or autoencoder.
    pub warmup_fraction: f64,
    /// Anchors per step; 0 uses every anchor.
    pub batch_size: usize,
    pub mask_threshold: f64,
    pub lr_grid: LrSchedule,
    pub lr_autoencoder: LrSchedule,
    pub lr_model: LrSchedule,
    pub lr_mask: LrSchedule,
    /// Learn anchor and offset masks in the main phase; off keeps every coefficient.
    pub masking: bool,
    /// Reduce per-anchor gradients in a fixed order.
    pub reproducible: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            seed: 0,
            resolution: 128,
            channels: 16,
            hidden: DEFAULT_HIDDEN,
            neighbors: DEFAULT_NEIGHBORS,
            quant: QuantConfig::default(),
            lambda_entropy: 1.0,
            lambda_mask: 5e-4,
            lambda_wavelet: 0.0,
            lambda_tri: 1.0,
            entropy_scale: None,
            fidelity_weights: [1.0; 3],
            warmup_fraction: 0.1,
            batch_size: 0,
            mask_threshold: DEFAULT_THRESHOLD,
            lr_grid: LrSchedule::new(5e-3, 1e-5),
            lr_autoencoder: LrSchedule::new(1e-3, 1e-5),
            lr_model: LrSchedule::new(1e-3, 1e-5),
            lr_mask: LrSchedule::new(1e-2, 1e-4),
            masking: true,
            reproducible: true,
        }
    }
}

const KEYS: &[&str] = &[
    "steps",
    "seed",
    "resolution",
    "channels",
    "hidden",
    "neighbors",
    "q_feature",
    "q_scaling",
    "q_offsets",
    "lambda_entropy",
    "lambda_mask",
    "lambda_wavelet",
    "lambda_tri",
    "entropy_scale",
    "fidelity_feature",
    "fidelity_scaling",
    "fidelity_offsets",
    "warmup_fraction",
    "batch_size",
    "mask_threshold",
    "lr_grid_start",
    "lr_grid_end",
    "lr_autoencoder_start",
    "lr_autoencoder_end",
    "lr_model_start",
    "lr_model_end",
    "lr_mask_start",
    "lr_mask_end",
    "masking",
    "reproducible",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::validation(format!("invalid value {value:?} for {key}")))
}

impl TrainConfig {
    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::validation(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.resolution < 8 || self.resolution % 8 != 0 {
            return bad(format!("resolution must be a multiple of 8, got {}", self.resolution));
        }
        if self.channels == 0 || self.hidden == 0 {
            return bad("channels and hidden must be at least 1".into());
        }
        self.quant.validate()?;
        for (name, v) in [
            ("lambda_entropy", self.lambda_entropy),
            ("lambda_mask", self.lambda_mask),
            ("lambda_wavelet", self.lambda_wavelet),
            ("lambda_tri", self.lambda_tri),
        ]
        .into_iter()
        .chain(["fidelity_feature", "fidelity_scaling", "fidelity_offsets"].into_iter().zip(self.fidelity_weights))
        {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if let Some(e) = self.entropy_scale {
            if !(e > 0.0 && e.is_finite()) {
                return bad(format!("entropy_scale must be positive, got {e}"));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction must lie in [0, 1), got {}", self.warmup_fraction));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return bad(format!("mask_threshold must lie in (0, 1), got {}", self.mask_threshold));
        }
        for (name, s) in self.schedules() {
            if !(s.start > 0.0 && s.end > 0.0 && s.start.is_finite() && s.end.is_finite()) {
                return bad(format!("learning rates of {name} must be positive"));
            }
        }
        Ok(())
    }

    fn schedules(&self) -> [(&'static str, LrSchedule); 4] {
        [
            ("grid", self.lr_grid),
            ("autoencoder", self.lr_autoencoder),
            ("model", self.lr_model),
            ("mask", self.lr_mask),
        ]
    }

    /// Number of warm-up steps.
    pub fn warmup_steps(&self) -> u64 {
        (self.steps as f64 * self.warmup_fraction).floor() as u64
    }

    /// Set one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "steps" => self.steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "resolution" => self.resolution = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "neighbors" => self.neighbors = parse(key, value)?,
            "q_feature" => self.quant.steps[0] = parse(key, value)?,
            "q_scaling" => self.quant.steps[1] = parse(key, value)?,
            "q_offsets" => self.quant.steps[2] = parse(key, value)?,
            "lambda_entropy" => self.lambda_entropy = parse(key, value)?,
            "lambda_mask" => self.lambda_mask = parse(key, value)?,
            "lambda_wavelet" => self.lambda_wavelet = parse(key, value)?,
            "lambda_tri" => self.lambda_tri = parse(key, value)?,
            "entropy_scale" => {
                self.entropy_scale = if value == "auto" { None } else { Some(parse(key, value)?) }
            }
            "fidelity_feature" => self.fidelity_weights[0] = parse(key, value)?,
            "fidelity_scaling" => self.fidelity_weights[1] = parse(key, value)?,
            "fidelity_offsets" => self.fidelity_weights[2] = parse(key, value)?,
            "warmup_fraction" => self.warmup_fraction = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "mask_threshold" => self.mask_threshold = parse(key, value)?,
            "lr_grid_start" => self.lr_grid.start = parse(key, value)?,
            "lr_grid_end" => self.lr_grid.end = parse(key, value)?,
            "lr_autoencoder_start" => self.lr_autoencoder.start = parse(key, value)?,
            "lr_autoencoder_end" => self.lr_autoencoder.end = parse(key, value)?,
            "lr_model_start" => self.lr_model.start = parse(key, value)?,
            "lr_model_end" => self.lr_model.end = parse(key, value)?,
            "lr_mask_start" => self.lr_mask.start = parse(key, value)?,
            "lr_mask_end" => self.lr_mask.end = parse(key, value)?,
            "masking" => self.masking = parse(key, value)?,
            "reproducible" => self.reproducible = parse(key, value)?,
            _ => return Err(Error::validation(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Text of one field; floats use the shortest exact representation.
    pub fn get(&self, key: &str) -> Option<String> {
        let f = |v: f64| format!("{v:?}");
        Some(match key {
            "steps" => self.steps.to_string(),
            "seed" => self.seed.to_string(),
            "resolution" => self.resolution.to_string(),
            "channels" => self.channels.to_string(),
            "hidden" => self.hidden.to_string(),
            "neighbors" => self.neighbors.to_string(),
            "q_feature" => f(self.quant.steps[0]),
            "q_scaling" => f(self.quant.steps[1]),
            "q_offsets" => f(self.quant.steps[2]),
            "lambda_entropy" => f(self.lambda_entropy),
            "lambda_mask" => f(self.lambda_mask),
            "lambda_wavelet" => f(self.lambda_wavelet),
            "lambda_tri" => f(self.lambda_tri),
            "entropy_scale" => self.entropy_scale.map_or_else(|| "auto".to_string(), f),
            "fidelity_feature" => f(self.fidelity_weights[0]),
            "fidelity_scaling" => f(self.fidelity_weights[1]),
            "fidelity_offsets" => f(self.fidelity_weights[2]),
            "warmup_fraction" => f(self.warmup_fraction),
            "batch_size" => self.batch_size.to_string(),
            "mask_threshold" => f(self.mask_threshold),
            "lr_grid_start" => f(self.lr_grid.start),
            "lr_grid_end" => f(self.lr_grid.end),
            "lr_autoencoder_start" => f(self.lr_autoencoder.start),
            "lr_autoencoder_end" => f(self.lr_autoencoder.end),
            "lr_model_start" => f(self.lr_model.start),
            "lr_model_end" => f(self.lr_model.end),
            "lr_mask_start" => f(self.lr_mask.start),
            "lr_mask_end" => f(self.lr_mask.end),
            "masking" => self.masking.to_string(),
            "reproducible" => self.reproducible.to_string(),
            _ => return None,
        })
    }

    /// Every field as `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }

    /// Apply `key = value` lines on top of `self`. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::validation(format!("line {}: expected key = value", no + 1)));
            };
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }
}
