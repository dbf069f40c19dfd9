//! Experiment configuration and its flat `key=value` text form.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::channel::LinkBudget;
use crate::embeddings::{QuantizationSpec, SyntheticGenConfig};
use crate::error::{Error, Result};
use crate::matching::ScoreMode;
use crate::selection::SchemeConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingSource {
    Synthetic(SyntheticGenConfig),
    File(PathBuf),
}

/// Quantization entry where `kept_dimensions: None` means "all of D".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantSetting {
    pub kept_dimensions: Option<usize>,
    pub bits_per_dimension: u32,
}

impl QuantSetting {
    pub fn full(bits_per_dimension: u32) -> Self {
        Self {
            kept_dimensions: None,
            bits_per_dimension,
        }
    }

    pub fn resolve(&self, dim: usize) -> Result<QuantizationSpec> {
        let d = self.kept_dimensions.unwrap_or(dim);
        if d > dim {
            return Err(Error::config(format!(
                "quantization keeps {d} dims but D = {dim}"
            )));
        }
        QuantizationSpec::new(d, self.bits_per_dimension).map_err(|e| Error::config(e.to_string()))
    }

    fn parse(s: &str) -> Result<Self> {
        let (d, b) = s
            .trim()
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::config(format!("quantization {s:?} must look like <d>x<b> or *x<b>")))?;
        let kept_dimensions = match d.trim() {
            "*" => None,
            n => Some(
                n.parse()
                    .map_err(|_| Error::config(format!("bad kept_dimensions {n:?}")))?,
            ),
        };
        let bits_per_dimension = b
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("bad bits_per_dimension {b:?}")))?;
        let q = Self {
            kept_dimensions,
            bits_per_dimension,
        };
        if q.kept_dimensions == Some(0) || !QuantizationSpec::ALLOWED_BITS.contains(&bits_per_dimension) {
            return Err(Error::config(format!("invalid quantization {s:?}")));
        }
        Ok(q)
    }

    fn render(&self) -> String {
        match self.kept_dimensions {
            Some(d) => format!("{d}x{}", self.bits_per_dimension),
            None => format!("*x{}", self.bits_per_dimension),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub num_sensors: usize,
    pub targets_per_trial: usize,
    pub trials: usize,
    pub dimension: usize,
    pub payload_bits: u64,
    pub bandwidth_hz: f64,
    pub avg_snr_db: f64,
    /// Bandwidth on which candidate rates are priced for selection.
    pub candidate_rate_bandwidth_hz: f64,
    pub schemes: Vec<SchemeConfig>,
    pub k_sweep: Vec<usize>,
    pub quantization_sweep: Vec<QuantSetting>,
    pub score_mode: ScoreMode,
    pub master_seed: u64,
    pub embedding_source: EmbeddingSource,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            num_sensors: 20,
            targets_per_trial: 4,
            trials: 1229,
            dimension: 64,
            payload_bits: 1_000_000,
            bandwidth_hz: 5e6,
            avg_snr_db: 10.0,
            candidate_rate_bandwidth_hz: 2.5e6,
            schemes: SchemeConfig::standard_set(),
            k_sweep: (1..=8).collect(),
            quantization_sweep: vec![QuantSetting::full(32)],
            score_mode: ScoreMode::Cosine,
            master_seed: 2023,
            embedding_source: EmbeddingSource::Synthetic(SyntheticGenConfig::default()),
        }
    }
}

/// Keys accepted by [`ExperimentConfig::set`], in header order.
pub const CONFIG_KEYS: &[&str] = &[
    "num_sensors",
    "targets_per_trial",
    "trials",
    "dimension",
    "payload_bits",
    "bandwidth_hz",
    "avg_snr_db",
    "candidate_rate_bandwidth_hz",
    "schemes",
    "k_sweep",
    "quantization_sweep",
    "score_mode",
    "master_seed",
    "embedding_source",
    "num_identities",
    "samples_per_identity",
    "intra_class_noise_sigma",
    "synthetic_seed",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
}

/// `1,2,5` or `1..8` (inclusive), or a mix: `1..3,6`.
fn parse_counts(key: &str, v: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in v.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let (a, b): (usize, usize) = (num(key, a)?, num(key, b.trim_start_matches('='))?);
            if a > b {
                return Err(Error::config(format!("{key}: empty range {part:?}")));
            }
            out.extend(a..=b);
        } else {
            out.push(num(key, part)?);
        }
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn budget(&self) -> LinkBudget {
        LinkBudget {
            total_bandwidth_hz: self.bandwidth_hz,
            avg_snr_db: self.avg_snr_db,
            payload_bits_per_source: self.payload_bits,
        }
    }

    fn synthetic_mut(&mut self) -> &mut SyntheticGenConfig {
        if !matches!(self.embedding_source, EmbeddingSource::Synthetic(_)) {
            self.embedding_source = EmbeddingSource::Synthetic(SyntheticGenConfig {
                dimension: self.dimension,
                ..Default::default()
            });
        }
        match &mut self.embedding_source {
            EmbeddingSource::Synthetic(s) => s,
            EmbeddingSource::File(_) => unreachable!(),
        }
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        match key {
            "num_sensors" => self.num_sensors = num(key, value)?,
            "targets_per_trial" => self.targets_per_trial = num(key, value)?,
            "trials" => self.trials = num(key, value)?,
            "dimension" => {
                self.dimension = num(key, value)?;
                if let EmbeddingSource::Synthetic(s) = &mut self.embedding_source {
                    s.dimension = self.dimension;
                }
            }
            "payload_bits" => {
                self.payload_bits = num::<f64>(key, value).and_then(|v| {
                    if v.fract() == 0.0 && v > 0.0 && v <= u64::MAX as f64 {
                        Ok(v as u64)
                    } else {
                        Err(Error::config(format!(
                            "payload_bits must be a positive integer, got {value:?}"
                        )))
                    }
                })?
            }
            "bandwidth_hz" => self.bandwidth_hz = num(key, value)?,
            "avg_snr_db" => self.avg_snr_db = num(key, value)?,
            "candidate_rate_bandwidth_hz" => self.candidate_rate_bandwidth_hz = num(key, value)?,
            "schemes" => {
                self.schemes = value
                    .split(';')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "k_sweep" => self.k_sweep = parse_counts(key, value)?,
            "quantization_sweep" => {
                self.quantization_sweep = value
                    .split([',', ';'])
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(QuantSetting::parse)
                    .collect::<Result<_>>()?
            }
            "score_mode" => self.score_mode = value.parse()?,
            "master_seed" => self.master_seed = num(key, value)?,
            "embedding_source" => {
                if value.eq_ignore_ascii_case("synthetic") {
                    self.synthetic_mut();
                } else if let Some(path) = value.strip_prefix("file:") {
                    self.embedding_source = EmbeddingSource::File(PathBuf::from(path.trim()));
                } else {
                    return Err(Error::config(format!(
                        "embedding_source must be `synthetic` or `file:<path>`, got {value:?}"
                    )));
                }
            }
            "num_identities" => self.synthetic_mut().num_identities = num(key, value)?,
            "samples_per_identity" => self.synthetic_mut().samples_per_identity = num(key, value)?,
            "intra_class_noise_sigma" => self.synthetic_mut().intra_class_noise_sigma = num(key, value)?,
            "synthetic_seed" => self.synthetic_mut().seed = num(key, value)?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Every field as `key=value`, in [`CONFIG_KEYS`] order. Parses back
    /// through [`ExperimentConfig::from_text`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let schemes: Vec<String> = self.schemes.iter().map(ToString::to_string).collect();
        let ks: Vec<String> = self.k_sweep.iter().map(ToString::to_string).collect();
        let qs: Vec<String> = self.quantization_sweep.iter().map(QuantSetting::render).collect();
        let _ = writeln!(out, "num_sensors={}", self.num_sensors);
        let _ = writeln!(out, "targets_per_trial={}", self.targets_per_trial);
        let _ = writeln!(out, "trials={}", self.trials);
        let _ = writeln!(out, "dimension={}", self.dimension);
        let _ = writeln!(out, "payload_bits={}", self.payload_bits);
        let _ = writeln!(out, "bandwidth_hz={}", self.bandwidth_hz);
        let _ = writeln!(out, "avg_snr_db={}", self.avg_snr_db);
        let _ = writeln!(
            out,
            "candidate_rate_bandwidth_hz={}",
            self.candidate_rate_bandwidth_hz
        );
        let _ = writeln!(out, "schemes={}", schemes.join(";"));
        let _ = writeln!(out, "k_sweep={}", ks.join(","));
        let _ = writeln!(out, "quantization_sweep={}", qs.join(","));
        let _ = writeln!(out, "score_mode={}", self.score_mode);
        let _ = writeln!(out, "master_seed={}", self.master_seed);
        match &self.embedding_source {
            EmbeddingSource::Synthetic(s) => {
                let _ = writeln!(out, "embedding_source=synthetic");
                let _ = writeln!(out, "num_identities={}", s.num_identities);
                let _ = writeln!(out, "samples_per_identity={}", s.samples_per_identity);
                let _ = writeln!(out, "intra_class_noise_sigma={}", s.intra_class_noise_sigma);
                let _ = writeln!(out, "synthetic_seed={}", s.seed);
            }
            EmbeddingSource::File(p) => {
                let _ = writeln!(out, "embedding_source=file:{}", p.display());
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_sensors < 1 {
            return Err(Error::config("num_sensors must be at least 1"));
        }
        if self.targets_per_trial >= self.num_sensors {
            return Err(Error::config("targets_per_trial must be < num_sensors"));
        }
        if self.trials < 1 {
            return Err(Error::config("trials must be at least 1"));
        }
        if self.dimension < 1 {
            return Err(Error::config("dimension must be at least 1"));
        }
        self.budget().validate()?;
        if !(self.candidate_rate_bandwidth_hz > 0.0 && self.candidate_rate_bandwidth_hz.is_finite()) {
            return Err(Error::config(
                "candidate_rate_bandwidth_hz must be finite and > 0",
            ));
        }
        if self.schemes.is_empty() {
            return Err(Error::config("schemes must not be empty"));
        }
        for s in &self.schemes {
            s.validate()?;
        }
        if self.k_sweep.is_empty() {
            return Err(Error::config("k_sweep must not be empty"));
        }
        if let Some(k) = self.k_sweep.iter().find(|k| **k < 1 || **k > self.num_sensors) {
            return Err(Error::config(format!("k = {k} outside 1..={}", self.num_sensors)));
        }
        if self.quantization_sweep.is_empty() {
            return Err(Error::config("quantization_sweep must not be empty"));
        }
        for q in &self.quantization_sweep {
            q.resolve(self.dimension)?;
        }
        if let EmbeddingSource::Synthetic(s) = &self.embedding_source {
            // `dimension` is authoritative for generated stores.
            SyntheticGenConfig {
                dimension: self.dimension,
                ..s.clone()
            }
            .validate()?;
        }
        Ok(())
    }
}
