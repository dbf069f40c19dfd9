//! Feature vectors used as queries and keys.
//!
//! Vectors come either from the seeded synthetic generator (unit-sphere
//! Gaussian clusters, one cluster per identity) or from a text file of
//! externally computed embeddings.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Lower bound applied to every fitted per-dimension variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// A finite, non-empty real feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("embedding must have at least one dimension"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        check_dim(self.dim(), other.dim())?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual })
    }
}

/// One camera view (or query photo) and its feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub identity_label: String,
    pub vector: EmbeddingVector,
    /// Ground truth for one trial; never read by matching or selection.
    pub contains_target: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dimension: usize,
    records: Vec<SampleRecord>,
}

impl EmbeddingStore {
    pub fn new(dimension: usize, records: Vec<SampleRecord>) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::invalid("store dimension must be at least 1"));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            check_dim(dimension, r.vector.dim())?;
            if !seen.insert(r.sample_id.as_str()) {
                return Err(Error::invalid(format!("duplicate sample_id {:?}", r.sample_id)));
            }
        }
        Ok(Self { dimension, records })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Serializes the store in the line-oriented `dim=<D>` text format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "dim={}", self.dimension);
        for r in &self.records {
            out.push_str(&r.sample_id);
            out.push(',');
            out.push_str(&r.identity_label);
            for v in r.vector.as_slice() {
                // `{}` on f64 is the shortest representation that parses back exactly.
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticGenConfig {
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub dimension: usize,
    pub intra_class_noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticGenConfig {
    fn default() -> Self {
        Self {
            num_identities: 100,
            samples_per_identity: 8,
            dimension: 64,
            intra_class_noise_sigma: 0.05,
            seed: 1,
        }
    }
}

impl SyntheticGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::config("num_identities must be at least 2"));
        }
        if self.samples_per_identity < 1 {
            return Err(Error::config("samples_per_identity must be at least 1"));
        }
        if self.dimension < 1 {
            return Err(Error::config("dimension must be at least 1"));
        }
        if !(self.intra_class_noise_sigma >= 0.0 && self.intra_class_noise_sigma.is_finite()) {
            return Err(Error::config("intra_class_noise_sigma must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Draws one unit-norm centroid per identity and scatters noisy, re-normalized
/// samples around it. Identical configs produce identical stores.
pub fn generate_synthetic(config: &SyntheticGenConfig) -> Result<EmbeddingStore> {
    config.validate()?;
    let dim = config.dimension;
    let sigma = config.intra_class_noise_sigma;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut records = Vec::with_capacity(config.num_identities * config.samples_per_identity);

    for id in 0..config.num_identities {
        let centroid = random_unit_vector(dim, &mut rng);
        let label = format!("id{id:05}");
        for s in 0..config.samples_per_identity {
            let vector = if sigma == 0.0 {
                centroid.clone()
            } else {
                let noisy: Vec<f64> = centroid
                    .as_slice()
                    .iter()
                    .map(|c| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        c + sigma * z
                    })
                    .collect();
                unit_normalize(&EmbeddingVector::new(noisy)?)?
            };
            records.push(SampleRecord {
                sample_id: format!("{label}_s{s:03}"),
                identity_label: label.clone(),
                vector,
                contains_target: false,
            });
        }
    }
    EmbeddingStore::new(dim, records)
}

/// Uniform draw on the unit sphere via a normalized standard Gaussian.
fn random_unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> EmbeddingVector {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return EmbeddingVector(v.into_iter().map(|x| x / n).collect());
        }
    }
}

/// Reads a store from the `dim=<D>` text format.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_embeddings(&text, path)
}

pub fn parse_embeddings(text: &str, path: &Path) -> Result<EmbeddingStore> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let (_, header) = lines.next().ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        message: "empty file: no embeddings".into(),
    })?;
    let dim: usize = header
        .trim()
        .strip_prefix("dim=")
        .and_then(|d| d.trim().parse().ok())
        .filter(|d| *d > 0)
        .ok_or_else(|| parse_err(1, format!("expected header `dim=<D>`, got {header:?}")))?;

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let sample_id = fields.next().unwrap_or_default().trim().to_string();
        let identity_label = fields
            .next()
            .ok_or_else(|| parse_err(line_no, "missing identity_label".into()))?
            .trim()
            .to_string();
        if sample_id.is_empty() {
            return Err(parse_err(line_no, "empty sample_id".into()));
        }
        let values = fields
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err(line_no, format!("bad value {f:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != dim {
            return Err(parse_err(
                line_no,
                format!(
                    "dimension mismatch in row {sample_id:?}: expected {dim} values, got {}",
                    values.len()
                ),
            ));
        }
        let vector = EmbeddingVector::new(values)
            .map_err(|e| parse_err(line_no, format!("row {sample_id:?}: {e}")))?;
        if !seen.insert(sample_id.clone()) {
            return Err(parse_err(line_no, format!("duplicate sample_id {sample_id:?}")));
        }
        records.push(SampleRecord {
            sample_id,
            identity_label,
            vector,
            contains_target: false,
        });
    }
    if records.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "empty store: header present but no rows".into(),
        });
    }
    EmbeddingStore::new(dim, records)
}

pub fn unit_normalize(v: &EmbeddingVector) -> Result<EmbeddingVector> {
    let n = v.norm();
    if n == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(EmbeddingVector(v.0.iter().map(|x| x / n).collect()))
}

/// Truncation plus per-coordinate resolution for the broadcast query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QuantizationSpec {
    pub kept_dimensions: usize,
    pub bits_per_dimension: u32,
}

impl QuantizationSpec {
    pub const ALLOWED_BITS: [u32; 5] = [2, 4, 8, 16, 32];

    pub fn new(kept_dimensions: usize, bits_per_dimension: u32) -> Result<Self> {
        let spec = Self {
            kept_dimensions,
            bits_per_dimension,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Full-length, native-precision query.
    pub fn lossless(dim: usize) -> Self {
        Self {
            kept_dimensions: dim,
            bits_per_dimension: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !Self::ALLOWED_BITS.contains(&self.bits_per_dimension) {
            return Err(Error::invalid(format!(
                "bits_per_dimension {} not in {:?}",
                self.bits_per_dimension,
                Self::ALLOWED_BITS
            )));
        }
        if self.kept_dimensions == 0 {
            return Err(Error::invalid("kept_dimensions must be at least 1"));
        }
        Ok(())
    }

    pub fn payload_bits(&self) -> u64 {
        self.kept_dimensions as u64 * u64::from(self.bits_per_dimension)
    }
}

/// Keeps the first `d` coordinates (zero-filling the rest) and snaps each kept
/// coordinate to the midpoint of its cell in a uniform `2^b`-level grid over
/// `[-1, 1]`. At `b = 32` kept coordinates pass through unchanged.
pub fn quantize_query(v: &EmbeddingVector, spec: &QuantizationSpec) -> Result<EmbeddingVector> {
    spec.validate()?;
    if spec.kept_dimensions > v.dim() {
        return Err(Error::invalid(format!(
            "kept_dimensions {} exceeds vector dimension {}",
            spec.kept_dimensions,
            v.dim()
        )));
    }
    let out = v
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            if i >= spec.kept_dimensions {
                0.0
            } else if spec.bits_per_dimension == 32 {
                x
            } else {
                quantize_scalar(x, spec.bits_per_dimension)
            }
        })
        .collect();
    Ok(EmbeddingVector(out))
}

fn quantize_scalar(x: f64, bits: u32) -> f64 {
    let levels = 1u64 << bits;
    let width = 2.0 / levels as f64;
    let cell = ((x + 1.0) / width).floor().clamp(0.0, (levels - 1) as f64);
    -1.0 + (cell + 0.5) * width
}

/// Diagonal-Gaussian summary of a mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainStats {
    pub mean: EmbeddingVector,
    pub variance: Vec<f64>,
}

impl DomainStats {
    pub fn new(mean: EmbeddingVector, variance: Vec<f64>) -> Result<Self> {
        check_dim(mean.dim(), variance.len())?;
        if variance.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("variances must be finite and > 0"));
        }
        Ok(Self { mean, variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.dim()
    }
}

/// Per-dimension sample mean and unbiased variance, variance floored at
/// [`VARIANCE_FLOOR`].
pub fn fit_domain_stats(samples: &[EmbeddingVector]) -> Result<DomainStats> {
    if samples.len() < 2 {
        return Err(Error::invalid("need at least 2 samples to fit domain stats"));
    }
    let dim = samples[0].dim();
    for s in samples {
        check_dim(dim, s.dim())?;
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, x) in mean.iter_mut().zip(s.as_slice()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for s in samples {
        for ((acc, x), m) in var.iter_mut().zip(s.as_slice()).zip(&mean) {
            *acc += (x - m) * (x - m);
        }
    }
    let variance = var
        .into_iter()
        .map(|v| (v / (n - 1.0)).max(VARIANCE_FLOOR))
        .collect();
    DomainStats::new(EmbeddingVector(mean), variance)
}
