//! Monte-Carlo experiments over (scheme, k, quantization) cells.
//!
//! Trial `i` builds its world from `trial_seed(master_seed, i)`, so every cell
//! of an experiment sees the same target placement and the same channel draws,
//! and adding cells never perturbs existing ones.

mod config;
mod csv;

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use config::{EmbeddingSource, ExperimentConfig, QuantSetting, CONFIG_KEYS};
pub use csv::{export_csv, format_sig6, parse_csv, render_csv, report};

use crate::channel::sample_power_gain;
use crate::embeddings::{
    generate_synthetic, load_embeddings, EmbeddingStore, QuantizationSpec, SampleRecord,
};
use crate::error::{Error, Result};
use crate::protocol::{run_round, RoundOutcome, RoundParams, SourceNode};
use crate::selection::SchemeConfig;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
/// Stream tag separating random-selection draws from world draws.
const SELECTION_STREAM: u64 = 0x5253_454C;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `mix(a, b) = splitmix64(a ^ splitmix64(b))`.
pub fn mix(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b))
}

pub fn trial_seed(master_seed: u64, trial: u64) -> u64 {
    mix(master_seed, trial)
}

/// Everything random about one trial, shared by all cells.
#[derive(Debug, Clone)]
pub struct World {
    pub trial: u64,
    pub query: SampleRecord,
    pub sources: Vec<SourceNode>,
    /// Seed for the RNG that random selection consumes in this trial.
    pub selection_seed: u64,
}

impl World {
    pub fn target_count(&self) -> usize {
        self.sources.iter().filter(|s| s.record.contains_target).count()
    }
}

/// A store plus the identity index needed to draw worlds from it.
#[derive(Debug, Clone)]
pub struct WorldSampler {
    store: EmbeddingStore,
    by_identity: BTreeMap<String, Vec<usize>>,
    eligible: Vec<String>,
    num_sensors: usize,
    targets: usize,
}

impl WorldSampler {
    pub fn new(store: EmbeddingStore, num_sensors: usize, targets: usize) -> Result<Self> {
        if targets >= num_sensors {
            return Err(Error::config("targets_per_trial must be < num_sensors"));
        }
        let mut by_identity: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in store.records().iter().enumerate() {
            by_identity.entry(r.identity_label.clone()).or_default().push(i);
        }
        let distractors_needed = num_sensors - targets;
        let eligible: Vec<String> = by_identity
            .iter()
            .filter(|(_, idx)| idx.len() > targets && store.len() - idx.len() >= distractors_needed)
            .map(|(label, _)| label.clone())
            .collect();
        if eligible.is_empty() {
            return Err(Error::config(format!(
                "no identity has {} samples (query + {targets} target views) with {distractors_needed} \
                 distractor samples elsewhere",
                targets + 1
            )));
        }
        Ok(Self {
            store,
            by_identity,
            eligible,
            num_sensors,
            targets,
        })
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }

    /// Target identity uniform over eligible identities; query and target
    /// views drawn without replacement from it; distractor views drawn
    /// without replacement from all other identities; camera order shuffled;
    /// then one Exp(1) gain per camera.
    pub fn world(&self, master_seed: u64, trial: u64) -> World {
        let seed = trial_seed(master_seed, trial);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = self.store.records();

        let label = &self.eligible[rng.random_range(0..self.eligible.len())];
        let own = &self.by_identity[label];
        let picks = index::sample(&mut rng, own.len(), self.targets + 1);
        let mut picks = picks.into_iter().map(|i| own[i]);
        let query_idx = picks.next().expect("sample of size >= 1");
        let mut placed: Vec<(usize, bool)> = picks.map(|i| (i, true)).collect();

        let others: Vec<usize> = (0..records.len())
            .filter(|&i| records[i].identity_label != *label)
            .collect();
        let need = self.num_sensors - self.targets;
        placed.extend(
            index::sample(&mut rng, others.len(), need)
                .into_iter()
                .map(|i| (others[i], false)),
        );
        placed.shuffle(&mut rng);

        let sources = placed
            .into_iter()
            .enumerate()
            .map(|(cam, (idx, is_target))| {
                let mut record = records[idx].clone();
                record.contains_target = is_target;
                SourceNode::honest(format!("cam{cam:03}"), record, sample_power_gain(&mut rng))
            })
            .collect();

        let mut query = records[query_idx].clone();
        query.contains_target = true;
        World {
            trial,
            query,
            sources,
            selection_seed: mix(seed, SELECTION_STREAM),
        }
    }
}

/// One (scheme, k, quantization) combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub scheme: SchemeConfig,
    pub k: usize,
    pub spec: QuantizationSpec,
}

/// A prepared experiment: validated config plus loaded embeddings.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    sampler: WorldSampler,
}

impl Experiment {
    pub fn new(mut config: ExperimentConfig) -> Result<Self> {
        let store = match &config.embedding_source {
            EmbeddingSource::Synthetic(s) => {
                let mut s = s.clone();
                s.dimension = config.dimension;
                generate_synthetic(&s)?
            }
            EmbeddingSource::File(path) => {
                let store = load_embeddings(path)?;
                config.dimension = store.dimension();
                store
            }
        };
        config.validate()?;
        let sampler = WorldSampler::new(store, config.num_sensors, config.targets_per_trial)?;
        Ok(Self { config, sampler })
    }

    pub fn sampler(&self) -> &WorldSampler {
        &self.sampler
    }

    pub fn world(&self, trial: u64) -> World {
        self.sampler.world(self.config.master_seed, trial)
    }

    pub fn cells(&self) -> Result<Vec<Cell>> {
        let mut cells = Vec::new();
        for scheme in &self.config.schemes {
            for &k in &self.config.k_sweep {
                for q in &self.config.quantization_sweep {
                    cells.push(Cell {
                        scheme: *scheme,
                        k,
                        spec: q.resolve(self.config.dimension)?,
                    });
                }
            }
        }
        Ok(cells)
    }

    pub fn round_params(&self, cell: &Cell) -> RoundParams {
        RoundParams {
            scheme: cell.scheme,
            k: cell.k,
            spec: cell.spec,
            budget: self.config.budget(),
            score_mode: self.config.score_mode,
            candidate_rate_bandwidth_hz: self.config.candidate_rate_bandwidth_hz,
            verify_threshold: None,
            task_descriptor: "reid".into(),
        }
    }

    /// Runs one cell on one world.
    pub fn run_cell(&self, world: &World, cell: &Cell) -> Result<RoundOutcome> {
        let mut rng = ChaCha8Rng::seed_from_u64(world.selection_seed);
        run_round(&world.query, &world.sources, &self.round_params(cell), &mut rng)
    }

    pub fn run(&self) -> Result<Vec<MetricsRow>> {
        let cells = self.cells()?;
        let per_trial: Vec<Vec<TrialStat>> = (0..self.config.trials as u64)
            .into_par_iter()
            .map(|t| {
                let world = self.world(t);
                cells
                    .iter()
                    .map(|cell| self.run_cell(&world, cell).map(|o| TrialStat::from(&o)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;

        let mut rows: Vec<MetricsRow> = cells
            .iter()
            .enumerate()
            .map(|(c, cell)| MetricsRow::aggregate(cell, per_trial.iter().map(|t| &t[c])))
            .collect();
        sort_rows(&mut rows);
        Ok(rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct TrialStat {
    missing: bool,
    latency_ms: f64,
    uplink_bits: u64,
    downlink_bits: u64,
}

impl From<&RoundOutcome> for TrialStat {
    fn from(o: &RoundOutcome) -> Self {
        Self {
            missing: o.missing,
            latency_ms: o.accounting.latency_ms,
            uplink_bits: o.accounting.uplink_bits,
            downlink_bits: o.accounting.downlink_bits,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub scheme: String,
    pub k: usize,
    pub bits_per_dim: u32,
    pub kept_dims: usize,
    pub trials: usize,
    pub missing_rate: f64,
    pub avg_latency_ms: f64,
    pub avg_uplink_mbits: f64,
    /// Query bits broadcast per trial.
    pub downlink_bits: u64,
    /// Half-width of the 95% Wilson interval on `missing_rate`.
    pub ci95_missing: f64,
}

impl MetricsRow {
    fn aggregate<'a>(cell: &Cell, stats: impl Iterator<Item = &'a TrialStat>) -> Self {
        let (mut n, mut missing, mut latency, mut uplink) = (0usize, 0usize, 0.0, 0u128);
        let mut downlink = 0;
        for s in stats {
            n += 1;
            missing += usize::from(s.missing);
            latency += s.latency_ms;
            uplink += u128::from(s.uplink_bits);
            downlink = s.downlink_bits;
        }
        let (lo, hi) = wilson_interval(missing, n);
        Self {
            scheme: cell.scheme.to_string(),
            k: cell.k,
            bits_per_dim: cell.spec.bits_per_dimension,
            kept_dims: cell.spec.kept_dimensions,
            trials: n,
            missing_rate: missing as f64 / n as f64,
            avg_latency_ms: latency / n as f64,
            avg_uplink_mbits: uplink as f64 / n as f64 / 1e6,
            downlink_bits: downlink,
            ci95_missing: (hi - lo) / 2.0,
        }
    }
}

pub(crate) fn sort_rows(rows: &mut [MetricsRow]) {
    rows.sort_by(|a, b| {
        (&a.scheme, a.k, a.kept_dims, a.bits_per_dim).cmp(&(&b.scheme, b.k, b.kept_dims, b.bits_per_dim))
    });
}

/// 95% Wilson score interval for `successes` out of `n`.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    const Z: f64 = 1.959_963_984_540_054;
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let z2 = Z * Z;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = Z / denom * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt();
    let lo = if successes == 0 {
        0.0
    } else {
        (center - half).max(0.0)
    };
    let hi = if successes == n {
        1.0
    } else {
        (center + half).min(1.0)
    };
    (lo, hi)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    Experiment::new(config.clone())?.run()
}

/// One experiment per quantization setting, same seeds throughout.
pub fn sweep_quantization(config: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    if config.quantization_sweep.is_empty() {
        return Err(Error::config("quantization_sweep must not be empty"));
    }
    let mut rows = Vec::new();
    for q in &config.quantization_sweep {
        let mut single = config.clone();
        single.quantization_sweep = vec![*q];
        rows.extend(run_experiment(&single)?);
    }
    sort_rows(&mut rows);
    Ok(rows)
}

/// Probability that `k` uniform picks from `n` sources all miss the `t`
/// target holders: `C(n - t, k) / C(n, k)`.
pub fn hypergeometric_miss(n: usize, t: usize, k: usize) -> f64 {
    if k > n - t {
        return 0.0;
    }
    (0..k).map(|i| (n - t - i) as f64 / (n - i) as f64).product()
}
