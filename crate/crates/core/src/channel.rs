//! Uplink model: i.i.d. Rayleigh fading, orthogonal equal-share channels and
//! Shannon-rate transfer times.

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};

/// Smallest power gain a draw can produce. Keeps latency finite under
/// floating-point underflow.
pub const GAIN_FLOOR: f64 = 1e-12;

/// `|h|²` for one link, unit mean.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ChannelState {
    power_gain: f64,
}

impl ChannelState {
    pub fn new(power_gain: f64) -> Result<Self> {
        if !(power_gain >= 0.0 && power_gain.is_finite()) {
            return Err(Error::invalid(format!(
                "power gain {power_gain} must be finite and >= 0"
            )));
        }
        Ok(Self { power_gain })
    }

    pub fn power_gain(self) -> f64 {
        self.power_gain
    }
}

/// Rayleigh amplitude means exponential power; drawn from Exp(1).
pub fn sample_power_gain<R: Rng + ?Sized>(rng: &mut R) -> ChannelState {
    let g: f64 = Exp1.sample(rng);
    ChannelState {
        power_gain: g.max(GAIN_FLOOR),
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Shannon rate in bit/s: `B · log2(1 + snr · |h|²)`.
pub fn achievable_rate(bandwidth_hz: f64, avg_snr_db: f64, gain: ChannelState) -> f64 {
    bandwidth_hz * (1.0 + db_to_linear(avg_snr_db) * gain.power_gain).log2()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkBudget {
    pub total_bandwidth_hz: f64,
    pub avg_snr_db: f64,
    pub payload_bits_per_source: u64,
}

impl Default for LinkBudget {
    fn default() -> Self {
        Self {
            total_bandwidth_hz: 5e6,
            avg_snr_db: 10.0,
            payload_bits_per_source: 1_000_000,
        }
    }
}

impl LinkBudget {
    pub fn validate(&self) -> Result<()> {
        if !(self.total_bandwidth_hz > 0.0 && self.total_bandwidth_hz.is_finite()) {
            return Err(Error::config("bandwidth_hz must be finite and > 0"));
        }
        if !self.avg_snr_db.is_finite() {
            return Err(Error::config("avg_snr_db must be finite"));
        }
        if self.payload_bits_per_source == 0 {
            return Err(Error::config("payload_bits must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UploadAccounting {
    /// Rate each uploading source achieved on its share, in upload order.
    pub per_source_rate_bps: Vec<(String, f64)>,
    pub latency_ms: f64,
    pub uplink_bits: u64,
    pub downlink_bits: u64,
    /// Some uploading source had zero rate; latency is infinite.
    pub outage: bool,
}

impl UploadAccounting {
    /// A round in which the query went out but nothing was uploaded.
    pub fn query_only(query_bits: u64) -> Self {
        Self {
            per_source_rate_bps: Vec::new(),
            latency_ms: 0.0,
            uplink_bits: 0,
            downlink_bits: query_bits,
            outage: false,
        }
    }
}

/// Splits the band equally among the `k` uploaders, which transmit in
/// parallel; latency is the slowest transfer.
pub fn account_upload(
    selected: &[(String, ChannelState)],
    budget: &LinkBudget,
    query_bits: u64,
) -> Result<UploadAccounting> {
    if selected.is_empty() {
        return Err(Error::invalid(
            "account_upload needs at least one selected source",
        ));
    }
    budget.validate()?;
    let k = selected.len();
    let share = budget.total_bandwidth_hz / k as f64;
    let payload = budget.payload_bits_per_source as f64;

    let mut worst_s: f64 = 0.0;
    let mut outage = false;
    let per_source_rate_bps = selected
        .iter()
        .map(|(id, gain)| {
            let rate = achievable_rate(share, budget.avg_snr_db, *gain);
            if rate > 0.0 {
                worst_s = worst_s.max(payload / rate);
            } else {
                outage = true;
            }
            (id.clone(), rate)
        })
        .collect();

    Ok(UploadAccounting {
        per_source_rate_bps,
        latency_ms: if outage { f64::INFINITY } else { 1000.0 * worst_s },
        uplink_bits: k as u64 * budget.payload_bits_per_source,
        downlink_bits: query_bits,
        outage,
    })
}
