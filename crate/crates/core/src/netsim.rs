//! Simulated wall clock: payload bytes to transfer seconds over an LTE-like
//! link, synchronous round barriers, and convergence-time bookkeeping.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NetError {
    #[error("link rate must be positive, got {0} Mbps")]
    NonPositiveRate(f64),
    #[error("invalid rate range [{0}, {1}]")]
    InvalidRange(f64, f64),
    #[error("compute time must be non-negative, got {0}")]
    NegativeCompute(f64),
    #[error("round has no participating clients")]
    NoClients,
    #[error("{0} run never reached the target accuracy")]
    NotConverged(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RateSampling {
    /// One (down, up) pair per round, shared by every client.
    #[default]
    PerRound,
    /// One pair drawn at the start of the experiment.
    PerExperiment,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub down_mbps: (f64, f64),
    pub up_mbps: (f64, f64),
    pub sampling: RateSampling,
    pub compute_seconds: f64,
}

impl Default for NetworkModel {
    fn default() -> Self {
        Self {
            down_mbps: (5.0, 12.0),
            up_mbps: (2.0, 5.0),
            sampling: RateSampling::PerRound,
            compute_seconds: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkRates {
    pub down_mbps: f64,
    pub up_mbps: f64,
}

impl NetworkModel {
    pub fn validate(&self) -> Result<(), NetError> {
        for &(lo, hi) in &[self.down_mbps, self.up_mbps] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(NetError::InvalidRange(lo, hi));
            }
        }
        if !(self.compute_seconds >= 0.0) {
            return Err(NetError::NegativeCompute(self.compute_seconds));
        }
        Ok(())
    }

    /// Uniform draw inside both configured ranges.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> LinkRates {
        let draw = |rng: &mut R, (lo, hi): (f64, f64)| if lo == hi { lo } else { rng.random_range(lo..=hi) };
        LinkRates {
            down_mbps: draw(rng, self.down_mbps),
            up_mbps: draw(rng, self.up_mbps),
        }
    }
}

/// Seconds to move `bytes` over a `rate_mbps` link (1 Mbps = 10^6 bit/s).
pub fn transfer_seconds(bytes: usize, rate_mbps: f64) -> Result<f64, NetError> {
    if !(rate_mbps > 0.0) {
        return Err(NetError::NonPositiveRate(rate_mbps));
    }
    Ok(bytes as f64 * 8.0 / (rate_mbps * 1e6))
}

/// Synchronous round time: the slowest client's download, compute and upload.
pub fn round_time(clients: &[(usize, usize)], rates: LinkRates, compute_seconds: f64) -> Result<f64, NetError> {
    if clients.is_empty() {
        return Err(NetError::NoClients);
    }
    let mut worst = 0.0f64;
    for &(down, up) in clients {
        let t = transfer_seconds(down, rates.down_mbps)? + compute_seconds + transfer_seconds(up, rates.up_mbps)?;
        worst = worst.max(t);
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClockEntry {
    pub down_seconds: f64,
    pub up_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClockLedger {
    cumulative_seconds: f64,
    entries: Vec<ClockEntry>,
}

impl ClockLedger {
    pub fn record(&mut self, entry: ClockEntry) {
        self.cumulative_seconds += entry.total_seconds;
        self.entries.push(entry);
    }

    pub fn cumulative_seconds(&self) -> f64 {
        self.cumulative_seconds
    }

    pub fn entries(&self) -> &[ClockEntry] {
        &self.entries
    }
}

/// Cumulative minutes at the first row whose accuracy reaches `target`.
/// Rows are `(cumulative seconds, accuracy)` in evaluation order.
pub fn convergence_time(rows: &[(f64, f64)], target: f64) -> Option<f64> {
    rows.iter().find(|&&(_, acc)| acc >= target).map(|&(s, _)| s / 60.0)
}

pub fn speedup_ratio(baseline_minutes: Option<f64>, variant_minutes: Option<f64>) -> Result<f64, NetError> {
    let b = baseline_minutes.ok_or(NetError::NotConverged("baseline"))?;
    let v = variant_minutes.ok_or(NetError::NotConverged("variant"))?;
    if !(v > 0.0) {
        return Err(NetError::NonPositiveRate(v));
    }
    Ok(b / v)
}
