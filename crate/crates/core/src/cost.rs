//! Computation/communication cost and latency accounting.
//!
//! Costs are in seconds. Slots are an abstract time unit; an edge round's
//! duration in slots is derived from its latency by [`train_slots`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::rng;
use crate::{Error, Result};

pub const BITS_PER_PARAM: f64 = 32.0;
/// Processing density used in every default profile, in cycles per bit.
pub const DEFAULT_CYCLES_PER_BIT: f64 = 20.0;
pub const DEFAULT_SNR_DB: f64 = 17.0;
/// Parameter count of the reference image model whose upload time the
/// default profile charges.
pub const DEFAULT_MODEL_PARAMS: usize = 21_840;

/// Compute and network resources of one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientResources {
    /// CPU frequency in Hz.
    pub cpu_hz: f64,
    /// Processing density in cycles per bit.
    pub cycles_per_bit: f64,
    /// Training data processed per local iteration, in bits.
    pub bits_per_iteration: f64,
    /// Bandwidth to each edge in Hz; `None` when out of range.
    pub bandwidth_hz: Vec<Option<f64>>,
}

impl ClientResources {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("cpu_hz", self.cpu_hz),
            ("cycles_per_bit", self.cycles_per_bit),
            ("bits_per_iteration", self.bits_per_iteration),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if let Some(b) = self.bandwidth_hz.iter().flatten().find(|b| !(**b > 0.0 && b.is_finite())) {
            return Err(invalid(format!("bandwidth must be positive and finite, got {b}")));
        }
        Ok(())
    }
}

/// Penalty factors on computation and communication in the reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub sigma1: f64,
    pub sigma2: f64,
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma1 >= 0.0 && self.sigma2 >= 0.0 && self.sigma1.is_finite() && self.sigma2.is_finite()) {
            return Err(invalid("cost weights must be finite and non-negative"));
        }
        Ok(())
    }
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { sigma1: 1.0, sigma2: 1.0 }
    }
}

/// `c * D * ζ / f`.
pub fn client_comp_cost(res: &ClientResources, local_steps: usize) -> Result<f64> {
    if !(res.cpu_hz > 0.0) {
        return Err(invalid(format!("cpu frequency must be positive, got {}", res.cpu_hz)));
    }
    Ok(local_steps as f64 * res.bits_per_iteration * res.cycles_per_bit / res.cpu_hz)
}

pub fn snr_linear(snr_db: f64) -> f64 {
    10f64.powf(snr_db / 10.0)
}

/// Upload time of `model_params * 32` bits at Shannon rate `B log2(1 + SNR)`.
pub fn client_comm_cost(model_params: usize, bandwidth_hz: f64, snr_db: f64) -> Result<f64> {
    if !(bandwidth_hz > 0.0) {
        return Err(invalid(format!("bandwidth must be positive, got {bandwidth_hz}")));
    }
    if model_params == 0 {
        return Err(invalid("model size must be positive"));
    }
    let rate = bandwidth_hz * (1.0 + snr_linear(snr_db)).log2();
    Ok(model_params as f64 * BITS_PER_PARAM / rate)
}

/// Sum of client costs within one edge.
pub fn edge_cost(client_costs: &[f64]) -> f64 {
    client_costs.iter().sum()
}

/// Sum of per-edge costs over running edges.
pub fn slot_comp_cost(running: &[bool], per_edge: &[f64]) -> Result<f64> {
    if running.len() != per_edge.len() {
        return Err(Error::DimensionMismatch { expected: running.len(), found: per_edge.len() });
    }
    Ok(running.iter().zip(per_edge).filter(|(r, _)| **r).map(|(_, c)| c).sum())
}

/// Communication charged for edges that were running during the slot and are
/// no longer running after it.
pub fn slot_comm_cost(running: &[bool], still_running: &[bool], per_edge: &[f64]) -> Result<f64> {
    if running.len() != still_running.len() || running.len() != per_edge.len() {
        return Err(Error::DimensionMismatch { expected: running.len(), found: still_running.len().min(per_edge.len()) });
    }
    let mut total = 0.0;
    for m in 0..running.len() {
        match (running[m], still_running[m]) {
            (true, false) => total += per_edge[m],
            (false, true) => {
                return Err(Error::Protocol(format!("edge {m} became running during the completion phase")));
            }
            _ => {}
        }
    }
    Ok(total)
}

/// `L^{m,k} = l_comp + l_comm`.
pub fn response_latency(comp_seconds: f64, comm_seconds: f64) -> f64 {
    comp_seconds + comm_seconds
}

/// `L^m`: the slowest member's response latency.
pub fn edge_latency(latencies: &[f64]) -> Result<f64> {
    if latencies.is_empty() {
        return Err(invalid("edge latency of an empty cluster"));
    }
    Ok(latencies.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Mean excess latency over the fastest cluster member.
pub fn waiting_time(latencies: &[f64]) -> Result<f64> {
    if latencies.is_empty() {
        return Err(invalid("waiting time of an empty cluster"));
    }
    let fastest = latencies.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(latencies.iter().map(|l| l - fastest).sum::<f64>() / latencies.len() as f64)
}

/// Training duration in slots of an edge round of `rounds` client-edge
/// aggregations whose slowest member needs `edge_latency` seconds each.
pub fn train_slots(rounds: usize, edge_latency: f64, slot_seconds: f64) -> Result<u64> {
    if !(slot_seconds > 0.0) {
        return Err(invalid(format!("slot length must be positive, got {slot_seconds}")));
    }
    let slots = (rounds as f64 * edge_latency / slot_seconds).ceil();
    Ok((slots as u64).max(1))
}

/// Ranges for randomly drawn client profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceConfig {
    pub cpu_hz_range: (f64, f64),
    pub bandwidth_hz_range: (f64, f64),
    pub cycles_per_bit: f64,
    /// Bits of training data per sample.
    pub bits_per_sample: f64,
    pub snr_db: f64,
    /// Parameter count used for upload times. Independent of the simulated
    /// learner so that desk-scale models can carry realistic upload costs.
    pub model_params: usize,
    /// Per-slot multiplicative jitter range on realized costs; `None`
    /// disables it.
    pub jitter: Option<(f64, f64)>,
}

impl Default for ResourceConfig {
    fn default() -> Self {
        Self {
            cpu_hz_range: (1e9, 2e9),
            bandwidth_hz_range: (1e6, 10e6),
            cycles_per_bit: DEFAULT_CYCLES_PER_BIT,
            bits_per_sample: 28.0 * 28.0 * 8.0,
            snr_db: DEFAULT_SNR_DB,
            model_params: DEFAULT_MODEL_PARAMS,
            jitter: Some((0.8, 1.2)),
        }
    }
}

impl ResourceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("cpu_hz_range", self.cpu_hz_range), ("bandwidth_hz_range", self.bandwidth_hz_range)] {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(invalid(format!("{name} must satisfy 0 < low <= high, got ({lo}, {hi})")));
            }
        }
        if !(self.cycles_per_bit > 0.0 && self.bits_per_sample > 0.0) {
            return Err(invalid("cycles_per_bit and bits_per_sample must be positive"));
        }
        if self.model_params == 0 {
            return Err(invalid("model_params must be positive"));
        }
        if let Some((lo, hi)) = self.jitter {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(invalid(format!("jitter must satisfy 0 < low <= high, got ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    /// Draws one profile per client. `batch_sizes[k]` is the number of samples
    /// client `k` touches per local iteration. All edges are in range.
    pub fn sample_profiles(&self, batch_sizes: &[usize], num_edges: usize, seed: u64) -> Result<Vec<ClientResources>> {
        self.validate()?;
        let mut rng = rng::stream(seed, "resources", 0);
        let draw = |rng: &mut rng::StreamRng, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
        Ok(batch_sizes
            .iter()
            .map(|&b| {
                let cpu_hz = draw(&mut rng, self.cpu_hz_range);
                let bandwidth_hz = (0..num_edges).map(|_| Some(draw(&mut rng, self.bandwidth_hz_range))).collect();
                ClientResources {
                    cpu_hz,
                    cycles_per_bit: self.cycles_per_bit,
                    bits_per_iteration: b as f64 * self.bits_per_sample,
                    bandwidth_hz,
                }
            })
            .collect())
    }
}

/// Seeded per-slot multiplicative noise on realized costs.
#[derive(Debug, Clone)]
pub struct Jitter {
    range: Option<(f64, f64)>,
    rng: rng::StreamRng,
}

impl Jitter {
    pub fn new(range: Option<(f64, f64)>, seed: u64) -> Self {
        Self { range, rng: rng::stream(seed, "cost-jitter", 0) }
    }

    pub fn sample(&mut self) -> f64 {
        match self.range {
            Some((lo, hi)) if hi > lo => self.rng.random_range(lo..hi),
            Some((lo, _)) => lo,
            None => 1.0,
        }
    }
}

/// Jitter-free per-client latencies and costs under one edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientEdgeCost {
    pub comp: f64,
    pub comm: f64,
}

impl ClientEdgeCost {
    pub fn latency(&self) -> f64 {
        response_latency(self.comp, self.comm)
    }
}

/// Expected costs of client `res` under `edge`, `None` when out of range.
pub fn client_edge_cost(
    res: &ClientResources,
    edge: usize,
    local_steps: usize,
    model_params: usize,
    snr_db: f64,
) -> Result<Option<ClientEdgeCost>> {
    let Some(b) = res.bandwidth_hz.get(edge).copied().flatten() else {
        return Ok(None);
    };
    Ok(Some(ClientEdgeCost { comp: client_comp_cost(res, local_steps)?, comm: client_comm_cost(model_params, b, snr_db)? }))
}
