use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::aggregation::Mixing;
use crate::cost::{CostWeights, ResourceConfig};
use crate::error::invalid;
use crate::learner::{LearnerSpec, LrSchedule, PartitionScheme, SyntheticSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Synchronous client-edge, asynchronous edge-cloud.
    Hifl,
    /// HiFL driven by a learned staleness controller and the greedy
    /// heterogeneity-aware association.
    Hiflash,
    /// Synchronous rounds of sampled clients, no edge layer.
    Fedavg,
    /// Per-client asynchronous uploads, no edge layer.
    Fedasync,
    /// Synchronous at both levels with sampled edges and clients.
    Hierfavg,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Hifl => "hifl",
            Method::Hiflash => "hiflash",
            Method::Fedavg => "fedavg",
            Method::Fedasync => "fedasync",
            Method::Hierfavg => "hierfavg",
        }
    }

    pub fn is_async(&self) -> bool {
        matches!(self, Method::Hifl | Method::Hiflash | Method::Fedasync)
    }

    pub fn uses_edges(&self) -> bool {
        matches!(self, Method::Hifl | Method::Hiflash | Method::Hierfavg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: SyntheticSpec,
    pub partition: PartitionScheme,
    pub num_clients: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "strategy", deny_unknown_fields)]
pub enum AssociationConfig {
    Greedy { lambda: f64 },
    EdgeIid,
    EdgeNoniid,
    LatencyOnly,
    Random,
    /// Explicit clusters, one list of client indices per edge.
    Explicit { clusters: Vec<Vec<usize>> },
}

impl AssociationConfig {
    pub fn label(&self) -> &'static str {
        match self {
            AssociationConfig::Greedy { .. } => "greedy",
            AssociationConfig::EdgeIid => "edge_iid",
            AssociationConfig::EdgeNoniid => "edge_noniid",
            AssociationConfig::LatencyOnly => "latency_only",
            AssociationConfig::Random => "random",
            AssociationConfig::Explicit { .. } => "explicit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum PolicyConfig {
    Fixed { k: u64 },
    /// No staleness control.
    Unlimited,
    /// Uniform threshold in `0..=tau_max` per check-in.
    Random,
    /// Greedy policy from a trained Q-network checkpoint.
    Ddqn { checkpoint: PathBuf },
    /// One action per edge; `-1` rejects.
    PerEdge { thresholds: Vec<i64> },
}

impl PolicyConfig {
    pub fn label(&self) -> String {
        match self {
            PolicyConfig::Fixed { k } => format!("fixed-{k}"),
            PolicyConfig::Unlimited => "unlimited".into(),
            PolicyConfig::Random => "random".into(),
            PolicyConfig::Ddqn { .. } => "ddqn".into(),
            PolicyConfig::PerEdge { thresholds } => {
                let parts: Vec<String> = thresholds.iter().map(|t| t.to_string()).collect();
                format!("per-edge-{}", parts.join("_"))
            }
        }
    }
}

/// Client-edge aggregations per edge round; each edge draws its own `H`
/// uniformly from `[h_min, h_max]` once per run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundsConfig {
    pub h_min: usize,
    pub h_max: usize,
}

/// Sampling sizes of the synchronous baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub fedavg_clients: usize,
    pub hierfavg_clients_per_edge: usize,
    pub hierfavg_edges: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { fedavg_clients: 10, hierfavg_clients_per_edge: 5, hierfavg_edges: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub sim: u64,
    pub agent: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self { data: seed, sim: seed, agent: seed }
    }
}

/// Full description of one simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub method: Method,
    pub learner: LearnerSpec,
    pub data: DataConfig,
    pub association: AssociationConfig,
    pub num_edges: usize,
    pub rounds: RoundsConfig,
    /// Local steps `c` per client-edge aggregation.
    pub local_steps: usize,
    /// Mini-batch size, 0 for full batch.
    #[serde(default)]
    pub batch_size: usize,
    pub lr: LrSchedule,
    #[serde(default)]
    pub mixing: Mixing,
    pub policy: PolicyConfig,
    #[serde(default)]
    pub weights: CostWeights,
    pub tau_max: u64,
    pub target_accuracy: f64,
    pub max_slots: u64,
    /// Seconds represented by one slot.
    pub slot_seconds: f64,
    /// Extra accuracy evaluation every this many slots; 0 evaluates only at
    /// cloud updates.
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default)]
    pub resources: ResourceConfig,
    #[serde(default)]
    pub baselines: BaselineConfig,
    /// Slots a rejected or held edge waits before checking in again.
    #[serde(default = "one_slot")]
    pub reject_backoff: u64,
    /// Cap on concurrently running edges; `None` leaves it to the policy.
    #[serde(default)]
    pub max_concurrent: Option<usize>,
    pub seeds: Seeds,
}

fn one_slot() -> u64 {
    1
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.learner.validate()?;
        let syn = &self.data.synthetic;
        if syn.feature_dim != self.learner.feature_dim || syn.num_classes != self.learner.num_classes {
            return Err(invalid("learner shape does not match the synthetic data"));
        }
        if syn.num_test == 0 {
            return Err(invalid("data.synthetic.num_test must be positive to evaluate accuracy"));
        }
        if self.data.num_clients == 0 {
            return Err(invalid("data.num_clients must be positive"));
        }
        if self.method.uses_edges() && self.num_edges == 0 {
            return Err(invalid("num_edges must be positive"));
        }
        if self.rounds.h_min == 0 || self.rounds.h_max < self.rounds.h_min {
            return Err(invalid("rounds must satisfy 1 <= h_min <= h_max"));
        }
        if self.local_steps == 0 {
            return Err(invalid("local_steps must be positive"));
        }
        if !(self.lr.initial > 0.0 && self.lr.initial.is_finite()) || !(self.lr.decay_rate > 0.0) {
            return Err(invalid("learning rate and decay rate must be positive"));
        }
        self.mixing.validate()?;
        self.weights.validate()?;
        self.resources.validate()?;
        if !(0.0..=1.0).contains(&self.target_accuracy) {
            return Err(invalid("target_accuracy must lie in [0, 1]"));
        }
        if self.max_slots == 0 {
            return Err(invalid("max_slots must be positive"));
        }
        if !(self.slot_seconds > 0.0 && self.slot_seconds.is_finite()) {
            return Err(invalid("slot_seconds must be positive"));
        }
        if self.reject_backoff == 0 {
            return Err(invalid("reject_backoff must be at least one slot"));
        }
        if self.max_concurrent == Some(0) {
            return Err(invalid("max_concurrent must be positive"));
        }
        match &self.policy {
            PolicyConfig::Fixed { k } if *k > self.tau_max => {
                return Err(invalid(format!("fixed threshold {k} exceeds tau_max = {}", self.tau_max)));
            }
            PolicyConfig::PerEdge { thresholds } => {
                if thresholds.len() != self.num_units() {
                    return Err(invalid(format!("per_edge policy needs {} thresholds", self.num_units())));
                }
                if thresholds.iter().any(|t| *t < -1 || *t > self.tau_max as i64) {
                    return Err(invalid("per_edge thresholds must lie in -1..=tau_max"));
                }
            }
            _ => {}
        }
        if self.method == Method::Hiflash {
            if !matches!(self.policy, PolicyConfig::Ddqn { .. }) {
                return Err(invalid("method hiflash needs a ddqn policy"));
            }
            if !matches!(self.association, AssociationConfig::Greedy { .. }) {
                return Err(invalid("method hiflash needs the greedy association"));
            }
        }
        if let AssociationConfig::Greedy { lambda } = self.association {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(invalid("association lambda must be finite and non-negative"));
            }
        }
        let b = self.baselines;
        if b.fedavg_clients == 0 || b.hierfavg_clients_per_edge == 0 || b.hierfavg_edges == 0 {
            return Err(invalid("baseline sample sizes must be positive"));
        }
        Ok(())
    }

    /// Asynchronous units: edges, or clients for FedAsync.
    pub fn num_units(&self) -> usize {
        match self.method {
            Method::Fedasync | Method::Fedavg => self.data.num_clients,
            _ => self.num_edges,
        }
    }

    /// Hex SHA-256 of the canonical JSON form plus the crate version.
    pub fn hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self)?;
        let mut h = Sha256::new();
        h.update(env!("CARGO_PKG_VERSION").as_bytes());
        h.update([0u8]);
        h.update(json.as_bytes());
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    /// A small single-class-client HiFL setup used in docs and tests.
    pub fn example() -> Self {
        SimConfig {
            method: Method::Hifl,
            learner: LearnerSpec::logistic(5, 4, 0.01),
            data: DataConfig {
                synthetic: SyntheticSpec::new(400, 4, 5, 3.0).with_test(200),
                partition: PartitionScheme::Noniid2,
                num_clients: 8,
            },
            association: AssociationConfig::Greedy { lambda: 300.0 },
            num_edges: 2,
            rounds: RoundsConfig { h_min: 1, h_max: 3 },
            local_steps: 3,
            batch_size: 0,
            lr: LrSchedule::constant(0.1),
            mixing: Mixing::default(),
            policy: PolicyConfig::Fixed { k: 2 },
            weights: CostWeights::default(),
            tau_max: 4,
            target_accuracy: 0.8,
            max_slots: 2000,
            slot_seconds: 0.05,
            eval_every: 0,
            resources: ResourceConfig::default(),
            baselines: BaselineConfig::default(),
            reject_backoff: 1,
            max_concurrent: None,
            seeds: Seeds::all(0),
        }
    }
}

impl std::str::FromStr for SimConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let cfg: SimConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
