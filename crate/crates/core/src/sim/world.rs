use rand::Rng;

use super::config::{AssociationConfig, SimConfig};
use crate::aggregation::LocalClient;
use crate::association::{
    associate, reference_association, total_js, Association, AssociationInstance, ReferenceStrategy,
};
use crate::cost::{client_edge_cost, edge_latency, train_slots, waiting_time, ClientEdgeCost, ClientResources};
use crate::error::invalid;
use crate::learner::{generate_synthetic, label_distribution, partition, Dataset, LabelDistribution, LearnerSpec, ParamVector};
use crate::rng;
use crate::{Error, Result};

/// A group of clients that trains and uploads as one: an edge and its
/// cluster, or a single client for the cloud-direct baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub members: Vec<usize>,
    /// Client-edge aggregations per round (`H`).
    pub rounds: usize,
    /// Computation cost of one round, `H * Σ_k c D_k ζ_k / f_k`.
    pub round_comp: f64,
    /// Communication cost of one round, `H * Σ_k` upload time.
    pub round_comm: f64,
    /// Slowest member's latency per client-edge aggregation.
    pub latency: f64,
    pub waiting: f64,
    /// Round duration in slots.
    pub slots: u64,
    /// Client epochs consumed by one round.
    pub epochs_per_round: f64,
}

/// Everything fixed before the first slot.
#[derive(Debug, Clone)]
pub struct World {
    pub spec: LearnerSpec,
    pub clients: Vec<LocalClient>,
    pub test: Dataset,
    pub resources: Vec<ClientResources>,
    /// Jitter-free costs, `costs[edge][client]`.
    pub costs: Vec<Vec<Option<ClientEdgeCost>>>,
    pub instance: Option<AssociationInstance>,
    pub association: Option<Association>,
    pub units: Vec<Unit>,
    pub init_model: ParamVector,
    /// Epochs represented by one local update of each client.
    pub epochs_per_update: Vec<f64>,
}

impl World {
    pub fn build(cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.learner;
        let (train, test) = generate_synthetic(&cfg.data.synthetic, cfg.seeds.data)?;
        let shards = partition(&train, cfg.data.partition, cfg.data.num_clients, cfg.seeds.data)?;
        let n = shards.len();
        let batches: Vec<usize> = shards
            .iter()
            .map(|s| if cfg.batch_size == 0 || cfg.batch_size >= s.len() { s.len() } else { cfg.batch_size })
            .collect();
        let epochs_per_update: Vec<f64> = shards.iter().zip(&batches).map(|(s, b)| *b as f64 / s.len() as f64).collect();
        let num_edges = cfg.num_edges.max(1);
        let resources = cfg.resources.sample_profiles(&batches, num_edges, cfg.seeds.data)?;
        let costs: Vec<Vec<Option<ClientEdgeCost>>> = (0..num_edges)
            .map(|m| {
                resources
                    .iter()
                    .map(|r| client_edge_cost(r, m, cfg.local_steps, cfg.resources.model_params, cfg.resources.snr_db))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;

        let mut rounds_rng = rng::stream(cfg.seeds.data, "edge-rounds", 0);
        let (instance, association, units) = if cfg.method.uses_edges() {
            let inst = association_instance(cfg, &shards.iter().map(|s| &s.data).collect::<Vec<_>>(), &costs)?;
            let assoc = build_association(cfg, &inst)?;
            let mut units = Vec::with_capacity(cfg.num_edges);
            for (m, cluster) in assoc.clusters.iter().enumerate() {
                let h = rounds_rng.random_range(cfg.rounds.h_min..=cfg.rounds.h_max);
                units.push(make_unit(cfg, m, cluster.clone(), h, &costs, &epochs_per_update)?);
            }
            (Some(inst), Some(assoc), units)
        } else {
            // cloud-direct baselines upload over the first edge's link
            let units = (0..n)
                .map(|k| make_unit(cfg, 0, vec![k], 1, &costs, &epochs_per_update))
                .collect::<Result<Vec<_>>>()?;
            (None, None, units)
        };
        let clients = shards.into_iter().map(|s| LocalClient::new(s, cfg.seeds.sim)).collect();
        Ok(World {
            spec,
            clients,
            test,
            resources,
            costs,
            instance,
            association,
            units,
            init_model: spec.init_params(cfg.seeds.data),
            epochs_per_update,
        })
    }

    pub fn total_js(&self) -> Result<Option<f64>> {
        match (&self.association, &self.instance) {
            (Some(a), Some(i)) => Ok(Some(total_js(a, i)?)),
            _ => Ok(None),
        }
    }

    /// Mean client response latency under its unit.
    pub fn mean_response_latency(&self) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for (m, u) in self.units.iter().enumerate() {
            let edge = if self.association.is_some() { m } else { 0 };
            for &k in &u.members {
                if let Some(c) = self.costs[edge][k] {
                    total += c.latency();
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }

    pub fn mean_waiting_time(&self) -> f64 {
        let active: Vec<&Unit> = self.units.iter().filter(|u| !u.members.is_empty()).collect();
        if active.is_empty() {
            return 0.0;
        }
        active.iter().map(|u| u.waiting).sum::<f64>() / active.len() as f64
    }
}

fn association_instance(cfg: &SimConfig, shards: &[&Dataset], costs: &[Vec<Option<ClientEdgeCost>>]) -> Result<AssociationInstance> {
    let k = cfg.learner.num_classes;
    let distributions: Vec<LabelDistribution> = shards.iter().map(|d| label_distribution(d, k)).collect::<Result<_>>()?;
    let sizes = shards.iter().map(|d| d.len()).collect();
    let latency = costs.iter().map(|row| row.iter().map(|c| c.map(|c| c.latency())).collect()).collect();
    let lambda = match cfg.association {
        AssociationConfig::Greedy { lambda } => lambda,
        _ => 0.0,
    };
    AssociationInstance::new(distributions, sizes, latency, lambda)
}

fn build_association(cfg: &SimConfig, inst: &AssociationInstance) -> Result<Association> {
    let seed = cfg.seeds.data;
    let assoc = match &cfg.association {
        AssociationConfig::Greedy { .. } => associate(inst, seed)?,
        AssociationConfig::EdgeIid => reference_association(inst, ReferenceStrategy::EdgeIid, seed)?,
        AssociationConfig::EdgeNoniid => reference_association(inst, ReferenceStrategy::EdgeNoniid, seed)?,
        AssociationConfig::LatencyOnly => reference_association(inst, ReferenceStrategy::LatencyOnly, seed)?,
        AssociationConfig::Random => reference_association(inst, ReferenceStrategy::Random, seed)?,
        AssociationConfig::Explicit { clusters } => {
            let a = Association { clusters: clusters.clone() };
            a.validate(inst)?;
            a
        }
    };
    if assoc.clusters.len() != cfg.num_edges {
        return Err(Error::Protocol("association has the wrong number of edges".into()));
    }
    Ok(assoc)
}

fn make_unit(
    cfg: &SimConfig,
    edge: usize,
    members: Vec<usize>,
    rounds: usize,
    costs: &[Vec<Option<ClientEdgeCost>>],
    epochs_per_update: &[f64],
) -> Result<Unit> {
    if members.is_empty() {
        return Ok(Unit {
            members,
            rounds,
            round_comp: 0.0,
            round_comm: 0.0,
            latency: 0.0,
            waiting: 0.0,
            slots: 1,
            epochs_per_round: 0.0,
        });
    }
    let member_costs: Vec<ClientEdgeCost> = members
        .iter()
        .map(|&k| costs[edge][k].ok_or_else(|| invalid(format!("client {k} is out of range of edge {edge}"))))
        .collect::<Result<_>>()?;
    let latencies: Vec<f64> = member_costs.iter().map(|c| c.latency()).collect();
    let latency = edge_latency(&latencies)?;
    let h = rounds as f64;
    let updates = (rounds * cfg.local_steps) as f64;
    Ok(Unit {
        round_comp: h * member_costs.iter().map(|c| c.comp).sum::<f64>(),
        round_comm: h * member_costs.iter().map(|c| c.comm).sum::<f64>(),
        latency,
        waiting: waiting_time(&latencies)?,
        slots: train_slots(rounds, latency, cfg.slot_seconds)?,
        epochs_per_round: members.iter().map(|&k| updates * epochs_per_update[k]).sum(),
        members,
        rounds,
    })
}

/// Fraction of `test` whose argmax prediction matches the label.
pub fn evaluate(spec: &LearnerSpec, model: &ParamVector, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    model.check_len(spec.num_params())?;
    let correct = test.samples.iter().filter(|s| spec.predict(model, &s.features) == s.label).count();
    Ok(correct as f64 / test.len() as f64)
}
