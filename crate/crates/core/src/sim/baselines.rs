use rand::seq::index::sample;

use super::config::{Method, SimConfig};
use super::log::{EventKind, EventLog, MetricsRecord, Outcome, FORMAT_VERSION};
use super::world::{evaluate, World};
use crate::aggregation::{client_edge_round, LocalClient, LocalTraining};
use crate::cost::{edge_latency, train_slots, Jitter};
use crate::error::invalid;
use crate::learner::ParamVector;
use crate::mdp::reward;
use crate::rng;
use crate::{Error, Result};

/// One synchronous global round: who took part and what it cost.
struct Round {
    model: ParamVector,
    slots: u64,
    comp: f64,
    comm: f64,
    epochs: f64,
    uploads: u64,
}

/// FedAvg and HierFAVG: synchronous rounds until the target accuracy or the
/// slot budget. A round that would overrun the budget is not applied.
pub fn run_sync(cfg: &SimConfig) -> Result<EventLog> {
    if cfg.method.is_async() {
        return Err(invalid(format!("method {} is not synchronous", cfg.method.name())));
    }
    let mut world = World::build(cfg)?;
    let training = LocalTraining { learner: cfg.learner, local_steps: cfg.local_steps, batch_size: cfg.batch_size };
    let mut sampler = rng::stream(cfg.seeds.sim, "participants", 0);
    let mut jitter = Jitter::new(cfg.resources.jitter, cfg.seeds.sim);
    let mut model = world.init_model.clone();
    let mut accuracy = evaluate(&world.spec, &model, &world.test)?;
    let mut best = accuracy;
    let (mut slot, mut t_c, mut comms) = (0u64, 0u64, 0u64);
    let (mut epochs, mut comp, mut comm) = (0.0, 0.0, 0.0);
    let mut records = Vec::new();
    let mut rewards = Vec::new();
    let mut reached = false;
    while !reached {
        let lr = cfg.lr.at(epochs as u64);
        let round = match cfg.method {
            Method::Fedavg => fedavg_round(cfg, &mut world, &model, &training, lr, &mut sampler)?,
            _ => hierfavg_round(cfg, &mut world, &model, &training, lr, &mut sampler)?,
        };
        if slot + round.slots > cfg.max_slots {
            break;
        }
        if !round.model.is_finite() {
            return Err(Error::Divergence(format!("global model has non-finite entries (round {t_c}); lower the learning rate")));
        }
        for i in 0..round.slots {
            let j = jitter.sample();
            let c = round.comp / round.slots as f64 * j;
            let m = if i + 1 == round.slots { round.comm * jitter.sample() } else { 0.0 };
            comp += c;
            comm += m;
            rewards.push(reward(c, m, &cfg.weights));
        }
        slot += round.slots;
        model = round.model;
        t_c += 1;
        comms += round.uploads;
        epochs += round.epochs;
        accuracy = evaluate(&world.spec, &model, &world.test)?;
        best = best.max(accuracy);
        reached = accuracy >= cfg.target_accuracy;
        for (event, acc) in [(EventKind::CloudUpdate, None), (EventKind::Eval, Some(accuracy))] {
            records.push(MetricsRecord {
                slot: slot - 1,
                t_c,
                event,
                unit: None,
                action: None,
                tau: Some(0),
                accuracy: acc,
                epochs,
                comp_cost: comp,
                comm_cost: comm,
                cloud_comms: comms,
                discarded: 0,
            });
        }
    }
    if records.is_empty() {
        return Err(Error::Infeasible("slot budget too small for a single synchronous round".into()));
    }
    let waiting = match cfg.method {
        Method::Fedavg => {
            let lat: Vec<f64> = world.units.iter().map(|u| u.latency).collect();
            crate::cost::waiting_time(&lat)?
        }
        _ => world.mean_waiting_time(),
    };
    Ok(EventLog {
        version: FORMAT_VERSION,
        config_hash: cfg.hash()?,
        config: cfg.clone(),
        records,
        rewards,
        outcome: Outcome {
            reached_target: reached,
            slots: slot,
            final_accuracy: accuracy,
            best_accuracy: best,
            total_js: world.total_js()?,
            mean_response_latency: world.mean_response_latency(),
            mean_waiting_time: waiting,
            deferrals: 0,
        },
    })
}

/// Trains `members` for `rounds` client-edge aggregations from `start`.
fn train_group(world: &mut World, members: &[usize], start: &ParamVector, rounds: usize, training: &LocalTraining, lr: f64) -> Result<ParamVector> {
    let mut group: Vec<LocalClient> = members.iter().map(|&k| world.clients[k].clone()).collect();
    let mut model = start.clone();
    for _ in 0..rounds {
        model = client_edge_round(&mut group, &model, training, lr)?;
    }
    for (c, &k) in group.into_iter().zip(members) {
        world.clients[k] = c;
    }
    Ok(model)
}

fn fedavg_round(
    cfg: &SimConfig,
    world: &mut World,
    model: &ParamVector,
    training: &LocalTraining,
    lr: f64,
    rng: &mut rng::StreamRng,
) -> Result<Round> {
    let n = world.clients.len();
    let mut chosen = sample(rng, n, cfg.baselines.fedavg_clients.min(n)).into_vec();
    chosen.sort_unstable();
    let mut locals = Vec::with_capacity(chosen.len());
    for &k in &chosen {
        let w = train_group(world, &[k], model, 1, training, lr)?;
        locals.push((w, world.clients[k].data.len() as f64));
    }
    let next = ParamVector::weighted_average(locals.iter().map(|(w, s)| (w, *s)))?;
    let units: Vec<_> = chosen.iter().map(|&k| &world.units[k]).collect();
    let latency = edge_latency(&units.iter().map(|u| u.latency).collect::<Vec<_>>())?;
    Ok(Round {
        model: next,
        slots: train_slots(1, latency, cfg.slot_seconds)?,
        comp: units.iter().map(|u| u.round_comp).sum(),
        comm: units.iter().map(|u| u.round_comm).sum(),
        epochs: units.iter().map(|u| u.epochs_per_round).sum(),
        uploads: chosen.len() as u64,
    })
}

fn hierfavg_round(
    cfg: &SimConfig,
    world: &mut World,
    model: &ParamVector,
    training: &LocalTraining,
    lr: f64,
    rng: &mut rng::StreamRng,
) -> Result<Round> {
    let active: Vec<usize> = (0..world.units.len()).filter(|&m| !world.units[m].members.is_empty()).collect();
    if active.is_empty() {
        return Err(Error::Infeasible("no edge has any client".into()));
    }
    let mut edges: Vec<usize> =
        sample(rng, active.len(), cfg.baselines.hierfavg_edges.min(active.len())).into_iter().map(|i| active[i]).collect();
    edges.sort_unstable();
    let mut edge_models = Vec::with_capacity(edges.len());
    let (mut slots, mut comp, mut comm, mut epochs) = (0u64, 0.0, 0.0, 0.0);
    for &m in &edges {
        let unit = world.units[m].clone();
        let take = cfg.baselines.hierfavg_clients_per_edge.min(unit.members.len());
        let mut members: Vec<usize> = sample(rng, unit.members.len(), take).into_iter().map(|i| unit.members[i]).collect();
        members.sort_unstable();
        let w = train_group(world, &members, model, unit.rounds, training, lr)?;
        let weight: f64 = members.iter().map(|&k| world.clients[k].data.len() as f64).sum();
        edge_models.push((w, weight));
        let costs: Vec<_> = members.iter().map(|&k| world.costs[m][k].expect("associated clients are in range")).collect();
        let latency = edge_latency(&costs.iter().map(|c| c.latency()).collect::<Vec<_>>())?;
        slots = slots.max(train_slots(unit.rounds, latency, cfg.slot_seconds)?);
        let h = unit.rounds as f64;
        comp += h * costs.iter().map(|c| c.comp).sum::<f64>();
        comm += h * costs.iter().map(|c| c.comm).sum::<f64>();
        epochs += members.iter().map(|&k| (unit.rounds * cfg.local_steps) as f64 * world.epochs_per_update[k]).sum::<f64>();
    }
    let next = ParamVector::weighted_average(edge_models.iter().map(|(w, s)| (w, *s)))?;
    Ok(Round { model: next, slots, comp, comm, epochs, uploads: edges.len() as u64 })
}
