use std::collections::VecDeque;

use rand::seq::SliceRandom;

use super::config::{Method, PolicyConfig, SimConfig};
use super::log::{EventKind, EventLog, MetricsRecord, Outcome, FORMAT_VERSION};
use super::world::{evaluate, World};
use crate::aggregation::{cloud_update, edge_training, CloudState, LocalClient, LocalTraining, Threshold};
use crate::cost::Jitter;
use crate::ddqn::GreedyPolicy;
use crate::error::invalid;
use crate::learner::ParamVector;
use crate::mdp::{gate_admits, reward, EnvStep, Environment, FixedPolicy, MdpState, PerEdgePolicy, Policy, RandomPolicy, StalenessAction, StateScale};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone)]
struct Run {
    unit: usize,
    checked_in_at: u64,
    threshold: Threshold,
    model: ParamVector,
    remaining: u64,
    started: u64,
    comp_per_slot: f64,
}

/// Slotted engine for the asynchronous methods (HiFL, HiFlash, FedAsync).
///
/// Each slot: (1) at most one ready unit checks in and the policy answers;
/// (2) running units tick down and accrue computation; (3) at most one unit
/// completes, the earliest started winning ties and the others waiting one
/// more slot, and its upload is mixed into the cloud model or discarded;
/// (4) communication is charged for the completion and the slot reward is
/// recorded. Edge models are computed when a run starts because they only
/// depend on the cloud model at check-in.
#[derive(Debug, Clone)]
pub struct AsyncSim {
    cfg: SimConfig,
    hash: String,
    world: World,
    training: LocalTraining,
    cloud: CloudState,
    slot: u64,
    queue: VecDeque<(usize, u64)>,
    running: Vec<Option<Run>>,
    pending: Option<usize>,
    jitter: Jitter,
    epochs: f64,
    comp: f64,
    comm: f64,
    cloud_comms: u64,
    discarded: u64,
    deferrals: u64,
    accuracy: f64,
    best_accuracy: f64,
    evaluated_at: Option<u64>,
    records: Vec<MetricsRecord>,
    rewards: Vec<f64>,
    reached: bool,
    done: bool,
}

impl AsyncSim {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        if !cfg.method.is_async() {
            return Err(invalid(format!("method {} is not asynchronous", cfg.method.name())));
        }
        let world = World::build(&cfg)?;
        let hash = cfg.hash()?;
        let m = world.units.len();
        let mut order: Vec<usize> = (0..m).filter(|&u| !world.units[u].members.is_empty()).collect();
        order.shuffle(&mut rng::stream(cfg.seeds.sim, "checkin-order", 0));
        let training = LocalTraining { learner: cfg.learner, local_steps: cfg.local_steps, batch_size: cfg.batch_size };
        let mut sim = AsyncSim {
            hash,
            training,
            cloud: CloudState::new(world.init_model.clone()),
            slot: 0,
            queue: order.into_iter().map(|u| (u, 0)).collect(),
            running: vec![None; m],
            pending: None,
            jitter: Jitter::new(cfg.resources.jitter, cfg.seeds.sim),
            epochs: 0.0,
            comp: 0.0,
            comm: 0.0,
            cloud_comms: 0,
            discarded: 0,
            deferrals: 0,
            accuracy: 0.0,
            best_accuracy: 0.0,
            evaluated_at: None,
            records: Vec::new(),
            rewards: Vec::new(),
            reached: false,
            done: false,
            world,
            cfg,
        };
        sim.accuracy = evaluate(&sim.world.spec, &sim.cloud.model, &sim.world.test)?;
        sim.best_accuracy = sim.accuracy;
        Ok(sim)
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn cloud(&self) -> &CloudState {
        &self.cloud
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Jitter-free per-unit estimates and the current running set.
    pub fn state(&self) -> MdpState {
        let m = self.world.units.len();
        let mut checkin = vec![0u8; m];
        if let Some(u) = self.pending {
            checkin[u] = 1;
        }
        MdpState {
            est_comp: self.world.units.iter().map(|u| u.round_comp).collect(),
            est_comm: self.world.units.iter().map(|u| u.round_comm).collect(),
            est_train_slots: self.world.units.iter().map(|u| u.slots).collect(),
            rem_slots: self.running.iter().map(|r| r.as_ref().map_or(0, |r| r.remaining)).collect(),
            checkin,
        }
    }

    pub fn state_scale(&self) -> StateScale {
        let s = self.state();
        StateScale::from_estimates(&s.est_comp, &s.est_comm, &s.est_train_slots)
    }

    fn record(&mut self, event: EventKind, unit: Option<usize>, action: Option<i64>, tau: Option<u64>, accuracy: Option<f64>) {
        self.records.push(MetricsRecord {
            slot: self.slot,
            t_c: self.cloud.t_c,
            event,
            unit,
            action,
            tau,
            accuracy,
            epochs: self.epochs,
            comp_cost: self.comp,
            comm_cost: self.comm,
            cloud_comms: self.cloud_comms,
            discarded: self.discarded,
        });
    }

    fn evaluate_now(&mut self) -> Result<()> {
        self.accuracy = evaluate(&self.world.spec, &self.cloud.model, &self.world.test)?;
        self.best_accuracy = self.best_accuracy.max(self.accuracy);
        self.evaluated_at = Some(self.slot);
        self.record(EventKind::Eval, None, None, None, Some(self.accuracy));
        if self.accuracy >= self.cfg.target_accuracy {
            self.reached = true;
        }
        Ok(())
    }

    /// Runs to the first decision point.
    pub fn start(&mut self) -> Result<EnvStep> {
        if !self.records.is_empty() || self.slot != 0 {
            return Err(Error::Protocol("simulation already started".into()));
        }
        self.advance(0.0, 0)
    }

    /// Applies `action` to the pending check-in and runs to the next
    /// decision point or the end of the run.
    pub fn decide(&mut self, action: StalenessAction) -> Result<EnvStep> {
        if self.done {
            return Err(Error::Protocol("decision requested after the run ended".into()));
        }
        let u = self.pending.take().ok_or_else(|| Error::Protocol("no pending check-in".into()))?;
        self.record(EventKind::Checkin, Some(u), None, None, None);
        let running_count = self.running.iter().flatten().count();
        match action {
            StalenessAction::Reject => {
                self.record(EventKind::Reject, Some(u), Some(-1), None, None);
                self.queue.push_back((u, self.slot + self.cfg.reject_backoff));
            }
            StalenessAction::Admit(th) => {
                let code = match th {
                    Threshold::Limit(k) => Some(k as i64),
                    Threshold::Unlimited => None,
                };
                let capped = self.cfg.max_concurrent.is_some_and(|cap| running_count >= cap);
                if capped || !gate_admits(th, running_count) {
                    self.record(EventKind::Hold, Some(u), code, None, None);
                    self.queue.push_back((u, self.slot + self.cfg.reject_backoff));
                } else {
                    self.start_run(u, th)?;
                    self.record(EventKind::Accept, Some(u), code, None, None);
                }
            }
        }
        let r = self.finish_slot()?;
        self.advance(r, 1)
    }

    fn start_run(&mut self, u: usize, threshold: Threshold) -> Result<()> {
        let unit = &self.world.units[u];
        let lr = self.cfg.lr.at(self.epochs.floor() as u64);
        let mut group: Vec<LocalClient> = unit.members.iter().map(|&k| self.world.clients[k].clone()).collect();
        let outcome = edge_training(&mut group, &self.cloud.model, unit.rounds, &self.training, lr)
            .map_err(|e| diagnose(e, self.slot, u))?;
        for (c, &k) in group.into_iter().zip(&unit.members) {
            self.world.clients[k] = c;
        }
        self.running[u] = Some(Run {
            unit: u,
            checked_in_at: self.cloud.t_c,
            threshold,
            model: outcome.model,
            remaining: unit.slots,
            started: self.slot,
            comp_per_slot: unit.round_comp / unit.slots as f64,
        });
        Ok(())
    }

    /// Completes the current slot and returns its reward.
    fn finish_slot(&mut self) -> Result<f64> {
        let mut comp = 0.0;
        let jitter = self.jitter.sample();
        for r in self.running.iter_mut().flatten() {
            comp += r.comp_per_slot * jitter;
            r.remaining -= 1;
        }
        self.comp += comp;

        let done = self.running.iter().flatten().filter(|r| r.remaining == 0).min_by_key(|r| (r.started, r.unit)).map(|r| r.unit);
        let mut comm = 0.0;
        if let Some(u) = done {
            let run = self.running[u].take().expect("selected run exists");
            let unit = &self.world.units[u];
            comm = unit.round_comm * self.jitter.sample();
            self.comm += comm;
            self.epochs += unit.epochs_per_round;
            let tau = crate::aggregation::staleness(self.cloud.t_c, run.checked_in_at)?;
            self.record(EventKind::Complete, Some(u), None, Some(tau), None);
            if run.threshold.admits(tau) {
                let (next, tau) = cloud_update(&self.cloud, &run.model, run.checked_in_at, &self.cfg.mixing)?;
                if !next.model.is_finite() {
                    return Err(diagnose(Error::Divergence("cloud model has non-finite entries".into()), self.slot, u));
                }
                self.cloud = next;
                self.cloud_comms += 1;
                self.record(EventKind::CloudUpdate, Some(u), None, Some(tau), None);
                self.evaluate_now()?;
            } else {
                self.discarded += 1;
                self.record(EventKind::Discard, Some(u), None, Some(tau), None);
            }
            self.queue.push_back((u, self.slot + 1));
        }
        let deferred: Vec<usize> = self.running.iter().flatten().filter(|r| r.remaining == 0).map(|r| r.unit).collect();
        for u in deferred {
            if let Some(r) = self.running[u].as_mut() {
                r.remaining = 1;
            }
            self.deferrals += 1;
            self.record(EventKind::Defer, Some(u), None, None, None);
        }
        if self.cfg.eval_every > 0 && (self.slot + 1).is_multiple_of(self.cfg.eval_every) && self.evaluated_at != Some(self.slot) {
            self.evaluate_now()?;
        }
        let r = reward(comp, comm, &self.cfg.weights);
        self.rewards.push(r);
        self.slot += 1;
        if self.reached || self.slot >= self.cfg.max_slots {
            self.done = true;
        }
        Ok(r)
    }

    fn pop_ready(&mut self) -> Option<usize> {
        let pos = self.queue.iter().position(|&(_, ready)| ready <= self.slot)?;
        self.queue.remove(pos).map(|(u, _)| u)
    }

    fn advance(&mut self, mut total: f64, mut slots: u64) -> Result<EnvStep> {
        loop {
            if self.done {
                return Ok(EnvStep {
                    reward: total,
                    next_state: self.state(),
                    terminal: true,
                    budget_exhausted: !self.reached,
                    slots,
                });
            }
            self.pending = self.pop_ready();
            if self.pending.is_some() {
                return Ok(EnvStep { reward: total, next_state: self.state(), terminal: false, budget_exhausted: false, slots });
            }
            total += self.finish_slot()?;
            slots += 1;
        }
    }

    /// Drives the run to completion with `policy`.
    pub fn run_with(mut self, policy: &mut dyn Policy) -> Result<EventLog> {
        let mut step = self.start()?;
        while !step.terminal {
            let a = policy.act(&step.next_state)?;
            step = self.decide(a)?;
        }
        self.into_log()
    }

    pub fn into_log(self) -> Result<EventLog> {
        if !self.done {
            return Err(Error::Protocol("run has not finished".into()));
        }
        let outcome = Outcome {
            reached_target: self.reached,
            slots: self.slot,
            final_accuracy: self.accuracy,
            best_accuracy: self.best_accuracy,
            total_js: self.world.total_js()?,
            mean_response_latency: self.world.mean_response_latency(),
            mean_waiting_time: if self.cfg.method == Method::Fedasync { 0.0 } else { self.world.mean_waiting_time() },
            deferrals: self.deferrals,
        };
        Ok(EventLog {
            version: FORMAT_VERSION,
            config_hash: self.hash,
            config: self.cfg,
            records: self.records,
            rewards: self.rewards,
            outcome,
        })
    }
}

fn diagnose(e: Error, slot: u64, unit: usize) -> Error {
    match e {
        Error::Divergence(msg) => Error::Divergence(format!("{msg} (slot {slot}, unit {unit}); lower the learning rate")),
        other => other,
    }
}

/// Builds the staleness policy named by the config.
pub fn build_policy(cfg: &SimConfig) -> Result<Box<dyn Policy>> {
    Ok(match &cfg.policy {
        PolicyConfig::Fixed { k } => Box::new(FixedPolicy::new(*k, cfg.tau_max)?),
        PolicyConfig::Unlimited => Box::new(FixedPolicy::unlimited()),
        PolicyConfig::Random => Box::new(RandomPolicy::new(cfg.tau_max, cfg.seeds.sim)),
        PolicyConfig::PerEdge { thresholds } => Box::new(PerEdgePolicy {
            thresholds: thresholds
                .iter()
                .map(|&t| if t < 0 { StalenessAction::Reject } else { StalenessAction::Admit(Threshold::Limit(t as u64)) })
                .collect(),
        }),
        PolicyConfig::Ddqn { checkpoint } => {
            let file = std::fs::File::open(checkpoint)
                .map_err(|e| invalid(format!("cannot open checkpoint {}: {e}", checkpoint.display())))?;
            let p = GreedyPolicy::from_checkpoint(std::io::BufReader::new(file))?;
            let want = 5 * cfg.num_units();
            if p.net.inputs() != want {
                return Err(invalid(format!("checkpoint expects {} state features, this config has {want}", p.net.inputs())));
            }
            Box::new(p)
        }
    })
}

/// Simulates `cfg` with the policy it names.
pub fn run(cfg: &SimConfig) -> Result<EventLog> {
    match cfg.method {
        Method::Fedavg | Method::Hierfavg => super::baselines::run_sync(cfg),
        _ => {
            let mut policy = build_policy(cfg)?;
            AsyncSim::new(cfg.clone())?.run_with(policy.as_mut())
        }
    }
}

/// Simulates `cfg` with an externally supplied staleness policy.
pub fn run_with_policy(cfg: &SimConfig, policy: &mut dyn Policy) -> Result<EventLog> {
    AsyncSim::new(cfg.clone())?.run_with(policy)
}

/// The simulator as an agent-training environment. Episode `e` reruns the
/// config with simulation seed `seeds.sim + e`.
#[derive(Debug, Clone)]
pub struct SimEnvironment {
    cfg: SimConfig,
    episode: u64,
    sim: Option<AsyncSim>,
    scale: StateScale,
}

impl SimEnvironment {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        let probe = AsyncSim::new(cfg.clone())?;
        let scale = probe.state_scale();
        Ok(Self { cfg, episode: 0, sim: None, scale })
    }

    /// Finished-episode log, if the current episode has ended.
    pub fn last_episode(&self) -> Option<&AsyncSim> {
        self.sim.as_ref().filter(|s| s.is_done())
    }
}

impl Environment for SimEnvironment {
    fn reset(&mut self) -> Result<EnvStep> {
        let mut cfg = self.cfg.clone();
        cfg.seeds.sim = cfg.seeds.sim.wrapping_add(self.episode);
        self.episode += 1;
        let mut sim = AsyncSim::new(cfg)?;
        let step = sim.start()?;
        self.sim = Some(sim);
        Ok(step)
    }

    fn step(&mut self, action: StalenessAction) -> Result<EnvStep> {
        self.sim.as_mut().ok_or_else(|| Error::Protocol("step before reset".into()))?.decide(action)
    }

    fn state_scale(&self) -> StateScale {
        self.scale
    }

    fn tau_max(&self) -> u64 {
        self.cfg.tau_max
    }
}
