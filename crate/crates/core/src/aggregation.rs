//! Protocol core: synchronous client-edge averaging and asynchronous,
//! staleness-weighted edge-cloud mixing.

use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::learner::{sgd_step, BatchSampler, ClientDataset, LearnerSpec, ParamVector};
use crate::{Error, Result};

/// `α_τ = α · υ^τ` parameters; both strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMixing")]
pub struct MixingParams {
    alpha: f64,
    upsilon: f64,
}

#[derive(Deserialize)]
struct RawMixing {
    alpha: f64,
    upsilon: f64,
}

impl TryFrom<RawMixing> for MixingParams {
    type Error = Error;

    fn try_from(raw: RawMixing) -> Result<Self> {
        MixingParams::new(raw.alpha, raw.upsilon)
    }
}

impl MixingParams {
    pub fn new(alpha: f64, upsilon: f64) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("upsilon", upsilon)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(invalid(format!("{name} must lie strictly between 0 and 1, got {v}")));
            }
        }
        Ok(Self { alpha, upsilon })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn upsilon(&self) -> f64 {
        self.upsilon
    }
}

impl Default for MixingParams {
    fn default() -> Self {
        Self { alpha: 0.7, upsilon: 0.99 }
    }
}

pub fn mixing_weight(params: &MixingParams, tau: i64) -> Result<f64> {
    if tau < 0 {
        return Err(invalid(format!("staleness must be non-negative, got {tau}")));
    }
    let tau = i32::try_from(tau).unwrap_or(i32::MAX);
    Ok(params.alpha * params.upsilon.powi(tau))
}

/// How the cloud weighs an incoming edge model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mixing {
    Staleness(MixingParams),
    /// A staleness-independent weight in `(0, 1]`; `1` replaces the cloud
    /// model outright.
    Constant { weight: f64 },
}

impl Mixing {
    pub fn validate(&self) -> Result<()> {
        if let Mixing::Constant { weight } = self {
            if !(*weight > 0.0 && *weight <= 1.0) {
                return Err(invalid(format!("constant mixing weight must lie in (0, 1], got {weight}")));
            }
        }
        Ok(())
    }

    pub fn weight(&self, tau: u64) -> Result<f64> {
        match self {
            Mixing::Staleness(p) => mixing_weight(p, i64::try_from(tau).unwrap_or(i64::MAX)),
            Mixing::Constant { weight } => {
                self.validate()?;
                Ok(*weight)
            }
        }
    }
}

impl Default for Mixing {
    fn default() -> Self {
        Mixing::Staleness(MixingParams::default())
    }
}

/// Global model and its aggregation counter `t_c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudState {
    pub model: ParamVector,
    pub t_c: u64,
}

impl CloudState {
    pub fn new(model: ParamVector) -> Self {
        Self { model, t_c: 0 }
    }
}

/// `τ = t_c - t̃_c`.
pub fn staleness(t_c: u64, checked_in_at: u64) -> Result<u64> {
    t_c.checked_sub(checked_in_at).ok_or_else(|| {
        Error::Protocol(format!("edge checked in at t_c = {checked_in_at}, which is ahead of the cloud counter {t_c}"))
    })
}

/// Mixes an edge model into the cloud model. Returns the new state and the
/// staleness, measured before the counter advances.
pub fn cloud_update(
    cloud: &CloudState,
    edge_model: &ParamVector,
    checked_in_at: u64,
    mixing: &Mixing,
) -> Result<(CloudState, u64)> {
    let tau = staleness(cloud.t_c, checked_in_at)?;
    edge_model.check_len(cloud.model.len())?;
    let a = mixing.weight(tau)?;
    let model: Vec<f64> = cloud.model.iter().zip(edge_model.iter()).map(|(old, new)| (1.0 - a) * old + a * new).collect();
    Ok((CloudState { model: ParamVector::from_vec(model), t_c: cloud.t_c + 1 }, tau))
}

/// Local-training knobs shared by every client of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalTraining {
    pub learner: LearnerSpec,
    /// Local SGD steps `c` between client-edge aggregations.
    pub local_steps: usize,
    /// Mini-batch size; 0 means full batch.
    pub batch_size: usize,
}

/// A client together with its private mini-batch stream.
#[derive(Debug, Clone)]
pub struct LocalClient {
    pub data: ClientDataset,
    pub sampler: BatchSampler,
}

impl LocalClient {
    pub fn new(data: ClientDataset, seed: u64) -> Self {
        let sampler = BatchSampler::new(seed, data.client_id);
        Self { data, sampler }
    }
}

/// `c` local steps on every client starting from `edge_model`, then the
/// `|D_k|`-weighted average.
pub fn client_edge_round(
    clients: &mut [LocalClient],
    edge_model: &ParamVector,
    cfg: &LocalTraining,
    lr: f64,
) -> Result<ParamVector> {
    if clients.is_empty() {
        return Err(invalid("an edge needs at least one client"));
    }
    if cfg.local_steps == 0 {
        return Err(invalid("local_steps must be at least 1"));
    }
    let mut locals = Vec::with_capacity(clients.len());
    for client in clients.iter_mut() {
        let mut w = edge_model.clone();
        for _ in 0..cfg.local_steps {
            w = sgd_step(&cfg.learner, &w, &client.data.data, lr, cfg.batch_size, &mut client.sampler)?;
        }
        locals.push((w, client.data.len() as f64));
    }
    if locals.len() == 1 {
        return Ok(locals.pop().expect("one element").0);
    }
    ParamVector::weighted_average(locals.iter().map(|(w, s)| (w, *s)))
}

/// Result of one edge round of `H` client-edge aggregations.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeOutcome {
    pub model: ParamVector,
    /// Local updates each client performed (`H * c`).
    pub updates_per_client: u64,
}

pub fn edge_training(
    clients: &mut [LocalClient],
    cloud_model: &ParamVector,
    rounds: usize,
    cfg: &LocalTraining,
    lr: f64,
) -> Result<EdgeOutcome> {
    if rounds == 0 {
        return Err(invalid("an edge round needs H >= 1"));
    }
    let mut model = cloud_model.clone();
    for _ in 0..rounds {
        model = client_edge_round(clients, &model, cfg, lr)?;
    }
    if !model.is_finite() {
        return Err(Error::Divergence("edge model has non-finite entries".into()));
    }
    Ok(EdgeOutcome { model, updates_per_client: (rounds * cfg.local_steps) as u64 })
}

/// Staleness limit attached to an admitted edge run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    Limit(u64),
    Unlimited,
}

impl Threshold {
    pub fn admits(&self, tau: u64) -> bool {
        match self {
            Threshold::Limit(k) => tau <= *k,
            Threshold::Unlimited => true,
        }
    }
}

/// An in-flight edge round.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeRun {
    pub edge_id: usize,
    pub checked_in_at: u64,
    pub threshold: Threshold,
    /// Edge model produced by the round; computed when the run is admitted.
    pub model: ParamVector,
    pub rounds: usize,
    pub total_slots: u64,
    pub remaining_slots: u64,
    pub started_slot: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::{generate_synthetic, gradient, partition, Dataset, PartitionScheme, Sample, SyntheticSpec};
    use proptest::prelude::*;

    fn one_dim(points: &[(f64, usize)]) -> Dataset {
        Dataset::new(1, 2, points.iter().map(|&(x, l)| Sample { features: vec![x], label: l }).collect()).unwrap()
    }

    fn cfg(learner: LearnerSpec, c: usize) -> LocalTraining {
        LocalTraining { learner, local_steps: c, batch_size: 0 }
    }

    #[test]
    fn mixing_weight_values() {
        let p = MixingParams::new(0.7, 0.99).unwrap();
        assert_eq!(mixing_weight(&p, 0).unwrap(), 0.7);
        assert!((mixing_weight(&p, 10).unwrap() - 0.633_067).abs() < 1e-6);
        assert!(mixing_weight(&p, -1).is_err());
        for tau in 0..50 {
            assert!(mixing_weight(&p, tau + 1).unwrap() < mixing_weight(&p, tau).unwrap());
        }
        assert!(MixingParams::new(1.0, 0.5).is_err());
        assert!(MixingParams::new(0.5, 0.0).is_err());
        assert!(serde_json::from_str::<MixingParams>(r#"{"alpha":1.5,"upsilon":0.5}"#).is_err());
    }

    #[test]
    fn staleness_and_counter() {
        assert_eq!(staleness(5, 3).unwrap(), 2);
        assert_eq!(staleness(7, 7).unwrap(), 0);
        assert!(matches!(staleness(3, 5), Err(Error::Protocol(_))));
        let cloud = CloudState { model: ParamVector::from_vec(vec![0.0, 0.0]), t_c: 4 };
        let edge = ParamVector::from_vec(vec![1.0, 1.0]);
        let (next, tau) = cloud_update(&cloud, &edge, 2, &Mixing::Constant { weight: 0.5 }).unwrap();
        assert_eq!(tau, 2);
        assert_eq!(next.t_c, 5);
        assert_eq!(next.model.as_slice(), &[0.5, 0.5]);
        let (full, _) = cloud_update(&cloud, &edge, 4, &Mixing::Constant { weight: 1.0 }).unwrap();
        assert_eq!(full.model, edge);
        assert!(cloud_update(&cloud, &edge, 5, &Mixing::default()).is_err());
        assert!(Mixing::Constant { weight: 0.0 }.weight(0).is_err());
    }

    #[test]
    fn weighted_aggregation_examples() {
        let a = ParamVector::from_vec(vec![0.0]);
        let b = ParamVector::from_vec(vec![2.0]);
        assert_eq!(ParamVector::weighted_average([(&a, 1.0), (&b, 1.0)]).unwrap().as_slice(), &[1.0]);
        assert_eq!(ParamVector::weighted_average([(&a, 1.0), (&b, 3.0)]).unwrap().as_slice(), &[1.5]);
    }

    #[test]
    fn one_client_round_is_plain_sgd() {
        let spec = LearnerSpec::logistic(1, 2, 0.1);
        let data = one_dim(&[(1.0, 0), (-1.0, 1), (0.5, 0)]);
        let mut clients = vec![LocalClient::new(ClientDataset { client_id: 0, data: data.clone() }, 0)];
        let start = ParamVector::from_vec(vec![0.3, -0.2]);
        let out = edge_training(&mut clients, &start, 1, &cfg(spec, 3), 0.5).unwrap();
        let mut expect = start.clone();
        for _ in 0..3 {
            let g = gradient(&spec, &expect, &data).unwrap();
            expect.axpy(-0.5, &g);
        }
        assert_eq!(out.model, expect);
        assert_eq!(out.updates_per_client, 3);
    }

    #[test]
    fn identical_clients_match_centralized_gd() {
        let spec = LearnerSpec::logistic(2, 3, 0.01);
        let (train, _) = generate_synthetic(&SyntheticSpec::new(30, 3, 2, 3.0), 5).unwrap();
        let mut clients: Vec<LocalClient> =
            (0..3).map(|k| LocalClient::new(ClientDataset { client_id: k, data: train.clone() }, 9)).collect();
        let start = spec.init_params(1);
        let out = edge_training(&mut clients, &start, 2, &cfg(spec, 3), 0.2).unwrap();
        let mut expect = start.clone();
        for _ in 0..6 {
            let g = gradient(&spec, &expect, &train).unwrap();
            expect.axpy(-0.2, &g);
        }
        for (a, b) in out.model.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(out.updates_per_client, 6);
    }

    #[test]
    fn degenerate_protocol_matches_gradient_descent() {
        let spec = LearnerSpec::logistic(2, 2, 0.05);
        let (train, _) = generate_synthetic(&SyntheticSpec::new(40, 2, 2, 2.0), 3).unwrap();
        let mut clients = vec![LocalClient::new(ClientDataset { client_id: 0, data: train.clone() }, 0)];
        let mut cloud = CloudState::new(spec.init_params(0));
        let mut gd = cloud.model.clone();
        let mixing = Mixing::Constant { weight: 1.0 };
        for _ in 0..200 {
            let out = edge_training(&mut clients, &cloud.model, 1, &cfg(spec, 1), 0.3).unwrap();
            cloud = cloud_update(&cloud, &out.model, cloud.t_c, &mixing).unwrap().0;
            let g = gradient(&spec, &gd, &train).unwrap();
            gd.axpy(-0.3, &g);
            for (a, b) in cloud.model.iter().zip(gd.iter()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
        assert_eq!(cloud.t_c, 200);
    }

    #[test]
    fn noniid_clients_average_by_size() {
        let spec = LearnerSpec::logistic(2, 4, 0.0);
        let (train, _) = generate_synthetic(&SyntheticSpec::new(80, 4, 2, 3.0), 2).unwrap();
        let shards = partition(&train, PartitionScheme::QuantitySkew { min: 5, max: 40 }, 4, 1).unwrap();
        let mut clients: Vec<LocalClient> = shards.into_iter().map(|s| LocalClient::new(s, 0)).collect();
        let start = spec.init_params(0);
        let out = client_edge_round(&mut clients, &start, &cfg(spec, 1), 0.1).unwrap();
        // with one full-batch step the weighted average equals one GD step on the pooled data
        let mut pooled = start.clone();
        pooled.axpy(-0.1, &gradient(&spec, &start, &train).unwrap());
        for (a, b) in out.iter().zip(pooled.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_round_arguments() {
        let spec = LearnerSpec::logistic(1, 2, 0.0);
        let start = spec.init_params(0);
        assert!(client_edge_round(&mut [], &start, &cfg(spec, 1), 0.1).is_err());
        let data = one_dim(&[(1.0, 0)]);
        let mut clients = vec![LocalClient::new(ClientDataset { client_id: 0, data }, 0)];
        assert!(edge_training(&mut clients, &start, 0, &cfg(spec, 1), 0.1).is_err());
        assert!(client_edge_round(&mut clients, &start, &cfg(spec, 0), 0.1).is_err());
    }

    #[test]
    fn thresholds() {
        assert!(Threshold::Limit(2).admits(2));
        assert!(!Threshold::Limit(2).admits(3));
        assert!(Threshold::Unlimited.admits(u64::MAX));
    }

    proptest! {
        #[test]
        fn cloud_update_is_a_convex_combination(
            old in proptest::collection::vec(-10.0f64..10.0, 4),
            new in proptest::collection::vec(-10.0f64..10.0, 4),
            tau in 0u64..40,
            alpha in 0.01f64..0.99,
        ) {
            let cloud = CloudState { model: ParamVector::from_vec(old.clone()), t_c: tau };
            let mix = Mixing::Staleness(MixingParams::new(alpha, 0.9).unwrap());
            let (next, got_tau) = cloud_update(&cloud, &ParamVector::from_vec(new.clone()), 0, &mix).unwrap();
            prop_assert_eq!(got_tau, tau);
            prop_assert_eq!(next.t_c, tau + 1);
            for i in 0..4 {
                let (lo, hi) = if old[i] <= new[i] { (old[i], new[i]) } else { (new[i], old[i]) };
                prop_assert!(next.model[i] >= lo - 1e-12 && next.model[i] <= hi + 1e-12);
            }
        }

        #[test]
        fn aggregation_weights_sum_to_one(sizes in proptest::collection::vec(1usize..100, 1..8)) {
            let total: usize = sizes.iter().sum();
            let s: f64 = sizes.iter().map(|&n| n as f64 / total as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            // averaging identical models returns that model
            let m = ParamVector::from_vec(vec![1.25, -3.5]);
            let avg = ParamVector::weighted_average(sizes.iter().map(|&n| (&m, n as f64))).unwrap();
            for (a, b) in avg.iter().zip(m.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
