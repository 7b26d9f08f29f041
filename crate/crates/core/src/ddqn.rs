//! Double DQN staleness controller: a small tanh MLP Q-network trained with
//! plain SGD from a FIFO replay buffer, with a periodically synced target
//! network.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::io::BufRead;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::mdp::{Environment, MdpState, Policy, StalenessAction, StateScale, Transition};
use crate::rng::{self, StreamRng};
use crate::{Error, Result};

/// Hidden widths giving roughly 4.6k parameters for 10 edges and
/// `tau_max = 16`.
pub const DEFAULT_HIDDEN: [usize; 2] = [41, 41];

/// Fully connected network: tanh hidden layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

struct Forward {
    /// Activations of every layer, input first.
    acts: Vec<Vec<f64>>,
}

impl QNetwork {
    /// Uniform `±sqrt(6 / (fan_in + fan_out))` weights, zero biases.
    pub fn new(inputs: usize, hidden: &[usize], outputs: usize, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(inputs, hidden, outputs)?;
        let mut rng = rng::stream(seed, "qnet-init", 0);
        let mut offset = 0;
        for w in net.sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut net.params[offset..offset + fan_in * fan_out] {
                *p = rng.random_range(-bound..bound);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn zeros(inputs: usize, hidden: &[usize], outputs: usize) -> Result<Self> {
        let mut sizes = vec![inputs];
        sizes.extend_from_slice(hidden);
        sizes.push(outputs);
        if sizes.contains(&0) {
            return Err(invalid("network layer widths must be positive"));
        }
        let n = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self { sizes, params: vec![0.0; n] })
    }

    pub fn inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn outputs(&self) -> usize {
        *self.sizes.last().expect("at least two layers")
    }

    pub fn hidden(&self) -> &[usize] {
        &self.sizes[1..self.sizes.len() - 1]
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), found: params.len() });
        }
        self.params = params;
        Ok(())
    }

    fn forward(&self, x: &[f64]) -> Result<Forward> {
        if x.len() != self.inputs() {
            return Err(Error::DimensionMismatch { expected: self.inputs(), found: x.len() });
        }
        let layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(x.to_vec());
        let mut offset = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let input = &acts[l];
            let mut out: Vec<f64> = (0..n_out)
                .map(|o| b[o] + w[o * n_in..(o + 1) * n_in].iter().zip(input).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            if l + 1 < layers {
                for v in out.iter_mut() {
                    *v = v.tanh();
                }
            }
            acts.push(out);
            offset += n_in * n_out + n_out;
        }
        Ok(Forward { acts })
    }

    pub fn q_values(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.acts.pop().expect("output layer"))
    }

    /// Adds `scale * ∂Q(x)[action]/∂θ` into `grad`.
    fn backward(&self, fwd: &Forward, action: usize, scale: f64, grad: &mut [f64]) {
        let layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut offset = 0;
        for l in 0..layers {
            offsets.push(offset);
            offset += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        let mut delta = vec![0.0; self.outputs()];
        delta[action] = scale;
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let input = &fwd.acts[l];
            for o in 0..n_out {
                if delta[o] == 0.0 {
                    continue;
                }
                let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += delta[o] * x;
                }
                grad[off + n_in * n_out + o] += delta[o];
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                if delta[o] == 0.0 {
                    continue;
                }
                for (p, wv) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *p += delta[o] * wv;
                }
            }
            // input[i] is tanh(z), derivative 1 - tanh^2
            for (p, a) in prev.iter_mut().zip(input) {
                *p *= 1.0 - a * a;
            }
            delta = prev;
        }
    }

    /// `∂Q(x)[action]/∂θ`.
    pub fn q_gradient(&self, x: &[f64], action: usize) -> Result<Vec<f64>> {
        if action >= self.outputs() {
            return Err(invalid(format!("action {action} out of range")));
        }
        let fwd = self.forward(x)?;
        let mut g = vec![0.0; self.params.len()];
        self.backward(&fwd, action, 1.0, &mut g);
        Ok(g)
    }

    /// Mean of `(Y - Q(s, a))^2 / 2` over the batch.
    pub fn td_loss(&self, batch: &[(Vec<f64>, usize, f64)]) -> Result<f64> {
        let mut total = 0.0;
        for (s, a, y) in batch {
            let q = self.q_values(s)?[*a];
            total += 0.5 * (y - q) * (y - q);
        }
        Ok(total / batch.len().max(1) as f64)
    }

    /// Gradient of [`td_loss`](Self::td_loss) with targets held constant.
    pub fn td_gradient(&self, batch: &[(Vec<f64>, usize, f64)]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.params.len()];
        let n = batch.len().max(1) as f64;
        for (s, a, y) in batch {
            if *a >= self.outputs() {
                return Err(invalid(format!("action {a} out of range")));
            }
            let fwd = self.forward(s)?;
            let q = fwd.acts.last().expect("output")[*a];
            self.backward(&fwd, *a, -(y - q) / n, &mut g);
        }
        Ok(g)
    }

    /// One SGD step `θ ← θ + α mean((Y - Q) ∇Q)`.
    pub fn update_step(&mut self, batch: &[(Vec<f64>, usize, f64)], lr: f64) -> Result<()> {
        let g = self.td_gradient(batch)?;
        for (p, gi) in self.params.iter_mut().zip(&g) {
            *p -= lr * gi;
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence("Q-network parameters became non-finite".into()));
        }
        Ok(())
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// ε-greedy action index.
pub fn select_action(net: &QNetwork, state: &[f64], epsilon: f64, rng: &mut StreamRng) -> Result<usize> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(invalid(format!("epsilon must lie in [0, 1], got {epsilon}")));
    }
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Ok(rng.random_range(0..net.outputs()));
    }
    let q = net.q_values(state)?;
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("non-finite Q-value".into()));
    }
    Ok(argmax(&q))
}

/// `Y' = r + γ Q'(s', argmax_a Q(s', a))`; `Y' = r` for terminal transitions.
pub fn ddqn_target(online: &QNetwork, target: &QNetwork, t: &Transition, gamma: f64) -> Result<f64> {
    if t.terminal || gamma == 0.0 {
        return Ok(t.reward);
    }
    let a = argmax(&online.q_values(&t.next_state)?);
    Ok(t.reward + gamma * target.q_values(&t.next_state)?[a])
}

/// Bounded FIFO of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(invalid("replay capacity must be positive"));
        }
        Ok(Self { capacity, items: VecDeque::with_capacity(capacity) })
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &Transition> {
        self.items.iter()
    }

    /// `n` transitions drawn uniformly with replacement.
    pub fn sample(&self, n: usize, rng: &mut StreamRng) -> Vec<&Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of training steps over which ε decays linearly.
    pub epsilon_decay_fraction: f64,
    pub learning_rate: f64,
    /// Target-network sync period `U` in gradient updates.
    pub target_sync: u64,
    pub buffer_capacity: usize,
    pub minibatch: usize,
    pub hidden: Vec<usize>,
    /// Environment decision steps to train for.
    pub train_steps: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.6,
            learning_rate: 0.01,
            target_sync: 100,
            buffer_capacity: 10_000,
            minibatch: 32,
            hidden: DEFAULT_HIDDEN.to_vec(),
            train_steps: 20_000,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(invalid(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return Err(invalid("epsilon bounds must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.epsilon_decay_fraction) {
            return Err(invalid("epsilon_decay_fraction must lie in [0, 1]"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate must be positive"));
        }
        if self.target_sync == 0 || self.buffer_capacity == 0 || self.minibatch == 0 {
            return Err(invalid("target_sync, buffer_capacity and minibatch must be at least 1"));
        }
        Ok(())
    }

    pub fn epsilon_at(&self, step: u64) -> f64 {
        let horizon = self.epsilon_decay_fraction * self.train_steps as f64;
        if horizon <= 0.0 || step as f64 >= horizon {
            return self.epsilon_end;
        }
        let frac = step as f64 / horizon;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// Online and target networks plus replay memory.
#[derive(Debug, Clone)]
pub struct Agent {
    pub cfg: AgentConfig,
    pub online: QNetwork,
    pub target: QNetwork,
    pub buffer: ReplayBuffer,
    pub updates: u64,
    pub syncs: u64,
    rng: StreamRng,
}

impl Agent {
    pub fn new(inputs: usize, outputs: usize, cfg: AgentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let online = QNetwork::new(inputs, &cfg.hidden, outputs, seed)?;
        let target = online.clone();
        let buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
        Ok(Self { cfg, online, target, buffer, updates: 0, syncs: 0, rng: rng::stream(seed, "agent", 0) })
    }

    pub fn act(&mut self, state: &[f64], epsilon: f64) -> Result<usize> {
        select_action(&self.online, state, epsilon, &mut self.rng)
    }

    pub fn sync_target(&mut self) {
        self.target = self.online.clone();
        self.syncs += 1;
    }

    /// Stores `t`, then performs one minibatch update once the buffer holds
    /// a full minibatch. Returns the pre-update TD loss when an update ran.
    pub fn observe(&mut self, t: Transition) -> Result<Option<f64>> {
        self.buffer.push(t);
        if self.buffer.len() < self.cfg.minibatch {
            return Ok(None);
        }
        let sample: Vec<Transition> = self.buffer.sample(self.cfg.minibatch, &mut self.rng).into_iter().cloned().collect();
        let mut batch = Vec::with_capacity(sample.len());
        for t in &sample {
            let y = ddqn_target(&self.online, &self.target, t, self.cfg.gamma)?;
            if !y.is_finite() {
                return Err(Error::Divergence("non-finite TD target".into()));
            }
            batch.push((t.state.clone(), t.action, y));
        }
        let loss = self.online.td_loss(&batch)?;
        self.online.update_step(&batch, self.cfg.learning_rate)?;
        self.updates += 1;
        if self.updates.is_multiple_of(self.cfg.target_sync) {
            self.sync_target();
        }
        Ok(Some(loss))
    }
}

/// One row of the training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub steps: u64,
    pub slots: u64,
    pub cumulative_reward: f64,
    pub epsilon: f64,
    pub budget_exhausted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub episodes: Vec<EpisodeRecord>,
    pub updates: u64,
    pub syncs: u64,
    pub max_buffer_len: usize,
}

/// Greedy policy of a trained network.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyPolicy {
    pub net: QNetwork,
    pub scale: StateScale,
    pub tau_max: u64,
}

impl GreedyPolicy {
    pub fn action_index(&self, state: &MdpState) -> Result<usize> {
        let q = self.net.q_values(&state.features(&self.scale))?;
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("non-finite Q-value".into()));
        }
        Ok(argmax(&q))
    }

    pub fn to_checkpoint(&self) -> String {
        let mut out = String::from("hiflash-qnet 1\n");
        let _ = writeln!(out, "inputs {}", self.net.inputs());
        let hidden: Vec<String> = self.net.hidden().iter().map(|h| h.to_string()).collect();
        let _ = writeln!(out, "hidden {}", hidden.join(" "));
        let _ = writeln!(out, "outputs {}", self.net.outputs());
        let _ = writeln!(out, "tau_max {}", self.tau_max);
        let _ = writeln!(out, "scale {:?} {:?} {:?}", self.scale.comp, self.scale.comm, self.scale.slots);
        let _ = writeln!(out, "params {}", self.net.num_params());
        for p in self.net.params() {
            let _ = writeln!(out, "{p:?}");
        }
        out
    }

    pub fn from_checkpoint(input: impl BufRead) -> Result<Self> {
        let mut lines = input.lines();
        let mut next = |what: &str| -> Result<String> {
            lines.next().ok_or_else(|| Error::Parse(format!("checkpoint ended before {what}")))?.map_err(Error::from)
        };
        let header = next("header")?;
        if header.trim() != "hiflash-qnet 1" {
            return Err(Error::Parse(format!("unrecognized checkpoint header '{header}'")));
        }
        let field = |line: String, key: &str| -> Result<Vec<String>> {
            let mut parts = line.split_whitespace().map(String::from);
            match parts.next() {
                Some(k) if k == key => Ok(parts.collect()),
                _ => Err(Error::Parse(format!("expected '{key}' line, found '{line}'"))),
            }
        };
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("'{s}': {e}")));
        let int = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("'{s}': {e}")));
        let one = |v: Vec<String>, key: &str| -> Result<String> {
            v.into_iter().next().ok_or_else(|| Error::Parse(format!("'{key}' needs a value")))
        };
        let inputs = int(&one(field(next("inputs")?, "inputs")?, "inputs")?)?;
        let hidden = field(next("hidden")?, "hidden")?.iter().map(|s| int(s)).collect::<Result<Vec<_>>>()?;
        let outputs = int(&one(field(next("outputs")?, "outputs")?, "outputs")?)?;
        let tau_max = int(&one(field(next("tau_max")?, "tau_max")?, "tau_max")?)? as u64;
        let scale = field(next("scale")?, "scale")?.iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
        if scale.len() != 3 {
            return Err(Error::Parse("scale needs three values".into()));
        }
        let count = int(&one(field(next("params")?, "params")?, "params")?)?;
        let mut net = QNetwork::zeros(inputs, &hidden, outputs)?;
        if count != net.num_params() {
            return Err(Error::Parse(format!("architecture has {} parameters but file declares {count}", net.num_params())));
        }
        let mut params = Vec::with_capacity(count);
        for i in 0..count {
            params.push(num(next(&format!("parameter {i}"))?.trim())?);
        }
        if outputs as u64 != tau_max + 2 {
            return Err(Error::Parse(format!("{outputs} outputs do not match tau_max = {tau_max}")));
        }
        net.set_params(params)?;
        Ok(Self { net, scale: StateScale { comp: scale[0], comm: scale[1], slots: scale[2] }, tau_max })
    }
}

impl Policy for GreedyPolicy {
    fn act(&mut self, state: &MdpState) -> Result<StalenessAction> {
        StalenessAction::from_index(self.action_index(state)?, self.tau_max)
    }

    fn name(&self) -> String {
        "ddqn".into()
    }
}

/// Trains an agent on `env` for `cfg.train_steps` decision steps.
pub fn train_agent(env: &mut dyn Environment, cfg: &AgentConfig, seed: u64) -> Result<(GreedyPolicy, TrainingLog, Agent)> {
    train_agent_inspected(env, cfg, seed, &mut |_| {})
}

/// [`train_agent`], calling `inspect` after every stored transition.
pub fn train_agent_inspected(
    env: &mut dyn Environment,
    cfg: &AgentConfig,
    seed: u64,
    inspect: &mut dyn FnMut(&Agent),
) -> Result<(GreedyPolicy, TrainingLog, Agent)> {
    cfg.validate()?;
    let scale = env.state_scale();
    let tau_max = env.tau_max();
    let mut step = env.reset()?;
    let inputs = 5 * step.next_state.num_edges();
    let mut agent = Agent::new(inputs, tau_max as usize + 2, cfg.clone(), seed)?;
    let mut log = TrainingLog { episodes: Vec::new(), updates: 0, syncs: 0, max_buffer_len: 0 };
    let mut ep_reward = step.reward;
    let mut ep_steps = 0;
    let mut ep_slots = step.slots;
    for t in 0..cfg.train_steps {
        if step.terminal {
            step = env.reset()?;
            ep_reward = step.reward;
            ep_steps = 0;
            ep_slots = step.slots;
            if step.terminal {
                continue;
            }
        }
        let s = step.next_state.features(&scale);
        let eps = cfg.epsilon_at(t);
        let a = agent.act(&s, eps)?;
        let next = env.step(StalenessAction::from_index(a, tau_max)?)?;
        ep_reward += next.reward;
        ep_steps += 1;
        ep_slots += next.slots;
        agent.observe(Transition {
            state: s,
            action: a,
            reward: next.reward,
            next_state: next.next_state.features(&scale),
            terminal: next.terminal,
        })?;
        inspect(&agent);
        log.max_buffer_len = log.max_buffer_len.max(agent.buffer.len());
        if next.terminal {
            log.episodes.push(EpisodeRecord {
                episode: log.episodes.len() as u64,
                steps: ep_steps,
                slots: ep_slots,
                cumulative_reward: ep_reward,
                epsilon: eps,
                budget_exhausted: next.budget_exhausted,
            });
        }
        step = next;
    }
    log.updates = agent.updates;
    log.syncs = agent.syncs;
    let policy = GreedyPolicy { net: agent.online.clone(), scale, tau_max };
    Ok((policy, log, agent))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{rollout, EnvStep, FixedPolicy, ToyConfig, ToyStalenessEnv};
    use hiflash_oracles::{
        central_difference_gradient, greedy_from_values, naive_mlp_forward, relative_error, value_iteration, NaiveLayer,
    };

    fn probe(rng: &mut StreamRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_network_and_shapes() {
        let net = QNetwork::zeros(15, &[8, 8], 6).unwrap();
        assert_eq!(net.q_values(&[0.3; 15]).unwrap(), vec![0.0; 6]);
        assert!(net.q_values(&[0.0; 14]).is_err());
        let big = QNetwork::zeros(50, &DEFAULT_HIDDEN, 18).unwrap();
        assert_eq!(big.num_params(), 4569);
    }

    #[test]
    fn forward_matches_naive_loop() {
        let net = QNetwork::new(6, &[5, 4], 3, 2).unwrap();
        let p = net.params();
        let (w1, rest) = p.split_at(30);
        let (b1, rest) = rest.split_at(5);
        let (w2, rest) = rest.split_at(20);
        let (b2, rest) = rest.split_at(4);
        let (w3, b3) = rest.split_at(12);
        let layers = [
            NaiveLayer { weights: w1, bias: b1, inputs: 6, outputs: 5, tanh: true },
            NaiveLayer { weights: w2, bias: b2, inputs: 5, outputs: 4, tanh: true },
            NaiveLayer { weights: w3, bias: b3, inputs: 4, outputs: 3, tanh: false },
        ];
        let mut rng = rng::stream(0, "probe", 0);
        for _ in 0..20 {
            let x = probe(&mut rng, 6);
            let fast = net.q_values(&x).unwrap();
            let slow = naive_mlp_forward(&layers, &x);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut net = QNetwork::new(5, &[6, 4], 4, 9).unwrap();
        let mut rng = rng::stream(1, "probe", 0);
        for i in 0..100 {
            let x = probe(&mut rng, 5);
            let a = i % 4;
            let analytic = net.q_gradient(&x, a).unwrap();
            let base = net.params().to_vec();
            let numeric = central_difference_gradient(
                |th| {
                    let mut n = net.clone();
                    n.set_params(th.to_vec()).unwrap();
                    n.q_values(&x).unwrap()[a]
                },
                &base,
                1e-6,
            );
            assert!(relative_error(&analytic, &numeric, 1e-8) < 1e-4);
            net.set_params(base.iter().map(|p| p + 0.01).collect()).unwrap();
        }
    }

    #[test]
    fn td_gradient_matches_finite_differences_and_descends() {
        let mut net = QNetwork::new(3, &[5, 5], 3, 4).unwrap();
        let mut rng = rng::stream(2, "probe", 0);
        let batch: Vec<(Vec<f64>, usize, f64)> = (0..8).map(|i| (probe(&mut rng, 3), i % 3, i as f64 * 0.3 - 1.0)).collect();
        let analytic = net.td_gradient(&batch).unwrap();
        let numeric = central_difference_gradient(
            |th| {
                let mut n = net.clone();
                n.set_params(th.to_vec()).unwrap();
                n.td_loss(&batch).unwrap()
            },
            net.params(),
            1e-6,
        );
        assert!(relative_error(&analytic, &numeric, 1e-8) < 1e-4);
        let before = net.td_loss(&batch).unwrap();
        net.update_step(&batch, 1e-3).unwrap();
        assert!(net.td_loss(&batch).unwrap() < before);
    }

    #[test]
    fn zero_td_error_leaves_parameters() {
        let mut net = QNetwork::new(3, &[4], 2, 0).unwrap();
        let s = vec![0.2, -0.4, 0.9];
        let y = net.q_values(&s).unwrap()[1];
        let before = net.params().to_vec();
        net.update_step(&[(s, 1, y)], 0.5).unwrap();
        assert_eq!(net.params(), before.as_slice());
    }

    #[test]
    fn action_selection() {
        let net = QNetwork::new(2, &[3], 4, 5).unwrap();
        let s = [0.1, 0.7];
        let greedy = argmax(&net.q_values(&s).unwrap());
        let mut rng = rng::stream(0, "eps", 0);
        assert_eq!(select_action(&net, &s, 0.0, &mut rng).unwrap(), greedy);
        let shifted: Vec<f64> = net.q_values(&s).unwrap().iter().map(|q| q + 7.5).collect();
        assert_eq!(argmax(&shifted), greedy);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        // ε = 1: uniform within 3σ per action over 10^4 draws
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[select_action(&net, &s, 1.0, &mut rng).unwrap()] += 1;
        }
        let p = 0.25;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
        assert!(select_action(&net, &s, 1.5, &mut rng).is_err());
    }

    #[test]
    fn target_computation() {
        let online = QNetwork::new(2, &[3], 3, 1).unwrap();
        let target = QNetwork::new(2, &[3], 3, 2).unwrap();
        let mut t = Transition { state: vec![0.0, 1.0], action: 0, reward: -2.0, next_state: vec![0.5, 0.5], terminal: false };
        assert_eq!(ddqn_target(&online, &target, &t, 0.0).unwrap(), -2.0);
        let a = argmax(&online.q_values(&t.next_state).unwrap());
        let expect = -2.0 + 0.9 * target.q_values(&t.next_state).unwrap()[a];
        assert_eq!(ddqn_target(&online, &target, &t, 0.9).unwrap(), expect);
        // identical networks give the standard max target
        let max_q = online.q_values(&t.next_state).unwrap().into_iter().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(ddqn_target(&online, &online, &t, 0.9).unwrap(), -2.0 + 0.9 * max_q);
        t.terminal = true;
        assert_eq!(ddqn_target(&online, &target, &t, 0.9).unwrap(), -2.0);
    }

    #[test]
    fn target_parameters_do_not_enter_the_gradient() {
        let online = QNetwork::new(2, &[3], 3, 1).unwrap();
        let mut target = QNetwork::new(2, &[3], 3, 2).unwrap();
        let t = Transition { state: vec![0.3, 0.1], action: 2, reward: -1.0, next_state: vec![0.5, 0.5], terminal: false };
        let y1 = ddqn_target(&online, &target, &t, 0.9).unwrap();
        let g1 = online.q_gradient(&t.state, t.action).unwrap();
        target.set_params(target.params().iter().map(|p| p * 3.0 + 0.1).collect()).unwrap();
        let y2 = ddqn_target(&online, &target, &t, 0.9).unwrap();
        assert_ne!(y1, y2);
        assert_eq!(g1, online.q_gradient(&t.state, t.action).unwrap());
    }

    fn dummy(i: usize) -> Transition {
        Transition { state: vec![i as f64], action: 0, reward: -1.0, next_state: vec![0.0], terminal: false }
    }

    #[test]
    fn replay_is_fifo() {
        let mut b = ReplayBuffer::new(5).unwrap();
        for i in 0..12 {
            b.push(dummy(i));
            assert!(b.len() <= 5);
        }
        let kept: Vec<f64> = b.iter().map(|t| t.state[0]).collect();
        assert_eq!(kept, vec![7.0, 8.0, 9.0, 10.0, 11.0]);
        assert!(ReplayBuffer::new(0).is_err());
    }

    #[test]
    fn target_sync_schedule_and_freeze() {
        let cfg = AgentConfig { minibatch: 2, target_sync: 3, ..AgentConfig::default() };
        let mut agent = Agent::new(1, 2, cfg, 0).unwrap();
        let probe = vec![0.4];
        let mut frozen = agent.target.q_values(&probe).unwrap();
        for i in 0..20 {
            let before_syncs = agent.syncs;
            agent.observe(dummy(i % 3)).unwrap();
            if agent.syncs == before_syncs {
                assert_eq!(agent.target.q_values(&probe).unwrap(), frozen);
            } else {
                assert_eq!(agent.updates % 3, 0);
                assert_eq!(agent.target.params(), agent.online.params());
                frozen = agent.target.q_values(&probe).unwrap();
            }
        }
        assert_eq!(agent.updates, 19);
        assert_eq!(agent.syncs, 6);
    }

    #[test]
    fn epsilon_schedule() {
        let cfg = AgentConfig { train_steps: 100, ..AgentConfig::default() };
        assert_eq!(cfg.epsilon_at(0), 1.0);
        assert!((cfg.epsilon_at(30) - 0.525).abs() < 1e-12);
        assert_eq!(cfg.epsilon_at(60), 0.05);
        assert_eq!(cfg.epsilon_at(99), 0.05);
    }

    /// Two decision states: in state 0, action 2 ends the episode at cost 1,
    /// any other action costs 3 and leads to state 1, where everything ends
    /// at cost 1.
    struct Chain {
        state: usize,
    }

    fn chain_step(s: usize, a: usize) -> (f64, usize, bool) {
        match (s, a) {
            (0, 2) => (-1.0, 0, true),
            (0, _) => (-3.0, 1, false),
            _ => (-1.0, 1, true),
        }
    }

    impl Chain {
        fn obs(&self) -> MdpState {
            let mut checkin = vec![0u8; 2];
            checkin[self.state] = 1;
            MdpState { est_comp: vec![1.0; 2], est_comm: vec![1.0; 2], est_train_slots: vec![1; 2], rem_slots: vec![0; 2], checkin }
        }
    }

    impl Environment for Chain {
        fn reset(&mut self) -> Result<EnvStep> {
            self.state = 0;
            Ok(EnvStep { reward: 0.0, next_state: self.obs(), terminal: false, budget_exhausted: false, slots: 0 })
        }

        fn step(&mut self, action: StalenessAction) -> Result<EnvStep> {
            let (r, s, done) = chain_step(self.state, action.index().unwrap());
            self.state = s;
            Ok(EnvStep { reward: r, next_state: self.obs(), terminal: done, budget_exhausted: false, slots: 1 })
        }

        fn state_scale(&self) -> StateScale {
            StateScale { comp: 1.0, comm: 1.0, slots: 1.0 }
        }

        fn tau_max(&self) -> u64 {
            2
        }
    }

    #[test]
    fn learns_the_value_iteration_optimum_on_a_chain() {
        let v = value_iteration(2, 4, chain_step, 0.99, 50);
        let best = greedy_from_values(2, 4, chain_step, 0.99, &v);
        let cfg = AgentConfig { train_steps: 3000, target_sync: 20, hidden: vec![8, 8], learning_rate: 0.05, ..AgentConfig::default() };
        let mut env = Chain { state: 0 };
        let (policy, log, _) = train_agent(&mut env, &cfg, 3).unwrap();
        assert_eq!(policy.action_index(&Chain { state: 0 }.obs()).unwrap(), best[0]);
        assert!(log.max_buffer_len <= cfg.buffer_capacity);
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_round_trip() {
        let cfg = AgentConfig { train_steps: 400, buffer_capacity: 100, ..AgentConfig::default() };
        let mut env = ToyStalenessEnv::new(ToyConfig::default()).unwrap();
        let (p1, l1, _) = train_agent(&mut env, &cfg, 5).unwrap();
        let (p2, l2, _) = train_agent(&mut env, &cfg, 5).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(p1, p2);
        assert_eq!(l1.max_buffer_len, 100);
        let text = p1.to_checkpoint();
        let back = GreedyPolicy::from_checkpoint(text.as_bytes()).unwrap();
        assert_eq!(back, p1);
        assert!(GreedyPolicy::from_checkpoint("nonsense\n".as_bytes()).is_err());
        // the greedy policy is usable as a frozen controller
        let mut env = ToyStalenessEnv::new(ToyConfig::default()).unwrap();
        let mut greedy = back.clone();
        let rewards = rollout(&mut env, &mut greedy).unwrap();
        assert!(rewards.iter().all(|r| *r <= 0.0));
        let mut fixed = FixedPolicy::new(1, 4).unwrap();
        assert!(!rollout(&mut env, &mut fixed).unwrap().is_empty());
    }
}
