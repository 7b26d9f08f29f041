//! Deliberately slow reference computations.
//!
//! Nothing here depends on the `hiflash` crate: every routine works on plain
//! slices and closures and re-derives its answer the long way, so it can be
//! used to check the production code paths without sharing any of them.

// Index loops mirror the textbook formulas these oracles transcribe.
#![allow(clippy::needless_range_loop)]

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_difference_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||b||, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(floor)
}

/// Arithmetic mean by left-to-right summation.
pub fn naive_mean(values: &[f64]) -> f64 {
    let mut s = 0.0;
    for v in values {
        s += v;
    }
    s / values.len() as f64
}

/// All eigenvalues of a symmetric `d x d` matrix (row-major) by cyclic Jacobi
/// rotations.
pub fn dense_symmetric_eigenvalues(a: &[f64], d: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    for _sweep in 0..200 {
        let mut off = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    off += m[i * d + j] * m[i * d + j];
                }
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..d).map(|i| m[i * d + i]).collect()
}

/// Discounted return `Σ_j γ^j r_j` by an explicit power loop.
pub fn discounted_sum(rewards: &[f64], gamma: f64) -> f64 {
    let mut total = 0.0;
    for (j, r) in rewards.iter().enumerate() {
        let mut w = 1.0;
        for _ in 0..j {
            w *= gamma;
        }
        total += w * r;
    }
    total
}

/// Dense layer description for [`naive_mlp_forward`].
pub struct NaiveLayer<'a> {
    /// Row-major `outputs x inputs` weights.
    pub weights: &'a [f64],
    pub bias: &'a [f64],
    pub inputs: usize,
    pub outputs: usize,
    /// Apply `tanh` after this layer.
    pub tanh: bool,
}

/// Forward pass computed neuron by neuron.
pub fn naive_mlp_forward(layers: &[NaiveLayer<'_>], input: &[f64]) -> Vec<f64> {
    let mut x = input.to_vec();
    for layer in layers {
        let mut y = Vec::with_capacity(layer.outputs);
        for o in 0..layer.outputs {
            let mut acc = layer.bias[o];
            for i in 0..layer.inputs {
                acc += layer.weights[o * layer.inputs + i] * x[i];
            }
            y.push(if layer.tanh { acc.tanh() } else { acc });
        }
        x = y;
    }
    x
}

/// Fraction of `(prediction, label)` pairs that agree.
pub fn naive_accuracy(pairs: &[(usize, usize)]) -> f64 {
    let mut hits = 0usize;
    for (p, l) in pairs {
        if p == l {
            hits += 1;
        }
    }
    hits as f64 / pairs.len() as f64
}

/// Pooled class histogram of several labelled shards, normalized.
pub fn pooled_histogram(shards: &[&[usize]], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    let mut total = 0usize;
    for shard in shards {
        for &l in *shard {
            counts[l] += 1;
            total += 1;
        }
    }
    counts.into_iter().map(|c| c as f64 / total as f64).collect()
}

/// Sum of `active[m] * cost[m][k]` over every `(m, k)` pair.
pub fn double_loop_sum(active: &[bool], cost: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for m in 0..active.len() {
        for k in 0..cost[m].len() {
            if active[m] {
                total += cost[m][k];
            }
        }
    }
    total
}

/// JS divergence (base 2) written out term by term, used to hand-check values.
pub fn naive_js(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..p.len() {
        let m = 0.5 * (p[i] + q[i]);
        if p[i] > 0.0 {
            total += 0.5 * p[i] * (p[i] / m).log2();
        }
        if q[i] > 0.0 {
            total += 0.5 * q[i] * (q[i] / m).log2();
        }
    }
    total
}

/// Enumerates every assignment of `n` items to `m` bins (`m^n` of them).
pub fn all_assignments(n: usize, m: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = vec![0usize; n];
    let total = m.pow(n as u32);
    for code in 0..total {
        let mut c = code;
        for slot in cur.iter_mut() {
            *slot = c % m;
            c /= m;
        }
        out.push(cur.clone());
    }
    out
}

/// Tabular value iteration on a deterministic MDP.
///
/// `step(s, a)` returns `(reward, next_state, terminal)`. Returns the optimal
/// value of every state (with `gamma`) after `iters` sweeps.
pub fn value_iteration(
    num_states: usize,
    num_actions: usize,
    step: impl Fn(usize, usize) -> (f64, usize, bool),
    gamma: f64,
    iters: usize,
) -> Vec<f64> {
    let mut v = vec![0.0; num_states];
    for _ in 0..iters {
        let mut next = vec![f64::NEG_INFINITY; num_states];
        for s in 0..num_states {
            for a in 0..num_actions {
                let (r, s2, done) = step(s, a);
                let q = if done { r } else { r + gamma * v[s2] };
                if q > next[s] {
                    next[s] = q;
                }
            }
        }
        v = next;
    }
    v
}

/// Greedy action of every state under a value function from [`value_iteration`].
pub fn greedy_from_values(
    num_states: usize,
    num_actions: usize,
    step: impl Fn(usize, usize) -> (f64, usize, bool),
    gamma: f64,
    v: &[f64],
) -> Vec<usize> {
    (0..num_states)
        .map(|s| {
            let mut best = 0;
            let mut best_q = f64::NEG_INFINITY;
            for a in 0..num_actions {
                let (r, s2, done) = step(s, a);
                let q = if done { r } else { r + gamma * v[s2] };
                if q > best_q {
                    best_q = q;
                    best = a;
                }
            }
            best
        })
        .collect()
}

/// Full-batch gradient of mean softmax cross-entropy plus `reg/2 ||w||^2`
/// for a bias-free linear model with row-major `classes x dim` weights.
pub fn naive_softmax_gradient(weights: &[f64], rows: &[(Vec<f64>, usize)], classes: usize, reg: f64) -> Vec<f64> {
    let dim = weights.len() / classes;
    let mut grad = vec![0.0; weights.len()];
    for (x, label) in rows {
        let mut scores = vec![0.0; classes];
        for c in 0..classes {
            for j in 0..dim {
                scores[c] += weights[c * dim + j] * x[j];
            }
        }
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for s in &scores {
            denom += (s - top).exp();
        }
        for c in 0..classes {
            let p = (scores[c] - top).exp() / denom;
            let err = if c == *label { p - 1.0 } else { p };
            for j in 0..dim {
                grad[c * dim + j] += err * x[j] / rows.len() as f64;
            }
        }
    }
    for (g, w) in grad.iter_mut().zip(weights) {
        *g += reg * w;
    }
    grad
}
