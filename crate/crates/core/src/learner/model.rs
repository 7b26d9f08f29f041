use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, ParamVector, Sample};
use crate::error::invalid;
use crate::rng::{self, StreamRng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LearnerKind {
    /// Multinomial logistic regression (no bias) with L2 penalty.
    RegularizedLogistic,
    /// `d -> hidden (tanh) -> K` softmax network with biases.
    TwoLayerMlp { hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    #[serde(flatten)]
    pub kind: LearnerKind,
    pub feature_dim: usize,
    pub num_classes: usize,
    /// L2 coefficient: the loss carries `reg / 2 * ||params||^2`.
    #[serde(default)]
    pub reg: f64,
}

impl LearnerSpec {
    pub fn logistic(feature_dim: usize, num_classes: usize, reg: f64) -> Self {
        Self { kind: LearnerKind::RegularizedLogistic, feature_dim, num_classes, reg }
    }

    pub fn mlp(feature_dim: usize, num_classes: usize, hidden: usize, reg: f64) -> Self {
        Self { kind: LearnerKind::TwoLayerMlp { hidden }, feature_dim, num_classes, reg }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(invalid("feature_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(invalid("a learner needs at least two classes"));
        }
        if !(self.reg >= 0.0 && self.reg.is_finite()) {
            return Err(invalid("regularization must be finite and non-negative"));
        }
        if let LearnerKind::TwoLayerMlp { hidden } = self.kind {
            if hidden == 0 {
                return Err(invalid("mlp hidden width must be positive"));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let (d, k) = (self.feature_dim, self.num_classes);
        match self.kind {
            LearnerKind::RegularizedLogistic => k * d,
            LearnerKind::TwoLayerMlp { hidden } => hidden * d + hidden + k * hidden + k,
        }
    }

    pub fn is_strongly_convex(&self) -> bool {
        matches!(self.kind, LearnerKind::RegularizedLogistic) && self.reg > 0.0
    }

    /// Starting point: zeros for the convex learner, small Gaussian weights
    /// for the MLP (zeros would leave its hidden units symmetric).
    pub fn init_params(&self, seed: u64) -> ParamVector {
        match self.kind {
            LearnerKind::RegularizedLogistic => ParamVector::zeros(self.num_params()),
            LearnerKind::TwoLayerMlp { hidden } => {
                let mut rng = rng::stream(seed, "mlp-init", 0);
                let d = self.feature_dim;
                let k = self.num_classes;
                let s1 = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid std");
                let s2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("valid std");
                let mut v = Vec::with_capacity(self.num_params());
                v.extend((0..hidden * d).map(|_| s1.sample(&mut rng)));
                v.extend(std::iter::repeat_n(0.0, hidden));
                v.extend((0..k * hidden).map(|_| s2.sample(&mut rng)));
                v.extend(std::iter::repeat_n(0.0, k));
                ParamVector::from_vec(v)
            }
        }
    }

    /// Class scores for one feature vector.
    pub fn logits(&self, params: &[f64], features: &[f64]) -> Vec<f64> {
        let (d, k) = (self.feature_dim, self.num_classes);
        match self.kind {
            LearnerKind::RegularizedLogistic => (0..k).map(|c| dot(&params[c * d..(c + 1) * d], features)).collect(),
            LearnerKind::TwoLayerMlp { hidden } => {
                let (w1, rest) = params.split_at(hidden * d);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(k * hidden);
                let a: Vec<f64> = (0..hidden).map(|j| (dot(&w1[j * d..(j + 1) * d], features) + b1[j]).tanh()).collect();
                (0..k).map(|c| dot(&w2[c * hidden..(c + 1) * hidden], &a) + b2[c]).collect()
            }
        }
    }

    /// Index of the largest logit; ties go to the lowest class index.
    pub fn predict(&self, params: &[f64], features: &[f64]) -> usize {
        argmax(&self.logits(params, features))
    }

    fn check(&self, params: &ParamVector, data: &Dataset) -> Result<()> {
        params.check_len(self.num_params())?;
        if data.feature_dim != self.feature_dim {
            return Err(Error::DimensionMismatch { expected: self.feature_dim, found: data.feature_dim });
        }
        if data.num_classes != self.num_classes {
            return Err(Error::DimensionMismatch { expected: self.num_classes, found: data.num_classes });
        }
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(())
    }

    /// Per-sample cross-entropy and, if `grad` is given, accumulation of its
    /// gradient scaled by `scale`.
    fn sample_loss(&self, params: &[f64], s: &Sample, grad: Option<(&mut [f64], f64)>) -> f64 {
        let (d, k) = (self.feature_dim, self.num_classes);
        match self.kind {
            LearnerKind::RegularizedLogistic => {
                let z: Vec<f64> = (0..k).map(|c| dot(&params[c * d..(c + 1) * d], &s.features)).collect();
                let (lse, p) = softmax(&z);
                if let Some((g, scale)) = grad {
                    for c in 0..k {
                        let coef = scale * (p[c] - if c == s.label { 1.0 } else { 0.0 });
                        for (gi, xi) in g[c * d..(c + 1) * d].iter_mut().zip(&s.features) {
                            *gi += coef * xi;
                        }
                    }
                }
                lse - z[s.label]
            }
            LearnerKind::TwoLayerMlp { hidden } => {
                let (w1, rest) = params.split_at(hidden * d);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(k * hidden);
                let a: Vec<f64> = (0..hidden).map(|j| (dot(&w1[j * d..(j + 1) * d], &s.features) + b1[j]).tanh()).collect();
                let z: Vec<f64> = (0..k).map(|c| dot(&w2[c * hidden..(c + 1) * hidden], &a) + b2[c]).collect();
                let (lse, p) = softmax(&z);
                if let Some((g, scale)) = grad {
                    let (gw1, grest) = g.split_at_mut(hidden * d);
                    let (gb1, grest) = grest.split_at_mut(hidden);
                    let (gw2, gb2) = grest.split_at_mut(k * hidden);
                    let mut da = vec![0.0; hidden];
                    for c in 0..k {
                        let dz = scale * (p[c] - if c == s.label { 1.0 } else { 0.0 });
                        gb2[c] += dz;
                        for j in 0..hidden {
                            gw2[c * hidden + j] += dz * a[j];
                            da[j] += dz * w2[c * hidden + j];
                        }
                    }
                    for j in 0..hidden {
                        let dh = da[j] * (1.0 - a[j] * a[j]);
                        gb1[j] += dh;
                        for (gi, xi) in gw1[j * d..(j + 1) * d].iter_mut().zip(&s.features) {
                            *gi += dh * xi;
                        }
                    }
                }
                lse - z[s.label]
            }
        }
    }
}

/// Mean per-sample loss over the whole dataset plus the L2 term.
pub fn loss(spec: &LearnerSpec, params: &ParamVector, data: &Dataset) -> Result<f64> {
    spec.check(params, data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    Ok(loss_unchecked(spec, params, data, &idx))
}

/// Loss restricted to the samples at `indices`.
pub fn loss_on(spec: &LearnerSpec, params: &ParamVector, data: &Dataset, indices: &[usize]) -> Result<f64> {
    spec.check(params, data)?;
    check_indices(data, indices)?;
    Ok(loss_unchecked(spec, params, data, indices))
}

fn loss_unchecked(spec: &LearnerSpec, params: &ParamVector, data: &Dataset, indices: &[usize]) -> f64 {
    let n = indices.len() as f64;
    let mean: f64 = indices.iter().map(|&i| spec.sample_loss(params, &data.samples[i], None)).sum::<f64>() / n;
    mean + 0.5 * spec.reg * params.iter().map(|v| v * v).sum::<f64>()
}

/// Full-batch analytic gradient of [`loss`].
pub fn gradient(spec: &LearnerSpec, params: &ParamVector, data: &Dataset) -> Result<ParamVector> {
    spec.check(params, data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    Ok(gradient_unchecked(spec, params, data, &idx))
}

/// Gradient of the loss restricted to `indices` (a mini-batch).
pub fn gradient_on(spec: &LearnerSpec, params: &ParamVector, data: &Dataset, indices: &[usize]) -> Result<ParamVector> {
    spec.check(params, data)?;
    check_indices(data, indices)?;
    Ok(gradient_unchecked(spec, params, data, indices))
}

fn gradient_unchecked(spec: &LearnerSpec, params: &ParamVector, data: &Dataset, indices: &[usize]) -> ParamVector {
    let mut g = vec![0.0; params.len()];
    let scale = 1.0 / indices.len() as f64;
    for &i in indices {
        spec.sample_loss(params, &data.samples[i], Some((&mut g, scale)));
    }
    for (gi, p) in g.iter_mut().zip(params.iter()) {
        *gi += spec.reg * p;
    }
    ParamVector::from_vec(g)
}

fn check_indices(data: &Dataset, indices: &[usize]) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= data.len()) {
        return Err(invalid(format!("sample index {bad} out of range for {} samples", data.len())));
    }
    Ok(())
}

/// Mini-batch index stream: sampling without replacement within an epoch,
/// reshuffled at each epoch boundary. Full batches consume no randomness.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: StreamRng,
    perm: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, client_id: usize) -> Self {
        Self { rng: rng::stream(seed, "minibatch", client_id as u64), perm: Vec::new(), cursor: 0 }
    }

    pub fn from_rng(rng: StreamRng) -> Self {
        Self { rng, perm: Vec::new(), cursor: 0 }
    }

    pub fn next_batch(&mut self, n: usize, batch_size: usize) -> Vec<usize> {
        if batch_size == 0 || batch_size >= n {
            return (0..n).collect();
        }
        if self.perm.len() != n || self.cursor + batch_size > n {
            self.perm = (0..n).collect();
            self.perm.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.perm[self.cursor..self.cursor + batch_size].to_vec();
        self.cursor += batch_size;
        out
    }
}

/// `params - lr * grad` on the next mini-batch; full batch when
/// `batch_size >= |data|` or `batch_size == 0`.
pub fn sgd_step(
    spec: &LearnerSpec,
    params: &ParamVector,
    data: &Dataset,
    lr: f64,
    batch_size: usize,
    sampler: &mut BatchSampler,
) -> Result<ParamVector> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(invalid(format!("learning rate {lr} must be finite and non-negative")));
    }
    spec.check(params, data)?;
    let idx = sampler.next_batch(data.len(), batch_size);
    let g = gradient_unchecked(spec, params, data, &idx);
    let mut out = params.clone();
    out.axpy(-lr, &g);
    Ok(out)
}

/// Exponentially decayed step size keyed on cumulative client epochs:
/// `initial * rate^floor(epochs / every)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default = "one")]
    pub decay_rate: f64,
    /// Decay period in client epochs; 0 disables decay.
    #[serde(default)]
    pub decay_every: u64,
}

fn one() -> f64 {
    1.0
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self { initial: lr, decay_rate: 1.0, decay_every: 0 }
    }

    pub fn at(&self, epochs: u64) -> f64 {
        if self.decay_every == 0 {
            return self.initial;
        }
        let k = (epochs / self.decay_every) as i32;
        self.initial * self.decay_rate.powi(k)
    }
}

/// Smoothness and strong-convexity constants of the convex learner.
///
/// For softmax cross-entropy without bias the Hessian is bounded by
/// `(1/2) * X^T X / n` (the logit Hessian `diag(p) - p p^T` has spectral norm
/// at most 1/2), so `beta = lambda_max(X^T X / n) / 2 + reg` and `mu = reg`.
pub fn estimate_convex_constants(spec: &LearnerSpec, data: &Dataset) -> Result<(f64, f64)> {
    if !matches!(spec.kind, LearnerKind::RegularizedLogistic) {
        return Err(invalid("convex constants are only defined for the regularized logistic learner"));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = data.feature_dim;
    let n = data.len() as f64;
    let mut gram = vec![0.0; d * d];
    for s in &data.samples {
        for i in 0..d {
            for j in 0..d {
                gram[i * d + j] += s.features[i] * s.features[j];
            }
        }
    }
    for g in gram.iter_mut() {
        *g /= n;
    }
    let lambda = power_iteration(&gram, d);
    Ok((0.5 * lambda + spec.reg, spec.reg))
}

/// Largest eigenvalue of a symmetric PSD matrix.
pub(crate) fn power_iteration(a: &[f64], d: usize) -> f64 {
    // Deterministic start with distinct entries so it is unlikely to be
    // orthogonal to the top eigenvector.
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 / (d as f64 + 1.0)).collect();
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let w: Vec<f64> = (0..d).map(|i| dot(&a[i * d..(i + 1) * d], &v)).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next: Vec<f64> = w.iter().map(|x| x / norm).collect();
        let change = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        lambda = norm;
        if change < 1e-13 {
            break;
        }
    }
    lambda
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Returns `(logsumexp(z), softmax(z))`.
fn softmax(z: &[f64]) -> (f64, Vec<f64>) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    (m + s.ln(), e.iter().map(|v| v / s).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::{generate_synthetic, SyntheticSpec};
    use hiflash_oracles::{central_difference_gradient, dense_symmetric_eigenvalues, naive_mean};

    fn toy(seed: u64) -> Dataset {
        generate_synthetic(&SyntheticSpec::new(40, 3, 4, 2.0).with_test(3), seed).unwrap().0
    }

    #[test]
    fn zero_params_logistic_loss_is_ln2() {
        let data = generate_synthetic(&SyntheticSpec::new(20, 2, 2, 3.0).with_test(2), 1).unwrap().0;
        let spec = LearnerSpec::logistic(2, 2, 0.0);
        let l = loss(&spec, &ParamVector::zeros(4), &data).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn loss_matches_naive_resummation() {
        let data = toy(2);
        for spec in [LearnerSpec::logistic(4, 3, 0.1), LearnerSpec::mlp(4, 3, 5, 0.01)] {
            let p = spec.init_params(3);
            let mut p = p;
            for (i, v) in p.as_mut_slice().iter_mut().enumerate() {
                *v += 0.05 * ((i * 7 % 11) as f64 - 5.0);
            }
            let per_sample: Vec<f64> = data
                .samples
                .iter()
                .map(|s| {
                    let z = spec.logits(&p, &s.features);
                    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[s.label]
                })
                .collect();
            let expected = naive_mean(&per_sample) + 0.5 * spec.reg * p.iter().map(|v| v * v).sum::<f64>();
            let got = loss(&spec, &p, &data).unwrap();
            assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let data = toy(4);
        for spec in [LearnerSpec::logistic(4, 3, 0.1), LearnerSpec::mlp(4, 3, 6, 0.01)] {
            let mut p = spec.init_params(5);
            for (i, v) in p.as_mut_slice().iter_mut().enumerate() {
                *v += 0.1 * (((i * 13) % 7) as f64 - 3.0);
            }
            let g = gradient(&spec, &p, &data).unwrap();
            let fd = central_difference_gradient(|x| loss(&spec, &ParamVector::from_vec(x.to_vec()), &data).unwrap(), &p, 1e-5);
            let num: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            assert!(num / den < 1e-5, "relative error {}", num / den);
        }
    }

    #[test]
    fn descent_step_lowers_convex_loss() {
        let data = toy(6);
        let spec = LearnerSpec::logistic(4, 3, 0.05);
        let p0 = ParamVector::zeros(spec.num_params());
        let mut sampler = BatchSampler::new(0, 0);
        let p1 = sgd_step(&spec, &p0, &data, 0.1, 0, &mut sampler).unwrap();
        assert!(loss(&spec, &p1, &data).unwrap() < loss(&spec, &p0, &data).unwrap());
    }

    #[test]
    fn zero_lr_and_full_batch_definition() {
        let data = toy(7);
        let spec = LearnerSpec::logistic(4, 3, 0.05);
        let p0 = spec.init_params(0);
        let mut sampler = BatchSampler::new(1, 0);
        assert_eq!(sgd_step(&spec, &p0, &data, 0.0, 8, &mut sampler).unwrap(), p0);
        let full = sgd_step(&spec, &p0, &data, 0.3, 1000, &mut sampler).unwrap();
        let mut expected = p0.clone();
        expected.axpy(-0.3, &gradient(&spec, &p0, &data).unwrap());
        assert_eq!(full, expected);
    }

    #[test]
    fn batches_of_sixty_are_without_replacement() {
        let mut s = BatchSampler::new(3, 9);
        let b = s.next_batch(200, 60);
        assert_eq!(b.len(), 60);
        let mut sorted = b.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 60);
        // within one epoch, consecutive batches do not overlap
        let b2 = s.next_batch(200, 60);
        assert!(b2.iter().all(|i| !b.contains(i)));
        let mut again = BatchSampler::new(3, 9);
        assert_eq!(again.next_batch(200, 60), b);
    }

    #[test]
    fn identical_data_gives_identical_gradients() {
        let data = toy(8);
        let spec = LearnerSpec::mlp(4, 3, 4, 0.0);
        let p = spec.init_params(1);
        assert_eq!(gradient(&spec, &p, &data).unwrap(), gradient(&spec, &p, &data.clone()).unwrap());
    }

    #[test]
    fn gradient_vanishes_at_convex_optimum() {
        let data = toy(9);
        let spec = LearnerSpec::logistic(4, 3, 0.1);
        let (beta, _) = estimate_convex_constants(&spec, &data).unwrap();
        let mut p = ParamVector::zeros(spec.num_params());
        for _ in 0..5000 {
            let g = gradient(&spec, &p, &data).unwrap();
            p.axpy(-1.0 / beta, &g);
        }
        assert!(gradient(&spec, &p, &data).unwrap().norm() < 1e-6);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let data = toy(1);
        let spec = LearnerSpec::logistic(4, 3, 0.0);
        assert!(matches!(loss(&spec, &ParamVector::zeros(5), &data), Err(Error::DimensionMismatch { .. })));
        assert!(gradient(&LearnerSpec::logistic(5, 3, 0.0), &ParamVector::zeros(15), &data).is_err());
    }

    #[test]
    fn convex_constants() {
        let spec = LearnerSpec::logistic(3, 2, 0.25);
        let zeros = Dataset::new(3, 2, vec![Sample { features: vec![0.0; 3], label: 0 }, Sample { features: vec![0.0; 3], label: 1 }]).unwrap();
        let (beta, mu) = estimate_convex_constants(&spec, &zeros).unwrap();
        assert_eq!(beta, 0.25);
        assert_eq!(mu, 0.25);
        assert!(estimate_convex_constants(&LearnerSpec::mlp(3, 2, 4, 0.1), &zeros).is_err());
    }

    #[test]
    fn power_iteration_matches_dense_eigensolver() {
        let data = generate_synthetic(&SyntheticSpec::new(30, 3, 5, 1.5).with_test(3), 11).unwrap().0;
        let d = 5;
        let mut gram = vec![0.0; d * d];
        for s in &data.samples {
            for i in 0..d {
                for j in 0..d {
                    gram[i * d + j] += s.features[i] * s.features[j] / data.len() as f64;
                }
            }
        }
        let top = dense_symmetric_eigenvalues(&gram, d).into_iter().fold(f64::NEG_INFINITY, f64::max);
        assert!((power_iteration(&gram, d) - top).abs() < 1e-4);
        let (beta, _) = estimate_convex_constants(&LearnerSpec::logistic(5, 3, 0.0), &data).unwrap();
        assert!((beta - 0.5 * top).abs() < 1e-4);
    }

    #[test]
    fn lr_schedule_decays_per_period() {
        let s = LrSchedule { initial: 0.01, decay_rate: 0.99, decay_every: 100 };
        assert_eq!(s.at(99), 0.01);
        assert!((s.at(100) - 0.0099).abs() < 1e-15);
        assert!((s.at(250) - 0.01 * 0.99f64.powi(2)).abs() < 1e-15);
        assert_eq!(LrSchedule::constant(0.5).at(10_000), 0.5);
    }
}
