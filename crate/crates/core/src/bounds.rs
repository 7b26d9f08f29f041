//! Convergence-bound calculators and the virtual-cluster divergence check.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::learner::{estimate_convex_constants, gradient, ClientDataset, Dataset, LearnerSpec, ParamVector};
use crate::rng;
use crate::{Error, Result};

/// `g(x) = δ/β ((ηβ + 1)^x - 1) - ηδx`: the client-edge weight divergence
/// bound after `x` local steps.
pub fn g_function(delta_max: f64, beta: f64, eta: f64, x: u64) -> Result<f64> {
    if beta <= 0.0 {
        return Err(invalid(format!("beta must be positive, got {beta}")));
    }
    if x <= 1 {
        // both terms cancel exactly; avoid rounding noise
        return Ok(0.0);
    }
    let x_i = i32::try_from(x).map_err(|_| invalid("x too large"))?;
    Ok(delta_max / beta * ((eta * beta + 1.0).powi(x_i) - 1.0) - eta * delta_max * x as f64)
}

/// `C1 = 1 - α_τ + α_τ (1 - ημ)^{c H_min}`.
pub fn contraction(alpha_tau: f64, eta: f64, mu: f64, c: u64, h_min: u64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha_tau) {
        return Err(invalid(format!("alpha_tau must lie in [0, 1], got {alpha_tau}")));
    }
    let em = eta * mu;
    if !(0.0..1.0).contains(&em) {
        return Err(Error::InvalidArgument(format!("eta * mu = {em} is outside [0, 1)")));
    }
    Ok(1.0 - alpha_tau + alpha_tau * (1.0 - em).powi(exp(c * h_min)?))
}

fn exp(n: u64) -> Result<i32> {
    i32::try_from(n).map_err(|_| invalid("exponent too large"))
}

/// `κ = C1^{T_c}`.
pub fn kappa(alpha_tau: f64, eta: f64, mu: f64, c: u64, h_min: u64, t_c: u64) -> Result<f64> {
    Ok(contraction(alpha_tau, eta, mu, c, h_min)?.powi(exp(t_c)?))
}

/// `U = C1^{T_c} (C2 - C3) + C3`.
pub fn closed_form_u(c1: f64, c2: f64, c3: f64, t_c: u64) -> Result<f64> {
    Ok(c1.powi(exp(t_c)?) * (c2 - c3) + c3)
}

/// Constants of the strongly convex bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvexConstants {
    pub beta: f64,
    pub mu: f64,
    pub rho: f64,
    pub eta: f64,
    pub c: u64,
    pub h_min: u64,
    pub h_max: u64,
    pub delta_max: f64,
    /// Edge-cloud divergence `Δ`.
    pub edge_divergence: f64,
    /// Stochastic-gradient bound `V`.
    pub grad_bound: f64,
    pub alpha_tau: f64,
    pub t_c: u64,
}

/// Every term of a bound evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub kappa: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub b: f64,
    /// `T_c → ∞` limit `(A1 V + A2 δ + A3 Δ) / B`.
    pub limit: f64,
    pub bound: f64,
}

fn check_common(beta: f64, eta: f64, c: u64, h_min: u64, h_max: u64, alpha_tau: f64) -> Result<()> {
    if !(beta > 0.0) {
        return Err(invalid(format!("beta must be positive, got {beta}")));
    }
    if !(eta > 0.0) {
        return Err(invalid(format!("eta must be positive, got {eta}")));
    }
    if !(eta < 1.0 / beta) {
        return Err(Error::InvalidArgument(format!("regime violated: eta = {eta} must be below 1/beta = {}", 1.0 / beta)));
    }
    if c == 0 || h_min == 0 || h_max < h_min {
        return Err(invalid("need c >= 1 and 1 <= h_min <= h_max"));
    }
    if !(0.0..=1.0).contains(&alpha_tau) {
        return Err(invalid(format!("alpha_tau must lie in [0, 1], got {alpha_tau}")));
    }
    Ok(())
}

impl ConvexConstants {
    pub fn validate(&self) -> Result<()> {
        check_common(self.beta, self.eta, self.c, self.h_min, self.h_max, self.alpha_tau)?;
        if !(self.mu > 0.0) {
            return Err(invalid(format!("mu must be positive for the strongly convex bound, got {}", self.mu)));
        }
        for (name, v) in [("rho", self.rho), ("delta_max", self.delta_max), ("edge_divergence", self.edge_divergence), ("grad_bound", self.grad_bound)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// `κ gap + (1 - κ)(A1 V + A2 δ + A3 Δ)/B` with
/// `A2 = ρ H_max (((ηβ + 1)^c - 1)/β - ηc)`.
pub fn convex_bound(k: &ConvexConstants, f0_gap: f64) -> Result<BoundTerms> {
    k.validate()?;
    let kappa = kappa(k.alpha_tau, k.eta, k.mu, k.c, k.h_min, k.t_c)?;
    let hmax = k.h_max as f64;
    let a1 = 1.0 / (2.0 * k.mu);
    let a2 = k.rho * hmax * (((k.eta * k.beta + 1.0).powi(exp(k.c)?) - 1.0) / k.beta - k.eta * k.c as f64);
    let a3 = k.c as f64 * hmax * k.eta / 2.0;
    let b = 1.0 - (1.0 - k.eta * k.mu).powi(exp(k.c * k.h_min)?);
    if b <= 0.0 {
        return Err(Error::InvalidArgument("degenerate bound: B = 0".into()));
    }
    let limit = (a1 * k.grad_bound + a2 * k.delta_max + a3 * k.edge_divergence) / b;
    Ok(BoundTerms { kappa, a1, a2, a3, b, limit, bound: kappa * f0_gap + (1.0 - kappa) * limit })
}

/// Constants of the weakly convex bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeaklyConvexConstants {
    pub beta: f64,
    pub mu: f64,
    pub mu_tilde: f64,
    pub beta_tilde: f64,
    pub rho: f64,
    pub rho_tilde: f64,
    pub eta: f64,
    pub c: u64,
    pub h_min: u64,
    pub h_max: u64,
    pub delta_max_tilde: f64,
    pub edge_divergence_tilde: f64,
    pub grad_bound_tilde: f64,
    pub alpha_tau: f64,
    pub t_c: u64,
}

impl WeaklyConvexConstants {
    pub fn validate(&self) -> Result<()> {
        check_common(self.beta, self.eta, self.c, self.h_min, self.h_max, self.alpha_tau)?;
        if !(self.mu >= 0.0) {
            return Err(invalid(format!("mu must be non-negative, got {}", self.mu)));
        }
        if !(self.mu_tilde > self.mu) {
            return Err(Error::InvalidArgument(format!(
                "regime violated: mu_tilde = {} must exceed mu = {}",
                self.mu_tilde, self.mu
            )));
        }
        if !(self.eta < 2.0 / (self.mu_tilde - self.mu)) {
            return Err(Error::InvalidArgument(format!(
                "regime violated: eta = {} must be below 2/(mu_tilde - mu) = {}",
                self.eta,
                2.0 / (self.mu_tilde - self.mu)
            )));
        }
        if !(self.beta_tilde > 0.0) {
            return Err(invalid("beta_tilde must be positive"));
        }
        Ok(())
    }
}

pub fn nonconvex_bound(k: &WeaklyConvexConstants, f0_gap: f64) -> Result<BoundTerms> {
    k.validate()?;
    let gap = k.mu_tilde - k.mu;
    let hmax = k.h_max as f64;
    let shrink = (1.0 - k.eta * gap / 2.0).powi(exp(k.c * k.h_min)?);
    let base = 1.0 - k.alpha_tau + k.alpha_tau * shrink;
    let kappa = base.powi(exp(k.t_c)?);
    let a1 = 12.0 * k.rho * k.rho * hmax / gap.powi(3) + (5.0 * k.mu_tilde - k.mu) / (2.0 * gap * gap);
    let a2 = k.rho_tilde * hmax / k.beta_tilde
        * ((k.eta * k.beta_tilde + 1.0).powi(exp(k.c)?) - 1.0 - k.beta_tilde * k.eta * k.c as f64);
    let a3 = 2.0 * hmax / gap;
    let b = 1.0 - shrink;
    if b <= 0.0 {
        return Err(Error::InvalidArgument("degenerate bound: B = 0".into()));
    }
    let limit = (a1 * k.grad_bound_tilde + a2 * k.delta_max_tilde + a3 * k.edge_divergence_tilde) / b;
    Ok(BoundTerms { kappa, a1, a2, a3, b, limit, bound: kappa * f0_gap + (1.0 - kappa) * limit })
}

/// Federated edge trajectory and its virtual centralized counterpart, one
/// entry per local step `t_e = 0..=H c`.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualTrace {
    /// Size-weighted average of the client models at each step.
    pub federated: Vec<ParamVector>,
    pub virtual_model: Vec<ParamVector>,
    /// Every client iterate visited, for divergence sampling.
    pub client_iterates: Vec<ParamVector>,
}

fn pooled(clients: &[ClientDataset]) -> Result<Dataset> {
    Dataset::pooled(clients.iter().map(|c| &c.data))
}

/// Full-batch federated training of one edge next to centralized gradient
/// descent on the pooled edge data, re-synced at every aggregation.
pub fn virtual_cluster_training(
    spec: &LearnerSpec,
    clients: &[ClientDataset],
    start: &ParamVector,
    eta: f64,
    c: usize,
    rounds: usize,
) -> Result<VirtualTrace> {
    if clients.is_empty() {
        return Err(invalid("an edge needs at least one client"));
    }
    if c == 0 || rounds == 0 {
        return Err(invalid("need c >= 1 and H >= 1"));
    }
    let edge_data = pooled(clients)?;
    let weights: Vec<f64> = clients.iter().map(|k| k.len() as f64).collect();
    let mut locals: Vec<ParamVector> = vec![start.clone(); clients.len()];
    let mut v = start.clone();
    let mut trace = VirtualTrace { federated: vec![start.clone()], virtual_model: vec![start.clone()], client_iterates: vec![start.clone()] };
    for t_e in 1..=(rounds * c) {
        for (w, k) in locals.iter_mut().zip(clients) {
            let g = gradient(spec, w, &k.data)?;
            w.axpy(-eta, &g);
            trace.client_iterates.push(w.clone());
        }
        let avg = ParamVector::weighted_average(locals.iter().zip(&weights).map(|(w, s)| (w, *s)))?;
        if t_e % c == 0 {
            for w in locals.iter_mut() {
                *w = avg.clone();
            }
            v = avg.clone();
        } else {
            let g = gradient(spec, &v, &edge_data)?;
            v.axpy(-eta, &g);
        }
        if !v.is_finite() || !avg.is_finite() {
            return Err(Error::Divergence("non-finite iterate in virtual cluster training".into()));
        }
        trace.client_iterates.push(v.clone());
        trace.federated.push(avg);
        trace.virtual_model.push(v.clone());
    }
    Ok(trace)
}

/// Size-weighted client-edge gradient divergence at the given points:
/// `Σ_k |D_k| max_p ‖∇F_k(p) − ∇F^m(p)‖ / Σ_k |D_k|`.
pub fn client_edge_divergence(spec: &LearnerSpec, clients: &[ClientDataset], points: &[ParamVector]) -> Result<f64> {
    let edge_data = pooled(clients)?;
    let mut per_client = vec![0.0f64; clients.len()];
    for p in points {
        let ge = gradient(spec, p, &edge_data)?;
        for (d, k) in per_client.iter_mut().zip(clients) {
            let gk = gradient(spec, p, &k.data)?;
            *d = d.max(gk.distance(&ge));
        }
    }
    let total: f64 = clients.iter().map(|k| k.len() as f64).sum();
    Ok(per_client.iter().zip(clients).map(|(d, k)| d * k.len() as f64).sum::<f64>() / total)
}

/// Empirical surrogates of `Δ` (squared edge-cloud gradient gap) and `V`
/// (squared client gradient norm) at the given points.
pub fn edge_cloud_divergence(spec: &LearnerSpec, edges: &[Vec<ClientDataset>], points: &[ParamVector]) -> Result<(f64, f64)> {
    let all: Vec<ClientDataset> = edges.iter().flatten().cloned().collect();
    let global = pooled(&all)?;
    let mut big_delta: f64 = 0.0;
    let mut v: f64 = 0.0;
    for p in points {
        let g = gradient(spec, p, &global)?;
        for e in edges {
            let ge = gradient(spec, p, &pooled(e)?)?;
            big_delta = big_delta.max(ge.distance(&g).powi(2));
        }
        for k in &all {
            v = v.max(gradient(spec, p, &k.data)?.norm().powi(2));
        }
    }
    Ok((big_delta, v))
}

/// Measured `‖ω^m − v‖` against `g(t_e − (h−1)c)` at every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceCheckReport {
    pub beta: f64,
    pub delta_max: f64,
    pub eta: f64,
    pub c: usize,
    pub intervals: usize,
    pub sampled_points: usize,
    pub steps: Vec<DivergenceCheckStep>,
    pub violations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceCheckStep {
    pub t_e: usize,
    pub measured: f64,
    pub bound: f64,
}

/// Runs [`virtual_cluster_training`] and checks the divergence bound.
///
/// `β` is the largest per-client smoothness estimate and `δ_max` is measured
/// over every trajectory iterate plus `random_points` Gaussian perturbations
/// of the start model.
pub fn empirical_divergence_check(
    spec: &LearnerSpec,
    clients: &[ClientDataset],
    start: &ParamVector,
    eta: f64,
    c: usize,
    rounds: usize,
    random_points: usize,
    seed: u64,
) -> Result<DivergenceCheckReport> {
    if !spec.is_strongly_convex() {
        return Err(invalid("the divergence check needs the strongly convex learner"));
    }
    let mut beta: f64 = 0.0;
    for k in clients {
        beta = beta.max(estimate_convex_constants(spec, &k.data)?.0);
    }
    let trace = virtual_cluster_training(spec, clients, start, eta, c, rounds)?;
    let mut points = trace.client_iterates.clone();
    let mut rng = rng::stream(seed, "divergence-check-points", 0);
    for _ in 0..random_points {
        let p: Vec<f64> = start.iter().map(|x| x + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect();
        points.push(ParamVector::from_vec(p));
    }
    let delta_max = client_edge_divergence(spec, clients, &points)?;
    let mut steps = Vec::with_capacity(trace.federated.len());
    let mut violations = 0;
    for (t_e, (w, v)) in trace.federated.iter().zip(&trace.virtual_model).enumerate() {
        let h = if t_e == 0 { 1 } else { (t_e - 1) / c + 1 };
        let x = (t_e - (h - 1) * c) as u64;
        let bound = g_function(delta_max, beta, eta, x)?;
        let measured = w.distance(v);
        if measured > bound + 1e-10 * (1.0 + bound) {
            violations += 1;
        }
        steps.push(DivergenceCheckStep { t_e, measured, bound });
    }
    Ok(DivergenceCheckReport { beta, delta_max, eta, c, intervals: rounds, sampled_points: points.len(), steps, violations })
}
