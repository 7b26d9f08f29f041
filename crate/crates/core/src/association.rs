//! Client-edge association: label-distribution divergence, the
//! latency/divergence trade-off cost, the two-way greedy selection, baseline
//! constructions and an exhaustive oracle for small instances.

use std::collections::BTreeMap;
use std::io::BufRead;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::learner::LabelDistribution;
use crate::rng;
use crate::{Error, Result};

/// `KL(p || q)` in bits; `0 * log(0 / q) = 0`.
pub fn kl_divergence(p: &LabelDistribution, q: &LabelDistribution) -> Result<f64> {
    same_len(p, q)?;
    let mut total = 0.0;
    for (a, b) in p.probs().iter().zip(q.probs()) {
        if *a > 0.0 {
            if *b <= 0.0 {
                return Ok(f64::INFINITY);
            }
            total += a * (a / b).log2();
        }
    }
    Ok(total)
}

/// Jensen-Shannon divergence in bits, so the value lies in `[0, 1]`.
pub fn js_divergence(p: &LabelDistribution, q: &LabelDistribution) -> Result<f64> {
    same_len(p, q)?;
    Ok(js_raw(p.probs(), q.probs()))
}

/// Symmetric by construction: each coordinate contributes
/// `h(a, b) + h(b, a)` evaluated in a fixed operand order.
fn js_raw(p: &[f64], q: &[f64]) -> f64 {
    let term = |a: f64, m: f64| if a > 0.0 { a * (a / m).log2() } else { 0.0 };
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let m = 0.5 * (lo + hi);
        total += term(lo, m) + term(hi, m);
    }
    (0.5 * total).clamp(0.0, 1.0)
}

fn same_len(p: &LabelDistribution, q: &LabelDistribution) -> Result<()> {
    if p.num_classes() != q.num_classes() {
        return Err(Error::DimensionMismatch { expected: p.num_classes(), found: q.num_classes() });
    }
    Ok(())
}

/// Everything the association step needs to know about the clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationInstance {
    pub distributions: Vec<LabelDistribution>,
    pub sizes: Vec<usize>,
    /// `latency[m][k]`: response latency of client `k` under edge `m`;
    /// `None` when `k` is outside `m`'s communication range.
    pub latency: Vec<Vec<Option<f64>>>,
    pub lambda: f64,
    pub reference: LabelDistribution,
}

impl AssociationInstance {
    pub fn new(
        distributions: Vec<LabelDistribution>,
        sizes: Vec<usize>,
        latency: Vec<Vec<Option<f64>>>,
        lambda: f64,
    ) -> Result<Self> {
        let k = distributions.first().map(|d| d.num_classes()).ok_or_else(|| invalid("instance has no clients"))?;
        let inst = Self { distributions, sizes, latency, lambda, reference: LabelDistribution::uniform(k) };
        inst.validate()?;
        Ok(inst)
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self { lambda, ..self.clone() }
    }

    pub fn num_clients(&self) -> usize {
        self.distributions.len()
    }

    pub fn num_edges(&self) -> usize {
        self.latency.len()
    }

    pub fn in_range(&self, edge: usize, client: usize) -> bool {
        self.latency[edge][client].is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_clients();
        if n == 0 || self.num_edges() == 0 {
            return Err(invalid("instance needs at least one client and one edge"));
        }
        if self.sizes.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: self.sizes.len() });
        }
        if self.sizes.contains(&0) {
            return Err(invalid("client sizes must be positive"));
        }
        let k = self.reference.num_classes();
        if self.distributions.iter().any(|d| d.num_classes() != k) {
            return Err(invalid("all label distributions must have the same number of classes"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid("lambda must be finite and non-negative"));
        }
        for (m, row) in self.latency.iter().enumerate() {
            if row.len() != n {
                return Err(invalid(format!("latency row for edge {m} has {} entries, expected {n}", row.len())));
            }
            if row.iter().flatten().any(|l| !(l.is_finite() && *l >= 0.0)) {
                return Err(invalid(format!("latency row for edge {m} has a negative or non-finite entry")));
            }
        }
        for k in 0..n {
            if !(0..self.num_edges()).any(|m| self.in_range(m, k)) {
                return Err(Error::Infeasible(format!("client {k} is out of range of every edge")));
            }
        }
        Ok(())
    }

    /// Size-weighted label distribution of a cluster.
    pub fn cluster_distribution(&self, cluster: &[usize]) -> Result<LabelDistribution> {
        LabelDistribution::mixture(cluster.iter().map(|&k| (&self.distributions[k], self.sizes[k] as f64)))
    }

    /// `L^m = max_k L^{m,k}` over the cluster; zero for an empty cluster.
    pub fn edge_latency(&self, edge: usize, cluster: &[usize]) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for &k in cluster {
            let l = self.latency[edge][k]
                .ok_or_else(|| Error::Infeasible(format!("client {k} is out of range of edge {edge}")))?;
            worst = worst.max(l);
        }
        Ok(worst)
    }
}

/// Disjoint client clusters, one per edge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Association {
    pub clusters: Vec<Vec<usize>>,
}

impl Association {
    /// Edge of every client.
    pub fn edge_of(&self, num_clients: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_clients];
        for (m, c) in self.clusters.iter().enumerate() {
            for &k in c {
                if k < num_clients {
                    out[k] = Some(m);
                }
            }
        }
        out
    }

    /// Every client appears exactly once and only under edges in range.
    pub fn validate(&self, inst: &AssociationInstance) -> Result<()> {
        if self.clusters.len() != inst.num_edges() {
            return Err(invalid(format!("{} clusters for {} edges", self.clusters.len(), inst.num_edges())));
        }
        let mut seen = vec![false; inst.num_clients()];
        for (m, c) in self.clusters.iter().enumerate() {
            for &k in c {
                if k >= seen.len() {
                    return Err(invalid(format!("client {k} does not exist")));
                }
                if std::mem::replace(&mut seen[k], true) {
                    return Err(invalid(format!("client {k} is assigned twice")));
                }
                if !inst.in_range(m, k) {
                    return Err(Error::Infeasible(format!("client {k} assigned to out-of-range edge {m}")));
                }
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(invalid(format!("client {k} is unassigned")));
        }
        Ok(())
    }
}

/// `COST_k^m`: latency of `client` under `edge` plus `lambda` times the JS
/// divergence between the cluster's merged distribution and the reference.
pub fn association_cost(inst: &AssociationInstance, edge: usize, cluster: &[usize], client: usize) -> Result<f64> {
    let latency = inst.latency[edge][client]
        .ok_or_else(|| invalid(format!("client {client} is outside the range of edge {edge}")))?;
    if inst.lambda == 0.0 {
        return Ok(latency);
    }
    let merged = if cluster.is_empty() {
        inst.distributions[client].clone()
    } else {
        let current = inst.cluster_distribution(cluster)?;
        let current_size: f64 = cluster.iter().map(|&k| inst.sizes[k] as f64).sum();
        LabelDistribution::mixture([(&current, current_size), (&inst.distributions[client], inst.sizes[client] as f64)])?
    };
    Ok(latency + inst.lambda * js_divergence(&merged, &inst.reference)?)
}

/// `Σ_m JS(LD^m, LD_IID)` over non-empty clusters.
pub fn total_js(assoc: &Association, inst: &AssociationInstance) -> Result<f64> {
    let mut total = 0.0;
    for c in assoc.clusters.iter().filter(|c| !c.is_empty()) {
        total += js_divergence(&inst.cluster_distribution(c)?, &inst.reference)?;
    }
    Ok(total)
}

/// `Σ_m [L^m + lambda * JS(LD^m, LD_IID)]`.
pub fn total_objective(assoc: &Association, inst: &AssociationInstance) -> Result<f64> {
    let mut total = 0.0;
    for (m, c) in assoc.clusters.iter().enumerate().filter(|(_, c)| !c.is_empty()) {
        total += inst.edge_latency(m, c)? + inst.lambda * js_divergence(&inst.cluster_distribution(c)?, &inst.reference)?;
    }
    Ok(total)
}

/// Mean over all clients of their response latency under the assigned edge.
pub fn mean_latency(assoc: &Association, inst: &AssociationInstance) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (m, c) in assoc.clusters.iter().enumerate() {
        for &k in c {
            total += inst.latency[m][k].ok_or_else(|| Error::Infeasible(format!("client {k} out of range of edge {m}")))?;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Two-way greedy association.
///
/// Each outer round visits the edges in index order. An edge with an empty
/// cluster immediately takes its lowest-latency unassociated in-range client;
/// any other edge proposes to the unassociated client minimizing
/// [`association_cost`] (ties: lowest client index). Every proposed client
/// then joins one of its proposers chosen uniformly at random from the seeded
/// stream. Rounds repeat until every client is associated.
pub fn associate(inst: &AssociationInstance, seed: u64) -> Result<Association> {
    inst.validate()?;
    let n = inst.num_clients();
    let m_count = inst.num_edges();
    let mut rng = rng::stream(seed, "associate", 0);
    let mut pooled = vec![true; n];
    let mut remaining = n;
    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); m_count];
    while remaining > 0 {
        let mut proposals: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut progressed = false;
        for m in 0..m_count {
            let candidates = (0..n).filter(|&k| pooled[k] && inst.in_range(m, k));
            if clusters[m].is_empty() {
                let best = candidates.min_by(|&a, &b| {
                    let (la, lb) = (inst.latency[m][a].unwrap_or(f64::INFINITY), inst.latency[m][b].unwrap_or(f64::INFINITY));
                    la.total_cmp(&lb).then(a.cmp(&b))
                });
                if let Some(k) = best {
                    clusters[m].push(k);
                    pooled[k] = false;
                    remaining -= 1;
                    progressed = true;
                }
            } else {
                let mut best: Option<(f64, usize)> = None;
                for k in candidates {
                    let cost = association_cost(inst, m, &clusters[m], k)?;
                    if best.is_none_or(|(b, _)| cost < b) {
                        best = Some((cost, k));
                    }
                }
                if let Some((_, k)) = best {
                    proposals[k].push(m);
                }
            }
        }
        for k in 0..n {
            if proposals[k].is_empty() || !pooled[k] {
                continue;
            }
            let &m = proposals[k].choose(&mut rng).expect("non-empty proposer set");
            clusters[m].push(k);
            pooled[k] = false;
            remaining -= 1;
            progressed = true;
        }
        if !progressed {
            return Err(Error::Infeasible("association made no progress".into()));
        }
    }
    for c in clusters.iter_mut() {
        c.sort_unstable();
    }
    Ok(Association { clusters })
}

/// Largest instance [`brute_force_associate`] accepts.
pub const BRUTE_FORCE_MAX_CLIENTS: usize = 10;
pub const BRUTE_FORCE_MAX_EDGES: usize = 3;

/// Exhaustive minimizer of [`total_objective`] over range-feasible
/// assignments that leave no edge empty (falling back to all range-feasible
/// assignments when that is impossible). Without this restriction the
/// max-latency term rewards piling every client onto one edge, which the
/// greedy procedure never does. Ties keep the first assignment enumerated.
pub fn brute_force_associate(inst: &AssociationInstance) -> Result<Association> {
    inst.validate()?;
    let n = inst.num_clients();
    let m = inst.num_edges();
    if n > BRUTE_FORCE_MAX_CLIENTS || m > BRUTE_FORCE_MAX_EDGES {
        return Err(invalid(format!(
            "instance too large for exhaustive search ({n} clients, {m} edges; limits {BRUTE_FORCE_MAX_CLIENTS}/{BRUTE_FORCE_MAX_EDGES})"
        )));
    }
    let nontrivial = exhaustive_best(inst, true)?;
    match nontrivial {
        Some(a) => Ok(a),
        None => exhaustive_best(inst, false)?.ok_or_else(|| Error::Infeasible("no range-feasible assignment".into())),
    }
}

fn exhaustive_best(inst: &AssociationInstance, require_nonempty: bool) -> Result<Option<Association>> {
    let n = inst.num_clients();
    let m = inst.num_edges();
    let mut best: Option<(f64, Association)> = None;
    let mut assign = vec![0usize; n];
    let total = m.pow(n as u32);
    'outer: for code in 0..total {
        let mut c = code;
        for slot in assign.iter_mut() {
            *slot = c % m;
            c /= m;
        }
        for (k, &e) in assign.iter().enumerate() {
            if !inst.in_range(e, k) {
                continue 'outer;
            }
        }
        let mut clusters = vec![Vec::new(); m];
        for (k, &e) in assign.iter().enumerate() {
            clusters[e].push(k);
        }
        if require_nonempty && clusters.iter().any(|c| c.is_empty()) {
            continue;
        }
        let a = Association { clusters };
        let obj = total_objective(&a, inst)?;
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, a));
        }
    }
    Ok(best.map(|(_, a)| a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceStrategy {
    /// Deal single-class clients round-robin so every edge sees every class
    /// equally often.
    EdgeIid,
    /// Sort clients by class and cut into contiguous blocks, concentrating
    /// each edge on a few classes.
    EdgeNoniid,
    /// Each client goes to its lowest-latency edge.
    LatencyOnly,
    /// Each client goes to a uniformly random in-range edge.
    Random,
}

fn dominant_class(d: &LabelDistribution) -> usize {
    let p = d.probs();
    (0..p.len()).fold(0, |best, i| if p[i] > p[best] { i } else { best })
}

pub fn reference_association(inst: &AssociationInstance, kind: ReferenceStrategy, seed: u64) -> Result<Association> {
    inst.validate()?;
    let n = inst.num_clients();
    let m = inst.num_edges();
    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); m];
    match kind {
        ReferenceStrategy::EdgeIid => {
            let k = inst.reference.num_classes();
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
            for c in 0..n {
                let d = &inst.distributions[c];
                let cls = dominant_class(d);
                if (d.probs()[cls] - 1.0).abs() > 1e-12 {
                    return Err(Error::Infeasible(format!("edge-iid construction needs single-class clients; client {c} is mixed")));
                }
                by_class[cls].push(c);
            }
            for (cls, members) in by_class.iter().enumerate() {
                if members.len() % m != 0 {
                    return Err(Error::Infeasible(format!(
                        "class {cls} has {} clients, not divisible across {m} edges",
                        members.len()
                    )));
                }
                let sizes: Vec<usize> = members.iter().map(|&c| inst.sizes[c]).collect();
                if sizes.iter().any(|s| *s != sizes[0]) {
                    return Err(Error::Infeasible(format!("class {cls} clients have unequal sizes")));
                }
                for (i, &c) in members.iter().enumerate() {
                    let e = i % m;
                    if !inst.in_range(e, c) {
                        return Err(Error::Infeasible(format!("client {c} is out of range of edge {e}")));
                    }
                    clusters[e].push(c);
                }
            }
        }
        ReferenceStrategy::EdgeNoniid => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by_key(|&c| (dominant_class(&inst.distributions[c]), c));
            let base = n / m;
            let extra = n % m;
            let mut start = 0;
            for (e, cluster) in clusters.iter_mut().enumerate() {
                let len = base + usize::from(e < extra);
                for &c in &order[start..start + len] {
                    if !inst.in_range(e, c) {
                        return Err(Error::Infeasible(format!("client {c} is out of range of edge {e}")));
                    }
                    cluster.push(c);
                }
                start += len;
            }
        }
        ReferenceStrategy::LatencyOnly => {
            for c in 0..n {
                let e = (0..m)
                    .filter(|&e| inst.in_range(e, c))
                    .min_by(|&a, &b| inst.latency[a][c].unwrap().total_cmp(&inst.latency[b][c].unwrap()).then(a.cmp(&b)))
                    .expect("validated: every client is in range of some edge");
                clusters[e].push(c);
            }
        }
        ReferenceStrategy::Random => {
            let mut rng = rng::stream(seed, "random-association", 0);
            for c in 0..n {
                let options: Vec<usize> = (0..m).filter(|&e| inst.in_range(e, c)).collect();
                let e = options[rng.random_range(0..options.len())];
                clusters[e].push(c);
            }
        }
    }
    for c in clusters.iter_mut() {
        c.sort_unstable();
    }
    Ok(Association { clusters })
}

/// Parses the sectioned instance text format:
///
/// ```text
/// lambda = 300
/// [distributions]
/// 0.5 0.5 0
/// [sizes]
/// 10 20
/// [latency]
/// 0.12 -
/// ```
///
/// `[distributions]` has one row per client; `[sizes]` lists client sizes;
/// `[latency]` has one row per edge and one column per client, with `-`
/// marking an out-of-range pair. An optional `[reference]` section overrides
/// the uniform reference distribution.
pub fn read_instance(input: impl BufRead) -> Result<AssociationInstance> {
    let mut section = String::new();
    let mut sections: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    let mut lambda = 0.0;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') && line.ends_with(']') {
            section = line[1..line.len() - 1].trim().to_string();
            if !matches!(section.as_str(), "distributions" | "sizes" | "latency" | "reference") {
                return Err(Error::Parse(format!("line {}: unknown section [{section}]", i + 1)));
            }
            continue;
        }
        if section.is_empty() {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected 'key = value' before sections", i + 1)))?;
            if key.trim() != "lambda" {
                return Err(Error::Parse(format!("line {}: unknown key '{}'", i + 1, key.trim())));
            }
            lambda = value.trim().parse().map_err(|e| Error::Parse(format!("line {}: lambda: {e}", i + 1)))?;
            continue;
        }
        sections
            .entry(section.clone())
            .or_default()
            .push(line.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()).map(String::from).collect());
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("'{s}': {e}")));
    let take = |name: &str| sections.get(name).cloned().ok_or_else(|| Error::Parse(format!("missing [{name}] section")));
    let distributions = take("distributions")?
        .into_iter()
        .map(|row| LabelDistribution::new(row.iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?))
        .collect::<Result<Vec<_>>>()?;
    let sizes = take("sizes")?
        .into_iter()
        .flatten()
        .map(|s| s.parse::<usize>().map_err(|e| Error::Parse(format!("size '{s}': {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let latency = take("latency")?
        .into_iter()
        .map(|row| row.iter().map(|s| if s == "-" { Ok(None) } else { num(s).map(Some) }).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let mut inst = AssociationInstance::new(distributions, sizes, latency, lambda)?;
    if let Some(rows) = sections.get("reference") {
        let probs = rows.iter().flatten().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
        inst.reference = LabelDistribution::new(probs)?;
        inst.validate()?;
    }
    Ok(inst)
}

pub fn write_instance(inst: &AssociationInstance, out: &mut impl std::io::Write) -> Result<()> {
    writeln!(out, "lambda = {:?}", inst.lambda)?;
    writeln!(out, "[distributions]")?;
    for d in &inst.distributions {
        writeln!(out, "{}", d.probs().iter().map(|p| format!("{p:?}")).collect::<Vec<_>>().join(" "))?;
    }
    writeln!(out, "[sizes]")?;
    writeln!(out, "{}", inst.sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" "))?;
    writeln!(out, "[latency]")?;
    for row in &inst.latency {
        let cells: Vec<String> = row.iter().map(|l| l.map_or("-".to_string(), |v| format!("{v:?}"))).collect();
        writeln!(out, "{}", cells.join(" "))?;
    }
    writeln!(out, "[reference]")?;
    writeln!(out, "{}", inst.reference.probs().iter().map(|p| format!("{p:?}")).collect::<Vec<_>>().join(" "))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use hiflash_oracles::{all_assignments, naive_js, pooled_histogram};
    use proptest::prelude::*;

    fn ld(p: &[f64]) -> LabelDistribution {
        LabelDistribution::new(p.to_vec()).unwrap()
    }

    fn one_hot(k: usize, c: usize) -> LabelDistribution {
        let mut v = vec![0.0; k];
        v[c] = 1.0;
        ld(&v)
    }

    fn symmetric_four() -> AssociationInstance {
        let d = vec![one_hot(2, 0), one_hot(2, 1), one_hot(2, 0), one_hot(2, 1)];
        AssociationInstance::new(d, vec![10; 4], vec![vec![Some(1.0); 4]; 2], 1000.0).unwrap()
    }

    #[test]
    fn js_reference_values() {
        assert_eq!(js_divergence(&ld(&[0.3, 0.7]), &ld(&[0.3, 0.7])).unwrap(), 0.0);
        assert_eq!(js_divergence(&ld(&[1.0, 0.0]), &ld(&[0.0, 1.0])).unwrap(), 1.0);
        let v = js_divergence(&ld(&[0.5, 0.5]), &ld(&[1.0, 0.0])).unwrap();
        assert!((v - 0.311_278_124_459_132_8).abs() < 1e-12, "{v}");
        assert!((v - naive_js(&[0.5, 0.5], &[1.0, 0.0])).abs() < 1e-15);
        assert!(js_divergence(&ld(&[1.0]), &ld(&[0.5, 0.5])).is_err());
        assert!(LabelDistribution::new(vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn kl_conventions() {
        assert_eq!(kl_divergence(&ld(&[0.0, 1.0]), &ld(&[0.5, 0.5])).unwrap(), 1.0);
        assert_eq!(kl_divergence(&ld(&[1.0, 0.0]), &ld(&[0.0, 1.0])).unwrap(), f64::INFINITY);
    }

    #[test]
    fn cost_with_zero_lambda_is_latency() {
        let inst = symmetric_four().with_lambda(0.0);
        assert_eq!(association_cost(&inst, 0, &[0], 2).unwrap(), 1.0);
    }

    #[test]
    fn balancing_client_costs_latency_only() {
        let inst = symmetric_four();
        assert_eq!(association_cost(&inst, 0, &[0], 1).unwrap(), 1.0);
        assert!(association_cost(&inst, 0, &[0], 2).unwrap() > 1.0);
    }

    #[test]
    fn merged_distribution_matches_pooled_histogram() {
        let labels: Vec<Vec<usize>> = vec![vec![0, 0, 1], vec![2, 2, 2, 1, 0], vec![1]];
        let dists: Vec<LabelDistribution> = labels.iter().map(|l| ld(&pooled_histogram(&[l.as_slice()], 3))).collect();
        let sizes: Vec<usize> = labels.iter().map(|l| l.len()).collect();
        let inst = AssociationInstance::new(dists, sizes, vec![vec![Some(0.0); 3]], 1.0).unwrap();
        let merged = inst.cluster_distribution(&[0, 1, 2]).unwrap();
        let pooled = pooled_histogram(&[&labels[0], &labels[1], &labels[2]], 3);
        for (a, b) in merged.probs().iter().zip(&pooled) {
            assert!((a - b).abs() < 1e-15);
        }
        // association_cost merges in the same way
        let js = js_divergence(&ld(&pooled), &inst.reference).unwrap();
        assert!((association_cost(&inst, 0, &[0, 1], 2).unwrap() - js).abs() < 1e-12);
    }

    #[test]
    fn single_edge_takes_everyone() {
        let d = vec![one_hot(3, 0), one_hot(3, 1), one_hot(3, 2), one_hot(3, 0)];
        let inst = AssociationInstance::new(d, vec![5; 4], vec![vec![Some(0.3), Some(0.1), Some(0.2), Some(0.4)]], 2.0).unwrap();
        assert_eq!(associate(&inst, 0).unwrap().clusters, vec![vec![0, 1, 2, 3]]);
    }

    #[test]
    fn symmetric_instance_balances_labels() {
        let inst = symmetric_four();
        for seed in 0..20 {
            let a = associate(&inst, seed).unwrap();
            a.validate(&inst).unwrap();
            assert_eq!(total_js(&a, &inst).unwrap(), 0.0);
        }
        let oracle = brute_force_associate(&inst).unwrap();
        assert_eq!(total_js(&oracle, &inst).unwrap(), 0.0);
        // 2^4 assignments minus the two that leave an edge empty = 14
        let nontrivial = all_assignments(4, 2).into_iter().filter(|a| a.contains(&0) && a.contains(&1)).count();
        assert_eq!(nontrivial, 14);
        assert_eq!(total_objective(&associate(&inst, 3).unwrap(), &inst).unwrap(), total_objective(&oracle, &inst).unwrap());
    }

    #[test]
    fn class_sorted_ordering_depends_on_the_contest() {
        // both empty edges grab a class-0 client first; the class-1 clients are
        // then contested and the random choice can stack them on one edge
        let d = vec![one_hot(2, 0), one_hot(2, 0), one_hot(2, 1), one_hot(2, 1)];
        let inst = AssociationInstance::new(d, vec![10; 4], vec![vec![Some(1.0); 4]; 2], 1000.0).unwrap();
        let oracle = total_objective(&brute_force_associate(&inst).unwrap(), &inst).unwrap();
        let js: Vec<f64> = (0..32).map(|s| total_js(&associate(&inst, s).unwrap(), &inst).unwrap()).collect();
        assert!(js.contains(&0.0));
        assert!(js.iter().any(|v| *v > 0.0));
        for s in 0..32 {
            assert!(total_objective(&associate(&inst, s).unwrap(), &inst).unwrap() >= oracle);
        }
    }

    #[test]
    fn label_balance_beats_latency_when_lambda_is_large() {
        // edge 0 already holds clients 0 (class 0) and 1 (class 1); client 2
        // repeats class 0 but is close, client 3 brings the missing class 2.
        let d = vec![one_hot(3, 0), one_hot(3, 1), one_hot(3, 0), one_hot(3, 2)];
        let inst = AssociationInstance::new(d, vec![10; 4], vec![vec![Some(0.1), Some(0.1), Some(0.2), Some(0.6)]], 300.0).unwrap();
        let c3 = association_cost(&inst, 0, &[0, 1], 2).unwrap();
        let c4 = association_cost(&inst, 0, &[0, 1], 3).unwrap();
        assert!(c4 < c3, "{c4} vs {c3}");
        let latency_only = inst.with_lambda(0.0);
        assert!(association_cost(&latency_only, 0, &[0, 1], 2).unwrap() < association_cost(&latency_only, 0, &[0, 1], 3).unwrap());
    }

    #[test]
    fn out_of_range_and_infeasible() {
        let d = vec![one_hot(2, 0), one_hot(2, 1)];
        assert!(matches!(
            AssociationInstance::new(d.clone(), vec![1, 1], vec![vec![Some(1.0), None]], 1.0),
            Err(Error::Infeasible(_))
        ));
        let inst = AssociationInstance::new(d, vec![1, 1], vec![vec![Some(1.0), None], vec![None, Some(1.0)]], 1.0).unwrap();
        assert!(association_cost(&inst, 0, &[0], 1).is_err());
        assert_eq!(associate(&inst, 0).unwrap().clusters, vec![vec![0], vec![1]]);
        assert_eq!(brute_force_associate(&inst).unwrap().clusters, vec![vec![0], vec![1]]);
    }

    #[test]
    fn brute_force_limits() {
        let d = vec![one_hot(2, 0); 11];
        let inst = AssociationInstance::new(d, vec![1; 11], vec![vec![Some(1.0); 11]], 1.0).unwrap();
        assert!(brute_force_associate(&inst).is_err());
    }

    fn single_class_instance(n_per_class: usize, k: usize, m: usize) -> AssociationInstance {
        let n = n_per_class * k;
        let d: Vec<LabelDistribution> = (0..n).map(|c| one_hot(k, c % k)).collect();
        let lat: Vec<Vec<Option<f64>>> = (0..m).map(|e| (0..n).map(|c| Some(0.1 + ((e * 7 + c * 3) % 11) as f64 * 0.01)).collect()).collect();
        AssociationInstance::new(d, vec![20; n], lat, 0.0).unwrap()
    }

    #[test]
    fn reference_strategies() {
        let inst = single_class_instance(10, 10, 10);
        let iid = reference_association(&inst, ReferenceStrategy::EdgeIid, 0).unwrap();
        iid.validate(&inst).unwrap();
        for c in &iid.clusters {
            let mut classes: Vec<usize> = c.iter().map(|&k| dominant_class(&inst.distributions[k])).collect();
            classes.sort_unstable();
            assert_eq!(classes, (0..10).collect::<Vec<_>>());
        }
        assert!(total_js(&iid, &inst).unwrap() < 1e-12);

        let non = reference_association(&inst, ReferenceStrategy::EdgeNoniid, 0).unwrap();
        non.validate(&inst).unwrap();
        let one = js_divergence(&one_hot(10, 0), &LabelDistribution::uniform(10)).unwrap();
        assert!((total_js(&non, &inst).unwrap() - 10.0 * one).abs() < 1e-12);
        assert!((one - naive_js(one_hot(10, 0).probs(), &[0.1; 10])).abs() < 1e-15);

        let lat = reference_association(&inst, ReferenceStrategy::LatencyOnly, 0).unwrap();
        for (m, c) in lat.clusters.iter().enumerate() {
            for &k in c {
                assert!((0..10).all(|e| inst.latency[e][k].unwrap() >= inst.latency[m][k].unwrap()));
            }
        }
        let r1 = reference_association(&inst, ReferenceStrategy::Random, 4).unwrap();
        assert_eq!(r1, reference_association(&inst, ReferenceStrategy::Random, 4).unwrap());
        r1.validate(&inst).unwrap();

        let uneven = single_class_instance(3, 4, 2);
        assert!(matches!(reference_association(&uneven, ReferenceStrategy::EdgeIid, 0), Err(Error::Infeasible(_))));
    }

    #[test]
    fn instance_text_round_trip() {
        let mut inst = symmetric_four();
        inst.latency[1][3] = None;
        let mut buf = Vec::new();
        write_instance(&inst, &mut buf).unwrap();
        assert_eq!(read_instance(buf.as_slice()).unwrap(), inst);
        assert!(read_instance("[distributions]\n1 0\n[sizes]\n1\n".as_bytes()).is_err());
        assert!(read_instance("[bogus]\n".as_bytes()).is_err());
    }

    fn arb_dist(k: usize) -> impl Strategy<Value = LabelDistribution> {
        proptest::collection::vec(0.0f64..1.0, k).prop_map(|mut v| {
            if v.iter().sum::<f64>() == 0.0 {
                v[0] = 1.0;
            }
            let s: f64 = v.iter().sum();
            for x in v.iter_mut() {
                *x /= s;
            }
            let s2: f64 = v.iter().sum();
            v[0] += 1.0 - s2;
            LabelDistribution::new(v.into_iter().map(|x| x.max(0.0)).collect()).unwrap()
        })
    }

    proptest! {
        #[test]
        fn js_is_symmetric_bounded_and_zero_on_equal(p in arb_dist(5), q in arb_dist(5)) {
            let a = js_divergence(&p, &q).unwrap();
            let b = js_divergence(&q, &p).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        }
    }
}
