use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ClientDataset, Dataset, LabelDistribution, Sample};
use crate::error::invalid;
use crate::rng;
use crate::{Error, Result};

/// Gaussian-blob classification problem.
///
/// Class means sit on a circle in the first two feature dimensions, adjacent
/// means `class_separation` apart; remaining dimensions are pure noise. Each
/// sample adds `noise_std` isotropic Gaussian noise to its class mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_samples: usize,
    #[serde(default)]
    pub num_test: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub class_separation: f64,
    #[serde(default = "unit")]
    pub noise_std: f64,
}

fn unit() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn new(num_samples: usize, num_classes: usize, feature_dim: usize, class_separation: f64) -> Self {
        Self { num_samples, num_test: num_samples / 4, num_classes, feature_dim, class_separation, noise_std: 1.0 }
    }

    pub fn with_test(mut self, num_test: usize) -> Self {
        self.num_test = num_test;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(invalid("synthetic data needs K >= 2"));
        }
        if self.num_samples < self.num_classes {
            return Err(invalid(format!("num_samples {} must be at least K = {}", self.num_samples, self.num_classes)));
        }
        if self.feature_dim == 0 || (self.feature_dim < 2 && self.num_classes > 2) {
            return Err(invalid("feature_dim must be >= 2 (or 1 with two classes)"));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return Err(invalid("class_separation must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(invalid("noise_std must be non-negative"));
        }
        Ok(())
    }

    fn class_means(&self) -> Vec<Vec<f64>> {
        let k = self.num_classes;
        let d = self.feature_dim;
        (0..k)
            .map(|c| {
                let mut m = vec![0.0; d];
                if d == 1 {
                    m[0] = if c == 0 { -0.5 } else { 0.5 } * self.class_separation;
                } else {
                    let radius = self.class_separation / (2.0 * (std::f64::consts::PI / k as f64).sin());
                    let angle = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
                    m[0] = radius * angle.cos();
                    m[1] = radius * angle.sin();
                }
                m
            })
            .collect()
    }
}

/// Draws a training set and a disjoint held-out test set.
///
/// Labels are balanced: class counts differ by at most one.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let means = spec.class_means();
    let draw = |n: usize, tag: &str| {
        let mut rng = rng::stream(seed, tag, 0);
        let mut samples: Vec<Sample> = (0..n)
            .map(|j| {
                let label = j % spec.num_classes;
                let features = means[label]
                    .iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + spec.noise_std * z
                    })
                    .collect();
                Sample { features, label }
            })
            .collect();
        samples.shuffle(&mut rng);
        Dataset { feature_dim: spec.feature_dim, num_classes: spec.num_classes, samples }
    };
    Ok((draw(spec.num_samples, "synthetic-train"), draw(spec.num_test, "synthetic-test")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scheme")]
pub enum PartitionScheme {
    Iid,
    /// Every client holds exactly one class.
    Noniid1,
    /// Every client holds exactly two classes.
    Noniid2,
    /// IID labels; shard sizes fall in `[min, max]`.
    QuantitySkew { min: usize, max: usize },
}

/// Splits `data` into `n_clients` disjoint shards covering it exactly.
pub fn partition(data: &Dataset, scheme: PartitionScheme, n_clients: usize, seed: u64) -> Result<Vec<ClientDataset>> {
    if n_clients == 0 {
        return Err(invalid("partition needs at least one client"));
    }
    if data.len() < n_clients {
        return Err(invalid(format!("{} samples cannot fill {n_clients} non-empty shards", data.len())));
    }
    let mut rng = rng::stream(seed, "partition", 0);
    let k = data.num_classes;
    let shards: Vec<Vec<usize>> = match scheme {
        PartitionScheme::Iid => {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.shuffle(&mut rng);
            split_even(&idx, n_clients)
        }
        PartitionScheme::QuantitySkew { min, max } => {
            if min == 0 || min > max {
                return Err(invalid(format!("quantity skew range [{min}, {max}] is invalid")));
            }
            if n_clients * min > data.len() || n_clients * max < data.len() {
                return Err(invalid(format!(
                    "{} samples cannot be split into {n_clients} shards with sizes in [{min}, {max}]",
                    data.len()
                )));
            }
            let sizes = skewed_sizes(data.len(), n_clients, min, max, &mut rng);
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.shuffle(&mut rng);
            let mut out = Vec::with_capacity(n_clients);
            let mut start = 0;
            for s in sizes {
                out.push(idx[start..start + s].to_vec());
                start += s;
            }
            out
        }
        PartitionScheme::Noniid1 | PartitionScheme::Noniid2 => {
            let per_client = if matches!(scheme, PartitionScheme::Noniid1) { 1 } else { 2 };
            if per_client > k {
                return Err(invalid(format!("Non-IID({per_client}) needs K >= {per_client}")));
            }
            if n_clients < k {
                return Err(invalid(format!("Non-IID({per_client}) needs at least K = {k} clients, got {n_clients}")));
            }
            // Primary classes cycle through a shuffled class order so every
            // class is held by someone; a second class (Non-IID(2)) is drawn
            // uniformly among the others.
            let mut order: Vec<usize> = (0..k).collect();
            order.shuffle(&mut rng);
            let mut holders: Vec<Vec<usize>> = vec![Vec::new(); k];
            for c in 0..n_clients {
                let primary = order[c % k];
                let mut classes = vec![primary];
                if per_client == 2 {
                    let mut other = rng.random_range(0..k - 1);
                    if other >= primary {
                        other += 1;
                    }
                    classes.push(other);
                }
                for &cls in &classes {
                    holders[cls].push(c);
                }
            }
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
            for (i, s) in data.samples.iter().enumerate() {
                by_class[s.label].push(i);
            }
            let mut out: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
            for cls in 0..k {
                let mut members = std::mem::take(&mut by_class[cls]);
                if members.len() < holders[cls].len() {
                    return Err(invalid(format!(
                        "class {cls} has {} samples for {} holders",
                        members.len(),
                        holders[cls].len()
                    )));
                }
                members.shuffle(&mut rng);
                for (chunk, &client) in split_even(&members, holders[cls].len()).into_iter().zip(&holders[cls]) {
                    out[client].extend(chunk);
                }
            }
            out
        }
    };
    shards
        .into_iter()
        .enumerate()
        .map(|(client_id, mut idx)| {
            if idx.is_empty() {
                return Err(invalid(format!("client {client_id} received an empty shard")));
            }
            idx.sort_unstable();
            let samples = idx.into_iter().map(|i| data.samples[i].clone()).collect();
            Ok(ClientDataset {
                client_id,
                data: Dataset { feature_dim: data.feature_dim, num_classes: data.num_classes, samples },
            })
        })
        .collect()
}

fn split_even(items: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(items[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Sizes in `[min, max]` summing to `total`, shaped by uniform random weights.
fn skewed_sizes(total: usize, n: usize, min: usize, max: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut sizes = vec![min; n];
    let mut remaining = total - n * min;
    let weights: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let wsum: f64 = weights.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    let budget = remaining as f64;
    for (s, w) in sizes.iter_mut().zip(&weights) {
        let add = ((w / wsum) * budget).floor() as usize;
        let add = add.min(max - *s).min(remaining);
        *s += add;
        remaining -= add;
    }
    let mut i = 0;
    while remaining > 0 {
        let j = i % n;
        if sizes[j] < max {
            sizes[j] += 1;
            remaining -= 1;
        }
        i += 1;
    }
    sizes
}

/// Normalized class histogram of `data` over `num_classes` classes.
pub fn label_distribution(data: &Dataset, num_classes: usize) -> Result<LabelDistribution> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut counts = vec![0.0; num_classes];
    for s in &data.samples {
        if s.label >= num_classes {
            return Err(invalid(format!("label {} out of range for {num_classes} classes", s.label)));
        }
        counts[s.label] += 1.0;
    }
    let n = data.len() as f64;
    LabelDistribution::new(counts.into_iter().map(|c| c / n).collect())
}

/// Writes the columnar text format: a `d,K` header line, then one
/// `f_1,...,f_d,label` row per sample.
pub fn write_dataset(data: &Dataset, mut out: impl Write) -> Result<()> {
    writeln!(out, "{},{}", data.feature_dim, data.num_classes)?;
    for s in &data.samples {
        for f in &s.features {
            write!(out, "{f:?},")?;
        }
        writeln!(out, "{}", s.label)?;
    }
    Ok(())
}

pub fn read_dataset(input: impl BufRead) -> Result<Dataset> {
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("missing header line".into()))??;
    let dims: Vec<&str> = header.trim().split(',').collect();
    if dims.len() != 2 {
        return Err(Error::Parse(format!("header must be 'd,K', got '{header}'")));
    }
    let parse_usize = |s: &str| s.trim().parse::<usize>().map_err(|e| Error::Parse(format!("'{s}': {e}")));
    let d = parse_usize(dims[0])?;
    let k = parse_usize(dims[1])?;
    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.trim().split(',').collect();
        if cols.len() != d + 1 {
            return Err(Error::Parse(format!("row {}: expected {} columns, got {}", lineno + 2, d + 1, cols.len())));
        }
        let features = cols[..d]
            .iter()
            .map(|c| c.trim().parse::<f64>().map_err(|e| Error::Parse(format!("row {}: '{c}': {e}", lineno + 2))))
            .collect::<Result<Vec<f64>>>()?;
        samples.push(Sample { features, label: parse_usize(cols[d])? });
    }
    Dataset::new(d, k, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::association::js_divergence;
    use crate::learner::{gradient, LearnerSpec, ParamVector};
    use proptest::prelude::*;

    #[test]
    fn balanced_labels_and_determinism() {
        let spec = SyntheticSpec::new(200, 2, 2, 4.0);
        let (a, test) = generate_synthetic(&spec, 1).unwrap();
        assert_eq!(a.len(), 200);
        let ones = a.samples.iter().filter(|s| s.label == 1).count() as i64;
        assert!((ones - 100).abs() <= 1);
        let (b, _) = generate_synthetic(&spec, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(test.len(), 50);
        let (c, _) = generate_synthetic(&spec, 2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(generate_synthetic(&SyntheticSpec::new(10, 1, 2, 1.0), 0).is_err());
        assert!(generate_synthetic(&SyntheticSpec::new(3, 4, 2, 1.0), 0).is_err());
        assert!(generate_synthetic(&SyntheticSpec::new(30, 3, 1, 1.0), 0).is_err());
    }

    #[test]
    fn well_separated_toy_set_is_fit_exactly_by_plain_gd() {
        let (data, _) = generate_synthetic(&SyntheticSpec::new(10, 2, 2, 10.0).with_test(2), 7).unwrap();
        let spec = LearnerSpec::logistic(2, 2, 0.0);
        let mut p = ParamVector::zeros(4);
        for _ in 0..500 {
            let g = gradient(&spec, &p, &data).unwrap();
            p.axpy(-0.1, &g);
        }
        let correct = data.samples.iter().filter(|s| spec.predict(&p, &s.features) == s.label).count();
        assert_eq!(correct, 10);
    }

    #[test]
    fn label_distribution_worked_example() {
        let s = |label| Sample { features: vec![0.0], label };
        let data = Dataset::new(1, 4, vec![s(0), s(2), s(2)]).unwrap();
        let ld = label_distribution(&data, 4).unwrap();
        let expected = [1.0 / 3.0, 0.0, 2.0 / 3.0, 0.0];
        for (a, b) in ld.probs().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let single = Dataset::new(1, 4, vec![s(3), s(3)]).unwrap();
        assert_eq!(label_distribution(&single, 4).unwrap().probs(), &[0.0, 0.0, 0.0, 1.0]);
        assert!(matches!(label_distribution(&Dataset::new(1, 4, vec![]).unwrap(), 4), Err(Error::EmptyDataset)));
    }

    #[test]
    fn noniid1_gives_one_hot_clients() {
        let (data, _) = generate_synthetic(&SyntheticSpec::new(1000, 10, 4, 2.0), 3).unwrap();
        let shards = partition(&data, PartitionScheme::Noniid1, 20, 5).unwrap();
        for c in &shards {
            let ld = label_distribution(&c.data, 10).unwrap();
            let nz: Vec<f64> = ld.probs().iter().cloned().filter(|p| *p > 0.0).collect();
            assert_eq!(nz, vec![1.0]);
        }
    }

    #[test]
    fn noniid2_gives_two_classes_per_client() {
        let (data, _) = generate_synthetic(&SyntheticSpec::new(1000, 10, 4, 2.0), 3).unwrap();
        for seed in 0..5 {
            let shards = partition(&data, PartitionScheme::Noniid2, 30, seed).unwrap();
            for c in &shards {
                let ld = label_distribution(&c.data, 10).unwrap();
                assert_eq!(ld.probs().iter().filter(|p| **p > 0.0).count(), 2);
            }
        }
    }

    #[test]
    fn iid_clients_are_close_to_global() {
        let (data, _) = generate_synthetic(&SyntheticSpec::new(2000, 10, 4, 2.0), 3).unwrap();
        let global = label_distribution(&data, 10).unwrap();
        let shards = partition(&data, PartitionScheme::Iid, 10, 1).unwrap();
        for c in &shards {
            let js = js_divergence(&label_distribution(&c.data, 10).unwrap(), &global).unwrap();
            assert!(js <= 0.05, "client {} js {js}", c.client_id);
        }
    }

    #[test]
    fn quantity_skew_sizes_within_range() {
        let (data, _) = generate_synthetic(&SyntheticSpec::new(600, 5, 3, 2.0), 3).unwrap();
        let shards = partition(&data, PartitionScheme::QuantitySkew { min: 4, max: 100 }, 12, 2).unwrap();
        assert!(shards.iter().all(|c| (4..=100).contains(&c.len())));
        assert_eq!(shards.iter().map(|c| c.len()).sum::<usize>(), 600);
        assert!(partition(&data, PartitionScheme::QuantitySkew { min: 4, max: 10 }, 12, 2).is_err());
    }

    #[test]
    fn empty_shards_are_rejected() {
        let (data, _) = generate_synthetic(&SyntheticSpec::new(20, 2, 2, 2.0), 3).unwrap();
        assert!(partition(&data, PartitionScheme::Iid, 21, 0).is_err());
        assert!(partition(&data, PartitionScheme::Iid, 0, 0).is_err());
    }

    #[test]
    fn dataset_text_round_trip() {
        let (data, _) = generate_synthetic(&SyntheticSpec::new(30, 3, 4, 2.0), 9).unwrap();
        let mut buf = Vec::new();
        write_dataset(&data, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, data);
        assert!(read_dataset("2,2\n1.0,2.0\n".as_bytes()).is_err());
    }

    fn multiset(samples: &[Sample]) -> Vec<String> {
        let mut v: Vec<String> = samples.iter().map(|s| format!("{:?}", s)).collect();
        v.sort();
        v
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn shards_are_disjoint_and_cover(seed in 0u64..1000, scheme_id in 0usize..4, n_clients in 10usize..25) {
            let (data, _) = generate_synthetic(&SyntheticSpec::new(500, 10, 3, 2.0), seed).unwrap();
            let scheme = match scheme_id {
                0 => PartitionScheme::Iid,
                1 => PartitionScheme::Noniid1,
                2 => PartitionScheme::Noniid2,
                _ => PartitionScheme::QuantitySkew { min: 5, max: 60 },
            };
            let shards = partition(&data, scheme, n_clients, seed).unwrap();
            prop_assert_eq!(shards.len(), n_clients);
            let union: Vec<Sample> = shards.iter().flat_map(|c| c.data.samples.iter().cloned()).collect();
            prop_assert_eq!(multiset(&union), multiset(&data.samples));
            let again = partition(&data, scheme, n_clients, seed).unwrap();
            prop_assert_eq!(again, shards);
        }
    }
}
