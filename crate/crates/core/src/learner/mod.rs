//! Data, partitioning and the differentiable learners trained by clients.

mod data;
mod model;

pub use data::{
    generate_synthetic, label_distribution, partition, read_dataset, write_dataset,
    PartitionScheme, SyntheticSpec,
};
pub use model::{
    estimate_convex_constants, gradient, gradient_on, loss, loss_on, sgd_step, BatchSampler,
    LearnerKind, LearnerSpec, LrSchedule,
};

use serde::{Deserialize, Serialize};
use std::ops::Deref;

use crate::{Error, Result};

/// Flat model parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: f64, other: &ParamVector) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn check_len(&self, expected: usize) -> Result<()> {
        if self.0.len() != expected {
            return Err(Error::DimensionMismatch { expected, found: self.0.len() });
        }
        Ok(())
    }

    /// Weighted average `Σ w_i x_i / Σ w_i`.
    pub fn weighted_average<'a, I>(items: I) -> Result<ParamVector>
    where
        I: IntoIterator<Item = (&'a ParamVector, f64)>,
    {
        let mut acc: Option<ParamVector> = None;
        let mut total = 0.0;
        for (p, w) in items {
            if w < 0.0 || !w.is_finite() {
                return Err(crate::error::invalid(format!("aggregation weight {w} is not a finite non-negative number")));
            }
            match acc.as_mut() {
                None => {
                    let mut first = ParamVector::zeros(p.len());
                    first.axpy(w, p);
                    acc = Some(first);
                }
                Some(a) => {
                    p.check_len(a.len())?;
                    a.axpy(w, p);
                }
            }
            total += w;
        }
        let mut acc = acc.ok_or_else(|| crate::error::invalid("cannot average zero models"))?;
        if total <= 0.0 {
            return Err(crate::error::invalid("aggregation weights sum to zero"));
        }
        for v in acc.0.iter_mut() {
            *v /= total;
        }
        Ok(acc)
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// One labeled example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// A labeled dataset with fixed feature dimension and class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(feature_dim: usize, num_classes: usize, samples: Vec<Sample>) -> Result<Self> {
        for s in &samples {
            if s.features.len() != feature_dim {
                return Err(Error::DimensionMismatch { expected: feature_dim, found: s.features.len() });
            }
            if s.label >= num_classes {
                return Err(crate::error::invalid(format!(
                    "label {} out of range for {num_classes} classes",
                    s.label
                )));
            }
        }
        Ok(Self { feature_dim, num_classes, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Concatenates several datasets sharing the same shape.
    pub fn pooled<'a>(parts: impl IntoIterator<Item = &'a Dataset>) -> Result<Dataset> {
        let mut iter = parts.into_iter();
        let first = iter.next().ok_or(Error::EmptyDataset)?;
        let mut out = first.clone();
        for p in iter {
            if p.feature_dim != out.feature_dim || p.num_classes != out.num_classes {
                return Err(crate::error::invalid("cannot pool datasets of different shapes"));
            }
            out.samples.extend(p.samples.iter().cloned());
        }
        Ok(out)
    }
}

/// A client's local shard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub data: Dataset,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Normalized per-class histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelDistribution(Vec<f64>);

impl LabelDistribution {
    /// Validates non-negativity and normalization (tolerance 1e-9).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(crate::error::invalid("label distribution needs at least one class"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(crate::error::invalid("label distribution entries must be finite and non-negative"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(crate::error::invalid(format!("label distribution sums to {sum}, not 1")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    /// Size-weighted mixture `Σ n_i P_i / Σ n_i`.
    pub fn mixture<'a>(parts: impl IntoIterator<Item = (&'a LabelDistribution, f64)>) -> Result<Self> {
        let mut acc: Vec<f64> = Vec::new();
        let mut total = 0.0;
        for (p, w) in parts {
            if acc.is_empty() {
                acc = vec![0.0; p.0.len()];
            } else if acc.len() != p.0.len() {
                return Err(Error::DimensionMismatch { expected: acc.len(), found: p.0.len() });
            }
            for (a, q) in acc.iter_mut().zip(&p.0) {
                *a += w * q;
            }
            total += w;
        }
        if acc.is_empty() || total <= 0.0 {
            return Err(crate::error::invalid("mixture needs positive total weight"));
        }
        for a in acc.iter_mut() {
            *a /= total;
        }
        Ok(Self(acc))
    }
}
