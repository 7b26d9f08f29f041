use std::fs;
use std::path::{Path, PathBuf};

use hiflash::sim::{
    normalize_costs, run, summarize, write_long_csv, write_summary_csv, AssociationConfig, EventLog, Method,
    PolicyConfig, Seeds, SimConfig, Summary,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{HarnessError, Result};

/// Sweep axes applied on top of a base config. Empty axes keep the base
/// value; `lambdas` adds greedy associations and `thresholds` adds fixed
/// staleness policies.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sweep {
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub policies: Vec<PolicyConfig>,
    pub thresholds: Vec<u64>,
    pub associations: Vec<AssociationConfig>,
    pub lambdas: Vec<f64>,
}

/// A named base config plus sweep axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub name: String,
    pub config: SimConfig,
    #[serde(default)]
    pub sweep: Sweep,
}

/// One fully specified simulation of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedRun {
    pub label: String,
    pub config: SimConfig,
}

impl ExperimentFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        let exp: ExperimentFile = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        exp.config.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(exp)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Cartesian product of the sweep axes, seeds innermost. Cloud-direct
    /// methods ignore the association axis and synchronous ones ignore the
    /// policy axis, so those combinations are not repeated.
    pub fn plan(&self) -> Result<Vec<PlannedRun>> {
        let base = &self.config;
        let sw = &self.sweep;
        let methods = if sw.methods.is_empty() { vec![base.method] } else { sw.methods.clone() };
        let mut policies = sw.policies.clone();
        policies.extend(sw.thresholds.iter().map(|&k| PolicyConfig::Fixed { k }));
        if policies.is_empty() {
            policies.push(base.policy.clone());
        }
        let mut associations = sw.associations.clone();
        associations.extend(sw.lambdas.iter().map(|&lambda| AssociationConfig::Greedy { lambda }));
        if associations.is_empty() {
            associations.push(base.association.clone());
        }
        let seeds: Vec<Option<u64>> = if sw.seeds.is_empty() { vec![None] } else { sw.seeds.iter().map(|&s| Some(s)).collect() };

        let mut out = Vec::new();
        for &method in &methods {
            let pols = if method.is_async() { &policies[..] } else { &policies[..1] };
            let assocs = if method.uses_edges() { &associations[..] } else { &associations[..1] };
            for policy in pols {
                for assoc in assocs {
                    for seed in &seeds {
                        let mut cfg = base.clone();
                        cfg.method = method;
                        cfg.policy = policy.clone();
                        cfg.association = assoc.clone();
                        if let Some(s) = seed {
                            cfg.seeds = Seeds::all(*s);
                        }
                        cfg.validate().map_err(|e| HarnessError::Config(format!("{}: {e}", run_label(&cfg))))?;
                        out.push(PlannedRun { label: run_label(&cfg), config: cfg });
                    }
                }
            }
        }
        Ok(out)
    }
}

/// `method/policy/association`, omitting axes the method does not use.
pub fn run_label(cfg: &SimConfig) -> String {
    let mut parts = vec![cfg.method.name().to_string()];
    if cfg.method.is_async() {
        parts.push(cfg.policy.label());
    }
    if cfg.method.uses_edges() {
        parts.push(match &cfg.association {
            AssociationConfig::Greedy { lambda } => format!("greedy-{lambda}"),
            other => other.label().to_string(),
        });
    }
    parts.join("/")
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; 0 uses rayon's default.
    pub jobs: usize,
    /// Where logs and CSVs go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Replaces every run's seeds.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub summaries: Vec<Summary>,
    pub logs: Vec<EventLog>,
    pub files: Vec<PathBuf>,
}

impl ExperimentReport {
    /// Rows whose label matches `label`, in seed order of the plan.
    pub fn rows(&self, label: &str) -> Vec<&Summary> {
        self.summaries.iter().filter(|s| s.label == label).collect()
    }
}

/// Runs every planned simulation (in parallel when `jobs != 1`) and writes
/// `logs/*.jsonl`, `summary.csv`, `metrics_long.csv` and `experiment.toml`.
/// Costs are normalized against the first run.
pub fn run_experiment(exp: &ExperimentFile, opts: &RunOptions) -> Result<ExperimentReport> {
    let mut exp = exp.clone();
    if let Some(seed) = opts.seed {
        exp.sweep.seeds.clear();
        exp.config.seeds = Seeds::all(seed);
    }
    let plan = exp.plan()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.jobs).build().map_err(|e| HarnessError::Runtime(e.to_string()))?;
    let logs: Vec<EventLog> = pool.install(|| {
        plan.par_iter().map(|p| run(&p.config).map_err(|e| HarnessError::Sim(p.label.clone(), e))).collect::<Result<Vec<_>>>()
    })?;
    let mut summaries = plan.iter().zip(&logs).map(|(p, log)| summarize(log, &p.label)).collect::<hiflash::Result<Vec<_>>>()?;
    if !summaries.is_empty() {
        normalize_costs(&mut summaries, 0)?;
    }

    let mut files = Vec::new();
    if let Some(dir) = &opts.out_dir {
        let log_dir = dir.join("logs");
        fs::create_dir_all(&log_dir)?;
        for (i, (p, log)) in plan.iter().zip(&logs).enumerate() {
            let mut buf = Vec::new();
            log.write_jsonl(&mut buf)?;
            let path = log_dir.join(format!("{i:03}-{}-seed{}.jsonl", slug(&p.label), p.config.seeds.data));
            write_atomic(&path, &buf)?;
            files.push(path);
        }
        let mut buf = Vec::new();
        write_summary_csv(&summaries, &mut buf)?;
        files.push(write_atomic(&dir.join("summary.csv"), &buf)?);
        let mut buf = Vec::new();
        write_long_csv(&summaries, &mut buf)?;
        files.push(write_atomic(&dir.join("metrics_long.csv"), &buf)?);
        files.push(write_atomic(&dir.join("experiment.toml"), exp.to_toml()?.as_bytes())?);
    }
    Ok(ExperimentReport { summaries, logs, files })
}

fn slug(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<PathBuf> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(path.to_path_buf())
}
