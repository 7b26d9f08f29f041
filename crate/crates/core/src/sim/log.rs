use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::config::SimConfig;
use crate::error::invalid;
use crate::{Error, Result};

/// Version tag of the JSON-lines log and summary CSV formats.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Checkin,
    Accept,
    Reject,
    /// Admitted, but the threshold does not allow starting next to the edges
    /// already running; the edge checks in again later.
    Hold,
    /// A finished edge lost the one-completion-per-slot race.
    Defer,
    Complete,
    Discard,
    CloudUpdate,
    Eval,
}

/// One event row; the cumulative columns are never decreasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub slot: u64,
    pub t_c: u64,
    pub event: EventKind,
    /// Edge (or client for FedAsync) the event concerns.
    pub unit: Option<usize>,
    /// Policy answer: -1 rejects, `k` admits with threshold `k`, `None`
    /// admits without a threshold.
    pub action: Option<i64>,
    pub tau: Option<u64>,
    pub accuracy: Option<f64>,
    pub epochs: f64,
    pub comp_cost: f64,
    pub comm_cost: f64,
    /// Accepted uploads to the cloud.
    pub cloud_comms: u64,
    /// Uploads that arrived too stale and were dropped.
    pub discarded: u64,
}

/// Replayable record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub version: u32,
    pub config_hash: String,
    pub config: SimConfig,
    pub records: Vec<MetricsRecord>,
    /// Per-slot rewards `-σ1 C_comp - σ2 C_comm - 1`.
    pub rewards: Vec<f64>,
    pub outcome: Outcome,
}

/// Quantities fixed at setup plus the end state of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub reached_target: bool,
    pub slots: u64,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    /// Total JS divergence of the edge clusters; `None` without an edge layer.
    pub total_js: Option<f64>,
    pub mean_response_latency: f64,
    pub mean_waiting_time: f64,
    pub deferrals: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config_hash: String,
    config: SimConfig,
}

#[derive(Serialize, Deserialize)]
struct Footer {
    outcome: Outcome,
    rewards: Vec<f64>,
}

impl EventLog {
    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }

    /// First record at which the accuracy reached the target.
    pub fn target_record(&self) -> Option<&MetricsRecord> {
        let target = self.config.target_accuracy;
        self.records.iter().find(|r| r.accuracy.is_some_and(|a| a >= target))
    }

    /// Header line, one line per record, then a footer line.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        let header = Header { version: self.version, config_hash: self.config_hash.clone(), config: self.config.clone() };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut out, &Footer { outcome: self.outcome.clone(), rewards: self.rewards.clone() })?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let lines: Vec<String> = input.lines().collect::<std::io::Result<_>>()?;
        let lines: Vec<&String> = lines.iter().filter(|l| !l.trim().is_empty()).collect();
        if lines.len() < 2 {
            return Err(Error::Parse("event log needs a header and a footer line".into()));
        }
        let header: Header = serde_json::from_str(lines[0])?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Parse(format!("unsupported log version {}", header.version)));
        }
        let footer: Footer = serde_json::from_str(lines[lines.len() - 1])?;
        let records = lines[1..lines.len() - 1]
            .iter()
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect::<Result<Vec<MetricsRecord>>>()?;
        Ok(EventLog {
            version: header.version,
            config_hash: header.config_hash,
            config: header.config,
            records,
            rewards: footer.rewards,
            outcome: footer.outcome,
        })
    }
}

/// One row of the summary CSV. Quantities "to target" are `None` on
/// censored runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub label: String,
    pub method: String,
    pub policy: String,
    pub association: String,
    pub seed: u64,
    pub censored: bool,
    pub slots_to_target: Option<u64>,
    pub cloud_comms_to_target: Option<u64>,
    pub epochs_to_target: Option<f64>,
    pub slots: u64,
    pub cloud_comms: u64,
    pub discarded: u64,
    pub epochs: f64,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub comp_cost: f64,
    pub comm_cost: f64,
    pub total_cost: f64,
    /// Total cost relative to a reference run; `None` until normalized.
    pub normalized_cost: Option<f64>,
    pub total_reward: f64,
    pub mean_response_latency: f64,
    pub mean_waiting_time: f64,
    pub total_js: Option<f64>,
    pub config_hash: String,
}

pub const SUMMARY_HEADER: [&str; 24] = [
    "label",
    "method",
    "policy",
    "association",
    "seed",
    "censored",
    "slots_to_target",
    "cloud_comms_to_target",
    "epochs_to_target",
    "slots",
    "cloud_comms",
    "discarded",
    "epochs",
    "final_accuracy",
    "best_accuracy",
    "comp_cost",
    "comm_cost",
    "total_cost",
    "normalized_cost",
    "total_reward",
    "mean_response_latency",
    "mean_waiting_time",
    "total_js",
    "config_hash",
];

/// Condenses a run into its summary row.
pub fn summarize(log: &EventLog, label: &str) -> Result<Summary> {
    let last = log.last().ok_or_else(|| invalid("cannot summarize an empty log"))?;
    let hit = log.target_record();
    if log.outcome.reached_target != hit.is_some() {
        return Err(Error::Protocol("outcome disagrees with the recorded accuracies".into()));
    }
    let cfg = &log.config;
    Ok(Summary {
        label: label.to_string(),
        method: cfg.method.name().into(),
        policy: cfg.policy.label(),
        association: if cfg.method.uses_edges() { cfg.association.label().into() } else { "none".into() },
        seed: cfg.seeds.sim,
        censored: hit.is_none(),
        slots_to_target: hit.map(|r| r.slot + 1),
        cloud_comms_to_target: hit.map(|r| r.cloud_comms),
        epochs_to_target: hit.map(|r| r.epochs),
        slots: log.outcome.slots,
        cloud_comms: last.cloud_comms,
        discarded: last.discarded,
        epochs: last.epochs,
        final_accuracy: log.outcome.final_accuracy,
        best_accuracy: log.outcome.best_accuracy,
        comp_cost: last.comp_cost,
        comm_cost: last.comm_cost,
        total_cost: last.comp_cost + last.comm_cost,
        normalized_cost: None,
        total_reward: log.rewards.iter().sum(),
        mean_response_latency: log.outcome.mean_response_latency,
        mean_waiting_time: log.outcome.mean_waiting_time,
        total_js: log.outcome.total_js,
        config_hash: log.config_hash.clone(),
    })
}

/// Divides every total cost by that of `rows[reference]`.
pub fn normalize_costs(rows: &mut [Summary], reference: usize) -> Result<()> {
    let base = rows.get(reference).ok_or_else(|| invalid(format!("no summary row {reference}")))?.total_cost;
    if !(base > 0.0) {
        return Err(invalid("reference run has zero cost"));
    }
    for r in rows.iter_mut() {
        r.normalized_cost = Some(r.total_cost / base);
    }
    Ok(())
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn fmt(v: f64) -> String {
    // shortest round-trip form keeps reruns byte-identical
    format!("{v:?}")
}

fn parse_opt<T: std::str::FromStr>(s: &str) -> Result<Option<T>> {
    if s == "NA" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Parse(format!("bad summary field {s:?}")))
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse(format!("bad summary field {s:?}")))
}

impl Summary {
    fn fields(&self) -> Vec<String> {
        vec![
            self.label.clone(),
            self.method.clone(),
            self.policy.clone(),
            self.association.clone(),
            self.seed.to_string(),
            self.censored.to_string(),
            opt(self.slots_to_target),
            opt(self.cloud_comms_to_target),
            opt(self.epochs_to_target.map(fmt)),
            self.slots.to_string(),
            self.cloud_comms.to_string(),
            self.discarded.to_string(),
            fmt(self.epochs),
            fmt(self.final_accuracy),
            fmt(self.best_accuracy),
            fmt(self.comp_cost),
            fmt(self.comm_cost),
            fmt(self.total_cost),
            opt(self.normalized_cost.map(fmt)),
            fmt(self.total_reward),
            fmt(self.mean_response_latency),
            fmt(self.mean_waiting_time),
            opt(self.total_js.map(fmt)),
            self.config_hash.clone(),
        ]
    }

    fn from_fields(f: &[&str]) -> Result<Self> {
        if f.len() != SUMMARY_HEADER.len() {
            return Err(Error::Parse(format!("summary row has {} fields, expected {}", f.len(), SUMMARY_HEADER.len())));
        }
        Ok(Summary {
            label: f[0].into(),
            method: f[1].into(),
            policy: f[2].into(),
            association: f[3].into(),
            seed: parse(f[4])?,
            censored: parse(f[5])?,
            slots_to_target: parse_opt(f[6])?,
            cloud_comms_to_target: parse_opt(f[7])?,
            epochs_to_target: parse_opt(f[8])?,
            slots: parse(f[9])?,
            cloud_comms: parse(f[10])?,
            discarded: parse(f[11])?,
            epochs: parse(f[12])?,
            final_accuracy: parse(f[13])?,
            best_accuracy: parse(f[14])?,
            comp_cost: parse(f[15])?,
            comm_cost: parse(f[16])?,
            total_cost: parse(f[17])?,
            normalized_cost: parse_opt(f[18])?,
            total_reward: parse(f[19])?,
            mean_response_latency: parse(f[20])?,
            mean_waiting_time: parse(f[21])?,
            total_js: parse_opt(f[22])?,
            config_hash: f[23].into(),
        })
    }
}

/// Writes the fixed header followed by one line per row.
pub fn write_summary_csv(rows: &[Summary], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.fields()).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary_csv(input: impl std::io::Read) -> Result<Vec<Summary>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(SUMMARY_HEADER.iter().copied()) {
        return Err(Error::Parse("unexpected summary header".into()));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let f: Vec<&str> = rec.iter().collect();
        rows.push(Summary::from_fields(&f)?);
    }
    Ok(rows)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(format!("csv: {e}"))
}

/// Long-format table: one `(label, seed, metric, value)` row per metric.
pub fn write_long_csv(rows: &[Summary], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["label", "method", "seed", "metric", "value"]).map_err(csv_err)?;
    for r in rows {
        let f = r.fields();
        for (i, name) in SUMMARY_HEADER.iter().enumerate().skip(5) {
            if *name == "config_hash" {
                continue;
            }
            w.write_record([r.label.as_str(), r.method.as_str(), &r.seed.to_string(), name, &f[i]]).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}
