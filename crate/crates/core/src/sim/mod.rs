//! Slotted simulation engine, synchronous baselines, event logs and
//! summaries.

mod baselines;
mod config;
mod engine;
mod log;
mod world;

pub use baselines::run_sync;
pub use config::{AssociationConfig, BaselineConfig, DataConfig, Method, PolicyConfig, RoundsConfig, Seeds, SimConfig};
pub use engine::{build_policy, run, run_with_policy, AsyncSim, SimEnvironment};
pub use log::{
    normalize_costs, read_summary_csv, summarize, write_long_csv, write_summary_csv, EventKind, EventLog, MetricsRecord,
    Outcome, Summary, FORMAT_VERSION, SUMMARY_HEADER,
};
pub use world::{evaluate, Unit, World};
