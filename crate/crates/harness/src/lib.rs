//! Experiment files, sweeps and the self-checking recipes behind the
//! acceptance criteria.

mod experiment;
mod recipes;

pub use experiment::{run_experiment, run_label, write_atomic, ExperimentFile, ExperimentReport, PlannedRun, RunOptions, Sweep};
pub use recipes::{
    association_experiment, communication_experiment, ddqn_agent_config, find_recipe, lambda_instance, report_table,
    run_recipe, staleness_experiment, trend_config, Recipe, RecipeOutcome, LAMBDA_GRID, RECIPES,
};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("run {0} failed: {1}")]
    Sim(String, #[source] hiflash::Error),
    #[error(transparent)]
    Core(#[from] hiflash::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Runtime(String),
    #[error("unknown recipe {0:?}")]
    UnknownRecipe(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
