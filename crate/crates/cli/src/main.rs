use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use hiflash::association::{
    associate, brute_force_associate, mean_latency, read_instance, reference_association, total_js, total_objective,
    Association, ReferenceStrategy,
};
use hiflash::bounds::{convex_bound, nonconvex_bound, BoundTerms, ConvexConstants, WeaklyConvexConstants};
use hiflash::ddqn::{train_agent_inspected, AgentConfig, GreedyPolicy, QNetwork};
use hiflash::learner::{generate_synthetic, label_distribution, partition, write_dataset, PartitionScheme};
use hiflash::mdp::Environment;
use hiflash::sim::{DataConfig, SimEnvironment};
use hiflash_harness::{report_table, run_experiment, run_recipe, write_atomic, ExperimentFile, HarnessError, RunOptions, RECIPES};

/// Deterministic client-edge-cloud federated learning simulator.
#[derive(Debug, Parser)]
#[command(name = "hiflash", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Overrides every seed in the input files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: out].
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for sweeps; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its client partition.
    GenData {
        /// TOML file with `num_clients`, `[synthetic]` and `[partition]`.
        config: PathBuf,
    },
    /// Associate clients to edges for one or more lambda values.
    Associate {
        /// Instance file in the sectioned text format.
        instance: PathBuf,
        /// Lambda values to sweep; defaults to the instance's own value.
        #[arg(long = "lambda", value_delimiter = ',')]
        lambdas: Vec<f64>,
        #[arg(long, value_enum, default_value_t = Strategy::Greedy)]
        strategy: Strategy,
    },
    /// Train the staleness-control agent on a simulation config.
    TrainAgent {
        /// Experiment file; only its `[config]` table is used.
        config: PathBuf,
        /// TOML file of agent hyperparameters.
        #[arg(long)]
        agent: Option<PathBuf>,
        /// Overrides the number of training decision steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Run an experiment file and write a report bundle.
    Run { experiment: PathBuf },
    /// Evaluate the convergence bound for a constants file.
    Bounds {
        constants: PathBuf,
    },
    /// Run the self-checking acceptance recipes and print a pass/fail table.
    Report {
        /// Recipes to run; all when omitted.
        #[arg(long = "recipe")]
        recipes: Vec<String>,
        /// List the recipes and exit.
        #[arg(long)]
        list: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Strategy {
    Greedy,
    Brute,
    EdgeIid,
    EdgeNoniid,
    LatencyOnly,
    Random,
}

/// Input that could not be read or does not describe a valid setup.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct ConfigError(String);

/// Every run ended without reaching the target.
#[derive(Debug, thiserror::Error)]
#[error("no run reached the target accuracy")]
struct CensoredOnly;

/// Failed acceptance recipes.
#[derive(Debug, thiserror::Error)]
#[error("{0} recipe(s) failed")]
struct ChecksFailed(usize);

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_CENSORED: u8 = 4;
const EXIT_CHECKS: u8 = 5;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<CensoredOnly>() {
            return EXIT_CENSORED;
        }
        if cause.is::<ChecksFailed>() {
            return EXIT_CHECKS;
        }
        if cause.is::<ConfigError>() || cause.is::<toml::de::Error>() {
            return EXIT_CONFIG;
        }
        if let Some(h) = cause.downcast_ref::<HarnessError>() {
            return match h {
                HarnessError::Config(_) | HarnessError::UnknownRecipe(_) => EXIT_CONFIG,
                HarnessError::Sim(_, e) | HarnessError::Core(e) => core_code(e),
                _ => EXIT_RUNTIME,
            };
        }
        if let Some(e) = cause.downcast_ref::<hiflash::Error>() {
            return core_code(e);
        }
    }
    EXIT_RUNTIME
}

fn core_code(e: &hiflash::Error) -> u8 {
    use hiflash::Error::*;
    match e {
        InvalidArgument(_) | DimensionMismatch { .. } | EmptyDataset | Infeasible(_) | Parse(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let g = cli.global;
    let out = g.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    match cli.command {
        Command::GenData { config } => gen_data(&config, &out, g.seed.unwrap_or(0)),
        Command::Associate { instance, lambdas, strategy } => associate_cmd(&instance, &lambdas, strategy, g.seed.unwrap_or(0), g.out_dir.as_deref()),
        Command::TrainAgent { config, agent, steps } => train(&config, agent.as_deref(), steps, g.seed, &out),
        Command::Run { experiment } => run_cmd(&experiment, &g, &out),
        Command::Bounds { constants } => bounds_cmd(&constants, g.out_dir.as_deref()),
        Command::Report { recipes, list } => report(&recipes, list, &out, g.jobs),
    }
}

fn read_input(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())).into())
}

fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = read_input(path)?;
    toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.message())).into())
}

fn gen_data(config: &Path, out: &Path, seed: u64) -> anyhow::Result<()> {
    let data: DataConfig = parse_toml(config)?;
    let (train, test) = generate_synthetic(&data.synthetic, seed)?;
    let shards = partition(&train, data.partition, data.num_clients, seed)?;
    let expected_classes = match data.partition {
        PartitionScheme::Noniid1 => Some(1),
        PartitionScheme::Noniid2 => Some(2),
        _ => None,
    };
    let mut index = String::from("client,samples,classes,label_distribution\n");
    for s in &shards {
        let dist = label_distribution(&s.data, train.num_classes)?;
        let classes = dist.probs().iter().filter(|&&p| p > 0.0).count();
        if let Some(k) = expected_classes {
            if classes != k {
                bail!("partition audit failed: client {} holds {classes} classes, expected {k}", s.client_id);
            }
        }
        let probs: Vec<String> = dist.probs().iter().map(|p| format!("{p:?}")).collect();
        let _ = writeln!(index, "{},{},{},{}", s.client_id, s.len(), classes, probs.join(" "));
        let mut buf = Vec::new();
        write_dataset(&s.data, &mut buf)?;
        write_atomic(&out.join("clients").join(format!("client-{:03}.csv", s.client_id)), &buf)?;
    }
    for (name, set) in [("train.csv", &train), ("test.csv", &test)] {
        let mut buf = Vec::new();
        write_dataset(set, &mut buf)?;
        write_atomic(&out.join(name), &buf)?;
    }
    write_atomic(&out.join("clients.csv"), index.as_bytes())?;
    let effective = format!("# seed = {seed}\n{}", toml::to_string(&data)?);
    write_atomic(&out.join("data.toml"), effective.as_bytes())?;
    println!("wrote {} train / {} test samples over {} clients to {}", train.len(), test.len(), shards.len(), out.display());
    if let Some(k) = expected_classes {
        println!("audit: every client holds exactly {k} class(es)");
    }
    Ok(())
}

fn associate_cmd(path: &Path, lambdas: &[f64], strategy: Strategy, seed: u64, out: Option<&Path>) -> anyhow::Result<()> {
    let text = read_input(path)?;
    let inst = read_instance(text.as_bytes()).with_context(|| format!("invalid instance file {}", path.display()))?;
    let grid = if lambdas.is_empty() { vec![inst.lambda] } else { lambdas.to_vec() };
    let mut table = String::from("lambda,strategy,total_js,mean_latency,objective,clusters\n");
    for &lambda in &grid {
        let inst = inst.with_lambda(lambda);
        inst.validate()?;
        let assoc = match strategy {
            Strategy::Greedy => associate(&inst, seed)?,
            Strategy::Brute => brute_force_associate(&inst)?,
            Strategy::EdgeIid => reference_association(&inst, ReferenceStrategy::EdgeIid, seed)?,
            Strategy::EdgeNoniid => reference_association(&inst, ReferenceStrategy::EdgeNoniid, seed)?,
            Strategy::LatencyOnly => reference_association(&inst, ReferenceStrategy::LatencyOnly, seed)?,
            Strategy::Random => reference_association(&inst, ReferenceStrategy::Random, seed)?,
        };
        let _ = writeln!(
            table,
            "{lambda:?},{},{:?},{:?},{:?},{}",
            strategy.to_possible_value().expect("no skipped variants").get_name(),
            total_js(&assoc, &inst)?,
            mean_latency(&assoc, &inst)?,
            total_objective(&assoc, &inst)?,
            clusters(&assoc)
        );
    }
    print!("{table}");
    if let Some(dir) = out {
        write_atomic(&dir.join("association.csv"), table.as_bytes())?;
    }
    Ok(())
}

/// Clusters as `0 3|1 2`, one group per edge.
fn clusters(a: &Association) -> String {
    let groups: Vec<String> =
        a.clusters.iter().map(|c| c.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" ")).collect();
    groups.join("|")
}

#[derive(Serialize)]
struct TrainingRecord<'a> {
    agent: &'a AgentConfig,
    config: &'a hiflash::sim::SimConfig,
}

fn train(config: &Path, agent: Option<&Path>, steps: Option<u64>, seed: Option<u64>, out: &Path) -> anyhow::Result<()> {
    let exp = ExperimentFile::from_toml(&read_input(config)?)?;
    let mut cfg = exp.config;
    if let Some(s) = seed {
        cfg.seeds = hiflash::sim::Seeds::all(s);
    }
    let mut agent_cfg: AgentConfig = match agent {
        Some(p) => parse_toml(p)?,
        None => AgentConfig::default(),
    };
    if let Some(n) = steps {
        agent_cfg.train_steps = n;
    }
    agent_cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
    let mut env = SimEnvironment::new(cfg.clone())?;
    let scale = env.state_scale();
    let tau_max = env.tau_max();

    // The target network is a copy of the online one at its last sync, so
    // it is the most recent network known to be finite.
    let mut last_good: Option<QNetwork> = None;
    let mut seen_syncs = u64::MAX;
    let trained = train_agent_inspected(&mut env, &agent_cfg, cfg.seeds.agent, &mut |a| {
        if a.syncs != seen_syncs {
            seen_syncs = a.syncs;
            last_good = Some(a.target.clone());
        }
    });
    let (policy, log, _) = match trained {
        Ok(t) => t,
        Err(e @ hiflash::Error::Divergence(_)) => {
            let Some(net) = last_good else { return Err(e.into()) };
            let path = out.join("agent.last-good.ckpt");
            write_atomic(&path, GreedyPolicy { net, scale, tau_max }.to_checkpoint().as_bytes())?;
            return Err(anyhow::Error::new(e).context(format!("training aborted; last good checkpoint at {}", path.display())));
        }
        Err(e) => return Err(e.into()),
    };
    let ckpt = out.join("agent.ckpt");
    write_atomic(&ckpt, policy.to_checkpoint().as_bytes())?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["episode", "steps", "slots", "cumulative_reward", "epsilon", "budget_exhausted"])?;
    for ep in &log.episodes {
        w.serialize(ep)?;
    }
    let curve = w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
    write_atomic(&out.join("training_curve.csv"), &curve)?;
    let record = toml::to_string(&TrainingRecord { agent: &agent_cfg, config: &cfg })?;
    write_atomic(&out.join("agent.toml"), record.as_bytes())?;
    println!(
        "trained {} steps over {} episodes ({} updates, {} target syncs); checkpoint {}",
        agent_cfg.train_steps,
        log.episodes.len(),
        log.updates,
        log.syncs,
        ckpt.display()
    );
    Ok(())
}

fn run_cmd(path: &Path, g: &Global, out: &Path) -> anyhow::Result<()> {
    let exp = ExperimentFile::from_toml(&read_input(path)?)?;
    let opts = RunOptions { jobs: g.jobs, out_dir: Some(out.to_path_buf()), seed: g.seed };
    let report = run_experiment(&exp, &opts)?;
    println!("{:<32} {:>6} {:>9} {:>10} {:>10} {:>9}", "run", "seed", "reached", "slots", "comms", "cost");
    for s in &report.summaries {
        println!(
            "{:<32} {:>6} {:>9} {:>10} {:>10} {:>9.3}",
            s.label,
            s.seed,
            if s.censored { "no" } else { "yes" },
            s.slots_to_target.unwrap_or(s.slots),
            s.cloud_comms_to_target.unwrap_or(s.cloud_comms),
            s.normalized_cost.unwrap_or(f64::NAN)
        );
    }
    println!("report written to {}", out.display());
    if report.summaries.iter().all(|s| s.censored) {
        return Err(CensoredOnly.into());
    }
    Ok(())
}

/// A bounds input: one constants table plus an optional staleness grid that
/// replaces `alpha_tau` with `alpha * upsilon^tau` for `tau = 0..=tau_max`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundsFile {
    f0_gap: f64,
    convex: Option<ConvexConstants>,
    weakly_convex: Option<WeaklyConvexConstants>,
    staleness: Option<StalenessGrid>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StalenessGrid {
    alpha: f64,
    upsilon: f64,
    tau_max: u64,
}

fn bounds_cmd(path: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let file: BoundsFile = parse_toml(path)?;
    let eval = |alpha_tau: Option<f64>| -> hiflash::Result<BoundTerms> {
        match (&file.convex, &file.weakly_convex) {
            (Some(c), None) => {
                let mut c = c.clone();
                c.alpha_tau = alpha_tau.unwrap_or(c.alpha_tau);
                convex_bound(&c, file.f0_gap)
            }
            (None, Some(w)) => {
                let mut w = w.clone();
                w.alpha_tau = alpha_tau.unwrap_or(w.alpha_tau);
                nonconvex_bound(&w, file.f0_gap)
            }
            _ => Err(hiflash::Error::InvalidArgument("give exactly one of [convex] or [weakly_convex]".into())),
        }
    };
    let rows: Vec<(Option<u64>, Option<f64>)> = match &file.staleness {
        Some(s) => (0..=s.tau_max).map(|t| (Some(t), Some(s.alpha * s.upsilon.powi(t as i32)))).collect(),
        None => vec![(None, None)],
    };
    let mut table = String::from("tau,alpha_tau,kappa,a1,a2,a3,b,limit,bound\n");
    for (tau, alpha_tau) in rows {
        let t = eval(alpha_tau)?;
        let a = alpha_tau.or(file.convex.as_ref().map(|c| c.alpha_tau)).or(file.weakly_convex.as_ref().map(|w| w.alpha_tau));
        let _ = writeln!(
            table,
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            tau.map_or("-".into(), |t| t.to_string()),
            a.unwrap_or(f64::NAN),
            t.kappa,
            t.a1,
            t.a2,
            t.a3,
            t.b,
            t.limit,
            t.bound
        );
    }
    print!("{table}");
    if let Some(dir) = out {
        write_atomic(&dir.join("bounds.csv"), table.as_bytes())?;
    }
    Ok(())
}

fn report(names: &[String], list: bool, out: &Path, jobs: usize) -> anyhow::Result<()> {
    if list {
        for r in RECIPES {
            println!("{:>2} {:<26} {}", r.criterion, r.name, r.claim);
        }
        return Ok(());
    }
    let selected: Vec<String> = if names.is_empty() { RECIPES.iter().map(|r| r.name.to_string()).collect() } else { names.to_vec() };
    let mut outcomes = Vec::new();
    for name in &selected {
        let o = run_recipe(name, Some(out), jobs)?;
        eprintln!("{}", o.line());
        outcomes.push(o);
    }
    let table = report_table(&outcomes);
    print!("{table}");
    write_atomic(&out.join("report.txt"), table.as_bytes())?;
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed > 0 {
        return Err(ChecksFailed(failed).into());
    }
    Ok(())
}
