use std::io::{self, BufReader};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ridesub_core::domain::Provenance;
use ridesub_core::metrics::DEFAULT_GRID_POINTS;
use ridesub_core::mpc::{HorizonConfig, Policy};
use ridesub_core::multenet::TrainConfig;
use ridesub_core::pipeline::{self, OptimizeConfig};
use ridesub_core::serve::Server;
use ridesub_core::Error;

/// Ride-hailing subsidy toolkit: data generation, uplift training,
/// evaluation, budget allocation, simulation and dictionary serving.
#[derive(Parser, Debug)]
#[command(name = "ridesub", version)]
struct Cli {
    /// Global seed; overrides the seeds in config files.
    #[arg(long, global = true, env = "RIDESUB_SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample an outcome dataset from the synthetic world.
    Gen(GenArgs),
    /// Train the uplift model on a dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Solve one allocation and write the dictionary.
    Optimize(OptimizeArgs),
    /// Run the rolling-horizon simulation.
    Simulate(SimulateArgs),
    /// Serve dictionary lookups over TCP or stdin/stdout.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyArg {
    Observational,
    Rct,
}

#[derive(Args, Debug)]
struct WorldArg {
    /// World parameters (JSON); defaults when omitted.
    #[arg(long = "config", env = "RIDESUB_WORLD")]
    world: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    world: WorldArg,
    #[arg(long, env = "RIDESUB_DATA")]
    out: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    #[arg(long, value_enum, default_value_t = PolicyArg::Observational)]
    policy: PolicyArg,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, env = "RIDESUB_DATA")]
    data: PathBuf,
    #[arg(long, env = "RIDESUB_CHECKPOINT")]
    out: PathBuf,
    /// Training config (JSON).
    #[arg(long = "train-config")]
    train_config: Option<PathBuf>,
    /// Per-epoch loss log (CSV).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, env = "RIDESUB_CHECKPOINT")]
    checkpoint: PathBuf,
    #[arg(long, env = "RIDESUB_DATA")]
    data: PathBuf,
    /// Metrics JSON; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pooled Qini curve (CSV).
    #[arg(long)]
    curve: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    grid_points: usize,
}

#[derive(Args, Debug)]
struct ElasticityArg {
    /// Model checkpoint supplying elasticities.
    #[arg(long, env = "RIDESUB_CHECKPOINT", conflicts_with = "oracle", required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Use the world's true elasticities instead of a model.
    #[arg(long)]
    oracle: bool,
}

#[derive(Args, Debug)]
struct OptimizeArgs {
    #[command(flatten)]
    world: WorldArg,
    #[command(flatten)]
    elasticity: ElasticityArg,
    #[arg(long, env = "RIDESUB_DICTIONARY")]
    out: PathBuf,
    /// Optimizer config (JSON).
    #[arg(long = "optimize-config")]
    optimize_config: Option<PathBuf>,
    /// Fixed daily budget.
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    target_rate: Option<f64>,
    /// Timestamp label stored in the dictionary.
    #[arg(long)]
    solved_at: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SimPolicy {
    Optimized,
    Uniform,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    world: WorldArg,
    #[command(flatten)]
    elasticity: ElasticityArg,
    #[arg(long = "out-dir", env = "RIDESUB_REPORT_DIR")]
    out_dir: PathBuf,
    /// Horizon config (JSON).
    #[arg(long = "horizon-config")]
    horizon_config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SimPolicy::Optimized)]
    policy: SimPolicy,
    #[arg(long)]
    target_rate: Option<f64>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long, env = "RIDESUB_DICTIONARY")]
    dictionary: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7070")]
    listen: String,
    /// Read requests from stdin and answer on stdout.
    #[arg(long)]
    stdio: bool,
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> ridesub_core::Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn check_rate(r: f64) -> ridesub_core::Result<f64> {
    if (0.0..1.0).contains(&r) {
        Ok(r)
    } else {
        Err(Error::Config(format!("target rate must lie in [0,1), got {r}")))
    }
}

fn run(cli: Cli) -> ridesub_core::Result<()> {
    log::info!("seed: {:?}", cli.seed);
    match cli.command {
        Command::Gen(a) => {
            let world = pipeline::load_world(a.world.world.as_deref(), cli.seed)?;
            let prov = match a.policy {
                PolicyArg::Observational => Provenance::Observational,
                PolicyArg::Rct => Provenance::Rct,
            };
            let s = pipeline::gen(&world, a.n, prov, &a.out)?;
            println!("{}", serde_json::to_string(&s)?);
        }
        Command::Train(a) => {
            let mut cfg: TrainConfig = read_config(a.train_config.as_deref())?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
            cfg.alpha = a.alpha.unwrap_or(cfg.alpha);
            cfg.beta = a.beta.unwrap_or(cfg.beta);
            let log = pipeline::train(&a.data, &cfg, &a.out, a.log.as_deref())?;
            println!(
                "{}",
                serde_json::json!({"epochs": log.epochs.len(), "best_epoch": log.best_epoch})
            );
        }
        Command::Eval(a) => {
            let out = a.out.clone().unwrap_or_else(|| PathBuf::from("/dev/stdout"));
            pipeline::eval(&a.checkpoint, &a.data, a.grid_points, &out, a.curve.as_deref())?;
        }
        Command::Optimize(a) => {
            let world = pipeline::load_world(a.world.world.as_deref(), cli.seed)?;
            let mut cfg: OptimizeConfig = read_config(a.optimize_config.as_deref())?;
            if let Some(b) = a.budget {
                if !(b >= 0.0 && b.is_finite()) {
                    return Err(Error::Config(format!("budget must be finite and >= 0, got {b}")));
                }
                cfg.budget = Some(b);
            }
            if let Some(r) = a.target_rate {
                cfg.target_subsidy_rate = check_rate(r)?;
            }
            if let Some(s) = a.solved_at {
                cfg.solved_at = s;
            }
            let model = a.elasticity.checkpoint.as_deref().map(pipeline::load_model).transpose()?;
            let provider = pipeline::provider(&world, model.as_ref());
            let d = pipeline::optimize(&world, provider.as_ref(), &cfg, &a.out)?;
            println!(
                "{}",
                serde_json::json!({"entries": d.entries.len(), "budget": d.meta.budget, "total_cost": d.meta.total_cost})
            );
        }
        Command::Simulate(a) => {
            let world = pipeline::load_world(a.world.world.as_deref(), cli.seed)?;
            let mut cfg: HorizonConfig = read_config(a.horizon_config.as_deref())?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(r) = a.target_rate {
                cfg.target_subsidy_rate = check_rate(r)?;
            }
            cfg.validate()?;
            let policy = match a.policy {
                SimPolicy::Optimized => Policy::Optimized,
                SimPolicy::Uniform => Policy::Uniform,
            };
            let model = a.elasticity.checkpoint.as_deref().map(pipeline::load_model).transpose()?;
            let provider = pipeline::provider(&world, model.as_ref());
            let (r, _) = pipeline::simulate(&world, provider.as_ref(), &cfg, policy, &a.out_dir)?;
            println!(
                "{}",
                serde_json::json!({"spend": r.spend, "revenue": r.revenue, "subsidy_rate": r.subsidy_rate, "roi": r.roi})
            );
        }
        Command::Serve(a) => {
            let server = Server::open(&a.dictionary)?;
            if a.stdio {
                server.serve_stream(BufReader::new(io::stdin().lock()), io::stdout().lock())?;
            } else {
                let listener = TcpListener::bind(&a.listen)?;
                Arc::new(server).serve_tcp(listener)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::from(1)
        }
    }
}
