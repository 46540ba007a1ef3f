//! File-to-file stages behind the command-line tool.
//!
//! Each stage reads its inputs from disk, writes its artifacts and returns
//! a short summary. Outputs are pure functions of inputs and seeds, so
//! rerunning a stage reproduces its files byte for byte.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allocator::{self, AllocationDictionary, AllocationProblem, ClusterConfig};
use crate::domain::{Dataset, Provenance};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::mpc::{self, BudgetMode, ElasticityProvider, HorizonConfig, OracleElasticity, Policy, SimulationReport};
use crate::multenet::{self, Checkpoint, MulTeNetParams, TrainConfig};
use crate::par::{self, Exec};
use crate::synthworld::{gen_world, World, WorldParams};

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn pretty<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

/// World parameters from a JSON file, or the defaults.
pub fn load_world(path: Option<&Path>, seed: Option<u64>) -> Result<World> {
    let mut params = match path {
        Some(p) => read_json::<WorldParams>(p)?,
        None => WorldParams::default(),
    };
    if let Some(s) = seed {
        params.seed = s;
    }
    log::info!("world config: {}", serde_json::to_string(&params)?);
    gen_world(params)
}

pub fn load_model(path: &Path) -> Result<MulTeNetParams> {
    let text = fs::read_to_string(path)?;
    Ok(Checkpoint::from_json(&text)?.params)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenSummary {
    pub records: usize,
    pub arm_counts: Vec<usize>,
    pub conversion_rate: f64,
}

pub fn gen(world: &World, n: usize, provenance: Provenance, out: &Path) -> Result<GenSummary> {
    let d = world.generate_dataset(n, provenance)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    d.write_file(out)?;
    let conv = d.records.iter().filter(|r| r.converted).count();
    Ok(GenSummary {
        records: d.records.len(),
        arm_counts: d.arm_counts(),
        conversion_rate: conv as f64 / n as f64,
    })
}

/// Train on a dataset file; writes the checkpoint and optionally the epoch log.
pub fn train(data: &Path, cfg: &TrainConfig, checkpoint: &Path, log_csv: Option<&Path>) -> Result<multenet::TrainLog> {
    cfg.validate()?;
    log::info!("train config: {}", serde_json::to_string(cfg)?);
    let d = Dataset::read_file(data)?;
    let (params, log) = multenet::train(&d, cfg)?;
    write_text(checkpoint, &Checkpoint::new(params, cfg).to_json()?)?;
    if let Some(p) = log_csv {
        let mut buf = Vec::new();
        log.write_csv(&mut buf)?;
        write_text(p, &String::from_utf8(buf).expect("csv is utf-8"))?;
    }
    Ok(log)
}

/// Score a dataset; writes the metrics JSON and optionally the Qini curve CSV.
pub fn eval(checkpoint: &Path, data: &Path, grid_points: usize, out: &Path, curve: Option<&Path>) -> Result<MetricsReport> {
    let model = load_model(checkpoint)?;
    let d = Dataset::read_file(data)?;
    let queries: Vec<_> = d.records.iter().map(|r| r.query.clone()).collect();
    let curves = model.infer_batch(&queries)?;
    let report = metrics::evaluate(&curves, &d, grid_points)?;
    if let Some(w) = &report.warning {
        log::warn!("{w}");
    }
    write_text(out, &pretty(&report)?)?;
    if let Some(p) = curve {
        let pts = metrics::qini_curve(&metrics::pooled_input(&curves, &d)?)?;
        write_text(p, &metrics::curve_csv(&pts))?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizeConfig {
    /// Days of simulated traffic the clusters are estimated from.
    pub days: u32,
    /// Fixed daily budget; overrides `target_subsidy_rate`.
    pub budget: Option<f64>,
    /// Daily budget as a fraction of expected unsubsidized revenue.
    pub target_subsidy_rate: f64,
    pub bucket_width: u32,
    pub zone_block: u32,
    pub min_cluster_size: usize,
    pub u_lo: f64,
    pub u_hi: Option<f64>,
    pub costs: Option<Vec<Vec<f64>>>,
    pub solved_at: String,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        let h = HorizonConfig::default();
        Self {
            days: h.history_days,
            budget: None,
            target_subsidy_rate: h.target_subsidy_rate,
            bucket_width: h.bucket_width,
            zone_block: h.zone_block,
            min_cluster_size: h.min_cluster_size,
            u_lo: 0.0,
            u_hi: None,
            costs: None,
            solved_at: "offline".into(),
        }
    }
}

/// Cluster a sample of traffic, solve one day's allocation and write the dictionary.
pub fn optimize(world: &World, provider: &dyn ElasticityProvider, cfg: &OptimizeConfig, out: &Path) -> Result<AllocationDictionary> {
    if cfg.days == 0 {
        return Err(Error::Config("days must be positive".into()));
    }
    log::info!("optimize config: {}", serde_json::to_string(cfg)?);
    let exec = Exec::default();
    let mut queries = Vec::new();
    for day in 0..cfg.days {
        queries.extend(world.sample_queries_with(exec, day, world.daily_volume(day)));
    }
    let curves = provider.curves(exec, &queries)?;
    let fares = par::map(exec, &queries, |q| world.revenues(q));
    let costs = match &cfg.costs {
        Some(c) => c.clone(),
        None => allocator::default_costs(world.grid(), world.services().len()),
    };
    let coarsening = crate::domain::Coarsening {
        buckets_per_day: world.params.n_time_buckets,
        bucket_width: cfg.bucket_width,
        zone_block: cfg.zone_block,
    };
    let ccfg = ClusterConfig {
        coarsening,
        min_size: cfg.min_cluster_size,
        volume_scale: 1.0 / cfg.days as f64,
    };
    let clusters = allocator::build_clusters(&queries, &curves, &fares, world.services(), &costs, &ccfg)?;
    let budget = match cfg.budget {
        Some(b) => b,
        None => cfg.target_subsidy_rate * clusters.iter().map(|c| c.value(0)).sum::<f64>(),
    };
    let problem = AllocationProblem {
        clusters,
        budget,
        u_lo: cfg.u_lo,
        u_hi: cfg.u_hi,
    };
    let sol = allocator::solve_lagrangian_with(exec, &problem)?;
    log::info!(
        "solved {} clusters: objective {:.3}, cost {:.3} of {:.3}, gap bound {:.3}",
        problem.clusters.len(),
        sol.objective_value,
        sol.total_cost,
        budget,
        sol.optimality_gap_bound
    );
    let dict = allocator::emit_dictionary(&sol, &problem, world.services(), world.grid(), coarsening, &cfg.solved_at)?;
    write_text(out, &dict.to_canonical_json()?)?;
    Ok(dict)
}

/// Paths written by [`simulate`].
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationFiles {
    pub report: PathBuf,
    pub days_csv: PathBuf,
    pub dictionaries: Vec<PathBuf>,
}

/// Run the horizon and write `report.json`, `days.csv` and `dictionaries/day-NNN.json`.
pub fn simulate(
    world: &World,
    provider: &dyn ElasticityProvider,
    cfg: &HorizonConfig,
    policy: Policy,
    out_dir: &Path,
) -> Result<(SimulationReport, SimulationFiles)> {
    log::info!("horizon config: {}", serde_json::to_string(cfg)?);
    let run = mpc::mpc_loop(world, provider, cfg, policy, BudgetMode::Rate(cfg.target_subsidy_rate))?;
    fs::create_dir_all(out_dir.join("dictionaries"))?;
    let report = out_dir.join("report.json");
    write_text(&report, &pretty(&run.report)?)?;
    let days_csv = out_dir.join("days.csv");
    run.report.write_days_csv(BufWriter::new(fs::File::create(&days_csv)?))?;
    let mut dictionaries = Vec::new();
    for (d, day) in run.dictionaries.iter().zip(&run.report.days) {
        let p = out_dir.join("dictionaries").join(format!("day-{:03}.json", day.day));
        write_text(&p, &d.to_canonical_json()?)?;
        dictionaries.push(p);
    }
    Ok((
        run.report,
        SimulationFiles {
            report,
            days_csv,
            dictionaries,
        },
    ))
}

/// Elasticity source: a checkpoint, or the world's ground truth when `None`.
pub fn provider<'a>(world: &'a World, model: Option<&'a MulTeNetParams>) -> Box<dyn ElasticityProvider + 'a> {
    match model {
        Some(m) => Box::new(m.clone()),
        None => Box::new(OracleElasticity(world)),
    }
}
