use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tracing::info;

use fedsem_core::config::ExperimentConfig;
use fedsem_core::metrics::{cost_table, cost_table_csv, Metric};
use fedsem_core::partition::heterogeneity_report;
use fedsem_core::pipeline::{self, Dataset};
use fedsem_core::semantics::PSG_DIMS;
use fedsem_core::trainer::ModelLayout;
use fedsem_core::{io, partition::PartitionPlan};

/// Semantic-cluster partitioning and federated training benchmark.
#[derive(Parser)]
#[command(name = "fedsem", version)]
struct Cli {
    /// Only log warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    /// Record per-round wall-clock time in the history (not reproducible).
    #[arg(long, global = true)]
    timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster training samples by category tensor.
    Cluster(Common),
    /// Balance clusters and distribute samples to clients.
    Partition {
        #[command(flatten)]
        common: Common,
        /// Cluster assignment to partition [default: <out>/assignment.jsonl].
        #[arg(long)]
        assignment: Option<PathBuf>,
    },
    /// Run federated rounds on an existing plan.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Partition plan [default: <out>/plan.json].
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Cluster, partition and simulate in one go.
    Run(Common),
    /// Rounds-to-target and communication-cost table over histories.
    Report {
        /// `label=path` pairs; the first one is the cost baseline. Without a
        /// label, the parent directory name is used.
        #[arg(long = "history", required = true, num_args = 1..)]
        histories: Vec<String>,
        #[arg(long, default_value = "acc")]
        metric: Metric,
        #[arg(long)]
        target: f64,
        /// Model parameters sent per round [default: surrogate model size].
        #[arg(long)]
        param_count: Option<u64>,
        /// Directory for report.csv; prints to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Stage {
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Stage {
    fn open(common: &Common) -> Result<Self> {
        let mut cfg = ExperimentConfig::load(&common.config)
            .with_context(|| format!("loading config {}", common.config.display()))?;
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        let Some(out) = common.out.clone().or_else(|| cfg.output_dir.clone()) else {
            bail!("no output directory: pass --out or set output_dir in the config");
        };
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        io::write_json(&out.join("config.json"), &cfg)?;
        Ok(Self { cfg, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn cluster(&self, data: &Dataset) -> Result<()> {
        let clustering = pipeline::cluster(&self.cfg, data)?;
        io::write_assignment(&self.path("assignment.jsonl"), &clustering.assignment)?;
        io::write_json(&self.path("cluster_summary.json"), &clustering.summary(data.truth.as_ref())?)?;
        Ok(())
    }

    fn partition(&self, assignment: &Path) -> Result<()> {
        if !assignment.is_file() {
            bail!(
                "cluster assignment {} not found, run `fedsem cluster` first",
                assignment.display()
            );
        }
        let assignment = io::load_assignment(assignment, Some(self.cfg.clustering.n_clusters))?;
        let (used, plan) = pipeline::partition(&self.cfg, &assignment)?;
        let report = heterogeneity_report(&plan, &used)?;
        info!(
            mean_entropy = report.mean_entropy,
            mean_max_proportion = report.mean_max_proportion,
            median_max_proportion = report.median_max_proportion,
            "heterogeneity"
        );
        io::write_plan(&self.path("plan.json"), &plan)?;
        io::write_text(&self.path("heterogeneity.csv"), &report.to_csv())?;
        Ok(())
    }

    fn simulate(&self, data: &Dataset, plan: &PartitionPlan, timing: bool) -> Result<()> {
        let outcome = pipeline::simulate(&self.cfg, data, plan, timing)?;
        io::write_history(&self.path("history.jsonl"), &outcome.history)?;
        io::write_text(&self.path("history.csv"), &outcome.history.to_csv())?;
        io::write_params(&self.path("global_params.bin"), &outcome.state.global)?;
        if let Some(last) = outcome.history.final_record() {
            info!(
                rounds = last.round,
                acc = last.acc,
                r50 = last.r50,
                mr50 = last.mr50,
                "simulation done"
            );
        }
        Ok(())
    }
}

fn load_plan(path: &Path) -> Result<PartitionPlan> {
    if !path.is_file() {
        bail!(
            "partition plan {} not found, run `fedsem partition` first (or `fedsem run`)",
            path.display()
        );
    }
    Ok(io::load_plan(path)?)
}

fn report(
    histories: &[String],
    metric: Metric,
    target: f64,
    param_count: Option<u64>,
    out: Option<&Path>,
) -> Result<()> {
    let params = param_count.unwrap_or(ModelLayout::for_dims(PSG_DIMS).param_count() as u64);
    let mut runs = Vec::with_capacity(histories.len());
    for entry in histories {
        let (label, path) = match entry.split_once('=') {
            Some((label, path)) => (label.to_string(), PathBuf::from(path)),
            None => {
                let path = PathBuf::from(entry);
                let label = path
                    .parent()
                    .and_then(Path::file_name)
                    .map_or_else(|| entry.clone(), |n| n.to_string_lossy().into_owned());
                (label, path)
            }
        };
        let history = io::load_history(&path)?;
        runs.push((label, params, history));
    }
    let rows = cost_table(&runs, &metric.to_string(), target)?;
    let csv = cost_table_csv(&rows, &metric.to_string());
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            io::write_text(&dir.join("report.csv"), &csv)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(value) = std::env::var("FEDSEM_THREADS") {
        let n: usize = value
            .parse()
            .with_context(|| format!("FEDSEM_THREADS must be a positive integer, got `{value}`"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Cluster(common) => {
            let stage = Stage::open(&common)?;
            let data = pipeline::prepare_data(&stage.cfg)?;
            stage.cluster(&data)
        }
        Command::Partition { common, assignment } => {
            let stage = Stage::open(&common)?;
            let assignment = assignment.unwrap_or_else(|| stage.path("assignment.jsonl"));
            stage.partition(&assignment)
        }
        Command::Simulate { common, plan } => {
            let stage = Stage::open(&common)?;
            let plan = load_plan(&plan.unwrap_or_else(|| stage.path("plan.json")))?;
            let data = pipeline::prepare_data(&stage.cfg)?;
            stage.simulate(&data, &plan, cli.timing)
        }
        Command::Run(common) => {
            let stage = Stage::open(&common)?;
            let data = pipeline::prepare_data(&stage.cfg)?;
            stage.cluster(&data)?;
            stage.partition(&stage.path("assignment.jsonl"))?;
            let plan = load_plan(&stage.path("plan.json"))?;
            stage.simulate(&data, &plan, cli.timing)
        }
        Command::Report {
            histories,
            metric,
            target,
            param_count,
            out,
        } => report(&histories, metric, target, param_count, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
