//! Command-line front end: run configuration, argument parsing and the six
//! subcommands. `main.rs` only wires these to the process.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::classify::{self, ClassifyReport, SynthEmbedSpec};
use crate::dataset::TaskDataset;
use crate::error::{IconError, Result};
use crate::eval::{self, Metrics, ScatterExport, Table1};
use crate::flow::FlowParams;
use crate::numerics::{stream_id, streams, Matrix, RngStream};
use crate::objectives::ModelBank;
use crate::synthdata::{self, Benchmark, SynthSpec};
use crate::theory::{self, TheoremReport, VerifyConfig};
use crate::trainer::{self, FlowConfig, TrainConfig};

/// Environment variable capping the worker pool size.
pub const THREADS_ENV: &str = "ICON_THREADS";

pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_FILE: &str = "report.json";
pub const SCATTER_CSV: &str = "scatter.csv";
pub const SCATTER_SVG: &str = "scatter.svg";
pub const SCATTER_META: &str = "scatter.json";
pub const THEOREM_FILE: &str = "theorem.json";
pub const CONFIG_FILE: &str = "config.json";
pub const EMBEDDINGS_DIR: &str = "embeddings";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Points sampled per setup and task for scatter exports.
    pub export_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { export_points: 1000 }
    }
}

/// Settings of the continual classification run. The flow and optimiser
/// sections are separate from the top-level ones because the embedding
/// benchmark is much wider than the latent benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifyConfig {
    pub benchmark: SynthEmbedSpec,
    pub flow: FlowConfig,
    pub train: TrainConfig,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        ClassifyConfig {
            benchmark: SynthEmbedSpec::default(),
            flow: FlowConfig {
                n_blocks: 2,
                width: 32,
                latent_dim: None,
            },
            train: TrainConfig {
                epochs_stage1: 10,
                epochs_stage2: 5,
                batch_size: 128,
                replay_size: 200,
                ..TrainConfig::default()
            },
        }
    }
}

/// Whole-run configuration. Every section is optional; `seed` is not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub data: SynthSpec,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub classify: ClassifyConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        RunConfig {
            seed,
            data: SynthSpec::default(),
            flow: FlowConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            classify: ClassifyConfig::default(),
            verify: VerifyConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| IconError::Config(e.to_string()))
    }

    /// Reads `path` (if given) and applies `--seed`. Without a file the seed
    /// flag is required.
    pub fn resolve(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg = match (path, seed) {
            (Some(p), _) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| IconError::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::from_json(&text)?
            }
            (None, Some(s)) => Self::with_seed(s),
            (None, None) => return Err(IconError::Config("a seed is required (--seed or `seed` in --config)".into())),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let section = |name: &str, r: Result<()>| {
            r.map_err(|e| match e {
                IconError::Config(m) => IconError::Config(format!("{name}: {m}")),
                other => other,
            })
        };
        section("data", self.data.validate())?;
        section("flow", self.flow.validate())?;
        section("train", self.train.validate())?;
        section("classify.benchmark", self.classify.benchmark.validate())?;
        section("classify.flow", self.classify.flow.validate())?;
        section("classify.train", self.classify.train.validate())?;
        section("verify", self.verify.validate())?;
        if self.eval.export_points == 0 {
            return Err(IconError::Config("eval: export_points must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "icon", version, about = "Dual volume-preserving flows with KL alignment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic latent benchmark.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Number of tasks.
        #[arg(long)]
        tasks: Option<usize>,
        /// Rows per task.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train the model bank on a generated benchmark.
    Train {
        #[command(flatten)]
        common: Common,
        /// Benchmark directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Skip the KL alignment stage.
        #[arg(long)]
        no_kl: bool,
    },
    /// Metrics for a trained bank, optionally against a no-KL baseline.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Benchmark directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoints: PathBuf,
        /// Checkpoints of the run trained with `--no-kl`.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Check the identifiability assumptions on a mixer or trained flows.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Benchmark directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Use trained flows instead of the ground-truth mixer.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Latent scatter export (CSV and SVG).
    Export {
        #[command(flatten)]
        common: Common,
        /// Benchmark directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoints: PathBuf,
        /// Points per setup and task.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Continual classification over feature embeddings.
    Classify {
        #[command(flatten)]
        common: Common,
        /// Embedding directory; a synthetic corpus is generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Skip the KL alignment stage.
        #[arg(long)]
        no_kl: bool,
    },
}

/// Applies `ICON_THREADS` to the global worker pool.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| IconError::Config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| IconError::Config(format!("thread pool: {e}")))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, tasks, n } => cmd_gen(&common, tasks, n),
        Command::Train { common, data, no_kl } => cmd_train(&common, &data, no_kl),
        Command::Eval {
            common,
            data,
            checkpoints,
            baseline,
        } => cmd_eval(&common, &data, &checkpoints, baseline.as_deref()),
        Command::Verify {
            common,
            data,
            checkpoints,
        } => cmd_verify(&common, &data, checkpoints.as_deref()).map(drop),
        Command::Export {
            common,
            data,
            checkpoints,
            n,
        } => cmd_export(&common, &data, &checkpoints, n),
        Command::Classify { common, data, no_kl } => cmd_classify(&common, data.as_deref(), no_kl).map(drop),
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn cmd_gen(common: &Common, tasks: Option<usize>, n: Option<usize>) -> Result<()> {
    let mut cfg = RunConfig::resolve(common.config.as_deref(), common.seed)?;
    if let Some(t) = tasks {
        cfg.data.tasks = t;
    }
    if let Some(n) = n {
        cfg.data.n_per_task = n;
    }
    cfg.validate()?;
    let bench = synthdata::generate(&cfg.data, cfg.seed)?;
    synthdata::write_benchmark(&bench, &common.out)?;
    log::info!("wrote {} tasks to {}", cfg.data.tasks, common.out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainMetrics<'a> {
    kl: bool,
    metrics: &'a Metrics,
}

pub fn cmd_train(common: &Common, data: &Path, no_kl: bool) -> Result<()> {
    let mut cfg = RunConfig::resolve(common.config.as_deref(), common.seed)?;
    if no_kl {
        cfg.train.kl = false;
    }
    let bench = synthdata::read_benchmark(data)?;
    let state = trainer::run_sequence(&bench.train, &cfg.train, &cfg.flow, None, cfg.seed)?;
    let metrics = eval::evaluate_bank(&state.bank, &bench.train, &bench.test)?;
    trainer::save_run(&state, &cfg.train, &cfg.flow, cfg.seed, &common.out)?;
    write_json(&cfg, &common.out.join(CONFIG_FILE))?;
    write_json(
        &TrainMetrics {
            kl: cfg.train.kl,
            metrics: &metrics,
        },
        &common.out.join(METRICS_FILE),
    )?;
    Ok(())
}

/// Schema of `report.json` written by `eval`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    /// Present when a no-KL baseline was supplied.
    pub table1: Option<Table1>,
    pub ata_improvement: Option<f64>,
}

fn load_bank(dir: &Path) -> Result<ModelBank> {
    Ok(trainer::load_run(dir, None)?.0)
}

fn full_tasks(bench: &Benchmark) -> Result<Vec<TaskDataset>> {
    bench.manifest.tasks.iter().map(|t| bench.full_task(t.task)).collect()
}

fn write_scatter(export: &ScatterExport, out: &Path) -> Result<()> {
    eval::write_csv(export, &out.join(SCATTER_CSV))?;
    eval::write_svg(export, &out.join(SCATTER_SVG))?;
    #[derive(Serialize)]
    struct Meta<'a> {
        n_per_task: usize,
        projection: &'a str,
        explained_variance: &'a [f64],
        points: usize,
    }
    write_json(
        &Meta {
            n_per_task: export.n_per_task,
            projection: &export.projection,
            explained_variance: &export.explained_variance,
            points: export.points.len(),
        },
        &out.join(SCATTER_META),
    )
}

pub fn cmd_eval(common: &Common, data: &Path, checkpoints: &Path, baseline: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::resolve(common.config.as_deref(), common.seed)?;
    let bench = synthdata::read_benchmark(data)?;
    let bank = load_bank(checkpoints)?;
    let base = baseline.map(load_bank).transpose()?;
    let metrics = eval::evaluate_bank(&bank, &bench.train, &bench.test)?;
    let table1 = match &base {
        Some(b) => Some(eval::table1(&bank, b, &bench.train, &bench.test)?),
        None => None,
    };
    let export = eval::export_scatter(&bank, &full_tasks(&bench)?, cfg.eval.export_points, cfg.seed)?;
    std::fs::create_dir_all(&common.out)?;
    write_json(
        &EvalReport {
            metrics,
            ata_improvement: table1.as_ref().map(Table1::ata_improvement),
            table1,
        },
        &common.out.join(REPORT_FILE),
    )?;
    write_scatter(&export, &common.out)
}

pub fn cmd_export(common: &Common, data: &Path, checkpoints: &Path, n: Option<usize>) -> Result<()> {
    let cfg = RunConfig::resolve(common.config.as_deref(), common.seed)?;
    let n = n.unwrap_or(cfg.eval.export_points);
    if n == 0 {
        return Err(IconError::Config("--n must be positive".into()));
    }
    let bench = synthdata::read_benchmark(data)?;
    let bank = load_bank(checkpoints)?;
    let export = eval::export_scatter(&bank, &full_tasks(&bench)?, n, cfg.seed)?;
    std::fs::create_dir_all(&common.out)?;
    write_scatter(&export, &common.out)
}

fn flow_map(flow: &FlowParams) -> impl Fn(&[f64]) -> Result<Vec<f64>> + Sync + '_ {
    move |z: &[f64]| Ok(flow.forward(&Matrix::row_vector(z))?.into_vec())
}

/// `verify` on the ground-truth mixer compares the true latents with the
/// mixer's own inversion of the observations; on checkpoints it compares the
/// full latents of `pta[t]` and the all-task flow, with the all-task flow as
/// the generator.
pub fn cmd_verify(common: &Common, data: &Path, checkpoints: Option<&Path>) -> Result<TheoremReport> {
    let cfg = RunConfig::resolve(common.config.as_deref(), common.seed)?;
    let bench = synthdata::read_benchmark(data)?;
    let task = bench.full_task(cfg.verify.task)?;
    let mut rng = RngStream::new(cfg.seed, stream_id(streams::VERIFY, 0));
    let rows = rng.sample_without_replacement(task.len(), cfg.verify.n.min(task.len()));
    let x = task.x.select_rows(&rows);
    let report = match checkpoints {
        None => {
            let z_true = task
                .z_true
                .as_ref()
                .ok_or_else(|| IconError::Contract("benchmark has no ground-truth latents".into()))?
                .select_rows(&rows);
            let recovered = bench.mixer.inverse(&x)?;
            let g = bench.mixer.point_map();
            theory::verify_theorem(&g, &z_true, &recovered, &x, &cfg.verify, &mut rng)?
        }
        Some(dir) => {
            let bank = load_bank(dir)?;
            let pta = bank.pta(cfg.verify.task)?;
            let (z_pta, z_ata) = (pta.inverse(&x)?, bank.ata.inverse(&x)?);
            let g = flow_map(&bank.ata);
            theory::verify_theorem(&g, &z_pta, &z_ata, &x, &cfg.verify, &mut rng)?
        }
    };
    std::fs::create_dir_all(&common.out)?;
    write_json(&report, &common.out.join(THEOREM_FILE))?;
    Ok(report)
}

pub fn cmd_classify(common: &Common, data: Option<&Path>, no_kl: bool) -> Result<ClassifyReport> {
    let mut cfg = RunConfig::resolve(common.config.as_deref(), common.seed)?;
    if no_kl {
        cfg.classify.train.kl = false;
    }
    let (ds, generated) = match data {
        Some(dir) => (classify::load_embeddings(dir)?, false),
        None => (classify::synth_embeddings(&cfg.classify.benchmark, cfg.seed)?, true),
    };
    let (report, state) = classify::continual_classify(&ds, &cfg.classify.train, &cfg.classify.flow, cfg.seed)?;
    std::fs::create_dir_all(&common.out)?;
    if generated {
        classify::write_embeddings(&ds, &common.out.join(EMBEDDINGS_DIR))?;
    }
    trainer::save_run(
        &state,
        &cfg.classify.train,
        &cfg.classify.flow,
        cfg.seed,
        &common.out.join(CHECKPOINT_DIR),
    )?;
    write_json(&report, &common.out.join(REPORT_FILE))?;
    Ok(report)
}
