//! `tdm`: generate data, train, evaluate, ablate, export channel weights and
//! gradient-check the task-discrepancy model.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tdm_core::data::{export_dataset, sample_episode, DatasetSplit, Side};
use tdm_core::harness::{
    ablate, export_channel_weights, grad_check_report, load_checkpoint, stream_rng, train_steps, write_ablation_csv,
    AblationPlan, Checkpoint, DatasetSource, EvalOptions, GradCheckConfig, RunConfig, EPISODE_STREAM,
};
use tdm_core::metric::MetricKind;
use tdm_core::tdm::PoolMode;

pub const CHECKPOINT_FILE: &str = "checkpoint.tdmc";
pub const LOSS_FILE: &str = "loss.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const GRAD_CHECK_FILE: &str = "grad_check.json";
pub const DATASET_DIR: &str = "dataset";

#[derive(Parser, Debug)]
#[command(
    name = "tdm",
    version,
    about = "Few-shot classification with task-discrepancy channel weights"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory that receives every output file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the configured synthetic dataset to `<out>/dataset`.
    GenData(Common),
    /// Train a model and write `checkpoint.tdmc` and `loss.csv`.
    Train(Common),
    /// Evaluate a checkpoint on novel-class episodes and write `eval.json`.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation threads; results do not depend on this.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Overrides the configured number of evaluation episodes.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train and evaluate the SAM x QAM grid and write `ablation.csv`.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Cells trained concurrently.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Pooling::Avg, Pooling::Max])]
        pooling: Vec<Pooling>,
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [MetricArg::Euclidean, MetricArg::Cosine])]
        metric: Vec<MetricArg>,
    },
    /// Write eval-mode channel weights and aggregated maps for one novel
    /// episode.
    ExportWeights {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        /// Episode index; the episode is drawn from `seed + index`.
        #[arg(long, default_value_t = 0)]
        episode: u64,
    },
    /// Compare backward() against finite differences on a tiny model and
    /// write `grad_check.json`. `--config` takes a gradient-check config.
    GradCheck(Common),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Pooling {
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    Euclidean,
    Cosine,
}

impl From<Pooling> for PoolMode {
    fn from(p: Pooling) -> Self {
        match p {
            Pooling::Avg => PoolMode::Avg,
            Pooling::Max => PoolMode::Max,
        }
    }
}

impl From<MetricArg> for MetricKind {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Euclidean => MetricKind::SquaredEuclidean,
            MetricArg::Cosine => MetricKind::Cosine,
        }
    }
}

/// The run configuration and the directory relative dataset paths resolve
/// against.
fn load_config(common: &Common) -> Result<(RunConfig, Option<PathBuf>)> {
    let (mut config, base) = match &common.config {
        Some(path) => {
            let cfg = RunConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?;
            (cfg, path.parent().map(Path::to_path_buf))
        }
        None => (RunConfig::default(), None),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok((config, base))
}

fn load_dataset(config: &RunConfig, base: Option<&Path>) -> Result<DatasetSplit> {
    config.dataset.load(base).context("loading dataset")
}

fn out_dir(common: &Common) -> Result<&Path> {
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok(&common.out)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// With `--config`, the file's dataset replaces the checkpoint's; the
/// model settings always come from the checkpoint.
fn checkpoint_and_data(common: &Common, path: &Path) -> Result<(Checkpoint, DatasetSplit, u64)> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let (dataset, seed) = match &common.config {
        Some(_) => {
            let (cfg, base) = load_config(common)?;
            (load_dataset(&cfg, base.as_deref())?, cfg.seed)
        }
        None => (
            load_dataset(&ckpt.config, None)?,
            common.seed.unwrap_or(ckpt.config.seed),
        ),
    };
    Ok((ckpt, dataset, seed))
}

fn gen_data(common: &Common) -> Result<()> {
    let (config, base) = load_config(common)?;
    let source = match (&config.dataset, common.seed) {
        (DatasetSource::Synthetic(spec), Some(seed)) => {
            DatasetSource::Synthetic(tdm_core::data::SyntheticSpec { seed, ..spec.clone() })
        }
        (DatasetSource::Path(_), _) => bail!("gen-data needs a synthetic dataset spec"),
        (source, None) => source.clone(),
    };
    let dataset = source.load(base.as_deref())?;
    let dir = out_dir(common)?.join(DATASET_DIR);
    export_dataset(&dataset, &dir)?;
    println!(
        "wrote {} images of {} classes ({} base, {} novel) to {}",
        dataset.total_images(),
        dataset.classes.len(),
        dataset.base_classes.len(),
        dataset.novel_classes.len(),
        dir.display()
    );
    Ok(())
}

fn run_train(common: &Common) -> Result<()> {
    let (config, base) = load_config(common)?;
    let dataset = load_dataset(&config, base.as_deref())?;
    let out = out_dir(common)?;
    let start = Checkpoint::initial(&config)?;
    let total = config.train_episodes;
    let report_every = (total / 20).max(1) as u64;
    let outcome = train_steps(start, &dataset, &config.model_settings(), total, |step, loss| {
        if (step + 1) % report_every == 0 {
            eprintln!("step {:>6}/{total}  loss {loss:.5}", step + 1);
        }
    })?;
    outcome.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l:e}\n"));
    }
    fs::write(out.join(LOSS_FILE), csv)?;
    println!(
        "trained {total} episodes; wrote {}",
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn run_eval(common: &Common, checkpoint: &Path, workers: usize, episodes: Option<usize>) -> Result<()> {
    let (ckpt, dataset, seed) = checkpoint_and_data(common, checkpoint)?;
    let out = out_dir(common)?;
    let mut opts = EvalOptions::new(episodes.unwrap_or(ckpt.config.eval_episodes), seed);
    opts.workers = workers;
    let report = tdm_core::harness::evaluate(&ckpt, &dataset, &opts)?;
    write_json(&out.join(EVAL_FILE), &report.summary(&ckpt.config))?;
    println!(
        "accuracy {:.2}% +- {:.2}% over {} episodes",
        report.mean_accuracy, report.half_width, report.episodes
    );
    Ok(())
}

fn run_ablate(common: &Common, workers: usize, pooling: &[Pooling], metric: &[MetricArg]) -> Result<()> {
    let (config, base) = load_config(common)?;
    let dataset = load_dataset(&config, base.as_deref())?;
    let out = out_dir(common)?;
    let plan = AblationPlan {
        poolings: pooling.iter().map(|&p| p.into()).collect(),
        metrics: metric.iter().map(|&m| m.into()).collect(),
        workers,
    };
    let cells = ablate(&config, &dataset, &plan)?;
    write_ablation_csv(&cells, &out.join(ABLATION_FILE))?;
    let mut stdout = std::io::stdout().lock();
    for c in &cells {
        let row = c.row();
        writeln!(
            stdout,
            "sam={:<5} qam={:<5} {:?}/{:?}: {:.2} +- {:.2}",
            row.sam, row.qam, row.pooling, row.metric, row.mean, row.half_width
        )?;
    }
    Ok(())
}

fn run_export(common: &Common, checkpoint: &Path, index: u64) -> Result<()> {
    let (ckpt, dataset, seed) = checkpoint_and_data(common, checkpoint)?;
    let out = out_dir(common)?;
    let mut rng = stream_rng(seed.wrapping_add(index), EPISODE_STREAM);
    let episode = sample_episode(&dataset, Side::Novel, &ckpt.config.episode, &mut rng)?;
    let (w, m) = export_channel_weights(&ckpt.model, &ckpt.config.tdm_settings(), &dataset, &episode, out)?;
    println!("wrote {} and {}", w.display(), m.display());
    Ok(())
}

fn run_grad_check(common: &Common) -> Result<()> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<GradCheckConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => GradCheckConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = out_dir(common)?;
    let report = grad_check_report(&cfg, None)?;
    write_json(&out.join(GRAD_CHECK_FILE), &report)?;
    for g in &report.groups {
        println!(
            "{:<28} {:>6} elems  worst rel {:.2e}  abs {:.2e}  {}",
            g.name,
            g.elements,
            g.rel_error,
            g.abs_error,
            if g.passed { "ok" } else { "FAIL" }
        );
    }
    println!("max relative error {:.3e}", report.max_rel_error);
    if !report.passed {
        bail!("gradient check failed: max relative error {:.3e}", report.max_rel_error);
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => run_train(c),
        Command::Eval {
            common,
            checkpoint,
            workers,
            episodes,
        } => run_eval(common, checkpoint, *workers, *episodes),
        Command::Ablate {
            common,
            workers,
            pooling,
            metric,
        } => run_ablate(common, *workers, pooling, metric),
        Command::ExportWeights {
            common,
            checkpoint,
            episode,
        } => run_export(common, checkpoint, *episode),
        Command::GradCheck(c) => run_grad_check(c),
    }
}
