use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::train::{stream_rng, EPISODE_STREAM, LABEL_STREAM};
use crate::data::{sample_episode, DatasetSplit, EpisodeSpec, Side};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSettings};
use crate::parallel::map_with_workers;

const Z_95: f64 = 1.96;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub episodes: usize,
    pub seed: u64,
    /// Worker threads; 1 runs on the calling thread. Results do not depend
    /// on this.
    pub workers: usize,
    /// Replace every query label with a uniform random label (chance-level
    /// sanity check).
    pub randomize_labels: bool,
}

impl EvalOptions {
    pub fn new(episodes: usize, seed: u64) -> Self {
        EvalOptions {
            episodes,
            seed,
            workers: 1,
            randomize_labels: false,
        }
    }
}

/// Accuracy summary of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean accuracy in percent.
    pub mean_accuracy: f64,
    /// 95% confidence half-width in percent.
    pub half_width: f64,
    pub episodes: usize,
    pub seed: u64,
    /// Per-episode accuracy as a fraction, in episode order.
    pub per_episode: Vec<f64>,
}

/// The `eval.json` document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean: f64,
    pub half_width: f64,
    pub n: usize,
    pub seed: u64,
    pub config: RunConfig,
}

impl EvalReport {
    pub fn summary(&self, config: &RunConfig) -> EvalSummary {
        EvalSummary {
            mean: self.mean_accuracy,
            half_width: self.half_width,
            n: self.episodes,
            seed: self.seed,
            config: config.clone(),
        }
    }
}

/// Mean and 95% half-width `1.96·s/√n`, with `s` the sample standard
/// deviation (`n − 1` denominator).
pub fn compute_ci(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InsufficientSamples(n));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, Z_95 * var.sqrt() / (n as f64).sqrt()))
}

/// Evaluates a checkpoint with its own configuration on novel-split
/// episodes.
pub fn evaluate(ckpt: &Checkpoint, dataset: &DatasetSplit, opts: &EvalOptions) -> Result<EvalReport> {
    evaluate_model(
        &ckpt.model,
        &ckpt.config.model_settings(),
        &ckpt.config.episode,
        dataset,
        opts,
    )
}

/// Episode `e` is sampled from `seed + e`, classified in eval mode, and
/// scored; accuracies are gathered in episode order.
pub fn evaluate_model(
    model: &Model,
    settings: &ModelSettings,
    spec: &EpisodeSpec,
    dataset: &DatasetSplit,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let per_episode = map_with_workers(opts.episodes, opts.workers, |e| {
        let seed = opts.seed.wrapping_add(e as u64);
        let mut rng = stream_rng(seed, EPISODE_STREAM);
        let mut batch = sample_episode(dataset, Side::Novel, spec, &mut rng)?.to_batch(dataset);
        if opts.randomize_labels {
            let mut lr = stream_rng(seed, LABEL_STREAM);
            batch
                .query_labels
                .iter_mut()
                .for_each(|l| *l = lr.random_range(0..spec.n_way));
        }
        let (pred, _) = model.predict(&batch, settings)?;
        Ok(pred.accuracy(&batch.query_labels))
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let (mean, half) = compute_ci(&per_episode)?;
    Ok(EvalReport {
        mean_accuracy: 100.0 * mean,
        half_width: 100.0 * half,
        episodes: opts.episodes,
        seed: opts.seed,
        per_episode,
    })
}
