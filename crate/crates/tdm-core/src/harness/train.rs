use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use crate::data::{sample_episode, DatasetSplit, Side};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSettings};
use crate::Mode;

/// Independent rng streams derived from one `seed + index` value. The
/// episode stream is shared by every ablation cell, so cells see identical
/// episodes regardless of how much noise they draw.
pub const EPISODE_STREAM: u64 = 0;
pub const NOISE_STREAM: u64 = 1;
pub const LABEL_STREAM: u64 = 2;
pub const HOLDOUT_STREAM: u64 = 3;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Training loss of every step taken, in order.
    pub losses: Vec<f64>,
}

/// Trains a fresh model for `config.train_episodes` steps.
pub fn train(config: &RunConfig, dataset: &DatasetSplit) -> Result<TrainOutcome> {
    let start = Checkpoint::initial(config)?;
    train_steps(
        start,
        dataset,
        &config.model_settings(),
        config.train_episodes,
        |_, _| {},
    )
}

/// Continues training `ckpt` for `steps` more episodes. Step `s` (counted
/// from the start of training) samples its base-split episode from
/// `seed + s` and draws task-weight noise from a separate stream of the same
/// seed. `observe(step, loss)` is called after every update.
pub fn train_steps<F>(
    mut ckpt: Checkpoint,
    dataset: &DatasetSplit,
    settings: &ModelSettings,
    steps: usize,
    mut observe: F,
) -> Result<TrainOutcome>
where
    F: FnMut(u64, f64),
{
    let mut losses = Vec::with_capacity(steps);
    let seed = ckpt.config.seed;
    let spec = ckpt.config.episode;
    for _ in 0..steps {
        let step = ckpt.step;
        let mut episode_rng = stream_rng(seed.wrapping_add(step), EPISODE_STREAM);
        let mut noise_rng = stream_rng(seed.wrapping_add(step), NOISE_STREAM);
        let batch = sample_episode(dataset, Side::Base, &spec, &mut episode_rng)?.to_batch(dataset);
        let out = ckpt.model.gradients(&batch, settings, Some(&mut noise_rng))?;
        if !out.loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss: out.loss });
        }
        ckpt.optimizer.update(&mut ckpt.model.learnable_mut(), &out.grads)?;
        ckpt.model.apply_running_updates(&out.updates);
        ckpt.step += 1;
        losses.push(out.loss);
        observe(step, out.loss);
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        losses,
    })
}

/// Mean eval-mode loss over `episodes` fixed base-split episodes drawn from
/// `seed`. Used to compare checkpoints on the same held-out batch.
pub fn held_out_loss(
    model: &Model,
    dataset: &DatasetSplit,
    config: &RunConfig,
    seed: u64,
    episodes: usize,
) -> Result<f64> {
    let settings = config.model_settings();
    let mut total = 0.0;
    for e in 0..episodes as u64 {
        let mut rng = stream_rng(seed.wrapping_add(e), HOLDOUT_STREAM);
        let batch = sample_episode(dataset, Side::Base, &config.episode, &mut rng)?.to_batch(dataset);
        total += model.loss(&batch, &settings, Mode::Eval, None)?;
    }
    Ok(total / episodes as f64)
}
