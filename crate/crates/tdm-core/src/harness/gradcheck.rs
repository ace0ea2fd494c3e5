use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{stream_rng, EPISODE_STREAM, NOISE_STREAM};
use crate::data::{generate_dataset, sample_episode, EpisodeBatch, EpisodeSpec, Side, SyntheticSpec};
use crate::error::{Error, Result};
use crate::metric::Metric;
use crate::model::{Model, ModelSettings};
use crate::tdm::{PoolMode, TdmSettings};
use crate::tensor::gradcheck::{finite_diff_grad, relative_error};
use crate::tensor::{BackwardFault, Graph, Tensor};
use crate::Mode;

pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-6;
/// Below this magnitude the absolute tolerance applies instead.
pub const SMALL_GRAD: f64 = 1e-3;

/// A deliberately small model and episode for exhaustive gradient checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub channel_plan: Vec<usize>,
    pub image_size: usize,
    pub episode: EpisodeSpec,
    pub pooling: PoolMode,
    pub metric: Metric,
    pub alpha: f64,
    pub beta: f64,
    pub noise_amplitude: f64,
    /// Central-difference step.
    pub eps: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seed: 0,
            channel_plan: vec![3, 4, 4, 4, 8],
            image_size: 16,
            episode: EpisodeSpec {
                n_way: 2,
                k_shot: 1,
                n_query: 1,
            },
            pooling: PoolMode::Avg,
            metric: Metric::default(),
            alpha: 0.5,
            beta: 0.5,
            noise_amplitude: 0.2,
            eps: 1e-6,
        }
    }
}

impl GradCheckConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.episode;
        if self.channel_plan.last().is_some_and(|&c| c > 8) || self.image_size > 16 {
            return Err(Error::Config("gradient check needs C <= 8 and images <= 16x16".into()));
        }
        if (e.n_way, e.k_shot, e.n_query) != (2, 1, 1) {
            return Err(Error::Config("gradient check runs 2-way 1-shot with one query".into()));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config("eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Largest disagreement within one named parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub elements: usize,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub abs_error: f64,
    /// Whether every element of the group met the tolerance.
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: f64,
    /// Largest relative error among elements whose numeric gradient is at
    /// least [`SMALL_GRAD`] in magnitude.
    pub max_rel_error: f64,
    /// Largest absolute error among the remaining (small) elements.
    pub max_small_abs_error: f64,
    pub groups: Vec<GroupReport>,
    pub passed: bool,
}

/// Model, episode and settings for a gradient check. TDM output layers are
/// randomized so the whole graph carries non-trivial gradients.
pub fn grad_check_setup(cfg: &GradCheckConfig) -> Result<(Model, EpisodeBatch, ModelSettings)> {
    cfg.validate()?;
    let data = generate_dataset(&SyntheticSpec {
        num_classes: 4,
        images_per_class: 4,
        channels: cfg.channel_plan[0],
        height: cfg.image_size,
        width: cfg.image_size,
        glyph_size: 3,
        jitter: 1,
        templates: 2,
        seed: cfg.seed,
        ..SyntheticSpec::default()
    })?;
    let mut rng = stream_rng(cfg.seed, EPISODE_STREAM);
    let batch = sample_episode(&data, Side::Base, &cfg.episode, &mut rng)?.to_batch(&data);
    let mut model = Model::init(&cfg.channel_plan, cfg.seed, cfg.alpha, cfg.beta, cfg.noise_amplitude)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    model.tdm.intra.randomize_output(&mut init_rng);
    model.tdm.inter.randomize_output(&mut init_rng);
    model.tdm.query.randomize_output(&mut init_rng);
    let settings = ModelSettings {
        tdm: TdmSettings {
            pooling: cfg.pooling,
            sam_enabled: true,
            qam_enabled: true,
        },
        metric: cfg.metric,
        ..ModelSettings::default()
    };
    Ok((model, batch, settings))
}

fn analytic_gradients(
    model: &Model,
    batch: &EpisodeBatch,
    settings: &ModelSettings,
    noise_seed: u64,
    fault: Option<BackwardFault>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    g.set_fault(fault);
    let vars = model.bind(&mut g, true);
    let mut noise = stream_rng(noise_seed, NOISE_STREAM);
    let out = model.forward(&mut g, &vars, batch, settings, Mode::Train, Some(&mut noise))?;
    let grads = g.backward(out.loss)?;
    let list = vars
        .learnable()
        .into_iter()
        .map(|v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();
    Ok((g.value(out.loss).item(), list))
}

/// Compares reverse-mode gradients of the training-mode episode loss with
/// central differences over every learnable element. `fault` corrupts one
/// backward rule to show the check catches it.
pub fn grad_check_command(cfg: &GradCheckConfig, fault: Option<BackwardFault>) -> Result<GradCheckReport> {
    let report = grad_check_report(cfg, fault)?;
    if !report.passed {
        let worst = report
            .groups
            .iter()
            .filter(|g| !g.passed)
            .map(|g| {
                format!(
                    "{}[{}]: analytic {:e} vs numeric {:e}",
                    g.name, g.worst_index, g.analytic, g.numeric
                )
            })
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::ToleranceExceeded {
            max_rel_error: report.max_rel_error,
            worst,
        });
    }
    Ok(report)
}

/// Like [`grad_check_command`] but always returns the report.
pub fn grad_check_report(cfg: &GradCheckConfig, fault: Option<BackwardFault>) -> Result<GradCheckReport> {
    let (model, batch, settings) = grad_check_setup(cfg)?;
    let (loss, analytic) = analytic_gradients(&model, &batch, &settings, cfg.seed, fault)?;
    let names: Vec<String> = model.learnable().into_iter().map(|(n, _)| n).collect();
    let params: Vec<Tensor> = model.learnable().into_iter().map(|(_, t)| t.clone()).collect();
    let numeric = finite_diff_grad(
        |p| {
            let probe = model.with_learnable(p).expect("same shapes");
            let mut noise = stream_rng(cfg.seed, NOISE_STREAM);
            probe
                .loss(&batch, &settings, Mode::Train, Some(&mut noise))
                .unwrap_or(f64::NAN)
        },
        &params,
        cfg.eps,
    )?;

    let mut groups = Vec::with_capacity(names.len());
    let (mut max_rel, mut max_small_abs) = (0.0f64, 0.0f64);
    for ((name, a), n) in names.into_iter().zip(&analytic).zip(&numeric) {
        let mut worst: Option<(usize, f64, f64, f64, f64)> = None;
        let mut passed = true;
        for (i, (&ai, &ni)) in a.data().iter().zip(n.data()).enumerate() {
            let rel = relative_error(ai, ni);
            let abs = (ai - ni).abs();
            let small = ni.abs() < SMALL_GRAD;
            let ok = rel < REL_TOL || (small && abs < ABS_TOL);
            passed &= ok;
            if small {
                max_small_abs = max_small_abs.max(abs);
            } else {
                max_rel = max_rel.max(rel);
            }
            // Rank by how far past its own tolerance the element is.
            let badness = if small {
                (abs / ABS_TOL).min(rel / REL_TOL)
            } else {
                rel / REL_TOL
            };
            if worst.is_none_or(|w| badness > w.4) {
                worst = Some((i, ai, ni, rel, badness));
            }
        }
        let (i, ai, ni, rel, _) = worst.expect("non-empty tensor");
        groups.push(GroupReport {
            name,
            elements: a.len(),
            worst_index: i,
            analytic: ai,
            numeric: ni,
            rel_error: rel,
            abs_error: (ai - ni).abs(),
            passed,
        });
    }
    let passed = groups.iter().all(|g| g.passed);
    Ok(GradCheckReport {
        loss,
        max_rel_error: max_rel,
        max_small_abs_error: max_small_abs,
        groups,
        passed,
    })
}
