use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{validate_plan, DEFAULT_PLAN};
use crate::data::{generate_dataset, import_dataset, DatasetSplit, EpisodeSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::metric::{Metric, MetricKind};
use crate::model::{Head, ModelSettings};
use crate::optim::OptimizerKind;
use crate::tdm::{PoolMode, TdmSettings};

/// Where the images come from: generated on the fly or a dataset directory
/// written by `export_dataset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Path(PathBuf),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticSpec::default())
    }
}

impl DatasetSource {
    /// Relative paths resolve against `base` (normally the config file's
    /// directory).
    pub fn load(&self, base: Option<&Path>) -> Result<DatasetSplit> {
        match self {
            DatasetSource::Synthetic(spec) => generate_dataset(spec),
            DatasetSource::Path(p) => match base {
                Some(b) if p.is_relative() => import_dataset(&b.join(p)),
                _ => import_dataset(p),
            },
        }
    }
}

/// Everything that determines a run. Unknown keys in the JSON form are
/// rejected; missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub episode: EpisodeSpec,
    pub train_episodes: usize,
    pub eval_episodes: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub noise_amplitude: f64,
    pub pooling: PoolMode,
    pub metric: MetricKind,
    pub temperature: f64,
    pub channel_plan: Vec<usize>,
    pub sam: bool,
    pub qam: bool,
    pub dataset: DatasetSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            episode: EpisodeSpec {
                n_way: 5,
                k_shot: 1,
                n_query: 16,
            },
            train_episodes: 5000,
            eval_episodes: 2000,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            alpha: 0.5,
            beta: 0.5,
            noise_amplitude: 0.2,
            pooling: PoolMode::Avg,
            metric: MetricKind::SquaredEuclidean,
            temperature: 1.0,
            channel_plan: DEFAULT_PLAN.to_vec(),
            sam: true,
            qam: true,
            dataset: DatasetSource::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        if self.train_episodes == 0 || self.eval_episodes == 0 {
            return Err(Error::Config("episode counts must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be > 0",
                self.learning_rate
            )));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.noise_amplitude >= 0.0 && self.noise_amplitude.is_finite()) {
            return Err(Error::Config(format!(
                "noise amplitude {} must be >= 0",
                self.noise_amplitude
            )));
        }
        self.metric_settings().validate()?;
        validate_plan(&self.channel_plan)?;
        if let DatasetSource::Synthetic(spec) = &self.dataset {
            spec.validate()?;
            if spec.channels != self.channel_plan[0] {
                return Err(Error::Config(format!(
                    "dataset has {} channels, backbone expects {}",
                    spec.channels, self.channel_plan[0]
                )));
            }
        }
        Ok(())
    }

    pub fn metric_settings(&self) -> Metric {
        Metric {
            kind: self.metric,
            temperature: self.temperature,
        }
    }

    pub fn tdm_settings(&self) -> TdmSettings {
        TdmSettings {
            pooling: self.pooling,
            sam_enabled: self.sam,
            qam_enabled: self.qam,
        }
    }

    pub fn model_settings(&self) -> ModelSettings {
        ModelSettings {
            head: Head::Tdm,
            tdm: self.tdm_settings(),
            metric: self.metric_settings(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn partial_json_takes_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 9, "episode": {"n_way": 3, "k_shot": 2, "n_query": 4}}"#).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.episode.k_shot, 2);
        assert_eq!(c.train_episodes, 5000);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"sede": 1}"#), Err(Error::Config(_))));
        assert!(RunConfig::from_json(r#"{"dataset": {"synthetic": {"colour": 1}}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"episode": {"n_way": 5, "k_shot": 1, "n_query": 1, "x": 0}}"#).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_json(r#"{"train_episodes": 0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"alpha": 1.5}"#).is_err());
        assert!(RunConfig::from_json(r#"{"temperature": 0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"channel_plan": [3, 8]}"#).is_err());
    }

    #[test]
    fn dataset_path_form() {
        let c = RunConfig::from_json(r#"{"dataset": {"path": "data"}}"#).unwrap();
        assert_eq!(c.dataset, DatasetSource::Path("data".into()));
    }
}
