use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::eval::{evaluate, EvalOptions, EvalReport};
use super::train::train;
use crate::data::DatasetSplit;
use crate::error::Result;
use crate::metric::MetricKind;
use crate::parallel::map_with_workers;
use crate::tdm::PoolMode;

/// The SAM × QAM cells, baseline first.
pub const MODULE_GRID: [(bool, bool); 4] = [(false, false), (true, false), (false, true), (true, true)];

/// Which pooling and metric variants to cover, and how many cells to run
/// at once.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationPlan {
    pub poolings: Vec<PoolMode>,
    pub metrics: Vec<MetricKind>,
    pub workers: usize,
}

impl Default for AblationPlan {
    fn default() -> Self {
        AblationPlan {
            poolings: vec![PoolMode::Avg, PoolMode::Max],
            metrics: vec![MetricKind::SquaredEuclidean, MetricKind::Cosine],
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub sam: bool,
    pub qam: bool,
    pub pooling: PoolMode,
    pub metric: MetricKind,
    pub report: EvalReport,
}

/// One `ablation.csv` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub sam: bool,
    pub qam: bool,
    pub pooling: PoolMode,
    pub metric: MetricKind,
    pub mean: f64,
    pub half_width: f64,
}

impl AblationCell {
    pub fn row(&self) -> AblationRow {
        AblationRow {
            sam: self.sam,
            qam: self.qam,
            pooling: self.pooling,
            metric: self.metric,
            mean: self.report.mean_accuracy,
            half_width: self.report.half_width,
        }
    }
}

/// The run configuration of one grid cell.
pub fn cell_config(base: &RunConfig, sam: bool, qam: bool, pooling: PoolMode, metric: MetricKind) -> RunConfig {
    RunConfig {
        sam,
        qam,
        pooling,
        metric,
        ..base.clone()
    }
}

/// Trains and evaluates every SAM × QAM cell for each (pooling, metric)
/// pair, all with the configuration's seed. The all-off cell never reads
/// the pooling mode, so it is trained once per metric and repeated under
/// each pooling.
pub fn ablate(config: &RunConfig, dataset: &DatasetSplit, plan: &AblationPlan) -> Result<Vec<AblationCell>> {
    config.validate()?;
    let mut layout = Vec::new();
    let mut jobs: Vec<(bool, bool, PoolMode, MetricKind)> = Vec::new();
    for &metric in &plan.metrics {
        for &pooling in &plan.poolings {
            for &(sam, qam) in &MODULE_GRID {
                let key = if sam || qam {
                    (sam, qam, pooling, metric)
                } else {
                    (false, false, plan.poolings[0], metric)
                };
                let job = match jobs.iter().position(|j| *j == key) {
                    Some(i) => i,
                    None => {
                        jobs.push(key);
                        jobs.len() - 1
                    }
                };
                layout.push((sam, qam, pooling, metric, job));
            }
        }
    }
    let reports = map_with_workers(jobs.len(), plan.workers, |i| {
        let (sam, qam, pooling, metric) = jobs[i];
        let cfg = cell_config(config, sam, qam, pooling, metric);
        let trained = train(&cfg, dataset)?;
        evaluate(
            &trained.checkpoint,
            dataset,
            &EvalOptions::new(cfg.eval_episodes, cfg.seed),
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(layout
        .into_iter()
        .map(|(sam, qam, pooling, metric, job)| AblationCell {
            sam,
            qam,
            pooling,
            metric,
            report: reports[job].clone(),
        })
        .collect())
}

pub fn write_ablation_csv(cells: &[AblationCell], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for c in cells {
        w.serialize(c.row())?;
    }
    w.flush()?;
    Ok(())
}
