//! Acceptance criteria AC-1 through AC-10.
//!
//! Runs as a plain binary so every criterion prints exactly one
//! `PASS`/`FAIL` line. Pass criterion names (e.g. `AC-3 AC-7`) as arguments
//! to run a subset.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdm_core::backbone::FeatureMap;
use tdm_core::data::{generate_dataset, sample_episode, DatasetSplit, EpisodeSpec, Side, SyntheticSpec};
use tdm_core::harness::{
    cell_config, compute_ci, evaluate, evaluate_model, grad_check_command, grad_check_report, stream_rng, train,
    Checkpoint, EvalOptions, GradCheckConfig, RunConfig, EPISODE_STREAM,
};
use tdm_core::metric::{classify_episode, Metric, MetricKind};
use tdm_core::model::{Head, Model, ModelSettings};
use tdm_core::tdm::{
    apply_weights, fc_block_forward, init_tdm, inter_score, intra_score, prototype, spatial_pool, support_weights,
    task_weights, PoolMode, ScoreVector, TdmParams,
};
use tdm_core::tensor::{BackwardFault, Tensor};
use tdm_core::{Error, Mode};

struct Outcome {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn default_dataset() -> DatasetSplit {
    generate_dataset(&SyntheticSpec::default()).expect("default dataset")
}

fn episode_batch(data: &DatasetSplit, side: Side, spec: &EpisodeSpec, seed: u64) -> tdm_core::data::EpisodeBatch {
    let mut rng = stream_rng(seed, EPISODE_STREAM);
    sample_episode(data, side, spec, &mut rng).unwrap().to_batch(data)
}

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    let data = (0..c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
    FeatureMap::from_vec(c, h, w, data).unwrap()
}

/// TDM parameters with every output layer randomized so no weight is
/// trivially one.
fn random_tdm(c: usize, seed: u64, alpha: f64, beta: f64) -> TdmParams {
    let mut p = init_tdm(c, seed, alpha, beta, 0.2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    p.intra.randomize_output(&mut rng);
    p.inter.randomize_output(&mut rng);
    p.query.randomize_output(&mut rng);
    p
}

fn ac1() -> Outcome {
    let start = Instant::now();
    let cfg = GradCheckConfig::default();
    let report = grad_check_report(&cfg, None).unwrap();
    let elapsed = start.elapsed();
    let failing: Vec<&str> = report
        .groups
        .iter()
        .filter(|g| !g.passed)
        .map(|g| g.name.as_str())
        .collect();
    let caught = matches!(
        grad_check_command(&cfg, Some(BackwardFault::TanhDerivative)),
        Err(Error::ToleranceExceeded { .. })
    );
    verdict(
        report.passed && report.max_rel_error < 1e-4 && report.max_small_abs_error < 1e-6 && caught
            && elapsed < Duration::from_secs(120),
        format!(
            "{} groups, max rel {:.2e}, max small-grad abs {:.2e}, failing {failing:?}, tanh fault caught {caught}, {:.1}s",
            report.groups.len(),
            report.max_rel_error,
            report.max_small_abs_error,
            elapsed.as_secs_f64()
        ),
    )
}

fn brute_pool(m: &FeatureMap, mode: PoolMode) -> Vec<f64> {
    let (c, h, w) = (m.channels(), m.height(), m.width());
    let d = m.tensor().data();
    let mut out = vec![0.0; h * w];
    for (p, o) in out.iter_mut().enumerate() {
        let vals = (0..c).map(|ch| d[ch * h * w + p]);
        *o = match mode {
            PoolMode::Avg => vals.sum::<f64>() / c as f64,
            PoolMode::Max => vals.fold(f64::NEG_INFINITY, f64::max),
        };
    }
    out
}

fn brute_deviation(m: &FeatureMap, pooled: &[f64]) -> Vec<f64> {
    let (c, h, w) = (m.channels(), m.height(), m.width());
    let d = m.tensor().data();
    let mut out = vec![0.0; c];
    for (ch, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                let diff = d[(ch * h + y) * w + x] - pooled[y * w + x];
                acc += diff * diff;
            }
        }
        *o = acc / (h * w) as f64;
    }
    out
}

fn ac2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let (c, h, w, n) = (
            rng.random_range(1..=8),
            rng.random_range(1..=4),
            rng.random_range(1..=4),
            rng.random_range(2..=5),
        );
        let mode = if case % 2 == 0 { PoolMode::Avg } else { PoolMode::Max };
        let maps: Vec<FeatureMap> = (0..n).map(|_| random_map(&mut rng, c, h, w)).collect();
        let pooled: Vec<_> = maps.iter().map(|m| spatial_pool(m, mode)).collect();
        for (i, m) in maps.iter().enumerate() {
            let own = brute_pool(m, mode);
            let got = intra_score(m, &pooled[i]).unwrap();
            for (a, b) in got.0.iter().zip(brute_deviation(m, &own)) {
                worst = worst.max((a - b).abs());
            }
            let mut expect = vec![f64::INFINITY; c];
            for (j, other) in maps.iter().enumerate() {
                if j == i {
                    continue;
                }
                let dev = brute_deviation(m, &brute_pool(other, mode));
                for (e, d) in expect.iter_mut().zip(dev) {
                    *e = e.min(d);
                }
            }
            let ScoreVector(inter) = inter_score(&maps, &pooled, i).unwrap();
            for (a, b) in inter.iter().zip(&expect) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst <= 1e-10 && elapsed < Duration::from_secs(10),
        format!(
            "max deviation {worst:.2e} over 100 instances, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn ac3(data: &DatasetSplit) -> Outcome {
    let model = Model::init(&tdm_core::backbone::DEFAULT_PLAN, 3, 0.5, 0.5, 0.2).unwrap();
    let spec = EpisodeSpec::new(5, 1, 16).unwrap();
    let tdm_head = ModelSettings::default();
    let proto_head = ModelSettings {
        head: Head::ProtoNet,
        ..tdm_head
    };
    let mut mismatches = 0;
    for e in 0..100 {
        let batch = episode_batch(data, Side::Novel, &spec, 500 + e);
        let (a, _) = model.predict(&batch, &tdm_head).unwrap();
        let (b, _) = model.predict(&batch, &proto_head).unwrap();
        let same = a.predicted == b.predicted
            && a.probs
                .iter()
                .flatten()
                .zip(b.probs.iter().flatten())
                .all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            mismatches += 1;
        }
    }
    verdict(
        mismatches == 0,
        format!("{mismatches} of 100 episodes differ from the ProtoNet head"),
    )
}

fn ac4(data: &DatasetSplit) -> Outcome {
    // (a) and (b): a model whose TDM blocks all emit non-trivial weights.
    let mut model = Model::init(&tdm_core::backbone::DEFAULT_PLAN, 4, 0.5, 0.5, 0.2).unwrap();
    model.tdm = random_tdm(model.tdm.channels(), 4, 0.5, 0.5);
    let spec = EpisodeSpec::new(5, 1, 16).unwrap();
    let settings = ModelSettings::default();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut worst_sum = 0.0f64;
    for e in 0..1000 {
        let batch = episode_batch(data, Side::Novel, &spec, 10_000 + e);
        let w = model.episode_weights(&batch, &settings.tdm).unwrap();
        let all = [
            w.w_intra.as_ref(),
            w.w_inter.as_ref(),
            Some(&w.w_support),
            Some(&w.w_query),
            Some(&w.w_task),
        ];
        for t in all.into_iter().flatten() {
            for &v in t.data() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        let (pred, _) = model.predict(&batch, &settings).unwrap();
        for row in &pred.probs {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let a = lo > 0.0 && hi < 2.0;
    let b = worst_sum <= 1e-9;

    // (c) prototype and channel weighting commute.
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst_comm = 0.0f64;
    for _ in 0..100 {
        let (c, h, w, k) = (
            rng.random_range(1..=8),
            rng.random_range(1..=4),
            rng.random_range(1..=4),
            rng.random_range(1..=5),
        );
        let shots: Vec<FeatureMap> = (0..k).map(|_| random_map(&mut rng, c, h, w)).collect();
        let weight: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..2.0)).collect();
        let lhs = apply_weights(&weight, &prototype(&shots).unwrap()).unwrap();
        let weighted: Vec<FeatureMap> = shots.iter().map(|s| apply_weights(&weight, s).unwrap()).collect();
        let rhs = prototype(&weighted).unwrap();
        for (x, y) in lhs.tensor().data().iter().zip(rhs.tensor().data()) {
            worst_comm = worst_comm.max((x - y).abs());
        }
    }
    let c_ok = worst_comm <= 1e-10;

    // (d) endpoint reductions are exact.
    let ch = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let scores = |rng: &mut ChaCha8Rng| -> Vec<ScoreVector> {
        (0..5)
            .map(|_| ScoreVector((0..ch).map(|_| rng.random_range(0.0..3.0)).collect()))
            .collect()
    };
    let (intra, inter) = (scores(&mut rng), scores(&mut rng));
    let as_tensor =
        |s: &[ScoreVector]| Tensor::new(vec![s.len(), ch], s.iter().flat_map(|v| v.0.clone()).collect()).unwrap();
    let mut d_ok = true;
    for alpha in [0.0, 1.0] {
        let p = random_tdm(ch, 46, alpha, 0.5);
        let ws = support_weights(&p, &intra, &inter, Mode::Eval).unwrap();
        let branch = if alpha == 1.0 {
            fc_block_forward(&p.intra, &as_tensor(&intra), Mode::Eval).unwrap()
        } else {
            fc_block_forward(&p.inter, &as_tensor(&inter), Mode::Eval).unwrap()
        };
        d_ok &= ws.concat() == branch.data();
    }
    let w_support: Vec<Vec<f64>> = (0..5)
        .map(|_| (0..ch).map(|_| rng.random_range(0.1..1.9)).collect())
        .collect();
    let w_query: Vec<f64> = (0..ch).map(|_| rng.random_range(0.1..1.9)).collect();
    for beta in [0.0, 1.0] {
        let p = random_tdm(ch, 47, 0.5, beta);
        let wt = task_weights(&p, &w_support, &w_query, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (i, row) in wt.iter().enumerate() {
            let expect = if beta == 1.0 { &w_support[i] } else { &w_query };
            d_ok &= row == expect;
        }
    }
    verdict(
        a && b && c_ok && d_ok,
        format!(
            "(a) weights in [{lo:.4}, {hi:.4}] over 1000 episodes; (b) max |row sum - 1| {worst_sum:.1e}; \
             (c) max commutation gap {worst_comm:.1e}; (d) endpoints exact {d_ok}"
        ),
    )
}

/// Per-cell training and evaluation for AC-5.
fn ac5(data: &DatasetSplit) -> Outcome {
    let base = RunConfig::default();
    let cells = [(false, false), (true, false), (false, true), (true, true)];
    let mut results = Vec::new();
    let mut slowest = Duration::ZERO;
    for &(sam, qam) in &cells {
        let cfg = cell_config(&base, sam, qam, PoolMode::Avg, MetricKind::SquaredEuclidean);
        let start = Instant::now();
        let trained = train(&cfg, data).unwrap();
        let mut opts = EvalOptions::new(cfg.eval_episodes, cfg.seed);
        opts.workers = 1;
        let report = evaluate(&trained.checkpoint, data, &opts).unwrap();
        let elapsed = start.elapsed();
        slowest = slowest.max(elapsed);
        println!(
            "    AC-5 cell sam={sam} qam={qam}: {:.2} +- {:.2} ({} train / {} eval episodes, {:.0}s)",
            report.mean_accuracy,
            report.half_width,
            cfg.train_episodes,
            cfg.eval_episodes,
            elapsed.as_secs_f64()
        );
        results.push(report);
    }
    let (b, s, q, f) = (&results[0], &results[1], &results[2], &results[3]);
    let margin = f.mean_accuracy - b.mean_accuracy;
    let needed = f.half_width + b.half_width;
    let full_ok = margin > needed;
    let within = |x: &tdm_core::harness::EvalReport| x.mean_accuracy + x.half_width + b.half_width >= b.mean_accuracy;
    let (sam_ok, qam_ok) = (within(s), within(q));
    let time_ok = slowest < Duration::from_secs(30 * 60);
    verdict(
        full_ok && sam_ok && qam_ok && time_ok,
        format!(
            "full - baseline = {margin:+.2} (needs > {needed:.2}); SAM-only {:+.2}, QAM-only {:+.2} vs baseline; \
             slowest cell {:.0}s",
            s.mean_accuracy - b.mean_accuracy,
            q.mean_accuracy - b.mean_accuracy,
            slowest.as_secs_f64()
        ),
    )
}

fn ac6(data: &DatasetSplit) -> Outcome {
    let cfg = RunConfig {
        train_episodes: 8,
        eval_episodes: 40,
        seed: 6,
        ..RunConfig::default()
    };
    let run = |workers: usize| {
        let trained = train(&cfg, data).unwrap();
        let mut opts = EvalOptions::new(cfg.eval_episodes, cfg.seed);
        opts.workers = workers;
        let report = evaluate(&trained.checkpoint, data, &opts).unwrap();
        let eval_json = serde_json::to_vec_pretty(&report.summary(&cfg)).unwrap();
        (trained.checkpoint.to_bytes().unwrap(), eval_json, report)
    };
    let (ck1, ev1, r1) = run(1);
    let (ck2, ev2, _) = run(1);
    let (_, ev4, r4) = run(4);
    let ok = ck1 == ck2 && ev1 == ev2 && ev1 == ev4 && r1.per_episode == r4.per_episode;
    verdict(
        ok,
        format!(
            "checkpoints identical {}, eval.json identical {}, 4-worker report identical {}",
            ck1 == ck2,
            ev1 == ev2,
            ev1 == ev4 && r1 == r4
        ),
    )
}

fn ac7() -> Outcome {
    let (mean, half) = compute_ci(&[0.5, 0.5, 1.0, 1.0]).unwrap();
    // s = sqrt(4 * 0.25^2 / 3) = 0.288675; 1.96 * s / 2 = 0.282902
    verdict(
        (mean - 0.75).abs() < 1e-12 && (half - 0.2829).abs() < 1e-4,
        format!("mean {mean}, half-width {half:.6}"),
    )
}

fn ac8(data: &DatasetSplit) -> Outcome {
    let cfg = RunConfig {
        train_episodes: 3,
        ..RunConfig::default()
    };
    let ckpt = train(&cfg, data).unwrap().checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.tdmc");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let f32_exact = |a: &Tensor, b: &Tensor| {
        a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| f64::from(*x as f32) == *y)
    };
    let model_ok = ckpt
        .model
        .tensors()
        .iter()
        .zip(loaded.model.tensors())
        .all(|((n1, _, a), (n2, _, b))| *n1 == n2 && f32_exact(a, b));
    let opt_ok = ckpt
        .optimizer
        .m
        .iter()
        .zip(&loaded.optimizer.m)
        .all(|(a, b)| f32_exact(a, b))
        && ckpt
            .optimizer
            .v
            .iter()
            .zip(&loaded.optimizer.v)
            .all(|(a, b)| f32_exact(a, b))
        && ckpt.optimizer.step == loaded.optimizer.step
        && loaded.step == ckpt.step
        && loaded.config == ckpt.config;
    let resaved = loaded.to_bytes().unwrap() == std::fs::read(&path).unwrap();

    let bytes = std::fs::read(&path).unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[..4].copy_from_slice(b"XXXX");
    let mut bad_version = bytes.clone();
    bad_version[4..8].copy_from_slice(&99u32.to_le_bytes());
    let truncated = &bytes[..bytes.len() - 8];
    let e1 = matches!(Checkpoint::from_bytes(&bad_magic), Err(Error::BadMagic(_)));
    let e2 = matches!(Checkpoint::from_bytes(&bad_version), Err(Error::UnsupportedVersion(99)));
    let e3 = matches!(Checkpoint::from_bytes(truncated), Err(Error::TruncatedPayload { .. }));
    verdict(
        model_ok && opt_ok && resaved && e1 && e2 && e3,
        format!(
            "params f32-exact {model_ok}, optimizer/step/config {opt_ok}, re-save identical {resaved}; \
             BadMagic {e1}, UnsupportedVersion {e2}, TruncatedPayload {e3}"
        ),
    )
}

fn ac9(data: &DatasetSplit) -> Outcome {
    let cfg = RunConfig {
        train_episodes: 5,
        eval_episodes: 20,
        metric: MetricKind::Cosine,
        ..RunConfig::default()
    };
    let trained = train(&cfg, data).unwrap();
    let losses_finite = trained.losses.iter().all(|l| l.is_finite());
    let report = evaluate(&trained.checkpoint, data, &EvalOptions::new(cfg.eval_episodes, 9)).unwrap();
    let pipeline_ok = losses_finite && report.mean_accuracy.is_finite();

    let model = &trained.checkpoint.model;
    let spec = EpisodeSpec::new(5, 1, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut worst_cos, mut argmax_changes) = (0.0f64, 0usize);
    for e in 0..50 {
        let batch = episode_batch(data, Side::Novel, &spec, 900 + e);
        let protos = model.features(&batch.support).unwrap();
        let queries = model.features(&batch.query).unwrap();
        let c = protos[0].channels();
        let weights: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..c).map(|_| rng.random_range(0.05..1.95)).collect())
            .collect();
        let build = |lambda: f64| {
            let scale = |m: &FeatureMap| {
                let t = m.tensor();
                FeatureMap::new(Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * lambda).collect()).unwrap())
                    .unwrap()
            };
            let ap: Vec<FeatureMap> = protos
                .iter()
                .zip(&weights)
                .map(|(p, w)| apply_weights(w, &scale(p)).unwrap())
                .collect();
            let aq: Vec<Vec<FeatureMap>> = queries
                .iter()
                .map(|q| weights.iter().map(|w| apply_weights(w, &scale(q)).unwrap()).collect())
                .collect();
            (ap, aq)
        };
        let (p1, q1) = build(1.0);
        let (p3, q3) = build(3.0);
        let cos = Metric {
            kind: MetricKind::Cosine,
            temperature: 1.0,
        };
        let euc = Metric::default();
        let a = classify_episode(&p1, &q1, &cos).unwrap();
        let b = classify_episode(&p3, &q3, &cos).unwrap();
        for (x, y) in a.probs.iter().flatten().zip(b.probs.iter().flatten()) {
            worst_cos = worst_cos.max((x - y).abs());
        }
        let a = classify_episode(&p1, &q1, &euc).unwrap();
        let b = classify_episode(&p3, &q3, &euc).unwrap();
        argmax_changes += a.predicted.iter().zip(&b.predicted).filter(|(x, y)| x != y).count();
    }
    verdict(
        pipeline_ok && worst_cos <= 1e-9 && argmax_changes == 0,
        format!(
            "cosine run: {:.2}% over {} episodes; lambda=3 max cosine prob change {worst_cos:.1e}, \
             euclidean argmax changes {argmax_changes}",
            report.mean_accuracy, report.episodes
        ),
    )
}

fn ac10(data: &DatasetSplit) -> Outcome {
    let model = Model::init(&tdm_core::backbone::DEFAULT_PLAN, 10, 0.5, 0.5, 0.2).unwrap();
    let spec = EpisodeSpec::new(5, 1, 16).unwrap();
    let mut opts = EvalOptions::new(2000, 10);
    opts.randomize_labels = true;
    let report = evaluate_model(&model, &ModelSettings::default(), &spec, data, &opts).unwrap();
    verdict(
        (report.mean_accuracy - 20.0).abs() <= 2.0,
        format!(
            "{:.2}% +- {:.2} over {} label-randomized episodes",
            report.mean_accuracy, report.half_width, report.episodes
        ),
    )
}

type Criterion<'a> = (&'a str, Box<dyn Fn() -> Outcome + 'a>);

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with("AC-")).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| f == name);
    let data = default_dataset();
    let criteria: Vec<Criterion<'_>> = vec![
        ("AC-1", Box::new(ac1)),
        ("AC-2", Box::new(ac2)),
        ("AC-3", Box::new(|| ac3(&data))),
        ("AC-4", Box::new(|| ac4(&data))),
        ("AC-5", Box::new(|| ac5(&data))),
        ("AC-6", Box::new(|| ac6(&data))),
        ("AC-7", Box::new(ac7)),
        ("AC-8", Box::new(|| ac8(&data))),
        ("AC-9", Box::new(|| ac9(&data))),
        ("AC-10", Box::new(|| ac10(&data))),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        if !wanted(name) {
            continue;
        }
        let start = Instant::now();
        let out = run();
        let tag = if out.passed { "PASS" } else { "FAIL" };
        println!("{tag} {name} ({:.1}s): {}", start.elapsed().as_secs_f64(), out.detail);
        if !out.passed {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
