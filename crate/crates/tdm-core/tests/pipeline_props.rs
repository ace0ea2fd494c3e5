use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdm_core::backbone::{extract_features, init_backbone, FeatureMap};
use tdm_core::data::{generate_dataset, sample_episode, DatasetSplit, EpisodeSpec, Side, SyntheticSpec};
use tdm_core::harness::{compute_ci, evaluate, train_steps, Checkpoint, EvalOptions, RunConfig};
use tdm_core::metric::{classify_episode, distance_probabilities, Metric, MetricKind};
use tdm_core::model::{Head, ModelSettings};
use tdm_core::tdm::{apply_weights, inter_score, prototype, spatial_pool, PoolMode};
use tdm_core::tensor::Tensor;
use tdm_core::Mode;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 14,
        images_per_class: 20,
        height: 32,
        width: 32,
        ..SyntheticSpec::default()
    }
}

fn small_config() -> RunConfig {
    RunConfig {
        train_episodes: 6,
        eval_episodes: 12,
        channel_plan: vec![3, 8, 8, 8, 8],
        episode: EpisodeSpec::new(5, 1, 3).unwrap(),
        dataset: tdm_core::harness::DatasetSource::Synthetic(small_spec()),
        ..RunConfig::default()
    }
}

fn small_data() -> DatasetSplit {
    generate_dataset(&small_spec()).unwrap()
}

fn map_strategy(c: usize, h: usize, w: usize) -> impl Strategy<Value = FeatureMap> {
    prop::collection::vec(-2.0f64..2.0, c * h * w).prop_map(move |d| FeatureMap::from_vec(c, h, w, d).unwrap())
}

#[test]
fn sampled_episodes_are_well_formed() {
    let data = small_data();
    let spec = EpisodeSpec::new(5, 2, 4).unwrap();
    let base: HashSet<u32> = data.base_classes.iter().copied().collect();
    let novel: HashSet<u32> = data.novel_classes.iter().copied().collect();
    assert!(base.is_disjoint(&novel));
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    for i in 0..1000 {
        let side = if i % 2 == 0 { Side::Base } else { Side::Novel };
        let ep = sample_episode(&data, side, &spec, &mut rng).unwrap();
        let mut s = ep.support_labels.clone();
        s.sort_unstable();
        let mut q = ep.query_labels.clone();
        q.sort_unstable();
        let expect = |reps: usize| (0..5).flat_map(|l| std::iter::repeat_n(l, reps)).collect::<Vec<_>>();
        assert_eq!(s, expect(2));
        assert_eq!(q, expect(4));
        let support: HashSet<_> = ep.support.iter().collect();
        assert!(ep.query.iter().all(|r| !support.contains(r)));
        let allowed = if side == Side::Base { &base } else { &novel };
        assert!(ep.class_map.iter().all(|c| allowed.contains(c)));
        for (r, &l) in ep
            .support
            .iter()
            .zip(&ep.support_labels)
            .chain(ep.query.iter().zip(&ep.query_labels))
        {
            assert_eq!(r.class_id, ep.class_map[l]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn backbone_output_shape(seed in 0u64..1000, scale in 1usize..3, c4 in 1usize..6, batch in 1usize..3) {
        let plan = [2, 3, 4, 3, c4];
        let p = init_backbone(&plan, seed).unwrap();
        let side = 16 * scale;
        let images = Tensor::full(&[batch, 2, side, side], 0.25);
        let (maps, _) = extract_features(&p, &images, Mode::Eval).unwrap();
        prop_assert_eq!(maps.len(), batch);
        for m in maps {
            prop_assert_eq!(m.tensor().shape(), &[c4, scale, scale][..]);
        }
    }

    #[test]
    fn inter_score_never_drops_when_a_class_leaves(
        maps in prop::collection::vec(map_strategy(3, 2, 2), 3..6),
        mode in prop_oneof![Just(PoolMode::Avg), Just(PoolMode::Max)],
    ) {
        let pooled: Vec<_> = maps.iter().map(|m| spatial_pool(m, mode)).collect();
        let full = inter_score(&maps, &pooled, 0).unwrap();
        // The minimum over a subset of classes can only be larger.
        let last = maps.len() - 1;
        let mut reduced_maps = maps.clone();
        reduced_maps.pop();
        let mut reduced_pooled = pooled.clone();
        reduced_pooled.pop();
        let reduced = inter_score(&reduced_maps, &reduced_pooled, 0).unwrap();
        for (a, b) in full.0.iter().zip(&reduced.0) {
            prop_assert!(b >= a, "class {last} removal lowered {a} to {b}");
        }
    }

    #[test]
    fn weighting_commutes_with_prototype(
        shots in prop::collection::vec(map_strategy(4, 2, 3), 1..5),
        weight in prop::collection::vec(0.0f64..2.0, 4),
    ) {
        let lhs = apply_weights(&weight, &prototype(&shots).unwrap()).unwrap();
        let weighted: Vec<_> = shots.iter().map(|s| apply_weights(&weight, s).unwrap()).collect();
        let rhs = prototype(&weighted).unwrap();
        for (a, b) in lhs.tensor().data().iter().zip(rhs.tensor().data()) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn metric_scaling(
        protos in prop::collection::vec(map_strategy(3, 2, 2), 4),
        queries in prop::collection::vec(map_strategy(3, 2, 2), 3),
        lambda in 0.1f64..10.0,
    ) {
        let scaled = |m: &FeatureMap| {
            FeatureMap::new(Tensor::new(m.tensor().shape().to_vec(), m.tensor().data().iter().map(|v| v * lambda).collect()).unwrap()).unwrap()
        };
        let rows = |qs: &[FeatureMap]| -> Vec<Vec<FeatureMap>> {
            qs.iter().map(|q| vec![q.clone(); 4]).collect()
        };
        let sp: Vec<_> = protos.iter().map(scaled).collect();
        let sq: Vec<_> = queries.iter().map(scaled).collect();
        let cos = Metric { kind: MetricKind::Cosine, temperature: 1.0 };
        let a = classify_episode(&protos, &rows(&queries), &cos).unwrap();
        let b = classify_episode(&sp, &rows(&sq), &cos).unwrap();
        for (x, y) in a.probs.iter().flatten().zip(b.probs.iter().flatten()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
        let euc = Metric::default();
        let a = classify_episode(&protos, &rows(&queries), &euc).unwrap();
        let b = classify_episode(&sp, &rows(&sq), &euc).unwrap();
        prop_assert_eq!(a.predicted, b.predicted);
    }

    #[test]
    fn distance_shift_leaves_probabilities(
        d in prop::collection::vec(0.0f64..20.0, 15),
        row in 0usize..3,
        shift in -10.0f64..10.0,
        temperature in 0.5f64..4.0,
    ) {
        let base = Tensor::new(vec![3, 5], d.clone()).unwrap();
        let mut moved = d;
        moved[row * 5..row * 5 + 5].iter_mut().for_each(|v| *v += shift);
        let moved = Tensor::new(vec![3, 5], moved).unwrap();
        let (p, q) = (distance_probabilities(&base, temperature).unwrap(), distance_probabilities(&moved, temperature).unwrap());
        for (x, y) in p.data().iter().zip(q.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn identity_weights_match_plain_prototype_head(
        protos in prop::collection::vec(map_strategy(3, 2, 2), 3),
        queries in prop::collection::vec(map_strategy(3, 2, 2), 4),
    ) {
        let ones = vec![1.0; 3];
        let wp: Vec<_> = protos.iter().map(|p| apply_weights(&ones, p).unwrap()).collect();
        let wq: Vec<Vec<_>> = queries.iter().map(|q| vec![apply_weights(&ones, q).unwrap(); 3]).collect();
        let raw: Vec<Vec<_>> = queries.iter().map(|q| vec![q.clone(); 3]).collect();
        for metric in [Metric::default(), Metric { kind: MetricKind::Cosine, temperature: 2.0 }] {
            let a = classify_episode(&wp, &wq, &metric).unwrap();
            let b = classify_episode(&protos, &raw, &metric).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}

#[test]
fn eval_mode_extraction_is_pure() {
    let p = init_backbone(&[3, 4, 4, 4, 4], 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let images = Tensor::new(
        vec![2, 3, 16, 16],
        (0..1536).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let before = p.clone();
    let (a, sa) = extract_features(&p, &images, Mode::Eval).unwrap();
    let (b, _) = extract_features(&p, &images, Mode::Eval).unwrap();
    assert_eq!(a, b);
    assert!(sa.iter().all(Option::is_none));
    assert_eq!(p, before);
}

#[test]
fn ci_half_width_shrinks_when_samples_are_duplicated() {
    let acc = [0.2, 0.6, 0.4, 1.0, 0.8, 0.6];
    let (m1, h1) = compute_ci(&acc).unwrap();
    let doubled: Vec<f64> = acc.iter().chain(&acc).copied().collect();
    let (m2, h2) = compute_ci(&doubled).unwrap();
    assert!((m1 - m2).abs() < 1e-15);
    // s² scales by (n-1)/(2n-1)·2, so h2/h1 = sqrt((n-1)/(2n-1)).
    let n = acc.len() as f64;
    let expect = ((n - 1.0) / (2.0 * n - 1.0)).sqrt();
    assert!((h2 / h1 - expect).abs() < 1e-12);
    assert!(h2 < h1 / 2f64.sqrt());
}

#[test]
fn zero_steps_leave_initialization_untouched() {
    let cfg = small_config();
    let data = small_data();
    let start = Checkpoint::initial(&cfg).unwrap();
    let out = train_steps(start.clone(), &data, &cfg.model_settings(), 0, |_, _| {}).unwrap();
    assert_eq!(out.checkpoint.to_bytes().unwrap(), start.to_bytes().unwrap());
    assert_eq!(out.checkpoint.model, start.model);
    assert!(out.losses.is_empty());
}

#[test]
fn evaluation_does_not_mutate_the_checkpoint() {
    let cfg = small_config();
    let data = small_data();
    let ckpt = train_steps(
        Checkpoint::initial(&cfg).unwrap(),
        &data,
        &cfg.model_settings(),
        3,
        |_, _| {},
    )
    .unwrap()
    .checkpoint;
    let before = ckpt.clone();
    let mut opts = EvalOptions::new(5, 2);
    opts.workers = 3;
    evaluate(&ckpt, &data, &opts).unwrap();
    assert_eq!(ckpt.model, before.model);
    assert_eq!(ckpt.optimizer, before.optimizer);
}

#[test]
fn modules_off_trains_exactly_like_protonet() {
    let cfg = RunConfig {
        sam: false,
        qam: false,
        ..small_config()
    };
    let data = small_data();
    let settings = cfg.model_settings();
    let proto = ModelSettings {
        head: Head::ProtoNet,
        ..settings
    };
    let start = Checkpoint::initial(&cfg).unwrap();
    let a = train_steps(start.clone(), &data, &settings, 8, |_, _| {}).unwrap();
    let b = train_steps(start, &data, &proto, 8, |_, _| {}).unwrap();
    let bits = |l: &[f64]| l.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.losses), bits(&b.losses));
    assert_eq!(a.checkpoint.model.backbone, b.checkpoint.model.backbone);
}
