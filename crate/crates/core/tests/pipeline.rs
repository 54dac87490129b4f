use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vesselseg::app::segment_image;
use vesselseg::classifier::{
    posterior_background, posterior_vessel, sample_training_set, train_bayes_model, BayesModel,
};
use vesselseg::gmm::{EmConfig, Gmm};
use vesselseg::metrics::{accuracy, confusion, dice, roc_curve, sensitivity, specificity};
use vesselseg::phantom::generate_phantom;
use vesselseg::pipeline::{average_stats, FeaturePipeline, StatsSource};
use vesselseg::postprocess::{
    combine_openings, directional_opening, median_filter_mask, postprocess_pipeline,
    remove_short_components, PostConfig, StructuringElement,
};
use vesselseg::preprocess::{local_adaptive_hist_eq, AheConfig};
use vesselseg::raster::{BinaryMask, GrayImage, RgbImage};

fn mask_strategy(max: usize) -> impl Strategy<Value = BinaryMask> {
    (4..max, 4..max).prop_flat_map(|(w, h)| {
        proptest::collection::vec(any::<bool>(), w * h)
            .prop_map(move |bits| BinaryMask::from_vec(w, h, bits).unwrap())
    })
}

fn phantom_post() -> PostConfig {
    PostConfig {
        opening_length: 5,
        ..PostConfig::default()
    }
}

/// Small model trained in memory on four phantoms.
fn phantom_model() -> (BayesModel, FeaturePipeline) {
    let pipeline = FeaturePipeline::default();
    let mut stacks = Vec::new();
    let mut stats = Vec::new();
    let mut masks = Vec::new();
    for seed in 0..4 {
        let (img, truth, fov) = generate_phantom(128, 128, 10, seed).unwrap();
        let intensity = pipeline.intensity_from_gray(&img, &fov).unwrap();
        let (stack, s) = pipeline.normalized_features(&intensity, &fov).unwrap();
        stacks.push(stack);
        stats.push(s);
        masks.push((truth, fov));
    }
    let inputs: Vec<_> = stacks
        .iter()
        .zip(&masks)
        .map(|(s, (t, f))| (s, t, f))
        .collect();
    let set = sample_training_set(&inputs, 10_000, 1).unwrap();
    let em = EmConfig {
        k_per_class: 5,
        restarts: 1,
        ..EmConfig::default()
    };
    let model = train_bayes_model(
        &set,
        &em,
        false,
        average_stats(&stats).unwrap(),
        pipeline.clone(),
    )
    .unwrap();
    (model, pipeline)
}

#[test]
fn phantom_segmentation_quality_and_empty_phantom() {
    let (model, pipeline) = phantom_model();
    let post = phantom_post();
    let (img, truth, fov) = generate_phantom(128, 128, 10, 100).unwrap();
    let seg = segment_image(
        &model,
        &pipeline,
        StatsSource::Model,
        &post,
        &RgbImage::from_gray(&img),
        &fov,
    )
    .unwrap();
    assert_eq!(seg.mask.dims(), img.dims());
    assert!(seg.mask.is_subset_of(&fov));
    let d = dice(&seg.mask, &truth).unwrap();
    assert!(d >= 0.8, "Dice {d}");

    let (img, truth, fov) = generate_phantom(128, 128, 0, 101).unwrap();
    assert_eq!(truth.count(), 0);
    let seg = segment_image(
        &model,
        &pipeline,
        StatsSource::Model,
        &post,
        &RgbImage::from_gray(&img),
        &fov,
    )
    .unwrap();
    let frac = seg.mask.count() as f64 / fov.count() as f64;
    assert!(frac < 0.01, "{frac} of the FOV marked as vessel");
}

#[test]
fn postprocessing_cleans_salt_noise() {
    let (_, truth, fov) = generate_phantom(160, 160, 12, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noisy = BinaryMask::from_fn(160, 160, |x, y| {
        truth.get(x, y) || rng.random::<f64>() < 0.01
    });
    // Element length scaled to the phantom's size, as in the phantom profile.
    let cleaned = postprocess_pipeline(&noisy, &fov, &phantom_post()).unwrap();
    let before = dice(&noisy, &truth).unwrap();
    let after = dice(&cleaned, &truth).unwrap();
    assert!(after >= before, "{after} < {before}");
}

#[test]
fn ground_truth_scores_perfectly() {
    let (_, truth, fov) = generate_phantom(96, 96, 8, 2).unwrap();
    let c = confusion(&truth, &truth, &fov).unwrap();
    assert_eq!(accuracy(&c).unwrap(), 1.0);
    assert_eq!(sensitivity(&c).unwrap(), 1.0);
    assert_eq!(specificity(&c).unwrap(), 1.0);
}

#[test]
fn posteriors_are_complementary() {
    let (model, _) = phantom_model();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let x: Vec<f64> = (0..model.dim())
            .map(|_| rng.random_range(-4.0..4.0))
            .collect();
        let pv = posterior_vessel(&model, &x).unwrap();
        let pb = posterior_background(&model, &x).unwrap();
        assert!((pv + pb - 1.0).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&pv));
    }
    assert!(posterior_vessel(&model, &[0.0]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn opening_axioms(m in mask_strategy(24), angle in 0.0f64..180.0, len in 0usize..6, drop in any::<u64>()) {
        let se = StructuringElement::line(angle, 2 * len + 1).unwrap();
        let open = directional_opening(&m, &se);
        prop_assert!(open.is_subset_of(&m));
        prop_assert_eq!(directional_opening(&open, &se), open.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(drop);
        let (w, h) = m.dims();
        let sub = BinaryMask::from_fn(w, h, |x, y| m.get(x, y) && rng.random::<bool>());
        prop_assert!(directional_opening(&sub, &se).is_subset_of(&open));
    }

    #[test]
    fn combined_openings_shrink(m in mask_strategy(24)) {
        let out = combine_openings(&m, &PostConfig::default()).unwrap();
        prop_assert!(out.is_subset_of(&m));
    }

    #[test]
    fn length_filter_keeps_components_whole(m in mask_strategy(30), min_len in 1.0f64..12.0) {
        let out = remove_short_components(&m, min_len);
        prop_assert!(out.is_subset_of(&m));
        // Any kept pixel's 8-neighbours in the input are kept as well.
        let (w, h) = m.dims();
        for y in 0..h as isize {
            for x in 0..w as isize {
                if !out.get_signed(x, y) {
                    continue;
                }
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        if m.get_signed(x + dx, y + dy) {
                            prop_assert!(out.get_signed(x + dx, y + dy));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn median_fixes_constant_masks(w in 1usize..20, h in 1usize..20, v in any::<bool>(), r in 1usize..4) {
        let m = BinaryMask::filled(w, h, v);
        prop_assert_eq!(median_filter_mask(&m, r), m);
    }

    #[test]
    fn pipeline_stays_in_fov(m in mask_strategy(30), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = m.dims();
        let fov = BinaryMask::from_fn(w, h, |_, _| rng.random::<f64>() < 0.7);
        let out = postprocess_pipeline(&m, &fov, &PostConfig::default()).unwrap();
        prop_assert!(out.is_subset_of(&fov));
    }

    #[test]
    fn ahe_depends_only_on_ranks(seed in any::<u64>(), window in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = GrayImage::from_fn(12, 10, |_, _| (rng.random_range(0..8) as f64) / 8.0);
        let shifted = img.map(|v| 0.1 + 0.5 * v.sqrt());
        let fov = BinaryMask::from_fn(12, 10, |_, _| rng.random::<f64>() < 0.8);
        let cfg = AheConfig { window: 2 * window + 1, fov_restricted: true };
        let a = local_adaptive_hist_eq(&img, &fov, &cfg).unwrap();
        let b = local_adaptive_hist_eq(&shifted, &fov, &cfg).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn roc_is_monotone(seed in any::<u64>(), n in 2usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = BinaryMask::from_fn(16, 16, |_, _| rng.random::<f64>() < 0.3);
        let prob = GrayImage::from_fn(16, 16, |_, _| rng.random::<f64>());
        let fov = BinaryMask::filled(16, 16, true);
        let roc = roc_curve(&prob, &truth, &fov, n).unwrap();
        prop_assert_eq!(roc.points.len(), n + 2);
        for w in roc.points.windows(2) {
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
        prop_assert!((0.0..=1.0).contains(&roc.auc));
    }

    #[test]
    fn mixture_density_ignores_component_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 3;
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let means: Vec<Vec<f64>> = (0..k).map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
        let covs: Vec<Vec<Vec<f64>>> = (0..k)
            .map(|_| {
                let a = rng.random_range(0.5..2.0);
                let b = rng.random_range(0.5..2.0);
                let c = rng.random_range(-0.3..0.3);
                vec![vec![a, c], vec![c, b]]
            })
            .collect();
        let Ok(g) = Gmm::new(weights, means, covs) else { return Ok(()); };
        let p = g.permuted(&[2, 0, 1]).unwrap();
        let x = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
        let (a, b) = (g.pdf(&x).unwrap(), p.pdf(&x).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
    }
}
