//! End-to-end library pipeline: generate, split, train, checkpoint, explain.

use mvx_core::evalx::pointing_game;
use mvx_core::explainer::{perturb, ExplainParams, ExplainerBundle, Method};
use mvx_core::mvarch::{build_model, ArchKind, ModelConfig, MultiViewModel};
use mvx_core::mvcore::{load_dataset, split_dataset, MultiViewSchema};
use mvx_core::synthgen::{generate, load_masks, write_synthetic, SyntheticSpec};
use mvx_core::train::{evaluate_model, train_model, TrainConfig};
use mvx_core::MvError;

fn separable(n: usize) -> SyntheticSpec {
    SyntheticSpec {
        schema: MultiViewSchema::foam_default(32, 32),
        n_samples: n,
        defect_intensity: 1.0,
        texture_noise_sigma: 0.0,
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn csv_fits_the_separable_set_and_loss_falls() {
    let ds = generate(&separable(8)).unwrap().dataset;
    let mut model = build_model(ArchKind::Csv, &ds.schema, ModelConfig::default()).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        learning_rate: 1e-3,
        ..Default::default()
    };
    let r = train_model(&mut model, &ds, None, &cfg).unwrap();
    assert_eq!(r.final_train_accuracy, Some(1.0));
    let first: f64 = r.train_loss[..10].iter().sum();
    let last: f64 = r.train_loss[20..].iter().sum();
    assert!(last < first, "{first} -> {last}");
    assert!(r.test_acc.is_empty() && r.final_test_accuracy.is_none());
}

#[test]
fn written_dataset_trains_and_checkpoint_reproduces_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        schema: MultiViewSchema::foam_default(16, 16),
        n_samples: 20,
        seed: 4,
        ..Default::default()
    };
    write_synthetic(&generate(&spec).unwrap(), dir.path()).unwrap();
    let ds = load_dataset(dir.path(), &spec.schema).unwrap();
    assert_eq!(load_masks(dir.path(), &ds).unwrap().len(), 10);

    let (train, test) = split_dataset(&ds, 0.7, 4).unwrap();
    for kind in ArchKind::ALL {
        let mut model = build_model(
            kind,
            &ds.schema,
            ModelConfig {
                seed: 4,
                ..Default::default()
            },
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            ..Default::default()
        };
        let report = train_model(&mut model, &train, Some(&test), &cfg).unwrap();
        assert_eq!(report.train_loss.len(), 2);
        let ckpt = dir.path().join(format!("ckpt_{kind}"));
        model.save_checkpoint(&ckpt).unwrap();
        let loaded = MultiViewModel::load_checkpoint(&ckpt).unwrap();
        assert_eq!(loaded.weight_hash(), model.weight_hash());
        let eval = evaluate_model(&loaded, &test).unwrap();
        assert_eq!(Some(eval.accuracy), report.final_test_accuracy);
        assert_eq!(eval.auc, report.final_test_auc);
    }
}

#[test]
fn explanations_point_at_planted_defects_more_often_than_chance() {
    let spec = SyntheticSpec {
        schema: MultiViewSchema::foam_default(32, 32),
        n_samples: 60,
        seed: 21,
        ..Default::default()
    };
    let data = generate(&spec).unwrap();
    let mut model = build_model(
        ArchKind::Cdv,
        &spec.schema,
        ModelConfig {
            seed: 2,
            ..Default::default()
        },
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 15,
        learning_rate: 1e-3,
        ..Default::default()
    };
    train_model(&mut model, &data.dataset, None, &cfg).unwrap();
    let before: Vec<String> = model.extractors.iter().map(|e| e.weight_hash()).collect();
    let mut bundle = ExplainerBundle::from_model(&model);
    bundle
        .train_heads(
            &data.dataset,
            &TrainConfig {
                epochs: 30,
                learning_rate: 1e-3,
                ..Default::default()
            },
        )
        .unwrap();
    assert_eq!(bundle.heads.len(), 5);
    let after: Vec<String> = bundle.extractors.iter().map(|e| e.weight_hash()).collect();
    assert_eq!(before, after);

    let params = ExplainParams {
        segments: mvx_core::explainer::SegmentParams {
            num_segments: 16,
            ..Default::default()
        },
        ..Default::default()
    };
    let positive = spec.schema.positive_class();
    let mut hits = 0;
    for ((id, v), mask) in data.masks.iter().take(12) {
        let sample = data.dataset.sample(id).unwrap();
        let (map, seg) = bundle
            .explain_view(&sample.views, *v, Method::KernelShap, Some(positive), &params)
            .unwrap();
        assert_eq!(seg.labels.len(), 32 * 32);
        // efficiency: scores sum to f(view) - f(all segments at baseline)
        let image = &sample.views[*v];
        let f = bundle.view_model(*v).unwrap();
        let blank = perturb(
            image,
            &seg,
            &vec![false; seg.num_segments],
            &params.baseline.values(image),
        );
        let delta = f(image).unwrap()[positive] - f(&blank).unwrap()[positive];
        let total: f64 = map.per_segment.iter().sum();
        assert!((total - delta).abs() <= 1e-9, "{total} vs {delta}");
        hits += usize::from(pointing_game(&map.per_pixel, 32, 32, mask).unwrap());
    }
    // a random pixel lands in a dilated defect about a fifth of the time
    assert!(hits >= 4, "{hits}/12");
}

#[test]
fn exact_shapley_refuses_large_segmentations_before_work() {
    let schema = MultiViewSchema::foam_default(16, 16);
    let model = build_model(ArchKind::Csv, &schema, ModelConfig::default()).unwrap();
    let bundle = ExplainerBundle::from_model(&model);
    let views = generate(&SyntheticSpec {
        schema,
        n_samples: 2,
        ..Default::default()
    })
    .unwrap()
    .dataset
    .samples[0]
        .views
        .clone();
    // heads are untrained, so anything past the guard would fail differently
    let err = bundle
        .explain_view(&views, 0, Method::ExactShapley, None, &ExplainParams::default())
        .unwrap_err();
    assert!(matches!(err, MvError::TooManySegments { .. }), "{err}");
    let err = bundle
        .explain_view(&views, 0, Method::Lime, None, &ExplainParams::default())
        .unwrap_err();
    assert!(matches!(err, MvError::UntrainedHead(_)), "{err}");
}
