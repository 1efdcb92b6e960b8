//! End-to-end training-loop contracts on small synthetic worlds.

use ncal_core::loss::{total_loss, LossWeights, StreamBatches};
use ncal_core::model::{Adapter, Mapper, ResidualAdapter};
use ncal_core::numerics::RngState;
use ncal_core::optim::{
    gather_rows, sample_minibatches, train_calibration, training_rng, StreamToggles, TrainConfig,
};
use ncal_core::synth::{
    generate_world, pretrain_backbone, sample_dataset, DatasetBundle, DatasetSizes, WorldSpec,
};
use ncal_core::Error;

fn small_world() -> (ncal_core::synth::World, DatasetBundle) {
    let spec = WorldSpec {
        d_s: 24,
        d_t: 20,
        d_c: 4,
        k_res: 2,
        sigma_s: 0.1,
        sigma_t: 0.05,
        residual_scale: 2.0,
        seed: 11,
    };
    let world = generate_world(&spec).unwrap();
    let sizes = DatasetSizes {
        n_pretrain: 200,
        n_unpaired: 80,
        m_fewshot: 16,
        n_test: 30,
    };
    let mut rng = RngState::new(11).fork(0xda7a);
    let bundle = sample_dataset(&world, &sizes, &mut rng).unwrap();
    (world, bundle)
}

fn quick_config(n_iters: usize) -> TrainConfig {
    TrainConfig {
        anchor_batch: 8,
        semantic_batch: 16,
        n_iters,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_iterations_returns_adapter_unchanged() {
    let (world, bundle) = small_world();
    let bb = pretrain_backbone(&bundle.pretrain_source, &bundle.pretrain_target, None).unwrap();
    let adapter = Adapter::Mlp(ResidualAdapter::init(20, 16, &mut RngState::new(1)));
    let before = adapter.flatten();
    let (after, trace) = train_calibration(
        Some(&bb),
        adapter,
        &world.decoder,
        &bundle,
        &quick_config(0),
        StreamToggles::default(),
    )
    .unwrap();
    assert!(trace.is_empty());
    assert_eq!(after.flatten(), before);
}

#[test]
fn training_is_deterministic_and_freezes_backbone_and_decoder() {
    let (world, bundle) = small_world();
    let bb = pretrain_backbone(&bundle.pretrain_source, &bundle.pretrain_target, None).unwrap();
    let bb_bytes = bb.to_le_bytes();
    let dec_bytes = world.decoder.to_le_bytes();

    let run = || {
        let adapter = Adapter::Mlp(ResidualAdapter::init(20, 16, &mut RngState::new(1)));
        train_calibration(
            Some(&bb),
            adapter,
            &world.decoder,
            &bundle,
            &quick_config(60),
            StreamToggles::default(),
        )
        .unwrap()
    };
    let (a1, t1) = run();
    let (a2, t2) = run();
    assert_eq!(a1.flatten(), a2.flatten());
    assert_eq!(t1, t2);

    // Frozen contract: parameter bytes identical after training.
    assert_eq!(bb.to_le_bytes(), bb_bytes);
    assert_eq!(world.decoder.to_le_bytes(), dec_bytes);
}

#[test]
fn first_trace_entry_matches_loss_at_init() {
    let (world, bundle) = small_world();
    let bb = pretrain_backbone(&bundle.pretrain_source, &bundle.pretrain_target, None).unwrap();
    let adapter = Adapter::Mlp(ResidualAdapter::init(20, 16, &mut RngState::new(1)));
    let config = quick_config(1);

    // Replicate the trainer's first minibatch draw.
    let mut rng = training_rng(config.seed);
    let (anchor_idx, semantic_idx) = sample_minibatches(
        &mut rng,
        bundle.fewshot_source.rows(),
        bundle.unpaired_source.rows(),
        &config,
    );
    let ax = gather_rows(&bundle.fewshot_source, &anchor_idx);
    let at = gather_rows(&bundle.fewshot_target, &anchor_idx);
    let sx = gather_rows(&bundle.unpaired_source, &semantic_idx);
    let sc = gather_rows(&bundle.unpaired_embeddings, &semantic_idx);

    let mapper = Mapper::residual(&bb, &adapter).unwrap();
    let batches = StreamBatches {
        anchor: Some((&ax, &at)),
        semantic: Some((&sx, &sc)),
    };
    let expected = total_loss(&mapper, &world.decoder, &batches, &config.weights).unwrap();

    let (_, trace) = train_calibration(
        Some(&bb),
        adapter,
        &world.decoder,
        &bundle,
        &config,
        StreamToggles::default(),
    )
    .unwrap();
    assert_eq!(trace[0], expected);
}

#[test]
fn diverging_run_reports_non_finite_loss_with_iteration() {
    let (world, bundle) = small_world();
    let bb = pretrain_backbone(&bundle.pretrain_source, &bundle.pretrain_target, None).unwrap();
    let adapter = Adapter::Mlp(ResidualAdapter::init(20, 16, &mut RngState::new(1)));
    let config = TrainConfig {
        lr: 1e60,
        n_iters: 50,
        ..quick_config(50)
    };
    // Anchor stream only: the voxel MSE overflows cleanly once the adapter
    // blows up, without first tripping degenerate-vector checks in the
    // decoder path.
    match train_calibration(
        Some(&bb),
        adapter,
        &world.decoder,
        &bundle,
        &config,
        StreamToggles { anchor: true, semantic: false },
    ) {
        Err(Error::NonFiniteLoss { iter, .. }) => assert!(iter > 0),
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
}

#[test]
fn empty_anchor_set_runs_semantic_only() {
    let (world, bundle) = small_world();
    let bb = pretrain_backbone(&bundle.pretrain_source, &bundle.pretrain_target, None).unwrap();
    let empty = bundle.fewshot_prefix(0).unwrap();
    let adapter = Adapter::Mlp(ResidualAdapter::init(20, 16, &mut RngState::new(1)));
    let mut config = quick_config(20);
    config.weights.lambda = 0.0;
    let (_, trace) = train_calibration(
        Some(&bb),
        adapter,
        &world.decoder,
        &empty,
        &config,
        StreamToggles::default(),
    )
    .unwrap();
    assert_eq!(trace.len(), 20);
    for report in &trace {
        assert!(report.anchor_mse.is_none());
        assert!(report.anchor_nce.is_none());
        let sec = report.semantic_nce.expect("semantic stream active");
        assert!((report.total - sec).abs() <= 1e-12);
    }
}

#[test]
fn both_streams_disabled_is_rejected() {
    let (world, bundle) = small_world();
    let bb = pretrain_backbone(&bundle.pretrain_source, &bundle.pretrain_target, None).unwrap();
    let adapter = Adapter::Mlp(ResidualAdapter::init(20, 16, &mut RngState::new(1)));
    assert!(train_calibration(
        Some(&bb),
        adapter,
        &world.decoder,
        &bundle,
        &quick_config(5),
        StreamToggles {
            anchor: false,
            semantic: false
        },
    )
    .is_err());
}

#[test]
fn noise_free_tiny_problem_loss_collapses() {
    // Optimization sanity: on a noise-free world the training loss falls
    // below 10% of its initial value within 2000 iterations.
    let spec = WorldSpec {
        d_s: 24,
        d_t: 16,
        d_c: 8,
        k_res: 2,
        sigma_s: 0.0,
        sigma_t: 0.0,
        residual_scale: 8.0,
        seed: 4,
    };
    let world = generate_world(&spec).unwrap();
    let sizes = DatasetSizes {
        n_pretrain: 150,
        n_unpaired: 64,
        m_fewshot: 32,
        n_test: 10,
    };
    let mut rng = RngState::new(4).fork(0xda7a);
    let bundle = sample_dataset(&world, &sizes, &mut rng).unwrap();
    let bb = pretrain_backbone(&bundle.pretrain_source, &bundle.pretrain_target, None).unwrap();
    let adapter = Adapter::Mlp(ResidualAdapter::init(16, 32, &mut RngState::new(2)));
    // MSE-dominated weighting with a sharp temperature keeps the in-batch
    // contrastive floors far below the correctable part of the loss.
    let config = TrainConfig {
        lr: 1e-3,
        weights: ncal_core::loss::LossWeights { alpha: 50.0, lambda: 1.0, tau: 0.05 },
        anchor_batch: 16,
        semantic_batch: 16,
        n_iters: 2000,
        seed: 4,
        ..TrainConfig::default()
    };
    let (_, trace) = train_calibration(
        Some(&bb),
        adapter,
        &world.decoder,
        &bundle,
        &config,
        StreamToggles::default(),
    )
    .unwrap();
    let initial = trace.first().unwrap().total;
    let last_tenth: Vec<f64> = trace.iter().rev().take(200).map(|r| r.total).collect();
    let final_mean = last_tenth.iter().sum::<f64>() / last_tenth.len() as f64;
    assert!(
        final_mean < 0.10 * initial,
        "training loss {final_mean} did not fall below 10% of initial {initial}; first {:?} last {:?}",
        trace.first().unwrap(),
        trace.last().unwrap()
    );
}
