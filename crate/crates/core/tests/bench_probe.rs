// Scratch probe (removed before final): default-benchmark behavior.
use ncal_core::eval::{amplification_ratio, evaluate_mapper, EvalProtocol, TestSplit};
use ncal_core::model::{Adapter, Mapper, ResidualAdapter};
use ncal_core::numerics::{gaussian_sample, DenseMatrix, RngState};
use ncal_core::optim::{train_calibration, StreamToggles, TrainConfig};
use ncal_core::synth::{generate_world, pretrain_backbone, sample_dataset, DatasetSizes, WorldSpec};
use std::time::Instant;

#[test]
fn probe_benchmark() {
    let t0 = Instant::now();
    let spec = WorldSpec::default();
    let world = generate_world(&spec).unwrap();
    println!("world generated in {:?}", t0.elapsed());

    // Decoder anisotropy at a realistic operating point.
    let mut rng = RngState::new(555);
    let z = DenseMatrix::from_vec(1, spec.d_c, gaussian_sample(&mut rng, spec.d_c)).unwrap();
    let x0 = world.oracle_target(&z).unwrap();
    let mut ratios = Vec::new();
    for _ in 0..100 {
        let delta = gaussian_sample(&mut rng, spec.d_t);
        ratios.push(amplification_ratio(&world.decoder, x0.row(0), &delta).unwrap());
    }
    let rmax = ratios.iter().cloned().fold(f64::MIN, f64::max);
    let rmin = ratios.iter().cloned().fold(f64::MAX, f64::min);
    println!("amplification: min={rmin:.4} max={rmax:.4} ratio={:.3}", rmax / rmin);

    // Dataset + backbone.
    let t1 = Instant::now();
    let sizes = DatasetSizes::default();
    let mut drng = RngState::new(1).fork(0xda7a);
    let bundle = sample_dataset(&world, &sizes, &mut drng).unwrap();
    println!("dataset sampled in {:?}", t1.elapsed());
    let t2 = Instant::now();
    let bb = pretrain_backbone(&bundle.pretrain_source, &bundle.pretrain_target, None).unwrap();
    println!("backbone pretrained in {:?}", t2.elapsed());

    // Frozen metrics.
    let zero_ad = Adapter::Mlp(ResidualAdapter::init(spec.d_t, 256, &mut RngState::new(2)));
    let mapper = Mapper::residual(&bb, &zero_ad).unwrap();
    let test = TestSplit {
        source: &bundle.test_source,
        target: &bundle.test_target,
        embeddings: &bundle.test_embeddings,
    };
    let protocol = EvalProtocol { pool_size: 300, repeats: 30, seed: 7 };
    let t3 = Instant::now();
    let frozen = evaluate_mapper(&mapper, &world.decoder, &test, &protocol).unwrap();
    println!("eval in {:?}", t3.elapsed());
    println!("frozen: {frozen:?}");

    // Oracle ceiling: predictions = ground-truth targets.
    let oracle_pred = world.oracle_target(&bundle.test_latents).unwrap();
    let om = ncal_core::loss::mse_loss(&oracle_pred, &bundle.test_target).unwrap();
    println!("oracle voxel mse (noise floor): {om:.6}");

    // 64-shot calibration.
    let t4 = Instant::now();
    let config = TrainConfig { seed: 3, ..TrainConfig::default() };
    let init = Adapter::Mlp(ResidualAdapter::init(spec.d_t, 256, &mut RngState::new(2)));
    let (trained, trace) =
        train_calibration(Some(&bb), init, &world.decoder, &bundle, &config, StreamToggles::default())
            .unwrap();
    println!("training {} iters in {:?}", config.n_iters, t4.elapsed());
    println!(
        "loss first={:.4} last={:.4}",
        trace.first().unwrap().total,
        trace.last().unwrap().total
    );
    let mapper = Mapper::residual(&bb, &trained).unwrap();
    let calibrated = evaluate_mapper(&mapper, &world.decoder, &test, &protocol).unwrap();
    println!("calibrated: {calibrated:?}");
    println!("total probe time {:?}", t0.elapsed());
}
