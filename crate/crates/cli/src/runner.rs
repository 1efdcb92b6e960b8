//! End-to-end run orchestration: world generation, pretraining, variant
//! wiring, calibration, evaluation, and the sweep/ablation grids.

use crate::config::{RunConfig, Variant};
use crate::results::ResultRow;
use crate::{CliError, CliResult};
use ncal_core::eval::{evaluate_mapper, MetricsRecord, TestSplit};
use ncal_core::model::{Adapter, FrozenDecoder, LinearAdapter, LinearBackbone, Mapper, ResidualAdapter};
use ncal_core::numerics::RngState;
use ncal_core::optim::{train_calibration, StreamToggles};
use ncal_core::synth::{generate_world, pretrain_backbone, sample_dataset, DatasetBundle, World};
use std::time::Instant;

/// Purpose tag for the dataset-sampling RNG stream.
const DATASET_STREAM: u64 = 0xda7a;

/// World, dataset and pretrained backbone shared by every run on one seed.
pub struct Prepared {
    pub world: World,
    pub bundle: DatasetBundle,
    pub backbone: LinearBackbone,
}

/// Generates the world, samples the dataset and pretrains the backbone.
pub fn prepare(config: &RunConfig) -> CliResult<Prepared> {
    let world = generate_world(&config.world)?;
    let mut rng = RngState::new(config.world.seed).fork(DATASET_STREAM);
    let bundle = sample_dataset(&world, &config.sizes, &mut rng)?;
    let backbone = pretrain_backbone(&bundle.pretrain_source, &bundle.pretrain_target, None)?;
    Ok(Prepared {
        world,
        bundle,
        backbone,
    })
}

/// Adapter architecture, mapper wiring and stream toggles for a variant.
pub fn wire_variant(
    config: &RunConfig,
    variant: Variant,
) -> (Adapter, bool, StreamToggles, f64) {
    let mut rng = RngState::new(config.train.seed).fork(0x1a17);
    let hidden = config.adapter_hidden;
    let d_t = config.world.d_t;
    let mut alpha = config.train.weights.alpha;
    let mut use_coarse = true;
    let mut toggles = StreamToggles::default();

    let adapter = match variant {
        Variant::LinearAdapter => Adapter::Linear(LinearAdapter::init(d_t)),
        Variant::NoCoarse => {
            use_coarse = false;
            Adapter::Mlp(ResidualAdapter::init_direct(
                config.world.d_s,
                d_t,
                hidden,
                &mut rng,
            ))
        }
        _ => Adapter::Mlp(ResidualAdapter::init(d_t, hidden, &mut rng)),
    };
    match variant {
        Variant::NoAnchor => toggles.anchor = false,
        Variant::NoAnchorMse => alpha = 0.0,
        Variant::NoSec => toggles.semantic = false,
        _ => {}
    }
    (adapter, use_coarse, toggles, alpha)
}

/// Trained models plus the evaluation record for one run.
pub struct RunOutcome {
    pub metrics: MetricsRecord,
    pub adapter: Adapter,
    pub trace_len: usize,
    pub wall_seconds: f64,
}

/// Calibrates and evaluates one variant against a prepared world.
pub fn calibrate_and_evaluate(
    config: &RunConfig,
    prepared: &Prepared,
    variant: Variant,
) -> CliResult<RunOutcome> {
    let start = Instant::now();
    let (adapter, use_coarse, toggles, alpha) = wire_variant(config, variant);
    let mut train = config.train.clone();
    train.weights.alpha = alpha;

    let backbone = use_coarse.then_some(&prepared.backbone);
    let (trained, trace) = train_calibration(
        backbone,
        adapter,
        &prepared.world.decoder,
        &prepared.bundle,
        &train,
        toggles,
    )?;

    let mapper = match backbone {
        Some(bb) => Mapper::residual(bb, &trained)?,
        None => Mapper::direct(&trained),
    };
    let metrics = evaluate(config, prepared, &mapper)?;
    Ok(RunOutcome {
        metrics,
        adapter: trained,
        trace_len: trace.len(),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Evaluates any mapper on the prepared test split.
pub fn evaluate(
    config: &RunConfig,
    prepared: &Prepared,
    mapper: &Mapper<'_>,
) -> CliResult<MetricsRecord> {
    let test = TestSplit {
        source: &prepared.bundle.test_source,
        target: &prepared.bundle.test_target,
        embeddings: &prepared.bundle.test_embeddings,
    };
    Ok(evaluate_mapper(
        mapper,
        &prepared.world.decoder,
        &test,
        &config.protocol,
    )?)
}

fn make_row(
    run_id: String,
    config: &RunConfig,
    variant: Variant,
    shots: usize,
    outcome: &RunOutcome,
) -> ResultRow {
    ResultRow {
        run_id,
        seed: config.world.seed,
        variant,
        shots,
        alpha: if variant == Variant::NoAnchorMse {
            0.0
        } else {
            config.train.weights.alpha
        },
        lambda: config.train.weights.lambda,
        tau: config.train.weights.tau,
        n_iters: config.train.n_iters,
        metrics: outcome.metrics,
        wall_seconds: outcome.wall_seconds,
    }
}

/// One calibrate-and-evaluate run per the configured variant.
pub fn run_single(config: &RunConfig) -> CliResult<ResultRow> {
    config.validate()?;
    let prepared = prepare(config)?;
    let shots = match config.variant {
        Variant::NoAnchor => 0,
        _ => config.sizes.m_fewshot,
    };
    let outcome = calibrate_and_evaluate(config, &prepared, config.variant)?;
    let run_id = format!("single-{}-s{}", config.variant, config.world.seed);
    let row = make_row(run_id, config, config.variant, shots, &outcome);

    if let Some(path) = &config.checkpoint_path {
        save_run_checkpoint(config, &prepared, &outcome.adapter, path)?;
    }
    Ok(row)
}

fn save_run_checkpoint(
    config: &RunConfig,
    prepared: &Prepared,
    adapter: &Adapter,
    path: &str,
) -> CliResult<()> {
    use crate::checkpoint::{format_f64, pack_models, Checkpoint};
    let mut ckpt = Checkpoint::default();
    ckpt.set_meta("variant", config.variant.name());
    ckpt.set_meta("seed", config.world.seed.to_string());
    ckpt.set_meta("d_s", config.world.d_s.to_string());
    ckpt.set_meta("d_t", config.world.d_t.to_string());
    ckpt.set_meta("d_c", config.world.d_c.to_string());
    ckpt.set_meta("hidden", config.adapter_hidden.to_string());
    ckpt.set_meta("alpha", format_f64(config.train.weights.alpha));
    ckpt.set_meta("lambda", format_f64(config.train.weights.lambda));
    ckpt.set_meta("tau", format_f64(config.train.weights.tau));
    ckpt.set_meta("lr", format_f64(config.train.lr));
    ckpt.set_meta("n_iters", config.train.n_iters.to_string());
    pack_models(&mut ckpt, &prepared.backbone, adapter, &prepared.world.decoder);
    ckpt.save(std::path::Path::new(path))
}

/// Applies a sweep seed: world, training and protocol all follow it.
pub fn with_seed(base: &RunConfig, seed: u64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.world.seed = seed;
    cfg.train.seed = seed;
    cfg.protocol.seed = seed;
    cfg
}

fn run_on_pool<T: Send, F>(threads: usize, jobs: Vec<F>) -> CliResult<Vec<T>>
where
    F: FnOnce() -> CliResult<T> + Send,
{
    if threads <= 1 {
        return jobs.into_iter().map(|j| j()).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Run(e.to_string()))?;
    pool.install(|| {
        use rayon::prelude::*;
        jobs.into_par_iter().map(|j| j()).collect()
    })
}

/// Shot sweep: per seed, one shared world and test split; the few-shot sets
/// are nested prefixes, so smaller shot counts are subsets of larger ones.
pub fn sweep_shots(
    base: &RunConfig,
    shots: &[usize],
    seeds: &[u64],
    threads: usize,
) -> CliResult<Vec<ResultRow>> {
    base.validate()?;
    for &s in shots {
        if s > base.sizes.m_fewshot {
            return Err(CliError::Config(format!(
                "shots value {s} exceeds the {} available paired stimuli (sizes.m_fewshot)",
                base.sizes.m_fewshot
            )));
        }
    }
    let jobs: Vec<_> = seeds
        .iter()
        .map(|&seed| {
            let base = base.clone();
            let shots = shots.to_vec();
            move || -> CliResult<Vec<ResultRow>> {
                let cfg = with_seed(&base, seed);
                let prepared = prepare(&cfg)?;
                let mut rows = Vec::new();
                for &m in &shots {
                    let mut run_cfg = cfg.clone();
                    run_cfg.sizes.m_fewshot = m;
                    let restricted = Prepared {
                        world: prepared.world.clone(),
                        bundle: prepared.bundle.fewshot_prefix(m)?,
                        backbone: prepared.backbone.clone(),
                    };
                    let outcome = calibrate_and_evaluate(&run_cfg, &restricted, cfg.variant)?;
                    let run_id = format!("shots{m}-s{seed}");
                    rows.push(make_row(run_id, &run_cfg, cfg.variant, m, &outcome));
                }
                Ok(rows)
            }
        })
        .collect();
    let nested = run_on_pool(threads, jobs)?;
    Ok(nested.into_iter().flatten().collect())
}

/// Loss-weight sweep over a lambda x alpha grid.
pub fn sweep_weights(
    base: &RunConfig,
    lambdas: &[f64],
    alphas: &[f64],
    seeds: &[u64],
    threads: usize,
) -> CliResult<Vec<ResultRow>> {
    base.validate()?;
    for &l in lambdas {
        if !(l.is_finite() && l >= 0.0) {
            return Err(CliError::Config(format!("lambda value {l} must be >= 0")));
        }
    }
    for &a in alphas {
        if !(a.is_finite() && a >= 0.0) {
            return Err(CliError::Config(format!("alpha value {a} must be >= 0")));
        }
    }
    let jobs: Vec<_> = seeds
        .iter()
        .map(|&seed| {
            let base = base.clone();
            let lambdas = lambdas.to_vec();
            let alphas = alphas.to_vec();
            move || -> CliResult<Vec<ResultRow>> {
                let cfg = with_seed(&base, seed);
                let prepared = prepare(&cfg)?;
                let mut rows = Vec::new();
                for &lambda in &lambdas {
                    for &alpha in &alphas {
                        let mut run_cfg = cfg.clone();
                        run_cfg.train.weights.lambda = lambda;
                        run_cfg.train.weights.alpha = alpha;
                        let outcome =
                            calibrate_and_evaluate(&run_cfg, &prepared, cfg.variant)?;
                        let run_id = format!("weights-l{lambda}-a{alpha}-s{seed}");
                        rows.push(make_row(
                            run_id,
                            &run_cfg,
                            cfg.variant,
                            run_cfg.sizes.m_fewshot,
                            &outcome,
                        ));
                    }
                }
                Ok(rows)
            }
        })
        .collect();
    let nested = run_on_pool(threads, jobs)?;
    Ok(nested.into_iter().flatten().collect())
}

/// Runs every variant on identical worlds and splits, one row per variant
/// per seed.
pub fn run_ablations(
    base: &RunConfig,
    seeds: &[u64],
    threads: usize,
) -> CliResult<Vec<ResultRow>> {
    base.validate()?;
    let jobs: Vec<_> = seeds
        .iter()
        .map(|&seed| {
            let base = base.clone();
            move || -> CliResult<Vec<ResultRow>> {
                let cfg = with_seed(&base, seed);
                let prepared = prepare(&cfg)?;
                let mut rows = Vec::new();
                for variant in Variant::ALL {
                    let outcome = calibrate_and_evaluate(&cfg, &prepared, variant)?;
                    let shots = match variant {
                        Variant::NoAnchor => 0,
                        _ => cfg.sizes.m_fewshot,
                    };
                    let run_id = format!("ablate-{variant}-s{seed}");
                    rows.push(make_row(run_id, &cfg, variant, shots, &outcome));
                }
                Ok(rows)
            }
        })
        .collect();
    let nested = run_on_pool(threads, jobs)?;
    Ok(nested.into_iter().flatten().collect())
}

/// Metrics of the frozen backbone alone (zero-initialized adapter).
pub fn evaluate_frozen(config: &RunConfig, prepared: &Prepared) -> CliResult<MetricsRecord> {
    let mut rng = RngState::new(config.train.seed).fork(0x1a17);
    let adapter = Adapter::Mlp(ResidualAdapter::init(
        config.world.d_t,
        config.adapter_hidden,
        &mut rng,
    ));
    let mapper = Mapper::residual(&prepared.backbone, &adapter)?;
    evaluate(config, prepared, &mapper)
}

/// Convenience wrapper keeping the decoder reachable for persistence.
pub fn world_decoder(prepared: &Prepared) -> &FrozenDecoder {
    &prepared.world.decoder
}
