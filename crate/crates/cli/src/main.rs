//! Command-line entry point for the calibration benchmark.

use clap::{Parser, Subcommand};
use ncal_cli::checkpoint::{unpack_models, Checkpoint};
use ncal_cli::config::{parse_config_file, RunConfig};
use ncal_cli::gradcheck::run_gradcheck;
use ncal_cli::results::{write_results, ResultRow};
use ncal_cli::runner;
use ncal_cli::{CliError, CliResult};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "ncal",
    about = "Few-shot residual calibration benchmark on a synthetic multi-subject world",
    version
)]
struct Cli {
    /// Config file (flat sectioned key=value text); defaults apply if omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the world, training and protocol seeds together.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output path (results CSV or checkpoint, depending on the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for sweep grids.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world and dataset, then save them as a checkpoint.
    Generate,
    /// Pretrain the frozen linear backbone by ridge regression and save it.
    Pretrain,
    /// Calibrate the adapter, evaluate it, and emit one result row.
    Calibrate,
    /// Evaluate a saved checkpoint (or the frozen backbone) on the test split.
    Evaluate {
        /// Checkpoint produced by `calibrate`; without it the frozen
        /// backbone is evaluated.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Few-shot scaling sweep over anchor counts.
    SweepShots {
        /// Comma-separated shot counts.
        #[arg(long, default_value = "8,16,32,64,128")]
        shots: String,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
    },
    /// Loss-weight balance sweep over a lambda x alpha grid.
    SweepWeights {
        #[arg(long, default_value = "0,1,5,10")]
        lambdas: String,
        #[arg(long, default_value = "0,1,2,4")]
        alphas: String,
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
    },
    /// Run every ablation variant on identical worlds.
    Ablate {
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("ncal: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => parse_config_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = runner::with_seed(&cfg, seed);
    }
    Ok(cfg)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> CliResult<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<T>()
                .map_err(|_| CliError::Config(format!("bad {what} value '{p}'")))
        })
        .collect()
}

fn emit_rows(rows: Vec<ResultRow>, out: Option<&PathBuf>) -> CliResult<()> {
    match out {
        Some(path) => {
            write_results(&rows, path)?;
            println!("wrote {} rows to {}", rows.len(), path.display());
        }
        None => {
            println!("{}", ncal_cli::results::CSV_HEADER);
            for row in &rows {
                println!("{}", row.to_csv_line());
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let config = load_config(&cli)?;
    match &cli.command {
        Command::Generate => {
            let prepared = runner::prepare(&config)?;
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("world.ncal"));
            let mut ckpt = Checkpoint::default();
            ckpt.set_meta("kind", "bundle");
            ckpt.set_meta("seed", config.world.seed.to_string());
            ckpt.push_array("world.source_encoder", &prepared.world.source_encoder);
            ckpt.push_array("world.target_encoder", &prepared.world.target_encoder);
            ckpt.push_array("world.residual_u", &prepared.world.residual_u);
            ckpt.push_array("world.residual_v", &prepared.world.residual_v);
            ckpt.push_array("bundle.pretrain_source", &prepared.bundle.pretrain_source);
            ckpt.push_array("bundle.pretrain_target", &prepared.bundle.pretrain_target);
            ckpt.push_array("bundle.unpaired_source", &prepared.bundle.unpaired_source);
            ckpt.push_array(
                "bundle.unpaired_embeddings",
                &prepared.bundle.unpaired_embeddings,
            );
            ckpt.push_array("bundle.fewshot_source", &prepared.bundle.fewshot_source);
            ckpt.push_array("bundle.fewshot_target", &prepared.bundle.fewshot_target);
            ckpt.push_array("bundle.test_source", &prepared.bundle.test_source);
            ckpt.push_array("bundle.test_target", &prepared.bundle.test_target);
            ckpt.push_array("bundle.test_embeddings", &prepared.bundle.test_embeddings);
            ckpt.push_array("decoder.w1", &prepared.world.decoder.w1);
            ckpt.push_vector("decoder.b1", &prepared.world.decoder.b1);
            ckpt.push_array("decoder.w2", &prepared.world.decoder.w2);
            ckpt.push_vector("decoder.b2", &prepared.world.decoder.b2);
            ckpt.save(&out)?;
            println!("world and dataset saved to {}", out.display());
            Ok(())
        }
        Command::Pretrain => {
            let prepared = runner::prepare(&config)?;
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("backbone.ncal"));
            let mut ckpt = Checkpoint::default();
            ckpt.set_meta("kind", "backbone");
            ckpt.set_meta("seed", config.world.seed.to_string());
            ckpt.push_array("backbone.w", &prepared.backbone.w);
            ckpt.push_vector("backbone.b", &prepared.backbone.b);
            ckpt.save(&out)?;
            println!("pretrained backbone saved to {}", out.display());
            Ok(())
        }
        Command::Calibrate => {
            let mut cfg = config;
            if cfg.checkpoint_path.is_none() {
                if let Some(out) = &cli.out {
                    cfg.checkpoint_path = Some(out.display().to_string());
                }
            }
            let row = runner::run_single(&cfg)?;
            let out = cfg.results_path.clone().map(PathBuf::from);
            emit_rows(vec![row], out.as_ref())?;
            Ok(())
        }
        Command::Evaluate { checkpoint } => {
            let prepared = runner::prepare(&config)?;
            let metrics = match checkpoint {
                Some(path) => {
                    let ckpt = Checkpoint::load(path)?;
                    let (backbone, adapter, decoder) = unpack_models(&ckpt)?;
                    let mapper = match ckpt.meta.get("variant").map(String::as_str) {
                        Some("no_coarse") => ncal_core::model::Mapper::direct(&adapter),
                        _ => ncal_core::model::Mapper::residual(&backbone, &adapter)
                            .map_err(CliError::from)?,
                    };
                    let test = ncal_core::eval::TestSplit {
                        source: &prepared.bundle.test_source,
                        target: &prepared.bundle.test_target,
                        embeddings: &prepared.bundle.test_embeddings,
                    };
                    ncal_core::eval::evaluate_mapper(&mapper, &decoder, &test, &config.protocol)
                        .map_err(CliError::from)?
                }
                None => runner::evaluate_frozen(&config, &prepared)?,
            };
            println!(
                "test_voxel_mse={} voxel_corr_mean={} emb_cosine_mean={} fwd_acc={} bwd_acc={} two_way_acc={}",
                metrics.test_voxel_mse,
                metrics.voxel_corr_mean,
                metrics.emb_cosine_mean,
                metrics.fwd_acc,
                metrics.bwd_acc,
                metrics.two_way_acc
            );
            Ok(())
        }
        Command::SweepShots { shots, seeds } => {
            let shots: Vec<usize> = parse_list(shots, "shots")?;
            let seeds: Vec<u64> = parse_list(seeds, "seed")?;
            let rows = runner::sweep_shots(&config, &shots, &seeds, cli.threads)?;
            emit_rows(rows, cli.out.as_ref())
        }
        Command::SweepWeights {
            lambdas,
            alphas,
            seeds,
        } => {
            let lambdas: Vec<f64> = parse_list(lambdas, "lambda")?;
            let alphas: Vec<f64> = parse_list(alphas, "alpha")?;
            let seeds: Vec<u64> = parse_list(seeds, "seed")?;
            let rows = runner::sweep_weights(&config, &lambdas, &alphas, &seeds, cli.threads)?;
            emit_rows(rows, cli.out.as_ref())
        }
        Command::Ablate { seeds } => {
            let seeds: Vec<u64> = parse_list(seeds, "seed")?;
            let rows = runner::run_ablations(&config, &seeds, cli.threads)?;
            emit_rows(rows, cli.out.as_ref())
        }
        Command::Gradcheck { seed } => {
            let report = run_gradcheck(*seed)?;
            println!("{report}");
            if !report.passed {
                return Err(CliError::Run("gradient check failed".to_string()));
            }
            Ok(())
        }
    }
}
