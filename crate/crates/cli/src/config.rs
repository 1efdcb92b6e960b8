//! Flat sectioned key=value configuration files.
//!
//! Sections are `[world]`, `[sizes]`, `[train]`, `[protocol]`, `[variant]`
//! and `[output]`; `#` starts a comment; every key has a default, so the
//! empty file is a valid config. Unknown keys, type errors and constraint
//! violations are reported with the offending `section.key` name.

use crate::{CliError, CliResult};
use ncal_core::eval::EvalProtocol;
use ncal_core::optim::TrainConfig;
use ncal_core::synth::{DatasetSizes, WorldSpec};
use std::fmt;
use std::path::Path;

/// Model ablation / wiring variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoAnchor,
    NoAnchorMse,
    NoSec,
    NoCoarse,
    LinearAdapter,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoAnchor,
        Variant::NoAnchorMse,
        Variant::NoSec,
        Variant::NoCoarse,
        Variant::LinearAdapter,
    ];

    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "full" => Some(Variant::Full),
            "no_anchor" => Some(Variant::NoAnchor),
            "no_anchor_mse" => Some(Variant::NoAnchorMse),
            "no_sec" => Some(Variant::NoSec),
            "no_coarse" => Some(Variant::NoCoarse),
            "linear_adapter" => Some(Variant::LinearAdapter),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAnchor => "no_anchor",
            Variant::NoAnchorMse => "no_anchor_mse",
            Variant::NoSec => "no_sec",
            Variant::NoCoarse => "no_coarse",
            Variant::LinearAdapter => "linear_adapter",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything one run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub world: WorldSpec,
    pub sizes: DatasetSizes,
    pub train: TrainConfig,
    pub adapter_hidden: usize,
    pub protocol: EvalProtocol,
    pub variant: Variant,
    pub checkpoint_path: Option<String>,
    pub results_path: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldSpec::default(),
            sizes: DatasetSizes::default(),
            train: TrainConfig::default(),
            adapter_hidden: 256,
            protocol: EvalProtocol::default(),
            variant: Variant::Full,
            checkpoint_path: None,
            results_path: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> CliResult<()> {
        self.world
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.adapter_hidden == 0 {
            return Err(CliError::Config(
                "train.hidden must be >= 1".to_string(),
            ));
        }
        if self.protocol.pool_size < 2 {
            return Err(CliError::Config(
                "protocol.pool must be >= 2".to_string(),
            ));
        }
        if self.protocol.repeats == 0 {
            return Err(CliError::Config(
                "protocol.repeats must be >= 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// Parses a config file from disk.
pub fn parse_config_file(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

/// Parses config text into a validated [`RunConfig`] with defaults filled.
pub fn parse_config(text: &str) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut section = String::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = strip_comment(raw).trim().to_string();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') && line.ends_with(']') {
            section = line[1..line.len() - 1].trim().to_string();
            match section.as_str() {
                "world" | "sizes" | "train" | "protocol" | "variant" | "output" => {}
                other => {
                    return Err(CliError::Config(format!(
                        "line {}: unknown section [{other}]",
                        lineno + 1
                    )))
                }
            }
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!("line {}: expected key = value", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        apply_key(&mut cfg, &section, key, value)?;
    }

    cfg.validate()?;
    Ok(cfg)
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn apply_key(cfg: &mut RunConfig, section: &str, key: &str, value: &str) -> CliResult<()> {
    let full = |k: &str| format!("{section}.{k}");
    match (section, key) {
        ("world", "d_s") => cfg.world.d_s = parse_count(&full(key), value, 1)?,
        ("world", "d_t") => cfg.world.d_t = parse_count(&full(key), value, 1)?,
        ("world", "d_c") => cfg.world.d_c = parse_count(&full(key), value, 1)?,
        ("world", "k_res") => cfg.world.k_res = parse_count(&full(key), value, 0)?,
        ("world", "sigma_s") => cfg.world.sigma_s = parse_nonneg(&full(key), value)?,
        ("world", "sigma_t") => cfg.world.sigma_t = parse_nonneg(&full(key), value)?,
        ("world", "residual_scale") => {
            cfg.world.residual_scale = parse_nonneg(&full(key), value)?
        }
        ("world", "seed") => cfg.world.seed = parse_u64(&full(key), value)?,

        ("sizes", "n_pretrain") => cfg.sizes.n_pretrain = parse_count(&full(key), value, 0)?,
        ("sizes", "n_unpaired") => cfg.sizes.n_unpaired = parse_count(&full(key), value, 1)?,
        ("sizes", "m_fewshot") => cfg.sizes.m_fewshot = parse_count(&full(key), value, 0)?,
        ("sizes", "n_test") => cfg.sizes.n_test = parse_count(&full(key), value, 0)?,

        ("train", "lr") => {
            let v = parse_f64(&full(key), value)?;
            if !(v.is_finite() && v > 0.0) {
                return Err(CliError::Config(format!(
                    "train.lr must be > 0, got {value}"
                )));
            }
            cfg.train.lr = v;
        }
        ("train", "alpha") => {
            let v = parse_f64(&full(key), value)?;
            if !ated_nonneg(v) {
                return Err(CliError::Config(format!(
                    "train.alpha must be finite and >= 0, got {value}"
                )));
            }
            cfg.train.weights.alpha = v;
        }
        ("train", "lambda") => {
            let v = parse_f64(&full(key), value)?;
            if !ated_nonneg(v) {
                return Err(CliError::Config(format!(
                    "train.lambda must be finite and >= 0, got {value}"
                )));
            }
            cfg.train.weights.lambda = v;
        }
        ("train", "tau") => {
            let v = parse_f64(&full(key), value)?;
            if !(v.is_finite() && v > 0.0) {
                return Err(CliError::Config(format!(
                    "train.tau must be > 0, got {value}"
                )));
            }
            cfg.train.weights.tau = v;
        }
        ("train", "anchor_batch") => cfg.train.anchor_batch = parse_count(&full(key), value, 1)?,
        ("train", "semantic_batch") => {
            cfg.train.semantic_batch = parse_count(&full(key), value, 1)?
        }
        ("train", "n_iters") => cfg.train.n_iters = parse_count(&full(key), value, 0)?,
        ("train", "seed") => cfg.train.seed = parse_u64(&full(key), value)?,
        ("train", "hidden") => cfg.adapter_hidden = parse_count(&full(key), value, 1)?,

        ("protocol", "pool") => cfg.protocol.pool_size = parse_count(&full(key), value, 2)?,
        ("protocol", "repeats") => cfg.protocol.repeats = parse_count(&full(key), value, 1)?,
        ("protocol", "seed") => cfg.protocol.seed = parse_u64(&full(key), value)?,

        ("variant", "name") => {
            cfg.variant = Variant::parse(value).ok_or_else(|| {
                CliError::Config(format!(
                    "variant.name: unknown variant '{value}' (expected one of full, no_anchor, \
                     no_anchor_mse, no_sec, no_coarse, linear_adapter)"
                ))
            })?
        }

        ("output", "checkpoint") => cfg.checkpoint_path = Some(value.to_string()),
        ("output", "results") => cfg.results_path = Some(value.to_string()),

        _ => {
            return Err(CliError::Config(format!(
                "unknown key '{}'",
                if section.is_empty() {
                    key.to_string()
                } else {
                    full(key)
                }
            )))
        }
    }
    Ok(())
}

fn ated_nonneg(v: f64) -> bool {
    v.is_finite() && v >= 0.0
}

fn parse_f64(key: &str, value: &str) -> CliResult<f64> {
    value
        .parse::<f64>()
        .map_err(|_| CliError::Config(format!("{key}: expected a number, got '{value}'")))
}

fn parse_nonneg(key: &str, value: &str) -> CliResult<f64> {
    let v = parse_f64(key, value)?;
    if !ated_nonneg(v) {
        return Err(CliError::Config(format!(
            "{key} must be finite and >= 0, got {value}"
        )));
    }
    Ok(v)
}

fn parse_u64(key: &str, value: &str) -> CliResult<u64> {
    value
        .parse::<u64>()
        .map_err(|_| CliError::Config(format!("{key}: expected an unsigned integer, got '{value}'")))
}

fn parse_count(key: &str, value: &str, min: usize) -> CliResult<usize> {
    let v = value
        .parse::<usize>()
        .map_err(|_| CliError::Config(format!("{key}: expected a count, got '{value}'")))?;
    if v < min {
        return Err(CliError::Config(format!("{key} must be >= {min}, got {v}")));
    }
    Ok(v)
}
