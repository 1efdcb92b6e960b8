//! Adam and the calibration loop.
//!
//! Each iteration samples an anchor minibatch (without replacement, capped)
//! and a semantic minibatch (with replacement), evaluates the dual-stream
//! objective and its adapter gradient, and applies one Adam step to the
//! adapter. The backbone and decoder are shared references and cannot be
//! written to from here.

use crate::loss::{total_loss_and_grad, LossReport, LossWeights, StreamBatches};
use crate::model::{Adapter, FrozenDecoder, LinearBackbone, Mapper, ParamVector};
use crate::numerics::{DenseMatrix, RngState};
use crate::synth::DatasetBundle;
use crate::{Error, Result};

/// Adam moment estimates and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamVector,
    pub v: ParamVector,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh state with standard defaults (beta1 0.9, beta2 0.999, eps 1e-8).
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One in-place Adam update with bias correction.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ParamLength {
            expected: state.m.len(),
            got: params.len().max(grads.len()),
        });
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Calibration hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weights: LossWeights,
    /// Anchor minibatch cap; every iteration uses min(cap, available anchors).
    pub anchor_batch: usize,
    /// Semantic minibatch size, drawn with replacement.
    pub semantic_batch: usize,
    pub n_iters: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weights: LossWeights::default(),
            anchor_batch: 32,
            semantic_batch: 128,
            n_iters: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "train.lr must be finite and > 0, got {}",
                self.lr
            )));
        }
        if self.anchor_batch == 0 {
            return Err(Error::InvalidConfig(
                "train.anchor_batch must be >= 1".to_string(),
            ));
        }
        if self.semantic_batch == 0 {
            return Err(Error::InvalidConfig(
                "train.semantic_batch must be >= 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// Draws the per-iteration minibatch indices.
///
/// Anchor indices: min(cap, m) distinct draws without replacement, reshuffled
/// every call. Semantic indices: `semantic_batch` uniform draws with
/// replacement from the unpaired set. An empty paired set yields an empty
/// anchor batch.
pub fn sample_minibatches(
    rng: &mut RngState,
    paired_len: usize,
    unpaired_len: usize,
    config: &TrainConfig,
) -> (Vec<usize>, Vec<usize>) {
    let anchors = if paired_len == 0 {
        Vec::new()
    } else {
        rng.sample_without_replacement(paired_len, config.anchor_batch)
    };
    let mut semantic = Vec::with_capacity(config.semantic_batch);
    for _ in 0..config.semantic_batch {
        semantic.push(rng.next_index(unpaired_len));
    }
    (anchors, semantic)
}

/// Which objective streams the training loop evaluates.
///
/// Loss-level ablations disable a stream here; the architectural ablations
/// are chosen by the adapter/mapper wiring instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamToggles {
    pub anchor: bool,
    pub semantic: bool,
}

impl Default for StreamToggles {
    fn default() -> Self {
        Self {
            anchor: true,
            semantic: true,
        }
    }
}

/// Runs the calibration loop and returns the trained adapter plus the
/// per-iteration loss trace. `backbone` is `None` for the direct (no coarse
/// stage) wiring. The backbone and decoder are immutable throughout.
pub fn train_calibration(
    backbone: Option<&LinearBackbone>,
    adapter: Adapter,
    decoder: &FrozenDecoder,
    bundle: &DatasetBundle,
    config: &TrainConfig,
    toggles: StreamToggles,
) -> Result<(Adapter, Vec<LossReport>)> {
    config.validate()?;
    if toggles.semantic && bundle.unpaired_source.rows() == 0 {
        return Err(Error::EmptyBatch("train: semantic stream enabled but unpaired set empty"));
    }
    if !toggles.anchor && !toggles.semantic {
        return Err(Error::EmptyBatch("train: both streams disabled"));
    }

    let mut adapter = adapter;
    let mut params = adapter.flatten();
    let mut state = AdamState::new(params.len());
    let mut rng = training_rng(config.seed);
    let mut trace = Vec::with_capacity(config.n_iters);

    let paired_len = bundle.fewshot_source.rows();
    let unpaired_len = bundle.unpaired_source.rows();

    for iter in 0..config.n_iters {
        let (anchor_idx, semantic_idx) =
            sample_minibatches(&mut rng, paired_len, unpaired_len.max(1), config);

        let anchor_batch = if toggles.anchor && !anchor_idx.is_empty() {
            Some((
                gather_rows(&bundle.fewshot_source, &anchor_idx),
                gather_rows(&bundle.fewshot_target, &anchor_idx),
            ))
        } else {
            None
        };
        let semantic_batch = if toggles.semantic {
            Some((
                gather_rows(&bundle.unpaired_source, &semantic_idx),
                gather_rows(&bundle.unpaired_embeddings, &semantic_idx),
            ))
        } else {
            None
        };

        let mapper = match backbone {
            Some(bb) => Mapper::residual(bb, &adapter)?,
            None => Mapper::direct(&adapter),
        };
        let batches = StreamBatches {
            anchor: anchor_batch.as_ref().map(|(a, b)| (a, b)),
            semantic: semantic_batch.as_ref().map(|(a, b)| (a, b)),
        };
        let (report, grad) = total_loss_and_grad(&mapper, decoder, &batches, &config.weights)?;
        if !report.is_finite() {
            return Err(Error::NonFiniteLoss {
                iter,
                total: report.total,
                anchor_mse: report.anchor_mse,
                anchor_nce: report.anchor_nce,
                semantic_nce: report.semantic_nce,
            });
        }
        trace.push(report);

        adam_step(&mut params, &grad, &mut state, config.lr)?;
        adapter = adapter.with_params(&params)?;
    }

    Ok((adapter, trace))
}

/// The RNG stream the training loop draws its minibatches from.
pub fn training_rng(seed: u64) -> RngState {
    RngState::new(seed).fork(0x7261_696e)
}

/// Copies the selected rows into a new batch, in index order.
pub fn gather_rows(m: &DenseMatrix, idx: &[usize]) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(idx.len(), m.cols());
    for (dst, &src) in idx.iter().enumerate() {
        out.row_mut(dst).copy_from_slice(m.row(src));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut params = vec![1.0, -2.0, 0.5];
        let grads = vec![0.0; 3];
        let mut state = AdamState::new(3);
        adam_step(&mut params, &grads, &mut state, 0.1).unwrap();
        assert_eq!(params, vec![1.0, -2.0, 0.5]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let mut params = vec![0.0];
        let grads = vec![3.0];
        let mut state = AdamState::new(1);
        adam_step(&mut params, &grads, &mut state, 0.1).unwrap();
        // First step: m_hat = g, v_hat = g^2, delta = -lr * g / (|g| + eps).
        assert_close(params[0], -0.1, 1e-8);
    }

    #[test]
    fn adam_two_steps_match_scalar_oracle() {
        let mut params = vec![0.7, -0.3];
        let grads1 = vec![0.5, -1.5];
        let grads2 = vec![-0.25, 2.0];
        let mut state = AdamState::new(2);
        adam_step(&mut params, &grads1, &mut state, 0.05).unwrap();
        adam_step(&mut params, &grads2, &mut state, 0.05).unwrap();

        // Independent scalar reference.
        let scalar_adam = |x0: f64, gs: [f64; 2]| {
            let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.05);
            let mut x = x0;
            let (mut m, mut v) = (0.0, 0.0);
            for (t, g) in gs.iter().enumerate() {
                let t = (t + 1) as i32;
                m = b1 * m + (1.0 - b1) * g;
                v = b2 * v + (1.0 - b2) * g * g;
                let mh = m / (1.0 - b1.powi(t));
                let vh = v / (1.0 - b2.powi(t));
                x -= lr * mh / (vh.sqrt() + eps);
            }
            x
        };
        assert_close(params[0], scalar_adam(0.7, [0.5, -0.25]), 1e-15);
        assert_close(params[1], scalar_adam(-0.3, [-1.5, 2.0]), 1e-15);
    }

    #[test]
    fn adam_length_mismatch() {
        let mut params = vec![0.0; 2];
        let grads = vec![0.0; 3];
        let mut state = AdamState::new(2);
        assert!(matches!(
            adam_step(&mut params, &grads, &mut state, 0.1),
            Err(Error::ParamLength { .. })
        ));
    }

    #[test]
    fn minibatch_sampling_contracts() {
        let config = TrainConfig {
            anchor_batch: 32,
            semantic_batch: 16,
            ..TrainConfig::default()
        };

        // Cap exceeds the paired set: every anchor appears.
        let mut rng = RngState::new(1);
        let (anchors, semantic) = sample_minibatches(&mut rng, 10, 100, &config);
        let mut sorted = anchors.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(semantic.len(), 16);
        assert!(semantic.iter().all(|&i| i < 100));

        // Cap below the paired set: exactly 32 distinct indices.
        let mut rng = RngState::new(2);
        let (anchors, _) = sample_minibatches(&mut rng, 64, 100, &config);
        assert_eq!(anchors.len(), 32);
        let mut sorted = anchors.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 32);

        // Same seed, same streams.
        let mut a = RngState::new(3);
        let mut b = RngState::new(3);
        assert_eq!(
            sample_minibatches(&mut a, 64, 100, &config),
            sample_minibatches(&mut b, 64, 100, &config)
        );

        // Empty paired set is fine and yields no anchors.
        let mut rng = RngState::new(4);
        let (anchors, _) = sample_minibatches(&mut rng, 0, 100, &config);
        assert!(anchors.is_empty());
    }
}
