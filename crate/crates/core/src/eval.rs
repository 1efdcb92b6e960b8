//! Evaluation protocol: bidirectional retrieval, two-way identification,
//! voxel/embedding correlations, and a finite-difference Jacobian probe of
//! the frozen decoder.

use crate::loss::mse_loss;
use crate::model::{FrozenDecoder, Mapper};
use crate::numerics::{cosine, l2_norm, pearson, DenseMatrix, RngState, EPS_NORM};
use crate::{Error, Result};

/// All metrics of one evaluation run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub test_voxel_mse: f64,
    pub voxel_corr_mean: f64,
    pub emb_cosine_mean: f64,
    pub fwd_acc: f64,
    pub bwd_acc: f64,
    pub two_way_acc: f64,
}

/// Retrieval/identification protocol parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalProtocol {
    /// Candidate pool per retrieval trial; clamped to the test size.
    pub pool_size: usize,
    /// Retrieval repeats per test sample.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            pool_size: 300,
            repeats: 30,
            seed: 0,
        }
    }
}

/// Borrowed view of a held-out test split.
#[derive(Debug, Clone, Copy)]
pub struct TestSplit<'a> {
    pub source: &'a DenseMatrix,
    pub target: &'a DenseMatrix,
    pub embeddings: &'a DenseMatrix,
}

/// Top-1 retrieval accuracy of each query against a sampled candidate pool
/// from the gallery (the true same-index item plus `pool_size - 1` random
/// distractors). Cosine similarity decides; exact ties go to the lowest
/// gallery index. Averaged over `repeats` independent pools per query.
pub fn retrieval_accuracy(
    queries: &DenseMatrix,
    gallery: &DenseMatrix,
    pool_size: usize,
    repeats: usize,
    rng: &mut RngState,
) -> Result<f64> {
    let n = queries.rows();
    if gallery.rows() != n || queries.cols() != gallery.cols() {
        return Err(Error::ShapeMismatch {
            op: "retrieval_accuracy",
            expected: format!("{}x{}", n, queries.cols()),
            got: format!("{}x{}", gallery.rows(), gallery.cols()),
        });
    }
    if n < 2 || pool_size < 2 || pool_size > n {
        return Err(Error::InvalidPool {
            pool: pool_size,
            batch: n,
        });
    }
    if repeats == 0 {
        return Err(Error::InvalidConfig("retrieval repeats must be >= 1".to_string()));
    }

    let q_unit = normalize_rows(queries)?;
    let g_unit = normalize_rows(gallery)?;

    let mut correct = 0usize;
    for i in 0..n {
        let q = q_unit.row(i);
        let true_sim = dot(q, g_unit.row(i));
        for _ in 0..repeats {
            // Distractors: pool_size - 1 distinct indices excluding i.
            let raw = rng.sample_without_replacement(n - 1, pool_size - 1);
            let mut best_idx = i;
            let mut best_sim = true_sim;
            for r in raw {
                let j = if r >= i { r + 1 } else { r };
                let sim = dot(q, g_unit.row(j));
                if sim > best_sim || (sim == best_sim && j < best_idx) {
                    best_sim = sim;
                    best_idx = j;
                }
            }
            if best_idx == i {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / (n * repeats) as f64)
}

/// Brain-to-stimulus retrieval: predicted embeddings query the ground-truth
/// embedding pool.
pub fn forward_retrieval(
    pred_emb: &DenseMatrix,
    true_emb: &DenseMatrix,
    pool_size: usize,
    repeats: usize,
    rng: &mut RngState,
) -> Result<f64> {
    retrieval_accuracy(pred_emb, true_emb, pool_size, repeats, rng)
}

/// Stimulus-to-brain retrieval: ground-truth embeddings query the predicted
/// embedding pool (roles swapped).
pub fn backward_retrieval(
    true_emb: &DenseMatrix,
    pred_emb: &DenseMatrix,
    pool_size: usize,
    repeats: usize,
    rng: &mut RngState,
) -> Result<f64> {
    retrieval_accuracy(true_emb, pred_emb, pool_size, repeats, rng)
}

/// Outcome of the two-way identification protocol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoWayOutcome {
    pub accuracy: f64,
    /// Trials skipped because a row had degenerate variance.
    pub excluded_trials: usize,
}

/// Two-way identification. One trial visits every sample i, draws a random
/// distractor j != i, and scores a hit when pearson(pred_i, true_i) >
/// pearson(pred_i, true_j); exact ties score 0.5. The result averages the
/// per-trial accuracies over `n_trials` trials. Comparisons touching a
/// degenerate-variance row are excluded and counted.
pub fn two_way_identification(
    pred: &DenseMatrix,
    truth: &DenseMatrix,
    rng: &mut RngState,
    n_trials: usize,
) -> Result<TwoWayOutcome> {
    let n = pred.rows();
    if truth.rows() != n || pred.cols() != truth.cols() || n < 2 {
        return Err(Error::ShapeMismatch {
            op: "two_way_identification",
            expected: "two equal batches with >= 2 rows".to_string(),
            got: format!("{}x{} and {}x{}", pred.rows(), pred.cols(), truth.rows(), truth.cols()),
        });
    }
    if n_trials == 0 {
        return Err(Error::InvalidConfig("two-way n_trials must be >= 1".to_string()));
    }

    let mut trial_sum = 0.0;
    let mut valid_trials = 0usize;
    let mut excluded = 0usize;
    for _ in 0..n_trials {
        let mut score = 0.0;
        let mut valid = 0usize;
        for i in 0..n {
            let r = rng.next_index(n - 1);
            let j = if r >= i { r + 1 } else { r };
            let own = pearson(pred.row(i), truth.row(i));
            let other = pearson(pred.row(i), truth.row(j));
            match (own, other) {
                (Ok(a), Ok(b)) => {
                    valid += 1;
                    if a > b {
                        score += 1.0;
                    } else if a == b {
                        score += 0.5;
                    }
                }
                _ => excluded += 1,
            }
        }
        if valid > 0 {
            trial_sum += score / valid as f64;
            valid_trials += 1;
        }
    }
    if valid_trials == 0 {
        return Err(Error::DegenerateVariance { var: 0.0 });
    }
    Ok(TwoWayOutcome {
        accuracy: trial_sum / valid_trials as f64,
        excluded_trials: excluded,
    })
}

/// Full evaluation of a calibrated mapper on a held-out split.
///
/// Decoded predictions are scored against ground-truth embeddings with
/// forward/backward retrieval (pool clamped to the test size) and two-way
/// identification (`repeats` trials); voxel metrics compare predictions to
/// ground-truth target responses directly.
pub fn evaluate_mapper(
    mapper: &Mapper<'_>,
    decoder: &FrozenDecoder,
    test: &TestSplit<'_>,
    protocol: &EvalProtocol,
) -> Result<MetricsRecord> {
    let n = test.source.rows();
    if n == 0 {
        return Err(Error::EmptyBatch("evaluate_mapper: empty test split"));
    }
    let pred = mapper.forward(test.source)?;
    let test_voxel_mse = mse_loss(&pred, test.target)?;
    let mut voxel_corr_mean = 0.0;
    for i in 0..n {
        voxel_corr_mean += pearson(pred.row(i), test.target.row(i))?;
    }
    voxel_corr_mean /= n as f64;

    let decoded = decoder.forward(&pred)?;
    let mut emb_cosine_mean = 0.0;
    for i in 0..n {
        emb_cosine_mean += cosine(decoded.row(i), test.embeddings.row(i))?;
    }
    emb_cosine_mean /= n as f64;

    let pool = protocol.pool_size.min(n);
    let root = RngState::new(protocol.seed);
    let fwd_acc = forward_retrieval(
        &decoded,
        test.embeddings,
        pool,
        protocol.repeats,
        &mut root.fork(1),
    )?;
    let bwd_acc = backward_retrieval(
        test.embeddings,
        &decoded,
        pool,
        protocol.repeats,
        &mut root.fork(2),
    )?;
    let two_way = two_way_identification(
        &decoded,
        test.embeddings,
        &mut root.fork(3),
        protocol.repeats,
    )?;

    Ok(MetricsRecord {
        test_voxel_mse,
        voxel_corr_mean,
        emb_cosine_mean,
        fwd_acc,
        bwd_acc,
        two_way_acc: two_way.accuracy,
    })
}

/// Finite-difference probe of a vector map at a base point.
#[derive(Debug, Clone)]
pub struct JvpProbe {
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    pub h: f64,
}

impl JvpProbe {
    pub fn validate(&self) -> Result<()> {
        if !(self.h.is_finite() && self.h > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "jvp step h must be finite and > 0, got {}",
                self.h
            )));
        }
        let norm = l2_norm(&self.delta);
        if norm <= EPS_NORM {
            return Err(Error::DegenerateVector { norm });
        }
        Ok(())
    }
}

/// Central-difference Jacobian-vector product of an arbitrary map:
/// `(f(x + h d) - f(x - h d)) / (2h)`.
pub fn jvp_central<F>(f: F, probe: &JvpProbe) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    probe.validate()?;
    let plus: Vec<f64> = probe
        .x
        .iter()
        .zip(&probe.delta)
        .map(|(x, d)| x + probe.h * d)
        .collect();
    let minus: Vec<f64> = probe
        .x
        .iter()
        .zip(&probe.delta)
        .map(|(x, d)| x - probe.h * d)
        .collect();
    let fp = f(&plus)?;
    let fm = f(&minus)?;
    Ok(fp
        .iter()
        .zip(&fm)
        .map(|(a, b)| (a - b) / (2.0 * probe.h))
        .collect())
}

/// Central-difference JVP of the frozen decoder at `probe.x`.
pub fn decoder_jvp(decoder: &FrozenDecoder, probe: &JvpProbe) -> Result<Vec<f64>> {
    jvp_central(|x| decoder_row(decoder, x), probe)
}

fn decoder_row(decoder: &FrozenDecoder, x: &[f64]) -> Result<Vec<f64>> {
    let m = DenseMatrix::from_raw(1, x.len(), x.to_vec());
    let out = decoder.forward(&m)?;
    Ok(out.row(0).to_vec())
}

/// Relative tolerance for agreement of the amplification ratio across the
/// h and 2h step sizes; larger disagreement flags cancellation.
const JVP_STABILITY_TOL: f64 = 1e-2;

/// Directional amplification `|J_G delta| / |delta|` of the decoder at `x`,
/// measured by central differences and cross-checked at twice the step.
pub fn amplification_ratio(decoder: &FrozenDecoder, x: &[f64], delta: &[f64]) -> Result<f64> {
    let delta_norm = l2_norm(delta);
    if delta_norm <= EPS_NORM {
        return Err(Error::DegenerateVector { norm: delta_norm });
    }
    // Step sized relative to the base point so the probe stays well above
    // round-off but within the linear regime.
    let h = 1e-5 * (1.0 + l2_norm(x)) / delta_norm;
    let probe = JvpProbe {
        x: x.to_vec(),
        delta: delta.to_vec(),
        h,
    };
    let jvp_h = decoder_jvp(decoder, &probe)?;
    let probe2 = JvpProbe { h: 2.0 * h, ..probe };
    let jvp_2h = decoder_jvp(decoder, &probe2)?;

    let r_h = l2_norm(&jvp_h) / delta_norm;
    let r_2h = l2_norm(&jvp_2h) / delta_norm;
    if (r_h - r_2h).abs() > JVP_STABILITY_TOL * r_h.max(1e-12) {
        return Err(Error::UnstableJvp { r_h, r_2h });
    }
    Ok(r_h)
}

fn normalize_rows(m: &DenseMatrix) -> Result<DenseMatrix> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let norm = l2_norm(out.row(r));
        if norm <= EPS_NORM {
            return Err(Error::DegenerateVector { norm });
        }
        for v in out.row_mut(r) {
            *v /= norm;
        }
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
