//! Dual-stream calibration objective with analytic adapter gradients.
//!
//! The anchor stream ties predictions to ground-truth target voxels on the
//! few paired samples (per-dimension MSE plus a symmetric InfoNCE in voxel
//! space). The semantic stream pushes decoded embeddings of unpaired
//! predictions toward their stimulus embeddings with the same InfoNCE. The
//! joint objective is
//!
//! `total = lambda * (alpha * anchor_mse + anchor_nce) + semantic_nce`
//!
//! and its gradient is taken with respect to adapter parameters only; the
//! backbone and decoder are constants of the optimization.

use crate::model::{FrozenDecoder, Mapper, ParamVector};
use crate::numerics::{l2_norm, log_sum_exp, softmax_stable, DenseMatrix, EPS_NORM};
use crate::{Error, Result};

/// Objective weights. `alpha` scales the anchor MSE inside the anchor
/// stream, `lambda` scales the whole anchor stream, `tau` is the shared
/// InfoNCE temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            lambda: 5.0,
            tau: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "train.alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "train.lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "train.tau must be finite and > 0, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Per-evaluation component report. Absent components (disabled streams)
/// are `None` and contribute zero to the total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub anchor_mse: Option<f64>,
    pub anchor_nce: Option<f64>,
    pub semantic_nce: Option<f64>,
}

impl LossReport {
    /// Combines components into the joint objective.
    pub fn assemble(
        weights: &LossWeights,
        anchor_mse: Option<f64>,
        anchor_nce: Option<f64>,
        semantic_nce: Option<f64>,
    ) -> Self {
        let anchor = weights.alpha * anchor_mse.unwrap_or(0.0) + anchor_nce.unwrap_or(0.0);
        let total = weights.lambda * anchor + semantic_nce.unwrap_or(0.0);
        Self {
            total,
            anchor_mse,
            anchor_nce,
            semantic_nce,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.anchor_mse.map_or(true, f64::is_finite)
            && self.anchor_nce.map_or(true, f64::is_finite)
            && self.semantic_nce.map_or(true, f64::is_finite)
    }
}

/// Mean over the batch of per-sample, per-dimension squared error.
pub fn mse_loss(pred: &DenseMatrix, tgt: &DenseMatrix) -> Result<f64> {
    check_same_shape("mse_loss", pred, tgt)?;
    let n = (pred.rows() * pred.cols()) as f64;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(tgt.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / n)
}

/// MSE value plus its gradient with respect to `pred`:
/// `2 (pred - tgt) / (batch * dim)`.
pub fn mse_loss_grad(pred: &DenseMatrix, tgt: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
    let value = mse_loss(pred, tgt)?;
    let n = (pred.rows() * pred.cols()) as f64;
    let data = pred
        .data()
        .iter()
        .zip(tgt.data())
        .map(|(p, t)| 2.0 * (p - t) / n)
        .collect();
    Ok((value, DenseMatrix::from_raw(pred.rows(), pred.cols(), data)))
}

/// Symmetric InfoNCE over cosine similarities with in-batch negatives.
///
/// Rows of both inputs are L2-normalized, similarities are scaled by
/// `1/tau`, and the loss averages the row-wise and column-wise
/// cross-entropies against diagonal targets.
pub fn info_nce(pred: &DenseMatrix, tgt: &DenseMatrix, tau: f64) -> Result<f64> {
    Ok(info_nce_inner(pred, tgt, tau, false)?.0)
}

/// InfoNCE value plus its gradient with respect to the raw (unnormalized)
/// `pred` rows. Targets are treated as constants.
pub fn info_nce_grad(pred: &DenseMatrix, tgt: &DenseMatrix, tau: f64) -> Result<(f64, DenseMatrix)> {
    let (value, grad) = info_nce_inner(pred, tgt, tau, true)?;
    Ok((value, grad.expect("gradient requested")))
}

fn info_nce_inner(
    pred: &DenseMatrix,
    tgt: &DenseMatrix,
    tau: f64,
    want_grad: bool,
) -> Result<(f64, Option<DenseMatrix>)> {
    check_same_shape("info_nce", pred, tgt)?;
    if pred.rows() == 0 {
        return Err(Error::EmptyBatch("info_nce"));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "tau must be finite and > 0, got {tau}"
        )));
    }
    let n = pred.rows();
    let d = pred.cols();

    let mut pred_norms = Vec::with_capacity(n);
    let mut p = DenseMatrix::zeros(n, d);
    for i in 0..n {
        let norm = l2_norm(pred.row(i));
        if norm <= EPS_NORM {
            return Err(Error::DegenerateVector { norm });
        }
        pred_norms.push(norm);
        for (dst, src) in p.row_mut(i).iter_mut().zip(pred.row(i)) {
            *dst = src / norm;
        }
    }
    let mut t = DenseMatrix::zeros(n, d);
    for j in 0..n {
        let norm = l2_norm(tgt.row(j));
        if norm <= EPS_NORM {
            return Err(Error::DegenerateVector { norm });
        }
        for (dst, src) in t.row_mut(j).iter_mut().zip(tgt.row(j)) {
            *dst = src / norm;
        }
    }

    // Similarity logits S[i][j] = cos(pred_i, tgt_j) / tau.
    let s = crate::numerics::matmul_transpose_b(&p, &t)?;
    let mut logits = s;
    for v in logits.data_mut() {
        *v /= tau;
    }

    let nf = n as f64;
    let mut row_loss = 0.0;
    for i in 0..n {
        row_loss += log_sum_exp(logits.row(i)) - logits.get(i, i);
    }
    let cols = logits.transpose();
    let mut col_loss = 0.0;
    for j in 0..n {
        col_loss += log_sum_exp(cols.row(j)) - cols.get(j, j);
    }
    let value = 0.5 * (row_loss + col_loss) / nf;

    if !want_grad {
        return Ok((value, None));
    }

    // dL/dS = (softmax_rows + softmax_cols^T - 2I) / (2n).
    let mut d_s = DenseMatrix::zeros(n, n);
    for i in 0..n {
        let sm = softmax_stable(logits.row(i));
        for j in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            d_s.set(i, j, sm[j] - delta);
        }
    }
    for j in 0..n {
        let sm = softmax_stable(cols.row(j));
        for i in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            d_s.set(i, j, d_s.get(i, j) + sm[i] - delta);
        }
    }
    for v in d_s.data_mut() {
        *v /= 2.0 * nf;
    }

    // dL/dp_i = sum_j dS_ij * t_j / tau, then back through normalization.
    let d_p = crate::numerics::matmul(&d_s, &t)?;
    let mut grad = DenseMatrix::zeros(n, d);
    for i in 0..n {
        let pi = p.row(i);
        let dpi = d_p.row(i);
        let proj: f64 = pi.iter().zip(dpi).map(|(a, b)| a * b).sum();
        let norm = pred_norms[i];
        let out = grad.row_mut(i);
        for k in 0..d {
            out[k] = (dpi[k] / tau - (proj / tau) * pi[k]) / norm;
        }
    }
    Ok((value, Some(grad)))
}

/// Anchor-stream components on a paired batch: per-dimension MSE and voxel
/// InfoNCE of calibrated predictions against ground-truth target voxels.
pub fn anchor_loss(
    mapper: &Mapper<'_>,
    x_s: &DenseMatrix,
    x_t: &DenseMatrix,
    weights: &LossWeights,
) -> Result<(f64, f64)> {
    let pred = mapper.forward(x_s)?;
    check_same_shape("anchor_loss", &pred, x_t)?;
    let mse = mse_loss(&pred, x_t)?;
    let nce = info_nce(&pred, x_t, weights.tau)?;
    Ok((mse, nce))
}

/// Semantic-stream loss on an unpaired batch: InfoNCE between decoded
/// calibrated predictions and the stimulus embeddings.
pub fn semantic_loss(
    mapper: &Mapper<'_>,
    decoder: &FrozenDecoder,
    x_s: &DenseMatrix,
    embeddings: &DenseMatrix,
    tau: f64,
) -> Result<f64> {
    let pred = mapper.forward(x_s)?;
    let decoded = decoder.forward(&pred)?;
    info_nce(&decoded, embeddings, tau)
}

/// Paired and unpaired minibatches for one objective evaluation. Streams
/// set to `None` (or given empty batches) are skipped.
#[derive(Debug, Clone, Copy)]
pub struct StreamBatches<'a> {
    pub anchor: Option<(&'a DenseMatrix, &'a DenseMatrix)>,
    pub semantic: Option<(&'a DenseMatrix, &'a DenseMatrix)>,
}

impl<'a> StreamBatches<'a> {
    fn active_anchor(&self) -> Option<(&'a DenseMatrix, &'a DenseMatrix)> {
        self.anchor.filter(|(x, _)| x.rows() > 0)
    }

    fn active_semantic(&self) -> Option<(&'a DenseMatrix, &'a DenseMatrix)> {
        self.semantic.filter(|(x, _)| x.rows() > 0)
    }
}

/// Joint objective value without gradients.
pub fn total_loss(
    mapper: &Mapper<'_>,
    decoder: &FrozenDecoder,
    batches: &StreamBatches<'_>,
    weights: &LossWeights,
) -> Result<LossReport> {
    weights.validate()?;
    let anchor = batches.active_anchor();
    let semantic = batches.active_semantic();
    if anchor.is_none() && semantic.is_none() {
        return Err(Error::EmptyBatch("total_loss: both streams empty"));
    }

    let (anchor_mse, anchor_nce) = match anchor {
        Some((x_s, x_t)) => {
            let (mse, nce) = anchor_loss(mapper, x_s, x_t, weights)?;
            let mse = (weights.alpha > 0.0).then_some(mse);
            (mse, Some(nce))
        }
        None => (None, None),
    };
    let semantic_nce = match semantic {
        Some((x_s, c)) => Some(semantic_loss(mapper, decoder, x_s, c, weights.tau)?),
        None => None,
    };
    Ok(LossReport::assemble(weights, anchor_mse, anchor_nce, semantic_nce))
}

/// Joint objective plus its gradient with respect to adapter parameters.
///
/// The returned vector has exactly `mapper.adapter().param_len()` entries in
/// the adapter's flatten order; backbone and decoder parameters have no
/// slots anywhere in it.
pub fn total_loss_and_grad(
    mapper: &Mapper<'_>,
    decoder: &FrozenDecoder,
    batches: &StreamBatches<'_>,
    weights: &LossWeights,
) -> Result<(LossReport, ParamVector)> {
    weights.validate()?;
    let anchor = batches.active_anchor();
    let semantic = batches.active_semantic();
    if anchor.is_none() && semantic.is_none() {
        return Err(Error::EmptyBatch("total_loss_and_grad: both streams empty"));
    }

    let mut grad = vec![0.0; mapper.adapter().param_len()];
    let mut anchor_mse = None;
    let mut anchor_nce = None;
    let mut semantic_nce = None;

    if let Some((x_s, x_t)) = anchor {
        let (pred, trace) = mapper.forward_traced(x_s)?;
        check_same_shape("total_loss anchor", &pred, x_t)?;
        let mut d_pred = DenseMatrix::zeros(pred.rows(), pred.cols());
        if weights.alpha > 0.0 {
            let (mse, mse_g) = mse_loss_grad(&pred, x_t)?;
            anchor_mse = Some(mse);
            for (dst, src) in d_pred.data_mut().iter_mut().zip(mse_g.data()) {
                *dst += weights.lambda * weights.alpha * src;
            }
        }
        let (nce, nce_g) = info_nce_grad(&pred, x_t, weights.tau)?;
        anchor_nce = Some(nce);
        for (dst, src) in d_pred.data_mut().iter_mut().zip(nce_g.data()) {
            *dst += weights.lambda * src;
        }
        mapper.adapter().backward(&trace, &d_pred, &mut grad)?;
    }

    if let Some((x_s, c)) = semantic {
        let (pred, trace) = mapper.forward_traced(x_s)?;
        let (decoded, dec_trace) = decoder.forward_traced(&pred)?;
        let (nce, nce_g) = info_nce_grad(&decoded, c, weights.tau)?;
        semantic_nce = Some(nce);
        let d_pred = decoder.backward_input(&dec_trace, &nce_g)?;
        mapper.adapter().backward(&trace, &d_pred, &mut grad)?;
    }

    let report = LossReport::assemble(weights, anchor_mse, anchor_nce, semantic_nce);
    Ok((report, grad))
}

fn check_same_shape(op: &'static str, a: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            op,
            expected: format!("{}x{}", a.rows(), a.cols()),
            got: format!("{}x{}", b.rows(), b.cols()),
        });
    }
    Ok(())
}
