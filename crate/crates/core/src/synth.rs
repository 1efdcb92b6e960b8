//! Synthetic multi-subject world with known ground truth.
//!
//! Stimuli are latent vectors z ~ N(0, I). The source subject responds
//! linearly (`x_s = D_s z + sigma_s e`), the target subject adds a smooth
//! low-rank nonlinear residual (`x_t = D_t z + scale * U tanh(V z) + sigma_t e`),
//! and the stimulus embedding is the normalized latent (`c = z / |z|`).
//! The residual is exactly the structure a linear cross-subject map cannot
//! absorb, which is what the adapter is asked to recover.
//!
//! The world also carries a frozen semantic decoder fitted against
//! noise-free (x_t, c) pairs from its own held-out stream, so decoded
//! predictions can be scored against embeddings.

use crate::model::{FrozenDecoder, LinearBackbone};
use crate::numerics::{
    cholesky_solve, gaussian_matrix, gaussian_sample, matmul, matmul_transpose_a,
    matmul_transpose_b, DenseMatrix, RngState,
};
use crate::optim::{adam_step, AdamState};
use crate::{Error, Result};

/// Generative model configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub d_s: usize,
    pub d_t: usize,
    pub d_c: usize,
    /// Rank of the nonlinear residual generators.
    pub k_res: usize,
    pub sigma_s: f64,
    pub sigma_t: f64,
    pub residual_scale: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    /// Desk-scale benchmark world: runs the full pipeline in seconds.
    fn default() -> Self {
        Self {
            d_s: 256,
            d_t: 224,
            d_c: 64,
            k_res: 8,
            sigma_s: 0.05,
            sigma_t: 0.05,
            residual_scale: 1.0,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_s == 0 || self.d_t == 0 || self.d_c == 0 {
            return Err(Error::InvalidConfig(
                "world dims d_s, d_t, d_c must all be >= 1".to_string(),
            ));
        }
        if self.k_res > self.d_t.min(self.d_c) {
            return Err(Error::InvalidConfig(format!(
                "world.k_res {} exceeds min(d_t, d_c) = {}",
                self.k_res,
                self.d_t.min(self.d_c)
            )));
        }
        for (name, v) in [
            ("world.sigma_s", self.sigma_s),
            ("world.sigma_t", self.sigma_t),
            ("world.residual_scale", self.residual_scale),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Sampled generative model: encoders, residual generators and the frozen
/// decoder fitted to this world.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    /// Source encoder, d_s x d_c.
    pub source_encoder: DenseMatrix,
    /// Target linear encoder, d_t x d_c.
    pub target_encoder: DenseMatrix,
    /// Residual generators: u is d_t x k_res, v is k_res x d_c.
    pub residual_u: DenseMatrix,
    pub residual_v: DenseMatrix,
    pub decoder: FrozenDecoder,
}

/// Split sizes for one dataset draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetSizes {
    pub n_pretrain: usize,
    pub n_unpaired: usize,
    pub m_fewshot: usize,
    pub n_test: usize,
}

impl Default for DatasetSizes {
    fn default() -> Self {
        Self {
            n_pretrain: 2000,
            n_unpaired: 2000,
            m_fewshot: 64,
            n_test: 500,
        }
    }
}

/// All splits of one sampled dataset, dimension-consistent with the world.
///
/// Few-shot and test stimuli come from disjoint stimulus index ranges; the
/// recorded indices make that checkable. Test latents are kept so tests can
/// evaluate the generative oracle on the held-out set.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub pretrain_source: DenseMatrix,
    pub pretrain_target: DenseMatrix,
    pub unpaired_source: DenseMatrix,
    pub unpaired_embeddings: DenseMatrix,
    pub fewshot_source: DenseMatrix,
    pub fewshot_target: DenseMatrix,
    pub fewshot_indices: Vec<usize>,
    pub test_source: DenseMatrix,
    pub test_target: DenseMatrix,
    pub test_embeddings: DenseMatrix,
    pub test_indices: Vec<usize>,
    pub test_latents: DenseMatrix,
}

impl DatasetBundle {
    /// Restriction of the bundle to the first `k` few-shot anchors.
    ///
    /// Smaller shot counts are prefixes of larger ones, so adding anchors is
    /// the only thing that changes across a shot sweep.
    pub fn fewshot_prefix(&self, k: usize) -> Result<DatasetBundle> {
        if k > self.fewshot_source.rows() {
            return Err(Error::InvalidConfig(format!(
                "requested {k} shots but only {} paired stimuli are available",
                self.fewshot_source.rows()
            )));
        }
        let take = |m: &DenseMatrix| {
            let idx: Vec<usize> = (0..k).collect();
            crate::optim::gather_rows(m, &idx)
        };
        Ok(DatasetBundle {
            pretrain_source: self.pretrain_source.clone(),
            pretrain_target: self.pretrain_target.clone(),
            unpaired_source: self.unpaired_source.clone(),
            unpaired_embeddings: self.unpaired_embeddings.clone(),
            fewshot_source: take(&self.fewshot_source),
            fewshot_target: take(&self.fewshot_target),
            fewshot_indices: self.fewshot_indices[..k].to_vec(),
            test_source: self.test_source.clone(),
            test_target: self.test_target.clone(),
            test_embeddings: self.test_embeddings.clone(),
            test_indices: self.test_indices.clone(),
            test_latents: self.test_latents.clone(),
        })
    }
}

/// Latent-warp strength of the chart-distortion residual channels (columns
/// after the first). Each such column is the encoder image of its own tanh
/// direction, so it bends the latent chart the decoder reads; a decoder
/// fitted on the bent manifold provably cannot cancel the backbone's
/// missing nonlinear part along these channels, which is what corrupts
/// decoded embeddings at the frozen stage.
const RESIDUAL_WARP: f64 = 0.7;
/// Argument gain of the warp channels' tanh, driving them into saturation
/// so most of their energy is invisible to the linear backbone.
const RESIDUAL_WARP_SHARPNESS: f64 = 2.5;

/// Samples the world deterministically from its spec.
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let root = RngState::new(spec.seed);
    let mut rng = root.fork(0x776f_726c); // world parameters
    let source_encoder = gaussian_matrix(&mut rng, spec.d_s, spec.d_c, 1.0 / (spec.d_c as f64).sqrt());
    let target_encoder = gaussian_matrix(&mut rng, spec.d_t, spec.d_c, 1.0 / (spec.d_c as f64).sqrt());
    let mut residual_u = gaussian_matrix(
        &mut rng,
        spec.d_t,
        spec.k_res.max(1),
        1.0 / (spec.k_res.max(1) as f64).sqrt(),
    );
    let mut residual_v = gaussian_matrix(
        &mut rng,
        spec.k_res.max(1),
        spec.d_c,
        1.0 / (spec.d_c as f64).sqrt(),
    );
    // Unit-normalize each tanh direction so the nonlinear (linearly
    // unexplainable) fraction of every residual channel is seed-stable.
    for j in 0..spec.k_res.max(1) {
        let row: Vec<f64> = (0..spec.d_c).map(|c| residual_v.get(j, c)).collect();
        let unit = crate::numerics::l2_normalize(&row)?;
        for (c, vc) in unit.iter().enumerate() {
            residual_v.set(j, c, *vc);
        }
    }
    // Columns after the first become warp channels: the encoder image of
    // the channel's own (sharpened) tanh direction, scaled so the latent
    // shift is RESIDUAL_WARP at the configured residual_scale. The first
    // column stays as drawn and carries plain voxel-space error.
    if spec.residual_scale > 0.0 {
        for j in 1..spec.k_res {
            let v_unit: Vec<f64> = (0..spec.d_c).map(|c| residual_v.get(j, c)).collect();
            let gain = RESIDUAL_WARP / spec.residual_scale;
            for i in 0..spec.d_t {
                let mut acc = 0.0;
                for (c, vc) in v_unit.iter().enumerate() {
                    acc += target_encoder.get(i, c) * vc;
                }
                residual_u.set(i, j, gain * acc);
            }
            for (c, vc) in v_unit.iter().enumerate() {
                residual_v.set(j, c, RESIDUAL_WARP_SHARPNESS * vc);
            }
        }
    }
    let mut world = World {
        spec: spec.clone(),
        source_encoder,
        target_encoder,
        residual_u,
        residual_v,
        // Placeholder; replaced by the fit below.
        decoder: FrozenDecoder::new(
            DenseMatrix::zeros(spec.d_c, spec.d_t),
            vec![0.0; spec.d_c],
            DenseMatrix::zeros(spec.d_c, spec.d_c),
            vec![0.0; spec.d_c],
        )?,
    };
    let mut fit_rng = root.fork(0x6465_636f); // decoder fitting stream
    world.decoder = fit_decoder(&world, &mut fit_rng)?;
    Ok(world)
}

impl World {
    /// Noise-free target responses for the given latent batch:
    /// `D_t z + scale * U tanh(V z)`.
    pub fn oracle_target(&self, latents: &DenseMatrix) -> Result<DenseMatrix> {
        let linear = matmul_transpose_b(latents, &self.target_encoder)?;
        if self.spec.residual_scale == 0.0 {
            return Ok(linear);
        }
        let mut hidden = matmul_transpose_b(latents, &self.residual_v)?;
        for v in hidden.data_mut() {
            *v = v.tanh();
        }
        let mut residual = matmul_transpose_b(&hidden, &self.residual_u)?;
        for v in residual.data_mut() {
            *v *= self.spec.residual_scale;
        }
        linear.add(&residual)
    }

    /// Noise-free source responses `D_s z`.
    pub fn oracle_source(&self, latents: &DenseMatrix) -> Result<DenseMatrix> {
        matmul_transpose_b(latents, &self.source_encoder)
    }

    /// Little-endian image of all generative parameters (decoder included).
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = self.source_encoder.to_le_bytes();
        out.extend(self.target_encoder.to_le_bytes());
        out.extend(self.residual_u.to_le_bytes());
        out.extend(self.residual_v.to_le_bytes());
        out.extend(self.decoder.to_le_bytes());
        out
    }
}

/// Draws all splits, one stimulus at a time, from the given RNG.
///
/// Pretrain, unpaired, few-shot and test stimuli occupy consecutive global
/// index ranges, so the few-shot and test sets are disjoint by construction.
pub fn sample_dataset(
    world: &World,
    sizes: &DatasetSizes,
    rng: &mut RngState,
) -> Result<DatasetBundle> {
    let spec = &world.spec;
    let total = sizes.n_pretrain + sizes.n_unpaired + sizes.m_fewshot + sizes.n_test;

    let mut latents = DenseMatrix::zeros(total, spec.d_c);
    let mut x_s = DenseMatrix::zeros(total, spec.d_s);
    let mut x_t = DenseMatrix::zeros(total, spec.d_t);
    let mut emb = DenseMatrix::zeros(total, spec.d_c);

    for i in 0..total {
        let z = gaussian_sample(rng, spec.d_c);
        let eps_s = gaussian_sample(rng, spec.d_s);
        let eps_t = gaussian_sample(rng, spec.d_t);
        latents.row_mut(i).copy_from_slice(&z);

        let zrow = DenseMatrix::from_raw(1, spec.d_c, z.clone());
        let src = world.oracle_source(&zrow)?;
        for (dst, (clean, noise)) in x_s
            .row_mut(i)
            .iter_mut()
            .zip(src.row(0).iter().zip(&eps_s))
        {
            *dst = clean + spec.sigma_s * noise;
        }
        let tgt = world.oracle_target(&zrow)?;
        for (dst, (clean, noise)) in x_t
            .row_mut(i)
            .iter_mut()
            .zip(tgt.row(0).iter().zip(&eps_t))
        {
            *dst = clean + spec.sigma_t * noise;
        }
        let c = crate::numerics::l2_normalize(&z)?;
        emb.row_mut(i).copy_from_slice(&c);
    }

    let slice_rows = |m: &DenseMatrix, start: usize, len: usize| {
        let idx: Vec<usize> = (start..start + len).collect();
        crate::optim::gather_rows(m, &idx)
    };

    let p0 = 0;
    let u0 = p0 + sizes.n_pretrain;
    let f0 = u0 + sizes.n_unpaired;
    let t0 = f0 + sizes.m_fewshot;

    Ok(DatasetBundle {
        pretrain_source: slice_rows(&x_s, p0, sizes.n_pretrain),
        pretrain_target: slice_rows(&x_t, p0, sizes.n_pretrain),
        unpaired_source: slice_rows(&x_s, u0, sizes.n_unpaired),
        unpaired_embeddings: slice_rows(&emb, u0, sizes.n_unpaired),
        fewshot_source: slice_rows(&x_s, f0, sizes.m_fewshot),
        fewshot_target: slice_rows(&x_t, f0, sizes.m_fewshot),
        fewshot_indices: (f0..f0 + sizes.m_fewshot).collect(),
        test_source: slice_rows(&x_s, t0, sizes.n_test),
        test_target: slice_rows(&x_t, t0, sizes.n_test),
        test_embeddings: slice_rows(&emb, t0, sizes.n_test),
        test_indices: (t0..t0 + sizes.n_test).collect(),
        test_latents: slice_rows(&latents, t0, sizes.n_test),
    })
}

/// Closed-form ridge weights without centering: solves
/// `(X^T X + rho I) W^T = X^T Y` and verifies the normal-equation residual.
pub fn ridge_solve(x: &DenseMatrix, y: &DenseMatrix, rho: f64) -> Result<DenseMatrix> {
    if x.rows() != y.rows() {
        return Err(Error::ShapeMismatch {
            op: "ridge_solve",
            expected: format!("{} rows", x.rows()),
            got: format!("{}", y.rows()),
        });
    }
    let xtx = matmul_transpose_a(x, x)?;
    let xty = matmul_transpose_a(x, y)?;
    let wt = cholesky_solve(&xtx, rho, &xty)?;

    // Residual of the normal equations, relative to the rhs scale.
    let mut lhs = matmul(&xtx, &wt)?;
    for (v, w) in lhs.data_mut().iter_mut().zip(wt.data()) {
        *v += rho * w;
    }
    let scale = xty
        .data()
        .iter()
        .fold(1.0f64, |acc, v| acc.max(v.abs()));
    let residual = lhs
        .data()
        .iter()
        .zip(xty.data())
        .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
    if residual > 1e-8 * scale {
        return Err(Error::SingularSystem);
    }
    Ok(wt.transpose())
}

/// Scale-aware default ridge penalty: 1e-3 times the mean diagonal of X^T X.
pub fn default_ridge_penalty(x: &DenseMatrix) -> f64 {
    if x.rows() == 0 || x.cols() == 0 {
        return 1e-3;
    }
    let mut diag_sum = 0.0;
    for j in 0..x.cols() {
        for i in 0..x.rows() {
            let v = x.get(i, j);
            diag_sum += v * v;
        }
    }
    1e-3 * diag_sum / x.cols() as f64
}

/// Fits the frozen coarse backbone by centered ridge regression on the
/// pretraining pairs. `rho = None` uses the scale-aware default.
pub fn pretrain_backbone(
    pretrain_source: &DenseMatrix,
    pretrain_target: &DenseMatrix,
    rho: Option<f64>,
) -> Result<LinearBackbone> {
    if pretrain_source.rows() != pretrain_target.rows() || pretrain_source.rows() == 0 {
        return Err(Error::ShapeMismatch {
            op: "pretrain_backbone",
            expected: "equal nonzero pretraining batch sizes".to_string(),
            got: format!(
                "{} and {}",
                pretrain_source.rows(),
                pretrain_target.rows()
            ),
        });
    }
    let (x_c, x_mean) = center_columns(pretrain_source);
    let (y_c, y_mean) = center_columns(pretrain_target);
    let rho = rho.unwrap_or_else(|| default_ridge_penalty(&x_c));
    let w = ridge_solve(&x_c, &y_c, rho)?;

    // b = y_mean - W x_mean.
    let mut b = y_mean.clone();
    for (j, bj) in b.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, xk) in x_mean.iter().enumerate() {
            acc += w.get(j, k) * xk;
        }
        *bj -= acc;
    }
    LinearBackbone::new(w, b)
}

fn center_columns(m: &DenseMatrix) -> (DenseMatrix, Vec<f64>) {
    let mut mean = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (acc, v) in mean.iter_mut().zip(m.row(r)) {
            *acc += v;
        }
    }
    let n = m.rows().max(1) as f64;
    for v in &mut mean {
        *v /= n;
    }
    let mut centered = m.clone();
    for r in 0..centered.rows() {
        for (v, mu) in centered.row_mut(r).iter_mut().zip(&mean) {
            *v -= mu;
        }
    }
    (centered, mean)
}

/// Decoder fitting constants. The decoder reads the voxel pattern through a
/// fixed random sensitivity profile (Gaussian rows in +/- pairs so GELU
/// rectification keeps sign information), then a ridge readout maps the
/// nonlinear features to the raw latent; the output normalization turns the
/// latent estimate into the unit-norm embedding. A short cosine-alignment
/// Adam run refines the whole stack before it is frozen. Because the front
/// end is not fitted, off-manifold prediction errors pass through to the
/// embedding instead of being projected out, which is what gives the
/// decoder an anisotropic Jacobian.
const DECODER_FIT_SAMPLES: usize = 768;
const DECODER_RANDOM_FEATURES: usize = 72;
const DECODER_FEATURE_GAIN: f64 = 1.0;
const DECODER_REFINE_STEPS: usize = 500;
const DECODER_REFINE_BATCH: usize = 128;
const DECODER_REFINE_LR: f64 = 1e-3;
/// Off-manifold sensitivity channels appended after refinement: directions
/// orthogonal to the response manifold get a fixed random readout, so
/// prediction errors leave an embedding trace instead of being projected
/// out. Their on-manifold activation is centered to zero, which keeps
/// decoder consistency on clean targets intact.
const DECODER_SENSITIVITY_ROWS: usize = 24;
const DECODER_SENSITIVITY_GAIN: f64 = 0.4;

/// Builds the world's frozen decoder from noise-free (x_t, c) pairs drawn
/// from the dedicated fitting stream (disjoint from every bundle split).
fn fit_decoder(world: &World, rng: &mut RngState) -> Result<FrozenDecoder> {
    let spec = &world.spec;
    let n = DECODER_FIT_SAMPLES;

    let mut latents = DenseMatrix::zeros(n, spec.d_c);
    for i in 0..n {
        let z = gaussian_sample(rng, spec.d_c);
        latents.row_mut(i).copy_from_slice(&z);
    }
    let x_fit = world.oracle_target(&latents)?;
    let mut c_fit = DenseMatrix::zeros(n, spec.d_c);
    for i in 0..n {
        let c = crate::numerics::l2_normalize(latents.row(i))?;
        c_fit.row_mut(i).copy_from_slice(&c);
    }

    // Fixed random sensitivity rows, in +/- pairs.
    let h_r = DECODER_RANDOM_FEATURES;
    let r = gaussian_matrix(rng, h_r, spec.d_t, DECODER_FEATURE_GAIN / (spec.d_t as f64).sqrt());
    let h_g = 2 * h_r;
    let mut w1 = DenseMatrix::zeros(h_g, spec.d_t);
    for row in 0..h_r {
        for col in 0..spec.d_t {
            let v = r.get(row, col);
            w1.set(row, col, v);
            w1.set(h_r + row, col, -v);
        }
    }
    let b1 = vec![0.0; h_g];

    // Ridge readout from GELU features to the raw latents. The decoder's
    // output normalization then turns a latent estimate into the unit-norm
    // embedding, so the readout target is z itself, not z/|z|.
    let mut feats = matmul_transpose_b(&x_fit, &w1)?;
    for v in feats.data_mut() {
        *v = crate::numerics::gelu(*v);
    }
    let (feats_c, feats_mean) = center_columns(&feats);
    let (z_c, z_mean) = center_columns(&latents);
    let w2 = ridge_solve(&feats_c, &z_c, default_ridge_penalty(&feats_c))?;
    let mut b2 = z_mean.clone();
    for (j, bj) in b2.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, fk) in feats_mean.iter().enumerate() {
            acc += w2.get(j, k) * fk;
        }
        *bj -= acc;
    }

    let mut decoder = FrozenDecoder::new(w1, b1, w2, b2)?;

    // Refinement: fixed-budget Adam on 1 - cos(decoded, c).
    let mut params = decoder.flatten();
    let mut state = AdamState::new(params.len());
    for _ in 0..DECODER_REFINE_STEPS {
        let mut idx = Vec::with_capacity(DECODER_REFINE_BATCH);
        for _ in 0..DECODER_REFINE_BATCH {
            idx.push(rng.next_index(n));
        }
        let xb = crate::optim::gather_rows(&x_fit, &idx);
        let cb = crate::optim::gather_rows(&c_fit, &idx);
        let (out, trace) = decoder.forward_traced(&xb)?;
        // d/dE of mean_i (1 - e_i . c_i) is -c_i / batch.
        let scale = -1.0 / idx.len() as f64;
        let d_out = DenseMatrix::from_raw(
            out.rows(),
            out.cols(),
            cb.data().iter().map(|v| v * scale).collect(),
        );
        let mut grad = vec![0.0; params.len()];
        decoder.backward_params(&trace, &d_out, &mut grad)?;
        adam_step(&mut params, &grad, &mut state, DECODER_REFINE_LR)?;
        decoder = decoder.with_params(&params)?;
    }

    append_sensitivity_channels(decoder, &x_fit, rng)
}

/// Extends the refined decoder with rows reading directions orthogonal to
/// the fitted response manifold, wired to a fixed random readout.
fn append_sensitivity_channels(
    decoder: FrozenDecoder,
    x_fit: &DenseMatrix,
    rng: &mut RngState,
) -> Result<FrozenDecoder> {
    let d_t = decoder.voxel_dim();
    let d_c = decoder.embed_dim();
    let p = DECODER_SENSITIVITY_ROWS.min(d_t.saturating_sub(1));
    if p == 0 || DECODER_SENSITIVITY_GAIN == 0.0 {
        return Ok(decoder);
    }

    let (x_c, x_mean) = center_columns(x_fit);
    let mut cov = matmul_transpose_a(&x_c, &x_c)?;
    let scale = 1.0 / x_fit.rows().max(1) as f64;
    for v in cov.data_mut() {
        *v *= scale;
    }
    let (_, vectors) = crate::numerics::symmetric_eigen(&cov)?;

    let h_old = decoder.w1.rows();
    let mut w1 = DenseMatrix::zeros(h_old + p, d_t);
    for r in 0..h_old {
        w1.row_mut(r).copy_from_slice(decoder.w1.row(r));
    }
    let mut b1 = decoder.b1.clone();
    for i in 0..p {
        // Lowest-variance directions first: true normals of the manifold.
        let dir = vectors.row(i);
        w1.row_mut(h_old + i).copy_from_slice(dir);
        b1.push(-crate::numerics::dot(dir, &x_mean));
    }

    let mut w2 = DenseMatrix::zeros(d_c, h_old + p);
    for r in 0..d_c {
        w2.row_mut(r)[..h_old].copy_from_slice(decoder.w2.row(r));
    }
    let bump = gaussian_matrix(rng, d_c, p, DECODER_SENSITIVITY_GAIN / (p as f64).sqrt());
    for r in 0..d_c {
        for c in 0..p {
            w2.set(r, h_old + c, bump.get(r, c));
        }
    }
    FrozenDecoder::new(w1, b1, w2, decoder.b2.clone())
}
