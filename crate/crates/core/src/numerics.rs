//! Dense double-precision linear algebra, activations and a seedable PRNG.
//!
//! Everything downstream (models, losses, the synthetic world) is built on
//! the kernels in this module, so they are deliberately plain: row-major
//! `f64` storage, explicit loops ordered for cache locality, and a
//! counter-based PRNG that reproduces bit-for-bit across platforms.

use crate::{Error, Result};

/// Norm threshold below which a vector is considered degenerate.
pub const EPS_NORM: f64 = 1e-12;
/// Variance threshold below which a sequence is considered constant.
pub const EPS_VAR: f64 = 1e-12;

/// Vectors are plain `f64` buffers; matrices carry their shape.
pub type DenseVector = Vec<f64>;

/// Row-major dense matrix of `f64` values.
///
/// Batches are stored one sample per row, weights one output unit per row.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Zero-filled matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Identity matrix of side `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, validating length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                expected: format!("{} values for {rows}x{cols}", rows * cols),
                got: format!("{}", data.len()),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "DenseMatrix::from_vec",
                index,
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Internal constructor for values produced by our own kernels.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Borrow row `r` as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    /// Transposed copy.
    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Elementwise sum with another matrix of identical shape.
    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "add",
                expected: format!("{}x{}", self.rows, self.cols),
                got: format!("{}x{}", other.rows, other.cols),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(DenseMatrix::from_raw(self.rows, self.cols, data))
    }

    /// True when every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Little-endian byte image of the payload, used for frozen-parameter
    /// hashing and checkpoint serialization.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// C = A * B with the usual inner-dimension requirement.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            expected: format!("inner dim {}", a.cols),
            got: format!("{}x{}", b.rows, b.cols),
        });
    }
    let (n, m) = (a.rows, b.cols);
    let mut data = vec![0.0; n * m];
    // i-k-j order: both B rows and C rows stream sequentially.
    for i in 0..n {
        let a_row = a.row(i);
        let c_row = &mut data[i * m..(i + 1) * m];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = b.row(p);
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += a_ip * bv;
            }
        }
    }
    Ok(DenseMatrix::from_raw(n, m, data))
}

/// C = A * B^T. A is n x k, B is m x k, result n x m.
///
/// This is the layout used by all layer forwards: batches are n x in and
/// weights are out x in, so activations come out as n x out. Internally B
/// is transposed once and the streaming i-k-j kernel is used; the per-entry
/// accumulation order (ascending k) matches the naive dot product, so
/// results are bit-identical to it.
pub fn matmul_transpose_b(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch {
            op: "matmul_transpose_b",
            expected: format!("shared dim {}", a.cols),
            got: format!("{}x{}", b.rows, b.cols),
        });
    }
    matmul(a, &b.transpose())
}

/// C = A^T * B. A is k x n, B is k x m, result n x m.
///
/// Used by the backward passes to accumulate weight gradients
/// (grad_out^T * activations).
pub fn matmul_transpose_a(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul_transpose_a",
            expected: format!("shared dim {}", a.rows),
            got: format!("{}x{}", b.rows, b.cols),
        });
    }
    let (n, m) = (a.cols, b.cols);
    let mut data = vec![0.0; n * m];
    for p in 0..a.rows {
        let a_row = a.row(p);
        let b_row = b.row(p);
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == 0.0 {
                continue;
            }
            let c_row = &mut data[i * m..(i + 1) * m];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += a_pi * bv;
            }
        }
    }
    Ok(DenseMatrix::from_raw(n, m, data))
}

/// Exact-erf GELU: x * Phi(x).
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// Derivative of the exact-erf GELU: Phi(x) + x * phi(x).
pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

/// GELU value and derivative together, sharing one CDF evaluation.
/// Produces exactly the same values as `gelu` and `gelu_grad`.
pub fn gelu_with_grad(x: f64) -> (f64, f64) {
    let cdf = normal_cdf(x);
    (x * cdf, cdf + x * normal_pdf(x))
}

/// Standard normal CDF via erfc, which keeps full precision in the left
/// tail where erf saturates to -1.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.3989422804014327;
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Euclidean norm of a slice.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dot product of equal-length slices.
pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Rescales `v` to unit norm, rejecting near-zero vectors.
pub fn l2_normalize(v: &[f64]) -> Result<DenseVector> {
    let norm = l2_norm(v);
    if norm <= EPS_NORM {
        return Err(Error::DegenerateVector { norm });
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Cosine similarity of two vectors, erroring on degenerate input.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    let nu = l2_norm(u);
    let nv = l2_norm(v);
    if nu <= EPS_NORM {
        return Err(Error::DegenerateVector { norm: nu });
    }
    if nv <= EPS_NORM {
        return Err(Error::DegenerateVector { norm: nv });
    }
    Ok(dot(u, v) / (nu * nv))
}

/// Numerically stable log-softmax via max shift.
pub fn log_softmax_stable(logits: &[f64]) -> DenseVector {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - max - log_sum).collect()
}

/// log(sum(exp(logits))) with max shift.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax via the stable log-softmax.
pub fn softmax_stable(logits: &[f64]) -> DenseVector {
    log_softmax_stable(logits).iter().map(|v| v.exp()).collect()
}

/// Pearson correlation of two equal-length sequences.
///
/// Requires length >= 2 and non-degenerate variance on both sides; the
/// result is clamped into [-1, 1] against round-off.
pub fn pearson(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.len() < 2 {
        return Err(Error::ShapeMismatch {
            op: "pearson",
            expected: "two equal-length sequences of length >= 2".to_string(),
            got: format!("{} and {}", u.len(), v.len()),
        });
    }
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let mut suu = 0.0;
    let mut svv = 0.0;
    let mut suv = 0.0;
    for (&x, &y) in u.iter().zip(v) {
        let du = x - mu;
        let dv = y - mv;
        suu += du * du;
        svv += dv * dv;
        suv += du * dv;
    }
    let var_u = suu / n;
    let var_v = svv / n;
    if var_u <= EPS_VAR {
        return Err(Error::DegenerateVariance { var: var_u });
    }
    if var_v <= EPS_VAR {
        return Err(Error::DegenerateVariance { var: var_v });
    }
    Ok((suv / (suu * svv).sqrt()).clamp(-1.0, 1.0))
}

/// Solves (A + rho*I) X = B for symmetric positive-definite A via Cholesky.
///
/// `a` must be square and symmetric; `b` has one right-hand side per column.
/// A non-positive pivot reports a singular system and suggests a ridge.
pub fn cholesky_solve(a: &DenseMatrix, rho: f64, b: &DenseMatrix) -> Result<DenseMatrix> {
    let n = a.rows;
    if a.cols != n || b.rows != n {
        return Err(Error::ShapeMismatch {
            op: "cholesky_solve",
            expected: format!("{n}x{n} system with {n}-row rhs"),
            got: format!("a {}x{}, b {}x{}", a.rows, a.cols, b.rows, b.cols),
        });
    }
    // Lower-triangular factor of A + rho*I.
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j) + if i == j { rho } else { 0.0 };
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::SingularSystem);
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    // Forward/back substitution per right-hand side.
    let m = b.cols;
    let mut x = vec![0.0; n * m];
    let mut y = vec![0.0; n];
    for col in 0..m {
        for i in 0..n {
            let mut s = b.get(i, col);
            for k in 0..i {
                s -= l[i * n + k] * y[k];
            }
            y[i] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[k * n + i] * x[k * m + col];
            }
            x[i * m + col] = s / l[i * n + i];
        }
    }
    Ok(DenseMatrix::from_raw(n, m, x))
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order paired with unit eigenvectors
/// stored as rows. Intended for small dense covariance matrices.
pub fn symmetric_eigen(a: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix)> {
    let n = a.rows;
    if a.cols != n {
        return Err(Error::ShapeMismatch {
            op: "symmetric_eigen",
            expected: "square matrix".to_string(),
            got: format!("{}x{}", a.rows, a.cols),
        });
    }
    let mut m = a.data.clone();
    // Eigenvector accumulator, starts as identity; rows become vectors.
    let mut v = DenseMatrix::identity(n);
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off.sqrt() <= 1e-14 * (1.0 + frobenius(&m)) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vpk = v.data[p * n + k];
                    let vqk = v.data[q * n + k];
                    v.data[p * n + k] = c * vpk - s * vqk;
                    v.data[q * n + k] = s * vpk + c * vqk;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[i * n + i]
            .partial_cmp(&m[j * n + j])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.row_mut(dst).copy_from_slice(v.row(src));
    }
    Ok((values, vectors))
}

fn frobenius(data: &[f64]) -> f64 {
    data.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Deterministic counter-based PRNG (splitmix64 core).
///
/// The same seed yields the same sequence on every platform, and the state
/// advances by a fixed increment per draw, so streams can be forked cheaply
/// for independent purposes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    seed: u64,
    state: u64,
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, state: seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this RNG's seed and a purpose tag.
    pub fn fork(&self, tag: u64) -> RngState {
        RngState::new(mix64(self.seed ^ mix64(tag.wrapping_add(GOLDEN_GAMMA))))
    }

    /// Next raw 64-bit draw.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform draw in the half-open interval [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in the half-open interval (0, 1].
    fn next_f64_open_zero(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in [0, bound).
    pub fn next_index(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        (self.next_u64() % bound as u64) as usize
    }

    /// One standard normal draw (Box-Muller, sine branch discarded).
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_f64_open_zero();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// `k` distinct indices drawn without replacement from [0, n).
    ///
    /// Partial Fisher-Yates over a fresh index array; order is the draw
    /// order, so prefixes of the same stream are nested.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        let k = k.min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.next_index(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}

/// `n` i.i.d. standard normal draws via Box-Muller.
///
/// Pairs are generated together; for odd `n` the final sine value is
/// discarded. Deterministic given the RNG state.
pub fn gaussian_sample(rng: &mut RngState, n: usize) -> DenseVector {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1 = rng.next_f64_open_zero();
        let u2 = rng.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(r * theta.cos());
        if out.len() < n {
            out.push(r * theta.sin());
        }
    }
    out
}

/// Gaussian matrix with entries scaled by `std`.
pub fn gaussian_matrix(rng: &mut RngState, rows: usize, cols: usize, std: f64) -> DenseMatrix {
    let mut data = gaussian_sample(rng, rows * cols);
    for v in &mut data {
        *v *= std;
    }
    DenseMatrix::from_raw(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    // Independent triple-loop product used as the matmul oracle.
    fn matmul_oracle(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
        let mut c = DenseMatrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                c.set(i, j, s);
            }
        }
        c
    }

    #[test]
    fn matmul_identity() {
        let m = DenseMatrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let i3 = DenseMatrix::identity(3);
        let i2 = DenseMatrix::identity(2);
        assert_eq!(matmul(&i3, &m).unwrap(), m);
        assert_eq!(matmul(&m, &i2).unwrap(), m);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let a = DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = DenseMatrix::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_against_triple_loop_oracle() {
        let mut rng = RngState::new(7);
        let a = gaussian_matrix(&mut rng, 5, 7, 1.0);
        let b = gaussian_matrix(&mut rng, 7, 3, 1.0);
        let c = matmul(&a, &b).unwrap();
        let oracle = matmul_oracle(&a, &b);
        for (x, y) in c.data().iter().zip(oracle.data()) {
            assert_close(*x, *y, 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = DenseMatrix::zeros(2, 3);
        let b = DenseMatrix::zeros(2, 3);
        assert!(matches!(
            matmul(&a, &b),
            Err(Error::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn transpose_variants_match_explicit_transpose() {
        let mut rng = RngState::new(11);
        let a = gaussian_matrix(&mut rng, 4, 6, 1.0);
        let b = gaussian_matrix(&mut rng, 5, 6, 1.0);
        let via_t = matmul(&a, &b.transpose()).unwrap();
        let direct = matmul_transpose_b(&a, &b).unwrap();
        for (x, y) in via_t.data().iter().zip(direct.data()) {
            assert_close(*x, *y, 1e-12);
        }

        let c = gaussian_matrix(&mut rng, 6, 4, 1.0);
        let d = gaussian_matrix(&mut rng, 6, 3, 1.0);
        let via_t = matmul(&c.transpose(), &d).unwrap();
        let direct = matmul_transpose_a(&c, &d).unwrap();
        for (x, y) in via_t.data().iter().zip(direct.data()) {
            assert_close(*x, *y, 1e-12);
        }
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert_close(gelu(10.0), 10.0, 1e-9);
        // High-precision erf evaluation: 1 * Phi(1) = 0.841344746...
        assert_close(gelu(1.0), 0.841345, 1e-5);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        let h = 1e-6;
        let mut x = -20.0;
        while x <= 20.0 {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            let an = gelu_grad(x);
            if an.abs() > 1e-9 {
                assert!(
                    ((fd - an) / an).abs() <= 1e-6,
                    "gelu_grad mismatch at x={x}: fd={fd}, analytic={an}"
                );
            } else {
                assert!((fd - an).abs() <= 1e-9, "gelu_grad tail mismatch at x={x}");
            }
            x += 0.25;
        }
    }

    #[test]
    fn l2_normalize_cases() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert_close(v[0], 0.6, 1e-15);
        assert_close(v[1], 0.8, 1e-15);

        let u = l2_normalize(&[1.0, 0.0]).unwrap();
        assert_eq!(u, vec![1.0, 0.0]);

        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn log_softmax_uniform_and_stability() {
        let out = log_softmax_stable(&[2.5, 2.5, 2.5, 2.5]);
        for v in &out {
            assert_close(*v, -(4.0f64.ln()), 1e-12);
        }

        let out = log_softmax_stable(&[1000.0, 0.0]);
        assert!(out[0] > -1e-12 && out[0] <= 0.0);
        assert_close(out[1], -1000.0, 1e-9);
        let sum: f64 = out.iter().map(|v| v.exp()).sum();
        assert_close(sum, 1.0, 1e-12);
    }

    #[test]
    fn pearson_cases() {
        let u = [1.0, 2.0, 3.0];
        assert_close(pearson(&u, &u).unwrap(), 1.0, 1e-15);
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        assert_close(pearson(&u, &neg).unwrap(), -1.0, 1e-15);
        // Direct formula evaluation: 3 / sqrt(2 * 14/3).
        assert_close(pearson(&u, &[1.0, 2.0, 4.0]).unwrap(), 0.98198, 1e-4);
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &u),
            Err(Error::DegenerateVariance { .. })
        ));
    }

    #[test]
    fn gaussian_sample_reproducible_and_standard() {
        let mut a = RngState::new(42);
        let mut b = RngState::new(42);
        let va = gaussian_sample(&mut a, 1000);
        let vb = gaussian_sample(&mut b, 1000);
        assert_eq!(va, vb);

        let mut c = RngState::new(43);
        assert_ne!(va, gaussian_sample(&mut c, 1000));

        let mut rng = RngState::new(2024);
        let v = gaussian_sample(&mut rng, 100_000);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "sample mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "sample variance {var}");

        let mut rng = RngState::new(7);
        let single = gaussian_sample(&mut rng, 1);
        assert_eq!(single.len(), 1);
        assert!(single[0].is_finite());
    }

    #[test]
    fn sample_without_replacement_is_distinct_and_nested() {
        let mut rng = RngState::new(5);
        let idx = rng.sample_without_replacement(64, 32);
        assert_eq!(idx.len(), 32);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 32);

        // Same stream state yields the same draw.
        let mut rng2 = RngState::new(5);
        assert_eq!(rng2.sample_without_replacement(64, 32), idx);

        // Cap beyond n returns everything.
        let mut rng3 = RngState::new(5);
        let all = rng3.sample_without_replacement(10, 32);
        let mut s = all.clone();
        s.sort_unstable();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn cholesky_solves_spd_system() {
        // A = M^T M + I is SPD.
        let mut rng = RngState::new(3);
        let m = gaussian_matrix(&mut rng, 6, 4, 1.0);
        let a = matmul_transpose_a(&m, &m).unwrap();
        let b = gaussian_matrix(&mut rng, 4, 2, 1.0);
        let x = cholesky_solve(&a, 1.0, &b).unwrap();
        // Residual (A + I) x - b should vanish.
        let mut a_plus = a.clone();
        for i in 0..4 {
            a_plus.set(i, i, a_plus.get(i, i) + 1.0);
        }
        let back = matmul(&a_plus, &x).unwrap();
        for (u, v) in back.data().iter().zip(b.data()) {
            assert_close(*u, *v, 1e-10);
        }
    }

    #[test]
    fn cholesky_rejects_singular() {
        // Rank-1 system with no ridge.
        let a = DenseMatrix::from_vec(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let b = DenseMatrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            cholesky_solve(&a, 0.0, &b),
            Err(Error::SingularSystem)
        ));
        assert!(cholesky_solve(&a, 1e-6, &b).is_ok());
    }

    #[test]
    fn symmetric_eigen_reconstructs() {
        // Known 2x2: eigenvalues of [[2,1],[1,2]] are 1 and 3.
        let a = DenseMatrix::from_vec(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let (vals, vecs) = symmetric_eigen(&a).unwrap();
        assert_close(vals[0], 1.0, 1e-12);
        assert_close(vals[1], 3.0, 1e-12);

        // Random SPD matrix: A v_i = lambda_i v_i and rows orthonormal.
        let mut rng = RngState::new(17);
        let g = gaussian_matrix(&mut rng, 8, 8, 1.0);
        let spd = matmul_transpose_a(&g, &g).unwrap();
        let (vals, vecs8) = symmetric_eigen(&spd).unwrap();
        for i in 0..8 {
            let vi = vecs8.row(i);
            for r in 0..8 {
                let av: f64 = (0..8).map(|c| spd.get(r, c) * vi[c]).sum();
                assert_close(av, vals[i] * vi[r], 1e-9);
            }
            for j in 0..8 {
                let dot_ij = dot(vecs8.row(i), vecs8.row(j));
                assert_close(dot_ij, if i == j { 1.0 } else { 0.0 }, 1e-10);
            }
        }
        // Ascending order.
        for w in vals.windows(2) {
            assert!(w[0] <= w[1] + 1e-12);
        }
        let _ = vecs;
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(matches!(
            DenseMatrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
    }
}
