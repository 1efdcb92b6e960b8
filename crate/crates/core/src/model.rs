//! The cascade networks: frozen linear backbone, trainable adapter, frozen
//! semantic decoder, and the composed calibrated mapper.
//!
//! Forward passes return traces with the intermediate activations needed by
//! the hand-written backward passes in [`crate::loss`]. Only adapter
//! parameters ever receive gradients during calibration; the backbone and
//! decoder stay byte-identical.

use crate::numerics::{
    gelu_with_grad, l2_norm, matmul, matmul_transpose_a, matmul_transpose_b, DenseMatrix, RngState,
    EPS_NORM,
};
use crate::{Error, Result};

/// Flat view of trainable parameters in declared order.
pub type ParamVector = Vec<f64>;

/// Frozen linear cross-subject mapper: y = W x + b.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBackbone {
    /// Weight, target-dim x source-dim.
    pub w: DenseMatrix,
    /// Bias, one entry per target voxel.
    pub b: Vec<f64>,
}

impl LinearBackbone {
    pub fn new(w: DenseMatrix, b: Vec<f64>) -> Result<Self> {
        if w.rows() != b.len() {
            return Err(Error::ShapeMismatch {
                op: "LinearBackbone::new",
                expected: format!("bias of length {}", w.rows()),
                got: format!("{}", b.len()),
            });
        }
        Ok(Self { w, b })
    }

    pub fn source_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn target_dim(&self) -> usize {
        self.w.rows()
    }

    /// Maps a batch (one sample per row) into target voxel space.
    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.cols() != self.source_dim() {
            return Err(Error::ShapeMismatch {
                op: "backbone_forward",
                expected: format!("{} columns", self.source_dim()),
                got: format!("{}", x.cols()),
            });
        }
        let mut out = matmul_transpose_b(x, &self.w)?;
        add_bias_rows(&mut out, &self.b);
        Ok(out)
    }

    /// Little-endian image of all parameters, for frozen-state hashing.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = self.w.to_le_bytes();
        for v in &self.b {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// Three-layer GELU perceptron that learns the residual correction.
///
/// Parameter layout (the flatten order) is w1, b1, w2, b2, w3, b3.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualAdapter {
    pub w1: DenseMatrix,
    pub b1: Vec<f64>,
    pub w2: DenseMatrix,
    pub b2: Vec<f64>,
    pub w3: DenseMatrix,
    pub b3: Vec<f64>,
}

impl ResidualAdapter {
    /// Residual-style init on target voxel space: hidden layers get
    /// scaled-Gaussian weights (std sqrt(2/fan_in)), the output layer starts
    /// at exactly zero so the calibrated mapper coincides with the backbone.
    pub fn init(voxel_dim: usize, hidden: usize, rng: &mut RngState) -> Self {
        Self::init_dims(voxel_dim, hidden, voxel_dim, rng, false)
    }

    /// Init for the direct (no coarse stage) wiring: input is source voxel
    /// space and the output layer is random, since an all-zero prediction
    /// would be degenerate for the contrastive losses.
    pub fn init_direct(
        source_dim: usize,
        target_dim: usize,
        hidden: usize,
        rng: &mut RngState,
    ) -> Self {
        Self::init_dims(source_dim, hidden, target_dim, rng, true)
    }

    fn init_dims(
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut RngState,
        random_output: bool,
    ) -> Self {
        let w1 = crate::numerics::gaussian_matrix(rng, hidden, in_dim, (2.0 / in_dim as f64).sqrt());
        let w2 = crate::numerics::gaussian_matrix(rng, hidden, hidden, (2.0 / hidden as f64).sqrt());
        let w3 = if random_output {
            crate::numerics::gaussian_matrix(rng, out_dim, hidden, (2.0 / hidden as f64).sqrt())
        } else {
            DenseMatrix::zeros(out_dim, hidden)
        };
        Self {
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; hidden],
            w3,
            b3: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w3.rows()
    }
}

/// Single affine correction used by the linear-adapter ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearAdapter {
    pub w: DenseMatrix,
    pub b: Vec<f64>,
}

impl LinearAdapter {
    /// Zero-initialized, so the residual identity holds at step 0.
    pub fn init(voxel_dim: usize) -> Self {
        Self {
            w: DenseMatrix::zeros(voxel_dim, voxel_dim),
            b: vec![0.0; voxel_dim],
        }
    }
}

/// Trainable corrector: either the 3-layer MLP or its linear ablation.
#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    Mlp(ResidualAdapter),
    Linear(LinearAdapter),
}

/// Activations cached by [`Adapter::forward_traced`] for the backward pass.
#[derive(Debug, Clone)]
pub enum AdapterTrace {
    Mlp {
        input: DenseMatrix,
        g1: DenseMatrix,
        dg1: DenseMatrix,
        g2: DenseMatrix,
        dg2: DenseMatrix,
    },
    Linear {
        input: DenseMatrix,
    },
}

impl Adapter {
    pub fn in_dim(&self) -> usize {
        match self {
            Adapter::Mlp(a) => a.in_dim(),
            Adapter::Linear(a) => a.w.cols(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Adapter::Mlp(a) => a.out_dim(),
            Adapter::Linear(a) => a.w.rows(),
        }
    }

    /// Total number of trainable parameters.
    pub fn param_len(&self) -> usize {
        match self {
            Adapter::Mlp(a) => {
                a.w1.rows() * a.w1.cols()
                    + a.b1.len()
                    + a.w2.rows() * a.w2.cols()
                    + a.b2.len()
                    + a.w3.rows() * a.w3.cols()
                    + a.b3.len()
            }
            Adapter::Linear(a) => a.w.rows() * a.w.cols() + a.b.len(),
        }
    }

    pub fn forward(&self, z: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.forward_traced(z)?.0)
    }

    /// Forward pass that keeps the activations needed for backprop.
    pub fn forward_traced(&self, z: &DenseMatrix) -> Result<(DenseMatrix, AdapterTrace)> {
        if z.cols() != self.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "adapter_forward",
                expected: format!("{} columns", self.in_dim()),
                got: format!("{}", z.cols()),
            });
        }
        match self {
            Adapter::Mlp(a) => {
                let mut h1 = matmul_transpose_b(z, &a.w1)?;
                add_bias_rows(&mut h1, &a.b1);
                let (g1, dg1) = gelu_pair(&h1);
                let mut h2 = matmul_transpose_b(&g1, &a.w2)?;
                add_bias_rows(&mut h2, &a.b2);
                let (g2, dg2) = gelu_pair(&h2);
                let mut out = matmul_transpose_b(&g2, &a.w3)?;
                add_bias_rows(&mut out, &a.b3);
                let trace = AdapterTrace::Mlp {
                    input: z.clone(),
                    g1,
                    dg1,
                    g2,
                    dg2,
                };
                Ok((out, trace))
            }
            Adapter::Linear(a) => {
                let mut out = matmul_transpose_b(z, &a.w)?;
                add_bias_rows(&mut out, &a.b);
                Ok((out, AdapterTrace::Linear { input: z.clone() }))
            }
        }
    }

    /// Accumulates parameter gradients for `d_out = dL/d(adapter output)`
    /// into `grad`, which must have `param_len()` entries laid out in the
    /// flatten order. The adapter input is treated as constant.
    pub fn backward(&self, trace: &AdapterTrace, d_out: &DenseMatrix, grad: &mut [f64]) -> Result<()> {
        if grad.len() != self.param_len() {
            return Err(Error::ParamLength {
                expected: self.param_len(),
                got: grad.len(),
            });
        }
        match (self, trace) {
            (Adapter::Mlp(a), AdapterTrace::Mlp { input, g1, dg1, g2, dg2 }) => {
                let d_w3 = matmul_transpose_a(d_out, g2)?;
                let d_b3 = column_sums(d_out);
                let d_g2 = matmul(d_out, &a.w3)?;
                let d_h2 = hadamard(&d_g2, dg2);
                let d_w2 = matmul_transpose_a(&d_h2, g1)?;
                let d_b2 = column_sums(&d_h2);
                let d_g1 = matmul(&d_h2, &a.w2)?;
                let d_h1 = hadamard(&d_g1, dg1);
                let d_w1 = matmul_transpose_a(&d_h1, input)?;
                let d_b1 = column_sums(&d_h1);

                let mut off = accumulate(grad, 0, d_w1.data());
                off = accumulate(grad, off, &d_b1);
                off = accumulate(grad, off, d_w2.data());
                off = accumulate(grad, off, &d_b2);
                off = accumulate(grad, off, d_w3.data());
                off = accumulate(grad, off, &d_b3);
                debug_assert_eq!(off, grad.len());
                Ok(())
            }
            (Adapter::Linear(_), AdapterTrace::Linear { input }) => {
                let d_w = matmul_transpose_a(d_out, input)?;
                let d_b = column_sums(d_out);
                let mut off = accumulate(grad, 0, d_w.data());
                off = accumulate(grad, off, &d_b);
                debug_assert_eq!(off, grad.len());
                Ok(())
            }
            _ => Err(Error::ShapeMismatch {
                op: "adapter_backward",
                expected: "trace matching adapter kind".to_string(),
                got: "mismatched trace".to_string(),
            }),
        }
    }

    /// Flattens all trainable parameters in declared order.
    pub fn flatten(&self) -> ParamVector {
        let mut out = Vec::with_capacity(self.param_len());
        match self {
            Adapter::Mlp(a) => {
                out.extend_from_slice(a.w1.data());
                out.extend_from_slice(&a.b1);
                out.extend_from_slice(a.w2.data());
                out.extend_from_slice(&a.b2);
                out.extend_from_slice(a.w3.data());
                out.extend_from_slice(&a.b3);
            }
            Adapter::Linear(a) => {
                out.extend_from_slice(a.w.data());
                out.extend_from_slice(&a.b);
            }
        }
        out
    }

    /// Rebuilds an adapter of this shape from a flat parameter vector.
    pub fn with_params(&self, flat: &[f64]) -> Result<Adapter> {
        if flat.len() != self.param_len() {
            return Err(Error::ParamLength {
                expected: self.param_len(),
                got: flat.len(),
            });
        }
        match self {
            Adapter::Mlp(a) => {
                let mut off = 0;
                let w1 = take_matrix(flat, &mut off, a.w1.rows(), a.w1.cols());
                let b1 = take_vec(flat, &mut off, a.b1.len());
                let w2 = take_matrix(flat, &mut off, a.w2.rows(), a.w2.cols());
                let b2 = take_vec(flat, &mut off, a.b2.len());
                let w3 = take_matrix(flat, &mut off, a.w3.rows(), a.w3.cols());
                let b3 = take_vec(flat, &mut off, a.b3.len());
                Ok(Adapter::Mlp(ResidualAdapter { w1, b1, w2, b2, w3, b3 }))
            }
            Adapter::Linear(a) => {
                let mut off = 0;
                let w = take_matrix(flat, &mut off, a.w.rows(), a.w.cols());
                let b = take_vec(flat, &mut off, a.b.len());
                Ok(Adapter::Linear(LinearAdapter { w, b }))
            }
        }
    }
}

/// Frozen two-layer GELU decoder with unit-norm output rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenDecoder {
    pub w1: DenseMatrix,
    pub b1: Vec<f64>,
    pub w2: DenseMatrix,
    pub b2: Vec<f64>,
}

/// Activations cached by the decoder forward for input-gradient backprop.
#[derive(Debug, Clone)]
pub struct DecoderTrace {
    pub(crate) input: DenseMatrix,
    pub(crate) g1: DenseMatrix,
    pub(crate) dg1: DenseMatrix,
    pub(crate) norms: Vec<f64>,
    pub(crate) out: DenseMatrix,
}

impl FrozenDecoder {
    pub fn new(w1: DenseMatrix, b1: Vec<f64>, w2: DenseMatrix, b2: Vec<f64>) -> Result<Self> {
        if w1.rows() != b1.len() || w2.rows() != b2.len() || w2.cols() != w1.rows() {
            return Err(Error::ShapeMismatch {
                op: "FrozenDecoder::new",
                expected: "w1 h_g x d_t, b1 h_g, w2 d_c x h_g, b2 d_c".to_string(),
                got: format!(
                    "w1 {}x{}, b1 {}, w2 {}x{}, b2 {}",
                    w1.rows(),
                    w1.cols(),
                    b1.len(),
                    w2.rows(),
                    w2.cols(),
                    b2.len()
                ),
            });
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    pub fn voxel_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.rows()
    }

    /// Maps a voxel batch to unit-norm embeddings.
    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.forward_traced(x)?.0)
    }

    pub fn forward_traced(&self, x: &DenseMatrix) -> Result<(DenseMatrix, DecoderTrace)> {
        if x.cols() != self.voxel_dim() {
            return Err(Error::ShapeMismatch {
                op: "decoder_forward",
                expected: format!("{} columns", self.voxel_dim()),
                got: format!("{}", x.cols()),
            });
        }
        let mut h1 = matmul_transpose_b(x, &self.w1)?;
        add_bias_rows(&mut h1, &self.b1);
        let (g1, dg1) = gelu_pair(&h1);
        let mut y = matmul_transpose_b(&g1, &self.w2)?;
        add_bias_rows(&mut y, &self.b2);

        let mut norms = Vec::with_capacity(y.rows());
        for r in 0..y.rows() {
            let norm = l2_norm(y.row(r));
            if norm <= EPS_NORM {
                return Err(Error::DegenerateVector { norm });
            }
            norms.push(norm);
        }
        let mut out = y.clone();
        for r in 0..out.rows() {
            let norm = norms[r];
            for v in out.row_mut(r) {
                *v /= norm;
            }
        }
        let trace = DecoderTrace {
            input: x.clone(),
            g1,
            dg1,
            norms,
            out: out.clone(),
        };
        Ok((out, trace))
    }

    /// Gradient of the loss with respect to the decoder *input*, given the
    /// gradient with respect to its unit-norm output. Decoder parameters are
    /// frozen and receive nothing.
    pub fn backward_input(&self, trace: &DecoderTrace, d_out: &DenseMatrix) -> Result<DenseMatrix> {
        // Through the row normalization: dy = (de - (e . de) e) / |y|.
        let mut d_y = DenseMatrix::zeros(d_out.rows(), d_out.cols());
        for r in 0..d_out.rows() {
            let e = trace.out.row(r);
            let de = d_out.row(r);
            let proj: f64 = e.iter().zip(de).map(|(a, b)| a * b).sum();
            let norm = trace.norms[r];
            let row = d_y.row_mut(r);
            for i in 0..row.len() {
                row[i] = (de[i] - proj * e[i]) / norm;
            }
        }
        let d_g1 = matmul(&d_y, &self.w2)?;
        let d_h1 = hadamard(&d_g1, &trace.dg1);
        matmul(&d_h1, &self.w1)
    }

    /// Parameter gradients for the fitting stage in [`crate::synth`]; the
    /// decoder is only mutable before it is frozen into a world.
    pub(crate) fn backward_params(
        &self,
        trace: &DecoderTrace,
        d_out: &DenseMatrix,
        grad: &mut [f64],
    ) -> Result<()> {
        debug_assert_eq!(grad.len(), self.param_len());
        let mut d_y = DenseMatrix::zeros(d_out.rows(), d_out.cols());
        for r in 0..d_out.rows() {
            let e = trace.out.row(r);
            let de = d_out.row(r);
            let proj: f64 = e.iter().zip(de).map(|(a, b)| a * b).sum();
            let norm = trace.norms[r];
            let row = d_y.row_mut(r);
            for i in 0..row.len() {
                row[i] = (de[i] - proj * e[i]) / norm;
            }
        }
        let d_w2 = matmul_transpose_a(&d_y, &trace.g1)?;
        let d_b2 = column_sums(&d_y);
        let d_g1 = matmul(&d_y, &self.w2)?;
        let d_h1 = hadamard(&d_g1, &trace.dg1);
        let d_w1 = matmul_transpose_a(&d_h1, &trace.input)?;
        let d_b1 = column_sums(&d_h1);
        let mut off = accumulate(grad, 0, d_w1.data());
        off = accumulate(grad, off, &d_b1);
        off = accumulate(grad, off, d_w2.data());
        off = accumulate(grad, off, &d_b2);
        debug_assert_eq!(off, grad.len());
        Ok(())
    }

    pub(crate) fn param_len(&self) -> usize {
        self.w1.rows() * self.w1.cols()
            + self.b1.len()
            + self.w2.rows() * self.w2.cols()
            + self.b2.len()
    }

    pub(crate) fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.data());
        out.extend_from_slice(&self.b2);
        out
    }

    pub(crate) fn with_params(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.param_len() {
            return Err(Error::ParamLength {
                expected: self.param_len(),
                got: flat.len(),
            });
        }
        let mut off = 0;
        let w1 = take_matrix(flat, &mut off, self.w1.rows(), self.w1.cols());
        let b1 = take_vec(flat, &mut off, self.b1.len());
        let w2 = take_matrix(flat, &mut off, self.w2.rows(), self.w2.cols());
        let b2 = take_vec(flat, &mut off, self.b2.len());
        FrozenDecoder::new(w1, b1, w2, b2)
    }

    /// Little-endian image of all parameters, for frozen-state hashing.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = self.w1.to_le_bytes();
        for v in &self.b1 {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(self.w2.to_le_bytes());
        for v in &self.b2 {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// Borrowing view of the calibrated mapper.
///
/// The residual wiring computes `F(x) = z + A(z)` with `z` the backbone
/// output; the direct wiring (coarse-stage ablation) applies the adapter
/// straight to the source voxels.
#[derive(Debug, Clone, Copy)]
pub struct Mapper<'a> {
    backbone: Option<&'a LinearBackbone>,
    adapter: &'a Adapter,
}

impl<'a> Mapper<'a> {
    pub fn residual(backbone: &'a LinearBackbone, adapter: &'a Adapter) -> Result<Self> {
        if adapter.in_dim() != backbone.target_dim() || adapter.out_dim() != backbone.target_dim() {
            return Err(Error::ShapeMismatch {
                op: "Mapper::residual",
                expected: format!("adapter on {} target voxels", backbone.target_dim()),
                got: format!("{} -> {}", adapter.in_dim(), adapter.out_dim()),
            });
        }
        Ok(Self {
            backbone: Some(backbone),
            adapter,
        })
    }

    pub fn direct(adapter: &'a Adapter) -> Self {
        Self {
            backbone: None,
            adapter,
        }
    }

    pub fn adapter(&self) -> &Adapter {
        self.adapter
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.forward_traced(x)?.0)
    }

    /// Returns the prediction batch plus the adapter trace for backprop.
    pub fn forward_traced(&self, x: &DenseMatrix) -> Result<(DenseMatrix, AdapterTrace)> {
        match self.backbone {
            Some(bb) => {
                let z = bb.forward(x)?;
                let (corr, trace) = self.adapter.forward_traced(&z)?;
                let pred = z.add(&corr)?;
                Ok((pred, trace))
            }
            None => self.adapter.forward_traced(x),
        }
    }
}

fn add_bias_rows(m: &mut DenseMatrix, bias: &[f64]) {
    debug_assert_eq!(m.cols(), bias.len());
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Elementwise GELU activation and derivative of a pre-activation matrix.
fn gelu_pair(m: &DenseMatrix) -> (DenseMatrix, DenseMatrix) {
    let mut act = Vec::with_capacity(m.data().len());
    let mut dact = Vec::with_capacity(m.data().len());
    for &v in m.data() {
        let (a, d) = gelu_with_grad(v);
        act.push(a);
        dact.push(d);
    }
    (
        DenseMatrix::from_raw(m.rows(), m.cols(), act),
        DenseMatrix::from_raw(m.rows(), m.cols(), dact),
    )
}

/// Elementwise product.
fn hadamard(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    DenseMatrix::from_raw(a.rows(), a.cols(), data)
}

fn column_sums(m: &DenseMatrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

fn accumulate(grad: &mut [f64], offset: usize, src: &[f64]) -> usize {
    for (g, s) in grad[offset..offset + src.len()].iter_mut().zip(src) {
        *g += s;
    }
    offset + src.len()
}

fn take_matrix(flat: &[f64], off: &mut usize, rows: usize, cols: usize) -> DenseMatrix {
    let data = flat[*off..*off + rows * cols].to_vec();
    *off += rows * cols;
    DenseMatrix::from_raw(rows, cols, data)
}

fn take_vec(flat: &[f64], off: &mut usize, len: usize) -> Vec<f64> {
    let out = flat[*off..*off + len].to_vec();
    *off += len;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian_matrix, gelu};

    fn small_rng() -> RngState {
        RngState::new(99)
    }

    #[test]
    fn backbone_identity_and_bias_only() {
        let bb = LinearBackbone::new(DenseMatrix::identity(4), vec![0.0; 4]).unwrap();
        let mut rng = small_rng();
        let x = gaussian_matrix(&mut rng, 3, 4, 1.0);
        assert_eq!(bb.forward(&x).unwrap(), x);

        let bias = vec![1.5, -2.0, 0.25, 3.0];
        let bb = LinearBackbone::new(DenseMatrix::zeros(4, 4), bias.clone()).unwrap();
        let y = bb.forward(&x).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), bias.as_slice());
        }
    }

    #[test]
    fn backbone_matches_scalar_oracle() {
        let mut rng = small_rng();
        let w = gaussian_matrix(&mut rng, 3, 5, 1.0);
        let b = crate::numerics::gaussian_sample(&mut rng, 3);
        let x = gaussian_matrix(&mut rng, 4, 5, 1.0);
        let bb = LinearBackbone::new(w.clone(), b.clone()).unwrap();
        let y = bb.forward(&x).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = b[j];
                for k in 0..5 {
                    s += w.get(j, k) * x.get(i, k);
                }
                assert!((y.get(i, j) - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn adapter_zero_output_layer_gives_zero() {
        let mut rng = small_rng();
        let ad = Adapter::Mlp(ResidualAdapter::init(6, 8, &mut rng));
        let z = gaussian_matrix(&mut rng, 5, 6, 1.0);
        let out = ad.forward(&z).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adapter_all_zero_weights_yields_bias() {
        let mut ra = ResidualAdapter::init(4, 3, &mut small_rng());
        ra.w1 = DenseMatrix::zeros(3, 4);
        ra.w2 = DenseMatrix::zeros(3, 3);
        ra.b3 = vec![0.5, -1.0, 2.0, 0.0];
        let ad = Adapter::Mlp(ra);
        let z = DenseMatrix::zeros(2, 4);
        let out = ad.forward(&z).unwrap();
        for r in 0..2 {
            // gelu(0) = 0 through both hidden layers, so only b3 remains.
            assert_eq!(out.row(r), &[0.5, -1.0, 2.0, 0.0]);
        }
    }

    #[test]
    fn adapter_matches_scalar_loop_oracle() {
        let mut rng = small_rng();
        let mut ra = ResidualAdapter::init(3, 4, &mut rng);
        ra.w3 = gaussian_matrix(&mut rng, 3, 4, 0.5);
        ra.b1 = crate::numerics::gaussian_sample(&mut rng, 4);
        ra.b2 = crate::numerics::gaussian_sample(&mut rng, 4);
        ra.b3 = crate::numerics::gaussian_sample(&mut rng, 3);
        let z = gaussian_matrix(&mut rng, 2, 3, 1.0);
        let out = Adapter::Mlp(ra.clone()).forward(&z).unwrap();

        for i in 0..2 {
            let zi = z.row(i);
            let mut g1 = vec![0.0; 4];
            for h in 0..4 {
                let mut s = ra.b1[h];
                for k in 0..3 {
                    s += ra.w1.get(h, k) * zi[k];
                }
                g1[h] = gelu(s);
            }
            let mut g2 = vec![0.0; 4];
            for h in 0..4 {
                let mut s = ra.b2[h];
                for k in 0..4 {
                    s += ra.w2.get(h, k) * g1[k];
                }
                g2[h] = gelu(s);
            }
            for j in 0..3 {
                let mut s = ra.b3[j];
                for k in 0..4 {
                    s += ra.w3.get(j, k) * g2[k];
                }
                assert!((out.get(i, j) - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn mapper_residual_identity_at_init() {
        let mut rng = small_rng();
        let w = gaussian_matrix(&mut rng, 6, 5, 0.3);
        let b = crate::numerics::gaussian_sample(&mut rng, 6);
        let bb = LinearBackbone::new(w, b).unwrap();
        let ad = Adapter::Mlp(ResidualAdapter::init(6, 8, &mut rng));
        let mapper = Mapper::residual(&bb, &ad).unwrap();
        for _ in 0..100 {
            let x = gaussian_matrix(&mut rng, 1, 5, 1.0);
            let via_mapper = mapper.forward(&x).unwrap();
            let via_backbone = bb.forward(&x).unwrap();
            assert_eq!(via_mapper, via_backbone);
        }
    }

    #[test]
    fn decoder_rows_unit_norm_and_nonlinear() {
        let mut rng = small_rng();
        let dec = FrozenDecoder::new(
            gaussian_matrix(&mut rng, 4, 6, 0.5),
            crate::numerics::gaussian_sample(&mut rng, 4),
            gaussian_matrix(&mut rng, 3, 4, 0.5),
            crate::numerics::gaussian_sample(&mut rng, 3),
        )
        .unwrap();
        let x = gaussian_matrix(&mut rng, 5, 6, 1.0);
        let e = dec.forward(&x).unwrap();
        for r in 0..5 {
            assert!((l2_norm(e.row(r)) - 1.0).abs() <= 1e-12);
        }

        // Scaling the input changes the output of a nonlinear decoder.
        let mut x2 = x.clone();
        for v in x2.data_mut() {
            *v *= 2.0;
        }
        let e2 = dec.forward(&x2).unwrap();
        let diff: f64 = e
            .data()
            .iter()
            .zip(e2.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6, "decoder behaved linearly under rescaling");
    }

    #[test]
    fn decoder_matches_scalar_loop_oracle() {
        let mut rng = small_rng();
        let dec = FrozenDecoder::new(
            gaussian_matrix(&mut rng, 3, 4, 0.7),
            crate::numerics::gaussian_sample(&mut rng, 3),
            gaussian_matrix(&mut rng, 2, 3, 0.7),
            crate::numerics::gaussian_sample(&mut rng, 2),
        )
        .unwrap();
        let x = gaussian_matrix(&mut rng, 2, 4, 1.0);
        let e = dec.forward(&x).unwrap();
        for i in 0..2 {
            let xi = x.row(i);
            let mut g = vec![0.0; 3];
            for h in 0..3 {
                let mut s = dec.b1[h];
                for k in 0..4 {
                    s += dec.w1.get(h, k) * xi[k];
                }
                g[h] = gelu(s);
            }
            let mut y = vec![0.0; 2];
            for j in 0..2 {
                let mut s = dec.b2[j];
                for k in 0..3 {
                    s += dec.w2.get(j, k) * g[k];
                }
                y[j] = s;
            }
            let norm = l2_norm(&y);
            for j in 0..2 {
                assert!((e.get(i, j) - y[j] / norm).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn init_adapter_statistics_and_determinism() {
        let mut a = RngState::new(31);
        let mut b = RngState::new(31);
        let ad_a = ResidualAdapter::init(224, 256, &mut a);
        let ad_b = ResidualAdapter::init(224, 256, &mut b);
        assert_eq!(ad_a, ad_b);

        let vals = ad_a.w1.data();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let expected = (2.0 / 224.0f64).sqrt();
        assert!(
            (std - expected).abs() / expected < 0.10,
            "w1 std {std} vs expected {expected}"
        );
        assert!(ad_a.b1.iter().all(|&v| v == 0.0));
        assert!(ad_a.w3.data().iter().all(|&v| v == 0.0));
        assert!(ad_a.b3.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flatten_round_trip_and_length() {
        let mut rng = small_rng();
        let mut ra = ResidualAdapter::init(5, 8, &mut rng);
        ra.w3 = gaussian_matrix(&mut rng, 5, 8, 0.1);
        let ad = Adapter::Mlp(ra);
        let h = 8;
        let d = 5;
        assert_eq!(ad.param_len(), h * d + h + h * h + h + d * h + d);

        let flat = ad.flatten();
        let back = ad.with_params(&flat).unwrap();
        assert_eq!(back, ad);
        assert_eq!(back.flatten(), flat);

        // Perturbing one flat index changes exactly one parameter.
        let mut perturbed = flat.clone();
        perturbed[h * d + 3] += 1.0;
        let changed = ad.with_params(&perturbed).unwrap();
        match (changed, &ad) {
            (Adapter::Mlp(c), Adapter::Mlp(o)) => {
                assert_eq!(c.w1, o.w1);
                let diffs: Vec<usize> = c
                    .b1
                    .iter()
                    .zip(&o.b1)
                    .enumerate()
                    .filter(|(_, (x, y))| x != y)
                    .map(|(i, _)| i)
                    .collect();
                assert_eq!(diffs, vec![3]);
                assert_eq!(c.w2, o.w2);
                assert_eq!(c.w3, o.w3);
            }
            _ => unreachable!(),
        }

        assert!(matches!(
            ad.with_params(&flat[1..]),
            Err(Error::ParamLength { .. })
        ));
    }
}
