//! Finite-difference gradient check on the tiny configuration, exposed as a
//! first-class command. The oracle side only ever evaluates the forward
//! loss; the analytic side is the production gradient path.

use crate::CliResult;
use ncal_core::loss::{total_loss, total_loss_and_grad, LossWeights, StreamBatches};
use ncal_core::model::{Adapter, Mapper, ResidualAdapter};
use ncal_core::numerics::{gaussian_matrix, RngState};
use ncal_core::optim::gather_rows;
use ncal_core::synth::{generate_world, pretrain_backbone, sample_dataset, DatasetSizes, WorldSpec};

/// Outcome of one full gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub params: usize,
    pub worst_rel: f64,
    pub worst_abs: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} parameters checked: worst relative error {:.3e} (tol {:.0e}), \
             worst near-zero absolute error {:.3e} (tol {:.0e}) -> {}",
            self.params,
            self.worst_rel,
            self.rel_tol,
            self.worst_abs,
            self.abs_tol,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

const FD_STEP: f64 = 1e-6;
const REL_TOL: f64 = 1e-4;
const ABS_TOL: f64 = 1e-8;
const NEAR_ZERO: f64 = 1e-8;

/// Central finite differences over every adapter parameter on the tiny
/// configuration (d_s=6, d_t=5, d_c=4, hidden 8, anchor batch 3, semantic
/// batch 4).
pub fn run_gradcheck(seed: u64) -> CliResult<GradCheckReport> {
    let spec = WorldSpec {
        d_s: 6,
        d_t: 5,
        d_c: 4,
        k_res: 2,
        sigma_s: 0.05,
        sigma_t: 0.05,
        residual_scale: 1.0,
        seed,
    };
    let world = generate_world(&spec)?;
    let sizes = DatasetSizes {
        n_pretrain: 64,
        n_unpaired: 16,
        m_fewshot: 3,
        n_test: 4,
    };
    let mut rng = RngState::new(seed).fork(0xda7a);
    let bundle = sample_dataset(&world, &sizes, &mut rng)?;
    let backbone = pretrain_backbone(&bundle.pretrain_source, &bundle.pretrain_target, None)?;

    // Randomize the output layer so gradients flow through every block.
    let mut adapter_rng = RngState::new(seed).fork(0x1a17);
    let mut ra = ResidualAdapter::init(5, 8, &mut adapter_rng);
    ra.w3 = gaussian_matrix(&mut adapter_rng, 5, 8, 0.3);
    let adapter = Adapter::Mlp(ra);

    let anchor_x = bundle.fewshot_source.clone();
    let anchor_t = bundle.fewshot_target.clone();
    let sem_idx: Vec<usize> = (0..4).collect();
    let sem_x = gather_rows(&bundle.unpaired_source, &sem_idx);
    let sem_c = gather_rows(&bundle.unpaired_embeddings, &sem_idx);
    let weights = LossWeights::default();

    let batches = StreamBatches {
        anchor: Some((&anchor_x, &anchor_t)),
        semantic: Some((&sem_x, &sem_c)),
    };
    let mapper = Mapper::residual(&backbone, &adapter)?;
    let (_, grad) = total_loss_and_grad(&mapper, &world.decoder, &batches, &weights)?;

    let flat = adapter.flatten();
    let mut worst_rel = 0.0f64;
    let mut worst_abs = 0.0f64;
    for k in 0..flat.len() {
        let mut plus = flat.clone();
        plus[k] += FD_STEP;
        let mut minus = flat.clone();
        minus[k] -= FD_STEP;
        let loss_at = |params: &[f64]| -> CliResult<f64> {
            let ad = adapter.with_params(params)?;
            let mapper = Mapper::residual(&backbone, &ad)?;
            Ok(total_loss(&mapper, &world.decoder, &batches, &weights)?.total)
        };
        let fd = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * FD_STEP);
        let analytic = grad[k];
        if analytic.abs() > NEAR_ZERO {
            worst_rel = worst_rel.max(((fd - analytic) / analytic).abs());
        } else {
            worst_abs = worst_abs.max((fd - analytic).abs());
        }
    }

    Ok(GradCheckReport {
        params: flat.len(),
        worst_rel,
        worst_abs,
        rel_tol: REL_TOL,
        abs_tol: ABS_TOL,
        passed: worst_rel <= REL_TOL && worst_abs <= ABS_TOL,
    })
}
