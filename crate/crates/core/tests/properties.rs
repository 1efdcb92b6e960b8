//! Property tests for the numeric kernels and loss invariances.

use ncal_core::loss::info_nce;
use ncal_core::model::{Adapter, ResidualAdapter};
use ncal_core::numerics::{
    l2_normalize, log_softmax_stable, matmul, pearson, DenseMatrix, RngState,
};
use proptest::prelude::*;

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0..50.0f64, len)
}

proptest! {
    #[test]
    fn log_softmax_is_shift_invariant(logits in finite_vec(7), c in -100.0..100.0f64) {
        let base = log_softmax_stable(&logits);
        let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
        let out = log_softmax_stable(&shifted);
        for (a, b) in base.iter().zip(&out) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn pearson_is_affine_invariant(
        u in finite_vec(9),
        v in finite_vec(9),
        a in 0.1..10.0f64,
        b in -20.0..20.0f64,
    ) {
        let base = pearson(&u, &v);
        prop_assume!(base.is_ok());
        let scaled: Vec<f64> = u.iter().map(|x| a * x + b).collect();
        let out = pearson(&scaled, &v).unwrap();
        prop_assert!((out - base.unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn matmul_identity_is_exact(seed in 0u64..1000) {
        let mut rng = RngState::new(seed);
        let m = ncal_core::numerics::gaussian_matrix(&mut rng, 4, 6, 1.0);
        let left = matmul(&DenseMatrix::identity(4), &m).unwrap();
        let right = matmul(&m, &DenseMatrix::identity(6)).unwrap();
        prop_assert_eq!(left, m.clone());
        prop_assert_eq!(right, m);
    }

    #[test]
    fn l2_normalize_has_unit_norm(v in finite_vec(8)) {
        prop_assume!(v.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-6);
        let out = l2_normalize(&v).unwrap();
        let norm: f64 = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn info_nce_row_rescaling_is_invariant(seed in 0u64..500, c in prop::sample::select(vec![0.1f64, 10.0])) {
        let mut rng = RngState::new(seed);
        let pred = ncal_core::numerics::gaussian_matrix(&mut rng, 4, 6, 1.0);
        let tgt = ncal_core::numerics::gaussian_matrix(&mut rng, 4, 6, 1.0);
        let base = info_nce(&pred, &tgt, 0.1).unwrap();
        let scaled = DenseMatrix::from_vec(
            4,
            6,
            pred.data().iter().map(|v| v * c).collect(),
        ).unwrap();
        let out = info_nce(&scaled, &tgt, 0.1).unwrap();
        prop_assert!((out - base).abs() <= 1e-10);
    }

    #[test]
    fn adapter_flatten_unflatten_round_trips(seed in 0u64..500) {
        let mut rng = RngState::new(seed);
        let mut ra = ResidualAdapter::init(5, 6, &mut rng);
        ra.w3 = ncal_core::numerics::gaussian_matrix(&mut rng, 5, 6, 0.5);
        ra.b3 = ncal_core::numerics::gaussian_sample(&mut rng, 5);
        let ad = Adapter::Mlp(ra);
        let flat = ad.flatten();
        let back = ad.with_params(&flat).unwrap();
        prop_assert_eq!(back.flatten(), flat);
        prop_assert_eq!(back, ad);
    }

    #[test]
    fn rng_same_seed_reproduces_and_distinct_seeds_differ(seed in 0u64..10_000) {
        let mut a = RngState::new(seed);
        let mut b = RngState::new(seed);
        let va: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let vb: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        prop_assert_eq!(&va, &vb);
        let mut c = RngState::new(seed.wrapping_add(1));
        let vc: Vec<u64> = (0..16).map(|_| c.next_u64()).collect();
        prop_assert_ne!(va, vc);
    }
}
