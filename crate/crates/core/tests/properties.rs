use gsb_core::baseline_attn::{baseline_attn_binarize, stage2_gamma, GammaMode};
use gsb_core::binarize::{act_binarize_round, act_binarize_sign, weight_binarize, ActBinParams, ActKind};
use gsb_core::bitops::{count_ops, BitMatrix, ModelShape, OpsMode, TriStateMatrix};
use gsb_core::gsb_attention::threshold_coeffs;
use gsb_core::gsb_value::{gsb_value_forward, GsbValueState};
use gsb_core::harness::checks::long_tailed_attention;
use gsb_core::harness::data::subset_indices;
use gsb_core::model::{DistillConfig, ModelConfig};
use gsb_core::oracle::ls::value_problem;
use gsb_core::oracle::{attention_problem, brute_force_ls};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matrix(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-2.0..2.0))
}

proptest! {
    #[test]
    fn packed_rows_have_clean_padding(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..200) {
        let m = matrix(seed, rows, cols).mapv(|v| if v < 0.0 { -1.0 } else { 1.0 });
        let b = BitMatrix::pack(&m).unwrap();
        prop_assert!(b.padding_is_clean());
        prop_assert_eq!(b.unpack(), m);
    }

    #[test]
    fn tristate_signs_are_normalized(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..150) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Array2::from_shape_fn((rows, cols), |_| f64::from(rng.random_range(-1i8..=1)));
        let t = TriStateMatrix::from_dense(&m).unwrap();
        prop_assert!(t.signs_are_normalized());
        prop_assert_eq!(t.to_dense(), m);
    }

    #[test]
    fn full_mask_tristate_equals_bitmatrix(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..150) {
        let m = matrix(seed, rows, cols).mapv(|v| if v < 0.0 { -1.0 } else { 1.0 });
        let bits = BitMatrix::pack(&m).unwrap();
        let t = TriStateMatrix::from_bits(&bits);
        prop_assert!(t.mask_is_full());
        prop_assert_eq!(t.to_dense(), bits.unpack());
        prop_assert_eq!(t.to_bits().unwrap(), bits);
    }

    #[test]
    fn ops_identity(n in 1usize..300, heads in 1usize..8, per_head in 1usize..64, r in 1usize..6,
                    blocks in 1usize..13, k_a in 0usize..4, k_v in 0usize..4) {
        let shape = ModelShape { tokens: n, dim: heads * per_head, mlp_ratio: r, blocks, heads, k_a, k_v };
        for mode in OpsMode::ALL {
            let rep = count_ops(shape, mode);
            prop_assert_eq!(rep.ops, rep.bops as f64 / 64.0 + rep.flops as f64);
        }
    }

    #[test]
    fn weight_scale_is_mean_abs(seed in any::<u64>(), rows in 1usize..9, cols in 1usize..70) {
        let w = matrix(seed, rows, cols);
        let r = weight_binarize(&w).unwrap();
        let n = w.len() as f64;
        prop_assert!(r.alpha >= 0.0);
        prop_assert!((r.alpha - w.mapv(f64::abs).sum() / n).abs() < 1e-12);
        prop_assert!((r.w_mu - w.sum() / n).abs() < 1e-12);
    }

    #[test]
    fn activation_codes(seed in any::<u64>(), scale in 1e-3f64..5.0, bias in -1.0f64..1.0) {
        let x = matrix(seed, 4, 9);
        let (b, _) = act_binarize_sign(&x, &ActBinParams::new(ActKind::TypeB, scale, bias).unwrap()).unwrap();
        prop_assert!(b.iter().all(|&v| v == 1.0 || v == -1.0));
        let (a, _) = act_binarize_round(&x, &ActBinParams::new(ActKind::TypeA, scale, bias).unwrap()).unwrap();
        prop_assert!(a.iter().all(|&v| v == 1.0 || v == 0.0));
        prop_assert!(ActBinParams::new(ActKind::TypeB, -scale, bias).is_err());
    }

    #[test]
    fn threshold_schedule(k in 1usize..12) {
        let c = threshold_coeffs(k);
        prop_assert!(c[0] > 0.5);
        prop_assert!((c[k - 1] - 0.9).abs() < 1e-15);
        prop_assert!(c.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn value_components_are_masked_signs(seed in any::<u64>(), k in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Array3::from_shape_fn((2, 5, 4), |_| rng.random_range(-1.0..1.0));
        let state = GsbValueState::new(k, 2, 4);
        let out = gsb_value_forward(&v.view(), &state).unwrap();
        let cache = &out.cache;
        prop_assert!(cache.v_bin0.iter().all(|&s| s == 1.0 || s == -1.0));
        for (i, m) in cache.masks.iter().enumerate() {
            let c = threshold_coeffs(k)[i];
            for ((&x, &mi), &s) in cache.v0.iter().zip(m).zip(&cache.v_bin0) {
                let want = x > c * cache.v_max || x < c * cache.v_min;
                prop_assert_eq!(mi == 1.0, want);
                let part = s * mi;
                prop_assert!(part == 0.0 || part == s);
            }
        }
    }

    #[test]
    fn stage2_gamma_is_positive(seed in any::<u64>(), temp in 0.5f64..6.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = long_tailed_attention(&mut rng, 2, 6, temp);
        let out = baseline_attn_binarize(&a.view(), GammaMode::Stage2, 6).unwrap();
        if stage2_gamma(&a.view()).is_some() {
            prop_assert!(out.gamma > 0.0);
        }
    }

    #[test]
    fn least_squares_is_locally_optimal(seed in any::<u64>(), k in 1usize..3, j in 0usize..3, up in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = long_tailed_attention(&mut rng, 2, 6, 2.0);
        let v = Array3::from_shape_fn((2, 6, 3), |_| rng.random_range(-1.0..1.0));
        let delta = if up { 1e-3 } else { -1e-3 };
        for problem in [attention_problem(&a.view(), 0.2, k), value_problem(&v.view(), k)] {
            let sol = brute_force_ls(&problem).unwrap();
            let mut c = sol.coeffs.clone();
            let j = j.min(k);
            if problem.fixed[j].is_none() {
                c[j] += delta;
            }
            prop_assert!(sol.residual <= problem.residual(&c) + 1e-12);
        }
    }

    #[test]
    fn subsets_never_exceed_the_dataset(len in 0usize..500, take in 0usize..600, seed in any::<u64>()) {
        let r = subset_indices(len, Some(take), seed);
        if take > len {
            prop_assert!(r.is_err());
        } else {
            let idx = r.unwrap();
            prop_assert_eq!(idx.len(), take);
            prop_assert!(idx.iter().all(|&i| i < len));
        }
    }

    #[test]
    fn config_shape_rules(dim in 1usize..64, heads in 1usize..9, lambda in -1.0f64..2.0) {
        let cfg = ModelConfig { dim, heads, ..ModelConfig::default() };
        prop_assert_eq!(cfg.validate().is_ok(), dim % heads == 0);
        prop_assert_eq!(cfg.tokens(), 4 + 1);
        prop_assert_eq!(DistillConfig::new(lambda).is_ok(), (0.0..=1.0).contains(&lambda));
    }
}
