use gsb_core::binarize::Precision;
use gsb_core::bitops::{count_ops, ModelShape, OpsMode};
use gsb_core::harness::data::gen_synthetic;
use gsb_core::model::{AttnMode, Checkpoint, ModelConfig, Stage, Vit};
use gsb_core::oracle::dense_reference_forward;
use gsb_core::Parameters;
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_images(cfg: &ModelConfig, b: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = cfg.in_channels * cfg.image_size * cfg.image_size;
    Array2::from_shape_fn((b, len), |_| rng.random_range(-1.0..1.0))
}

fn max_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn perturb_gsb_params(model: &mut Vit, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.visit_params_mut("", &mut |name, p| {
        if name.ends_with("phi") || name.ends_with("omega") {
            p.value.mapv_inplace(|_| rng.random_range(-0.02..0.02));
        }
    });
}

#[test]
fn stage1_matches_dense_reference() {
    for mode in [AttnMode::Gsb, AttnMode::Baseline] {
        let cfg = ModelConfig {
            attn_mode: mode,
            ..ModelConfig::default()
        };
        let mut model = Vit::new(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = random_images(&cfg, 3, 2);
        for precision in [Precision::Full, Precision::WeightsOnly] {
            let got = model.forward(&x.view(), precision).unwrap().0.logits();
            let want = dense_reference_forward(&model, &x.view(), precision).unwrap();
            assert!(max_diff(&got, &want) < 1e-5, "{mode:?} {precision:?}");
        }
    }
}

#[test]
fn stage2_bit_kernels_match_dense_reference() {
    for (mode, k, distill) in [
        (AttnMode::Gsb, 2, false),
        (AttnMode::Gsb, 0, false),
        (AttnMode::Gsb, 3, true),
        (AttnMode::Baseline, 2, false),
    ] {
        let cfg = ModelConfig {
            attn_mode: mode,
            k_a: k,
            k_v: k,
            distill_token: distill,
            ..ModelConfig::default()
        };
        for seed in 0..6 {
            let mut model = Vit::new(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            perturb_gsb_params(&mut model, seed + 100);
            let x = random_images(&cfg, 4, seed + 200);
            model.calibrate(&x.view()).unwrap();
            let got = model.forward(&x.view(), Precision::Binary).unwrap().0.logits();
            let want = dense_reference_forward(&model, &x.view(), Precision::Binary).unwrap();
            let err = max_diff(&got, &want);
            assert!(err < 1e-4, "{mode:?} k={k} seed={seed}: {err}");
        }
    }
}

#[test]
fn zero_input_gives_classifier_bias() {
    let cfg = ModelConfig::default();
    let mut model = Vit::new(&cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    model.tokens.value.fill(0.0);
    model.pos.value.fill(0.0);
    model.head.bias.value = ndarray::arr1(&[0.25, -0.5]).into_dyn();
    let x = Array2::zeros((2, 3 * 8 * 8));
    for precision in [Precision::Full, Precision::WeightsOnly] {
        let out = model.forward(&x.view(), precision).unwrap().0.logits();
        for row in out.axis_iter(Axis(0)) {
            assert_eq!(row.to_vec(), vec![0.25, -0.5]);
        }
    }
}

#[test]
fn logits_stay_finite_on_random_inputs() {
    let cfg = ModelConfig {
        blocks: 1,
        ..ModelConfig::default()
    };
    let mut model = Vit::new(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let x = random_images(&cfg, 100, 8);
    model.calibrate(&x.slice(ndarray::s![0..10, ..])).unwrap();
    for precision in [Precision::Full, Precision::WeightsOnly, Precision::Binary] {
        let out = model.forward(&x.view(), precision).unwrap().0.logits();
        assert!(out.iter().all(|v| v.is_finite()), "{precision:?}");
    }
}

#[test]
fn forward_tally_matches_accountant() {
    for mode in [AttnMode::Gsb, AttnMode::Baseline] {
        let cfg = ModelConfig {
            attn_mode: mode,
            ..ModelConfig::default()
        };
        let mut model = Vit::new(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let x = random_images(&cfg, 1, 10);
        let shape = ModelShape {
            tokens: cfg.tokens(),
            dim: cfg.dim,
            mlp_ratio: cfg.mlp_ratio,
            blocks: cfg.blocks,
            heads: cfg.heads,
            k_a: cfg.k_a,
            k_v: cfg.k_v,
        };
        let binary = if mode == AttnMode::Gsb {
            OpsMode::GsbBinary
        } else {
            OpsMode::BaselineBinary
        };
        for (precision, ops_mode) in [(Precision::Binary, binary), (Precision::Full, OpsMode::FullPrecision)] {
            let tallies = model.count_forward_ops(&x.view(), precision).unwrap();
            let report = count_ops(shape, ops_mode);
            assert_eq!(tallies.len(), cfg.blocks);
            for t in &tallies {
                assert!(t.attention.same_counts(&report.per_block.attention), "{mode:?} {precision:?}");
                assert!(t.mlp.same_counts(&report.per_block.mlp), "{mode:?} {precision:?}");
            }
        }
    }
}

#[test]
fn full_precision_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        blocks: 1,
        dim: 8,
        heads: 2,
        distill_token: true,
        ..ModelConfig::default()
    };
    let mut model = Vit::new(&cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let x = random_images(&cfg, 2, 12);
    let labels = [0usize, 1];
    let loss = |m: &mut Vit| {
        let out = m.forward(&x.view(), Precision::Full).unwrap().0;
        let a = gsb_core::model::loss::cross_entropy(&out.cls.view(), &labels).unwrap().0;
        let b = gsb_core::model::loss::cross_entropy(&out.dist.unwrap().view(), &labels).unwrap().0;
        a + b
    };
    model.zero_grad();
    let (out, cache) = model.forward(&x.view(), Precision::Full).unwrap();
    let (_, g1) = gsb_core::model::loss::cross_entropy(&out.cls.view(), &labels).unwrap();
    let (_, g2) = gsb_core::model::loss::cross_entropy(&out.dist.as_ref().unwrap().view(), &labels).unwrap();
    model.backward(&cache, &g1, Some(&g2)).unwrap();

    let mut grads = Vec::new();
    model.visit_params("", &mut |n, p| grads.push((n, p.grad.clone())));
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let eps = 1e-6;
    let mut checked = 0;
    for (name, g) in &grads {
        if name.contains("act.") || name.contains("gsb_") || name.contains("_act") {
            continue; // unused at full precision
        }
        for _ in 0..3 {
            let i = rng.random_range(0..g.len());
            let bump = |m: &mut Vit, d: f64| {
                m.visit_params_mut("", &mut |n, p| {
                    if &n == name {
                        p.value.as_slice_mut().unwrap()[i] += d;
                    }
                })
            };
            bump(&mut model, eps);
            let up = loss(&mut model);
            bump(&mut model, -2.0 * eps);
            let down = loss(&mut model);
            bump(&mut model, eps);
            let fd = (up - down) / (2.0 * eps);
            let an = g.as_slice().unwrap()[i];
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "{name}[{i}]: fd {fd} vs {an}");
            checked += 1;
        }
    }
    assert!(checked > 30);
}

#[test]
fn checkpoint_keeps_latent_weights_and_reproduces_logits() {
    let cfg = ModelConfig::default();
    let mut model = Vit::new(&cfg, &mut ChaCha8Rng::seed_from_u64(14)).unwrap();
    let data = gen_synthetic(2, 4, 3, 8, 15).unwrap();
    model.calibrate(&data.images.view()).unwrap();
    model.round_to_f32();
    let ck = Checkpoint::from_model(&model, Stage::Stage2);
    // latent weights are stored, not their ±α view
    let (_, w) = ck.tensors.iter().find(|(n, _)| n == "blocks.0.attn.q.weight").unwrap();
    let mut distinct: Vec<f32> = w.iter().map(|v| v.abs()).collect();
    distinct.sort_by(f32::total_cmp);
    distinct.dedup();
    assert!(distinct.len() > 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let mut back = Checkpoint::load(&path).unwrap().to_model().unwrap();
    let a = model.forward(&data.images.view(), Precision::Binary).unwrap().0.logits();
    let b = back.forward(&data.images.view(), Precision::Binary).unwrap().0.logits();
    assert_eq!(a, b);
}

#[test]
fn attention_dump_round_trips() {
    let cfg = ModelConfig::default();
    let mut model = Vit::new(&cfg, &mut ChaCha8Rng::seed_from_u64(16)).unwrap();
    let x = random_images(&cfg, 2, 17);
    model.calibrate(&x.view()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("attn.bin");
    gsb_core::harness::commands::attn_dump(&mut model, &x, &path).unwrap();
    let tensors = gsb_core::harness::commands::read_attn_dump(&path).unwrap();
    let n = cfg.tokens();
    let names: Vec<&str> = tensors.iter().map(|(n, _)| n.as_str()).collect();
    assert!(names.contains(&"blocks.1.mask2"));
    for (_, t) in &tensors {
        assert_eq!(t.shape(), &[cfg.heads, n, n]);
    }
    // every mask row of the first block keeps at least its row maximum
    let (_, m) = tensors.iter().find(|(n, _)| n == "blocks.0.mask2").unwrap();
    for row in m.lanes(Axis(2)) {
        assert!(row.iter().any(|&v| v == 1.0));
    }
}
