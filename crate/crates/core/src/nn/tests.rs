use super::*;
use crate::tensor::no_grad;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn input<T: Elem>(batch: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(vec![batch, 3, 32, 32], 0.0, 1.0, &mut rng)
}

fn all_configs() -> Vec<ModelConfig> {
    vec![
        ModelConfig::cnn(10, 1),
        ModelConfig::vit(10, 2),
        ModelConfig::mixer(10, 3),
        ModelConfig {
            class_token: true,
            ..ModelConfig::vit(10, 4)
        },
    ]
}

#[test]
fn forward_shapes_for_every_family() {
    for cfg in all_configs() {
        let model = build_model::<f32>(&cfg).unwrap();
        let logits = model.forward(&input(2, 0)).unwrap();
        assert_eq!(logits.shape(), vec![2, 10], "{:?}", cfg.family);
    }
}

#[test]
fn cnn_custom_widths_shape() {
    let cfg = ModelConfig {
        widths: [16, 32, 64, 128],
        ..ModelConfig::cnn(10, 0)
    };
    let model = build_model::<f32>(&cfg).unwrap();
    assert_eq!(model.forward(&input(2, 0)).unwrap().shape(), vec![2, 10]);
}

#[test]
fn even_split_boundaries() {
    assert_eq!(even_split(8), [2, 2, 2, 2]);
    assert_eq!(even_split(6), [2, 2, 1, 1]);
    assert_eq!(even_split(3), [1, 1, 1, 0]);
    // block counts differ by at most 1
    for depth in 1..=12 {
        let s = even_split(depth);
        assert_eq!(s.iter().sum::<usize>(), depth);
        assert!(s.iter().max().unwrap() - s.iter().min().unwrap() <= 1);
    }
}

#[test]
fn identical_seed_and_config_gives_identical_parameters() {
    for cfg in all_configs() {
        let a = build_model::<f32>(&cfg).unwrap();
        let b = build_model::<f32>(&cfg).unwrap();
        for ((na, pa), (nb, pb)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.to_vec(), pb.to_vec(), "param {na}");
        }
    }
}

#[test]
fn different_seeds_give_different_stage4_features() {
    let x = input::<f32>(2, 5);
    let a = build_model::<f32>(&ModelConfig::cnn(10, 1)).unwrap();
    let b = build_model::<f32>(&ModelConfig::cnn(10, 2)).unwrap();
    assert_ne!(
        a.stage_features(&x, 4).unwrap().to_vec(),
        b.stage_features(&x, 4).unwrap().to_vec()
    );
}

#[test]
fn zero_input_yields_finite_logits() {
    for cfg in all_configs() {
        let model = build_model::<f32>(&cfg).unwrap();
        let logits = model.forward(&Tensor::zeros(vec![2, 3, 32, 32])).unwrap();
        assert!(logits.to_vec().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    for cfg in all_configs() {
        let model = build_model::<f32>(&cfg).unwrap();
        let p = model.forward(&input(3, 1)).unwrap().softmax(1.0).unwrap();
        for row in p.to_vec().chunks(10) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn batch_independence() {
    for cfg in all_configs() {
        let model = build_model::<f32>(&cfg).unwrap();
        let x4 = input::<f32>(4, 9);
        let x1 = Tensor::from_vec(vec![1, 3, 32, 32], x4.to_vec()[..3 * 32 * 32].to_vec()).unwrap();
        let row4 = &model.forward(&x4).unwrap().to_vec()[..10];
        let row1 = model.forward(&x1).unwrap().to_vec();
        for (a, b) in row4.iter().zip(&row1) {
            assert!((a - b).abs() <= 1e-6, "{:?}: {a} vs {b}", cfg.family);
        }
    }
}

#[test]
fn cnn_stage_geometry() {
    let model = build_model::<f32>(&ModelConfig::cnn(10, 0)).unwrap();
    let x = input::<f32>(2, 0);
    assert_eq!(model.stage_features(&x, 1).unwrap().shape(), vec![2, 8, 32, 32]);
    assert_eq!(model.stage_features(&x, 4).unwrap().shape(), vec![2, 64, 4, 4]);
}

#[test]
fn token_stage_shapes() {
    let model = build_model::<f32>(&ModelConfig::vit(10, 0)).unwrap();
    let x = input::<f32>(2, 0);
    for i in 1..=4 {
        assert_eq!(model.stage_features(&x, i).unwrap().shape(), vec![2, 64, 32]);
    }
}

#[test]
fn stage4_plus_head_equals_forward_bit_exact() {
    for cfg in all_configs() {
        let model = build_model::<f32>(&cfg).unwrap();
        let x = input::<f32>(2, 3);
        let f4 = model.stage_features(&x, 4).unwrap();
        let via_head = model.head(&f4).unwrap().to_vec();
        let direct = model.forward(&x).unwrap().to_vec();
        assert_eq!(via_head, direct, "{:?}", cfg.family);
    }
}

#[test]
fn invalid_stage_index_is_rejected() {
    let model = build_model::<f32>(&ModelConfig::cnn(10, 0)).unwrap();
    assert!(model.stage_features(&input(1, 0), 0).is_err());
    assert!(model.stage_features(&input(1, 0), 5).is_err());
}

#[test]
fn geometry_mismatch_is_rejected() {
    let model = build_model::<f32>(&ModelConfig::cnn(10, 0)).unwrap();
    assert!(model.forward(&Tensor::zeros(vec![2, 3, 16, 16])).is_err());
    let cfg = ModelConfig {
        patch_size: 5,
        ..ModelConfig::vit(10, 0)
    };
    assert!(build_model::<f32>(&cfg).is_err());
}

#[test]
fn param_count_is_stable() {
    let a = build_model::<f32>(&ModelConfig::cnn(10, 7)).unwrap();
    let b = build_model::<f32>(&ModelConfig::cnn(10, 8)).unwrap();
    assert_eq!(a.param_count(), b.param_count());
    assert!(a.param_count() > 0);
}

#[test]
fn branches_emit_class_logits_for_every_family() {
    for cfg in all_configs() {
        let model = build_model::<f32>(&cfg).unwrap();
        let branched = attach_branches(model, &[1, 2, 3, 4]).unwrap();
        let (branch_logits, final_logits) = branched.forward_all(&input(2, 0)).unwrap();
        assert_eq!(branch_logits.len(), 4);
        for l in &branch_logits {
            assert_eq!(l.shape(), vec![2, 10]);
        }
        assert_eq!(final_logits.shape(), vec![2, 10]);
    }
}

#[test]
fn empty_or_invalid_branch_sets_are_rejected() {
    let model = build_model::<f32>(&ModelConfig::cnn(10, 0)).unwrap();
    assert!(attach_branches(model, &[]).is_err());
    let model = build_model::<f32>(&ModelConfig::cnn(10, 0)).unwrap();
    assert!(attach_branches(model, &[2, 2]).is_err());
    let model = build_model::<f32>(&ModelConfig::cnn(10, 0)).unwrap();
    assert!(attach_branches(model, &[5]).is_err());
}

#[test]
fn strip_attach_is_identity_on_backbone() {
    for cfg in all_configs() {
        let twin = build_model::<f32>(&cfg).unwrap();
        let model = build_model::<f32>(&cfg).unwrap();
        let pre_count = model.param_count();
        let branched = attach_branches(model, &[1, 3]).unwrap();
        assert!(branched.params().len() > branched.backbone.params().len());
        let stripped = strip_branches(branched);
        assert_eq!(stripped.param_count(), pre_count);
        for trial in 0..10 {
            let x = input::<f32>(2, 100 + trial);
            assert_eq!(
                stripped.forward(&x).unwrap().to_vec(),
                twin.forward(&x).unwrap().to_vec(),
                "{:?}",
                cfg.family
            );
        }
    }
}

#[test]
fn stripped_model_matches_never_branched_twin_exactly() {
    // 100 random inputs, 0 ulp difference
    let twin = build_model::<f32>(&ModelConfig::cnn(8, 11)).unwrap();
    let branched = attach_branches(build_model::<f32>(&ModelConfig::cnn(8, 11)).unwrap(), &[2]).unwrap();
    let stripped = strip_branches(branched);
    no_grad(|| {
        for trial in 0..100 {
            let x = input::<f32>(1, 1000 + trial);
            let a = stripped.forward(&x).unwrap().to_vec();
            let b = twin.forward(&x).unwrap().to_vec();
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    });
}

#[test]
fn forward_is_gradient_trackable() {
    let model = build_model::<f64>(&ModelConfig::cnn(4, 0)).unwrap();
    let logits = model.forward(&input(1, 0)).unwrap();
    let loss = logits.mul(&logits).unwrap().mean_all().unwrap();
    loss.backward().unwrap();
    let params = model.params();
    let with_grad = params.iter().filter(|(_, p)| p.grad().is_some()).count();
    assert!(with_grad > 0);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for cfg in all_configs() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model::<f32>(&cfg).unwrap();
        // perturb away from the seeded init so the load isn't trivially equal
        for (_, p) in model.params() {
            for v in p.data_mut().iter_mut() {
                *v += 0.125;
            }
        }
        save_model(&model, dir.path()).unwrap();
        let loaded = load_model::<f32>(dir.path()).unwrap();
        for ((na, pa), (nb, pb)) in model.params().iter().zip(loaded.params().iter()) {
            assert_eq!(na, nb);
            let (da, db) = (pa.to_vec(), pb.to_vec());
            assert_eq!(da.len(), db.len());
            for (x, y) in da.iter().zip(&db) {
                assert_eq!(x.to_bits(), y.to_bits(), "param {na}");
            }
        }
        let x = input::<f32>(2, 0);
        assert_eq!(
            model.forward(&x).unwrap().to_vec(),
            loaded.forward(&x).unwrap().to_vec()
        );
    }
}

#[test]
fn load_from_missing_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_model::<f32>(&dir.path().join("nope")),
        Err(Error::Missing(_))
    ));
}

#[test]
fn class_token_readout_differs_from_pooled() {
    let pooled = build_model::<f32>(&ModelConfig::vit(10, 5)).unwrap();
    let cls = build_model::<f32>(&ModelConfig {
        class_token: true,
        ..ModelConfig::vit(10, 5)
    })
    .unwrap();
    // class-token model carries one extra token through its stages
    let x = input::<f32>(2, 0);
    assert_eq!(cls.stage_features(&x, 1).unwrap().shape(), vec![2, 65, 32]);
    assert_eq!(pooled.stage_features(&x, 1).unwrap().shape(), vec![2, 64, 32]);
    assert!(cls.param_count() > pooled.param_count());
}
