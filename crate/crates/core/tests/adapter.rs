use proptest::prelude::*;
use quadapt::adapter::{kernel_adapter_forward, linear_adapter_forward, quadratic_adapter_forward};
use quadapt::checkpoint;
use quadapt::harness::Trainable;
use quadapt::numerics::Activation;
use quadapt::{
    AdaptedModel, AdapterConfig, AdapterFamily, Architecture, BaseModel, KernelMap, LowRankQuadraticTerm, SparsityMask,
    Tape, Tensor,
};

fn mlp(dims: &[usize], seed: u64) -> BaseModel {
    BaseModel::new(
        Architecture::Mlp {
            dims: dims.to_vec(),
            activation: Activation::Gelu,
        },
        seed,
    )
    .unwrap()
}

fn convnext(seed: u64) -> BaseModel {
    BaseModel::new(
        Architecture::ConvnextTinyToy {
            channels: 4,
            blocks: 2,
            height: 5,
            width: 5,
        },
        seed,
    )
    .unwrap()
}

fn random_term(n: usize, m: usize, r: usize, seed: u64) -> LowRankQuadraticTerm {
    let mut rng = quadapt::rng::seeded(seed);
    LowRankQuadraticTerm::new(
        Tensor::uniform([r, n], -1.0, 1.0, &mut rng).unwrap(),
        Tensor::uniform([r, n], -1.0, 1.0, &mut rng).unwrap(),
        Tensor::uniform([m, r], -1.0, 1.0, &mut rng).unwrap(),
    )
    .unwrap()
}

/// Fills every adapter tensor with random values so the branch is live.
fn randomize(model: &mut AdaptedModel, seed: u64) {
    let mut rng = quadapt::rng::seeded(seed);
    let params = model.adapter_params_mut();
    for i in 0..params.len() {
        let shape = params.tensor(i).shape().to_vec();
        params
            .set(i, Tensor::uniform(shape, -0.5, 0.5, &mut rng).unwrap())
            .unwrap();
    }
}

fn all_configs(points: &[&str]) -> Vec<AdapterConfig> {
    vec![
        AdapterConfig::new(AdapterFamily::Linear, 3, points),
        AdapterConfig::new(AdapterFamily::Quadratic, 2, points),
        AdapterConfig::new(AdapterFamily::Quadratic, 4, points).with_mask(SparsityMask::Strided(2)),
        AdapterConfig::new(AdapterFamily::KernelQuadratic, 2, points).with_kernel(KernelMap::Rbf { gamma: 0.5 }),
        AdapterConfig::new(AdapterFamily::KernelQuadratic, 2, points)
            .with_kernel(KernelMap::Sigmoid { s: 1.0, c: 0.0 }),
    ]
}

#[test]
fn zero_b_up_gives_zero_output() {
    let mut rng = quadapt::rng::seeded(1);
    let a = Tensor::uniform([3, 5], -1.0, 1.0, &mut rng).unwrap();
    let x = Tensor::uniform([4, 5], -2.0, 2.0, &mut rng).unwrap();
    let out = linear_adapter_forward(&a, &Tensor::zeros([2, 3]).unwrap(), &x).unwrap();
    assert_eq!(out.shape(), &[4, 2]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn masked_forward_examples() {
    let t = random_term(5, 3, 2, 4);
    let x = Tensor::vector(vec![0.3, -1.2, 0.8, 1.9, -0.4]).unwrap();
    let plain = quadratic_adapter_forward(&t, None, &x).unwrap();
    let ones = quadratic_adapter_forward(&t, Some(&SparsityMask::Dense(vec![1, 1])), &x).unwrap();
    assert!(plain.bit_eq(&ones));

    let masked = quadratic_adapter_forward(&t, Some(&SparsityMask::Dense(vec![1, 0])), &x).unwrap();
    let mut b2 = t.b().data().to_vec();
    for v in &mut b2[5..] {
        *v = 123.0;
    }
    let perturbed = LowRankQuadraticTerm::new(t.a().clone(), Tensor::new([2, 5], b2).unwrap(), t.c().clone()).unwrap();
    let masked2 = quadratic_adapter_forward(&perturbed, Some(&SparsityMask::Dense(vec![1, 0])), &x).unwrap();
    assert!(masked.bit_eq(&masked2));

    assert!(quadratic_adapter_forward(&t, Some(&SparsityMask::Dense(vec![0, 0])), &x).is_err());
}

#[test]
fn fresh_attach_is_bitwise_noop() {
    let base = mlp(&[6, 5, 4], 2);
    let mut rng = quadapt::rng::seeded(3);
    let x = Tensor::uniform([10, 6], -2.0, 2.0, &mut rng).unwrap();
    let expected = base.forward(&x).unwrap();
    for cfg in all_configs(&["fc0", "fc1"]) {
        let model = AdaptedModel::attach(base.clone(), &cfg, 7).unwrap();
        assert!(model.base().is_frozen());
        assert!(model.forward(&x).unwrap().bit_eq(&expected), "{cfg:?}");
    }

    let base = convnext(4);
    let x = Tensor::uniform([2, 4, 5, 5], -2.0, 2.0, &mut rng).unwrap();
    let expected = base.forward(&x).unwrap();
    for family in [AdapterFamily::Linear, AdapterFamily::Quadratic] {
        let cfg = AdapterConfig::new(family, 4, &["block0", "block1"]);
        let model = AdaptedModel::attach(base.clone(), &cfg, 7).unwrap();
        assert!(model.forward(&x).unwrap().bit_eq(&expected), "{family:?}");
    }
}

#[test]
fn alpha_zero_and_detach_restore_base() {
    let base = mlp(&[6, 5, 4], 2);
    let x = Tensor::uniform([10, 6], -2.0, 2.0, &mut quadapt::rng::seeded(3)).unwrap();
    let expected = base.forward(&x).unwrap();
    for cfg in all_configs(&["fc0", "fc1"]) {
        let mut model = AdaptedModel::attach(base.clone(), &cfg.clone().with_alpha(0.0), 7).unwrap();
        randomize(&mut model, 9);
        assert!(model.forward(&x).unwrap().bit_eq(&expected));

        let mut live = AdaptedModel::attach(base.clone(), &cfg, 7).unwrap();
        randomize(&mut live, 9);
        assert!(!live.forward(&x).unwrap().bit_eq(&expected));
        let mut restored = live.into_base();
        assert!(restored.is_frozen());
        assert!(restored.forward(&x).unwrap().bit_eq(&expected));
        assert!(restored.params_mut().is_err());
    }
}

#[test]
fn trainable_set_is_exactly_the_adapters() {
    let base = mlp(&[6, 5, 4], 2);
    let cfg = AdapterConfig::new(AdapterFamily::Quadratic, 2, &["fc0", "fc1"]);
    let model = AdaptedModel::attach(base.clone(), &cfg, 0).unwrap();
    let sets = model.trainable_params().unwrap();
    assert_eq!(sets.len(), 1);
    let names: Vec<&str> = sets[0].names().iter().map(String::as_str).collect();
    assert_eq!(names, ["fc0.A", "fc0.B", "fc0.C", "fc1.A", "fc1.B", "fc1.C"]);
    let expected = 2 * (2 * 6 + 5) + 2 * (2 * 5 + 4);
    assert_eq!(model.trainable_count().unwrap(), expected);
    assert_eq!(model.adapter_param_count(), expected);
    assert!(base.params().names().iter().all(|n| sets[0].get(n).is_none()));
}

#[test]
fn param_count_formula_matches_registered_tensors() {
    let base = mlp(&[64, 64, 64], 0);
    for cfg in [
        AdapterConfig::new(AdapterFamily::Quadratic, 4, &["fc0", "fc1"]),
        AdapterConfig::new(AdapterFamily::Linear, 6, &["fc1"]),
        AdapterConfig::new(AdapterFamily::KernelQuadratic, 3, &["fc0"]).with_kernel(KernelMap::Product),
    ] {
        let model = AdaptedModel::attach(base.clone(), &cfg, 0).unwrap();
        let formula: usize = cfg
            .attach_points
            .iter()
            .map(|p| cfg.param_count_at(p, base.architecture().layer_io(p).unwrap()).unwrap())
            .sum();
        let brute: usize = model.adapter_params().tensors().iter().map(|t| t.data().len()).sum();
        assert_eq!(formula, brute);
    }
    let conv = convnext(0);
    let cfg = AdapterConfig::new(AdapterFamily::Quadratic, 4, &["block1"]);
    let model = AdaptedModel::attach(conv.clone(), &cfg, 0).unwrap();
    assert_eq!(model.adapter_param_count(), 2 * 4 * 9 + 4 * 4);
}

#[test]
fn masked_channels_get_zero_gradient() {
    let base = mlp(&[6, 5], 2);
    let cfg =
        AdapterConfig::new(AdapterFamily::Quadratic, 4, &["fc0"]).with_mask(SparsityMask::Dense(vec![1, 0, 1, 0]));
    let mut model = AdaptedModel::attach(base, &cfg, 1).unwrap();
    randomize(&mut model, 2);
    let mut rng = quadapt::rng::seeded(8);
    let x = Tensor::uniform([7, 6], -2.0, 2.0, &mut rng).unwrap();
    let y = Tensor::uniform([7, 5], -1.0, 1.0, &mut rng).unwrap();

    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let bound: Vec<Vec<_>> = model
        .trainable_params()
        .unwrap()
        .iter()
        .map(|s| s.bind(&mut tape, true))
        .collect();
    let pred = model.forward_batch(&mut tape, xv, &bound).unwrap();
    let yv = tape.constant(y);
    let loss = tape.mse(pred, yv).unwrap();
    tape.backward(loss).unwrap();

    let (n, r, m) = (6, 4, 5);
    let ga = tape.grad(bound[0][0]).unwrap().unwrap().data().to_vec();
    let gb = tape.grad(bound[0][1]).unwrap().unwrap().data().to_vec();
    let gc = tape.grad(bound[0][2]).unwrap().unwrap().data().to_vec();
    for k in [1, 3] {
        assert!(ga[k * n..(k + 1) * n].iter().all(|&g| g == 0.0));
        assert!(gb[k * n..(k + 1) * n].iter().all(|&g| g == 0.0));
        assert!((0..m).all(|i| gc[i * r + k] == 0.0));
    }
    for k in [0, 2] {
        assert!(ga[k * n..(k + 1) * n].iter().any(|&g| g != 0.0));
    }
}

#[test]
fn two_attach_points_keep_base_frozen() {
    let base = mlp(&[6, 5, 4], 2);
    let cfg = AdapterConfig::new(AdapterFamily::Quadratic, 2, &["fc0", "fc1"]);
    let mut model = AdaptedModel::attach(base, &cfg, 0).unwrap();
    assert_eq!(model.attach_points(), ["fc0", "fc1"]);
    assert!(model.base().is_frozen());
    assert!(model.base_params_mut().is_err());
}

#[test]
fn plug_and_play_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let base = mlp(&[6, 5, 4], 2);
    checkpoint::save_base(&base, &dir.path().join("base")).unwrap();
    let x = Tensor::uniform([9, 6], -2.0, 2.0, &mut quadapt::rng::seeded(3)).unwrap();
    for (i, cfg) in all_configs(&["fc0", "fc1"]).into_iter().enumerate() {
        let mut model = AdaptedModel::attach(base.clone(), &cfg, 5).unwrap();
        randomize(&mut model, i as u64);
        let adir = dir.path().join(format!("adapter{i}"));
        checkpoint::save_adapter(&model, &adir).unwrap();
        let reloaded =
            checkpoint::attach_saved(checkpoint::load_base(&dir.path().join("base")).unwrap(), &adir).unwrap();
        assert!(reloaded.forward(&x).unwrap().bit_eq(&model.forward(&x).unwrap()));
        let manifest = std::fs::read_to_string(adir.join("manifest.json")).unwrap();
        assert!(!manifest.contains(".weight") && !manifest.contains(".bias"));
    }
}

#[test]
fn saved_adapter_on_wrong_width_names_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = AdapterConfig::new(AdapterFamily::Quadratic, 2, &["fc0"]);
    let model = AdaptedModel::attach(mlp(&[6, 5], 2), &cfg, 0).unwrap();
    checkpoint::save_adapter(&model, dir.path()).unwrap();
    let err = checkpoint::attach_saved(mlp(&[7, 5], 2), dir.path()).unwrap_err();
    assert!(
        matches!(&err, quadapt::Error::WidthMismatch { point, .. } if point == "fc0"),
        "{err}"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_adapter_is_homogeneous(scale in -3.0f64..3.0, seed in any::<u64>()) {
        let mut rng = quadapt::rng::seeded(seed);
        let a = Tensor::uniform([3, 5], -1.0, 1.0, &mut rng).unwrap();
        let b = Tensor::uniform([4, 3], -1.0, 1.0, &mut rng).unwrap();
        let x = Tensor::uniform([5], -2.0, 2.0, &mut rng).unwrap();
        let fx = linear_adapter_forward(&a, &b, &x).unwrap();
        let fax = linear_adapter_forward(&a, &b, &x.map(|v| v * scale).unwrap()).unwrap();
        for (p, q) in fax.data().iter().zip(fx.data()) {
            prop_assert!((p - scale * q).abs() < 1e-9);
        }
    }

    #[test]
    fn quadratic_adapter_is_degree_two(scale in -3.0f64..3.0, seed in any::<u64>()) {
        let t = random_term(6, 4, 3, seed);
        let x = Tensor::uniform([6], -2.0, 2.0, &mut quadapt::rng::child(seed, "x")).unwrap();
        let fx = kernel_adapter_forward(&t, KernelMap::Product, None, &x).unwrap();
        let fax = kernel_adapter_forward(&t, KernelMap::Product, None, &x.map(|v| v * scale).unwrap()).unwrap();
        for (p, q) in fax.data().iter().zip(fx.data()) {
            prop_assert!((p - scale * scale * q).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_chain(seed in any::<u64>(), n in 1usize..9, m in 1usize..5, r in 1usize..5) {
        let t = random_term(n, m, r, seed);
        let x = Tensor::uniform([n], -2.0, 2.0, &mut quadapt::rng::child(seed, "x")).unwrap();
        let kernel = kernel_adapter_forward(&t, KernelMap::Product, None, &x).unwrap();
        let quad = quadratic_adapter_forward(&t, None, &x).unwrap();
        prop_assert!(kernel.bit_eq(&quad));
        let (a, b, c) = (t.a().data(), t.b().data(), t.c().data());
        for i in 0..m {
            let direct: f64 = (0..r).map(|k| {
                let u: f64 = (0..n).map(|j| a[k * n + j] * x.data()[j]).sum();
                let v: f64 = (0..n).map(|j| b[k * n + j] * x.data()[j]).sum();
                c[i * r + k] * u * v
            }).sum();
            prop_assert!((quad.data()[i] - direct).abs() < 1e-9);
        }
        let full = t.expand().unwrap().forward(&x).unwrap();
        prop_assert!(full.max_abs_diff(&quad).unwrap() < 1e-9);
    }

    #[test]
    fn bounded_kernels_are_bounded(seed in any::<u64>(), gamma in 0.0f64..3.0, s in -3.0f64..3.0, c in -2.0f64..2.0) {
        let t = random_term(5, 3, 4, seed);
        let x = Tensor::uniform([8, 5], -2.0, 2.0, &mut quadapt::rng::child(seed, "x")).unwrap();
        let cd = t.c().data();
        let bounds: Vec<f64> = (0..3).map(|i| cd[i * 4..(i + 1) * 4].iter().map(|v| v.abs()).sum()).collect();
        for kernel in [KernelMap::Rbf { gamma }, KernelMap::Sigmoid { s, c }] {
            let out = kernel_adapter_forward(&t, kernel, None, &x).unwrap();
            for row in out.data().chunks(3) {
                for (v, bound) in row.iter().zip(&bounds) {
                    prop_assert!(v.abs() <= bound + 1e-12);
                }
            }
        }
    }

    #[test]
    fn fresh_attach_noop_any_seed(base_seed in any::<u64>(), adapter_seed in any::<u64>()) {
        let base = mlp(&[4, 6, 3], base_seed);
        let x = Tensor::uniform([5, 4], -2.0, 2.0, &mut quadapt::rng::seeded(adapter_seed)).unwrap();
        let cfg = AdapterConfig::new(AdapterFamily::KernelQuadratic, 3, &["fc0", "fc1"]).with_kernel(KernelMap::Sigmoid { s: 1.0, c: 0.3 });
        let model = AdaptedModel::attach(base.clone(), &cfg, adapter_seed).unwrap();
        prop_assert!(model.forward(&x).unwrap().bit_eq(&base.forward(&x).unwrap()));
    }
}
