use std::path::PathBuf;

use quadapt::checkpoint::base_bytes;
use quadapt::config::BaseSpec;
use quadapt::harness::{
    adapt, compare, evaluate, pretrain, scratch_vs_adapt, train, EarlyStop, Optimizer, OptimizerConfig, TrainConfig,
    TrainReport,
};
use quadapt::params::ParamSet;
use quadapt::shiftbench::SplitSizes;
use quadapt::{
    AdaptedModel, AdapterConfig, AdapterFamily, BenchConfig, Error, RunConfig, ShiftBenchmark, Tape, Tensor,
};

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn small_bench(seed: u64, strength: f64, noise: f64) -> ShiftBenchmark {
    ShiftBenchmark::generate(&BenchConfig {
        seed,
        shift_strength: strength,
        noise_std: noise,
        sizes: SplitSizes {
            pretrain_train: 512,
            pretrain_test: 512,
            downstream_train: 512,
            downstream_test: 512,
        },
        ..BenchConfig::default()
    })
    .unwrap()
}

fn small_run() -> RunConfig {
    let mut run = RunConfig::load(&configs_dir().join("default.json")).unwrap();
    run.bench.sizes = SplitSizes {
        pretrain_train: 512,
        pretrain_test: 512,
        downstream_train: 512,
        downstream_test: 512,
    };
    run.pretrain.epochs = 10;
    run.train.epochs = 10;
    run.seeds = vec![1, 2];
    run
}

fn quad() -> AdapterConfig {
    AdapterConfig::new(AdapterFamily::Quadratic, 2, &["fc0"])
}

fn base_for(bench: &ShiftBenchmark) -> quadapt::BaseModel {
    let cfg = TrainConfig::new(OptimizerConfig::sgd(0.1, 0.9), 5, 64);
    pretrain(bench, &BaseSpec::default(), &cfg, 1).unwrap().0
}

/// Runs the optimizer on f(w) = (w - 3)^2 from w = 0, returning every iterate.
fn bowl(opt: OptimizerConfig, steps: usize) -> Vec<f64> {
    let mut set = ParamSet::new();
    set.insert("w", Tensor::vector(vec![0.0]).unwrap()).unwrap();
    let mut optimizer = Optimizer::new(opt, &[&set]);
    let mut path = vec![0.0];
    for _ in 0..steps {
        let mut tape = Tape::new();
        let w = set.bind(&mut tape, true)[0];
        let three = tape.constant(Tensor::vector(vec![3.0]).unwrap());
        let d = tape.sub(w, three).unwrap();
        let sq = tape.hadamard(d, d).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        let grad = tape.grad(w).unwrap().unwrap().clone();
        optimizer.step(&mut [&mut set], &[grad]).unwrap();
        path.push(set.tensor(0).data()[0]);
    }
    path
}

#[test]
fn sgd_on_bowl_follows_closed_form() {
    let lr = 0.1;
    let path = bowl(OptimizerConfig::sgd(lr, 0.0), 100);
    for (k, w) in path.iter().enumerate() {
        let exact = 3.0 + (1.0 - 2.0 * lr).powi(k as i32) * (0.0 - 3.0);
        assert!((w - exact).abs() < 1e-12, "step {k}: {w} vs {exact}");
    }
    assert!((path[100] - 3.0).abs() < 1e-6);
}

#[test]
fn adam_on_bowl_converges() {
    let path = bowl(OptimizerConfig::adam(0.05), 500);
    let first = path
        .iter()
        .position(|w| (w - 3.0).abs() < 1e-3)
        .expect("adam never got within 1e-3");
    println!("adam within 1e-3 after {first} steps");
    assert!(first <= 500);
    assert!((path[500] - 3.0).abs() < 1e-3, "{}", path[500]);
}

#[test]
fn momentum_matches_recurrence() {
    let (lr, mu) = (0.05, 0.9);
    let path = bowl(OptimizerConfig::sgd(lr, mu), 50);
    let (mut w, mut buf) = (0.0f64, 0.0f64);
    for (k, got) in path.iter().enumerate().skip(1) {
        buf = mu * buf + 2.0 * (w - 3.0);
        w -= lr * buf;
        assert!((got - w).abs() < 1e-12, "step {k}");
    }
}

#[test]
fn zero_lr_leaves_parameters_and_loss_unchanged() {
    let bench = small_bench(1, 0.5, 0.01);
    let base = base_for(&bench);
    let mut model = AdaptedModel::attach(base, &quad(), 3).unwrap();
    // Perturb C so the branch is live and the loss depends on every adapter tensor.
    let idx = model.adapter_params().index_of("fc0.C").unwrap();
    let c = Tensor::uniform([8, 2], -0.5, 0.5, &mut quadapt::rng::seeded(4)).unwrap();
    model.adapter_params_mut().set(idx, c).unwrap();
    let before = model.adapter_params().clone();
    for opt in [OptimizerConfig::sgd(0.0, 0.5), OptimizerConfig::adam(0.0)] {
        let cfg = TrainConfig::new(opt, 4, 64);
        let report = train(&mut model, &bench.downstream_train, &bench.downstream_test, &cfg, None).unwrap();
        assert_eq!(model.adapter_params(), &before);
        assert!(report.test_loss.iter().all(|&l| l == report.initial_test_loss));
        assert!(report
            .train_loss
            .windows(2)
            .all(|w| (w[0] - w[1]).abs() < 1e-15 * w[0].max(1.0)));
    }
}

#[test]
fn adapt_only_moves_adapter_parameters() {
    let bench = small_bench(2, 0.5, 0.01);
    let base = base_for(&bench);
    let before = base_bytes(&base).unwrap();
    let cfg = TrainConfig::new(OptimizerConfig::adam(1e-2), 5, 64);
    let (model, report) = adapt(&base, &bench, &quad(), &cfg, None).unwrap();
    assert_eq!(base_bytes(model.base()).unwrap(), before);
    assert_eq!(report.trainable_params, 48);
    let fresh = AdaptedModel::attach(base.clone(), &quad(), cfg.seed).unwrap();
    assert_ne!(model.adapter_params(), fresh.adapter_params());
    assert!(report.final_test_loss < report.initial_test_loss);
}

#[test]
fn loss_curves_cover_completed_epochs() {
    let bench = small_bench(3, 0.5, 0.01);
    let base = base_for(&bench);
    let cfg = TrainConfig::new(OptimizerConfig::adam(1e-2), 7, 100);
    let (_, r) = adapt(&base, &bench, &quad(), &cfg, None).unwrap();
    assert_eq!(r.train_loss.len(), 7);
    assert_eq!(r.test_loss.len(), r.epochs_completed());
    assert!(r.train_loss.iter().chain(&r.test_loss).all(|v| v.is_finite()));
    // 512 rows in batches of 100 is six updates per epoch.
    assert_eq!(r.updates, 42);
    assert_eq!(r.final_test_loss, *r.test_loss.last().unwrap());
    assert_eq!(
        r.final_test_loss,
        evaluate(
            &{
                let (m, _) = adapt(&base, &bench, &quad(), &cfg, None).unwrap();
                m
            },
            &bench.downstream_test
        )
        .unwrap()
    );
}

#[test]
fn same_seed_same_hash_different_seed_different_hash() {
    let bench = small_bench(4, 0.5, 0.01);
    let base = base_for(&bench);
    let cfg = TrainConfig::new(OptimizerConfig::adam(1e-2), 4, 64);
    let run = |seed| {
        adapt(&base, &bench, &quad(), &cfg.with_seed(seed), Some(1e-3))
            .unwrap()
            .1
    };
    let (a, b, c) = (run(5), run(5), run(6));
    assert_eq!(a.hash, b.hash);
    assert_eq!(a.test_loss, b.test_loss);
    assert_ne!(a.hash, c.hash);
    assert_eq!(a.hash.len(), 64);
}

#[test]
fn hash_tracks_numbers_not_wall_clock() {
    let bench = small_bench(4, 0.5, 0.01);
    let base = base_for(&bench);
    let cfg = TrainConfig::new(OptimizerConfig::adam(1e-2), 2, 64);
    let (_, r) = adapt(&base, &bench, &quad(), &cfg, None).unwrap();
    assert_eq!(r.compute_hash(), r.hash);
    let timed = TrainReport {
        wall_clock_secs: r.wall_clock_secs + 100.0,
        ..r.clone()
    };
    assert_eq!(timed.compute_hash(), r.hash);
    let nudged = TrainReport {
        final_test_loss: f64::from_bits(r.final_test_loss.to_bits() + 1),
        ..r.clone()
    };
    assert_ne!(nudged.compute_hash(), r.hash);
    let mut curve = r.clone();
    curve.train_loss[0] *= 2.0;
    assert_ne!(curve.compute_hash(), r.hash);
    let other_cfg = TrainReport {
        config: cfg.with_seed(99),
        ..r.clone()
    };
    assert_ne!(other_cfg.compute_hash(), r.hash);
}

#[test]
fn divergence_is_reported() {
    let bench = small_bench(1, 0.5, 0.01);
    let base = base_for(&bench);
    let cfg = TrainConfig::new(OptimizerConfig::sgd(1e6, 0.0), 50, 64);
    match adapt(&base, &bench, &quad(), &cfg, None) {
        Err(Error::Diverged(report)) => {
            assert!(report.diverged);
            assert!(report.train_loss.len() < 50);
            assert_eq!(report.hash, report.compute_hash());
        }
        other => panic!("expected divergence, got {:?}", other.map(|(_, r)| r.final_test_loss)),
    }
}

#[test]
fn early_stop_halts_on_plateau() {
    let bench = small_bench(1, 0.5, 0.01);
    let base = base_for(&bench);
    let mut cfg = TrainConfig::new(OptimizerConfig::adam(0.0), 30, 64);
    cfg.early_stop = Some(EarlyStop {
        patience: 2,
        min_delta: 0.0,
    });
    let (_, r) = adapt(&base, &bench, &quad(), &cfg, None).unwrap();
    // Epoch 1 sets the best; epochs 2..4 are stale and the third one stops.
    assert_eq!(r.epochs_completed(), 4);
    assert_eq!(r.updates, 4 * 8);
}

#[test]
fn target_already_met_counts_zero_updates() {
    let bench = small_bench(1, 0.5, 0.01);
    let base = base_for(&bench);
    let cfg = TrainConfig::new(OptimizerConfig::adam(1e-2), 1, 64);
    let (_, r) = adapt(&base, &bench, &quad(), &cfg, Some(1e9)).unwrap();
    assert_eq!(r.updates_to_target, Some(0));
    let (_, r) = adapt(&base, &bench, &quad(), &cfg, Some(0.0)).unwrap();
    assert_eq!(r.updates_to_target, None);
}

#[test]
fn compare_rows_do_not_depend_on_order() {
    let run = small_run();
    let table = compare(&run).unwrap();
    let mut reversed = run.clone();
    reversed.adapters.reverse();
    let flipped = compare(&reversed).unwrap();
    let k = run.adapters.len();
    for (i, row) in table.rows.iter().enumerate() {
        let other = &flipped.rows[k - 1 - i];
        assert_eq!(row.adapter, other.adapter);
        assert_eq!(row.per_seed_test_loss, other.per_seed_test_loss);
        assert_eq!(row.report_hashes, other.report_hashes);
        assert_eq!(row.updates_to_target, other.updates_to_target);
    }
    assert_eq!(table.linear_floor, flipped.linear_floor);
}

#[test]
fn product_kernel_row_equals_quadratic_row() {
    let table = compare(&small_run()).unwrap();
    let (q, kp) = (&table.rows[0], &table.rows[2]);
    assert_eq!(kp.kernel, "product");
    assert_eq!(q.params, kp.params);
    for (a, b) in q.per_seed_test_loss.iter().zip(&kp.per_seed_test_loss) {
        assert!((a - b).abs() <= 1e-12 * a.max(1.0), "{a} vs {b}");
    }
}

#[test]
fn compare_needs_two_adapters() {
    let mut run = small_run();
    run.adapters.truncate(1);
    assert!(matches!(compare(&run), Err(Error::InvalidConfig(_))));
}

#[test]
fn scratch_without_epochs_flags_unreached_target() {
    let mut run = small_run();
    run.train.epochs = 0;
    run.seeds = vec![1];
    let report = scratch_vs_adapt(&run).unwrap();
    assert!(report.target_unreached);
    assert_eq!(report.ratio, None);
    let seed = &report.seeds[0];
    assert_eq!(seed.scratch.updates_to_target, None);
    assert_eq!(seed.scratch.param_steps, None);
    assert_eq!(seed.ratio, None);
}

#[test]
fn trivial_bench_gives_finite_ratio() {
    let mut run = small_run();
    run.bench.shift_strength = 0.0;
    run.bench.noise_std = 0.0;
    run.pretrain.epochs = 40;
    run.train.epochs = 150;
    run.train.batch_size = 32;
    run.train.optimizer = OptimizerConfig::adam(1e-2);
    run.seeds = vec![1];
    let report = scratch_vs_adapt(&run).unwrap();
    let ratio = report.ratio.unwrap_or_else(|| panic!("{report:#?}"));
    assert!(ratio.is_finite() && ratio >= 0.0, "{ratio}");
    assert!(!report.target_unreached);
}

#[test]
fn null_shift_adapters_sit_at_noise_level() {
    let run = RunConfig::load(&configs_dir().join("null_shift.json")).unwrap();
    let sigma2 = run.bench.noise_std.powi(2);
    let table = compare(&run).unwrap();
    for row in &table.rows {
        assert!(
            row.final_test_loss <= 2.0 * sigma2,
            "{}: {}",
            row.family,
            row.final_test_loss
        );
    }
}

#[test]
fn shipped_configs_load() {
    for name in ["default.json", "null_shift.json", "savings.json", "tanh_shift.json"] {
        RunConfig::load(&configs_dir().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    let text = std::fs::read_to_string(configs_dir().join("default.json")).unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["train"]["learning_rate"] = 0.1.into();
    assert!(matches!(
        RunConfig::from_json(&value.to_string()),
        Err(Error::InvalidConfig(_))
    ));

    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["train"]["batch_size"] = 0.into();
    assert!(matches!(
        RunConfig::from_json(&value.to_string()),
        Err(Error::InvalidConfig(_))
    ));

    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["adapters"][0]["attach_points"] = serde_json::json!(["fc3"]);
    assert!(matches!(
        RunConfig::from_json(&value.to_string()),
        Err(Error::UnknownAttachPoint(_))
    ));

    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["seeds"] = serde_json::json!([]);
    assert!(RunConfig::from_json(&value.to_string()).is_err());
}

#[test]
fn with_seed_replaces_every_seed() {
    let run = RunConfig::load(&configs_dir().join("default.json"))
        .unwrap()
        .with_seed(11);
    assert_eq!(run.bench.seed, 11);
    assert_eq!(run.seeds, vec![11]);
}
