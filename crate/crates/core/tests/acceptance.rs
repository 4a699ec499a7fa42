//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use quadapt::adapter::merge_report;
use quadapt::checkpoint::{self, base_bytes};
use quadapt::gradsuite::{self, DEFAULT_PROBES, DEFAULT_SEED, TOLERANCE};
use quadapt::harness::{adapt, compare, pretrain, scratch_vs_adapt, ComparisonTable};
use quadapt::numerics::Activation;
use quadapt::quadratic::expand_lowrank;
use quadapt::{
    AdaptedModel, AdapterConfig, AdapterFamily, Architecture, BaseModel, KernelMap, LowRankQuadraticTerm, RunConfig,
    ShiftBenchmark, SparsityMask, Tensor,
};
use rand::Rng;

type Outcome = Result<String, String>;
type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn config(name: &str) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    RunConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_suite() -> Outcome {
    let report = gradsuite::run_suite(DEFAULT_PROBES, DEFAULT_SEED).map_err(|e| e.to_string())?;
    let worst = report.results.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    let failed: Vec<&str> = report
        .results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    ensure(
        failed.is_empty() && report.results.iter().all(|r| r.probes >= 100),
        format!(
            "{} cases x {} probes, worst relative error {worst:.2e} (tol {TOLERANCE:e}), failed {failed:?}",
            report.results.len(),
            DEFAULT_PROBES
        ),
    )
}

fn bilinear_oracle(term: &LowRankQuadraticTerm, x: &[f64]) -> Vec<f64> {
    let full = expand_lowrank(term).unwrap();
    let (n, m) = (full.input_dim(), full.output_dim());
    let wq = full.wq().data();
    (0..m)
        .map(|i| {
            let mut acc = 0.0;
            for j in 0..n {
                for l in 0..n {
                    acc += x[j] * wq[i * n * n + j * n + l] * x[l];
                }
            }
            acc
        })
        .collect()
}

fn decomposition() -> Outcome {
    let mut rng = quadapt::rng::seeded(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (n, m, r) = (
            rng.random_range(1..=16),
            rng.random_range(1..=8),
            rng.random_range(1..=8),
        );
        let term = LowRankQuadraticTerm::new(
            Tensor::uniform([r, n], -2.0, 2.0, &mut rng).unwrap(),
            Tensor::uniform([r, n], -2.0, 2.0, &mut rng).unwrap(),
            Tensor::uniform([m, r], -2.0, 2.0, &mut rng).unwrap(),
        )
        .unwrap();
        let x = Tensor::uniform([n], -2.0, 2.0, &mut rng).unwrap();
        let low = term.forward(&x).unwrap();
        let expanded = expand_lowrank(&term).unwrap().forward(&x).unwrap();
        worst = worst.max(low.max_abs_diff(&expanded).unwrap());
        for (a, b) in low.data().iter().zip(bilinear_oracle(&term, x.data())) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(
        worst <= 1e-9,
        format!("100 pairs with n <= 16, max |diff| {worst:.2e} (tol 1e-9)"),
    )
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn kernel_identity(table: &ComparisonTable) -> Outcome {
    let run = config("default.json");
    let quad = AdapterConfig::new(AdapterFamily::Quadratic, 2, &["fc0"]);
    let product = AdapterConfig::new(AdapterFamily::KernelQuadratic, 2, &["fc0"]).with_kernel(KernelMap::Product);

    // Live random adapters on an untrained base.
    let mut forward_gap = 0.0f64;
    let base = BaseModel::new(run.base.architecture(&run.bench), 3).unwrap();
    let x = Tensor::uniform([64, 8], -1.0, 1.0, &mut quadapt::rng::seeded(4)).unwrap();
    for seed in 0..20 {
        let mut q = AdaptedModel::attach(base.clone(), &quad, seed).unwrap();
        let mut rng = quadapt::rng::seeded(100 + seed);
        for i in 0..q.adapter_params().len() {
            let shape = q.adapter_params().tensor(i).shape().to_vec();
            q.adapter_params_mut()
                .set(i, Tensor::uniform(shape, -1.0, 1.0, &mut rng).unwrap())
                .unwrap();
        }
        let k = AdaptedModel::from_parts(base.clone(), &product, q.adapter_params().clone()).unwrap();
        forward_gap = forward_gap.max(max_diff(q.forward(&x).unwrap().data(), k.forward(&x).unwrap().data()));
    }

    // Full training runs with identical seeds.
    let seed = run.seeds[0];
    let bench = ShiftBenchmark::generate(&run.bench.with_seed(seed)).unwrap();
    let (base, _) = pretrain(&bench, &run.base, &run.pretrain, seed).unwrap();
    let cfg = run.train.with_seed(seed);
    let (mq, rq) = adapt(&base, &bench, &quad, &cfg, None).unwrap();
    let (mk, rk) = adapt(&base, &bench, &product, &cfg, None).unwrap();
    let test_x = &bench.downstream_test.x;
    let trained_gap = max_diff(mq.forward(test_x).unwrap().data(), mk.forward(test_x).unwrap().data());
    let curve_gap = max_diff(&rq.test_loss, &rk.test_loss).max(max_diff(&rq.train_loss, &rk.train_loss));

    let (qrow, krow) = (&table.rows[0], &table.rows[2]);
    let table_gap = max_diff(&qrow.per_seed_test_loss, &krow.per_seed_test_loss);
    let worst = forward_gap.max(trained_gap).max(curve_gap).max(table_gap);
    ensure(
        worst <= 1e-12 && krow.kernel == "product",
        format!(
            "random adapters {forward_gap:.1e}, trained outputs {trained_gap:.1e} after {} epochs, loss curves {curve_gap:.1e}, comparison rows {table_gap:.1e} (tol 1e-12)",
            rq.epochs_completed()
        ),
    )
}

fn freeze_integrity() -> Outcome {
    let mut run = config("default.json");
    run.train.epochs = 50;
    let seed = run.seeds[0];
    let bench = ShiftBenchmark::generate(&run.bench.with_seed(seed)).unwrap();
    let (base, _) = pretrain(&bench, &run.base, &run.pretrain, seed).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save_base(&base, &dir.path().join("before")).unwrap();
    let before = base_bytes(&base).unwrap();
    let (model, report) = adapt(
        &base,
        &bench,
        run.adapter.as_ref().unwrap(),
        &run.train.with_seed(seed),
        None,
    )
    .unwrap();
    checkpoint::save_base(model.base(), &dir.path().join("after")).unwrap();
    let same_files = [checkpoint::MANIFEST_FILE, checkpoint::BLOB_FILE].iter().all(|f| {
        std::fs::read(dir.path().join("before").join(f)).unwrap()
            == std::fs::read(dir.path().join("after").join(f)).unwrap()
    });
    let moved = report.final_test_loss < report.initial_test_loss;
    ensure(
        same_files && base_bytes(model.base()).unwrap() == before && report.epochs_completed() == 50 && moved,
        format!(
            "{} epochs ({} updates), checkpoint files identical: {same_files}, adapter loss {:.3e} -> {:.3e}",
            report.epochs_completed(),
            report.updates,
            report.initial_test_loss,
            report.final_test_loss
        ),
    )
}

fn no_op_attachment() -> Outcome {
    let mut rng = quadapt::rng::seeded(5);
    let mlp = BaseModel::new(
        Architecture::Mlp {
            dims: vec![8, 16, 8],
            activation: Activation::Gelu,
        },
        6,
    )
    .unwrap();
    let points = ["fc0", "fc1"];
    let configs = [
        AdapterConfig::new(AdapterFamily::Linear, 3, &points),
        AdapterConfig::new(AdapterFamily::Quadratic, 2, &points),
        AdapterConfig::new(AdapterFamily::Quadratic, 4, &points).with_mask(SparsityMask::Strided(2)),
        AdapterConfig::new(AdapterFamily::KernelQuadratic, 2, &points).with_kernel(KernelMap::Product),
        AdapterConfig::new(AdapterFamily::KernelQuadratic, 2, &points)
            .with_kernel(KernelMap::Polynomial { c: 1.0, d: 2 }),
        AdapterConfig::new(AdapterFamily::KernelQuadratic, 2, &points).with_kernel(KernelMap::Rbf { gamma: 0.5 }),
        AdapterConfig::new(AdapterFamily::KernelQuadratic, 2, &points)
            .with_kernel(KernelMap::Sigmoid { s: 1.0, c: 0.0 }),
    ];
    let x = Tensor::uniform([50, 8], -2.0, 2.0, &mut rng).unwrap();
    let expected = mlp.forward(&x).unwrap();
    let mut checked = 0;
    let mut broken = Vec::new();
    for cfg in &configs {
        for seed in 0..5 {
            let model = AdaptedModel::attach(mlp.clone(), cfg, seed).unwrap();
            checked += 1;
            if !model.forward(&x).unwrap().bit_eq(&expected) {
                broken.push(format!("{cfg:?}"));
            }
        }
    }
    let conv = BaseModel::new(
        Architecture::ConvnextTinyToy {
            channels: 4,
            blocks: 2,
            height: 5,
            width: 5,
        },
        7,
    )
    .unwrap();
    let x = Tensor::uniform([3, 4, 5, 5], -2.0, 2.0, &mut rng).unwrap();
    let expected = conv.forward(&x).unwrap();
    for family in [AdapterFamily::Linear, AdapterFamily::Quadratic] {
        let cfg = AdapterConfig::new(family, 4, &["block0", "block1"]);
        let model = AdaptedModel::attach(conv.clone(), &cfg, 1).unwrap();
        checked += 1;
        if !model.forward(&x).unwrap().bit_eq(&expected) {
            broken.push(format!("{cfg:?}"));
        }
    }
    ensure(
        broken.is_empty(),
        format!("{checked} fresh attachments bitwise identical to base, changed: {broken:?}"),
    )
}

fn shift_separation(table: &ComparisonTable) -> Outcome {
    let run = config("default.json");
    let sigma2 = run.bench.noise_std.powi(2);
    let (quad, lin) = (&table.rows[0], &table.rows[1]);
    let ratio = lin.final_test_loss / quad.final_test_loss;
    let linear_ok = lin
        .per_seed_test_loss
        .iter()
        .zip(&table.per_seed_linear_floor)
        .all(|(l, f)| *l >= 0.8 * f)
        && lin.final_test_loss >= 0.8 * table.linear_floor;
    ensure(
        quad.final_test_loss <= 2.0 * sigma2 && linear_ok && ratio >= 3.0 && quad.params == lin.params,
        format!(
            "quadratic {:.3e} (<= {:.1e}), linear {:.3e} vs floor {:.3e} (>= 0.8x), ratio {ratio:.0}x (>= 3), {} params each",
            quad.final_test_loss,
            2.0 * sigma2,
            lin.final_test_loss,
            table.linear_floor,
            quad.params
        ),
    )
}

fn kernel_gain() -> Outcome {
    let table = compare(&config("tanh_shift.json")).map_err(|e| e.to_string())?;
    let product = table
        .rows
        .iter()
        .find(|r| r.kernel == "product")
        .ok_or("no product row")?;
    let others: Vec<(String, f64)> = table
        .rows
        .iter()
        .filter(|r| r.kernel.starts_with("rbf") || r.kernel.starts_with("sigmoid"))
        .map(|r| (r.kernel.clone(), r.final_test_loss))
        .collect();
    let budget_ok = table
        .rows
        .iter()
        .all(|r| r.params == product.params && r.rank == product.rank);
    let best = others.iter().map(|(_, l)| *l).fold(f64::INFINITY, f64::min);
    let listed: Vec<String> = others.iter().map(|(k, l)| format!("{k} {l:.3e}")).collect();
    ensure(
        best < product.final_test_loss && budget_ok,
        format!(
            "product {:.3e} vs {} (median of {} seeds)",
            product.final_test_loss,
            listed.join(", "),
            table.seeds.len()
        ),
    )
}

fn efficiency() -> Outcome {
    let report = scratch_vs_adapt(&config("savings.json")).map_err(|e| e.to_string())?;
    let per_seed: Vec<String> = report
        .seeds
        .iter()
        .map(|s| s.ratio.map_or("inf".to_string(), |r| format!("{r:.3}")))
        .collect();
    let ratio = report.ratio.unwrap_or(f64::INFINITY);
    let s = &report.seeds[0];
    ensure(
        ratio <= 0.20,
        format!(
            "median parameter-step ratio {ratio:.3} (<= 0.20), per seed [{}], trainable params adapter {} vs scratch {}",
            per_seed.join(", "),
            s.adapter.trainable_params,
            s.scratch.trainable_params
        ),
    )
}

fn parameter_accounting() -> Outcome {
    let base = BaseModel::new(
        Architecture::Mlp {
            dims: vec![64, 64, 64],
            activation: Activation::Gelu,
        },
        0,
    )
    .unwrap();
    let cfg = AdapterConfig::new(AdapterFamily::Quadratic, 4, &["fc0", "fc1"]);
    let model = AdaptedModel::attach(base.clone(), &cfg, 0).unwrap();
    let eff = merge_report(&model);
    let brute_adapter: usize = model.adapter_params().tensors().iter().map(|t| t.len()).sum();
    let brute_base: usize = base.params().tensors().iter().map(|t| t.len()).sum();
    let arch = base.architecture();
    let formula: usize = cfg
        .attach_points
        .iter()
        .map(|p| cfg.param_count_at(p, arch.layer_io(p).unwrap()).unwrap())
        .sum();
    let exact = 1536.0 / (1536.0 + 8320.0);
    let mut ok = brute_adapter == 1536
        && formula == 1536
        && 2 * LowRankQuadraticTerm::param_count_for(64, 64, 4) == 1536
        && eff.adapter_params == 1536
        && brute_base == 8320
        && eff.base_params == 8320
        && eff.trainable_fraction == exact
        && (eff.trainable_fraction - 0.156).abs() < 5e-4;

    // Every family on the shipped default config.
    let run = config("default.json");
    let default_base = BaseModel::new(run.base.architecture(&run.bench), 0).unwrap();
    for adapter in &run.adapters {
        let m = AdaptedModel::attach(default_base.clone(), adapter, 0).unwrap();
        let brute: usize = m.adapter_params().tensors().iter().map(|t| t.len()).sum();
        let io = default_base.architecture().layer_io("fc0").unwrap();
        ok &= brute == adapter.param_count_at("fc0", io).unwrap() && brute == m.adapter_param_count() && brute == 48;
    }
    ensure(
        ok,
        format!(
            "64-64-64 MLP with rank-4 adapters on both layers: {} / ({} + {}) = {:.2}%, brute-force counts match",
            eff.adapter_params,
            eff.adapter_params,
            eff.base_params,
            100.0 * eff.trainable_fraction
        ),
    )
}

fn determinism(first: &ComparisonTable) -> Outcome {
    let second = compare(&config("default.json")).map_err(|e| e.to_string())?;
    let hashes = |t: &ComparisonTable| t.rows.iter().flat_map(|r| r.report_hashes.clone()).collect::<Vec<_>>();
    let (a, b) = (hashes(first), hashes(&second));
    ensure(
        a == b && first == &second,
        format!(
            "{} training report hashes reproduced, tables identical: {}",
            a.len(),
            first == &second
        ),
    )
}

fn main() -> ExitCode {
    let started = Instant::now();
    let table = compare(&config("default.json")).expect("default comparison runs");
    let criteria: Vec<(&str, Check)> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("decomposition exactness", Box::new(decomposition)),
        ("kernel identity reduction", Box::new(|| kernel_identity(&table))),
        ("freeze integrity", Box::new(freeze_integrity)),
        ("no-op attachment", Box::new(no_op_attachment)),
        ("shift separation", Box::new(|| shift_separation(&table))),
        ("kernel gain on tanh shift", Box::new(kernel_gain)),
        ("efficiency analog", Box::new(efficiency)),
        ("parameter accounting", Box::new(parameter_accounting)),
        ("determinism", Box::new(|| determinism(&table))),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {:>2}. {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL  {:>2}. {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failures} failed in {:.1}s",
        criteria.len() - failures,
        started.elapsed().as_secs_f64()
    );
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
