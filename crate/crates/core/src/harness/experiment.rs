use std::thread;

use serde::{Deserialize, Serialize};

use super::train::{train, TrainConfig, TrainReport};
use crate::adapter::{merge_report, AdaptedModel, AdapterConfig};
use crate::basemodel::BaseModel;
use crate::checkpoint::base_bytes;
use crate::config::{BaseSpec, RunConfig};
use crate::error::{Error, Result};
use crate::rng;
use crate::shiftbench::ShiftBenchmark;

/// Fits a fresh base model to the pretraining split. Returned frozen.
pub fn pretrain(
    bench: &ShiftBenchmark,
    spec: &BaseSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(BaseModel, TrainReport)> {
    let arch = spec.architecture(&bench.config);
    let mut base = BaseModel::new(arch, rng::derive_seed(seed, "base-init"))?;
    let report = train(
        &mut base,
        &bench.pretrain_train,
        &bench.pretrain_test,
        &cfg.with_seed(seed),
        None,
    )?;
    base.freeze();
    Ok((base, report))
}

/// Trains a fresh adapter on the downstream split over a frozen copy of
/// `base`, then checks the base bytes are untouched.
pub fn adapt(
    base: &BaseModel,
    bench: &ShiftBenchmark,
    adapter: &AdapterConfig,
    cfg: &TrainConfig,
    target_mse: Option<f64>,
) -> Result<(AdaptedModel, TrainReport)> {
    let before = base_bytes(base)?;
    let mut model = AdaptedModel::attach(base.clone(), adapter, cfg.seed)?;
    let report = train(
        &mut model,
        &bench.downstream_train,
        &bench.downstream_test,
        cfg,
        target_mse,
    )?;
    if base_bytes(model.base())? != before {
        return Err(Error::FreezeViolated);
    }
    Ok((model, report))
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Median with `None` ranked above every value; the lower middle for even counts.
pub fn median_updates(values: &[Option<u64>]) -> Option<u64> {
    let mut v = values.to_vec();
    v.sort_by_key(|u| u.unwrap_or(u64::MAX));
    v.get(v.len().saturating_sub(1) / 2).copied().flatten()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub config_index: usize,
    pub family: String,
    pub rank: usize,
    pub kernel: String,
    pub alpha: f64,
    pub params: usize,
    pub trainable_fraction: f64,
    /// Median over seeds.
    pub final_test_loss: f64,
    /// Median over seeds; `None` when the target was not reached.
    pub updates_to_target: Option<u64>,
    pub per_seed_test_loss: Vec<f64>,
    pub per_seed_updates_to_target: Vec<Option<u64>>,
    pub report_hashes: Vec<String>,
    pub adapter: AdapterConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub seeds: Vec<u64>,
    pub target_mse: f64,
    pub noise_variance: f64,
    pub per_seed_linear_floor: Vec<f64>,
    pub linear_floor: f64,
    pub per_seed_pretrain_test_loss: Vec<f64>,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, index: usize) -> &ComparisonRow {
        &self.rows[index]
    }
}

struct SeedSetup {
    bench: ShiftBenchmark,
    base: BaseModel,
    pretrain: TrainReport,
    floor: f64,
}

fn setup_seeds(run: &RunConfig) -> Result<Vec<SeedSetup>> {
    thread::scope(|s| {
        let handles: Vec<_> = run
            .seeds
            .iter()
            .map(|&seed| {
                s.spawn(move || -> Result<SeedSetup> {
                    let bench = ShiftBenchmark::generate(&run.bench.with_seed(seed))?;
                    let (base, pretrain) = pretrain(&bench, &run.base, &run.pretrain, seed)?;
                    let floor = bench.linear_floor_oracle()?;
                    Ok(SeedSetup {
                        bench,
                        base,
                        pretrain,
                        floor,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("seed worker panicked"))
            .collect()
    })
}

/// Trains every adapter config on every seed and tabulates the results.
///
/// Cells run on separate threads. Each cell uses the run seed for its
/// benchmark, base, adapter initialization and batch order, so rows differ
/// only by their adapter config.
pub fn compare(run: &RunConfig) -> Result<ComparisonTable> {
    run.validate()?;
    if run.adapters.len() < 2 {
        return Err(Error::InvalidConfig(
            "compare needs at least two adapter configs".into(),
        ));
    }
    let setups = setup_seeds(run)?;
    let target = run.target_mse();
    let cells: Vec<Result<TrainReport>> = thread::scope(|s| {
        let handles: Vec<_> = run
            .adapters
            .iter()
            .flat_map(|adapter| {
                run.seeds
                    .iter()
                    .zip(&setups)
                    .map(move |(&seed, setup)| (adapter, seed, setup))
            })
            .map(|(adapter, seed, setup)| {
                s.spawn(move || {
                    adapt(
                        &setup.base,
                        &setup.bench,
                        adapter,
                        &run.train.with_seed(seed),
                        Some(target),
                    )
                    .map(|(_, r)| r)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("cell worker panicked"))
            .collect()
    });
    let mut cells = cells.into_iter();

    let mut rows = Vec::with_capacity(run.adapters.len());
    for (config_index, adapter) in run.adapters.iter().enumerate() {
        let reports = cells.by_ref().take(run.seeds.len()).collect::<Result<Vec<_>>>()?;
        let probe = AdaptedModel::attach(setups[0].base.clone(), adapter, 0)?;
        let eff = merge_report(&probe);
        let losses: Vec<f64> = reports.iter().map(|r| r.final_test_loss).collect();
        let updates: Vec<Option<u64>> = reports.iter().map(|r| r.updates_to_target).collect();
        rows.push(ComparisonRow {
            config_index,
            family: adapter.family.name().to_string(),
            rank: adapter.rank,
            kernel: adapter.kernel_map().map_or_else(|| "none".to_string(), |k| k.label()),
            alpha: adapter.alpha,
            params: eff.adapter_params,
            trainable_fraction: eff.trainable_fraction,
            final_test_loss: median(&losses),
            updates_to_target: median_updates(&updates),
            per_seed_test_loss: losses,
            per_seed_updates_to_target: updates,
            report_hashes: reports.into_iter().map(|r| r.hash).collect(),
            adapter: adapter.clone(),
        });
    }
    let floors: Vec<f64> = setups.iter().map(|s| s.floor).collect();
    Ok(ComparisonTable {
        seeds: run.seeds.clone(),
        target_mse: target,
        noise_variance: setups[0].bench.noise_variance(),
        linear_floor: median(&floors),
        per_seed_linear_floor: floors,
        per_seed_pretrain_test_loss: setups.iter().map(|s| s.pretrain.final_test_loss).collect(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathCost {
    pub trainable_params: usize,
    pub updates_to_target: Option<u64>,
    /// `updates_to_target × trainable_params`
    pub param_steps: Option<u64>,
    pub final_test_loss: f64,
    pub report_hash: String,
}

impl PathCost {
    fn from_report(r: &TrainReport) -> Self {
        PathCost {
            trainable_params: r.trainable_params,
            updates_to_target: r.updates_to_target,
            param_steps: r.updates_to_target.map(|u| u * r.trainable_params as u64),
            final_test_loss: r.final_test_loss,
            report_hash: r.hash.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavingsSeed {
    pub seed: u64,
    pub scratch: PathCost,
    pub adapter: PathCost,
    /// Parameter-steps spent pretraining the base; excluded from the ratio.
    pub pretrain_param_steps: u64,
    /// `adapter / scratch`; `None` when either path missed the target.
    pub ratio: Option<f64>,
    pub target_unreached: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavingsReport {
    pub target_mse: f64,
    pub adapter: AdapterConfig,
    pub seeds: Vec<SavingsSeed>,
    /// Median over seeds with unreached targets ranked as infinite.
    pub ratio: Option<f64>,
    pub target_unreached: bool,
}

fn cost_ratio(adapter: &PathCost, scratch: &PathCost) -> Option<f64> {
    match (adapter.param_steps?, scratch.param_steps?) {
        (0, _) => Some(0.0),
        (_, 0) => None,
        (a, s) => Some(a as f64 / s as f64),
    }
}

fn savings_seed(run: &RunConfig, adapter: &AdapterConfig, seed: u64) -> Result<SavingsSeed> {
    let bench = ShiftBenchmark::generate(&run.bench.with_seed(seed))?;
    let target = run.target_mse();
    let cfg = run.train.with_seed(seed);
    let (scratch, adapted) = thread::scope(|s| {
        let scratch = s.spawn(|| -> Result<TrainReport> {
            let arch = run.base.architecture(&bench.config);
            let base = BaseModel::new(arch, rng::derive_seed(seed, "scratch-init"))?;
            let mut model = AdaptedModel::scratch(base, adapter, seed)?;
            train(
                &mut model,
                &bench.downstream_train,
                &bench.downstream_test,
                &cfg,
                Some(target),
            )
        });
        let adapted = s.spawn(|| -> Result<(TrainReport, TrainReport)> {
            let (base, pre) = pretrain(&bench, &run.base, &run.pretrain, seed)?;
            let (_, report) = adapt(&base, &bench, adapter, &cfg, Some(target))?;
            Ok((pre, report))
        });
        (
            scratch.join().expect("scratch worker panicked"),
            adapted.join().expect("adapter worker panicked"),
        )
    });
    let scratch = PathCost::from_report(&scratch?);
    let (pre, adapted) = adapted?;
    let adapter_cost = PathCost::from_report(&adapted);
    let ratio = cost_ratio(&adapter_cost, &scratch);
    Ok(SavingsSeed {
        seed,
        target_unreached: scratch.updates_to_target.is_none() || adapter_cost.updates_to_target.is_none(),
        pretrain_param_steps: pre.updates * pre.trainable_params as u64,
        scratch,
        adapter: adapter_cost,
        ratio,
    })
}

/// Parameter-steps to reach the target: a quadratic-equipped model trained
/// from scratch against a frozen pretrained base plus adapter.
pub fn scratch_vs_adapt(run: &RunConfig) -> Result<SavingsReport> {
    run.validate()?;
    let adapter = run
        .adapter
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("savings needs an `adapter` entry".into()))?;
    let seeds = run
        .seeds
        .iter()
        .map(|&seed| savings_seed(run, adapter, seed))
        .collect::<Result<Vec<_>>>()?;
    let ratios: Vec<f64> = seeds.iter().map(|s| s.ratio.unwrap_or(f64::INFINITY)).collect();
    let ratio = Some(median(&ratios)).filter(|r| r.is_finite());
    Ok(SavingsReport {
        target_mse: run.target_mse(),
        adapter: adapter.clone(),
        target_unreached: seeds.iter().any(|s| s.target_unreached),
        ratio,
        seeds,
    })
}
