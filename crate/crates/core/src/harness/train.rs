use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{Optimizer, OptimizerConfig};
use crate::adapter::AdaptedModel;
use crate::basemodel::BaseModel;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::ParamSet;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub patience: usize,
    pub min_delta: f64,
}

fn default_seed() -> u64 {
    0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffle.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stop: Option<EarlyStop>,
}

impl TrainConfig {
    pub fn new(optimizer: OptimizerConfig, epochs: usize, batch_size: usize) -> Self {
        TrainConfig {
            optimizer,
            epochs,
            batch_size,
            seed: 0,
            early_stop: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// A model whose trainable tensors are exposed as an ordered list of sets.
pub trait Trainable {
    fn trainable_params(&self) -> Result<Vec<&ParamSet>>;
    fn trainable_params_mut(&mut self) -> Result<Vec<&mut ParamSet>>;
    /// `bound[s][t]` is the tape var of tensor `t` of trainable set `s`.
    fn forward_batch(&self, tape: &mut Tape, x: Var, bound: &[Vec<Var>]) -> Result<Var>;

    fn trainable_count(&self) -> Result<usize> {
        Ok(self.trainable_params()?.iter().map(|s| s.scalar_count()).sum())
    }
}

impl Trainable for BaseModel {
    fn trainable_params(&self) -> Result<Vec<&ParamSet>> {
        if self.is_frozen() {
            return Err(Error::FrozenModel);
        }
        Ok(vec![self.params()])
    }

    fn trainable_params_mut(&mut self) -> Result<Vec<&mut ParamSet>> {
        Ok(vec![self.params_mut()?])
    }

    fn forward_batch(&self, tape: &mut Tape, x: Var, bound: &[Vec<Var>]) -> Result<Var> {
        self.forward_on(tape, x, &bound[0])
    }
}

impl Trainable for AdaptedModel {
    fn trainable_params(&self) -> Result<Vec<&ParamSet>> {
        let mut sets = Vec::new();
        if self.trains_base() {
            sets.push(self.base().params());
        }
        sets.push(self.adapter_params());
        Ok(sets)
    }

    fn trainable_params_mut(&mut self) -> Result<Vec<&mut ParamSet>> {
        let (base, adapter) = self.split_params_mut()?;
        Ok(base.into_iter().chain(std::iter::once(adapter)).collect())
    }

    fn forward_batch(&self, tape: &mut Tape, x: Var, bound: &[Vec<Var>]) -> Result<Var> {
        if self.trains_base() {
            self.forward_on(tape, x, &bound[0], &bound[1])
        } else {
            let base = self.base().params().bind(tape, false);
            self.forward_on(tape, x, &base, &bound[0])
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub test_loss: Vec<f64>,
    pub initial_test_loss: f64,
    pub final_test_loss: f64,
    pub wall_clock_secs: f64,
    pub trainable_params: usize,
    pub updates: u64,
    /// Updates completed when test loss first reached `target_mse`.
    pub updates_to_target: Option<u64>,
    pub target_mse: Option<f64>,
    pub diverged: bool,
    pub config: TrainConfig,
    /// SHA-256 over every numeric field except wall-clock time.
    pub hash: String,
}

impl TrainReport {
    pub fn epochs_completed(&self) -> usize {
        self.test_loss.len()
    }

    pub fn compute_hash(&self) -> String {
        let mut h = Sha256::new();
        let mut put = |v: f64| h.update(v.to_bits().to_le_bytes());
        for &v in self.train_loss.iter().chain(&self.test_loss) {
            put(v);
        }
        put(self.initial_test_loss);
        put(self.final_test_loss);
        put(self.target_mse.unwrap_or(f64::NAN));
        h.update((self.train_loss.len() as u64).to_le_bytes());
        h.update((self.trainable_params as u64).to_le_bytes());
        h.update(self.updates.to_le_bytes());
        h.update(self.updates_to_target.map_or(u64::MAX, |u| u).to_le_bytes());
        h.update([u8::from(self.diverged)]);
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        hex::encode(h.finalize())
    }
}

/// Mean squared error of the model on `data`, with no gradient tracking.
pub fn evaluate<M: Trainable + ?Sized>(model: &M, data: &Dataset) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(data.x.clone());
    let bound: Vec<Vec<Var>> = model
        .trainable_params()?
        .iter()
        .map(|s| s.bind(&mut tape, false))
        .collect();
    let pred = model.forward_batch(&mut tape, x, &bound)?;
    let y = tape.constant(data.y.clone());
    let loss = tape.mse(pred, y)?;
    Ok(tape.value(loss)?.item().expect("scalar loss"))
}

/// Mini-batch training on `train`, reporting test loss after every epoch.
///
/// Only the model's trainable sets are touched. A non-finite loss aborts
/// with [`Error::Diverged`] carrying the partial report.
pub fn train<M: Trainable + ?Sized>(
    model: &mut M,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    target_mse: Option<f64>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let started = Instant::now();
    let trainable_params = model.trainable_count()?;
    let mut optimizer = Optimizer::new(cfg.optimizer, &model.trainable_params()?);
    let initial_test_loss = evaluate(model, test)?;
    let mut report = TrainReport {
        train_loss: Vec::new(),
        test_loss: Vec::new(),
        initial_test_loss,
        final_test_loss: initial_test_loss,
        wall_clock_secs: 0.0,
        trainable_params,
        updates: 0,
        updates_to_target: target_mse.filter(|&t| initial_test_loss <= t).map(|_| 0),
        target_mse,
        diverged: false,
        config: *cfg,
        hash: String::new(),
    };
    let finish = |mut report: TrainReport, started: Instant| {
        report.wall_clock_secs = started.elapsed().as_secs_f64();
        report.hash = report.compute_hash();
        report
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::child(cfg.seed, &format!("epoch/{epoch}")));
        let mut weighted = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let step = train_step(model, train, chunk, &mut optimizer);
            match step {
                Ok(loss) => weighted += loss * chunk.len() as f64,
                Err(Error::NonFinite { .. }) => {
                    report.diverged = true;
                    return Err(Error::Diverged(Box::new(finish(report, started))));
                }
                Err(e) => return Err(e),
            }
            report.updates += 1;
        }
        let test_loss = match evaluate(model, test) {
            Ok(l) => l,
            Err(Error::NonFinite { .. }) => {
                report.diverged = true;
                return Err(Error::Diverged(Box::new(finish(report, started))));
            }
            Err(e) => return Err(e),
        };
        report.train_loss.push(weighted / train.len() as f64);
        report.test_loss.push(test_loss);
        report.final_test_loss = test_loss;
        if report.updates_to_target.is_none() && target_mse.is_some_and(|t| test_loss <= t) {
            report.updates_to_target = Some(report.updates);
        }
        if let Some(es) = cfg.early_stop {
            if test_loss < best - es.min_delta {
                best = test_loss;
                stale = 0;
            } else {
                stale += 1;
                if stale > es.patience {
                    break;
                }
            }
        }
    }
    Ok(finish(report, started))
}

fn train_step<M: Trainable + ?Sized>(
    model: &mut M,
    data: &Dataset,
    rows: &[usize],
    optimizer: &mut Optimizer,
) -> Result<f64> {
    let batch = data.batch(rows)?;
    let mut tape = Tape::new();
    let x = tape.constant(batch.x);
    let bound: Vec<Vec<Var>> = model
        .trainable_params()?
        .iter()
        .map(|s| s.bind(&mut tape, true))
        .collect();
    let pred = model.forward_batch(&mut tape, x, &bound)?;
    let y = tape.constant(batch.y);
    let loss = tape.mse(pred, y)?;
    tape.backward(loss)?;
    let mut grads = Vec::new();
    for var in bound.iter().flatten() {
        grads.push(match tape.grad(*var)? {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.shape(*var)?.to_vec())?,
        });
    }
    let loss_value = tape.value(loss)?.item().expect("scalar loss");
    optimizer.step(&mut model.trainable_params_mut()?, &grads)?;
    Ok(loss_value)
}
