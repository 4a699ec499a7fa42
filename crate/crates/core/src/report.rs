//! JSON and CSV emission for run reports.
//!
//! CSV headers are fixed per report type (see [`Tabular::HEADERS`]). An
//! unreached target or infinite ratio is written as `inf` in CSV and `null`
//! in JSON.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradsuite::GradSuiteReport;
use crate::harness::{ComparisonTable, SavingsReport, TrainReport};
use crate::numerics::Tensor;
use crate::shiftbench::{mean_squared, ShiftBenchmark};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

impl Format {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("json") => Ok(Format::Json),
            Some("csv") => Ok(Format::Csv),
            _ => Err(Error::InvalidConfig(format!(
                "report path {} must end in .json or .csv",
                path.display()
            ))),
        }
    }
}

pub trait Tabular {
    const HEADERS: &'static [&'static str];
    fn records(&self) -> Vec<Vec<String>>;
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "inf".to_string(), |v| v.to_string())
}

impl Tabular for TrainReport {
    const HEADERS: &'static [&'static str] = &["epoch", "train_loss", "test_loss"];

    fn records(&self) -> Vec<Vec<String>> {
        self.train_loss
            .iter()
            .zip(&self.test_loss)
            .enumerate()
            .map(|(e, (tr, te))| vec![(e + 1).to_string(), tr.to_string(), te.to_string()])
            .collect()
    }
}

impl Tabular for ComparisonTable {
    const HEADERS: &'static [&'static str] = &[
        "config_index",
        "family",
        "rank",
        "kernel",
        "alpha",
        "params",
        "trainable_fraction",
        "final_test_loss",
        "updates_to_target",
        "linear_floor",
        "target_mse",
    ];

    fn records(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    r.config_index.to_string(),
                    r.family.clone(),
                    r.rank.to_string(),
                    r.kernel.clone(),
                    r.alpha.to_string(),
                    r.params.to_string(),
                    r.trainable_fraction.to_string(),
                    r.final_test_loss.to_string(),
                    opt(r.updates_to_target),
                    self.linear_floor.to_string(),
                    self.target_mse.to_string(),
                ]
            })
            .collect()
    }
}

impl Tabular for SavingsReport {
    const HEADERS: &'static [&'static str] = &[
        "seed",
        "scratch_params",
        "scratch_updates_to_target",
        "scratch_param_steps",
        "adapter_params",
        "adapter_updates_to_target",
        "adapter_param_steps",
        "ratio",
        "target_unreached",
    ];

    fn records(&self) -> Vec<Vec<String>> {
        self.seeds
            .iter()
            .map(|s| {
                vec![
                    s.seed.to_string(),
                    s.scratch.trainable_params.to_string(),
                    opt(s.scratch.updates_to_target),
                    opt(s.scratch.param_steps),
                    s.adapter.trainable_params.to_string(),
                    opt(s.adapter.updates_to_target),
                    opt(s.adapter.param_steps),
                    opt(s.ratio),
                    s.target_unreached.to_string(),
                ]
            })
            .collect()
    }
}

impl Tabular for GradSuiteReport {
    const HEADERS: &'static [&'static str] = &["name", "probe", "probes", "max_relative_error", "passed"];

    fn records(&self) -> Vec<Vec<String>> {
        self.results
            .iter()
            .map(|r| {
                vec![
                    r.name.clone(),
                    format!("{:?}", r.probe).to_lowercase(),
                    r.probes.to_string(),
                    r.max_relative_error.to_string(),
                    r.passed.to_string(),
                ]
            })
            .collect()
    }
}

/// Test-split errors of a base or adapted model on a benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub pretrain_test_mse: f64,
    pub downstream_test_mse: f64,
    pub noise_variance: f64,
    pub linear_floor: f64,
    pub realizability: f64,
}

impl EvalReport {
    /// Scores `forward` on both test splits of `bench`.
    pub fn measure(model: &str, bench: &ShiftBenchmark, forward: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Self> {
        let score = |d: &crate::data::Dataset| mean_squared(&forward(&d.x)?, &d.y);
        Ok(EvalReport {
            model: model.to_string(),
            pretrain_test_mse: score(&bench.pretrain_test)?,
            downstream_test_mse: score(&bench.downstream_test)?,
            noise_variance: bench.noise_variance(),
            linear_floor: bench.linear_floor_oracle()?,
            realizability: bench.realizability_oracle(bench.config.shift_rank)?,
        })
    }
}

impl Tabular for EvalReport {
    const HEADERS: &'static [&'static str] = &["metric", "value"];

    fn records(&self) -> Vec<Vec<String>> {
        [
            ("pretrain_test_mse", self.pretrain_test_mse),
            ("downstream_test_mse", self.downstream_test_mse),
            ("noise_variance", self.noise_variance),
            ("linear_floor", self.linear_floor),
            ("realizability", self.realizability),
        ]
        .iter()
        .map(|(k, v)| vec![k.to_string(), v.to_string()])
        .collect()
    }
}

pub fn to_json<T: Serialize>(report: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    Ok(text)
}

pub fn to_csv<T: Tabular>(report: &T) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(T::HEADERS)?;
    for rec in report.records() {
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes `report` as JSON or CSV according to the extension of `path`.
pub fn write_report<T: Tabular + Serialize>(path: &Path, report: &T) -> Result<()> {
    let text = match Format::from_path(path)? {
        Format::Json => to_json(report)?,
        Format::Csv => to_csv(report)?,
    };
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}
