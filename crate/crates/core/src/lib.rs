//! Low-rank quadratic adapters for frozen networks, with the autodiff,
//! synthetic benchmark and training harness needed to evaluate them.

pub mod adapter;
pub mod basemodel;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod harness;
pub mod numerics;
pub mod params;
pub mod quadratic;
pub mod report;
pub mod rng;
pub mod shiftbench;

pub use adapter::{AdaptedModel, AdapterConfig, AdapterFamily, SparsityMask};
pub use basemodel::{Architecture, BaseModel};
pub use config::RunConfig;
pub use data::Dataset;
pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
pub use quadratic::{KernelMap, LowRankQuadraticTerm};
pub use shiftbench::{BenchConfig, ShiftBenchmark};
