//! On-disk tensor bundles: a directory holding `manifest.json` and
//! `weights.bin`.
//!
//! The blob is little-endian IEEE-754 `f64`, row-major, tensors concatenated
//! in manifest order. The manifest records each tensor's name, shape, byte
//! offset and byte length plus a CRC-32 of the whole blob. Base models,
//! adapters and benchmarks all use this layout; adapter bundles never carry
//! base tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::adapter::{AdaptedModel, AdapterConfig};
use crate::basemodel::{Architecture, BaseModel};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::ParamSet;
use crate::quadratic::LowRankQuadraticTerm;
use crate::shiftbench::{BenchConfig, ShiftBenchmark};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";

pub const KIND_ADAPTER: &str = "adapter";
pub const KIND_BENCHMARK: &str = "benchmark";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub meta: Value,
    pub tensors: Vec<TensorRecord>,
    pub checksum: u32,
}

/// Decoded bundle contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub kind: String,
    pub meta: Value,
    pub tensors: ParamSet,
}

/// Serializes a bundle to `(manifest text, blob bytes)`.
pub fn encode(kind: &str, meta: Value, tensors: &ParamSet) -> Result<(String, Vec<u8>)> {
    let mut blob = Vec::with_capacity(tensors.scalar_count() * 8);
    let mut records = Vec::with_capacity(tensors.len());
    for (name, t) in tensors.iter() {
        let offset = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        records.push(TensorRecord {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            length: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        meta,
        tensors: records,
        checksum: crc32fast::hash(&blob),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    Ok((text, blob))
}

/// Parses and validates a bundle. Nothing is constructed unless the
/// checksum and every record agree with the blob.
pub fn decode(manifest_text: &str, blob: &[u8]) -> Result<Bundle> {
    let manifest: Manifest = serde_json::from_str(manifest_text)
        .map_err(|e| Error::ManifestMismatch(format!("unreadable manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::ManifestMismatch(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    let actual = crc32fast::hash(blob);
    if actual != manifest.checksum {
        return Err(Error::ChecksumMismatch {
            expected: manifest.checksum,
            actual,
        });
    }
    let mut expected_offset = 0u64;
    let mut tensors = ParamSet::new();
    for rec in &manifest.tensors {
        let numel: usize = rec.shape.iter().product();
        if rec.offset != expected_offset {
            return Err(Error::CorruptBlob(format!(
                "{} starts at {} but previous tensor ends at {expected_offset}",
                rec.name, rec.offset
            )));
        }
        if rec.length != numel as u64 * 8 {
            return Err(Error::CorruptBlob(format!(
                "{} has length {} for shape {:?}",
                rec.name, rec.length, rec.shape
            )));
        }
        let end = rec.offset + rec.length;
        if end > blob.len() as u64 {
            return Err(Error::CorruptBlob(format!("{} extends past end of blob", rec.name)));
        }
        let data = blob[rec.offset as usize..end as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of 8")))
            .collect();
        let t = Tensor::new(rec.shape.clone(), data).map_err(|e| Error::CorruptBlob(format!("{}: {e}", rec.name)))?;
        tensors
            .insert(rec.name.clone(), t)
            .map_err(|e| Error::ManifestMismatch(e.to_string()))?;
        expected_offset = end;
    }
    if expected_offset != blob.len() as u64 {
        return Err(Error::CorruptBlob(format!(
            "records cover {expected_offset} bytes of a {}-byte blob",
            blob.len()
        )));
    }
    Ok(Bundle {
        kind: manifest.kind,
        meta: manifest.meta,
        tensors,
    })
}

pub fn write_bundle(dir: &Path, kind: &str, meta: Value, tensors: &ParamSet) -> Result<()> {
    let (manifest, blob) = encode(kind, meta, tensors)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

pub fn read_bundle(dir: &Path) -> Result<Bundle> {
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    decode(&manifest, &blob)
}

/// Manifest text, re-rendered; enough to recover every tensor's shape.
pub fn inspect(dir: &Path) -> Result<String> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::ManifestMismatch(format!("unreadable manifest: {e}")))?;
    Ok(serde_json::to_string_pretty(&manifest)?)
}

fn base_meta(model: &BaseModel) -> Value {
    json!({ "architecture": model.architecture() })
}

/// Manifest and blob of a base model as one byte sequence.
pub fn base_bytes(model: &BaseModel) -> Result<Vec<u8>> {
    let (manifest, mut blob) = encode(model.kind(), base_meta(model), model.params())?;
    let mut bytes = manifest.into_bytes();
    bytes.append(&mut blob);
    Ok(bytes)
}

pub fn save_base(model: &BaseModel, dir: &Path) -> Result<()> {
    write_bundle(dir, model.kind(), base_meta(model), model.params())
}

fn base_from_bundle(bundle: Bundle) -> Result<BaseModel> {
    let arch: Architecture = serde_json::from_value(bundle.meta["architecture"].clone())
        .map_err(|e| Error::ManifestMismatch(format!("architecture: {e}")))?;
    if arch.kind() != bundle.kind {
        return Err(Error::ManifestMismatch(format!(
            "kind `{}` disagrees with architecture `{}`",
            bundle.kind,
            arch.kind()
        )));
    }
    BaseModel::from_params(arch, bundle.tensors, true)
}

/// Loads a base checkpoint bit-exactly and returns it frozen.
pub fn init_primary_from_checkpoint(dir: &Path) -> Result<BaseModel> {
    base_from_bundle(read_bundle(dir)?)
}

pub fn load_base(dir: &Path) -> Result<BaseModel> {
    init_primary_from_checkpoint(dir)
}

/// Writes the adapter configuration and adapter tensors only.
pub fn save_adapter(model: &AdaptedModel, dir: &Path) -> Result<()> {
    let meta = json!({ "adapter": model.config(), "base_kind": model.base().kind() });
    write_bundle(dir, KIND_ADAPTER, meta, model.adapter_params())
}

pub fn load_adapter(dir: &Path) -> Result<(AdapterConfig, ParamSet)> {
    let bundle = read_bundle(dir)?;
    if bundle.kind != KIND_ADAPTER {
        return Err(Error::ManifestMismatch(format!(
            "expected adapter bundle, found `{}`",
            bundle.kind
        )));
    }
    let config: AdapterConfig = serde_json::from_value(bundle.meta["adapter"].clone())
        .map_err(|e| Error::ManifestMismatch(format!("adapter config: {e}")))?;
    config.validate()?;
    Ok((config, bundle.tensors))
}

/// Loads a saved adapter onto `base`; widths must match at every attach point.
pub fn attach_saved(base: BaseModel, dir: &Path) -> Result<AdaptedModel> {
    let (config, params) = load_adapter(dir)?;
    AdaptedModel::from_parts(base, &config, params)
}

const SPLITS: [&str; 4] = ["pretrain_train", "pretrain_test", "downstream_train", "downstream_test"];

fn bench_tensors(bench: &ShiftBenchmark) -> Result<ParamSet> {
    let mut t = ParamSet::new();
    t.insert("teacher.weight", bench.teacher_weight.clone())?;
    t.insert("teacher.bias", bench.teacher_bias.clone())?;
    t.insert("shift.A", bench.shift_term.a().clone())?;
    t.insert("shift.B", bench.shift_term.b().clone())?;
    t.insert("shift.C", bench.shift_term.c().clone())?;
    for (name, split) in SPLITS.iter().zip(splits(bench)) {
        t.insert(format!("{name}.x"), split.x.clone())?;
        t.insert(format!("{name}.y"), split.y.clone())?;
    }
    Ok(t)
}

fn splits(bench: &ShiftBenchmark) -> [&Dataset; 4] {
    [
        &bench.pretrain_train,
        &bench.pretrain_test,
        &bench.downstream_train,
        &bench.downstream_test,
    ]
}

/// Benchmark bundle as `(manifest text, blob)`.
pub fn encode_bench(bench: &ShiftBenchmark) -> Result<(String, Vec<u8>)> {
    encode(KIND_BENCHMARK, json!({ "bench": bench.config }), &bench_tensors(bench)?)
}

pub fn save_bench(bench: &ShiftBenchmark, dir: &Path) -> Result<()> {
    write_bundle(
        dir,
        KIND_BENCHMARK,
        json!({ "bench": bench.config }),
        &bench_tensors(bench)?,
    )
}

pub fn load_bench(dir: &Path) -> Result<ShiftBenchmark> {
    let bundle = read_bundle(dir)?;
    if bundle.kind != KIND_BENCHMARK {
        return Err(Error::ManifestMismatch(format!(
            "expected benchmark bundle, found `{}`",
            bundle.kind
        )));
    }
    let config: BenchConfig = serde_json::from_value(bundle.meta["bench"].clone())
        .map_err(|e| Error::ManifestMismatch(format!("bench config: {e}")))?;
    let t = &bundle.tensors;
    let get = |name: &str| {
        t.get(name)
            .cloned()
            .ok_or_else(|| Error::ManifestMismatch(format!("missing tensor {name}")))
    };
    let split = |name: &str| Dataset::new(get(&format!("{name}.x"))?, get(&format!("{name}.y"))?);
    Ok(ShiftBenchmark {
        config,
        teacher_weight: get("teacher.weight")?,
        teacher_bias: get("teacher.bias")?,
        shift_term: LowRankQuadraticTerm::new(get("shift.A")?, get("shift.B")?, get("shift.C")?)?,
        pretrain_train: split(SPLITS[0])?,
        pretrain_test: split(SPLITS[1])?,
        downstream_train: split(SPLITS[2])?,
        downstream_test: split(SPLITS[3])?,
    })
}
