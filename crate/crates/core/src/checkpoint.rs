//! Checkpoint directories: `config.json`, `manifest.json` and one raw
//! little-endian file per tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{buffer_shapes, param_shapes, ModelConfig, VntModel};
use crate::params::ParamStore;
use crate::tensor::{precision, Precision, Tensor};
use crate::training::AdamState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    step: u64,
}

const BUFFER: &str = "buffer.";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

fn tensor_file(name: &str) -> String {
    format!("{name}.bin")
}

fn encode(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    match dtype {
        Dtype::F64 => t.data().iter().flat_map(|x| x.to_le_bytes()).collect(),
        Dtype::F32 => t.data().iter().flat_map(|&x| (x as f32).to_le_bytes()).collect(),
    }
}

fn decode(bytes: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    }
}

/// Writes the model (and optionally the optimizer state) into `dir`,
/// creating it if needed. `extra` lands in `run.json` when given.
pub fn save(
    dir: &Path,
    model: &VntModel,
    optimizer: Option<&AdamState>,
    extra: Option<&serde_json::Value>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let dtype = match precision() {
        Precision::F64 => Dtype::F64,
        Precision::F32 => Dtype::F32,
    };
    let mut groups: Vec<(&str, &ParamStore)> = vec![("", &model.params), (BUFFER, &model.buffers)];
    if let Some(opt) = optimizer {
        groups.push((ADAM_M, &opt.m));
        groups.push((ADAM_V, &opt.v));
    }
    let mut manifest = Vec::new();
    for (prefix, store) in groups {
        for (name, t) in store.iter() {
            let full = format!("{prefix}{name}");
            fs::write(dir.join(tensor_file(&full)), encode(t, dtype))?;
            manifest.push(ManifestEntry {
                name: full,
                shape: t.shape().to_vec(),
                dtype,
            });
        }
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&model.config)?)?;
    let opt_path = dir.join("optimizer.json");
    match optimizer {
        Some(opt) => fs::write(&opt_path, serde_json::to_string(&OptimizerMeta { step: opt.t })?)?,
        None if opt_path.exists() => fs::remove_file(&opt_path)?,
        None => {}
    }
    if let Some(extra) = extra {
        fs::write(dir.join("run.json"), serde_json::to_string_pretty(extra)?)?;
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::checkpoint(what, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::checkpoint(what, e.to_string()))
}

fn read_tensor(dir: &Path, entry: &ManifestEntry) -> Result<Tensor> {
    let path = dir.join(tensor_file(&entry.name));
    let bytes = fs::read(&path).map_err(|e| Error::checkpoint(&entry.name, e.to_string()))?;
    let numel: usize = entry.shape.iter().product();
    let want = numel * entry.dtype.width();
    if bytes.len() != want {
        return Err(Error::checkpoint(
            &entry.name,
            format!("expected {want} bytes, found {}", bytes.len()),
        ));
    }
    let data = decode(&bytes, entry.dtype);
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::checkpoint(&entry.name, "non-finite value"));
    }
    Tensor::new(entry.shape.clone(), data).map_err(|e| Error::checkpoint(&entry.name, e.to_string()))
}

fn load_group(
    dir: &Path,
    manifest: &[ManifestEntry],
    prefix: &str,
    shapes: &[(String, Vec<usize>)],
) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, shape) in shapes {
        let full = format!("{prefix}{name}");
        let entry = manifest
            .iter()
            .find(|e| e.name == full)
            .ok_or_else(|| Error::checkpoint(&full, "missing from manifest"))?;
        if &entry.shape != shape {
            return Err(Error::checkpoint(
                &full,
                format!("shape {:?} does not match config shape {shape:?}", entry.shape),
            ));
        }
        store.insert(name.clone(), read_tensor(dir, entry)?);
    }
    Ok(store)
}

pub struct Loaded {
    pub model: VntModel,
    pub optimizer: Option<AdamState>,
    pub run: Option<serde_json::Value>,
}

/// Reads a checkpoint and checks every tensor against the shapes implied by
/// its config.
pub fn load(dir: &Path) -> Result<Loaded> {
    if !dir.is_dir() {
        return Err(Error::checkpoint(
            dir.display().to_string(),
            "not a checkpoint directory",
        ));
    }
    let config: ModelConfig = read_json(&dir.join("config.json"), "config.json")?;
    config
        .validate()
        .map_err(|e| Error::checkpoint("config.json", e.to_string()))?;
    let manifest: Vec<ManifestEntry> = read_json(&dir.join("manifest.json"), "manifest.json")?;
    let shapes = param_shapes(&config);
    let params = load_group(dir, &manifest, "", &shapes)?;
    let buffers = load_group(dir, &manifest, BUFFER, &buffer_shapes(&config))?;
    let opt_path = dir.join("optimizer.json");
    let optimizer = if opt_path.exists() {
        let meta: OptimizerMeta = read_json(&opt_path, "optimizer.json")?;
        Some(AdamState {
            m: load_group(dir, &manifest, ADAM_M, &shapes)?,
            v: load_group(dir, &manifest, ADAM_V, &shapes)?,
            t: meta.step,
        })
    } else {
        None
    };
    let known = |n: &str| {
        params.contains(n)
            || n.strip_prefix(BUFFER).is_some_and(|b| buffers.contains(b))
            || (optimizer.is_some()
                && [ADAM_M, ADAM_V]
                    .iter()
                    .any(|p| n.strip_prefix(p).is_some_and(|b| params.contains(b))))
    };
    if let Some(extra) = manifest.iter().find(|e| !known(&e.name)) {
        return Err(Error::checkpoint(&extra.name, "not expected by the config"));
    }
    let run_path = dir.join("run.json");
    let run = if run_path.exists() {
        Some(read_json(&run_path, "run.json")?)
    } else {
        None
    };
    Ok(Loaded {
        model: VntModel {
            config,
            params,
            buffers,
        },
        optimizer,
        run,
    })
}
