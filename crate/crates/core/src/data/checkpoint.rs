//! Checkpoint directories: `manifest.txt` plus `params.bin`.
//!
//! The manifest is text:
//!
//! ```text
//! format = tas-checkpoint 1
//! dtype = f32
//! seed = 7
//! phase = phase1
//! <extra key = value lines>
//! [config]
//! model.embed_dim = 64
//! ...
//! [params]
//! stem.patch.weight 7,16,64
//! ...
//! ```
//!
//! `params.bin` is every parameter's little-endian payload concatenated in
//! manifest order. Saving is deterministic, so load→save reproduces both
//! files byte for byte.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{model_entries, model_from_entries};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{DType, Scalar, Tensor};

pub const FORMAT: &str = "tas-checkpoint 1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// Training phase that produced the weights, e.g. `phase1`.
    pub phase: String,
    /// Free-form `key = value` annotations (epoch, metric, ...).
    pub extra: Vec<(String, String)>,
    /// Configuration snapshot as `section.key = value`; must include the model sections.
    pub config: Vec<(String, String)>,
}

impl CheckpointMeta {
    pub fn extra(&self, key: &str) -> Option<&str> {
        self.extra
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// The model keys of the snapshot.
    pub fn model_config_entries(&self) -> Vec<(String, String)> {
        self.config
            .iter()
            .filter(|(k, _)| {
                k.starts_with("model.") || k.starts_with("local.") || k.starts_with("global.")
            })
            .cloned()
            .collect()
    }
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.txt")
}

fn blob_path(dir: &Path) -> PathBuf {
    dir.join("params.bin")
}

fn render_shape(shape: &[usize]) -> String {
    shape
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// Writes `model` to `dir`. Model keys missing from `meta.config` are filled
/// from the model's own configuration.
pub fn save_checkpoint<F: Scalar>(
    dir: &Path,
    model: &Model<F>,
    meta: &CheckpointMeta,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut config = meta.config.clone();
    for (k, v) in model_entries(&model.config) {
        match config.iter().find(|(ck, _)| *ck == k) {
            Some((_, cv)) if *cv != v => {
                return Err(Error::Incompatible(format!(
                    "checkpoint snapshot has {k} = {cv} but the model has {v}"
                )))
            }
            Some(_) => {}
            None => config.push((k, v)),
        }
    }
    let mut m = String::new();
    let _ = writeln!(m, "format = {FORMAT}");
    let _ = writeln!(m, "dtype = {}", F::DTYPE.name());
    let _ = writeln!(m, "seed = {}", meta.seed);
    let _ = writeln!(m, "phase = {}", meta.phase);
    for (k, v) in &meta.extra {
        let _ = writeln!(m, "{k} = {v}");
    }
    m.push_str("[config]\n");
    for (k, v) in &config {
        let _ = writeln!(m, "{k} = {v}");
    }
    m.push_str("[params]\n");
    let mut blob = Vec::with_capacity(model.params.num_scalars() * F::DTYPE.size());
    for id in model.params.ids() {
        let t = model.params.value(id);
        let _ = writeln!(m, "{} {}", model.params.name(id), render_shape(t.shape()));
        for &v in t.data() {
            v.write_le(&mut blob);
        }
    }
    std::fs::write(manifest_path(dir), m).map_err(|e| Error::io(manifest_path(dir), e))?;
    std::fs::write(blob_path(dir), blob).map_err(|e| Error::io(blob_path(dir), e))
}

struct Manifest {
    dtype: DType,
    meta: CheckpointMeta,
    params: Vec<(String, Vec<usize>)>,
}

fn parse_manifest(dir: &Path) -> Result<Manifest> {
    let path = manifest_path(dir);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let err = |line: usize, msg: String| Error::Parse {
        path: path.clone(),
        line,
        msg,
    };
    let mut section = "";
    let mut header: Vec<(String, String)> = Vec::new();
    let mut config = Vec::new();
    let mut params = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        match line {
            "" => continue,
            "[config]" | "[params]" => {
                section = if line == "[config]" {
                    "config"
                } else {
                    "params"
                };
                continue;
            }
            _ => {}
        }
        if section == "params" {
            let (name, shape) = line
                .rsplit_once(' ')
                .ok_or_else(|| err(n, "expected `name d0,d1,...`".into()))?;
            let shape = shape
                .split(',')
                .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
                .collect::<Option<Vec<usize>>>()
                .ok_or_else(|| err(n, format!("bad shape {shape:?}")))?;
            params.push((name.to_string(), shape));
        } else {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| err(n, "expected `key = value`".into()))?;
            let entry = (k.to_string(), v.to_string());
            if section == "config" {
                config.push(entry);
            } else {
                header.push(entry);
            }
        }
    }
    let mut take = |key: &str| -> Result<String> {
        let pos = header
            .iter()
            .position(|(k, _)| k == key)
            .ok_or_else(|| err(0, format!("missing `{key}`")))?;
        Ok(header.remove(pos).1)
    };
    let format = take("format")?;
    if format != FORMAT {
        return Err(err(1, format!("unsupported format {format:?}")));
    }
    let dtype_s = take("dtype")?;
    let dtype =
        DType::parse(&dtype_s).ok_or_else(|| err(0, format!("unknown dtype {dtype_s:?}")))?;
    let seed_s = take("seed")?;
    let seed = seed_s
        .parse()
        .map_err(|_| err(0, format!("bad seed {seed_s:?}")))?;
    let phase = take("phase")?;
    Ok(Manifest {
        dtype,
        meta: CheckpointMeta {
            seed,
            phase,
            extra: header,
            config,
        },
        params,
    })
}

fn read_tensors<F: Scalar>(dir: &Path, manifest: &Manifest) -> Result<Vec<Tensor<F>>> {
    if manifest.dtype != F::DTYPE {
        return Err(Error::Incompatible(format!(
            "checkpoint holds {} parameters, requested {}",
            manifest.dtype.name(),
            F::DTYPE.name()
        )));
    }
    let path = blob_path(dir);
    let blob = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let size = F::DTYPE.size();
    let expected: usize = manifest
        .params
        .iter()
        .map(|(_, s)| s.iter().product::<usize>() * size)
        .sum();
    if blob.len() != expected {
        return Err(Error::Corrupt {
            path,
            msg: format!("{} bytes, manifest implies {expected}", blob.len()),
        });
    }
    let mut offset = 0;
    let mut out = Vec::with_capacity(manifest.params.len());
    for (_, shape) in &manifest.params {
        let n: usize = shape.iter().product();
        let data = blob[offset..offset + n * size]
            .chunks_exact(size)
            .map(F::read_le)
            .collect();
        offset += n * size;
        out.push(Tensor::new(shape, data)?);
    }
    Ok(out)
}

fn install<F: Scalar>(
    model: &mut Model<F>,
    manifest: &Manifest,
    tensors: Vec<Tensor<F>>,
) -> Result<()> {
    let ids: Vec<_> = model.params.ids().collect();
    if ids.len() != manifest.params.len() {
        return Err(Error::Incompatible(format!(
            "checkpoint has {} parameters, model has {}",
            manifest.params.len(),
            ids.len()
        )));
    }
    for (&id, (name, shape)) in ids.iter().zip(&manifest.params) {
        let ours = model.params.value(id);
        if model.params.name(id) != name || ours.shape() != shape.as_slice() {
            return Err(Error::Incompatible(format!(
                "parameter {} {:?} does not match checkpoint {name} {shape:?}",
                model.params.name(id),
                ours.shape()
            )));
        }
    }
    for (id, t) in ids.into_iter().zip(tensors) {
        model
            .params
            .value_mut(id)
            .data_mut()
            .copy_from_slice(t.data());
    }
    Ok(())
}

/// Rebuilds the model recorded in `dir`.
pub fn load_checkpoint<F: Scalar>(dir: &Path) -> Result<(Model<F>, CheckpointMeta)> {
    let manifest = parse_manifest(dir)?;
    let config =
        model_from_entries(&manifest.meta.model_config_entries()).map_err(|e| Error::Corrupt {
            path: manifest_path(dir),
            msg: e.to_string(),
        })?;
    let tensors = read_tensors(dir, &manifest)?;
    let mut model = Model::new(config, manifest.meta.seed)?;
    install(&mut model, &manifest, tensors)?;
    Ok((model, manifest.meta))
}

/// Loads weights into an existing model after checking that the recorded
/// model configuration matches it key for key.
pub fn load_checkpoint_into<F: Scalar>(dir: &Path, model: &mut Model<F>) -> Result<CheckpointMeta> {
    let manifest = parse_manifest(dir)?;
    let recorded = manifest.meta.model_config_entries();
    for (k, v) in model_entries(&model.config) {
        match recorded.iter().find(|(rk, _)| *rk == k) {
            Some((_, rv)) if *rv == v => {}
            Some((_, rv)) => {
                return Err(Error::Incompatible(format!(
                    "{k}: checkpoint has {rv}, model has {v}"
                )))
            }
            None => {
                return Err(Error::Incompatible(format!(
                    "checkpoint does not record {k}"
                )))
            }
        }
    }
    let tensors = read_tensors(dir, &manifest)?;
    install(model, &manifest, tensors)?;
    Ok(manifest.meta)
}
