//! Checkpoint directories: `config.json`, `meta.json`, one CDT1 blob per
//! parameter under `params/`, optional AdamW moments under `optimizer/`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CdFormer, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{read_tensor, write_tensor, Float, Tensor};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub params: ParamStore<T>,
    /// First and second AdamW moments, one tensor per parameter.
    pub optimizer: Option<(Vec<Tensor<T>>, Vec<Tensor<T>>)>,
}

fn blob(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.cdt"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<V: for<'de> Deserialize<'de>>(path: &Path) -> Result<V> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes into a sibling temporary directory and swaps it in, so an
/// interrupted save never leaves a half-written checkpoint at `dir`.
pub fn save_checkpoint<T: Float>(
    dir: &Path,
    config: &ModelConfig,
    meta: &CheckpointMeta,
    params: &ParamStore<T>,
    optimizer: Option<(&[Tensor<T>], &[Tensor<T>])>,
) -> Result<()> {
    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    let pdir = tmp.join("params");
    fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
    write_json(&tmp.join("config.json"), config)?;
    write_json(&tmp.join("meta.json"), meta)?;
    for (spec, t) in params.specs().iter().zip(params.tensors()) {
        write_tensor(t, &blob(&pdir, &spec.name))?;
    }
    if let Some((m, v)) = optimizer {
        for (sub, moments) in [("m", m), ("v", v)] {
            let odir = tmp.join("optimizer").join(sub);
            fs::create_dir_all(&odir).map_err(|e| Error::io(&odir, e))?;
            for (spec, t) in params.specs().iter().zip(moments) {
                write_tensor(t, &blob(&odir, &spec.name))?;
            }
        }
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

fn read_set<T: Float>(model: &CdFormer, dir: &Path) -> Result<Vec<Tensor<T>>> {
    let expected = model.param_specs().len();
    let present = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter(|e| e.as_ref().is_ok_and(|e| e.path().extension().is_some_and(|x| x == "cdt")))
        .count();
    if present != expected {
        return Err(Error::Validation(format!(
            "{}: {present} tensors on disk, model has {expected} parameters",
            dir.display()
        )));
    }
    model
        .param_specs()
        .iter()
        .map(|s| {
            let path = blob(dir, &s.name);
            if !path.exists() {
                return Err(Error::Validation(format!("checkpoint is missing parameter `{}`", s.name)));
            }
            read_tensor::<T>(&path)
        })
        .collect()
}

pub fn load_checkpoint<T: Float>(dir: &Path) -> Result<Checkpoint<T>> {
    let config: ModelConfig = read_json(&dir.join("config.json"))?;
    let meta: CheckpointMeta = read_json(&dir.join("meta.json"))?;
    let model = CdFormer::new(config.clone())?;
    let tensors = read_set(&model, &dir.join("params"))?;
    let params = ParamStore::from_tensors(model.param_specs().to_vec(), tensors)?;
    let odir = dir.join("optimizer");
    let optimizer = if odir.exists() {
        Some((read_set(&model, &odir.join("m"))?, read_set(&model, &odir.join("v"))?))
    } else {
        None
    };
    Ok(Checkpoint {
        config,
        meta,
        params,
        optimizer,
    })
}
