//! Checkpoints: a directory of binary tensor files plus a text manifest
//! mapping parameter names to files, with the run config alongside.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::io::{read_tensor, write_tensor};
use crate::tensor::Scalar;
use crate::trainer::MorseModel;

const MANIFEST: &str = "manifest.txt";
const CONFIG: &str = "config.toml";

fn file_name(index: usize) -> String {
    format!("param_{index:04}.mten")
}

/// Write every parameter tensor plus the manifest and config.
pub fn save_model<T: Scalar>(
    dir: impl AsRef<Path>,
    model: &MorseModel<T>,
    cfg: &RunConfig,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut manifest = String::new();
    for (i, p) in model.params().iter().enumerate() {
        let file = file_name(i);
        write_tensor(dir.join(&file), &p.value)?;
        manifest.push_str(&p.name);
        manifest.push('\t');
        manifest.push_str(&file);
        manifest.push('\n');
    }
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, manifest).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    cfg.save(dir.join(CONFIG))
}

pub fn load_config(dir: impl AsRef<Path>) -> Result<RunConfig> {
    RunConfig::load(dir.as_ref().join(CONFIG))
}

/// Load parameter values into an already-built model; the manifest's name
/// set must match the model's parameters exactly.
pub fn load_into<T: Scalar>(dir: impl AsRef<Path>, model: &mut MorseModel<T>) -> Result<()> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST);
    let text =
        fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let mut by_name = std::collections::HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, file) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: mpath.display().to_string(),
            offset: i,
            detail: "expected name<TAB>file".to_string(),
        })?;
        by_name.insert(name.to_string(), file.to_string());
    }
    for p in model.params_mut() {
        let file = by_name.remove(&p.name).ok_or_else(|| {
            Error::Config(format!("checkpoint is missing parameter `{}`", p.name))
        })?;
        let value = read_tensor(dir.join(&file))?;
        if value.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "load_checkpoint",
                detail: format!(
                    "{}: checkpoint {:?} vs model {:?}",
                    p.name,
                    value.shape(),
                    p.value.shape()
                ),
            });
        }
        p.load(value);
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Config(format!(
            "checkpoint has unknown parameter `{extra}`"
        )));
    }
    Ok(())
}
