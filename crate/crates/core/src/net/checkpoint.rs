//! Checkpoint save/load.
//!
//! Layout on disk: `<dir>/manifest.json` describing dtype, the flat model
//! config text and every state tensor (trained parameters plus batch-norm
//! running buffers), and `<dir>/blobs/<name>.tns` holding each tensor in the
//! raw blob format. Round trips are bit-identical.

use super::Network;
use crate::error::{invalid, Error, Result};
use crate::layers::HasParams;
use crate::tensor::{read_tensor, write_tensor, Rng, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 4],
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    /// Flat `key = value` model config, exactly as serialized.
    pub config: String,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint<T: Scalar>(dir: &Path, net: &Network<T>) -> Result<()> {
    let blob_dir = dir.join("blobs");
    std::fs::create_dir_all(&blob_dir)?;
    let mut entries = Vec::new();
    let mut failure: Option<Error> = None;
    net.visit_state("", &mut |name, t| {
        if failure.is_some() {
            return;
        }
        entries.push(ParamEntry { name: name.to_string(), shape: t.shape().dims() });
        if let Err(e) = write_tensor(&blob_dir.join(format!("{name}.tns")), t) {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let manifest = Manifest {
        dtype: T::DTYPE.name().to_string(),
        config: net.config.serialize(),
        params: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

/// Overwrite `net`'s state with the checkpoint's tensors. Every manifest
/// entry must match a state tensor of the same shape and vice versa; on
/// mismatch the error spells out the shape diff.
pub fn load_into<T: Scalar>(dir: &Path, net: &mut Network<T>) -> Result<()> {
    let manifest = read_manifest(dir)?;
    if manifest.dtype != T::DTYPE.name() {
        return invalid(format!(
            "checkpoint dtype {} does not match requested {}",
            manifest.dtype,
            T::DTYPE.name()
        ));
    }
    let mut stored: BTreeMap<String, [usize; 4]> =
        manifest.params.into_iter().map(|p| (p.name, p.shape)).collect();
    let blob_dir = dir.join("blobs");
    let mut failure: Option<Error> = None;
    let mut diffs: Vec<String> = Vec::new();
    net.visit_state_mut("", &mut |name, t| {
        if failure.is_some() {
            return;
        }
        match stored.remove(name) {
            None => diffs.push(format!("{name}: missing from checkpoint")),
            Some(shape) if shape != t.shape().dims() => {
                diffs.push(format!(
                    "{name}: checkpoint {shape:?} vs model {:?}",
                    t.shape().dims()
                ));
            }
            Some(_) => match read_tensor::<T>(&blob_dir.join(format!("{name}.tns"))) {
                Ok(loaded) if loaded.shape() == t.shape() => *t = loaded,
                Ok(loaded) => diffs.push(format!(
                    "{name}: blob {:?} vs manifest {:?}",
                    loaded.shape().dims(),
                    t.shape().dims()
                )),
                Err(e) => failure = Some(e),
            },
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    for (name, shape) in stored {
        diffs.push(format!("{name}: checkpoint-only tensor {shape:?}"));
    }
    if !diffs.is_empty() {
        return invalid(format!("checkpoint/model mismatch:\n  {}", diffs.join("\n  ")));
    }
    Ok(())
}

/// Rebuild a network purely from a checkpoint directory: the manifest's
/// embedded config defines the structure, the blobs supply all state.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Network<T>> {
    let manifest = read_manifest(dir)?;
    let config = super::NetworkConfig::parse(&manifest.config)?;
    // All weights are overwritten below, so the rng only shapes the graph.
    let mut net = Network::new(config, &mut Rng::new(0))?;
    load_into(dir, &mut net)?;
    Ok(net)
}

/// Write a standalone tensor blob next to others in `dir` (used by the
/// attention dump). Returns the file path written.
pub fn dump_named_tensor<T: Scalar>(
    dir: &Path,
    name: &str,
    t: &Tensor<T>,
) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{name}.tns"));
    write_tensor(&path, t)?;
    Ok(path)
}
