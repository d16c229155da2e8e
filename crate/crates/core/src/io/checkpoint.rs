//! Checkpoint directories: `manifest.txt` with the network configuration
//! plus one tensor file per named parameter.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::kv::{self, Entry, KvError};
use super::tensor_file::{self, FormatError};
use crate::net::{ModelParams, NetConfig};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("manifest: {0}")]
    Manifest(#[from] KvError),
    #[error("parameter {name}: {source}")]
    Tensor {
        name: String,
        #[source]
        source: FormatError,
    },
    #[error("parameter {name}: shape {got:?}, expected {expected:?}")]
    Shape {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Applies one network key; `Ok(false)` if the key is not a network key.
pub fn apply_net_key(cfg: &mut NetConfig, e: &Entry) -> Result<bool, KvError> {
    let positive = |e: &Entry| -> Result<usize, KvError> {
        let v: usize = e.parse()?;
        if v == 0 {
            return Err(e.bad("must be positive"));
        }
        Ok(v)
    };
    match e.key.as_str() {
        "in_channels" => cfg.in_channels = positive(e)?,
        "patch_size" => cfg.patch_size = positive(e)?,
        "embed_dim" => cfg.embed_dim = positive(e)?,
        "groups" => cfg.groups = positive(e)?,
        "blocks_per_group" => cfg.blocks_per_group = positive(e)?,
        "expansion" => cfg.expansion = positive(e)?,
        "n_state" => cfg.n_state = positive(e)?,
        "eval_mask" => cfg.eval_mask = e.parse()?,
        "per_direction" => cfg.per_direction = e.parse()?,
        "exact_zoh" => cfg.exact_zoh = e.parse()?,
        "seed" => cfg.seed = e.parse()?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn manifest_text(cfg: &NetConfig) -> String {
    format!(
        "# network configuration\n\
         in_channels = {}\npatch_size = {}\nembed_dim = {}\ngroups = {}\n\
         blocks_per_group = {}\nexpansion = {}\nn_state = {}\neval_mask = {}\n\
         per_direction = {}\nexact_zoh = {}\nseed = {}\n",
        cfg.in_channels,
        cfg.patch_size,
        cfg.embed_dim,
        cfg.groups,
        cfg.blocks_per_group,
        cfg.expansion,
        cfg.n_state,
        cfg.eval_mask,
        cfg.per_direction,
        cfg.exact_zoh,
        cfg.seed
    )
}

/// Parses a manifest. Every network key must be present exactly once.
pub fn parse_manifest(text: &str) -> Result<NetConfig, KvError> {
    const KEYS: [&str; 11] = [
        "in_channels",
        "patch_size",
        "embed_dim",
        "groups",
        "blocks_per_group",
        "expansion",
        "n_state",
        "eval_mask",
        "per_direction",
        "exact_zoh",
        "seed",
    ];
    let entries = kv::parse(text)?;
    let mut cfg = NetConfig::desk(1);
    for e in &entries {
        if !apply_net_key(&mut cfg, e)? {
            return Err(e.unknown());
        }
    }
    if let Some(k) = KEYS.iter().find(|k| !entries.iter().any(|e| e.key == **k)) {
        return Err(KvError::Missing(k.to_string()));
    }
    Ok(cfg)
}

pub fn save_checkpoint(dir: &Path, model: &ModelParams<f32>) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir)?;
    for (name, t) in model.store.iter() {
        tensor_file::write_tensor(&dir.join(format!("{name}.mmir")), t).map_err(|source| CheckpointError::Tensor {
            name: name.to_string(),
            source,
        })?;
    }
    // manifest last: a directory with a manifest is complete
    super::write_atomic(&dir.join(MANIFEST), manifest_text(&model.cfg).as_bytes())?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelParams<f32>, CheckpointError> {
    let cfg = parse_manifest(&fs::read_to_string(dir.join(MANIFEST))?)?;
    let mut model = ModelParams::<f32>::init(&cfg);
    let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let t = tensor_file::read_tensor(&dir.join(format!("{name}.mmir"))).map_err(|source| CheckpointError::Tensor {
            name: name.clone(),
            source,
        })?;
        let id = model.store.find(&name).expect("name from store");
        let slot = model.store.get_mut(id);
        if slot.shape() != t.shape() {
            return Err(CheckpointError::Shape {
                name,
                got: t.shape().to_vec(),
                expected: slot.shape().to_vec(),
            });
        }
        *slot = t;
    }
    Ok(model)
}
