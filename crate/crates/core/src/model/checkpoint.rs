//! Checkpoint directory: `manifest.json` lists every slot (sorted by name)
//! with its shape, dtype and byte offset into `params.bin`, which holds
//! little-endian `f32` values, row-major, concatenated in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Network, Role};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub role: Role,
    pub config: ModelConfig,
    pub slots: Vec<SlotEntry>,
}

impl CheckpointManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
    }
}

impl<T: Real> Network<T> {
    /// Writes the checkpoint directory, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut named: Vec<(&str, &Tensor<T>)> = self.store().iter().collect();
        named.sort_by(|a, b| a.0.cmp(b.0));
        let mut bytes = Vec::with_capacity(4 * self.param_count());
        let mut slots = Vec::with_capacity(named.len());
        for (name, t) in named {
            slots.push(SlotEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset: bytes.len() as u64,
            });
            for v in t.data() {
                let x = v.to_f32().expect("Real converts to f32");
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        let manifest = CheckpointManifest {
            role: self.role(),
            config: self.config().clone(),
            slots,
        };
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        let path = dir.join(PARAMS_FILE);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    /// Rebuilds the network described by a checkpoint directory.
    ///
    /// Every slot of the architecture must appear exactly once with a
    /// matching shape.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = CheckpointManifest::read(dir)?;
        let path = dir.join(PARAMS_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut net = Network::<T>::new(manifest.config.clone(), manifest.role, 0)?;
        if manifest.slots.len() != net.store().len() {
            return Err(Error::Config(format!(
                "checkpoint lists {} slots, architecture has {}",
                manifest.slots.len(),
                net.store().len()
            )));
        }
        for slot in &manifest.slots {
            let id = net
                .store()
                .find(&slot.name)
                .ok_or_else(|| Error::Config(format!("checkpoint slot `{}` is not in the architecture", slot.name)))?;
            let expected = net.store().get(id).shape().to_vec();
            if slot.shape != expected || slot.dtype != "f32" {
                return Err(Error::Config(format!(
                    "slot `{}`: {} {:?} does not match f32 {:?}",
                    slot.name, slot.dtype, slot.shape, expected
                )));
            }
            let n: usize = expected.iter().product();
            let start = slot.offset as usize;
            let chunk = bytes.get(start..start + 4 * n).ok_or_else(|| {
                Error::Config(format!("slot `{}` runs past the end of {PARAMS_FILE}", slot.name))
            })?;
            let values = chunk
                .chunks_exact(4)
                .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                .collect();
            *net.store_mut().get_mut(id) = Tensor::new(expected, values)?;
        }
        Ok(net)
    }
}
