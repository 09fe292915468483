//! Flat named-tensor checkpoint archive with a JSON metadata header.
//!
//! Layout: 8-byte magic, u64 header length, header JSON, u64 tensor count,
//! then per tensor (sorted by name): u32 name length, name bytes, u8 rank,
//! u64 dims, u64 payload bytes, little-endian f32 data. Loading an archive
//! and re-saving it yields byte-identical output.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Param, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SCCKPT01";

/// Pipeline stage a checkpoint belongs to; loading validates it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "vae")]
    Vae,
    #[serde(rename = "baseA")]
    BaseA,
    #[serde(rename = "sketchB")]
    SketchB,
    #[serde(rename = "controlnetB")]
    ControlnetB,
    /// Adapter-only archive (LoRA factors + patch embedding).
    #[serde(rename = "adapters")]
    Adapters,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Vae => "vae",
            Stage::BaseA => "baseA",
            Stage::SketchB => "sketchB",
            Stage::ControlnetB => "controlnetB",
            Stage::Adapters => "adapters",
        };
        write!(f, "{s}")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config_hash: String,
    pub stage: Stage,
    pub step: u64,
    /// Patch-embedding stream count for denoiser stages (2 or 3).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_streams: Option<usize>,
    /// Recorded training-time measurements (reconstruction MAE, latent
    /// scale, sketch-PCA correlation, final losses …).
    pub metrics_snapshot: BTreeMap<String, f64>,
}

impl CheckpointHeader {
    pub fn new(config_hash: impl Into<String>, stage: Stage, step: u64) -> Self {
        Self {
            version: 1,
            config_hash: config_hash.into(),
            stage,
            step,
            input_streams: None,
            metrics_snapshot: BTreeMap::new(),
        }
    }
}

/// A loaded (or to-be-saved) archive: header plus named tensors.
#[derive(Clone, Debug)]
pub struct Archive {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn from_store(header: CheckpointHeader, store: &ParamStore) -> Self {
        let tensors =
            store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        Self { header, tensors }
    }

    /// Keeps only tensors whose name matches any of the prefixes (used for
    /// adapter-only archives).
    pub fn filtered(header: CheckpointHeader, store: &ParamStore, prefixes: &[&str]) -> Self {
        let tensors = store
            .iter()
            .filter(|(_, p)| prefixes.iter().any(|pre| p.name.starts_with(pre)))
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        Self { header, tensors }
    }

    /// A parameter store holding the archive tensors (all frozen), for
    /// `ParamStore::load_values`.
    pub fn to_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            store.register(Param::new(name.clone(), t.clone(), false));
        }
        store
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u32).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&[t.shape().len() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            w.write_all(&((t.len() * 4) as u64).to_le_bytes())?;
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic: not a checkpoint archive".into()));
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let hlen = u64::from_le_bytes(u64buf) as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf)?;
        let header: CheckpointHeader = serde_json::from_slice(&hbuf)?;
        r.read_exact(&mut u64buf)?;
        let n = u64::from_le_bytes(u64buf) as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..n {
            let mut u32buf = [0u8; 4];
            r.read_exact(&mut u32buf)?;
            let name_len = u32::from_le_bytes(u32buf) as usize;
            let mut nbuf = vec![0u8; name_len];
            r.read_exact(&mut nbuf)?;
            let name = String::from_utf8(nbuf)
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                r.read_exact(&mut u64buf)?;
                shape.push(u64::from_le_bytes(u64buf) as usize);
            }
            r.read_exact(&mut u64buf)?;
            let bytes = u64::from_le_bytes(u64buf) as usize;
            let count = bytes / 4;
            if count != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: payload {count} does not match shape {shape:?}"
                )));
            }
            let mut data = vec![0u8; bytes];
            r.read_exact(&mut data)?;
            let values: Vec<f64> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.insert(name, Tensor::from_vec(&shape, values));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::read_from(&bytes[..])
    }

    /// Fails loudly unless the archive was produced under the same config
    /// fingerprint.
    pub fn require_config_hash(&self, expected: &str) -> Result<()> {
        if self.header.config_hash != expected {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {} vs current {}",
                self.header.config_hash, expected
            )));
        }
        Ok(())
    }

    /// Fails unless the archive carries the expected stage tag.
    pub fn require_stage(&self, expected: Stage) -> Result<()> {
        if self.header.stage != expected {
            return Err(Error::Contract(format!(
                "checkpoint stage {} where {} is required",
                self.header.stage, expected
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn sample_archive() -> Archive {
        let mut rng = rng_from(4);
        let mut store = ParamStore::new();
        store.register(Param::new("b.weight", Tensor::randn(&[3, 4], &mut rng), true));
        store.register(Param::new("a.bias", Tensor::randn(&[4], &mut rng), true));
        let mut header = CheckpointHeader::new("deadbeef", Stage::BaseA, 42);
        header.input_streams = Some(2);
        header.metrics_snapshot.insert("final_loss".into(), 0.125);
        Archive::from_store(header, &store)
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let arch = sample_archive();
        let mut a = Vec::new();
        arch.write_to(&mut a).unwrap();
        let loaded = Archive::read_from(&a[..]).unwrap();
        let mut b = Vec::new();
        loaded.write_to(&mut b).unwrap();
        assert_eq!(a, b, "load + re-save must be byte identical");
        assert_eq!(loaded.header.step, 42);
        assert_eq!(loaded.header.stage, Stage::BaseA);
        assert_eq!(loaded.header.input_streams, Some(2));
        assert_eq!(loaded.header.metrics_snapshot["final_loss"], 0.125);
    }

    #[test]
    fn values_survive_f32_quantization_consistently() {
        let arch = sample_archive();
        let mut buf = Vec::new();
        arch.write_to(&mut buf).unwrap();
        let loaded = Archive::read_from(&buf[..]).unwrap();
        for (name, t) in &arch.tensors {
            let lt = &loaded.tensors[name];
            for (a, b) in t.data().iter().zip(lt.data().iter()) {
                assert_eq!(*a as f32, *b as f32);
                // loaded values are exactly representable in f32
                assert_eq!(*b, (*b as f32) as f64);
            }
        }
    }

    #[test]
    fn bad_magic_and_hash_and_stage_are_loud() {
        let arch = sample_archive();
        let mut buf = Vec::new();
        arch.write_to(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(Archive::read_from(&buf[..]), Err(Error::Checkpoint(_))));

        assert!(arch.require_config_hash("deadbeef").is_ok());
        assert!(matches!(arch.require_config_hash("other"), Err(Error::Checkpoint(_))));
        assert!(arch.require_stage(Stage::BaseA).is_ok());
        assert!(matches!(arch.require_stage(Stage::Vae), Err(Error::Contract(_))));
    }

    #[test]
    fn filtered_archive_keeps_only_adapter_tensors() {
        let mut rng = rng_from(9);
        let mut store = ParamStore::new();
        store.register(Param::new("lora.blocks.0.attn.q.down", Tensor::randn(&[4, 2], &mut rng), true));
        store.register(Param::new("patch_embed.kernel", Tensor::randn(&[4, 2, 8], &mut rng), true));
        store.register(Param::new("blocks.0.attn.q.w", Tensor::randn(&[4, 4], &mut rng), false));
        let arch = Archive::filtered(
            CheckpointHeader::new("h", Stage::Adapters, 0),
            &store,
            &["lora.", "patch_embed."],
        );
        assert_eq!(arch.tensors.len(), 2);
        assert!(arch.tensors.contains_key("lora.blocks.0.attn.q.down"));
        assert!(arch.tensors.contains_key("patch_embed.kernel"));
    }
}
