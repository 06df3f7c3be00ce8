//! Saving and restoring the trainable weights of a network.
//!
//! A checkpoint is a little-endian `f64` blob of the selected parameters in
//! store order plus a JSON manifest naming each one with its shape. The
//! frozen backbone is never written; it is rebuilt from its seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifacts::{decode_f64s, encode_f64s, read_bytes, read_text, sha256_hex, write_bytes, write_json};
use crate::error::{Error, Result};
use crate::network::{BranchedNetwork, RankPolicy};
use crate::tensor::Tensor;
use crate::tglora::LayerManifest;
use crate::tree::TaskTree;

pub const CHECKPOINT_BLOB: &str = "weights.bin";
pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub seed: u64,
    pub tree: TaskTree,
    pub policy: RankPolicy,
    pub backbone_sha256: String,
    pub layers: Vec<LayerManifest>,
    pub tensors: Vec<TensorEntry>,
    pub blob_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// Which parameters a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Heads,
    Trainable,
}

impl Selection {
    fn keeps(self, name: &str) -> bool {
        match self {
            Selection::Heads => BranchedNetwork::is_head_param(name),
            Selection::Trainable => !BranchedNetwork::is_shared_param(name),
        }
    }
}

pub fn to_parts(net: &BranchedNetwork, seed: u64, which: Selection) -> (CheckpointManifest, Vec<u8>) {
    let mut values = Vec::new();
    let mut tensors = Vec::new();
    for (_, p) in net.store.iter().filter(|(_, p)| which.keeps(&p.name)) {
        values.extend_from_slice(p.value.data());
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
        });
    }
    let blob = encode_f64s(&values);
    let layers = net
        .stages
        .iter()
        .flat_map(|s| &s.layers)
        .map(|l| l.manifest(&net.store))
        .collect();
    let manifest = CheckpointManifest {
        seed,
        tree: net.tree.clone(),
        policy: net.policy,
        backbone_sha256: net.backbone_hash(),
        layers,
        tensors,
        blob_sha256: sha256_hex(&blob),
        config_hash: None,
    };
    (manifest, blob)
}

/// Checks a manifest against its blob and splits the blob into named
/// tensors.
pub fn decode(manifest: &CheckpointManifest, blob: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if sha256_hex(blob) != manifest.blob_sha256 {
        return Err(Error::format("checkpoint blob", "checksum mismatch"));
    }
    let values = decode_f64s(blob)?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    let mut off = 0usize;
    for e in &manifest.tensors {
        let len = e
            .shape
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .ok_or_else(|| Error::format("checkpoint manifest", format!("{}: shape overflows", e.name)))?;
        let end = off
            .checked_add(len)
            .filter(|&end| end <= values.len())
            .ok_or_else(|| Error::format("checkpoint blob", format!("{} runs past the end", e.name)))?;
        out.push((e.name.clone(), Tensor::new(e.shape.clone(), values[off..end].to_vec())?));
        off = end;
    }
    if off != values.len() {
        return Err(Error::format("checkpoint blob", format!("{} trailing values", values.len() - off)));
    }
    Ok(out)
}

/// Overwrites the named parameters of `net` with a checkpoint's tensors.
pub fn apply(net: &mut BranchedNetwork, manifest: &CheckpointManifest, blob: &[u8]) -> Result<()> {
    if manifest.backbone_sha256 != net.backbone_hash() {
        return Err(Error::format("checkpoint", "saved against a different backbone"));
    }
    for (name, t) in decode(manifest, blob)? {
        let id = net
            .store
            .id(&name)
            .ok_or_else(|| Error::format("checkpoint", format!("network has no parameter {name}")))?;
        let p = net.store.get_mut(id);
        if p.frozen {
            return Err(Error::format("checkpoint", format!("{name} is frozen")));
        }
        if p.value.shape() != t.shape() {
            return Err(Error::format(
                "checkpoint",
                format!("{name}: shape {:?} vs {:?}", t.shape(), p.value.shape()),
            ));
        }
        p.value = t;
    }
    Ok(())
}

pub fn save(net: &BranchedNetwork, seed: u64, which: Selection, config_hash: Option<String>, dir: &Path) -> Result<()> {
    let (mut manifest, blob) = to_parts(net, seed, which);
    manifest.config_hash = config_hash;
    write_bytes(&dir.join(CHECKPOINT_BLOB), &blob)?;
    write_json(&dir.join(CHECKPOINT_MANIFEST), &manifest)
}

pub fn load_manifest(dir: &Path) -> Result<(CheckpointManifest, Vec<u8>)> {
    let manifest: CheckpointManifest = serde_json::from_str(&read_text(&dir.join(CHECKPOINT_MANIFEST))?)
        .map_err(|e| Error::format("checkpoint manifest", e))?;
    let blob = read_bytes(&dir.join(CHECKPOINT_BLOB))?;
    Ok((manifest, blob))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;

    fn net(seed: u64) -> BranchedNetwork {
        let cfg = NetworkConfig {
            input_dim: 3,
            hidden_dim: 4,
            stage_count: 2,
            head_hidden: 3,
            ..NetworkConfig::default()
        };
        let names: Vec<String> = vec!["a".into(), "b".into()];
        BranchedNetwork::build(&cfg, &TaskTree::individual(2, 2), RankPolicy::Uniform { rank: 1 }, &names, &[1, 2], seed)
            .unwrap()
    }

    #[test]
    fn round_trip_restores_weights() {
        let src = net(1);
        let mut dst = net(2);
        assert_ne!(src.store.hash_values(|_| true), dst.store.hash_values(|_| true));
        let (m, blob) = to_parts(&src, 1, Selection::Trainable);
        apply(&mut dst, &m, &blob).unwrap();
        assert_eq!(src.store.hash_values(|_| true), dst.store.hash_values(|_| true));
    }

    #[test]
    fn heads_only() {
        let (m, _) = to_parts(&net(1), 1, Selection::Heads);
        assert!(m.tensors.iter().all(|t| t.name.starts_with("head.")));
        assert_eq!(m.tensors.len(), 8);
    }

    #[test]
    fn corrupt_parts_rejected() {
        let (mut m, blob) = to_parts(&net(1), 1, Selection::Trainable);
        assert!(decode(&m, &blob[..blob.len() - 8]).is_err());
        m.tensors.pop();
        assert!(decode(&m, &blob).is_err());
    }
}
