use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ParamStore, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "sgvl-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

/// First line of a checkpoint file. The float blocks that follow are laid
/// out in `params` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub store: ParamStore,
}

/// SHA-256 over the compact JSON text of `config`. Object keys serialize in
/// sorted order, so equal configs hash equally.
pub fn config_hash(config: &serde_json::Value) -> String {
    let text = serde_json::to_string(config).expect("json values always serialize");
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(config: serde_json::Value, meta: serde_json::Value, store: ParamStore) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| ParamEntry { name: p.name.clone(), shape: p.tensor.shape().to_vec(), trainable: p.trainable })
            .collect();
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            config_hash: config_hash(&config),
            config,
            meta,
            params,
        };
        Checkpoint { header, store }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.header).expect("header serializes");
        out.push(b'\n');
        for (_, p) in self.store.iter() {
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header line"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(format!("header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("unsupported format {:?}", header.format)));
        }
        let expect = config_hash(&header.config);
        if header.config_hash != expect {
            return Err(bad(format!("config hash {} does not match config ({expect})", header.config_hash)));
        }
        let body = &bytes[nl + 1..];
        let total: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        if body.len() != total * 8 {
            return Err(bad(format!("expected {} payload bytes, found {}", total * 8, body.len())));
        }
        let mut store = ParamStore::new();
        let mut chunks = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        for p in &header.params {
            let n = p.shape.iter().product();
            let data: Vec<f64> = chunks.by_ref().take(n).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("non-finite value in {}", p.name)));
            }
            let t = Tensor::new(p.shape.clone(), data).map_err(|e| bad(format!("{}: {e}", p.name)))?;
            store.add(p.name.clone(), t, p.trainable).map_err(|e| bad(e.to_string()))?;
        }
        Ok(Checkpoint { header, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Checkpoint {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::matrix(2, 2, vec![1.0, -0.5, 3.25, 1e-300]).unwrap(), true).unwrap();
        s.add("b", Tensor::scalar(7.0), false).unwrap();
        Checkpoint::new(json!({"d": 4, "heads": 1}), json!({"stage": "base"}), s)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn hash_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"x":1,"y":[1,2]}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"y":[1,2],"x":1}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
    }

    #[test]
    fn truncated_or_tampered_files_fail() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let text = String::from_utf8_lossy(&bytes).replace("\"heads\":1", "\"heads\":2");
        assert!(Checkpoint::from_bytes(text.as_bytes()).is_err());
    }
}
