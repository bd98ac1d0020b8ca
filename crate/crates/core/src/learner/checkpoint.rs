//! Versioned JSON checkpoints shared by every model kind.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tape::ParamStore;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_kind: String,
    pub hyperparams: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn from_store(model_kind: &str, hyperparams: serde_json::Value, store: &ParamStore) -> Result<Self> {
        let tensors = store
            .tensors()
            .iter()
            .map(|t| {
                if t.values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Checkpoint(format!("tensor {} has non-finite values", t.name)));
                }
                Ok(TensorRecord { name: t.name.clone(), shape: t.shape.clone(), values: t.values.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { format_version: FORMAT_VERSION, model_kind: model_kind.to_string(), hyperparams, tensors })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format_version {} (expected {FORMAT_VERSION})", ck.format_version)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn expect_kind(&self, kinds: &[&str]) -> Result<()> {
        if kinds.contains(&self.model_kind.as_str()) {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("model_kind {:?} is not one of {kinds:?}", self.model_kind)))
        }
    }

    pub fn hyperparams<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.hyperparams.clone())?)
    }

    /// Overwrites every tensor of `store` with the record of the same name.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Checkpoint(format!("checkpoint has {} tensors, model expects {}", self.tensors.len(), store.len())));
        }
        for rec in &self.tensors {
            let id = store.find(&rec.name).ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", rec.name)))?;
            let t = store.get_mut(id);
            if t.shape != rec.shape || rec.values.len() != t.len() {
                return Err(Error::Checkpoint(format!("tensor {} has shape {:?}, checkpoint has {:?}", rec.name, t.shape, rec.shape)));
            }
            t.values.copy_from_slice(&rec.values);
        }
        Ok(())
    }

    /// SHA-256 of the serialized document.
    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn values_round_trip_bit_exactly(values in proptest::collection::vec(-1e300f64..1e300, 1..40), tiny in -1e-300f64..1e-300) {
            let mut store = ParamStore::new();
            let mut v = values.clone();
            v.push(tiny);
            let n = v.len();
            store.add("t", vec![n], v.clone()).unwrap();
            let ck = Checkpoint::from_store("test", serde_json::json!({}), &store).unwrap();
            let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
            let mut restored = ParamStore::new();
            restored.add("t", vec![n], vec![0.0; n]).unwrap();
            back.restore_into(&mut restored).unwrap();
            for (a, b) in restored.tensors()[0].values.iter().zip(&v) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn rejects_shape_mismatch_and_bad_version() {
        let mut store = ParamStore::new();
        store.add("t", vec![2], vec![1.0, 2.0]).unwrap();
        let ck = Checkpoint::from_store("test", serde_json::json!({}), &store).unwrap();
        let mut other = ParamStore::new();
        other.add("t", vec![3], vec![0.0; 3]).unwrap();
        assert!(ck.restore_into(&mut other).is_err());
        let text = ck.to_json().unwrap().replace("\"format_version\":1", "\"format_version\":9");
        assert!(Checkpoint::from_json(&text).is_err());
        assert!(ck.expect_kind(&["vae"]).is_err());
    }
}
