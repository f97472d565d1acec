//! Versioned JSON serialization of a [`ParameterStore`].
//!
//! ```json
//! {
//!   "format": "rvae-params",
//!   "version": 1,
//!   "step": 1200,
//!   "params": {
//!     "enc/node/l0/w": { "shape": [4, 32], "values": [...], "m": [...], "v": [...] }
//!   }
//! }
//! ```
//!
//! Values are row-major. `m` and `v` are the Adam moments and may be omitted,
//! in which case they load as zeros. Floats are written in shortest
//! round-trip form, so a save/load cycle is bit-exact.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::optim::{ParameterStore, Slot};
use crate::tensor::Tensor;

pub const FORMAT: &str = "rvae-params";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    m: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    v: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct File {
    format: String,
    version: u32,
    step: u64,
    params: BTreeMap<String, Entry>,
}

impl ParameterStore {
    pub fn to_json(&self) -> String {
        let params = self
            .slots
            .iter()
            .map(|(k, s)| {
                (
                    k.clone(),
                    Entry {
                        shape: s.value.shape().to_vec(),
                        values: s.value.data().to_vec(),
                        m: Some(s.m.clone()),
                        v: Some(s.v.clone()),
                    },
                )
            })
            .collect();
        let file = File {
            format: FORMAT.into(),
            version: VERSION,
            step: self.step,
            params,
        };
        serde_json::to_string(&file).expect("parameter store serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: File = serde_json::from_str(text).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        if file.format != FORMAT {
            return Err(TensorError::Checkpoint(format!("unexpected format `{}`", file.format)));
        }
        if file.version != VERSION {
            return Err(TensorError::Checkpoint(format!("unsupported version {}", file.version)));
        }
        let mut slots = BTreeMap::new();
        for (name, e) in file.params {
            let value = Tensor::new(e.shape, e.values)?;
            let n = value.len();
            let m = e.m.unwrap_or_else(|| vec![0.0; n]);
            let v = e.v.unwrap_or_else(|| vec![0.0; n]);
            if m.len() != n || v.len() != n {
                return Err(TensorError::Checkpoint(format!("moment length mismatch for `{name}`")));
            }
            slots.insert(name, Slot { value, m, v });
        }
        Ok(Self { slots, step: file.step })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut store = ParameterStore::new();
        store.insert("a", Tensor::new(vec![2, 2], vec![0.1, -1.0 / 3.0, 1e-300, 6.02e23]).unwrap());
        store.insert("b", Tensor::zeros(&[0, 4]));
        let text = store.to_json();
        let back = ParameterStore::from_json(&text).unwrap();
        assert_eq!(back, store);
    }

    #[test]
    fn rejects_wrong_format() {
        let text = r#"{"format":"other","version":1,"step":0,"params":{}}"#;
        assert!(ParameterStore::from_json(text).is_err());
        let text = r#"{"format":"rvae-params","version":9,"step":0,"params":{}}"#;
        assert!(ParameterStore::from_json(text).is_err());
    }

    #[test]
    fn moments_are_optional() {
        let text = r#"{"format":"rvae-params","version":1,"step":3,"params":{"w":{"shape":[2],"values":[1.0,2.0]}}}"#;
        let store = ParameterStore::from_json(text).unwrap();
        assert_eq!(store.step(), 3);
        assert_eq!(store.moments("w").unwrap().0, &[0.0, 0.0]);
    }
}
