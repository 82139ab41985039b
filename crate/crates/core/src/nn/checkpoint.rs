//! Versioned JSON checkpoints. Tensor values are base64 of little-endian f64.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub rng_seed: u64,
    pub params: Vec<ParamRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: String,
}

fn encode(values: impl Iterator<Item = f64>) -> String {
    let bytes: Vec<u8> = values.flat_map(f64::to_le_bytes).collect();
    STANDARD.encode(bytes)
}

fn decode(name: &str, text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Checkpoint(format!("`{name}`: bad base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!(
            "`{name}`: {} bytes is not a whole number of reals",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        let params = store
            .ids()
            .map(|id| {
                let v = store.value(id);
                ParamRecord {
                    name: store.name(id).to_owned(),
                    shape: vec![v.nrows(), v.ncols()],
                    values: encode(v.iter().copied()),
                }
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            rng_seed: store.rng_seed(),
            params,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    /// Parse and validate a checkpoint document.
    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        for p in &ckpt.params {
            p.tensor()?;
        }
        Ok(ckpt)
    }

    /// Overwrite the values of `store`; names and shapes must match exactly.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        let tensors = self
            .params
            .iter()
            .map(|p| p.tensor().map(|t| (p.name.as_str(), t)))
            .collect::<Result<Vec<_>>>()?;
        for (name, t) in &tensors {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            if store.value(id).dim() != t.dim() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{name}`: checkpoint {:?}, model {:?}",
                    t.dim(),
                    store.value(id).dim()
                )));
            }
        }
        for (name, t) in tensors {
            let id = store.find(name).expect("checked above");
            store.value_mut(id).assign(&t);
        }
        Ok(())
    }
}

impl ParamRecord {
    pub fn tensor(&self) -> Result<Array2<f64>> {
        let (rows, cols) = match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => {
                return Err(Error::Checkpoint(format!(
                    "`{}`: unsupported rank {}",
                    self.name,
                    other.len()
                )))
            }
        };
        if rows == 0 || cols == 0 {
            return Err(Error::Checkpoint(format!("`{}`: empty shape", self.name)));
        }
        let values = decode(&self.name, &self.values)?;
        if rows.checked_mul(cols) != Some(values.len()) {
            return Err(Error::Checkpoint(format!(
                "`{}`: shape {:?} does not hold {} values",
                self.name,
                self.shape,
                values.len()
            )));
        }
        Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn store() -> ParamStore {
        let mut s = ParamStore::new(42);
        s.register("a.w", array![[1.5, -2.25], [1e-300, f64::MAX]]).unwrap();
        s.register("a.b", array![[0.1, 0.2]]).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let text = Checkpoint::from_store(&s).to_json();
        let ckpt = Checkpoint::from_json(&text).unwrap();
        let mut t = store();
        for id in t.ids().collect::<Vec<_>>() {
            t.value_mut(id).fill(0.0);
        }
        ckpt.load_into(&mut t).unwrap();
        for id in s.ids() {
            assert_eq!(s.value(id), t.value(id));
        }
        assert_eq!(ckpt.rng_seed, 42);
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut ckpt = Checkpoint::from_store(&store());
        ckpt.version = 7;
        let err = Checkpoint::from_json(&ckpt.to_json()).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut ckpt = Checkpoint::from_store(&store());
        ckpt.params[1].shape = vec![1, 3];
        assert!(Checkpoint::from_json(&ckpt.to_json()).is_err());

        let ckpt = Checkpoint::from_store(&store());
        let mut other = ParamStore::new(0);
        other.register("a.w", array![[0.0, 0.0, 0.0, 0.0]]).unwrap();
        other.register("a.b", array![[0.0, 0.0]]).unwrap();
        assert!(ckpt.load_into(&mut other).is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = r#"{"version":1,"rng_seed":0,"params":[],"extra":1}"#;
        assert!(Checkpoint::from_json(text).is_err());
    }
}
