//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "MUSARTCK"
//! version  u32      currently 1
//! meta_len u64      followed by meta_len bytes of UTF-8 JSON
//! count    u32      number of tensor records
//! record:  name_len u32, name bytes, dtype u8 (1 = f64), ndim u32,
//!          dims u64 * ndim, values (8 bytes each, little-endian)
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use indexmap::IndexMap;
use serde_json::Value;

use super::optim::{AdamConfig, AdamState};
use super::params::ParamSet;
use super::spectral::SpectralState;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MUSARTCK";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    pub tensors: IndexMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(meta: Value) -> Self {
        Self {
            meta,
            tensors: IndexMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("json value serializes");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint {
            path: origin.to_path_buf(),
            reason,
        };
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| bad("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r).ok_or_else(|| bad("truncated header".into()))?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let meta_len = read_u64(&mut r).ok_or_else(|| bad("truncated header".into()))? as usize;
        let meta_bytes =
            read_vec(&mut r, meta_len).ok_or_else(|| bad("truncated metadata".into()))?;
        let meta: Value =
            serde_json::from_slice(&meta_bytes).map_err(|e| bad(format!("metadata: {e}")))?;
        let count = read_u32(&mut r).ok_or_else(|| bad("truncated record count".into()))?;
        let mut tensors = IndexMap::new();
        for i in 0..count {
            let trunc = || bad(format!("record {i} truncated"));
            let name_len = read_u32(&mut r).ok_or_else(trunc)? as usize;
            let name = String::from_utf8(read_vec(&mut r, name_len).ok_or_else(trunc)?)
                .map_err(|_| bad(format!("record {i}: name is not UTF-8")))?;
            let dtype = read_vec(&mut r, 1).ok_or_else(trunc)?[0];
            if dtype != DTYPE_F64 {
                return Err(bad(format!("{name}: unsupported dtype {dtype}")));
            }
            let ndim = read_u32(&mut r).ok_or_else(trunc)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r).ok_or_else(trunc)? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = read_vec(&mut r, n * 8).ok_or_else(trunc)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, Tensor::new(&shape, data));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    fn missing(&self, what: &str) -> Error {
        Error::Checkpoint {
            path: Default::default(),
            reason: format!("missing {what}"),
        }
    }

    /// Stores every parameter under `param/<name>` and every power-iteration vector
    /// under `spectral_u/<name>`.
    pub fn put_params(&mut self, params: &ParamSet) {
        for (name, p) in params.iter() {
            self.tensors
                .insert(format!("param/{name}"), p.value.clone());
            if let Some(s) = &p.spectral {
                self.tensors.insert(
                    format!("spectral_u/{name}"),
                    Tensor::new(&[s.u.len()], s.u.clone()),
                );
            }
        }
    }

    /// Overwrites the values of `params` (which fixes names and shapes) from the container.
    pub fn restore_params(&self, params: &mut ParamSet) -> Result<()> {
        for (name, p) in params.iter_mut() {
            let t = self
                .tensors
                .get(&format!("param/{name}"))
                .ok_or_else(|| self.missing(&format!("param/{name}")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint {
                    path: Default::default(),
                    reason: format!(
                        "{name}: stored shape {:?}, expected {:?}",
                        t.shape(),
                        p.value.shape()
                    ),
                });
            }
            p.value = t.clone();
            if let Some(s) = p.spectral.as_mut() {
                let u = self
                    .tensors
                    .get(&format!("spectral_u/{name}"))
                    .ok_or_else(|| self.missing(&format!("spectral_u/{name}")))?;
                *s = SpectralState {
                    u: u.data().to_vec(),
                };
            }
        }
        Ok(())
    }

    /// Stores optimizer moments under `adam/<group>/{m,v}/<name>` and the step counter
    /// and hyperparameters in the metadata.
    pub fn put_adam(&mut self, group: &str, state: &AdamState) {
        for (name, m) in &state.m {
            self.tensors
                .insert(format!("adam/{group}/m/{name}"), m.clone());
        }
        for (name, v) in &state.v {
            self.tensors
                .insert(format!("adam/{group}/v/{name}"), v.clone());
        }
        let entry = serde_json::json!({ "t": state.t, "config": state.config });
        if !self.meta.is_object() {
            self.meta = serde_json::json!({});
        }
        let obj = self.meta.as_object_mut().unwrap();
        let adam = obj.entry("adam").or_insert_with(|| serde_json::json!({}));
        adam[group] = entry;
    }

    pub fn get_adam(&self, group: &str) -> Result<AdamState> {
        let entry = self
            .meta
            .get("adam")
            .and_then(|a| a.get(group))
            .ok_or_else(|| self.missing(&format!("adam/{group}")))?;
        let t = entry
            .get("t")
            .and_then(Value::as_u64)
            .ok_or_else(|| self.missing("adam step counter"))?;
        let config: AdamConfig =
            serde_json::from_value(entry["config"].clone()).map_err(|e| Error::Checkpoint {
                path: Default::default(),
                reason: format!("adam config: {e}"),
            })?;
        let mut state = AdamState::new(config);
        state.t = t;
        let mprefix = format!("adam/{group}/m/");
        let vprefix = format!("adam/{group}/v/");
        for (k, tensor) in &self.tensors {
            if let Some(name) = k.strip_prefix(&mprefix) {
                state.m.insert(name.to_string(), tensor.clone());
            } else if let Some(name) = k.strip_prefix(&vprefix) {
                state.v.insert(name.to_string(), tensor.clone());
            }
        }
        Ok(state)
    }
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Option<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).ok()?;
    Some(u32::from_le_bytes(b))
}

fn read_u64(r: &mut Cursor<&[u8]>) -> Option<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).ok()?;
    Some(u64::from_le_bytes(b))
}

fn read_vec(r: &mut Cursor<&[u8]>, n: usize) -> Option<Vec<u8>> {
    let remaining = r.get_ref().len() - r.position() as usize;
    if n > remaining {
        return None;
    }
    let mut v = vec![0u8; n];
    r.read_exact(&mut v).ok()?;
    Some(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn container_round_trips(
            dims in proptest::collection::vec(1usize..4, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((i as u64 ^ seed) as f64).sin() * 1e3).collect();
            let mut ck = Checkpoint::new(serde_json::json!({ "seed": seed }));
            ck.tensors.insert("a/b".into(), Tensor::new(&dims, data));
            let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, ck);
        }
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let ck = Checkpoint::new(serde_json::json!({}));
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(b"NOTACKPT\x01\0\0\0", Path::new("x")).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2], Path::new("x")).is_err());
    }

    #[test]
    fn adam_state_round_trips() {
        let mut st = AdamState::new(AdamConfig::default());
        st.t = 7;
        st.m.insert("w".into(), Tensor::scalar(0.5));
        st.v.insert("w".into(), Tensor::scalar(0.25));
        let mut ck = Checkpoint::new(serde_json::json!({}));
        ck.put_adam("gen", &st);
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back.get_adam("gen").unwrap(), st);
    }
}
