//! Binary checkpoints with a component manifest.
//!
//! Layout: the 8-byte magic `FLMGCKPT`, a little-endian `u64` header length,
//! a JSON [`Manifest`], then every tensor's values as little-endian `f64` in
//! manifest order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FLMGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// Parameter names grouped by component (the name's first segment).
    pub components: BTreeMap<String, Vec<String>>,
    pub entries: Vec<Entry>,
    /// Free-form metadata such as the resolved model config.
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn component_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Writes via a sibling temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn to_bytes(store: &ParamStore, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut components: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut entries = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        components
            .entry(component_of(name).to_string())
            .or_default()
            .push(name.clone());
        entries.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            frozen: store.is_frozen(name),
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        components,
        entries,
        meta,
    };
    let header = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + header.len() + 8 * store.count_values(""));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ParamStore, Manifest)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", manifest.version)));
    }
    let mut store = ParamStore::new();
    let mut off = 16 + hlen;
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let raw = bytes
            .get(off..off + 8 * n)
            .ok_or_else(|| Error::Checkpoint(format!("truncated data for {}", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        if e.frozen {
            store.freeze(&e.name);
        }
        off += 8 * n;
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok((store, manifest))
}

pub fn save(path: &Path, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    write_atomic(path, &to_bytes(store, meta)?)
}

pub fn load(path: &Path) -> Result<(ParamStore, Manifest)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    from_bytes(&bytes)
}

/// Overwrites the parameters of `components` in `target` from the checkpoint,
/// keeping `target`'s freeze flags. Every copied tensor must already exist in
/// `target` with the same shape. Returns the number of tensors copied.
pub fn load_components(path: &Path, target: &mut ParamStore, components: &[&str]) -> Result<usize> {
    let (source, _) = load(path)?;
    copy_components(&source, target, components)
}

pub fn copy_components(source: &ParamStore, target: &mut ParamStore, components: &[&str]) -> Result<usize> {
    let mut n = 0;
    for c in components {
        if !source.names().any(|name| component_of(name) == *c) {
            return Err(Error::Checkpoint(format!("checkpoint has no component {c}")));
        }
    }
    for (name, t) in source.iter() {
        if !components.contains(&component_of(name)) {
            continue;
        }
        let dst = target
            .get_mut(name)
            .map_err(|_| Error::Checkpoint(format!("model has no parameter {name}")))?;
        if dst.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: checkpoint shape {:?}, model shape {:?}",
                t.shape(),
                dst.shape()
            )));
        }
        *dst = t.clone();
        n += 1;
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_partial_load() {
        let mut s = ParamStore::new();
        s.insert("lm.embed", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap());
        s.insert("gated.0.alpha_attn", Tensor::scalar(0.5));
        s.freeze("lm.embed");
        let bytes = to_bytes(&s, serde_json::json!({"k": 1})).unwrap();
        let (back, m) = from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(m.components["lm"], vec!["lm.embed".to_string()]);

        let mut target = ParamStore::new();
        target.insert("lm.embed", Tensor::zeros(vec![2, 2]));
        target.insert("gated.0.alpha_attn", Tensor::scalar(0.0));
        assert_eq!(copy_components(&back, &mut target, &["lm"]).unwrap(), 1);
        assert_eq!(target.get("lm.embed").unwrap(), s.get("lm.embed").unwrap());
        assert_eq!(target.get("gated.0.alpha_attn").unwrap().item().unwrap(), 0.0);
        assert!(copy_components(&back, &mut target, &["vision"]).is_err());
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
