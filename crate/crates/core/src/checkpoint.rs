//! Self-describing binary checkpoints.
//!
//! Layout: 8-byte magic, `u64` header length, JSON header, little-endian
//! `f32` tensor blob, then a SHA-256 digest of everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"F2RCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: [usize; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub groups: BTreeMap<String, ParamStore<f32>>,
    /// Hex SHA-256 of the file contents before the trailer.
    pub digest: String,
}

impl Checkpoint {
    pub fn group(&self, name: &str, path: &Path) -> Result<&ParamStore<f32>> {
        self.groups.get(name).ok_or_else(|| Error::format(path, format!("checkpoint has no `{name}` tensors")))
    }

    pub fn meta_as<M: for<'de> Deserialize<'de>>(&self, path: &Path) -> Result<M> {
        serde_json::from_value(self.meta.clone()).map_err(|e| Error::format(path, e.to_string()))
    }
}

pub fn encode(kind: &str, meta: &impl Serialize, groups: &[(&str, &ParamStore<f32>)]) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    for (group, store) in groups {
        for (name, t) in store.iter() {
            tensors.push(TensorEntry { group: group.to_string(), name: name.to_string(), shape: t.shape() });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = Header {
        version: FORMAT_VERSION,
        kind: kind.to_string(),
        meta: serde_json::to_value(meta).expect("metadata serialises"),
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(16 + header.len() + blob.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blob);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn save(path: &Path, kind: &str, meta: &impl Serialize, groups: &[(&str, &ParamStore<f32>)]) -> Result<String> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bytes = encode(kind, meta, groups);
    let digest = hex::encode(&bytes[bytes.len() - 32..]);
    // Write then rename so a crash never leaves a torn checkpoint.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(digest)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |reason: &str| Error::format(path, reason.to_string());
    if bytes.len() < 16 + 32 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(bad("checksum mismatch (file is corrupt or truncated)"));
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    if 16 + hlen > body.len() {
        return Err(bad("header length exceeds file size"));
    }
    let header: Header = serde_json::from_slice(&body[16..16 + hlen]).map_err(|e| bad(&e.to_string()))?;
    if header.version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {}", header.version)));
    }
    let mut blob = &body[16 + hlen..];
    let mut groups: BTreeMap<String, ParamStore<f32>> = BTreeMap::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        if blob.len() < 4 * n {
            return Err(bad("tensor blob is shorter than the header declares"));
        }
        let data = blob[..4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        blob = &blob[4 * n..];
        groups.entry(e.group).or_default().add(e.name, Tensor::from_vec(e.shape, data));
    }
    if !blob.is_empty() {
        return Err(bad("trailing bytes after tensor blob"));
    }
    Ok(Checkpoint { kind: header.kind, meta: header.meta, groups, digest: hex::encode(trailer) })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Loads and checks the checkpoint kind.
pub fn load_kind(path: &Path, kind: &str) -> Result<Checkpoint> {
    let ck = load(path)?;
    if ck.kind != kind {
        return Err(Error::format(path, format!("expected a `{kind}` checkpoint, found `{}`", ck.kind)));
    }
    Ok(ck)
}
