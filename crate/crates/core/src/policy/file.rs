//! Binary policy files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "PALLOCNN"
//! version   u32
//! layout    u32 length + UTF-8   observation/action layout hash
//! model     u32 length + UTF-8   model fingerprint
//! name      u32 length + UTF-8   model name
//! layers    u32 count, then u64 per layer size
//! params    u64 count, then f64 bit patterns
//! checksum  8 bytes  leading bytes of SHA-256 over everything above
//! ```

use std::fs;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::PolicyNet;
use crate::model::ProcessModel;

pub const POLICY_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PALLOCNN";

#[derive(Debug, Error)]
pub enum PolicyFileError {
    #[error("i/o error on policy file: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt policy file: {0}")]
    Corrupt(String),
    #[error("unsupported policy file version {0}")]
    Version(u32),
    #[error("policy layout {found} does not match model layout {expected}")]
    LayoutMismatch { expected: String, found: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolicyHeader {
    pub version: u32,
    pub layout_hash: String,
    pub fingerprint: String,
    pub model_name: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredPolicy {
    pub header: PolicyHeader,
    pub net: PolicyNet,
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn checksum(bytes: &[u8]) -> [u8; 8] {
    let digest = Sha256::digest(bytes);
    digest[..8].try_into().unwrap()
}

pub fn encode_policy(net: &PolicyNet, model: &ProcessModel) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&POLICY_FORMAT_VERSION.to_le_bytes());
    put_str(&mut buf, &model.layout_hash());
    put_str(&mut buf, &model.fingerprint());
    put_str(&mut buf, model.name());
    buf.extend_from_slice(&(net.layer_sizes().len() as u32).to_le_bytes());
    for &s in net.layer_sizes() {
        buf.extend_from_slice(&(s as u64).to_le_bytes());
    }
    buf.extend_from_slice(&(net.params().len() as u64).to_le_bytes());
    for p in net.params() {
        buf.extend_from_slice(&p.to_bits().to_le_bytes());
    }
    let sum = checksum(&buf);
    buf.extend_from_slice(&sum);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PolicyFileError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| PolicyFileError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32, PolicyFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, PolicyFileError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String, PolicyFileError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| PolicyFileError::Corrupt("invalid UTF-8 in header".into()))
    }
}

/// Decodes a policy file without checking it against any model.
pub fn decode_policy(bytes: &[u8]) -> Result<StoredPolicy, PolicyFileError> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(PolicyFileError::Corrupt("not a policy file".into()));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 8);
    if checksum(body) != sum {
        return Err(PolicyFileError::Corrupt("checksum mismatch (truncated or modified)".into()));
    }
    let mut r = Reader { bytes: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != POLICY_FORMAT_VERSION {
        return Err(PolicyFileError::Version(version));
    }
    let layout_hash = r.string()?;
    let fingerprint = r.string()?;
    let model_name = r.string()?;
    let n_layers = r.u32()? as usize;
    let mut sizes = Vec::with_capacity(n_layers.min(64));
    for _ in 0..n_layers {
        sizes.push(r.u64()? as usize);
    }
    let n_params = r.u64()? as usize;
    let mut params = Vec::with_capacity(n_params.min(body.len() / 8));
    for _ in 0..n_params {
        params.push(f64::from_bits(r.u64()?));
    }
    if r.pos != body.len() {
        return Err(PolicyFileError::Corrupt("trailing bytes".into()));
    }
    let net = PolicyNet::from_parts(sizes, params)
        .ok_or_else(|| PolicyFileError::Corrupt("parameter count does not match layer sizes".into()))?;
    Ok(StoredPolicy {
        header: PolicyHeader {
            version,
            layout_hash,
            fingerprint,
            model_name,
        },
        net,
    })
}

pub fn save_policy(net: &PolicyNet, model: &ProcessModel, path: &Path) -> Result<(), PolicyFileError> {
    fs::write(path, encode_policy(net, model))?;
    Ok(())
}

/// Loads a policy and checks that its observation layout matches `model`.
/// A differing fingerprint alone (same layout, other rates) is accepted.
pub fn load_policy(path: &Path, model: &ProcessModel) -> Result<StoredPolicy, PolicyFileError> {
    let stored = decode_policy(&fs::read(path)?)?;
    let expected = model.layout_hash();
    if stored.header.layout_hash != expected {
        return Err(PolicyFileError::LayoutMismatch {
            expected,
            found: stored.header.layout_hash,
        });
    }
    if stored.header.fingerprint != model.fingerprint() {
        log::warn!(
            "policy was trained on `{}` with different rates; using it anyway",
            stored.header.model_name
        );
    }
    Ok(stored)
}
