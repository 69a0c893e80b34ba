//! Binary checkpoint format.
//!
//! ```text
//! "HYBD" | version: u32 LE | header_len: u64 LE | header (JSON, header_len bytes)
//! | payload: f64 LE values of every tensor, in manifest order
//! ```
//!
//! The header holds the model spec, the provenance and a manifest of
//! `{layer, role, shape, offset, len}` entries sorted by layer (globals
//! first) then role. Offsets and lengths count bytes from the payload start.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec, ParamKey, Provenance};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HYBD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    layer: Option<usize>,
    role: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    provenance: Provenance,
    tensors: Vec<Entry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Serialises `model` to bytes.
pub fn encode(model: &Model) -> Result<Vec<u8>> {
    model.validate()?;
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (key, t) in model.named_params() {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(Entry {
            layer: key.layer,
            role: key.role,
            shape: t.shape().to_vec(),
            offset,
            len: payload.len() as u64 - offset,
        });
    }
    let header = serde_json::to_vec(&Header {
        spec: model.spec.clone(),
        provenance: model.provenance.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 16 {
        return Err(bad(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < header_len {
        return Err(bad(format!(
            "truncated header: need {header_len} bytes, have {}",
            body.len()
        )));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])
        .map_err(|e| bad(format!("unreadable header: {e}")))?;
    let payload = &body[header_len..];
    header.spec.validate()?;

    // Skeleton with the right shapes; every value is overwritten below.
    let mut model = Model::init(header.spec.clone(), 0, &mut ChaCha8Rng::seed_from_u64(0))?;
    model.provenance = header.provenance;
    let mut params = model.named_params_mut();
    if params.len() != header.tensors.len() {
        return Err(bad(format!(
            "manifest lists {} tensors, spec needs {}",
            header.tensors.len(),
            params.len()
        )));
    }
    let mut expected_end = 0u64;
    for ((key, slot), entry) in params.iter_mut().zip(&header.tensors) {
        let found = ParamKey {
            layer: entry.layer,
            role: entry.role.clone(),
        };
        if *key != found {
            return Err(bad(format!("manifest entry {found} where {key} was expected")));
        }
        if entry.shape != slot.shape() || entry.len != 8 * slot.numel() as u64 {
            return Err(bad(format!(
                "{key}: manifest shape {:?} does not fit {:?}",
                entry.shape,
                slot.shape()
            )));
        }
        if entry.offset != expected_end {
            return Err(bad(format!("{key}: unexpected offset {}", entry.offset)));
        }
        let (start, end) = (entry.offset as usize, (entry.offset + entry.len) as usize);
        if end > payload.len() {
            return Err(bad(format!(
                "truncated payload: {key} needs bytes {start}..{end}, have {}",
                payload.len()
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        **slot = Tensor::new(entry.shape.clone(), data)?;
        expected_end = entry.offset + entry.len;
    }
    if expected_end as usize != payload.len() {
        return Err(bad(format!(
            "{} trailing payload bytes",
            payload.len() - expected_end as usize
        )));
    }
    drop(params);
    model.validate()?;
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(model)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    decode(&fs::read(path)?)
}
