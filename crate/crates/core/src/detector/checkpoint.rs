//! Model files: a `wbh-model v1` line, a JSON architecture descriptor line,
//! the parameter count and parameters as little-endian 64-bit values, then a
//! 64-bit checksum over everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::network::{Architecture, ModelState};
use crate::dataset::ClassSet;
use crate::error::{io_err, DetectorError};

const MAGIC: &str = "wbh-model v1";

#[derive(Serialize, Deserialize)]
struct Descriptor {
    arch: Architecture,
    classes: ClassSet,
    step: u64,
}

fn checksum(bytes: &[u8]) -> u64 {
    u64::from_le_bytes(Sha256::digest(bytes)[..8].try_into().unwrap())
}

pub fn encode_model(model: &ModelState) -> Vec<u8> {
    let desc = Descriptor { arch: model.arch.clone(), classes: model.class_set.clone(), step: model.step };
    let mut out = format!("{MAGIC}\n{}\n", serde_json::to_string(&desc).expect("descriptor serializes")).into_bytes();
    out.extend((model.params.len() as u64).to_le_bytes());
    for p in &model.params {
        out.extend(p.to_le_bytes());
    }
    out.extend(checksum(&out).to_le_bytes());
    out
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<ModelState, DetectorError> {
    let version = |message: String| DetectorError::Version { path: path.to_path_buf(), message };
    if !bytes.starts_with(format!("{MAGIC}\n").as_bytes()) {
        let head = String::from_utf8_lossy(&bytes[..bytes.len().min(16)]).into_owned();
        return Err(version(format!("not a {MAGIC} file (starts with {head:?})")));
    }
    if bytes.len() < MAGIC.len() + 1 + 16 {
        return Err(DetectorError::Checksum { path: path.to_path_buf() });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if checksum(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err(DetectorError::Checksum { path: path.to_path_buf() });
    }
    let rest = &body[MAGIC.len() + 1..];
    let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| version("missing descriptor".into()))?;
    let desc: Descriptor = serde_json::from_slice(&rest[..nl]).map_err(|e| version(format!("bad descriptor: {e}")))?;
    let data = &rest[nl + 1..];
    if data.len() < 8 {
        return Err(version("missing parameter block".into()));
    }
    let count = u64::from_le_bytes(data[..8].try_into().unwrap()) as usize;
    let payload = &data[8..];
    if payload.len() != count * 8 || count != desc.arch.param_count() {
        return Err(version(format!(
            "{count} parameters stored, {} bytes present, architecture needs {}",
            payload.len(),
            desc.arch.param_count()
        )));
    }
    let params = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let model = ModelState { arch: desc.arch, class_set: desc.classes, params, step: desc.step };
    model.validate().map_err(|e| version(e.to_string()))?;
    Ok(model)
}

pub fn save_model(model: &ModelState, path: &Path) -> Result<(), DetectorError> {
    fs::write(path, encode_model(model)).map_err(io_err(path))
}

pub fn load_model(path: &Path) -> Result<ModelState, DetectorError> {
    let bytes = fs::read(path).map_err(io_err::<DetectorError>(path))?;
    decode_model(&bytes, path)
}

/// Loads a model and checks it was built for `arch` and `classes`.
pub fn load_model_for(path: &Path, arch: &Architecture, classes: &ClassSet) -> Result<ModelState, DetectorError> {
    let m = load_model(path)?;
    if &m.arch != arch || &m.class_set != classes {
        return Err(DetectorError::Version {
            path: path.to_path_buf(),
            message: format!("stored architecture {:?} / classes {:?} do not match the requested configuration", m.arch, m.class_set.names()),
        });
    }
    Ok(m)
}
