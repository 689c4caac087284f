//! Binary checkpoints.
//!
//! Layout: the 4-byte magic `KAC1`, a little-endian `u32` format version, a
//! little-endian `u64` header length, the JSON header, then the tensor blobs
//! as 32-bit little-endian floats. Blob offsets in the header are relative to
//! the first byte after the header.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelBundle, ModelConfig, ParamStore};
use crate::tensorops::Tensor;

pub const MAGIC: &[u8; 4] = b"KAC1";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

/// Position of a run: KAA cycle `t`, learning iteration `i`, CAL iteration `j`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunState {
    pub t: u64,
    pub i: u64,
    pub j: u64,
}

/// Exact position of a ChaCha8 generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: String,
    /// 32-byte key, hex.
    pub seed: String,
    pub stream: u64,
    /// Word position as a decimal string (it is a 68-bit counter).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            algorithm: "chacha8".into(),
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::capture(&ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        if self.algorithm != "chacha8" {
            return Err(Error::Format(format!("unknown rng algorithm {:?}", self.algorithm)));
        }
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Format(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Format("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::Format(format!("rng word position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    config_hash: String,
    rng: RngState,
    run: RunState,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub bundle: ModelBundle<f32>,
    pub run: RunState,
    pub rng: RngState,
    /// Hash of the run configuration the checkpoint was produced under.
    pub config_hash: String,
}

/// SHA-256 of the compact JSON encoding of `config`, hex.
pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

const GROUPS: [&str; 3] = ["student", "teacher", "heads"];

fn stores(bundle: &ModelBundle<f32>) -> [&ParamStore<f32>; 3] {
    [&bundle.student, &bundle.teacher, &bundle.heads]
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    for (group, store) in GROUPS.iter().zip(stores(&ck.bundle)) {
        for (name, t) in store.iter() {
            let offset = blob.len() as u64;
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: format!("{group}/{name}"),
                shape: t.shape().to_vec(),
                offset,
                length: blob.len() as u64 - offset,
            });
        }
    }
    let header = Header {
        model: ck.bundle.config.clone(),
        config_hash: ck.config_hash.clone(),
        rng: ck.rng.clone(),
        run: ck.run,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Parses a checkpoint. Nothing is returned unless every tensor is present
/// and the blob section has exactly the declared length.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREAMBLE {
        return Err(Error::Format(format!("checkpoint is {} bytes, shorter than its preamble", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[PREAMBLE..];
    if header_len > body.len() as u64 {
        return Err(Error::Format("truncated checkpoint header".into()));
    }
    let (json, blob) = body.split_at(header_len as usize);
    let header: Header =
        serde_json::from_slice(json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    header.model.validate()?;

    let mut groups: [(Vec<String>, Vec<Tensor<f32>>); 3] = Default::default();
    let mut end = 0u64;
    for entry in &header.tensors {
        let (group, name) = entry
            .name
            .split_once('/')
            .ok_or_else(|| Error::Format(format!("tensor name {:?} has no group", entry.name)))?;
        let g = GROUPS
            .iter()
            .position(|&x| x == group)
            .ok_or_else(|| Error::Format(format!("unknown tensor group {group:?}")))?;
        let numel: usize = entry.shape.iter().product();
        if entry.length != 4 * numel as u64 {
            return Err(Error::Format(format!("tensor {} length does not match its shape", entry.name)));
        }
        let stop = entry
            .offset
            .checked_add(entry.length)
            .filter(|&s| s <= blob.len() as u64)
            .ok_or_else(|| Error::Format(format!("truncated checkpoint: tensor {} out of range", entry.name)))?;
        let data: Vec<f32> = blob[entry.offset as usize..stop as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        groups[g].0.push(name.to_string());
        groups[g].1.push(Tensor::new(entry.shape.clone(), data)?);
        end = end.max(stop);
    }
    if end != blob.len() as u64 {
        return Err(Error::Format(format!(
            "checkpoint has {} blob bytes but the directory covers {end}",
            blob.len()
        )));
    }
    let [s, t, h] = groups;
    let bundle = ModelBundle {
        config: header.model,
        student: ParamStore::from_parts(s.0, s.1)?,
        teacher: ParamStore::from_parts(t.0, t.1)?,
        heads: ParamStore::from_parts(h.0, h.1)?,
    };
    check_layout(&bundle)?;
    header.rng.restore()?;
    Ok(Checkpoint {
        bundle,
        run: header.run,
        rng: header.rng,
        config_hash: header.config_hash,
    })
}

/// The stored tensors must match what the stored config would initialise.
fn check_layout(bundle: &ModelBundle<f32>) -> Result<()> {
    let reference = crate::model::init_params::<f32>(&bundle.config, 0)?;
    for (a, b) in stores(bundle).into_iter().zip(stores(&reference)) {
        let shapes = |s: &ParamStore<f32>| -> Vec<(String, Vec<usize>)> {
            s.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect()
        };
        if shapes(a) != shapes(b) {
            return Err(Error::Format("checkpoint tensors do not match its model config".into()));
        }
    }
    Ok(())
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ck)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads `path`. When `expected_hash` is given and differs from the stored
/// hash a warning is logged and loading proceeds.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = decode(&bytes).map_err(|e| e.context(format!("loading {}", path.display())))?;
    if let Some(h) = expected_hash {
        if h != ck.config_hash {
            log::warn!(
                "checkpoint {} was written under config {} but the current config hashes to {h}",
                path.display(),
                ck.config_hash
            );
        }
    }
    Ok(ck)
}
