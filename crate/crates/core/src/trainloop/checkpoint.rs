//! Checkpoint archives.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, the tensor payload (little-endian, in header order) and a
//! SHA-256 digest of everything before it. Writing is deterministic, so
//! save → load → save reproduces the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::{Adam, Moments};
use super::steps::TrainState;
use crate::config::AdamConfig;
use crate::datapipe::SchedulerState;
use crate::error::{Error, Result};
use crate::nets::{Component, NetConfig, ParameterStore};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"FOGFLOWK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREFIX_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    step: u64,
    seed: u64,
    rng: RngState,
    scheduler: SchedulerState,
    net: NetConfig,
    dtype: String,
    optimizer: AdamConfig,
    trainable: Vec<String>,
    optimizer_steps: BTreeMap<String, u64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngState {
    seed: String,
    stream: u64,
    /// `u128` word position, as a decimal string.
    word_pos: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    component: String,
    name: String,
    kind: TensorKind,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TensorKind {
    Weight,
    AdamM,
    AdamV,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported parameter dtype {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F64 => flat.to_vec1::<f64>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        _ => flat.to_vec1::<f32>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(())
}

/// Serializes the full training state.
pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let dtype = state.store.dtype();
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut optimizer_steps = BTreeMap::new();
    for c in Component::ALL {
        let moments = state.optimizer.moments(c);
        optimizer_steps.insert(c.name().to_string(), moments.steps);
        for (i, (name, var)) in state.store.vars(c).iter().enumerate() {
            for (kind, t) in [
                (TensorKind::Weight, var.as_tensor()),
                (TensorKind::AdamM, &moments.m[i]),
                (TensorKind::AdamV, &moments.v[i]),
            ] {
                tensors.push(TensorEntry {
                    component: c.name().into(),
                    name: name.clone(),
                    kind,
                    shape: t.dims().to_vec(),
                });
                tensor_bytes(t, &mut payload)?;
            }
        }
    }
    let header = Header {
        step: state.step,
        seed: state.seed,
        rng: RngState {
            seed: hex(&state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        scheduler: state.scheduler,
        net: state.store.config().clone(),
        dtype: dtype_name(dtype)?.into(),
        optimizer: *state.optimizer.config(),
        trainable: state.store.trainable().iter().map(|c| c.name().to_string()).collect(),
        optimizer_steps,
        tensors,
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload.len() + DIGEST_LEN);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Rebuilds a training state; nothing is returned unless every check passes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < PREFIX_LEN + DIGEST_LEN {
        return Err(bad(format!("archive too short ({} bytes)", bytes.len())));
    }
    if bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint archive (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch: archive is corrupt or was modified".into()));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("eight bytes")) as usize;
    let header_end = PREFIX_LEN
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| bad("header length exceeds archive".into()))?;
    let header: Header = serde_json::from_slice(&body[PREFIX_LEN..header_end]).map_err(|e| bad(format!("header: {e}")))?;
    let dtype = match header.dtype.as_str() {
        "f32" => DType::F32,
        "f64" => DType::F64,
        other => return Err(bad(format!("unknown dtype {other}"))),
    };
    let width = dtype.size_in_bytes();

    let mut store = ParameterStore::init(header.seed, &header.net, dtype)?;
    let mut adam = Adam::new(header.optimizer, &store)?;
    let mut payload = &body[header_end..];
    let mut entries = header.tensors.iter();
    for c in Component::ALL {
        let vars = store.vars(c);
        let mut m = Vec::with_capacity(vars.len());
        let mut v = Vec::with_capacity(vars.len());
        for (name, var) in &vars {
            for kind in [TensorKind::Weight, TensorKind::AdamM, TensorKind::AdamV] {
                let e = entries
                    .next()
                    .ok_or_else(|| bad(format!("missing tensor {c}/{name}")))?;
                if e.component != c.name() || &e.name != name || e.kind != kind || e.shape != var.as_tensor().dims() {
                    return Err(bad(format!(
                        "unexpected tensor {}/{} {:?} {:?}, wanted {c}/{name} {kind:?} {:?}",
                        e.component,
                        e.name,
                        e.kind,
                        e.shape,
                        var.as_tensor().dims()
                    )));
                }
                let count: usize = e.shape.iter().product();
                let len = count * width;
                if payload.len() < len {
                    return Err(bad("payload shorter than the tensor table".into()));
                }
                let (chunk, rest) = payload.split_at(len);
                payload = rest;
                let t = read_tensor(chunk, dtype, &e.shape)?;
                match kind {
                    TensorKind::Weight => store.assign(c, name, &t)?,
                    TensorKind::AdamM => m.push(t),
                    TensorKind::AdamV => v.push(t),
                }
            }
        }
        let steps = *header
            .optimizer_steps
            .get(c.name())
            .ok_or_else(|| bad(format!("missing optimizer step count for {c}")))?;
        adam.set_moments(&store, c, Moments { steps, m, v })?;
    }
    if entries.next().is_some() || !payload.is_empty() {
        return Err(bad("trailing tensors in archive".into()));
    }
    for c in Component::ALL {
        let on = header.trainable.iter().any(|n| n == c.name());
        store.set_trainable(c, on);
    }
    let seed = unhex(&header.rng.seed).ok_or_else(|| bad("bad rng seed".into()))?;
    let word_pos: u128 = header.rng.word_pos.parse().map_err(|_| bad("bad rng position".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(word_pos);
    Ok(TrainState {
        store,
        optimizer: adam,
        step: header.step,
        seed: header.seed,
        rng,
        scheduler: header.scheduler,
    })
}

fn read_tensor(chunk: &[u8], dtype: DType, shape: &[usize]) -> Result<Tensor> {
    let dev = Device::Cpu;
    Ok(match dtype {
        DType::F64 => {
            let v: Vec<f64> = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("eight bytes")))
                .collect();
            Tensor::from_vec(v, shape, &dev)?
        }
        _ => {
            let v: Vec<f32> = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")))
                .collect();
            Tensor::from_vec(v, shape, &dev)?
        }
    })
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(state)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

/// File name of the periodic checkpoint at `step`.
pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt-{step:08}.fogflow")
}

/// Periodic checkpoints in `dir`, oldest first.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found: Vec<(u64, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("ckpt-"))
            .and_then(|n| n.strip_suffix(".fogflow"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(step) = step {
            found.push((step, path));
        }
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// Deletes all but the newest `keep` periodic checkpoints.
pub fn prune_checkpoints(dir: &Path, keep: usize) -> Result<()> {
    let all = list_checkpoints(dir)?;
    for old in &all[..all.len().saturating_sub(keep)] {
        fs::remove_file(old)?;
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}
