//! Checkpoint files.
//!
//! Layout: the magic line `MMSR-CKPT-v1\n`, a little-endian `u64` header
//! length, a JSON header, then every tensor's raw little-endian `f32` bits
//! in header order. The header carries the payload length and SHA-256 so
//! truncation and corruption are caught on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::io::write_atomic;
use crate::error::{Error, Result};
use crate::nn::{ModelBundle, ModelSpecs, ParamSet, Variant};
use crate::tensor::Tensor;

use super::config::TrainConfig;
use super::optim::Adam;
use super::pool::ImagePool;
use super::state::{IterationLog, RngState, TrainState};

pub const MAGIC: &str = "MMSR-CKPT-v1";
const MAGIC_PREFIX: &str = "MMSR-CKPT-";

#[derive(Debug, Serialize, Deserialize)]
struct AdamHeader {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    key: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    variant: Variant,
    specs: ModelSpecs,
    config: TrainConfig,
    iteration: u64,
    epoch: usize,
    iterations_per_epoch: u64,
    loss_history: Vec<IterationLog>,
    rng: RngState,
    g_adam: AdamHeader,
    d_adam: AdamHeader,
    pool_capacity: (usize, usize),
    tensors: Vec<TensorEntry>,
    payload_len: u64,
    payload_sha256: String,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn adam_header(a: &Adam) -> AdamHeader {
    AdamHeader {
        beta1: a.beta1,
        beta2: a.beta2,
        eps: a.eps,
        t: a.t,
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(bundle: &ModelBundle, state: &TrainState, path: &Path) -> Result<()> {
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (group, set) in bundle.groups() {
        for (name, t) in set.iter() {
            tensors.push((format!("param/{group}/{name}"), t));
        }
    }
    for (tag, adam) in [("adam_g", &state.g_optim), ("adam_d", &state.d_optim)] {
        for (key, (m, v)) in &adam.moments {
            tensors.push((format!("{tag}/m/{key}"), m));
            tensors.push((format!("{tag}/v/{key}"), v));
        }
    }
    for (tag, pool) in [("pool_x", &state.pool_x), ("pool_y", &state.pool_y)] {
        for (i, t) in pool.images.iter().enumerate() {
            tensors.push((format!("{tag}/{i}"), t));
        }
    }
    let mut payload = Vec::with_capacity(tensors.iter().map(|(_, t)| t.numel() * 4).sum());
    for (_, t) in &tensors {
        for v in t.data() {
            payload.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    let header = Header {
        variant: bundle.variant,
        specs: bundle.specs,
        config: state.config.clone(),
        iteration: state.iteration,
        epoch: state.epoch,
        iterations_per_epoch: state.iterations_per_epoch,
        loss_history: state.loss_history.clone(),
        rng: RngState::capture(&state.rng),
        g_adam: adam_header(&state.g_optim),
        d_adam: adam_header(&state.d_optim),
        pool_capacity: (state.pool_x.capacity, state.pool_y.capacity),
        tensors: tensors
            .iter()
            .map(|(key, t)| TensorEntry {
                key: key.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        payload_len: payload.len() as u64,
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(MAGIC.len() + 9 + json.len() + payload.len());
    bytes.extend_from_slice(MAGIC.as_bytes());
    bytes.push(b'\n');
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&payload);
    write_atomic(path, &bytes)
}

fn split_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let magic_len = MAGIC.len() + 1;
    if bytes.len() < magic_len || !bytes.starts_with(MAGIC_PREFIX.as_bytes()) {
        return Err(ckpt_err("not a checkpoint file"));
    }
    let line_end = bytes.iter().position(|&b| b == b'\n').unwrap_or(bytes.len());
    let magic = String::from_utf8_lossy(&bytes[..line_end]);
    if magic != MAGIC {
        return Err(ckpt_err(format!("unsupported checkpoint version `{magic}`, expected `{MAGIC}`")));
    }
    let rest = &bytes[magic_len..];
    if rest.len() < 8 {
        return Err(ckpt_err("truncated header"));
    }
    let len = u64::from_le_bytes(rest[..8].try_into().expect("eight bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < len {
        return Err(ckpt_err("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&rest[..len]).map_err(|e| ckpt_err(format!("malformed header: {e}")))?;
    let payload = &rest[len..];
    if payload.len() as u64 != header.payload_len {
        return Err(ckpt_err(format!(
            "payload is {} bytes, header declares {}",
            payload.len(),
            header.payload_len
        )));
    }
    if hex(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(ckpt_err("payload checksum mismatch"));
    }
    Ok((header, payload))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelBundle, TrainState)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, payload) = split_header(&bytes)?;

    let mut groups: Vec<(String, ParamSet)> = Vec::new();
    let mut g_optim = Adam::new(h.g_adam.beta1, h.g_adam.beta2);
    g_optim.eps = h.g_adam.eps;
    g_optim.t = h.g_adam.t;
    let mut d_optim = Adam::new(h.d_adam.beta1, h.d_adam.beta2);
    d_optim.eps = h.d_adam.eps;
    d_optim.t = h.d_adam.t;
    let mut pool_x = ImagePool::new(h.pool_capacity.0);
    let mut pool_y = ImagePool::new(h.pool_capacity.1);

    let mut offset = 0usize;
    for entry in &h.tensors {
        let n: usize = entry.shape.iter().product();
        let end = offset + n * 4;
        if end > payload.len() {
            return Err(ckpt_err("tensor table exceeds payload"));
        }
        let data = payload[offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_bits(u32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        offset = end;
        let t = Tensor::from_vec(&entry.shape, data)?;
        let (kind, rest) = entry.key.split_once('/').ok_or_else(|| ckpt_err("bad tensor key"))?;
        match kind {
            "param" => {
                let (group, name) = rest.split_once('/').ok_or_else(|| ckpt_err("bad parameter key"))?;
                if groups.last().map(|g| g.0.as_str()) != Some(group) {
                    groups.push((group.to_string(), ParamSet::new()));
                }
                groups.last_mut().expect("pushed above").1.insert(name, t)?;
            }
            "adam_g" | "adam_d" => {
                let adam = if kind == "adam_g" { &mut g_optim } else { &mut d_optim };
                let (which, key) = rest.split_once('/').ok_or_else(|| ckpt_err("bad moment key"))?;
                let slot = adam
                    .moments
                    .entry(key.to_string())
                    .or_insert_with(|| (Tensor::zeros(&[0]), Tensor::zeros(&[0])));
                match which {
                    "m" => slot.0 = t,
                    "v" => slot.1 = t,
                    _ => return Err(ckpt_err("bad moment key")),
                }
            }
            "pool_x" => pool_x.images.push(t),
            "pool_y" => pool_y.images.push(t),
            _ => return Err(ckpt_err(format!("unknown tensor `{}`", entry.key))),
        }
    }
    if offset != payload.len() {
        return Err(ckpt_err("payload longer than its tensor table"));
    }

    let mut take = |name: &str| -> Option<ParamSet> {
        let i = groups.iter().position(|g| g.0 == name)?;
        Some(groups.remove(i).1)
    };
    let missing = |g: &str| ckpt_err(format!("missing parameter group {g}"));
    let bundle = ModelBundle {
        variant: h.variant,
        specs: h.specs,
        g1: take("g1").ok_or_else(|| missing("g1"))?,
        g2: take("g2").ok_or_else(|| missing("g2"))?,
        dx: take("dx").ok_or_else(|| missing("dx"))?,
        dy: take("dy").ok_or_else(|| missing("dy"))?,
        unit_latent: take("unit_latent"),
    };
    bundle
        .validate()
        .map_err(|e| ckpt_err(format!("parameters do not match the stored specs: {e}")))?;
    let state = TrainState {
        config: h.config,
        iteration: h.iteration,
        epoch: h.epoch,
        iterations_per_epoch: h.iterations_per_epoch,
        loss_history: h.loss_history,
        rng: h.rng.restore()?,
        g_optim,
        d_optim,
        pool_x,
        pool_y,
    };
    Ok((bundle, state))
}
