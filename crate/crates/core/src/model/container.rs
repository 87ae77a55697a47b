//! Binary weight container.
//!
//! Layout:
//!
//! ```text
//! [u64 LE: manifest length N][N bytes: UTF-8 JSON manifest][payload]
//! ```
//!
//! The manifest is
//! `{"format_version": 1, "config": {..ModelConfig..}, "tensors": [{"name", "shape", "dtype": "f64", "byte_offset"}]}`
//! where `byte_offset` is relative to the start of the payload. The payload is
//! every tensor's row-major data as little-endian `f64`, concatenated in
//! manifest order.
//!
//! Tensor names (blocks numbered from 1):
//!
//! - `token_embedding` `[vocab_size, d_model]`
//! - `pos_embedding` `[max_seq_len, d_model]`
//! - `audio_projection` `[d_audio, d_model]`, `audio_bias` `[d_model]`
//! - `block.{b}.ln_attn.gamma`, `block.{b}.ln_attn.beta` `[d_model]`
//! - `block.{b}.w_q`, `w_k`, `w_v`, `w_o` `[d_model, d_model]`
//! - `block.{b}.ln_mlp.gamma`, `block.{b}.ln_mlp.beta` `[d_model]`
//! - `block.{b}.w_in` `[d_model, d_ff]`, `block.{b}.b_in` `[d_ff]`
//! - `block.{b}.w_out` `[d_ff, d_model]`, `block.{b}.b_out` `[d_model]`
//! - `final_norm.gamma`, `final_norm.beta` `[d_model]`
//! - `unembedding` `[d_model, vocab_size]`
//!
//! Norm parameters are stored even when `norm_kind` is `identity`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockWeights, Model, ModelConfig, ModelWeights, NormParams, Shape};
use crate::tensor::Tensor2;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: u64,
}

/// Serialize a model into container bytes.
pub fn to_bytes(model: &Model) -> Vec<u8> {
    let tensors = model.weights().named_tensors();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, shape, data) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.dims(),
            dtype: "f64".into(),
            byte_offset: payload.len() as u64,
        });
        for v in data.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

/// Parse container bytes. `origin` names the source in error messages.
pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Model> {
    let fail = |msg: String| Error::format(origin, msg);
    if bytes.len() < 8 {
        return Err(fail("file shorter than the 8-byte manifest length".into()));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = &bytes[8..];
    if len > body.len() {
        return Err(fail(format!(
            "manifest length {len} exceeds remaining {} bytes",
            body.len()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..len])
        .map_err(|e| fail(format!("bad manifest: {e}")))?;
    let payload = &body[len..];

    if manifest.format_version != FORMAT_VERSION {
        return Err(fail(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    let config = manifest.config;
    config.validate().map_err(|e| fail(e.to_string()))?;

    let layout: HashMap<String, Shape> = ModelWeights::expected_layout(&config).into_iter().collect();
    let mut found: HashMap<String, Vec<f64>> = HashMap::new();
    let mut total = 0usize;
    for entry in &manifest.tensors {
        let want = layout
            .get(&entry.name)
            .ok_or_else(|| fail(format!("unknown tensor {}", entry.name)))?;
        if entry.dtype != "f64" {
            return Err(fail(format!("tensor {} has dtype {}", entry.name, entry.dtype)));
        }
        if entry.shape != want.dims() {
            return Err(fail(format!(
                "tensor {} has shape {:?}, config requires {:?}",
                entry.name,
                entry.shape,
                want.dims()
            )));
        }
        let start = usize::try_from(entry.byte_offset).map_err(|_| fail("offset overflow".into()))?;
        let nbytes = want.numel() * 8;
        let end = start
            .checked_add(nbytes)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| fail(format!("tensor {} extends past the payload", entry.name)))?;
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(fail(format!("tensor {} has non-finite entries", entry.name)));
        }
        if found.insert(entry.name.clone(), data).is_some() {
            return Err(fail(format!("duplicate tensor {}", entry.name)));
        }
        total += nbytes;
    }
    if let Some(missing) = layout.keys().filter(|k| !found.contains_key(*k)).min() {
        return Err(fail(format!("missing tensor {missing}")));
    }
    if total != payload.len() {
        return Err(fail(format!(
            "payload has {} bytes, tensors account for {total}",
            payload.len()
        )));
    }

    let mut take = |name: &str| found.remove(name).expect("presence checked");
    let mat = |data: Vec<f64>, r: usize, c: usize| Tensor2::from_vec(r, c, data);
    let d = config.d_model;
    let mut weights = ModelWeights {
        token_embedding: mat(take("token_embedding"), config.vocab_size, d)?,
        pos_embedding: mat(take("pos_embedding"), config.max_seq_len, d)?,
        audio_projection: mat(take("audio_projection"), config.d_audio, d)?,
        audio_bias: take("audio_bias"),
        blocks: Vec::with_capacity(config.n_layers),
        final_norm: NormParams::unit(d),
        unembedding: Tensor2::zeros(d, config.vocab_size),
    };
    for b in 1..=config.n_layers {
        let p = format!("block.{b}");
        weights.blocks.push(BlockWeights {
            ln_attn: NormParams {
                gamma: take(&format!("{p}.ln_attn.gamma")),
                beta: take(&format!("{p}.ln_attn.beta")),
            },
            w_q: mat(take(&format!("{p}.w_q")), d, d)?,
            w_k: mat(take(&format!("{p}.w_k")), d, d)?,
            w_v: mat(take(&format!("{p}.w_v")), d, d)?,
            w_o: mat(take(&format!("{p}.w_o")), d, d)?,
            ln_mlp: NormParams {
                gamma: take(&format!("{p}.ln_mlp.gamma")),
                beta: take(&format!("{p}.ln_mlp.beta")),
            },
            w_in: mat(take(&format!("{p}.w_in")), d, config.d_ff)?,
            b_in: take(&format!("{p}.b_in")),
            w_out: mat(take(&format!("{p}.w_out")), config.d_ff, d)?,
            b_out: take(&format!("{p}.b_out")),
        });
    }
    weights.final_norm = NormParams {
        gamma: take("final_norm.gamma"),
        beta: take("final_norm.beta"),
    };
    weights.unembedding = mat(take("unembedding"), d, config.vocab_size)?;
    Model::new(config, weights).map_err(|e| fail(e.to_string()))
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, &path.display().to_string())
}
