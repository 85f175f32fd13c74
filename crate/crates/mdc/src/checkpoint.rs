//! Checkpoint files.
//!
//! Layout: the line `MDCCKPT`, then the JSON header's byte length in decimal
//! on its own line, then the JSON header, then raw little-endian values.
//! Value order is every parameter tensor in manifest order, followed by the
//! first and then the second optimizer moments in the same order.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use mdc_core::autodiff::Tensor;
use mdc_core::model::{AttentionMode, DecoderConfig, EncoderConfig, ModelConfig, ModelParams};
use mdc_core::train::TrainState;
use mdc_core::Scalar;
use serde::{Deserialize, Serialize};

pub const MAGIC: &str = "MDCCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDoc {
    pub image_height: usize,
    pub image_width: usize,
    pub patch: usize,
    pub enc_dim: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub dec_dim: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    pub mode: String,
    pub mlp_ratio: usize,
}

impl ModelDoc {
    pub fn from_config(c: &ModelConfig) -> Self {
        ModelDoc {
            image_height: c.encoder.image_height,
            image_width: c.encoder.image_width,
            patch: c.encoder.patch,
            enc_dim: c.encoder.dim,
            enc_layers: c.encoder.layers,
            enc_heads: c.encoder.heads,
            vocab: c.decoder.vocab,
            max_len: c.decoder.max_len,
            dec_dim: c.decoder.dim,
            dec_layers: c.decoder.layers,
            dec_heads: c.decoder.heads,
            mode: c.decoder.mode.name().into(),
            mlp_ratio: c.mlp_ratio,
        }
    }

    pub fn to_config(&self) -> Result<ModelConfig> {
        let mode = match self.mode.as_str() {
            "bidirectional" => AttentionMode::Bidirectional,
            "causal" => AttentionMode::Causal,
            m => bail!("unknown attention mode {m:?} in checkpoint"),
        };
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                image_height: self.image_height,
                image_width: self.image_width,
                patch: self.patch,
                dim: self.enc_dim,
                layers: self.enc_layers,
                heads: self.enc_heads,
            },
            decoder: DecoderConfig {
                vocab: self.vocab,
                max_len: self.max_len,
                dim: self.dec_dim,
                layers: self.dec_layers,
                heads: self.dec_heads,
                mode,
            },
            mlp_ratio: self.mlp_ratio,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub dtype: String,
    pub step: u64,
    pub model: ModelDoc,
    pub tensors: Vec<TensorEntry>,
    pub has_moments: bool,
    /// Hash of the vocabulary the model was trained with.
    pub vocab_hash: String,
    /// Hash of the training config (empty when unknown).
    pub config_hash: String,
}

/// Serializes a training state.
pub fn to_bytes<T: Scalar>(state: &TrainState<T>, vocab_hash: &str, config_hash: &str) -> Result<Vec<u8>> {
    let params = &state.params;
    let header = Header {
        version: FORMAT_VERSION,
        dtype: T::DTYPE.into(),
        step: state.step,
        model: ModelDoc::from_config(params.config()),
        tensors: params
            .names()
            .iter()
            .zip(params.tensors())
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        has_moments: true,
        vocab_hash: vocab_hash.into(),
        config_hash: config_hash.into(),
    };
    let json = serde_json::to_string_pretty(&header)?;
    let mut out = Vec::new();
    write!(out, "{MAGIC}\n{}\n{json}", json.len())?;
    for group in [params.tensors(), &state.first_moment[..], &state.second_moment[..]] {
        for t in group {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
    }
    Ok(out)
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
    let mut cursor = 0;
    let mut line = || -> Result<&str> {
        let end = bytes[cursor..]
            .iter()
            .position(|&b| b == b'\n')
            .context("truncated checkpoint header")?;
        let s = std::str::from_utf8(&bytes[cursor..cursor + end])?;
        cursor += end + 1;
        Ok(s)
    };
    ensure!(line()? == MAGIC, "not a checkpoint file (bad magic)");
    let len: usize = line()?.parse().context("bad header length")?;
    ensure!(cursor + len <= bytes.len(), "truncated checkpoint header");
    let header: Header = serde_json::from_slice(&bytes[cursor..cursor + len])?;
    ensure!(
        header.version == FORMAT_VERSION,
        "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
        header.version
    );
    Ok((header, cursor + len))
}

/// Parses a checkpoint whose dtype must be `T`.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(Header, TrainState<T>)> {
    let (header, mut offset) = read_header(bytes)?;
    ensure!(
        header.dtype == T::DTYPE,
        "checkpoint holds {} values but {} was requested",
        header.dtype,
        T::DTYPE
    );
    let cfg = header.model.to_config()?;
    let expected = cfg.manifest();
    ensure!(expected.len() == header.tensors.len(), "tensor manifest does not match the model config");
    for ((name, shape), e) in expected.iter().zip(&header.tensors) {
        ensure!(
            name == &e.name && shape == &e.shape,
            "tensor manifest entry {} {:?} does not match model ({name} {shape:?})",
            e.name,
            e.shape
        );
    }
    let total: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let groups = if header.has_moments { 3 } else { 1 };
    ensure!(
        bytes.len() - offset == groups * total * T::BYTES,
        "checkpoint payload has {} bytes, expected {}",
        bytes.len() - offset,
        groups * total * T::BYTES
    );
    let mut read_group = || -> Result<Vec<Tensor<T>>> {
        header
            .tensors
            .iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let data = bytes[offset..offset + n * T::BYTES].chunks(T::BYTES).map(T::read_le).collect();
                offset += n * T::BYTES;
                Ok(Tensor::new(&e.shape, data)?)
            })
            .collect()
    };
    let params = ModelParams::from_tensors(cfg, read_group()?)?;
    let mut state = TrainState::new(params);
    if header.has_moments {
        state.first_moment = read_group()?;
        state.second_moment = read_group()?;
    }
    state.step = header.step;
    Ok((header, state))
}

/// Writes atomically via a sibling temporary file.
pub fn save<T: Scalar>(path: &Path, state: &TrainState<T>, vocab_hash: &str, config_hash: &str) -> Result<()> {
    let bytes = to_bytes(state, vocab_hash, config_hash)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<(Header, TrainState<T>)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))
}

/// Loads parameters of either dtype, converted to `f64`.
pub fn load_params_f64(path: &Path) -> Result<(Header, ModelParams<f64>)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let (header, _) = read_header(&bytes)?;
    match header.dtype.as_str() {
        "f64" => from_bytes::<f64>(&bytes).map(|(h, s)| (h, s.params)),
        "f32" => from_bytes::<f32>(&bytes).map(|(h, s)| (h, s.params.cast())),
        d => bail!("unsupported dtype {d}"),
    }
}
