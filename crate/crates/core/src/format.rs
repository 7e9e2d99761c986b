//! NVTX weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      b"NVTX"
//! version    u32 (= 1)
//! config     7 × u32: vocab, d, h, layers_enc, layers_dec, ffn_dim, max_len
//! count      u32 number of tensors
//! tensor*    name_len u32, name (utf-8), rank u32, dims rank × u32,
//!            payload prod(dims) × f64
//! json_len   u64
//! json       utf-8 JSON: {"priors": [...] | null, "taus": {...} | null}
//! ```
//!
//! Tensors appear in a fixed order, so save → load → save is byte-identical.
//! The trailing JSON block is also the standalone priors file format.

use std::collections::HashMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionParams;
use crate::error::{NvError, Result};
use crate::model::{
    reinterpret, sinusoidal_positions, AttentionBlock, DecoderLayer, EncoderLayer, FeedForward, LayerNorm,
    ModelConfig, ModelWeights, NvModel,
};
use crate::numeric::Matrix;
use crate::nvib::{EmpiricalPrior, TauConfig};

pub const MAGIC: &[u8; 4] = b"NVTX";
pub const VERSION: u32 = 1;

/// A named tensor: shape plus row-major payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn vector(v: &[f64]) -> Self {
        Self {
            dims: vec![v.len()],
            data: v.to_vec(),
        }
    }

    fn matrix(m: &Matrix) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }
}

/// Everything in the trailing JSON block.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PriorBlock {
    pub priors: Option<Vec<EmpiricalPrior>>,
    pub taus: Option<TauConfig>,
}

/// Contents of an NVTX file.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub weights: ModelWeights,
    pub extra: PriorBlock,
}

fn push_attention(out: &mut Vec<(String, Tensor)>, prefix: &str, b: &AttentionBlock) {
    let p = &b.params;
    for (name, m) in [("wq", &p.wq), ("wk", &p.wk), ("wv", &p.wv), ("wo", &b.wo)] {
        out.push((format!("{prefix}.{name}"), Tensor::matrix(m)));
    }
    for (name, v) in [("bq", &p.bq), ("bk", &p.bk), ("bv", &p.bv), ("bo", &b.bo)] {
        out.push((format!("{prefix}.{name}"), Tensor::vector(v)));
    }
}

fn push_norm(out: &mut Vec<(String, Tensor)>, prefix: &str, n: &LayerNorm) {
    out.push((format!("{prefix}.gain"), Tensor::vector(&n.gain)));
    out.push((format!("{prefix}.offset"), Tensor::vector(&n.offset)));
}

fn push_ffn(out: &mut Vec<(String, Tensor)>, prefix: &str, f: &FeedForward) {
    out.push((format!("{prefix}.w1"), Tensor::matrix(&f.w1)));
    out.push((format!("{prefix}.b1"), Tensor::vector(&f.b1)));
    out.push((format!("{prefix}.w2"), Tensor::matrix(&f.w2)));
    out.push((format!("{prefix}.b2"), Tensor::vector(&f.b2)));
}

/// All weights as named tensors in canonical order.
pub fn weight_tensors(w: &ModelWeights) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    out.push(("embed.token".into(), Tensor::matrix(&w.token_embedding)));
    out.push(("embed.position".into(), Tensor::matrix(&w.positional)));
    for (i, l) in w.encoder.iter().enumerate() {
        push_norm(&mut out, &format!("enc.{i}.ln1"), &l.ln1);
        push_attention(&mut out, &format!("enc.{i}.self"), &l.self_attn);
        push_norm(&mut out, &format!("enc.{i}.ln2"), &l.ln2);
        push_ffn(&mut out, &format!("enc.{i}.ffn"), &l.ffn);
    }
    push_norm(&mut out, "enc.norm", &w.encoder_norm);
    for (i, l) in w.decoder.iter().enumerate() {
        push_norm(&mut out, &format!("dec.{i}.ln1"), &l.ln1);
        push_attention(&mut out, &format!("dec.{i}.self"), &l.self_attn);
        push_norm(&mut out, &format!("dec.{i}.ln2"), &l.ln2);
        push_attention(&mut out, &format!("dec.{i}.cross"), &l.cross_attn);
        push_norm(&mut out, &format!("dec.{i}.ln3"), &l.ln3);
        push_ffn(&mut out, &format!("dec.{i}.ffn"), &l.ffn);
    }
    push_norm(&mut out, "dec.norm", &w.decoder_norm);
    out.push(("out.weight".into(), Tensor::matrix(&w.output)));
    out.push(("out.bias".into(), Tensor::vector(&w.output_bias)));
    out
}

struct TensorTable(HashMap<String, Tensor>);

impl TensorTable {
    fn take(&mut self, name: &str, dims: &[usize]) -> Result<Tensor> {
        let t = self
            .0
            .remove(name)
            .ok_or_else(|| NvError::Format(format!("missing tensor {name}")))?;
        if t.dims != dims {
            return Err(NvError::Format(format!(
                "tensor {name} has shape {:?}, expected {dims:?}",
                t.dims
            )));
        }
        Ok(t)
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        Ok(self.take(name, &[len])?.data)
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::new(rows, cols, self.take(name, &[rows, cols])?.data)
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gain: self.vector(&format!("{prefix}.gain"), d)?,
            offset: self.vector(&format!("{prefix}.offset"), d)?,
        })
    }

    fn attention(&mut self, prefix: &str, d: usize, heads: usize) -> Result<AttentionBlock> {
        let wq = self.matrix(&format!("{prefix}.wq"), d, d)?;
        let wk = self.matrix(&format!("{prefix}.wk"), d, d)?;
        let wv = self.matrix(&format!("{prefix}.wv"), d, d)?;
        let wo = self.matrix(&format!("{prefix}.wo"), d, d)?;
        let bq = self.vector(&format!("{prefix}.bq"), d)?;
        let bk = self.vector(&format!("{prefix}.bk"), d)?;
        let bv = self.vector(&format!("{prefix}.bv"), d)?;
        let bo = self.vector(&format!("{prefix}.bo"), d)?;
        Ok(AttentionBlock {
            params: AttentionParams::new(wq, wk, wv, bq, bk, bv, heads)?,
            wo,
            bo,
        })
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> Result<FeedForward> {
        Ok(FeedForward {
            w1: self.matrix(&format!("{prefix}.w1"), d, f)?,
            b1: self.vector(&format!("{prefix}.b1"), f)?,
            w2: self.matrix(&format!("{prefix}.w2"), f, d)?,
            b2: self.vector(&format!("{prefix}.b2"), d)?,
        })
    }
}

fn weights_from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<ModelWeights> {
    let mut table = TensorTable(HashMap::with_capacity(tensors.len()));
    for (name, t) in tensors {
        if table.0.insert(name.clone(), t).is_some() {
            return Err(NvError::Format(format!("duplicate tensor {name}")));
        }
    }
    let (d, f) = (config.d, config.ffn_dim);
    let token_embedding = table.matrix("embed.token", config.vocab, d)?;
    let positional = table.matrix("embed.position", config.max_len, d)?;
    if positional != sinusoidal_positions(config.max_len, d) {
        return Err(NvError::Format("positional table is not the sinusoidal encoding".into()));
    }
    let mut encoder = Vec::with_capacity(config.layers_enc);
    for i in 0..config.layers_enc {
        encoder.push(EncoderLayer {
            ln1: table.norm(&format!("enc.{i}.ln1"), d)?,
            self_attn: table.attention(&format!("enc.{i}.self"), d, config.h)?,
            ln2: table.norm(&format!("enc.{i}.ln2"), d)?,
            ffn: table.ffn(&format!("enc.{i}.ffn"), d, f)?,
        });
    }
    let encoder_norm = table.norm("enc.norm", d)?;
    let mut decoder = Vec::with_capacity(config.layers_dec);
    for i in 0..config.layers_dec {
        decoder.push(DecoderLayer {
            ln1: table.norm(&format!("dec.{i}.ln1"), d)?,
            self_attn: table.attention(&format!("dec.{i}.self"), d, config.h)?,
            ln2: table.norm(&format!("dec.{i}.ln2"), d)?,
            cross_attn: table.attention(&format!("dec.{i}.cross"), d, config.h)?,
            ln3: table.norm(&format!("dec.{i}.ln3"), d)?,
            ffn: table.ffn(&format!("dec.{i}.ffn"), d, f)?,
        });
    }
    let decoder_norm = table.norm("dec.norm", d)?;
    let output = table.matrix("out.weight", d, config.vocab)?;
    let output_bias = table.vector("out.bias", config.vocab)?;
    if let Some(name) = table.0.keys().next() {
        return Err(NvError::Format(format!("unexpected tensor {name}")));
    }
    Ok(ModelWeights {
        config,
        token_embedding,
        positional,
        encoder,
        encoder_norm,
        decoder,
        decoder_norm,
        output,
        output_bias,
    })
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| NvError::Format(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serialises weights and an optional prior block.
pub fn encode(w: &ModelWeights, extra: &PriorBlock) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let c = &w.config;
    for v in [c.vocab, c.d, c.h, c.layers_enc, c.layers_dec, c.ffn_dim, c.max_len] {
        put_u32(&mut buf, v)?;
    }
    let tensors = weight_tensors(w);
    put_u32(&mut buf, tensors.len())?;
    for (name, t) in &tensors {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.dims.len())?;
        for &dim in &t.dims {
            put_u32(&mut buf, dim)?;
        }
        for x in &t.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let json = serde_json::to_vec(extra).map_err(|e| NvError::Format(e.to_string()))?;
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    Ok(buf)
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let remaining = self.0.get_ref().len() - self.0.position() as usize;
        if n > remaining {
            return Err(NvError::Format(format!("truncated file: wanted {n} bytes, {remaining} left")));
        }
        let mut v = vec![0; n];
        self.0.read_exact(&mut v)?;
        Ok(v)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.bytes(n.checked_mul(8).ok_or_else(|| NvError::Format("tensor too large".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Parses an NVTX byte buffer.
pub fn decode(bytes: &[u8]) -> Result<ModelFile> {
    let mut r = Reader(Cursor::new(bytes));
    if r.bytes(4)? != MAGIC {
        return Err(NvError::Format("bad magic bytes, not an NVTX file".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(NvError::Format(format!("unsupported NVTX version {version}")));
    }
    let mut vals = [0usize; 7];
    for v in vals.iter_mut() {
        *v = r.u32()?;
    }
    let config = ModelConfig {
        vocab: vals[0],
        d: vals[1],
        h: vals[2],
        layers_enc: vals[3],
        layers_dec: vals[4],
        ffn_dim: vals[5],
        max_len: vals[6],
    };
    config
        .validate()
        .map_err(|e| NvError::Format(format!("invalid config block: {e}")))?;
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = String::from_utf8(r.bytes(name_len)?).map_err(|_| NvError::Format("tensor name is not utf-8".into()))?;
        let rank = r.u32()?;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u32()?);
        }
        let len = dims.iter().try_fold(1usize, |a, &b| a.checked_mul(b));
        let len = len.ok_or_else(|| NvError::Format(format!("tensor {name} too large")))?;
        let data = r.f64s(len)?;
        tensors.push((name, Tensor { dims, data }));
    }
    let json_len = r.u64()? as usize;
    let json = r.bytes(json_len)?;
    if r.0.position() as usize != bytes.len() {
        return Err(NvError::Format("trailing bytes after the JSON block".into()));
    }
    let extra: PriorBlock = serde_json::from_slice(&json).map_err(|e| NvError::Format(format!("prior block: {e}")))?;
    let weights = weights_from_tensors(config, tensors)?;
    Ok(ModelFile { weights, extra })
}

pub fn save_weights(w: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(w, &PriorBlock::default())?)?;
    Ok(())
}

/// Saves base weights with priors and `τ` in the trailing block.
pub fn save_nv_model(m: &NvModel, path: impl AsRef<Path>) -> Result<()> {
    let extra = PriorBlock {
        priors: Some(m.priors.clone()),
        taus: Some(m.taus),
    };
    fs::write(path, encode(&m.base, &extra)?)?;
    Ok(())
}

pub fn load_model_file(path: impl AsRef<Path>) -> Result<ModelFile> {
    decode(&fs::read(path)?)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights> {
    Ok(load_model_file(path)?.weights)
}

/// Loads an NV model; the file must carry priors. Missing `τ` defaults to the
/// identity setting.
pub fn load_nv_model(path: impl AsRef<Path>) -> Result<NvModel> {
    let f = load_model_file(path)?;
    let priors = f
        .extra
        .priors
        .ok_or_else(|| NvError::Format("file carries no priors".into()))?;
    reinterpret(f.weights, priors, f.extra.taus.unwrap_or_default())
}

/// Writes a standalone priors file (the JSON block on its own).
pub fn save_priors(priors: &[EmpiricalPrior], path: impl AsRef<Path>) -> Result<()> {
    let block = PriorBlock {
        priors: Some(priors.to_vec()),
        taus: None,
    };
    let mut text = serde_json::to_string_pretty(&block).map_err(|e| NvError::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Reads priors from a standalone JSON file or from an NVTX file's trailing
/// block.
pub fn load_priors(path: impl AsRef<Path>) -> Result<Vec<EmpiricalPrior>> {
    let bytes = fs::read(path)?;
    let block = if bytes.starts_with(MAGIC) {
        decode(&bytes)?.extra
    } else {
        serde_json::from_slice::<PriorBlock>(&bytes).map_err(|e| NvError::Format(format!("priors file: {e}")))?
    };
    block
        .priors
        .ok_or_else(|| NvError::Format("file carries no priors".into()))
}
