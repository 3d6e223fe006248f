//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `LQECCKP1`, a little-endian `u64` manifest
//! length, a UTF-8 JSON manifest, then the payload. Manifest entries are
//! listed in payload order with payload-relative offsets; all values are
//! little-endian.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{DecoderModel, Layer, LinearModule, LoraAdapter, ModelConfig, ModuleKind, Weight};
use crate::error::{Error, Result};
use crate::quant::{QuantMethod, QuantizedTensor};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LQECCKP1";
const FORMAT: &str = "lqec-checkpoint-v1";
const HEADER_LEN: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F64,
    U8,
    I64,
}

impl Dtype {
    fn size(self) -> u64 {
        match self {
            Dtype::F64 | Dtype::I64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    byte_offset: u64,
    byte_length: u64,
    #[serde(default)]
    attributes: Map<String, Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ModelConfig,
    entries: Vec<Entry>,
}

#[derive(Default)]
struct Writer {
    entries: Vec<Entry>,
    payload: Vec<u8>,
}

impl Writer {
    fn push(&mut self, name: String, dtype: Dtype, shape: &[usize], bytes: Vec<u8>, attributes: Map<String, Value>) {
        self.entries.push(Entry {
            name,
            dtype,
            shape: shape.to_vec(),
            byte_offset: self.payload.len() as u64,
            byte_length: bytes.len() as u64,
            attributes,
        });
        self.payload.extend(bytes);
    }

    fn f64s(&mut self, name: String, shape: &[usize], values: &[f64]) {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name, Dtype::F64, shape, bytes, Map::new());
    }

    fn tensor(&mut self, name: String, t: &Tensor) {
        self.f64s(name, t.shape(), t.data());
    }

    fn linear(&mut self, m: &LinearModule) {
        let name = m.name();
        match &m.weight {
            Weight::Full(w) => self.tensor(format!("{name}.weight"), w),
            Weight::Quantized { q, .. } => {
                let attributes = json!({
                    "bits": q.bits,
                    "group_size": q.group_size,
                    "method": q.method.as_str(),
                });
                let Value::Object(attributes) = attributes else { unreachable!() };
                self.push(format!("{name}.codes"), Dtype::U8, &q.shape, q.codes.clone(), attributes);
                self.f64s(format!("{name}.scales"), &[q.scales.len()], &q.scales);
                let zeros = q.zeros.iter().flat_map(|v| v.to_le_bytes()).collect();
                self.push(format!("{name}.zeros"), Dtype::I64, &[q.zeros.len()], zeros, Map::new());
                if let Some(levels) = &q.levels {
                    self.f64s(format!("{name}.levels"), &[levels.len()], levels);
                }
            }
        }
        if let Some(a) = &m.adapter {
            self.tensor(format!("{name}.lora_l1"), &a.l1);
            self.tensor(format!("{name}.lora_l2"), &a.l2);
        }
    }
}

/// Serializes a model (full-precision or quantized, with or without adapters).
pub fn write_checkpoint(model: &DecoderModel) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.tensor("tok_emb".into(), &model.tok_emb);
    w.tensor("pos_emb".into(), &model.pos_emb);
    for (n, l) in model.layers.iter().enumerate() {
        w.tensor(format!("layers.{n}.norm_attn"), &l.norm_attn);
        w.linear(&l.qkv);
        w.linear(&l.out);
        w.tensor(format!("layers.{n}.norm_ffn"), &l.norm_ffn);
        w.linear(&l.ffn1);
        w.linear(&l.ffn2);
    }
    w.tensor("final_norm".into(), &model.final_norm);
    w.tensor("lm_head".into(), &model.lm_head);

    let manifest = Manifest {
        format: FORMAT.into(),
        config: model.config.clone(),
        entries: w.entries,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(HEADER_LEN as usize + json.len() + w.payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend(json);
    out.extend(w.payload);
    Ok(out)
}

pub fn save_checkpoint(model: &DecoderModel, path: &Path) -> Result<()> {
    let bytes = write_checkpoint(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<DecoderModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

struct Reader<'a> {
    entries: HashMap<&'a str, (&'a Entry, &'a [u8])>,
    used: usize,
}

fn integrity(detail: String) -> Error {
    Error::Integrity(detail)
}

impl<'a> Reader<'a> {
    fn take(&mut self, name: &str, dtype: Dtype) -> Result<(&'a Entry, &'a [u8])> {
        let (entry, raw) = *self
            .entries
            .get(name)
            .ok_or_else(|| integrity(format!("missing entry {name}")))?;
        if entry.dtype != dtype {
            return Err(integrity(format!("{name}: dtype {:?}, expected {dtype:?}", entry.dtype)));
        }
        self.used += 1;
        Ok((entry, raw))
    }

    fn has(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    fn f64s(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let (entry, raw) = self.take(name, Dtype::F64)?;
        check_shape(entry, shape)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    fn tensor(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let data = self.f64s(name, shape)?;
        Tensor::new(shape.to_vec(), data)
    }

    fn linear(&mut self, cfg: &ModelConfig, layer: usize, kind: ModuleKind) -> Result<LinearModule> {
        let (din, dout) = kind.dims(cfg);
        let name = format!("layers.{layer}.{}", kind.as_str());
        let weight = if self.has(&format!("{name}.codes")) {
            Weight::quantized(self.quantized(&name, &[din, dout])?)
        } else {
            Weight::Full(self.tensor(&format!("{name}.weight"), &[din, dout])?)
        };
        let adapter = if self.has(&format!("{name}.lora_l1")) {
            let (e, _) = self.entries[format!("{name}.lora_l1").as_str()];
            let rank = e.shape.get(1).copied().unwrap_or(0);
            let l1 = self.tensor(&format!("{name}.lora_l1"), &[din, rank])?;
            let l2 = self.tensor(&format!("{name}.lora_l2"), &[dout, rank])?;
            Some(LoraAdapter::new(l1, l2).map_err(|e| integrity(format!("{name}: {e}")))?)
        } else {
            None
        };
        Ok(LinearModule {
            kind,
            layer,
            weight,
            adapter,
        })
    }

    fn quantized(&mut self, name: &str, shape: &[usize]) -> Result<QuantizedTensor> {
        let (entry, codes) = self.take(&format!("{name}.codes"), Dtype::U8)?;
        check_shape(entry, shape)?;
        let attr = |key: &str| {
            entry
                .attributes
                .get(key)
                .ok_or_else(|| integrity(format!("{name}.codes: missing attribute {key}")))
        };
        let bits = attr("bits")?
            .as_u64()
            .and_then(|b| u8::try_from(b).ok())
            .ok_or_else(|| integrity(format!("{name}: bad bits attribute")))?;
        let group_size = attr("group_size")?
            .as_u64()
            .and_then(|g| usize::try_from(g).ok())
            .ok_or_else(|| integrity(format!("{name}: bad group_size attribute")))?;
        let method = attr("method")?
            .as_str()
            .ok_or_else(|| integrity(format!("{name}: bad method attribute")))
            .and_then(|m| QuantMethod::parse(m).map_err(|e| integrity(format!("{name}: {e}"))))?;
        if group_size == 0 || shape[0] % group_size != 0 {
            return Err(integrity(format!("{name}: group size {group_size} for {shape:?}")));
        }
        let n_groups = shape[0] / group_size * shape[1];
        let scales = self.f64s(&format!("{name}.scales"), &[n_groups])?;
        let (zentry, zraw) = self.take(&format!("{name}.zeros"), Dtype::I64)?;
        check_shape(zentry, &[n_groups])?;
        let zeros = zraw
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let levels = match self.has(&format!("{name}.levels")) {
            true => Some(self.f64s(&format!("{name}.levels"), &[1usize << bits.min(8)])?),
            false => None,
        };
        let q = QuantizedTensor {
            codes: codes.to_vec(),
            scales,
            zeros,
            levels,
            shape: shape.to_vec(),
            bits,
            group_size,
            method,
        };
        q.validate()?;
        Ok(q)
    }
}

fn check_shape(entry: &Entry, expected: &[usize]) -> Result<()> {
    if entry.shape != expected {
        return Err(integrity(format!(
            "{}: shape {:?}, expected {expected:?}",
            entry.name, entry.shape
        )));
    }
    let numel: u64 = expected.iter().map(|&d| d as u64).product();
    if entry.byte_length != numel * entry.dtype.size() {
        return Err(integrity(format!(
            "{}: {} bytes for shape {expected:?}",
            entry.name, entry.byte_length
        )));
    }
    Ok(())
}

fn parse_err(offset: u64, detail: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        detail: detail.into(),
    }
}

/// Parses a checkpoint; either the whole model is returned or an error.
pub fn read_checkpoint(bytes: &[u8]) -> Result<DecoderModel> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(parse_err(0, "missing LQECCKP1 magic"));
    }
    if bytes.len() < HEADER_LEN as usize {
        return Err(parse_err(8, "truncated manifest length"));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let payload_start = HEADER_LEN
        .checked_add(manifest_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| parse_err(8, format!("manifest length {manifest_len} exceeds file size {}", bytes.len())))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN as usize..payload_start as usize])
        .map_err(|e| parse_err(HEADER_LEN, format!("manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(parse_err(HEADER_LEN, format!("unsupported format {:?}", manifest.format)));
    }
    let payload = &bytes[payload_start as usize..];

    let mut entries = HashMap::new();
    for e in &manifest.entries {
        let end = e
            .byte_offset
            .checked_add(e.byte_length)
            .filter(|&end| end <= payload.len() as u64)
            .ok_or_else(|| {
                parse_err(
                    payload_start + e.byte_offset,
                    format!("entry {} runs past the end of the payload", e.name),
                )
            })?;
        let raw = &payload[e.byte_offset as usize..end as usize];
        if entries.insert(e.name.as_str(), (e, raw)).is_some() {
            return Err(integrity(format!("duplicate entry {}", e.name)));
        }
    }

    let cfg = manifest.config.clone();
    cfg.validate().map_err(|e| integrity(e.to_string()))?;
    let mut r = Reader { entries, used: 0 };
    let d = cfg.d_model;
    let tok_emb = r.tensor("tok_emb", &[cfg.vocab_size, d])?;
    let pos_emb = r.tensor("pos_emb", &[cfg.max_seq_len, d])?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for n in 0..cfg.n_layers {
        layers.push(Layer {
            norm_attn: r.tensor(&format!("layers.{n}.norm_attn"), &[d])?,
            qkv: r.linear(&cfg, n, ModuleKind::Qkv)?,
            out: r.linear(&cfg, n, ModuleKind::Out)?,
            norm_ffn: r.tensor(&format!("layers.{n}.norm_ffn"), &[d])?,
            ffn1: r.linear(&cfg, n, ModuleKind::Ffn1)?,
            ffn2: r.linear(&cfg, n, ModuleKind::Ffn2)?,
        });
    }
    let final_norm = r.tensor("final_norm", &[d])?;
    let lm_head = r.tensor("lm_head", &[d, cfg.vocab_size])?;
    if r.used != manifest.entries.len() {
        return Err(integrity(format!(
            "{} manifest entries not recognized",
            manifest.entries.len() - r.used
        )));
    }
    Ok(DecoderModel {
        config: cfg,
        tok_emb,
        pos_emb,
        layers,
        final_norm,
        lm_head,
    })
}
