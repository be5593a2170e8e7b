// SPDX-License-Identifier: MIT OR Apache-2.0

//! Safetensors checkpoints.
//!
//! The container is an 8-byte little-endian header length `N`, `N` bytes of
//! JSON mapping tensor names to `{dtype, shape, data_offsets}`, then the raw
//! little-endian tensor bytes. Offsets are relative to the end of the header.
//! A [`NameMap`] ties checkpoint names to [`ModelParams`] slots.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use half::{bf16, f16};
use serde::{Deserialize, Serialize};

use crate::encoder::{LayerParams, LnParams, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Vector};

const HEADER: &str = "<header>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F16,
    BF16,
    F32,
    F64,
}

impl Dtype {
    pub fn parse(s: &str) -> Option<Dtype> {
        match s {
            "F16" => Some(Dtype::F16),
            "BF16" => Some(Dtype::BF16),
            "F32" => Some(Dtype::F32),
            "F64" => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
            Dtype::F32 => "F32",
            Dtype::F64 => "F64",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F16 | Dtype::BF16 => 2,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn decode(self, bytes: &[u8]) -> Vec<f64> {
        match self {
            Dtype::F16 => bytes
                .chunks_exact(2)
                .map(|b| f16::from_le_bytes([b[0], b[1]]).to_f64())
                .collect(),
            Dtype::BF16 => bytes
                .chunks_exact(2)
                .map(|b| bf16::from_le_bytes([b[0], b[1]]).to_f64())
                .collect(),
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
        }
    }

    fn encode(self, values: &[f64], out: &mut Vec<u8>) {
        for &v in values {
            match self {
                Dtype::F16 => out.extend_from_slice(&f16::from_f64(v).to_le_bytes()),
                Dtype::BF16 => out.extend_from_slice(&bf16::from_f64(v).to_le_bytes()),
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Dtype::parse(&s.to_ascii_uppercase()).ok_or_else(|| Error::Config(format!("unsupported dtype `{s}`")))
    }
}

/// Header entry of one tensor. The dtype stays a string so that tensors of
/// unsupported types can sit in a file as long as nothing maps to them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub data_offsets: [u64; 2],
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Parsed header of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointManifest {
    pub header_len: u64,
    pub tensors: BTreeMap<String, TensorInfo>,
    pub metadata: BTreeMap<String, String>,
}

impl CheckpointManifest {
    /// Byte position of the first data byte.
    pub fn data_start(&self) -> u64 {
        8 + self.header_len
    }

    /// Parses the leading bytes of a file of `file_len` bytes. `bytes` must
    /// hold at least the length field and the header.
    pub fn parse(bytes: &[u8], file_len: u64) -> Result<Self> {
        let header_err = |byte, message: String| Error::Load {
            tensor: HEADER.into(),
            byte,
            message,
        };
        if bytes.len() < 8 {
            return Err(header_err(0, format!("file of {} bytes has no length field", bytes.len())));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        if header_len.checked_add(8).is_none_or(|end| end > file_len) {
            return Err(header_err(
                8,
                format!("header length {header_len} runs past the end of a {file_len}-byte file"),
            ));
        }
        let end = 8 + header_len as usize;
        if bytes.len() < end {
            return Err(header_err(8, "header not fully read".into()));
        }
        let raw: BTreeMap<String, serde_json::Value> =
            serde_json::from_slice(&bytes[8..end]).map_err(|e| header_err(8, format!("invalid header JSON: {e}")))?;
        let mut tensors = BTreeMap::new();
        let mut metadata = BTreeMap::new();
        for (name, value) in raw {
            if name == "__metadata__" {
                metadata = serde_json::from_value(value).map_err(|e| header_err(8, format!("invalid metadata: {e}")))?;
                continue;
            }
            let info: TensorInfo = serde_json::from_value(value).map_err(|e| Error::Load {
                tensor: name.clone(),
                byte: 8,
                message: format!("invalid header entry: {e}"),
            })?;
            tensors.insert(name, info);
        }
        let manifest = Self {
            header_len,
            tensors,
            metadata,
        };
        for name in manifest.tensors.keys() {
            manifest.check_extent(name, file_len)?;
        }
        Ok(manifest)
    }

    /// Reads only the header of a checkpoint file.
    pub fn read(path: &Path) -> Result<Self> {
        let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let mut len = [0u8; 8];
        file.read_exact(&mut len).map_err(|_| Error::Load {
            tensor: HEADER.into(),
            byte: 0,
            message: format!("file of {file_len} bytes has no length field"),
        })?;
        let header_len = u64::from_le_bytes(len);
        if header_len.checked_add(8).is_none_or(|end| end > file_len) {
            return Self::parse(&len, file_len);
        }
        let mut bytes = len.to_vec();
        bytes.resize(8 + header_len as usize, 0);
        file.read_exact(&mut bytes[8..]).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes, file_len)
    }

    fn check_extent(&self, name: &str, file_len: u64) -> Result<()> {
        let info = &self.tensors[name];
        let [begin, end] = info.data_offsets;
        let start = self.data_start();
        if begin > end {
            return Err(Error::Load {
                tensor: name.into(),
                byte: start + begin,
                message: format!("data offsets [{begin}, {end}] are reversed"),
            });
        }
        if start + end > file_len {
            return Err(Error::Load {
                tensor: name.into(),
                byte: start + end,
                message: format!("truncated file: tensor ends at byte {} of {file_len}", start + end),
            });
        }
        if let Some(dtype) = Dtype::parse(&info.dtype) {
            let want = (info.numel() * dtype.size()) as u64;
            if end - begin != want {
                return Err(Error::Load {
                    tensor: name.into(),
                    byte: start + begin,
                    message: format!(
                        "{} bytes for shape {:?} of {}, expected {want}",
                        end - begin,
                        info.shape,
                        info.dtype
                    ),
                });
            }
        }
        Ok(())
    }

    fn dtype(&self, name: &str) -> Result<Dtype> {
        let info = &self.tensors[name];
        Dtype::parse(&info.dtype).ok_or_else(|| Error::Load {
            tensor: name.into(),
            byte: self.data_start() + info.data_offsets[0],
            message: format!("unsupported dtype {}; expected F16, BF16, F32 or F64", info.dtype),
        })
    }
}

/// A tensor decoded to `f64`, in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// An opened checkpoint: manifest plus the whole file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    bytes: Vec<u8>,
}

impl Checkpoint {
    pub fn open(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(bytes)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let manifest = CheckpointManifest::parse(&bytes, bytes.len() as u64)?;
        Ok(Self { manifest, bytes })
    }

    pub fn tensor(&self, name: &str) -> Result<RawTensor> {
        let info = self.manifest.tensors.get(name).ok_or_else(|| Error::Load {
            tensor: name.into(),
            byte: 8,
            message: "missing tensor".into(),
        })?;
        let dtype = self.manifest.dtype(name)?;
        let start = self.manifest.data_start() as usize;
        let [begin, end] = info.data_offsets;
        let data = dtype.decode(&self.bytes[start + begin as usize..start + end as usize]);
        Ok(RawTensor {
            shape: info.shape.clone(),
            data,
        })
    }

    /// Raw stored bytes of a tensor.
    pub fn tensor_bytes(&self, name: &str) -> Option<&[u8]> {
        let info = self.manifest.tensors.get(name)?;
        let start = self.manifest.data_start() as usize;
        Some(&self.bytes[start + info.data_offsets[0] as usize..start + info.data_offsets[1] as usize])
    }
}

/// Serialises tensors in name order, with the header padded to a multiple
/// of eight bytes.
pub fn encode_safetensors(
    tensors: &BTreeMap<String, RawTensor>,
    dtype: Dtype,
    metadata: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let mut header = serde_json::Map::new();
    if !metadata.is_empty() {
        header.insert("__metadata__".into(), serde_json::to_value(metadata)?);
    }
    let mut data = Vec::new();
    for (name, t) in tensors {
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(Error::Config(format!(
                "tensor {name}: {} values for shape {:?}",
                t.data.len(),
                t.shape
            )));
        }
        let begin = data.len() as u64;
        dtype.encode(&t.data, &mut data);
        let info = TensorInfo {
            dtype: dtype.name().into(),
            shape: t.shape.clone(),
            data_offsets: [begin, data.len() as u64],
        };
        header.insert(name.clone(), serde_json::to_value(info)?);
    }
    let mut json = serde_json::to_vec(&header)?;
    while !json.len().is_multiple_of(8) {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + json.len() + data.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

/// How one parameter slot is found in a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameRule {
    /// Alternative names; `{layer}` is replaced by the 0-based layer index.
    pub names: Vec<String>,
    /// The checkpoint stores the matrix `out x in`.
    #[serde(default)]
    pub transpose: bool,
}

impl NameRule {
    fn new(names: &[&str], transpose: bool) -> Self {
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            transpose,
        }
    }
}

/// Mapping from checkpoint names to parameter slots.
///
/// Embedding slots: `word_emb`, `pos_emb`, `seg_emb`, `initial_ln.gain`,
/// `initial_ln.bias`. Layer slots: `query_w`, `query_b`, `key_w`, `key_b`,
/// `value_w`, `value_b`, `attn_out_w`, `attn_out_b`, `attn_ln.gain`,
/// `attn_ln.bias`, `ff_in_w`, `ff_in_b`, `ff_out_w`, `ff_out_b`,
/// `ff_ln.gain`, `ff_ln.bias`, plus the optional fused `qkv_w` / `qkv_b`
/// used when the separate projections are absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameMap {
    /// Tried in order in front of every name.
    #[serde(default = "default_prefixes")]
    pub prefixes: Vec<String>,
    pub embeddings: BTreeMap<String, NameRule>,
    pub layer: BTreeMap<String, NameRule>,
}

fn default_prefixes() -> Vec<String> {
    vec![String::new()]
}

const EMBEDDING_SLOTS: [&str; 5] = ["word_emb", "pos_emb", "seg_emb", "initial_ln.gain", "initial_ln.bias"];
const LAYER_SLOTS: [&str; 16] = [
    "query_w",
    "query_b",
    "key_w",
    "key_b",
    "value_w",
    "value_b",
    "attn_out_w",
    "attn_out_b",
    "attn_ln.gain",
    "attn_ln.bias",
    "ff_in_w",
    "ff_in_b",
    "ff_out_w",
    "ff_out_b",
    "ff_ln.gain",
    "ff_ln.bias",
];

impl Default for NameMap {
    /// Standard BERT naming with PyTorch `out x in` weights, with or
    /// without the `bert.` prefix, and `gamma`/`beta` accepted for LN.
    fn default() -> Self {
        let mut embeddings = BTreeMap::new();
        let e = "embeddings.";
        embeddings.insert("word_emb".into(), NameRule::new(&[&format!("{e}word_embeddings.weight")], false));
        embeddings.insert("pos_emb".into(), NameRule::new(&[&format!("{e}position_embeddings.weight")], false));
        embeddings.insert("seg_emb".into(), NameRule::new(&[&format!("{e}token_type_embeddings.weight")], false));
        let ln = |base: &str| {
            (
                NameRule::new(&[&format!("{base}.weight"), &format!("{base}.gamma")], false),
                NameRule::new(&[&format!("{base}.bias"), &format!("{base}.beta")], false),
            )
        };
        let (g, b) = ln("embeddings.LayerNorm");
        embeddings.insert("initial_ln.gain".into(), g);
        embeddings.insert("initial_ln.bias".into(), b);

        let mut layer = BTreeMap::new();
        let l = "encoder.layer.{layer}.";
        let mut linear = |slot: &str, base: String| {
            layer.insert(format!("{slot}_w"), NameRule::new(&[&format!("{base}.weight")], true));
            layer.insert(format!("{slot}_b"), NameRule::new(&[&format!("{base}.bias")], false));
        };
        linear("query", format!("{l}attention.self.query"));
        linear("key", format!("{l}attention.self.key"));
        linear("value", format!("{l}attention.self.value"));
        linear("qkv", format!("{l}attention.self.qkv"));
        linear("attn_out", format!("{l}attention.output.dense"));
        linear("ff_in", format!("{l}intermediate.dense"));
        linear("ff_out", format!("{l}output.dense"));
        let (g, b) = ln(&format!("{l}attention.output.LayerNorm"));
        layer.insert("attn_ln.gain".into(), g);
        layer.insert("attn_ln.bias".into(), b);
        let (g, b) = ln(&format!("{l}output.LayerNorm"));
        layer.insert("ff_ln.gain".into(), g);
        layer.insert("ff_ln.bias".into(), b);
        Self {
            prefixes: vec![String::new(), "bert.".into()],
            embeddings,
            layer,
        }
    }
}

impl NameMap {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: NameMap = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        map.check()?;
        Ok(map)
    }

    fn check(&self) -> Result<()> {
        for k in self.embeddings.keys() {
            if !EMBEDDING_SLOTS.contains(&k.as_str()) {
                return Err(Error::Config(format!("name map: unknown embedding slot `{k}`")));
            }
        }
        for k in self.layer.keys() {
            if !LAYER_SLOTS.contains(&k.as_str()) && k != "qkv_w" && k != "qkv_b" {
                return Err(Error::Config(format!("name map: unknown layer slot `{k}`")));
            }
        }
        Ok(())
    }

    fn rule(&self, slot: &str, layer: Option<usize>) -> Option<&NameRule> {
        match layer {
            None => self.embeddings.get(slot),
            Some(_) => self.layer.get(slot),
        }
    }

    fn candidates(&self, rule: &NameRule, layer: Option<usize>) -> Vec<String> {
        let mut out = Vec::new();
        for p in &self.prefixes {
            for n in &rule.names {
                let n = match layer {
                    Some(l) => n.replace("{layer}", &l.to_string()),
                    None => n.clone(),
                };
                out.push(format!("{p}{n}"));
            }
        }
        out
    }

    /// The unique checkpoint name for a slot, `None` when nothing matches.
    pub fn resolve(&self, manifest: &CheckpointManifest, slot: &str, layer: Option<usize>) -> Result<Option<String>> {
        let Some(rule) = self.rule(slot, layer) else {
            return Ok(None);
        };
        let hits: Vec<String> = self
            .candidates(rule, layer)
            .into_iter()
            .filter(|n| manifest.tensors.contains_key(n))
            .collect();
        match hits.len() {
            0 => Ok(None),
            1 => Ok(hits.into_iter().next()),
            _ => Err(Error::Load {
                tensor: hits.join(", "),
                byte: 8,
                message: format!("slot {} matched more than once", slot_label(slot, layer)),
            }),
        }
    }

    /// Name used when saving: first prefix, first alternative.
    fn save_name(&self, slot: &str, layer: Option<usize>) -> Result<(String, bool)> {
        let rule = self
            .rule(slot, layer)
            .ok_or_else(|| Error::Config(format!("name map has no rule for {}", slot_label(slot, layer))))?;
        let name = self
            .candidates(rule, layer)
            .into_iter()
            .next()
            .ok_or_else(|| Error::Config(format!("name map rule for {} is empty", slot_label(slot, layer))))?;
        Ok((name, rule.transpose))
    }
}

fn slot_label(slot: &str, layer: Option<usize>) -> String {
    match layer {
        Some(l) => format!("layers.{l}.{slot}"),
        None => slot.to_string(),
    }
}

enum Slot<'a> {
    Mat(&'a mut Matrix),
    Vec(&'a mut Vector),
}

fn ln_slot<'a>(ln: &'a mut LnParams, part: &str) -> Option<Slot<'a>> {
    match part {
        "gain" => Some(Slot::Vec(&mut ln.gain)),
        "bias" => Some(Slot::Vec(&mut ln.bias)),
        _ => None,
    }
}

fn embedding_slot<'a>(p: &'a mut ModelParams, slot: &str) -> Option<Slot<'a>> {
    match slot {
        "word_emb" => Some(Slot::Mat(&mut p.word_emb)),
        "pos_emb" => Some(Slot::Mat(&mut p.pos_emb)),
        "seg_emb" => Some(Slot::Mat(&mut p.seg_emb)),
        s => ln_slot(p.initial_ln.as_mut()?, s.strip_prefix("initial_ln.")?),
    }
}

fn layer_slot<'a>(p: &'a mut LayerParams, slot: &str) -> Option<Slot<'a>> {
    Some(match slot {
        "query_w" => Slot::Mat(&mut p.query_w),
        "query_b" => Slot::Vec(&mut p.query_b),
        "key_w" => Slot::Mat(&mut p.key_w),
        "key_b" => Slot::Vec(&mut p.key_b),
        "value_w" => Slot::Mat(&mut p.value_w),
        "value_b" => Slot::Vec(&mut p.value_b),
        "attn_out_w" => Slot::Mat(&mut p.attn_out_w),
        "attn_out_b" => Slot::Vec(&mut p.attn_out_b),
        "ff_in_w" => Slot::Mat(&mut p.ff_in_w),
        "ff_in_b" => Slot::Vec(&mut p.ff_in_b),
        "ff_out_w" => Slot::Mat(&mut p.ff_out_w),
        "ff_out_b" => Slot::Vec(&mut p.ff_out_b),
        s => {
            let (ln, part) = s.split_once('.')?;
            return match ln {
                "attn_ln" => ln_slot(&mut p.attn_ln, part),
                "ff_ln" => ln_slot(&mut p.ff_ln, part),
                _ => None,
            };
        }
    })
}

/// Stored shape of a slot: `[rows, cols]` in checkpoint layout, or `[n]`.
fn stored_shape(slot: &mut Slot<'_>, transpose: bool) -> Vec<usize> {
    match slot {
        Slot::Mat(m) if transpose => vec![m.cols(), m.rows()],
        Slot::Mat(m) => vec![m.rows(), m.cols()],
        Slot::Vec(v) => vec![v.len()],
    }
}

fn shape_mismatch(manifest: &CheckpointManifest, name: &str, expected: &[usize]) -> Error {
    let info = &manifest.tensors[name];
    Error::Load {
        tensor: name.into(),
        byte: manifest.data_start() + info.data_offsets[0],
        message: format!("shape {:?}, expected {:?}", info.shape, expected),
    }
}

fn fill(slot: Slot<'_>, t: RawTensor, transpose: bool) -> Result<()> {
    match slot {
        Slot::Mat(m) => {
            let (r, c) = m.shape();
            *m = if transpose {
                Matrix::from_vec(c, r, t.data)?.transpose()
            } else {
                Matrix::from_vec(r, c, t.data)?
            };
        }
        Slot::Vec(v) => *v = t.data,
    }
    Ok(())
}

/// Resolves every slot exactly once for a header-only check: reports the
/// first missing, ambiguous, mis-shaped or unsupported tensor.
pub fn validate_manifest(manifest: &CheckpointManifest, cfg: &ModelConfig, map: &NameMap) -> Result<()> {
    plan(manifest, cfg, map).map(|_| ())
}

struct Planned {
    slot: &'static str,
    layer: Option<usize>,
    name: String,
    transpose: bool,
}

/// Fused QKV split targets, in column order.
const QKV_PARTS: [&str; 3] = ["query", "key", "value"];

fn plan(manifest: &CheckpointManifest, cfg: &ModelConfig, map: &NameMap) -> Result<Vec<Planned>> {
    cfg.validate()?;
    let mut probe = ModelParams::zeros(cfg);
    let mut out = Vec::new();
    let check = |slot: &'static str, layer: Option<usize>, target: Option<Slot<'_>>, out: &mut Vec<Planned>| -> Result<bool> {
        let Some(mut target) = target else {
            return Ok(true);
        };
        let Some(name) = map.resolve(manifest, slot, layer)? else {
            return Ok(false);
        };
        let transpose = map.rule(slot, layer).is_some_and(|r| r.transpose);
        let expected = stored_shape(&mut target, transpose);
        if manifest.tensors[&name].shape != expected {
            return Err(shape_mismatch(manifest, &name, &expected));
        }
        manifest.dtype(&name)?;
        out.push(Planned {
            slot,
            layer,
            name,
            transpose,
        });
        Ok(true)
    };
    let missing = |slot: &str, layer: Option<usize>| {
        let tried = map
            .rule(slot, layer)
            .map(|r| map.candidates(r, layer).join(" | "))
            .unwrap_or_else(|| "no name-map rule".into());
        Error::Load {
            tensor: tried,
            byte: 8,
            message: format!("missing tensor for {}", slot_label(slot, layer)),
        }
    };
    for slot in EMBEDDING_SLOTS {
        if !check(slot, None, embedding_slot(&mut probe, slot), &mut out)? {
            return Err(missing(slot, None));
        }
    }
    let d = cfg.hidden;
    for l in 0..cfg.layers {
        for slot in LAYER_SLOTS {
            let layer = &mut probe.layers[l];
            if check(slot, Some(l), layer_slot(layer, slot), &mut out)? {
                continue;
            }
            let fused = match slot {
                "query_w" | "key_w" | "value_w" => Some("qkv_w"),
                "query_b" | "key_b" | "value_b" => Some("qkv_b"),
                _ => None,
            };
            let Some(fused) = fused else {
                return Err(missing(slot, Some(l)));
            };
            let Some(name) = map.resolve(manifest, fused, Some(l))? else {
                return Err(missing(slot, Some(l)));
            };
            // one planned entry per fused tensor, on its first part
            if slot.starts_with("query") {
                let transpose = map.rule(fused, Some(l)).is_some_and(|r| r.transpose);
                let expected = if fused == "qkv_b" {
                    vec![3 * d]
                } else if transpose {
                    vec![3 * d, d]
                } else {
                    vec![d, 3 * d]
                };
                if manifest.tensors[&name].shape != expected {
                    return Err(shape_mismatch(manifest, &name, &expected));
                }
                manifest.dtype(&name)?;
                out.push(Planned {
                    slot: fused,
                    layer: Some(l),
                    name,
                    transpose,
                });
            }
        }
    }
    Ok(out)
}

/// Maps a checkpoint onto parameters shaped by `cfg`.
pub fn load_params(ckpt: &Checkpoint, cfg: &ModelConfig, map: &NameMap) -> Result<ModelParams> {
    let planned = plan(&ckpt.manifest, cfg, map)?;
    let mut params = ModelParams::zeros(cfg);
    let d = cfg.hidden;
    for p in planned {
        let t = ckpt.tensor(&p.name)?;
        match (p.slot, p.layer) {
            ("qkv_w", Some(l)) => {
                let m = if p.transpose {
                    Matrix::from_vec(3 * d, d, t.data)?.transpose()
                } else {
                    Matrix::from_vec(d, 3 * d, t.data)?
                };
                let lp = &mut params.layers[l];
                for (k, part) in QKV_PARTS.iter().enumerate() {
                    let block = m.column_slice(k * d, (k + 1) * d);
                    match *part {
                        "query" => lp.query_w = block,
                        "key" => lp.key_w = block,
                        _ => lp.value_w = block,
                    }
                }
            }
            ("qkv_b", Some(l)) => {
                let lp = &mut params.layers[l];
                lp.query_b = t.data[..d].to_vec();
                lp.key_b = t.data[d..2 * d].to_vec();
                lp.value_b = t.data[2 * d..].to_vec();
            }
            (slot, None) => fill(embedding_slot(&mut params, slot).expect("planned slot"), t, p.transpose)?,
            (slot, Some(l)) => fill(layer_slot(&mut params.layers[l], slot).expect("planned slot"), t, p.transpose)?,
        }
    }
    params.validate(cfg)?;
    Ok(params)
}

pub fn load_checkpoint(path: &Path, cfg: &ModelConfig, map: &NameMap) -> Result<ModelParams> {
    load_params(&Checkpoint::open(path)?, cfg, map)
}

/// Named tensors in checkpoint layout for every slot of `params`.
pub fn export_tensors(params: &ModelParams, cfg: &ModelConfig, map: &NameMap) -> Result<BTreeMap<String, RawTensor>> {
    let mut params = params.clone();
    let mut out = BTreeMap::new();
    let mut put = |slot: Option<Slot<'_>>, name: String, transpose: bool| {
        let Some(slot) = slot else { return };
        let t = match slot {
            Slot::Mat(m) if transpose => {
                let t = m.transpose();
                RawTensor {
                    shape: vec![t.rows(), t.cols()],
                    data: t.into_data(),
                }
            }
            Slot::Mat(m) => RawTensor {
                shape: vec![m.rows(), m.cols()],
                data: m.data().to_vec(),
            },
            Slot::Vec(v) => RawTensor {
                shape: vec![v.len()],
                data: v.clone(),
            },
        };
        out.insert(name, t);
    };
    for slot in EMBEDDING_SLOTS {
        if slot.starts_with("initial_ln") && !cfg.initial_ln {
            continue;
        }
        let (name, tr) = map.save_name(slot, None)?;
        put(embedding_slot(&mut params, slot), name, tr);
    }
    for l in 0..params.layers.len() {
        for slot in LAYER_SLOTS {
            let (name, tr) = map.save_name(slot, Some(l))?;
            put(layer_slot(&mut params.layers[l], slot), name, tr);
        }
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, cfg: &ModelConfig, map: &NameMap, dtype: Dtype) -> Result<()> {
    params.validate(cfg)?;
    let bytes = encode_safetensors(&export_tensors(params, cfg, map)?, dtype, &BTreeMap::new())?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a model config, accepting the usual BERT `config.json` fields.
pub fn load_config(path: &Path) -> Result<ModelConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: ModelConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(path: &Path, cfg: &ModelConfig) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{random_model, ToySpec};

    fn toy() -> (ModelConfig, ModelParams) {
        let m = random_model(&ToySpec::new(2, 8, 2), 3);
        (m.config, m.params)
    }

    #[test]
    fn f64_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let (cfg, params) = toy();
        let map = NameMap::default();
        save_checkpoint(&path, &params, &cfg, &map, Dtype::F64).unwrap();
        let back = load_checkpoint(&path, &cfg, &map).unwrap();
        let bits = |p: &ModelParams| {
            let mut v = Vec::new();
            for t in export_tensors(p, &cfg, &map).unwrap().into_values() {
                v.extend(t.data.iter().map(|x| x.to_bits()));
            }
            v
        };
        assert_eq!(bits(&back), bits(&params));
    }

    #[test]
    fn narrow_dtypes_round_trip_bitwise() {
        let (cfg, params) = toy();
        let map = NameMap::default();
        for dtype in [Dtype::F16, Dtype::BF16, Dtype::F32] {
            let tensors = export_tensors(&params, &cfg, &map).unwrap();
            let first = Checkpoint::from_bytes(encode_safetensors(&tensors, dtype, &BTreeMap::new()).unwrap()).unwrap();
            let decoded: BTreeMap<String, RawTensor> = tensors
                .keys()
                .map(|n| (n.clone(), first.tensor(n).unwrap()))
                .collect();
            let bytes = encode_safetensors(&decoded, dtype, &BTreeMap::new()).unwrap();
            let second = Checkpoint::from_bytes(bytes).unwrap();
            for n in tensors.keys() {
                assert_eq!(first.tensor_bytes(n), second.tensor_bytes(n), "{dtype:?} {n}");
            }
            let loaded = load_params(&second, &cfg, &map).unwrap();
            assert!(loaded.word_emb.max_abs_diff(&params.word_emb) < 0.05);
        }
    }

    #[test]
    fn wrong_header_length_reported_at_byte_8() {
        let (cfg, params) = toy();
        let tensors = export_tensors(&params, &cfg, &NameMap::default()).unwrap();
        let mut bytes = encode_safetensors(&tensors, Dtype::F32, &BTreeMap::new()).unwrap();
        let n = bytes.len() as u64;
        bytes[..8].copy_from_slice(&(n * 2).to_le_bytes());
        let err = Checkpoint::from_bytes(bytes.clone()).unwrap_err();
        assert!(matches!(err, Error::Load { byte: 8, .. }), "{err}");
        bytes[..8].copy_from_slice(&5u64.to_le_bytes());
        let err = Checkpoint::from_bytes(bytes).unwrap_err();
        assert!(matches!(err, Error::Load { byte: 8, .. }), "{err}");
    }

    #[test]
    fn truncated_file_names_tensor() {
        let (cfg, params) = toy();
        let tensors = export_tensors(&params, &cfg, &NameMap::default()).unwrap();
        let mut bytes = encode_safetensors(&tensors, Dtype::F32, &BTreeMap::new()).unwrap();
        bytes.truncate(bytes.len() - 3);
        match Checkpoint::from_bytes(bytes).unwrap_err() {
            Error::Load { tensor, byte, message } => {
                assert!(tensor.contains("encoder.layer."), "{tensor}");
                assert!(byte > 8);
                assert!(message.contains("truncated"));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn missing_tensor_and_bad_shape() {
        let (cfg, params) = toy();
        let map = NameMap::default();
        let mut tensors = export_tensors(&params, &cfg, &map).unwrap();
        let key = "encoder.layer.1.output.dense.bias".to_string();
        let saved = tensors.remove(&key).unwrap();
        let ckpt = Checkpoint::from_bytes(encode_safetensors(&tensors, Dtype::F64, &BTreeMap::new()).unwrap()).unwrap();
        let err = load_params(&ckpt, &cfg, &map).unwrap_err();
        assert!(err.to_string().contains(&key), "{err}");

        tensors.insert(
            key.clone(),
            RawTensor {
                shape: vec![7],
                data: saved.data[..7].to_vec(),
            },
        );
        let ckpt = Checkpoint::from_bytes(encode_safetensors(&tensors, Dtype::F64, &BTreeMap::new()).unwrap()).unwrap();
        let err = load_params(&ckpt, &cfg, &map).unwrap_err();
        let text = err.to_string();
        assert!(text.contains(&key) && text.contains("[8]"), "{text}");
    }

    #[test]
    fn unsupported_dtype_rejected_only_when_mapped() {
        let header = r#"{"a":{"dtype":"I64","shape":[2],"data_offsets":[0,16]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&[0; 16]);
        let ckpt = Checkpoint::from_bytes(bytes).unwrap();
        let err = ckpt.tensor("a").unwrap_err();
        assert!(matches!(&err, Error::Load { tensor, .. } if tensor == "a"), "{err}");
    }

    #[test]
    fn fused_qkv_and_prefix_accepted() {
        let (cfg, params) = toy();
        let map = NameMap::default();
        let d = cfg.hidden;
        let mut tensors = BTreeMap::new();
        for (name, t) in export_tensors(&params, &cfg, &map).unwrap() {
            if name.contains(".attention.self.") {
                continue;
            }
            tensors.insert(format!("bert.{name}"), t);
        }
        for (l, lp) in params.layers.iter().enumerate() {
            // out x in: rows are q, then k, then v
            let mut w = Vec::new();
            for m in [&lp.query_w, &lp.key_w, &lp.value_w] {
                w.extend(m.transpose().into_data());
            }
            let mut b = lp.query_b.clone();
            b.extend(&lp.key_b);
            b.extend(&lp.value_b);
            let base = format!("bert.encoder.layer.{l}.attention.self.qkv");
            tensors.insert(format!("{base}.weight"), RawTensor { shape: vec![3 * d, d], data: w });
            tensors.insert(format!("{base}.bias"), RawTensor { shape: vec![3 * d], data: b });
        }
        let ckpt = Checkpoint::from_bytes(encode_safetensors(&tensors, Dtype::F64, &BTreeMap::new()).unwrap()).unwrap();
        assert_eq!(load_params(&ckpt, &cfg, &map).unwrap(), params);
    }

    #[test]
    fn ambiguous_alternatives_rejected() {
        let (cfg, params) = toy();
        let map = NameMap::default();
        let mut tensors = export_tensors(&params, &cfg, &map).unwrap();
        let g = tensors["embeddings.LayerNorm.weight"].clone();
        tensors.insert("embeddings.LayerNorm.gamma".into(), g);
        let ckpt = Checkpoint::from_bytes(encode_safetensors(&tensors, Dtype::F64, &BTreeMap::new()).unwrap()).unwrap();
        assert!(load_params(&ckpt, &cfg, &map).unwrap_err().to_string().contains("more than once"));
    }

    #[test]
    fn name_map_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.json");
        let map = NameMap::default();
        fs::write(&path, serde_json::to_string_pretty(&map).unwrap()).unwrap();
        assert_eq!(NameMap::from_json_file(&path).unwrap(), map);
        let mut bad = map.clone();
        bad.layer.insert("nonsense".into(), NameRule::new(&["x"], false));
        fs::write(&path, serde_json::to_string(&bad).unwrap()).unwrap();
        assert!(NameMap::from_json_file(&path).is_err());
    }

    #[test]
    fn bert_config_fields_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let text = r#"{"hidden_size": 768, "num_hidden_layers": 12, "num_attention_heads": 12,
            "intermediate_size": 3072, "vocab_size": 30522, "max_position_embeddings": 512,
            "type_vocab_size": 2, "layer_norm_eps": 1e-12, "hidden_act": "gelu", "model_type": "bert"}"#;
        fs::write(&path, text).unwrap();
        let cfg = load_config(&path).unwrap();
        assert_eq!((cfg.layers, cfg.hidden, cfg.heads, cfg.ff_dim), (12, 768, 12, 3072));
    }
}
