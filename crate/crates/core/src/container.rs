//! Tensor container: an 8-byte little-endian header length, a UTF-8 JSON
//! header, then every tensor's elements as contiguous little-endian
//! 32-bit values in declared order.
//!
//! ```text
//! [u64 LE: header bytes][header JSON][blob]
//! ```
//!
//! The reader checks the magic, the byte order tag, that offsets are
//! contiguous, that every shape matches its element count and that the
//! blob length is exactly the declared total.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::encoder::{ClipPositionalEmbeddings, EncoderWeights, LoraParams, ModelConfig, Trainable, VideoInput};
use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::schedule::{parse_schedule, MergeSchedule};
use crate::synthgen::{Dataset, SynthPair, SynthSpec};

pub const MAGIC: &str = "tempme.tensors";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::U32(_) => "u32",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self { name: name.into(), shape, data: TensorData::F32(data) }
    }

    pub fn u32(name: impl Into<String>, shape: Vec<usize>, data: Vec<u32>) -> Self {
        Self { name: name.into(), shape, data: TensorData::U32(data) }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U32(_) => Err(Error::Format(format!("tensor {} is u32, expected f32", self.name))),
        }
    }

    pub fn as_u32(&self) -> Result<&[u32]> {
        match &self.data {
            TensorData::U32(v) => Ok(v),
            TensorData::F32(_) => Err(Error::Format(format!("tensor {} is f32, expected u32", self.name))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: usize,
    /// Number of elements.
    length: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    endianness: String,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: Value,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn new(meta: Value) -> Self {
        Self { meta, tensors: Vec::new() }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        let mut names = BTreeSet::new();
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Format(format!(
                    "tensor {} shape {:?} holds {} values",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
            if !names.insert(&t.name) {
                return Err(Error::Format(format!("duplicate tensor {}", t.name)));
            }
            entries.push(TensorEntry {
                name: t.name.clone(),
                dtype: t.data.dtype().into(),
                shape: t.shape.clone(),
                offset,
                length: t.data.len(),
            });
            offset += 4 * t.data.len();
        }
        let header = Header {
            format: MAGIC.into(),
            version: VERSION,
            endianness: "little".into(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let head = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + head.len() + offset);
        out.extend_from_slice(&(head.len() as u64).to_le_bytes());
        out.extend_from_slice(&head);
        for t in &self.tensors {
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: String| Err(Error::Format(m));
        if bytes.len() < 8 {
            return fail("file shorter than the length prefix".into());
        }
        let head_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        if head_len > bytes.len() - 8 {
            return fail(format!("header length {head_len} exceeds file size {}", bytes.len()));
        }
        let header: Header = serde_json::from_slice(&bytes[8..8 + head_len])?;
        if header.format != MAGIC {
            return fail(format!("unknown format tag {:?}", header.format));
        }
        if header.version != VERSION {
            return fail(format!("unsupported version {}", header.version));
        }
        if header.endianness != "little" {
            return fail(format!("unsupported byte order {:?}", header.endianness));
        }
        let blob = &bytes[8 + head_len..];
        let mut expected = 0;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.offset != expected {
                return fail(format!("tensor {} at offset {}, expected {expected}", e.name, e.offset));
            }
            if e.shape.iter().product::<usize>() != e.length {
                return fail(format!("tensor {} shape {:?} does not hold {} values", e.name, e.shape, e.length));
            }
            let end = e.offset + 4 * e.length;
            if end > blob.len() {
                return fail(format!("tensor {} runs past the end of the blob", e.name));
            }
            let words = blob[e.offset..end].chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
            let data = match e.dtype.as_str() {
                "f32" => TensorData::F32(words.map(f32::from_le_bytes).collect()),
                "u32" => TensorData::U32(words.map(u32::from_le_bytes).collect()),
                other => return fail(format!("tensor {} has unknown dtype {other}", e.name)),
            };
            expected = end;
            tensors.push(Tensor { name: e.name, shape: e.shape, data });
        }
        if expected != blob.len() {
            return fail(format!("blob is {} bytes, header declares {expected}", blob.len()));
        }
        Ok(Self { meta: header.meta, tensors })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn kind(&self) -> Option<&str> {
        self.meta.get("kind").and_then(Value::as_str)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.kind() {
            Some(k) if k == kind => Ok(()),
            other => Err(Error::Format(format!("container holds {other:?}, expected {kind:?}"))),
        }
    }
}

fn fill(dst: &mut [f32], t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape != shape {
        return Err(Error::Format(format!("tensor {} has shape {:?}, expected {shape:?}", t.name, t.shape)));
    }
    dst.copy_from_slice(t.as_f32()?);
    Ok(())
}

/// Backbone weights with the model configuration in the header.
pub fn weights_to_container(w: &EncoderWeights<f32>) -> Result<Container> {
    let mut c = Container::new(json!({ "kind": "weights", "config": w.config }));
    c.tensors = w.tensors().into_iter().map(|t| Tensor::f32(t.name, t.shape, t.data.to_vec())).collect();
    Ok(c)
}

pub fn weights_from_container(c: &Container) -> Result<EncoderWeights<f32>> {
    c.expect_kind("weights")?;
    let config: ModelConfig = serde_json::from_value(c.meta["config"].clone())?;
    config.validate()?;
    let mut w = EncoderWeights::<f32>::init(&config, 0)?;
    let declared = w.tensors().len();
    if declared != c.tensors.len() {
        return Err(Error::Format(format!("{} tensors, configuration needs {declared}", c.tensors.len())));
    }
    for dst in w.tensors_mut() {
        fill(dst.data, c.get(&dst.name)?, &dst.shape)?;
    }
    Ok(w)
}

/// Adapters and clip positional tables, with the schedule they were
/// trained for.
pub fn trainable_to_container(p: &Trainable<f32>, config: &ModelConfig, sched: &MergeSchedule) -> Container {
    let mut c = Container::new(json!({
        "kind": "trainable",
        "config": config,
        "schedule": sched.to_string(),
        "lora_rank": p.lora.rank,
        "lora_alpha": p.lora.alpha,
    }));
    for (tower, layers) in [("vision", &p.lora.vision), ("text", &p.lora.text)] {
        for (li, l) in layers.iter().enumerate() {
            for (proj, a) in ["q", "k", "v"].iter().zip(l.adapters()) {
                c.tensors.push(Tensor::f32(
                    format!("{tower}.{li}.{proj}.down"),
                    vec![a.down.rows(), a.down.cols()],
                    a.down.data().to_vec(),
                ));
                c.tensors.push(Tensor::f32(
                    format!("{tower}.{li}.{proj}.up"),
                    vec![a.up.rows(), a.up.cols()],
                    a.up.data().to_vec(),
                ));
            }
        }
    }
    for (s, m) in p.cpe.steps.iter().enumerate() {
        c.tensors.push(Tensor::f32(format!("cpe.{s}"), vec![m.rows(), m.cols()], m.data().to_vec()));
    }
    c
}

pub fn trainable_from_container(c: &Container) -> Result<(Trainable<f32>, ModelConfig, MergeSchedule)> {
    c.expect_kind("trainable")?;
    let config: ModelConfig = serde_json::from_value(c.meta["config"].clone())?;
    let text = c.meta["schedule"].as_str().ok_or_else(|| Error::Format("missing schedule".into()))?;
    let sched = parse_schedule(text)?;
    let mut p =
        Trainable { lora: LoraParams::zeros(&config), cpe: ClipPositionalEmbeddings::zeros(&sched, config.width) };
    if let Some(alpha) = c.meta["lora_alpha"].as_f64() {
        p.lora.alpha = alpha;
    }
    for (tower, layers) in [("vision", &mut p.lora.vision), ("text", &mut p.lora.text)] {
        for (li, l) in layers.iter_mut().enumerate() {
            for (proj, a) in ["q", "k", "v"].iter().zip(l.adapters_mut()) {
                let shape = [a.down.rows(), a.down.cols()];
                fill(a.down.data_mut(), c.get(&format!("{tower}.{li}.{proj}.down"))?, &shape)?;
                let shape = [a.up.rows(), a.up.cols()];
                fill(a.up.data_mut(), c.get(&format!("{tower}.{li}.{proj}.up"))?, &shape)?;
            }
        }
    }
    for (s, m) in p.cpe.steps.iter_mut().enumerate() {
        let shape = [m.rows(), m.cols()];
        fill(m.data_mut(), c.get(&format!("cpe.{s}"))?, &shape)?;
    }
    Ok((p, config, sched))
}

/// Texts are padded with `PAD = 0` to a common length; `text_lengths`
/// records the true lengths.
pub fn dataset_to_container(d: &Dataset) -> Container {
    let spec = &d.spec;
    let n = d.pairs.len();
    let max_len = d.pairs.iter().map(|p| p.text.len()).max().unwrap_or(0);
    let mut texts = vec![0u32; n * max_len];
    for (i, p) in d.pairs.iter().enumerate() {
        texts[i * max_len..i * max_len + p.text.len()].copy_from_slice(&p.text);
    }
    let patches = spec.tokens_per_frame - 1;
    let mut videos = Vec::with_capacity(n * spec.frames * patches * spec.width);
    for p in &d.pairs {
        for f in &p.video.frames {
            videos.extend_from_slice(f.data());
        }
    }
    let mut c = Container::new(json!({ "kind": "dataset", "spec": spec }));
    c.tensors.push(Tensor::u32("texts", vec![n, max_len], texts));
    c.tensors.push(Tensor::u32("text_lengths", vec![n], d.pairs.iter().map(|p| p.text.len() as u32).collect()));
    c.tensors.push(Tensor::u32("pair_ids", vec![n], d.pairs.iter().map(|p| p.pair_id as u32).collect()));
    c.tensors.push(Tensor::u32(
        "subjects",
        vec![n, spec.subject_count],
        d.pairs.iter().flat_map(|p| p.subjects.iter().map(|&s| s as u32)).collect(),
    ));
    c.tensors.push(Tensor::f32("videos", vec![n, spec.frames, patches, spec.width], videos));
    c
}

pub fn dataset_from_container(c: &Container) -> Result<Dataset> {
    c.expect_kind("dataset")?;
    let spec: SynthSpec = serde_json::from_value(c.meta["spec"].clone())?;
    spec.validate()?;
    let texts = c.get("texts")?;
    let (n, max_len) = match texts.shape[..] {
        [n, m] => (n, m),
        _ => return Err(Error::Format("texts must be two-dimensional".into())),
    };
    let lengths = c.get("text_lengths")?.as_u32()?;
    let ids = c.get("pair_ids")?.as_u32()?;
    let subjects = c.get("subjects")?.as_u32()?;
    let videos = c.get("videos")?;
    let patches = spec.tokens_per_frame - 1;
    if videos.shape != [n, spec.frames, patches, spec.width]
        || lengths.len() != n
        || ids.len() != n
        || subjects.len() != n * spec.subject_count
    {
        return Err(Error::Format("dataset tensors disagree with the generator spec".into()));
    }
    let (tv, vv) = (texts.as_u32()?, videos.as_f32()?);
    let frame_len = patches * spec.width;
    let pairs = (0..n)
        .map(|i| {
            let len = lengths[i] as usize;
            if len > max_len {
                return Err(Error::Format(format!("text {i} longer than the padded width")));
            }
            let frames = (0..spec.frames)
                .map(|f| {
                    let start = (i * spec.frames + f) * frame_len;
                    Mat::from_vec(patches, spec.width, vv[start..start + frame_len].to_vec())
                })
                .collect::<Result<_>>()?;
            Ok(SynthPair {
                pair_id: ids[i] as usize,
                subjects: subjects[i * spec.subject_count..(i + 1) * spec.subject_count]
                    .iter()
                    .map(|&s| s as usize)
                    .collect(),
                text: tv[i * max_len..i * max_len + len].to_vec(),
                video: VideoInput { frames },
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { spec, pairs })
}
