//! Checkpoint format: one line of compact JSON ([`CheckpointHeader`])
//! terminated by `\n`, followed by a blob of little-endian `f32` values.
//! `byte_offset` is relative to the start of the blob. Values are stored at
//! 32-bit precision, so `save -> load -> save` is byte-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::data::ItemId;

use super::{ItemIndex, ModelConfig, ModelError, ModelKind, Ranker};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: usize,
    pub byte_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub item_ids: Vec<ItemId>,
    pub l_max: usize,
    pub tensors: Vec<TensorEntry>,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(r: &Ranker, mut w: W) -> Result<(), ModelError> {
    let mut tensors = Vec::with_capacity(r.params.len());
    let mut blob = Vec::with_capacity(4 * r.params.num_values());
    for (_, name, t) in r.params.iter() {
        let byte_offset = blob.len();
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            byte_offset,
            byte_len: blob.len() - byte_offset,
        });
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        kind: r.kind(),
        config: r.config.clone(),
        item_ids: r.index.item_ids().to_vec(),
        l_max: r.l_max,
        tensors,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    w.write_all(&blob)?;
    w.flush()?;
    Ok(())
}

/// Parameter names and shapes a ranker of this configuration must carry.
fn expected_layout(config: &ModelConfig, index: &ItemIndex, l_max: usize) -> Result<Vec<(String, Vec<usize>)>, ModelError> {
    let n = index.n_items();
    Ok(match config {
        ModelConfig::Pop => vec![("pop.counts".into(), vec![1, n])],
        ModelConfig::Markov => vec![("pop.counts".into(), vec![1, n]), ("markov.counts".into(), vec![n, n])],
        _ => Ranker::init(config.clone(), index.clone(), l_max, 0)?
            .params
            .iter()
            .map(|(_, name, t)| (name.to_string(), t.shape().to_vec()))
            .collect(),
    })
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Ranker, ModelError> {
    let mut reader = BufReader::new(r);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(bad("missing header terminator"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&line[..line.len() - 1])?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format_version {}", header.format_version)));
    }
    if header.kind != header.config.kind() {
        return Err(bad(format!("kind {} disagrees with config {:?}", header.kind, header.config.kind())));
    }
    let mut blob = Vec::new();
    reader.read_to_end(&mut blob)?;

    let index = ItemIndex::new(header.item_ids.clone())?;
    let layout = expected_layout(&header.config, &index, header.l_max)?;
    let found: Vec<(String, Vec<usize>)> = header.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
    if found != layout {
        return Err(bad("tensor names or shapes do not match the configuration"));
    }
    let mut params = ParamStore::default();
    let mut cursor = 0;
    for t in &header.tensors {
        let count: usize = t.shape.iter().product();
        if t.dtype != "f32" || t.byte_offset != cursor || t.byte_len != 4 * count {
            return Err(bad(format!("tensor {} has an invalid entry", t.name)));
        }
        let bytes = blob
            .get(t.byte_offset..t.byte_offset + t.byte_len)
            .ok_or_else(|| bad(format!("tensor {} runs past the blob", t.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params.insert(&t.name, Tensor::new(t.shape.clone(), data)?);
        cursor += t.byte_len;
    }
    if cursor != blob.len() {
        return Err(bad(format!("{} trailing bytes after the last tensor", blob.len() - cursor)));
    }
    Ok(Ranker {
        config: header.config,
        index,
        l_max: header.l_max,
        params,
    })
}

pub fn save_checkpoint(r: &Ranker, path: &Path) -> Result<(), ModelError> {
    write_checkpoint(r, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<Ranker, ModelError> {
    read_checkpoint(File::open(path)?)
}
