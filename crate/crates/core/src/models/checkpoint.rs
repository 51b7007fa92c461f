//! Binary checkpoint container.
//!
//! ```text
//! "NNMC" | u32 version | u32 len | config JSON (len bytes, UTF-8)
//! repeated: u32 name_len | name | u8 rank | rank × u32 extent | f32 data
//! u32 CRC32 of every preceding byte
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{LayerQuant, Network};
use super::zoo::{build_model, ModelConfig};
use crate::engine::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NNMC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub phase: String,
    pub epoch: usize,
    pub seed: u64,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub quant: Option<Vec<LayerQuant>>,
    pub clip_ranges: BTreeMap<String, (f32, f32)>,
    pub training: TrainingMeta,
}

fn tensors(net: &Network) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = net.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    for bn in &net.bn {
        let c = bn.mean.len();
        out.push((format!("{}.running_mean", bn.name), Tensor::from_parts(vec![c], bn.mean.clone())));
        out.push((format!("{}.running_var", bn.name), Tensor::from_parts(vec![c], bn.var.clone())));
    }
    out
}

pub fn encode_checkpoint(net: &Network, training: &TrainingMeta) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        model: net.config.clone(),
        quant: net.quant.clone(),
        clip_ranges: net
            .params
            .iter()
            .filter_map(|p| p.clip_range.map(|r| (p.name.clone(), r)))
            .collect(),
        training: training.clone(),
    };
    let blob = serde_json::to_vec(&meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    buf.extend_from_slice(&blob);
    for (name, t) in tensors(net) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.rank() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

/// Writes atomically: the file appears only once fully written.
pub fn save_checkpoint(net: &Network, training: &TrainingMeta, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(net, training)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Network, TrainingMeta)> {
    if bytes.len() < 16 {
        return Err(Error::Checkpoint(format!("truncated: only {} bytes", bytes.len())));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {:?}, expected \"NNMC\"", &bytes[..4])));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Checkpoint(format!("config blob: {e}")))?;

    let mut records = BTreeMap::new();
    while r.pos < body.len() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.insert(name, Tensor::new(shape, data)?);
    }

    let mut net = build_model(&meta.model, 0)?;
    let expected = tensors(&net);
    if records.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            expected.len(),
            records.len()
        )));
    }
    for (name, like) in &expected {
        let t = records
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape() != like.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape(),
                like.shape()
            )));
        }
    }
    for p in &mut net.params {
        p.value = records[&p.name].clone();
        p.clip_range = meta.clip_ranges.get(&p.name).copied();
    }
    for bn in &mut net.bn {
        bn.mean = records[&format!("{}.running_mean", bn.name)].data().to_vec();
        bn.var = records[&format!("{}.running_var", bn.name)].data().to_vec();
    }
    if let Some(q) = &meta.quant {
        if q.len() != net.analog_layers().len() {
            return Err(Error::Checkpoint("quantizer count does not match analog layers".into()));
        }
    }
    net.quant = meta.quant;
    Ok((net, meta.training))
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, TrainingMeta)> {
    decode_checkpoint(&fs::read(path)?)
}
