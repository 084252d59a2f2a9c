//! `BSNN` checkpoint format.
//!
//! ```text
//! "BSNN" | version:u8 | flags:u8 | input_rank:u8 | input_dims:u32*
//! node_count:u32 | node_count × (record_len:u32 | record)
//!     record = name_len:u16 | name | kind:u8 | hyperparameters | n_inputs:u16 | inputs:u32*
//! per node: tensor_count:u16 | tensor_count × (role:u8 | rank:u8 | dims:u32* | f32 values)
//! crc32:u32 over every preceding byte
//! ```
//!
//! All integers and floats are little-endian. Input index `u32::MAX` is the
//! graph input. Tensor roles: 0 frozen parameter, 1 trainable parameter,
//! 2 running mean, 3 running variance. Flag bit 0 marks a graph pinned to
//! inference behavior.

use crate::nn::graph::{ModelGraph, Param, RunningStats, Source};
use crate::nn::{LayerSpec, NnError, Tensor};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"BSNN";
pub const VERSION: u8 = 1;
const GRAPH_INPUT: u32 = u32::MAX;

const ROLE_FROZEN: u8 = 0;
const ROLE_TRAINABLE: u8 = 1;
const ROLE_RUNNING_MEAN: u8 = 2;
const ROLE_RUNNING_VAR: u8 = 3;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    VersionMismatch { found: u8 },
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint describes an invalid graph: {0}")]
    Graph(#[from] NnError),
}

fn kind_code(spec: &LayerSpec) -> u8 {
    match spec {
        LayerSpec::Conv2d { .. } => 1,
        LayerSpec::BatchNorm { .. } => 2,
        LayerSpec::Relu => 3,
        LayerSpec::Dense { .. } => 4,
        LayerSpec::Dropout { .. } => 5,
        LayerSpec::Flatten => 6,
        LayerSpec::ConcatChannels => 7,
        LayerSpec::Sigmoid => 8,
        LayerSpec::Softmax => 9,
    }
}

fn put_tensor(out: &mut Vec<u8>, role: u8, shape: &[usize], values: impl Iterator<Item = f32>) {
    out.push(role);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a graph. Values are stored in single precision.
pub fn save_checkpoint<T: Scalar>(graph: &ModelGraph<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(u8::from(graph.is_pinned_infer()));
    out.push(graph.input_shape().len() as u8);
    for &d in graph.input_shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(graph.nodes().len() as u32).to_le_bytes());
    for node in graph.nodes() {
        let mut rec = Vec::new();
        rec.extend_from_slice(&(node.name.len() as u16).to_le_bytes());
        rec.extend_from_slice(node.name.as_bytes());
        rec.push(kind_code(&node.spec));
        match node.spec {
            LayerSpec::Conv2d { out_channels, stride } => {
                rec.extend_from_slice(&(out_channels as u32).to_le_bytes());
                rec.push(stride as u8);
            }
            LayerSpec::BatchNorm { epsilon, momentum } => {
                rec.extend_from_slice(&epsilon.to_le_bytes());
                rec.extend_from_slice(&momentum.to_le_bytes());
            }
            LayerSpec::Dense { out_units } => rec.extend_from_slice(&(out_units as u32).to_le_bytes()),
            LayerSpec::Dropout { rate } => rec.extend_from_slice(&rate.to_le_bytes()),
            _ => {}
        }
        rec.extend_from_slice(&(node.inputs.len() as u16).to_le_bytes());
        for s in &node.inputs {
            let idx = match *s {
                Source::Input => GRAPH_INPUT,
                Source::Node(i) => i as u32,
            };
            rec.extend_from_slice(&idx.to_le_bytes());
        }
        out.extend_from_slice(&(rec.len() as u32).to_le_bytes());
        out.extend_from_slice(&rec);
    }
    for node in graph.nodes() {
        let count = node.params.len() + if node.running.is_some() { 2 } else { 0 };
        out.extend_from_slice(&(count as u16).to_le_bytes());
        for p in &node.params {
            let role = if p.trainable { ROLE_TRAINABLE } else { ROLE_FROZEN };
            put_tensor(&mut out, role, p.value.shape(), p.value.data().iter().map(|v| v.to_f32_lossy()));
        }
        if let Some(rs) = &node.running {
            put_tensor(&mut out, ROLE_RUNNING_MEAN, &[rs.mean.len()], rs.mean.iter().map(|v| v.to_f32_lossy()));
            put_tensor(&mut out, ROLE_RUNNING_VAR, &[rs.var.len()], rs.var.iter().map(|v| v.to_f32_lossy()));
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Corrupt(format!("unexpected end at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn read_spec(cur: &mut Cursor<'_>) -> Result<LayerSpec, CheckpointError> {
    Ok(match cur.u8()? {
        1 => LayerSpec::Conv2d { out_channels: cur.u32()? as usize, stride: cur.u8()? as usize },
        2 => LayerSpec::BatchNorm { epsilon: cur.f64()?, momentum: cur.f64()? },
        3 => LayerSpec::Relu,
        4 => LayerSpec::Dense { out_units: cur.u32()? as usize },
        5 => LayerSpec::Dropout { rate: cur.f64()? },
        6 => LayerSpec::Flatten,
        7 => LayerSpec::ConcatChannels,
        8 => LayerSpec::Sigmoid,
        9 => LayerSpec::Softmax,
        k => return Err(CheckpointError::Corrupt(format!("unknown layer kind {k}"))),
    })
}

fn read_tensor<T: Scalar>(cur: &mut Cursor<'_>) -> Result<(u8, Vec<usize>, Vec<T>), CheckpointError> {
    let role = cur.u8()?;
    let rank = cur.u8()? as usize;
    let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
    let len: usize = shape.iter().product();
    let raw = cur.take(len.checked_mul(4).ok_or_else(|| CheckpointError::Corrupt("tensor size".into()))?)?;
    let values = raw
        .chunks_exact(4)
        .map(|b| T::from_f32_lossy(f32::from_le_bytes(b.try_into().unwrap())))
        .collect();
    Ok((role, shape, values))
}

/// Parses a checkpoint, re-deriving every shape from the graph descriptor.
pub fn load_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<ModelGraph<T>, CheckpointError> {
    let head = &bytes[..bytes.len().min(MAGIC.len())];
    if head != &MAGIC[..head.len()] {
        return Err(CheckpointError::BadMagic);
    }
    if let Some(&v) = bytes.get(MAGIC.len()) {
        if v != VERSION {
            return Err(CheckpointError::VersionMismatch { found: v });
        }
    }
    if bytes.len() < MAGIC.len() + 1 + 4 {
        return Err(CheckpointError::ChecksumMismatch);
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().unwrap()) {
        return Err(CheckpointError::ChecksumMismatch);
    }

    let mut cur = Cursor { bytes: body, pos: MAGIC.len() + 1 };
    let flags = cur.u8()?;
    let rank = cur.u8()? as usize;
    let input_shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
    let node_count = cur.u32()? as usize;
    let mut parts = Vec::with_capacity(node_count.min(1 << 16));
    for _ in 0..node_count {
        let len = cur.u32()? as usize;
        let mut rec = Cursor { bytes: cur.take(len)?, pos: 0 };
        let name_len = rec.u16()? as usize;
        let name = std::str::from_utf8(rec.take(name_len)?)
            .map_err(|_| CheckpointError::Corrupt("node name is not UTF-8".into()))?
            .to_string();
        let spec = read_spec(&mut rec)?;
        let n_inputs = rec.u16()? as usize;
        let inputs = (0..n_inputs)
            .map(|_| {
                rec.u32().map(|i| if i == GRAPH_INPUT { Source::Input } else { Source::Node(i as usize) })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if !rec.done() {
            return Err(CheckpointError::Corrupt(format!("trailing bytes in node record {name:?}")));
        }
        parts.push((name, spec, inputs));
    }

    let mut graph: ModelGraph<T> = ModelGraph::<T>::from_parts(input_shape, parts)?.build(0)?;
    for node in graph.nodes_mut() {
        let count = cur.u16()? as usize;
        let expected = node.params.len() + if node.running.is_some() { 2 } else { 0 };
        if count != expected {
            return Err(CheckpointError::Corrupt(format!("node {:?} has {count} tensors, expected {expected}", node.name)));
        }
        let mut params = Vec::with_capacity(node.params.len());
        for p in &node.params {
            let (role, shape, values) = read_tensor::<T>(&mut cur)?;
            if shape != p.value.shape() || !(role == ROLE_FROZEN || role == ROLE_TRAINABLE) {
                return Err(CheckpointError::Corrupt(format!("parameter of node {:?}", node.name)));
            }
            params.push(Param { value: Tensor::new(shape, values)?, trainable: role == ROLE_TRAINABLE });
        }
        node.params = params;
        if let Some(rs) = &node.running {
            let c = rs.mean.len();
            let (r1, s1, mean) = read_tensor::<T>(&mut cur)?;
            let (r2, s2, var) = read_tensor::<T>(&mut cur)?;
            if r1 != ROLE_RUNNING_MEAN || r2 != ROLE_RUNNING_VAR || s1 != [c] || s2 != [c] {
                return Err(CheckpointError::Corrupt(format!("running statistics of node {:?}", node.name)));
            }
            node.running = Some(RunningStats { mean, var });
        }
    }
    if !cur.done() {
        return Err(CheckpointError::Corrupt("trailing bytes after tensors".into()));
    }
    if flags & 1 == 1 {
        graph.pin_infer();
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::GraphBuilder;

    fn graph() -> ModelGraph<f32> {
        let mut b = GraphBuilder::new(&[4, 4, 1]);
        b.then("bn", LayerSpec::batchnorm()).unwrap();
        b.then("conv", LayerSpec::Conv2d { out_channels: 3, stride: 2 }).unwrap();
        b.add("flat", LayerSpec::Flatten, &["conv"]).unwrap();
        b.then("drop", LayerSpec::Dropout { rate: 0.2 }).unwrap();
        b.then("dense", LayerSpec::Dense { out_units: 2 }).unwrap();
        b.then("soft", LayerSpec::Softmax).unwrap();
        b.build(11).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let mut g = graph();
        g.nodes_mut()[1].params[1].trainable = false;
        g.nodes_mut()[0].running.as_mut().unwrap().mean[0] = 0.125;
        g.pin_infer();
        let bytes = save_checkpoint(&g);
        let back: ModelGraph<f32> = load_checkpoint(&bytes).unwrap();
        assert_eq!(back, g);
        assert_eq!(save_checkpoint(&back), bytes);
    }

    #[test]
    fn detects_damage() {
        let bytes = save_checkpoint(&graph());
        assert_eq!(load_checkpoint::<f32>(&bytes[..bytes.len() - 7]), Err(CheckpointError::ChecksumMismatch));
        assert_eq!(load_checkpoint::<f32>(&bytes[..6]), Err(CheckpointError::ChecksumMismatch));

        let mut flipped = bytes.clone();
        flipped[4] ^= 0xFF;
        assert_eq!(load_checkpoint::<f32>(&flipped), Err(CheckpointError::VersionMismatch { found: VERSION ^ 0xFF }));

        let mut bit = bytes.clone();
        let mid = bit.len() / 2;
        bit[mid] ^= 1;
        assert_eq!(load_checkpoint::<f32>(&bit), Err(CheckpointError::ChecksumMismatch));

        assert_eq!(load_checkpoint::<f32>(b"NOPE\x01"), Err(CheckpointError::BadMagic));
    }
}
