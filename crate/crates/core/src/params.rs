//! Flat parameter storage with a named block registry, plus the binary
//! checkpoint format shared by every model.

use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::numkit::{axpy, dot, norm, scale, SeededRng};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Canonical ordering of parameter blocks. Blocks partition `0..len`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Layout {
    blocks: Vec<Block>,
    len: usize,
}

impl Layout {
    pub fn new() -> Self {
        Layout::default()
    }

    /// Appends a `rows x cols` block and returns its offset.
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> usize {
        let name = name.into();
        assert!(
            self.block(&name).is_none(),
            "duplicate parameter block `{name}`"
        );
        let offset = self.len;
        self.blocks.push(Block {
            name,
            offset,
            rows,
            cols,
        });
        self.len += rows * cols;
        offset
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Combined range of all blocks whose name starts with `prefix`.
    /// Panics unless those blocks are contiguous.
    pub fn prefix_range(&self, prefix: &str) -> Range<usize> {
        let hits: Vec<&Block> = self
            .blocks
            .iter()
            .filter(|b| b.name.starts_with(prefix))
            .collect();
        let start = hits.first().map_or(0, |b| b.offset);
        let end = hits.last().map_or(0, |b| b.offset + b.len());
        assert_eq!(
            hits.iter().map(|b| b.len()).sum::<usize>(),
            end - start,
            "blocks with prefix `{prefix}` are not contiguous"
        );
        start..end
    }
}

/// All parameters of one model as a single vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Arc<Layout>,
    data: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let data = vec![0.0; layout.len()];
        ParamVector { layout, data }
    }

    pub fn from_vec(layout: Arc<Layout>, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.len() {
            return Err(Error::invalid(format!(
                "parameter length {} does not match layout length {}",
                data.len(),
                layout.len()
            )));
        }
        Ok(ParamVector { layout, data })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn block(&self, name: &str) -> &[f64] {
        let b = self
            .layout
            .block(name)
            .unwrap_or_else(|| panic!("unknown parameter block `{name}`"));
        &self.data[b.range()]
    }

    pub fn block_mut(&mut self, name: &str) -> &mut [f64] {
        let r = self
            .layout
            .block(name)
            .unwrap_or_else(|| panic!("unknown parameter block `{name}`"))
            .range();
        &mut self.data[r]
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &ParamVector) {
        axpy(a, &other.data, &mut self.data);
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn scale(&mut self, a: f64) {
        scale(a, &mut self.data);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Fills every block uniformly in `[-init_scale, init_scale]`, except
    /// blocks whose name ends with `_b` (biases), which stay zero.
    pub fn randomize(&mut self, init_scale: f64, rng: &mut SeededRng) {
        let layout = Arc::clone(&self.layout);
        for b in layout.blocks() {
            let bias = b.name.ends_with("_b") || b.name.ends_with(".bias");
            for v in &mut self.data[b.range()] {
                *v = if bias {
                    0.0
                } else {
                    init_scale * (2.0 * rng.uniform() - 1.0)
                };
            }
        }
    }
}

const MAGIC: &[u8; 8] = b"SQGCKPT\0";
const FORMAT_VERSION: u32 = 1;

/// Architecture tag stored in checkpoint headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u32)]
pub enum Architecture {
    SeqRec = 1,
    DualView = 2,
}

/// Checkpoint = magic, version, architecture tag, JSON header (model config),
/// parameter count, then every parameter as a little-endian `f64`.
pub fn encode_checkpoint<H: Serialize>(
    arch: Architecture,
    header: &H,
    params: &ParamVector,
) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(32 + header.len() + params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(arch as u32).to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decoded checkpoint pieces; the caller rebuilds the layout from the header.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCheckpoint {
    pub arch: Architecture,
    pub header: serde_json::Value,
    pub params: Vec<f64>,
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn take_u32(bytes: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(
        take(bytes, 4)?.try_into().expect("4 bytes"),
    ))
}

pub fn decode_checkpoint(mut bytes: &[u8]) -> Result<RawCheckpoint> {
    if take(&mut bytes, 8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = take_u32(&mut bytes)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let arch = match take_u32(&mut bytes)? {
        1 => Architecture::SeqRec,
        2 => Architecture::DualView,
        other => return Err(Error::Format(format!("unknown architecture tag {other}"))),
    };
    let header_len = take_u32(&mut bytes)? as usize;
    let header = serde_json::from_slice(take(&mut bytes, header_len)?)?;
    let count = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().expect("8 bytes")) as usize;
    if bytes.len() != count * 8 {
        return Err(Error::Format(format!(
            "checkpoint declares {count} parameters but carries {} bytes",
            bytes.len()
        )));
    }
    let params = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(RawCheckpoint {
        arch,
        header,
        params,
    })
}

pub fn write_checkpoint<H: Serialize>(
    path: &Path,
    arch: Architecture,
    header: &H,
    params: &ParamVector,
) -> Result<()> {
    fsio::write_atomic(path, &encode_checkpoint(arch, header, params)?)
}

pub fn read_checkpoint(path: &Path) -> Result<RawCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
