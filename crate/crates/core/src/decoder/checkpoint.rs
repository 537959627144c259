//! Versioned binary checkpoint.
//!
//! ```text
//! "ESCK" | u32 version | u32 header_len | header JSON {config, state}
//! u32 blob_count | blobs: u32 name_len, name, u32 rank, rank×u32 dims, f32 LE data
//! ```
//! Optimizer moments travel as blobs named `adam.m.<param>` / `adam.v.<param>`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DecoderConfig, DecoderError, DecoderParams};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ESCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where training stopped.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer updates applied.
    pub step: u64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: DecoderConfig,
    pub state: TrainState,
    pub params: DecoderParams<f32>,
    /// First and second moments, aligned with `params`.
    pub moments: Option<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: DecoderConfig,
    state: TrainState,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_blob(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, t.rank() as u32);
    for &d in t.shape() {
        put_u32(buf, d as u32);
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<(), DecoderError> {
    let header = serde_json::to_vec(&Header {
        config: ck.config.clone(),
        state: ck.state.clone(),
    })
    .map_err(|e| DecoderError::Checkpoint(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    put_u32(&mut buf, header.len() as u32);
    buf.extend_from_slice(&header);
    let moments = ck.moments.as_ref().map_or(0, |(m, _)| m.len());
    put_u32(&mut buf, (ck.params.len() + 2 * moments) as u32);
    for (name, t) in ck.params.iter() {
        put_blob(&mut buf, name, t);
    }
    if let Some((m, v)) = &ck.moments {
        for (name, t) in ck.params.names().iter().zip(m) {
            put_blob(&mut buf, &format!("adam.m.{name}"), t);
        }
        for (name, t) in ck.params.names().iter().zip(v) {
            put_blob(&mut buf, &format!("adam.v.{name}"), t);
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecoderError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| DecoderError::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DecoderError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Loads a checkpoint; with `expected`, a differing config is an error.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&DecoderConfig>) -> Result<Checkpoint, DecoderError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(DecoderError::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(DecoderError::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = cur.u32()? as usize;
    let header: Header =
        serde_json::from_slice(cur.take(hlen)?).map_err(|e| DecoderError::Checkpoint(e.to_string()))?;
    if let Some(exp) = expected {
        if *exp != header.config {
            return Err(DecoderError::Checkpoint(format!(
                "config mismatch: checkpoint has {:?}, expected {:?}",
                header.config, exp
            )));
        }
    }
    let count = cur.u32()? as usize;
    let mut params = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for _ in 0..count {
        let nlen = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(nlen)?.to_vec())
            .map_err(|e| DecoderError::Checkpoint(e.to_string()))?;
        let rank = cur.u32()? as usize;
        let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data = cur
            .take(n * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data)?;
        if let Some(rest) = name.strip_prefix("adam.m.") {
            m.push((rest.to_string(), t));
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            v.push((rest.to_string(), t));
        } else {
            params.push((name, t));
        }
    }
    if cur.pos != bytes.len() {
        return Err(DecoderError::Checkpoint("trailing bytes".into()));
    }
    let params = DecoderParams::from_named(params);
    params.check(&header.config)?;
    let moments = if m.is_empty() && v.is_empty() {
        None
    } else {
        let aligned = |xs: Vec<(String, Tensor<f32>)>| -> Result<Vec<Tensor<f32>>, DecoderError> {
            if xs.len() != params.len() || xs.iter().zip(params.names()).any(|((a, _), b)| a != b) {
                return Err(DecoderError::Checkpoint("optimizer moments do not match parameters".into()));
            }
            Ok(xs.into_iter().map(|(_, t)| t).collect())
        };
        Some((aligned(m)?, aligned(v)?))
    };
    Ok(Checkpoint {
        config: header.config,
        state: header.state,
        params,
        moments,
    })
}
