//! `MGN3` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MGN3"                      4 bytes
//! version                     u32 (= 1)
//! num_grids J                 u32
//! smoothing_iters             u32 × J
//! feature_channels            u32
//! data_channels               u32
//! input_channels              u32
//! num_classes                 u32
//! use_avg_pool                u8
//! share_smoother              u8
//! channel_norm                u8
//! seed                        u64
//! tensor count                u32
//! per tensor: rank u32, extents u32 × rank, f32 × numel
//! ```
//!
//! Tensors follow [`MgNetConfig::layout`] order: `f_in`; per level `A`,
//! `B…`, `Pi`, `R`; then `head.W`, `head.b`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::config::MgNetConfig;
use super::params::MgNetParams;
use crate::engine::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MGN3";
pub const VERSION: u32 = 1;

pub fn encode(params: &MgNetParams) -> Vec<u8> {
    let c = &params.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, c.num_grids as u32);
    for &n in &c.smoothing_iters {
        put_u32(&mut out, n as u32);
    }
    for v in [
        c.feature_channels,
        c.data_channels,
        c.input_channels,
        c.num_classes,
    ] {
        put_u32(&mut out, v as u32);
    }
    out.extend([
        c.use_avg_pool as u8,
        c.share_smoother as u8,
        c.channel_norm as u8,
    ]);
    out.extend_from_slice(&c.seed.to_le_bytes());
    let tensors = params.tensors();
    put_u32(&mut out, tensors.len() as u32);
    for t in tensors {
        write_tensor(&mut out, t);
    }
    out
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn write_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Little-endian cursor that reports truncation as a format error.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated file: needed {n} bytes at offset {}",
                    self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("payload too large".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn flag(r: &mut Reader) -> Result<bool> {
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(Error::Format(format!("invalid boolean byte {v}"))),
    }
}

pub fn decode(bytes: &[u8]) -> Result<MgNetParams> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not an MGN3 checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let num_grids = r.u32()? as usize;
    if num_grids > 64 {
        return Err(Error::Format(format!("implausible grid count {num_grids}")));
    }
    let smoothing_iters = (0..num_grids)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<_>>()?;
    let feature_channels = r.u32()? as usize;
    let data_channels = r.u32()? as usize;
    let input_channels = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let config = MgNetConfig {
        num_grids,
        smoothing_iters,
        feature_channels,
        data_channels,
        input_channels,
        num_classes,
        use_avg_pool: flag(&mut r)?,
        share_smoother: flag(&mut r)?,
        channel_norm: flag(&mut r)?,
        seed: r.u64()?,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("embedded config is invalid: {e}")))?;

    let count = r.u32()? as usize;
    let layout = config.layout();
    if count != layout.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, config implies {}",
            layout.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (role, expected) in &layout {
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        if &shape != expected {
            return Err(Error::Format(format!(
                "{} has shape {shape:?}, config implies {expected:?}",
                role.name()
            )));
        }
        let data = r.f32s(shape.iter().product())?;
        tensors.push(Tensor::new(&shape, data)?);
    }
    r.finish()?;
    MgNetParams::from_tensors(config, tensors)
}

pub fn save_checkpoint(params: &MgNetParams, path: impl AsRef<Path>) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&encode(params))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MgNetParams> {
    decode(&fs::read(path)?)
}
