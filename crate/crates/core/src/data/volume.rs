//! `VOL3` volume files and intensity normalisation.
//!
//! ```text
//! "VOL3" | version u32 (= 1) | channels u32 | D u32 | H u32 | W u32 | f32 × C·D·H·W
//! ```
//! All fields little-endian, payload row-major.

use std::fs;
use std::path::Path;

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::model::checkpoint::{put_u32, Reader};

pub const MAGIC: &[u8; 4] = b"VOL3";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

/// `[channels, D, H, W]` of a volume.
pub type Geometry = [usize; 4];

pub fn encode_volume(volume: &Tensor) -> Result<Vec<u8>> {
    if volume.rank() != 4 {
        return Err(Error::Shape(format!(
            "volumes must be [C, D, H, W], got {:?}",
            volume.shape()
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * volume.numel());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    for &d in volume.shape() {
        put_u32(&mut out, d as u32);
    }
    for v in volume.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn read_header(r: &mut Reader) -> Result<Geometry> {
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a VOL3 volume (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported VOL3 version {version}")));
    }
    let mut geom = [0usize; 4];
    for g in geom.iter_mut() {
        *g = r.u32()? as usize;
        if *g == 0 {
            return Err(Error::Format("volume extents must be positive".into()));
        }
    }
    Ok(geom)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    let geom = read_header(&mut r)?;
    let n = geom
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format("volume extents overflow".into()))?;
    let data = r.f32s(n)?;
    r.finish()?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("volume contains non-finite values".into()));
    }
    Tensor::new(&geom, data)
}

pub fn save_volume(volume: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_volume(volume)?)?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode_volume(&fs::read(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Reads only the header of a volume file.
pub fn read_geometry(path: impl AsRef<Path>) -> Result<Geometry> {
    use std::io::Read;
    let mut head = [0u8; HEADER_LEN];
    let path = path.as_ref();
    fs::File::open(path)?
        .read_exact(&mut head)
        .map_err(|_| Error::Format(format!("{}: truncated VOL3 header", path.display())))?;
    read_header(&mut Reader::new(&head))
}

/// Whole-volume z-score: `(x - mean) / std` over every voxel.
pub fn normalize(volume: &Tensor) -> Result<Tensor> {
    let n = volume.numel() as f64;
    let mean = volume.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = volume
        .data()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    if var <= 0.0 || volume.data().iter().all(|&v| v == volume.data()[0]) {
        return Err(Error::Data("cannot normalise a constant volume".into()));
    }
    let std = var.sqrt();
    Ok(Tensor::from_fn(volume.shape(), |i| {
        ((volume.data()[i] as f64 - mean) / std) as f32
    }))
}
