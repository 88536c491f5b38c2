//! Synthetic two-class volume datasets.
//!
//! Every subject gets a smooth random base volume. Positive subjects have a
//! fixed central sphere darkened by `effect_size`, and each scan adds
//! independent Gaussian noise on top of its subject's base.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use super::manifest::{Manifest, VolumeRecord};
use super::volume::{save_volume, Geometry};
use crate::engine::{avg_pool3d, Tensor};
use crate::error::{Error, Result};

/// Mean intensity of the base volumes.
pub const BASE_MEAN: f32 = 1.0;
/// Standard deviation of the smooth base field.
pub const BASE_STD: f32 = 0.25;
const SMOOTHING_PASSES: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub subjects_per_class: usize,
    pub scans_per_subject: usize,
    pub geometry: Geometry,
    pub effect_size: f32,
    pub noise_std: f32,
    pub seed: u64,
}

impl SynthConfig {
    pub fn cube(subjects_per_class: usize, scans_per_subject: usize, size: usize) -> Self {
        Self {
            subjects_per_class,
            scans_per_subject,
            geometry: [1, size, size, size],
            effect_size: 1.0,
            noise_std: 0.1,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.subjects_per_class == 0 || self.scans_per_subject == 0 {
            return Err(Error::Argument(
                "subject and scan counts must be positive".into(),
            ));
        }
        if self.geometry.contains(&0) {
            return Err(Error::Argument(format!(
                "geometry extents must be positive, got {:?}",
                self.geometry
            )));
        }
        if !(self.effect_size.is_finite() && self.effect_size >= 0.0) {
            return Err(Error::Argument(
                "effect_size must be finite and non-negative".into(),
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Argument(
                "noise_std must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Voxels of the central sphere (radius a quarter of the smallest extent),
/// repeated for every channel.
pub fn sphere_mask(geometry: Geometry) -> Vec<bool> {
    let [c, d, h, w] = geometry;
    let radius = (d.min(h).min(w) as f32 / 4.0).max(1.0);
    let centre = |n: usize| (n as f32 - 1.0) / 2.0;
    let (cd, ch, cw) = (centre(d), centre(h), centre(w));
    let mut mask = Vec::with_capacity(c * d * h * w);
    for _ in 0..c {
        for i in 0..d {
            for j in 0..h {
                for k in 0..w {
                    let r2 =
                        (i as f32 - cd).powi(2) + (j as f32 - ch).powi(2) + (k as f32 - cw).powi(2);
                    mask.push(r2 <= radius * radius);
                }
            }
        }
    }
    mask
}

fn subject_rng(seed: u64, subject: usize, scan: Option<usize>) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stream = ((subject as u64) << 32) | scan.map_or(0, |s| s as u64 + 1);
    rng.set_stream(stream);
    rng
}

fn base_volume(cfg: &SynthConfig, subject: usize) -> Result<Tensor> {
    let mut rng = subject_rng(cfg.seed, subject, None);
    let mut field = Tensor::from_fn(&cfg.geometry, |_| StandardNormal.sample(&mut rng));
    for _ in 0..SMOOTHING_PASSES {
        field = avg_pool3d(&field)?;
    }
    let n = field.numel() as f64;
    let mean = field.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let std = (field
        .data()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let scale = if std > 0.0 {
        BASE_STD as f64 / std
    } else {
        0.0
    };
    Ok(Tensor::from_fn(&cfg.geometry, |i| {
        BASE_MEAN + ((field.data()[i] as f64 - mean) * scale) as f32
    }))
}

/// Generates one scan in memory.
pub fn synth_scan(
    cfg: &SynthConfig,
    subject: usize,
    label: u8,
    scan: usize,
    mask: &[bool],
) -> Result<Tensor> {
    let mut vol = base_volume(cfg, subject)?;
    if label == 1 {
        for (v, &inside) in vol.data_mut().iter_mut().zip(mask) {
            if inside {
                *v -= cfg.effect_size;
            }
        }
    }
    if cfg.noise_std > 0.0 {
        let noise =
            Normal::new(0.0f32, cfg.noise_std).map_err(|e| Error::Argument(e.to_string()))?;
        let mut rng = subject_rng(cfg.seed, subject, Some(scan));
        for v in vol.data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    Ok(vol)
}

/// Writes `volumes/*.vol3` and `manifest.csv` under `out_dir` and returns the
/// manifest (with paths joined to `out_dir`). Subjects `sub-000…` are the
/// negative class, followed by the positive class.
pub fn synth_generate(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let vol_dir = out_dir.join("volumes");
    fs::create_dir_all(&vol_dir)?;
    let mask = sphere_mask(cfg.geometry);

    let jobs: Vec<(usize, u8, usize)> = (0..2 * cfg.subjects_per_class)
        .flat_map(|s| {
            let label = (s >= cfg.subjects_per_class) as u8;
            (0..cfg.scans_per_subject).map(move |scan| (s, label, scan))
        })
        .collect();

    let records = jobs
        .par_iter()
        .map(|&(subject, label, scan)| {
            let subject_id = format!("sub-{subject:03}");
            let path: PathBuf = vol_dir.join(format!("{subject_id}_scan-{scan}.vol3"));
            save_volume(&synth_scan(cfg, subject, label, scan, &mask)?, &path)?;
            Ok(VolumeRecord {
                subject_id,
                scan_id: format!("scan-{scan}"),
                label,
                volume_path: path,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = Manifest::new(records, cfg.geometry)?;
    manifest.save(out_dir.join("manifest.csv"), Some(out_dir))?;
    Ok(manifest)
}
