//! Pooling and per-channel normalisation over `[C, D, H, W]` feature maps.

use rayon::prelude::*;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Epsilon added to the variance in [`channel_norm`].
pub const NORM_EPS: f32 = 1e-5;

fn dims(x: &Tensor) -> Result<(usize, [usize; 3])> {
    match x.shape() {
        &[c, d, h, w] => Ok((c, [d, h, w])),
        s => Err(Error::Shape(format!(
            "expected a [C, D, H, W] tensor, got {s:?}"
        ))),
    }
}

/// Zero-padded 3-wide box sum along one axis of a `[D, H, W]` volume.
fn box_sum_axis(src: &[f32], dst: &mut [f32], [d, h, w]: [usize; 3], axis: usize) {
    let (len, step) = match axis {
        0 => (d, h * w),
        1 => (h, w),
        _ => (w, 1),
    };
    for (i, out) in dst.iter_mut().enumerate() {
        let pos = (i / step) % len;
        let mut acc = src[i];
        if pos > 0 {
            acc += src[i - step];
        }
        if pos + 1 < len {
            acc += src[i + step];
        }
        *out = acc;
    }
}

fn box_sum(x: &[f32], spatial: [usize; 3]) -> Vec<f32> {
    let mut a = vec![0.0f32; x.len()];
    let mut b = vec![0.0f32; x.len()];
    box_sum_axis(x, &mut a, spatial, 2);
    box_sum_axis(&a, &mut b, spatial, 1);
    box_sum_axis(&b, &mut a, spatial, 0);
    a
}

/// Number of in-bounds voxels in the 3×3×3 window centred on each voxel.
fn window_counts([d, h, w]: [usize; 3]) -> Vec<f32> {
    let axis = |pos: usize, len: usize| 1 + (pos > 0) as usize + (pos + 1 < len) as usize;
    let mut counts = Vec::with_capacity(d * h * w);
    for i in 0..d {
        for j in 0..h {
            for k in 0..w {
                counts.push((axis(i, d) * axis(j, h) * axis(k, w)) as f32);
            }
        }
    }
    counts
}

/// Shape-preserving 3×3×3 mean filter, stride 1. Border windows divide by
/// the number of in-bounds voxels, so constant maps are fixed points.
pub fn avg_pool3d(x: &Tensor) -> Result<Tensor> {
    let (c, spatial) = dims(x)?;
    let vox: usize = spatial.iter().product();
    let counts = window_counts(spatial);
    let mut out = vec![0.0f32; c * vox];
    out.par_chunks_mut(vox)
        .zip(x.data().par_chunks(vox))
        .for_each(|(o, xi)| {
            for ((dst, s), n) in o.iter_mut().zip(box_sum(xi, spatial)).zip(&counts) {
                *dst = s / n;
            }
        });
    Tensor::new(x.shape(), out)
}

pub fn avg_pool3d_backward(shape: &[usize], grad_out: &[f32]) -> Result<Vec<f32>> {
    let (_, spatial) = match shape {
        &[c, d, h, w] => (c, [d, h, w]),
        s => {
            return Err(Error::Shape(format!(
                "expected a [C, D, H, W] shape, got {s:?}"
            )))
        }
    };
    let vox: usize = spatial.iter().product();
    let counts = window_counts(spatial);
    let mut out = vec![0.0f32; grad_out.len()];
    out.par_chunks_mut(vox)
        .zip(grad_out.par_chunks(vox))
        .for_each(|(o, g)| {
            let scaled: Vec<f32> = g.iter().zip(&counts).map(|(g, n)| g / n).collect();
            o.copy_from_slice(&box_sum(&scaled, spatial));
        });
    Ok(out)
}

/// Per-channel mean over all spatial positions: `[C, D, H, W] -> [C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (c, spatial) = dims(x)?;
    let vox: usize = spatial.iter().product();
    let means = x
        .data()
        .chunks(vox)
        .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / vox as f64) as f32)
        .collect();
    Tensor::new(&[c], means)
}

pub fn global_avg_pool_backward(shape: &[usize], grad_out: &[f32]) -> Vec<f32> {
    let vox: usize = shape[1..].iter().product();
    grad_out
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / vox as f32, vox))
        .collect()
}

/// Normalises every channel to zero mean and unit variance over its spatial
/// positions (no affine parameters).
pub fn channel_norm(x: &Tensor) -> Result<Tensor> {
    let (_, spatial) = dims(x)?;
    let vox: usize = spatial.iter().product();
    let mut out = vec![0.0f32; x.numel()];
    out.par_chunks_mut(vox)
        .zip(x.data().par_chunks(vox))
        .for_each(|(o, xi)| {
            let (mean, inv_std) = moments(xi);
            for (dst, &v) in o.iter_mut().zip(xi) {
                *dst = ((v as f64 - mean) * inv_std) as f32;
            }
        });
    Tensor::new(x.shape(), out)
}

fn moments(xs: &[f32]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + NORM_EPS as f64).sqrt())
}

/// Adjoint of [`channel_norm`]; `output` is the normalised forward result.
pub fn channel_norm_backward(input: &Tensor, output: &[f32], grad_out: &[f32]) -> Result<Vec<f32>> {
    let (_, spatial) = dims(input)?;
    let vox: usize = spatial.iter().product();
    let mut grad = vec![0.0f32; input.numel()];
    grad.par_chunks_mut(vox)
        .zip(input.data().par_chunks(vox))
        .zip(output.par_chunks(vox).zip(grad_out.par_chunks(vox)))
        .for_each(|((dx, xi), (y, g))| {
            let (_, inv_std) = moments(xi);
            let n = vox as f64;
            let g_mean = g.iter().map(|&v| v as f64).sum::<f64>() / n;
            let gy_mean = g
                .iter()
                .zip(y)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>()
                / n;
            for ((dst, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                *dst = (inv_std * (gi as f64 - g_mean - yi as f64 * gy_mean)) as f32;
            }
        });
    Ok(grad)
}
