//! 3×3×3 convolution with zero padding 1 and stride 1 or 2.
//!
//! Both passes lower the convolution to matrix products over fixed-size
//! blocks of output voxels (im2col). Block boundaries never depend on the
//! thread count and partial sums are reduced in block order, so results are
//! bitwise identical at any level of parallelism.

use rayon::prelude::*;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const KERNEL: usize = 3;
pub const PADDING: usize = 1;
const TAPS: usize = KERNEL * KERNEL * KERNEL;

/// Output voxels per im2col block.
const BLOCK: usize = 512;
/// Blocks whose input-gradient columns are materialised at once.
const SCATTER_WINDOW: usize = 32;

/// Extent of one spatial axis after a padded 3-tap convolution.
pub fn output_extent(n: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Argument("stride must be positive".into()));
    }
    let padded = n as i64 + 2 * PADDING as i64 - KERNEL as i64;
    if padded < 0 {
        return Err(Error::Shape(format!(
            "axis of extent {n} is too small for a {KERNEL}-tap kernel"
        )));
    }
    let out = padded / stride as i64 + 1;
    if out < 1 {
        return Err(Error::Shape(format!(
            "non-positive output extent for axis {n}"
        )));
    }
    Ok(out as usize)
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c_in: usize,
    c_out: usize,
    input: [usize; 3],
    output: [usize; 3],
    stride: usize,
}

impl Geometry {
    fn new(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(Error::Argument(format!(
                "stride must be 1 or 2, got {stride}"
            )));
        }
        let [c_in, d, h, w] = match input.shape() {
            &[c, d, h, w] => [c, d, h, w],
            s => {
                return Err(Error::Shape(format!(
                    "conv3d input must be [C, D, H, W], got {s:?}"
                )))
            }
        };
        let c_out = match kernel.shape() {
            &[co, ci, KERNEL, KERNEL, KERNEL] if ci == c_in => co,
            &[_, ci, KERNEL, KERNEL, KERNEL] => {
                return Err(Error::Shape(format!(
                    "kernel expects {ci} input channels but input has {c_in}"
                )))
            }
            s => {
                return Err(Error::Shape(format!(
                    "conv3d kernel must be [C_out, C_in, 3, 3, 3], got {s:?}"
                )))
            }
        };
        Ok(Self {
            c_in,
            c_out,
            input: [d, h, w],
            output: [
                output_extent(d, stride)?,
                output_extent(h, stride)?,
                output_extent(w, stride)?,
            ],
            stride,
        })
    }

    fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    fn taps(&self) -> usize {
        self.c_in * TAPS
    }

    fn blocks(&self) -> impl IndexedParallelIterator<Item = (usize, usize)> {
        let n = self.out_voxels();
        (0..n.div_ceil(BLOCK))
            .into_par_iter()
            .map(move |b| (b * BLOCK, ((b + 1) * BLOCK).min(n)))
    }

    /// Output positions `lo..hi` along an axis of extent `n` whose tap
    /// `tap` lands inside the input, clamped to `lo..hi`.
    #[inline]
    fn valid_run(&self, lo: usize, hi: usize, n: usize, tap: usize) -> (usize, usize) {
        let s = self.stride;
        let first = if tap < PADDING {
            (PADDING - tap).div_ceil(s)
        } else {
            0
        };
        let last = match (n + PADDING).checked_sub(tap + 1) {
            Some(span) => span / s + 1,
            None => 0,
        };
        let a = first.max(lo).min(hi);
        (a, last.min(hi).max(a))
    }

    /// Calls `visit(row, col_lo, col_hi, src)` for every run of in-bounds
    /// taps among output voxels `start..end`: row `ci * 27 + tap`, block
    /// columns `col_lo..col_hi`, and `src` the input index of the first one
    /// (successive columns step by `stride`). Columns not visited fall in the
    /// zero padding.
    fn for_each_run(
        &self,
        start: usize,
        end: usize,
        mut visit: impl FnMut(usize, usize, usize, usize),
    ) {
        let [_, oh, ow] = self.output;
        let [d, h, w] = self.input;
        let s = self.stride;
        let first_line = start / ow;
        let last_line = (end - 1) / ow;
        for line in first_line..=last_line {
            let (zd, zh) = (line / oh, line % oh);
            let lo = if line == first_line { start % ow } else { 0 };
            let hi = if line == last_line {
                (end - 1) % ow + 1
            } else {
                ow
            };
            let line_start = line * ow;
            for kd in 0..KERNEL {
                let id = (zd * s + kd) as isize - PADDING as isize;
                if id < 0 || id as usize >= d {
                    continue;
                }
                for kh in 0..KERNEL {
                    let ih = (zh * s + kh) as isize - PADDING as isize;
                    if ih < 0 || ih as usize >= h {
                        continue;
                    }
                    for kw in 0..KERNEL {
                        let (a, b) = self.valid_run(lo, hi, w, kw);
                        if a == b {
                            continue;
                        }
                        let tap = (kd * KERNEL + kh) * KERNEL + kw;
                        let iw = a * s + kw - PADDING;
                        let base = (id as usize * h + ih as usize) * w + iw;
                        for ci in 0..self.c_in {
                            visit(
                                ci * TAPS + tap,
                                line_start + a - start,
                                line_start + b - start,
                                ci * self.in_voxels() + base,
                            );
                        }
                    }
                }
            }
        }
    }

    /// Writes the receptive fields of output voxels `start..end` into `cols`,
    /// element `(row, col)` at `row * rs + col * cs`. `cols` must be zeroed.
    fn im2col(
        &self,
        input: &[f32],
        start: usize,
        end: usize,
        cols: &mut [f32],
        (rs, cs): (usize, usize),
    ) {
        let s = self.stride;
        self.for_each_run(start, end, |row, a, b, src| {
            if cs == 1 && s == 1 {
                let dst = row * rs + a;
                cols[dst..dst + b - a].copy_from_slice(&input[src..src + b - a]);
            } else {
                for (j, col) in (a..b).enumerate() {
                    cols[row * rs + col * cs] = input[src + j * s];
                }
            }
        });
    }

    /// Adds `[taps, len]` column gradients of output voxels `start..end`
    /// back onto the input gradient.
    fn col2im(&self, cols: &[f32], start: usize, end: usize, grad_in: &mut [f32]) {
        let len = end - start;
        let s = self.stride;
        self.for_each_run(start, end, |row, a, b, src| {
            let from = &cols[row * len + a..row * len + b];
            for (j, v) in from.iter().enumerate() {
                grad_in[src + j * s] += v;
            }
        });
    }
}

/// `c = a · b + beta · c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Forward convolution: `[C_in, D, H, W] * [C_out, C_in, 3, 3, 3] -> [C_out, D', H', W']`.
pub fn conv3d(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    let g = Geometry::new(input, kernel, stride)?;
    let n = g.out_voxels();
    let taps = g.taps();
    let x = input.data();
    let w = kernel.data();

    let blocks: Vec<(usize, Vec<f32>)> = g
        .blocks()
        .map(|(start, end)| {
            let len = end - start;
            let mut cols = vec![0.0f32; taps * len];
            g.im2col(x, start, end, &mut cols, (len, 1));
            let mut out = vec![0.0f32; g.c_out * len];
            // out[c_out, len] = W[c_out, taps] · cols[taps, len]
            gemm(
                g.c_out,
                taps,
                len,
                w,
                (taps, 1),
                &cols,
                (len, 1),
                &mut out,
                (len, 1),
            );
            (start, out)
        })
        .collect();

    let mut data = vec![0.0f32; g.c_out * n];
    for (start, out) in blocks {
        let len = out.len() / g.c_out;
        for co in 0..g.c_out {
            data[co * n + start..co * n + start + len]
                .copy_from_slice(&out[co * len..(co + 1) * len]);
        }
    }
    let [od, oh, ow] = g.output;
    Tensor::new(&[g.c_out, od, oh, ow], data)
}

/// Input and kernel gradients; either may be skipped.
pub type ConvGrads = (Option<Vec<f32>>, Option<Vec<f32>>);

/// Adjoints of [`conv3d`] with respect to the input and the kernel.
pub fn conv3d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    grad_out: &[f32],
    need_input: bool,
    need_kernel: bool,
) -> Result<ConvGrads> {
    let g = Geometry::new(input, kernel, stride)?;
    let n = g.out_voxels();
    if grad_out.len() != g.c_out * n {
        return Err(Error::Shape(
            "conv3d output gradient has the wrong length".into(),
        ));
    }
    let taps = g.taps();
    let x = input.data();
    let w = kernel.data();

    let grad_kernel = need_kernel.then(|| {
        let partials: Vec<Vec<f32>> = g
            .blocks()
            .map(|(start, end)| {
                let len = end - start;
                let mut cols = vec![0.0f32; len * taps];
                g.im2col(x, start, end, &mut cols, (1, taps));
                let mut part = vec![0.0f32; g.c_out * taps];
                // dW[c_out, taps] = G[c_out, len] · cols[len, taps]
                gemm(
                    g.c_out,
                    len,
                    taps,
                    &grad_out[start..],
                    (n, 1),
                    &cols,
                    (taps, 1),
                    &mut part,
                    (taps, 1),
                );
                part
            })
            .collect();
        let mut total = vec![0.0f32; g.c_out * taps];
        for part in partials {
            for (t, p) in total.iter_mut().zip(part) {
                *t += p;
            }
        }
        total
    });

    let grad_input = if need_input && stride == 1 {
        // Stride 1 input adjoint is a convolution with the flipped, transposed kernel.
        let flipped = Tensor::from_fn(&[g.c_in, g.c_out, KERNEL, KERNEL, KERNEL], |i| {
            let (ci, rest) = (i / (g.c_out * TAPS), i % (g.c_out * TAPS));
            let (co, t) = (rest / TAPS, rest % TAPS);
            w[(co * g.c_in + ci) * TAPS + TAPS - 1 - t]
        });
        let [od, oh, ow] = g.output;
        let grad = Tensor::new(&[g.c_out, od, oh, ow], grad_out.to_vec())?;
        Some(conv3d(&grad, &flipped, 1)?.into_data())
    } else {
        need_input.then(|| strided_input_grad(&g, w, grad_out))
    };

    Ok((grad_input, grad_kernel))
}

/// Input adjoint by scattering column gradients, used for stride 2.
fn strided_input_grad(g: &Geometry, w: &[f32], grad_out: &[f32]) -> Vec<f32> {
    let n = g.out_voxels();
    let taps = g.taps();
    let mut grad_in = vec![0.0f32; g.c_in * g.in_voxels()];
    let n_blocks = n.div_ceil(BLOCK);
    for window in (0..n_blocks).step_by(SCATTER_WINDOW) {
        let hi = (window + SCATTER_WINDOW).min(n_blocks);
        let cols: Vec<(usize, usize, Vec<f32>)> = (window..hi)
            .into_par_iter()
            .map(|b| {
                let (start, end) = (b * BLOCK, ((b + 1) * BLOCK).min(n));
                let len = end - start;
                let mut dcols = vec![0.0f32; taps * len];
                // dcols[taps, len] = W^T[taps, c_out] · G[c_out, len]
                gemm(
                    taps,
                    g.c_out,
                    len,
                    w,
                    (1, taps),
                    &grad_out[start..],
                    (n, 1),
                    &mut dcols,
                    (len, 1),
                );
                (start, end, dcols)
            })
            .collect();
        for (start, end, dcols) in cols {
            g.col2im(&dcols, start, end, &mut grad_in);
        }
    }
    grad_in
}
