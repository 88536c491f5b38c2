//! Straightforward f64 re-implementation of the network, written from the
//! definitions with direct loops, used as an oracle by the integration tests.

#![allow(dead_code)]

pub mod suite;

use mgnet3d::engine::Tensor;
use mgnet3d::model::{MgNetConfig, MgNetParams};

#[derive(Debug, Clone, PartialEq)]
pub struct T64 {
    pub shape: Vec<usize>,
    pub d: Vec<f64>,
}

impl T64 {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            d: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_f32(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            d: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape[..] {
            [c, d, h, w] => (c, d, h, w),
            _ => panic!("expected rank 4, got {:?}", self.shape),
        }
    }
}

/// ReLU bookkeeping. A fresh tape records the sign of every ReLU input; a
/// frozen tape replays a recorded pattern, so the function is evaluated on
/// the linear branch active at the recorded point.
#[derive(Debug, Default)]
pub struct Tape {
    pub relu_signs: Vec<bool>,
    pub min_relu_margin: f64,
    frozen: Option<Vec<bool>>,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            relu_signs: Vec::new(),
            min_relu_margin: f64::INFINITY,
            frozen: None,
        }
    }

    pub fn frozen(signs: Vec<bool>) -> Self {
        Self {
            frozen: Some(signs),
            ..Self::new()
        }
    }
}

pub fn conv3d(x: &T64, k: &T64, stride: usize) -> T64 {
    let (ci, d, h, w) = x.dims4();
    let co = k.shape[0];
    assert_eq!(k.shape[1], ci);
    let ext = |n: usize| (n + 2 - 3) / stride + 1;
    let (od, oh, ow) = (ext(d), ext(h), ext(w));
    let mut y = T64::zeros(&[co, od, oh, ow]);
    for o in 0..co {
        for z in 0..od {
            for r in 0..oh {
                for c in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..ci {
                        for a in 0..3 {
                            for b in 0..3 {
                                for e in 0..3 {
                                    let iz = (z * stride + a) as isize - 1;
                                    let ir = (r * stride + b) as isize - 1;
                                    let ic = (c * stride + e) as isize - 1;
                                    if iz < 0
                                        || ir < 0
                                        || ic < 0
                                        || iz >= d as isize
                                        || ir >= h as isize
                                        || ic >= w as isize
                                    {
                                        continue;
                                    }
                                    let xv = x.d[((i * d + iz as usize) * h + ir as usize) * w
                                        + ic as usize];
                                    let kv = k.d[(((o * ci + i) * 3 + a) * 3 + b) * 3 + e];
                                    acc += xv * kv;
                                }
                            }
                        }
                    }
                    y.d[((o * od + z) * oh + r) * ow + c] = acc;
                }
            }
        }
    }
    y
}

pub fn relu(x: &T64, tape: &mut Tape) -> T64 {
    let d =
        x.d.iter()
            .map(|&v| {
                let on = match &tape.frozen {
                    Some(signs) => signs[tape.relu_signs.len()],
                    None => v > 0.0,
                };
                tape.relu_signs.push(on);
                // Exact zeros are structural (e.g. relu of relu) and agree in
                // every precision.
                if v != 0.0 {
                    tape.min_relu_margin = tape.min_relu_margin.min(v.abs());
                }
                if on {
                    v
                } else {
                    0.0
                }
            })
            .collect();
    T64 {
        shape: x.shape.clone(),
        d,
    }
}

pub fn zip(a: &T64, b: &T64, f: impl Fn(f64, f64) -> f64) -> T64 {
    assert_eq!(a.shape, b.shape);
    T64 {
        shape: a.shape.clone(),
        d: a.d.iter().zip(&b.d).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// 3×3×3 mean over the in-bounds neighbours of every voxel.
pub fn avg_pool(x: &T64) -> T64 {
    let (c, d, h, w) = x.dims4();
    let mut y = T64::zeros(&x.shape);
    for ch in 0..c {
        for z in 0..d as isize {
            for r in 0..h as isize {
                for q in 0..w as isize {
                    let (mut s, mut n) = (0.0, 0.0);
                    for a in -1..=1isize {
                        for b in -1..=1isize {
                            for e in -1..=1isize {
                                let (iz, ir, iq) = (z + a, r + b, q + e);
                                if iz < 0
                                    || ir < 0
                                    || iq < 0
                                    || iz >= d as isize
                                    || ir >= h as isize
                                    || iq >= w as isize
                                {
                                    continue;
                                }
                                s += x.d
                                    [((ch * d + iz as usize) * h + ir as usize) * w + iq as usize];
                                n += 1.0;
                            }
                        }
                    }
                    y.d[((ch * d + z as usize) * h + r as usize) * w + q as usize] = s / n;
                }
            }
        }
    }
    y
}

pub fn global_avg_pool(x: &T64) -> T64 {
    let (c, d, h, w) = x.dims4();
    let n = d * h * w;
    T64 {
        shape: vec![c],
        d: (0..c)
            .map(|ch| x.d[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64)
            .collect(),
    }
}

pub fn channel_norm(x: &T64, eps: f64) -> T64 {
    let (c, d, h, w) = x.dims4();
    let n = d * h * w;
    let mut y = x.clone();
    for ch in 0..c {
        let s = &x.d[ch * n..(ch + 1) * n];
        let mean = s.iter().sum::<f64>() / n as f64;
        let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        for (o, v) in y.d[ch * n..(ch + 1) * n].iter_mut().zip(s) {
            *o = (v - mean) / (var + eps).sqrt();
        }
    }
    y
}

pub fn linear(x: &T64, w: &T64, b: &T64) -> T64 {
    let (k, c) = (w.shape[0], w.shape[1]);
    T64 {
        shape: vec![k],
        d: (0..k)
            .map(|r| (0..c).map(|i| w.d[r * c + i] * x.d[i]).sum::<f64>() + b.d[r])
            .collect(),
    }
}

pub fn cross_entropy(z: &[f64], label: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[label]
}

pub const NORM_EPS: f64 = 1e-5;

/// Parameters in layout order, as f64.
pub fn params64(p: &MgNetParams) -> Vec<T64> {
    p.tensors().into_iter().map(T64::from_f32).collect()
}

fn act(x: &T64, norm: bool, tape: &mut Tape) -> T64 {
    if norm {
        relu(&channel_norm(x, NORM_EPS), tape)
    } else {
        relu(x, tape)
    }
}

/// Logits of the multigrid network, reading parameters in layout order.
pub fn mgnet_logits(cfg: &MgNetConfig, p: &[T64], x: &T64, tape: &mut Tape) -> Vec<f64> {
    let mut it = p.iter();
    let mut next = || it.next().expect("too few parameters");
    let f_in = next().clone();
    let mut levels = Vec::new();
    for l in 0..cfg.num_grids {
        let a = next().clone();
        let nb = if cfg.share_smoother {
            1
        } else {
            cfg.smoothing_iters[l]
        };
        let bs: Vec<T64> = (0..nb).map(|_| next().clone()).collect();
        let transfer = (l + 1 < cfg.num_grids).then(|| (next().clone(), next().clone()));
        levels.push((a, bs, transfer));
    }
    let head_w = next().clone();
    let head_b = next().clone();

    let norm = cfg.channel_norm;
    let mut f = act(&conv3d(x, &f_in, 1), norm, tape);
    let (_, d, h, w) = x.dims4();
    let mut u = T64::zeros(&[cfg.feature_channels, d, h, w]);
    for l in 0..cfg.num_grids {
        let (a, bs, transfer) = &levels[l];
        for i in 0..cfg.smoothing_iters[l] {
            let b = &bs[i.min(bs.len() - 1)];
            let r = act(&zip(&f, &conv3d(&u, a, 1), |p, q| p - q), norm, tape);
            let c = act(&conv3d(&r, b, 1), norm, tape);
            u = zip(&u, &c, |p, q| p + q);
        }
        if let Some((pi, rk)) = transfer {
            let a_next = &levels[l + 1].0;
            let u_next = conv3d(&u, pi, 2);
            let resid = zip(&f, &conv3d(&u, a, 1), |p, q| p - q);
            f = zip(
                &conv3d(&resid, rk, 2),
                &conv3d(&u_next, a_next, 1),
                |p, q| p + q,
            );
            u = if cfg.use_avg_pool {
                avg_pool(&u_next)
            } else {
                u_next
            };
        }
    }
    linear(&global_avg_pool(&u), &head_w, &head_b).d
}

/// Mean cross-entropy over a batch.
pub fn mgnet_loss(cfg: &MgNetConfig, p: &[T64], batch: &[(T64, usize)], tape: &mut Tape) -> f64 {
    batch
        .iter()
        .map(|(x, y)| cross_entropy(&mgnet_logits(cfg, p, x, tape), *y))
        .sum::<f64>()
        / batch.len() as f64
}

/// Outcome of comparing one analytic gradient tensor against central
/// differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// `max |analytic - numeric| / max |numeric|` over the tensor.
    pub rel_err: f64,
    /// Smallest nonzero |ReLU input| at the evaluation point.
    pub relu_margin: f64,
}

pub const FD_STEP: f64 = 1e-3;

/// Central-difference check of `analytic`, the gradient of `loss` with
/// respect to `inputs[which]`. Perturbed evaluations keep the ReLU pattern
/// of the unperturbed point.
pub fn check_grad(
    inputs: &[T64],
    which: usize,
    analytic: &[f32],
    loss: impl Fn(&[T64], &mut Tape) -> f64,
) -> GradCheck {
    assert_eq!(analytic.len(), inputs[which].d.len());
    let mut base = Tape::new();
    loss(inputs, &mut base);
    let mut work = inputs.to_vec();
    let (mut max_diff, mut max_num) = (0.0f64, 0.0f64);
    for (i, &a) in analytic.iter().enumerate() {
        let orig = work[which].d[i];
        work[which].d[i] = orig + FD_STEP;
        let lp = loss(&work, &mut Tape::frozen(base.relu_signs.clone()));
        work[which].d[i] = orig - FD_STEP;
        let lm = loss(&work, &mut Tape::frozen(base.relu_signs.clone()));
        work[which].d[i] = orig;
        let numeric = (lp - lm) / (2.0 * FD_STEP);
        max_diff = max_diff.max((a as f64 - numeric).abs());
        max_num = max_num.max(numeric.abs());
    }
    GradCheck {
        rel_err: if max_num > 0.0 {
            max_diff / max_num
        } else {
            max_diff
        },
        relu_margin: base.min_relu_margin,
    }
}

/// Deterministic pseudo-random tensor in `[-scale, scale]`.
pub fn pseudo_random(shape: &[usize], seed: u64, scale: f32) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..=scale))
}
