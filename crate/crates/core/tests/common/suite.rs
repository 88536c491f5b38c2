//! Gradient cases shared by the gradient tests and the acceptance run.
//! Each case returns one named check per differentiated tensor.

use super::*;
use mgnet3d::engine::conv::conv3d_backward;
use mgnet3d::engine::pool::{avg_pool3d_backward, channel_norm_backward, global_avg_pool_backward};
use mgnet3d::engine::{self as eng, Graph, Tensor};
use mgnet3d::model::{build, loss_and_grad, MgNetConfig};

pub type Checks = Vec<(String, GradCheck)>;

fn dot(a: &T64, r: &[f32]) -> f64 {
    a.d.iter().zip(r).map(|(x, &y)| x * y as f64).sum()
}

pub fn conv3d_cases() -> Checks {
    let mut out = Vec::new();
    for (stride, dims) in [(1, [2, 4, 5, 3]), (2, [3, 5, 6, 4]), (2, [1, 1, 2, 3])] {
        let x = pseudo_random(&dims, 1, 1.0);
        let k = pseudo_random(&[2, dims[0], 3, 3, 3], 2, 0.5);
        let y = eng::conv3d(&x, &k, stride).unwrap();
        let r = pseudo_random(y.shape(), 3, 1.0);
        let (gx, gk) = conv3d_backward(&x, &k, stride, r.data(), true, true).unwrap();
        let inputs = [T64::from_f32(&x), T64::from_f32(&k)];
        let loss = |p: &[T64], _: &mut Tape| dot(&conv3d(&p[0], &p[1], stride), r.data());
        out.push((
            format!("conv3d s{stride} {dims:?} input"),
            check_grad(&inputs, 0, &gx.unwrap(), loss),
        ));
        out.push((
            format!("conv3d s{stride} {dims:?} kernel"),
            check_grad(&inputs, 1, &gk.unwrap(), loss),
        ));
    }
    out
}

pub fn pool_cases() -> Checks {
    let x = pseudo_random(&[2, 4, 3, 5], 4, 1.0);
    let r = pseudo_random(x.shape(), 5, 1.0);
    let inputs = [T64::from_f32(&x)];
    let g = avg_pool3d_backward(x.shape(), r.data()).unwrap();
    let pool = check_grad(&inputs, 0, &g, |p, _| dot(&avg_pool(&p[0]), r.data()));
    let r2 = pseudo_random(&[2], 6, 1.0);
    let g = global_avg_pool_backward(x.shape(), r2.data());
    let global = check_grad(&inputs, 0, &g, |p, _| {
        dot(&global_avg_pool(&p[0]), r2.data())
    });
    vec![
        ("avg_pool3d".into(), pool),
        ("global_avg_pool".into(), global),
    ]
}

pub fn channel_norm_cases() -> Checks {
    let x = pseudo_random(&[3, 3, 4, 2], 7, 2.0);
    let y = eng::channel_norm(&x).unwrap();
    let r = pseudo_random(x.shape(), 8, 1.0);
    let g = channel_norm_backward(&x, y.data(), r.data()).unwrap();
    let inputs = [T64::from_f32(&x)];
    let c = check_grad(&inputs, 0, &g, |p, _| {
        dot(&channel_norm(&p[0], NORM_EPS), r.data())
    });
    vec![("channel_norm".into(), c)]
}

pub fn linear_cross_entropy_cases() -> Checks {
    let x = pseudo_random(&[4], 9, 1.0);
    let w = pseudo_random(&[3, 4], 10, 1.0);
    let b = pseudo_random(&[3], 11, 1.0);
    let mut out = Vec::new();
    for label in 0..3 {
        let mut g = Graph::new();
        let (vx, vw, vb) = (g.param(x.clone()), g.param(w.clone()), g.param(b.clone()));
        let z = g.linear(vx, vw, vb).unwrap();
        let loss = g.softmax_cross_entropy(z, label).unwrap();
        g.backward(loss).unwrap();
        let inputs = [T64::from_f32(&x), T64::from_f32(&w), T64::from_f32(&b)];
        let f = |p: &[T64], _: &mut Tape| cross_entropy(&linear(&p[0], &p[1], &p[2]).d, label);
        for (i, (name, v)) in [("x", vx), ("w", vw), ("b", vb)].into_iter().enumerate() {
            out.push((
                format!("linear+ce label {label} {name}"),
                check_grad(&inputs, i, g.grad(v).unwrap(), f),
            ));
        }
    }
    out
}

/// conv, relu, sub, add, avg-pool, channel-norm, strided conv, global pool,
/// linear and cross-entropy chained; every leaf checked.
pub fn composite_cases() -> Checks {
    let leaves = [
        pseudo_random(&[2, 4, 4, 5], 20, 1.0),
        pseudo_random(&[3, 2, 3, 3, 3], 21, 0.4),
        pseudo_random(&[3, 4, 4, 5], 22, 1.0),
        pseudo_random(&[3, 4, 4, 5], 23, 1.0),
        pseudo_random(&[2, 3, 3, 3, 3], 24, 0.4),
        pseudo_random(&[2, 2], 25, 1.0),
        pseudo_random(&[2], 26, 0.5),
    ];
    let mut g = Graph::new();
    let v: Vec<_> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let h = g.conv3d(v[0], v[1], 1).unwrap();
    let h = g.relu(h);
    let h = g.sub(h, v[2]).unwrap();
    let h = g.add(h, v[3]).unwrap();
    let h = g.avg_pool3d(h).unwrap();
    let h = g.channel_norm(h).unwrap();
    let h = g.conv3d(h, v[4], 2).unwrap();
    let h = g.global_avg_pool(h).unwrap();
    let z = g.linear(h, v[5], v[6]).unwrap();
    let loss = g.softmax_cross_entropy(z, 1).unwrap();
    g.backward(loss).unwrap();

    let inputs: Vec<T64> = leaves.iter().map(T64::from_f32).collect();
    let f = |p: &[T64], tape: &mut Tape| {
        let h = relu(&conv3d(&p[0], &p[1], 1), tape);
        let h = zip(&zip(&h, &p[2], |a, b| a - b), &p[3], |a, b| a + b);
        let h = channel_norm(&avg_pool(&h), NORM_EPS);
        let h = global_avg_pool(&conv3d(&h, &p[4], 2));
        cross_entropy(&linear(&h, &p[5], &p[6]).d, 1)
    };
    v.iter()
        .enumerate()
        .map(|(i, &var)| {
            (
                format!("composite leaf {i}"),
                check_grad(&inputs, i, g.grad(var).unwrap(), f),
            )
        })
        .collect()
}

/// A tensor feeding two paths must receive both contributions.
pub fn shared_use_cases() -> Checks {
    let x = pseudo_random(&[1, 3, 3, 3], 30, 1.0);
    let k = pseudo_random(&[1, 1, 3, 3, 3], 31, 0.5);
    let mut g = Graph::new();
    let (vx, vk) = (g.param(x.clone()), g.param(k.clone()));
    let y = g.conv3d(vx, vk, 1).unwrap();
    let s = g.add(y, vx).unwrap();
    let s = g.relu(s);
    let loss = g.sum(s);
    g.backward(loss).unwrap();
    let inputs = [T64::from_f32(&x), T64::from_f32(&k)];
    let f = |p: &[T64], tape: &mut Tape| {
        let s = relu(&zip(&conv3d(&p[0], &p[1], 1), &p[0], |a, b| a + b), tape);
        s.d.iter().sum()
    };
    vec![
        (
            "shared x".into(),
            check_grad(&inputs, 0, g.grad(vx).unwrap(), f),
        ),
        (
            "shared k".into(),
            check_grad(&inputs, 1, g.grad(vk).unwrap(), f),
        ),
    ]
}

/// Whole-model loss on a two-volume 5x5x5 batch, every parameter tensor
/// checked. Panics if the loss itself disagrees with the reference.
pub fn model_cases(cfg: &MgNetConfig, seed: u64) -> Checks {
    let params = build(cfg).unwrap();
    let volumes = [
        pseudo_random(&[1, 5, 5, 5], seed, 1.0),
        pseudo_random(&[1, 5, 5, 5], seed + 1, 1.0),
    ];
    let batch: Vec<(&Tensor, usize)> = vec![(&volumes[0], 0), (&volumes[1], 1)];
    let (loss, grads) = loss_and_grad(&params, &batch).unwrap();

    let p64 = params64(&params);
    let batch64: Vec<(T64, usize)> = volumes.iter().map(T64::from_f32).zip([0, 1]).collect();
    let f = |p: &[T64], tape: &mut Tape| mgnet_loss(cfg, p, &batch64, tape);
    let ref_loss = f(&p64, &mut Tape::new());
    assert!(
        (loss as f64 - ref_loss).abs() < 1e-5,
        "loss {loss} vs reference {ref_loss}"
    );

    let names: Vec<String> = cfg.layout().iter().map(|(r, _)| r.name()).collect();
    grads
        .iter()
        .enumerate()
        .map(|(i, g)| (format!("model {}", names[i]), check_grad(&p64, i, g, f)))
        .collect()
}

/// The tiny model (J=2, one smoothing step, 2 channels) and its variants.
pub fn tiny_models() -> Vec<(&'static str, MgNetConfig, u64)> {
    let base = MgNetConfig::uniform(2, 1, 2);
    let mut no_pool = base.clone();
    no_pool.use_avg_pool = false;
    no_pool.seed = 1;
    let mut unshared = MgNetConfig::uniform(2, 2, 2);
    unshared.share_smoother = false;
    unshared.seed = 2;
    let mut normed = base.clone();
    normed.channel_norm = true;
    normed.seed = 3;
    vec![
        ("tiny", base, 40),
        ("no-pool", no_pool, 50),
        ("unshared", unshared, 60),
        ("channel-norm", normed, 70),
    ]
}

/// Every case above.
pub fn all() -> Checks {
    let mut out = conv3d_cases();
    out.extend(pool_cases());
    out.extend(channel_norm_cases());
    out.extend(linear_cross_entropy_cases());
    out.extend(composite_cases());
    out.extend(shared_use_cases());
    for (tag, cfg, seed) in tiny_models() {
        out.extend(
            model_cases(&cfg, seed)
                .into_iter()
                .map(|(n, c)| (format!("{tag} {n}"), c)),
        );
    }
    out
}

pub const TOL: f64 = 1e-3;
/// f32 and f64 passes must agree on every ReLU sign.
pub const MIN_MARGIN: f64 = 1e-5;

pub fn passes(c: &GradCheck) -> bool {
    c.relu_margin > MIN_MARGIN && c.rel_err < TOL
}
