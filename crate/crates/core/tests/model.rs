mod common;

use common::*;
use mgnet3d::engine::ops::{add, relu, softmax_cross_entropy, sub};
use mgnet3d::engine::{avg_pool3d, conv3d, Graph, Tensor};
use mgnet3d::model::{
    build, forward, forward_traced, param_breakdown, param_count, plan_levels, restrict, smooth,
    MgNetConfig,
};

fn closed_form(cfg: &MgNetConfig) -> usize {
    let (c, j) = (cfg.feature_channels, cfg.num_grids);
    let kernel = c * c * 27;
    let smoothers: usize = (0..j).map(|l| cfg.smoothers_on(l)).sum();
    cfg.input_channels * c * 27
        + j * kernel
        + smoothers * kernel
        + 2 * (j - 1) * kernel
        + cfg.num_classes * (c + 1)
}

#[test]
fn forward_matches_reference_network() {
    let mut configs = vec![MgNetConfig::uniform(3, 2, 3), MgNetConfig::uniform(2, 1, 2)];
    configs[1].use_avg_pool = false;
    let mut normed = MgNetConfig::uniform(2, 2, 2);
    normed.channel_norm = true;
    normed.share_smoother = false;
    configs.push(normed);
    for (i, cfg) in configs.into_iter().enumerate() {
        let p = build(&cfg).unwrap();
        let x = pseudo_random(&[1, 7, 9, 6], 100 + i as u64, 1.0);
        let z = forward(&p, &x).unwrap();
        let want = mgnet_logits(&cfg, &params64(&p), &T64::from_f32(&x), &mut Tape::new());
        for (a, b) in z.data().iter().zip(&want) {
            assert!(
                (*a as f64 - b).abs() < 1e-5 * (1.0 + b.abs()),
                "config {i}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn smoothing_step_equals_op_composition() {
    let u = pseudo_random(&[3, 5, 4, 6], 1, 1.0);
    let f = pseudo_random(&[3, 5, 4, 6], 2, 1.0);
    let a = pseudo_random(&[3, 3, 3, 3, 3], 3, 0.3);
    let b = pseudo_random(&[3, 3, 3, 3, 3], 4, 0.3);

    let mut g = Graph::new();
    let vars = [u.clone(), f.clone(), a.clone(), b.clone()].map(|t| g.constant(t));
    let out = smooth(&mut g, vars[0], vars[1], vars[2], vars[3], false).unwrap();

    let residual = relu(&sub(&f, &conv3d(&u, &a, 1).unwrap()).unwrap());
    let want = add(&u, &relu(&conv3d(&residual, &b, 1).unwrap())).unwrap();
    assert_eq!(g.value(out), &want);
}

#[test]
fn restriction_equals_op_composition() {
    let cfg = MgNetConfig::uniform(2, 1, 2);
    let p = build(&cfg).unwrap();
    let u = pseudo_random(&[2, 5, 6, 7], 5, 1.0);
    let f = pseudo_random(&[2, 5, 6, 7], 6, 1.0);
    let (level, next) = (&p.levels[0], &p.levels[1]);
    let (pi, r) = (level.pi.as_ref().unwrap(), level.r.as_ref().unwrap());

    for pool in [true, false] {
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let (vu, vf) = (g.constant(u.clone()), g.constant(f.clone()));
        let (u1, f1) = restrict(&mut g, vu, vf, &bound.levels[0], bound.levels[1].a, pool).unwrap();

        let coarse = conv3d(&u, pi, 2).unwrap();
        let residual = sub(&f, &conv3d(&u, &level.a, 1).unwrap()).unwrap();
        let want_f = add(
            &conv3d(&residual, r, 2).unwrap(),
            &conv3d(&coarse, &next.a, 1).unwrap(),
        )
        .unwrap();
        let want_u = if pool {
            avg_pool3d(&coarse).unwrap()
        } else {
            coarse
        };
        assert_eq!(g.value(f1), &want_f);
        assert_eq!(g.value(u1), &want_u);
        assert_eq!(g.value(u1).shape(), &[2, 3, 3, 4]);
    }
}

#[test]
fn level_shapes_follow_the_stride_two_chain() {
    let cfg = MgNetConfig::default();
    let plan = plan_levels(&cfg, &[1, 91, 109, 91]).unwrap();
    assert_eq!(
        plan,
        vec![
            [91, 109, 91],
            [46, 55, 46],
            [23, 28, 23],
            [12, 14, 12],
            [6, 7, 6]
        ]
    );

    let small = MgNetConfig::uniform(4, 1, 2);
    let p = build(&small).unwrap();
    let (z, shapes) = forward_traced(&p, &pseudo_random(&[1, 13, 9, 16], 7, 1.0)).unwrap();
    assert_eq!(shapes, vec![[13, 9, 16], [7, 5, 8], [4, 3, 4], [2, 2, 2]]);
    assert_eq!(z.shape(), &[2]);
    assert!(z.is_finite());
}

#[test]
fn parameter_counts_match_closed_form() {
    for (j, nu, c, share) in [
        (5, 2, 128, true),
        (5, 2, 128, false),
        (3, 2, 16, true),
        (2, 1, 2, false),
        (1, 3, 4, false),
    ] {
        let mut cfg = MgNetConfig::uniform(j, nu, c);
        cfg.share_smoother = share;
        let b = param_breakdown(&cfg).unwrap();
        assert_eq!(
            b.total,
            closed_form(&cfg),
            "J={j} nu={nu} c={c} share={share}"
        );
        assert_eq!(b.entries.iter().map(|e| e.1).sum::<usize>(), b.total);
        if c <= 16 {
            assert_eq!(param_count(&build(&cfg).unwrap()), b.total);
        }
    }
    assert_eq!(
        param_breakdown(&MgNetConfig::default()).unwrap().total,
        7_966_338
    );
}

#[test]
fn count_ignores_initialisation_seed() {
    let mut a = MgNetConfig::uniform(3, 2, 4);
    let b = build(&a).unwrap();
    a.seed = 77;
    let c = build(&a).unwrap();
    assert_ne!(b, c);
    assert_eq!(param_count(&b), param_count(&c));
}

#[test]
fn initial_loss_is_near_chance() {
    let cfg = MgNetConfig::uniform(3, 2, 8);
    for seed in 0..4 {
        let p = build(&MgNetConfig {
            seed,
            ..cfg.clone()
        })
        .unwrap();
        let x = pseudo_random(&[1, 12, 12, 12], seed + 10, 1.0);
        let z = forward(&p, &x).unwrap();
        assert!(z.is_finite());
        for label in 0..2 {
            let loss = softmax_cross_entropy(&z, label).unwrap();
            assert!(
                (loss - std::f32::consts::LN_2).abs() < 0.2,
                "seed {seed}: loss {loss}"
            );
        }
    }
}

#[test]
fn rejects_bad_volumes() {
    let p = build(&MgNetConfig::uniform(2, 1, 2)).unwrap();
    let err = forward(&p, &Tensor::zeros(&[2, 5, 5, 5])).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    let mut bad = Tensor::zeros(&[1, 5, 5, 5]);
    bad.data_mut()[3] = f32::NAN;
    assert!(matches!(forward(&p, &bad), Err(mgnet3d::Error::Data(_))));
}
