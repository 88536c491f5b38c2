//! The multigrid forward pass.
//!
//! Level `l` keeps a data map `f` and a solution map `u`. Each smoothing
//! iteration updates `u <- u + relu(B * relu(f - A * u))`; between levels `u`
//! is carried to the coarse grid by `Pi` (stride 2), the residual by `R`
//! (stride 2), and the coarse data becomes `R * (f - A * u) + A' * u'`.

use super::config::MgNetConfig;
use super::params::{BoundLevel, BoundParams, MgNetParams};
use crate::engine::{output_extent, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Spatial extents `(D, H, W)` of every grid level for a given input shape.
pub fn plan_levels(config: &MgNetConfig, input_shape: &[usize]) -> Result<Vec<[usize; 3]>> {
    config.validate()?;
    let mut grid = match input_shape {
        &[c, d, h, w] if c == config.input_channels => [d, h, w],
        s => {
            return Err(Error::Shape(format!(
                "input must be [{}, D, H, W], got {s:?}",
                config.input_channels
            )))
        }
    };
    let mut out = vec![grid];
    for level in 1..config.num_grids {
        for axis in grid.iter_mut() {
            *axis = output_extent(*axis, 2).map_err(|e| {
                Error::Config(format!("grid collapses before level {}: {e}", level + 1))
            })?;
        }
        out.push(grid);
    }
    Ok(out)
}

fn activate(graph: &mut Graph, x: Var, norm: bool) -> Result<Var> {
    let x = if norm { graph.channel_norm(x)? } else { x };
    Ok(graph.relu(x))
}

/// One smoothing iteration: `u + relu(B * relu(f - A * u))`.
pub fn smooth(graph: &mut Graph, u: Var, f: Var, a: Var, b: Var, norm: bool) -> Result<Var> {
    let (us, fs) = (
        graph.value(u).shape().to_vec(),
        graph.value(f).shape().to_vec(),
    );
    if us.len() != 4 || fs.len() != 4 || us[1..] != fs[1..] {
        return Err(Error::Shape(format!(
            "smoothing needs u and f on the same grid, got {us:?} and {fs:?}"
        )));
    }
    let au = graph.conv3d(u, a, 1)?;
    let residual = graph.sub(f, au)?;
    let residual = activate(graph, residual, norm)?;
    let correction = graph.conv3d(residual, b, 1)?;
    let correction = activate(graph, correction, norm)?;
    graph.add(u, correction)
}

/// Transfers `(u, f)` from a level to the next coarser one, returning the
/// initial coarse solution and the coarse data.
///
/// The coarse data is assembled from the un-pooled coarse solution; the mean
/// filter is applied to the returned solution afterwards.
pub fn restrict(
    graph: &mut Graph,
    u: Var,
    f: Var,
    level: &BoundLevel,
    a_next: Var,
    use_avg_pool: bool,
) -> Result<(Var, Var)> {
    let (pi, r) = match (level.pi, level.r) {
        (Some(pi), Some(r)) => (pi, r),
        _ => {
            return Err(Error::Argument(
                "the coarsest level has no transfer kernels".into(),
            ))
        }
    };
    let u_next = graph.conv3d(u, pi, 2)?;
    let au = graph.conv3d(u, level.a, 1)?;
    let residual = graph.sub(f, au)?;
    let restricted = graph.conv3d(residual, r, 2)?;
    let coarse_au = graph.conv3d(u_next, a_next, 1)?;
    let f_next = graph.add(restricted, coarse_au)?;
    let u_next = if use_avg_pool {
        graph.avg_pool3d(u_next)?
    } else {
        u_next
    };
    Ok((u_next, f_next))
}

/// Result of recording a forward pass on a graph.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Var,
    /// Spatial extents of `u` on each level, finest first.
    pub level_shapes: Vec<[usize; 3]>,
}

/// Records the whole network on `graph` for an already-bound volume.
pub fn forward_graph(
    graph: &mut Graph,
    config: &MgNetConfig,
    params: &BoundParams,
    volume: Var,
) -> Result<ForwardTrace> {
    let shape = graph.value(volume).shape().to_vec();
    let plan = plan_levels(config, &shape)?;
    let norm = config.channel_norm;

    let f0 = graph.conv3d(volume, params.f_in, 1)?;
    let mut f = activate(graph, f0, norm)?;
    let [d, h, w] = plan[0];
    let mut u = graph.constant(Tensor::zeros(&[config.feature_channels, d, h, w]));
    let mut level_shapes = Vec::with_capacity(config.num_grids);

    for (l, level) in params.levels.iter().enumerate() {
        for i in 0..config.smoothing_iters[l] {
            u = smooth(graph, u, f, level.a, level.smoother(i), norm)?;
        }
        level_shapes.push(graph.value(u).spatial()?.into());
        if l + 1 < config.num_grids {
            (u, f) = restrict(
                graph,
                u,
                f,
                level,
                params.levels[l + 1].a,
                config.use_avg_pool,
            )?;
        }
    }

    let pooled = graph.global_avg_pool(u)?;
    let logits = graph.linear(pooled, params.head_w, params.head_b)?;
    Ok(ForwardTrace {
        logits,
        level_shapes,
    })
}

fn check_volume(params: &MgNetParams, volume: &Tensor) -> Result<()> {
    if !volume.is_finite() {
        return Err(Error::Data(
            "input volume contains non-finite values".into(),
        ));
    }
    match volume.shape() {
        &[c, _, _, _] if c == params.config.input_channels => Ok(()),
        s => Err(Error::Shape(format!(
            "model expects [{}, D, H, W] volumes, got {s:?}",
            params.config.input_channels
        ))),
    }
}

/// Logits for one `[input_channels, D, H, W]` volume.
pub fn forward(params: &MgNetParams, volume: &Tensor) -> Result<Tensor> {
    forward_traced(params, volume).map(|(logits, _)| logits)
}

/// Logits together with the per-level spatial extents that were visited.
pub fn forward_traced(params: &MgNetParams, volume: &Tensor) -> Result<(Tensor, Vec<[usize; 3]>)> {
    check_volume(params, volume)?;
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph, false);
    let x = graph.constant(volume.detached());
    let trace = forward_graph(&mut graph, &params.config, &bound, x)?;
    Ok((graph.take_value(trace.logits), trace.level_shapes))
}

/// Mean cross-entropy over `samples` and its gradient for every parameter,
/// in layout order. Per-sample gradients are reduced in sample order.
pub fn loss_and_grad(
    params: &MgNetParams,
    samples: &[(&Tensor, usize)],
) -> Result<(f32, Vec<Vec<f32>>)> {
    use rayon::prelude::*;

    if samples.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let scale = 1.0 / samples.len() as f32;
    let per_sample: Vec<Result<(f32, Vec<Vec<f32>>)>> = samples
        .par_iter()
        .map(|&(volume, label)| {
            check_volume(params, volume)?;
            let mut graph = Graph::new();
            let bound = params.bind(&mut graph, true);
            let x = graph.constant(volume.detached());
            let trace = forward_graph(&mut graph, &params.config, &bound, x)?;
            let loss = graph.softmax_cross_entropy(trace.logits, label)?;
            let scaled = graph.scale(loss, scale);
            graph.backward(scaled)?;
            let grads = bound
                .vars()
                .into_iter()
                .map(|v| graph.grad(v).expect("trainable leaf").to_vec())
                .collect();
            Ok((graph.value(loss).item()?, grads))
        })
        .collect();

    let mut total_loss = 0.0f64;
    let mut total: Option<Vec<Vec<f32>>> = None;
    for result in per_sample {
        let (loss, grads) = result?;
        total_loss += loss as f64;
        match total.as_mut() {
            None => total = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grads) {
                    a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    Ok((
        (total_loss / samples.len() as f64) as f32,
        total.expect("non-empty batch"),
    ))
}
