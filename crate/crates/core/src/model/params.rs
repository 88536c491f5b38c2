use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{MgNetConfig, ParamRole};
use crate::engine::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Kernels owned by one grid level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelParams {
    /// Operator `A` (stride 1), shared by every smoothing iteration.
    pub a: Tensor,
    /// Smoother kernels `B`, one per iteration or a single shared one.
    pub b: Vec<Tensor>,
    /// Interpolation `Pi` (stride 2); absent on the coarsest level.
    pub pi: Option<Tensor>,
    /// Restriction `R` (stride 2); absent on the coarsest level.
    pub r: Option<Tensor>,
}

impl LevelParams {
    /// Smoother used on smoothing iteration `iter`.
    pub fn smoother(&self, iter: usize) -> &Tensor {
        &self.b[iter.min(self.b.len() - 1)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MgNetParams {
    pub config: MgNetConfig,
    pub f_in: Tensor,
    pub levels: Vec<LevelParams>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Builds freshly initialised parameters. Kernels are drawn uniformly from
/// `[-s, s]` with `s = sqrt(1 / fan_in)`; the head bias starts at zero.
pub fn build(config: &MgNetConfig) -> Result<MgNetParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let tensors = config
        .layout()
        .into_iter()
        .map(|(role, shape)| {
            let fan_in = role.fan_in(&shape);
            if fan_in == 0 {
                return Tensor::zeros(&shape);
            }
            let s = (1.0 / fan_in as f64).sqrt() as f32;
            Tensor::from_fn(&shape, |_| rng.random_range(-s..=s))
        })
        .collect();
    MgNetParams::from_tensors(config.clone(), tensors)
}

impl MgNetParams {
    /// Reassembles parameters from tensors in [`MgNetConfig::layout`] order.
    pub fn from_tensors(config: MgNetConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((role, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "{} has shape {:?}, expected {:?}",
                    role.name(),
                    t.shape(),
                    shape
                )));
            }
        }

        let mut iter = tensors.into_iter();
        let mut next = || iter.next().expect("length checked");
        let f_in = next();
        let mut levels = Vec::with_capacity(config.num_grids);
        for level in 0..config.num_grids {
            let a = next();
            let b = (0..config.smoothers_on(level)).map(|_| next()).collect();
            let (pi, r) = if level + 1 < config.num_grids {
                (Some(next()), Some(next()))
            } else {
                (None, None)
            };
            levels.push(LevelParams { a, b, pi, r });
        }
        let head_w = next();
        let head_b = next();
        Ok(Self {
            config,
            f_in,
            levels,
            head_w,
            head_b,
        })
    }

    /// All tensors in layout order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.f_in];
        for l in &self.levels {
            out.push(&l.a);
            out.extend(&l.b);
            out.extend(l.pi.as_ref());
            out.extend(l.r.as_ref());
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.f_in];
        for l in &mut self.levels {
            out.push(&mut l.a);
            out.extend(&mut l.b);
            out.extend(l.pi.as_mut());
            out.extend(l.r.as_mut());
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Records every tensor on `graph`, trainable or constant.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundParams {
        let mut leaf = |t: &Tensor| {
            if trainable {
                graph.param(t.detached())
            } else {
                graph.constant(t.detached())
            }
        };
        let f_in = leaf(&self.f_in);
        let levels = self
            .levels
            .iter()
            .map(|l| BoundLevel {
                a: leaf(&l.a),
                b: l.b.iter().map(&mut leaf).collect(),
                pi: l.pi.as_ref().map(&mut leaf),
                r: l.r.as_ref().map(&mut leaf),
            })
            .collect();
        let head_w = leaf(&self.head_w);
        let head_b = leaf(&self.head_b);
        BoundParams {
            f_in,
            levels,
            head_w,
            head_b,
        }
    }
}

/// Exact number of scalar parameters.
pub fn param_count(params: &MgNetParams) -> usize {
    params.tensors().iter().map(|t| t.numel()).sum()
}

/// Graph handles for one [`LevelParams`].
#[derive(Debug, Clone)]
pub struct BoundLevel {
    pub a: Var,
    pub b: Vec<Var>,
    pub pi: Option<Var>,
    pub r: Option<Var>,
}

impl BoundLevel {
    pub fn smoother(&self, iter: usize) -> Var {
        self.b[iter.min(self.b.len() - 1)]
    }
}

/// Graph handles for a full parameter set.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub f_in: Var,
    pub levels: Vec<BoundLevel>,
    pub head_w: Var,
    pub head_b: Var,
}

impl BoundParams {
    /// Handles in layout order, matching [`MgNetParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.f_in];
        for l in &self.levels {
            out.push(l.a);
            out.extend(&l.b);
            out.extend(l.pi);
            out.extend(l.r);
        }
        out.push(self.head_w);
        out.push(self.head_b);
        out
    }
}

/// Scalar counts per component, computed from the config alone.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBreakdown {
    pub entries: Vec<(String, usize)>,
    pub level_totals: Vec<usize>,
    pub total: usize,
}

pub fn param_breakdown(config: &MgNetConfig) -> Result<ParamBreakdown> {
    config.validate()?;
    let mut level_totals = vec![0; config.num_grids];
    let mut entries = Vec::new();
    for (role, shape) in config.layout() {
        let n: usize = shape.iter().product();
        match role {
            ParamRole::Operator { level }
            | ParamRole::Smoother { level, .. }
            | ParamRole::Interpolation { level }
            | ParamRole::Restriction { level } => level_totals[level] += n,
            _ => {}
        }
        entries.push((role.name(), n));
    }
    let total = entries.iter().map(|(_, n)| n).sum();
    Ok(ParamBreakdown {
        entries,
        level_totals,
        total,
    })
}
