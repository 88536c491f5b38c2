use crate::engine::conv::KERNEL;
use crate::error::{Error, Result};

/// Architecture hyperparameters of the multigrid network.
#[derive(Debug, Clone, PartialEq)]
pub struct MgNetConfig {
    /// Number of grid levels `J`.
    pub num_grids: usize,
    /// Smoothing iterations per level; one entry per grid.
    pub smoothing_iters: Vec<usize>,
    /// Channels of the solution features `u`.
    pub feature_channels: usize,
    /// Channels of the data features `f`.
    pub data_channels: usize,
    pub input_channels: usize,
    pub num_classes: usize,
    /// Mean-filter `u` after each transfer to a coarser grid.
    pub use_avg_pool: bool,
    /// Use a single smoother kernel per level instead of one per iteration.
    pub share_smoother: bool,
    /// Per-channel normalisation before every activation.
    pub channel_norm: bool,
    pub seed: u64,
}

impl Default for MgNetConfig {
    fn default() -> Self {
        Self {
            num_grids: 5,
            smoothing_iters: vec![2; 5],
            feature_channels: 128,
            data_channels: 128,
            input_channels: 1,
            num_classes: 2,
            use_avg_pool: true,
            share_smoother: true,
            channel_norm: false,
            seed: 0,
        }
    }
}

/// Which learnable tensor a layout entry describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    InputKernel,
    Operator { level: usize },
    Smoother { level: usize, iter: usize },
    Interpolation { level: usize },
    Restriction { level: usize },
    HeadWeight,
    HeadBias,
}

impl ParamRole {
    pub fn name(&self) -> String {
        match *self {
            ParamRole::InputKernel => "f_in".into(),
            ParamRole::Operator { level } => format!("level{}.A", level + 1),
            ParamRole::Smoother { level, iter } => format!("level{}.B{}", level + 1, iter + 1),
            ParamRole::Interpolation { level } => format!("level{}.Pi", level + 1),
            ParamRole::Restriction { level } => format!("level{}.R", level + 1),
            ParamRole::HeadWeight => "head.W".into(),
            ParamRole::HeadBias => "head.b".into(),
        }
    }

    /// Fan-in used by the uniform initialiser.
    pub fn fan_in(&self, shape: &[usize]) -> usize {
        match self {
            ParamRole::HeadWeight => shape[1],
            ParamRole::HeadBias => 0,
            _ => shape[1] * KERNEL * KERNEL * KERNEL,
        }
    }
}

impl MgNetConfig {
    /// Builds a config with `smoothing_iters` repeated on every level.
    pub fn uniform(num_grids: usize, smoothing: usize, channels: usize) -> Self {
        Self {
            num_grids,
            smoothing_iters: vec![smoothing; num_grids],
            feature_channels: channels,
            data_channels: channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Argument(msg));
        if self.num_grids == 0 {
            return bad("num_grids must be at least 1".into());
        }
        if self.smoothing_iters.len() != self.num_grids {
            return bad(format!(
                "smoothing_iters has {} entries for {} grids",
                self.smoothing_iters.len(),
                self.num_grids
            ));
        }
        if self.smoothing_iters.contains(&0) {
            return bad("every level needs at least one smoothing iteration".into());
        }
        if self.feature_channels == 0 || self.data_channels == 0 || self.input_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.feature_channels != self.data_channels {
            return bad(format!(
                "feature_channels ({}) must equal data_channels ({}): the coarse-grid operator maps u into f",
                self.feature_channels, self.data_channels
            ));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        Ok(())
    }

    /// Smoother kernels stored on `level`.
    pub fn smoothers_on(&self, level: usize) -> usize {
        if self.share_smoother {
            1
        } else {
            self.smoothing_iters[level]
        }
    }

    /// Every learnable tensor with its shape, in checkpoint traversal order:
    /// `f_in`, then per level `A`, `B…`, `Pi`, `R`, then the head.
    pub fn layout(&self) -> Vec<(ParamRole, Vec<usize>)> {
        let k = KERNEL;
        let (cu, cf) = (self.feature_channels, self.data_channels);
        let mut out = vec![(
            ParamRole::InputKernel,
            vec![cf, self.input_channels, k, k, k],
        )];
        for level in 0..self.num_grids {
            out.push((ParamRole::Operator { level }, vec![cf, cu, k, k, k]));
            for iter in 0..self.smoothers_on(level) {
                out.push((ParamRole::Smoother { level, iter }, vec![cu, cf, k, k, k]));
            }
            if level + 1 < self.num_grids {
                out.push((ParamRole::Interpolation { level }, vec![cu, cu, k, k, k]));
                out.push((ParamRole::Restriction { level }, vec![cf, cf, k, k, k]));
            }
        }
        out.push((ParamRole::HeadWeight, vec![self.num_classes, cu]));
        out.push((ParamRole::HeadBias, vec![self.num_classes]));
        out
    }
}
