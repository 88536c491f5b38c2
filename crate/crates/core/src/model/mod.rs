//! The 3D multigrid network: configuration, parameters, forward pass and
//! checkpoints.

pub mod checkpoint;
pub mod config;
pub mod network;
pub mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{MgNetConfig, ParamRole};
pub use network::{
    forward, forward_graph, forward_traced, loss_and_grad, plan_levels, restrict, smooth,
    ForwardTrace,
};
pub use params::{
    build, param_breakdown, param_count, BoundLevel, BoundParams, LevelParams, MgNetParams,
    ParamBreakdown,
};
