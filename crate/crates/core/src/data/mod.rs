//! Volume files, manifests, fold assignment and synthetic data.

pub mod manifest;
pub mod split;
pub mod synth;
pub mod volume;

pub use manifest::{Manifest, VolumeRecord};
pub use split::{stratified_group_kfold, FoldAssignment};
pub use synth::{synth_generate, SynthConfig};
pub use volume::{load_volume, normalize, save_volume, Geometry};
