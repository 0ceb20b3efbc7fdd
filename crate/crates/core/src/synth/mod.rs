//! Synthetic clip generation, windowing, cropping, Bayer packing and clip
//! directory I/O.

pub mod bayer;
pub mod dataset;
pub mod io;
pub mod scene;
pub mod window;

pub use bayer::{pack_rgbg, unpack_rgbg, CfaPhase};
pub use dataset::{Clip, Dataset, DatasetSpec};
pub use scene::{generate_synthetic, GroundTruthFlow, Scene, SceneSpec};
pub use window::{crop_patch, extract_window, TemporalWindow};
