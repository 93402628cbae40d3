//! CPU differentiable dynamic Gaussian splatting.
//!
//! A canonical cloud of 3D Gaussians is deformed over normalized time by
//! per-Gaussian learnable basis curves, splatted with front-to-back alpha
//! blending into color and depth, and optimized against masked RGB-D video
//! with known camera poses.

pub mod bench;
pub mod camera;
pub mod dataset;
pub mod error;
pub mod fdm;
pub mod image;
pub mod init;
pub mod io;
mod knn;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod raster;
pub mod synth;
pub mod train;

pub use camera::CameraFrame;
pub use dataset::SceneDataset;
pub use error::{Error, Result};
pub use fdm::{BasisKind, FdmParams};
pub use image::{ColorImage, Mask, ScalarImage};
pub use init::{RGBDFrame, SeedPointCloud};
pub use model::GaussianCloud;
pub use raster::{render, render_backward, RenderOutput};
pub use train::{train, TrainConfig};
