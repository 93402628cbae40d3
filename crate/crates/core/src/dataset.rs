//! In-memory RGB-D sequences with poses and the train/test split.

use crate::camera::CameraFrame;
use crate::error::{invalid, Result};
use crate::image::check_dims;
use crate::init::RGBDFrame;

/// Every `TEST_STRIDE`-th frame is held out for testing.
pub const TEST_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub frames: Vec<RGBDFrame>,
    /// One camera per frame, carrying the same normalized timestamp.
    pub cameras: Vec<CameraFrame>,
    pub depth_scale: f64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Train/test indices for `n` frames: frames `7, 15, 23, ...` are held out.
pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|i| i % TEST_STRIDE != TEST_STRIDE - 1)
}

/// Maps raw timestamps affinely so the first becomes 0 and the last 1. A
/// single frame maps to 0.
pub fn normalize_timestamps(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.iter().any(|t| !t.is_finite()) {
        return Err(invalid("timestamps must be finite"));
    }
    if let Some(k) = raw.windows(2).position(|w| w[1] <= w[0]) {
        return Err(invalid(format!(
            "timestamps must be strictly increasing: frame {} has {} after {}",
            k + 1,
            raw[k + 1],
            raw[k]
        )));
    }
    match raw {
        [] => Ok(Vec::new()),
        [_] => Ok(vec![0.0]),
        [first, .., last] => Ok(raw.iter().map(|t| (t - first) / (last - first)).collect()),
    }
}

impl SceneDataset {
    /// Validates frame/camera agreement and computes the split.
    pub fn new(frames: Vec<RGBDFrame>, cameras: Vec<CameraFrame>, depth_scale: f64) -> Result<Self> {
        if frames.len() != cameras.len() {
            return Err(invalid(format!("{} frames but {} cameras", frames.len(), cameras.len())));
        }
        if !(depth_scale > 0.0 && depth_scale.is_finite()) {
            return Err(invalid(format!("depth scale must be positive, got {depth_scale}")));
        }
        for (i, (f, c)) in frames.iter().zip(&cameras).enumerate() {
            f.validate()?;
            c.validate()?;
            check_dims(&format!("frame {i}"), (f.width(), f.height()), (c.width, c.height))?;
            if f.time != c.time {
                return Err(invalid(format!("frame {i}: image time {} differs from camera time {}", f.time, c.time)));
            }
        }
        if let Some(k) = frames.windows(2).position(|w| w[1].time <= w[0].time) {
            return Err(invalid(format!("timestamps must be strictly increasing at frame {}", k + 1)));
        }
        let (train, test) = split_indices(frames.len());
        Ok(Self { frames, cameras, depth_scale, train, test })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn train_frames(&self) -> Vec<RGBDFrame> {
        self.train.iter().map(|&i| self.frames[i].clone()).collect()
    }

    pub fn train_cameras(&self) -> Vec<CameraFrame> {
        self.train.iter().map(|&i| self.cameras[i].clone()).collect()
    }
}
