//! Scripted deforming scenes rendered by the engine itself, used as ground
//! truth for reconstruction tests.

use std::f64::consts::TAU;

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::CameraFrame;
use crate::dataset::SceneDataset;
use crate::error::{invalid, Result};
use crate::fdm::BasisKind;
use crate::init::RGBDFrame;
use crate::image::Mask;
use crate::model::{logit, GaussianCloud};
use crate::raster::render;

/// Quantization step of synthetic depth when written to disk.
pub const SYNTH_DEPTH_SCALE: f64 = 1e-4;
const INSTRUMENT_COLOR: [f64; 3] = [0.62, 0.64, 0.68];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionKind {
    /// Every Gaussian oscillates over the whole sequence.
    #[default]
    Sinusoidal,
    /// A localized push confined to `t` in `[0.4, 0.6]`; still otherwise.
    Poke,
}

/// Instrument rectangle that hides tissue and zeroes the mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OccluderSpec {
    /// Fraction of the image covered in every frame.
    pub area_fraction: f64,
    /// Horizontal distance travelled, as a fraction of the width. The
    /// rectangle moves during the first half of the sequence and then rests.
    pub travel: f64,
}

impl Default for OccluderSpec {
    fn default() -> Self {
        Self { area_fraction: 0.2, travel: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_gaussians: usize,
    pub num_frames: usize,
    pub width: usize,
    pub height: usize,
    pub motion: MotionKind,
    /// Peak displacement (world units).
    pub translation_amplitude: f64,
    /// Peak in-plane rotation (radians).
    pub rotation_amplitude: f64,
    /// Peak log-scale pulsation.
    pub scale_amplitude: f64,
    /// Lateral camera drift over the sequence (world units).
    pub camera_sway: f64,
    pub occluder: Option<OccluderSpec>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_gaussians: 300,
            num_frames: 64,
            width: 64,
            height: 64,
            motion: MotionKind::Sinusoidal,
            translation_amplitude: 0.15,
            rotation_amplitude: 0.15,
            scale_amplitude: 0.1,
            camera_sway: 0.0,
            occluder: None,
            seed: 0,
        }
    }
}

/// Axis-aligned pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Per-Gaussian trajectory parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Script {
    direction: Vector3<f64>,
    phase: f64,
    /// Weight of the localized push, in `[0, 1]`.
    poke: f64,
}

/// Ground-truth Gaussians with exactly evaluable trajectories.
#[derive(Clone, Debug, PartialEq)]
pub struct ScriptedScene {
    pub base: GaussianCloud,
    scripts: Vec<Script>,
    motion: MotionKind,
    translation: f64,
    rotation: f64,
    scale: f64,
}

/// Time profile of the localized push: zero outside `[0.4, 0.6]`.
pub fn poke_profile(t: f64) -> f64 {
    if (0.4..=0.6).contains(&t) {
        (std::f64::consts::PI * (t - 0.4) / 0.2).sin().powi(2)
    } else {
        0.0
    }
}

impl ScriptedScene {
    /// Static cloud holding every Gaussian's state at time `t`.
    pub fn cloud_at(&self, t: f64) -> GaussianCloud {
        let mut c = self.base.clone();
        for (i, s) in self.scripts.iter().enumerate() {
            let (wave, spin) = match self.motion {
                MotionKind::Sinusoidal => ((TAU * t + s.phase).sin(), (TAU * t + s.phase).cos()),
                MotionKind::Poke => {
                    let p = poke_profile(t) * s.poke;
                    (p, p)
                }
            };
            for k in 0..3 {
                c.positions[i][k] += self.translation * wave * s.direction[k];
            }
            let q = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), self.rotation * spin);
            let base = c.rotations[i];
            let b = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(base[0], base[1], base[2], base[3]));
            let r = q * b;
            c.rotations[i] = [r.w, r.i, r.j, r.k];
            for v in &mut c.log_scales[i] {
                *v += self.scale * wave;
            }
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub spec: SyntheticSpec,
    pub truth: ScriptedScene,
    pub dataset: SceneDataset,
    /// Instrument rectangle of each frame, if any.
    pub occluders: Vec<Option<PixelRect>>,
}

fn occluder_rect(spec: &SyntheticSpec, o: &OccluderSpec, t: f64) -> PixelRect {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let rw = (w * 0.4).round().max(1.0);
    let rh = (o.area_fraction * w * h / rw).round().clamp(1.0, h);
    let shift = o.travel * w * (2.0 * t).min(1.0);
    let x0 = ((w * 0.05).round() + shift.round()).min(w - rw);
    let y0 = ((h - rh) / 2.0).round();
    PixelRect { x0: x0 as usize, x1: (x0 + rw) as usize, y0: y0 as usize, y1: (y0 + rh) as usize }
}

/// Focal length giving a 90 degree horizontal field of view.
fn focal(spec: &SyntheticSpec) -> f64 {
    spec.width as f64 / 2.0
}

/// Builds the scripted scene and renders its RGB-D-mask frames. Frames are
/// spaced uniformly over normalized time; every 8th is held out.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticScene> {
    if spec.num_frames == 0 {
        return Err(invalid("synthetic scene needs at least one frame"));
    }
    if spec.num_gaussians == 0 || spec.width == 0 || spec.height == 0 {
        return Err(invalid("synthetic scene needs Gaussians and a non-empty image"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let depth = 3.0;
    let f = focal(spec);
    // Tissue sheet a little larger than the view frustum at `depth`.
    let half_w = 1.15 * depth * spec.width as f64 / (2.0 * f);
    let half_h = 1.15 * depth * spec.height as f64 / (2.0 * f);
    let aspect = half_w / half_h;
    let ny = ((spec.num_gaussians as f64 / aspect).sqrt().round() as usize).max(1);
    let nx = spec.num_gaussians.div_ceil(ny);
    let (dx, dy) = (2.0 * half_w / nx as f64, 2.0 * half_h / ny as f64);
    let spacing = dx.max(dy);

    let mut base = GaussianCloud::empty(0, 1, BasisKind::LearnableGaussian)?;
    let mut scripts = Vec::with_capacity(spec.num_gaussians);
    let poke_center = [0.15 * half_w, -0.1 * half_h];
    let poke_radius = 0.35 * half_w;
    for k in 0..spec.num_gaussians {
        let (ix, iy) = (k % nx, k / nx);
        let x = -half_w + (ix as f64 + 0.5) * dx + rng.random_range(-0.25..0.25) * dx;
        let y = -half_h + (iy as f64 + 0.5) * dy + rng.random_range(-0.25..0.25) * dy;
        let z = depth + 0.25 * (1.3 * x).sin() * (0.9 * y).cos() + rng.random_range(-0.02..0.02);
        let axis = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 1.0).normalize();
        let q = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), rng.random_range(0.0..TAU));
        let ls = [
            (spacing * rng.random_range(0.7..1.1)).ln(),
            (spacing * rng.random_range(0.7..1.1)).ln(),
            (spacing * rng.random_range(0.3..0.6)).ln(),
        ];
        // Smooth reddish tissue with per-Gaussian texture.
        let u = x / half_w;
        let v = y / half_h;
        let color = [
            (0.72 + 0.12 * (2.1 * u + 0.7).sin() + rng.random_range(-0.12..0.12)).clamp(0.0, 1.0),
            (0.35 + 0.1 * (1.7 * v - 0.3).cos() + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0),
            (0.33 + 0.08 * (1.3 * (u + v)).sin() + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0),
        ];
        base.push([x, y, z], [q.w, q.i, q.j, q.k], ls, logit(rng.random_range(0.85..0.97)), color);

        let direction = Vector3::new(
            0.6 * (0.8 * y).cos() + rng.random_range(-0.1..0.1),
            0.5 * (0.7 * x).sin() + rng.random_range(-0.1..0.1),
            0.6,
        );
        let r2 = (x - poke_center[0]).powi(2) + (y - poke_center[1]).powi(2);
        scripts.push(Script {
            direction: match spec.motion {
                MotionKind::Sinusoidal => direction,
                MotionKind::Poke => Vector3::new(0.3, -0.2, 1.0) * 2.0,
            },
            phase: 1.2 * x + 0.8 * y,
            poke: (-r2 / (2.0 * poke_radius * poke_radius)).exp(),
        });
    }
    let truth = ScriptedScene {
        base,
        scripts,
        motion: spec.motion,
        translation: spec.translation_amplitude,
        rotation: spec.rotation_amplitude,
        scale: spec.scale_amplitude,
    };

    let n = spec.num_frames;
    let (cx, cy) = ((spec.width as f64 - 1.0) / 2.0, (spec.height as f64 - 1.0) / 2.0);
    let k = Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0);
    let mut frames = Vec::with_capacity(n);
    let mut cams = Vec::with_capacity(n);
    let mut occluders = Vec::with_capacity(n);
    for i in 0..n {
        let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
        let mut pose = Matrix4::identity();
        pose[(0, 3)] = -spec.camera_sway * t;
        let cam = CameraFrame::new(k, pose, t, spec.width, spec.height)?;
        let out = render(&truth.cloud_at(t), &cam, [0.0; 3])?;
        let mut color = out.color;
        let mut depth = out.depth;
        let mut mask = Mask::new(spec.width, spec.height, true);
        let rect = spec.occluder.as_ref().map(|o| occluder_rect(spec, o, t));
        if let Some(r) = rect {
            for y in r.y0..r.y1 {
                for x in r.x0..r.x1 {
                    color.set(x, y, INSTRUMENT_COLOR);
                    depth.set(x, y, 0.0);
                    mask.set(x, y, false);
                }
            }
        }
        frames.push(RGBDFrame::new(color, depth, mask, t)?);
        cams.push(cam);
        occluders.push(rect);
    }
    let dataset = SceneDataset::new(frames, cams, SYNTH_DEPTH_SCALE)?;
    Ok(SyntheticScene { spec: spec.clone(), truth, dataset, occluders })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::motion_mask;
    use crate::train::{color_loss, depth_loss};

    fn small(motion: MotionKind) -> SyntheticSpec {
        SyntheticSpec { num_gaussians: 60, num_frames: 8, width: 24, height: 20, motion, ..Default::default() }
    }

    #[test]
    fn zero_frames_rejected() {
        assert!(generate_synthetic(&SyntheticSpec { num_frames: 0, ..small(MotionKind::Sinusoidal) }).is_err());
    }

    #[test]
    fn zero_amplitude_gives_static_frames() {
        let spec = SyntheticSpec {
            translation_amplitude: 0.0,
            rotation_amplitude: 0.0,
            scale_amplitude: 0.0,
            ..small(MotionKind::Sinusoidal)
        };
        let s = generate_synthetic(&spec).unwrap();
        let f0 = &s.dataset.frames[0];
        for f in &s.dataset.frames[1..] {
            assert_eq!(f.color, f0.color);
            assert_eq!(f.depth, f0.depth);
        }
    }

    #[test]
    fn split_is_seven_to_one() {
        let s = generate_synthetic(&SyntheticSpec { num_frames: 64, ..small(MotionKind::Sinusoidal) }).unwrap();
        assert_eq!((s.dataset.train.len(), s.dataset.test.len()), (56, 8));
    }

    #[test]
    fn occluder_is_masked_and_flagged_by_motion_mask() {
        let spec = SyntheticSpec { occluder: Some(OccluderSpec::default()), ..small(MotionKind::Sinusoidal) };
        let s = generate_synthetic(&spec).unwrap();
        let r = s.occluders[0].unwrap();
        let area = r.area() as f64 / (spec.width * spec.height) as f64;
        assert!((area - 0.2).abs() < 0.03, "{area}");
        let frames = s.dataset.train_frames();
        let f = motion_mask(&frames, 0.1).unwrap();
        for y in 0..spec.height {
            for x in 0..spec.width {
                assert_eq!(frames[0].mask.get(x, y), !r.contains(x, y));
                if r.contains(x, y) {
                    assert!(f.mask.get(x, y));
                }
            }
        }
    }

    #[test]
    fn same_seed_same_frames() {
        let a = generate_synthetic(&small(MotionKind::Poke)).unwrap();
        let b = generate_synthetic(&small(MotionKind::Poke)).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let c = generate_synthetic(&SyntheticSpec { seed: 1, ..small(MotionKind::Poke) }).unwrap();
        assert_ne!(a.dataset.frames[0].color, c.dataset.frames[0].color);
    }

    #[test]
    fn truth_reproduces_frames_exactly() {
        let s = generate_synthetic(&small(MotionKind::Sinusoidal)).unwrap();
        for (f, cam) in s.dataset.frames.iter().zip(&s.dataset.cameras) {
            let out = render(&s.truth.cloud_at(cam.time), cam, [0.0; 3]).unwrap();
            assert_eq!(color_loss(&out.color, &f.color, &f.mask).unwrap(), 0.0);
            assert_eq!(depth_loss(&out.depth, &f.depth, &f.mask).unwrap(), 0.0);
        }
    }

    #[test]
    fn poke_is_confined_in_time() {
        let spec = SyntheticSpec { num_frames: 21, ..small(MotionKind::Poke) };
        let s = generate_synthetic(&spec).unwrap();
        let f = &s.dataset.frames;
        // t = 0.0 .. 0.4 and 0.6 .. 1.0 are identical; t = 0.5 differs
        assert_eq!(f[0].color, f[8].color);
        assert_eq!(f[0].color, f[12].color);
        assert_eq!(f[0].color, f[20].color);
        assert_ne!(f[0].color, f[10].color);
    }

    #[test]
    fn tissue_covers_the_view() {
        let s = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let cam = &s.dataset.cameras[0];
        let out = render(&s.truth.cloud_at(0.0), cam, [0.0; 3]).unwrap();
        let min_alpha = out.accum_alpha.data.iter().fold(1.0f64, |a, &b| a.min(b));
        // background leaks through by at most 2% anywhere
        assert!(min_alpha > 0.98, "{min_alpha}");
    }
}
