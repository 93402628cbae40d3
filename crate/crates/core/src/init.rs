//! Canonical cloud construction from RGB-D frames: backprojection, the
//! motion/occlusion mask and motion-aware point fusion.

use std::collections::HashSet;

use nalgebra::Vector3;

use crate::camera::CameraFrame;
use crate::error::{invalid, Result};
use crate::fdm::{init_fdm, BasisKind};
use crate::image::{check_dims, ColorImage, Mask, ScalarImage};
use crate::knn::mean_neighbor_distances;
use crate::model::{logit, GaussianCloud};
use crate::raster::NEAR_PLANE;

pub const DEFAULT_TAU: f64 = 0.1;
/// Upper bound on the number of donor frames used for fusion.
pub const MAX_DONORS: usize = 8;
pub const INITIAL_OPACITY: f64 = 0.1;
const MIN_INITIAL_SCALE: f64 = 1e-4;
const SCALE_NEIGHBORS: usize = 3;

/// One timestamped RGB-D observation. Depth 0 marks an invalid pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RGBDFrame {
    pub color: ColorImage,
    pub depth: ScalarImage,
    pub mask: Mask,
    pub time: f64,
}

impl RGBDFrame {
    pub fn new(color: ColorImage, depth: ScalarImage, mask: Mask, time: f64) -> Result<Self> {
        let frame = Self { color, depth, mask, time };
        frame.validate()?;
        Ok(frame)
    }

    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }

    pub fn validate(&self) -> Result<()> {
        let dims = (self.color.width, self.color.height);
        check_dims("depth", (self.depth.width, self.depth.height), dims)?;
        check_dims("mask", (self.mask.width, self.mask.height), dims)?;
        if self.depth.data.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(invalid("depth values must be finite and non-negative"));
        }
        if !self.time.is_finite() {
            return Err(invalid("frame timestamp must be finite"));
        }
        Ok(())
    }
}

/// Colored world-space points.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SeedPointCloud {
    pub points: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
}

impl SeedPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn push(&mut self, p: [f64; 3], c: [f64; 3]) {
        self.points.push(p);
        self.colors.push(c);
    }
}

/// Lifts every valid pixel (mask set, depth positive) to a world point.
pub fn backproject(frame: &RGBDFrame, cam: &CameraFrame) -> Result<SeedPointCloud> {
    frame.validate()?;
    check_dims("frame", (frame.width(), frame.height()), (cam.width, cam.height))?;
    let mut out = SeedPointCloud::default();
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            let d = frame.depth.get(x, y);
            if !frame.mask.get(x, y) || d <= 0.0 {
                continue;
            }
            let w = cam.cam_to_world(&cam.unproject(x as f64, y as f64, d));
            out.push([w.x, w.y, w.z], frame.color.get(x, y));
        }
    }
    if out.is_empty() {
        log::warn!("backprojection produced no points: every pixel is masked out or has zero depth");
    }
    Ok(out)
}

/// Pixels of the first frame that are moving or occluded.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionMask {
    pub mask: Mask,
    pub tau: f64,
    pub frame_count: usize,
}

/// Flags first-frame pixels whose color departs from the temporal mean by
/// more than `tau` in some channel, or that are masked out.
pub fn motion_mask(frames: &[RGBDFrame], tau: f64) -> Result<MotionMask> {
    let first = frames.first().ok_or_else(|| invalid("motion mask needs at least one frame"))?;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(invalid(format!("tau must be positive, got {tau}")));
    }
    let (w, h) = (first.width(), first.height());
    let mut sum = vec![[0.0; 3]; w * h];
    for f in frames {
        check_dims("frame", (f.width(), f.height()), (w, h))?;
        for (s, c) in sum.iter_mut().zip(&f.color.data) {
            for ch in 0..3 {
                s[ch] += c[ch];
            }
        }
    }
    let n = frames.len() as f64;
    let mut mask = Mask::new(w, h, false);
    for (p, s) in sum.iter().enumerate() {
        let c0 = first.color.data[p];
        let diff = (0..3).map(|ch| (c0[ch] - s[ch] / n).abs()).fold(0.0, f64::max);
        mask.data[p] = diff > tau || !first.mask.data[p];
    }
    Ok(MotionMask { mask, tau, frame_count: frames.len() })
}

/// Evenly spaced donor indices among frames `1..n`, at most [`MAX_DONORS`].
pub fn donor_indices(n: usize) -> Vec<usize> {
    if n < 2 {
        return Vec::new();
    }
    let avail = n - 1;
    let m = avail.min(MAX_DONORS);
    if m == 1 {
        return vec![1];
    }
    (0..m).map(|k| 1 + (k * (avail - 1) + (m - 1) / 2) / (m - 1)).collect()
}

/// Appends donor-frame points whose projection into the first camera lands
/// on a pixel of `f`. Fused points are deduplicated on a voxel grid of size
/// `voxel` against each other and against the canonical points; canonical
/// points are always kept. A non-positive `voxel` disables deduplication.
pub fn fuse_points(
    canonical: &SeedPointCloud,
    frames: &[RGBDFrame],
    cams: &[CameraFrame],
    f: &MotionMask,
    voxel: f64,
) -> Result<SeedPointCloud> {
    if frames.len() != cams.len() {
        return Err(invalid(format!("{} frames but {} cameras", frames.len(), cams.len())));
    }
    let mut out = canonical.clone();
    let Some(cam0) = cams.first() else {
        return Ok(out);
    };
    check_dims("motion mask", (f.mask.width, f.mask.height), (cam0.width, cam0.height))?;
    if f.mask.count() == 0 {
        return Ok(out);
    }
    let dedup = voxel > 0.0 && voxel.is_finite();
    let key = |p: &[f64; 3]| -> [i64; 3] { std::array::from_fn(|k| (p[k] / voxel).floor() as i64) };
    let mut occupied: HashSet<[i64; 3]> =
        if dedup { canonical.points.iter().map(key).collect() } else { HashSet::new() };

    for i in donor_indices(frames.len()) {
        let donor = backproject(&frames[i], &cams[i])?;
        for (p, c) in donor.points.iter().zip(&donor.colors) {
            let pc = cam0.world_to_cam(&Vector3::from(*p));
            if pc.z <= NEAR_PLANE {
                continue;
            }
            let uv = cam0.project_cam(&pc);
            let (u, v) = (uv.x.round(), uv.y.round());
            if u < 0.0 || v < 0.0 || u >= cam0.width as f64 || v >= cam0.height as f64 {
                continue;
            }
            if !f.mask.get(u as usize, v as usize) {
                continue;
            }
            if dedup && !occupied.insert(key(p)) {
                continue;
            }
            out.push(*p, *c);
        }
    }
    Ok(out)
}

/// Median distance from each point to its nearest neighbor; 0 for fewer than
/// two points.
pub fn median_spacing(points: &[[f64; 3]]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let mut d = mean_neighbor_distances(points, 1);
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

/// Diagonal of the axis-aligned bounding box.
pub fn scene_extent(points: &[[f64; 3]]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (0..3).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt()
}

/// One isotropic Gaussian per seed point, sized by the mean distance to its
/// three nearest neighbors.
pub fn seed_to_gaussians(
    seed: &SeedPointCloud,
    sh_degree: usize,
    num_bases: usize,
    kind: BasisKind,
) -> Result<GaussianCloud> {
    if seed.is_empty() {
        return Err(invalid("cannot build Gaussians from an empty seed cloud"));
    }
    if seed.points.len() != seed.colors.len() {
        return Err(invalid("seed points and colors differ in length"));
    }
    let hi = (scene_extent(&seed.points) / 10.0).max(MIN_INITIAL_SCALE);
    let dists = mean_neighbor_distances(&seed.points, SCALE_NEIGHBORS);
    let mut cloud = GaussianCloud::empty(sh_degree, num_bases, kind)?;
    let op = logit(INITIAL_OPACITY);
    for ((p, c), d) in seed.points.iter().zip(&seed.colors).zip(dists) {
        let s = if d > 0.0 { d.clamp(MIN_INITIAL_SCALE, hi) } else { hi }.ln();
        cloud.push(*p, [1.0, 0.0, 0.0, 0.0], [s; 3], op, *c);
    }
    cloud.fdm = init_fdm(cloud.len(), num_bases, kind)?;
    Ok(cloud)
}
