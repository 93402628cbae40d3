//! Joint optimization of the canonical cloud and its deformation curves.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::SceneDataset;
use crate::error::{invalid, Result};
use crate::fdm::{BasisKind, DEFAULT_NUM_BASES};
use crate::image::{check_dims, ColorImage, Mask, ScalarImage};
use crate::init::{
    backproject, fuse_points, median_spacing, motion_mask, scene_extent, seed_to_gaussians, SeedPointCloud,
    DEFAULT_TAU,
};
use crate::model::{sigmoid, unit_quat_to_rotation, GaussianCloud};
use crate::optim::{adam_step, AdamState};
use crate::raster::{render, render_backward, BackwardOutput};

/// Rendered depths at or below this are excluded from the depth loss.
pub const DEPTH_EPS: f64 = 1e-4;
/// Scale divisor applied to both halves of a split Gaussian.
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;

/// Learning-rate multipliers relative to `lr_initial`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrMultipliers {
    /// Also scaled by the scene extent, and decayed over training.
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
    pub fdm_weight: f64,
    pub fdm_center: f64,
    pub fdm_width: f64,
}

impl Default for LrMultipliers {
    fn default() -> Self {
        Self {
            position: 0.1,
            rotation: 0.625,
            scale: 3.125,
            opacity: 31.25,
            color: 1.5625,
            fdm_weight: 1.0,
            fdm_center: 1.0,
            fdm_width: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr_initial: f64,
    pub lr: LrMultipliers,
    /// Final position learning rate as a fraction of the initial one.
    pub position_lr_final_ratio: f64,
    pub densify_freeze_iters: usize,
    /// Last iteration at which densification may run.
    pub densify_until_iter: usize,
    pub densify_interval: usize,
    /// Threshold on the mean screen-space (NDC) positional gradient norm.
    pub grad_densify_threshold: f64,
    /// Gaussians larger than this fraction of the scene extent are split,
    /// smaller ones cloned.
    pub percent_dense: f64,
    pub opacity_prune_threshold: f64,
    pub seed: u64,
    pub num_bases: usize,
    pub basis: BasisKind,
    pub sh_degree: usize,
    pub tau: f64,
    /// Motion-aware point fusion during initialization.
    pub mapf: bool,
    /// Fusion voxel size; `None` uses the median point spacing of the first
    /// frame's cloud.
    pub voxel_size: Option<f64>,
    pub color_weight: f64,
    pub depth_weight: f64,
    pub background: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            lr_initial: 1.6e-3,
            lr: LrMultipliers::default(),
            position_lr_final_ratio: 0.01,
            densify_freeze_iters: 600,
            densify_until_iter: 1500,
            densify_interval: 100,
            grad_densify_threshold: 2e-4,
            percent_dense: 0.01,
            opacity_prune_threshold: 0.005,
            seed: 0,
            num_bases: DEFAULT_NUM_BASES,
            basis: BasisKind::LearnableGaussian,
            sh_degree: 0,
            tau: DEFAULT_TAU,
            mapf: true,
            voxel_size: None,
            color_weight: 1.0,
            depth_weight: 1.0,
            background: [0.0; 3],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations > 0 && self.densify_freeze_iters > self.iterations {
            return Err(invalid("densify_freeze_iters exceeds iterations"));
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return Err(invalid("lr_initial must be positive"));
        }
        if self.densify_interval == 0 {
            return Err(invalid("densify_interval must be positive"));
        }
        if self.num_bases == 0 {
            return Err(invalid("basis count must be at least 1"));
        }
        if !(self.tau > 0.0) {
            return Err(invalid("tau must be positive"));
        }
        if !(self.color_weight >= 0.0 && self.depth_weight >= 0.0) {
            return Err(invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Losses of one training iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub color: f64,
    pub depth: f64,
    pub total: f64,
    /// Pixels with a set mask.
    pub valid_pixels: usize,
}

/// One row of the loss history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: LossReport,
    pub num_gaussians: usize,
}

/// Mean absolute color error over masked pixels and channels, and its
/// gradient w.r.t. the rendered image.
pub fn color_loss_grad(rendered: &ColorImage, target: &ColorImage, mask: &Mask) -> Result<(f64, ColorImage)> {
    let dims = (target.width, target.height);
    check_dims("rendered color", (rendered.width, rendered.height), dims)?;
    check_dims("mask", (mask.width, mask.height), dims)?;
    let mut grad = ColorImage::new(dims.0, dims.1, [0.0; 3]);
    let count = mask.count();
    if count == 0 {
        return Ok((0.0, grad));
    }
    let norm = 1.0 / (3 * count) as f64;
    let mut total = 0.0;
    for p in 0..rendered.data.len() {
        if !mask.data[p] {
            continue;
        }
        for ch in 0..3 {
            let r = rendered.data[p][ch] - target.data[p][ch];
            total += r.abs();
            grad.data[p][ch] = sign(r) * norm;
        }
    }
    Ok((total * norm, grad))
}

pub fn color_loss(rendered: &ColorImage, target: &ColorImage, mask: &Mask) -> Result<f64> {
    color_loss_grad(rendered, target, mask).map(|(l, _)| l)
}

/// Mean absolute inverse-depth error over pixels that are masked in, have
/// positive target depth and rendered depth above [`DEPTH_EPS`]. Returns the
/// loss, its gradient w.r.t. the rendered depth and the valid pixel count.
pub fn depth_loss_grad(
    rendered: &ScalarImage,
    target: &ScalarImage,
    mask: &Mask,
) -> Result<(f64, ScalarImage, usize)> {
    let dims = (target.width, target.height);
    check_dims("rendered depth", (rendered.width, rendered.height), dims)?;
    check_dims("mask", (mask.width, mask.height), dims)?;
    let mut grad = ScalarImage::new(dims.0, dims.1, 0.0);
    let valid: Vec<usize> = (0..target.data.len())
        .filter(|&p| mask.data[p] && target.data[p] > 0.0 && rendered.data[p] > DEPTH_EPS)
        .collect();
    if valid.is_empty() {
        return Ok((0.0, grad, 0));
    }
    let norm = 1.0 / valid.len() as f64;
    let mut total = 0.0;
    for &p in &valid {
        let d = rendered.data[p];
        let r = 1.0 / d - 1.0 / target.data[p];
        total += r.abs();
        grad.data[p] = -sign(r) * norm / (d * d);
    }
    Ok((total * norm, grad, valid.len()))
}

pub fn depth_loss(rendered: &ScalarImage, target: &ScalarImage, mask: &Mask) -> Result<f64> {
    depth_loss_grad(rendered, target, mask).map(|(l, _, _)| l)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Seed points used to build the canonical cloud, before conversion.
#[derive(Clone, Debug, PartialEq)]
pub struct InitReport {
    pub canonical_points: usize,
    pub fused_points: usize,
    pub seed: SeedPointCloud,
}

/// Builds the canonical seed cloud from the first training frame, optionally
/// fused with points from later training frames under the motion mask.
pub fn initial_seed(data: &SceneDataset, cfg: &TrainConfig) -> Result<InitReport> {
    let frames = data.train_frames();
    let cams = data.train_cameras();
    let (Some(f0), Some(c0)) = (frames.first(), cams.first()) else {
        return Err(invalid("training set is empty"));
    };
    let canonical = backproject(f0, c0)?;
    if !cfg.mapf || canonical.is_empty() {
        let n = canonical.len();
        return Ok(InitReport { canonical_points: n, fused_points: 0, seed: canonical });
    }
    let f = motion_mask(&frames, cfg.tau)?;
    let voxel = cfg.voxel_size.unwrap_or_else(|| median_spacing(&canonical.points));
    let fused = fuse_points(&canonical, &frames, &cams, &f, voxel)?;
    log::info!(
        "fusion: {} canonical points, {} fused, stencil covers {} pixels",
        canonical.len(),
        fused.len() - canonical.len(),
        f.mask.count()
    );
    Ok(InitReport { canonical_points: canonical.len(), fused_points: fused.len() - canonical.len(), seed: fused })
}

/// Parameter groups in optimizer order.
const GROUPS: [&str; 8] =
    ["position", "rotation", "scale", "opacity", "color", "fdm_weight", "fdm_center", "fdm_width"];

/// Per-group Adam state for a cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudOptimizer {
    pub states: [AdamState; 8],
}

impl CloudOptimizer {
    pub fn new(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        let f = cloud.fdm.weights.len();
        Self {
            states: [
                AdamState::new(3 * n),
                AdamState::new(4 * n),
                AdamState::new(3 * n),
                AdamState::new(n),
                AdamState::new(3 * cloud.colors.len()),
                AdamState::new(f),
                AdamState::new(f),
                AdamState::new(f),
            ],
        }
    }

    fn widths(cloud: &GaussianCloud) -> [usize; 8] {
        let s = cloud.fdm.stride();
        [3, 4, 3, 1, 3 * cloud.coeffs_per_gaussian(), s, s, s]
    }

    /// See [`AdamState::reindex`]; `cloud` is the cloud before reindexing.
    pub fn reindex(&self, cloud: &GaussianCloud, sources: &[Option<usize>]) -> Self {
        let w = Self::widths(cloud);
        Self { states: std::array::from_fn(|g| self.states[g].reindex(sources, w[g])) }
    }

    fn step(&mut self, cloud: &mut GaussianCloud, back: &BackwardOutput, lrs: &[f64; 8]) -> Result<()> {
        let g = &back.grads;
        let learn_shape = cloud.fdm.kind == BasisKind::LearnableGaussian;
        let [s0, s1, s2, s3, s4, s5, s6, s7] = &mut self.states;
        adam_step(GROUPS[0], cloud.positions.as_flattened_mut(), g.positions.as_flattened(), s0, lrs[0])?;
        adam_step(GROUPS[1], cloud.rotations.as_flattened_mut(), g.rotations.as_flattened(), s1, lrs[1])?;
        adam_step(GROUPS[2], cloud.log_scales.as_flattened_mut(), g.log_scales.as_flattened(), s2, lrs[2])?;
        adam_step(GROUPS[3], &mut cloud.opacity_logits, &g.opacity_logits, s3, lrs[3])?;
        adam_step(GROUPS[4], cloud.colors.as_flattened_mut(), g.colors.as_flattened(), s4, lrs[4])?;
        adam_step(GROUPS[5], &mut cloud.fdm.weights, &g.fdm.weights, s5, lrs[5])?;
        if learn_shape {
            adam_step(GROUPS[6], &mut cloud.fdm.centers, &g.fdm.centers, s6, lrs[6])?;
            adam_step(GROUPS[7], &mut cloud.fdm.widths, &g.fdm.widths, s7, lrs[7])?;
        }
        Ok(())
    }
}

/// Running screen-space gradient statistics for densification.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_accum: Vec<f64>,
    pub count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self { grad_accum: vec![0.0; n], count: vec![0; n] }
    }

    /// Adds one view's NDC gradient norms for the visible Gaussians.
    pub fn record(&mut self, back: &BackwardOutput, width: usize, height: usize) {
        for (i, g) in back.mean2d_grads.iter().enumerate() {
            if back.visible[i] {
                let gx = g[0] * width as f64 * 0.5;
                let gy = g[1] * height as f64 * 0.5;
                self.grad_accum[i] += (gx * gx + gy * gy).sqrt();
                self.count[i] += 1;
            }
        }
    }

    fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.grad_accum[i] / self.count[i] as f64
        }
    }
}

/// Densification outcome counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Clones small and splits large high-gradient Gaussians, then prunes
/// transparent ones. No-op before `densify_freeze_iters`, after
/// `densify_until_iter` and off the `densify_interval` grid. Returns, for each
/// output Gaussian, the input Gaussian it was derived from (`None` marks a
/// new child) so optimizer state can follow.
pub fn densify_and_prune(
    cloud: &mut GaussianCloud,
    stats: &DensifyStats,
    iteration: usize,
    cfg: &TrainConfig,
    extent: f64,
    rng: &mut ChaCha8Rng,
) -> Option<(Vec<Option<usize>>, DensifyReport)> {
    if iteration < cfg.densify_freeze_iters
        || iteration > cfg.densify_until_iter
        || iteration == 0
        || iteration % cfg.densify_interval != 0
    {
        return None;
    }
    let n = cloud.len();
    let mut report = DensifyReport::default();
    let mut parents: Vec<usize> = Vec::with_capacity(n);
    let mut children: Vec<(usize, [f64; 3], Option<[f64; 3]>)> = Vec::new();
    for i in 0..n {
        let hot = stats.mean(i) >= cfg.grad_densify_threshold;
        let ls = cloud.log_scales[i];
        let max_scale = ls.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)).exp();
        if hot && max_scale > cfg.percent_dense * extent {
            report.split += 1;
            let shrunk = ls.map(|s| (s.exp() / SPLIT_SCALE_DIVISOR).ln());
            for _ in 0..2 {
                children.push((i, sample_offset(cloud, i, rng), Some(shrunk)));
            }
            continue;
        }
        parents.push(i);
        if hot {
            report.cloned += 1;
            children.push((i, sample_offset(cloud, i, rng), None));
        }
    }

    let mut sources: Vec<Option<usize>> = parents.iter().map(|&i| Some(i)).collect();
    let mut order = parents.clone();
    order.extend(children.iter().map(|c| c.0));
    sources.extend(children.iter().map(|_| None));
    let mut out = cloud.select(&order);
    for (k, (_, offset, scale)) in children.iter().enumerate() {
        let j = parents.len() + k;
        for a in 0..3 {
            out.positions[j][a] += offset[a];
        }
        if let Some(s) = scale {
            out.log_scales[j] = *s;
        }
    }

    let keep: Vec<usize> =
        (0..out.len()).filter(|&j| sigmoid(out.opacity_logits[j]) >= cfg.opacity_prune_threshold).collect();
    report.pruned = out.len() - keep.len();
    if report == DensifyReport::default() {
        return None;
    }
    *cloud = out.select(&keep);
    Some((keep.iter().map(|&j| sources[j]).collect(), report))
}

/// Draws a displacement from the Gaussian's own canonical covariance.
fn sample_offset(cloud: &GaussianCloud, i: usize, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let q = cloud.rotations[i];
    let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let r = unit_quat_to_rotation(q.map(|v| v / qn));
    let s = cloud.log_scales[i].map(f64::exp);
    let z: [f64; 3] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
    let d = r * Vector3::new(s[0] * z[0], s[1] * z[1], s[2] * z[2]);
    [d.x, d.y, d.z]
}

/// Serializable snapshot of the training RNG.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Training loop state.
pub struct Trainer<'a> {
    data: &'a SceneDataset,
    pub cfg: TrainConfig,
    pub cloud: GaussianCloud,
    pub optimizer: CloudOptimizer,
    pub stats: DensifyStats,
    pub rng: ChaCha8Rng,
    pub iteration: usize,
    pub history: Vec<LossRecord>,
    /// Scene radius used for position learning rates and split decisions.
    pub extent: f64,
    pub init: InitReport,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a SceneDataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if data.train.is_empty() {
            return Err(invalid("training set is empty"));
        }
        let init = initial_seed(data, &cfg)?;
        let cloud = seed_to_gaussians(&init.seed, cfg.sh_degree, cfg.num_bases, cfg.basis)?;
        let extent = (scene_extent(&init.seed.points) * 0.5).max(1e-6);
        Ok(Self {
            data,
            optimizer: CloudOptimizer::new(&cloud),
            stats: DensifyStats::new(cloud.len()),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            iteration: 0,
            history: Vec::new(),
            extent,
            cloud,
            cfg,
            init,
        })
    }

    fn learning_rates(&self) -> [f64; 8] {
        let c = &self.cfg;
        let m = &c.lr;
        let frac = if c.iterations > 0 { self.iteration as f64 / c.iterations as f64 } else { 0.0 };
        let decay = c.position_lr_final_ratio.powf(frac.min(1.0));
        [
            c.lr_initial * m.position * self.extent * decay,
            c.lr_initial * m.rotation,
            c.lr_initial * m.scale,
            c.lr_initial * m.opacity,
            c.lr_initial * m.color,
            c.lr_initial * m.fdm_weight,
            c.lr_initial * m.fdm_center,
            c.lr_initial * m.fdm_width,
        ]
    }

    /// Runs one iteration on a uniformly drawn training frame.
    pub fn step(&mut self) -> Result<LossRecord> {
        let idx = self.data.train[self.rng.random_range(0..self.data.train.len())];
        let frame = &self.data.frames[idx];
        let cam = &self.data.cameras[idx];
        let bg = self.cfg.background;
        let out = render(&self.cloud, cam, bg)?;
        let (lc, mut gc) = color_loss_grad(&out.color, &frame.color, &frame.mask)?;
        let (ld, mut gd, _) = depth_loss_grad(&out.depth, &frame.depth, &frame.mask)?;
        for g in gc.data.iter_mut().flatten() {
            *g *= self.cfg.color_weight;
        }
        for g in &mut gd.data {
            *g *= self.cfg.depth_weight;
        }
        let back = render_backward(&self.cloud, cam, bg, &gc, &gd)?;
        self.stats.record(&back, cam.width, cam.height);
        let lrs = self.learning_rates();
        self.optimizer.step(&mut self.cloud, &back, &lrs)?;
        self.iteration += 1;

        if let Some((sources, report)) =
            densify_and_prune(&mut self.cloud, &self.stats, self.iteration, &self.cfg, self.extent, &mut self.rng)
        {
            log::debug!(
                "iteration {}: cloned {}, split {}, pruned {} -> {} Gaussians",
                self.iteration,
                report.cloned,
                report.split,
                report.pruned,
                self.cloud.len()
            );
            // `sources` indexes the pre-densify cloud, whose widths match the
            // current one.
            self.optimizer = self.optimizer.reindex(&self.cloud, &sources);
        }
        if self.iteration >= self.cfg.densify_freeze_iters && self.iteration % self.cfg.densify_interval == 0 {
            self.stats = DensifyStats::new(self.cloud.len());
        }

        let record = LossRecord {
            iteration: self.iteration,
            loss: LossReport {
                color: lc,
                depth: ld,
                total: self.cfg.color_weight * lc + self.cfg.depth_weight * ld,
                valid_pixels: frame.mask.count(),
            },
            num_gaussians: self.cloud.len(),
        };
        self.history.push(record);
        Ok(record)
    }

    pub fn run(&mut self) -> Result<()> {
        while self.iteration < self.cfg.iterations {
            let r = self.step()?;
            if r.iteration % 100 == 0 {
                log::info!(
                    "iteration {}: L_C {:.5} L_D {:.5} N {}",
                    r.iteration,
                    r.loss.color,
                    r.loss.depth,
                    r.num_gaussians
                );
            }
        }
        Ok(())
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub cloud: GaussianCloud,
    pub history: Vec<LossRecord>,
    pub rng: RngState,
    pub init: InitReport,
}

/// Initializes from the dataset and runs `cfg.iterations` iterations.
pub fn train(data: &SceneDataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    let mut t = Trainer::new(data, cfg.clone())?;
    t.run()?;
    Ok(TrainOutput { rng: RngState::capture(&t.rng), cloud: t.cloud, history: t.history, init: t.init })
}

/// Centered moving average over `window` entries (shrinking at the ends).
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraFrame;
    use crate::init::RGBDFrame;
    use crate::model::logit;
    use proptest::{prop_assert, prop_assert_eq, proptest};

    #[test]
    fn color_loss_examples() {
        let c = ColorImage::new(4, 2, [0.3, 0.5, 0.7]);
        let m = Mask::new(4, 2, true);
        assert_eq!(color_loss(&c, &c, &m).unwrap(), 0.0);
        let shifted = ColorImage::new(4, 2, [0.5, 0.7, 0.9]);
        assert!((color_loss(&shifted, &c, &m).unwrap() - 0.2).abs() < 1e-12);

        let mut half = c.clone();
        let mut hm = Mask::new(4, 2, true);
        for x in 0..4 {
            half.set(x, 0, [0.5, 0.7, 0.9]);
            hm.set(x, 0, false);
        }
        assert_eq!(color_loss(&half, &c, &hm).unwrap(), 0.0);
        assert!(color_loss(&ColorImage::new(3, 2, [0.0; 3]), &c, &m).is_err());
    }

    #[test]
    fn depth_loss_examples() {
        let d = ScalarImage::new(3, 3, 2.0);
        let m = Mask::new(3, 3, true);
        assert_eq!(depth_loss(&d, &d, &m).unwrap(), 0.0);

        let mut single = Mask::new(3, 3, false);
        single.set(1, 1, true);
        let gt = ScalarImage::new(3, 3, 1.0);
        assert!((depth_loss(&d, &gt, &single).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(depth_loss(&d, &gt, &Mask::new(3, 3, false)).unwrap(), 0.0);
        assert!(depth_loss(&d, &gt, &Mask::new(2, 3, true)).is_err());
    }

    #[test]
    fn loss_gradients_match_differences() {
        let rendered = ColorImage::from_fn(3, 2, |x, y| [0.1 * x as f64, 0.2 * y as f64 + 0.05, 0.33]);
        let target = ColorImage::new(3, 2, [0.15, 0.1, 0.3]);
        let mut m = Mask::new(3, 2, true);
        m.set(0, 1, false);
        let (_, g) = color_loss_grad(&rendered, &target, &m).unwrap();
        let h = 1e-7;
        for p in 0..6 {
            for ch in 0..3 {
                let mut a = rendered.clone();
                let mut b = rendered.clone();
                a.data[p][ch] += h;
                b.data[p][ch] -= h;
                let fd = (color_loss(&a, &target, &m).unwrap() - color_loss(&b, &target, &m).unwrap()) / (2.0 * h);
                assert!((fd - g.data[p][ch]).abs() < 1e-6);
            }
        }
        let rd = ScalarImage { width: 3, height: 1, data: vec![1.5, 2.5, 0.8] };
        let td = ScalarImage { width: 3, height: 1, data: vec![2.0, 2.0, 0.0] };
        let dm = Mask::new(3, 1, true);
        let (_, g, n) = depth_loss_grad(&rd, &td, &dm).unwrap();
        assert_eq!(n, 2);
        for p in 0..3 {
            let mut a = rd.clone();
            let mut b = rd.clone();
            a.data[p] += h;
            b.data[p] -= h;
            let fd = (depth_loss(&a, &td, &dm).unwrap() - depth_loss(&b, &td, &dm).unwrap()) / (2.0 * h);
            assert!((fd - g.data[p]).abs() < 1e-6);
        }
    }

    fn small_cloud(opacities: &[f64]) -> GaussianCloud {
        let mut c = GaussianCloud::empty(0, 3, BasisKind::LearnableGaussian).unwrap();
        for (k, &o) in opacities.iter().enumerate() {
            c.push([k as f64, 0.0, 3.0], [1.0, 0.0, 0.0, 0.0], [-3.0; 3], logit(o), [0.5; 3]);
        }
        c
    }

    #[test]
    fn densify_frozen_before_threshold_iteration() {
        let mut c = small_cloud(&[0.001, 0.5]);
        let stats = DensifyStats { grad_accum: vec![1.0, 1.0], count: vec![1, 1] };
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let before = c.clone();
        assert!(densify_and_prune(&mut c, &stats, 100, &cfg, 1.0, &mut rng).is_none());
        assert_eq!(c, before);
    }

    #[test]
    fn densify_without_triggers_is_identity() {
        let mut c = small_cloud(&[0.3, 0.5]);
        let stats = DensifyStats::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let before = c.clone();
        assert!(densify_and_prune(&mut c, &stats, 700, &TrainConfig::default(), 1.0, &mut rng).is_none());
        assert_eq!(c, before);
    }

    #[test]
    fn transparent_gaussian_is_pruned() {
        let mut c = small_cloud(&[0.3, 0.001, 0.5]);
        let stats = DensifyStats::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (sources, report) =
            densify_and_prune(&mut c, &stats, 700, &TrainConfig::default(), 1.0, &mut rng).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(sources, vec![Some(0), Some(2)]);
        assert_eq!(report.pruned, 1);
        assert_eq!(c.positions, vec![[0.0, 0.0, 3.0], [2.0, 0.0, 3.0]]);
    }

    #[test]
    fn clone_and_split_copy_deformation() {
        let mut c = small_cloud(&[0.5, 0.5]);
        c.log_scales[1] = [0.0; 3];
        c.fdm.weights_mut(0, 2)[1] = 0.25;
        c.fdm.weights_mut(1, 4)[0] = -0.5;
        let stats = DensifyStats { grad_accum: vec![1.0, 1.0], count: vec![1, 1] };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (sources, report) =
            densify_and_prune(&mut c, &stats, 700, &TrainConfig::default(), 10.0, &mut rng).unwrap();
        assert_eq!((report.cloned, report.split, report.pruned), (1, 1, 0));
        assert_eq!(sources, vec![Some(0), None, None, None]);
        assert_eq!(c.len(), 4);
        assert_eq!(c.fdm.channel(1, 2).weights[1], 0.25);
        for j in [2, 3] {
            assert_eq!(c.fdm.channel(j, 4).weights[0], -0.5);
            let s = c.log_scales[j][0].exp();
            assert!((s - 1.0 / SPLIT_SCALE_DIVISOR).abs() < 1e-12);
        }
        assert_ne!(c.positions[1], c.positions[0]);
    }

    #[test]
    fn rng_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let _: u64 = rng.random();
        let _: u32 = rng.random();
        let snap = RngState::capture(&rng);
        let mut back = snap.restore();
        for _ in 0..5 {
            assert_eq!(rng.random::<u64>(), back.random::<u64>());
        }
    }

    fn one_gaussian_dataset(frames: usize) -> SceneDataset {
        let cam = CameraFrame::simple(16.0, 16.0, 7.5, 7.5, 16, 16, 0.0).unwrap();
        let mut gt = GaussianCloud::empty(0, 1, BasisKind::LearnableGaussian).unwrap();
        gt.push([0.0, 0.0, 2.0], [1.0, 0.0, 0.0, 0.0], [0.6f64.ln(); 3], logit(0.9), [0.8, 0.3, 0.2]);
        let mut fs = Vec::new();
        let mut cams = Vec::new();
        for k in 0..frames {
            let t = if frames > 1 { k as f64 / (frames - 1) as f64 } else { 0.0 };
            let c = cam.with_time(t);
            let out = render(&gt, &c, [0.0; 3]).unwrap();
            let mask = Mask { width: 16, height: 16, data: out.accum_alpha.data.iter().map(|&a| a > 0.5).collect() };
            fs.push(RGBDFrame::new(out.color, out.depth, mask, t).unwrap());
            cams.push(c);
        }
        SceneDataset::new(fs, cams, 1e-3).unwrap()
    }

    #[test]
    fn zero_iterations_returns_initial_cloud() {
        let data = one_gaussian_dataset(2);
        let cfg = TrainConfig { iterations: 0, num_bases: 2, ..TrainConfig::default() };
        let init = initial_seed(&data, &cfg).unwrap();
        let expected = seed_to_gaussians(&init.seed, 0, 2, BasisKind::LearnableGaussian).unwrap();
        let out = train(&data, &cfg).unwrap();
        assert_eq!(out.cloud, expected);
        assert!(out.history.is_empty());
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let data = one_gaussian_dataset(1);
        let empty = SceneDataset { train: vec![], ..data };
        assert!(train(&empty, &TrainConfig::default()).is_err());
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.iterations, c.lr_initial, c.num_bases, c.densify_freeze_iters), (3000, 1.6e-3, 17, 600));
        assert_eq!(c.basis, BasisKind::LearnableGaussian);
        assert_eq!((c.color_weight, c.depth_weight), (1.0, 1.0));
    }

    #[test]
    fn static_single_gaussian_overfits() {
        let data = one_gaussian_dataset(1);
        let cfg = TrainConfig {
            iterations: 500,
            num_bases: 1,
            densify_freeze_iters: 500,
            densify_until_iter: 0,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(&data, cfg).unwrap();
        t.run().unwrap();
        let out = render(&t.cloud, &data.cameras[0], [0.0; 3]).unwrap();
        let lc = color_loss(&out.color, &data.frames[0].color, &data.frames[0].mask).unwrap();
        assert!(lc < 0.01, "L_C = {lc}");
        // constant population while frozen
        assert!(t.history.iter().all(|r| r.num_gaussians == t.history[0].num_gaussians));
    }

    proptest! {
        #[test]
        fn losses_ignore_masked_out_pixels(seed in 0u64..500, bump in -1.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (5, 4);
            let mut rand_img = || ColorImage::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()]);
            let a = rand_img();
            let b = rand_img();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let m = Mask { width: w, height: h, data: (0..w * h).map(|_| rng.random_bool(0.6)).collect() };
            let da = ScalarImage { width: w, height: h, data: (0..w * h).map(|_| rng.random_range(0.5..3.0)).collect() };
            let db = ScalarImage { width: w, height: h, data: (0..w * h).map(|_| rng.random_range(0.5..3.0)).collect() };
            let mut a2 = a.clone();
            let mut da2 = da.clone();
            for p in 0..w * h {
                if !m.data[p] {
                    a2.data[p][0] += bump;
                    da2.data[p] += bump.abs() + 0.1;
                }
            }
            prop_assert_eq!(color_loss(&a, &b, &m).unwrap(), color_loss(&a2, &b, &m).unwrap());
            prop_assert_eq!(depth_loss(&da, &db, &m).unwrap(), depth_loss(&da2, &db, &m).unwrap());
            prop_assert!(color_loss(&a, &b, &m).unwrap() >= 0.0);
        }

        #[test]
        fn losses_vanish_only_on_agreement(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = ColorImage::from_fn(4, 4, |_, _| [rng.random(), rng.random(), rng.random()]);
            let m = Mask::new(4, 4, true);
            prop_assert_eq!(color_loss(&a, &a, &m).unwrap(), 0.0);
            let mut b = a.clone();
            b.data[rng.random_range(0..16)][1] += 0.01;
            prop_assert!(color_loss(&a, &b, &m).unwrap() > 0.0);
        }
    }
}
