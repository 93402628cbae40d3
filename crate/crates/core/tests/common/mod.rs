//! Finite-difference gradient oracle shared by the gradient and acceptance
//! suites. It only uses forward renders, never the backward pass.
#![allow(dead_code)]

use dynsplat::camera::CameraFrame;
use dynsplat::fdm::BasisKind;
use dynsplat::model::logit;
use dynsplat::raster::{render_backward, render_with_trace, CloudGrads, PixelTrace, RenderOutput};
use dynsplat::{ColorImage, GaussianCloud, ScalarImage};
use nalgebra::{Matrix3, Rotation3, Translation3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct GradScene {
    pub cloud: GaussianCloud,
    pub cam: CameraFrame,
    pub background: [f64; 3],
    pub grad_color: ColorImage,
    pub grad_depth: ScalarImage,
}

/// Random scene: a slightly rotated 16x16 camera looking at `n` Gaussians
/// with random deformation curves.
pub fn random_scene(seed: u64, n: usize, num_bases: usize, kind: BasisKind, sh_degree: usize) -> GradScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (16, 16);
    let pose = Translation3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.0)
        * Rotation3::from_euler_angles(
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.3..0.3),
        );
    let cam = CameraFrame::new(
        Matrix3::new(16.0, 0.0, 7.5, 0.0, 17.0, 7.2, 0.0, 0.0, 1.0),
        pose.to_homogeneous(),
        rng.random_range(0.0..1.0),
        w,
        h,
    )
    .unwrap();
    let mut cloud = GaussianCloud::empty(sh_degree, num_bases, kind).unwrap();
    for _ in 0..n {
        let z: f64 = rng.random_range(2.0..4.0);
        let world = cam.cam_to_world(&nalgebra::Vector3::new(
            rng.random_range(-0.35..0.35) * z,
            rng.random_range(-0.35..0.35) * z,
            z,
        ));
        let rot = [
            rng.random_range(0.5..1.0),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        ];
        let ls = [
            rng.random_range(0.12f64..0.5).ln(),
            rng.random_range(0.12f64..0.5).ln(),
            rng.random_range(0.12f64..0.5).ln(),
        ];
        let color = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
        cloud.push([world.x, world.y, world.z], rot, ls, logit(rng.random_range(0.2..0.85)), color);
        let i = cloud.len() - 1;
        let k = cloud.coeffs_per_gaussian();
        for c in 1..k {
            cloud.colors[i * k + c] = [
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
            ];
        }
    }
    for ch in 0..10 {
        let amp = match ch {
            0..=2 => 0.05,
            3..=6 => 0.1,
            _ => 0.15,
        };
        for i in 0..n {
            for v in cloud.fdm.weights_mut(i, ch) {
                *v = rng.random_range(-amp..amp);
            }
            for v in cloud.fdm.centers_mut(i, ch) {
                *v = rng.random_range(0.0..1.0);
            }
            let b = num_bases as f64;
            for v in cloud.fdm.widths_mut(i, ch) {
                *v = rng.random_range(0.5 / b..2.0 / b).max(0.02);
            }
        }
    }
    let grad_color = ColorImage::from_fn(w, h, |_, _| {
        [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
    });
    let mut grad_depth = ScalarImage::new(w, h, 0.0);
    for v in &mut grad_depth.data {
        *v = rng.random_range(-0.3..0.3);
    }
    GradScene { cloud, cam, background: [0.1, 0.2, 0.3], grad_color, grad_depth }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamClass {
    Position,
    Rotation,
    Scale,
    Opacity,
    Color,
    FdmWeight,
    FdmCenter,
    FdmWidth,
}

impl ParamClass {
    pub const ALL: [ParamClass; 8] = [
        ParamClass::Position,
        ParamClass::Rotation,
        ParamClass::Scale,
        ParamClass::Opacity,
        ParamClass::Color,
        ParamClass::FdmWeight,
        ParamClass::FdmCenter,
        ParamClass::FdmWidth,
    ];

    /// Central-difference step. Basis centers and widths live on the scale of
    /// the basis width itself (1/B), so they need a much finer step than the
    /// other parameters to keep the truncation error below the tolerance.
    /// Basis weights displace positions directly and share their step.
    pub fn step(self) -> f64 {
        match self {
            ParamClass::Position | ParamClass::FdmWeight => 1e-4,
            ParamClass::FdmCenter | ParamClass::FdmWidth => 1e-5,
            _ => 1e-3,
        }
    }

    pub fn count(self, cloud: &GaussianCloud) -> usize {
        match self {
            ParamClass::Position | ParamClass::Scale => 3 * cloud.len(),
            ParamClass::Rotation => 4 * cloud.len(),
            ParamClass::Opacity => cloud.len(),
            ParamClass::Color => 3 * cloud.colors.len(),
            _ => cloud.fdm.weights.len(),
        }
    }

    pub fn value_mut(self, cloud: &mut GaussianCloud, k: usize) -> &mut f64 {
        match self {
            ParamClass::Position => &mut cloud.positions[k / 3][k % 3],
            ParamClass::Rotation => &mut cloud.rotations[k / 4][k % 4],
            ParamClass::Scale => &mut cloud.log_scales[k / 3][k % 3],
            ParamClass::Opacity => &mut cloud.opacity_logits[k],
            ParamClass::Color => &mut cloud.colors[k / 3][k % 3],
            ParamClass::FdmWeight => &mut cloud.fdm.weights[k],
            ParamClass::FdmCenter => &mut cloud.fdm.centers[k],
            ParamClass::FdmWidth => &mut cloud.fdm.widths[k],
        }
    }

    pub fn grad(self, grads: &CloudGrads, k: usize) -> f64 {
        match self {
            ParamClass::Position => grads.positions[k / 3][k % 3],
            ParamClass::Rotation => grads.rotations[k / 4][k % 4],
            ParamClass::Scale => grads.log_scales[k / 3][k % 3],
            ParamClass::Opacity => grads.opacity_logits[k],
            ParamClass::Color => grads.colors[k / 3][k % 3],
            ParamClass::FdmWeight => grads.fdm.weights[k],
            ParamClass::FdmCenter => grads.fdm.centers[k],
            ParamClass::FdmWidth => grads.fdm.widths[k],
        }
    }
}

fn weighted_loss(scene: &GradScene, out: &RenderOutput, stable: Option<&[bool]>) -> f64 {
    let mut total = 0.0;
    for (p, (c, d)) in out.color.data.iter().zip(&out.depth.data).enumerate() {
        if let Some(s) = stable {
            if !s[p] {
                continue;
            }
        }
        let g = scene.grad_color.data[p];
        total += g[0] * c[0] + g[1] * c[1] + g[2] * c[2] + scene.grad_depth.data[p] * d;
    }
    total
}

#[derive(Clone, Debug, Default)]
pub struct ClassReport {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub unstable_params: usize,
}

pub const REL_TOL: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-6;

pub fn agrees(analytic: f64, fd: f64) -> (bool, f64) {
    let diff = (analytic - fd).abs();
    let scale = analytic.abs().max(fd.abs());
    let rel = if scale > 0.0 { diff / scale } else { 0.0 };
    (diff <= ABS_FLOOR || rel < REL_TOL, if diff <= ABS_FLOOR { 0.0 } else { rel })
}

/// Compares every parameter of `class` against central differences.
/// Pixels whose blend list changes under the perturbation are excluded from
/// both sides of the comparison.
pub fn check_class(scene: &GradScene, class: ParamClass) -> ClassReport {
    let (_, base_trace) = render_with_trace(&scene.cloud, &scene.cam, scene.background).unwrap();
    let base_grads =
        render_backward(&scene.cloud, &scene.cam, scene.background, &scene.grad_color, &scene.grad_depth)
            .unwrap()
            .grads;
    let h = class.step();
    let mut report = ClassReport::default();
    let mut cloud = scene.cloud.clone();
    for k in 0..class.count(&scene.cloud) {
        let orig = *class.value_mut(&mut cloud, k);
        *class.value_mut(&mut cloud, k) = orig + h;
        let (out_p, tr_p) = render_with_trace(&cloud, &scene.cam, scene.background).unwrap();
        *class.value_mut(&mut cloud, k) = orig - h;
        let (out_m, tr_m) = render_with_trace(&cloud, &scene.cam, scene.background).unwrap();
        *class.value_mut(&mut cloud, k) = orig;

        let stable: Vec<bool> = (0..base_trace.len())
            .map(|p| tr_p[p] == base_trace[p] && tr_m[p] == base_trace[p])
            .collect();
        let (fd, analytic) = if stable.iter().all(|&s| s) {
            let fd = (weighted_loss(scene, &out_p, None) - weighted_loss(scene, &out_m, None)) / (2.0 * h);
            (fd, class.grad(&base_grads, k))
        } else {
            report.unstable_params += 1;
            let fd = (weighted_loss(scene, &out_p, Some(&stable)) - weighted_loss(scene, &out_m, Some(&stable)))
                / (2.0 * h);
            let grads = masked_backward(scene, &stable);
            (fd, class.grad(&grads, k))
        };
        let (ok, rel) = agrees(analytic, fd);
        report.checked += 1;
        report.max_rel_err = report.max_rel_err.max(rel);
        if !ok {
            report.failures += 1;
            eprintln!("{class:?}[{k}]: analytic {analytic:.9e} vs fd {fd:.9e}");
        }
    }
    report
}

fn masked_backward(scene: &GradScene, stable: &[bool]) -> CloudGrads {
    let mut gc = scene.grad_color.clone();
    let mut gd = scene.grad_depth.clone();
    for (p, &s) in stable.iter().enumerate() {
        if !s {
            gc.data[p] = [0.0; 3];
            gd.data[p] = 0.0;
        }
    }
    render_backward(&scene.cloud, &scene.cam, scene.background, &gc, &gd).unwrap().grads
}

pub fn trace_len(trace: &PixelTrace) -> usize {
    trace.iter().map(|t| t.len()).sum()
}
