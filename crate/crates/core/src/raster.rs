//! Differentiable splatting of (deformed) 3D Gaussians.
//!
//! Gaussians are deformed to the camera timestamp, projected with the local
//! affine (EWA) approximation of the perspective map, globally sorted by view
//! depth and alpha-blended front to back per pixel. The backward pass
//! re-derives each pixel's blend list and propagates image-space gradients
//! to every canonical and deformation parameter.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::CameraFrame;
use crate::error::{invalid, Error, Result};
use crate::fdm::{deform_gaussian, DeformEvaluator, FdmParams, NUM_CHANNELS};
use crate::image::{check_dims, ColorImage, ScalarImage};
use crate::model::{
    covariance_from, rotation_backward, sh_basis, sigmoid, unit_quat_to_rotation, Covariance3, GaussianCloud,
};

pub const NEAR_PLANE: f64 = 0.01;
/// Added to the diagonal of every projected covariance (pixels²).
pub const LOW_PASS: f64 = 0.3;
pub const MAX_ALPHA: f64 = 0.99;
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Splat footprint radius in standard deviations.
pub const EXTENT_SIGMAS: f64 = 3.0;
pub const ACCUM_FLOOR: f64 = 1e-6;

/// Row bands used for gradient reduction. Fixed so the summation order does
/// not depend on the thread count.
const GRAD_BANDS: usize = 16;

/// Screen-space footprint of a 3D Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedGaussian {
    pub mean: Vector2<f64>,
    /// Includes the low-pass term.
    pub cov: Matrix2<f64>,
    pub view_depth: f64,
}

/// Projected Gaussian with its activated opacity and view-dependent color.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D {
    pub index: usize,
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub view_depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: ColorImage,
    pub depth: ScalarImage,
    pub accum_alpha: ScalarImage,
}

/// Gradients with the same layout as [`GaussianCloud`].
#[derive(Clone, Debug, PartialEq)]
pub struct CloudGrads {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub fdm: FdmParams,
}

impl CloudGrads {
    pub fn zeros_like(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        let mut fdm = cloud.fdm.clone();
        fdm.weights.fill(0.0);
        fdm.centers.fill(0.0);
        fdm.widths.fill(0.0);
        Self {
            positions: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![[0.0; 3]; n],
            opacity_logits: vec![0.0; n],
            colors: vec![[0.0; 3]; cloud.colors.len()],
            fdm,
        }
    }

    pub fn all_zero(&self) -> bool {
        self.positions.iter().flatten().all(|&v| v == 0.0)
            && self.rotations.iter().flatten().all(|&v| v == 0.0)
            && self.log_scales.iter().flatten().all(|&v| v == 0.0)
            && self.opacity_logits.iter().all(|&v| v == 0.0)
            && self.colors.iter().flatten().all(|&v| v == 0.0)
            && self.fdm.weights.iter().all(|&v| v == 0.0)
            && self.fdm.centers.iter().all(|&v| v == 0.0)
            && self.fdm.widths.iter().all(|&v| v == 0.0)
    }
}

/// Result of [`render_backward`].
#[derive(Clone, Debug)]
pub struct BackwardOutput {
    pub grads: CloudGrads,
    /// Loss gradient w.r.t. each Gaussian's projected center (pixels); zero
    /// for culled Gaussians.
    pub mean2d_grads: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

/// Projects a world-space Gaussian. Returns `None` when the center lies at or
/// behind the near plane.
pub fn project_gaussian(mean: &Vector3<f64>, cov: &Covariance3, cam: &CameraFrame) -> Option<ProjectedGaussian> {
    let w = cam.rotation();
    let p = cam.world_to_cam(mean);
    if p.z <= NEAR_PLANE {
        return None;
    }
    let j = projection_jacobian(&cam.intrinsics, &p);
    let v = w * cov.0 * w.transpose();
    Some(ProjectedGaussian {
        mean: cam.project_cam(&p),
        cov: j * v * j.transpose() + Matrix2::identity() * LOW_PASS,
        view_depth: p.z,
    })
}

fn projection_jacobian(k: &Matrix3<f64>, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        k[(0, 0)] * iz,
        k[(0, 1)] * iz,
        -(k[(0, 0)] * p.x + k[(0, 1)] * p.y) * iz2,
        0.0,
        k[(1, 1)] * iz,
        -k[(1, 1)] * p.y * iz2,
    )
}

/// Everything derived from one Gaussian that the pixel loops and the
/// backward pass need.
#[derive(Clone, Debug)]
struct Prepared {
    index: usize,
    mean: Vector2<f64>,
    conic: [f64; 3],
    depth: f64,
    opacity: f64,
    color: [f64; 3],
    /// Which color channels were clamped at zero.
    color_clamped: [bool; 3],
    bbox: [usize; 4],
    p_cam: Vector3<f64>,
    jac: Matrix2x3<f64>,
    view_cov: Matrix3<f64>,
    rot: Matrix3<f64>,
    scale: Vector3<f64>,
    q_raw: [f64; 4],
    position: Vector3<f64>,
}

fn prepare_one(
    cloud: &GaussianCloud,
    cam: &CameraFrame,
    ev: &DeformEvaluator,
    cam_center: &Vector3<f64>,
    i: usize,
) -> Result<Option<Prepared>> {
    let (pos, q, ls) = deform_gaussian(cloud, ev, i);
    let op_logit = cloud.opacity_logits[i];
    let finite = pos.iter().chain(&q).chain(&ls).all(|v| v.is_finite())
        && op_logit.is_finite()
        && cloud.color_coeffs(i).iter().flatten().all(|v| v.is_finite());
    if !finite {
        return Err(Error::Numerical(format!("non-finite parameter in Gaussian {i}")));
    }
    let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if qn < 1e-12 {
        return Err(Error::Numerical(format!("degenerate quaternion in Gaussian {i}")));
    }
    let position = Vector3::from(pos);
    let w = cam.rotation();
    let p_cam = cam.world_to_cam(&position);
    if p_cam.z <= NEAR_PLANE {
        return Ok(None);
    }
    let rot = unit_quat_to_rotation([q[0] / qn, q[1] / qn, q[2] / qn, q[3] / qn]);
    let scale = Vector3::new(ls[0].exp(), ls[1].exp(), ls[2].exp());
    let cov = covariance_from(&rot, &scale);
    let jac = projection_jacobian(&cam.intrinsics, &p_cam);
    let view_cov = w * cov * w.transpose();
    let cov2d = jac * view_cov * jac.transpose() + Matrix2::identity() * LOW_PASS;
    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
    if !(det > 0.0 && det.is_finite()) {
        return Ok(None);
    }
    let conic = [cov2d[(1, 1)] / det, -cov2d[(0, 1)] / det, cov2d[(0, 0)] / det];
    let mean = cam.project_cam(&p_cam);
    let rx = EXTENT_SIGMAS * cov2d[(0, 0)].sqrt();
    let ry = EXTENT_SIGMAS * cov2d[(1, 1)].sqrt();
    let x0 = (mean.x - rx).ceil().max(0.0);
    let x1 = (mean.x + rx).floor().min(cam.width as f64 - 1.0);
    let y0 = (mean.y - ry).ceil().max(0.0);
    let y1 = (mean.y + ry).floor().min(cam.height as f64 - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return Ok(None);
    }

    let coeffs = cloud.color_coeffs(i);
    let mut raw = coeffs[0];
    if cloud.sh_degree > 0 {
        let dir = (position - cam_center).normalize();
        let (basis, _) = sh_basis(cloud.sh_degree, &dir);
        for (k, b) in basis.iter().enumerate().skip(1) {
            for ch in 0..3 {
                raw[ch] += b * coeffs[k][ch];
            }
        }
    }
    Ok(Some(Prepared {
        index: i,
        mean,
        conic,
        depth: p_cam.z,
        opacity: sigmoid(op_logit),
        color: [raw[0].max(0.0), raw[1].max(0.0), raw[2].max(0.0)],
        color_clamped: [raw[0] < 0.0, raw[1] < 0.0, raw[2] < 0.0],
        bbox: [x0 as usize, x1 as usize, y0 as usize, y1 as usize],
        p_cam,
        jac,
        view_cov,
        rot,
        scale,
        q_raw: q,
        position,
    }))
}

/// Deformed, projected, depth-sorted splats plus per-pixel candidate lists.
struct Frame {
    splats: Vec<Prepared>,
    /// CSR offsets into `pixel_splats`, one entry per pixel plus one.
    offsets: Vec<usize>,
    pixel_splats: Vec<u32>,
}

fn build_frame(cloud: &GaussianCloud, cam: &CameraFrame) -> Result<Frame> {
    cam.validate()?;
    let ev = DeformEvaluator::new(&cloud.fdm, cam.time);
    let center = cam.center();
    let prepared: Vec<Option<Prepared>> = (0..cloud.len())
        .into_par_iter()
        .map(|i| prepare_one(cloud, cam, &ev, &center, i))
        .collect::<Result<_>>()?;
    let mut splats: Vec<Prepared> = prepared.into_iter().flatten().collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

    let (w, h) = (cam.width, cam.height);
    let mut counts = vec![0usize; w * h + 1];
    for s in &splats {
        let [x0, x1, y0, y1] = s.bbox;
        for y in y0..=y1 {
            for c in &mut counts[y * w + x0..=y * w + x1] {
                *c += 1;
            }
        }
    }
    let mut offsets = vec![0usize; w * h + 1];
    for p in 0..w * h {
        offsets[p + 1] = offsets[p] + counts[p];
    }
    let mut fill = offsets.clone();
    let mut pixel_splats = vec![0u32; offsets[w * h]];
    for (si, s) in splats.iter().enumerate() {
        let [x0, x1, y0, y1] = s.bbox;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = y * w + x;
                pixel_splats[fill[p]] = si as u32;
                fill[p] += 1;
            }
        }
    }
    Ok(Frame { splats, offsets, pixel_splats })
}

/// One blended splat at one pixel.
#[derive(Clone, Copy, Debug)]
struct Contribution {
    splat: usize,
    alpha: f64,
    gauss: f64,
    transmittance: f64,
    clamped: bool,
    dx: f64,
    dy: f64,
}

impl Frame {
    fn candidates(&self, pixel: usize) -> &[u32] {
        &self.pixel_splats[self.offsets[pixel]..self.offsets[pixel + 1]]
    }

    /// Walks the blend list of pixel `(x, y)`, calling `visit` for every
    /// contributing splat. Returns the final transmittance.
    fn blend(&self, x: usize, y: usize, width: usize, mut visit: impl FnMut(Contribution)) -> f64 {
        let (px, py) = (x as f64, y as f64);
        let mut t = 1.0;
        for &si in self.candidates(y * width + x) {
            let s = &self.splats[si as usize];
            let dx = px - s.mean.x;
            let dy = py - s.mean.y;
            let [a, b, c] = s.conic;
            let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
            if q > EXTENT_SIGMAS * EXTENT_SIGMAS {
                continue;
            }
            let gauss = (-0.5 * q).exp();
            let raw_alpha = s.opacity * gauss;
            let clamped = raw_alpha > MAX_ALPHA;
            let alpha = if clamped { MAX_ALPHA } else { raw_alpha };
            if alpha < MIN_ALPHA {
                continue;
            }
            visit(Contribution { splat: si as usize, alpha, gauss, transmittance: t, clamped, dx, dy });
            t *= 1.0 - alpha;
            if t < MIN_TRANSMITTANCE {
                break;
            }
        }
        t
    }
}

/// Renders color, alpha-normalized depth and accumulated opacity of the cloud
/// deformed to `cam.time`.
pub fn render(cloud: &GaussianCloud, cam: &CameraFrame, background: [f64; 3]) -> Result<RenderOutput> {
    check_background(background)?;
    let frame = build_frame(cloud, cam)?;
    let (w, h) = (cam.width, cam.height);
    let rows: Vec<Vec<([f64; 3], f64, f64)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let mut color = [0.0; 3];
                    let mut depth_num = 0.0;
                    let t_final = frame.blend(x, y, w, |c| {
                        let s = &frame.splats[c.splat];
                        let wgt = c.alpha * c.transmittance;
                        for ch in 0..3 {
                            color[ch] += wgt * s.color[ch];
                        }
                        depth_num += wgt * s.depth;
                    });
                    for ch in 0..3 {
                        color[ch] += background[ch] * t_final;
                    }
                    let accum = 1.0 - t_final;
                    (color, depth_num / accum.max(ACCUM_FLOOR), accum)
                })
                .collect()
        })
        .collect();
    let mut out = RenderOutput {
        color: ColorImage::new(w, h, [0.0; 3]),
        depth: ScalarImage::new(w, h, 0.0),
        accum_alpha: ScalarImage::new(w, h, 0.0),
    };
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (c, d, a)) in row.into_iter().enumerate() {
            out.color.set(x, y, c);
            out.depth.set(x, y, d);
            out.accum_alpha.set(x, y, a);
        }
    }
    Ok(out)
}

/// Per-pixel list of contributing Gaussians: original index, front to back,
/// and whether the opacity clamp was active.
pub type PixelTrace = Vec<Vec<(usize, bool)>>;

/// Renders like [`render`] and also reports each pixel's blend list. Two
/// renders with identical traces at a pixel lie on the same smooth branch of
/// the blending function.
pub fn render_with_trace(
    cloud: &GaussianCloud,
    cam: &CameraFrame,
    background: [f64; 3],
) -> Result<(RenderOutput, PixelTrace)> {
    let out = render(cloud, cam, background)?;
    let frame = build_frame(cloud, cam)?;
    let (w, h) = (cam.width, cam.height);
    let mut trace = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let mut list = Vec::new();
            frame.blend(x, y, w, |c| list.push((frame.splats[c.splat].index, c.clamped)));
            trace.push(list);
        }
    }
    Ok((out, trace))
}

/// Per-pixel blend weights `α'_i T_i` and the final transmittance.
pub fn pixel_weights(cloud: &GaussianCloud, cam: &CameraFrame, x: usize, y: usize) -> Result<(Vec<f64>, f64)> {
    let frame = build_frame(cloud, cam)?;
    let mut weights = Vec::new();
    let t = frame.blend(x, y, cam.width, |c| weights.push(c.alpha * c.transmittance));
    Ok((weights, t))
}

// Per-splat image-space gradient slots.
const G_MX: usize = 0;
const G_MY: usize = 1;
const G_CA: usize = 2;
const G_CB: usize = 3;
const G_CC: usize = 4;
const G_OPACITY: usize = 5;
const G_COLOR: usize = 6;
const G_DEPTH: usize = 9;
const G_SLOTS: usize = 10;

/// Gradients of a scalar loss w.r.t. every learnable parameter, given the
/// loss gradients on the rendered color and depth images.
pub fn render_backward(
    cloud: &GaussianCloud,
    cam: &CameraFrame,
    background: [f64; 3],
    grad_color: &ColorImage,
    grad_depth: &ScalarImage,
) -> Result<BackwardOutput> {
    check_background(background)?;
    let dims = (cam.width, cam.height);
    check_dims("color gradient", (grad_color.width, grad_color.height), dims)?;
    check_dims("depth gradient", (grad_depth.width, grad_depth.height), dims)?;
    let frame = build_frame(cloud, cam)?;
    let (w, h) = dims;
    let n_splats = frame.splats.len();

    let bands = GRAD_BANDS.min(h);
    let partials: Vec<Vec<f64>> = (0..bands)
        .into_par_iter()
        .map(|band| {
            let mut acc = vec![0.0; n_splats * G_SLOTS];
            let mut contribs: Vec<Contribution> = Vec::new();
            for y in band * h / bands..(band + 1) * h / bands {
                for x in 0..w {
                    let gc = grad_color.get(x, y);
                    let gd = grad_depth.get(x, y);
                    if gc == [0.0; 3] && gd == 0.0 {
                        continue;
                    }
                    contribs.clear();
                    let t_final = frame.blend(x, y, w, |c| contribs.push(c));
                    pixel_backward(&frame, &contribs, t_final, gc, gd, background, &mut acc);
                }
            }
            acc
        })
        .collect();
    let mut image_grads = vec![0.0; n_splats * G_SLOTS];
    for part in &partials {
        for (a, p) in image_grads.iter_mut().zip(part) {
            *a += p;
        }
    }

    let ev = DeformEvaluator::new(&cloud.fdm, cam.time);
    let center = cam.center();
    let w_rot = cam.rotation();
    let per_splat: Vec<SplatParamGrads> = frame
        .splats
        .par_iter()
        .enumerate()
        .map(|(si, s)| splat_backward(cloud, cam, &w_rot, &center, s, &image_grads[si * G_SLOTS..(si + 1) * G_SLOTS]))
        .collect();

    let mut out = BackwardOutput {
        grads: CloudGrads::zeros_like(cloud),
        mean2d_grads: vec![[0.0; 2]; cloud.len()],
        visible: vec![false; cloud.len()],
    };
    let k = cloud.coeffs_per_gaussian();
    for (s, g) in frame.splats.iter().zip(per_splat) {
        let i = s.index;
        out.visible[i] = true;
        out.mean2d_grads[i] = g.mean2d;
        out.grads.positions[i] = g.position;
        out.grads.rotations[i] = g.rotation;
        out.grads.log_scales[i] = g.log_scale;
        out.grads.opacity_logits[i] = g.opacity_logit;
        out.grads.colors[i * k..(i + 1) * k].copy_from_slice(&g.colors);
        let mut upstream = [0.0; NUM_CHANNELS];
        upstream[0..3].copy_from_slice(&g.position);
        upstream[3..7].copy_from_slice(&g.rotation);
        upstream[7..10].copy_from_slice(&g.log_scale);
        ev.backward(&cloud.fdm, i, &upstream, &mut out.grads.fdm);
    }
    Ok(out)
}

fn pixel_backward(
    frame: &Frame,
    contribs: &[Contribution],
    t_final: f64,
    gc: [f64; 3],
    gd: f64,
    background: [f64; 3],
    acc: &mut [f64],
) {
    let mut depth_num = 0.0;
    for c in contribs {
        depth_num += c.alpha * c.transmittance * frame.splats[c.splat].depth;
    }
    let accum = 1.0 - t_final;
    let accum_c = accum.max(ACCUM_FLOOR);
    let g_num = gd / accum_c;
    let g_accum = if accum > ACCUM_FLOOR { -gd * depth_num / (accum_c * accum_c) } else { 0.0 };
    // Gradient carried by the light that passes every splat behind the current one.
    let mut downstream = gc[0] * background[0] + gc[1] * background[1] + gc[2] * background[2] - g_accum;
    for c in contribs.iter().rev() {
        let s = &frame.splats[c.splat];
        let value = gc[0] * s.color[0] + gc[1] * s.color[1] + gc[2] * s.color[2] + g_num * s.depth;
        let g_alpha = c.transmittance * (value - downstream);
        downstream = value * c.alpha + (1.0 - c.alpha) * downstream;

        let weight = c.alpha * c.transmittance;
        let slot = &mut acc[c.splat * G_SLOTS..(c.splat + 1) * G_SLOTS];
        for ch in 0..3 {
            slot[G_COLOR + ch] += gc[ch] * weight;
        }
        slot[G_DEPTH] += g_num * weight;
        if c.clamped {
            continue;
        }
        slot[G_OPACITY] += g_alpha * c.gauss;
        let g_power = g_alpha * s.opacity * c.gauss;
        let [a, b, cc] = s.conic;
        slot[G_MX] += g_power * (a * c.dx + b * c.dy);
        slot[G_MY] += g_power * (b * c.dx + cc * c.dy);
        slot[G_CA] += g_power * (-0.5 * c.dx * c.dx);
        slot[G_CB] += g_power * (-c.dx * c.dy);
        slot[G_CC] += g_power * (-0.5 * c.dy * c.dy);
    }
}

struct SplatParamGrads {
    mean2d: [f64; 2],
    position: [f64; 3],
    rotation: [f64; 4],
    log_scale: [f64; 3],
    opacity_logit: f64,
    colors: Vec<[f64; 3]>,
}

fn splat_backward(
    cloud: &GaussianCloud,
    cam: &CameraFrame,
    w_rot: &Matrix3<f64>,
    cam_center: &Vector3<f64>,
    s: &Prepared,
    g: &[f64],
) -> SplatParamGrads {
    let k = &cam.intrinsics;
    let p = s.p_cam;
    let (iz, iz2) = (1.0 / p.z, 1.0 / (p.z * p.z));

    // conic -> 2D covariance
    let [ca, cb, cc] = s.conic;
    let conic = Matrix2::new(ca, cb, cb, cc);
    let g_conic = Matrix2::new(g[G_CA], 0.5 * g[G_CB], 0.5 * g[G_CB], g[G_CC]);
    let g_cov2d = -(conic * g_conic * conic);

    // 2D covariance -> view covariance and Jacobian
    let g_view_cov = s.jac.transpose() * g_cov2d * s.jac;
    let g_jac = 2.0 * g_cov2d * s.jac * s.view_cov;

    // camera-frame point: projected mean, Jacobian entries and depth
    let (gmx, gmy) = (g[G_MX], g[G_MY]);
    let (k00, k01, k11) = (k[(0, 0)], k[(0, 1)], k[(1, 1)]);
    let lin_x = k00 * p.x + k01 * p.y;
    let mut gp = Vector3::new(
        gmx * k00 * iz,
        gmx * k01 * iz + gmy * k11 * iz,
        -gmx * lin_x * iz2 - gmy * k11 * p.y * iz2 + g[G_DEPTH],
    );
    gp.x += g_jac[(0, 2)] * (-k00 * iz2);
    gp.y += g_jac[(0, 2)] * (-k01 * iz2) + g_jac[(1, 2)] * (-k11 * iz2);
    gp.z += -(g_jac[(0, 0)] * k00 + g_jac[(0, 1)] * k01 + g_jac[(1, 1)] * k11) * iz2
        + 2.0 * (g_jac[(0, 2)] * lin_x + g_jac[(1, 2)] * k11 * p.y) * iz2 * iz;
    let mut g_pos = w_rot.transpose() * gp;

    // world covariance -> rotation and scale
    let g_cov = w_rot.transpose() * g_view_cov * w_rot;
    let m = s.rot * Matrix3::from_diagonal(&s.scale);
    let g_m = 2.0 * g_cov * m;
    let g_r = g_m * Matrix3::from_diagonal(&s.scale);
    let mut g_log_scale = [0.0; 3];
    for (j, gl) in g_log_scale.iter_mut().enumerate() {
        let gs: f64 = (0..3).map(|i| g_m[(i, j)] * s.rot[(i, j)]).sum();
        *gl = gs * s.scale[j];
    }
    let g_rotation = rotation_backward(s.q_raw, &g_r);

    let opacity_logit = g[G_OPACITY] * s.opacity * (1.0 - s.opacity);

    let mut g_rgb = [g[G_COLOR], g[G_COLOR + 1], g[G_COLOR + 2]];
    for ch in 0..3 {
        if s.color_clamped[ch] {
            g_rgb[ch] = 0.0;
        }
    }
    let n_coeffs = cloud.coeffs_per_gaussian();
    let mut colors = vec![[0.0; 3]; n_coeffs];
    colors[0] = g_rgb;
    if cloud.sh_degree > 0 {
        let v = s.position - cam_center;
        let len = v.norm();
        let dir = v / len;
        let (basis, dbasis) = sh_basis(cloud.sh_degree, &dir);
        let coeffs = cloud.color_coeffs(s.index);
        let mut g_dir = Vector3::zeros();
        for kk in 1..n_coeffs {
            for ch in 0..3 {
                colors[kk][ch] = g_rgb[ch] * basis[kk];
                let gb = g_rgb[ch] * coeffs[kk][ch];
                g_dir += Vector3::from(dbasis[kk]) * gb;
            }
        }
        g_pos += (g_dir - dir * dir.dot(&g_dir)) / len;
    }

    SplatParamGrads {
        mean2d: [gmx, gmy],
        position: [g_pos.x, g_pos.y, g_pos.z],
        rotation: g_rotation,
        log_scale: g_log_scale,
        opacity_logit,
        colors,
    }
}

/// Front-to-back compositing of explicit opacities and colors over a
/// background. Returns the color and the final transmittance.
pub fn composite(layers: &[(f64, [f64; 3])], background: [f64; 3]) -> ([f64; 3], f64) {
    let mut t = 1.0;
    let mut out = [0.0; 3];
    for (alpha, color) in layers {
        for ch in 0..3 {
            out[ch] += alpha * t * color[ch];
        }
        t *= 1.0 - alpha;
    }
    for ch in 0..3 {
        out[ch] += background[ch] * t;
    }
    (out, t)
}

pub(crate) fn check_background(bg: [f64; 3]) -> Result<()> {
    if bg.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(invalid("background must be finite"))
    }
}
