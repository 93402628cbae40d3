//! Image quality metrics and the held-out evaluation report.

use std::fmt::Write as _;

use crate::camera::CameraFrame;
use crate::dataset::SceneDataset;
use crate::error::{invalid, Result};
use crate::image::{check_dims, ColorImage, Mask, ScalarImage};
use crate::model::GaussianCloud;
use crate::raster::render;

/// Reported for identical images instead of infinity.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Peak signal-to-noise ratio (peak 1) over masked-in pixels and all channels.
pub fn psnr(a: &ColorImage, b: &ColorImage, mask: &Mask) -> Result<f64> {
    let dims = (b.width, b.height);
    check_dims("image", (a.width, a.height), dims)?;
    check_dims("mask", (mask.width, mask.height), dims)?;
    let count = mask.count();
    if count == 0 {
        return Err(invalid("PSNR needs at least one valid pixel"));
    }
    let mut sse = 0.0;
    for p in 0..a.data.len() {
        if mask.data[p] {
            for ch in 0..3 {
                sse += (a.data[p][ch] - b.data[p][ch]).powi(2);
            }
        }
    }
    let mse = sse / (3 * count) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Separable filtering over the windows that fit entirely in the image.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity of two single-channel images.
pub fn ssim_gray(a: &ScalarImage, b: &ScalarImage) -> Result<f64> {
    check_dims("image", (a.width, a.height), (b.width, b.height))?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(invalid(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}")));
    }
    let k = gaussian_window();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(&a.data, w, h, &k);
    let mu_b = filter_valid(&b.data, w, h, &k);
    let aa = filter_valid(&prod(&a.data, &a.data), w, h, &k);
    let bb = filter_valid(&prod(&b.data, &b.data), w, h, &k);
    let ab = filter_valid(&prod(&a.data, &b.data), w, h, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(total / mu_a.len() as f64)
}

/// SSIM averaged over the three color channels.
pub fn ssim(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    let mut total = 0.0;
    for ch in 0..3 {
        total += ssim_gray(&a.channel(ch), &b.channel(ch))?;
    }
    Ok(total / 3.0)
}

/// Scores of one evaluated frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub frames: Vec<FrameMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub fps: Option<f64>,
    pub train_time: Option<f64>,
}

impl MetricReport {
    /// Flat `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "frames={}", self.frames.len());
        let _ = writeln!(s, "psnr_mean={:.6}", self.mean_psnr);
        let _ = writeln!(s, "ssim_mean={:.6}", self.mean_ssim);
        if let Some(f) = self.fps {
            let _ = writeln!(s, "fps={f:.6}");
        }
        if let Some(t) = self.train_time {
            let _ = writeln!(s, "train_time_s={t:.6}");
        }
        s
    }

    /// One row per frame: `frame,psnr,ssim`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,psnr,ssim\n");
        for f in &self.frames {
            let _ = writeln!(s, "{},{:.6},{:.6}", f.frame, f.psnr, f.ssim);
        }
        s
    }
}

/// Multiplies an image by a mask (masked-out pixels become black).
pub fn apply_mask(img: &ColorImage, mask: &Mask) -> ColorImage {
    let mut out = img.clone();
    for (c, &m) in out.data.iter_mut().zip(&mask.data) {
        if !m {
            *c = [0.0; 3];
        }
    }
    out
}

/// Renders the listed frames and scores them. PSNR uses the frame mask; SSIM
/// compares both images with masked-out pixels blacked out.
pub fn evaluate(
    cloud: &GaussianCloud,
    data: &SceneDataset,
    frames: &[usize],
    background: [f64; 3],
) -> Result<MetricReport> {
    if frames.is_empty() {
        return Err(invalid("no frames to evaluate"));
    }
    let mut out = Vec::with_capacity(frames.len());
    for &i in frames {
        let f = data.frames.get(i).ok_or_else(|| invalid(format!("frame {i} out of range")))?;
        let cam: &CameraFrame = &data.cameras[i];
        let r = render(cloud, cam, background)?;
        let p = psnr(&r.color, &f.color, &f.mask)?;
        let s = ssim(&apply_mask(&r.color, &f.mask), &apply_mask(&f.color, &f.mask))?;
        out.push(FrameMetrics { frame: i, psnr: p, ssim: s });
    }
    let n = out.len() as f64;
    Ok(MetricReport {
        mean_psnr: out.iter().map(|f| f.psnr).sum::<f64>() / n,
        mean_ssim: out.iter().map(|f| f.ssim).sum::<f64>() / n,
        frames: out,
        fps: None,
        train_time: None,
    })
}
