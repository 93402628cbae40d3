//! On-disk datasets, checkpoints and the loss-history CSV.
//!
//! A dataset directory holds `cameras.json` plus `color/`, `depth/` and
//! `mask/` subdirectories with one PNG per frame named `000000.png`,
//! `000001.png`, ... Depth is 16-bit and multiplied by the manifest's
//! `depth_scale`; mask pixels are valid when nonzero.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ::image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};
use nalgebra::{Matrix3, Matrix4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraFrame;
use crate::dataset::{normalize_timestamps, SceneDataset};
use crate::error::{invalid, Error, Result};
use crate::fdm::{BasisKind, NUM_CHANNELS};
use crate::image::{ColorImage, Mask, ScalarImage};
use crate::init::RGBDFrame;
use crate::model::{sh_coeff_count, GaussianCloud, MAX_SH_DEGREE};
use crate::train::{LossRecord, RngState, TrainConfig};

pub const MANIFEST_FILE: &str = "cameras.json";
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"DSPLATCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    /// Raw timestamp; normalized to `[0, 1]` on load.
    pub timestamp: f64,
    /// Row-major 4x4 world-to-camera transform.
    pub world_to_camera: [f64; 16],
}

/// Contents of `cameras.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraManifest {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub depth_scale: f64,
    pub frames: Vec<FrameEntry>,
}

fn frame_file(dir: &Path, sub: &str, i: usize) -> PathBuf {
    dir.join(sub).join(format!("{i:06}.png"))
}

fn load_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load { path: path.to_path_buf(), reason: reason.into() }
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    if !path.is_file() {
        return Err(load_err(path, "file not found"));
    }
    ::image::open(path).map_err(|e| load_err(path, e.to_string()))
}

fn check_size(path: &Path, got: (u32, u32), m: &CameraManifest) -> Result<()> {
    if got != (m.width as u32, m.height as u32) {
        return Err(load_err(
            path,
            format!("image is {}x{}, manifest says {}x{}", got.0, got.1, m.width, m.height),
        ));
    }
    Ok(())
}

pub fn read_color_png(path: &Path) -> Result<ColorImage> {
    let img = open_image(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok(ColorImage {
        width: w as usize,
        height: h as usize,
        data: img.pixels().map(|p| p.0.map(|v| v as f64 / 255.0)).collect(),
    })
}

/// Raw 16-bit depth values scaled by `depth_scale`.
pub fn read_depth_png(path: &Path, depth_scale: f64) -> Result<ScalarImage> {
    let img = match open_image(path)? {
        DynamicImage::ImageLuma16(img) => img,
        other => {
            return Err(load_err(path, format!("depth must be 16-bit single-channel, found {:?}", other.color())));
        }
    };
    let (w, h) = img.dimensions();
    Ok(ScalarImage {
        width: w as usize,
        height: h as usize,
        data: img.pixels().map(|p| p.0[0] as f64 * depth_scale).collect(),
    })
}

pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let img = open_image(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Mask { width: w as usize, height: h as usize, data: img.pixels().map(|p| p.0[0] != 0).collect() })
}

fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        if !p.as_os_str().is_empty() {
            fs::create_dir_all(p)?;
        }
    }
    Ok(())
}

fn save_png<P: ::image::Pixel<Subpixel = S> + ::image::PixelWithColorType, S: ::image::Primitive>(
    img: &ImageBuffer<P, Vec<S>>,
    path: &Path,
) -> Result<()>
where
    [S]: ::image::EncodableLayout,
{
    ensure_parent(path)?;
    img.save(path).map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}

/// 8-bit RGB, values clamped to `[0, 1]`.
pub fn write_color_png(path: &Path, img: &ColorImage) -> Result<()> {
    let buf = RgbImage::from_fn(img.width as u32, img.height as u32, |x, y| {
        ::image::Rgb(img.get(x as usize, y as usize).map(quantize8))
    });
    save_png(&buf, path)
}

/// 16-bit depth storing `round(depth / depth_scale)`, saturated to the `u16`
/// range.
pub fn write_depth_png(path: &Path, depth: &ScalarImage, depth_scale: f64) -> Result<()> {
    if !(depth_scale > 0.0) {
        return Err(invalid(format!("depth scale must be positive, got {depth_scale}")));
    }
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(depth.width as u32, depth.height as u32, |x, y| {
            let v = depth.get(x as usize, y as usize) / depth_scale;
            Luma([v.round().clamp(0.0, u16::MAX as f64) as u16])
        });
    save_png(&buf, path)
}

pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let buf = GrayImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        Luma([if mask.get(x as usize, y as usize) { 255 } else { 0 }])
    });
    save_png(&buf, path)
}

pub fn read_manifest(dir: &Path) -> Result<CameraManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| load_err(&path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| load_err(&path, e.to_string()))
}

/// Reads a dataset directory, normalizes its timestamps and computes the
/// train/test split.
pub fn load_dataset(dir: &Path) -> Result<SceneDataset> {
    let m = read_manifest(dir)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    if m.frames.is_empty() {
        return Err(load_err(&manifest_path, "manifest lists no frames"));
    }
    if m.width == 0 || m.height == 0 {
        return Err(load_err(&manifest_path, "image size must be nonzero"));
    }
    let raw: Vec<f64> = m.frames.iter().map(|f| f.timestamp).collect();
    let times = normalize_timestamps(&raw).map_err(|e| load_err(&manifest_path, e.to_string()))?;
    let k = Matrix3::new(m.fx, 0.0, m.cx, 0.0, m.fy, m.cy, 0.0, 0.0, 1.0);

    let frames = (0..m.frames.len())
        .into_par_iter()
        .map(|i| {
            let cp = frame_file(dir, "color", i);
            let color = read_color_png(&cp)?;
            check_size(&cp, (color.width as u32, color.height as u32), &m)?;
            let dp = frame_file(dir, "depth", i);
            let depth = read_depth_png(&dp, m.depth_scale)?;
            check_size(&dp, (depth.width as u32, depth.height as u32), &m)?;
            let mp = frame_file(dir, "mask", i);
            let mask = read_mask_png(&mp)?;
            check_size(&mp, (mask.width as u32, mask.height as u32), &m)?;
            RGBDFrame::new(color, depth, mask, times[i])
        })
        .collect::<Result<Vec<_>>>()?;
    let cameras = m
        .frames
        .iter()
        .zip(&times)
        .map(|(f, &t)| CameraFrame::new(k, Matrix4::from_row_slice(&f.world_to_camera), t, m.width, m.height))
        .collect::<Result<Vec<_>>>()?;
    SceneDataset::new(frames, cameras, m.depth_scale)
}

/// Writes a dataset in the layout read by [`load_dataset`]. All frames must
/// share the first camera's intrinsics and size; normalized frame times are
/// stored as the raw timestamps.
pub fn write_dataset(dir: &Path, data: &SceneDataset) -> Result<()> {
    let first = data.cameras.first().ok_or_else(|| invalid("cannot write an empty dataset"))?;
    for (i, c) in data.cameras.iter().enumerate() {
        if c.intrinsics != first.intrinsics || (c.width, c.height) != (first.width, first.height) {
            return Err(invalid(format!("frame {i} has different intrinsics from frame 0")));
        }
    }
    fs::create_dir_all(dir)?;
    let manifest = CameraManifest {
        fx: first.fx(),
        fy: first.fy(),
        cx: first.cx(),
        cy: first.cy(),
        width: first.width,
        height: first.height,
        depth_scale: data.depth_scale,
        frames: data
            .cameras
            .iter()
            .map(|c| {
                let m = &c.world_to_camera;
                FrameEntry { timestamp: c.time, world_to_camera: std::array::from_fn(|k| m[(k / 4, k % 4)]) }
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| invalid(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
    for (i, f) in data.frames.iter().enumerate() {
        write_color_png(&frame_file(dir, "color", i), &f.color)?;
        write_depth_png(&frame_file(dir, "depth", i), &f.depth, data.depth_scale)?;
        write_mask_png(&frame_file(dir, "mask", i), &f.mask)?;
    }
    Ok(())
}

/// Training snapshot: the cloud plus what is needed to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub cloud: GaussianCloud,
    pub config: TrainConfig,
    pub iteration: u64,
    pub rng: RngState,
}

/// `f64` values stored per Gaussian.
fn values_per_gaussian(sh_degree: usize, num_bases: usize) -> usize {
    3 + 4 + 3 + 1 + 3 * sh_coeff_count(sh_degree) + 3 * NUM_CHANNELS * num_bases
}

/// Header:
///
/// | field | encoding |
/// |---|---|
/// | magic | 8 bytes `DSPLATCK` |
/// | version | u32 |
/// | N, B | u64, u32 |
/// | SH degree, basis kind | u32, u8 |
/// | iteration | u64 |
/// | config | u32 length + JSON |
/// | rng | 32-byte seed, u64 stream, u128 word position |
///
/// followed by N records of little-endian `f64`: position (3), rotation
/// (4, wxyz), log-scale (3), opacity logit (1), color coefficients (3 per
/// coefficient), then FDM weights, centers and widths (each channel-major,
/// `10 * B`).
pub fn encode_checkpoint(c: &Checkpoint) -> Result<Vec<u8>> {
    let cloud = &c.cloud;
    cloud.validate()?;
    let n = cloud.len();
    let b = cloud.fdm.num_bases;
    let config = serde_json::to_vec(&c.config).map_err(|e| invalid(e.to_string()))?;
    let mut out = Vec::with_capacity(128 + config.len() + 8 * n * values_per_gaussian(cloud.sh_degree, b));
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(b as u32).to_le_bytes());
    out.extend_from_slice(&(cloud.sh_degree as u32).to_le_bytes());
    out.push(cloud.fdm.kind.as_u8());
    out.extend_from_slice(&c.iteration.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&c.rng.seed);
    out.extend_from_slice(&c.rng.stream.to_le_bytes());
    out.extend_from_slice(&c.rng.word_pos.to_le_bytes());

    let k = cloud.coeffs_per_gaussian();
    let stride = cloud.fdm.stride();
    let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
    for i in 0..n {
        cloud.positions[i].iter().for_each(|&v| put(v));
        cloud.rotations[i].iter().for_each(|&v| put(v));
        cloud.log_scales[i].iter().for_each(|&v| put(v));
        put(cloud.opacity_logits[i]);
        cloud.colors[i * k..(i + 1) * k].iter().flatten().for_each(|&v| put(v));
        let r = i * stride..(i + 1) * stride;
        cloud.fdm.weights[r.clone()].iter().for_each(|&v| put(v));
        cloud.fdm.centers[r.clone()].iter().for_each(|&v| put(v));
        cloud.fdm.widths[r].iter().for_each(|&v| put(v));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let rest = self.bytes.len() - self.pos;
        if rest < n {
            return Err(Error::Format(format!("truncated header: {what} needs {n} bytes, {rest} left")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("slice length checked"))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic").ok() != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(Error::Format("bad magic bytes: not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(r.array("version")?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (this build reads version {CHECKPOINT_VERSION})"
        )));
    }
    let n = u64::from_le_bytes(r.array("N")?);
    let b = u32::from_le_bytes(r.array("B")?) as usize;
    let sh_degree = u32::from_le_bytes(r.array("SH degree")?) as usize;
    let kind_byte = r.array::<1>("basis kind")?[0];
    let kind = BasisKind::from_u8(kind_byte).ok_or_else(|| Error::Format(format!("unknown basis kind {kind_byte}")))?;
    let iteration = u64::from_le_bytes(r.array("iteration")?);
    let config_len = u32::from_le_bytes(r.array("config length")?) as usize;
    let config: TrainConfig = serde_json::from_slice(r.take(config_len, "config")?)
        .map_err(|e| Error::Format(format!("config: {e}")))?;
    let rng = RngState {
        seed: r.array("rng seed")?,
        stream: u64::from_le_bytes(r.array("rng stream")?),
        word_pos: u128::from_le_bytes(r.array("rng position")?),
    };
    if b == 0 {
        return Err(Error::Format("basis count is 0".into()));
    }
    if sh_degree > MAX_SH_DEGREE {
        return Err(Error::Format(format!("SH degree {sh_degree} exceeds {MAX_SH_DEGREE}")));
    }

    let per = values_per_gaussian(sh_degree, b);
    let blob = &bytes[r.pos..];
    let expected = usize::try_from(n)
        .ok()
        .and_then(|n| n.checked_mul(per * 8))
        .ok_or_else(|| Error::Format(format!("Gaussian count {n} is too large")))?;
    if blob.len() != expected {
        return Err(Error::Format(format!(
            "parameter blob length mismatch: expected {expected} bytes for {n} Gaussians, found {}",
            blob.len()
        )));
    }

    let mut cloud = GaussianCloud::empty(sh_degree, b, kind)?;
    let k = sh_coeff_count(sh_degree);
    let stride = NUM_CHANNELS * b;
    let mut vals = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut next = || vals.next().expect("blob length checked");
    for _ in 0..n {
        cloud.positions.push(std::array::from_fn(|_| next()));
        cloud.rotations.push(std::array::from_fn(|_| next()));
        cloud.log_scales.push(std::array::from_fn(|_| next()));
        cloud.opacity_logits.push(next());
        for _ in 0..k {
            cloud.colors.push(std::array::from_fn(|_| next()));
        }
        cloud.fdm.weights.extend((0..stride).map(|_| next()));
        cloud.fdm.centers.extend((0..stride).map(|_| next()));
        cloud.fdm.widths.extend((0..stride).map(|_| next()));
    }
    cloud.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(Checkpoint { cloud, config, iteration, rng })
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(c)?;
    ensure_parent(path)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| load_err(path, e.to_string()))?;
    decode_checkpoint(&bytes).map_err(|e| load_err(path, e.to_string()))
}

/// `iter,L_C,L_D,L,N_gaussians` with one row per record.
pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("iter,L_C,L_D,L,N_gaussians\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{:e},{:e},{:e},{}",
            r.iteration, r.loss.color, r.loss.depth, r.loss.total, r.num_gaussians
        );
    }
    s
}
