//! Rendering throughput measurement.

use std::time::Instant;

use crate::camera::CameraFrame;
use crate::error::{invalid, Error, Result};
use crate::model::GaussianCloud;
use crate::raster::render;

/// Mean and standard deviation of frames per second over repetitions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FpsStats {
    pub mean: f64,
    pub std_dev: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchReport {
    pub single_thread: FpsStats,
    pub multi_thread: FpsStats,
    pub threads: usize,
}

/// Runs `f` on a dedicated rayon pool with `threads` workers (0 = rayon's
/// default).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn measure(cloud: &GaussianCloud, cams: &[CameraFrame], reps: usize) -> Result<FpsStats> {
    for cam in cams {
        render(cloud, cam, [0.0; 3])?;
    }
    let mut fps = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        for cam in cams {
            render(cloud, cam, [0.0; 3])?;
        }
        fps.push(cams.len() as f64 / start.elapsed().as_secs_f64().max(1e-12));
    }
    let mean = fps.iter().sum::<f64>() / reps as f64;
    let var = fps.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / reps as f64;
    Ok(FpsStats { mean, std_dev: var.sqrt() })
}

/// Renders every camera `reps` times after one warm-up pass, once on a single
/// thread and once on the default pool.
pub fn bench_render(cloud: &GaussianCloud, cams: &[CameraFrame], reps: usize) -> Result<BenchReport> {
    if reps == 0 {
        return Err(invalid("benchmark needs at least one repetition"));
    }
    if cams.is_empty() {
        return Err(invalid("benchmark needs at least one camera"));
    }
    let single_thread = with_threads(1, || measure(cloud, cams, reps))??;
    let threads = rayon::current_num_threads();
    let multi_thread = with_threads(0, || measure(cloud, cams, reps))??;
    Ok(BenchReport { single_thread, multi_thread, threads })
}
