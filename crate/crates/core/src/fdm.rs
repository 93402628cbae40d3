//! Flexible per-Gaussian deformation.
//!
//! Every Gaussian carries ten temporal curves: three position offsets, four
//! offsets on the raw quaternion and three log-scale offsets. Each curve is a
//! linear combination of `B` basis functions of normalized time,
//!
//! ```text
//! ψ(t) = Σ_j ω_j · exp(-(t - θ_j)² / (2 σ_j²))
//! ```
//!
//! with weights, centers and widths all learnable per Gaussian and channel.
//! The fixed Fourier/polynomial basis is kept as a baseline; with it only the
//! weights are used.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::GaussianCloud;

/// Lower bound applied to basis widths before evaluation.
pub const SIGMA_MIN: f64 = 1e-3;

/// Basis count used when none is configured.
pub const DEFAULT_NUM_BASES: usize = 17;

/// Deformed channels per Gaussian: 3 position + 4 rotation + 3 log-scale.
pub const NUM_CHANNELS: usize = 10;
pub const POSITION_CHANNELS: std::ops::Range<usize> = 0..3;
pub const ROTATION_CHANNELS: std::ops::Range<usize> = 3..7;
pub const SCALE_CHANNELS: std::ops::Range<usize> = 7..10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisKind {
    #[default]
    LearnableGaussian,
    FourierPolynomial,
}

impl BasisKind {
    pub fn as_u8(self) -> u8 {
        match self {
            BasisKind::LearnableGaussian => 0,
            BasisKind::FourierPolynomial => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(BasisKind::LearnableGaussian),
            1 => Some(BasisKind::FourierPolynomial),
            _ => None,
        }
    }
}

/// Gaussian basis `exp(-(t-θ)²/(2σ²))`.
#[inline]
pub fn basis_eval(t: f64, center: f64, sigma: f64) -> f64 {
    let d = t - center;
    (-(d * d) / (2.0 * sigma * sigma)).exp()
}

#[inline]
pub fn effective_sigma(raw: f64) -> f64 {
    raw.max(SIGMA_MIN)
}

/// One slot of the fixed baseline basis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FourierSlot {
    Poly(u32),
    Sin(u32),
    Cos(u32),
}

impl FourierSlot {
    pub fn eval(self, t: f64) -> f64 {
        use std::f64::consts::TAU;
        match self {
            FourierSlot::Poly(d) => t.powi(d as i32),
            FourierSlot::Sin(k) => (TAU * k as f64 * t).sin(),
            FourierSlot::Cos(k) => (TAU * k as f64 * t).cos(),
        }
    }
}

/// Fixed Fourier/polynomial basis of size `B`: sin and cos pairs for
/// frequencies `1..=B/2`, with polynomial degrees `0, 1, ...` filling the
/// remaining slots. Polynomial slots come first.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierPolyBasis {
    slots: Vec<FourierSlot>,
}

impl FourierPolyBasis {
    pub fn new(num_bases: usize) -> Result<Self> {
        if num_bases == 0 {
            return Err(invalid("basis count must be at least 1"));
        }
        let freqs = (num_bases / 2) as u32;
        let n_poly = num_bases - 2 * freqs as usize;
        let mut slots: Vec<FourierSlot> = (0..n_poly as u32).map(FourierSlot::Poly).collect();
        for k in 1..=freqs {
            slots.push(FourierSlot::Sin(k));
            slots.push(FourierSlot::Cos(k));
        }
        Ok(Self { slots })
    }

    pub fn slots(&self) -> &[FourierSlot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn eval(&self, t: f64, index: usize) -> f64 {
        self.slots[index].eval(t)
    }

    pub fn eval_all(&self, t: f64) -> Vec<f64> {
        self.slots.iter().map(|s| s.eval(t)).collect()
    }
}

/// Deformation parameters for a whole cloud, laid out as
/// `[gaussian][channel][basis]` in flat arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct FdmParams {
    pub kind: BasisKind,
    pub num_bases: usize,
    pub weights: Vec<f64>,
    pub centers: Vec<f64>,
    /// Raw widths; the evaluated width is `max(raw, SIGMA_MIN)`.
    pub widths: Vec<f64>,
}

/// Borrowed parameters of one deformation curve.
#[derive(Clone, Copy, Debug)]
pub struct Channel<'a> {
    pub weights: &'a [f64],
    pub centers: &'a [f64],
    pub widths: &'a [f64],
}

impl FdmParams {
    /// Parameters for `n` Gaussians in their initial state: centers at
    /// `(j - 0.5) / B`, widths `1 / B`, zero weights.
    pub fn new(n: usize, num_bases: usize, kind: BasisKind) -> Result<Self> {
        if num_bases == 0 {
            return Err(invalid("basis count must be at least 1"));
        }
        let mut p = Self {
            kind,
            num_bases,
            weights: Vec::with_capacity(n * NUM_CHANNELS * num_bases),
            centers: Vec::with_capacity(n * NUM_CHANNELS * num_bases),
            widths: Vec::with_capacity(n * NUM_CHANNELS * num_bases),
        };
        for _ in 0..n {
            p.push_zero();
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.weights.len() / (NUM_CHANNELS * self.num_bases)
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Values per Gaussian in each of the three arrays.
    pub fn stride(&self) -> usize {
        NUM_CHANNELS * self.num_bases
    }

    pub(crate) fn push_zero(&mut self) {
        let b = self.num_bases;
        for _ in 0..NUM_CHANNELS {
            for j in 0..b {
                self.weights.push(0.0);
                self.centers.push((j as f64 + 0.5) / b as f64);
                self.widths.push(1.0 / b as f64);
            }
        }
    }

    fn range(&self, gaussian: usize, channel: usize) -> std::ops::Range<usize> {
        let start = (gaussian * NUM_CHANNELS + channel) * self.num_bases;
        start..start + self.num_bases
    }

    pub fn channel(&self, gaussian: usize, channel: usize) -> Channel<'_> {
        let r = self.range(gaussian, channel);
        Channel {
            weights: &self.weights[r.clone()],
            centers: &self.centers[r.clone()],
            widths: &self.widths[r],
        }
    }

    pub fn weights_mut(&mut self, gaussian: usize, channel: usize) -> &mut [f64] {
        let r = self.range(gaussian, channel);
        &mut self.weights[r]
    }

    pub fn centers_mut(&mut self, gaussian: usize, channel: usize) -> &mut [f64] {
        let r = self.range(gaussian, channel);
        &mut self.centers[r]
    }

    pub fn widths_mut(&mut self, gaussian: usize, channel: usize) -> &mut [f64] {
        let r = self.range(gaussian, channel);
        &mut self.widths[r]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stride();
        if self.weights.len() % s != 0
            || self.centers.len() != self.weights.len()
            || self.widths.len() != self.weights.len()
        {
            return Err(invalid("deformation parameter arrays have inconsistent lengths"));
        }
        for (idx, ((w, c), sg)) in self.weights.iter().zip(&self.centers).zip(&self.widths).enumerate() {
            if !(w.is_finite() && c.is_finite() && sg.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite deformation parameter in Gaussian {}",
                    idx / s
                )));
            }
        }
        Ok(())
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let s = self.stride();
        let gather = |src: &[f64]| {
            let mut out = Vec::with_capacity(indices.len() * s);
            for &i in indices {
                out.extend_from_slice(&src[i * s..(i + 1) * s]);
            }
            out
        };
        Self {
            kind: self.kind,
            num_bases: self.num_bases,
            weights: gather(&self.weights),
            centers: gather(&self.centers),
            widths: gather(&self.widths),
        }
    }
}

/// Builds initial deformation parameters for `n` Gaussians. With zero weights
/// every curve evaluates to zero.
pub fn init_fdm(n: usize, num_bases: usize, kind: BasisKind) -> Result<FdmParams> {
    FdmParams::new(n, num_bases, kind)
}

/// Evaluates one learnable-Gaussian curve at `t`.
pub fn curve_eval(t: f64, ch: Channel<'_>) -> f64 {
    ch.weights
        .iter()
        .zip(ch.centers)
        .zip(ch.widths)
        .map(|((w, c), s)| w * basis_eval(t, *c, effective_sigma(*s)))
        .sum()
}

/// Gradients of a curve value w.r.t. its parameters, scaled by `upstream`.
/// Results are added into the three output slices. The width gradient is zero
/// while the width sits on its floor.
pub fn curve_backward(
    t: f64,
    ch: Channel<'_>,
    upstream: f64,
    grad_weights: &mut [f64],
    grad_centers: &mut [f64],
    grad_widths: &mut [f64],
) {
    for j in 0..ch.weights.len() {
        let raw = ch.widths[j];
        let sigma = effective_sigma(raw);
        let d = t - ch.centers[j];
        let b = basis_eval(t, ch.centers[j], sigma);
        grad_weights[j] += upstream * b;
        let wb = upstream * ch.weights[j] * b;
        grad_centers[j] += wb * d / (sigma * sigma);
        if raw > SIGMA_MIN {
            grad_widths[j] += wb * d * d / (sigma * sigma * sigma);
        }
    }
}

/// Per-time evaluator that caches the fixed baseline basis values.
#[derive(Clone, Debug)]
pub struct DeformEvaluator {
    t: f64,
    kind: BasisKind,
    fixed: Vec<f64>,
}

impl DeformEvaluator {
    pub fn new(fdm: &FdmParams, t: f64) -> Self {
        let fixed = match fdm.kind {
            BasisKind::LearnableGaussian => Vec::new(),
            BasisKind::FourierPolynomial => FourierPolyBasis::new(fdm.num_bases)
                .expect("num_bases validated at construction")
                .eval_all(t),
        };
        Self { t, kind: fdm.kind, fixed }
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    /// The ten channel offsets of Gaussian `i`.
    pub fn offsets(&self, fdm: &FdmParams, i: usize) -> [f64; NUM_CHANNELS] {
        let mut out = [0.0; NUM_CHANNELS];
        for (c, o) in out.iter_mut().enumerate() {
            let ch = fdm.channel(i, c);
            *o = match self.kind {
                BasisKind::LearnableGaussian => curve_eval(self.t, ch),
                BasisKind::FourierPolynomial => {
                    ch.weights.iter().zip(&self.fixed).map(|(w, b)| w * b).sum()
                }
            };
        }
        out
    }

    /// Accumulates parameter gradients of Gaussian `i` given upstream
    /// gradients on its ten offsets. `grads` shares the layout of `fdm`.
    pub fn backward(&self, fdm: &FdmParams, i: usize, upstream: &[f64; NUM_CHANNELS], grads: &mut FdmParams) {
        for (c, &g) in upstream.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let ch = fdm.channel(i, c);
            let r = fdm.range(i, c);
            match self.kind {
                BasisKind::LearnableGaussian => {
                    let FdmParams { weights, centers, widths, .. } = grads;
                    curve_backward(
                        self.t,
                        ch,
                        g,
                        &mut weights[r.clone()],
                        &mut centers[r.clone()],
                        &mut widths[r],
                    );
                }
                BasisKind::FourierPolynomial => {
                    for (gw, b) in grads.weights[r].iter_mut().zip(&self.fixed) {
                        *gw += g * b;
                    }
                }
            }
        }
    }
}

/// Time-deformed raw attributes of a cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformedAttributes {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
}

/// Applies the deformation curves at time `t` as additive offsets on the raw
/// position, quaternion and log-scale. The canonical cloud is untouched.
pub fn deform_cloud(cloud: &GaussianCloud, t: f64) -> DeformedAttributes {
    let ev = DeformEvaluator::new(&cloud.fdm, t);
    let n = cloud.len();
    let mut out = DeformedAttributes {
        positions: Vec::with_capacity(n),
        rotations: Vec::with_capacity(n),
        log_scales: Vec::with_capacity(n),
    };
    for i in 0..n {
        let (p, r, s) = deform_gaussian(cloud, &ev, i);
        out.positions.push(p);
        out.rotations.push(r);
        out.log_scales.push(s);
    }
    out
}

#[inline]
pub(crate) fn deform_gaussian(
    cloud: &GaussianCloud,
    ev: &DeformEvaluator,
    i: usize,
) -> ([f64; 3], [f64; 4], [f64; 3]) {
    let o = ev.offsets(&cloud.fdm, i);
    let p = cloud.positions[i];
    let r = cloud.rotations[i];
    let s = cloud.log_scales[i];
    (
        [p[0] + o[0], p[1] + o[1], p[2] + o[2]],
        [r[0] + o[3], r[1] + o[4], r[2] + o[5], r[3] + o[6]],
        [s[0] + o[7], s[1] + o[8], s[2] + o[9]],
    )
}
