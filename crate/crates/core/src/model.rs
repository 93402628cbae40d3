//! Canonical Gaussian point cloud and the per-Gaussian math shared by the
//! renderer and the optimizer: activations, quaternion rotations, covariance
//! construction and density evaluation.

use nalgebra::{Matrix3, Vector3};

use crate::error::{invalid, Error, Result};
use crate::fdm::{BasisKind, FdmParams};

/// Diagonal regularization added before inverting a covariance.
pub const COVARIANCE_EPS: f64 = 1e-8;

/// Highest supported spherical-harmonic degree.
pub const MAX_SH_DEGREE: usize = 3;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

/// Number of SH coefficients (per color channel) for a degree.
pub const fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Symmetric positive semi-definite 3x3 covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Covariance3(pub Matrix3<f64>);

impl Covariance3 {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }
}

/// Canonical (time-independent) Gaussian attributes plus deformation parameters.
///
/// Raw parameters are stored unconstrained; see [`activate`] for the maps to
/// physical quantities. Quaternions are `[w, x, y, z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    /// `len() * sh_coeff_count(sh_degree)` RGB coefficients, Gaussian-major.
    /// Coefficient 0 is the RGB color itself.
    pub colors: Vec<[f64; 3]>,
    pub sh_degree: usize,
    pub fdm: FdmParams,
}

/// Physical attributes of one Gaussian after activation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivatedGaussian {
    pub position: Vector3<f64>,
    pub rotation: Matrix3<f64>,
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl GaussianCloud {
    /// Empty cloud with deformation bases of the given kind and count.
    pub fn empty(sh_degree: usize, num_bases: usize, kind: BasisKind) -> Result<Self> {
        if sh_degree > MAX_SH_DEGREE {
            return Err(invalid(format!("SH degree {sh_degree} exceeds {MAX_SH_DEGREE}")));
        }
        Ok(Self {
            positions: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            colors: Vec::new(),
            sh_degree,
            fdm: FdmParams::new(0, num_bases, kind)?,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn coeffs_per_gaussian(&self) -> usize {
        sh_coeff_count(self.sh_degree)
    }

    /// SH coefficients of Gaussian `i`.
    pub fn color_coeffs(&self, i: usize) -> &[[f64; 3]] {
        let k = self.coeffs_per_gaussian();
        &self.colors[i * k..(i + 1) * k]
    }

    /// Appends a Gaussian with zero deformation. Higher-order SH coefficients
    /// are zero.
    pub fn push(
        &mut self,
        position: [f64; 3],
        rotation: [f64; 4],
        log_scale: [f64; 3],
        opacity_logit: f64,
        color: [f64; 3],
    ) {
        self.positions.push(position);
        self.rotations.push(rotation);
        self.log_scales.push(log_scale);
        self.opacity_logits.push(opacity_logit);
        self.colors.push(color);
        for _ in 1..self.coeffs_per_gaussian() {
            self.colors.push([0.0; 3]);
        }
        self.fdm.push_zero();
    }

    /// Checks the structural invariants: consistent lengths, nonzero quaternions
    /// and finite values everywhere.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let k = self.coeffs_per_gaussian();
        if self.rotations.len() != n
            || self.log_scales.len() != n
            || self.opacity_logits.len() != n
            || self.colors.len() != n * k
            || self.fdm.len() != n
        {
            return Err(invalid("Gaussian attribute arrays have inconsistent lengths"));
        }
        for i in 0..n {
            let finite = self.positions[i].iter().all(|v| v.is_finite())
                && self.rotations[i].iter().all(|v| v.is_finite())
                && self.log_scales[i].iter().all(|v| v.is_finite())
                && self.opacity_logits[i].is_finite()
                && self.color_coeffs(i).iter().flatten().all(|v| v.is_finite());
            if !finite {
                return Err(Error::Numerical(format!("non-finite parameter in Gaussian {i}")));
            }
            if self.rotations[i].iter().all(|&v| v == 0.0) {
                return Err(invalid(format!("zero quaternion in Gaussian {i}")));
            }
        }
        self.fdm.validate()
    }

    /// Keeps the Gaussians whose indices are listed, in that order. Indices may
    /// repeat (duplicating a Gaussian).
    pub fn select(&self, indices: &[usize]) -> Self {
        let k = self.coeffs_per_gaussian();
        let mut colors = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            colors.extend_from_slice(self.color_coeffs(i));
        }
        Self {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            rotations: indices.iter().map(|&i| self.rotations[i]).collect(),
            log_scales: indices.iter().map(|&i| self.log_scales[i]).collect(),
            opacity_logits: indices.iter().map(|&i| self.opacity_logits[i]).collect(),
            colors,
            sh_degree: self.sh_degree,
            fdm: self.fdm.select(indices),
        }
    }
}

/// Activated attributes of Gaussian `index` in its canonical state. The
/// returned color is the degree-0 coefficient clamped to be non-negative.
pub fn activate(cloud: &GaussianCloud, index: usize) -> Result<ActivatedGaussian> {
    if index >= cloud.len() {
        return Err(invalid(format!("Gaussian index {index} out of range 0..{}", cloud.len())));
    }
    let p = cloud.positions[index];
    let ls = cloud.log_scales[index];
    let c = cloud.color_coeffs(index)[0];
    Ok(ActivatedGaussian {
        position: Vector3::new(p[0], p[1], p[2]),
        rotation: quat_to_rotation(cloud.rotations[index])?,
        scale: Vector3::new(ls[0].exp(), ls[1].exp(), ls[2].exp()),
        opacity: sigmoid(cloud.opacity_logits[index]),
        color: [c[0].max(0.0), c[1].max(0.0), c[2].max(0.0)],
    })
}

/// Rotation matrix of the normalized quaternion `[w, x, y, z]`.
pub fn quat_to_rotation(q: [f64; 4]) -> Result<Matrix3<f64>> {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(invalid(format!("quaternion {q:?} must be nonzero and finite")));
    }
    Ok(unit_quat_to_rotation([q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm]))
}

pub(crate) fn unit_quat_to_rotation(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient w.r.t. the raw (unnormalized) quaternion given the gradient
/// w.r.t. the rotation matrix it produces.
pub(crate) fn rotation_backward(q_raw: [f64; 4], grad_r: &Matrix3<f64>) -> [f64; 4] {
    let norm = q_raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = [q_raw[0] / norm, q_raw[1] / norm, q_raw[2] / norm, q_raw[3] / norm];
    let g = grad_r;
    let gw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let unit = [w, x, y, z];
    let gu = [gw, gx, gy, gz];
    let dot: f64 = unit.iter().zip(&gu).map(|(a, b)| a * b).sum();
    [
        (gu[0] - unit[0] * dot) / norm,
        (gu[1] - unit[1] * dot) / norm,
        (gu[2] - unit[2] * dot) / norm,
        (gu[3] - unit[3] * dot) / norm,
    ]
}

/// `Σ = R S Sᵀ Rᵀ` for the rotation of `r_raw` and activated scales `s`.
pub fn build_covariance(r_raw: [f64; 4], s: [f64; 3]) -> Result<Covariance3> {
    if s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(invalid(format!("scales {s:?} must be positive and finite")));
    }
    let r = quat_to_rotation(r_raw)?;
    Ok(Covariance3(covariance_from(&r, &Vector3::from(s))))
}

pub(crate) fn covariance_from(r: &Matrix3<f64>, s: &Vector3<f64>) -> Matrix3<f64> {
    let m = r * Matrix3::from_diagonal(s);
    m * m.transpose()
}

/// Unnormalized density `exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))`.
pub fn gaussian_density(x: &Vector3<f64>, mean: &Vector3<f64>, cov: &Covariance3) -> Result<f64> {
    let reg = cov.0 + Matrix3::identity() * COVARIANCE_EPS;
    let inv = reg
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Numerical("singular covariance".into()))?;
    let d = x - mean;
    let q = d.dot(&(inv * d)).max(0.0);
    Ok((-0.5 * q).exp())
}

// Real SH constants, matching the usual 3DGS convention.
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// SH basis values (index 0 is fixed at 1 so the DC coefficient is the color)
/// and their partials w.r.t. the unit view direction.
pub(crate) fn sh_basis(degree: usize, d: &Vector3<f64>) -> (Vec<f64>, Vec<[f64; 3]>) {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut b = vec![1.0];
    let mut g = vec![[0.0; 3]];
    if degree >= 1 {
        b.extend([-SH_C1 * y, SH_C1 * z, -SH_C1 * x]);
        g.extend([[0.0, -SH_C1, 0.0], [0.0, 0.0, SH_C1], [-SH_C1, 0.0, 0.0]]);
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b.extend([
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]);
        g.extend([
            [SH_C2[0] * y, SH_C2[0] * x, 0.0],
            [0.0, SH_C2[1] * z, SH_C2[1] * y],
            [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z],
            [SH_C2[3] * z, 0.0, SH_C2[3] * x],
            [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0],
        ]);
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b.extend([
            SH_C3[0] * y * (3.0 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4.0 * zz - xx - yy),
            SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            SH_C3[4] * x * (4.0 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3.0 * yy),
        ]);
        g.extend([
            [SH_C3[0] * 6.0 * x * y, SH_C3[0] * (3.0 * xx - 3.0 * yy), 0.0],
            [SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y],
            [
                -2.0 * SH_C3[2] * x * y,
                SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
                8.0 * SH_C3[2] * y * z,
            ],
            [-6.0 * SH_C3[3] * x * z, -6.0 * SH_C3[3] * y * z, SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)],
            [
                SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
                -2.0 * SH_C3[4] * x * y,
                8.0 * SH_C3[4] * x * z,
            ],
            [2.0 * SH_C3[5] * x * z, -2.0 * SH_C3[5] * y * z, SH_C3[5] * (xx - yy)],
            [SH_C3[6] * (3.0 * xx - 3.0 * yy), -6.0 * SH_C3[6] * x * y, 0.0],
        ]);
    }
    (b, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Unit, UnitQuaternion};
    use proptest::prelude::*;

    fn is_rotation(r: &Matrix3<f64>) -> bool {
        (r * r.transpose() - Matrix3::identity()).abs().max() < 1e-6
            && (r.determinant() - 1.0).abs() < 1e-6
    }

    #[test]
    fn identity_quaternion() {
        let r = quat_to_rotation([1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_relative_eq!(r, Matrix3::identity(), epsilon = 1e-15);
        let r2 = quat_to_rotation([2.0, 0.0, 0.0, 0.0]).unwrap();
        assert_relative_eq!(r2, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn half_turn_about_z() {
        let r = quat_to_rotation([0.0, 0.0, 0.0, 1.0]).unwrap();
        let expected = Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(r, expected, epsilon = 1e-15);
        assert!(is_rotation(&r));
    }

    #[test]
    fn zero_or_nan_quaternion_rejected() {
        assert!(matches!(
            quat_to_rotation([0.0; 4]),
            Err(Error::InvalidParameter(_))
        ));
        assert!(quat_to_rotation([f64::NAN, 0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn covariance_axis_aligned() {
        let c = build_covariance([1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0]).unwrap();
        assert_relative_eq!(c.0, Matrix3::identity(), epsilon = 1e-15);
        let c = build_covariance([1.0, 0.0, 0.0, 0.0], [2.0, 3.0, 0.5]).unwrap();
        assert_relative_eq!(c.0, Matrix3::from_diagonal(&Vector3::new(4.0, 9.0, 0.25)), epsilon = 1e-15);
    }

    #[test]
    fn covariance_rotated_about_z_matches_matrix_oracle() {
        // Oracle: nalgebra's own axis-angle rotation, R diag(4,1,1) Rᵀ.
        let rot = UnitQuaternion::from_axis_angle(&Unit::new_normalize(Vector3::z()), std::f64::consts::FRAC_PI_2)
            .to_rotation_matrix()
            .into_inner();
        let oracle = rot * Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)) * rot.transpose();
        assert_relative_eq!(oracle, Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0)), epsilon = 1e-12);

        let h = std::f64::consts::FRAC_1_SQRT_2;
        let c = build_covariance([h, 0.0, 0.0, h], [2.0, 1.0, 1.0]).unwrap();
        assert_relative_eq!(c.0, oracle, epsilon = 1e-12);
    }

    #[test]
    fn covariance_rejects_nonpositive_scale() {
        assert!(build_covariance([1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 1.0]).is_err());
        assert!(build_covariance([1.0, 0.0, 0.0, 0.0], [1.0, -2.0, 1.0]).is_err());
    }

    #[test]
    fn density_closed_forms() {
        let mu = Vector3::new(0.3, -0.2, 1.0);
        let id = Covariance3(Matrix3::identity());
        assert_eq!(gaussian_density(&mu, &mu, &id).unwrap(), 1.0);
        let x = mu + Vector3::new(1.0, 0.0, 0.0);
        assert_relative_eq!(gaussian_density(&x, &mu, &id).unwrap(), (-0.5f64).exp(), epsilon = 1e-7);
        let c = Covariance3(Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)));
        let x = mu + Vector3::new(2.0, 0.0, 0.0);
        assert_relative_eq!(gaussian_density(&x, &mu, &c).unwrap(), 0.60653, epsilon = 1e-5);
    }

    #[test]
    fn activation_values() {
        let mut cloud = GaussianCloud::empty(0, 1, BasisKind::LearnableGaussian).unwrap();
        cloud.push([0.0; 3], [1.0, 0.0, 0.0, 0.0], [0.0; 3], 0.0, [0.2, -0.1, 0.5]);
        cloud.push([0.0; 3], [1.0, 0.0, 0.0, 0.0], [0.0; 3], 40.0, [0.2, 0.3, 0.5]);
        let a = activate(&cloud, 0).unwrap();
        assert_eq!(a.scale, Vector3::new(1.0, 1.0, 1.0));
        assert_eq!(a.opacity, 0.5);
        assert_eq!(a.color, [0.2, 0.0, 0.5]);
        let b = activate(&cloud, 1).unwrap();
        assert!((1.0 - b.opacity) < 1e-6);
        assert!(activate(&cloud, 2).is_err());
    }

    #[test]
    fn rotation_backward_matches_finite_differences() {
        let q = [0.7, -0.3, 0.4, 0.2];
        let weights = Matrix3::new(0.3, -1.2, 0.5, 0.9, 0.1, -0.4, 0.7, 0.2, -0.8);
        let f = |q: [f64; 4]| quat_to_rotation(q).unwrap().component_mul(&weights).sum();
        let g = rotation_backward(q, &weights);
        for k in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[k] += 1e-6;
            qm[k] -= 1e-6;
            let fd = (f(qp) - f(qm)) / 2e-6;
            assert_relative_eq!(g[k], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn sh_basis_gradient_matches_finite_differences() {
        let d = Vector3::new(0.3, -0.5, 0.8);
        let (_, g) = sh_basis(3, &d);
        for axis in 0..3 {
            let mut dp = d;
            let mut dm = d;
            dp[axis] += 1e-6;
            dm[axis] -= 1e-6;
            let (bp, _) = sh_basis(3, &dp);
            let (bm, _) = sh_basis(3, &dm);
            for k in 0..16 {
                let fd = (bp[k] - bm[k]) / 2e-6;
                assert_relative_eq!(g[k][axis], fd, epsilon = 1e-8);
            }
        }
    }

    fn quat_strategy() -> impl Strategy<Value = [f64; 4]> {
        prop::array::uniform4(-1.0f64..1.0).prop_filter("nonzero", |q| {
            q.iter().map(|v| v * v).sum::<f64>() > 1e-3
        })
    }

    proptest! {
        #[test]
        fn rotation_is_orthonormal_and_scale_invariant(q in quat_strategy(), k in 0.01f64..100.0) {
            let r = quat_to_rotation(q).unwrap();
            prop_assert!(is_rotation(&r));
            let rk = quat_to_rotation([q[0] * k, q[1] * k, q[2] * k, q[3] * k]).unwrap();
            prop_assert!((r - rk).abs().max() < 1e-12);
        }

        #[test]
        fn covariance_symmetric_psd(q in quat_strategy(), s in prop::array::uniform3(1e-3f64..10.0)) {
            let c = build_covariance(q, s).unwrap().0;
            prop_assert!((c - c.transpose()).abs().max() < 1e-9);
            let eig = c.symmetric_eigenvalues();
            prop_assert!(eig.min() >= -1e-9);
            let mut got: Vec<f64> = eig.iter().copied().collect();
            let mut want: Vec<f64> = s.iter().map(|v| v * v).collect();
            got.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            for (a, b) in got.iter().zip(&want) {
                prop_assert!((a - b).abs() < 1e-8 * b.max(1.0));
            }
        }

        #[test]
        fn density_rotation_invariant(
            q in quat_strategy(),
            rq in quat_strategy(),
            s in prop::array::uniform3(0.2f64..3.0),
            d in prop::array::uniform3(-2.0f64..2.0),
        ) {
            let cov = build_covariance(q, s).unwrap();
            let rot = quat_to_rotation(rq).unwrap();
            let mu = Vector3::new(0.1, 0.2, 0.3);
            let x = mu + Vector3::from(d);
            let base = gaussian_density(&x, &mu, &cov).unwrap();
            let rotated_cov = Covariance3(rot * cov.0 * rot.transpose());
            let xr = mu + rot * Vector3::from(d);
            let turned = gaussian_density(&xr, &mu, &rotated_cov).unwrap();
            prop_assert!((base - turned).abs() < 1e-9);
            prop_assert!(base > 0.0 && base <= 1.0);
        }
    }
}
