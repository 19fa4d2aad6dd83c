//! The hybrid Gaussian scene representation and per-primitive math.
//!
//! Two kinds of primitive share every appearance attribute and differ only in
//! how their position is parameterized: free primitives carry a world-space
//! mean, ray-bound primitives carry a single distance along a fixed camera
//! ray (`mu' = o + z d`). Raw parameters are unconstrained; activations map
//! them into their valid ranges (exp for scale, sigmoid for opacity, softplus
//! for the ray distance, normalization for the quaternion).

pub mod checkpoint;
pub mod sh;

use crate::geometry::Ray;
use nalgebra::{Matrix2, Matrix3, Vector2, Vector3, Vector4};
use thiserror::Error;

pub use sh::{eval_sh, eval_sh_raw, sh_basis_grad, sh_coeff_count, SH_C0};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ModelError {
    #[error("quaternion has zero norm")]
    ZeroQuaternion,
    #[error("projected covariance is singular (det = {0:.3e})")]
    SingularCovariance(f64),
    #[error("primitive has non-positive camera depth {z:.3e}")]
    NonPositiveDepth { z: f64 },
    #[error("primitive {prim} references missing ray {ray}")]
    BadRayIndex { prim: usize, ray: usize },
    #[error("pair table entry {0} does not reference two ray-bound primitives")]
    BadPairEntry(usize),
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of `softplus` for positive inputs.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    // y + ln(1 - e^-y), stable for small and large y.
    y + (-(-y).exp_m1()).ln()
}

/// Position parameterization of one primitive.
#[derive(Debug, Clone, PartialEq)]
pub enum PrimitiveKind {
    Free { position: Vector3<f64> },
    RayBound { ray_index: usize, z_raw: f64 },
}

/// One splat: position (or ray distance), log-scale, quaternion, opacity
/// logit and spherical-harmonics color coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub kind: PrimitiveKind,
    pub log_scale: Vector3<f64>,
    /// Quaternion as (w, x, y, z); normalized on use.
    pub rotation: Vector4<f64>,
    pub opacity_logit: f64,
    /// `(degree + 1)^2` coefficients, one RGB vector each.
    pub sh: Vec<Vector3<f64>>,
}

impl GaussianPrimitive {
    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn is_ray_bound(&self) -> bool {
        matches!(self.kind, PrimitiveKind::RayBound { .. })
    }

    /// Activated ray distance, if ray-bound.
    pub fn z(&self) -> Option<f64> {
        match self.kind {
            PrimitiveKind::RayBound { z_raw, .. } => Some(softplus(z_raw)),
            PrimitiveKind::Free { .. } => None,
        }
    }
}

/// Links one pair of ray-bound primitives to the correspondence it came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairEntry {
    pub prim_i: usize,
    pub prim_j: usize,
    pub match_index: usize,
}

/// The scene model: primitives, the ray table for bound primitives, the pair
/// table tying bound pairs to matches and the sticky filter mask.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridModel {
    pub primitives: Vec<GaussianPrimitive>,
    pub rays: Vec<Ray>,
    pub pair_table: Vec<PairEntry>,
    /// Filter state; inactive primitives neither render nor enter losses.
    pub active: Vec<bool>,
    /// Maximum spherical-harmonics degree the coefficients are sized for.
    pub sh_degree: u32,
}

impl HybridModel {
    pub fn empty(sh_degree: u32) -> Self {
        Self {
            primitives: Vec::new(),
            rays: Vec::new(),
            pair_table: Vec::new(),
            active: Vec::new(),
            sh_degree,
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    /// World position of a primitive; ray-bound primitives evaluate
    /// `o + softplus(z_raw) d` on their ray.
    pub fn position_of(&self, idx: usize) -> Vector3<f64> {
        match self.primitives[idx].kind {
            PrimitiveKind::Free { position } => position,
            PrimitiveKind::RayBound { ray_index, z_raw } => {
                let ray = &self.rays[ray_index];
                ray.origin + softplus(z_raw) * ray.direction
            }
        }
    }

    pub fn ray_bound_count(&self) -> usize {
        self.primitives.iter().filter(|p| p.is_ray_bound()).count()
    }

    pub fn active_pairs(&self) -> impl Iterator<Item = (usize, &PairEntry)> {
        self.pair_table
            .iter()
            .enumerate()
            .filter(|(_, e)| self.active[e.prim_i] && self.active[e.prim_j])
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (i, prim) in self.primitives.iter().enumerate() {
            if let PrimitiveKind::RayBound { ray_index, .. } = prim.kind {
                if ray_index >= self.rays.len() {
                    return Err(ModelError::BadRayIndex {
                        prim: i,
                        ray: ray_index,
                    });
                }
            }
        }
        for (k, entry) in self.pair_table.iter().enumerate() {
            let bound = |idx: usize| {
                self.primitives
                    .get(idx)
                    .is_some_and(GaussianPrimitive::is_ray_bound)
            };
            if !bound(entry.prim_i) || !bound(entry.prim_j) {
                return Err(ModelError::BadPairEntry(k));
            }
        }
        Ok(())
    }
}

/// Rotation matrix of a (not necessarily unit) quaternion; normalizes first,
/// so `quat_to_rotation(2 r) == quat_to_rotation(r)`.
pub fn quat_to_rotation(r: &Vector4<f64>) -> Result<Matrix3<f64>, ModelError> {
    let n = r.norm();
    if n < 1e-300 {
        return Err(ModelError::ZeroQuaternion);
    }
    let q = r / n;
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Ok(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Backpropagate a gradient on the rotation matrix to the raw quaternion,
/// through both the matrix entries and the normalization.
pub fn quat_rotation_backward(r: &Vector4<f64>, d_rot: &Matrix3<f64>) -> Vector4<f64> {
    let n = r.norm();
    if n < 1e-300 {
        return Vector4::zeros();
    }
    let q = r / n;
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    // dR/dw, dR/dx, dR/dy, dR/dz for a unit quaternion.
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    let g_unit = Vector4::new(
        d_rot.component_mul(&dw).sum(),
        d_rot.component_mul(&dx).sum(),
        d_rot.component_mul(&dy).sum(),
        d_rot.component_mul(&dz).sum(),
    );
    // Through q = r / |r|.
    (g_unit - q * q.dot(&g_unit)) / n
}

/// 3D covariance `R S S^T R^T` from the activated scale and quaternion.
pub fn covariance_3d(scale: &Vector3<f64>, rotation: &Vector4<f64>) -> Result<Matrix3<f64>, ModelError> {
    let rot = quat_to_rotation(rotation)?;
    let d = Matrix3::from_diagonal(&scale.component_mul(scale));
    Ok(rot * d * rot.transpose())
}

/// Project a world covariance into the 2x2 screen-space covariance
/// `J W Sigma W^T J^T` with a low-pass term added to the diagonal.
pub fn project_covariance(
    sigma: &Matrix3<f64>,
    camera: &crate::geometry::Camera,
    mu: &Vector3<f64>,
    low_pass: f64,
) -> Result<Matrix2<f64>, ModelError> {
    let w = camera.world_to_cam_rotation();
    let p_cam = camera.world_to_cam(mu);
    if p_cam.z <= crate::geometry::EPS_DEPTH {
        return Err(ModelError::NonPositiveDepth { z: p_cam.z });
    }
    let j = pinhole_jacobian(camera.fx(), camera.fy(), &p_cam);
    let m = j * w;
    let mut out = m * sigma * m.transpose();
    out[(0, 0)] += low_pass;
    out[(1, 1)] += low_pass;
    Ok(out)
}

/// Jacobian of the pinhole projection at a camera-space point: rows are
/// `d(u)/d(x, y, z)` and `d(v)/d(x, y, z)`.
pub fn pinhole_jacobian(fx: f64, fy: f64, p_cam: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
    let z_inv = 1.0 / p_cam.z;
    let z_inv2 = z_inv * z_inv;
    nalgebra::Matrix2x3::new(
        fx * z_inv,
        0.0,
        -fx * p_cam.x * z_inv2,
        0.0,
        fy * z_inv,
        -fy * p_cam.y * z_inv2,
    )
}

/// Gaussian influence of a 2D splat at a pixel: `exp(-0.5 d^T Sigma'^-1 d)`.
pub fn gaussian_weight_2d(
    p: &Vector2<f64>,
    mu2d: &Vector2<f64>,
    sigma2d: &Matrix2<f64>,
) -> Result<f64, ModelError> {
    let det = sigma2d[(0, 0)] * sigma2d[(1, 1)] - sigma2d[(0, 1)] * sigma2d[(1, 0)];
    if det.abs() < 1e-14 {
        return Err(ModelError::SingularCovariance(det));
    }
    let inv = Matrix2::new(
        sigma2d[(1, 1)] / det,
        -sigma2d[(0, 1)] / det,
        -sigma2d[(1, 0)] / det,
        sigma2d[(0, 0)] / det,
    );
    let d = p - mu2d;
    let q = d.dot(&(inv * d));
    Ok((-0.5 * q).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector4;
    use proptest::prelude::*;

    const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

    #[test]
    fn identity_quaternion() {
        let r = quat_to_rotation(&Vector4::new(1.0, 0.0, 0.0, 0.0)).unwrap();
        assert!((r - Matrix3::identity()).norm() < 1e-15);
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = quat_to_rotation(&Vector4::new(FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2)).unwrap();
        let expect = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((r - expect).norm() < 1e-12);
    }

    #[test]
    fn double_cover_and_zero_quat() {
        let q = Vector4::new(0.3, -0.5, 0.2, 0.7);
        let a = quat_to_rotation(&q).unwrap();
        let b = quat_to_rotation(&(-q)).unwrap();
        assert!((a - b).norm() < 1e-14);
        assert!(quat_to_rotation(&Vector4::zeros()).is_err());
    }

    #[test]
    fn quat_backward_matches_finite_difference() {
        let q = Vector4::new(0.9, -0.3, 0.25, 0.1);
        // A fixed upstream gradient.
        let upstream = Matrix3::new(0.3, -0.1, 0.7, 0.2, 0.5, -0.4, 0.05, 0.9, -0.2);
        let analytic = quat_rotation_backward(&q, &upstream);
        let h = 1e-6;
        for k in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            let lp = upstream.component_mul(&quat_to_rotation(&qp).unwrap()).sum();
            let lm = upstream.component_mul(&quat_to_rotation(&qm).unwrap()).sum();
            let fd = (lp - lm) / (2.0 * h);
            assert_relative_eq!(analytic[k], fd, epsilon = 1e-6, max_relative = 1e-6);
        }
    }

    #[test]
    fn covariance_unit_sphere() {
        let sigma = covariance_3d(
            &Vector3::new(1.0, 1.0, 1.0),
            &Vector4::new(1.0, 0.0, 0.0, 0.0),
        )
        .unwrap();
        assert!((sigma - Matrix3::identity()).norm() < 1e-15);
    }

    #[test]
    fn covariance_diagonal_squares() {
        let sigma = covariance_3d(
            &Vector3::new(2.0, 3.0, 4.0),
            &Vector4::new(1.0, 0.0, 0.0, 0.0),
        )
        .unwrap();
        let expect = Matrix3::from_diagonal(&Vector3::new(4.0, 9.0, 16.0));
        assert!((sigma - expect).norm() < 1e-12);
    }

    #[test]
    fn covariance_conjugation_oracle() {
        // 90 degrees about z maps the x-variance onto y.
        let sigma = covariance_3d(
            &Vector3::new(2.0, 1.0, 1.0),
            &Vector4::new(FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2),
        )
        .unwrap();
        let expect = Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0));
        assert!((sigma - expect).norm() < 1e-12);
    }

    fn axis_camera(f: f64) -> crate::geometry::Camera {
        let k = Matrix3::new(f, 0.0, 31.5, 0.0, f, 31.5, 0.0, 0.0, 1.0);
        crate::geometry::Camera::new(0, 64, 64, k, Matrix3::identity(), Vector3::zeros()).unwrap()
    }

    #[test]
    fn projected_covariance_low_pass_floor() {
        let cam = axis_camera(50.0);
        let sigma = Matrix3::identity() * 1e-12;
        let out = project_covariance(&sigma, &cam, &Vector3::new(0.0, 0.0, 2.0), 0.3).unwrap();
        assert!((out - Matrix2::identity() * 0.3).norm() < 1e-9);
    }

    #[test]
    fn projected_covariance_on_axis() {
        let f = 50.0;
        let z = 2.0;
        let cam = axis_camera(f);
        let out =
            project_covariance(&Matrix3::identity(), &cam, &Vector3::new(0.0, 0.0, z), 0.3).unwrap();
        let expect = Matrix2::identity() * (f * f / (z * z) + 0.3);
        assert!((out - expect).norm() < 1e-9);
    }

    #[test]
    fn projected_covariance_eigenvalues_bounded_below() {
        let cam = axis_camera(80.0);
        let sigma = covariance_3d(
            &Vector3::new(0.5, 0.02, 1.7),
            &Vector4::new(0.6, 0.3, -0.2, 0.4),
        )
        .unwrap();
        let out = project_covariance(&sigma, &cam, &Vector3::new(0.4, -0.3, 3.0), 0.3).unwrap();
        assert!((out[(0, 1)] - out[(1, 0)]).abs() < 1e-12);
        let tr = out[(0, 0)] + out[(1, 1)];
        let det = out[(0, 0)] * out[(1, 1)] - out[(0, 1)] * out[(1, 0)];
        let lambda_min = tr / 2.0 - (tr * tr / 4.0 - det).sqrt();
        assert!(lambda_min >= 0.3 - 1e-9);
    }

    #[test]
    fn weight_peaks_at_center() {
        let w = gaussian_weight_2d(
            &Vector2::new(3.0, 4.0),
            &Vector2::new(3.0, 4.0),
            &Matrix2::identity(),
        )
        .unwrap();
        assert_relative_eq!(w, 1.0);
    }

    #[test]
    fn weight_unit_offset() {
        let w = gaussian_weight_2d(
            &Vector2::new(1.0, 0.0),
            &Vector2::new(0.0, 0.0),
            &Matrix2::identity(),
        )
        .unwrap();
        assert_relative_eq!(w, (-0.5f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn weight_mahalanobis_oracle() {
        // diag(4, 1) with offset (2, 0): q = 4/4 = 1.
        let w = gaussian_weight_2d(
            &Vector2::new(2.0, 0.0),
            &Vector2::new(0.0, 0.0),
            &Matrix2::new(4.0, 0.0, 0.0, 1.0),
        )
        .unwrap();
        assert_relative_eq!(w, (-0.5f64).exp(), epsilon = 1e-12);
        let singular = Matrix2::new(1.0, 1.0, 1.0, 1.0);
        assert!(gaussian_weight_2d(&Vector2::zeros(), &Vector2::zeros(), &singular).is_err());
    }

    #[test]
    fn softplus_inverse_round_trip() {
        for z in [1e-3, 0.1, 1.0, 4.0, 30.0, 500.0] {
            assert_relative_eq!(softplus(softplus_inv(z)), z, max_relative = 1e-12);
        }
    }

    #[test]
    fn ray_bound_position_examples() {
        let mut model = HybridModel::empty(0);
        model.rays.push(Ray::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0)));
        model.primitives.push(GaussianPrimitive {
            kind: PrimitiveKind::Free {
                position: Vector3::new(1.0, 2.0, 3.0),
            },
            log_scale: Vector3::zeros(),
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
            opacity_logit: 0.0,
            sh: vec![Vector3::zeros()],
        });
        model.primitives.push(GaussianPrimitive {
            kind: PrimitiveKind::RayBound {
                ray_index: 0,
                z_raw: softplus_inv(4.0),
            },
            log_scale: Vector3::zeros(),
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
            opacity_logit: 0.0,
            sh: vec![Vector3::zeros()],
        });
        model.active = vec![true, true];
        assert_eq!(model.position_of(0), Vector3::new(1.0, 2.0, 3.0));
        assert!((model.position_of(1) - Vector3::new(0.0, 0.0, 4.0)).norm() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rotation_is_orthonormal_and_scale_invariant(
            w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0,
        ) {
            let q = Vector4::new(w, x, y, z);
            prop_assume!(q.norm() > 1e-3);
            let r = quat_to_rotation(&q).unwrap();
            prop_assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
            let r2 = quat_to_rotation(&(q * 2.0)).unwrap();
            prop_assert!((r - r2).norm() < 1e-12);
        }

        #[test]
        fn covariance_is_spd(
            lx in -3.0f64..2.0, ly in -3.0f64..2.0, lz in -3.0f64..2.0,
            w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0,
        ) {
            let q = Vector4::new(w, x, y, z);
            prop_assume!(q.norm() > 1e-3);
            let s = Vector3::new(lx.exp(), ly.exp(), lz.exp());
            let sigma = covariance_3d(&s, &q).unwrap();
            prop_assert!((sigma - sigma.transpose()).norm() < 1e-12 * sigma.norm().max(1.0));
            prop_assert!(nalgebra::Cholesky::new(sigma).is_some());
        }

        #[test]
        fn ray_bound_norm_oracle(ox in -2.0f64..2.0, oy in -2.0f64..2.0, oz in -2.0f64..2.0,
                                 dx in -1.0f64..1.0, dy in -1.0f64..1.0, z_act in 0.01f64..30.0) {
            let dir = Vector3::new(dx, dy, 1.0);
            let mut model = HybridModel::empty(0);
            model.rays.push(Ray::new(Vector3::new(ox, oy, oz), dir));
            model.primitives.push(GaussianPrimitive {
                kind: PrimitiveKind::RayBound { ray_index: 0, z_raw: softplus_inv(z_act) },
                log_scale: Vector3::zeros(),
                rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
                opacity_logit: 0.0,
                sh: vec![Vector3::zeros()],
            });
            model.active = vec![true];
            let pos = model.position_of(0);
            prop_assert!(((pos - model.rays[0].origin).norm() - z_act).abs() < 1e-9);
        }
    }
}
