//! Real spherical-harmonics basis up to degree 3, plus its gradient with
//! respect to the (unit) view direction.
//!
//! Color is `max(0, 0.5 + basis . coefficients)` per channel.

use nalgebra::Vector3;

pub const SH_C0: f64 = 0.28209479177387814;
const SH_C1: f64 = 0.4886025119029199;
const SH_C2: [f64; 5] = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
];
const SH_C3: [f64; 7] = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
];

pub const MAX_SH_DEGREE: u32 = 3;

pub fn sh_coeff_count(degree: u32) -> usize {
    ((degree + 1) * (degree + 1)) as usize
}

/// Basis values at a unit direction, for bands up to `degree`.
pub fn sh_basis(degree: u32, dir: &Vector3<f64>) -> Vec<f64> {
    let mut basis = vec![0.0; sh_coeff_count(degree)];
    let (x, y, z) = (dir.x, dir.y, dir.z);
    basis[0] = SH_C0;
    if degree >= 1 {
        basis[1] = -SH_C1 * y;
        basis[2] = SH_C1 * z;
        basis[3] = -SH_C1 * x;
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        basis[4] = SH_C2[0] * x * y;
        basis[5] = SH_C2[1] * y * z;
        basis[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        basis[7] = SH_C2[3] * x * z;
        basis[8] = SH_C2[4] * (xx - yy);
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        basis[9] = SH_C3[0] * y * (3.0 * xx - yy);
        basis[10] = SH_C3[1] * x * y * z;
        basis[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
        basis[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
        basis[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
        basis[14] = SH_C3[5] * z * (xx - yy);
        basis[15] = SH_C3[6] * x * (xx - 3.0 * yy);
    }
    basis
}

/// Gradient of each basis value with respect to the direction components.
pub fn sh_basis_grad(degree: u32, dir: &Vector3<f64>) -> Vec<Vector3<f64>> {
    let mut grad = vec![Vector3::zeros(); sh_coeff_count(degree)];
    let (x, y, z) = (dir.x, dir.y, dir.z);
    if degree >= 1 {
        grad[1] = Vector3::new(0.0, -SH_C1, 0.0);
        grad[2] = Vector3::new(0.0, 0.0, SH_C1);
        grad[3] = Vector3::new(-SH_C1, 0.0, 0.0);
    }
    if degree >= 2 {
        grad[4] = SH_C2[0] * Vector3::new(y, x, 0.0);
        grad[5] = SH_C2[1] * Vector3::new(0.0, z, y);
        grad[6] = SH_C2[2] * Vector3::new(-2.0 * x, -2.0 * y, 4.0 * z);
        grad[7] = SH_C2[3] * Vector3::new(z, 0.0, x);
        grad[8] = SH_C2[4] * Vector3::new(2.0 * x, -2.0 * y, 0.0);
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        grad[9] = SH_C3[0] * Vector3::new(6.0 * x * y, 3.0 * xx - 3.0 * yy, 0.0);
        grad[10] = SH_C3[1] * Vector3::new(y * z, x * z, x * y);
        grad[11] = SH_C3[2] * Vector3::new(-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z);
        grad[12] = SH_C3[3] * Vector3::new(-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy);
        grad[13] = SH_C3[4] * Vector3::new(4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z);
        grad[14] = SH_C3[5] * Vector3::new(2.0 * x * z, -2.0 * y * z, xx - yy);
        grad[15] = SH_C3[6] * Vector3::new(3.0 * xx - 3.0 * yy, -6.0 * x * y, 0.0);
    }
    grad
}

/// Evaluate the SH color at a unit direction: `max(0, 0.5 + basis . coeffs)`
/// per channel, using bands up to `degree` (coefficients beyond the slice
/// length are treated as absent).
pub fn eval_sh(sh: &[Vector3<f64>], degree: u32, dir: &Vector3<f64>) -> Vector3<f64> {
    let basis = sh_basis(degree, dir);
    let mut c = Vector3::new(0.5, 0.5, 0.5);
    for (b, coeff) in basis.iter().zip(sh.iter()) {
        c += *coeff * *b;
    }
    c.map(|v| v.max(0.0))
}

/// As [`eval_sh`] but also returns the pre-clamp value so the backward pass
/// can mask clamped channels.
pub fn eval_sh_raw(sh: &[Vector3<f64>], degree: u32, dir: &Vector3<f64>) -> Vector3<f64> {
    let basis = sh_basis(degree, dir);
    let mut c = Vector3::new(0.5, 0.5, 0.5);
    for (b, coeff) in basis.iter().zip(sh.iter()) {
        c += *coeff * *b;
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn constant_band_formula() {
        let sh = vec![Vector3::new(0.8, -0.2, 0.1)];
        let c = eval_sh(&sh, 0, &Vector3::new(0.0, 0.0, 1.0));
        assert_relative_eq!(c.x, 0.5 + SH_C0 * 0.8, epsilon = 1e-12);
        assert_relative_eq!(c.y, (0.5 - SH_C0 * 0.2f64).max(0.0), epsilon = 1e-12);
        assert_relative_eq!(c.z, 0.5 + SH_C0 * 0.1, epsilon = 1e-12);
    }

    #[test]
    fn zero_coefficients_give_gray() {
        let sh = vec![Vector3::zeros(); 16];
        let c = eval_sh(&sh, 3, &Vector3::new(0.3, -0.5, 0.81).normalize());
        assert_relative_eq!(c.x, 0.5);
        assert_relative_eq!(c.y, 0.5);
        assert_relative_eq!(c.z, 0.5);
    }

    #[test]
    fn linear_band_odd_parity() {
        // With only degree-1 coefficients, value(dir) - value(-dir) is twice
        // the linear band contribution.
        let mut sh = vec![Vector3::zeros(); 4];
        sh[1] = Vector3::new(0.1, 0.0, 0.0);
        sh[2] = Vector3::new(0.0, 0.2, 0.0);
        sh[3] = Vector3::new(0.05, 0.0, 0.1);
        let dir = Vector3::new(0.48, 0.6, 0.64).normalize();
        let a = eval_sh_raw(&sh, 1, &dir);
        let b = eval_sh_raw(&sh, 1, &(-dir));
        let basis = sh_basis(1, &dir);
        let linear = sh[1] * basis[1] + sh[2] * basis[2] + sh[3] * basis[3];
        assert!((a - b - 2.0 * linear).norm() < 1e-12);
    }

    #[test]
    fn degree_reduction_when_higher_bands_zero() {
        let mut sh = vec![Vector3::zeros(); 16];
        sh[0] = Vector3::new(0.4, 0.4, 0.4);
        let a = eval_sh(&sh, 3, &Vector3::new(0.0, 1.0, 0.0));
        let b = eval_sh(&sh[..1], 0, &Vector3::new(0.0, 1.0, 0.0));
        assert!((a - b).norm() < 1e-15);
    }

    #[test]
    fn basis_grad_matches_finite_difference() {
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..20 {
            // The gradients treat (x, y, z) as free coordinates; sample off
            // the unit sphere too since normalization is handled elsewhere.
            let d = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let grad = sh_basis_grad(3, &d);
            let h = 1e-6;
            for axis in 0..3 {
                let mut dp = d;
                let mut dm = d;
                dp[axis] += h;
                dm[axis] -= h;
                let bp = sh_basis(3, &dp);
                let bm = sh_basis(3, &dm);
                for k in 0..16 {
                    let fd = (bp[k] - bm[k]) / (2.0 * h);
                    assert_relative_eq!(grad[k][axis], fd, epsilon = 1e-6, max_relative = 1e-5);
                }
            }
        }
    }
}
