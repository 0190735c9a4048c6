//! SO(3)/SE(3) substrate: rotations, rigid poses, twist coordinates, and the
//! conversions the rest of the crate relies on.
//!
//! Twist layout is fixed as `(ρ₁, ρ₂, ρ₃, ω₁, ω₂, ω₃)`: translation part first
//! (mm), rotation part last (rad). All angles are radians.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4, Vector6};
use thiserror::Error;

/// Below this rotation angle exp/log/V use their Taylor branches.
pub const SMALL_ANGLE: f64 = 1e-8;

/// The log map refuses rotations whose angle is within this margin of π.
pub const NEAR_PI_MARGIN: f64 = 1e-6;

/// Orthogonality / determinant tolerance for a valid [`Rotation`].
pub const ROTATION_TOL: f64 = 1e-9;

/// Smallest singular value below which an SVD projection is flagged.
pub const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum LieError {
    #[error("rotation angle {angle} rad is too close to pi for the log map")]
    NearPiSingularity { angle: f64 },
    #[error("3x3 matrix is rank deficient (smallest singular value {sigma_min:e})")]
    RankDeficient { sigma_min: f64 },
    #[error("matrix is not a rotation (orthogonality error {ortho_err:e}, det {det})")]
    NotARotation { ortho_err: f64, det: f64 },
}

/// Skew-symmetric matrix `ω^` of a 3-vector.
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Inverse of [`hat`] applied to the skew part of `m`.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5
}

/// An element of SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Accepts `m` if it satisfies the rotation invariants to [`ROTATION_TOL`].
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, LieError> {
        let ortho_err = (m * m.transpose() - Matrix3::identity()).norm();
        let det = m.determinant();
        if ortho_err <= ROTATION_TOL && (det - 1.0).abs() <= ROTATION_TOL {
            Ok(Rotation(m))
        } else {
            Err(LieError::NotARotation { ortho_err, det })
        }
    }

    pub fn rot_x(a: f64) -> Self {
        let (s, c) = a.sin_cos();
        Rotation(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    pub fn rot_y(a: f64) -> Self {
        let (s, c) = a.sin_cos();
        Rotation(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn rot_z(a: f64) -> Self {
        let (s, c) = a.sin_cos();
        Rotation(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let w = vee(&self.0);
        let c = (self.0.trace() - 1.0) * 0.5;
        w.norm().atan2(c)
    }

    /// Orthogonality error `‖R·Rᵀ − I‖_F`.
    pub fn orthogonality_error(&self) -> f64 {
        (self.0 * self.0.transpose() - Matrix3::identity()).norm()
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul for &Rotation {
    type Output = Rotation;
    fn mul(self, rhs: &Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

/// A rigid transform `T = [R t; 0 1]`. Translation in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub r: Rotation,
    pub t: Vector3<f64>,
}

impl Pose {
    pub fn new(r: Rotation, t: Vector3<f64>) -> Self {
        Pose { r, t }
    }

    pub fn identity() -> Self {
        Pose { r: Rotation::identity(), t: Vector3::zeros() }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose { r: Rotation::identity(), t }
    }

    /// The 4×4 homogeneous matrix.
    pub fn homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.r.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.t);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Result<Self, LieError> {
        let r = Rotation::from_matrix(m.fixed_view::<3, 3>(0, 0).into_owned())?;
        Ok(Pose { r, t: m.fixed_view::<3, 1>(0, 3).into_owned() })
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r.rotate(p) + self.t
    }

    pub fn inverse(&self) -> Self {
        let rt = self.r.transpose();
        Pose { t: -rt.rotate(&self.t), r: rt }
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        Pose { r: self.r * rhs.r, t: self.r.rotate(&rhs.t) + self.t }
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.homogeneous();
        for i in 0..4 {
            writeln!(
                f,
                "[{:>22.15e} {:>22.15e} {:>22.15e} {:>22.15e}]",
                m[(i, 0)],
                m[(i, 1)],
                m[(i, 2)],
                m[(i, 3)]
            )?;
        }
        Ok(())
    }
}

/// se(3) coordinates `ξ = (ρ, ω)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn zero() -> Self {
        Twist(Vector6::zeros())
    }

    pub fn from_parts(rho: Vector3<f64>, omega: Vector3<f64>) -> Self {
        Twist(Vector6::new(rho.x, rho.y, rho.z, omega.x, omega.y, omega.z))
    }

    pub fn rho(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn omega(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }
}

/// Raw 9D network output, reshaped row-major into `M(q)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NineDRotation(pub [f64; 9]);

impl NineDRotation {
    pub fn from_rotation(r: &Rotation) -> Self {
        Self::from_matrix(r.matrix())
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let mut q = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                q[3 * i + j] = m[(i, j)];
            }
        }
        NineDRotation(q)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.0)
    }
}

pub fn so3_exp(omega: &Vector3<f64>) -> Rotation {
    let theta = omega.norm();
    let k = hat(omega);
    let k2 = k * k;
    let m = if theta < SMALL_ANGLE {
        Matrix3::identity() + k + k2 * 0.5
    } else {
        let (s, c) = theta.sin_cos();
        Matrix3::identity() + k * (s / theta) + k2 * ((1.0 - c) / (theta * theta))
    };
    Rotation(m)
}

/// Rotation vector of `r`. Valid for any angle `< π`; near π the axis is
/// recovered from the symmetric part so it stays well-conditioned.
pub fn so3_log(r: &Rotation) -> Vector3<f64> {
    let m = r.matrix();
    let w = vee(m);
    let s = w.norm();
    let c = (m.trace() - 1.0) * 0.5;
    let theta = s.atan2(c);
    if theta < SMALL_ANGLE {
        return w;
    }
    if theta < PI - 0.1 {
        return w * (theta / s);
    }
    // (R + Rᵀ)/2 − cosθ·I = (1 − cosθ)·a·aᵀ; pick the best-conditioned column.
    let sym = (m + m.transpose()) * 0.5 - Matrix3::identity() * c;
    let mut best = 0;
    for i in 1..3 {
        if sym[(i, i)] > sym[(best, best)] {
            best = i;
        }
    }
    let mut axis: Vector3<f64> = sym.column(best).into_owned();
    axis /= axis.norm();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Left Jacobian `V(ω)` mapping ρ to the translation of `exp(ξ)`.
fn left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let k = hat(omega);
    let k2 = k * k;
    if theta < SMALL_ANGLE {
        Matrix3::identity() + k * 0.5 + k2 * (1.0 / 6.0)
    } else {
        let t2 = theta * theta;
        let (s, c) = theta.sin_cos();
        Matrix3::identity() + k * ((1.0 - c) / t2) + k2 * ((theta - s) / (t2 * theta))
    }
}

fn left_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let k = hat(omega);
    let k2 = k * k;
    if theta < SMALL_ANGLE {
        Matrix3::identity() - k * 0.5 + k2 * (1.0 / 12.0)
    } else {
        let (s, c) = theta.sin_cos();
        let coeff = (1.0 - theta * s / (2.0 * (1.0 - c))) / (theta * theta);
        Matrix3::identity() - k * 0.5 + k2 * coeff
    }
}

pub fn se3_exp(xi: &Twist) -> Pose {
    let omega = xi.omega();
    Pose { r: so3_exp(&omega), t: left_jacobian(&omega) * xi.rho() }
}

pub fn se3_log(pose: &Pose) -> Result<Twist, LieError> {
    let angle = pose.r.angle();
    if angle >= PI - NEAR_PI_MARGIN {
        return Err(LieError::NearPiSingularity { angle });
    }
    let omega = so3_log(&pose.r);
    Ok(Twist::from_parts(left_jacobian_inv(&omega) * pose.t, omega))
}

/// `R = R_x(α)·R_y(β)·R_z(γ)`.
pub fn euler_to_rotation(alpha: f64, beta: f64, gamma: f64) -> Rotation {
    Rotation::rot_x(alpha) * Rotation::rot_y(beta) * Rotation::rot_z(gamma)
}

/// Inverse of [`euler_to_rotation`] for `|β| < π/2`.
pub fn rotation_to_euler(r: &Rotation) -> (f64, f64, f64) {
    let m = r.matrix();
    // R[0,2] = sinβ, R[1,2] = −sinα·cosβ, R[2,2] = cosα·cosβ,
    // R[0,1] = −cosβ·sinγ, R[0,0] = cosβ·cosγ
    let beta = m[(0, 2)].clamp(-1.0, 1.0).asin();
    let alpha = (-m[(1, 2)]).atan2(m[(2, 2)]);
    let gamma = (-m[(0, 1)]).atan2(m[(0, 0)]);
    (alpha, beta, gamma)
}

/// Unit quaternion `(w, x, y, z)` with `w ≥ 0`.
pub fn rotation_to_quaternion(r: &Rotation) -> Vector4<f64> {
    let m = r.matrix();
    let tr = m.trace();
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        Vector4::new(
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        )
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        Vector4::new(
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        )
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        Vector4::new(
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        )
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        Vector4::new(
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        )
    };
    let q = q / q.norm();
    if q[0] < 0.0 {
        -q
    } else {
        q
    }
}

/// Rotation of a (not necessarily normalized) quaternion `(w, x, y, z)`.
pub fn quaternion_to_rotation(q: &Vector4<f64>) -> Rotation {
    let q = q / q.norm();
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Rotation(Matrix3::new(
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

/// Result of projecting `M(q)` onto SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvdProjection {
    pub rotation: Rotation,
    pub min_singular_value: f64,
}

impl SvdProjection {
    pub fn rank_deficient(&self) -> bool {
        self.min_singular_value < RANK_TOL
    }

    pub fn check(self) -> Result<Rotation, LieError> {
        if self.rank_deficient() {
            Err(LieError::RankDeficient { sigma_min: self.min_singular_value })
        } else {
            Ok(self.rotation)
        }
    }
}

/// Nearest special-orthogonal matrix to `M(q)` in Frobenius norm:
/// `U·diag(1, 1, det(UVᵀ))·Vᵀ`.
pub fn svd_orthogonalize(q: &NineDRotation) -> SvdProjection {
    let m = q.matrix();
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => unreachable!("svd requested with both factors"),
    };
    // nalgebra does not sort singular values; move the smallest to the end
    // so the determinant correction lands on it.
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let u = Matrix3::from_columns(&[u.column(order[0]), u.column(order[1]), u.column(order[2])]);
    let v_t = Matrix3::from_rows(&[v_t.row(order[0]), v_t.row(order[1]), v_t.row(order[2])]);
    let d = (u * v_t).determinant().signum();
    let d = if d == 0.0 { 1.0 } else { d };
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t;
    SvdProjection { rotation: Rotation(r), min_singular_value: sv[order[2]] }
}

/// `‖log(R₁R₂ᵀ)‖_F`, which equals `√2·θ` for relative angle θ.
pub fn geodesic_distance(r1: &Rotation, r2: &Rotation) -> f64 {
    std::f64::consts::SQRT_2 * (r1 * &r2.transpose()).angle()
}

/// Degrees view of a [`geodesic_distance`] value.
pub fn geodesic_to_degrees(d: f64) -> f64 {
    (d / std::f64::consts::SQRT_2).to_degrees()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn assert_mat_close(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) {
        let d = (a - b).norm();
        assert!(d <= tol, "matrices differ by {d:e}\n{a}\n{b}");
    }

    fn vec3() -> impl Strategy<Value = Vector3<f64>> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64).prop_map(|(x, y, z)| Vector3::new(x, y, z))
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(so3_exp(&Vector3::zeros()).matrix(), &Matrix3::identity());
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        let r = so3_exp(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_mat_close(r.matrix(), &expected, 1e-15);
    }

    #[test]
    fn small_angle_branch_is_continuous() {
        let w = Vector3::new(3e-9, -2e-9, 1e-9);
        let r = so3_exp(&w);
        assert!(r.orthogonality_error() < 1e-15);
        assert!((so3_log(&r) - w).norm() < 1e-20);
    }

    #[test]
    fn log_near_pi_recovers_axis() {
        let axis = Vector3::new(1.0, 2.0, -2.0).normalize();
        let w = axis * (PI - 1e-4);
        let r = so3_exp(&w);
        assert!((so3_log(&r) - w).norm() < 1e-9);
    }

    #[test]
    fn se3_zero_and_pure_translation() {
        let p = se3_exp(&Twist::zero());
        assert_eq!(p, Pose::identity());
        let p = se3_exp(&Twist(Vector6::new(10.0, 0.0, 0.0, 0.0, 0.0, 0.0)));
        assert_eq!(p.r.matrix(), &Matrix3::identity());
        assert_eq!(p.t, Vector3::new(10.0, 0.0, 0.0));
    }

    #[test]
    fn se3_log_rejects_near_pi() {
        let p = Pose::new(Rotation::rot_x(PI), Vector3::zeros());
        assert!(matches!(se3_log(&p), Err(LieError::NearPiSingularity { .. })));
    }

    #[test]
    fn homogeneous_has_unit_bottom_row() {
        let p = se3_exp(&Twist(Vector6::new(1.0, -2.0, 3.0, 0.1, 0.2, -0.3)));
        let m = p.homogeneous();
        assert_eq!(m.row(3).into_owned(), nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0));
        assert_eq!(Pose::from_homogeneous(&m).unwrap(), p);
    }

    #[test]
    fn euler_examples() {
        assert_eq!(euler_to_rotation(0.0, 0.0, 0.0).matrix(), &Matrix3::identity());
        assert_mat_close(
            euler_to_rotation(FRAC_PI_2, 0.0, 0.0).matrix(),
            &Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0),
            1e-15,
        );
        // Independent term-by-term product of the three axis matrices.
        let (a, b, g) = (0.1f64, 0.2f64, 0.3f64);
        let rx = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
        let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
        let rz = [[g.cos(), -g.sin(), 0.0], [g.sin(), g.cos(), 0.0], [0.0, 0.0, 1.0]];
        let mut xy = [[0.0; 3]; 3];
        let mut xyz = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    xy[i][j] += rx[i][k] * ry[k][j];
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    xyz[i][j] += xy[i][k] * rz[k][j];
                }
            }
        }
        let r = euler_to_rotation(a, b, g);
        for i in 0..3 {
            for j in 0..3 {
                assert!((r.matrix()[(i, j)] - xyz[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn quaternion_examples() {
        assert_eq!(rotation_to_quaternion(&Rotation::identity()), Vector4::new(1.0, 0.0, 0.0, 0.0));
        let q = rotation_to_quaternion(&Rotation::rot_z(PI));
        assert!((q - Vector4::new(0.0, 0.0, 0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn svd_examples() {
        let p = svd_orthogonalize(&NineDRotation::from_rotation(&Rotation::identity()));
        assert_mat_close(p.rotation.matrix(), &Matrix3::identity(), 1e-15);
        assert!(!p.rank_deficient());

        let rz = Rotation::rot_z(30f64.to_radians());
        let p = svd_orthogonalize(&NineDRotation::from_matrix(&(rz.matrix() * 2.0)));
        assert_mat_close(p.rotation.matrix(), rz.matrix(), 1e-14);
    }

    #[test]
    fn svd_flags_rank_deficiency_but_returns_rotation() {
        let p = svd_orthogonalize(&NineDRotation([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]));
        assert!(p.rank_deficient());
        assert!(Rotation::from_matrix(*p.rotation.matrix()).is_ok());
        assert!(matches!(p.check(), Err(LieError::RankDeficient { .. })));
        let p = svd_orthogonalize(&NineDRotation([0.0; 9]));
        assert!(Rotation::from_matrix(*p.rotation.matrix()).is_ok());
    }

    #[test]
    fn svd_handles_reflections() {
        let m = Matrix3::from_diagonal(&Vector3::new(3.0, 2.0, -1.0));
        let p = svd_orthogonalize(&NineDRotation::from_matrix(&m));
        assert_mat_close(p.rotation.matrix(), &Matrix3::identity(), 1e-14);
    }

    #[test]
    fn svd_projection_beats_random_search() {
        use rand_chacha::ChaCha20Rng;
        use rand_core::{RngCore, SeedableRng};
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut u = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
        for _ in 0..5 {
            let m = Matrix3::from_fn(|_, _| u());
            let best = svd_orthogonalize(&NineDRotation::from_matrix(&m)).rotation;
            let d_best = (m - best.matrix()).norm();
            for _ in 0..10_000 {
                let cand = quaternion_to_rotation(&Vector4::new(u(), u(), u(), u()));
                assert!((m - cand.matrix()).norm() >= d_best - 1e-12);
            }
        }
    }

    #[test]
    fn geodesic_examples() {
        let r = euler_to_rotation(0.3, -0.2, 0.9);
        assert_eq!(geodesic_distance(&r, &r), 0.0);
        let d = geodesic_distance(&Rotation::identity(), &Rotation::rot_z(FRAC_PI_2));
        assert!((d - std::f64::consts::SQRT_2 * FRAC_PI_2).abs() < 1e-15);
        assert!((d - 2.2214).abs() < 1e-4);
        assert!((geodesic_to_degrees(d) - 90.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn so3_round_trip(w in vec3()) {
            let w = w * 3.0;
            prop_assume!(w.norm() < PI - 1e-3);
            let r = so3_exp(&w);
            prop_assert!(r.orthogonality_error() <= ROTATION_TOL);
            prop_assert!((r.matrix().determinant() - 1.0).abs() <= ROTATION_TOL);
            prop_assert!((so3_log(&r) - w).amax() <= 1e-9);
        }

        #[test]
        fn se3_round_trip(rho in vec3(), w in vec3()) {
            let w = w * 3.0;
            prop_assume!(w.norm() < PI - 1e-3);
            let xi = Twist::from_parts(rho * 50.0, w);
            let back = se3_log(&se3_exp(&xi)).unwrap();
            prop_assert!((back.0 - xi.0).amax() <= 1e-9);
            let t = se3_exp(&xi);
            let t2 = se3_exp(&back);
            prop_assert!((t.homogeneous() - t2.homogeneous()).norm() <= 1e-9);
        }

        #[test]
        fn quaternion_round_trip(w in vec3()) {
            let r = so3_exp(&(w * 3.0));
            let q = rotation_to_quaternion(&r);
            prop_assert!((q.norm() - 1.0).abs() < 1e-12);
            prop_assert!(q[0] >= 0.0);
            prop_assert!((quaternion_to_rotation(&q).matrix() - r.matrix()).norm() <= 1e-9);
        }

        #[test]
        fn euler_round_trip(a in -3.0..3.0f64, b in -1.4..1.4f64, g in -3.0..3.0f64) {
            let (a2, b2, g2) = rotation_to_euler(&euler_to_rotation(a, b, g));
            prop_assert!((a - a2).abs() < 1e-9 && (b - b2).abs() < 1e-9 && (g - g2).abs() < 1e-9);
        }

        #[test]
        fn svd_is_scale_invariant(v in proptest::array::uniform9(-1.0..1.0f64), s in 0.01..100.0f64) {
            let p1 = svd_orthogonalize(&NineDRotation(v));
            prop_assume!(!p1.rank_deficient());
            let scaled: Vec<f64> = v.iter().map(|x| x * s).collect();
            let p2 = svd_orthogonalize(&NineDRotation(scaled.try_into().unwrap()));
            // Near-degenerate singular pairs make the projection ill-conditioned.
            let sv = NineDRotation(v).matrix().singular_values();
            let mut sv: Vec<f64> = sv.iter().copied().collect();
            sv.sort_by(|a, b| a.total_cmp(b));
            prop_assume!(sv[0] + sv[1] > 1e-3);
            prop_assert!((p1.rotation.matrix() - p2.rotation.matrix()).norm() < 1e-9);
            prop_assert!(p1.rotation.orthogonality_error() <= ROTATION_TOL);
            prop_assert!((p1.rotation.matrix().determinant() - 1.0).abs() <= ROTATION_TOL);
        }

        #[test]
        fn geodesic_is_bi_invariant(w1 in vec3(), w2 in vec3(), w3 in vec3()) {
            let (r1, r2, g) = (so3_exp(&w1), so3_exp(&w2), so3_exp(&(w3 * 3.0)));
            let d = geodesic_distance(&r1, &r2);
            prop_assert!((geodesic_distance(&(g * r1), &(g * r2)) - d).abs() < 1e-9);
            prop_assert!((geodesic_distance(&(r1 * g), &(r2 * g)) - d).abs() < 1e-9);
            prop_assert!((geodesic_distance(&r2, &r1) - d).abs() < 1e-12);
        }
    }

    #[test]
    fn geodesic_triangle_inequality() {
        use rand_chacha::ChaCha20Rng;
        use rand_core::{RngCore, SeedableRng};
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut u = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
        for _ in 0..1000 {
            let r: Vec<Rotation> =
                (0..3).map(|_| so3_exp(&(Vector3::new(u(), u(), u()) * 1.8))).collect();
            let ab = geodesic_distance(&r[0], &r[1]);
            let bc = geodesic_distance(&r[1], &r[2]);
            let ac = geodesic_distance(&r[0], &r[2]);
            assert!(ac <= ab + bc + 1e-9);
        }
    }
}
