//! Newton-Raphson refinement of a pose estimate in twist coordinates.
//!
//! The unknown is the global twist `ξ = log(T)∨`, updated additively:
//! `ξ_{z+1} = ξ_z − Z̃(ξ_z)·F(ξ_z)` where `F(ξ) = IK(exp(ξ^)) − l_os` and `Z̃`
//! is the hyperpower approximation of `J⁺`. The Jacobian is taken by central
//! differences.
//!
//! The stopping threshold γ applies to `‖ξ_{z+1} − ξ_z‖₁`, which sums mm
//! (translation part) and rad (rotation part). The units are mixed on purpose;
//! that is the quantity the termination test is defined on.

use std::f64::consts::PI;

use nalgebra::Vector6;
use rayon::prelude::*;

use crate::hyperpinv::{self, Mat6, DEFAULT_F_MAX};
use crate::liegroup::{se3_exp, LieError, Pose, Twist, NEAR_PI_MARGIN};
use crate::platform::{inverse_kinematics, PlatformConfig};

pub const DEFAULT_GAMMA: f64 = 1e-4;
pub const DEFAULT_Z_MAX: usize = 100;
/// Central-difference step, mm for translation coordinates and rad for rotation.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// `F(ξ) = IK(exp(ξ^)) − target_los`.
#[derive(Debug, Clone, Copy)]
pub struct FkObjective<'a> {
    pub cfg: &'a PlatformConfig,
    pub target_los: Vector6<f64>,
}

impl<'a> FkObjective<'a> {
    pub fn new(cfg: &'a PlatformConfig, target_los: Vector6<f64>) -> Self {
        FkObjective { cfg, target_los }
    }

    /// Objective whose root is `pose`.
    pub fn for_pose(cfg: &'a PlatformConfig, pose: &Pose) -> Self {
        FkObjective { cfg, target_los: inverse_kinematics(cfg, pose).los }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveParams {
    pub gamma: f64,
    pub z_max: usize,
    pub f_max: usize,
    pub fd_step: f64,
}

impl Default for SolveParams {
    fn default() -> Self {
        SolveParams { gamma: DEFAULT_GAMMA, z_max: DEFAULT_Z_MAX, f_max: DEFAULT_F_MAX, fd_step: DEFAULT_FD_STEP }
    }
}

impl SolveParams {
    pub fn with_gamma(gamma: f64) -> Self {
        SolveParams { gamma, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub xi_final: Twist,
    pub converged: bool,
    /// Outer iterations performed.
    pub outer_iterations: usize,
    /// `‖ξ_{z+1} − ξ_z‖₁` of the last step taken (∞ if none was taken).
    pub final_step_norm: f64,
    /// The pseudoinverse iteration failed on the Jacobian.
    pub singular_flag: bool,
    /// The iterate left the log-map chart (rotation angle near π).
    pub left_chart: bool,
    /// `‖F(ξ_final)‖₂`, mm.
    pub residual_norm: f64,
    pub step_norms: Vec<f64>,
}

impl SolveReport {
    pub fn pose(&self) -> Pose {
        se3_exp(&self.xi_final)
    }
}

fn check_chart(xi: &Twist) -> Result<(), LieError> {
    let angle = xi.omega().norm();
    if angle >= PI - NEAR_PI_MARGIN {
        Err(LieError::NearPiSingularity { angle })
    } else {
        Ok(())
    }
}

/// Component `s` is `‖exp(ξ^)·b_s − a_s‖₂ − l_s − target_los_s`.
pub fn residual(obj: &FkObjective, xi: &Twist) -> Result<Vector6<f64>, LieError> {
    check_chart(xi)?;
    Ok(inverse_kinematics(obj.cfg, &se3_exp(xi)).los - obj.target_los)
}

/// Central-difference Jacobian `∂F/∂ξ`.
pub fn jacobian(obj: &FkObjective, xi: &Twist, h: f64) -> Result<Mat6, LieError> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut j = Mat6::zeros();
    for c in 0..6 {
        let mut plus = *xi;
        let mut minus = *xi;
        plus.0[c] += h;
        minus.0[c] -= h;
        let col = (residual(obj, &plus)? - residual(obj, &minus)?) / (2.0 * h);
        j.set_column(c, &col);
    }
    Ok(j)
}

/// Newton-Raphson with hyperpower pseudoinverse steps.
pub fn refine(obj: &FkObjective, xi0: &Twist, params: &SolveParams) -> SolveReport {
    assert!(params.gamma > 0.0, "gamma must be positive");
    let mut xi = *xi0;
    let mut report = SolveReport {
        xi_final: xi,
        converged: false,
        outer_iterations: 0,
        final_step_norm: f64::INFINITY,
        singular_flag: false,
        left_chart: false,
        residual_norm: f64::NAN,
        step_norms: Vec::new(),
    };
    for z in 1..=params.z_max {
        let (f, j) = match (residual(obj, &xi), jacobian(obj, &xi, params.fd_step)) {
            (Ok(f), Ok(j)) => (f, j),
            _ => {
                report.left_chart = true;
                break;
            }
        };
        let pinv = match hyperpinv::pseudoinverse(&j, params.f_max) {
            Ok(p) => p,
            Err(_) => {
                report.singular_flag = true;
                break;
            }
        };
        let next = Twist(xi.0 - pinv.z * f);
        let step = (next.0 - xi.0).lp_norm(1);
        xi = next;
        report.outer_iterations = z;
        report.final_step_norm = step;
        report.step_norms.push(step);
        if !step.is_finite() {
            break;
        }
        if step < params.gamma {
            report.converged = true;
            break;
        }
    }
    report.xi_final = xi;
    report.residual_norm = residual(obj, &xi).map(|r| r.norm()).unwrap_or(f64::NAN);
    if report.residual_norm.is_nan() {
        report.left_chart = true;
        report.converged = false;
    }
    report
}

/// Refines every problem independently across the rayon pool; results are in
/// input order and equal to calling [`refine`] on each entry.
pub fn refine_batch(objs: &[FkObjective], xi0s: &[Twist], params: &SolveParams) -> Vec<SolveReport> {
    assert_eq!(objs.len(), xi0s.len(), "objective and start lists differ in length");
    objs.par_iter().zip(xi0s.par_iter()).map(|(obj, xi0)| refine(obj, xi0, params)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::{euler_to_rotation, se3_log, so3_exp, Rotation};
    use crate::platform::{default_config, EdgeMode};
    use nalgebra::Vector3;
    use rand_chacha::ChaCha20Rng;
    use rand_core::{RngCore, SeedableRng};

    struct Gen(ChaCha20Rng);

    impl Gen {
        fn new(seed: u64) -> Self {
            Gen(ChaCha20Rng::seed_from_u64(seed))
        }
        fn sym(&mut self) -> f64 {
            (self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        }
        fn pose(&mut self) -> Pose {
            let t = Vector3::new(self.sym(), self.sym(), self.sym()) * 50.0;
            let e = 30f64.to_radians();
            Pose::new(euler_to_rotation(self.sym() * e, self.sym() * e, self.sym() * e), t)
        }
        /// Perturbation within `mm` and `deg` of `pose`.
        fn perturb(&mut self, pose: &Pose, mm: f64, deg: f64) -> Pose {
            let dt = Vector3::new(self.sym(), self.sym(), self.sym());
            let dt = dt / dt.norm() * mm * self.sym().abs();
            let dw = Vector3::new(self.sym(), self.sym(), self.sym());
            let dw = dw / dw.norm() * deg.to_radians() * self.sym().abs();
            Pose::new(so3_exp(&dw) * pose.r, pose.t + dt)
        }
    }

    #[test]
    fn residual_examples() {
        let cfg = default_config();
        let pose = Pose::new(euler_to_rotation(0.2, -0.1, 0.3), Vector3::new(10.0, -20.0, 5.0));
        let obj = FkObjective::for_pose(&cfg, &pose);
        let xi = se3_log(&pose).unwrap();
        assert!(residual(&obj, &xi).unwrap().amax() < 1e-9);

        let zero = FkObjective::new(&cfg, Vector6::zeros());
        assert!(residual(&zero, &Twist::zero()).unwrap().amax() < 1e-12);

        let mut moved = xi;
        moved.0[2] += 1.5;
        moved.0[4] -= 0.01;
        let expected = inverse_kinematics(&cfg, &se3_exp(&moved)).los - obj.target_los;
        assert_eq!(residual(&obj, &moved).unwrap(), expected);
    }

    #[test]
    fn residual_rejects_near_pi() {
        let cfg = default_config();
        let obj = FkObjective::new(&cfg, Vector6::zeros());
        let xi = Twist::from_parts(Vector3::zeros(), Vector3::new(0.0, 0.0, PI));
        assert!(matches!(residual(&obj, &xi), Err(LieError::NearPiSingularity { .. })));
    }

    #[test]
    fn translation_columns_are_leg_directions_at_home() {
        let cfg = default_config();
        let obj = FkObjective::new(&cfg, Vector6::zeros());
        let j = jacobian(&obj, &Twist::zero(), DEFAULT_FD_STEP).unwrap();
        for s in 0..6 {
            let u = (cfg.leg_top(s) - cfg.a[s]).normalize();
            for c in 0..3 {
                assert!((j[(s, c)] - u[c]).abs() < 1e-7, "leg {s} col {c}");
            }
            // Rotation block at home: ∂l/∂ω = b × u.
            let bxu = cfg.leg_top(s).cross(&u);
            for c in 0..3 {
                assert!((j[(s, 3 + c)] - bxu[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn home_jacobian_rows_follow_the_symmetry() {
        let cfg = default_config();
        let obj = FkObjective::new(&cfg, Vector6::zeros());
        let j = jacobian(&obj, &Twist::zero(), DEFAULT_FD_STEP).unwrap();
        // Rotating the world by 120° maps leg s to leg s+2 and rotates each
        // row's translation and rotation blocks by the same rotation.
        let rz = *Rotation::rot_z(120f64.to_radians()).matrix();
        for s in 0..6 {
            let row = j.row(s);
            let t = rz * Vector3::new(row[0], row[1], row[2]);
            let w = rz * Vector3::new(row[3], row[4], row[5]);
            let other = j.row((s + 2) % 6);
            for c in 0..3 {
                assert!((t[c] - other[c]).abs() < 1e-6);
                assert!((w[c] - other[3 + c]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn jacobian_is_smooth_in_step() {
        let cfg = default_config();
        let mut g = Gen::new(9);
        let pose = g.pose();
        let obj = FkObjective::new(&cfg, Vector6::zeros());
        let xi = se3_log(&pose).unwrap();
        let j1 = jacobian(&obj, &xi, 1e-6).unwrap();
        let j2 = jacobian(&obj, &xi, 2e-6).unwrap();
        let scale = j1.amax();
        for (a, b) in j1.iter().zip(j2.iter()) {
            assert!((a - b).abs() <= 1e-6 * scale.max(a.abs()));
        }
    }

    #[test]
    fn exact_start_converges_in_one_step() {
        let cfg = default_config();
        let pose = Pose::new(euler_to_rotation(-0.3, 0.2, 0.1), Vector3::new(-30.0, 12.0, 40.0));
        let obj = FkObjective::for_pose(&cfg, &pose);
        let r = refine(&obj, &se3_log(&pose).unwrap(), &SolveParams::default());
        assert!(r.converged);
        assert_eq!(r.outer_iterations, 1);
        assert!(r.final_step_norm < 1e-10);
    }

    #[test]
    fn converges_from_nearby_starts() {
        let cfg = default_config();
        let mut g = Gen::new(10);
        let params = SolveParams::default();
        let mut monotone = 0;
        let trials = 1000;
        for _ in 0..trials {
            let truth = g.pose();
            let start = g.perturb(&truth, 1.0, 1.0);
            let obj = FkObjective::for_pose(&cfg, &truth);
            let r = refine(&obj, &se3_log(&start).unwrap(), &params);
            assert!(r.converged && !r.singular_flag);
            assert!(r.outer_iterations <= 10);
            assert!(r.final_step_norm < params.gamma);
            assert!(r.residual_norm <= 10.0 * params.gamma);
            let pose = r.pose();
            assert!((pose.t - truth.t).norm() < 1e-6);
            if r.step_norms.windows(2).skip(1).all(|w| w[1] < w[0]) {
                monotone += 1;
            }
        }
        assert!(monotone as f64 >= 0.99 * trials as f64);
    }

    #[test]
    fn quadratic_basin_at_network_error_scale() {
        let cfg = default_config();
        let mut g = Gen::new(12);
        let params = SolveParams { gamma: 1e-10, ..SolveParams::default() };
        let mut monotone = 0;
        for _ in 0..1000 {
            let truth = g.pose();
            let start = g.perturb(&truth, 2.0, 2.0);
            let r = refine(&FkObjective::for_pose(&cfg, &truth), &se3_log(&start).unwrap(), &params);
            // Steps shrink until they hit the floating-point floor.
            let informative: Vec<f64> = r.step_norms.iter().copied().filter(|&s| s > 1e-9).collect();
            if informative.windows(2).skip(1).all(|w| w[1] < w[0]) {
                monotone += 1;
            }
        }
        assert!(monotone >= 990, "{monotone}");
    }

    #[test]
    fn median_iterations_grow_with_precision() {
        let cfg = default_config();
        let mut g = Gen::new(11);
        let cases: Vec<(Pose, Pose)> = (0..200)
            .map(|_| {
                let truth = g.pose();
                let start = g.perturb(&truth, 2.0, 2.0);
                (truth, start)
            })
            .collect();
        let median = |gamma: f64| {
            let mut its: Vec<usize> = cases
                .iter()
                .map(|(truth, start)| {
                    let obj = FkObjective::for_pose(&cfg, truth);
                    refine(&obj, &se3_log(start).unwrap(), &SolveParams::with_gamma(gamma)).outer_iterations
                })
                .collect();
            its.sort();
            its[(its.len() - 1) / 2]
        };
        let (a, b, c) = (median(1e-2), median(1e-3), median(1e-4));
        assert!(a <= b && b <= c, "{a} {b} {c}");
    }

    /// Leg 1 rebuilt on the line of leg 0, so both legs are collinear at home.
    fn collinear_config() -> PlatformConfig {
        let base = default_config();
        let u = (base.b[0] - base.a[0]).normalize();
        let mut a = base.a;
        let mut b = base.b;
        a[1] = base.a[0] + u * 40.0;
        b[1] = base.b[0] + u * 40.0;
        PlatformConfig::from_hinges(a, b, base.pairing, EdgeMode::Legs).unwrap()
    }

    #[test]
    fn singular_target_is_flagged() {
        let cfg = collinear_config();
        let obj = FkObjective::new(&cfg, Vector6::zeros());
        let r = refine(&obj, &Twist::zero(), &SolveParams::default());
        assert!(r.singular_flag);
        assert!(!r.converged);
    }

    #[test]
    fn batch_matches_single_and_is_permutation_equivariant() {
        let cfg = default_config();
        let mut g = Gen::new(13);
        let cases: Vec<(Pose, Pose)> = (0..64)
            .map(|_| {
                let truth = g.pose();
                (truth, g.perturb(&truth, 2.0, 2.0))
            })
            .collect();
        let objs: Vec<FkObjective> = cases.iter().map(|(t, _)| FkObjective::for_pose(&cfg, t)).collect();
        let starts: Vec<Twist> = cases.iter().map(|(_, s)| se3_log(s).unwrap()).collect();
        let params = SolveParams::default();
        let batch = refine_batch(&objs, &starts, &params);
        for i in 0..cases.len() {
            assert_eq!(batch[i], refine(&objs[i], &starts[i], &params));
        }
        let one = refine_batch(&objs[..1], &starts[..1], &params);
        assert_eq!(one[0], refine(&objs[0], &starts[0], &params));

        let order: Vec<usize> = (0..cases.len()).rev().collect();
        let objs_r: Vec<FkObjective> = order.iter().map(|&i| objs[i]).collect();
        let starts_r: Vec<Twist> = order.iter().map(|&i| starts[i]).collect();
        let shuffled = refine_batch(&objs_r, &starts_r, &params);
        for (k, &i) in order.iter().enumerate() {
            assert_eq!(shuffled[k], batch[i]);
        }
    }
}
