//! Accuracy metrics and the two-stage benchmark.
//!
//! Rotation errors are kept in Frobenius units `‖log(R·R_gtᵀ)‖_F = √2·θ`;
//! the degree view divides by √2 and converts, i.e. it is the geodesic
//! angle θ in degrees. Medians use the lower of the two middle values when
//! the count is even.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::Vector6;
use thiserror::Error;

use crate::datagen::Dataset;
use crate::gnn::Model;
use crate::liegroup::{geodesic_distance, geodesic_to_degrees, se3_log, Pose, Twist};
use crate::nrsolver::{refine_batch, FkObjective, SolveParams, SolveReport};
use crate::platform::{inverse_kinematics, PlatformConfig};

pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.5, 1.0, 1.5, 2.0, 3.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("metric over an empty set")]
    EmptySet,
    #[error("prediction and ground-truth lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

fn check(a: usize, b: usize) -> Result<(), EvalError> {
    if a != b {
        Err(EvalError::LengthMismatch(a, b))
    } else if a == 0 {
        Err(EvalError::EmptySet)
    } else {
        Ok(())
    }
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len() as f64;
    v.sum::<f64>() / n
}

pub fn trans_errors(preds: &[Pose], gts: &[Pose]) -> Vec<f64> {
    preds.iter().zip(gts).map(|(p, g)| (p.t - g.t).norm()).collect()
}

/// Per-pair geodesic errors, Frobenius units.
pub fn rot_errors(preds: &[Pose], gts: &[Pose]) -> Vec<f64> {
    preds.iter().zip(gts).map(|(p, g)| geodesic_distance(&p.r, &g.r)).collect()
}

pub fn ik_errors(cfg: &PlatformConfig, preds: &[Pose], target_los: &[Vector6<f64>]) -> Vec<f64> {
    preds.iter().zip(target_los).map(|(p, l)| (inverse_kinematics(cfg, p).los - l).norm()).collect()
}

/// Mean translation error, mm.
pub fn e_trans(preds: &[Pose], gts: &[Pose]) -> Result<f64, EvalError> {
    check(preds.len(), gts.len())?;
    Ok(mean(trans_errors(preds, gts).into_iter()))
}

/// Mean geodesic rotation error, Frobenius units.
pub fn e_rot(preds: &[Pose], gts: &[Pose]) -> Result<f64, EvalError> {
    check(preds.len(), gts.len())?;
    Ok(mean(rot_errors(preds, gts).into_iter()))
}

/// [`e_rot`] as a geodesic angle in degrees.
pub fn e_rot_degrees(preds: &[Pose], gts: &[Pose]) -> Result<f64, EvalError> {
    e_rot(preds, gts).map(geodesic_to_degrees)
}

/// Mean `‖IK(T) − l_os‖₂`, mm.
pub fn e_ik(cfg: &PlatformConfig, preds: &[Pose], target_los: &[Vector6<f64>]) -> Result<f64, EvalError> {
    check(preds.len(), target_los.len())?;
    Ok(mean(ik_errors(cfg, preds, target_los).into_iter()))
}

/// Percentage of errors strictly below each threshold.
pub fn accuracy_buckets(errors: &[f64], thresholds: &[f64]) -> Vec<f64> {
    let w = errors.len() as f64;
    thresholds
        .iter()
        .map(|&t| if errors.is_empty() { 0.0 } else { errors.iter().filter(|&&e| e < t).count() as f64 / w * 100.0 })
        .collect()
}

/// Lower median.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub count: usize,
    pub e_trans: f64,
    pub median_trans: f64,
    /// Frobenius units.
    pub e_rot: f64,
    pub e_rot_deg: f64,
    pub median_rot_deg: f64,
    pub e_ik: f64,
    pub thresholds: Vec<f64>,
    /// Percent of samples with translation error below each threshold (mm).
    pub trans_acc: Vec<f64>,
    /// Percent of samples with rotation angle below each threshold (deg).
    pub rot_acc: Vec<f64>,
}

impl EvalSummary {
    pub fn compute(
        cfg: &PlatformConfig,
        preds: &[Pose],
        gts: &[Pose],
        target_los: &[Vector6<f64>],
        thresholds: &[f64],
    ) -> Result<Self, EvalError> {
        check(preds.len(), gts.len())?;
        check(preds.len(), target_los.len())?;
        let te = trans_errors(preds, gts);
        let rd: Vec<f64> = rot_errors(preds, gts).into_iter().map(geodesic_to_degrees).collect();
        let e_rot = e_rot(preds, gts)?;
        Ok(EvalSummary {
            count: preds.len(),
            e_trans: mean(te.iter().copied()),
            median_trans: median(&te).expect("non-empty"),
            e_rot,
            e_rot_deg: geodesic_to_degrees(e_rot),
            median_rot_deg: median(&rd).expect("non-empty"),
            e_ik: e_ik(cfg, preds, target_los)?,
            thresholds: thresholds.to_vec(),
            trans_acc: accuracy_buckets(&te, thresholds),
            rot_acc: accuracy_buckets(&rd, thresholds),
        })
    }

    /// `key = value` lines, keys prefixed by `prefix`.
    pub fn to_kv(&self, prefix: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{prefix}count = {}", self.count);
        let _ = writeln!(s, "{prefix}e_trans_mm = {:?}", self.e_trans);
        let _ = writeln!(s, "{prefix}median_trans_mm = {:?}", self.median_trans);
        let _ = writeln!(s, "{prefix}e_rot_frobenius = {:?}", self.e_rot);
        let _ = writeln!(s, "{prefix}e_rot_geodesic_deg = {:?}", self.e_rot_deg);
        let _ = writeln!(s, "{prefix}median_rot_geodesic_deg = {:?}", self.median_rot_deg);
        let _ = writeln!(s, "{prefix}e_ik_mm = {:?}", self.e_ik);
        for (i, t) in self.thresholds.iter().enumerate() {
            let _ = writeln!(s, "{prefix}acc_trans_lt_{t}mm_pct = {:?}", self.trans_acc[i]);
            let _ = writeln!(s, "{prefix}acc_rot_lt_{t}deg_pct = {:?}", self.rot_acc[i]);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    /// `W`.
    pub count: usize,
    /// `T`, seconds.
    pub total_time: f64,
    /// `T / W`, seconds.
    pub average_time: f64,
    /// `N₁`: singular Jacobians.
    pub n_singular: usize,
    /// `N₂`: runs that did not reach the precision level.
    pub n_below_precision: usize,
    /// `(1 − (N₁ + N₂)/W)·100`.
    pub success_rate: f64,
}

impl BenchReport {
    pub fn new(count: usize, n_singular: usize, n_below_precision: usize, total_time: f64) -> Self {
        let w = count as f64;
        BenchReport {
            count,
            total_time,
            average_time: total_time / w,
            n_singular,
            n_below_precision,
            success_rate: (1.0 - (n_singular + n_below_precision) as f64 / w) * 100.0,
        }
    }

    pub fn to_kv(&self) -> String {
        format!(
            "count = {}\ntotal_time_s = {:?}\naverage_time_s = {:?}\nn_singular = {}\nn_below_precision = {}\nsuccess_rate_pct = {:?}\n",
            self.count, self.total_time, self.average_time, self.n_singular, self.n_below_precision, self.success_rate
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub index: usize,
    pub initial: Pose,
    pub solve: SolveReport,
    pub truth: Pose,
}

impl SampleOutcome {
    pub fn failed(&self) -> bool {
        self.solve.singular_flag || !self.solve.converged
    }
}

#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub report: BenchReport,
    /// Stage-I predictions against ground truth.
    pub network: EvalSummary,
    /// Refined poses against ground truth.
    pub refined: EvalSummary,
    pub samples: Vec<SampleOutcome>,
}

impl BenchOutcome {
    /// Tab-separated per-sample errors.
    pub fn samples_tsv(&self, cfg: &PlatformConfig) -> String {
        let mut s = String::from(
            "index\tnet_trans_mm\tnet_rot_deg\ttrans_mm\trot_deg\tik_mm\titerations\tconverged\tsingular\tleft_chart\n",
        );
        for o in &self.samples {
            let fin = o.solve.pose();
            let target = inverse_kinematics(cfg, &o.truth).los;
            let _ = writeln!(
                s,
                "{}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{}\t{}\t{}\t{}",
                o.index,
                (o.initial.t - o.truth.t).norm(),
                geodesic_to_degrees(geodesic_distance(&o.initial.r, &o.truth.r)),
                (fin.t - o.truth.t).norm(),
                geodesic_to_degrees(geodesic_distance(&fin.r, &o.truth.r)),
                (inverse_kinematics(cfg, &fin).los - target).norm(),
                o.solve.outer_iterations,
                o.solve.converged,
                o.solve.singular_flag,
                o.solve.left_chart,
            );
        }
        s
    }

    /// Details of every failed sample.
    pub fn failure_dump(&self) -> String {
        let mut s = String::new();
        for o in self.samples.iter().filter(|o| o.failed()) {
            let _ = writeln!(s, "sample {}", o.index);
            let _ = writeln!(s, "  truth_t = {:?}", o.truth.t.as_slice());
            let _ = writeln!(s, "  truth_r = {:?}", o.truth.r.matrix().as_slice());
            let _ = writeln!(s, "  initial_t = {:?}", o.initial.t.as_slice());
            let _ = writeln!(s, "  initial_r = {:?}", o.initial.r.matrix().as_slice());
            let _ = writeln!(
                s,
                "  singular = {} converged = {} left_chart = {} iterations = {} residual_mm = {:?}",
                o.solve.singular_flag, o.solve.converged, o.solve.left_chart, o.solve.outer_iterations, o.solve.residual_norm
            );
            let _ = writeln!(s, "  step_norms = {:?}", o.solve.step_norms);
        }
        s
    }
}

/// Network prediction followed by refinement for every record of `ds`.
/// The clock covers the prediction, the log map and the refinement batch.
pub fn run_benchmark(
    cfg: &PlatformConfig,
    ds: &Dataset,
    model: &Model,
    params: &SolveParams,
    thresholds: &[f64],
) -> Result<BenchOutcome, EvalError> {
    let truth: Vec<Pose> = ds.records.iter().map(|r| r.pose()).collect();
    let los: Vec<Vector6<f64>> = ds.records.iter().map(|r| r.los(&cfg.l0)).collect();
    let objs: Vec<FkObjective> = los.iter().map(|l| FkObjective::new(cfg, *l)).collect();

    let start = Instant::now();
    let lbars: Vec<Vector6<f64>> = ds.records.iter().map(|r| r.lbar).collect();
    let initial = model.predict_lbar(cfg, &lbars);
    let xi0: Vec<Twist> = initial.iter().map(|p| se3_log(p).unwrap_or_else(|_| Twist::zero())).collect();
    let solves = refine_batch(&objs, &xi0, params);
    let elapsed = start.elapsed().as_secs_f64();

    let finals: Vec<Pose> = solves.iter().map(|s| s.pose()).collect();
    let network = EvalSummary::compute(cfg, &initial, &truth, &los, thresholds)?;
    let refined = EvalSummary::compute(cfg, &finals, &truth, &los, thresholds)?;
    let n1 = solves.iter().filter(|s| s.singular_flag).count();
    let n2 = solves.iter().filter(|s| !s.singular_flag && !s.converged).count();
    let samples = solves
        .into_iter()
        .zip(initial)
        .zip(truth)
        .enumerate()
        .map(|(index, ((solve, initial), truth))| SampleOutcome { index, initial, solve, truth })
        .collect();
    Ok(BenchOutcome { report: BenchReport::new(ds.records.len(), n1, n2, elapsed), network, refined, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::SampleStream;
    use crate::liegroup::{euler_to_rotation, Rotation};
    use crate::platform::default_config;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn random_poses(n: usize, seed: u64) -> Vec<Pose> {
        let mut s = SampleStream::new(seed, 0);
        (0..n)
            .map(|_| {
                let r = euler_to_rotation(s.next_in(-1.0, 1.0), s.next_in(-1.0, 1.0), s.next_in(-1.0, 1.0));
                Pose::new(r, Vector3::new(s.next_in(-50.0, 50.0), s.next_in(-50.0, 50.0), s.next_in(-50.0, 50.0)))
            })
            .collect()
    }

    #[test]
    fn metric_examples() {
        let p = random_poses(5, 1);
        assert_eq!(e_trans(&p, &p).unwrap(), 0.0);
        assert_eq!(e_rot(&p, &p).unwrap(), 0.0);
        let a = [Pose::from_translation(Vector3::new(1.0, 0.0, 0.0))];
        let b = [Pose::identity()];
        assert_eq!(e_trans(&a, &b).unwrap(), 1.0);
        let rz = [Pose::new(Rotation::rot_z(std::f64::consts::FRAC_PI_2), Vector3::zeros())];
        let want = std::f64::consts::SQRT_2 * std::f64::consts::FRAC_PI_2;
        assert!((e_rot(&rz, &b).unwrap() - want).abs() < 1e-12);
        assert!((e_rot_degrees(&rz, &b).unwrap() - 90.0).abs() < 1e-9);
        assert_eq!(e_trans(&[], &[]), Err(EvalError::EmptySet));
        assert_eq!(e_rot(&a, &[]), Err(EvalError::LengthMismatch(1, 0)));
        assert_eq!(e_ik(&default_config(), &[], &[]), Err(EvalError::EmptySet));
    }

    #[test]
    fn metrics_match_naive_loops() {
        let cfg = default_config();
        let p = random_poses(200, 2);
        let g = random_poses(200, 3);
        let (mut st, mut sr, mut si) = (0.0, 0.0, 0.0);
        let los: Vec<_> = g.iter().map(|x| inverse_kinematics(&cfg, x).los).collect();
        for i in 0..200 {
            let d = p[i].t - g[i].t;
            st += (d.x * d.x + d.y * d.y + d.z * d.z).sqrt();
            // Angle from the trace of the relative rotation.
            let rel = p[i].r.matrix() * g[i].r.matrix().transpose();
            let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
            sr += std::f64::consts::SQRT_2 * c.acos();
            let mut sq = 0.0;
            for s in 0..6 {
                let top = p[i].r.matrix() * cfg.b[cfg.pairing[s]] + p[i].t;
                let l = ((top - cfg.a[s]).norm() - cfg.l0[s]) - los[i][s];
                sq += l * l;
            }
            si += sq.sqrt();
        }
        assert!((e_trans(&p, &g).unwrap() - st / 200.0).abs() <= 1e-12);
        assert!((e_rot(&p, &g).unwrap() - sr / 200.0).abs() <= 1e-12);
        assert!((e_ik(&cfg, &p, &los).unwrap() - si / 200.0).abs() <= 1e-12);
    }

    #[test]
    fn e_ik_of_exact_poses_is_zero() {
        let cfg = default_config();
        let g = random_poses(20, 4);
        let los: Vec<_> = g.iter().map(|x| inverse_kinematics(&cfg, x).los).collect();
        assert!(e_ik(&cfg, &g, &los).unwrap() <= 1e-9);
    }

    #[test]
    fn e_ik_equals_mean_solver_residual() {
        let cfg = default_config();
        let g = random_poses(20, 5);
        let p = random_poses(20, 6);
        let los: Vec<_> = g.iter().map(|x| inverse_kinematics(&cfg, x).los).collect();
        let want = p
            .iter()
            .zip(&los)
            .map(|(x, l)| crate::nrsolver::residual(&FkObjective::new(&cfg, *l), &se3_log(x).unwrap()).unwrap().norm())
            .sum::<f64>()
            / 20.0;
        assert!((e_ik(&cfg, &p, &los).unwrap() - want).abs() <= 1e-9);
    }

    #[test]
    fn bucket_examples() {
        assert_eq!(accuracy_buckets(&[0.0; 4], &DEFAULT_THRESHOLDS), vec![100.0; 5]);
        let b = accuracy_buckets(&[0.4, 0.9, 1.2], &[0.5, 1.0]);
        assert!((b[0] - 100.0 / 3.0).abs() < 1e-12);
        assert!((b[1] - 200.0 / 3.0).abs() < 1e-12);
        // Strict comparison.
        assert_eq!(accuracy_buckets(&[1.0], &[1.0]), vec![0.0]);
    }

    #[test]
    fn lower_median() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.0));
    }

    #[test]
    fn bench_report_formulas() {
        let r = BenchReport::new(1000, 20, 15, 2.5);
        assert_eq!(r.success_rate, (1.0 - 35.0 / 1000.0) * 100.0);
        assert!((r.success_rate - 96.5).abs() < 1e-12);
        assert_eq!(r.average_time, 2.5 / 1000.0);
    }

    proptest! {
        #[test]
        fn buckets_are_monotone(errors in prop::collection::vec(0.0f64..5.0, 1..50)) {
            let b = accuracy_buckets(&errors, &DEFAULT_THRESHOLDS);
            for w in b.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
            prop_assert!(b.iter().all(|&x| (0.0..=100.0).contains(&x)));
        }

        #[test]
        fn rotation_error_is_right_invariant(a in -1.0f64..1.0, b in -1.0f64..1.0, c in -1.0f64..1.0, d in -1.0f64..1.0) {
            let r1 = euler_to_rotation(a, b, c);
            let r2 = euler_to_rotation(c, d, a);
            let s = euler_to_rotation(d, a, b);
            let x = geodesic_distance(&r1, &r2);
            let y = geodesic_distance(&(r1 * s), &(r2 * s));
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
