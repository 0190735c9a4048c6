//! Moore-Penrose inverse of a 6×6 matrix by the cubically convergent
//! hyperpower iteration
//!
//! ```text
//! Z_{f+1} = ¼·Z_f·(13I − JZ_f·(15I − JZ_f·(7I − JZ_f)))
//! ```
//!
//! started from `Z₀ = Jᵀ / (‖J‖₁·‖J‖∞)`. Only matrix-matrix products are
//! used, four per step. The residual `H_f = I − J·Z_f` obeys
//! `H_{f+1} = ¼(3H_f³ + H_f⁴)`.
//!
//! The iteration runs a fixed `f_max` steps and checks the residual
//! afterwards, so it needs no per-step acceptance test (one that compares
//! `J·Z_{f+1}` against `J·Z₀` rather than `I` would be ambiguous anyway).

use nalgebra::Matrix6;
use thiserror::Error;

pub type Mat6 = Matrix6<f64>;

/// Default number of hyperpower steps.
pub const DEFAULT_F_MAX: usize = 20;

/// Residuals above this count toward a stall.
const STALL_FLOOR: f64 = 1e-6;
/// A step that shrinks the residual by less than this relative amount stalls.
const STALL_RATIO: f64 = 1e-10;
/// Consecutive stalled steps that abort the iteration.
const STALL_LIMIT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum PinvError {
    #[error("cannot invert the zero matrix")]
    ZeroMatrix,
    #[error("f_max must be at least 1")]
    NoIterations,
    #[error("hyperpower iteration diverged (residual {residual:e} after {iterations} steps)")]
    Diverged { residual: f64, iterations: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PinvState {
    /// Final iterate `Z_f`.
    pub z: Mat6,
    /// `‖I − J·Z_f‖_F`.
    pub residual: f64,
    /// Steps taken.
    pub iterations: usize,
    /// Residual before each step and after the last, `r₀ … r_f`.
    pub history: Vec<f64>,
}

/// Maximum absolute column sum.
pub fn norm_1(j: &Mat6) -> f64 {
    (0..6).map(|c| j.column(c).iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Maximum absolute row sum.
pub fn norm_inf(j: &Mat6) -> f64 {
    (0..6).map(|r| j.row(r).iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

pub fn residual_norm(j: &Mat6, z: &Mat6) -> f64 {
    (Mat6::identity() - j * z).norm()
}

/// `Z₀ = Jᵀ / (‖J‖₁·‖J‖∞)`.
pub fn init_z0(j: &Mat6) -> Result<Mat6, PinvError> {
    let scale = norm_1(j) * norm_inf(j);
    if scale == 0.0 {
        return Err(PinvError::ZeroMatrix);
    }
    Ok(j.transpose() / scale)
}

/// One hyperpower step in nested Horner form.
pub fn hyperpower_step(j: &Mat6, z: &Mat6) -> Mat6 {
    let i = Mat6::identity();
    let jz = j * z;
    let inner = jz * (i * 7.0 - jz);
    let middle = jz * (i * 15.0 - inner);
    (z * (i * 13.0 - middle)) * 0.25
}

/// Runs `f_max` steps from an arbitrary starting iterate.
pub fn iterate(j: &Mat6, z0: Mat6, f_max: usize) -> Result<PinvState, PinvError> {
    if f_max == 0 {
        return Err(PinvError::NoIterations);
    }
    let mut z = z0;
    let mut residual = residual_norm(j, &z);
    let mut history = Vec::with_capacity(f_max + 1);
    history.push(residual);
    let mut stalled = 0;
    for f in 1..=f_max {
        z = hyperpower_step(j, &z);
        let next = residual_norm(j, &z);
        history.push(next);
        if !next.is_finite() {
            return Err(PinvError::Diverged { residual: next, iterations: f });
        }
        if residual > STALL_FLOOR && next > residual * (1.0 - STALL_RATIO) {
            stalled += 1;
            if stalled >= STALL_LIMIT {
                return Err(PinvError::Diverged { residual: next, iterations: f });
            }
        } else {
            stalled = 0;
        }
        residual = next;
    }
    if residual >= 1.0 {
        return Err(PinvError::Diverged { residual, iterations: f_max });
    }
    Ok(PinvState { z, residual, iterations: f_max, history })
}

/// Approximates `J⁺` with `f_max` hyperpower steps from [`init_z0`].
pub fn pseudoinverse(j: &Mat6, f_max: usize) -> Result<PinvState, PinvError> {
    iterate(j, init_z0(j)?, f_max)
}
