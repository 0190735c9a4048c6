//! Plain-MLP baseline: `l_os ∈ ℝ⁶ → (x, y, z, α, β, γ)` with GELU hidden
//! layers and an MSE loss, no distance matrix.
//!
//! Inputs are standardized with statistics of the training set (stored
//! alongside the weights). Outputs and the MSE are in raw units, mm and rad.

use nalgebra::{Vector3, Vector6};

use super::tape::{Activation, Mat, Tape, Var};
use crate::datagen::{SampleStream};
use crate::liegroup::{euler_to_rotation, rotation_to_euler, Pose};

pub const INPUTS: usize = 6;
pub const OUTPUTS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub hidden: usize,
    pub layers: usize,
    /// Weight, bias pairs: `6 → hidden`, `layers − 1` of `hidden → hidden`,
    /// `hidden → 6`.
    pub tensors: Vec<Mat>,
    pub in_mean: [f64; INPUTS],
    pub in_std: [f64; INPUTS],
}

pub fn shapes(hidden: usize, layers: usize) -> Vec<(usize, usize)> {
    let mut s = Vec::new();
    let mut fan_in = INPUTS;
    for _ in 0..layers {
        s.extend([(fan_in, hidden), (1, hidden)]);
        fan_in = hidden;
    }
    s.extend([(hidden, OUTPUTS), (1, OUTPUTS)]);
    s
}

/// `(x, y, z, α, β, γ)` of a pose.
pub fn pose_to_target(p: &Pose) -> [f64; OUTPUTS] {
    let (a, b, g) = rotation_to_euler(&p.r);
    [p.t.x, p.t.y, p.t.z, a, b, g]
}

fn mean_std<const K: usize>(rows: &[[f64; K]]) -> ([f64; K], [f64; K]) {
    let n = rows.len().max(1) as f64;
    let mut mean = [0.0; K];
    let mut std = [0.0; K];
    for k in 0..K {
        mean[k] = rows.iter().map(|r| r[k]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
        std[k] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    (mean, std)
}

impl MlpParams {
    /// Fan-in uniform weights, zero biases, input standardization from the
    /// training inputs.
    pub fn init(hidden: usize, layers: usize, seed: u64, los: &[Vector6<f64>]) -> Self {
        let mut rng = SampleStream::new(seed, 0);
        let tensors = shapes(hidden, layers)
            .into_iter()
            .map(|(r, c)| {
                if r == 1 {
                    Mat::zeros(r, c)
                } else {
                    let bound = 1.0 / (r as f64).sqrt();
                    Mat::from_fn(r, c, |_, _| rng.next_in(-bound, bound))
                }
            })
            .collect();
        let ins: Vec<[f64; INPUTS]> = los.iter().map(|l| std::array::from_fn(|k| l[k])).collect();
        let (in_mean, in_std) = mean_std(&ins);
        MlpParams { hidden, layers, tensors, in_mean, in_std }
    }

    pub fn zeros_like(&self) -> Vec<Mat> {
        self.tensors.iter().map(|t| Mat::zeros(t.nrows(), t.ncols())).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    fn forward(&self, tape: &mut Tape, los: &[Vector6<f64>]) -> Var {
        let x = Mat::from_fn(los.len(), INPUTS, |b, k| (los[b][k] - self.in_mean[k]) / self.in_std[k]);
        let mut y = tape.leaf(x);
        let vars: Vec<Var> = self.tensors.iter().enumerate().map(|(i, t)| tape.param(i, t.clone())).collect();
        for l in 0..=self.layers {
            y = tape.matmul(y, vars[2 * l]);
            y = tape.add_row(y, vars[2 * l + 1]);
            if l < self.layers {
                y = tape.act(y, Activation::Gelu);
            }
        }
        y
    }

    pub fn predict(&self, los: &[Vector6<f64>]) -> Vec<Pose> {
        if los.is_empty() {
            return Vec::new();
        }
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, los);
        let out = tape.value(out);
        (0..los.len())
            .map(|b| {
                let v: [f64; OUTPUTS] = std::array::from_fn(|k| out[(b, k)]);
                Pose::new(euler_to_rotation(v[3], v[4], v[5]), Vector3::new(v[0], v[1], v[2]))
            })
            .collect()
    }

    /// Mean over samples and outputs of the squared error.
    pub fn loss_and_grad(&self, los: &[Vector6<f64>], targets: &[[f64; OUTPUTS]]) -> (f64, Vec<Mat>) {
        assert_eq!(los.len(), targets.len());
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, los);
        let neg = Mat::from_fn(los.len(), OUTPUTS, |b, k| -targets[b][k]);
        let neg = tape.leaf(neg);
        let d = tape.add(out, neg);
        let s = tape.sum_squares(d);
        let l = tape.scale(s, 1.0 / (OUTPUTS * los.len()) as f64);
        let mut grads = self.zeros_like();
        tape.backward(l, &mut grads);
        (tape.value(l)[(0, 0)], grads)
    }
}
