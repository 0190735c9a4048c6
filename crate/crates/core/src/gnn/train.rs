//! Adam over shuffled mini-batches.
//!
//! Each mini-batch is cut into fixed chunks whose gradients are computed in
//! parallel and summed in chunk order, so results do not depend on the
//! thread count.

use nalgebra::{DMatrix, Vector6};
use rayon::prelude::*;
use thiserror::Error;

use super::mlp::{pose_to_target, OUTPUTS};
use super::model::{self, Target, DEFAULT_BETA};
use super::Model;
use crate::datagen::{shuffle, Dataset, SampleStream};
use crate::evalbench::{e_rot, e_trans};
use crate::platform::DistanceGraph;

/// Samples per gradient chunk.
const CHUNK: usize = 16;

/// Learning-rate schedule over all optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate down to zero at the last step.
    Cosine,
}

impl std::str::FromStr for Schedule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            _ => Err(format!("unknown schedule {s:?} (constant | cosine)")),
        }
    }
}

impl std::fmt::Display for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub schedule: Schedule,
    /// Rotation loss weight (DisGNet only).
    pub beta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            schedule: Schedule::Constant,
            beta: DEFAULT_BETA,
            batch_size: 64,
            epochs: 200,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-sample training loss over the epoch.
    pub mean_loss: f64,
    pub val_e_trans: Option<f64>,
    /// Frobenius units.
    pub val_e_rot: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tmean_loss\tval_e_trans_mm\tval_e_rot\n");
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:?}"));
        for e in &self.epochs {
            s.push_str(&format!("{}\t{:?}\t{}\t{}\n", e.epoch, e.mean_loss, opt(e.val_e_trans), opt(e.val_e_rot)));
        }
        s
    }
}

struct Adam {
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    step: i32,
}

impl Adam {
    fn new(like: &[DMatrix<f64>]) -> Self {
        let z = || like.iter().map(|t| DMatrix::zeros(t.nrows(), t.ncols())).collect();
        Adam { m: z(), v: z(), step: 0 }
    }

    fn update(&mut self, params: &mut [DMatrix<f64>], grads: &[DMatrix<f64>], cfg: &TrainConfig, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - cfg.adam_beta1.powi(self.step);
        let c2 = 1.0 - cfg.adam_beta2.powi(self.step);
        for k in 0..params.len() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for i in 0..g.len() {
                m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * g[i];
                v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * g[i] * g[i];
                params[k][i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Per-record training inputs, prepared once.
enum Inputs {
    Graph(Vec<DistanceGraph>, Vec<Target>),
    Los(Vec<Vector6<f64>>, Vec<[f64; OUTPUTS]>),
}

impl Inputs {
    fn new(model: &Model, ds: &Dataset) -> Self {
        match model {
            Model::DisGNet(_) => Inputs::Graph(
                ds.records.iter().map(|r| r.distance_graph()).collect(),
                ds.records.iter().map(|r| Target::from(&r.pose())).collect(),
            ),
            Model::PlainMlp(_) => Inputs::Los(
                ds.records.iter().map(|r| r.los(&ds.meta.l0)).collect(),
                ds.records.iter().map(|r| pose_to_target(&r.pose())).collect(),
            ),
        }
    }

    /// Summed (not averaged) loss and gradient over `idx`.
    fn chunk(&self, model: &Model, idx: &[usize], beta: f64) -> (f64, Vec<DMatrix<f64>>) {
        let (mean, mut grads) = match (self, model) {
            (Inputs::Graph(g, t), Model::DisGNet(p)) => {
                let graphs: Vec<&DistanceGraph> = idx.iter().map(|&i| &g[i]).collect();
                let targets: Vec<Target> = idx.iter().map(|&i| t[i]).collect();
                model::loss_and_grad(&graphs, &targets, p, beta)
            }
            (Inputs::Los(l, t), Model::PlainMlp(p)) => {
                let los: Vec<_> = idx.iter().map(|&i| l[i]).collect();
                let targets: Vec<_> = idx.iter().map(|&i| t[i]).collect();
                p.loss_and_grad(&los, &targets)
            }
            _ => unreachable!("inputs prepared for this model"),
        };
        let n = idx.len() as f64;
        grads.iter_mut().for_each(|g| *g *= n);
        (mean * n, grads)
    }
}

/// Trains `model` in place of a copy and returns it with the epoch log.
pub fn train(
    model: Model,
    train_set: &Dataset,
    valid: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Model, TrainLog), TrainError> {
    if train_set.records.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let positive = |x: f64| x > 0.0;
    if !positive(cfg.learning_rate) || !positive(cfg.beta) || cfg.batch_size == 0 {
        return Err(TrainError::InvalidConfig(format!(
            "learning_rate {} beta {} batch_size {}",
            cfg.learning_rate, cfg.beta, cfg.batch_size
        )));
    }
    let mut model = model;
    let inputs = Inputs::new(&model, train_set);
    let mut adam = Adam::new(model.tensors());
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train_set.records.len()).collect();
    let batches = order.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches).max(1) as f64;
    let mut step = 0usize;
    let val_truth: Option<Vec<_>> = valid.map(|v| v.records.iter().map(|r| r.pose()).collect());

    for epoch in 1..=cfg.epochs {
        shuffle(&mut order, &mut SampleStream::new(cfg.seed, epoch as u64));
        let mut total = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let parts: Vec<(f64, Vec<DMatrix<f64>>)> =
                idx.par_chunks(CHUNK).map(|c| inputs.chunk(&model, c, cfg.beta)).collect();
            let mut parts = parts.into_iter();
            let (mut loss, mut grads) = parts.next().expect("non-empty batch");
            for (l, g) in parts {
                loss += l;
                grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(TrainError::NonFiniteLoss { epoch, batch });
            }
            total += loss;
            let inv = 1.0 / idx.len() as f64;
            grads.iter_mut().for_each(|g| *g *= inv);
            let lr = match cfg.schedule {
                Schedule::Constant => cfg.learning_rate,
                Schedule::Cosine => {
                    0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos())
                }
            };
            step += 1;
            adam.update(model.tensors_mut(), &grads, cfg, lr);
        }
        let (val_e_trans, val_e_rot) = match (valid, &val_truth) {
            (Some(v), Some(truth)) if !v.records.is_empty() => {
                let pred = model.predict_dataset(v);
                (e_trans(&pred, truth).ok(), e_rot(&pred, truth).ok())
            }
            _ => (None, None),
        };
        log.epochs.push(EpochLog { epoch, mean_loss: total / order.len() as f64, val_e_trans, val_e_rot });
    }
    Ok((model, log))
}
