//! Stage-I initializer: DisGNet and the plain-MLP baseline, with their
//! gradient engine, training loop and checkpoint format.

pub mod checkpoint;
pub mod mlp;
pub mod model;
pub mod tape;
pub mod train;

use nalgebra::Vector6;

use crate::datagen::Dataset;
use crate::liegroup::Pose;
use crate::platform::{build_distance_graph, DistanceGraph, PlatformConfig};

pub use mlp::MlpParams;
pub use model::{Dims, NetParams, Prediction, TupleFeatures};
pub use train::{train, Schedule, TrainConfig, TrainError, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    DisGNet,
    PlainMlp,
}

impl std::str::FromStr for Arch {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "disgnet" => Ok(Arch::DisGNet),
            "plain-mlp" => Ok(Arch::PlainMlp),
            other => Err(format!("unknown architecture `{other}` (expected disgnet or plain-mlp)")),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::DisGNet => "disgnet",
            Arch::PlainMlp => "plain-mlp",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    DisGNet(NetParams),
    PlainMlp(MlpParams),
}

impl Model {
    /// Untrained network. The plain MLP takes its standardization from
    /// `train` and has three hidden layers of width `3·dims.h`, which puts
    /// its parameter count close to DisGNet's.
    pub fn init(arch: Arch, dims: Dims, seed: u64, train: &Dataset) -> Self {
        match arch {
            Arch::DisGNet => Model::DisGNet(NetParams::init(dims, seed)),
            Arch::PlainMlp => {
                let los: Vec<_> = train.records.iter().map(|r| r.los(&train.meta.l0)).collect();
                Model::PlainMlp(MlpParams::init(3 * dims.h, 3, seed, &los))
            }
        }
    }

    pub fn arch(&self) -> Arch {
        match self {
            Model::DisGNet(_) => Arch::DisGNet,
            Model::PlainMlp(_) => Arch::PlainMlp,
        }
    }

    pub fn tensors(&self) -> &[nalgebra::DMatrix<f64>] {
        match self {
            Model::DisGNet(p) => &p.tensors,
            Model::PlainMlp(p) => &p.tensors,
        }
    }

    pub fn tensors_mut(&mut self) -> &mut [nalgebra::DMatrix<f64>] {
        match self {
            Model::DisGNet(p) => &mut p.tensors,
            Model::PlainMlp(p) => &mut p.tensors,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    fn predict_inputs(&self, graphs: &[DistanceGraph], los: &[Vector6<f64>]) -> Vec<Pose> {
        const CHUNK: usize = 256;
        match self {
            Model::DisGNet(p) => graphs
                .chunks(CHUNK)
                .flat_map(|c| {
                    let refs: Vec<&DistanceGraph> = c.iter().collect();
                    model::predict_batch(&refs, p).into_iter().map(|pr| pr.pose)
                })
                .collect(),
            Model::PlainMlp(p) => los.chunks(CHUNK).flat_map(|c| p.predict(c)).collect(),
        }
    }

    /// Poses for every record of `ds`.
    pub fn predict_dataset(&self, ds: &Dataset) -> Vec<Pose> {
        let graphs: Vec<_> = match self {
            Model::DisGNet(_) => ds.records.iter().map(|r| r.distance_graph()).collect(),
            Model::PlainMlp(_) => Vec::new(),
        };
        let los: Vec<_> = ds.records.iter().map(|r| r.los(&ds.meta.l0)).collect();
        self.predict_inputs(&graphs, &los)
    }

    /// Poses for leg lengths `l̄` on platform `cfg`.
    pub fn predict_lbar(&self, cfg: &PlatformConfig, lbars: &[Vector6<f64>]) -> Vec<Pose> {
        let graphs: Vec<_> = match self {
            Model::DisGNet(_) => lbars.iter().map(|l| build_distance_graph(cfg, l)).collect(),
            Model::PlainMlp(_) => Vec::new(),
        };
        let los: Vec<_> = lbars.iter().map(|l| l - cfg.l0).collect();
        self.predict_inputs(&graphs, &los)
    }
}
