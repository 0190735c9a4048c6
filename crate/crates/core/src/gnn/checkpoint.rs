//! Checkpoint container.
//!
//! All integers and floats little-endian.
//!
//! | field            | type                  | notes                              |
//! |------------------|-----------------------|------------------------------------|
//! | magic            | 4 bytes `GSNN`        |                                    |
//! | version          | u32                   | 1                                  |
//! | arch             | u8                    | 0 DisGNet, 1 plain MLP             |
//! | activation       | u8                    | 0 GELU, 1 identity                 |
//! | reserved         | 2 bytes               | zero                               |
//! | DisGNet dims     | 4 × u32, 2 × f64      | H, H_d, H_e, rounds, rbf_max, translation_scale |
//! | MLP dims         | 2 × u32, 12 × f64     | hidden, layers, input mean, input std |
//! | tensor count     | u32                   |                                    |
//! | shapes           | count × (u32, u32)    | rows, cols                         |
//! | values           | f64 each              | tensors in parameter order, row-major |
//!
//! Only one of the two dims blocks is present, selected by `arch`.

use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

use super::mlp::{self, MlpParams};
use super::model::{Dims, NetParams};
use super::tape::Activation;
use super::Model;

pub const MAGIC: &[u8; 4] = b"GSNN";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("bad checkpoint header: {0}")]
    BadHeader(String),
    #[error("tensor {index}: expected shape {expected:?}, file has {found:?}")]
    ShapeMismatch { index: usize, expected: (usize, usize), found: (usize, usize) },
    #[error("{0} unexpected bytes after the last tensor")]
    TrailingBytes(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    let u32le = |b: &mut Vec<u8>, x: usize| b.extend_from_slice(&(x as u32).to_le_bytes());
    let f64le = |b: &mut Vec<u8>, x: f64| b.extend_from_slice(&x.to_le_bytes());
    match model {
        Model::DisGNet(p) => {
            let d = &p.dims;
            let act = match d.activation {
                Activation::Gelu => 0,
                Activation::Identity => 1,
            };
            b.extend_from_slice(&[0, act, 0, 0]);
            for x in [d.h, d.h_d, d.h_e, d.rounds] {
                u32le(&mut b, x);
            }
            f64le(&mut b, d.rbf_max);
            f64le(&mut b, d.translation_scale);
        }
        Model::PlainMlp(p) => {
            b.extend_from_slice(&[1, 0, 0, 0]);
            u32le(&mut b, p.hidden);
            u32le(&mut b, p.layers);
            for x in p.in_mean.iter().chain(&p.in_std) {
                f64le(&mut b, *x);
            }
        }
    }
    let tensors = model.tensors();
    u32le(&mut b, tensors.len());
    for t in tensors {
        u32le(&mut b, t.nrows());
        u32le(&mut b, t.ncols());
    }
    for t in tensors {
        for r in 0..t.nrows() {
            for c in 0..t.ncols() {
                f64le(&mut b, t[(r, c)]);
            }
        }
    }
    b
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        let s = self.b.get(self.pos..self.pos + N).ok_or(CheckpointError::Truncated(self.b.len()))?;
        self.pos += N;
        Ok(s.try_into().expect("slice of length N"))
    }
    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take()?) as usize)
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take()?))
    }
    fn f64s<const N: usize>(&mut self) -> Result<[f64; N], CheckpointError> {
        let mut out = [0.0; N];
        for x in out.iter_mut() {
            *x = self.f64()?;
        }
        Ok(out)
    }
}

pub fn from_bytes(b: &[u8]) -> Result<Model, CheckpointError> {
    let mut r = Reader { b, pos: 0 };
    if &r.take::<4>()? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(r.take()?);
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch(version));
    }
    let [arch, act, _, _] = r.take::<4>()?;
    enum Head {
        Net(Dims),
        Mlp(usize, usize, [[f64; 6]; 2]),
    }
    let head = match arch {
        0 => {
            let activation = match act {
                0 => Activation::Gelu,
                1 => Activation::Identity,
                x => return Err(CheckpointError::BadHeader(format!("activation code {x}"))),
            };
            let (h, h_d, h_e, rounds) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
            let dims = Dims { h, h_d, h_e, rounds, activation, rbf_max: r.f64()?, translation_scale: r.f64()? };
            Head::Net(dims)
        }
        1 => {
            let (hidden, layers) = (r.u32()?, r.u32()?);
            Head::Mlp(hidden, layers, [r.f64s()?, r.f64s()?])
        }
        x => return Err(CheckpointError::BadHeader(format!("architecture code {x}"))),
    };
    let expected = match &head {
        Head::Net(d) => d.shapes(),
        Head::Mlp(hidden, layers, _) => mlp::shapes(*hidden, *layers),
    };
    let count = r.u32()?;
    if count != expected.len() {
        return Err(CheckpointError::BadHeader(format!("{count} tensors, architecture needs {}", expected.len())));
    }
    for (index, &exp) in expected.iter().enumerate() {
        let found = (r.u32()?, r.u32()?);
        if found != exp {
            return Err(CheckpointError::ShapeMismatch { index, expected: exp, found });
        }
    }
    let mut tensors = Vec::with_capacity(count);
    for &(rows, cols) in &expected {
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = r.f64()?;
            }
        }
        tensors.push(m);
    }
    if r.pos != b.len() {
        return Err(CheckpointError::TrailingBytes(b.len() - r.pos));
    }
    Ok(match head {
        Head::Net(dims) => Model::DisGNet(NetParams { dims, tensors }),
        Head::Mlp(hidden, layers, [in_mean, in_std]) => Model::PlainMlp(MlpParams { hidden, layers, tensors, in_mean, in_std }),
    })
}

pub fn save(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model, CheckpointError> {
    from_bytes(&std::fs::read(path)?)
}
