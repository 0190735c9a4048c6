//! Randomized dataset generation through inverse kinematics, plus the binary
//! and CSV dataset formats.
//!
//! # Random stream
//!
//! Sample `i` of a dataset with seed `s` draws from its own ChaCha20 stream:
//! key = `s` as 8 little-endian bytes followed by 24 zero bytes, stream id =
//! `i`, word position 0. Each draw takes the next 64-bit output `u` (two
//! consecutive 32-bit words, low word first) and maps it to
//! `(u >> 11) · 2⁻⁵³ ∈ [0, 1)`; a bounded value is `lo + (hi − lo)·v`.
//! Draw order per sample is `x, y, z, α, β, γ`. Because every sample owns its
//! stream, output is independent of how samples are spread over threads.
//!
//! # Binary format (version 1, all little-endian)
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0   | 4  | magic `GSFK` |
//! | 4   | 4  | version `u32` = 1 |
//! | 8   | 8  | record count `u64` |
//! | 16  | 32 | `l_min, l_max, θ_min, θ_max` as `f64` (mm, mm, rad, rad) |
//! | 48  | 8  | seed `u64` |
//! | 56  | 8  | split ratio `f64` |
//! | 64  | 1  | rotation mode `u8` (0 quaternion, 1 Euler) |
//! | 65  | 7  | reserved, zero |
//! | 72  | 32 | SHA-256 of the platform config |
//! | 104 | 48 | initial leg lengths `l_s` as 6 × `f64` |
//! | 152 | …  | records, each 157 (quaternion) or 156 (Euler) `f64` |
//!
//! A record is `x(3) | q(4: w,x,y,z) or (α,β,γ) | l̄(6) | Vec(E)(144, row-major)`.
//! The CSV export has one header row and the same column order.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{Vector3, Vector4, Vector6};
use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;
use thiserror::Error;

use crate::liegroup::{euler_to_rotation, quaternion_to_rotation, rotation_to_quaternion, Pose, Rotation};
use crate::platform::{
    build_distance_graph, inverse_kinematics, unvectorize_distance, vectorize_distance, DistanceGraph,
    PlatformConfig, NUM_NODES,
};

pub const MAGIC: &[u8; 4] = b"GSFK";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 152;
pub const EDGE_VALUES: usize = NUM_NODES * NUM_NODES;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("bad magic at byte offset {offset}")]
    BadMagic { offset: usize },
    #[error("unsupported version {found} at byte offset {offset} (expected {VERSION})")]
    VersionMismatch { found: u32, offset: usize },
    #[error("file truncated at byte offset {offset}{}", .record.map(|r| format!(" (record {r})")).unwrap_or_default())]
    TruncatedFile { offset: usize, record: Option<usize> },
    #[error("{extra} trailing bytes after the last record at byte offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("unknown rotation mode {0} at byte offset 64")]
    BadRotationMode(u8),
    #[error("invalid bounds: {0}")]
    BadBounds(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("csv row {row}: {msg}")]
    CsvFormat { row: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationMode {
    Quaternion,
    Euler,
}

impl RotationMode {
    pub fn width(self) -> usize {
        match self {
            RotationMode::Quaternion => 4,
            RotationMode::Euler => 3,
        }
    }

    pub fn record_len(self) -> usize {
        3 + self.width() + 6 + EDGE_VALUES
    }

    fn code(self) -> u8 {
        match self {
            RotationMode::Quaternion => 0,
            RotationMode::Euler => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RotationCoords {
    /// Unit quaternion `(w, x, y, z)`, `w ≥ 0`.
    Quaternion(Vector4<f64>),
    /// `(α, β, γ)` with `R = R_x(α)R_y(β)R_z(γ)`.
    Euler([f64; 3]),
}

impl RotationCoords {
    pub fn rotation(&self) -> Rotation {
        match self {
            RotationCoords::Quaternion(q) => quaternion_to_rotation(q),
            RotationCoords::Euler([a, b, g]) => euler_to_rotation(*a, *b, *g),
        }
    }

    fn values(&self) -> Vec<f64> {
        match self {
            RotationCoords::Quaternion(q) => q.iter().copied().collect(),
            RotationCoords::Euler(e) => e.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// Translation, mm.
    pub x: Vector3<f64>,
    pub rotation: RotationCoords,
    /// Leg lengths `l̄_s`, mm.
    pub lbar: Vector6<f64>,
    /// Row-major distance matrix, mm.
    pub e: Box<[f64; EDGE_VALUES]>,
}

impl SampleRecord {
    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation.rotation(), self.x)
    }

    /// `l_os = l̄_s − l_s`.
    pub fn los(&self, l0: &Vector6<f64>) -> Vector6<f64> {
        self.lbar - l0
    }

    pub fn distance_graph(&self) -> DistanceGraph {
        let distances = unvectorize_distance(&self.e[..]);
        DistanceGraph {
            adjacency: distances.map(|d| u8::from(d != 0.0)),
            distances,
            node_types: std::array::from_fn(|i| i),
        }
    }

    fn to_values(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 + 4 + 6 + EDGE_VALUES);
        v.extend(self.x.iter());
        v.extend(self.rotation.values());
        v.extend(self.lbar.iter());
        v.extend(self.e.iter());
        v
    }

    fn from_values(v: &[f64], mode: RotationMode) -> SampleRecord {
        let w = mode.width();
        let rotation = match mode {
            RotationMode::Quaternion => RotationCoords::Quaternion(Vector4::new(v[3], v[4], v[5], v[6])),
            RotationMode::Euler => RotationCoords::Euler([v[3], v[4], v[5]]),
        };
        let mut e = Box::new([0.0; EDGE_VALUES]);
        e.copy_from_slice(&v[3 + w + 6..]);
        SampleRecord {
            x: Vector3::new(v[0], v[1], v[2]),
            rotation,
            lbar: Vector6::from_row_slice(&v[3 + w..3 + w + 6]),
            e,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub count: usize,
    pub l_min: f64,
    pub l_max: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    pub config_hash: [u8; 32],
    pub seed: u64,
    pub rotation_mode: RotationMode,
    pub split_ratio: f64,
    /// Initial leg lengths of the generating platform.
    pub l0: Vector6<f64>,
}

impl DatasetMeta {
    /// ±50 mm, ±30°, quaternion records, 8:2 split.
    pub fn standard(cfg: &PlatformConfig, count: usize, seed: u64) -> Self {
        DatasetMeta {
            count,
            l_min: -50.0,
            l_max: 50.0,
            theta_min: (-30f64).to_radians(),
            theta_max: 30f64.to_radians(),
            config_hash: cfg.hash(),
            seed,
            rotation_mode: RotationMode::Quaternion,
            split_ratio: 0.8,
            l0: cfg.l0,
        }
    }

    pub fn check_bounds(&self) -> Result<(), DatasetError> {
        let ok = [self.l_min, self.l_max, self.theta_min, self.theta_max].iter().all(|v| v.is_finite())
            && self.l_min <= self.l_max
            && self.theta_min <= self.theta_max;
        if ok {
            Ok(())
        } else {
            Err(DatasetError::BadBounds(format!(
                "l in [{}, {}], theta in [{}, {}]",
                self.l_min, self.l_max, self.theta_min, self.theta_max
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub records: Vec<SampleRecord>,
}

/// Per-sample uniform stream.
pub struct SampleStream(ChaCha20Rng);

impl SampleStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut rng = ChaCha20Rng::from_seed(key);
        rng.set_stream(stream);
        SampleStream(rng)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_unit()
    }

    /// Uniform integer in `0..n` (`n ≥ 1`).
    pub fn next_index(&mut self, n: usize) -> usize {
        ((self.next_unit() * n as f64) as usize).min(n - 1)
    }
}

/// Fisher-Yates shuffle driven by [`SampleStream`].
pub fn shuffle<T>(items: &mut [T], stream: &mut SampleStream) {
    for i in (1..items.len()).rev() {
        items.swap(i, stream.next_index(i + 1));
    }
}

fn sample(cfg: &PlatformConfig, meta: &DatasetMeta, index: usize) -> SampleRecord {
    let mut rng = SampleStream::new(meta.seed, index as u64);
    let x = Vector3::new(
        rng.next_in(meta.l_min, meta.l_max),
        rng.next_in(meta.l_min, meta.l_max),
        rng.next_in(meta.l_min, meta.l_max),
    );
    let euler = [
        rng.next_in(meta.theta_min, meta.theta_max),
        rng.next_in(meta.theta_min, meta.theta_max),
        rng.next_in(meta.theta_min, meta.theta_max),
    ];
    let r = euler_to_rotation(euler[0], euler[1], euler[2]);
    let lbar = inverse_kinematics(cfg, &Pose::new(r, x)).lbar;
    let rotation = match meta.rotation_mode {
        RotationMode::Quaternion => RotationCoords::Quaternion(rotation_to_quaternion(&r)),
        RotationMode::Euler => RotationCoords::Euler(euler),
    };
    let e = Box::new(vectorize_distance(&build_distance_graph(cfg, &lbar).distances));
    SampleRecord { x, rotation, lbar, e }
}

/// Draws `meta.count` poses, solves IK for each and records the distance
/// matrix. Output order is by sample index.
pub fn generate(cfg: &PlatformConfig, meta: &DatasetMeta) -> Result<Dataset, DatasetError> {
    meta.check_bounds()?;
    let mut meta = meta.clone();
    meta.config_hash = cfg.hash();
    meta.l0 = cfg.l0;
    let records = (0..meta.count).into_par_iter().map(|i| sample(cfg, &meta, i)).collect();
    Ok(Dataset { meta, records })
}

/// Seeded shuffle then partition into `round(ratio·W)` training records and
/// the rest.
pub fn split(dataset: &Dataset, ratio: f64, seed: u64) -> (Dataset, Dataset) {
    assert!(ratio > 0.0 && ratio < 1.0, "split ratio must lie in (0, 1)");
    let mut order: Vec<usize> = (0..dataset.records.len()).collect();
    shuffle(&mut order, &mut SampleStream::new(seed, u64::MAX));
    let n_train = (ratio * order.len() as f64).round() as usize;
    let part = |idx: &[usize]| {
        let mut meta = dataset.meta.clone();
        meta.count = idx.len();
        meta.split_ratio = ratio;
        Dataset { meta, records: idx.iter().map(|&i| dataset.records[i].clone()).collect() }
    };
    (part(&order[..n_train]), part(&order[n_train..]))
}

fn header_bytes(meta: &DatasetMeta, count: usize) -> Vec<u8> {
    let mut h = Vec::with_capacity(HEADER_BYTES);
    h.extend_from_slice(MAGIC);
    h.extend_from_slice(&VERSION.to_le_bytes());
    h.extend_from_slice(&(count as u64).to_le_bytes());
    for v in [meta.l_min, meta.l_max, meta.theta_min, meta.theta_max] {
        h.extend_from_slice(&v.to_le_bytes());
    }
    h.extend_from_slice(&meta.seed.to_le_bytes());
    h.extend_from_slice(&meta.split_ratio.to_le_bytes());
    h.push(meta.rotation_mode.code());
    h.extend_from_slice(&[0u8; 7]);
    h.extend_from_slice(&meta.config_hash);
    for v in meta.l0.iter() {
        h.extend_from_slice(&v.to_le_bytes());
    }
    debug_assert_eq!(h.len(), HEADER_BYTES);
    h
}

pub fn to_bytes(dataset: &Dataset) -> Vec<u8> {
    let mode = dataset.meta.rotation_mode;
    let mut out = header_bytes(&dataset.meta, dataset.records.len());
    out.reserve(dataset.records.len() * mode.record_len() * 8);
    for r in &dataset.records {
        for v in r.to_values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn f64_at(b: &[u8], off: usize) -> f64 {
    f64::from_le_bytes(b[off..off + 8].try_into().unwrap())
}

fn u64_at(b: &[u8], off: usize) -> u64 {
    u64::from_le_bytes(b[off..off + 8].try_into().unwrap())
}

pub fn from_bytes(b: &[u8]) -> Result<Dataset, DatasetError> {
    if b.len() < 4 {
        return Err(DatasetError::TruncatedFile { offset: b.len(), record: None });
    }
    if &b[..4] != MAGIC {
        return Err(DatasetError::BadMagic { offset: 0 });
    }
    if b.len() < 8 {
        return Err(DatasetError::TruncatedFile { offset: b.len(), record: None });
    }
    let version = u32::from_le_bytes(b[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(DatasetError::VersionMismatch { found: version, offset: 4 });
    }
    if b.len() < HEADER_BYTES {
        return Err(DatasetError::TruncatedFile { offset: b.len(), record: None });
    }
    let count = u64_at(b, 8) as usize;
    let rotation_mode = match b[64] {
        0 => RotationMode::Quaternion,
        1 => RotationMode::Euler,
        other => return Err(DatasetError::BadRotationMode(other)),
    };
    let meta = DatasetMeta {
        count,
        l_min: f64_at(b, 16),
        l_max: f64_at(b, 24),
        theta_min: f64_at(b, 32),
        theta_max: f64_at(b, 40),
        seed: u64_at(b, 48),
        split_ratio: f64_at(b, 56),
        rotation_mode,
        config_hash: b[72..104].try_into().unwrap(),
        l0: Vector6::from_fn(|s, _| f64_at(b, 104 + 8 * s)),
    };
    let rec_bytes = rotation_mode.record_len() * 8;
    let body = b.len() - HEADER_BYTES;
    let complete = body / rec_bytes;
    if complete < count {
        return Err(DatasetError::TruncatedFile { offset: HEADER_BYTES + complete * rec_bytes, record: Some(complete) });
    }
    let end = HEADER_BYTES + count * rec_bytes;
    if b.len() > end {
        return Err(DatasetError::TrailingBytes { offset: end, extra: b.len() - end });
    }
    let records = (0..count)
        .map(|i| {
            let start = HEADER_BYTES + i * rec_bytes;
            let values: Vec<f64> = (0..rotation_mode.record_len()).map(|k| f64_at(b, start + 8 * k)).collect();
            SampleRecord::from_values(&values, rotation_mode)
        })
        .collect();
    Ok(Dataset { meta, records })
}

pub fn save(dataset: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&to_bytes(dataset))?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset, DatasetError> {
    from_bytes(&fs::read(path)?)
}

pub fn csv_header(mode: RotationMode) -> Vec<String> {
    let mut h: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
    match mode {
        RotationMode::Quaternion => h.extend(["qw", "qx", "qy", "qz"].iter().map(|s| s.to_string())),
        RotationMode::Euler => h.extend(["alpha", "beta", "gamma"].iter().map(|s| s.to_string())),
    }
    h.extend((0..6).map(|s| format!("lbar{s}")));
    h.extend((0..EDGE_VALUES).map(|k| format!("e{k:03}")));
    h
}

/// Writes the records as CSV; floats use the shortest representation that
/// parses back to the same bits.
pub fn export_csv(dataset: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(csv_header(dataset.meta.rotation_mode))?;
    for r in &dataset.records {
        w.write_record(r.to_values().iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn import_csv(path: &Path, mode: RotationMode) -> Result<Vec<SampleRecord>, DatasetError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let expected = csv_header(mode);
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
    if header != expected {
        return Err(DatasetError::CsvFormat { row: 0, msg: "header does not match rotation mode".into() });
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let values = row
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| DatasetError::CsvFormat { row: i + 1, msg: e.to_string() })?;
        if values.len() != mode.record_len() {
            return Err(DatasetError::CsvFormat { row: i + 1, msg: format!("{} columns", values.len()) });
        }
        out.push(SampleRecord::from_values(&values, mode));
    }
    Ok(out)
}
