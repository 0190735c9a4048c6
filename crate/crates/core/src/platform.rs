//! 6-6 Gough-Stewart geometry, closed-form inverse kinematics, and the
//! 12-node distance graph fed to the network.
//!
//! Frames: base hinges `a_s` live in the base frame {A}, moving hinges `b_s`
//! in the moving frame {B}. The identity pose is the assembly pose, so the
//! default layout puts the base hinges at `z = −height` and the moving hinges
//! at `z = 0`.
//!
//! Graph node order: base hinges 0..6, moving hinges 6..12. Leg `s` joins
//! node `s` to node `6 + pairing[s]`.

use std::fs;
use std::path::Path;

use nalgebra::{SMatrix, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::liegroup::Pose;

pub const NUM_LEGS: usize = 6;
pub const NUM_NODES: usize = 12;

/// Node-by-node matrix used for the distance graph.
pub type NodeMatrix = SMatrix<f64, NUM_NODES, NUM_NODES>;

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error("leg pairing {0:?} is not a permutation of 0..6")]
    BadPairing(Vec<usize>),
    #[error("legs {0} and {1} share the same hinge pair")]
    DuplicateLeg(usize, usize),
    #[error("leg {leg}: stored initial length {stored} disagrees with hinge distance {computed}")]
    InconsistentLength { leg: usize, stored: f64, computed: f64 },
    #[error("leg {0} has zero length at assembly")]
    ZeroLength(usize),
    #[error("config must give either explicit hinges or a symmetric generator")]
    MissingGeometry,
    #[error("expected {expected} entries in `{field}`, found {found}")]
    WrongCount { field: &'static str, expected: usize, found: usize },
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialize: {0}")]
    Serialize(#[from] toml::ser::Error),
}

/// Which edges the distance graph carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeMode {
    /// The six leg edges only.
    #[default]
    Legs,
    /// Legs plus the constant hexagon edges `(i, i+1 mod 6)` on each platform.
    Ring,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlatformConfig {
    /// Base hinges `A_s` in {A}, mm.
    pub a: [Vector3<f64>; NUM_LEGS],
    /// Moving hinges `B_s` in {B}, mm.
    pub b: [Vector3<f64>; NUM_LEGS],
    /// Leg lengths at the identity pose, mm.
    pub l0: Vector6<f64>,
    pub base_radius: f64,
    pub platform_radius: f64,
    pub edge_mode: EdgeMode,
    /// Leg `s` joins `a[s]` to `b[pairing[s]]`.
    pub pairing: [usize; NUM_LEGS],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LegLengths {
    /// Current lengths `l̄_s`, mm.
    pub lbar: Vector6<f64>,
    /// Displacements `l̄_s − l_s`, mm.
    pub los: Vector6<f64>,
}

/// Parameters of the 3-fold symmetric layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymmetricLayout {
    pub base_radius: f64,
    pub platform_radius: f64,
    pub half_angle_deg: f64,
    pub height: f64,
}

impl Default for SymmetricLayout {
    fn default() -> Self {
        SymmetricLayout { base_radius: 400.0, platform_radius: 250.0, half_angle_deg: 15.0, height: 500.0 }
    }
}

impl SymmetricLayout {
    /// Base hinge pairs straddle 0°, 120°, 240°; moving hinge pairs straddle
    /// 60°, 180°, 300°. Hinges are ordered so that the identity pairing joins
    /// each base hinge to its nearest moving hinge.
    pub fn hinges(&self) -> ([Vector3<f64>; NUM_LEGS], [Vector3<f64>; NUM_LEGS]) {
        let d = self.half_angle_deg.to_radians();
        let mut a = [Vector3::zeros(); NUM_LEGS];
        let mut b = [Vector3::zeros(); NUM_LEGS];
        for s in 0..NUM_LEGS {
            let dir = (120.0 * (s / 2) as f64).to_radians();
            let (base_ang, top_ang) = if s % 2 == 0 {
                (dir - d, dir - 60f64.to_radians() + d)
            } else {
                (dir + d, dir + 60f64.to_radians() - d)
            };
            a[s] = Vector3::new(self.base_radius * base_ang.cos(), self.base_radius * base_ang.sin(), -self.height);
            b[s] = Vector3::new(self.platform_radius * top_ang.cos(), self.platform_radius * top_ang.sin(), 0.0);
        }
        (a, b)
    }
}

impl PlatformConfig {
    /// Builds a config from hinges, computing `l0` at the identity pose.
    pub fn from_hinges(
        a: [Vector3<f64>; NUM_LEGS],
        b: [Vector3<f64>; NUM_LEGS],
        pairing: [usize; NUM_LEGS],
        edge_mode: EdgeMode,
    ) -> Result<Self, PlatformError> {
        check_pairing(&pairing)?;
        let l0 = Vector6::from_fn(|s, _| (b[pairing[s]] - a[s]).norm());
        let base_radius = a.iter().map(|p| p.xy().norm()).fold(0.0, f64::max);
        let platform_radius = b.iter().map(|p| p.xy().norm()).fold(0.0, f64::max);
        let cfg = PlatformConfig { a, b, l0, base_radius, platform_radius, edge_mode, pairing };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn symmetric(layout: &SymmetricLayout, edge_mode: EdgeMode) -> Result<Self, PlatformError> {
        let (a, b) = layout.hinges();
        let mut cfg = Self::from_hinges(a, b, [0, 1, 2, 3, 4, 5], edge_mode)?;
        cfg.base_radius = layout.base_radius;
        cfg.platform_radius = layout.platform_radius;
        Ok(cfg)
    }

    /// Moving hinge attached to leg `s`.
    pub fn leg_top(&self, s: usize) -> &Vector3<f64> {
        &self.b[self.pairing[s]]
    }

    pub fn validate(&self) -> Result<(), PlatformError> {
        check_pairing(&self.pairing)?;
        for s in 0..NUM_LEGS {
            let computed = (self.leg_top(s) - self.a[s]).norm();
            if computed == 0.0 {
                return Err(PlatformError::ZeroLength(s));
            }
            if (computed - self.l0[s]).abs() > 1e-9 * computed.max(1.0) {
                return Err(PlatformError::InconsistentLength { leg: s, stored: self.l0[s], computed });
            }
            for r in 0..s {
                if self.a[r] == self.a[s] && self.leg_top(r) == self.leg_top(s) {
                    return Err(PlatformError::DuplicateLeg(r, s));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> [u8; 32] {
        let text = self.to_toml().expect("platform config always serializes");
        Sha256::digest(text.as_bytes()).into()
    }

    pub fn to_toml(&self) -> Result<String, PlatformError> {
        let file = PlatformFile {
            edge_mode: self.edge_mode,
            pairing: Some(self.pairing.to_vec()),
            base: Some(self.a.iter().map(|v| [v.x, v.y, v.z]).collect()),
            platform: Some(self.b.iter().map(|v| [v.x, v.y, v.z]).collect()),
            l0: Some(self.l0.iter().copied().collect()),
            base_radius: Some(self.base_radius),
            platform_radius: Some(self.platform_radius),
            symmetric: None,
        };
        Ok(toml::to_string(&file)?)
    }

    pub fn from_toml(text: &str) -> Result<Self, PlatformError> {
        let file: PlatformFile = toml::from_str(text)?;
        file.into_config()
    }

    pub fn load(path: &Path) -> Result<Self, PlatformError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), PlatformError> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

fn check_pairing(pairing: &[usize; NUM_LEGS]) -> Result<(), PlatformError> {
    let mut seen = [false; NUM_LEGS];
    for &p in pairing {
        if p >= NUM_LEGS || seen[p] {
            return Err(PlatformError::BadPairing(pairing.to_vec()));
        }
        seen[p] = true;
    }
    Ok(())
}

/// On-disk platform description. Either `base`/`platform` (and optionally
/// `l0`) or a `[symmetric]` generator table must be present.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PlatformFile {
    #[serde(default)]
    edge_mode: EdgeMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pairing: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    platform_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    platform: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    l0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    symmetric: Option<SymmetricLayout>,
}

fn six<T: Copy>(field: &'static str, v: &[T]) -> Result<[T; NUM_LEGS], PlatformError> {
    v.try_into().map_err(|_| PlatformError::WrongCount { field, expected: NUM_LEGS, found: v.len() })
}

impl PlatformFile {
    fn into_config(self) -> Result<PlatformConfig, PlatformError> {
        let pairing = match &self.pairing {
            Some(p) => six("pairing", p)?,
            None => [0, 1, 2, 3, 4, 5],
        };
        let (a, b, radii) = match (&self.base, &self.platform, &self.symmetric) {
            (Some(base), Some(top), _) => {
                let a = six("base", base)?.map(|p| Vector3::new(p[0], p[1], p[2]));
                let b = six("platform", top)?.map(|p| Vector3::new(p[0], p[1], p[2]));
                (a, b, None)
            }
            (_, _, Some(layout)) => {
                let (a, b) = layout.hinges();
                (a, b, Some((layout.base_radius, layout.platform_radius)))
            }
            _ => return Err(PlatformError::MissingGeometry),
        };
        let mut cfg = PlatformConfig::from_hinges(a, b, pairing, self.edge_mode)?;
        if let Some((r1, r2)) = radii {
            cfg.base_radius = r1;
            cfg.platform_radius = r2;
        }
        if let Some(r1) = self.base_radius {
            cfg.base_radius = r1;
        }
        if let Some(r2) = self.platform_radius {
            cfg.platform_radius = r2;
        }
        if let Some(l0) = &self.l0 {
            cfg.l0 = Vector6::from_row_slice(&six("l0", l0)?);
            cfg.validate()?;
        }
        Ok(cfg)
    }
}

/// The symmetric layout with R₁ = 400 mm, R₂ = 250 mm, δ = 15°, height 500 mm.
pub fn default_config() -> PlatformConfig {
    PlatformConfig::symmetric(&SymmetricLayout::default(), EdgeMode::Legs)
        .expect("default layout is valid")
}

/// `l̄_s = ‖R·b_s + t − a_s‖₂`, `l_os = l̄_s − l_s`.
pub fn inverse_kinematics(cfg: &PlatformConfig, pose: &Pose) -> LegLengths {
    let lbar = Vector6::from_fn(|s, _| (pose.transform_point(cfg.leg_top(s)) - cfg.a[s]).norm());
    LegLengths { lbar, los: lbar - cfg.l0 }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceGraph {
    pub adjacency: SMatrix<u8, NUM_NODES, NUM_NODES>,
    pub distances: NodeMatrix,
    /// Hinge identifier of each node (the one-hot index for the embedding).
    pub node_types: [usize; NUM_NODES],
}

impl DistanceGraph {
    /// Relabels node `i` as `sigma[i]`: `E'[σi, σj] = E[i, j]`.
    pub fn permuted(&self, sigma: &[usize; NUM_NODES]) -> DistanceGraph {
        let mut out = self.clone();
        for i in 0..NUM_NODES {
            out.node_types[sigma[i]] = self.node_types[i];
            for j in 0..NUM_NODES {
                out.adjacency[(sigma[i], sigma[j])] = self.adjacency[(i, j)];
                out.distances[(sigma[i], sigma[j])] = self.distances[(i, j)];
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&x| x != 0).count() / 2
    }
}

/// Adjacency of the graph for `cfg`'s edge mode (leg pairing included).
pub fn adjacency(cfg: &PlatformConfig) -> SMatrix<u8, NUM_NODES, NUM_NODES> {
    let mut adj = SMatrix::<u8, NUM_NODES, NUM_NODES>::zeros();
    for s in 0..NUM_LEGS {
        let (i, j) = (s, NUM_LEGS + cfg.pairing[s]);
        adj[(i, j)] = 1;
        adj[(j, i)] = 1;
    }
    if cfg.edge_mode == EdgeMode::Ring {
        for offset in [0, NUM_LEGS] {
            for i in 0..NUM_LEGS {
                let (p, q) = (offset + i, offset + (i + 1) % NUM_LEGS);
                adj[(p, q)] = 1;
                adj[(q, p)] = 1;
            }
        }
    }
    adj
}

/// `E = P(A, d_ij)`: leg entries carry `l̄_s`, ring entries the constant
/// hinge spacing, every other entry is exactly zero.
pub fn build_distance_graph(cfg: &PlatformConfig, lbar: &Vector6<f64>) -> DistanceGraph {
    let adjacency = adjacency(cfg);
    let mut distances = NodeMatrix::zeros();
    for s in 0..NUM_LEGS {
        let (i, j) = (s, NUM_LEGS + cfg.pairing[s]);
        distances[(i, j)] = lbar[s];
        distances[(j, i)] = lbar[s];
    }
    if cfg.edge_mode == EdgeMode::Ring {
        for i in 0..NUM_LEGS {
            let k = (i + 1) % NUM_LEGS;
            let base = (cfg.a[i] - cfg.a[k]).norm();
            let top = (cfg.b[i] - cfg.b[k]).norm();
            distances[(i, k)] = base;
            distances[(k, i)] = base;
            distances[(NUM_LEGS + i, NUM_LEGS + k)] = top;
            distances[(NUM_LEGS + k, NUM_LEGS + i)] = top;
        }
    }
    DistanceGraph { adjacency, distances, node_types: std::array::from_fn(|i| i) }
}

/// Row-major flattening of a 12×12 matrix.
pub fn vectorize_distance(e: &NodeMatrix) -> [f64; NUM_NODES * NUM_NODES] {
    std::array::from_fn(|k| e[(k / NUM_NODES, k % NUM_NODES)])
}

pub fn unvectorize_distance(v: &[f64]) -> NodeMatrix {
    assert_eq!(v.len(), NUM_NODES * NUM_NODES);
    NodeMatrix::from_row_slice(v)
}
