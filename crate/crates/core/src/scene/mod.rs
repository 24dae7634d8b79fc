//! Procedural primitive scenes with analytic distance fields and grasp labels.

mod dataset;
mod grasp;
mod primitive;

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use dataset::{
    batch_from_record, decode_record, encode_record, generate_dataset, read_record, scene_seed, write_record, BatchLimits, Dataset, DatasetIndex, GenerateConfig,
    GenerateReport, SceneRecord,
};
pub use grasp::{
    analytic_grasp_labels, approach_directions, closing_directions, evaluate_grasp, grasp_rotation, graspness_at,
    graspness_samples, rotate_labels, GraspLabel, GraspOutcome, GraspnessSample, GripperConfig,
};
pub use primitive::{Chord, Primitive, Shape};

use crate::error::{Error, Result};
use crate::group::{rotate_grid, GridGeometry, GroupElement};
use crate::tensor::{Scalar, Tensor};

pub const WORKSPACE: f64 = 0.30;
/// Truncation distance in voxels.
pub const TRUNCATION_VOXELS: f64 = 4.0;
const PLACEMENT_ATTEMPTS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    PackedLike,
    PileLike,
}

impl FromStr for SceneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "packed" | "packed_like" => Ok(Self::PackedLike),
            "pile" | "pile_like" => Ok(Self::PileLike),
            _ => Err(Error::Config(format!("unknown scene kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub workspace: f64,
    pub kind: SceneKind,
    pub seed: u64,
    pub primitives: Vec<Primitive>,
}

impl SceneSpec {
    pub fn empty(seed: u64) -> Self {
        Self { workspace: WORKSPACE, kind: SceneKind::PackedLike, seed, primitives: Vec::new() }
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(self.workspace / 2.0, self.workspace / 2.0, self.workspace / 2.0)
    }

    /// Union distance; `+∞` for an empty scene.
    pub fn sdf(&self, p: Vector3<f64>) -> f64 {
        self.primitives.iter().map(|q| q.sdf(p)).fold(f64::INFINITY, f64::min)
    }

    /// Index of the primitive closest to `p`.
    pub fn nearest(&self, p: Vector3<f64>) -> Option<usize> {
        self.primitives
            .iter()
            .enumerate()
            .map(|(i, q)| (i, q.sdf(p)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }

    pub fn without(&self, index: usize) -> Self {
        let mut out = self.clone();
        out.primitives.remove(index);
        out
    }

    pub fn geometry(&self, size: usize) -> GridGeometry {
        GridGeometry::cube(size, self.workspace)
    }
}

fn placement_seed(seed: u64) -> u64 {
    seed ^ 0x5ce9_e5ee_d000_0001
}

fn random_primitive(rng: &mut ChaCha8Rng, kind: SceneKind) -> Primitive {
    let shape = match rng.gen_range(0..3) {
        0 => {
            let mut size = [rng.gen_range(0.025..0.07), rng.gen_range(0.025..0.07), rng.gen_range(0.03..0.09)];
            if kind == SceneKind::PileLike {
                let up = rng.gen_range(0..3);
                size.swap(up, 2);
            }
            Shape::Box { size }
        }
        1 => Shape::Cylinder { radius: rng.gen_range(0.015..0.04), height: rng.gen_range(0.04..0.10) },
        _ => Shape::Sphere { radius: rng.gen_range(0.015..0.045) },
    };
    let lying = kind == SceneKind::PileLike && matches!(shape, Shape::Cylinder { .. }) && rng.gen_bool(0.5);
    let yaw = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut p = Primitive { shape, position: [0.0; 3], yaw, lying };
    p.position[2] = p.height() / 2.0;
    p
}

/// Non-overlapping primitives resting on the table. Packed scenes spread
/// upright shapes over the workspace; piles crowd shapes in arbitrary
/// axis-aligned orientations around the centre.
pub fn synth_scene(seed: u64, kind: SceneKind, object_count: usize) -> Result<SceneSpec> {
    if object_count == 0 {
        return Err(Error::Config("a scene needs at least one object".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(placement_seed(seed));
    let (half, gap) = match kind {
        SceneKind::PackedLike => (WORKSPACE / 2.0 - 0.03, 0.01),
        SceneKind::PileLike => (0.11, 0.002),
    };
    let c = WORKSPACE / 2.0;
    let mut placed: Vec<Primitive> = Vec::with_capacity(object_count);
    for index in 0..object_count {
        let mut p = random_primitive(&mut rng, kind);
        let mut ok = false;
        for attempt in 0..PLACEMENT_ATTEMPTS {
            // a fresh shape every 100 attempts
            if attempt > 0 && attempt % 100 == 0 {
                p = random_primitive(&mut rng, kind);
            }
            let r = p.footprint_radius();
            let lim = half - r;
            if lim <= 0.0 {
                continue;
            }
            p.position[0] = c + rng.gen_range(-lim..lim);
            p.position[1] = c + rng.gen_range(-lim..lim);
            ok = placed.iter().all(|q| {
                let dx = q.position[0] - p.position[0];
                let dy = q.position[1] - p.position[1];
                (dx * dx + dy * dy).sqrt() >= q.footprint_radius() + r + gap
            });
            if ok {
                break;
            }
        }
        if !ok {
            return Err(Error::Placement { index, attempts: PLACEMENT_ATTEMPTS });
        }
        placed.push(p);
    }
    Ok(SceneSpec { workspace: WORKSPACE, kind, seed, primitives: placed })
}

/// Rotates every pose about the vertical axis through the workspace centre.
pub fn rotate_scene(scene: &SceneSpec, g: GroupElement) -> SceneSpec {
    let c = scene.center();
    let mut out = scene.clone();
    for p in &mut out.primitives {
        let v = g.rotate_xy([p.position[0] - c.x, p.position[1] - c.y]);
        p.position[0] = v[0] + c.x;
        p.position[1] = v[1] + c.y;
        p.yaw += g.angle();
    }
    out
}

/// Additive noise on normalised TSDF values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Noise {
    #[default]
    None,
    Gaussian(f64),
}

impl FromStr for Noise {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(Noise::None);
        }
        let sigma = s
            .strip_prefix("gaussian:")
            .and_then(|v| v.parse::<f64>().ok())
            .filter(|v| v.is_finite() && *v >= 0.0)
            .ok_or_else(|| Error::Config(format!("noise must be `none` or `gaussian:σ`, got `{s}`")))?;
        Ok(Noise::Gaussian(sigma))
    }
}

impl TryFrom<String> for Noise {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl fmt::Display for Noise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Noise::None => write!(f, "none"),
            Noise::Gaussian(s) => write!(f, "gaussian:{s}"),
        }
    }
}

impl From<Noise> for String {
    fn from(n: Noise) -> String {
        n.to_string()
    }
}

/// `size³` truncated distances normalised to `[-1, 1]`, stored `[z][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdfVolume {
    pub size: usize,
    pub truncation: f64,
    pub values: Vec<f64>,
}

impl TsdfVolume {
    pub fn geometry(&self) -> GridGeometry {
        GridGeometry::cube(self.size, WORKSPACE)
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        self.values[(z * self.size + y) * self.size + x]
    }

    /// `[1, Z, Y, X]` input field.
    pub fn tensor<T: Scalar>(&self) -> Tensor<T> {
        let s = self.size;
        Tensor::from_f64(vec![1, s, s, s], &self.values).expect("tsdf volume shape")
    }

    /// Exact grid rotation about the vertical axis.
    pub fn rotate(&self, g: GroupElement) -> Result<Self> {
        let q = g.quarter_turns().ok_or_else(|| Error::Geometry(format!("{g} is not a quarter turn")))?;
        let t = rotate_grid(&self.tensor::<f64>(), q)?;
        Ok(Self { values: t.into_data(), ..self.clone() })
    }
}

/// Rasterises the analytic distance of `scene` at voxel centres.
pub fn tsdf_from_scene(scene: &SceneSpec, size: usize, noise: Noise) -> Result<TsdfVolume> {
    if size < 8 {
        return Err(Error::Config(format!("TSDF grid must be at least 8, got {size}")));
    }
    let geo = scene.geometry(size);
    let truncation = TRUNCATION_VOXELS * geo.cell;
    let mut values = Vec::with_capacity(size * size * size);
    for z in 0..size {
        for y in 0..size {
            for x in 0..size {
                let d = scene.sdf(Vector3::from(geo.voxel_center(z, y, x)));
                values.push((d / truncation).clamp(-1.0, 1.0));
            }
        }
    }
    if let Noise::Gaussian(sigma) = noise {
        if sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x7d5f_0000_0000_0002);
            let n = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
            for v in &mut values {
                *v = (*v + n.sample(&mut rng)).clamp(-1.0, 1.0);
            }
        }
    }
    Ok(TsdfVolume { size, truncation, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancySample {
    pub point: [f64; 3],
    pub occupied: bool,
    pub near_surface: bool,
}

/// Fraction of occupancy samples drawn uniformly over the workspace.
pub const UNIFORM_FRACTION: f64 = 0.7;

/// Occupancy probes: uniform draws with probability 0.7, otherwise points
/// within one voxel (of a `grid`-sized volume) of the surface.
pub fn occupancy_samples(scene: &SceneSpec, count: usize, grid: usize, rng: &mut impl Rng) -> Vec<OccupancySample> {
    let w = scene.workspace;
    let band = w / grid as f64;
    let uniform = |rng: &mut dyn rand::RngCore| -> Vector3<f64> {
        Vector3::new(rng.gen_range(0.0..w), rng.gen_range(0.0..w), rng.gen_range(0.0..w))
    };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut p = None;
        if !scene.primitives.is_empty() && !rng.gen_bool(UNIFORM_FRACTION) {
            for _ in 0..1000 {
                let q = scene.primitives[rng.gen_range(0..scene.primitives.len())];
                let r = q.bounding_radius() + band;
                let c = Vector3::from(q.position)
                    + Vector3::new(rng.gen_range(-r..r), rng.gen_range(-r..r), rng.gen_range(-r..r));
                if scene.sdf(c).abs() <= band && (0..3).all(|a| (0.0..=w).contains(&c[a])) {
                    p = Some(c);
                    break;
                }
            }
        }
        let (point, near_surface) = match p {
            Some(c) => (c, true),
            None => (uniform(rng), false),
        };
        out.push(OccupancySample { point: point.into(), occupied: scene.sdf(point) < 0.0, near_surface });
    }
    out
}
