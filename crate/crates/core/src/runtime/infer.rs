use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grasp::rotation::{geodesic_angle, matrix_from_quaternion, matrix_from_six_d, quaternion_from_matrix, vertical_rotation};
use crate::grasp::{points_tensor, GraspModel, ModelKind};
use crate::group::GroupElement;
use crate::scene::{GripperConfig, TsdfVolume};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub quality_threshold: f64,
    pub top_k: usize,
    /// Flow sampling rounds per position; the best classified draw is kept.
    pub rounds: usize,
    /// Points decoded per graph.
    pub chunk: usize,
    /// Suppression radius for reported grasps, voxels.
    pub nms_radius: f64,
    pub mask_workspace: bool,
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { quality_threshold: 0.5, top_k: 20, rounds: 1, chunk: 4096, nms_radius: 3.0, mask_workspace: true, seed: 0 }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.chunk == 0 {
            return Err(Error::Config("rounds and chunk must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedGrasp {
    /// `[z, y, x]`.
    pub voxel: [usize; 3],
    pub position: [f64; 3],
    /// `[w, x, y, z]`.
    pub rotation: [f64; 4],
    pub graspness: f64,
    pub classifier: Option<f64>,
    pub quality: f64,
}

impl SelectedGrasp {
    pub fn matrix(&self) -> Matrix3<f64> {
        matrix_from_quaternion(self.rotation)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub encode_ms: f64,
    pub decode_ms: f64,
    pub select_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceResult {
    pub grid: usize,
    /// Per-voxel graspness, `[z][y][x]`.
    pub graspness: Vec<f64>,
    /// Per-voxel quality; zero where no grasp was decoded.
    pub quality: Vec<f64>,
    /// Grasps above the threshold, best first, at most `top_k`.
    pub grasps: Vec<SelectedGrasp>,
    pub no_grasp: bool,
    pub timing: Timing,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Whether the fingers and palm stay inside the workspace cube.
fn inside_workspace(p: [f64; 3], r: &Matrix3<f64>, gripper: &GripperConfig, workspace: f64) -> bool {
    let p = Vector3::from(p);
    let y = r.column(1).into_owned();
    let z = r.column(2).into_owned();
    let half = gripper.max_width / 2.0;
    let back = p - gripper.finger_length * z;
    [p + half * y, p - half * y, back + half * y, back - half * y]
        .iter()
        .all(|q| (0..3).all(|a| (0.0..=workspace).contains(&q[a])))
}

/// Seed of the flow draws of one chunk and round.
fn round_seed(seed: u64, chunk: usize, round: usize) -> u64 {
    seed ^ (chunk as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (round as u64 + 1).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
}

/// Decodes every voxel centre of `tsdf` and selects grasps above the
/// quality threshold.
pub fn infer<T: Scalar>(
    model: &GraspModel,
    store: &ParamStore<T>,
    cfg: &InferConfig,
    gripper: &GripperConfig,
    tsdf: &TsdfVolume,
) -> Result<InferenceResult> {
    cfg.validate()?;
    let s = tsdf.size;
    if s != model.encoder.config.grid {
        return Err(Error::Config(format!(
            "input grid {s} does not match the checkpoint encoder grid {}",
            model.encoder.config.grid
        )));
    }
    let geo = tsdf.geometry();
    let workspace = geo.cell * s as f64;

    let t = Instant::now();
    let g = Graph::inference();
    let tri = model.encode(&g, store, g.constant(tsdf.tensor()), geo.clone())?;
    let encode_ms = ms(t);

    let t = Instant::now();
    let centers: Vec<[f64; 3]> = (0..s * s * s).map(|i| geo.voxel_center(i / (s * s), (i / s) % s, i % s)).collect();
    let mut graspness = Vec::with_capacity(centers.len());
    for chunk in centers.chunks(cfg.chunk) {
        let gc = Graph::inference();
        let tri = tri.transfer(&g, &gc);
        let c = model.grasp_features(&gc, store, &tri, gc.constant(points_tensor(chunk)))?;
        let a = model.graspness(&gc, store, &c)?;
        graspness.extend(gc.value(a).data().iter().map(|v| v.f64()));
    }
    let candidates: Vec<usize> = (0..centers.len()).filter(|&i| graspness[i] > cfg.quality_threshold).collect();
    let mut quality = vec![0.0; centers.len()];
    let mut decoded: Vec<(usize, Matrix3<f64>, Option<f64>)> = Vec::new();
    for (ci, chunk) in candidates.chunks(cfg.chunk).enumerate() {
        let pts: Vec<[f64; 3]> = chunk.iter().map(|&i| centers[i]).collect();
        let gc = Graph::inference();
        let tri = tri.transfer(&g, &gc);
        let pv = gc.constant(points_tensor(&pts));
        let c = model.grasp_features(&gc, store, &tri, pv)?;
        match model.kind {
            ModelKind::EquiGiga => {
                let r6 = gc.value(model.rotation(&gc, store, &c)?);
                for (k, &i) in chunk.iter().enumerate() {
                    let row: Vec<f64> = r6.data()[6 * k..6 * k + 6].iter().map(|v| v.f64()).collect();
                    if let Ok(r) = matrix_from_six_d(&row) {
                        decoded.push((i, r, None));
                    }
                }
            }
            ModelKind::EquiIgd => {
                let feats = (*gc.value(c.var)).clone();
                let mut best: Vec<Option<(f64, Matrix3<f64>)>> = vec![None; chunk.len()];
                for round in 0..cfg.rounds {
                    let mut rng = ChaCha8Rng::seed_from_u64(round_seed(cfg.seed, ci, round));
                    let r0 = Tensor::<T>::randn(&[chunk.len(), 6], &mut rng);
                    let r = model.flow()?.sample(store, &feats, &c.spec, r0, model.decoder.flow_steps)?;
                    let rots: Vec<Option<Matrix3<f64>>> = (0..chunk.len())
                        .map(|k| {
                            let row: Vec<f64> = r.data()[6 * k..6 * k + 6].iter().map(|v| v.f64()).collect();
                            matrix_from_six_d(&row).ok()
                        })
                        .collect();
                    let filled: Vec<Matrix3<f64>> = rots.iter().map(|r| r.unwrap_or_else(Matrix3::identity)).collect();
                    let v = gc.value(model.classify(&gc, store, &tri, pv, &filled, &c)?);
                    for (k, rot) in rots.iter().enumerate() {
                        let Some(rot) = rot else { continue };
                        if cfg.mask_workspace && !inside_workspace(pts[k], rot, gripper, workspace) {
                            continue;
                        }
                        let score = v.data()[k].f64();
                        if best[k].is_none_or(|(b, _)| score > b) {
                            best[k] = Some((score, *rot));
                        }
                    }
                }
                for (k, &i) in chunk.iter().enumerate() {
                    if let Some((v, r)) = best[k] {
                        decoded.push((i, r, Some(v)));
                    }
                }
            }
        }
    }
    let decode_ms = ms(t);

    let t = Instant::now();
    let mut grasps = Vec::new();
    for (i, r, v) in decoded {
        if cfg.mask_workspace && !inside_workspace(centers[i], &r, gripper, workspace) {
            continue;
        }
        let q = graspness[i] * v.unwrap_or(1.0);
        quality[i] = q;
        if q > cfg.quality_threshold {
            grasps.push(SelectedGrasp {
                voxel: [i / (s * s), (i / s) % s, i % s],
                position: centers[i],
                rotation: quaternion_from_matrix(&r),
                graspness: graspness[i],
                classifier: v,
                quality: q,
            });
        }
    }
    grasps.sort_by(|a, b| b.quality.total_cmp(&a.quality));
    grasps.truncate(cfg.top_k);
    let select_ms = ms(t);
    Ok(InferenceResult {
        grid: s,
        graspness,
        quality,
        no_grasp: grasps.is_empty(),
        grasps,
        timing: Timing { encode_ms, decode_ms, select_ms },
    })
}

/// Greedy suppression of lower-quality grasps within `radius` voxels.
pub fn nms(grasps: &[SelectedGrasp], radius: f64) -> Vec<SelectedGrasp> {
    let mut kept: Vec<SelectedGrasp> = Vec::new();
    for g in grasps {
        let close = kept.iter().any(|k| {
            let d2: f64 = (0..3).map(|a| (k.voxel[a] as f64 - g.voxel[a] as f64).powi(2)).sum();
            d2.sqrt() <= radius
        });
        if !close {
            kept.push(g.clone());
        }
    }
    kept
}

/// Counts grasps of `original` whose `g`-rotated pose appears in `rotated`
/// within `voxels` of position and `degrees` of orientation.
pub fn match_rotated(original: &InferenceResult, rotated: &InferenceResult, g: GroupElement, voxels: f64, degrees: f64) -> (usize, usize) {
    let s = original.grid;
    let c = (s as f64 - 1.0) / 2.0;
    let t = vertical_rotation(g);
    let matched = original
        .grasps
        .iter()
        .filter(|a| {
            let v = g.rotate_xy([a.voxel[2] as f64 - c, a.voxel[1] as f64 - c]);
            let want = [a.voxel[0] as f64, v[1] + c, v[0] + c];
            let r = t * a.matrix();
            rotated.grasps.iter().any(|b| {
                let d2: f64 = (0..3).map(|k| (b.voxel[k] as f64 - want[k]).powi(2)).sum();
                d2.sqrt() <= voxels && geodesic_angle(&r, &b.matrix()).to_degrees() <= degrees
            })
        })
        .count();
    (matched, original.grasps.len())
}
