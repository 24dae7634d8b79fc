use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Primitive, SceneSpec, Shape};
use crate::grasp::rotation::{matrix_from_quaternion, quaternion_from_matrix, vertical_rotation};
use crate::group::GroupElement;

/// Parallel-jaw gripper. The grasp frame has `y` along the closing axis and
/// `z` along the approach; fingers sweep back along `-z` from the centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GripperConfig {
    pub max_width: f64,
    pub clearance: f64,
    pub friction_deg: f64,
    pub finger_length: f64,
    pub approach_length: f64,
    pub approach_angles: usize,
}

impl Default for GripperConfig {
    fn default() -> Self {
        Self {
            max_width: 0.08,
            clearance: 0.005,
            friction_deg: 10.0,
            finger_length: 0.05,
            approach_length: 0.10,
            approach_angles: 12,
        }
    }
}

const SWEEP_STEP: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspLabel {
    pub position: [f64; 3],
    /// `[w, x, y, z]`.
    pub rotation: [f64; 4],
    pub success: bool,
    pub width: f64,
}

impl GraspLabel {
    pub fn matrix(&self) -> Matrix3<f64> {
        matrix_from_quaternion(self.rotation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspOutcome {
    pub success: bool,
    /// Object between the fingers, if exactly one.
    pub object: Option<usize>,
    pub width: f64,
}

/// Rotation with columns `(y × z, y, z)`.
pub fn grasp_rotation(closing: Vector3<f64>, approach: Vector3<f64>) -> Matrix3<f64> {
    let y = closing.normalize();
    let z = approach.normalize();
    Matrix3::from_columns(&[y.cross(&z), y, z])
}

/// Antipodal test of the grasp at `center` with orientation `r`.
pub fn evaluate_grasp(scene: &SceneSpec, gripper: &GripperConfig, center: [f64; 3], r: &Matrix3<f64>) -> GraspOutcome {
    let p = Vector3::from(center);
    let y = r.column(1).into_owned();
    let z = r.column(2).into_owned();
    let half = gripper.max_width / 2.0;
    let mut hits = scene.primitives.iter().enumerate().filter_map(|(i, q)| {
        q.chord(p, y)
            .filter(|c| c.exit > -half && c.enter < half)
            .map(|c| (i, c))
    });
    let fail = |object, width| GraspOutcome { success: false, object, width };
    let Some((object, chord)) = hits.next() else {
        return fail(None, 0.0);
    };
    if hits.next().is_some() {
        return fail(None, 0.0);
    }
    let width = chord.exit - chord.enter;
    if width + gripper.clearance > gripper.max_width {
        return fail(Some(object), width);
    }
    let cone = gripper.friction_deg.to_radians().cos();
    if -chord.enter_normal.dot(&y) < cone || chord.exit_normal.dot(&y) < cone {
        return fail(Some(object), width);
    }
    let reach = gripper.finger_length + gripper.approach_length;
    let blocked = |q: Vector3<f64>| q.z <= 0.0 || scene.sdf(q) <= 0.0;
    let steps = (reach / SWEEP_STEP).round() as usize;
    for k in 0..=steps {
        let t = reach * k as f64 / steps as f64;
        let back = p - t * z;
        if blocked(back + half * y) || blocked(back - half * y) {
            return fail(Some(object), width);
        }
        if t >= gripper.finger_length && blocked(back) {
            return fail(Some(object), width);
        }
    }
    let palm = p - gripper.finger_length * z;
    let across = (gripper.max_width / SWEEP_STEP).round() as usize;
    for k in 0..=across {
        let s = -half + gripper.max_width * k as f64 / across as f64;
        if blocked(palm + s * y) {
            return fail(Some(object), width);
        }
    }
    GraspOutcome { success: true, object: Some(object), width }
}

/// Candidate closing axes for grasps on `prim` centred at `p`: face normals
/// of boxes, the diametral direction through `p` (plus the axis) for
/// cylinders, and the radial direction for spheres.
pub fn closing_directions(prim: &Primitive, p: Vector3<f64>) -> Vec<Vector3<f64>> {
    let l = prim.to_local(p);
    match prim.shape {
        Shape::Box { .. } => (0..3).map(|k| prim.axis(k)).collect(),
        Shape::Cylinder { .. } => {
            let ax = prim.cylinder_axis();
            let mut radial = l;
            radial[ax] = 0.0;
            let radial = if radial.norm() < 1e-9 {
                prim.axis(if ax == 2 { 0 } else { 1 })
            } else {
                prim.dir_to_world(radial.normalize())
            };
            vec![radial, prim.axis(ax)]
        }
        Shape::Sphere { .. } => {
            if l.norm() < 1e-9 {
                vec![prim.axis(0)]
            } else {
                vec![prim.dir_to_world(l.normalize())]
            }
        }
    }
}

/// `count` approach directions perpendicular to `closing`, evenly spaced
/// starting from the most downward one.
pub fn approach_directions(prim: &Primitive, closing: Vector3<f64>, count: usize) -> Vec<Vector3<f64>> {
    let y = closing.normalize();
    let down = -Vector3::z();
    let mut a0 = down - down.dot(&y) * y;
    if a0.norm() < 1e-6 {
        let x = prim.axis(0);
        a0 = x - x.dot(&y) * y;
        if a0.norm() < 1e-6 {
            let x = prim.axis(1);
            a0 = x - x.dot(&y) * y;
        }
    }
    let a0 = a0.normalize();
    let b0 = y.cross(&a0);
    (0..count)
        .map(|k| {
            let t = std::f64::consts::TAU * k as f64 / count as f64;
            t.cos() * a0 + t.sin() * b0
        })
        .collect()
}

fn candidates(prim: &Primitive, p: Vector3<f64>, angles: usize) -> Vec<Matrix3<f64>> {
    closing_directions(prim, p)
        .into_iter()
        .flat_map(|y| approach_directions(prim, y, angles).into_iter().map(move |z| grasp_rotation(y, z)))
        .collect()
}

/// Whether any candidate grasp on the nearest primitive succeeds at `p`.
pub fn graspness_at(scene: &SceneSpec, gripper: &GripperConfig, p: [f64; 3]) -> bool {
    let v = Vector3::from(p);
    let Some(i) = scene.nearest(v) else {
        return false;
    };
    candidates(&scene.primitives[i], v, gripper.approach_angles)
        .iter()
        .any(|r| evaluate_grasp(scene, gripper, p, r).success)
}

fn local_offset(prim: &Primitive, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let mut u = || rng.gen_range(-0.5..0.5);
    match prim.shape {
        Shape::Box { size } => Vector3::new(u() * size[0], u() * size[1], u() * size[2]),
        Shape::Cylinder { radius, height } => {
            let (a, b, h) = (u() * radius, u() * radius, u() * height);
            if prim.lying {
                Vector3::new(h, a, b)
            } else {
                Vector3::new(a, b, h)
            }
        }
        Shape::Sphere { radius } => Vector3::new(u(), u(), u()) * radius,
    }
}

/// Labelled grasps: `samples_per_object` centres inside each primitive, each
/// with every candidate closing axis and approach angle. Sampling happens in
/// the primitive frame, so rotated scenes yield rotated labels.
pub fn analytic_grasp_labels(scene: &SceneSpec, gripper: &GripperConfig, samples_per_object: usize) -> Vec<GraspLabel> {
    let mut out = Vec::new();
    for (i, prim) in scene.primitives.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1)));
        for _ in 0..samples_per_object {
            let p = prim.to_world(local_offset(prim, &mut rng));
            for r in candidates(prim, p, gripper.approach_angles) {
                let o = evaluate_grasp(scene, gripper, p.into(), &r);
                out.push(GraspLabel {
                    position: p.into(),
                    rotation: quaternion_from_matrix(&r),
                    success: o.success,
                    width: o.width,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspnessSample {
    pub point: [f64; 3],
    pub graspable: bool,
}

/// Graspness probes: half uniform over the workspace, half near a random
/// primitive.
pub fn graspness_samples(scene: &SceneSpec, gripper: &GripperConfig, count: usize, rng: &mut impl Rng) -> Vec<GraspnessSample> {
    let w = scene.workspace;
    (0..count)
        .map(|k| {
            let point = if k % 2 == 1 && !scene.primitives.is_empty() {
                let q = scene.primitives[rng.gen_range(0..scene.primitives.len())];
                let r = q.bounding_radius();
                let c = q.position;
                std::array::from_fn(|a| (c[a] + rng.gen_range(-r..r)).clamp(0.0, w))
            } else {
                [rng.gen_range(0.0..w), rng.gen_range(0.0..w), rng.gen_range(0.0..w)]
            };
            GraspnessSample { point, graspable: graspness_at(scene, gripper, point) }
        })
        .collect()
}

/// Applies the vertical rotation `g` about the workspace centre to labels.
pub fn rotate_labels(labels: &[GraspLabel], g: GroupElement, workspace: f64) -> Vec<GraspLabel> {
    let c = workspace / 2.0;
    let t = vertical_rotation(g);
    labels
        .iter()
        .map(|l| {
            let v = g.rotate_xy([l.position[0] - c, l.position[1] - c]);
            GraspLabel {
                position: [v[0] + c, v[1] + c, l.position[2]],
                rotation: quaternion_from_matrix(&(t * l.matrix())),
                ..*l
            }
        })
        .collect()
}
