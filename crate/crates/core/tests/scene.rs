use equigrasp_core::grasp::rotation::geodesic_angle;
use equigrasp_core::group::{CyclicGroup, GroupElement};
use equigrasp_core::scene::{
    analytic_grasp_labels, batch_from_record, decode_record, encode_record, evaluate_grasp, generate_dataset,
    grasp_rotation, graspness_at, occupancy_samples, rotate_labels, rotate_scene, synth_scene, tsdf_from_scene,
    BatchLimits, Dataset, GenerateConfig, GripperConfig, Noise, Primitive, SceneKind, SceneRecord, SceneSpec, Shape,
    WORKSPACE,
};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const C4: CyclicGroup = CyclicGroup::C4;

fn scene_of(primitives: Vec<Primitive>) -> SceneSpec {
    SceneSpec { primitives, ..SceneSpec::empty(7) }
}

fn upright(shape: Shape, x: f64, y: f64, yaw: f64) -> Primitive {
    let mut p = Primitive { shape, position: [x, y, 0.0], yaw, lying: false };
    p.position[2] = p.height() / 2.0;
    p
}

#[test]
fn synth_scene_is_deterministic_and_collision_free() {
    for kind in [SceneKind::PackedLike, SceneKind::PileLike] {
        let a = synth_scene(42, kind, 1).unwrap();
        let b = synth_scene(42, kind, 1).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        assert_ne!(synth_scene(43, kind, 1).unwrap().primitives[0].position, a.primitives[0].position);
        for seed in 0..20 {
            let s = synth_scene(seed, kind, 4).unwrap();
            for (i, p) in s.primitives.iter().enumerate() {
                let r = p.footprint_radius();
                assert!(p.position[0] - r >= 0.0 && p.position[0] + r <= WORKSPACE);
                assert!((p.position[2] - p.height() / 2.0).abs() < 1e-15);
                for q in &s.primitives[i + 1..] {
                    let d = ((p.position[0] - q.position[0]).powi(2) + (p.position[1] - q.position[1]).powi(2)).sqrt();
                    assert!(d >= r + q.footprint_radius());
                }
            }
        }
    }
    assert!(synth_scene(0, SceneKind::PackedLike, 0).is_err());
    assert!(matches!(
        synth_scene(0, SceneKind::PileLike, 60),
        Err(equigrasp_core::error::Error::Placement { .. })
    ));
}

#[test]
fn tsdf_closed_forms() {
    let empty = tsdf_from_scene(&SceneSpec::empty(0), 16, Noise::None).unwrap();
    assert!(empty.values.iter().all(|&v| v == 1.0));
    assert!(tsdf_from_scene(&SceneSpec::empty(0), 4, Noise::None).is_err());

    let s = 40;
    let cell = WORKSPACE / s as f64;
    let trunc = 4.0 * cell;
    let sphere = scene_of(vec![upright(Shape::Sphere { radius: 0.05 }, 0.15, 0.15, 0.3)]);
    let t = tsdf_from_scene(&sphere, s, Noise::None).unwrap();
    assert!((t.truncation - trunc).abs() < 1e-15);
    let picks = [(6, 20, 20), (0, 0, 0), (3, 20, 13), (6, 26, 20), (7, 20, 27), (10, 20, 20), (13, 20, 20), (2, 18, 22), (6, 14, 25), (12, 19, 21)];
    for (z, y, x) in picks {
        let p = [(x as f64 + 0.5) * cell, (y as f64 + 0.5) * cell, (z as f64 + 0.5) * cell];
        let d = ((p[0] - 0.15).powi(2) + (p[1] - 0.15).powi(2) + (p[2] - 0.05).powi(2)).sqrt() - 0.05;
        assert!((t.at(z, y, x) - (d / trunc).clamp(-1.0, 1.0)).abs() < 1e-12, "voxel {z} {y} {x}");
    }

    // unit-yaw box with faces on voxel boundaries; voxel just beyond the +x face
    let bx = scene_of(vec![upright(Shape::Box { size: [0.06, 0.03, 0.045] }, 0.15, 0.15, 0.0)]);
    let t = tsdf_from_scene(&bx, s, Noise::None).unwrap();
    // +x face at 0.18 = 24 cells, voxel x = 24 centre at 0.18375; z = 2 centre 0.01875 inside the height
    assert!((t.at(2, 20, 24) - 0.00375 / trunc).abs() < 1e-12);
    // corner-adjacent voxel: distance to the edge (x = 0.18, y = 0.165)
    let d = (0.00375f64.powi(2) + (0.16875f64 - 0.165).powi(2)).sqrt();
    assert!((t.at(2, 22, 24) - d / trunc).abs() < 1e-12);
    // inside: nearest face is top at 0.045, voxel z = 4 centre 0.03375
    assert!((t.at(4, 20, 20) - (-(0.045 - 0.03375)) / trunc).abs() < 1e-12);

    let noisy = tsdf_from_scene(&sphere, 16, Noise::Gaussian(0.1)).unwrap();
    let clean = tsdf_from_scene(&sphere, 16, Noise::None).unwrap();
    assert_ne!(noisy, clean);
    assert!(noisy.values.iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_eq!(noisy, tsdf_from_scene(&sphere, 16, Noise::Gaussian(0.1)).unwrap());
    assert_eq!("gaussian:0.02".parse::<Noise>().unwrap(), Noise::Gaussian(0.02));
    assert!("gauss".parse::<Noise>().is_err());
}

#[test]
fn rotated_scene_matches_rotated_grid() {
    for seed in 0..4 {
        let scene = synth_scene(seed, SceneKind::PileLike, 3).unwrap();
        let base = tsdf_from_scene(&scene, 24, Noise::None).unwrap();
        assert_eq!(rotate_scene(&scene, C4.identity()), scene);
        for g in C4.elements() {
            let analytic = tsdf_from_scene(&rotate_scene(&scene, g), 24, Noise::None).unwrap();
            let grid = base.rotate(g).unwrap();
            let err = analytic.values.iter().zip(&grid.values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err <= 1e-12, "{g}: {err}");
        }
        let mut four = scene.clone();
        let mut vol = base.clone();
        for _ in 0..4 {
            four = rotate_scene(&four, C4.element(1));
            vol = vol.rotate(C4.element(1)).unwrap();
        }
        assert_eq!(vol, base);
        for (a, b) in four.primitives.iter().zip(&scene.primitives) {
            assert!((0..3).all(|k| (a.position[k] - b.position[k]).abs() < 1e-12));
        }
    }
}

#[test]
fn antipodal_examples() {
    let gripper = GripperConfig::default();
    let bx = scene_of(vec![upright(Shape::Box { size: [0.04, 0.04, 0.06] }, 0.15, 0.15, 0.0)]);
    let side = grasp_rotation(Vector3::x(), Vector3::y());
    let o = evaluate_grasp(&bx, &gripper, [0.15, 0.15, 0.03], &side);
    assert!(o.success && o.object == Some(0));
    assert!((o.width - 0.04).abs() < 1e-12);
    // from above, the palm sits 0.05 behind a centre 0.03 below the top
    let top = grasp_rotation(Vector3::x(), -Vector3::z());
    assert!(evaluate_grasp(&bx, &gripper, [0.15, 0.15, 0.03], &top).success);
    // from below, through the table
    let below = grasp_rotation(Vector3::x(), Vector3::z());
    assert!(!evaluate_grasp(&bx, &gripper, [0.15, 0.15, 0.03], &below).success);
    // closing axis tilted 5° passes the 10° friction cone, 15° does not
    for (deg, ok) in [(5.0f64, true), (15.0, false)] {
        let t = deg.to_radians();
        let r = grasp_rotation(Vector3::new(t.cos(), t.sin(), 0.0), -Vector3::z());
        assert_eq!(evaluate_grasp(&bx, &gripper, [0.15, 0.15, 0.03], &r).success, ok, "{deg}°");
    }
    // too wide: 0.076 + 0.005 clearance > 0.08
    let wide = scene_of(vec![upright(Shape::Box { size: [0.076, 0.04, 0.06] }, 0.15, 0.15, 0.0)]);
    assert!(!evaluate_grasp(&wide, &gripper, [0.15, 0.15, 0.03], &side).success);
    // nothing between the fingers
    assert_eq!(evaluate_grasp(&bx, &gripper, [0.05, 0.05, 0.03], &side).object, None);

    let sphere = scene_of(vec![upright(Shape::Sphere { radius: 0.06 }, 0.15, 0.15, 0.0)]);
    let labels = analytic_grasp_labels(&sphere, &gripper, 8);
    assert_eq!(labels.len(), 8 * 12);
    assert!(labels.iter().all(|l| !l.success));
    assert!(!graspness_at(&sphere, &gripper, [0.15, 0.15, 0.06]));

    let small = scene_of(vec![upright(Shape::Sphere { radius: 0.02 }, 0.15, 0.15, 0.0)]);
    assert!(analytic_grasp_labels(&small, &gripper, 4).iter().any(|l| l.success));

    // a neighbour inside the finger sweep blocks the side grasp
    let crowded = scene_of(vec![
        upright(Shape::Box { size: [0.04, 0.04, 0.06] }, 0.15, 0.15, 0.0),
        upright(Shape::Box { size: [0.02, 0.02, 0.06] }, 0.15, 0.10, 0.0),
    ]);
    assert!(!evaluate_grasp(&crowded, &gripper, [0.15, 0.15, 0.03], &side).success);
    assert!(evaluate_grasp(&crowded, &gripper, [0.15, 0.15, 0.03], &grasp_rotation(Vector3::x(), -Vector3::y())).success);
    // two objects between the fingers
    let pair = scene_of(vec![
        upright(Shape::Box { size: [0.02, 0.02, 0.06] }, 0.135, 0.15, 0.0),
        upright(Shape::Box { size: [0.02, 0.02, 0.06] }, 0.165, 0.15, 0.0),
    ]);
    assert_eq!(evaluate_grasp(&pair, &gripper, [0.15, 0.15, 0.03], &side).object, None);
}

#[test]
fn labels_rotate_with_the_scene() {
    let gripper = GripperConfig::default();
    for seed in 0..3 {
        let scene = synth_scene(seed, SceneKind::PileLike, 3).unwrap();
        let labels = analytic_grasp_labels(&scene, &gripper, 3);
        assert!(labels.iter().any(|l| l.success));
        for g in C4.elements() {
            let rotated = analytic_grasp_labels(&rotate_scene(&scene, g), &gripper, 3);
            let expected = rotate_labels(&labels, g, WORKSPACE);
            assert_eq!(rotated.len(), expected.len());
            for (a, b) in rotated.iter().zip(&expected) {
                assert_eq!(a.success, b.success);
                assert!((0..3).all(|k| (a.position[k] - b.position[k]).abs() < 1e-9));
                assert!(geodesic_angle(&a.matrix(), &b.matrix()) < 1e-6);
            }
        }
    }
}

#[test]
fn occupancy_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let empty = occupancy_samples(&SceneSpec::empty(0), 500, 40, &mut rng);
    assert!(empty.iter().all(|s| !s.occupied && !s.near_surface));

    let scene = synth_scene(5, SceneKind::PackedLike, 4).unwrap();
    for p in &scene.primitives {
        assert!(scene.sdf(Vector3::from(p.position)) < 0.0);
    }
    let samples = occupancy_samples(&scene, 100_000, 40, &mut rng);
    let uniform = samples.iter().filter(|s| !s.near_surface).count() as f64 / samples.len() as f64;
    assert!((uniform - 0.70).abs() <= 0.02, "{uniform}");
    let band = WORKSPACE / 40.0;
    for s in samples.iter().filter(|s| s.near_surface) {
        assert!(scene.sdf(Vector3::from(s.point)).abs() <= band);
    }
    assert!(samples.iter().any(|s| s.occupied));

    // outside the truncation band the TSDF sign agrees with the analytic label
    let t = tsdf_from_scene(&scene, 40, Noise::None).unwrap();
    let geo = t.geometry();
    for z in 0..40 {
        for y in 0..40 {
            for x in 0..40 {
                let v = t.at(z, y, x);
                if v.abs() == 1.0 {
                    assert_eq!(v < 0.0, scene.sdf(Vector3::from(geo.voxel_center(z, y, x))) < 0.0);
                }
            }
        }
    }
}

fn small_config(scenes: usize) -> GenerateConfig {
    GenerateConfig {
        scenes,
        grid: 16,
        occupancy_samples: 64,
        graspness_samples: 32,
        samples_per_object: 2,
        max_objects: 2,
        seed: 9,
        ..GenerateConfig::default()
    }
}

#[test]
fn dataset_generation_resume_and_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(2);
    let report = generate_dataset(dir.path(), &cfg, false).unwrap();
    assert_eq!(report.written, vec![0, 1]);
    let files: Vec<_> = std::fs::read_dir(dir.path().join("scenes")).unwrap().collect();
    assert_eq!(files.len(), 2);
    let ds = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.len(), files.len());
    let first: Vec<Vec<u8>> = (0..2).map(|i| std::fs::read(dir.path().join(&ds.index.files[i])).unwrap()).collect();

    let again = tempfile::tempdir().unwrap();
    generate_dataset(again.path(), &GenerateConfig { workers: 1, ..cfg.clone() }, false).unwrap();
    for (i, bytes) in first.iter().enumerate() {
        assert_eq!(&std::fs::read(again.path().join(&ds.index.files[i])).unwrap(), bytes);
    }

    std::fs::remove_file(dir.path().join("index.json")).unwrap();
    std::fs::remove_file(dir.path().join(&ds.index.files[1])).unwrap();
    assert!(Dataset::open(dir.path()).is_err());
    let report = generate_dataset(dir.path(), &cfg, true).unwrap();
    assert_eq!(report.written, vec![1]);
    assert_eq!(report.skipped, vec![0]);
    assert_eq!(std::fs::read(dir.path().join(&ds.index.files[1])).unwrap(), first[1]);

    let rec = ds.record(0).unwrap();
    let bytes = encode_record(&rec).unwrap();
    assert_eq!(decode_record(&bytes).unwrap(), rec);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_record(&bad).is_err());
    assert!(decode_record(&bytes[..bytes.len() - 3]).is_err());
    assert!(ds.record(5).is_err());
}

#[test]
fn batch_from_record_is_consistent() {
    let cfg = GenerateConfig { grid: 16, samples_per_object: 4, ..GenerateConfig::default() };
    let spec = scene_of(vec![upright(Shape::Box { size: [0.04, 0.04, 0.06] }, 0.15, 0.15, 0.4)]);
    let rec = SceneRecord::from_spec(&cfg, spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let limits = BatchLimits { graspness: 64, grasps: 16, occupancy: 32 };
    let b = batch_from_record(&rec, &limits, &mut rng);
    b.validate().unwrap();
    assert_eq!(b.positions.len(), 64);
    assert_eq!(b.grasp_points.len(), 16);
    assert_eq!(b.occupancy_points.len(), 32);
    assert_eq!(b.positives().len(), 8);
    assert!(b.graspness.iter().any(|&v| v == 1.0) && b.graspness.iter().any(|&v| v == 0.0));
    for (p, r) in b.grasp_points.iter().zip(&b.grasp_rotations) {
        let l = rec.labels.iter().find(|l| l.position == *p && geodesic_angle(&l.matrix(), r) < 1e-6);
        assert!(l.is_some());
    }
}

fn arb_primitive() -> impl Strategy<Value = Primitive> {
    (0..3usize, 0.01..0.05f64, 0.01..0.05f64, 0.02..0.08f64, 0.0..6.3f64, any::<bool>(), 0.05..0.25f64, 0.05..0.25f64)
        .prop_map(|(k, a, b, h, yaw, lying, x, y)| {
            let shape = match k {
                0 => Shape::Box { size: [2.0 * a, 2.0 * b, h] },
                1 => Shape::Cylinder { radius: a, height: h },
                _ => Shape::Sphere { radius: a },
            };
            let mut p = Primitive { shape, position: [x, y, 0.0], yaw, lying };
            p.position[2] = p.height() / 2.0;
            p
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn sdf_commutes_with_quarter_turns(p in arb_primitive(), q in prop::array::uniform3(0.0..0.3f64), k in 0..4usize) {
        let g: GroupElement = C4.element(k);
        let scene = scene_of(vec![p]);
        let rot = rotate_scene(&scene, g);
        let v = g.rotate_xy([q[0] - 0.15, q[1] - 0.15]);
        let moved = Vector3::new(v[0] + 0.15, v[1] + 0.15, q[2]);
        prop_assert!((scene.sdf(Vector3::from(q)) - rot.sdf(moved)).abs() < 1e-12);
    }

    #[test]
    fn chord_endpoints_lie_on_the_surface(p in arb_primitive(), d in prop::array::uniform3(-1.0..1.0f64)) {
        let dir = Vector3::from(d);
        prop_assume!(dir.norm() > 0.1);
        let dir = dir.normalize();
        let origin = Vector3::from(p.position);
        let c = p.chord(origin, dir).expect("line through the centre");
        prop_assert!(c.enter < 0.0 && c.exit > 0.0);
        for (s, n) in [(c.enter, c.enter_normal), (c.exit, c.exit_normal)] {
            let q = origin + s * dir;
            prop_assert!(p.sdf(q).abs() < 1e-9);
            prop_assert!((n.norm() - 1.0).abs() < 1e-9);
            prop_assert!(p.sdf(q + 1e-6 * n) > 0.0);
        }
    }
}
