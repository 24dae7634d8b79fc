mod common;

use common::{grad_check, rng};
use equigrasp_core::grasp::rotation::{
    geodesic_angle, matrix_from_quaternion, GRAM_RIDGE, matrix_from_six_d, orthonormal_rows, quaternion_from_matrix, quaternion_loss,
    rotation_loss, six_d_from_matrix, six_d_spec, vertical_rotation,
};
use equigrasp_core::grasp::{flow_pair, points_tensor, DecoderConfig, GraspBatch, GraspModel, LossTerms, ModelKind};
use equigrasp_core::group::{CyclicGroup, FeatureField, GridGeometry, GroupElement, RepresentationSpec};
use equigrasp_core::steerable::TypedVar;
use equigrasp_core::tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use equigrasp_core::triplane::EncoderConfig;
use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const C4: CyclicGroup = CyclicGroup::C4;

fn random_rotation(r: &mut ChaCha8Rng) -> Matrix3<f64> {
    let axis = Vector3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
    *Rotation3::from_scaled_axis(axis.normalize() * r.gen_range(0.0..3.1)).matrix()
}

fn value<T: Scalar>(g: &Graph<T>, v: Var) -> Tensor<T> {
    (*g.value(v)).clone()
}

#[test]
fn six_d_roundtrip_and_orthonormality() {
    let mut r = rng(1);
    for _ in 0..100 {
        let m = random_rotation(&mut r);
        let back = matrix_from_six_d(&six_d_from_matrix(&m)).unwrap();
        assert!((back - m).amax() < 1e-12);
        let v: Vec<f64> = (0..6).map(|_| r.gen_range(-2.0..2.0)).collect();
        let o = matrix_from_six_d(&v).unwrap();
        assert!((o.transpose() * o - Matrix3::identity()).amax() < 1e-6);
        assert!((o.determinant() - 1.0).abs() < 1e-6);
        // commutes with the vertical rotations acting as ρ₁³
        for e in C4.elements() {
            let rv = six_d_spec(C4).apply(e, &v, 1).unwrap();
            let lhs = matrix_from_six_d(&rv).unwrap();
            assert!((lhs - vertical_rotation(e) * o).amax() < 1e-12);
            assert!((six_d_from_matrix(&(vertical_rotation(e) * m))
                .iter()
                .zip(six_d_spec(C4).apply(e, &six_d_from_matrix(&m), 1).unwrap())
                .fold(0.0f64, |a, (x, y)| a.max((x - y).abs())))
                < 1e-12);
        }
    }
    assert!(matrix_from_six_d(&[0.0; 6]).is_err());
    assert!(matrix_from_six_d(&[1.0, 2.0, 0.0, 0.0, 0.0, 0.0]).is_err());
}

#[test]
fn rotation_loss_matches_quaternion_oracle() {
    let id = Matrix3::identity();
    let qz = matrix_from_quaternion([(std::f64::consts::FRAC_PI_4).cos(), 0.0, 0.0, (std::f64::consts::FRAC_PI_4).sin()]);
    let q = quaternion_from_matrix(&id);
    assert_eq!(quaternion_loss(q, q), -1.0);
    assert_eq!(quaternion_loss(q, [-q[0], -q[1], -q[2], -q[3]]), -1.0);
    let l90 = quaternion_loss(q, quaternion_from_matrix(&qz));
    assert!((l90 + 0.5f64.sqrt()).abs() < 1e-12);
    let mut r = rng(2);
    for _ in 0..20 {
        let a = random_rotation(&mut r);
        let b = random_rotation(&mut r);
        let g = Graph::<f64>::inference();
        let pred = g.constant(Tensor::from_f64(vec![1, 6], &six_d_from_matrix(&a)).unwrap());
        let l = value(&g, rotation_loss(&g, pred, &[b]).unwrap()).item();
        let want = quaternion_loss(quaternion_from_matrix(&a), quaternion_from_matrix(&b));
        // compared on squares, which are linear in the trace
        assert!((l * l - want * want).abs() < GRAM_RIDGE, "{l} vs {want}");
    }
    // graph orthonormalisation equals the closed form
    let v: Vec<f64> = (0..12).map(|_| r.gen_range(-1.0..1.0)).collect();
    let g = Graph::<f64>::inference();
    let rows = orthonormal_rows(&g, g.constant(Tensor::from_f64(vec![2, 6], &v).unwrap())).unwrap();
    for n in 0..2 {
        let m = matrix_from_six_d(&v[6 * n..6 * n + 6]).unwrap();
        for (k, row) in rows.iter().enumerate() {
            for j in 0..3 {
                assert!((value(&g, *row).at(&[n, j]) - m[(k, j)]).abs() < 1e-12);
            }
        }
    }
    // the strict map rejects a zero encoding; the loss stays finite on it
    let degenerate = g.constant(Tensor::zeros(&[1, 6]));
    assert!(orthonormal_rows(&g, degenerate).is_err());
    let l = value(&g, rotation_loss(&g, degenerate, &[id]).unwrap()).item();
    assert!((l + 0.5).abs() < 1e-12, "{l}");
}

#[test]
fn rotation_loss_gradient() {
    let mut r = rng(3);
    let targets: Vec<Matrix3<f64>> = (0..4).map(|_| random_rotation(&mut r)).collect();
    let x = Tensor::uniform(&[4, 6], -1.0, 1.0, &mut r);
    let err = grad_check(|g, v| rotation_loss(g, v[0], &targets).unwrap(), vec![x]);
    assert!(err <= 1e-6, "{err}");
}

fn strict_encoder() -> EncoderConfig {
    EncoderConfig { grid: 8, ..EncoderConfig::strict() }
}

fn model<T: Scalar>(kind: ModelKind, seed: u64) -> (GraspModel, ParamStore<T>) {
    let mut store = ParamStore::new();
    let decoder = DecoderConfig { hidden_blocks: 4, eda_offsets: 4, control_points: 4, ..DecoderConfig::default() };
    let m = GraspModel::new(&mut store, kind, &strict_encoder(), &decoder, &mut rng(seed)).unwrap();
    // nonzero offsets and biases
    let mut r = rng(seed + 100);
    for p in store.iter_mut() {
        if p.name.starts_with("eda.offset") || p.name.contains(".offset") || p.name.ends_with("bias") {
            p.value = Tensor::uniform(p.value.shape(), -0.3, 0.3, &mut r);
        }
    }
    (m, store)
}

fn rotate_points(geo: &GridGeometry, e: GroupElement, pts: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let c = geo.center();
    pts.iter()
        .map(|p| {
            let v = e.rotate_xy([p[0] - c[0], p[1] - c[1]]);
            [v[0] + c[0], v[1] + c[1], p[2]]
        })
        .collect()
}

/// Rows of `[N, C]` acted on by `ρ(g)`.
fn act_rows<T: Scalar>(spec: &RepresentationSpec, e: GroupElement, t: &Tensor<T>) -> Tensor<T> {
    let n = t.shape()[0];
    let v = spec.apply(e, t.permuted(&[1, 0]).data(), n).unwrap();
    Tensor::new(vec![spec.dim(), n], v).unwrap().permuted(&[1, 0])
}

struct Scene<T: Scalar> {
    geo: GridGeometry,
    tsdf: FeatureField<T>,
    points: Vec<[f64; 3]>,
    rots: Vec<Matrix3<f64>>,
}

fn scene<T: Scalar>(seed: u64) -> Scene<T> {
    let n = 8;
    let mut r = rng(seed);
    let tsdf = FeatureField::new(Tensor::uniform(&[1, n, n, n], -1.0, 1.0, &mut r), RepresentationSpec::trivial(C4, 1)).unwrap();
    let points = (0..6).map(|_| [r.gen_range(0.03..0.27), r.gen_range(0.03..0.27), r.gen_range(0.03..0.27)]).collect();
    let rots = (0..6).map(|_| random_rotation(&mut r)).collect();
    Scene { geo: GridGeometry::cube(n, 0.3), tsdf, points, rots }
}

/// Every head output of a scene: (graspness, occupancy, rotation or velocity, classifier, refined features).
fn heads<T: Scalar>(m: &GraspModel, store: &ParamStore<T>, tsdf: &Tensor<T>, s: &Scene<T>, points: &[[f64; 3]], rots: &[Matrix3<f64>], r6: &Tensor<T>) -> Vec<Tensor<T>> {
    let g = Graph::inference();
    let tri = m.encode(&g, store, g.constant(tsdf.clone()), s.geo.clone()).unwrap();
    let p = g.constant(points_tensor(points));
    let c = m.grasp_features(&g, store, &tri, p).unwrap();
    let raw = m.raw_features(&g, &tri, p).unwrap();
    let mut out = vec![
        value(&g, m.graspness(&g, store, &c).unwrap()),
        value(&g, m.occupancy(&g, store, &raw).unwrap()),
        value(&g, c.var),
    ];
    match m.kind {
        ModelKind::EquiGiga => out.push(value(&g, m.rotation(&g, store, &c).unwrap())),
        ModelKind::EquiIgd => {
            let t: Vec<f64> = (0..points.len()).map(|i| i as f64 / points.len() as f64).collect();
            out.push(value(&g, m.flow().unwrap().velocity(&g, store, g.constant(r6.clone()), &c, &t).unwrap()));
            out.push(value(&g, m.classify(&g, store, &tri, p, rots, &c).unwrap()));
        }
    }
    out
}

fn head_residual<T: Scalar>(kind: ModelKind, seed: u64) -> f64 {
    let (m, store) = model::<T>(kind, seed);
    let s = scene::<T>(seed);
    let n = s.points.len();
    let r6 = Tensor::<T>::randn(&[n, 6], &mut rng(seed + 7));
    let base = heads(&m, &store, &s.tsdf.tensor, &s, &s.points, &s.rots, &r6);
    let mut worst: f64 = 0.0;
    for e in C4.elements() {
        let rots: Vec<Matrix3<f64>> = s.rots.iter().map(|r| vertical_rotation(e) * r).collect();
        let r6r = act_rows(&six_d_spec(C4), e, &r6);
        let out = heads(&m, &store, &s.tsdf.act(e).unwrap().tensor, &s, &rotate_points(&s.geo, e, &s.points), &rots, &r6r);
        // invariant scalars
        worst = worst.max(out[0].max_abs_diff(&base[0])).max(out[1].max_abs_diff(&base[1]));
        worst = worst.max(out[2].max_abs_diff(&act_rows(&m.feature_spec, e, &base[2])));
        worst = worst.max(out[3].max_abs_diff(&act_rows(&six_d_spec(C4), e, &base[3])));
        if kind == ModelKind::EquiIgd {
            worst = worst.max(out[4].max_abs_diff(&base[4]));
        }
    }
    worst
}

#[test]
fn heads_are_invariant_or_equivariant() {
    for kind in [ModelKind::EquiGiga, ModelKind::EquiIgd] {
        for seed in 0..3 {
            let e32 = head_residual::<f32>(kind, seed);
            assert!(e32 <= 1e-4, "{kind:?} f32 residual {e32}");
        }
        let e64 = head_residual::<f64>(kind, 11);
        assert!(e64 <= 1e-10, "{kind:?} f64 residual {e64}");
    }
}

#[test]
fn zero_heads_give_half_probabilities() {
    let (m, mut store) = model::<f64>(ModelKind::EquiGiga, 4);
    for p in store.iter_mut() {
        if p.name.starts_with("head.") {
            p.value = p.value.map(|_| 0.0);
        }
    }
    let s = scene::<f64>(4);
    let out = heads(&m, &store, &s.tsdf.tensor, &s, &s.points, &s.rots, &Tensor::zeros(&[6, 6]));
    assert!(out[0].data().iter().chain(out[1].data()).all(|&v| v == 0.5));
    assert_eq!(out[3].max_abs(), 0.0);
    assert!(matrix_from_six_d(&out[3].data()[..6]).is_err());
}

#[test]
fn eda_with_zero_offsets_mixes_channels_only() {
    let mut store = ParamStore::<f64>::new();
    let decoder = DecoderConfig { eda_offsets: 1, ..DecoderConfig::default() };
    let m = GraspModel::new(&mut store, ModelKind::EquiGiga, &strict_encoder(), &decoder, &mut rng(5)).unwrap();
    let s = scene::<f64>(5);
    let g = Graph::inference();
    let tri = m.encode(&g, &store, g.constant(s.tsdf.tensor.clone()), s.geo.clone()).unwrap();
    let p = g.constant(points_tensor(&s.points));
    let c = m.raw_features(&g, &tri, p).unwrap();
    let eda = m.eda().unwrap();
    assert_eq!(value(&g, eda.offsets(&g, &store, &c).unwrap()).max_abs(), 0.0);
    // K = 1: the single softmax weight is 1 and c̃ = h_out(h_in(c(p))) + c(p)
    let refined = value(&g, eda.forward(&g, &store, &tri, p, &c).unwrap().var);
    let h = eda.h_in().forward(&g, &store, &c).unwrap();
    let h = eda.h_out().forward(&g, &store, &h).unwrap();
    let manual = value(&g, g.add(h.var, c.var));
    assert!(refined.max_abs_diff(&manual) <= 1e-12);
}

#[test]
fn eda_reads_features_at_displaced_points() {
    let mut store = ParamStore::<f64>::new();
    let decoder = DecoderConfig { eda_offsets: 1, ..DecoderConfig::default() };
    let m = GraspModel::new(&mut store, ModelKind::EquiGiga, &strict_encoder(), &decoder, &mut rng(6)).unwrap();
    let mut r = rng(7);
    for id in m.eda().unwrap().offset_params() {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::uniform(&shape, -0.5, 0.5, &mut r);
    }
    let s = scene::<f64>(6);
    let g = Graph::inference();
    let tri = m.encode(&g, &store, g.constant(s.tsdf.tensor.clone()), s.geo.clone()).unwrap();
    let p = g.constant(points_tensor(&s.points));
    let c = m.raw_features(&g, &tri, p).unwrap();
    let eda = m.eda().unwrap();
    let delta = eda.offsets(&g, &store, &c).unwrap();
    assert!(value(&g, delta).max_abs() > 0.0);
    let d3 = g.reshape(delta, &[s.points.len(), 3]);
    let moved = g.add(p, d3);
    let cm = m.raw_features(&g, &tri, moved).unwrap();
    let h = eda.h_in().forward(&g, &store, &cm).unwrap();
    let h = eda.h_out().forward(&g, &store, &h).unwrap();
    let manual = value(&g, g.add(h.var, c.var));
    let refined = value(&g, eda.forward(&g, &store, &tri, p, &c).unwrap().var);
    assert!(refined.max_abs_diff(&manual) <= 1e-12);
}

#[test]
fn flow_endpoints_and_zero_field() {
    let r0 = [0.1, -0.2, 0.3, 0.4, -0.5, 0.6];
    let r1 = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
    let (rt, u) = flow_pair(&r0, &r1, 1.0);
    assert_eq!(rt, r1);
    assert_eq!(u, [0.0; 6]);
    let (rt, u) = flow_pair(&r0, &r1, 0.0);
    assert_eq!(rt, r0);
    for i in 0..6 {
        assert!((u[i] - (r1[i] - r0[i])).abs() < 1e-15);
    }
    let (m, mut store) = model::<f64>(ModelKind::EquiIgd, 8);
    for id in m.flow().unwrap().params() {
        let v = store.value_mut(id);
        *v = Tensor::zeros(v.shape());
    }
    let feats = Tensor::randn(&[3, m.feature_spec.dim()], &mut rng(9));
    let init = Tensor::randn(&[3, 6], &mut rng(10));
    let out = m.flow().unwrap().sample(&store, &feats, &m.feature_spec, init.clone(), 20).unwrap();
    assert_eq!(out, init);
}

#[test]
fn flow_velocity_gradient() {
    let (m, store) = model::<f64>(ModelKind::EquiIgd, 12);
    let d = m.feature_spec.dim();
    let mut r = rng(13);
    let inputs = vec![Tensor::randn(&[3, 6], &mut r), Tensor::randn(&[3, d], &mut r)];
    let spec = m.feature_spec.clone();
    let err = grad_check(
        |g, v| m.flow().unwrap().velocity(g, &store, v[0], &TypedVar::new(v[1], spec.clone()), &[0.1, 0.5, 0.9]).unwrap(),
        inputs,
    );
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn graspdam_control_points_and_single_token() {
    let mut store = ParamStore::<f64>::new();
    let decoder = DecoderConfig { control_points: 1, ..DecoderConfig::default() };
    let m = GraspModel::new(&mut store, ModelKind::EquiIgd, &strict_encoder(), &decoder, &mut rng(14)).unwrap();
    let dam = m.dam().unwrap();
    let s = scene::<f64>(14);
    let g = Graph::inference();
    let centers = g.constant(points_tensor(&s.points));
    let id = vec![Matrix3::identity(); s.points.len()];
    let pts = value(&g, dam.control_points(&g, &store, centers, &id).unwrap());
    let u = store.value(dam.control_param()).clone();
    for (n, p) in s.points.iter().enumerate() {
        for k in 0..3 {
            assert!((pts.at(&[n, 0, k]) - (p[k] + u.at(&[0, k]))).abs() < 1e-15);
        }
    }
    // control point at the gripper origin: a single token read at p
    *store.value_mut(dam.control_param()) = Tensor::zeros(&[1, 3]);
    let g = Graph::inference();
    let centers = g.constant(points_tensor(&s.points));
    let tri = m.encode(&g, &store, g.constant(s.tsdf.tensor.clone()), s.geo.clone()).unwrap();
    let c = m.raw_features(&g, &tri, centers).unwrap();
    let bar = value(&g, dam.forward(&g, &store, &tri, centers, &s.rots, &c).unwrap().var);
    // with one token the attention weight is 1, so c̄ = h_out(h_v(c(p))) + c(p)
    let other = value(&g, dam.forward(&g, &store, &tri, centers, &id, &c).unwrap().var);
    assert!(bar.max_abs_diff(&other) <= 1e-12);
    let v = dam.h_v().forward(&g, &store, &c).unwrap();
    let v = dam.h_out().forward(&g, &store, &v).unwrap();
    assert!(bar.max_abs_diff(&value(&g, g.add(v.var, c.var))) <= 1e-12);
}

#[test]
fn composite_loss_accounting() {
    let a = LossTerms::composite(ModelKind::EquiGiga, -0.9, 0.4, 0.3, 0.2, 0.1);
    let b = LossTerms::composite(ModelKind::EquiIgd, -0.9, 0.4, 0.3, 0.2, 0.1);
    assert!((a.total - (-0.9 + 0.3 + 0.1)).abs() < 1e-15);
    assert!(((b.total - a.total) - ((0.4 + 0.2) - (-0.9))).abs() < 1e-12);
    // a two-sample scene: the total equals the sum of its terms
    let s = scene::<f64>(15);
    let batch = GraspBatch {
        positions: s.points[..2].to_vec(),
        graspness: vec![1.0, 0.0],
        grasp_points: s.points[..2].to_vec(),
        grasp_rotations: s.rots[..2].to_vec(),
        grasp_success: vec![1.0, 0.0],
        occupancy_points: s.points[2..4].to_vec(),
        occupancy: vec![0.0, 1.0],
    };
    for kind in [ModelKind::EquiGiga, ModelKind::EquiIgd] {
        let (m, store) = model::<f64>(kind, 16);
        let g = Graph::new();
        let (total, terms) = m.loss(&g, &store, &s.tsdf.tensor, &s.geo, &batch, &mut rng(17)).unwrap();
        let t = value(&g, total).item();
        assert!((t - terms.total).abs() < 1e-12);
        let parts = match kind {
            ModelKind::EquiGiga => terms.rot + terms.graspness + terms.occ,
            ModelKind::EquiIgd => terms.flow + terms.graspness + terms.grasp + terms.occ,
        };
        assert!((t - parts).abs() < 1e-12);
        // hand evaluation of the graspness term
        let g2 = Graph::inference();
        let tri = m.encode(&g2, &store, g2.constant(s.tsdf.tensor.clone()), s.geo.clone()).unwrap();
        let c = m.grasp_features(&g2, &store, &tri, g2.constant(points_tensor(&batch.positions))).unwrap();
        let a = value(&g2, m.graspness(&g2, &store, &c).unwrap());
        let want = -(a.data()[0].ln() + (1.0 - a.data()[1]).ln()) / 2.0;
        assert!((terms.graspness - want).abs() < 1e-9);
        let grads = g.backward(total).unwrap();
        assert!(grads.param_grads(&store).count() > 10);
    }
    let mut bad = batch.clone();
    bad.graspness.pop();
    let (m, store) = model::<f64>(ModelKind::EquiGiga, 16);
    assert!(m.loss(&Graph::new(), &store, &s.tsdf.tensor, &s.geo, &bad, &mut rng(0)).is_err());
}

#[test]
fn focal_loss_symmetric_at_half() {
    let g = Graph::<f64>::inference();
    let p = g.constant(Tensor::from_f64(vec![2], &[0.5, 0.5]).unwrap());
    let l = value(&g, g.focal_loss(p, &[1.0, 0.0], 2.0).unwrap()).item();
    assert!((l - 0.25 * 2f64.ln()).abs() < 1e-12);
    assert_eq!(geodesic_angle(&Matrix3::identity(), &Matrix3::identity()), 0.0);
}
