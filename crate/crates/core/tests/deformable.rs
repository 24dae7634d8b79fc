mod common;

use common::{grad_check, rng};
use equigrasp_core::deformable::{sampled_conv, DeformableConv2d, DeformableSteerableConv, OFFSET_BOUND};
use equigrasp_core::group::{Block, CyclicGroup, FeatureField, RepresentationSpec};
use equigrasp_core::steerable::TypedVar;
use equigrasp_core::tensor::{Graph, ParamStore, Scalar, Tensor, Var};

const C4: CyclicGroup = CyclicGroup::C4;
const C8: CyclicGroup = CyclicGroup::C8;

fn randomize_predictor<T: Scalar>(layer: &DeformableSteerableConv, store: &mut ParamStore<T>, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for id in layer.predictor_params() {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::uniform(&shape, -scale, scale, &mut r);
    }
}

fn field<T: Scalar>(spec: &RepresentationSpec, n: usize, seed: u64) -> FeatureField<T> {
    FeatureField::new(Tensor::randn(&[spec.dim(), n, n], &mut rng(seed)), spec.clone()).unwrap()
}

fn eval<T: Scalar>(g: &Graph<T>, v: Var) -> Tensor<T> {
    (*g.value(v)).clone()
}

fn constant_bd<T: Scalar>(g: &Graph<T>, layer: &DeformableSteerableConv, n: usize, b: [f64; 2], d: &[f64]) -> (Var, Var) {
    let mut bt = Tensor::zeros(&[2, n, n]);
    let mut dt = Tensor::zeros(&[layer.figures.count, n, n]);
    for i in 0..n {
        for j in 0..n {
            bt.set(&[0, i, j], T::of(b[0]));
            bt.set(&[1, i, j], T::of(b[1]));
            for (f, &v) in d.iter().enumerate() {
                dt.set(&[f, i, j], T::of(v));
            }
        }
    }
    (g.constant(bt), g.constant(dt))
}

#[test]
fn zero_offset_unit_dilation_matches_steerable_conv() {
    let si = RepresentationSpec::mixed(C4, 1, 1, 1);
    let so = RepresentationSpec::mixed(C4, 2, 1, 1);
    for size in [3, 5] {
        let mut store = ParamStore::<f64>::new();
        let layer = DeformableSteerableConv::new(&mut store, "d", &si, &so, size, &mut rng(size as u64)).unwrap();
        let x = field::<f64>(&si, 9, 1);
        let g = Graph::inference();
        let tx = TypedVar::new(g.constant(x.tensor.clone()), si.clone());
        let plain = eval(&g, layer.forward_plain(&g, &store, &tx).unwrap().var);
        let (b, d) = constant_bd(&g, &layer, 9, [0.0, 0.0], &vec![1.0; layer.figures.count]);
        let given = eval(&g, layer.forward_with(&g, &store, &tx, b, d).unwrap().var);
        assert!(given.max_abs_diff(&plain) <= 1e-10);
        // the freshly initialised predictor yields b = 0, d = 1
        let fresh = eval(&g, layer.forward(&g, &store, &tx).unwrap().var);
        assert!(fresh.max_abs_diff(&plain) <= 1e-10);
    }
}

#[test]
fn integer_offset_shifts_the_output() {
    let t = RepresentationSpec::trivial(C4, 2);
    let mut store = ParamStore::<f64>::new();
    let layer = DeformableSteerableConv::new(&mut store, "d", &t, &t, 3, &mut rng(3)).unwrap();
    let n = 8;
    let x = field::<f64>(&t, n, 4);
    let g = Graph::inference();
    let tx = TypedVar::new(g.constant(x.tensor.clone()), t.clone());
    let plain = eval(&g, layer.forward_plain(&g, &store, &tx).unwrap().var);
    // b = (x, y) = (1, -1): read one column right and one row up
    let (b, d) = constant_bd(&g, &layer, n, [1.0, -1.0], &[1.0, 1.0]);
    let y = eval(&g, layer.forward_with(&g, &store, &tx, b, d).unwrap().var);
    for c in 0..2 {
        for i in 1..n {
            for j in 0..n - 1 {
                assert!((y.at(&[c, i, j]) - plain.at(&[c, i - 1, j + 1])).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn fractional_offset_on_a_ramp() {
    let t = RepresentationSpec::trivial(C4, 1);
    let mut store = ParamStore::<f64>::new();
    let layer = DeformableSteerableConv::new(&mut store, "d", &t, &t, 3, &mut rng(5)).unwrap();
    let n = 10;
    let ramp = Tensor::from_f64(vec![1, n, n], &(0..n * n).map(|k| 0.7 * (k / n) as f64 - 0.3 * (k % n) as f64).collect::<Vec<_>>()).unwrap();
    let g = Graph::inference();
    let tx = TypedVar::new(g.constant(ramp), t.clone());
    let plain = eval(&g, layer.forward_plain(&g, &store, &tx).unwrap().var);
    let w = eval(&g, layer.kernel.materialize(&g, &store));
    let wsum = w.sum();
    let (bx, by) = (0.5, 0.25);
    let (b, d) = constant_bd(&g, &layer, n, [bx, by], &[1.0, 1.0]);
    let y = eval(&g, layer.forward_with(&g, &store, &tx, b, d).unwrap().var);
    for i in 2..n - 2 {
        for j in 2..n - 2 {
            let want = plain.at(&[0, i, j]) + wsum * (0.7 * by - 0.3 * bx);
            assert!((y.at(&[0, i, j]) - want).abs() <= 1e-10);
        }
    }
}

#[test]
fn per_figure_dilation_moves_taps_outward() {
    let t = RepresentationSpec::trivial(C4, 1);
    let mut store = ParamStore::<f64>::new();
    let layer = DeformableSteerableConv::new(&mut store, "d", &t, &t, 3, &mut rng(6)).unwrap();
    assert_eq!(layer.figures.count, 2);
    let n = 15;
    let c = 7usize;
    let mut imp = Tensor::zeros(&[1, n, n]);
    imp.set(&[0, c, c], 1.0);
    let g = Graph::inference();
    let tx = TypedVar::new(g.constant(imp), t.clone());
    // axial taps dilated by 2, diagonal taps by 3
    let (b, d) = constant_bd(&g, &layer, n, [0.0, 0.0], &[2.0, 3.0]);
    let y = eval(&g, layer.forward_with(&g, &store, &tx, b, d).unwrap().var);
    let w = eval(&g, layer.kernel.materialize(&g, &store));
    let mut expected = Tensor::<f64>::zeros(&[1, n, n]);
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            let s = match (dy.abs() + dx.abs()) as usize {
                0 => 0,
                1 => 2,
                _ => 3,
            };
            let (r, q) = ((c as i64 - s * dy) as usize, (c as i64 - s * dx) as usize);
            expected.set(&[0, r, q], w.at(&[0, 0, (dy + 1) as usize, (dx + 1) as usize]));
        }
    }
    assert!(y.max_abs_diff(&expected) <= 1e-12);
}

#[test]
fn sampled_conv_reads_bilinear_midpoints() {
    let g = Graph::<f64>::inference();
    let x = g.constant(Tensor::from_f64(vec![1, 2, 2], &[0.0, 1.0, 2.0, 3.0]).unwrap());
    let k = g.constant(Tensor::from_f64(vec![1, 1, 1], &[2.0]).unwrap());
    let pos = g.constant(Tensor::from_f64(vec![4, 2], &[0.5, 0.5, 0.0, 0.5, 1.5, 1.0, -1.0, 0.0]).unwrap());
    let y = eval(&g, sampled_conv(&g, x, k, pos).unwrap());
    let want = [3.0, 1.0, 3.0, 0.0];
    for (a, b) in y.data().iter().zip(want) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

fn dscn_residual<T: Scalar>(layer: &DeformableSteerableConv, store: &ParamStore<T>, x: &FeatureField<T>, group: CyclicGroup) -> f64 {
    let run = |f: &FeatureField<T>| {
        let g = Graph::inference();
        let y = layer.forward(&g, store, &TypedVar::new(g.constant(f.tensor.clone()), f.spec.clone())).unwrap();
        FeatureField::new(eval(&g, y.var), y.spec).unwrap()
    };
    let base = run(x);
    group
        .elements()
        .filter(|e| e.quarter_turns().is_some())
        .map(|e| run(&x.act(e).unwrap()).max_abs_diff(&base.act(e).unwrap()))
        .fold(0.0, f64::max)
}

#[test]
fn deformable_steerable_conv_is_equivariant() {
    let cases = [
        (RepresentationSpec::regular(C4, 1), RepresentationSpec::regular(C4, 1), 3),
        (RepresentationSpec::mixed(C4, 1, 1, 1), RepresentationSpec::mixed(C4, 1, 1, 1), 3),
        (RepresentationSpec::trivial(C4, 2), RepresentationSpec::mixed(C4, 0, 1, 1), 5),
    ];
    for (n, (si, so, size)) in cases.into_iter().enumerate() {
        let mut s64 = ParamStore::<f64>::new();
        let l64 = DeformableSteerableConv::new(&mut s64, "d", &si, &so, size, &mut rng(n as u64)).unwrap();
        randomize_predictor(&l64, &mut s64, 100 + n as u64, 0.5);
        let mut s32 = ParamStore::<f32>::new();
        let l32 = DeformableSteerableConv::new(&mut s32, "d", &si, &so, size, &mut rng(n as u64)).unwrap();
        randomize_predictor(&l32, &mut s32, 100 + n as u64, 0.5);
        for seed in 0..10 {
            let e64 = dscn_residual(&l64, &s64, &field(&si, 8, seed), C4);
            assert!(e64 <= 1e-10, "f64 {si} -> {so}: {e64}");
            let e32 = dscn_residual(&l32, &s32, &field(&si, 9, seed), C4);
            assert!(e32 <= 1e-5, "f32 {si} -> {so}: {e32}");
        }
    }
}

#[test]
fn offset_and_dilation_are_typed_and_bounded() {
    let si = RepresentationSpec::regular(C4, 1);
    let mut store = ParamStore::<f64>::new();
    let layer = DeformableSteerableConv::new(&mut store, "d", &si, &si, 5, &mut rng(9)).unwrap();
    let spec = layer.predictor_spec();
    assert_eq!(spec.blocks[0], Block::Irrep(1));
    assert_eq!(spec.blocks.len(), 1 + 5);
    assert!(spec.blocks[1..].iter().all(|b| *b == Block::Trivial));
    randomize_predictor(&layer, &mut store, 10, 20.0);
    let x = field::<f64>(&si, 7, 2);
    let g = Graph::inference();
    let (b, d) = layer.predict_offset_dilation(&g, &store, &TypedVar::new(g.constant(x.tensor.clone()), si.clone())).unwrap();
    let (b, d) = (eval(&g, b), eval(&g, d));
    for i in 0..7 {
        for j in 0..7 {
            let norm = b.at(&[0, i, j]).hypot(b.at(&[1, i, j]));
            assert!(norm <= OFFSET_BOUND);
        }
    }
    assert!(d.data().iter().all(|&v| v > 0.0));
    // b rotates as a vector, d is invariant
    let irrep_d = RepresentationSpec::trivial(C4, 5);
    let irrep_b = RepresentationSpec::irrep(C4, 1, 1);
    for e in C4.elements() {
        let g = Graph::inference();
        let xr = x.act(e).unwrap();
        let (br, dr) = layer.predict_offset_dilation(&g, &store, &TypedVar::new(g.constant(xr.tensor), si.clone())).unwrap();
        let want_b = FeatureField::new(b.clone(), irrep_b.clone()).unwrap().act(e).unwrap();
        let want_d = FeatureField::new(d.clone(), irrep_d.clone()).unwrap().act(e).unwrap();
        assert!(eval(&g, br).max_abs_diff(&want_b.tensor) <= 1e-10);
        assert!(eval(&g, dr).max_abs_diff(&want_d.tensor) <= 1e-10);
    }
}

#[test]
fn gradients_flow_through_offsets_and_dilations() {
    let si = RepresentationSpec::mixed(C4, 1, 1, 0);
    let so = RepresentationSpec::regular(C4, 1);
    let mut store = ParamStore::<f64>::new();
    let layer = DeformableSteerableConv::new(&mut store, "d", &si, &so, 3, &mut rng(11)).unwrap();
    let n = 5;
    let mut r = rng(12);
    let x = Tensor::randn(&[si.dim(), n, n], &mut r);
    let b = Tensor::uniform(&[2, n, n], -0.8, 0.8, &mut r);
    let d = Tensor::uniform(&[2, n, n], 0.6, 1.4, &mut r);
    let err = grad_check(
        |g, v| layer.forward_with(g, &store, &TypedVar::new(v[0], si.clone()), v[1], v[2]).unwrap().var,
        vec![x.clone(), b, d],
    );
    assert!(err <= 1e-6, "relative gradient error {err}");
    // predictor parameters receive gradient through the sampling positions
    randomize_predictor(&layer, &mut store, 13, 0.3);
    let g = Graph::new();
    let y = layer.forward(&g, &store, &TypedVar::new(g.constant(x), si.clone())).unwrap();
    let sq = g.square(y.var);
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    let touched: Vec<_> = grads.param_grads(&store).map(|(id, t)| (id, t.max_abs())).collect();
    for id in layer.predictor_params() {
        let m = touched.iter().find(|(p, _)| *p == id).map(|t| t.1).unwrap_or(0.0);
        assert!(m > 0.0, "no gradient for {}", store.get(id).name);
    }
}

#[test]
fn conventional_deformable_conv() {
    let mut store = ParamStore::<f64>::new();
    let layer = DeformableConv2d::new(&mut store, "dcn", 2, 3, 3, &mut rng(14)).unwrap();
    let n = 6;
    let x = Tensor::randn(&[2, n, n], &mut rng(15));
    let g = Graph::inference();
    let xv = g.constant(x.clone());
    // zero offsets reproduce the regular convolution
    let y = eval(&g, layer.forward(&g, &store, xv).unwrap());
    let w = g.param(&store, layer.weight());
    let w = g.reshape(w, &[3, 2, 3, 3]);
    let conv = eval(&g, g.conv2d(xv, w, 1, 1).unwrap());
    assert!(y.max_abs_diff(&conv) <= 1e-10);
    // offsets are differentiable
    let off = Tensor::uniform(&[18, n, n], -0.7, 0.7, &mut rng(16));
    let err = grad_check(|g, v| layer.forward_with_offsets(g, &store, v[0], v[1]).unwrap(), vec![x, off]);
    assert!(err <= 1e-6, "relative gradient error {err}");
}

/// Smooth scalar test field.
fn bump(x: f64, y: f64) -> [f64; 2] {
    let r2 = (x - 1.3).powi(2) + (y + 0.7).powi(2);
    [(-r2 / 40.0).exp(), (-(x * x + (y - 2.0).powi(2)) / 30.0).exp() * (0.15 * x).cos()]
}

#[test]
fn c8_variant_is_approximately_equivariant() {
    let si = RepresentationSpec::trivial(C8, 2);
    let so = RepresentationSpec::regular(C8, 1);
    let mut store = ParamStore::<f64>::new();
    let layer = DeformableSteerableConv::new(&mut store, "d8", &si, &so, 5, &mut rng(17)).unwrap();
    assert_eq!(layer.figures.count, 2);
    randomize_predictor(&layer, &mut store, 18, 0.3);
    // quarter turns are exact
    for seed in 0..3 {
        assert!(dscn_residual(&layer, &store, &field(&si, 8, seed), C8) <= 1e-10);
    }
    // the 45° element on an analytic field
    let n = 25;
    let c = (n - 1) as f64 / 2.0;
    let make = |theta: f64| {
        let (s, co) = theta.sin_cos();
        let mut t = Tensor::<f64>::zeros(&[2, n, n]);
        for i in 0..n {
            for j in 0..n {
                let (x, y) = (j as f64 - c, i as f64 - c);
                // value at g⁻¹ p
                let v = bump(co * x + s * y, -s * x + co * y);
                t.set(&[0, i, j], v[0]);
                t.set(&[1, i, j], v[1]);
            }
        }
        t
    };
    let run = |t: Tensor<f64>| {
        let g = Graph::inference();
        let y = layer.forward(&g, &store, &TypedVar::new(g.constant(t), si.clone())).unwrap();
        eval(&g, y.var)
    };
    let e = C8.element(1);
    let base = run(make(0.0));
    let rotated = run(make(e.angle()));
    let (s, co) = e.angle().sin_cos();
    let scale = base.max_abs();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (j as f64 - c, i as f64 - c);
            if x * x + y * y > 36.0 {
                continue;
            }
            // y(g⁻¹ p) by bilinear interpolation
            let (xs, ys) = (co * x + s * y + c, -s * x + co * y + c);
            let (i0, j0) = (ys.floor() as usize, xs.floor() as usize);
            let (fy, fx) = (ys - i0 as f64, xs - j0 as f64);
            let at = |ch: usize| {
                base.at(&[ch, i0, j0]) * (1.0 - fy) * (1.0 - fx)
                    + base.at(&[ch, i0, j0 + 1]) * (1.0 - fy) * fx
                    + base.at(&[ch, i0 + 1, j0]) * fy * (1.0 - fx)
                    + base.at(&[ch, i0 + 1, j0 + 1]) * fy * fx
            };
            let v: Vec<f64> = (0..8).map(at).collect();
            let want = so.apply(e, &v, 1).unwrap();
            for (ch, w) in want.iter().enumerate() {
                worst = worst.max((rotated.at(&[ch, i, j]) - w).abs());
            }
        }
    }
    assert!(worst / scale <= 5e-2, "relative residual {}", worst / scale);
}
