mod common;

use common::rng;
use equigrasp_core::group::{Block, CyclicGroup, FeatureField, RepresentationSpec};
use equigrasp_core::steerable::{
    pair_basis, typed_activation, EquivariantLinear, LiftingConv3d, SteerableConv2d, TapSet, TypedVar,
};
use equigrasp_core::tensor::{Graph, ParamStore, Scalar, Tensor};
use nalgebra::DMatrix;

const C4: CyclicGroup = CyclicGroup::C4;

/// Nullspace of the explicitly assembled constraint system
/// `W[o,b,g·t] ρ_in(g)[b,i] = ρ_out(g)[o,a] W[a,i,t]` for all g.
fn brute_force_nullspace(out: Block, inp: Block, depth: usize, k: usize) -> DMatrix<f64> {
    let (dout, din) = (out.dim(C4), inp.dim(C4));
    let nt = depth * k * k;
    let n = dout * din * nt;
    let idx = |o: usize, i: usize, t: usize| (o * din + i) * nt + t;
    // kernel-grid rotation by 90°: (row, col) -> (col, k-1-row)
    let rot = |t: usize, q: usize| {
        let (z, mut r, mut c) = (t / (k * k), (t / k) % k, t % k);
        for _ in 0..q {
            let nr = c;
            let nc = k - 1 - r;
            r = nr;
            c = nc;
        }
        (z * k + r) * k + c
    };
    let mut rows = Vec::new();
    for g in C4.elements() {
        let (ro, ri) = (out.matrix(g), inp.matrix(g));
        for o in 0..dout {
            for i in 0..din {
                for t in 0..nt {
                    let mut row = vec![0.0; n];
                    for b in 0..din {
                        row[idx(o, b, rot(t, g.index))] += ri[(b, i)];
                    }
                    for a in 0..dout {
                        row[idx(a, i, t)] -= ro[(o, a)];
                    }
                    rows.push(row);
                }
            }
        }
    }
    let m = DMatrix::from_fn(rows.len(), n, |r, c| rows[r][c]);
    let svd = (m.transpose() * &m).svd(true, false);
    let u = svd.u.unwrap();
    let cols: Vec<usize> = (0..n).filter(|&c| svd.singular_values[c] < 1e-9).collect();
    DMatrix::from_fn(n, cols.len(), |r, c| u[(r, cols[c])])
}

fn projection_residual(basis_cols: &DMatrix<f64>, target_cols: &DMatrix<f64>) -> f64 {
    // ‖(I - Q Qᵀ) X‖ with Q orthonormal
    let q = basis_cols;
    let proj = q * (q.transpose() * target_cols);
    (target_cols - proj).amax()
}

#[test]
fn projection_basis_spans_constraint_nullspace() {
    let blocks = [Block::Trivial, Block::Irrep(1), Block::Irrep(2), Block::Regular];
    for (depth, k) in [(1, 1), (1, 3), (1, 5), (3, 3)] {
        let taps = TapSet::grid(C4, depth, k).unwrap();
        for &o in &blocks {
            for &i in &blocks {
                let oracle = brute_force_nullspace(o, i, depth, k);
                let built = pair_basis(o, i, &taps);
                let q = built.rows.transpose();
                assert_eq!(q.ncols(), oracle.ncols(), "{o}->{i} size {depth}x{k}");
                if q.ncols() == 0 {
                    continue;
                }
                assert!(projection_residual(&q, &oracle) <= 1e-10);
                assert!(projection_residual(&oracle, &q) <= 1e-10);
            }
        }
    }
    let taps = TapSet::grid(C4, 1, 3).unwrap();
    assert_eq!(pair_basis(Block::Trivial, Block::Trivial, &taps).len(), 3);
    assert_eq!(brute_force_nullspace(Block::Regular, Block::Regular, 1, 3).ncols(), pair_basis(Block::Regular, Block::Regular, &taps).len());
}

fn random_field<T: Scalar>(spec: &RepresentationSpec, spatial: &[usize], seed: u64) -> FeatureField<T> {
    let mut shape = vec![spec.dim()];
    shape.extend_from_slice(spatial);
    FeatureField::new(Tensor::randn(&shape, &mut rng(seed)), spec.clone()).unwrap()
}

fn conv_residual<T: Scalar>(layer: &SteerableConv2d, store: &ParamStore<T>, f: &FeatureField<T>) -> f64 {
    let run = |x: &FeatureField<T>| {
        let g = Graph::inference();
        let v = g.constant(x.tensor.clone());
        let y = layer.forward(&g, store, &TypedVar::new(v, x.spec.clone())).unwrap();
        FeatureField::new((*g.value(y.var)).clone(), y.spec).unwrap()
    };
    let base = run(f);
    C4.elements()
        .map(|e| run(&f.act(e).unwrap()).max_abs_diff(&base.act(e).unwrap()))
        .fold(0.0, f64::max)
}

fn specs() -> Vec<(RepresentationSpec, RepresentationSpec)> {
    vec![
        (RepresentationSpec::regular(C4, 2), RepresentationSpec::regular(C4, 2)),
        (RepresentationSpec::mixed(C4, 2, 1, 1), RepresentationSpec::mixed(C4, 1, 2, 2)),
        (RepresentationSpec::trivial(C4, 3), RepresentationSpec::mixed(C4, 0, 1, 1)),
        (RepresentationSpec::new(C4, vec![Block::Irrep(2), Block::Regular]), RepresentationSpec::irrep(C4, 1, 2)),
    ]
}

#[test]
fn steerable_conv_is_equivariant_for_random_coefficients() {
    for (n, (si, so)) in specs().into_iter().enumerate() {
        for k in [1, 3, 5] {
            let mut r = rng(n as u64 * 10 + k as u64);
            let mut s64 = ParamStore::<f64>::new();
            let l64 = SteerableConv2d::new(&mut s64, "c", &si, &so, k, true, &mut r).unwrap();
            let mut s32 = ParamStore::<f32>::new();
            let l32 = SteerableConv2d::new(&mut s32, "c", &si, &so, k, true, &mut r).unwrap();
            // nonzero biases so the typed bias is exercised
            for p in s64.iter_mut().chain(std::iter::empty()) {
                if p.name.ends_with("bias") {
                    p.value = p.value.map(|_| 0.3);
                }
            }
            for seed in 0..20 {
                let e64 = conv_residual(&l64, &s64, &random_field(&si, &[6, 6], seed));
                assert!(e64 <= 1e-10, "f64 {si} -> {so} k{k}: {e64}");
                let e32 = conv_residual(&l32, &s32, &random_field(&si, &[7, 7], seed));
                assert!(e32 <= 1e-5, "f32 {si} -> {so} k{k}: {e32}");
            }
        }
    }
}

#[test]
fn zero_and_scalar_kernels() {
    let t1 = RepresentationSpec::trivial(C4, 1);
    let mut store = ParamStore::<f64>::new();
    let layer = SteerableConv2d::new(&mut store, "s", &t1, &t1, 1, false, &mut rng(0)).unwrap();
    let id = layer.kernel.coefficient_params()[0];
    *store.value_mut(id) = Tensor::full(&[1, 1], 2.5);
    let f = random_field::<f64>(&t1, &[5, 5], 3);
    let g = Graph::inference();
    let y = layer.forward(&g, &store, &TypedVar::new(g.constant(f.tensor.clone()), t1.clone())).unwrap();
    for (a, b) in g.value(y.var).data().iter().zip(f.tensor.data()) {
        assert!((a - 2.5 * b).abs() < 1e-12);
    }
    let reg = RepresentationSpec::regular(C4, 2);
    let mut store = ParamStore::<f64>::new();
    let layer = SteerableConv2d::new(&mut store, "z", &reg, &reg, 3, true, &mut rng(0)).unwrap();
    for p in store.iter_mut() {
        p.value = p.value.map(|_| 0.0);
    }
    let y = layer.forward(&g, &store, &TypedVar::new(g.constant(random_field::<f64>(&reg, &[4, 4], 1).tensor), reg.clone())).unwrap();
    assert_eq!(g.value(y.var).max_abs(), 0.0);
    // mismatched input type
    let bad = TypedVar::new(g.constant(Tensor::zeros(&[8, 4, 4])), RepresentationSpec::trivial(C4, 8));
    assert!(layer.forward(&g, &store, &bad).is_err());
}

fn lift_residual<T: Scalar>(layer: &LiftingConv3d, store: &ParamStore<T>, seed: u64) -> f64 {
    let t1 = RepresentationSpec::trivial(C4, 1);
    let vol = random_field::<T>(&t1, &[6, 6, 6], seed);
    let run = |x: &FeatureField<T>| {
        let g = Graph::inference();
        let y = layer.forward(&g, store, g.constant(x.tensor.clone())).unwrap();
        FeatureField::new((*g.value(y.var)).clone(), y.spec).unwrap()
    };
    let base = run(&vol);
    C4.elements()
        .map(|e| run(&vol.act(e).unwrap()).max_abs_diff(&base.act(e).unwrap()))
        .fold(0.0, f64::max)
}

#[test]
fn lifting_conv_is_equivariant() {
    let out = RepresentationSpec::regular(C4, 2);
    let mut s64 = ParamStore::<f64>::new();
    let l64 = LiftingConv3d::new(&mut s64, "lift", &out, 3, true, &mut rng(1)).unwrap();
    let mut s32 = ParamStore::<f32>::new();
    let l32 = LiftingConv3d::new(&mut s32, "lift", &out, 3, true, &mut rng(2)).unwrap();
    for seed in 0..20 {
        assert!(lift_residual(&l64, &s64, seed) <= 1e-10);
        assert!(lift_residual(&l32, &s32, seed) <= 1e-5);
    }
    // zero volume with zero bias gives zero features
    let g = Graph::<f64>::inference();
    let mut zs = s64.clone();
    for p in zs.iter_mut() {
        if p.name.ends_with("bias") {
            p.value = p.value.map(|_| 0.0);
        }
    }
    let y = l64.forward(&g, &zs, g.constant(Tensor::zeros(&[1, 5, 5, 5]))).unwrap();
    assert_eq!(g.value(y.var).max_abs(), 0.0);
    assert!(l64.forward(&g, &zs, g.constant(Tensor::zeros(&[1, 4, 5, 5]))).is_err());

    // a size-1 lift of a scalar is constant across the four channels
    let one = RepresentationSpec::regular(C4, 1);
    let mut st = ParamStore::<f64>::new();
    let l1 = LiftingConv3d::new(&mut st, "l1", &one, 1, false, &mut rng(5)).unwrap();
    let y = l1.forward(&g, &st, g.constant(Tensor::randn(&[1, 4, 4, 4], &mut rng(6)))).unwrap();
    let v = g.value(y.var);
    let per = 64;
    for c in 1..4 {
        for (a, b) in v.data()[c * per..(c + 1) * per].iter().zip(&v.data()[..per]) {
            assert!((a - b).abs() <= 1e-13 * b.abs().max(1.0));
        }
    }
}

#[test]
fn linear_layers_and_activation_are_equivariant() {
    let si = RepresentationSpec::mixed(C4, 2, 2, 2);
    let so = RepresentationSpec::mixed(C4, 3, 1, 1);
    let mut store = ParamStore::<f64>::new();
    let lin = EquivariantLinear::new(&mut store, "lin", &si, &so, true, &mut rng(11)).unwrap();
    let head = EquivariantLinear::new(&mut store, "head", &si, &RepresentationSpec::trivial(C4, 2), false, &mut rng(12)).unwrap();
    let mut r = rng(13);
    let x = Tensor::<f64>::randn(&[5, si.dim()], &mut r);
    let run = |l: &EquivariantLinear, x: &Tensor<f64>, act: bool| {
        let g = Graph::inference();
        let y = l.forward(&g, &store, &TypedVar::new(g.constant(x.clone()), l.in_spec().clone())).unwrap();
        let y = if act { typed_activation(&g, &y, 1) } else { y };
        (*g.value(y.var)).clone()
    };
    // act on rows of an [N, C] matrix
    let act_rows = |spec: &RepresentationSpec, t: &Tensor<f64>, e| {
        let tt = t.permuted(&[1, 0]);
        let d = spec.apply(e, tt.data(), t.shape()[0]).unwrap();
        Tensor::new(tt.shape().to_vec(), d).unwrap().permuted(&[1, 0])
    };
    for e in C4.elements() {
        let gx = act_rows(&si, &x, e);
        for act in [false, true] {
            let lhs = run(&lin, &gx, act);
            let rhs = act_rows(&so, &run(&lin, &x, act), e);
            assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
        }
        assert!(run(&head, &gx, false).max_abs_diff(&run(&head, &x, false)) <= 1e-12);
    }
}
