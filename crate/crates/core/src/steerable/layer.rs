//! Steerable convolutions, the 3D lifting convolution and equivariant linear maps.

use std::rc::Rc;
use std::sync::Arc;

use rand::Rng;

use super::basis::{pair_basis, PairBasis, TapSet};
use crate::error::{Error, Result};
use crate::group::{Block, RepresentationSpec};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// A tape value annotated with the representation of its channel axis.
#[derive(Debug, Clone)]
pub struct TypedVar {
    pub var: Var,
    pub spec: RepresentationSpec,
}

impl TypedVar {
    pub fn new(var: Var, spec: RepresentationSpec) -> Self {
        Self { var, spec }
    }
}

pub(crate) fn expect_spec(actual: &RepresentationSpec, expected: &RepresentationSpec) -> Result<()> {
    if actual != expected {
        return Err(Error::TypeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        });
    }
    Ok(())
}

struct PairGroup {
    basis: Arc<PairBasis>,
    param: ParamId,
    pairs: usize,
}

/// Kernel `[C_out, C_in, taps...]` spanned by constraint-solving bases, one
/// coefficient row per pair of blocks.
pub struct SteerableKernel {
    pub in_spec: RepresentationSpec,
    pub out_spec: RepresentationSpec,
    pub taps: TapSet,
    groups: Vec<PairGroup>,
    gather: Rc<Vec<usize>>,
    shape: Vec<usize>,
}

impl SteerableKernel {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_spec: &RepresentationSpec,
        out_spec: &RepresentationSpec,
        taps: TapSet,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if in_spec.group != out_spec.group || taps.group != in_spec.group {
            return Err(Error::GroupMismatch {
                left: in_spec.group.order(),
                right: if taps.group != in_spec.group { taps.group.order() } else { out_spec.group.order() },
            });
        }
        let nt = taps.len();
        let (cin, cout) = (in_spec.dim(), out_spec.dim());
        let (oo, oi) = (out_spec.offsets(), in_spec.offsets());
        // distinct type pairs in first-appearance order
        let mut kinds: Vec<(Block, Block)> = Vec::new();
        let mut members: Vec<Vec<(usize, usize)>> = Vec::new();
        for (a, &bo) in out_spec.blocks.iter().enumerate() {
            for (b, &bi) in in_spec.blocks.iter().enumerate() {
                match kinds.iter().position(|&k| k == (bo, bi)) {
                    Some(p) => members[p].push((a, b)),
                    None => {
                        kinds.push((bo, bi));
                        members.push(vec![(a, b)]);
                    }
                }
            }
        }
        let fan_in = (cin * nt).max(1) as f64;
        let total = cout * cin * nt;
        let mut gather = vec![usize::MAX; total];
        let mut groups = Vec::new();
        let mut base = 0;
        for ((bo, bi), pairs) in kinds.into_iter().zip(members) {
            let basis = pair_basis(bo, bi, &taps);
            if basis.is_empty() {
                continue;
            }
            let n = basis.out_dim * basis.in_dim * nt;
            let bound = (6.0 / fan_in * n as f64 / basis.len() as f64).sqrt();
            let param = store.add_uniform(format!("{name}.w.{bo}>{bi}"), &[pairs.len(), basis.len()], bound, rng);
            for (q, &(a, b)) in pairs.iter().enumerate() {
                for o in 0..basis.out_dim {
                    for i in 0..basis.in_dim {
                        for t in 0..nt {
                            let dst = ((oo[a] + o) * cin + oi[b] + i) * nt + t;
                            gather[dst] = base + q * n + (o * basis.in_dim + i) * nt + t;
                        }
                    }
                }
            }
            base += pairs.len() * n;
            groups.push(PairGroup { basis, param, pairs: pairs.len() });
        }
        // entries with no admissible basis read a trailing zero
        for v in gather.iter_mut().filter(|v| **v == usize::MAX) {
            *v = base;
        }
        let mut shape = vec![cout, cin];
        match taps.grid {
            Some((1, k)) => shape.extend([k, k]),
            Some((d, k)) => shape.extend([d, k, k]),
            None => shape.push(nt),
        }
        Ok(Self {
            in_spec: in_spec.clone(),
            out_spec: out_spec.clone(),
            taps,
            groups,
            gather: Rc::new(gather),
            shape,
        })
    }

    pub fn num_coefficients(&self) -> usize {
        self.groups.iter().map(|g| g.pairs * g.basis.len()).sum()
    }

    pub fn coefficient_params(&self) -> Vec<ParamId> {
        self.groups.iter().map(|g| g.param).collect()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Σ coefficients · basis, arranged as the dense kernel.
    pub fn materialize<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>) -> Var {
        let mut parts = Vec::with_capacity(self.groups.len() + 1);
        for grp in &self.groups {
            let b = &grp.basis;
            let n = b.rows.ncols();
            let mut data = Vec::with_capacity(b.len() * n);
            for r in 0..b.len() {
                data.extend(b.rows.row(r).iter().map(|&v| T::of(v)));
            }
            let basis = g.constant(Tensor::new(vec![b.len(), n], data).expect("basis shape"));
            let coeffs = g.param(store, grp.param);
            let blocks = g.matmul(coeffs, basis);
            parts.push(g.reshape(blocks, &[grp.pairs * n]));
        }
        parts.push(g.constant(Tensor::zeros(&[1])));
        let flat = g.concat(&parts, 0);
        g.gather_flat(flat, Rc::clone(&self.gather), &self.shape)
    }
}

/// Bias constrained to be constant on every regular block and absent on
/// irrep blocks.
pub(crate) struct TypedBias {
    param: ParamId,
    gather: Rc<Vec<usize>>,
}

impl TypedBias {
    pub(crate) fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: &RepresentationSpec) -> Option<Self> {
        let mut gather = Vec::with_capacity(spec.dim());
        let mut count = 0;
        let mut zero_slots = Vec::new();
        for b in &spec.blocks {
            match b {
                Block::Trivial | Block::Irrep(0) => {
                    gather.push(count);
                    count += 1;
                }
                Block::Regular => {
                    gather.extend(std::iter::repeat(count).take(b.dim(spec.group)));
                    count += 1;
                }
                Block::Irrep(_) => {
                    zero_slots.extend([gather.len(), gather.len() + 1]);
                    gather.extend([usize::MAX, usize::MAX]);
                }
            }
        }
        if count == 0 {
            return None;
        }
        for s in zero_slots {
            gather[s] = count;
        }
        let param = store.add(format!("{name}.bias"), Tensor::zeros(&[count]));
        Some(Self { param, gather: Rc::new(gather) })
    }

    /// Per-channel bias vector `[C]`.
    pub(crate) fn vector<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>) -> Var {
        let p = g.param(store, self.param);
        let z = g.constant(Tensor::zeros(&[1]));
        let ext = g.concat(&[p, z], 0);
        let n = self.gather.len();
        g.gather_flat(ext, Rc::clone(&self.gather), &[n])
    }

    pub(crate) fn param(&self) -> ParamId {
        self.param
    }
}

/// Same-padded steerable 2D convolution on `[C, H, W]` fields.
pub struct SteerableConv2d {
    pub kernel: SteerableKernel,
    bias: Option<TypedBias>,
}

impl SteerableConv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_spec: &RepresentationSpec,
        out_spec: &RepresentationSpec,
        size: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let taps = TapSet::grid(in_spec.group, 1, size)?;
        let kernel = SteerableKernel::new(store, name, in_spec, out_spec, taps, rng)?;
        let bias = if bias { TypedBias::new(store, name, out_spec) } else { None };
        Ok(Self { kernel, bias })
    }

    pub fn size(&self) -> usize {
        self.kernel.shape[3]
    }

    pub fn bias_param(&self) -> Option<ParamId> {
        self.bias.as_ref().map(|b| b.param())
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: &TypedVar) -> Result<TypedVar> {
        expect_spec(&x.spec, &self.kernel.in_spec)?;
        let w = self.kernel.materialize(g, store);
        let y = g.conv2d(x.var, w, 1, self.size() / 2)?;
        Ok(TypedVar::new(self.add_bias(g, store, y, 3), self.kernel.out_spec.clone()))
    }

    pub(crate) fn add_bias<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, y: Var, rank: usize) -> Var {
        add_channel_bias(g, store, self.bias.as_ref(), y, rank)
    }
}

pub(crate) fn add_channel_bias<T: Scalar>(
    g: &Graph<T>,
    store: &ParamStore<T>,
    bias: Option<&TypedBias>,
    y: Var,
    rank: usize,
) -> Var {
    let Some(b) = bias else { return y };
    let v = b.vector(g, store);
    let c = g.shape(v)[0];
    let mut shape = vec![1; rank];
    shape[0] = c;
    let v = g.reshape(v, &shape);
    g.add(y, v)
}

/// Single 3D steerable layer from a scalar volume to regular features; the
/// group rotates the `(y, x)` kernel axes with depth fixed.
pub struct LiftingConv3d {
    pub kernel: SteerableKernel,
    bias: Option<TypedBias>,
}

impl LiftingConv3d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        out_spec: &RepresentationSpec,
        size: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let in_spec = RepresentationSpec::trivial(out_spec.group, 1);
        let taps = TapSet::grid(out_spec.group, size, size)?;
        let kernel = SteerableKernel::new(store, name, &in_spec, out_spec, taps, rng)?;
        let bias = if bias { TypedBias::new(store, name, out_spec) } else { None };
        Ok(Self { kernel, bias })
    }

    /// `tsdf[1, S, S, S]` -> `[d·n, S, S, S]`.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, tsdf: Var) -> Result<TypedVar> {
        let s = g.shape(tsdf);
        if s.len() != 4 || s[0] != 1 || s[1] != s[2] || s[2] != s[3] {
            return Err(Error::Geometry(format!("lifting expects a cubic [1,S,S,S] volume, got {s:?}")));
        }
        let w = self.kernel.materialize(g, store);
        let k = self.kernel.taps.grid.map_or(1, |(d, _)| d);
        let w = g.reshape(w, &[self.kernel.out_spec.dim(), 1, k, k, k]);
        let y = g.conv3d(tsdf, w, 1, k / 2)?;
        let y = add_channel_bias(g, store, self.bias.as_ref(), y, 4);
        Ok(TypedVar::new(y, self.kernel.out_spec.clone()))
    }
}

/// Equivariant map on per-point features `[N, C]`.
pub struct EquivariantLinear {
    pub kernel: SteerableKernel,
    bias: Option<TypedBias>,
}

impl EquivariantLinear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_spec: &RepresentationSpec,
        out_spec: &RepresentationSpec,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let taps = TapSet::grid(in_spec.group, 1, 1)?;
        let kernel = SteerableKernel::new(store, name, in_spec, out_spec, taps, rng)?;
        let bias = if bias { TypedBias::new(store, name, out_spec) } else { None };
        Ok(Self { kernel, bias })
    }

    pub fn in_spec(&self) -> &RepresentationSpec {
        &self.kernel.in_spec
    }

    pub fn out_spec(&self) -> &RepresentationSpec {
        &self.kernel.out_spec
    }

    pub fn bias_param(&self) -> Option<ParamId> {
        self.bias.as_ref().map(|b| b.param())
    }

    /// Weight matrix `[C_out, C_in]`.
    pub fn weight<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>) -> Var {
        let w = self.kernel.materialize(g, store);
        g.reshape(w, &[self.kernel.out_spec.dim(), self.kernel.in_spec.dim()])
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: &TypedVar) -> Result<TypedVar> {
        expect_spec(&x.spec, &self.kernel.in_spec)?;
        let w = self.weight(g, store);
        let wt = g.permute(w, &[1, 0]);
        let mut y = g.matmul(x.var, wt);
        if let Some(b) = &self.bias {
            let v = b.vector(g, store);
            y = g.add(y, v);
        }
        Ok(TypedVar::new(y, self.kernel.out_spec.clone()))
    }

    /// Same map applied to a `[C, H, W]` field as a 1×1 convolution.
    pub fn forward_field<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: &TypedVar) -> Result<TypedVar> {
        expect_spec(&x.spec, &self.kernel.in_spec)?;
        let w = self.kernel.materialize(g, store);
        let y = g.conv2d(x.var, w, 1, 0)?;
        let y = add_channel_bias(g, store, self.bias.as_ref(), y, 3);
        Ok(TypedVar::new(y, self.kernel.out_spec.clone()))
    }
}
