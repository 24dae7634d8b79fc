//! Deformable convolution and the deformable steerable convolution.

use std::f64::consts::E;

use rand::Rng;

use super::figures::FigureTable;
use crate::error::{Error, Result};
use crate::group::{Block, RepresentationSpec};
use crate::steerable::{add_channel_bias, expect_spec, SteerableConv2d, SteerableKernel, TapSet, TypedBias, TypedVar};
use crate::tensor::{Graph, Padding, ParamId, ParamStore, Scalar, Tensor, Var};

/// `y(p) = Σ_k w_k · x(p_k(p))` with bilinear reads at `positions[H·W·K, 2]`
/// given as (row, col); `kernel` is `[C_out, C_in, K]`.
pub fn sampled_conv<T: Scalar>(g: &Graph<T>, x: Var, kernel: Var, positions: Var) -> Result<Var> {
    let (sx, sk) = (g.shape(x), g.shape(kernel));
    if sx.len() != 3 || sk.len() != 3 || sk[1] != sx[0] {
        return Err(Error::Shape(format!("sampled conv: input {sx:?}, kernel {sk:?}")));
    }
    let (cin, h, w) = (sx[0], sx[1], sx[2]);
    let (cout, k) = (sk[0], sk[2]);
    let samples = g.bilinear_sample(x, positions, Padding::Zeros)?;
    let cols = g.reshape(samples, &[h * w, k * cin]);
    let wk = g.permute(kernel, &[2, 1, 0]);
    let wk = g.reshape(wk, &[k * cin, cout]);
    let y = g.matmul(cols, wk);
    let y = g.permute(y, &[1, 0]);
    Ok(g.reshape(y, &[cout, h, w]))
}

/// Pixel centres `[H·W, 1, 2]` as (row, col).
fn pixel_grid<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            data.push(T::of(i as f64));
            data.push(T::of(j as f64));
        }
    }
    Tensor::new(vec![h * w, 1, 2], data).expect("grid shape")
}

/// Tap offsets `[1, K, 2]` as (row, col).
fn tap_offsets<T: Scalar>(taps: &TapSet) -> Tensor<T> {
    let data = taps.offsets.iter().flat_map(|o| [T::of(o[1]), T::of(o[2])]).collect();
    Tensor::new(vec![1, taps.len(), 2], data).expect("tap shape")
}

fn glorot_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in.max(1) as f64).sqrt()
}

/// Conventional deformable convolution with per-tap learned offsets.
pub struct DeformableConv2d {
    pub size: usize,
    taps: TapSet,
    weight: ParamId,
    bias: ParamId,
    offset_weight: ParamId,
    offset_bias: ParamId,
}

impl DeformableConv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let taps = TapSet::grid(crate::group::CyclicGroup::C4, 1, size)?;
        let k = taps.len();
        let weight = store.add_uniform(format!("{name}.weight"), &[cout, cin, k], glorot_bound(cin * k), rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        let offset_weight = store.add(format!("{name}.offset.weight"), Tensor::zeros(&[2 * k, cin, size, size]));
        let offset_bias = store.add(format!("{name}.offset.bias"), Tensor::zeros(&[2 * k]));
        Ok(Self { size, taps, weight, bias, offset_weight, offset_bias })
    }

    /// Learned offsets `[2K, H, W]`, channel `2k` the row and `2k+1` the column shift.
    pub fn predict_offsets<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.offset_weight);
        let y = g.conv2d(x, w, 1, self.size / 2)?;
        let b = g.param(store, self.offset_bias);
        let b = g.reshape(b, &[2 * self.taps.len(), 1, 1]);
        Ok(g.add(y, b))
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let offsets = self.predict_offsets(g, store, x)?;
        self.forward_with_offsets(g, store, x, offsets)
    }

    pub fn forward_with_offsets<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var, offsets: Var) -> Result<Var> {
        let s = g.shape(x);
        let (h, w) = (s[1], s[2]);
        let k = self.taps.len();
        let d = g.permute(offsets, &[1, 2, 0]);
        let d = g.reshape(d, &[h * w, k, 2]);
        let base = g.constant(pixel_grid(h, w));
        let taps = g.constant(tap_offsets(&self.taps));
        let pos = g.add(base, taps);
        let pos = g.add(pos, d);
        let pos = g.reshape(pos, &[h * w * k, 2]);
        let kernel = g.param(store, self.weight);
        let y = sampled_conv(g, x, kernel, pos)?;
        let b = g.param(store, self.bias);
        let b = g.reshape(b, &[g.shape(b)[0], 1, 1]);
        Ok(g.add(y, b))
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn offset_params(&self) -> [ParamId; 2] {
        [self.offset_weight, self.offset_bias]
    }
}

/// Offset/dilation predictor of a deformable steerable convolution.
enum Predictor {
    /// Dense-grid steerable convolution (C4).
    Grid(SteerableConv2d),
    /// Ring-tap steerable kernel read by bilinear sampling (C8).
    Sampled { kernel: SteerableKernel, bias: Option<TypedBias> },
}

/// Bound on the global offset, in cells.
pub const OFFSET_BOUND: f64 = 2.0;
const NORM_EPS: f64 = 1e-12;

/// `y(p) = Σ_k w(p_k) x(p + b(p) + d_k(p) p_k)` with an equivariant global
/// offset `b` and invariant per-figure dilations `d`.
pub struct DeformableSteerableConv {
    pub kernel: SteerableKernel,
    pub figures: FigureTable,
    bias: Option<TypedBias>,
    predictor: Predictor,
    pred_spec: RepresentationSpec,
}

impl DeformableSteerableConv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_spec: &RepresentationSpec,
        out_spec: &RepresentationSpec,
        size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let group = in_spec.group;
        let (taps, figures) = FigureTable::build(size, group)?;
        let kernel = SteerableKernel::new(store, name, in_spec, out_spec, taps.clone(), rng)?;
        let bias = TypedBias::new(store, name, out_spec);
        let mut blocks = vec![Block::Irrep(1)];
        blocks.extend(std::iter::repeat(Block::Trivial).take(figures.count));
        let pred_spec = RepresentationSpec::new(group, blocks);
        let pname = format!("{name}.offset");
        let predictor = if group.order() == 4 {
            Predictor::Grid(SteerableConv2d::new(store, &pname, in_spec, &pred_spec, size, true, rng)?)
        } else {
            let kernel = SteerableKernel::new(store, &pname, in_spec, &pred_spec, taps, rng)?;
            Predictor::Sampled { kernel, bias: TypedBias::new(store, &pname, &pred_spec) }
        };
        // start as the plain steerable convolution
        let zero: Vec<ParamId> = match &predictor {
            Predictor::Grid(c) => c.kernel.coefficient_params().into_iter().chain(c.bias_param()).collect(),
            Predictor::Sampled { kernel, .. } => kernel.coefficient_params(),
        };
        for id in zero {
            let v = store.value_mut(id);
            *v = Tensor::zeros(v.shape());
        }
        Ok(Self { kernel, figures, bias, predictor, pred_spec })
    }

    pub fn predictor_spec(&self) -> &RepresentationSpec {
        &self.pred_spec
    }

    /// Parameters of the offset/dilation predictor.
    pub fn predictor_params(&self) -> Vec<ParamId> {
        match &self.predictor {
            Predictor::Grid(c) => c.kernel.coefficient_params().into_iter().chain(c.bias_param()).collect(),
            Predictor::Sampled { kernel, bias } => {
                kernel.coefficient_params().into_iter().chain(bias.as_ref().map(|b| b.param())).collect()
            }
        }
    }

    /// Raw predictor output typed `irrep(1) ⊕ trivial^S`.
    pub fn predict_raw<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: &TypedVar) -> Result<TypedVar> {
        match &self.predictor {
            Predictor::Grid(c) => c.forward(g, store, x),
            Predictor::Sampled { kernel, bias } => {
                let s = g.shape(x.var);
                let ones = g.constant(Tensor::full(&[self.figures.count, s[1], s[2]], T::one()));
                let zero = g.constant(Tensor::zeros(&[2, s[1], s[2]]));
                let w = kernel.materialize(g, store);
                let pos = self.positions(g, zero, ones, &kernel.taps, s[1], s[2]);
                let y = sampled_conv(g, x.var, w, pos)?;
                Ok(TypedVar::new(add_channel_bias(g, store, bias.as_ref(), y, 3), self.pred_spec.clone()))
            }
        }
    }

    /// Global offset `b[2, H, W]` as (x, y) components bounded in norm by
    /// [`OFFSET_BOUND`], and dilations `d[S, H, W] > 0`.
    pub fn predict_offset_dilation<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: &TypedVar) -> Result<(Var, Var)> {
        let raw = self.predict_raw(g, store, x)?;
        let v = g.narrow(raw.var, 0, 0, 2);
        let s = g.narrow(raw.var, 0, 2, self.figures.count);
        let sq = g.square(v);
        let n2 = g.sum_axis(sq, 0, true);
        let n2 = g.add_scalar(n2, NORM_EPS);
        let n = g.sqrt(n2);
        let t = g.tanh(n);
        let scale = g.div(t, n);
        let scale = g.scale(scale, OFFSET_BOUND);
        let b = g.mul(v, scale);
        let shifted = g.add_scalar(s, (E - 1.0).ln());
        let d = g.softplus(shifted);
        Ok((b, d))
    }

    fn positions<T: Scalar>(&self, g: &Graph<T>, b: Var, d: Var, taps: &TapSet, h: usize, w: usize) -> Var {
        let k = taps.len();
        // b as (row, col) = (y, x) per pixel
        let b = g.index_select(b, 0, &[1, 0]);
        let b = g.permute(b, &[1, 2, 0]);
        let b = g.reshape(b, &[h * w, 1, 2]);
        let fig: Vec<usize> = self.figures.per_tap.iter().map(|f| f.unwrap_or(0)).collect();
        let dt = g.index_select(d, 0, &fig);
        let dt = g.permute(dt, &[1, 2, 0]);
        let dt = g.reshape(dt, &[h * w, k, 1]);
        let offs = g.constant(tap_offsets(taps));
        let scaled = g.mul(dt, offs);
        let base = g.constant(pixel_grid(h, w));
        let pos = g.add(base, b);
        let pos = g.add(pos, scaled);
        g.reshape(pos, &[h * w * k, 2])
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: &TypedVar) -> Result<TypedVar> {
        let (b, d) = self.predict_offset_dilation(g, store, x)?;
        self.forward_with(g, store, x, b, d)
    }

    /// Forward pass with externally supplied offset `b[2,H,W]` and dilations `d[S,H,W]`.
    pub fn forward_with<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: &TypedVar, b: Var, d: Var) -> Result<TypedVar> {
        expect_spec(&x.spec, &self.kernel.in_spec)?;
        let s = g.shape(x.var);
        if s.len() != 3 {
            return Err(Error::Shape(format!("deformable steerable conv expects [C,H,W], got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let pos = self.positions(g, b, d, &self.kernel.taps, h, w);
        let kernel = self.kernel.materialize(g, store);
        let (cout, cin, k) = (self.kernel.out_spec.dim(), self.kernel.in_spec.dim(), self.kernel.taps.len());
        let kernel = g.reshape(kernel, &[cout, cin, k]);
        let y = sampled_conv(g, x.var, kernel, pos)?;
        let y = add_channel_bias(g, store, self.bias.as_ref(), y, 3);
        Ok(TypedVar::new(y, self.kernel.out_spec.clone()))
    }

    /// The plain steerable convolution with this layer's kernel and bias.
    pub fn forward_plain<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: &TypedVar) -> Result<TypedVar> {
        expect_spec(&x.spec, &self.kernel.in_spec)?;
        let Some((1, size)) = self.kernel.taps.grid else {
            return Err(Error::Config("plain convolution needs a dense C4 kernel".into()));
        };
        let w = self.kernel.materialize(g, store);
        let y = g.conv2d(x.var, w, 1, size / 2)?;
        let y = add_channel_bias(g, store, self.bias.as_ref(), y, 3);
        Ok(TypedVar::new(y, self.kernel.out_spec.clone()))
    }
}
