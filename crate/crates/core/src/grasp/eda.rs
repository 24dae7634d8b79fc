//! Equivariant deformable attention over the queried feature field.

use rand::Rng;

use super::mlp::Linear;
use crate::error::Result;
use crate::group::{Block, RepresentationSpec};
use crate::steerable::TypedVar;
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::triplane::TriplaneFeatures;

/// `c̃(p) = h_out(Σ_k A_k(p) h_in(c(p + Δ_k(p)))) + c(p)` with offsets typed
/// `irrep(1) ⊕ trivial` (horizontal vector, vertical scalar) and softmax weights.
pub struct Eda {
    pub offsets: usize,
    /// Metres per unit of predicted offset.
    pub offset_scale: f64,
    offset: Linear,
    attn: Linear,
    h_in: Linear,
    h_out: Linear,
}

impl Eda {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: &RepresentationSpec,
        offsets: usize,
        offset_scale: f64,
        equivariant: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let group = spec.group;
        let mut blocks = Vec::new();
        for _ in 0..offsets {
            blocks.extend([Block::Irrep(1), Block::Trivial]);
        }
        let offset = Linear::new(store, &format!("{name}.offset"), spec, &RepresentationSpec::new(group, blocks), equivariant, rng)?;
        // offsets start at zero
        for id in offset.params() {
            let v = store.value_mut(id);
            *v = Tensor::zeros(v.shape());
        }
        let attn = Linear::new(store, &format!("{name}.attn"), spec, &RepresentationSpec::trivial(group, offsets), equivariant, rng)?;
        let h_in = Linear::new(store, &format!("{name}.in"), spec, spec, equivariant, rng)?;
        let h_out = Linear::new(store, &format!("{name}.out"), spec, spec, equivariant, rng)?;
        Ok(Self { offsets, offset_scale, offset, attn, h_in, h_out })
    }

    /// Offsets `[N, K, 3]` in metres.
    pub fn offsets<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, c: &TypedVar) -> Result<Var> {
        let n = g.shape(c.var)[0];
        let d = self.offset.forward(g, store, c)?;
        let d = g.scale(d.var, self.offset_scale);
        Ok(g.reshape(d, &[n, self.offsets, 3]))
    }

    /// Attention weights `[N, K]`.
    pub fn weights<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, c: &TypedVar) -> Result<Var> {
        let a = self.attn.forward(g, store, c)?;
        Ok(g.softmax(a.var, 1))
    }

    /// Refined features at `points [N, 3]` whose raw features are `c`.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        tri: &TriplaneFeatures,
        points: Var,
        c: &TypedVar,
    ) -> Result<TypedVar> {
        let n = g.shape(points)[0];
        let k = self.offsets;
        let dim = c.spec.dim();
        let delta = self.offsets(g, store, c)?;
        let base = g.reshape(points, &[n, 1, 3]);
        let moved = g.add(base, delta);
        let moved = g.reshape(moved, &[n * k, 3]);
        let feats = tri.query(g, moved)?;
        let v = self.h_in.forward(g, store, &feats)?;
        let v = g.reshape(v.var, &[n, k, dim]);
        let a = self.weights(g, store, c)?;
        let a = g.reshape(a, &[n, 1, k]);
        let mixed = g.matmul(a, v);
        let mixed = g.reshape(mixed, &[n, dim]);
        let out = self.h_out.forward(g, store, &TypedVar::new(mixed, c.spec.clone()))?;
        Ok(TypedVar::new(g.add(out.var, c.var), c.spec.clone()))
    }

    pub fn h_in(&self) -> &Linear {
        &self.h_in
    }

    pub fn h_out(&self) -> &Linear {
        &self.h_out
    }

    pub fn offset_params(&self) -> Vec<crate::tensor::ParamId> {
        self.offset.params()
    }
}
