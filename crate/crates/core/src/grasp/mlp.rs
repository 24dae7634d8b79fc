//! Per-point MLPs built from equivariant or plain linear maps.

use rand::Rng;

use crate::error::{Error, Result};
use crate::group::RepresentationSpec;
use crate::steerable::{typed_activation, EquivariantLinear, TypedVar};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor};

/// Linear map on `[N, C]`; the plain variant ignores representation types.
pub enum Linear {
    Equivariant(EquivariantLinear),
    Plain { weight: ParamId, bias: ParamId, out: RepresentationSpec, in_dim: usize },
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_spec: &RepresentationSpec,
        out_spec: &RepresentationSpec,
        equivariant: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if equivariant {
            return Ok(Linear::Equivariant(EquivariantLinear::new(store, name, in_spec, out_spec, true, rng)?));
        }
        let (i, o) = (in_spec.dim(), out_spec.dim());
        let bound = (6.0 / i.max(1) as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), &[o, i], bound, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[o]));
        Ok(Linear::Plain { weight, bias, out: out_spec.clone(), in_dim: i })
    }

    pub fn out_spec(&self) -> &RepresentationSpec {
        match self {
            Linear::Equivariant(l) => l.out_spec(),
            Linear::Plain { out, .. } => out,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: &TypedVar) -> Result<TypedVar> {
        match self {
            Linear::Equivariant(l) => l.forward(g, store, x),
            Linear::Plain { weight, bias, out, in_dim } => {
                if x.spec.dim() != *in_dim {
                    return Err(Error::Shape(format!("linear expects {in_dim} channels, got {}", x.spec.dim())));
                }
                let w = g.param(store, *weight);
                let wt = g.permute(w, &[1, 0]);
                let y = g.matmul(x.var, wt);
                let b = g.param(store, *bias);
                Ok(TypedVar::new(g.add(y, b), out.clone()))
            }
        }
    }

    /// Every parameter of the map.
    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Linear::Equivariant(l) => l.kernel.coefficient_params().into_iter().chain(l.bias_param()).collect(),
            Linear::Plain { weight, bias, .. } => vec![*weight, *bias],
        }
    }
}

/// Linear maps through the given representations with typed nonlinearities in between.
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        specs: &[RepresentationSpec],
        equivariant: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layers = specs
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), &w[0], &w[1], equivariant, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: &TypedVar) -> Result<TypedVar> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = typed_activation(g, &h, 1);
            }
            h = l.forward(g, store, &h)?;
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn out_spec(&self) -> &RepresentationSpec {
        self.layers.last().expect("non-empty mlp").out_spec()
    }
}
