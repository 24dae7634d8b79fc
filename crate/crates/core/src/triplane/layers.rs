//! Conventional convolutions used by the side branch and the baseline encoder.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

fn bound(fan_in: usize) -> f64 {
    (6.0 / fan_in.max(1) as f64).sqrt()
}

/// Plain 2D convolution with "same" padding. With `mirror` set the kernel is
/// symmetrised under reflection of its last axis, so the layer commutes with
/// `flip_last`.
pub struct PlainConv2d {
    pub size: usize,
    pub mirror: bool,
    weight: ParamId,
    bias: ParamId,
}

impl PlainConv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        size: usize,
        mirror: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[cout, cin, size, size], bound(cin * size * size), rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { size, mirror, weight, bias }
    }

    pub fn kernel<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>) -> Var {
        let w = g.param(store, self.weight);
        if !self.mirror {
            return w;
        }
        let rev: Vec<usize> = (0..self.size).rev().collect();
        let f = g.index_select(w, 3, &rev);
        let s = g.add(w, f);
        g.scale(s, 0.5)
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = self.kernel(g, store);
        let y = g.conv2d(x, w, 1, self.size / 2)?;
        let b = g.param(store, self.bias);
        let c = g.shape(b)[0];
        let b = g.reshape(b, &[c, 1, 1]);
        Ok(g.add(y, b))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Plain 3D convolution with "same" padding.
pub struct PlainConv3d {
    pub size: usize,
    weight: ParamId,
    bias: ParamId,
}

impl PlainConv3d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        size: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let k3 = size * size * size;
        let weight = store.add_uniform(format!("{name}.weight"), &[cout, cin, size, size, size], bound(cin * k3), rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { size, weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.conv3d(x, w, 1, self.size / 2)?;
        let b = g.param(store, self.bias);
        let c = g.shape(b)[0];
        let b = g.reshape(b, &[c, 1, 1, 1]);
        Ok(g.add(y, b))
    }
}
