//! Nonlinearities that commute with the representation on each block.

use super::layer::TypedVar;
use crate::group::Block;
use crate::tensor::{Graph, Scalar};

const NORM_EPS: f64 = 1e-12;

/// ReLU on trivial and regular channels; irrep pairs are scaled by
/// `sigmoid(‖v‖)`. `axis` is the channel axis.
pub fn typed_activation<T: Scalar>(g: &Graph<T>, x: &TypedVar, axis: usize) -> TypedVar {
    let spec = &x.spec;
    let mut pointwise = Vec::new();
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for (b, o) in spec.blocks.iter().zip(spec.offsets()) {
        match b {
            Block::Irrep(w) if *w > 0 => {
                first.push(o);
                second.push(o + 1);
            }
            _ => pointwise.extend(o..o + b.dim(spec.group)),
        }
    }
    if first.is_empty() {
        return TypedVar::new(g.relu(x.var), spec.clone());
    }
    let mut parts = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    if !pointwise.is_empty() {
        let p = g.index_select(x.var, axis, &pointwise);
        parts.push(g.relu(p));
        order.extend(&pointwise);
    }
    let a = g.index_select(x.var, axis, &first);
    let b = g.index_select(x.var, axis, &second);
    let a2 = g.square(a);
    let b2 = g.square(b);
    let s = g.add(a2, b2);
    let s = g.add_scalar(s, NORM_EPS);
    let n = g.sqrt(s);
    let gate = g.sigmoid(n);
    parts.push(g.mul(a, gate));
    parts.push(g.mul(b, gate));
    order.extend(&first);
    order.extend(&second);
    let cat = g.concat(&parts, axis);
    let mut inverse = vec![0; order.len()];
    for (pos, &ch) in order.iter().enumerate() {
        inverse[ch] = pos;
    }
    TypedVar::new(g.index_select(cat, axis, &inverse), spec.clone())
}
