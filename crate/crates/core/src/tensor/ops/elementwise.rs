//! Broadcasting binary ops and pointwise unary ops.

use crate::error::{Error, Result};
use crate::tensor::dense::{numel, strides, Tensor};
use crate::tensor::graph::{Graph, Var};
use crate::tensor::scalar::Scalar;

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape(format!(
                    "cannot broadcast {a:?} with {b:?}"
                )))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed at `out_shape`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let off = out_shape.len() - shape.len();
    (0..out_shape.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                s[i - off]
            }
        })
        .collect()
}

/// `f(a[i], b[i])` with numpy broadcasting into `out_shape`.
pub(crate) fn zip_broadcast<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    if a.shape() == out_shape && b.shape() == out_shape {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(out_shape.to_vec(), data).expect("shape");
    }
    let n = numel(out_shape);
    let rank = out_shape.len();
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(n);
    if rank == 0 {
        out.push(f(ad[0], bd[0]));
        return Tensor::new(vec![], out).expect("shape");
    }
    // innermost axis handled in a tight loop
    let last = rank - 1;
    let inner = out_shape[last];
    let (ia, ib) = (sa[last], sb[last]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let outer = if inner == 0 { 0 } else { n / inner };
    for _ in 0..outer {
        let (mut pa, mut pb) = (oa, ob);
        for _ in 0..inner {
            out.push(f(ad[pa], bd[pb]));
            pa += ia;
            pb += ib;
        }
        for d in (0..last).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("shape")
}

/// Sums `t` down to `shape` over broadcast axes.
pub(crate) fn reduce_to<T: Scalar>(t: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if t.shape() == shape {
        return t.clone();
    }
    let out_shape = t.shape();
    let rank = out_shape.len();
    let st = broadcast_strides(shape, out_shape);
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    let mut idx = vec![0usize; rank];
    let mut o = 0usize;
    for &v in t.data() {
        od[o] += v;
        for d in (0..rank).rev() {
            idx[d] += 1;
            o += st[d];
            if idx[d] < out_shape[d] {
                break;
            }
            o -= st[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

impl<T: Scalar> Graph<T> {
    pub fn add(&self, a: Var, b: Var) -> Var {
        self.try_add(a, b).expect("add")
    }

    pub fn try_add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(va.shape(), vb.shape())?;
        let out = zip_broadcast(&va, &vb, &shape, |x, y| x + y);
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        Ok(self.record(out, &[a, b], move |g| {
            vec![Some(reduce_to(g, &sa)), Some(reduce_to(g, &sb))]
        }))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(va.shape(), vb.shape()).expect("sub");
        let out = zip_broadcast(&va, &vb, &shape, |x, y| x - y);
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        self.record(out, &[a, b], move |g| {
            let gb = reduce_to(g, &sb).map(|v| -v);
            vec![Some(reduce_to(g, &sa)), Some(gb)]
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(va.shape(), vb.shape()).expect("mul");
        let out = zip_broadcast(&va, &vb, &shape, |x, y| x * y);
        self.record(out, &[a, b], move |g| {
            let ga = zip_broadcast(g, &vb, g.shape(), |x, y| x * y);
            let gb = zip_broadcast(g, &va, g.shape(), |x, y| x * y);
            vec![
                Some(reduce_to(&ga, va.shape())),
                Some(reduce_to(&gb, vb.shape())),
            ]
        })
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(va.shape(), vb.shape()).expect("div");
        let out = zip_broadcast(&va, &vb, &shape, |x, y| x / y);
        let q = std::rc::Rc::new(out.clone());
        self.record(out, &[a, b], move |g| {
            let ga = zip_broadcast(g, &vb, g.shape(), |x, y| x / y);
            // d(a/b)/db = -q / b
            let gq = zip_broadcast(g, &q, g.shape(), |x, y| -x * y);
            let gb = zip_broadcast(&gq, &vb, g.shape(), |x, y| x / y);
            vec![
                Some(reduce_to(&ga, va.shape())),
                Some(reduce_to(&gb, vb.shape())),
            ]
        })
    }

    fn unary(
        &self,
        x: Var,
        f: impl Fn(T) -> T,
        // derivative from (input, output)
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        let vx = self.value(x);
        let out = vx.map(f);
        let vy = std::rc::Rc::new(out.clone());
        self.record(out, &[x], move |g| {
            let data = g
                .data()
                .iter()
                .zip(vx.data().iter().zip(vy.data()))
                .map(|(&gv, (&xi, &yi))| gv * df(xi, yi))
                .collect();
            vec![Some(Tensor::new(g.shape().to_vec(), data).expect("shape"))]
        })
    }

    pub fn neg(&self, x: Var) -> Var {
        self.unary(x, |v| -v, |_, _| -T::one())
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary(x, move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(x, move |v| v + c, |_, _| T::one())
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            |xi, _| if xi > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    pub fn ln(&self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), |xi, _| T::one() / xi)
    }

    pub fn sqrt(&self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, |v| v * v, |xi, _| xi + xi)
    }

    pub fn softplus(&self, x: Var) -> Var {
        self.unary(x, softplus, |xi, _| sigmoid(xi))
    }

    pub fn sin(&self, x: Var) -> Var {
        self.unary(x, |v| v.sin(), |xi, _| xi.cos())
    }

    pub fn cos(&self, x: Var) -> Var {
        self.unary(x, |v| v.cos(), |xi, _| -xi.sin())
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        self.unary(
            x,
            move |v| v.max(lo).min(hi),
            move |xi, _| {
                if xi >= lo && xi <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(v: T) -> T {
    // log(1 + e^v) computed without overflow
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}
