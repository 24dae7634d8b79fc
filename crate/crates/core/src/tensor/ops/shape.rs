//! Reshaping, slicing, gathering, reductions, softmax and matmul.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::dense::{numel, Tensor};
use crate::tensor::graph::{Graph, Var};
use crate::tensor::scalar::{matmul_into, Scalar};

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(Error::Axis { axis, rank })
    } else {
        Ok(())
    }
}

fn copy_block<T: Scalar>(
    src: &[T],
    src_shape: (usize, usize, usize),
    src_start: usize,
    dst: &mut [T],
    dst_shape: (usize, usize, usize),
    dst_start: usize,
    len: usize,
    accumulate: bool,
) {
    let (outer, sn, inner) = src_shape;
    let (_, dn, _) = dst_shape;
    for o in 0..outer {
        let s = (o * sn + src_start) * inner;
        let d = (o * dn + dst_start) * inner;
        let n = len * inner;
        if accumulate {
            for (a, &b) in dst[d..d + n].iter_mut().zip(&src[s..s + n]) {
                *a += b;
            }
        } else {
            dst[d..d + n].copy_from_slice(&src[s..s + n]);
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let vx = self.value(x);
        let old = vx.shape().to_vec();
        let out = (*vx).clone().reshaped(shape).expect("reshape");
        self.record(out, &[x], move |g| {
            vec![Some(g.clone().reshaped(&old).expect("shape"))]
        })
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Var {
        let out = self.value(x).permuted(axes);
        let mut inv = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        self.record(out, &[x], move |g| vec![Some(g.permuted(&inv))])
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        check_axis(axis, vx.rank()).expect("narrow");
        assert!(start + len <= vx.shape()[axis], "narrow out of range");
        let in_shape = vx.shape().to_vec();
        let mut shape = in_shape.clone();
        shape[axis] = len;
        let (outer, n, inner) = split_axis(&in_shape, axis);
        let mut out = Tensor::zeros(&shape);
        copy_block(vx.data(), (outer, n, inner), start, out.data_mut(), (outer, len, inner), 0, len, false);
        self.record(out, &[x], move |g| {
            let mut gx = Tensor::zeros(&in_shape);
            copy_block(g.data(), (outer, len, inner), 0, gx.data_mut(), (outer, n, inner), start, len, false);
            vec![Some(gx)]
        })
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let values: Vec<Rc<Tensor<T>>> = xs.iter().map(|&x| self.value(x)).collect();
        let rank = values[0].rank();
        check_axis(axis, rank).expect("concat");
        let mut shape = values[0].shape().to_vec();
        let mut lens = Vec::with_capacity(xs.len());
        for v in &values {
            let s = v.shape();
            assert!(
                s.len() == rank
                    && s.iter().zip(&shape).enumerate().all(|(i, (a, b))| i == axis || a == b),
                "concat shape mismatch {:?} vs {:?}",
                s,
                shape
            );
            lens.push(s[axis]);
        }
        shape[axis] = lens.iter().sum();
        let (outer, total, inner) = split_axis(&shape, axis);
        let mut out = Tensor::zeros(&shape);
        let mut start = 0;
        for (v, &l) in values.iter().zip(&lens) {
            copy_block(v.data(), (outer, l, inner), 0, out.data_mut(), (outer, total, inner), start, l, false);
            start += l;
        }
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        self.record(out, xs, move |g| {
            let mut start = 0;
            shapes
                .iter()
                .zip(&lens)
                .map(|(s, &l)| {
                    let mut gx = Tensor::zeros(s);
                    copy_block(g.data(), (outer, total, inner), start, gx.data_mut(), (outer, l, inner), 0, l, false);
                    start += l;
                    Some(gx)
                })
                .collect()
        })
    }

    /// Selects entries `idx` along `axis` (repeats allowed).
    pub fn index_select(&self, x: Var, axis: usize, idx: &[usize]) -> Var {
        let vx = self.value(x);
        check_axis(axis, vx.rank()).expect("index_select");
        let in_shape = vx.shape().to_vec();
        let (outer, n, inner) = split_axis(&in_shape, axis);
        assert!(idx.iter().all(|&i| i < n), "index_select out of range");
        let mut shape = in_shape.clone();
        shape[axis] = idx.len();
        let k = idx.len();
        let mut out = Tensor::zeros(&shape);
        for (j, &i) in idx.iter().enumerate() {
            copy_block(vx.data(), (outer, n, inner), i, out.data_mut(), (outer, k, inner), j, 1, false);
        }
        let idx = idx.to_vec();
        self.record(out, &[x], move |g| {
            let mut gx = Tensor::zeros(&in_shape);
            for (j, &i) in idx.iter().enumerate() {
                copy_block(g.data(), (outer, k, inner), j, gx.data_mut(), (outer, n, inner), i, 1, true);
            }
            vec![Some(gx)]
        })
    }

    /// `out.flat[i] = x.flat[idx[i]]`, reshaped to `shape`.
    pub fn gather_flat(&self, x: Var, idx: Rc<Vec<usize>>, shape: &[usize]) -> Var {
        let vx = self.value(x);
        assert_eq!(numel(shape), idx.len(), "gather_flat shape");
        let src = vx.data();
        let data = idx.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape.to_vec(), data).expect("shape");
        let in_shape = vx.shape().to_vec();
        self.record(out, &[x], move |g| {
            let mut gx = Tensor::zeros(&in_shape);
            let gd = gx.data_mut();
            for (&i, &v) in idx.iter().zip(g.data()) {
                gd[i] += v;
            }
            vec![Some(gx)]
        })
    }

    pub fn sum(&self, x: Var) -> Var {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let out = Tensor::scalar(vx.sum());
        self.record(out, &[x], move |g| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over `axis`; the axis is kept with extent 1 when `keep` is set.
    pub fn sum_axis(&self, x: Var, axis: usize, keep: bool) -> Var {
        let vx = self.value(x);
        check_axis(axis, vx.rank()).expect("sum_axis");
        let in_shape = vx.shape().to_vec();
        let (outer, n, inner) = split_axis(&in_shape, axis);
        let mut shape = in_shape.clone();
        if keep {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let mut out = Tensor::zeros(&shape);
        {
            let (src, dst) = (vx.data(), out.data_mut());
            for o in 0..outer {
                for a in 0..n {
                    let s = (o * n + a) * inner;
                    for (d, &v) in dst[o * inner..(o + 1) * inner].iter_mut().zip(&src[s..s + inner]) {
                        *d += v;
                    }
                }
            }
        }
        self.record(out, &[x], move |g| {
            let mut gx = Tensor::zeros(&in_shape);
            let (src, dst) = (g.data(), gx.data_mut());
            for o in 0..outer {
                for a in 0..n {
                    let d = (o * n + a) * inner;
                    dst[d..d + inner].copy_from_slice(&src[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn mean_axis(&self, x: Var, axis: usize, keep: bool) -> Var {
        let n = self.value(x).shape()[axis].max(1);
        let s = self.sum_axis(x, axis, keep);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Var {
        let vx = self.value(x);
        check_axis(axis, vx.rank()).expect("softmax");
        let (outer, n, inner) = split_axis(vx.shape(), axis);
        let mut out = (*vx).clone();
        {
            let d = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * n + a) * inner + i;
                    let m = (0..n).map(|a| d[at(a)]).fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for a in 0..n {
                        let e = (d[at(a)] - m).exp();
                        d[at(a)] = e;
                        z += e;
                    }
                    for a in 0..n {
                        d[at(a)] /= z;
                    }
                }
            }
        }
        let y = Rc::new(out.clone());
        self.record(out, &[x], move |g| {
            let mut gx = Tensor::zeros(y.shape());
            let (yd, gd, od) = (y.data(), g.data(), gx.data_mut());
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * n + a) * inner + i;
                    let dot: T = (0..n).map(|a| yd[at(a)] * gd[at(a)]).sum();
                    for a in 0..n {
                        od[at(a)] = yd[at(a)] * (gd[at(a)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Matrix product of `[m, k] @ [k, n]`, or batched `[b, m, k] @ [b, k, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (sa[0], sa[1], sa[2], sb[2]),
            _ => panic!("matmul shape mismatch {sa:?} @ {sb:?}"),
        };
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let mut out = Tensor::zeros(&shape);
        for i in 0..batch {
            matmul_into(
                &va.data()[i * m * k..(i + 1) * m * k],
                &vb.data()[i * k * n..(i + 1) * k * n],
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
                m, k, n, false, false, false,
            );
        }
        self.record(out, &[a, b], move |g| {
            let mut ga = Tensor::zeros(&sa);
            let mut gb = Tensor::zeros(&sb);
            for i in 0..batch {
                let gi = &g.data()[i * m * n..(i + 1) * m * n];
                matmul_into(gi, &vb.data()[i * k * n..(i + 1) * k * n], &mut ga.data_mut()[i * m * k..(i + 1) * m * k], m, n, k, false, true, false);
                matmul_into(&va.data()[i * m * k..(i + 1) * m * k], gi, &mut gb.data_mut()[i * k * n..(i + 1) * k * n], k, m, n, true, false, false);
            }
            vec![Some(ga), Some(gb)]
        })
    }
}
