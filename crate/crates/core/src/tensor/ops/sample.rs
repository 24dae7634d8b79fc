//! Bilinear / trilinear sampling at continuous index coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::dense::Tensor;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::scalar::Scalar;

/// Treatment of coordinates outside the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Coordinates are clamped to the boundary nodes.
    #[default]
    Clamp,
    /// Cells outside the grid read as zero.
    Zeros,
}

/// Per-axis interpolation stencil: two node indices, their weights and the
/// derivative of the weights with respect to the coordinate.
struct Stencil<T> {
    idx: [Option<usize>; 2],
    w: [T; 2],
    dw: [T; 2],
}

fn stencil<T: Scalar>(coord: T, n: usize, padding: Padding) -> Stencil<T> {
    let (one, zero) = (T::one(), T::zero());
    match padding {
        Padding::Clamp => {
            let hi = T::of((n - 1) as f64);
            let inside = coord >= zero && coord <= hi;
            let c = coord.max(zero).min(hi);
            if n == 1 {
                return Stencil { idx: [Some(0), None], w: [one, zero], dw: [zero, zero] };
            }
            let i0 = (c.floor().f64() as usize).min(n - 2);
            let f = c - T::of(i0 as f64);
            let g = if inside { one } else { zero };
            Stencil { idx: [Some(i0), Some(i0 + 1)], w: [one - f, f], dw: [-g, g] }
        }
        Padding::Zeros => {
            let fl = coord.floor();
            let f = coord - fl;
            let i0 = fl.f64() as i64;
            let pick = |i: i64| (i >= 0 && (i as usize) < n).then_some(i as usize);
            Stencil { idx: [pick(i0), pick(i0 + 1)], w: [one - f, f], dw: [-one, one] }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Samples `field[C, H, W]` at `points[N, 2]` given as (row, col) -> `[N, C]`.
    pub fn bilinear_sample(&self, field: Var, points: Var, padding: Padding) -> Result<Var> {
        self.sample_nd::<2>(field, points, padding)
    }

    /// Samples `field[C, D, H, W]` at `points[N, 3]` given as (d, h, w) -> `[N, C]`.
    pub fn trilinear_sample(&self, field: Var, points: Var, padding: Padding) -> Result<Var> {
        self.sample_nd::<3>(field, points, padding)
    }

    fn sample_nd<const D: usize>(&self, field: Var, points: Var, padding: Padding) -> Result<Var> {
        let (vf, vp) = (self.value(field), self.value(points));
        let (sf, sp) = (vf.shape().to_vec(), vp.shape().to_vec());
        if sf.len() != D + 1 || sp.len() != 2 || sp[1] != D {
            return Err(Error::Shape(format!(
                "{D}-linear sampling expects field of rank {} and points [N,{D}], got {sf:?} and {sp:?}",
                D + 1
            )));
        }
        let c = sf[0];
        let dims: Vec<usize> = sf[1..].to_vec();
        let plane: usize = dims.iter().product();
        let n = sp[0];
        // corner list per point: (flat spatial offset, weight, d weight / d coord per axis)
        let mut corners: Vec<(usize, T, [T; D])> = Vec::with_capacity(n << D);
        let mut counts = Vec::with_capacity(n);
        for pt in vp.data().chunks_exact(D) {
            let st: Vec<Stencil<T>> = (0..D).map(|a| stencil(pt[a], dims[a], padding)).collect();
            let before = corners.len();
            'corner: for mask in 0..(1usize << D) {
                let mut off = 0;
                let mut w = T::one();
                for (a, s) in st.iter().enumerate() {
                    let b = (mask >> (D - 1 - a)) & 1;
                    let Some(i) = s.idx[b] else { continue 'corner };
                    off = off * dims[a] + i;
                    w *= s.w[b];
                }
                let mut dw = [T::zero(); D];
                for (a, slot) in dw.iter_mut().enumerate() {
                    let mut v = T::one();
                    for (e, s) in st.iter().enumerate() {
                        let b = (mask >> (D - 1 - e)) & 1;
                        v *= if e == a { s.dw[b] } else { s.w[b] };
                    }
                    *slot = v;
                }
                corners.push((off, w, dw));
            }
            counts.push(corners.len() - before);
        }
        let fd = vf.data();
        let mut out = Tensor::zeros(&[n, c]);
        {
            let od = out.data_mut();
            let mut k = 0;
            for (i, &cnt) in counts.iter().enumerate() {
                for &(off, w, _) in &corners[k..k + cnt] {
                    for ch in 0..c {
                        od[i * c + ch] += w * fd[ch * plane + off];
                    }
                }
                k += cnt;
            }
        }
        Ok(self.record(out, &[field, points], move |g| {
            let gd = g.data();
            let fd = vf.data();
            let mut gf = Tensor::zeros(&sf);
            let mut gp = Tensor::zeros(&sp);
            {
                let (gfd, gpd) = (gf.data_mut(), gp.data_mut());
                let mut k = 0;
                for (i, &cnt) in counts.iter().enumerate() {
                    for &(off, w, dw) in &corners[k..k + cnt] {
                        let mut dot = T::zero();
                        for ch in 0..c {
                            let gv = gd[i * c + ch];
                            gfd[ch * plane + off] += w * gv;
                            dot += gv * fd[ch * plane + off];
                        }
                        for a in 0..D {
                            gpd[i * D + a] += dot * dw[a];
                        }
                    }
                    k += cnt;
                }
            }
            vec![Some(gf), Some(gp)]
        }))
    }
}
