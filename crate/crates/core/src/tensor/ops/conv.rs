//! Dense cross-correlation in 2D/3D via im2col, and resolution changes.

use crate::error::{Error, Result};
use crate::tensor::dense::Tensor;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::scalar::{matmul_into, Scalar};

#[derive(Clone, Copy)]
struct Geom {
    cin: usize,
    dims: [usize; 3],
    k: [usize; 3],
    stride: usize,
    pad: [usize; 3],
    out: [usize; 3],
}

impl Geom {
    fn taps(&self) -> usize {
        self.k[0] * self.k[1] * self.k[2]
    }

    fn positions(&self) -> usize {
        self.out[0] * self.out[1] * self.out[2]
    }

    /// Calls `f(col_row, col_col, src_offset)` for every in-bounds im2col entry.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let [d, h, w] = self.dims;
        let [od, oh, ow] = self.out;
        let p = self.positions();
        let mut row = 0;
        for c in 0..self.cin {
            for a in 0..self.k[0] {
                for b in 0..self.k[1] {
                    for e in 0..self.k[2] {
                        let base = row * p;
                        for z in 0..od {
                            let iz = (z * self.stride + a) as isize - self.pad[0] as isize;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for y in 0..oh {
                                let iy = (y * self.stride + b) as isize - self.pad[1] as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let src_row = ((c * d + iz as usize) * h + iy as usize) * w;
                                let dst_row = base + (z * oh + y) * ow;
                                for x in 0..ow {
                                    let ix = (x * self.stride + e) as isize - self.pad[2] as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    f(dst_row + x, src_row + ix as usize);
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

fn geometry(x: &[usize], w: &[usize], stride: usize, pad: [usize; 3]) -> Result<(usize, Geom)> {
    if x.len() != 4 || w.len() != 5 || w[1] != x[0] || stride == 0 {
        return Err(Error::Shape(format!(
            "conv input {x:?} incompatible with kernel {w:?} (stride {stride})"
        )));
    }
    let mut out = [0; 3];
    for i in 0..3 {
        let span = x[i + 1] + 2 * pad[i];
        if span < w[i + 2] {
            return Err(Error::Shape(format!("kernel {w:?} larger than padded input {x:?}")));
        }
        out[i] = (span - w[i + 2]) / stride + 1;
    }
    Ok((
        w[0],
        Geom {
            cin: x[0],
            dims: [x[1], x[2], x[3]],
            k: [w[2], w[3], w[4]],
            stride,
            pad,
            out,
        },
    ))
}

impl<T: Scalar> Graph<T> {
    /// `x[C_in, H, W]`, `w[C_out, C_in, kh, kw]` -> `[C_out, H', W']`.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 {
            return Err(Error::Shape(format!("conv2d expects [C,H,W] and [O,C,kh,kw], got {sx:?}, {sw:?}")));
        }
        let x3 = self.reshape(x, &[sx[0], 1, sx[1], sx[2]]);
        let w3 = self.reshape(w, &[sw[0], sw[1], 1, sw[2], sw[3]]);
        let y = self.conv_nd(x3, w3, stride, [0, padding, padding])?;
        let sy = self.shape(y);
        Ok(self.reshape(y, &[sy[0], sy[2], sy[3]]))
    }

    /// `x[C_in, D, H, W]`, `w[C_out, C_in, kd, kh, kw]` -> `[C_out, D', H', W']`.
    pub fn conv3d(&self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.conv_nd(x, w, stride, [padding; 3])
    }

    fn conv_nd(&self, x: Var, w: Var, stride: usize, pad: [usize; 3]) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (cout, g) = geometry(vx.shape(), vw.shape(), stride, pad)?;
        let rows = g.cin * g.taps();
        let p = g.positions();
        let mut cols = vec![T::zero(); rows * p];
        let xd = vx.data();
        g.for_each(|dst, src| cols[dst] = xd[src]);
        let mut out = Tensor::zeros(&[cout, g.out[0], g.out[1], g.out[2]]);
        matmul_into(vw.data(), &cols, out.data_mut(), cout, rows, p, false, false, false);
        let (sx, sw) = (vx.shape().to_vec(), vw.shape().to_vec());
        let need_x = self.requires_grad(x);
        Ok(self.record(out, &[x, w], move |gy| {
            let mut gw = Tensor::zeros(&sw);
            matmul_into(gy.data(), &cols, gw.data_mut(), cout, p, rows, false, true, false);
            let gx = need_x.then(|| {
                let mut gcols = vec![T::zero(); rows * p];
                matmul_into(vw.data(), gy.data(), &mut gcols, rows, cout, p, true, false, false);
                let mut gx = Tensor::zeros(&sx);
                let gd = gx.data_mut();
                g.for_each(|dst, src| gd[src] += gcols[dst]);
                gx
            });
            vec![gx, Some(gw)]
        }))
    }

    /// 2×2 mean pooling over the last two axes of `[C, H, W]`.
    pub fn avg_pool2(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::Geometry(format!("avg_pool2 needs even [C,H,W], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1] / 2, s[2] / 2);
        let quarter = T::of(0.25);
        let mut out = Tensor::zeros(&[c, h, w]);
        {
            let (src, dst) = (vx.data(), out.data_mut());
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let at = |dy: usize, dx: usize| src[(ch * s[1] + 2 * y + dy) * s[2] + 2 * xx + dx];
                        dst[(ch * h + y) * w + xx] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) * quarter;
                    }
                }
            }
        }
        Ok(self.record(out, &[x], move |g| {
            let mut gx = Tensor::zeros(&s);
            let (src, dst) = (g.data(), gx.data_mut());
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let v = src[(ch * h + y) * w + xx] * quarter;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                dst[(ch * s[1] + 2 * y + dy) * s[2] + 2 * xx + dx] = v;
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Nearest-neighbour ×2 upsampling of `[C, H, W]`.
    pub fn upsample2(&self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        assert_eq!(s.len(), 3, "upsample2 expects [C,H,W]");
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
        {
            let (src, dst) = (vx.data(), out.data_mut());
            for ch in 0..c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dst[(ch * 2 * h + y) * 2 * w + xx] = src[(ch * h + y / 2) * w + xx / 2];
                    }
                }
            }
        }
        self.record(out, &[x], move |g| {
            let mut gx = Tensor::zeros(&s);
            let (src, dst) = (g.data(), gx.data_mut());
            for ch in 0..c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dst[(ch * h + y / 2) * w + xx / 2] += src[(ch * 2 * h + y) * 2 * w + xx];
                    }
                }
            }
            vec![Some(gx)]
        })
    }
}
