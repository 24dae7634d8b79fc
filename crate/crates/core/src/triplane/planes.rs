//! Tri-plane projection, side-to-table-plane reconstruction and feature queries.

use crate::error::{Error, Result};
use crate::group::GridGeometry;
use crate::steerable::TypedVar;
use crate::tensor::{Graph, Padding, Scalar, Tensor, Var};

/// Axis-mean projections of a `[C, Z, Y, X]` volume: XY `[C, Y, X]`,
/// XZ `[C, Z, X]` and YZ `[C, Z, Y]`.
pub fn project_to_planes<T: Scalar>(g: &Graph<T>, volume: Var) -> Result<(Var, Var, Var)> {
    let s = g.shape(volume);
    if s.len() != 4 || s[1] != s[2] || s[2] != s[3] {
        return Err(Error::Geometry(format!("tri-plane projection needs a cubic volume, got {s:?}")));
    }
    Ok((g.mean_axis(volume, 1, false), g.mean_axis(volume, 2, false), g.mean_axis(volume, 3, false)))
}

/// `f̄(y, x) = mean_z f_xz(z, x) + mean_z f_yz(z, y)`, a `[C, Y, X]` field.
pub fn side_to_tableplane<T: Scalar>(g: &Graph<T>, xz: Var, yz: Var) -> Result<Var> {
    let (a, b) = (g.shape(xz), g.shape(yz));
    if a.len() != 3 || a != b {
        return Err(Error::Geometry(format!("side planes disagree: {a:?} vs {b:?}")));
    }
    let (c, n) = (a[0], a[2]);
    let fx = g.mean_axis(xz, 1, false);
    let fy = g.mean_axis(yz, 1, false);
    let fx = g.reshape(fx, &[c, 1, n]);
    let fy = g.reshape(fy, &[c, n, 1]);
    Ok(g.add(fx, fy))
}

/// Encoder output: the equivariant table plane and the two side planes.
pub struct TriplaneFeatures {
    pub xy: TypedVar,
    pub xz: Var,
    pub yz: Var,
    pub geometry: GridGeometry,
}

impl TriplaneFeatures {
    pub fn side_channels<T: Scalar>(&self, g: &Graph<T>) -> usize {
        g.shape(self.xz)[0]
    }

    /// Copies the planes from `from` into `to` as constants.
    pub fn transfer<T: Scalar>(&self, from: &Graph<T>, to: &Graph<T>) -> TriplaneFeatures {
        let copy = |v: Var| to.constant((*from.value(v)).clone());
        TriplaneFeatures {
            xy: TypedVar::new(copy(self.xy.var), self.xy.spec.clone()),
            xz: copy(self.xz),
            yz: copy(self.yz),
            geometry: self.geometry.clone(),
        }
    }

    /// `c(p) = [f_xy(x, y), f_xz(x, z) + f_yz(y, z)]` for world points
    /// `[N, 3]`, typed as the XY spec followed by trivial side channels.
    /// Points outside the grid read clamped boundary values.
    pub fn query<T: Scalar>(&self, g: &Graph<T>, points: Var) -> Result<TypedVar> {
        let s = g.shape(points);
        if s.len() != 2 || s[1] != 3 {
            return Err(Error::Shape(format!("query points must be [N, 3], got {s:?}")));
        }
        let geo = &self.geometry;
        let origin = Tensor::from_f64(vec![1, 3], &geo.origin)?;
        let shifted = g.sub(points, g.constant(origin));
        let idx = g.scale(shifted, 1.0 / geo.cell);
        let idx = g.add_scalar(idx, -0.5);
        let pair = |a: usize, b: usize| g.index_select(idx, 1, &[a, b]);
        let f_xy = g.bilinear_sample(self.xy.var, pair(1, 0), Padding::Clamp)?;
        let f_xz = g.bilinear_sample(self.xz, pair(2, 0), Padding::Clamp)?;
        let f_yz = g.bilinear_sample(self.yz, pair(2, 1), Padding::Clamp)?;
        let side = g.add(f_xz, f_yz);
        let out = g.concat(&[f_xy, side], 1);
        let spec = self
            .xy
            .spec
            .concat(&crate::group::RepresentationSpec::trivial(self.xy.spec.group, self.side_channels(g)))?;
        Ok(TypedVar::new(out, spec))
    }
}
