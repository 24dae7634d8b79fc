//! Grasp-conditioned attention over gripper-frame control points.

use nalgebra::Matrix3;
use rand::Rng;

use super::mlp::Linear;
use crate::error::{Error, Result};
use crate::group::RepresentationSpec;
use crate::steerable::TypedVar;
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::triplane::TriplaneFeatures;

/// `c̄(p, R) = h_out(softmax_l(K_l·Q / √d) V_l) + c(p)` where keys and values
/// are read at the control points `R u_l + p`.
pub struct GraspDam {
    pub points: usize,
    control: ParamId,
    h_q: Linear,
    h_k: Linear,
    h_v: Linear,
    h_out: Linear,
    key_dim: usize,
}

impl GraspDam {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: &RepresentationSpec,
        key_spec: &RepresentationSpec,
        points: usize,
        extent: f64,
        equivariant: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if points == 0 {
            return Err(Error::Config("GraspDAM needs at least one control point".into()));
        }
        let control = store.add_uniform(format!("{name}.control"), &[points, 3], extent, rng);
        let h_q = Linear::new(store, &format!("{name}.q"), spec, key_spec, equivariant, rng)?;
        let h_k = Linear::new(store, &format!("{name}.k"), spec, key_spec, equivariant, rng)?;
        let h_v = Linear::new(store, &format!("{name}.v"), spec, spec, equivariant, rng)?;
        let h_out = Linear::new(store, &format!("{name}.out"), spec, spec, equivariant, rng)?;
        Ok(Self { points, control, h_q, h_k, h_v, h_out, key_dim: key_spec.dim() })
    }

    pub fn control_param(&self) -> ParamId {
        self.control
    }

    pub fn h_v(&self) -> &Linear {
        &self.h_v
    }

    pub fn h_out(&self) -> &Linear {
        &self.h_out
    }

    /// Control points in the world frame, `[N, L, 3]`.
    pub fn control_points<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, centers: Var, rotations: &[Matrix3<f64>]) -> Result<Var> {
        let n = rotations.len();
        if g.shape(centers) != [n, 3] {
            return Err(Error::Shape(format!("{} poses for centres {:?}", n, g.shape(centers))));
        }
        // columns 3n..3n+3 hold R_nᵀ
        let mut rt = vec![0.0; 3 * 3 * n];
        for (k, r) in rotations.iter().enumerate() {
            for i in 0..3 {
                for j in 0..3 {
                    rt[i * 3 * n + 3 * k + j] = r[(j, i)];
                }
            }
        }
        let u = g.param(store, self.control);
        let rt = g.constant(Tensor::from_f64(vec![3, 3 * n], &rt)?);
        let local = g.matmul(u, rt);
        let local = g.reshape(local, &[self.points, n, 3]);
        let local = g.permute(local, &[1, 0, 2]);
        let c = g.reshape(centers, &[n, 1, 3]);
        Ok(g.add(local, c))
    }

    /// Classifier features for grasps `(centers [N, 3], rotations)`; `query`
    /// holds the features used for the queries and the residual.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        tri: &TriplaneFeatures,
        centers: Var,
        rotations: &[Matrix3<f64>],
        query: &TypedVar,
    ) -> Result<TypedVar> {
        let n = rotations.len();
        let l = self.points;
        let dim = query.spec.dim();
        let pts = self.control_points(g, store, centers, rotations)?;
        let pts = g.reshape(pts, &[n * l, 3]);
        let c = tri.query(g, pts)?;
        let k = self.h_k.forward(g, store, &c)?;
        let k = g.reshape(k.var, &[n, l, self.key_dim]);
        let v = self.h_v.forward(g, store, &c)?;
        let v = g.reshape(v.var, &[n, l, dim]);
        let q = self.h_q.forward(g, store, query)?;
        let q = g.reshape(q.var, &[n, self.key_dim, 1]);
        let logits = g.matmul(k, q);
        let logits = g.reshape(logits, &[n, l]);
        let logits = g.scale(logits, 1.0 / (self.key_dim as f64).sqrt());
        let a = g.softmax(logits, 1);
        let a = g.reshape(a, &[n, 1, l]);
        let mixed = g.matmul(a, v);
        let mixed = g.reshape(mixed, &[n, dim]);
        let out = self.h_out.forward(g, store, &TypedVar::new(mixed, query.spec.clone()))?;
        Ok(TypedVar::new(g.add(out.var, query.var), query.spec.clone()))
    }
}
