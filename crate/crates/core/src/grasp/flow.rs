//! Flow matching over 6D rotations with an equivariant velocity network.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::mlp::Mlp;
use super::rotation::six_d_spec;
use crate::error::{Error, Result};
use crate::group::RepresentationSpec;
use crate::steerable::TypedVar;
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};

/// Trivial-typed sinusoidal features `[sin(kπt), cos(kπt)]`, `k = 1..=E/2`.
pub fn time_embedding<T: Scalar>(t: &[f64], features: usize) -> Tensor<T> {
    let half = features / 2;
    let data = t
        .iter()
        .flat_map(|&t| (1..=half).flat_map(move |k| [(k as f64 * PI * t).sin(), (k as f64 * PI * t).cos()]))
        .collect::<Vec<f64>>();
    Tensor::from_f64(vec![t.len(), 2 * half], &data).expect("embedding shape")
}

/// Interpolant `r_t = t r_1 + (1 - t) r_0` and its regression target `u = r_1 - r_t`.
pub fn flow_pair(r0: &[f64; 6], r1: &[f64; 6], t: f64) -> ([f64; 6], [f64; 6]) {
    let rt: [f64; 6] = std::array::from_fn(|i| r1[i] * t + r0[i] * (1.0 - t));
    let u = std::array::from_fn(|i| r1[i] - rt[i]);
    (rt, u)
}

/// Velocity field `v(r_t, c(p), t)`: input `ρ₁³ ⊕ ρ_c ⊕ trivial^E`, output `ρ₁³`.
pub struct FlowNet {
    pub time_features: usize,
    mlp: Mlp,
    feature_dim: usize,
}

impl FlowNet {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        feature_spec: &RepresentationSpec,
        hidden: &RepresentationSpec,
        time_features: usize,
        equivariant: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if time_features == 0 || time_features % 2 != 0 {
            return Err(Error::Config(format!("time_features must be even and positive, got {time_features}")));
        }
        let group = feature_spec.group;
        let input = six_d_spec(group).concat(feature_spec)?.concat(&RepresentationSpec::trivial(group, time_features))?;
        let specs = [input, hidden.clone(), hidden.clone(), six_d_spec(group)];
        let mlp = Mlp::new(store, name, &specs, equivariant, rng)?;
        Ok(Self { time_features, mlp, feature_dim: feature_spec.dim() })
    }

    pub fn input_spec(&self, feature_spec: &RepresentationSpec) -> RepresentationSpec {
        let group = feature_spec.group;
        six_d_spec(group)
            .concat(feature_spec)
            .and_then(|s| s.concat(&RepresentationSpec::trivial(group, self.time_features)))
            .expect("same group")
    }

    /// `[N, 6]` velocities for states `r [N, 6]`, features `c [N, D]` and times `t`.
    pub fn velocity<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, r: Var, c: &TypedVar, t: &[f64]) -> Result<Var> {
        let n = g.shape(r)[0];
        if g.shape(c.var) != [n, self.feature_dim] || t.len() != n {
            return Err(Error::Shape(format!(
                "velocity inputs disagree: r {:?}, c {:?}, {} times",
                g.shape(r),
                g.shape(c.var),
                t.len()
            )));
        }
        let emb = g.constant(time_embedding(t, self.time_features));
        let x = g.concat(&[r, c.var, emb], 1);
        let spec = self.input_spec(&c.spec);
        Ok(self.mlp.forward(g, store, &TypedVar::new(x, spec))?.var)
    }

    /// Mean over the batch of `‖u - v(r_t, c, t)‖²` with `r_0 ~ N(0, 1)` and `t ~ U[0, 1]`.
    pub fn loss<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        c: &TypedVar,
        targets: &[[f64; 6]],
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let n = targets.len();
        let mut rt = Vec::with_capacity(6 * n);
        let mut u = Vec::with_capacity(6 * n);
        let mut ts = Vec::with_capacity(n);
        for r1 in targets {
            let r0: [f64; 6] = std::array::from_fn(|_| StandardNormal.sample(rng));
            let t: f64 = rng.gen_range(0.0..1.0);
            let (a, b) = flow_pair(&r0, r1, t);
            rt.extend(a);
            u.extend(b);
            ts.push(t);
        }
        let r = g.constant(Tensor::from_f64(vec![n, 6], &rt)?);
        let v = self.velocity(g, store, r, c, &ts)?;
        let target = g.constant(Tensor::from_f64(vec![n, 6], &u)?);
        let d = g.sub(v, target);
        let sq = g.square(d);
        let per = g.sum_axis(sq, 1, false);
        Ok(g.mean(per))
    }

    /// Euler integration of `dr/dt = v(r, c, t) / (1 - t)` over `steps` uniform
    /// steps from the given initial states. With `v ≈ r_1 - r_t` this is the
    /// transport velocity of the interpolant.
    pub fn sample<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        features: &Tensor<T>,
        spec: &RepresentationSpec,
        r0: Tensor<T>,
        steps: usize,
    ) -> Result<Tensor<T>> {
        let n = r0.shape()[0];
        let mut r = r0;
        for k in 0..steps {
            let t = k as f64 / steps as f64;
            let g = Graph::inference();
            let cv = TypedVar::new(g.constant(features.clone()), spec.clone());
            let rv = g.constant(r.clone());
            let v = self.velocity(&g, store, rv, &cv, &vec![t; n])?;
            let v = g.value(v);
            let h = T::of(1.0 / (steps as f64 * (1.0 - t)));
            for (x, &dv) in r.data_mut().iter_mut().zip(v.data()) {
                *x += h * dv;
            }
            if !r.is_finite() {
                return Err(Error::Numeric(format!("flow state became non-finite at step {k}")));
            }
        }
        Ok(r)
    }

    pub fn params(&self) -> Vec<crate::tensor::ParamId> {
        self.mlp.params()
    }
}
