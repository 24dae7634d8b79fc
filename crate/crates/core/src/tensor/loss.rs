//! Training losses built on the tape.

use std::rc::Rc;

use super::dense::Tensor;
use super::graph::{Graph, Var};
use super::scalar::Scalar;
use crate::error::{Error, Result};

pub const PROB_EPS: f64 = 1e-7;

impl<T: Scalar> Graph<T> {
    /// Mean focal loss of probabilities `p` against targets in `[0, 1]`;
    /// `gamma = 0` is binary cross-entropy.
    pub fn focal_loss(&self, p: Var, target: &[f64], gamma: f64) -> Result<Var> {
        let vp = self.value(p);
        if vp.numel() != target.len() {
            return Err(Error::Shape(format!(
                "focal loss: {} predictions, {} targets",
                vp.numel(),
                target.len()
            )));
        }
        if let Some(bad) = vp.data().iter().find(|v| !(v.f64() >= 0.0 && v.f64() <= 1.0)) {
            return Err(Error::Numeric(format!("probability {bad} outside [0, 1]")));
        }
        let n = target.len().max(1) as f64;
        let target = Rc::new(target.to_vec());
        let mut total = 0.0;
        let mut dl = Vec::with_capacity(target.len());
        for (&pv, &y) in vp.data().iter().zip(target.iter()) {
            let raw = pv.f64();
            let q = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
            let active = raw == q;
            let pos = -(1.0 - q).powf(gamma) * q.ln();
            let neg = -q.powf(gamma) * (1.0 - q).ln();
            total += y * pos + (1.0 - y) * neg;
            let dpos = power_grad(gamma, 1.0 - q) * q.ln() - (1.0 - q).powf(gamma) / q;
            let dneg = -power_grad(gamma, q) * (1.0 - q).ln() + q.powf(gamma) / (1.0 - q);
            dl.push(if active { (y * dpos + (1.0 - y) * dneg) / n } else { 0.0 });
        }
        let shape = vp.shape().to_vec();
        Ok(self.record(Tensor::scalar(T::of(total / n)), &[p], move |g| {
            let s = g.item();
            let data = dl.iter().map(|&d| T::of(d) * s).collect();
            vec![Some(Tensor::new(shape.clone(), data).expect("shape"))]
        }))
    }

    pub fn bce_loss(&self, p: Var, target: &[f64]) -> Result<Var> {
        self.focal_loss(p, target, 0.0)
    }

    /// Mean squared difference over all elements.
    pub fn mse_loss(&self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean(sq)
    }

    /// Mean over rows of `-cos(a_i, b_i)` for `[N, D]` inputs.
    pub fn negative_cosine_loss(&self, a: Var, b: Var) -> Var {
        let rank = self.shape(a).len();
        let axis = rank - 1;
        let ab = self.mul(a, b);
        let dot = self.sum_axis(ab, axis, false);
        let aa = self.square(a);
        let na = self.sum_axis(aa, axis, false);
        let bb = self.square(b);
        let nb = self.sum_axis(bb, axis, false);
        let prod = self.mul(na, nb);
        let norm = self.sqrt(prod);
        let cos = self.div(dot, norm);
        let m = self.mean(cos);
        self.neg(m)
    }
}

/// d/dx of x^gamma, zero when gamma is zero.
fn power_grad(gamma: f64, x: f64) -> f64 {
    if gamma == 0.0 {
        0.0
    } else {
        gamma * x.powf(gamma - 1.0)
    }
}
