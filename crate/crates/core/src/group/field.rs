use super::{GroupElement, RepresentationSpec};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Rotates the last two axes of `t` by `quarter_turns · 90°`; one quarter
/// turn sends index `(i, j)` to `(j, E-1-i)`.
pub fn rotate_grid<T: Scalar>(t: &Tensor<T>, quarter_turns: usize) -> Result<Tensor<T>> {
    let s = t.shape();
    if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
        return Err(Error::Geometry(format!(
            "exact 90° rotation needs square trailing axes, got {s:?}"
        )));
    }
    let e = s[s.len() - 1];
    let plane = e * e;
    let k = quarter_turns % 4;
    if k == 0 {
        return Ok(t.clone());
    }
    let mut out = Tensor::zeros(s);
    let (src, dst) = (t.data(), out.data_mut());
    for (sp, dp) in src.chunks_exact(plane).zip(dst.chunks_exact_mut(plane)) {
        for i in 0..e {
            for j in 0..e {
                let (a, b) = match k {
                    1 => (j, e - 1 - i),
                    2 => (e - 1 - i, e - 1 - j),
                    _ => (e - 1 - j, i),
                };
                dp[a * e + b] = sp[i * e + j];
            }
        }
    }
    Ok(out)
}

/// Reverses the last axis.
pub fn flip_last<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let n = *t.shape().last().expect("rank >= 1");
    let mut out = t.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        row.reverse();
    }
    out
}

/// Dense grid of features `[C, (Z,) Y, X]` typed by a representation.
#[derive(Debug, Clone)]
pub struct FeatureField<T: Scalar> {
    pub tensor: Tensor<T>,
    pub spec: RepresentationSpec,
}

impl<T: Scalar> FeatureField<T> {
    pub fn new(tensor: Tensor<T>, spec: RepresentationSpec) -> Result<Self> {
        let r = tensor.rank();
        if r != 3 && r != 4 {
            return Err(Error::Shape(format!("feature field needs a 2D or 3D grid, got rank {r}")));
        }
        if tensor.shape()[0] != spec.dim() {
            return Err(Error::TypeMismatch {
                expected: format!("{} channels for {spec}", spec.dim()),
                actual: format!("{} channels", tensor.shape()[0]),
            });
        }
        Ok(Self { tensor, spec })
    }

    /// `out(p) = ρ(g) · in(g⁻¹ p)`; the spatial part rotates the two
    /// trailing axes and keeps depth fixed.
    pub fn act(&self, g: GroupElement) -> Result<Self> {
        let k = g.quarter_turns().ok_or_else(|| {
            Error::Geometry(format!("{g} of {} is not an exact grid rotation", g.group))
        })?;
        let rotated = rotate_grid(&self.tensor, k)?;
        let inner = rotated.numel() / self.spec.dim();
        let data = self.spec.apply(g, rotated.data(), inner)?;
        Ok(Self {
            tensor: Tensor::new(self.tensor.shape().to_vec(), data)?,
            spec: self.spec.clone(),
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.tensor.max_abs_diff(&other.tensor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::CyclicGroup;

    #[test]
    fn impulse_follows_index_map() {
        let mut t = Tensor::<f64>::zeros(&[1, 4, 4]);
        t.set(&[0, 0, 0], 1.0);
        let f = FeatureField::new(t, RepresentationSpec::trivial(CyclicGroup::C4, 1)).unwrap();
        let r = f.act(CyclicGroup::C4.element(1)).unwrap();
        assert_eq!(r.tensor.at(&[0, 0, 3]), 1.0);
        assert_eq!(r.tensor.sum(), 1.0);
    }

    #[test]
    fn constant_regular_field_shifts_channels() {
        let spec = RepresentationSpec::regular(CyclicGroup::C4, 1);
        let mut data = Vec::new();
        for c in 0..4 {
            data.extend(std::iter::repeat(c as f64).take(9));
        }
        let f = FeatureField::new(Tensor::new(vec![4, 3, 3], data).unwrap(), spec).unwrap();
        let r = f.act(CyclicGroup::C4.element(1)).unwrap();
        for c in 0..4 {
            assert!(r.tensor.data()[c * 9..(c + 1) * 9].iter().all(|&v| v == ((c + 3) % 4) as f64));
        }
    }

    #[test]
    fn actions_compose_exactly() {
        let spec = RepresentationSpec::mixed(CyclicGroup::C4, 1, 1, 1);
        let n = spec.dim() * 2 * 6 * 6;
        let data: Vec<f64> = (0..n).map(|i| ((i * 7919) % 101) as f64 / 17.0).collect();
        let f = FeatureField::new(Tensor::new(vec![spec.dim(), 2, 6, 6], data).unwrap(), spec).unwrap();
        let c4 = CyclicGroup::C4;
        assert_eq!(f.act(c4.identity()).unwrap().tensor, f.tensor);
        for g in c4.elements() {
            for h in c4.elements() {
                let lhs = f.act(h).unwrap().act(g).unwrap();
                let rhs = f.act(g.compose(h).unwrap()).unwrap();
                assert_eq!(lhs.tensor, rhs.tensor);
            }
        }
    }

    #[test]
    fn non_square_grid_is_rejected() {
        let f = FeatureField::new(Tensor::<f32>::zeros(&[1, 3, 4]), RepresentationSpec::trivial(CyclicGroup::C4, 1)).unwrap();
        assert!(matches!(f.act(CyclicGroup::C4.element(1)), Err(Error::Geometry(_))));
        let c8 = FeatureField::new(Tensor::<f32>::zeros(&[1, 4, 4]), RepresentationSpec::trivial(CyclicGroup::C8, 1)).unwrap();
        assert!(c8.act(CyclicGroup::C8.element(1)).is_err());
        assert!(c8.act(CyclicGroup::C8.element(2)).is_ok());
    }
}
