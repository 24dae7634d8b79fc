//! Cyclic rotation groups, their representations, and exact actions on grids.

mod field;
mod fourier;
mod geometry;

pub use field::{flip_last, rotate_grid, FeatureField};
pub use fourier::{fourier_c4, inverse_fourier_c4, FourierC4};
pub use geometry::GridGeometry;

use std::f64::consts::PI;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cyclic group of planar rotations by multiples of `2π / order`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct CyclicGroup {
    order: usize,
}

impl TryFrom<usize> for CyclicGroup {
    type Error = Error;

    fn try_from(order: usize) -> Result<Self> {
        Self::new(order)
    }
}

impl From<CyclicGroup> for usize {
    fn from(g: CyclicGroup) -> usize {
        g.order
    }
}

impl fmt::Display for CyclicGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "C{}", self.order)
    }
}

impl CyclicGroup {
    pub const C4: CyclicGroup = CyclicGroup { order: 4 };
    pub const C8: CyclicGroup = CyclicGroup { order: 8 };

    pub fn new(order: usize) -> Result<Self> {
        match order {
            4 | 8 => Ok(Self { order }),
            _ => Err(Error::Config(format!("unsupported group order {order} (use 4 or 8)"))),
        }
    }

    pub fn order(self) -> usize {
        self.order
    }

    pub fn element(self, index: usize) -> GroupElement {
        GroupElement { group: self, index: index % self.order }
    }

    pub fn identity(self) -> GroupElement {
        self.element(0)
    }

    pub fn elements(self) -> impl Iterator<Item = GroupElement> {
        (0..self.order).map(move |k| self.element(k))
    }
}

/// Rotation by `index · 2π / order`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupElement {
    pub group: CyclicGroup,
    pub index: usize,
}

impl fmt::Display for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.index == 0 {
            write!(f, "e")
        } else {
            write!(f, "r{}", self.index)
        }
    }
}

impl GroupElement {
    pub fn compose(self, other: GroupElement) -> Result<GroupElement> {
        if self.group != other.group {
            return Err(Error::GroupMismatch { left: self.group.order, right: other.group.order });
        }
        Ok(self.group.element(self.index + other.index))
    }

    pub fn inverse(self) -> GroupElement {
        self.group.element(self.group.order - self.index)
    }

    /// Product and inverse of `g` in one call.
    pub fn algebra(g: GroupElement, h: GroupElement) -> Result<(GroupElement, GroupElement)> {
        Ok((g.compose(h)?, g.inverse()))
    }

    pub fn angle(self) -> f64 {
        2.0 * PI * self.index as f64 / self.group.order as f64
    }

    /// Number of quarter turns, if the element is a multiple of 90°.
    pub fn quarter_turns(self) -> Option<usize> {
        let n = self.group.order;
        (self.index * 4 % n == 0).then(|| self.index * 4 / n)
    }

    /// `(cos, sin)` of `freq` times the rotation angle, exact at multiples of 45°.
    pub fn cos_sin(self, freq: usize) -> (f64, f64) {
        let n = self.group.order;
        let steps = (self.index * freq) % n;
        if (steps * 8) % n == 0 {
            let eighth = steps * 8 / n;
            let h = std::f64::consts::FRAC_1_SQRT_2;
            return [
                (1.0, 0.0),
                (h, h),
                (0.0, 1.0),
                (-h, h),
                (-1.0, 0.0),
                (-h, -h),
                (0.0, -1.0),
                (h, -h),
            ][eighth];
        }
        let a = 2.0 * PI * steps as f64 / n as f64;
        (a.cos(), a.sin())
    }

    /// Planar rotation matrix acting on (x, y).
    pub fn rotation2(self) -> [[f64; 2]; 2] {
        let (c, s) = self.cos_sin(1);
        [[c, -s], [s, c]]
    }

    /// Applies the rotation to an (x, y) vector.
    pub fn rotate_xy(self, v: [f64; 2]) -> [f64; 2] {
        let m = self.rotation2();
        [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
    }
}

/// One direct summand of a representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Trivial,
    Irrep(usize),
    Regular,
}

impl Block {
    pub fn dim(self, group: CyclicGroup) -> usize {
        match self {
            Block::Trivial | Block::Irrep(0) => 1,
            Block::Irrep(_) => 2,
            Block::Regular => group.order(),
        }
    }

    /// Representation matrix of this block, row-major `dim × dim`.
    pub fn matrix(self, g: GroupElement) -> DMatrix<f64> {
        let n = g.group.order();
        match self {
            Block::Trivial | Block::Irrep(0) => DMatrix::identity(1, 1),
            Block::Irrep(w) => {
                let (c, s) = g.cos_sin(w);
                DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
            }
            Block::Regular => {
                let mut m = DMatrix::zeros(n, n);
                for i in 0..n {
                    m[((i + g.index) % n, i)] = 1.0;
                }
                m
            }
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Block::Trivial => write!(f, "trivial"),
            Block::Irrep(w) => write!(f, "irrep({w})"),
            Block::Regular => write!(f, "regular"),
        }
    }
}

/// Direct sum of blocks over one group.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RepresentationSpec {
    pub group: CyclicGroup,
    pub blocks: Vec<Block>,
}

impl fmt::Display for RepresentationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.blocks.iter().map(|b| b.to_string()).collect();
        write!(f, "{}[{}]", self.group, parts.join(" + "))
    }
}

impl RepresentationSpec {
    pub fn new(group: CyclicGroup, blocks: Vec<Block>) -> Self {
        Self { group, blocks }
    }

    pub fn trivial(group: CyclicGroup, count: usize) -> Self {
        Self::new(group, vec![Block::Trivial; count])
    }

    pub fn regular(group: CyclicGroup, count: usize) -> Self {
        Self::new(group, vec![Block::Regular; count])
    }

    pub fn irrep(group: CyclicGroup, freq: usize, count: usize) -> Self {
        Self::new(group, vec![Block::Irrep(freq); count])
    }

    /// `n_triv` trivial, then `n_irrep1` irrep(1), then `n_reg` regular blocks.
    pub fn mixed(group: CyclicGroup, n_triv: usize, n_irrep1: usize, n_reg: usize) -> Self {
        let mut blocks = vec![Block::Trivial; n_triv];
        blocks.extend(std::iter::repeat(Block::Irrep(1)).take(n_irrep1));
        blocks.extend(std::iter::repeat(Block::Regular).take(n_reg));
        Self::new(group, blocks)
    }

    pub fn concat(&self, other: &RepresentationSpec) -> Result<RepresentationSpec> {
        if self.group != other.group {
            return Err(Error::GroupMismatch { left: self.group.order(), right: other.group.order() });
        }
        let mut blocks = self.blocks.clone();
        blocks.extend_from_slice(&other.blocks);
        Ok(Self::new(self.group, blocks))
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.dim(self.group)).sum()
    }

    /// Starting channel of every block.
    pub fn offsets(&self) -> Vec<usize> {
        let mut at = 0;
        self.blocks
            .iter()
            .map(|b| {
                let o = at;
                at += b.dim(self.group);
                o
            })
            .collect()
    }

    /// Channels belonging to trivial-type blocks.
    pub fn trivial_channels(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .zip(self.offsets())
            .filter(|(b, _)| matches!(b, Block::Trivial | Block::Irrep(0)))
            .map(|(_, o)| o)
            .collect()
    }

    fn check(&self, g: GroupElement) -> Result<()> {
        if g.group != self.group {
            return Err(Error::GroupMismatch { left: self.group.order(), right: g.group.order() });
        }
        Ok(())
    }

    /// Block-diagonal `ρ(g)`.
    pub fn matrix(&self, g: GroupElement) -> Result<DMatrix<f64>> {
        self.check(g)?;
        let d = self.dim();
        let mut m = DMatrix::zeros(d, d);
        for (b, o) in self.blocks.iter().zip(self.offsets()) {
            let bm = b.matrix(g);
            let k = bm.nrows();
            m.view_mut((o, o), (k, k)).copy_from(&bm);
        }
        Ok(m)
    }

    /// Applies `ρ(g)` to `data` viewed as `[dim, inner]`, returning a new buffer.
    pub fn apply<T: crate::tensor::Scalar>(&self, g: GroupElement, data: &[T], inner: usize) -> Result<Vec<T>> {
        self.check(g)?;
        let d = self.dim();
        if data.len() != d * inner {
            return Err(Error::Shape(format!(
                "representation of dim {d} applied to {} values with inner size {inner}",
                data.len()
            )));
        }
        let n = self.group.order();
        let mut out = vec![T::zero(); data.len()];
        for (b, o) in self.blocks.iter().zip(self.offsets()) {
            match b {
                Block::Trivial | Block::Irrep(0) => {
                    out[o * inner..(o + 1) * inner].copy_from_slice(&data[o * inner..(o + 1) * inner]);
                }
                Block::Irrep(w) => {
                    let (c, s) = g.cos_sin(*w);
                    let (c, s) = (T::of(c), T::of(s));
                    for i in 0..inner {
                        let x = data[o * inner + i];
                        let y = data[(o + 1) * inner + i];
                        out[o * inner + i] = c * x - s * y;
                        out[(o + 1) * inner + i] = s * x + c * y;
                    }
                }
                Block::Regular => {
                    for m in 0..n {
                        let dst = o + (m + g.index) % n;
                        out[dst * inner..(dst + 1) * inner]
                            .copy_from_slice(&data[(o + m) * inner..(o + m + 1) * inner]);
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modular_products_and_inverses() {
        let c4 = CyclicGroup::C4;
        let (p, inv) = GroupElement::algebra(c4.element(1), c4.element(3)).unwrap();
        assert_eq!(p, c4.identity());
        assert_eq!(inv, c4.element(3));
        assert_eq!(c4.element(2).compose(c4.element(3)).unwrap(), c4.element(1));
        assert_eq!(CyclicGroup::C8.element(5).inverse().index, 3);
        assert!(matches!(
            c4.element(1).compose(CyclicGroup::C8.element(1)),
            Err(Error::GroupMismatch { .. })
        ));
        assert!(CyclicGroup::new(6).is_err());
    }

    #[test]
    fn regular_shift_moves_right() {
        let spec = RepresentationSpec::regular(CyclicGroup::C4, 1);
        let out = spec.apply(CyclicGroup::C4.element(1), &[1.0, 2.0, 3.0, 4.0], 1).unwrap();
        assert_eq!(out, vec![4.0, 1.0, 2.0, 3.0]);
        let m = spec.matrix(CyclicGroup::C4.element(1)).unwrap();
        let v = m * nalgebra::DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(v.as_slice(), &[4.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn quarter_turn_irrep_is_exact() {
        let m = Block::Irrep(1).matrix(CyclicGroup::C4.element(1));
        assert_eq!(m.as_slice(), &[0.0, 1.0, -1.0, 0.0]); // column-major [[0,-1],[1,0]]
    }

    #[test]
    fn homomorphism_by_enumeration() {
        for group in [CyclicGroup::C4, CyclicGroup::C8] {
            let spec = RepresentationSpec::new(
                group,
                vec![Block::Trivial, Block::Irrep(1), Block::Irrep(2), Block::Regular, Block::Irrep(3)],
            );
            assert_eq!(spec.dim(), 1 + 2 + 2 + group.order() + 2);
            assert_eq!(spec.matrix(group.identity()).unwrap(), DMatrix::identity(spec.dim(), spec.dim()));
            for g in group.elements() {
                for h in group.elements() {
                    let lhs = spec.matrix(g.compose(h).unwrap()).unwrap();
                    let rhs = spec.matrix(g).unwrap() * spec.matrix(h).unwrap();
                    let tol = if group.order() == 4 { 0.0 } else { 1e-15 };
                    assert!((lhs - rhs).amax() <= tol, "{group} {g} {h}");
                }
            }
        }
    }

    #[test]
    fn apply_matches_matrix() {
        let group = CyclicGroup::C8;
        let spec = RepresentationSpec::new(group, vec![Block::Irrep(3), Block::Regular, Block::Trivial]);
        let x: Vec<f64> = (0..spec.dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        for g in group.elements() {
            let fast = spec.apply(g, &x, 1).unwrap();
            let slow = spec.matrix(g).unwrap() * nalgebra::DVector::from_vec(x.clone());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }
}
