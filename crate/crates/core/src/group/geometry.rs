use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regular grid of cubic cells. Array axes are ordered `[z, y, x]` (or
/// `[y, x]` in 2D); voxel centres sit at `origin + (i + 0.5) · cell`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub extents: Vec<usize>,
    pub cell: f64,
    pub origin: [f64; 3],
}

impl GridGeometry {
    pub fn new(extents: Vec<usize>, cell: f64, origin: [f64; 3]) -> Result<Self> {
        if !(2..=3).contains(&extents.len()) || extents.iter().any(|&e| e == 0) || cell <= 0.0 {
            return Err(Error::Geometry(format!("invalid grid extents {extents:?} / cell {cell}")));
        }
        let r = extents.len();
        if extents[r - 1] != extents[r - 2] {
            return Err(Error::Geometry(format!(
                "x and y extents must agree for C4 actions, got {extents:?}"
            )));
        }
        Ok(Self { extents, cell, origin })
    }

    /// `s³` voxels spanning a cube of side `size` metres at the origin.
    pub fn cube(s: usize, size: f64) -> Self {
        Self::new(vec![s; 3], size / s as f64, [0.0; 3]).expect("valid cube")
    }

    pub fn rank(&self) -> usize {
        self.extents.len()
    }

    /// Workspace centre in metres.
    pub fn center(&self) -> [f64; 3] {
        let r = self.extents.len();
        let ex = self.extents[r - 1] as f64 * self.cell;
        let ey = self.extents[r - 2] as f64 * self.cell;
        let ez = if r == 3 { self.extents[0] as f64 * self.cell } else { 0.0 };
        [self.origin[0] + ex / 2.0, self.origin[1] + ey / 2.0, self.origin[2] + ez / 2.0]
    }

    /// Continuous index coordinates `(x, y, z)` of a world point; integer
    /// values are voxel centres.
    pub fn world_to_index(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (p[a] - self.origin[a]) / self.cell - 0.5)
    }

    pub fn index_to_world(&self, idx: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + (idx[a] + 0.5) * self.cell)
    }

    /// Centre of voxel `[z, y, x]`.
    pub fn voxel_center(&self, z: usize, y: usize, x: usize) -> [f64; 3] {
        self.index_to_world([x as f64, y as f64, z as f64])
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let r = self.extents.len();
        let ext = [self.extents[r - 1], self.extents[r - 2], if r == 3 { self.extents[0] } else { 1 }];
        (0..r).all(|a| {
            let lo = self.origin[a];
            p[a] >= lo && p[a] <= lo + ext[a] as f64 * self.cell
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_world_roundtrip() {
        let g = GridGeometry::cube(40, 0.3);
        let c = g.voxel_center(0, 0, 0);
        assert!((c[0] - 0.00375).abs() < 1e-15);
        let back = g.world_to_index(g.voxel_center(3, 5, 7));
        assert!((back[0] - 7.0).abs() < 1e-12 && (back[1] - 5.0).abs() < 1e-12 && (back[2] - 3.0).abs() < 1e-12);
        assert_eq!(g.center(), [0.15, 0.15, 0.15]);
        assert!(GridGeometry::new(vec![4, 4, 5], 0.1, [0.0; 3]).is_err());
    }
}
