use crate::error::{Error, Result};
use crate::group::CyclicGroup;
use crate::steerable::TapSet;

/// Assignment of kernel taps to rotationally symmetric figures; every tap in
/// a figure shares one dilation factor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FigureTable {
    pub count: usize,
    /// Figure of each tap, `None` for the centre.
    pub per_tap: Vec<Option<usize>>,
}

impl FigureTable {
    /// Figure table for the taps of a `(2m+1)`-sized kernel: the dense grid
    /// for C4, the ring taps for C8.
    pub fn for_taps(taps: &TapSet) -> Result<Self> {
        match taps.group.order() {
            4 => Ok(Self::c4_grid(taps)),
            8 => Ok(Self::rings(taps)),
            n => Err(Error::Config(format!("no figure assignment for C{n}"))),
        }
    }

    /// C4: ring `r` (Chebyshev radius) holds figures `j = min(|dx|,|dy|) = 0..=r`.
    fn c4_grid(taps: &TapSet) -> Self {
        let mut count = 0;
        let per_tap = taps
            .offsets
            .iter()
            .map(|o| {
                let (ay, ax) = (o[1].abs() as usize, o[2].abs() as usize);
                let r = ay.max(ax);
                if r == 0 {
                    return None;
                }
                let f = (1..r).map(|q| q + 1).sum::<usize>() + ay.min(ax);
                count = count.max(f + 1);
                Some(f)
            })
            .collect();
        Self { count, per_tap }
    }

    /// One figure per ring.
    fn rings(taps: &TapSet) -> Self {
        let mut count = 0;
        let per_tap = taps
            .offsets
            .iter()
            .map(|o| {
                let r = (o[1] * o[1] + o[2] * o[2]).sqrt().round() as usize;
                if r == 0 {
                    return None;
                }
                count = count.max(r);
                Some(r - 1)
            })
            .collect();
        Self { count, per_tap }
    }

    /// Dilation tap set and figure table for a `(2m+1) × (2m+1)` kernel.
    pub fn build(size: usize, group: CyclicGroup) -> Result<(TapSet, Self)> {
        if size < 3 || size % 2 == 0 {
            return Err(Error::Config(format!("deformable kernels need odd size ≥ 3, got {size}")));
        }
        let taps = match group.order() {
            4 => TapSet::grid(group, 1, size)?,
            _ => TapSet::rings(group, size / 2)?,
        };
        let table = Self::for_taps(&taps)?;
        Ok((taps, table))
    }
}

/// Number of dilation parameters of a `size × size` kernel under `group`.
pub fn dilation_parameter_count(size: usize, group: CyclicGroup) -> Result<usize> {
    Ok(FigureTable::build(size, group)?.1.count)
}
