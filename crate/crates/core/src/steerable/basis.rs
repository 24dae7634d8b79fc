//! Kernel bases solving `W(g·p) = ρ_out(g) W(p) ρ_in(g)⁻¹` by group averaging.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::group::{Block, CyclicGroup, GroupElement};

/// Kernel tap positions `(dz, dy, dx)` together with the permutation each
/// group element induces on them.
#[derive(Debug, Clone, PartialEq)]
pub struct TapSet {
    pub group: CyclicGroup,
    pub offsets: Vec<[f64; 3]>,
    /// `perms[g][t]` is the index of `g · offsets[t]`.
    pub perms: Vec<Vec<usize>>,
    /// Depth and in-plane size when the taps form a full dense grid.
    pub grid: Option<(usize, usize)>,
}

fn rotate_offset(g: GroupElement, o: [f64; 3]) -> [f64; 3] {
    let [x, y] = g.rotate_xy([o[2], o[1]]);
    [o[0], y, x]
}

fn find(offsets: &[[f64; 3]], p: [f64; 3]) -> Option<usize> {
    offsets
        .iter()
        .position(|o| (0..3).all(|a| (o[a] - p[a]).abs() < 1e-9))
}

impl TapSet {
    fn from_offsets(group: CyclicGroup, offsets: Vec<[f64; 3]>, grid: Option<(usize, usize)>) -> Result<Self> {
        let mut perms = Vec::with_capacity(group.order());
        for g in group.elements() {
            let perm = offsets
                .iter()
                .map(|&o| {
                    find(&offsets, rotate_offset(g, o)).ok_or_else(|| {
                        Error::Config(format!("tap set is not closed under {g} of {group}"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            perms.push(perm);
        }
        Ok(Self { group, offsets, perms, grid })
    }

    /// Dense `depth × size × size` grid, ordered row-major over `(dz, dy, dx)`.
    pub fn grid(group: CyclicGroup, depth: usize, size: usize) -> Result<Self> {
        if size % 2 == 0 || depth % 2 == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {depth}×{size}×{size}")));
        }
        if group.order() != 4 {
            return Err(Error::Config(format!("dense grid kernels need C4, got {group}")));
        }
        let (hd, hs) = ((depth / 2) as isize, (size / 2) as isize);
        let mut offsets = Vec::with_capacity(depth * size * size);
        for dz in -hd..=hd {
            for dy in -hs..=hs {
                for dx in -hs..=hs {
                    offsets.push([dz as f64, dy as f64, dx as f64]);
                }
            }
        }
        Self::from_offsets(group, offsets, Some((depth, size)))
    }

    /// Centre plus, for each ring `r = 1..=m`, the group orbit of `(r, 0)`.
    /// For C8 the diagonal taps are fractional.
    pub fn rings(group: CyclicGroup, m: usize) -> Result<Self> {
        let mut offsets = vec![[0.0; 3]];
        for r in 1..=m {
            for g in group.elements() {
                offsets.push(rotate_offset(g, [0.0, 0.0, r as f64]));
            }
        }
        Self::from_offsets(group, offsets, None)
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// Orthonormal basis of one (output block, input block) kernel space,
/// each row laid out as `[d_out, d_in, taps]`.
#[derive(Debug, Clone)]
pub struct PairBasis {
    pub out_dim: usize,
    pub in_dim: usize,
    pub taps: usize,
    pub rows: DMatrix<f64>,
}

impl PairBasis {
    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn element(&self, b: usize) -> Vec<f64> {
        self.rows.row(b).iter().copied().collect()
    }
}

/// Singular values below this are treated as zero.
pub const SVD_CUTOFF: f64 = 1e-8;

/// Matrix of `W ↦ ρ_out(g)⁻¹ W(g·p) ρ_in(g)` on the flattened kernel space.
pub fn averaging_operator(out: Block, inp: Block, taps: &TapSet, g: GroupElement) -> DMatrix<f64> {
    let (ro_inv, ri) = (out.matrix(g.inverse()), inp.matrix(g));
    let (dout, din, nt) = (ro_inv.nrows(), ri.nrows(), taps.len());
    let n = dout * din * nt;
    let idx = |o: usize, i: usize, t: usize| (o * din + i) * nt + t;
    let perm = &taps.perms[g.index];
    let mut a = DMatrix::zeros(n, n);
    // (A W)[o, i, t] = Σ_{a, b} ρ_out⁻¹[o, a] W[a, b, g·t] ρ_in[b, i]
    for o in 0..dout {
        for i in 0..din {
            for t in 0..nt {
                for a_ in 0..dout {
                    let l = ro_inv[(o, a_)];
                    if l == 0.0 {
                        continue;
                    }
                    for b in 0..din {
                        let r = ri[(b, i)];
                        if r != 0.0 {
                            a[(idx(o, i, t), idx(a_, b, perm[t]))] += l * r;
                        }
                    }
                }
            }
        }
    }
    a
}

/// Builds the basis by averaging over the group and keeping the range of
/// the resulting projector.
pub fn build_pair_basis(out: Block, inp: Block, taps: &TapSet) -> PairBasis {
    let group = taps.group;
    let (dout, din) = (out.dim(group), inp.dim(group));
    let n = dout * din * taps.len();
    let mut p = DMatrix::zeros(n, n);
    for g in group.elements() {
        p += averaging_operator(out, inp, taps, g);
    }
    p /= group.order() as f64;
    let svd = p.svd(true, false);
    let u = svd.u.expect("left singular vectors");
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > SVD_CUTOFF)
        .collect();
    let mut rows = DMatrix::zeros(keep.len(), n);
    for (r, &c) in keep.iter().enumerate() {
        // fix the sign so the largest entry is positive, for reproducibility
        let col = u.column(c);
        let (imax, _) = col.iter().enumerate().fold((0, 0.0f64), |best, (i, v)| {
            if v.abs() > best.1 + 1e-12 { (i, v.abs()) } else { best }
        });
        let sign = if col[imax] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            let v = sign * col[j];
            rows[(r, j)] = if v.abs() < 1e-14 { 0.0 } else { v };
        }
    }
    PairBasis { out_dim: dout, in_dim: din, taps: taps.len(), rows }
}

type CacheKey = (usize, Block, Block, Vec<[u64; 3]>);

/// Memoised [`build_pair_basis`].
pub fn pair_basis(out: Block, inp: Block, taps: &TapSet) -> Arc<PairBasis> {
    static CACHE: OnceLock<Mutex<HashMap<CacheKey, Arc<PairBasis>>>> = OnceLock::new();
    let key = (
        taps.group.order(),
        out,
        inp,
        taps.offsets.iter().map(|o| o.map(f64::to_bits)).collect(),
    );
    let cache = CACHE.get_or_init(Default::default);
    if let Some(b) = cache.lock().expect("basis cache").get(&key) {
        return Arc::clone(b);
    }
    let b = Arc::new(build_pair_basis(out, inp, taps));
    cache.lock().expect("basis cache").insert(key, Arc::clone(&b));
    b
}

/// Largest violation of the steerability constraint by a flattened
/// `[d_out, d_in, taps]` kernel.
pub fn constraint_residual(out: Block, inp: Block, taps: &TapSet, kernel: &[f64]) -> f64 {
    let w = nalgebra::DVector::from_column_slice(kernel);
    taps.group
        .elements()
        .map(|g| (averaging_operator(out, inp, taps, g) * &w - &w).amax())
        .fold(0.0, f64::max)
}
