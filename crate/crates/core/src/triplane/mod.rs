//! Equivariant tri-plane encoder and its conventional counterpart.

mod layers;
mod planes;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use layers::{PlainConv2d, PlainConv3d};
pub use planes::{project_to_planes, side_to_tableplane, TriplaneFeatures};

use crate::deformable::{DeformableConv2d, DeformableSteerableConv};
use crate::error::{Error, Result};
use crate::group::{CyclicGroup, GridGeometry, RepresentationSpec};
use crate::steerable::{typed_activation, EquivariantLinear, LiftingConv3d, SteerableConv2d, TypedVar};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};

/// Side-branch variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SideMode {
    /// Conventional CNN on the side planes.
    Mixed,
    /// Mirror-symmetric kernels on invariant inputs; the queried side sum is exactly invariant.
    ReflectionInvariant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Voxels per side of the input TSDF.
    pub grid: usize,
    /// Steerable lift and XY branch; `false` builds the conventional baseline.
    pub equivariant: bool,
    /// Regular blocks produced by the lift.
    pub lift_blocks: usize,
    pub lift_kernel: usize,
    pub kernel: usize,
    /// XY channel width per UNet level.
    pub xy_widths: Vec<usize>,
    /// Side channel width per UNet level.
    pub side_widths: Vec<usize>,
    pub side_mode: SideMode,
    pub side_dcn: bool,
    pub dscn: bool,
    pub dscn_kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            grid: 40,
            equivariant: true,
            lift_blocks: 2,
            lift_kernel: 3,
            kernel: 3,
            xy_widths: vec![8, 16, 32],
            side_widths: vec![16, 32, 64],
            side_mode: SideMode::Mixed,
            side_dcn: true,
            dscn: true,
            dscn_kernel: 3,
        }
    }
}

impl EncoderConfig {
    /// Fully equivariant variant: reflection-invariant side branch, no side DCN.
    pub fn strict() -> Self {
        Self { side_mode: SideMode::ReflectionInvariant, side_dcn: false, ..Self::default() }
    }

    /// The XY-separated conventional encoder.
    pub fn conventional() -> Self {
        Self { equivariant: false, dscn: false, ..Self::default() }
    }

    pub fn depth(&self) -> usize {
        self.xy_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let depth = self.depth();
        if depth == 0 || self.side_widths.len() != depth {
            return bad(format!("xy_widths {:?} and side_widths {:?} must be non-empty and equally long", self.xy_widths, self.side_widths));
        }
        if self.grid == 0 || self.grid % (1 << (depth - 1)) != 0 {
            return bad(format!("grid {} must be divisible by 2^{}", self.grid, depth - 1));
        }
        for k in [self.kernel, self.lift_kernel, self.dscn_kernel] {
            if k % 2 == 0 {
                return bad(format!("kernel sizes must be odd, got {k}"));
            }
        }
        if self.dscn && self.dscn_kernel < 3 {
            return bad("dscn_kernel must be at least 3".into());
        }
        if self.equivariant && self.xy_widths.iter().any(|w| w % 8 != 0) {
            return bad(format!("equivariant XY widths must be multiples of 8, got {:?}", self.xy_widths));
        }
        if self.lift_blocks == 0 || self.side_widths.contains(&0) || self.xy_widths.contains(&0) {
            return bad("widths must be positive".into());
        }
        if self.side_mode == SideMode::ReflectionInvariant && (self.side_dcn || !self.equivariant) {
            return bad("the reflection-invariant side branch needs an equivariant encoder without side DCN".into());
        }
        Ok(())
    }

    /// Representation of XY level `l`: `w/4` trivial, `w/8` irrep(1), `w/8` regular.
    pub fn xy_spec(&self, level: usize) -> RepresentationSpec {
        let w = self.xy_widths[level];
        if self.equivariant {
            RepresentationSpec::mixed(CyclicGroup::C4, w / 4, w / 8, w / 8)
        } else {
            RepresentationSpec::trivial(CyclicGroup::C4, w)
        }
    }

    fn lift_spec(&self) -> RepresentationSpec {
        if self.equivariant {
            RepresentationSpec::regular(CyclicGroup::C4, self.lift_blocks)
        } else {
            RepresentationSpec::trivial(CyclicGroup::C4, self.lift_blocks * 4)
        }
    }

    fn side_input_channels(&self) -> usize {
        match self.side_mode {
            SideMode::Mixed => self.lift_spec().dim(),
            SideMode::ReflectionInvariant => self.lift_blocks,
        }
    }

    /// Channels of a queried feature vector.
    pub fn feature_dim(&self) -> usize {
        self.xy_widths[0] + self.side_widths[0]
    }

    /// Type of a queried feature vector.
    pub fn feature_spec(&self) -> RepresentationSpec {
        self.xy_spec(0)
            .concat(&RepresentationSpec::trivial(CyclicGroup::C4, self.side_widths[0]))
            .expect("same group")
    }
}

enum Lift {
    Steerable(LiftingConv3d),
    Plain(PlainConv3d),
}

enum XyConv {
    Steerable(SteerableConv2d),
    Plain(PlainConv2d),
}

impl XyConv {
    fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: &TypedVar, out: &RepresentationSpec) -> Result<TypedVar> {
        match self {
            XyConv::Steerable(c) => c.forward(g, store, x),
            XyConv::Plain(c) => Ok(TypedVar::new(c.forward(g, store, x.var)?, out.clone())),
        }
    }
}

enum XyDeform {
    Steerable(DeformableSteerableConv),
    Plain(DeformableConv2d),
}

/// One UNet stage of both branches plus its S2TP fusion.
struct Stage {
    level: usize,
    xy: XyConv,
    xy_out: RepresentationSpec,
    side: PlainConv2d,
    fuse: EquivariantLinear,
}

/// Lift, tri-plane projection and dual-branch UNet with S2TP after every stage.
pub struct TriplaneEncoder {
    pub config: EncoderConfig,
    lift: Lift,
    stages: Vec<Stage>,
    dscn: Option<XyDeform>,
    side_dcn: Option<DeformableConv2d>,
}

impl TriplaneEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, config: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let k = c.kernel;
        let mirror = c.side_mode == SideMode::ReflectionInvariant;
        let lift_spec = c.lift_spec();
        let lift = if c.equivariant {
            Lift::Steerable(LiftingConv3d::new(store, &format!("{name}.lift"), &lift_spec, c.lift_kernel, true, rng)?)
        } else {
            Lift::Plain(PlainConv3d::new(store, &format!("{name}.lift"), 1, lift_spec.dim(), c.lift_kernel, rng))
        };
        let depth = c.depth();
        // (level, xy input spec, side input channels)
        let mut plan = Vec::new();
        for l in 0..depth {
            let (xin, sin) = if l == 0 {
                (lift_spec.clone(), c.side_input_channels())
            } else {
                (c.xy_spec(l - 1), c.side_widths[l - 1])
            };
            plan.push((l, xin, sin));
        }
        for l in (0..depth - 1).rev() {
            plan.push((l, c.xy_spec(l + 1).concat(&c.xy_spec(l))?, c.side_widths[l + 1] + c.side_widths[l]));
        }
        let mut stages = Vec::new();
        for (i, (level, xin, sin)) in plan.into_iter().enumerate() {
            let xy_out = c.xy_spec(level);
            let xname = format!("{name}.xy.{i}");
            let xy = if c.equivariant {
                XyConv::Steerable(SteerableConv2d::new(store, &xname, &xin, &xy_out, k, true, rng)?)
            } else {
                XyConv::Plain(PlainConv2d::new(store, &xname, xin.dim(), xy_out.dim(), k, false, rng))
            };
            let sw = c.side_widths[level];
            let side = PlainConv2d::new(store, &format!("{name}.side.{i}"), sin, sw, k, mirror, rng);
            let targets = RepresentationSpec::trivial(CyclicGroup::C4, xy_out.trivial_channels().len());
            let fuse = EquivariantLinear::new(
                store,
                &format!("{name}.s2tp.{i}"),
                &RepresentationSpec::trivial(CyclicGroup::C4, sw),
                &targets,
                true,
                rng,
            )?;
            stages.push(Stage { level, xy, xy_out, side, fuse });
        }
        let top = c.xy_spec(0);
        let dscn = match (c.dscn, c.equivariant) {
            (false, _) => None,
            (true, true) => Some(XyDeform::Steerable(DeformableSteerableConv::new(
                store,
                &format!("{name}.dscn"),
                &top,
                &top,
                c.dscn_kernel,
                rng,
            )?)),
            (true, false) => Some(XyDeform::Plain(DeformableConv2d::new(
                store,
                &format!("{name}.dscn"),
                top.dim(),
                top.dim(),
                c.dscn_kernel,
                rng,
            )?)),
        };
        let side_dcn = if c.side_dcn {
            let w = c.side_widths[0];
            Some(DeformableConv2d::new(store, &format!("{name}.side_dcn"), w, w, k, rng)?)
        } else {
            None
        };
        Ok(Self { config: c.clone(), lift, stages, dscn, side_dcn })
    }

    pub fn geometry(&self, workspace: f64) -> GridGeometry {
        GridGeometry::cube(self.config.grid, workspace)
    }

    /// Lifted volume `[C, S, S, S]` of a TSDF `[1, S, S, S]`.
    pub fn lift<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, tsdf: Var) -> Result<TypedVar> {
        let s = g.shape(tsdf);
        let n = self.config.grid;
        if s != [1, n, n, n] {
            return Err(Error::Geometry(format!("expected a [1, {n}, {n}, {n}] TSDF, got {s:?}")));
        }
        let v = match &self.lift {
            Lift::Steerable(l) => l.forward(g, store, tsdf)?,
            Lift::Plain(l) => TypedVar::new(l.forward(g, store, tsdf)?, self.config.lift_spec()),
        };
        Ok(typed_activation(g, &v, 0))
    }

    fn side_inputs<T: Scalar>(&self, g: &Graph<T>, xz: Var, yz: Var) -> (Var, Var) {
        if self.config.side_mode == SideMode::Mixed {
            return (xz, yz);
        }
        // fibre-pool each regular block to an invariant channel
        let pool = |p: Var| {
            let s = g.shape(p);
            let r = g.reshape(p, &[self.config.lift_blocks, 4, s[1], s[2]]);
            g.mean_axis(r, 1, false)
        };
        (pool(xz), pool(yz))
    }

    fn fuse<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, stage: &Stage, xy: TypedVar, xz: Var, yz: Var) -> Result<TypedVar> {
        let bar = side_to_tableplane(g, xz, yz)?;
        let sw = g.shape(bar)[0];
        let inj = stage.fuse.forward_field(g, store, &TypedVar::new(bar, RepresentationSpec::trivial(CyclicGroup::C4, sw)))?;
        let targets = xy.spec.trivial_channels();
        let dim = xy.spec.dim();
        let full = if targets.len() == dim {
            inj.var
        } else {
            let s = g.shape(xy.var);
            let zeros = g.constant(Tensor::zeros(&[dim - targets.len(), s[1], s[2]]));
            let stacked = g.concat(&[inj.var, zeros], 0);
            let mut order = vec![0; dim];
            let mut rest = targets.len();
            for (c, slot) in order.iter_mut().enumerate() {
                *slot = match targets.iter().position(|&t| t == c) {
                    Some(k) => k,
                    None => {
                        rest += 1;
                        rest - 1
                    }
                };
            }
            g.index_select(stacked, 0, &order)
        };
        Ok(TypedVar::new(g.add(xy.var, full), xy.spec))
    }

    /// Full encoder: TSDF `[1, S, S, S]` to tri-plane features.
    pub fn encode<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, tsdf: Var, geometry: GridGeometry) -> Result<TriplaneFeatures> {
        let vol = self.lift(g, store, tsdf)?;
        let (xy, xz, yz) = project_to_planes(g, vol.var)?;
        let (mut xz, mut yz) = self.side_inputs(g, xz, yz);
        let mut xy = TypedVar::new(xy, vol.spec.clone());
        let depth = self.config.depth();
        let mut skips: Vec<(TypedVar, Var, Var)> = Vec::new();
        for (i, st) in self.stages.iter().enumerate() {
            if i > 0 && i < depth {
                xy = TypedVar::new(g.avg_pool2(xy.var)?, xy.spec);
                xz = g.avg_pool2(xz)?;
                yz = g.avg_pool2(yz)?;
            } else if i >= depth {
                let (sx, sxz, syz) = skips[st.level].clone();
                let up = g.upsample2(xy.var);
                xy = TypedVar::new(g.concat(&[up, sx.var], 0), xy.spec.concat(&sx.spec)?);
                let up = g.upsample2(xz);
                xz = g.concat(&[up, sxz], 0);
                let up = g.upsample2(yz);
                yz = g.concat(&[up, syz], 0);
            }
            let y = st.xy.forward(g, store, &xy, &st.xy_out)?;
            let y = typed_activation(g, &y, 0);
            let a = st.side.forward(g, store, xz)?;
            xz = g.relu(a);
            let b = st.side.forward(g, store, yz)?;
            yz = g.relu(b);
            xy = self.fuse(g, store, st, y, xz, yz)?;
            if i < depth {
                skips.push((xy.clone(), xz, yz));
            }
        }
        if let Some(d) = &self.dscn {
            let y = match d {
                XyDeform::Steerable(l) => l.forward(g, store, &xy)?,
                XyDeform::Plain(l) => TypedVar::new(l.forward(g, store, xy.var)?, xy.spec.clone()),
            };
            xy = typed_activation(g, &y, 0);
        }
        if let Some(d) = &self.side_dcn {
            let a = d.forward(g, store, xz)?;
            xz = g.relu(a);
            let b = d.forward(g, store, yz)?;
            yz = g.relu(b);
        }
        Ok(TriplaneFeatures { xy, xz, yz, geometry })
    }
}
