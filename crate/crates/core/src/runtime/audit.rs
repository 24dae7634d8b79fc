use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_model, Mode, RunConfig};
use crate::deformable::DeformableSteerableConv;
use crate::error::Result;
use crate::grasp::rotation::{six_d_spec, vertical_rotation};
use crate::grasp::{points_tensor, GraspModel, ModelKind};
use crate::group::{CyclicGroup, FeatureField, GridGeometry, GroupElement, RepresentationSpec};
use crate::steerable::{EquivariantLinear, LiftingConv3d, SteerableConv2d, TypedVar};
use crate::tensor::{DType, Graph, ParamStore, Scalar, Tensor};

const C4: CyclicGroup = CyclicGroup::C4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditOptions {
    /// Adds a constraint-violating perturbation to the audited convolution
    /// kernel; the audit must then fail.
    pub corrupt_kernel: bool,
    /// Random inputs per component.
    pub samples: usize,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self { corrupt_kernel: false, samples: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub component: String,
    pub element: String,
    pub residual: f64,
    pub threshold: f64,
    /// Whether the row gates the exit status in this mode.
    pub enforced: bool,
}

impl AuditRow {
    pub fn passed(&self) -> bool {
        !self.enforced || self.residual <= self.threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub mode: Mode,
    pub dtype: DType,
    pub model: ModelKind,
    pub rows: Vec<AuditRow>,
    pub passed: bool,
}

impl AuditReport {
    pub fn table(&self) -> String {
        let mut out = format!(
            "equivariance audit: model {:?}, mode {}, dtype {:?}\n{:<34} {:>4} {:>12} {:>10}  status\n",
            self.model, self.mode, self.dtype, "component", "g", "residual", "threshold"
        );
        for r in &self.rows {
            let status = match (r.enforced, r.passed()) {
                (false, _) => "measured",
                (true, true) => "ok",
                (true, false) => "FAIL",
            };
            out.push_str(&format!(
                "{:<34} {:>4} {:>12.3e} {:>10.1e}  {status}\n",
                r.component, r.element, r.residual, r.threshold
            ));
        }
        out.push_str(if self.passed { "result: PASS\n" } else { "result: FAIL\n" });
        out
    }

    /// Largest residual of `component` over group elements.
    pub fn worst(&self, component: &str) -> Option<f64> {
        self.rows.iter().filter(|r| r.component == component).map(|r| r.residual).reduce(f64::max)
    }
}

struct Rows {
    rows: Vec<AuditRow>,
}

impl Rows {
    fn push(&mut self, component: &str, residuals: &[f64; 4], threshold: f64, enforced: bool) {
        for (k, &residual) in residuals.iter().enumerate() {
            self.rows.push(AuditRow {
                component: component.into(),
                element: C4.element(k).to_string(),
                residual,
                threshold,
                enforced,
            });
        }
    }
}

fn act_rows<T: Scalar>(spec: &RepresentationSpec, e: GroupElement, t: &Tensor<T>) -> Result<Tensor<T>> {
    let n = t.shape()[0];
    let v = spec.apply(e, t.permuted(&[1, 0]).data(), n)?;
    Ok(Tensor::new(vec![spec.dim(), n], v)?.permuted(&[1, 0]))
}

fn randomize<T: Scalar>(store: &mut ParamStore<T>, ids: &[crate::tensor::ParamId], rng: &mut ChaCha8Rng) {
    for &id in ids {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::uniform(&shape, -0.3, 0.3, rng);
    }
}

/// `max_g` residuals of a map on fields of `[C, (Z,) Y, X]`.
fn field_residuals<T: Scalar>(
    inputs: &[FeatureField<T>],
    out_spec: &RepresentationSpec,
    f: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<[f64; 4]> {
    let mut worst = [0.0f64; 4];
    for x in inputs {
        let y = FeatureField::new(f(&x.tensor)?, out_spec.clone())?;
        for (k, e) in C4.elements().enumerate() {
            let lhs = f(&x.act(e)?.tensor)?;
            worst[k] = worst[k].max(lhs.max_abs_diff(&y.act(e)?.tensor));
        }
    }
    Ok(worst)
}

fn layer_rows<T: Scalar>(rows: &mut Rows, opts: &AuditOptions, rng: &mut ChaCha8Rng, threshold: f64) -> Result<()> {
    let mut store = ParamStore::<T>::new();
    let spec = RepresentationSpec::mixed(C4, 2, 2, 2);
    let conv = SteerableConv2d::new(&mut store, "audit.conv", &spec, &spec, 5, true, rng)?;
    let lift = LiftingConv3d::new(&mut store, "audit.lift", &RepresentationSpec::regular(C4, 2), 3, true, rng)?;
    let dscn = DeformableSteerableConv::new(&mut store, "audit.dscn", &spec, &spec, 3, rng)?;
    randomize(&mut store, &dscn.predictor_params(), rng);
    let lin = EquivariantLinear::new(&mut store, "audit.linear", &spec, &spec, true, rng)?;
    if let Some(b) = conv.bias_param() {
        randomize(&mut store, &[b], rng);
    }
    let noise = Tensor::<T>::randn(conv.kernel.shape(), rng).map(|v| v * T::of(1e-2));

    let planes: Vec<FeatureField<T>> = (0..opts.samples)
        .map(|_| FeatureField::new(Tensor::randn(&[spec.dim(), 9, 9], rng), spec.clone()))
        .collect::<Result<_>>()?;
    let r = field_residuals(&planes, &spec, |x| {
        let g = Graph::inference();
        let xv = TypedVar::new(g.constant(x.clone()), spec.clone());
        let y = if opts.corrupt_kernel {
            let w = conv.kernel.materialize(&g, &store);
            let w = g.add(w, g.constant(noise.clone()));
            g.conv2d(xv.var, w, 1, conv.size() / 2)?
        } else {
            conv.forward(&g, &store, &xv)?.var
        };
        Ok((*g.value(y)).clone())
    })?;
    rows.push("layer.steerable_conv2d", &r, threshold, true);

    let vols: Vec<FeatureField<T>> = (0..opts.samples)
        .map(|_| FeatureField::new(Tensor::uniform(&[1, 8, 8, 8], -1.0, 1.0, rng), RepresentationSpec::trivial(C4, 1)))
        .collect::<Result<_>>()?;
    let r = field_residuals(&vols, &lift.kernel.out_spec, |x| {
        let g = Graph::inference();
        let y = lift.forward(&g, &store, g.constant(x.clone()))?;
        Ok((*g.value(y.var)).clone())
    })?;
    rows.push("layer.lifting_conv3d", &r, threshold, true);

    let r = field_residuals(&planes, &spec, |x| {
        let g = Graph::inference();
        let y = dscn.forward(&g, &store, &TypedVar::new(g.constant(x.clone()), spec.clone()))?;
        Ok((*g.value(y.var)).clone())
    })?;
    rows.push("layer.deformable_steerable_conv", &r, threshold, true);

    let mut r = [0.0f64; 4];
    for _ in 0..opts.samples {
        let x = Tensor::<T>::randn(&[7, spec.dim()], rng);
        let run = |x: &Tensor<T>| -> Result<Tensor<T>> {
            let g = Graph::inference();
            let y = lin.forward(&g, &store, &TypedVar::new(g.constant(x.clone()), spec.clone()))?;
            Ok((*g.value(y.var)).clone())
        };
        let y = run(&x)?;
        for (k, e) in C4.elements().enumerate() {
            r[k] = r[k].max(run(&act_rows(&spec, e, &x)?)?.max_abs_diff(&act_rows(&spec, e, &y)?));
        }
    }
    rows.push("layer.equivariant_linear", &r, threshold, true);
    Ok(())
}

struct Outputs<T: Scalar> {
    xy: Tensor<T>,
    side: Tensor<T>,
    graspness: Tensor<T>,
    occupancy: Tensor<T>,
    refined: Tensor<T>,
    rotation: Option<Tensor<T>>,
    velocity: Option<Tensor<T>>,
    dam: Option<Tensor<T>>,
    classifier: Option<Tensor<T>>,
}

struct Probe<T: Scalar> {
    tsdf: Tensor<T>,
    points: Vec<[f64; 3]>,
    rots: Vec<Matrix3<f64>>,
    r6: Tensor<T>,
    t: Vec<f64>,
}

fn run_model<T: Scalar>(m: &GraspModel, store: &ParamStore<T>, geo: &GridGeometry, p: &Probe<T>) -> Result<Outputs<T>> {
    let g = Graph::inference();
    let tri = m.encode(&g, store, g.constant(p.tsdf.clone()), geo.clone())?;
    let pv = g.constant(points_tensor(&p.points));
    let raw = m.raw_features(&g, &tri, pv)?;
    let c = m.grasp_features(&g, store, &tri, pv)?;
    let dxy = tri.xy.spec.dim();
    let n_side = raw.spec.dim() - dxy;
    let v = |x| (*g.value(x)).clone();
    let mut out = Outputs {
        xy: v(g.narrow(raw.var, 1, 0, dxy)),
        side: v(g.narrow(raw.var, 1, dxy, n_side)),
        graspness: v(m.graspness(&g, store, &c)?),
        occupancy: v(m.occupancy(&g, store, &raw)?),
        refined: v(c.var),
        rotation: None,
        velocity: None,
        dam: None,
        classifier: None,
    };
    match m.kind {
        ModelKind::EquiGiga => out.rotation = Some(v(m.rotation(&g, store, &c)?)),
        ModelKind::EquiIgd => {
            out.velocity = Some(v(m.flow()?.velocity(&g, store, g.constant(p.r6.clone()), &c, &p.t)?));
            out.dam = Some(v(m.dam()?.forward(&g, store, &tri, pv, &p.rots, &c)?.var));
            out.classifier = Some(v(m.classify(&g, store, &tri, pv, &p.rots, &c)?));
        }
    }
    Ok(out)
}

fn model_rows<T: Scalar>(
    rows: &mut Rows,
    cfg: &RunConfig,
    model: &GraspModel,
    store: &ParamStore<T>,
    opts: &AuditOptions,
    rng: &mut ChaCha8Rng,
    threshold: f64,
) -> Result<()> {
    let enforced = cfg.mode() == Mode::Strict;
    let s = model.encoder.config.grid;
    let geo = GridGeometry::cube(s, crate::scene::WORKSPACE);
    let c = geo.center();
    let xy_spec = model.feature_spec.clone();
    let xy_only = model.encoder.config.xy_spec(0);
    let six = six_d_spec(C4);
    let mut worst: Vec<(&str, [f64; 4])> = Vec::new();
    let mut bump = |name: &'static str, k: usize, r: f64| {
        match worst.iter_mut().find(|w| w.0 == name) {
            Some(w) => w.1[k] = w.1[k].max(r),
            None => {
                let mut a = [0.0; 4];
                a[k] = r;
                worst.push((name, a));
            }
        }
    };
    for _ in 0..opts.samples {
        let n = 12;
        let margin = 2.0 * geo.cell;
        let w = geo.cell * s as f64;
        let probe = Probe {
            tsdf: Tensor::<T>::uniform(&[1, s, s, s], -1.0, 1.0, rng),
            points: (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(margin..w - margin))).collect(),
            rots: (0..n)
                .map(|_| {
                    let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                    *Rotation3::from_scaled_axis(axis.normalize() * rng.gen_range(0.0..3.0)).matrix()
                })
                .collect(),
            r6: Tensor::<T>::randn(&[n, 6], rng),
            t: (0..n).map(|i| i as f64 / n as f64).collect(),
        };
        let base = run_model(model, store, &geo, &probe)?;
        for (k, e) in C4.elements().enumerate() {
            let rotated = Probe {
                tsdf: FeatureField::new(probe.tsdf.clone(), RepresentationSpec::trivial(C4, 1))?.act(e)?.tensor,
                points: probe
                    .points
                    .iter()
                    .map(|p| {
                        let v = e.rotate_xy([p[0] - c[0], p[1] - c[1]]);
                        [v[0] + c[0], v[1] + c[1], p[2]]
                    })
                    .collect(),
                rots: probe.rots.iter().map(|r| vertical_rotation(e) * r).collect(),
                r6: act_rows(&six, e, &probe.r6)?,
                t: probe.t.clone(),
            };
            let out = run_model(model, store, &geo, &rotated)?;
            bump("encoder.xy", k, out.xy.max_abs_diff(&act_rows(&xy_only, e, &base.xy)?));
            bump("encoder.side", k, out.side.max_abs_diff(&base.side));
            bump("head.graspness", k, out.graspness.max_abs_diff(&base.graspness));
            bump("head.occupancy", k, out.occupancy.max_abs_diff(&base.occupancy));
            bump("eda", k, out.refined.max_abs_diff(&act_rows(&xy_spec, e, &base.refined)?));
            if let (Some(a), Some(b)) = (&out.rotation, &base.rotation) {
                bump("head.rotation", k, a.max_abs_diff(&act_rows(&six, e, b)?));
            }
            if let (Some(a), Some(b)) = (&out.velocity, &base.velocity) {
                bump("flow.velocity", k, a.max_abs_diff(&act_rows(&six, e, b)?));
            }
            if let (Some(a), Some(b)) = (&out.dam, &base.dam) {
                bump("graspdam", k, a.max_abs_diff(&act_rows(&xy_spec, e, b)?));
            }
            if let (Some(a), Some(b)) = (&out.classifier, &base.classifier) {
                bump("head.classifier", k, a.max_abs_diff(b));
            }
        }
    }
    for (name, r) in worst {
        rows.push(name, &r, threshold, enforced);
    }
    Ok(())
}

/// Rotate-input / compare-output battery over single layers and the full
/// model. Strict mode enforces every row; other modes enforce the per-layer
/// rows and report the rest.
pub fn audit<T: Scalar>(cfg: &RunConfig, trained: Option<(&GraspModel, &ParamStore<T>)>, opts: &AuditOptions) -> Result<AuditReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa0d1_7000_0000_0005);
    let (layer_tol, model_tol) = match T::DTYPE {
        DType::F32 => (1e-5, 1e-4),
        DType::F64 => (1e-10, 1e-9),
    };
    let mut rows = Rows { rows: Vec::new() };
    layer_rows::<T>(&mut rows, opts, &mut rng, layer_tol)?;
    match trained {
        Some((m, store)) => model_rows(&mut rows, cfg, m, store, opts, &mut rng, model_tol)?,
        None => {
            let (m, mut store) = build_model::<T>(cfg)?;
            let ids: Vec<_> = store
                .iter()
                .filter(|(_, p)| p.name.contains("offset") || p.name.contains("dscn") || p.name.ends_with("bias"))
                .map(|(id, _)| id)
                .collect();
            randomize(&mut store, &ids, &mut rng);
            model_rows(&mut rows, cfg, &m, &store, opts, &mut rng, model_tol)?;
        }
    }
    let passed = rows.rows.iter().all(AuditRow::passed);
    Ok(AuditReport { mode: cfg.mode(), dtype: T::DTYPE, model: cfg.model, rows: rows.rows, passed })
}
