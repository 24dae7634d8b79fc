//! EquiGIGA / EquiIGD models: encoder plus decoding heads and composite losses.

use nalgebra::Matrix3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dam::GraspDam;
use super::eda::Eda;
use super::flow::FlowNet;
use super::mlp::Mlp;
use super::rotation::{rotation_loss, six_d_from_matrix, six_d_spec};
use crate::error::{Error, Result};
use crate::group::{CyclicGroup, GridGeometry, RepresentationSpec};
use crate::steerable::TypedVar;
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::triplane::{EncoderConfig, TriplaneEncoder, TriplaneFeatures};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Graspness, occupancy and direct 6D rotation regression.
    EquiGiga,
    /// Graspness, occupancy, flow-matched rotations and a grasp classifier.
    EquiIgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Regular blocks in each hidden layer.
    pub hidden_blocks: usize,
    pub eda: bool,
    pub eda_offsets: usize,
    /// Metres per unit of predicted EDA offset.
    pub eda_offset_scale: f64,
    pub control_points: usize,
    /// Half-extent of the initial control-point cloud, metres.
    pub control_extent: f64,
    /// Regular blocks of GraspDAM keys and queries.
    pub key_blocks: usize,
    pub focal_gamma: f64,
    pub flow_steps: usize,
    pub time_features: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden_blocks: 8,
            eda: true,
            eda_offsets: 8,
            eda_offset_scale: 0.02,
            control_points: 6,
            control_extent: 0.04,
            key_blocks: 2,
            focal_gamma: 2.0,
            flow_steps: 20,
            time_features: 8,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_blocks == 0 || self.key_blocks == 0 || self.flow_steps == 0 {
            return Err(Error::Config("hidden_blocks, key_blocks and flow_steps must be positive".into()));
        }
        if self.eda && self.eda_offsets == 0 {
            return Err(Error::Config("eda_offsets must be positive when EDA is enabled".into()));
        }
        if self.focal_gamma < 0.0 {
            return Err(Error::Config(format!("focal_gamma must be non-negative, got {}", self.focal_gamma)));
        }
        Ok(())
    }
}

/// Supervision for one scene; every point is in world metres.
#[derive(Debug, Clone, Default)]
pub struct GraspBatch {
    /// Grasp centres with their graspness target (any successful approach).
    pub positions: Vec<[f64; 3]>,
    pub graspness: Vec<f64>,
    /// Individual grasp samples with success labels.
    pub grasp_points: Vec<[f64; 3]>,
    pub grasp_rotations: Vec<Matrix3<f64>>,
    pub grasp_success: Vec<f64>,
    pub occupancy_points: Vec<[f64; 3]>,
    pub occupancy: Vec<f64>,
}

impl GraspBatch {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("graspness", self.positions.len(), self.graspness.len()),
            ("grasp rotations", self.grasp_points.len(), self.grasp_rotations.len()),
            ("grasp success", self.grasp_points.len(), self.grasp_success.len()),
            ("occupancy", self.occupancy_points.len(), self.occupancy.len()),
        ];
        for (what, a, b) in checks {
            if a != b {
                return Err(Error::Data(format!("{what}: {a} points but {b} labels")));
            }
        }
        if self.positions.is_empty() {
            return Err(Error::Data("batch has no graspness samples".into()));
        }
        if self.occupancy_points.is_empty() {
            return Err(Error::Data("batch has no occupancy samples".into()));
        }
        Ok(())
    }

    /// Indices of successful grasp samples.
    pub fn positives(&self) -> Vec<usize> {
        (0..self.grasp_success.len()).filter(|&i| self.grasp_success[i] > 0.5).collect()
    }
}

/// Scalar values of every loss term; absent terms are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub rot: f64,
    pub flow: f64,
    pub graspness: f64,
    pub grasp: f64,
    pub occ: f64,
    pub total: f64,
}

impl LossTerms {
    /// `L_rot + L_graspness + L_occ` or `L_flow + L_graspness + L_grasp + L_occ`.
    pub fn composite(kind: ModelKind, rot: f64, flow: f64, graspness: f64, grasp: f64, occ: f64) -> Self {
        let total = match kind {
            ModelKind::EquiGiga => rot + graspness + occ,
            ModelKind::EquiIgd => flow + graspness + grasp + occ,
        };
        Self { rot, flow, graspness, grasp, occ, total }
    }
}

pub fn points_tensor<T: Scalar>(points: &[[f64; 3]]) -> Tensor<T> {
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    Tensor::from_f64(vec![points.len(), 3], &flat).expect("point shape")
}

/// Encoder and heads.
pub struct GraspModel {
    pub kind: ModelKind,
    pub encoder: TriplaneEncoder,
    pub decoder: DecoderConfig,
    pub feature_spec: RepresentationSpec,
    graspness: Mlp,
    occupancy: Mlp,
    rotation: Option<Mlp>,
    eda: Option<Eda>,
    flow: Option<FlowNet>,
    dam: Option<GraspDam>,
    classifier: Option<Mlp>,
}

impl GraspModel {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        kind: ModelKind,
        encoder: &EncoderConfig,
        decoder: &DecoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        decoder.validate()?;
        let eq = encoder.equivariant;
        let enc = TriplaneEncoder::new(store, "encoder", encoder, rng)?;
        let group = CyclicGroup::C4;
        let spec = if eq {
            encoder.feature_spec()
        } else {
            RepresentationSpec::trivial(group, encoder.feature_dim())
        };
        let hidden = if eq {
            RepresentationSpec::regular(group, decoder.hidden_blocks)
        } else {
            RepresentationSpec::trivial(group, 4 * decoder.hidden_blocks)
        };
        let one = RepresentationSpec::trivial(group, 1);
        let head = |store: &mut ParamStore<T>, name: &str, out: &RepresentationSpec, rng: &mut R| {
            Mlp::new(store, name, &[spec.clone(), hidden.clone(), out.clone()], eq, rng)
        };
        let graspness = head(store, "head.graspness", &one, rng)?;
        let occupancy = head(store, "head.occupancy", &one, rng)?;
        let eda = if decoder.eda {
            Some(Eda::new(store, "eda", &spec, decoder.eda_offsets, decoder.eda_offset_scale, eq, rng)?)
        } else {
            None
        };
        let (mut rotation, mut flow, mut dam, mut classifier) = (None, None, None, None);
        match kind {
            ModelKind::EquiGiga => rotation = Some(head(store, "head.rotation", &six_d_spec(group), rng)?),
            ModelKind::EquiIgd => {
                flow = Some(FlowNet::new(store, "flow", &spec, &hidden, decoder.time_features, eq, rng)?);
                let keys = if eq {
                    RepresentationSpec::regular(group, decoder.key_blocks)
                } else {
                    RepresentationSpec::trivial(group, 4 * decoder.key_blocks)
                };
                dam = Some(GraspDam::new(store, "dam", &spec, &keys, decoder.control_points, decoder.control_extent, eq, rng)?);
                classifier = Some(head(store, "head.classifier", &one, rng)?);
            }
        }
        Ok(Self {
            kind,
            encoder: enc,
            decoder: decoder.clone(),
            feature_spec: spec,
            graspness,
            occupancy,
            rotation,
            eda,
            flow,
            dam,
            classifier,
        })
    }

    pub fn encode<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, tsdf: Var, geometry: GridGeometry) -> Result<TriplaneFeatures> {
        self.encoder.encode(g, store, tsdf, geometry)
    }

    /// Raw features `c(p)` retyped to the model feature spec.
    pub fn raw_features<T: Scalar>(&self, g: &Graph<T>, tri: &TriplaneFeatures, points: Var) -> Result<TypedVar> {
        let q = tri.query(g, points)?;
        Ok(TypedVar::new(q.var, self.feature_spec.clone()))
    }

    /// Features used by the grasp heads: EDA-refined when enabled.
    pub fn grasp_features<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, tri: &TriplaneFeatures, points: Var) -> Result<TypedVar> {
        let c = self.raw_features(g, tri, points)?;
        match &self.eda {
            Some(e) => e.forward(g, store, tri, points, &c),
            None => Ok(c),
        }
    }

    fn probability<T: Scalar>(g: &Graph<T>, store: &ParamStore<T>, head: &Mlp, c: &TypedVar) -> Result<Var> {
        let y = head.forward(g, store, c)?;
        let n = g.shape(y.var)[0];
        let p = g.sigmoid(y.var);
        Ok(g.reshape(p, &[n]))
    }

    /// Graspness `a ∈ [0, 1]`, `[N]`.
    pub fn graspness<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, c: &TypedVar) -> Result<Var> {
        Self::probability(g, store, &self.graspness, c)
    }

    /// Occupancy probability, `[N]`.
    pub fn occupancy<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, c: &TypedVar) -> Result<Var> {
        Self::probability(g, store, &self.occupancy, c)
    }

    /// Regressed 6D rotations `[N, 6]` (EquiGIGA).
    pub fn rotation<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, c: &TypedVar) -> Result<Var> {
        let head = self.rotation.as_ref().ok_or_else(|| Error::Config("model has no rotation head".into()))?;
        Ok(head.forward(g, store, c)?.var)
    }

    pub fn flow(&self) -> Result<&FlowNet> {
        self.flow.as_ref().ok_or_else(|| Error::Config("model has no flow network".into()))
    }

    pub fn eda(&self) -> Option<&Eda> {
        self.eda.as_ref()
    }

    pub fn dam(&self) -> Result<&GraspDam> {
        self.dam.as_ref().ok_or_else(|| Error::Config("model has no GraspDAM".into()))
    }

    /// Classifier score `v ∈ [0, 1]` of grasps `(centers, rotations)`, `[N]` (EquiIGD).
    pub fn classify<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        tri: &TriplaneFeatures,
        centers: Var,
        rotations: &[Matrix3<f64>],
        c: &TypedVar,
    ) -> Result<Var> {
        let cls = self.classifier.as_ref().ok_or_else(|| Error::Config("model has no grasp classifier".into()))?;
        let bar = self.dam()?.forward(g, store, tri, centers, rotations, c)?;
        Self::probability(g, store, cls, &bar)
    }

    /// Composite training loss of one scene and its term values.
    pub fn loss<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        tsdf: &Tensor<T>,
        geometry: &GridGeometry,
        batch: &GraspBatch,
        rng: &mut impl Rng,
    ) -> Result<(Var, LossTerms)> {
        batch.validate()?;
        let tri = self.encode(g, store, g.constant(tsdf.clone()), geometry.clone())?;
        let read = |v: Var| g.value(v).item().f64();

        let pos = g.constant(points_tensor(&batch.positions));
        let c = self.grasp_features(g, store, &tri, pos)?;
        let a = self.graspness(g, store, &c)?;
        let l_graspness = g.bce_loss(a, &batch.graspness)?;

        let occ_pts = g.constant(points_tensor(&batch.occupancy_points));
        let co = self.raw_features(g, &tri, occ_pts)?;
        let o = self.occupancy(g, store, &co)?;
        let l_occ = g.bce_loss(o, &batch.occupancy)?;

        let mut total = g.add(l_graspness, l_occ);
        let (mut rot, mut flow, mut grasp) = (0.0, 0.0, 0.0);
        let positives = batch.positives();
        let pos_points: Vec<[f64; 3]> = positives.iter().map(|&i| batch.grasp_points[i]).collect();
        let pos_rot: Vec<Matrix3<f64>> = positives.iter().map(|&i| batch.grasp_rotations[i]).collect();
        match self.kind {
            ModelKind::EquiGiga => {
                if !positives.is_empty() {
                    let cp = self.grasp_features(g, store, &tri, g.constant(points_tensor(&pos_points)))?;
                    let r = self.rotation(g, store, &cp)?;
                    let l = rotation_loss(g, r, &pos_rot)?;
                    rot = read(l);
                    total = g.add(total, l);
                }
            }
            ModelKind::EquiIgd => {
                if !positives.is_empty() {
                    let cp = self.grasp_features(g, store, &tri, g.constant(points_tensor(&pos_points)))?;
                    let targets: Vec<[f64; 6]> = pos_rot.iter().map(six_d_from_matrix).collect();
                    let l = self.flow()?.loss(g, store, &cp, &targets, rng)?;
                    flow = read(l);
                    total = g.add(total, l);
                }
                if !batch.grasp_points.is_empty() {
                    let centers = g.constant(points_tensor(&batch.grasp_points));
                    let cg = self.grasp_features(g, store, &tri, centers)?;
                    let v = self.classify(g, store, &tri, centers, &batch.grasp_rotations, &cg)?;
                    let l = g.focal_loss(v, &batch.grasp_success, self.decoder.focal_gamma)?;
                    grasp = read(l);
                    total = g.add(total, l);
                }
            }
        }
        let terms = LossTerms::composite(self.kind, rot, flow, read(l_graspness), grasp, read(l_occ));
        Ok((total, terms))
    }
}
