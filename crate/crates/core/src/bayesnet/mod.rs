//! The Bayesian network: attribute nodes, connectivity presets and the
//! conditional distributions produced by per-node MLP heads.
//!
//! Gaussian nodes are modelled in a standardized coordinate `y = (x - offset) / scale`
//! with `y ~ N(mu, diag(1 + exp(sigma))^2)`; the decoded value is
//! `offset + scale * y`. With the identity standardization (offset 0, scale 1)
//! a node is exactly the regression-head Gaussian over its raw value.

pub mod head;

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use head::{HeadGrad, HeadTrace, MlpHead, DEFAULT_HIDDEN};

use crate::body::{backproject, CameraIntrinsics};
use crate::distributions::fisher::{fisher_param_log_density_grad, sample_with_rng, DEFAULT_LAMBDA_SCALE};
use crate::distributions::{DiagGaussianParams, DistributionRecord, FisherNormalizer, LogNormalParams, MatrixFisherParams};
use crate::error::{Error, Result};
use crate::so3::{ProcrustesFactor, Rotation};
use crate::synth::{cell_center, GroundTruthPerson, SceneObservation};

pub const CHECKPOINT_FORMAT: &str = "bnhmr-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const POSE_BLOCK: usize = 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeName {
    /// Observed scene-level feature (evidence, not a random node).
    GlobalFeature,
    /// Observed per-cell feature (evidence, not a random node).
    PatchFeature,
    Intrinsics,
    DetectionScore,
    DetectionFeatures,
    Center2d,
    EncodedDepth,
    Shape,
    Expression,
    Pose,
}

impl NodeName {
    pub const ATTRIBUTES: [NodeName; 5] = [
        NodeName::Center2d,
        NodeName::EncodedDepth,
        NodeName::Shape,
        NodeName::Expression,
        NodeName::Pose,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            NodeName::GlobalFeature => "global_feature",
            NodeName::PatchFeature => "patch_feature",
            NodeName::Intrinsics => "intrinsics",
            NodeName::DetectionScore => "detection_score",
            NodeName::DetectionFeatures => "detection_features",
            NodeName::Center2d => "center2d",
            NodeName::EncodedDepth => "encoded_depth",
            NodeName::Shape => "shape",
            NodeName::Expression => "expression",
            NodeName::Pose => "pose",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let all = [
            NodeName::GlobalFeature,
            NodeName::PatchFeature,
            NodeName::Intrinsics,
            NodeName::DetectionScore,
            NodeName::DetectionFeatures,
            NodeName::Center2d,
            NodeName::EncodedDepth,
            NodeName::Shape,
            NodeName::Expression,
            NodeName::Pose,
        ];
        all.into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::InvalidGraph(format!("unknown node `{s}`")))
    }

    pub fn is_evidence(&self) -> bool {
        matches!(self, NodeName::GlobalFeature | NodeName::PatchFeature)
    }

    pub fn is_person_level(&self) -> bool {
        matches!(self, NodeName::DetectionFeatures) || Self::ATTRIBUTES.contains(self)
    }
}

impl std::fmt::Display for NodeName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Log-normal focal length and Gaussian principal point.
    Intrinsics,
    Bernoulli,
    Deterministic,
    DiagGaussian,
    /// Independent matrix Fisher per joint.
    MatrixFisherProduct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: NodeName,
    pub family: Family,
    /// Dimension of the node's value.
    pub dim: usize,
    /// Number of head outputs (0 for deterministic nodes).
    pub output_dim: usize,
    pub parents: Vec<NodeName>,
    pub deterministic: bool,
    /// Standardization of the value (see module docs). For `center2d` the
    /// offset is relative to the centre of the detection cell.
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
    /// A child reads this node as `(x - offset) / input_scale`.
    pub input_scale: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    NaiveBayes,
    Condimen,
    Variant1,
    Variant2,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "naive_bayes" => Ok(Preset::NaiveBayes),
            "condimen" => Ok(Preset::Condimen),
            "variant1" => Ok(Preset::Variant1),
            "variant2" => Ok(Preset::Variant2),
            _ => Err(Error::Config(format!("unknown preset `{s}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Preset::NaiveBayes => "naive_bayes",
            Preset::Condimen => "condimen",
            Preset::Variant1 => "variant1",
            Preset::Variant2 => "variant2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityPreset {
    pub name: String,
    pub edges: Vec<(NodeName, NodeName)>,
}

impl ConnectivityPreset {
    pub fn from_preset(p: Preset) -> Self {
        use NodeName::*;
        let mut edges = vec![
            (GlobalFeature, Intrinsics),
            (PatchFeature, DetectionScore),
            (PatchFeature, DetectionFeatures),
            (Intrinsics, DetectionFeatures),
        ];
        let f = DetectionFeatures;
        match p {
            Preset::NaiveBayes => {
                edges.extend([(f, Center2d), (f, EncodedDepth), (f, Shape), (f, Expression), (f, Pose)]);
            }
            Preset::Condimen | Preset::Variant1 | Preset::Variant2 => {
                edges.extend([
                    (f, Shape),
                    (f, EncodedDepth),
                    (f, Pose),
                    (Shape, Pose),
                    (f, Center2d),
                    (f, Expression),
                ]);
                if p == Preset::Variant2 {
                    edges.push((EncodedDepth, Shape));
                } else {
                    edges.push((Shape, EncodedDepth));
                }
                if p != Preset::Condimen {
                    edges.extend([(Shape, Expression), (EncodedDepth, Pose), (EncodedDepth, Center2d)]);
                }
            }
        }
        ConnectivityPreset { name: p.name().into(), edges }
    }

    pub fn parents_of(&self, node: NodeName) -> Vec<NodeName> {
        let mut p: Vec<NodeName> = self.edges.iter().filter(|e| e.1 == node).map(|e| e.0).collect();
        p.sort();
        p.dedup();
        p
    }

    /// Kahn ordering of the random nodes; errors on cycles or missing nodes.
    pub fn topological_order(&self) -> Result<Vec<NodeName>> {
        let required = [
            NodeName::Intrinsics,
            NodeName::DetectionScore,
            NodeName::DetectionFeatures,
            NodeName::Center2d,
            NodeName::EncodedDepth,
            NodeName::Shape,
            NodeName::Expression,
            NodeName::Pose,
        ];
        let mut indegree: BTreeMap<NodeName, usize> = required.iter().map(|n| (*n, 0)).collect();
        for (a, b) in &self.edges {
            if b.is_evidence() {
                return Err(Error::InvalidGraph(format!("evidence node `{b}` cannot have parents")));
            }
            if a == b {
                return Err(Error::InvalidGraph(format!("self loop on `{a}`")));
            }
            if !a.is_evidence() && !indegree.contains_key(a) {
                return Err(Error::InvalidGraph(format!("unknown node `{a}`")));
            }
        }
        let edges: BTreeSet<(NodeName, NodeName)> = self.edges.iter().cloned().filter(|e| !e.0.is_evidence()).collect();
        for (_, b) in &edges {
            *indegree.get_mut(b).expect("checked above") += 1;
        }
        let mut ready: Vec<NodeName> = indegree.iter().filter(|(_, d)| **d == 0).map(|(n, _)| *n).collect();
        let mut order = Vec::new();
        while let Some(n) = ready.first().cloned() {
            ready.remove(0);
            order.push(n);
            for (a, b) in &edges {
                if *a == n {
                    let d = indegree.get_mut(b).expect("checked above");
                    *d -= 1;
                    if *d == 0 {
                        ready.push(*b);
                        ready.sort();
                    }
                }
            }
        }
        if order.len() != required.len() {
            return Err(Error::InvalidGraph(format!("{} connectivity contains a cycle", self.name)));
        }
        Ok(order)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub feature_dim: usize,
    pub global_dim: usize,
    pub hidden_dim: usize,
    pub joints: usize,
    pub shape_dim: usize,
    pub expression_dim: usize,
    pub lambda_scale: f64,
    /// Feature grid `[w, h]`.
    pub grid: [usize; 2],
    pub image_size: [u32; 2],
    /// Reference focal length (pixels) around which `ln f` is standardized.
    pub focal_ref: f64,
    /// Reference encoded depth `ln(d / f)`.
    pub depth_ref: f64,
    /// Use the desk-scale standardizations; `false` gives offset 0 / scale 1
    /// everywhere (centre keypoints stay relative to their cell).
    pub standardize: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            feature_dim: 64,
            global_dim: 16,
            hidden_dim: DEFAULT_HIDDEN,
            joints: crate::body::DEFAULT_JOINTS,
            shape_dim: crate::body::SHAPE_DIM,
            expression_dim: crate::body::EXPRESSION_DIM,
            lambda_scale: DEFAULT_LAMBDA_SCALE,
            grid: [8, 8],
            image_size: [384, 384],
            focal_ref: 1000.0,
            depth_ref: -5.3,
            standardize: true,
        }
    }
}

impl NetConfig {
    pub fn cell_size(&self) -> f64 {
        self.image_size[0] as f64 / self.grid[0] as f64
    }

    pub fn value_dim(&self, n: NodeName) -> usize {
        match n {
            NodeName::GlobalFeature => self.global_dim,
            NodeName::PatchFeature => self.feature_dim,
            NodeName::Intrinsics => 3,
            NodeName::DetectionScore => 1,
            NodeName::DetectionFeatures => self.feature_dim + 3,
            NodeName::Center2d => 2,
            NodeName::EncodedDepth => 1,
            NodeName::Shape => self.shape_dim,
            NodeName::Expression => self.expression_dim,
            NodeName::Pose => 9 * self.joints,
        }
    }

    fn standardization(&self, n: NodeName) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.value_dim(n);
        let (w, h) = (self.image_size[0] as f64, self.image_size[1] as f64);
        let cell = self.cell_size();
        if !self.standardize {
            let off = match n {
                NodeName::Intrinsics => vec![0.0, 0.5 * w, 0.5 * h],
                _ => vec![0.0; d],
            };
            return (off, vec![1.0; d], vec![1.0; d]);
        }
        match n {
            NodeName::Intrinsics => (
                vec![self.focal_ref.ln(), 0.5 * w, 0.5 * h],
                vec![0.05, 1.0, 1.0],
                vec![0.3, 0.25 * w, 0.25 * h],
            ),
            NodeName::Center2d => (vec![0.0; 2], vec![cell / 12.0; 2], vec![cell / 2.0; 2]),
            NodeName::EncodedDepth => (vec![self.depth_ref], vec![0.05], vec![0.3]),
            NodeName::Shape | NodeName::Expression => (vec![0.0; d], vec![0.1; d], vec![1.0; d]),
            _ => (vec![0.0; d], vec![1.0; d], vec![1.0; d]),
        }
    }
}

/// A value taken by a node (or an evidence input).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeValue {
    Vector(Vec<f64>),
    Intrinsics(CameraIntrinsics),
    Pose(Vec<Rotation>),
    Flag(bool),
}

impl NodeValue {
    pub fn as_vector(&self) -> Option<&[f64]> {
        match self {
            NodeValue::Vector(v) => Some(v),
            _ => None,
        }
    }
}

/// Per-detection context needed to decode person-level nodes.
#[derive(Clone, Copy, Debug)]
pub struct PersonContext {
    pub cell: [usize; 2],
    pub cell_center: [f64; 2],
}

/// Gaussian in standardized coordinates plus the affine decoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaledGaussian {
    pub params: DiagGaussianParams,
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ScaledGaussian {
    pub fn mode(&self) -> Vec<f64> {
        self.params.mu.iter().zip(&self.offset).zip(&self.scale).map(|((m, o), s)| o + s * m).collect()
    }

    pub fn stds(&self) -> Vec<f64> {
        self.params.stds().iter().zip(&self.scale).map(|(a, s)| a * s).collect()
    }

    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.offset).zip(&self.scale).map(|((x, o), s)| (x - o) / s).collect()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.offset.len() {
            return Err(Error::DimensionMismatch { expected: self.offset.len(), got: x.len() });
        }
        let jac: f64 = self.scale.iter().map(|s| s.ln()).sum();
        Ok(self.params.log_density(&self.standardize(x))? - jac)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let y = self.params.sample(rng);
        y.iter().zip(&self.offset).zip(&self.scale).map(|((y, o), s)| o + s * y).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicsDistribution {
    /// Gaussian over `ln f`.
    pub log_focal: ScaledGaussian,
    pub principal: ScaledGaussian,
    pub image_size: [u32; 2],
}

impl IntrinsicsDistribution {
    /// Log-normal view of the focal length, available when the `ln f`
    /// standardization has unit scale.
    pub fn focal_log_normal(&self) -> Option<LogNormalParams> {
        let raw = self.log_focal.params.sigma_raw()?;
        (self.log_focal.scale[0] == 1.0).then(|| LogNormalParams::new(self.log_focal.mode()[0], raw[0]))
    }

    /// Focal length from the mode of `ln f`, principal point at its mode
    /// clamped into the image.
    pub fn mode(&self) -> CameraIntrinsics {
        let f = self.log_focal.mode()[0].exp();
        let p = self.principal.mode();
        CameraIntrinsics {
            f,
            p: [p[0].clamp(0.0, self.image_size[0] as f64), p[1].clamp(0.0, self.image_size[1] as f64)],
            image_size: self.image_size,
        }
    }

    pub fn log_density(&self, k: &CameraIntrinsics) -> Result<f64> {
        if !(k.f > 0.0) {
            return Err(Error::ParamOutOfRange(format!("focal length {}", k.f)));
        }
        Ok(self.log_focal.log_density(&[k.f.ln()])? - k.f.ln() + self.principal.log_density(&k.p)?)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> CameraIntrinsics {
        let lf = self.log_focal.sample(rng)[0];
        let p = self.principal.sample(rng);
        CameraIntrinsics {
            f: lf.exp(),
            p: [p[0].clamp(0.0, self.image_size[0] as f64), p[1].clamp(0.0, self.image_size[1] as f64)],
            image_size: self.image_size,
        }
    }
}

/// Distribution returned by a node's head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeDistribution {
    Intrinsics(IntrinsicsDistribution),
    Bernoulli { logit: f64 },
    Deterministic(Vec<f64>),
    Gaussian(ScaledGaussian),
    Pose(Vec<MatrixFisherParams>),
}

impl NodeDistribution {
    pub fn mode(&self) -> NodeValue {
        match self {
            NodeDistribution::Intrinsics(d) => NodeValue::Intrinsics(d.mode()),
            NodeDistribution::Bernoulli { logit } => NodeValue::Flag(*logit >= 0.0),
            NodeDistribution::Deterministic(v) => NodeValue::Vector(v.clone()),
            NodeDistribution::Gaussian(g) => NodeValue::Vector(g.mode()),
            NodeDistribution::Pose(p) => NodeValue::Pose(p.iter().map(|f| f.mode).collect()),
        }
    }

    pub fn log_density(&self, value: &NodeValue, norm: &FisherNormalizer) -> Result<f64> {
        match (self, value) {
            (NodeDistribution::Intrinsics(d), NodeValue::Intrinsics(k)) => d.log_density(k),
            (NodeDistribution::Bernoulli { logit }, NodeValue::Flag(s)) => Ok(bernoulli_log_prob(*logit, *s)),
            (NodeDistribution::Deterministic(_), _) => Ok(0.0),
            (NodeDistribution::Gaussian(g), NodeValue::Vector(x)) => g.log_density(x),
            (NodeDistribution::Pose(p), NodeValue::Pose(r)) => {
                if p.len() != r.len() {
                    return Err(Error::DimensionMismatch { expected: p.len(), got: r.len() });
                }
                p.iter().zip(r).map(|(f, r)| crate::distributions::fisher_log_density(f, r, norm)).sum()
            }
            _ => Err(Error::IncompleteAssignment("value kind does not match node family".into())),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, norm: &FisherNormalizer) -> Result<NodeValue> {
        Ok(match self {
            NodeDistribution::Intrinsics(d) => NodeValue::Intrinsics(d.sample(rng)),
            NodeDistribution::Bernoulli { logit } => NodeValue::Flag(rng.random::<f64>() < crate::distributions::sigmoid(*logit)),
            NodeDistribution::Deterministic(v) => NodeValue::Vector(v.clone()),
            NodeDistribution::Gaussian(g) => NodeValue::Vector(g.sample(rng)),
            NodeDistribution::Pose(p) => {
                let mut out = Vec::with_capacity(p.len());
                for f in p {
                    out.push(sample_with_rng(&f.distribution(), norm, rng)?);
                }
                NodeValue::Pose(out)
            }
        })
    }

    /// Family-tagged records for export.
    pub fn records(&self) -> Vec<DistributionRecord> {
        match self {
            NodeDistribution::Intrinsics(d) => {
                let focal = match d.focal_log_normal() {
                    Some(ln) => DistributionRecord::LogNormal(ln),
                    None => DistributionRecord::DiagGaussian(d.log_focal.params.clone()),
                };
                vec![focal, DistributionRecord::DiagGaussian(d.principal.params.clone())]
            }
            NodeDistribution::Gaussian(g) => vec![DistributionRecord::DiagGaussian(g.params.clone())],
            NodeDistribution::Pose(p) => p.iter().cloned().map(DistributionRecord::MatrixFisher).collect(),
            _ => Vec::new(),
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn bernoulli_log_prob(logit: f64, positive: bool) -> f64 {
    if positive {
        -softplus(-logit)
    } else {
        -softplus(logit)
    }
}

/// Appends the unit viewing ray through the centre of `cell` under `k`.
pub fn camera_ray_augment(patch_feature: &[f64], cell: [usize; 2], k: &CameraIntrinsics, cell_size: f64) -> Vec<f64> {
    let ray = k.ray(cell_center(cell, cell_size));
    let mut v = Vec::with_capacity(patch_feature.len() + 3);
    v.extend_from_slice(patch_feature);
    v.extend_from_slice(ray.as_slice());
    v
}

/// Full assignment of one person's random variables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonAssignment {
    pub cell: [usize; 2],
    pub center2d: [f64; 2],
    pub encoded_depth: f64,
    pub shape: Vec<f64>,
    pub expression: Vec<f64>,
    pub pose: Vec<Rotation>,
}

impl PersonAssignment {
    pub fn from_ground_truth(p: &GroundTruthPerson) -> Self {
        PersonAssignment {
            cell: p.cell,
            center2d: p.center2d,
            encoded_depth: p.encoded_depth,
            shape: p.beta.clone(),
            expression: p.gamma.clone(),
            pose: p.theta.clone(),
        }
    }

    pub fn value(&self, n: NodeName) -> Option<NodeValue> {
        Some(match n {
            NodeName::Center2d => NodeValue::Vector(self.center2d.to_vec()),
            NodeName::EncodedDepth => NodeValue::Vector(vec![self.encoded_depth]),
            NodeName::Shape => NodeValue::Vector(self.shape.clone()),
            NodeName::Expression => NodeValue::Vector(self.expression.clone()),
            NodeName::Pose => NodeValue::Pose(self.pose.clone()),
            _ => return None,
        })
    }

    /// Camera-frame position of the head, `backproject(K, c, f exp(ln(d/f)))`.
    pub fn translation(&self, k: &CameraIntrinsics) -> Result<nalgebra::Vector3<f64>> {
        let c = nalgebra::Vector2::new(self.center2d[0], self.center2d[1]);
        backproject(k, &c, k.f * self.encoded_depth.exp())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneAssignment {
    pub intrinsics: CameraIntrinsics,
    pub persons: Vec<PersonAssignment>,
}

impl SceneAssignment {
    pub fn from_observation(obs: &SceneObservation) -> Self {
        SceneAssignment {
            intrinsics: obs.gt_intrinsics,
            persons: obs.gt.iter().map(PersonAssignment::from_ground_truth).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BayesNet {
    pub format: String,
    pub version: u32,
    pub preset: String,
    pub config: NetConfig,
    pub connectivity: ConnectivityPreset,
    /// Random nodes in topological order.
    pub nodes: Vec<NodeSpec>,
    pub heads: BTreeMap<NodeName, MlpHead>,
}

/// Output of one family-specific log-density evaluation.
pub struct OutputDensity {
    pub log_density: f64,
    pub grad: Vec<f64>,
}

impl BayesNet {
    pub fn new(config: NetConfig, preset: Preset, seed: u64) -> Result<Self> {
        Self::with_connectivity(config, ConnectivityPreset::from_preset(preset), seed)
    }

    pub fn with_connectivity(config: NetConfig, connectivity: ConnectivityPreset, seed: u64) -> Result<Self> {
        let order = connectivity.topological_order()?;
        validate_parents(&connectivity)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nodes = Vec::new();
        let mut heads = BTreeMap::new();
        for name in order {
            let parents = connectivity.parents_of(name);
            let (family, output_dim) = match name {
                NodeName::Intrinsics => (Family::Intrinsics, 6),
                NodeName::DetectionScore => (Family::Bernoulli, 1),
                NodeName::DetectionFeatures => (Family::Deterministic, 0),
                NodeName::Pose => (Family::MatrixFisherProduct, POSE_BLOCK * config.joints),
                n => (Family::DiagGaussian, 2 * config.value_dim(n)),
            };
            let (offset, scale, input_scale) = config.standardization(name);
            let deterministic = family == Family::Deterministic;
            if !deterministic {
                let dims: Vec<usize> = parents.iter().map(|p| config.value_dim(*p)).collect();
                let mut bias = vec![0.0; output_dim];
                if name == NodeName::Pose {
                    for j in 0..config.joints {
                        for k in [0, 4, 8] {
                            bias[POSE_BLOCK * j + k] = 1.0;
                            bias[POSE_BLOCK * j + 9 + k] = 1.0;
                        }
                    }
                }
                heads.insert(name, MlpHead::new(&dims, config.hidden_dim, bias, &mut rng));
            }
            nodes.push(NodeSpec {
                name,
                family,
                dim: config.value_dim(name),
                output_dim,
                parents,
                deterministic,
                offset,
                scale,
                input_scale,
            });
        }
        Ok(BayesNet {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            preset: connectivity.name.clone(),
            config,
            connectivity,
            nodes,
            heads,
        })
    }

    pub fn node(&self, n: NodeName) -> &NodeSpec {
        self.nodes.iter().find(|s| s.name == n).expect("every random node exists")
    }

    pub fn head(&self, n: NodeName) -> &MlpHead {
        &self.heads[&n]
    }

    /// Person-level random nodes with heads, in topological order.
    pub fn person_nodes(&self) -> Vec<NodeName> {
        self.nodes.iter().filter(|s| NodeName::ATTRIBUTES.contains(&s.name)).map(|s| s.name).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.heads.values().map(|h| h.parameter_count()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.heads.values().all(|h| h.is_finite())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let net: BayesNet = serde_json::from_str(&s).map_err(|e| Error::json(path, e))?;
        if net.format != CHECKPOINT_FORMAT || net.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                net.format,
                net.version
            )));
        }
        Ok(net)
    }

    /// Head input encoding of a parent's value.
    pub fn encode_input(&self, parent: NodeName, value: &NodeValue, ctx: Option<&PersonContext>) -> Result<Vec<f64>> {
        let dim = self.config.value_dim(parent);
        let out = match (parent, value) {
            (NodeName::Intrinsics, NodeValue::Intrinsics(k)) => {
                let s = self.node(NodeName::Intrinsics);
                vec![
                    (k.f.ln() - s.offset[0]) / s.input_scale[0],
                    (k.p[0] - s.offset[1]) / s.input_scale[1],
                    (k.p[1] - s.offset[2]) / s.input_scale[2],
                ]
            }
            (NodeName::Pose, NodeValue::Pose(r)) => {
                let mut v = Vec::with_capacity(dim);
                for rot in r {
                    let m = rot.matrix() - Matrix3::identity();
                    for i in 0..3 {
                        for j in 0..3 {
                            v.push(m[(i, j)]);
                        }
                    }
                }
                v
            }
            (NodeName::DetectionScore, NodeValue::Flag(b)) => vec![if *b { 1.0 } else { 0.0 }],
            (n, NodeValue::Vector(x)) if n.is_evidence() || n == NodeName::DetectionFeatures => x.clone(),
            (n, NodeValue::Vector(x)) => {
                let s = self.node(n);
                let base = self.context_offset(n, ctx);
                x.iter()
                    .enumerate()
                    .map(|(i, x)| (x - s.offset[i] - base.get(i).copied().unwrap_or(0.0)) / s.input_scale[i])
                    .collect()
            }
            _ => return Err(Error::IncompleteAssignment(format!("bad value kind for `{parent}`"))),
        };
        if out.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: out.len() });
        }
        Ok(out)
    }

    fn context_offset(&self, n: NodeName, ctx: Option<&PersonContext>) -> Vec<f64> {
        match (n, ctx) {
            (NodeName::Center2d, Some(c)) => c.cell_center.to_vec(),
            _ => Vec::new(),
        }
    }

    /// Offsets of a Gaussian node including the per-detection part.
    pub fn gaussian_offset(&self, n: NodeName, ctx: Option<&PersonContext>) -> Vec<f64> {
        let s = self.node(n);
        let base = self.context_offset(n, ctx);
        s.offset.iter().enumerate().map(|(i, o)| o + base.get(i).copied().unwrap_or(0.0)).collect()
    }

    /// Maps a head output row to the node's distribution.
    pub fn decode(&self, n: NodeName, out: &[f64], ctx: Option<&PersonContext>) -> Result<NodeDistribution> {
        let s = self.node(n);
        if out.len() != s.output_dim {
            return Err(Error::DimensionMismatch { expected: s.output_dim, got: out.len() });
        }
        Ok(match s.family {
            Family::Intrinsics => NodeDistribution::Intrinsics(IntrinsicsDistribution {
                log_focal: ScaledGaussian {
                    params: DiagGaussianParams::new(vec![out[0]], vec![out[1]])?,
                    offset: vec![s.offset[0]],
                    scale: vec![s.scale[0]],
                },
                principal: ScaledGaussian {
                    params: DiagGaussianParams::new(vec![out[2], out[3]], vec![out[4], out[5]])?,
                    offset: s.offset[1..3].to_vec(),
                    scale: s.scale[1..3].to_vec(),
                },
                image_size: self.config.image_size,
            }),
            Family::Bernoulli => NodeDistribution::Bernoulli { logit: out[0] },
            Family::Deterministic => NodeDistribution::Deterministic(Vec::new()),
            Family::DiagGaussian => NodeDistribution::Gaussian(ScaledGaussian {
                params: DiagGaussianParams::new(out[..s.dim].to_vec(), out[s.dim..].to_vec())?,
                offset: self.gaussian_offset(n, ctx),
                scale: s.scale.clone(),
            }),
            Family::MatrixFisherProduct => {
                let mut p = Vec::with_capacity(self.config.joints);
                for j in 0..self.config.joints {
                    let b = &out[POSE_BLOCK * j..POSE_BLOCK * (j + 1)];
                    p.push(MatrixFisherParams {
                        mode: rotation_or_identity(&Matrix3::from_row_slice(&b[0..9])),
                        dispersion_rotation: rotation_or_identity(&Matrix3::from_row_slice(&b[9..18])),
                        lambda_raw: [b[18], b[19], b[20]],
                        lambda_scale: self.config.lambda_scale,
                    });
                }
                NodeDistribution::Pose(p)
            }
        })
    }

    /// Log-density of `value` under the distribution encoded by `out`, with
    /// its gradient with respect to `out`.
    pub fn output_log_density(
        &self,
        n: NodeName,
        out: &[f64],
        value: &NodeValue,
        ctx: Option<&PersonContext>,
        norm: &FisherNormalizer,
    ) -> Result<OutputDensity> {
        let s = self.node(n);
        if out.len() != s.output_dim {
            return Err(Error::DimensionMismatch { expected: s.output_dim, got: out.len() });
        }
        let mut grad = vec![0.0; s.output_dim];
        let log_density = match (s.family, value) {
            (Family::Intrinsics, NodeValue::Intrinsics(k)) => {
                if !(k.f > 0.0) {
                    return Err(Error::ParamOutOfRange(format!("focal length {}", k.f)));
                }
                let x = [k.f.ln(), k.p[0], k.p[1]];
                let mut lp = -k.f.ln();
                for (i, (mu_i, sd_i)) in [(0usize, 1usize), (2, 4), (3, 5)].into_iter().enumerate() {
                    let y = (x[i] - s.offset[i]) / s.scale[i];
                    let (l, gm, gs) = gaussian_term(y, out[mu_i], out[sd_i]);
                    lp += l - s.scale[i].ln();
                    grad[mu_i] = gm;
                    grad[sd_i] = gs;
                }
                lp
            }
            (Family::Bernoulli, NodeValue::Flag(b)) => {
                let l = out[0];
                grad[0] = if *b { 1.0 } else { 0.0 } - crate::distributions::sigmoid(l);
                bernoulli_log_prob(l, *b)
            }
            (Family::Deterministic, _) => 0.0,
            (Family::DiagGaussian, NodeValue::Vector(x)) => {
                if x.len() != s.dim {
                    return Err(Error::DimensionMismatch { expected: s.dim, got: x.len() });
                }
                let off = self.gaussian_offset(n, ctx);
                let mut lp = 0.0;
                for i in 0..s.dim {
                    let y = (x[i] - off[i]) / s.scale[i];
                    let (l, gm, gs) = gaussian_term(y, out[i], out[s.dim + i]);
                    lp += l - s.scale[i].ln();
                    grad[i] = gm;
                    grad[s.dim + i] = gs;
                }
                lp
            }
            (Family::MatrixFisherProduct, NodeValue::Pose(r)) => {
                if r.len() != self.config.joints {
                    return Err(Error::DimensionMismatch { expected: self.config.joints, got: r.len() });
                }
                let mut lp = 0.0;
                for (j, rot) in r.iter().enumerate() {
                    let b = &out[POSE_BLOCK * j..POSE_BLOCK * (j + 1)];
                    let g = pose_block_log_density(b, &rot.matrix(), self.config.lambda_scale, norm);
                    lp += g.0;
                    grad[POSE_BLOCK * j..POSE_BLOCK * (j + 1)].copy_from_slice(&g.1);
                }
                lp
            }
            _ => return Err(Error::IncompleteAssignment(format!("value kind does not match node `{n}`"))),
        };
        Ok(OutputDensity { log_density, grad })
    }

    /// Runs a node's head on explicit parent values.
    pub fn head_output(
        &self,
        n: NodeName,
        parent_values: &BTreeMap<NodeName, NodeValue>,
        ctx: Option<&PersonContext>,
    ) -> Result<Vec<f64>> {
        let s = self.node(n);
        let mut inputs = Vec::with_capacity(s.parents.len());
        for p in &s.parents {
            let v = parent_values.get(p).ok_or_else(|| Error::MissingParent {
                node: n.as_str().into(),
                parent: p.as_str().into(),
            })?;
            inputs.push(self.encode_input(*p, v, ctx)?);
        }
        let refs: Vec<&[f64]> = inputs.iter().map(|v| v.as_slice()).collect();
        self.head(n).forward_one(&refs)
    }

    /// Conditional distribution of `n` given explicit parent values.
    pub fn predict_node(
        &self,
        n: NodeName,
        parent_values: &BTreeMap<NodeName, NodeValue>,
        ctx: Option<&PersonContext>,
    ) -> Result<NodeDistribution> {
        if n == NodeName::DetectionFeatures {
            let k = match parent_values.get(&NodeName::Intrinsics) {
                Some(NodeValue::Intrinsics(k)) => *k,
                _ => {
                    return Err(Error::MissingParent { node: n.as_str().into(), parent: "intrinsics".into() });
                }
            };
            let patch = parent_values
                .get(&NodeName::PatchFeature)
                .and_then(|v| v.as_vector())
                .ok_or_else(|| Error::MissingParent { node: n.as_str().into(), parent: "patch_feature".into() })?;
            let cell = ctx.map(|c| c.cell).unwrap_or([0, 0]);
            return Ok(NodeDistribution::Deterministic(camera_ray_augment(patch, cell, &k, self.config.cell_size())));
        }
        let out = self.head_output(n, parent_values, ctx)?;
        self.decode(n, &out, ctx)
    }

    /// Log-density contributions of one person's attribute nodes, keyed by node.
    pub fn person_log_densities(
        &self,
        person: &PersonAssignment,
        k: &CameraIntrinsics,
        obs: &SceneObservation,
        norm: &FisherNormalizer,
    ) -> Result<BTreeMap<NodeName, f64>> {
        self.check_person(person, obs)?;
        let ctx = PersonContext {
            cell: person.cell,
            cell_center: obs.cell_center(person.cell),
        };
        let mut values = BTreeMap::new();
        values.insert(NodeName::Intrinsics, NodeValue::Intrinsics(*k));
        values.insert(
            NodeName::DetectionFeatures,
            NodeValue::Vector(camera_ray_augment(obs.patch(person.cell), person.cell, k, obs.cell_size())),
        );
        for n in NodeName::ATTRIBUTES {
            values.insert(n, person.value(n).expect("attribute"));
        }
        let mut out = BTreeMap::new();
        for n in self.person_nodes() {
            let o = self.head_output(n, &values, Some(&ctx))?;
            out.insert(n, self.output_log_density(n, &o, &values[&n], Some(&ctx), norm)?.log_density);
        }
        Ok(out)
    }

    fn check_person(&self, p: &PersonAssignment, obs: &SceneObservation) -> Result<()> {
        let c = &self.config;
        if p.cell[0] >= obs.grid[0] || p.cell[1] >= obs.grid[1] {
            return Err(Error::IncompleteAssignment(format!("cell {:?} outside the grid", p.cell)));
        }
        if p.shape.len() != c.shape_dim || p.expression.len() != c.expression_dim || p.pose.len() != c.joints {
            return Err(Error::IncompleteAssignment("person assignment has wrong dimensions".into()));
        }
        Ok(())
    }

    /// Sum over the network of conditional log-densities at `values`,
    /// including a Bernoulli term for every detection cell.
    pub fn joint_log_density(&self, values: &SceneAssignment, obs: &SceneObservation, norm: &FisherNormalizer) -> Result<f64> {
        self.check_observation(obs)?;
        let mut total = self.scene_log_density(&values.intrinsics, &values.persons.iter().map(|p| p.cell).collect::<Vec<_>>(), obs, norm)?;
        // Canonical cell order keeps the floating-point sum exchangeable.
        let mut persons: Vec<&PersonAssignment> = values.persons.iter().collect();
        persons.sort_by_key(|p| [p.cell[1], p.cell[0]]);
        for p in persons {
            total += self.person_log_densities(p, &values.intrinsics, obs, norm)?.values().sum::<f64>();
        }
        Ok(total)
    }

    /// Intrinsics and detection-grid terms.
    pub fn scene_log_density(
        &self,
        k: &CameraIntrinsics,
        person_cells: &[[usize; 2]],
        obs: &SceneObservation,
        norm: &FisherNormalizer,
    ) -> Result<f64> {
        let mut ev = BTreeMap::new();
        ev.insert(NodeName::GlobalFeature, NodeValue::Vector(obs.global_feature.clone()));
        let o = self.head_output(NodeName::Intrinsics, &ev, None)?;
        let mut total = self.output_log_density(NodeName::Intrinsics, &o, &NodeValue::Intrinsics(*k), None, norm)?.log_density;
        let occupied: BTreeSet<[usize; 2]> = person_cells.iter().cloned().collect();
        for v in 0..obs.grid[1] {
            for u in 0..obs.grid[0] {
                let mut ev = BTreeMap::new();
                ev.insert(NodeName::PatchFeature, NodeValue::Vector(obs.patch([u, v]).to_vec()));
                let logit = self.head_output(NodeName::DetectionScore, &ev, None)?[0];
                total += bernoulli_log_prob(logit, occupied.contains(&[u, v]));
            }
        }
        Ok(total)
    }

    pub fn check_observation(&self, obs: &SceneObservation) -> Result<()> {
        let c = &self.config;
        if obs.grid != c.grid || obs.patch_features.len() != c.grid[0] * c.grid[1] {
            return Err(Error::DimensionMismatch { expected: c.grid[0] * c.grid[1], got: obs.patch_features.len() });
        }
        if obs.global_feature.len() != c.global_dim {
            return Err(Error::DimensionMismatch { expected: c.global_dim, got: obs.global_feature.len() });
        }
        if let Some(p) = obs.patch_features.iter().find(|p| p.len() != c.feature_dim) {
            return Err(Error::DimensionMismatch { expected: c.feature_dim, got: p.len() });
        }
        Ok(())
    }
}

fn validate_parents(c: &ConnectivityPreset) -> Result<()> {
    use NodeName::*;
    for n in [Intrinsics, DetectionScore, DetectionFeatures, Center2d, EncodedDepth, Shape, Expression, Pose] {
        let p = c.parents_of(n);
        let ok = match n {
            Intrinsics => p.iter().all(|x| *x == GlobalFeature),
            DetectionScore => p.iter().all(|x| *x == PatchFeature),
            DetectionFeatures => p == vec![PatchFeature, Intrinsics] || p == vec![Intrinsics, PatchFeature],
            _ => p.iter().all(|x| !x.is_evidence() && *x != DetectionScore),
        };
        if !ok {
            return Err(Error::InvalidGraph(format!("node `{n}` cannot have parents {p:?}")));
        }
    }
    Ok(())
}

/// Special Procrustes with the documented fallback to the identity when the
/// regressed matrix is rank-deficient.
pub fn rotation_or_identity(m: &Matrix3<f64>) -> Rotation {
    crate::so3::special_procrustes(m).unwrap_or_else(|_| Rotation::identity())
}

/// `(log N(y; mu, (1 + exp s)^2), d/dmu, d/ds)`.
#[inline]
pub fn gaussian_term(y: f64, mu: f64, sigma_raw: f64) -> (f64, f64, f64) {
    let e = sigma_raw.exp();
    let sd = 1.0 + e;
    let d = y - mu;
    let z = d / sd;
    let l = -0.5 * (2.0 * PI).ln() - sd.ln() - 0.5 * z * z;
    (l, d / (sd * sd), (-1.0 / sd + d * d / (sd * sd * sd)) * e)
}

/// Log-density of one joint's rotation under a 21-value pose block, and its
/// gradient with respect to the block (through both Procrustes projections).
pub fn pose_block_log_density(
    block: &[f64],
    r_gt: &Matrix3<f64>,
    lambda_scale: f64,
    norm: &FisherNormalizer,
) -> (f64, [f64; POSE_BLOCK]) {
    let mm = Matrix3::from_row_slice(&block[0..9]);
    let mo = Matrix3::from_row_slice(&block[9..18]);
    let fm = ProcrustesFactor::new(&mm).ok();
    let fo = ProcrustesFactor::new(&mo).ok();
    let rm = fm.as_ref().map(|f| f.rotation).unwrap_or_else(Matrix3::identity);
    let ro = fo.as_ref().map(|f| f.rotation).unwrap_or_else(Matrix3::identity);
    let lam = [block[18], block[19], block[20]];
    let g = fisher_param_log_density_grad(&rm, &ro, &lam, lambda_scale, r_gt, norm);
    let mut out = [0.0; POSE_BLOCK];
    if let Some(f) = fm {
        let gm = f.backward(&g.grad_mode);
        for i in 0..3 {
            for j in 0..3 {
                out[3 * i + j] = gm[(i, j)];
            }
        }
    }
    if let Some(f) = fo {
        let go = f.backward(&g.grad_dispersion);
        for i in 0..3 {
            for j in 0..3 {
                out[9 + 3 * i + j] = go[(i, j)];
            }
        }
    }
    out[18..21].copy_from_slice(&g.grad_lambda_raw);
    (g.log_density, out)
}

/// Draws an arbitrary but valid assignment, for tests and oracles.
pub fn random_person<R: Rng + ?Sized>(config: &NetConfig, cell: [usize; 2], rng: &mut R) -> PersonAssignment {
    let cs = config.cell_size();
    let cc = cell_center(cell, cs);
    PersonAssignment {
        cell,
        center2d: [cc[0] + rng.random_range(-0.4..0.4) * cs, cc[1] + rng.random_range(-0.4..0.4) * cs],
        encoded_depth: config.depth_ref + 0.3 * rng.sample::<f64, _>(StandardNormal),
        shape: (0..config.shape_dim).map(|_| rng.sample(StandardNormal)).collect(),
        expression: (0..config.expression_dim).map(|_| rng.sample(StandardNormal)).collect(),
        pose: (0..config.joints).map(|_| Rotation::random(rng)).collect(),
    }
}
