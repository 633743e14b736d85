//! Prediction from a network: greedy mode extraction, ancestral sampling,
//! known-value injection and multi-view fusion.

pub mod hungarian;
pub mod multiview;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use hungarian::{assign_rectangular, hungarian, median_no_match_cost};
pub use multiview::{
    fuse_multiview, fuse_pose_multiview, match_people, rigid_align, rigid_align_init, FusedPerson, MultiViewResult,
    RigidTransform,
};

use crate::bayesnet::{camera_ray_augment, BayesNet, NodeDistribution, NodeName, NodeValue, PersonAssignment, PersonContext};
use crate::body::{backproject, forward_kinematics, CameraIntrinsics, KinematicBody};
use crate::detection::{detect, DetectionGrid, DEFAULT_THRESHOLD};
use crate::distributions::FisherNormalizer;
use crate::error::{Error, Result};
use crate::so3::Rotation;
use crate::synth::SceneObservation;

/// Values injected in place of mode extraction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KnownValues {
    pub intrinsics: Option<CameraIntrinsics>,
    /// Detection cells to use instead of running the detector.
    pub cells: Option<Vec<[usize; 2]>>,
    /// Clamped attribute values per detection cell.
    pub per_cell: BTreeMap<[usize; 2], BTreeMap<NodeName, NodeValue>>,
}

impl KnownValues {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with_intrinsics(k: CameraIntrinsics) -> Self {
        KnownValues { intrinsics: Some(k), ..Self::default() }
    }

    pub fn clamp(&mut self, cell: [usize; 2], node: NodeName, value: NodeValue) {
        self.per_cell.entry(cell).or_default().insert(node, value);
    }
}

/// One detected person with extracted attribute values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonState {
    pub cell: [usize; 2],
    pub score: f64,
    pub center2d: [f64; 2],
    /// `ln(d / f)`.
    pub encoded_depth: f64,
    /// Metric distance `d = f exp(encoded_depth)`.
    pub depth: f64,
    /// Camera-frame head position, derived from `center2d` and `depth`.
    pub t: [f64; 3],
    pub theta: Vec<Rotation>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Predicted conditional distributions of the unclamped attributes.
    pub distributions: BTreeMap<NodeName, NodeDistribution>,
    pub clamped: BTreeSet<NodeName>,
}

impl PersonState {
    pub fn from_assignment(
        a: &PersonAssignment,
        k: &CameraIntrinsics,
        score: f64,
        distributions: BTreeMap<NodeName, NodeDistribution>,
        clamped: BTreeSet<NodeName>,
    ) -> Result<Self> {
        let depth = k.f * a.encoded_depth.exp();
        let t = backproject(k, &Vector2::new(a.center2d[0], a.center2d[1]), depth)?;
        Ok(PersonState {
            cell: a.cell,
            score,
            center2d: a.center2d,
            encoded_depth: a.encoded_depth,
            depth,
            t: [t.x, t.y, t.z],
            theta: a.pose.clone(),
            beta: a.shape.clone(),
            gamma: a.expression.clone(),
            distributions,
            clamped,
        })
    }

    pub fn assignment(&self) -> PersonAssignment {
        PersonAssignment {
            cell: self.cell,
            center2d: self.center2d,
            encoded_depth: self.encoded_depth,
            shape: self.beta.clone(),
            expression: self.gamma.clone(),
            pose: self.theta.clone(),
        }
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.t)
    }

    /// Camera-frame body points.
    pub fn points(&self, body: &KinematicBody) -> Result<Vec<Vector3<f64>>> {
        forward_kinematics(body, &self.theta, &self.beta, &self.translation())
    }

    /// Body points relative to the head position.
    pub fn centred_points(&self, body: &KinematicBody) -> Result<Vec<Vector3<f64>>> {
        forward_kinematics(body, &self.theta, &self.beta, &Vector3::zeros())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModePrediction {
    pub intrinsics: CameraIntrinsics,
    pub intrinsics_clamped: bool,
    pub intrinsics_distribution: Option<NodeDistribution>,
    /// Detector scores per cell, row-major.
    pub detection_scores: Vec<f64>,
    pub persons: Vec<PersonState>,
}

fn global_evidence(obs: &SceneObservation) -> BTreeMap<NodeName, NodeValue> {
    let mut ev = BTreeMap::new();
    ev.insert(NodeName::GlobalFeature, NodeValue::Vector(obs.global_feature.clone()));
    ev
}

/// Detector logits for every cell.
pub fn detection_logits(net: &BayesNet, obs: &SceneObservation) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(obs.patch_features.len());
    for v in 0..obs.grid[1] {
        for u in 0..obs.grid[0] {
            let mut ev = BTreeMap::new();
            ev.insert(NodeName::PatchFeature, NodeValue::Vector(obs.patch([u, v]).to_vec()));
            out.push(net.head_output(NodeName::DetectionScore, &ev, None)?[0]);
        }
    }
    Ok(out)
}

fn check_known(net: &BayesNet, obs: &SceneObservation, known: &KnownValues) -> Result<()> {
    if let Some(k) = &known.intrinsics {
        k.validate()?;
    }
    let cells = known.cells.iter().flatten().chain(known.per_cell.keys());
    for c in cells {
        if c[0] >= obs.grid[0] || c[1] >= obs.grid[1] {
            return Err(Error::ParamOutOfRange(format!("cell {c:?} outside the grid")));
        }
    }
    for values in known.per_cell.values() {
        for (n, v) in values {
            let dim = net.config.value_dim(*n);
            let got = match v {
                NodeValue::Vector(x) => x.len(),
                NodeValue::Pose(r) => 9 * r.len(),
                _ => return Err(Error::ParamOutOfRange(format!("cannot clamp `{n}` to {v:?}"))),
            };
            if !NodeName::ATTRIBUTES.contains(n) || got != dim {
                return Err(Error::DimensionMismatch { expected: dim, got });
            }
        }
    }
    Ok(())
}

/// Greedy mode extraction with the default detection threshold.
pub fn extract_mode(net: &BayesNet, obs: &SceneObservation, known: &KnownValues) -> Result<ModePrediction> {
    extract_mode_with_threshold(net, obs, known, DEFAULT_THRESHOLD)
}

/// Topological sweep: each node takes the mode of its conditional given the
/// already assigned parents, or its injected value when known.
pub fn extract_mode_with_threshold(
    net: &BayesNet,
    obs: &SceneObservation,
    known: &KnownValues,
    threshold: f64,
) -> Result<ModePrediction> {
    net.check_observation(obs)?;
    check_known(net, obs, known)?;
    let (k, k_dist) = match known.intrinsics {
        Some(k) => (k, None),
        None => {
            let d = net.predict_node(NodeName::Intrinsics, &global_evidence(obs), None)?;
            match d.mode() {
                NodeValue::Intrinsics(k) => (k, Some(d)),
                _ => unreachable!("intrinsics node decodes to intrinsics"),
            }
        }
    };
    let logits = detection_logits(net, obs)?;
    let grid = DetectionGrid::from_logits(obs.grid[0], obs.grid[1], &logits)?;
    let cells: Vec<([usize; 2], f64)> = match &known.cells {
        Some(c) => c.iter().map(|c| (*c, grid.score(c[0], c[1]))).collect(),
        None => detect(&grid, threshold).into_iter().map(|d| ([d.u, d.v], d.score)).collect(),
    };
    let empty = BTreeMap::new();
    let mut persons = Vec::with_capacity(cells.len());
    for (cell, score) in cells {
        let clamp = known.per_cell.get(&cell).unwrap_or(&empty);
        persons.push(extract_person(net, obs, &k, cell, score, clamp)?);
    }
    Ok(ModePrediction {
        intrinsics: k,
        intrinsics_clamped: known.intrinsics.is_some(),
        intrinsics_distribution: k_dist,
        detection_scores: grid.scores,
        persons,
    })
}

fn person_values(net: &BayesNet, obs: &SceneObservation, k: &CameraIntrinsics, cell: [usize; 2]) -> BTreeMap<NodeName, NodeValue> {
    let mut values = BTreeMap::new();
    values.insert(NodeName::Intrinsics, NodeValue::Intrinsics(*k));
    values.insert(
        NodeName::DetectionFeatures,
        NodeValue::Vector(camera_ray_augment(obs.patch(cell), cell, k, net.config.cell_size())),
    );
    values
}

fn assignment_from_values(cell: [usize; 2], values: &BTreeMap<NodeName, NodeValue>) -> Result<PersonAssignment> {
    let vec = |n: NodeName| -> Result<Vec<f64>> {
        values
            .get(&n)
            .and_then(|v| v.as_vector())
            .map(|v| v.to_vec())
            .ok_or_else(|| Error::IncompleteAssignment(format!("no value for `{n}`")))
    };
    let c = vec(NodeName::Center2d)?;
    let pose = match values.get(&NodeName::Pose) {
        Some(NodeValue::Pose(r)) => r.clone(),
        _ => return Err(Error::IncompleteAssignment("no value for `pose`".into())),
    };
    Ok(PersonAssignment {
        cell,
        center2d: [c[0], c[1]],
        encoded_depth: vec(NodeName::EncodedDepth)?[0],
        shape: vec(NodeName::Shape)?,
        expression: vec(NodeName::Expression)?,
        pose,
    })
}

fn extract_person(
    net: &BayesNet,
    obs: &SceneObservation,
    k: &CameraIntrinsics,
    cell: [usize; 2],
    score: f64,
    clamp: &BTreeMap<NodeName, NodeValue>,
) -> Result<PersonState> {
    let ctx = PersonContext { cell, cell_center: obs.cell_center(cell) };
    let mut values = person_values(net, obs, k, cell);
    let mut distributions = BTreeMap::new();
    let mut clamped = BTreeSet::new();
    for n in net.person_nodes() {
        if let Some(v) = clamp.get(&n) {
            values.insert(n, v.clone());
            clamped.insert(n);
            continue;
        }
        let d = net.predict_node(n, &values, Some(&ctx))?;
        values.insert(n, d.mode());
        distributions.insert(n, d);
    }
    PersonState::from_assignment(&assignment_from_values(cell, &values)?, k, score, distributions, clamped)
}

/// One ancestral sample of the whole scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub intrinsics: CameraIntrinsics,
    pub persons: Vec<PersonAssignment>,
}

/// Draws `n` joint samples in topological order. Detection flags are sampled
/// per cell unless `known.cells` fixes them; known values are kept verbatim.
pub fn sample_hypotheses(
    net: &BayesNet,
    obs: &SceneObservation,
    known: &KnownValues,
    n: usize,
    seed: u64,
    norm: &FisherNormalizer,
) -> Result<Vec<Hypothesis>> {
    if n == 0 {
        return Err(Error::ParamOutOfRange("at least one hypothesis is required".into()));
    }
    net.check_observation(obs)?;
    check_known(net, obs, known)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k_dist = match known.intrinsics {
        Some(_) => None,
        None => Some(net.predict_node(NodeName::Intrinsics, &global_evidence(obs), None)?),
    };
    let logits = detection_logits(net, obs)?;
    let empty = BTreeMap::new();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let k = match (&known.intrinsics, &k_dist) {
            (Some(k), _) => *k,
            (None, Some(d)) => match d.sample(&mut rng, norm)? {
                NodeValue::Intrinsics(k) => k,
                _ => unreachable!("intrinsics node samples intrinsics"),
            },
            (None, None) => unreachable!(),
        };
        let cells: Vec<[usize; 2]> = match &known.cells {
            Some(c) => c.clone(),
            None => {
                let mut c = Vec::new();
                for v in 0..obs.grid[1] {
                    for u in 0..obs.grid[0] {
                        let d = NodeDistribution::Bernoulli { logit: logits[v * obs.grid[0] + u] };
                        if d.sample(&mut rng, norm)? == NodeValue::Flag(true) {
                            c.push([u, v]);
                        }
                    }
                }
                c
            }
        };
        let mut persons = Vec::with_capacity(cells.len());
        for cell in cells {
            let ctx = PersonContext { cell, cell_center: obs.cell_center(cell) };
            let clamp = known.per_cell.get(&cell).unwrap_or(&empty);
            let mut values = person_values(net, obs, &k, cell);
            for node in net.person_nodes() {
                let v = match clamp.get(&node) {
                    Some(v) => v.clone(),
                    None => net.predict_node(node, &values, Some(&ctx))?.sample(&mut rng, norm)?,
                };
                values.insert(node, v);
            }
            persons.push(assignment_from_values(cell, &values)?);
        }
        out.push(Hypothesis { intrinsics: k, persons });
    }
    Ok(out)
}

/// Nodes whose densities make up a person's confidence score: location,
/// pose and shape.
pub const CONFIDENCE_NODES: [NodeName; 4] = [NodeName::Center2d, NodeName::EncodedDepth, NodeName::Pose, NodeName::Shape];

/// Log-density of a person's location, pose and shape given the scene's
/// intrinsics and the extracted values of the other nodes.
pub fn person_log_density(
    net: &BayesNet,
    obs: &SceneObservation,
    k: &CameraIntrinsics,
    person: &PersonState,
    norm: &FisherNormalizer,
) -> Result<f64> {
    let all = net.person_log_densities(&person.assignment(), k, obs, norm)?;
    Ok(CONFIDENCE_NODES.iter().filter_map(|n| all.get(n)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayesnet::Preset;
    use crate::so3::So3Grid;
    use crate::testutil::{toy_net, toy_scene};

    fn norm() -> FisherNormalizer {
        FisherNormalizer::with_quantum(So3Grid::cached(1).unwrap(), 0.0)
    }

    fn gt_cells(obs: &SceneObservation) -> KnownValues {
        KnownValues { cells: Some(obs.gt.iter().map(|g| g.cell).collect()), ..KnownValues::none() }
    }

    #[test]
    fn mode_extraction_is_deterministic() {
        let net = toy_net(Preset::Condimen, 1);
        let obs = &toy_scene(3, 2, 1)[0];
        let a = extract_mode(&net, obs, &gt_cells(obs)).unwrap();
        let b = extract_mode(&net, obs, &gt_cells(obs)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.persons.len(), 2);
    }

    #[test]
    fn translation_is_derived_from_center_and_depth() {
        let net = toy_net(Preset::Variant1, 2);
        let obs = &toy_scene(4, 3, 1)[0];
        let m = extract_mode(&net, obs, &gt_cells(obs)).unwrap();
        for p in &m.persons {
            let d = m.intrinsics.f * p.encoded_depth.exp();
            let t = backproject(&m.intrinsics, &Vector2::new(p.center2d[0], p.center2d[1]), d).unwrap();
            assert!((t - p.translation()).norm() < 1e-12);
            assert!((p.depth - d).abs() < 1e-12);
        }
    }

    #[test]
    fn known_intrinsics_and_cells_are_injected() {
        let net = toy_net(Preset::Condimen, 3);
        let obs = &toy_scene(5, 2, 1)[0];
        let k = CameraIntrinsics { f: 333.0, ..obs.gt_intrinsics };
        let known = KnownValues { cells: Some(vec![[0, 0], [3, 2]]), ..KnownValues::with_intrinsics(k) };
        let m = extract_mode(&net, obs, &known).unwrap();
        assert_eq!(m.intrinsics, k);
        assert!(m.intrinsics_clamped);
        assert!(m.intrinsics_distribution.is_none());
        assert_eq!(m.persons.iter().map(|p| p.cell).collect::<Vec<_>>(), vec![[0, 0], [3, 2]]);
        // the detection features see the injected focal length
        let other = extract_mode(&net, obs, &KnownValues { intrinsics: Some(obs.gt_intrinsics), ..known.clone() }).unwrap();
        assert_ne!(m.persons[0].encoded_depth, other.persons[0].encoded_depth);
    }

    #[test]
    fn clamped_values_are_kept_verbatim() {
        let net = toy_net(Preset::Condimen, 4);
        let obs = &toy_scene(6, 2, 1)[0];
        let mut known = gt_cells(obs);
        let cell = obs.gt[0].cell;
        let beta: Vec<f64> = (0..net.config.shape_dim).map(|i| 0.1 * i as f64 - 0.3).collect();
        known.clamp(cell, NodeName::Shape, NodeValue::Vector(beta.clone()));
        let m = extract_mode(&net, obs, &known).unwrap();
        let p = m.persons.iter().find(|p| p.cell == cell).unwrap();
        assert_eq!(p.beta, beta);
        assert!(p.clamped.contains(&NodeName::Shape));
        assert!(!p.distributions.contains_key(&NodeName::Shape));
        let q = m.persons.iter().find(|p| p.cell != cell).unwrap();
        assert!(q.clamped.is_empty());
    }

    #[test]
    fn invalid_known_values_are_rejected() {
        let net = toy_net(Preset::Condimen, 5);
        let obs = &toy_scene(7, 1, 1)[0];
        let outside = KnownValues { cells: Some(vec![[4, 0]]), ..KnownValues::none() };
        assert!(matches!(extract_mode(&net, obs, &outside), Err(Error::ParamOutOfRange(_))));
        let mut wrong = KnownValues::none();
        wrong.clamp([0, 0], NodeName::Shape, NodeValue::Vector(vec![0.0; 3]));
        assert!(matches!(extract_mode(&net, obs, &wrong), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn extracted_values_are_conditional_modes() {
        let net = toy_net(Preset::Variant2, 6);
        let obs = &toy_scene(8, 2, 1)[0];
        let m = extract_mode(&net, obs, &gt_cells(obs)).unwrap();
        let norm = norm();
        for p in &m.persons {
            let base = net.person_log_densities(&p.assignment(), &m.intrinsics, obs, &norm).unwrap();
            for eps in [-1e-3, 1e-3] {
                let mut q = p.clone();
                q.gamma[0] += eps * 10.0;
                let d = net.person_log_densities(&q.assignment(), &m.intrinsics, obs, &norm).unwrap();
                assert!(d[&NodeName::Expression] < base[&NodeName::Expression]);
                let mut q = p.clone();
                q.theta[2] = q.theta[2].compose(&Rotation::from_scaled_axis(&Vector3::new(eps, -eps, 0.5 * eps)));
                let d = net.person_log_densities(&q.assignment(), &m.intrinsics, obs, &norm).unwrap();
                assert!(d[&NodeName::Pose] < base[&NodeName::Pose]);
            }
        }
    }

    #[test]
    fn person_log_density_sums_confidence_nodes() {
        let net = toy_net(Preset::Condimen, 7);
        let obs = &toy_scene(9, 1, 1)[0];
        let m = extract_mode(&net, obs, &gt_cells(obs)).unwrap();
        let norm = norm();
        let p = &m.persons[0];
        let all = net.person_log_densities(&p.assignment(), &m.intrinsics, obs, &norm).unwrap();
        let want: f64 = CONFIDENCE_NODES.iter().map(|n| all[n]).sum();
        assert!((person_log_density(&net, obs, &m.intrinsics, p, &norm).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_seeded_and_respects_clamps() {
        let net = toy_net(Preset::Condimen, 8);
        let obs = &toy_scene(10, 2, 1)[0];
        let norm = norm();
        let mut known = gt_cells(obs);
        let cell = obs.gt[0].cell;
        let beta = vec![0.5; net.config.shape_dim];
        known.clamp(cell, NodeName::Shape, NodeValue::Vector(beta.clone()));
        let a = sample_hypotheses(&net, obs, &known, 20, 42, &norm).unwrap();
        let b = sample_hypotheses(&net, obs, &known, 20, 42, &norm).unwrap();
        let c = sample_hypotheses(&net, obs, &known, 20, 43, &norm).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for h in &a {
            let p = h.persons.iter().find(|p| p.cell == cell).unwrap();
            assert_eq!(p.shape, beta);
            for p in &h.persons {
                let d = net.person_log_densities(p, &h.intrinsics, obs, &norm).unwrap();
                assert!(d.values().all(|v| v.is_finite()));
            }
        }
        assert!(matches!(sample_hypotheses(&net, obs, &known, 0, 1, &norm), Err(Error::ParamOutOfRange(_))));
    }

    #[test]
    fn leaf_samples_average_to_the_mode() {
        let net = toy_net(Preset::Condimen, 9);
        let obs = &toy_scene(11, 1, 1)[0];
        let norm = norm();
        let known = KnownValues { intrinsics: Some(obs.gt_intrinsics), ..gt_cells(obs) };
        let m = extract_mode(&net, obs, &known).unwrap();
        let g = match &m.persons[0].distributions[&NodeName::Expression] {
            NodeDistribution::Gaussian(g) => g.clone(),
            d => panic!("unexpected {d:?}"),
        };
        let n = 1000;
        let hs = sample_hypotheses(&net, obs, &known, n, 5, &norm).unwrap();
        for (i, (mu, sd)) in g.mode().iter().zip(g.stds()).enumerate() {
            let mean = hs.iter().map(|h| h.persons[0].expression[i]).sum::<f64>() / n as f64;
            assert!((mean - mu).abs() < 4.0 * sd / (n as f64).sqrt(), "dim {i}: {mean} vs {mu}");
        }
    }
}
