//! Training: cross-entropy of the network at the ground truth, mode-guiding
//! losses on the greedily extracted mode, and an Adam optimizer.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bayesnet::{
    camera_ray_augment, BayesNet, Family, HeadGrad, HeadTrace, NodeName, NodeValue, PersonAssignment, PersonContext,
};
use crate::body::{project, CameraIntrinsics, KinematicBody};
use crate::distributions::FisherNormalizer;
use crate::error::{Error, Result};
use crate::so3::{ProcrustesFactor, So3Grid};
use crate::synth::SceneObservation;

/// Points closer than this to the camera plane get a constant penalty.
pub const MIN_REPROJECTION_DEPTH: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointNorm {
    /// Sum of absolute coordinate differences.
    L1,
    /// Euclidean distance.
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Observations per mini-batch.
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub fov_range_deg: [f64; 2],
    pub gt_intrinsics_fraction: f64,
    pub point_norm: PointNorm,
    pub mode_guiding: bool,
    /// Grid level and cache quantum of the Fisher normalizer used in training.
    pub normalizer_level: u32,
    pub normalizer_quantum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-6,
            batch_size: 16,
            steps: 2000,
            seed: 0,
            fov_range_deg: [5.0, 170.0],
            gt_intrinsics_fraction: 0.5,
            point_norm: PointNorm::L1,
            mode_guiding: true,
            normalizer_level: 2,
            normalizer_quantum: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {}", self.learning_rate)));
        }
        let [lo, hi] = self.fov_range_deg;
        if !(0.0 < lo && lo <= hi && hi < 180.0) {
            return Err(Error::Config(format!("field-of-view range {lo}..{hi}")));
        }
        if !(0.0..=1.0).contains(&self.gt_intrinsics_fraction) {
            return Err(Error::Config("gt_intrinsics_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn normalizer(&self) -> Result<FisherNormalizer> {
        Ok(FisherNormalizer::with_quantum(So3Grid::cached(self.normalizer_level)?, self.normalizer_quantum))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub l_prob: f64,
    pub l_mesh: f64,
    pub l_reproj: f64,
    pub total: f64,
    pub gt_intrinsics: bool,
}

/// Gradient of a scalar loss with respect to every head parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct NetGrad {
    pub heads: BTreeMap<NodeName, HeadGrad>,
}

impl NetGrad {
    pub fn zeros(net: &BayesNet) -> Self {
        NetGrad { heads: net.heads.iter().map(|(n, h)| (*n, h.zero_grad())).collect() }
    }

    pub fn add(&mut self, other: &NetGrad) {
        for (n, g) in &mut self.heads {
            let o = &other.heads[n];
            for (a, b) in g.input_proj.iter_mut().zip(&o.input_proj) {
                *a += b;
            }
            g.hidden_bias += &o.hidden_bias;
            g.output_proj += &o.output_proj;
            g.output_bias += &o.output_bias;
        }
    }

    /// All entries in the parameter order of [`crate::bayesnet::MlpHead::blocks`].
    pub fn flatten(&self) -> Vec<f64> {
        self.heads.values().flat_map(|g| g.blocks().into_iter().flat_map(|b| b.iter().cloned())).collect()
    }
}

/// Flat view of every head parameter, in [`NetGrad::flatten`] order.
pub fn flatten_params(net: &BayesNet) -> Vec<f64> {
    net.heads.values().flat_map(|h| h.blocks().into_iter().flat_map(|b| b.iter().cloned())).collect()
}

pub fn set_param(net: &mut BayesNet, mut index: usize, value: f64) {
    for h in net.heads.values_mut() {
        for b in h.blocks_mut() {
            if index < b.len() {
                b[index] = value;
                return;
            }
            index -= b.len();
        }
    }
    panic!("parameter index out of range");
}

fn rows_matrix(rows: &[Vec<f64>], dim: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), dim, |r, c| rows[r][c])
}

/// One person row of a batch: its observation, annotation and camera.
#[derive(Clone, Copy)]
struct PersonRow<'a> {
    obs: &'a SceneObservation,
    person: usize,
    k: CameraIntrinsics,
    ctx: PersonContext,
}

fn person_rows<'a>(batch: &[&'a SceneObservation], k_input: Option<&CameraIntrinsics>) -> Vec<PersonRow<'a>> {
    let mut rows = Vec::new();
    for obs in batch {
        let k = k_input.copied().unwrap_or(obs.gt_intrinsics);
        for (i, p) in obs.gt.iter().enumerate() {
            rows.push(PersonRow {
                obs,
                person: i,
                k,
                ctx: PersonContext { cell: p.cell, cell_center: obs.cell_center(p.cell) },
            });
        }
    }
    rows
}

fn detection_feature(net: &BayesNet, row: &PersonRow) -> Vec<f64> {
    let cell = row.obs.gt[row.person].cell;
    camera_ray_augment(row.obs.patch(cell), cell, &row.k, net.config.cell_size())
}

fn encode_rows(
    net: &BayesNet,
    parent: NodeName,
    values: &[NodeValue],
    ctxs: &[Option<PersonContext>],
) -> Result<DMatrix<f64>> {
    let dim = net.config.value_dim(parent);
    let mut rows = Vec::with_capacity(values.len());
    for (v, c) in values.iter().zip(ctxs) {
        rows.push(net.encode_input(parent, v, c.as_ref())?);
    }
    Ok(rows_matrix(&rows, dim))
}

/// Runs one head on stacked rows and accumulates `-(1/n) d log p / d params`.
fn node_cross_entropy(
    net: &BayesNet,
    node: NodeName,
    parent_values: &BTreeMap<NodeName, Vec<NodeValue>>,
    targets: &[NodeValue],
    ctxs: &[Option<PersonContext>],
    norm: &FisherNormalizer,
    weight: f64,
    grad: Option<&mut HeadGrad>,
) -> Result<f64> {
    if targets.is_empty() {
        return Ok(0.0);
    }
    let spec = net.node(node);
    let inputs: Vec<DMatrix<f64>> = spec
        .parents
        .iter()
        .map(|p| encode_rows(net, *p, &parent_values[p], ctxs))
        .collect::<Result<_>>()?;
    let refs: Vec<&DMatrix<f64>> = inputs.iter().collect();
    let head = net.head(node);
    let (out, trace) = head.forward(&refs)?;
    let mut total = 0.0;
    let mut grad_out = DMatrix::zeros(out.nrows(), out.ncols());
    let mut row = vec![0.0; out.ncols()];
    for r in 0..out.nrows() {
        for c in 0..out.ncols() {
            row[c] = out[(r, c)];
        }
        let d = net.output_log_density(node, &row, &targets[r], ctxs[r].as_ref(), norm)?;
        total -= weight * d.log_density;
        for c in 0..out.ncols() {
            grad_out[(r, c)] = -weight * d.grad[c];
        }
    }
    if let Some(g) = grad {
        head.backward(&refs, &trace, &grad_out, g, &[]);
    }
    Ok(total)
}

fn prob_impl(net: &BayesNet, batch: &[&SceneObservation], norm: &FisherNormalizer, mut grad: Option<&mut NetGrad>) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyList);
    }
    for obs in batch {
        net.check_observation(obs)?;
    }
    let w = 1.0 / batch.len() as f64;
    let mut total = 0.0;

    let mut ev = BTreeMap::new();
    ev.insert(NodeName::GlobalFeature, batch.iter().map(|o| NodeValue::Vector(o.global_feature.clone())).collect());
    let targets: Vec<NodeValue> = batch.iter().map(|o| NodeValue::Intrinsics(o.gt_intrinsics)).collect();
    let none = vec![None; batch.len()];
    total += node_cross_entropy(
        net,
        NodeName::Intrinsics,
        &ev,
        &targets,
        &none,
        norm,
        w,
        grad.as_mut().map(|g| g.heads.get_mut(&NodeName::Intrinsics).expect("head")),
    )?;

    let mut patches = Vec::new();
    let mut flags = Vec::new();
    for obs in batch {
        for v in 0..obs.grid[1] {
            for u in 0..obs.grid[0] {
                patches.push(NodeValue::Vector(obs.patch([u, v]).to_vec()));
                flags.push(NodeValue::Flag(obs.gt.iter().any(|p| p.cell == [u, v])));
            }
        }
    }
    let mut ev = BTreeMap::new();
    ev.insert(NodeName::PatchFeature, patches);
    let none = vec![None; flags.len()];
    total += node_cross_entropy(
        net,
        NodeName::DetectionScore,
        &ev,
        &flags,
        &none,
        norm,
        w,
        grad.as_mut().map(|g| g.heads.get_mut(&NodeName::DetectionScore).expect("head")),
    )?;

    let rows = person_rows(batch, None);
    if rows.is_empty() {
        return Ok(total);
    }
    let mut values: BTreeMap<NodeName, Vec<NodeValue>> = BTreeMap::new();
    values.insert(NodeName::DetectionFeatures, rows.iter().map(|r| NodeValue::Vector(detection_feature(net, r))).collect());
    values.insert(NodeName::Intrinsics, rows.iter().map(|r| NodeValue::Intrinsics(r.k)).collect());
    for n in NodeName::ATTRIBUTES {
        let v = rows
            .iter()
            .map(|r| PersonAssignment::from_ground_truth(&r.obs.gt[r.person]).value(n).expect("attribute"))
            .collect();
        values.insert(n, v);
    }
    let ctxs: Vec<Option<PersonContext>> = rows.iter().map(|r| Some(r.ctx)).collect();
    for n in net.person_nodes() {
        let targets = values[&n].clone();
        total += node_cross_entropy(
            net,
            n,
            &values,
            &targets,
            &ctxs,
            norm,
            w,
            grad.as_mut().map(|g| g.heads.get_mut(&n).expect("head")),
        )?;
    }
    Ok(total)
}

/// `-(1/n) sum_i log p(ground truth_i | features_i)` over the batch.
pub fn loss_prob(net: &BayesNet, batch: &[&SceneObservation], norm: &FisherNormalizer) -> Result<f64> {
    prob_impl(net, batch, norm, None)
}

pub fn loss_prob_and_grad(net: &BayesNet, batch: &[&SceneObservation], norm: &FisherNormalizer) -> Result<(f64, NetGrad)> {
    let mut g = NetGrad::zeros(net);
    let l = prob_impl(net, batch, norm, Some(&mut g))?;
    Ok((l, g))
}

/// Mean per-point reprojection error of `pred` (camera frame) under `k_pred`
/// against the 2D pixel targets, with `dL/dpoint`. Errors are measured in
/// units of the larger image side.
pub fn reprojection_error(
    pred: &[Vector3<f64>],
    k_pred: &CameraIntrinsics,
    target_2d: &[[f64; 2]],
    norm: PointNorm,
) -> (f64, Vec<Vector3<f64>>) {
    let n = pred.len() as f64;
    let unit = k_pred.image_size[0].max(k_pred.image_size[1]) as f64;
    let mut total = 0.0;
    let mut grads = vec![Vector3::zeros(); pred.len()];
    for (i, (x, t)) in pred.iter().zip(target_2d).enumerate() {
        if x.z <= MIN_REPROJECTION_DEPTH {
            total += k_pred.diagonal() / unit;
            continue;
        }
        let u = k_pred.f * x.x / x.z + k_pred.p[0];
        let v = k_pred.f * x.y / x.z + k_pred.p[1];
        let (du, dv) = ((u - t[0]) / unit, (v - t[1]) / unit);
        let (gu, gv) = match norm {
            PointNorm::L1 => {
                total += du.abs() + dv.abs();
                (sign(du), sign(dv))
            }
            PointNorm::L2 => {
                let d = (du * du + dv * dv).sqrt();
                total += d;
                if d > 0.0 {
                    (du / d, dv / d)
                } else {
                    (0.0, 0.0)
                }
            }
        };
        let fz = k_pred.f / (x.z * unit);
        grads[i] = Vector3::new(gu * fz, gv * fz, -(gu * x.x + gv * x.y) * fz / x.z) / n;
    }
    (total / n, grads)
}

/// Mean per-point distance between two point sets, with `dL/dpred`.
pub fn point_error(pred: &[Vector3<f64>], target: &[Vector3<f64>], norm: PointNorm) -> (f64, Vec<Vector3<f64>>) {
    let n = pred.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(pred.len());
    for (x, t) in pred.iter().zip(target) {
        let d = x - t;
        match norm {
            PointNorm::L1 => {
                total += d.abs().sum();
                grads.push(d.map(sign) / n);
            }
            PointNorm::L2 => {
                let l = d.norm();
                total += l;
                grads.push(if l > 0.0 { d / (l * n) } else { Vector3::zeros() });
            }
        }
    }
    (total / n, grads)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Ground-truth 2D projections of every body point under the true camera.
pub fn ground_truth_points(body: &KinematicBody, obs: &SceneObservation, person: usize) -> Result<Vec<Vector3<f64>>> {
    let p = &obs.gt[person];
    crate::body::forward_kinematics(body, &p.theta, &p.beta, &p.translation())
}

struct ModeNode {
    inputs: Vec<DMatrix<f64>>,
    trace: HeadTrace,
    factors: Vec<Vec<Option<ProcrustesFactor>>>,
}

/// Mean mode-guiding losses over the people of a batch, extracted greedily at
/// the annotated cells with the intrinsics clamped to `k_input` (or each
/// observation's true intrinsics when `None`). Returns `(l_reproj, l_mesh)`
/// and, when requested, their gradient.
pub fn mode_guiding_loss(
    net: &BayesNet,
    batch: &[&SceneObservation],
    k_input: Option<&CameraIntrinsics>,
    with_mesh: bool,
    point_norm: PointNorm,
    want_grad: bool,
) -> Result<(f64, f64, Option<NetGrad>)> {
    let rows = person_rows(batch, k_input);
    if rows.is_empty() {
        return Ok((0.0, 0.0, want_grad.then(|| NetGrad::zeros(net))));
    }
    let body = KinematicBody::with_joints(net.config.joints);
    let n_rows = rows.len();
    let joints = net.config.joints;
    let ctxs: Vec<Option<PersonContext>> = rows.iter().map(|r| Some(r.ctx)).collect();
    let mut values: BTreeMap<NodeName, Vec<NodeValue>> = BTreeMap::new();
    values.insert(NodeName::DetectionFeatures, rows.iter().map(|r| NodeValue::Vector(detection_feature(net, r))).collect());
    values.insert(NodeName::Intrinsics, rows.iter().map(|r| NodeValue::Intrinsics(r.k)).collect());

    let order = net.person_nodes();
    let mut saved: BTreeMap<NodeName, ModeNode> = BTreeMap::new();
    for &n in &order {
        let spec = net.node(n);
        let inputs: Vec<DMatrix<f64>> =
            spec.parents.iter().map(|p| encode_rows(net, *p, &values[p], &ctxs)).collect::<Result<_>>()?;
        let refs: Vec<&DMatrix<f64>> = inputs.iter().collect();
        let (out, trace) = net.head(n).forward(&refs)?;
        let mut vals = Vec::with_capacity(n_rows);
        let mut factors = Vec::new();
        match spec.family {
            Family::DiagGaussian => {
                for r in 0..n_rows {
                    let off = net.gaussian_offset(n, ctxs[r].as_ref());
                    vals.push(NodeValue::Vector((0..spec.dim).map(|i| off[i] + spec.scale[i] * out[(r, i)]).collect()));
                }
            }
            Family::MatrixFisherProduct => {
                for r in 0..n_rows {
                    let mut rots = Vec::with_capacity(joints);
                    let mut fs = Vec::with_capacity(joints);
                    for j in 0..joints {
                        let m = Matrix3::from_fn(|a, b| out[(r, 21 * j + 3 * a + b)]);
                        let f = ProcrustesFactor::new(&m).ok();
                        rots.push(match &f {
                            Some(f) => crate::so3::Rotation::from_matrix(&f.rotation),
                            None => crate::so3::Rotation::identity(),
                        });
                        fs.push(f);
                    }
                    vals.push(NodeValue::Pose(rots));
                    factors.push(fs);
                }
            }
            _ => unreachable!("person attributes are Gaussian or pose nodes"),
        }
        values.insert(n, vals);
        saved.insert(n, ModeNode { inputs, trace, factors });
    }

    // Value gradients: Gaussian nodes in value space, pose as 9 entries per joint.
    let mut gv: BTreeMap<NodeName, DMatrix<f64>> =
        order.iter().map(|n| (*n, DMatrix::zeros(n_rows, net.node(*n).dim))).collect();
    let w = 1.0 / n_rows as f64;
    let (mut l_reproj, mut l_mesh) = (0.0, 0.0);
    for (r, row) in rows.iter().enumerate() {
        let get = |n: NodeName| values[&n][r].clone();
        let NodeValue::Pose(theta) = get(NodeName::Pose) else { unreachable!() };
        let NodeValue::Vector(beta) = get(NodeName::Shape) else { unreachable!() };
        let NodeValue::Vector(c) = get(NodeName::Center2d) else { unreachable!() };
        let NodeValue::Vector(enc) = get(NodeName::EncodedDepth) else { unreachable!() };
        let k = row.k;
        let s = enc[0].exp();
        let t = Vector3::new((c[0] - k.p[0]) * s, (c[1] - k.p[1]) * s, k.f * s);
        let mats: Vec<Matrix3<f64>> = theta.iter().map(|q| q.matrix()).collect();
        let posed = body.pose_matrices(&mats, &beta, &t)?;
        let gt_points = ground_truth_points(&body, row.obs, row.person)?;
        let gt2d: Vec<[f64; 2]> = gt_points
            .iter()
            .map(|x| project(&row.obs.gt_intrinsics, x).map(|p| [p.x, p.y]))
            .collect::<Result<_>>()?;
        let (lr, mut gpts) = reprojection_error(&posed.points, &k, &gt2d, point_norm);
        l_reproj += w * lr;
        for g in &mut gpts {
            *g *= w;
        }
        let mut mesh_t_grad = Vector3::zeros();
        if with_mesh {
            let gt_t = row.obs.gt[row.person].translation();
            let pred_c: Vec<Vector3<f64>> = posed.points.iter().map(|x| x - t).collect();
            let gt_c: Vec<Vector3<f64>> = gt_points.iter().map(|x| x - gt_t).collect();
            let (lm, gm) = point_error(&pred_c, &gt_c, point_norm);
            l_mesh += w * lm;
            for (a, b) in gpts.iter_mut().zip(&gm) {
                *a += b * w;
                mesh_t_grad += b * w;
            }
        }
        if !want_grad {
            continue;
        }
        let kg = posed.backward(&body, &mats, &gpts);
        let gt_total = kg.t - mesh_t_grad;
        let pose = gv.get_mut(&NodeName::Pose).expect("pose");
        for j in 0..joints {
            for a in 0..3 {
                for b in 0..3 {
                    pose[(r, 9 * j + 3 * a + b)] += kg.theta[j][(a, b)];
                }
            }
        }
        let shape = gv.get_mut(&NodeName::Shape).expect("shape");
        for (i, g) in kg.beta.iter().enumerate() {
            shape[(r, i)] += g;
        }
        let center = gv.get_mut(&NodeName::Center2d).expect("center");
        center[(r, 0)] += gt_total.x * s;
        center[(r, 1)] += gt_total.y * s;
        gv.get_mut(&NodeName::EncodedDepth).expect("depth")[(r, 0)] += gt_total.dot(&t);
    }
    if !want_grad {
        return Ok((l_reproj, l_mesh, None));
    }

    let mut grad = NetGrad::zeros(net);
    for &n in order.iter().rev() {
        let spec = net.node(n);
        let head = net.head(n);
        let node = &saved[&n];
        let g_value = gv[&n].clone();
        let mut grad_out = DMatrix::zeros(n_rows, spec.output_dim);
        match spec.family {
            Family::DiagGaussian => {
                for r in 0..n_rows {
                    for i in 0..spec.dim {
                        grad_out[(r, i)] = g_value[(r, i)] * spec.scale[i];
                    }
                }
            }
            Family::MatrixFisherProduct => {
                for r in 0..n_rows {
                    for j in 0..joints {
                        if let Some(f) = &node.factors[r][j] {
                            let gr = Matrix3::from_fn(|a, b| g_value[(r, 9 * j + 3 * a + b)]);
                            let gm = f.backward(&gr);
                            for a in 0..3 {
                                for b in 0..3 {
                                    grad_out[(r, 21 * j + 3 * a + b)] = gm[(a, b)];
                                }
                            }
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
        let want: Vec<bool> = spec.parents.iter().map(|p| NodeName::ATTRIBUTES.contains(p)).collect();
        let refs: Vec<&DMatrix<f64>> = node.inputs.iter().collect();
        let gin = head.backward(&refs, &node.trace, &grad_out, grad.heads.get_mut(&n).expect("head"), &want);
        for (p, gi) in spec.parents.iter().zip(gin) {
            let Some(gi) = gi else { continue };
            let ps = net.node(*p);
            let target = gv.get_mut(p).expect("parent value gradient");
            if ps.family == Family::MatrixFisherProduct {
                *target += gi;
            } else {
                for r in 0..n_rows {
                    for i in 0..ps.dim {
                        target[(r, i)] += gi[(r, i)] / ps.input_scale[i];
                    }
                }
            }
        }
    }
    Ok((l_reproj, l_mesh, Some(grad)))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<NodeName, Vec<Vec<f64>>>,
    v: BTreeMap<NodeName, Vec<Vec<f64>>>,
}

impl Adam {
    pub fn new(net: &BayesNet, learning_rate: f64) -> Self {
        let zeros: BTreeMap<NodeName, Vec<Vec<f64>>> =
            net.heads.iter().map(|(n, h)| (*n, h.blocks().iter().map(|b| vec![0.0; b.len()]).collect())).collect();
        Adam { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, net: &mut BayesNet, grad: &NetGrad) {
        self.t += 1;
        if self.learning_rate == 0.0 {
            return;
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (n, head) in net.heads.iter_mut() {
            let g = grad.heads[n].blocks();
            let ms = self.m.get_mut(n).expect("moments");
            let vs = self.v.get_mut(n).expect("moments");
            for (bi, block) in head.blocks_mut().into_iter().enumerate() {
                let (m, v, gb) = (&mut ms[bi], &mut vs[bi], g[bi]);
                for k in 0..block.len() {
                    m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gb[k];
                    v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gb[k] * gb[k];
                    block[k] -= self.learning_rate * (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
                }
            }
        }
    }
}

/// Loss and gradient of one mini-batch under the full objective
/// `l_prob + l_mesh + l_reproj`.
pub fn batch_objective(
    net: &BayesNet,
    batch: &[&SceneObservation],
    k_input: Option<&CameraIntrinsics>,
    config: &TrainConfig,
    norm: &FisherNormalizer,
) -> Result<(LossBreakdown, NetGrad)> {
    let (l_prob, mut grad) = loss_prob_and_grad(net, batch, norm)?;
    let gt_intrinsics = k_input.is_none();
    let (l_reproj, l_mesh) = if config.mode_guiding {
        let (lr, lm, g) = mode_guiding_loss(net, batch, k_input, gt_intrinsics, config.point_norm, true)?;
        grad.add(&g.expect("gradient requested"));
        (lr, lm)
    } else {
        (0.0, 0.0)
    };
    Ok((
        LossBreakdown { step: 0, l_prob, l_mesh, l_reproj, total: l_prob + l_mesh + l_reproj, gt_intrinsics },
        grad,
    ))
}

/// Mini-batch training over shuffled epochs. `on_step` sees every loss record.
pub fn train(
    net: &mut BayesNet,
    data: &[&SceneObservation],
    config: &TrainConfig,
    mut on_step: impl FnMut(&LossBreakdown),
) -> Result<Vec<LossBreakdown>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyList);
    }
    let norm = config.normalizer()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(net, config.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(data[order[cursor]]);
            cursor += 1;
        }
        let use_gt = rng.random::<f64>() < config.gt_intrinsics_fraction;
        let k_input = if use_gt {
            None
        } else {
            let [lo, hi] = config.fov_range_deg;
            Some(CameraIntrinsics::from_horizontal_fov(rng.random_range(lo..=hi), batch[0].gt_intrinsics.image_size))
        };
        let (mut loss, grad) = batch_objective(net, &batch, k_input.as_ref(), config, &norm)?;
        loss.step = step;
        if !loss.total.is_finite() || grad.flatten().iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step, batch: step });
        }
        adam.step(net, &grad);
        if !net.is_finite() {
            return Err(Error::NonFiniteLoss { step, batch: step });
        }
        on_step(&loss);
        curve.push(loss);
    }
    Ok(curve)
}

pub fn write_loss_csv(path: &Path, curve: &[LossBreakdown]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut text = String::from("step,l_prob,l_mesh,l_reproj,total\n");
    for l in curve {
        text.push_str(&format!("{},{},{},{},{}\n", l.step, l.l_prob, l.l_mesh, l.l_reproj, l.total));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayesnet::{NetConfig, Preset, SceneAssignment};
    use crate::synth::{generate_scene, AmbiguityProfile, SynthConfig};

    fn toy() -> (BayesNet, Vec<SceneObservation>) {
        let synth = SynthConfig {
            image_size: [192, 192],
            grid: [4, 4],
            feature_dim: 8,
            global_dim: 4,
            joints: 5,
            expression_dim: 2,
            ..SynthConfig::default()
        };
        let net_cfg = NetConfig {
            feature_dim: 8,
            global_dim: 4,
            hidden_dim: 12,
            joints: 5,
            expression_dim: 2,
            grid: [4, 4],
            image_size: [192, 192],
            ..NetConfig::default()
        };
        let mut obs = Vec::new();
        for seed in 0..3 {
            obs.extend(generate_scene(seed, 2, 1, AmbiguityProfile::BedlamLike, &synth).unwrap().views);
        }
        let mut net = BayesNet::new(net_cfg, Preset::Variant1, 5).unwrap();
        // Move away from the symmetric initialization so every path carries gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for h in net.heads.values_mut() {
            for b in h.blocks_mut() {
                for x in b.iter_mut() {
                    *x += 0.05 * (rng.random::<f64>() - 0.5);
                }
            }
        }
        (net, obs)
    }

    fn exact_norm() -> FisherNormalizer {
        FisherNormalizer::with_quantum(So3Grid::cached(1).unwrap(), 0.0)
    }

    fn check_fd(net: &BayesNet, grad: &[f64], f: impl Fn(&BayesNet) -> f64, picks: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = grad.len();
        let mut checked = 0;
        for _ in 0..picks {
            let i = rng.random_range(0..n);
            let x0 = flatten_params(net)[i];
            let h = 1e-6 * x0.abs().max(1.0);
            let mut a = net.clone();
            set_param(&mut a, i, x0 + h);
            let mut b = net.clone();
            set_param(&mut b, i, x0 - h);
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            let tol = 1e-5 * fd.abs().max(grad[i].abs()).max(1.0);
            assert!((fd - grad[i]).abs() < tol, "param {i}: fd {fd} vs analytic {}", grad[i]);
            checked += 1;
        }
        assert_eq!(checked, picks);
    }

    #[test]
    fn prob_loss_is_mean_negative_joint_density() {
        let (net, obs) = toy();
        let norm = exact_norm();
        let batch: Vec<&SceneObservation> = obs.iter().collect();
        let l = loss_prob(&net, &batch, &norm).unwrap();
        let mut want = 0.0;
        for o in &batch {
            let a = SceneAssignment::from_observation(o);
            want -= net.joint_log_density(&a, o, &norm).unwrap();
        }
        want /= batch.len() as f64;
        assert!((l - want).abs() < 1e-9 * want.abs().max(1.0), "{l} vs {want}");
    }

    #[test]
    fn prob_gradient_matches_finite_differences() {
        let (net, obs) = toy();
        let norm = exact_norm();
        let batch: Vec<&SceneObservation> = obs.iter().take(2).collect();
        let (_, g) = loss_prob_and_grad(&net, &batch, &norm).unwrap();
        check_fd(&net, &g.flatten(), |n| loss_prob(n, &batch, &norm).unwrap(), 60, 1);
    }

    #[test]
    fn mode_guiding_gradient_matches_finite_differences() {
        let (net, obs) = toy();
        let batch: Vec<&SceneObservation> = obs.iter().take(2).collect();
        let k = CameraIntrinsics::from_horizontal_fov(70.0, [192, 192]);
        for (k_in, mesh) in [(Some(k), false), (None, true)] {
            let (_, _, g) = mode_guiding_loss(&net, &batch, k_in.as_ref(), mesh, PointNorm::L2, true).unwrap();
            let f = |n: &BayesNet| {
                let (a, b, _) = mode_guiding_loss(n, &batch, k_in.as_ref(), mesh, PointNorm::L2, false).unwrap();
                a + b
            };
            check_fd(&net, &g.unwrap().flatten(), f, 60, 2);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let (mut net, obs) = toy();
        let before = flatten_params(&net);
        let data: Vec<&SceneObservation> = obs.iter().collect();
        let cfg = TrainConfig { learning_rate: 0.0, steps: 3, batch_size: 2, normalizer_level: 1, ..TrainConfig::default() };
        let curve = train(&mut net, &data, &cfg, |_| {}).unwrap();
        assert_eq!(curve.len(), 3);
        let after = flatten_params(&net);
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn total_is_sum_of_terms_and_mesh_only_with_true_intrinsics() {
        let (mut net, obs) = toy();
        let data: Vec<&SceneObservation> = obs.iter().collect();
        let cfg = TrainConfig { learning_rate: 1e-3, steps: 12, batch_size: 2, normalizer_level: 1, ..TrainConfig::default() };
        let curve = train(&mut net, &data, &cfg, |_| {}).unwrap();
        assert!(curve.iter().any(|l| l.gt_intrinsics) && curve.iter().any(|l| !l.gt_intrinsics));
        for l in &curve {
            assert_eq!(l.total, l.l_prob + l.l_mesh + l.l_reproj);
            if !l.gt_intrinsics {
                assert_eq!(l.l_mesh, 0.0);
            }
        }
    }

    #[test]
    fn training_lowers_the_probabilistic_loss() {
        let (mut net, obs) = toy();
        let data: Vec<&SceneObservation> = obs.iter().collect();
        let norm = exact_norm();
        let before = loss_prob(&net, &data, &norm).unwrap();
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            steps: 60,
            batch_size: 3,
            normalizer_level: 1,
            mode_guiding: false,
            ..TrainConfig::default()
        };
        train(&mut net, &data, &cfg, |_| {}).unwrap();
        let after = loss_prob(&net, &data, &norm).unwrap();
        assert!(after < before - 1.0, "{before} -> {after}");
    }

    #[test]
    fn points_at_the_camera_get_the_diagonal_penalty() {
        let k = CameraIntrinsics::from_horizontal_fov(60.0, [100, 100]);
        let pts = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.0, 0.0, 2.0)];
        let (l, g) = reprojection_error(&pts, &k, &[[50.0, 50.0], [50.0, 50.0]], PointNorm::L1);
        assert!((l - k.diagonal() / 200.0).abs() < 1e-12);
        assert_eq!(g[0], Vector3::zeros());
    }

    #[test]
    fn loss_csv_has_one_row_per_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let l = LossBreakdown { step: 0, l_prob: 1.0, l_mesh: 0.5, l_reproj: 2.0, total: 3.5, gt_intrinsics: true };
        write_loss_csv(&path, &[l, LossBreakdown { step: 1, ..l }]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("step,l_prob,l_mesh,l_reproj,total"));
    }
}
