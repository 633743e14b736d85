//! Multi-view fusion: matched people across views share shape, expression and
//! pose; the product of their per-view densities is maximized in closed form.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{hungarian::assign_rectangular, hungarian::median_no_match_cost, ModePrediction, PersonState};
use crate::bayesnet::{NodeDistribution, NodeName, ScaledGaussian};
use crate::body::KinematicBody;
use crate::distributions::gaussian_fuse;
use crate::error::{Error, Result};
use crate::metrics::similarity_align;
use crate::so3::{special_procrustes, Rotation};

/// `x_ref = rotation * x + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform { rotation: Rotation::identity(), translation: [0.0; 3] }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(x) + Vector3::from(self.translation)
    }
}

/// Least-squares rotation and translation taking `src` onto `dst`.
pub fn rigid_align(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<RigidTransform> {
    let t = similarity_align(src, dst, false)?;
    Ok(RigidTransform { rotation: t.rotation, translation: [t.translation.x, t.translation.y, t.translation.z] })
}

/// Aligns every view's points onto view 0 and composes the alignment with
/// each view's global orientation. Returns `(theta0, transforms)`.
pub fn rigid_align_init(
    points_per_view: &[Vec<Vector3<f64>>],
    global_orientations: &[Rotation],
) -> Result<(Vec<Rotation>, Vec<RigidTransform>)> {
    if points_per_view.is_empty() {
        return Err(Error::EmptyList);
    }
    if global_orientations.len() != points_per_view.len() {
        return Err(Error::DimensionMismatch { expected: points_per_view.len(), got: global_orientations.len() });
    }
    let mut transforms = vec![RigidTransform::identity()];
    for p in &points_per_view[1..] {
        transforms.push(rigid_align(p, &points_per_view[0])?);
    }
    let theta0 = transforms.iter().zip(global_orientations).map(|(a, r)| a.rotation.compose(r)).collect();
    Ok((theta0, transforms))
}

/// For each bone, `special_procrustes(sum_i frame_i * F_j^i)`: the rotation
/// maximizing `prod_i exp(tr((frame_i F_j^i)^T R))`.
pub fn fuse_pose_multiview(per_view: &[(Rotation, Vec<Matrix3<f64>>)]) -> Result<Vec<Rotation>> {
    let first = per_view.first().ok_or(Error::EmptyList)?;
    let bones = first.1.len();
    let mut sums = vec![Matrix3::zeros(); bones];
    for (frame, fs) in per_view {
        if fs.len() != bones {
            return Err(Error::DimensionMismatch { expected: bones, got: fs.len() });
        }
        let m = frame.matrix();
        for (s, f) in sums.iter_mut().zip(fs) {
            *s += m * f;
        }
    }
    sums.iter().map(special_procrustes).collect()
}

fn mean_distance(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).sum::<f64>() / a.len() as f64
}

/// Pairwise cost: mean body-point distance after rigidly aligning `b` onto `a`.
pub fn pair_cost(a: &PersonState, b: &PersonState, body: &KinematicBody) -> Result<f64> {
    let pa = a.points(body)?;
    let pb = b.points(body)?;
    let t = rigid_align(&pb, &pa)?;
    let aligned: Vec<Vector3<f64>> = pb.iter().map(|p| t.apply(p)).collect();
    Ok(mean_distance(&pa, &aligned))
}

/// Minimum-cost matching of `view_b` people to `view_a` people; entry `i` is
/// the index in `view_b` matched to `view_a[i]`. Unequal counts are padded
/// with a no-match cost of twice the median pairwise cost.
pub fn match_people(view_a: &[PersonState], view_b: &[PersonState], body: &KinematicBody) -> Result<Vec<Option<usize>>> {
    if view_a.is_empty() || view_b.is_empty() {
        return Ok(vec![None; view_a.len()]);
    }
    let mut cost = Vec::with_capacity(view_a.len());
    for a in view_a {
        let mut row = Vec::with_capacity(view_b.len());
        for b in view_b {
            row.push(pair_cost(a, b, body)?);
        }
        cost.push(row);
    }
    if view_a.len() == view_b.len() {
        let (a, _) = super::hungarian(&cost)?;
        return Ok(a.into_iter().map(Some).collect());
    }
    assign_rectangular(&cost, median_no_match_cost(&cost))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedPerson {
    /// `(view, person index)` pairs, reference member first.
    pub members: Vec<(usize, usize)>,
    /// Alignment of each member's view onto the reference member's view.
    pub transforms: Vec<RigidTransform>,
    /// Per-member RMS distance to the reference after rigid alignment
    /// (before fusion).
    pub residuals: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiViewResult {
    /// Fused states per view, in each view's frame and original order.
    pub views: Vec<Vec<PersonState>>,
    pub people: Vec<FusedPerson>,
}

fn gaussian_of<'a>(s: &'a PersonState, n: NodeName) -> Option<&'a ScaledGaussian> {
    match s.distributions.get(&n) {
        Some(NodeDistribution::Gaussian(g)) => Some(g),
        _ => None,
    }
}

fn fuse_gaussian(members: &[&PersonState], n: NodeName) -> Result<Option<ScaledGaussian>> {
    let gs: Option<Vec<&ScaledGaussian>> = members.iter().map(|m| gaussian_of(m, n)).collect();
    let Some(gs) = gs else { return Ok(None) };
    let params: Vec<_> = gs.iter().map(|g| g.params.clone()).collect();
    Ok(Some(ScaledGaussian { params: gaussian_fuse(&params)?, offset: gs[0].offset.clone(), scale: gs[0].scale.clone() }))
}

fn pose_matrices(s: &PersonState) -> Option<Vec<Matrix3<f64>>> {
    match s.distributions.get(&NodeName::Pose) {
        Some(NodeDistribution::Pose(p)) => Some(p.iter().map(|f| f.assembled()).collect()),
        _ => None,
    }
}

/// Matches people to view 0 and fuses every matched group: shape and
/// expression by Gaussian fusion, local bones by the closed-form Fisher
/// product. Global orientation and position stay per view. People of other
/// views without a match in view 0 are kept as single-member groups.
pub fn fuse_multiview(views: &[ModePrediction], body: &KinematicBody) -> Result<MultiViewResult> {
    if views.is_empty() {
        return Err(Error::EmptyList);
    }
    let mut groups: Vec<Vec<(usize, usize)>> = (0..views[0].persons.len()).map(|p| vec![(0, p)]).collect();
    for (vi, view) in views.iter().enumerate().skip(1) {
        let m = match_people(&views[0].persons, &view.persons, body)?;
        let mut taken = vec![false; view.persons.len()];
        for (p, q) in m.iter().enumerate() {
            if let Some(q) = q {
                groups[p].push((vi, *q));
                taken[*q] = true;
            }
        }
        for (q, t) in taken.iter().enumerate() {
            if !t {
                groups.push(vec![(vi, q)]);
            }
        }
    }
    let mut out: Vec<Vec<PersonState>> = views.iter().map(|v| v.persons.clone()).collect();
    let mut people = Vec::with_capacity(groups.len());
    for members in groups {
        let states: Vec<&PersonState> = members.iter().map(|(v, p)| &views[*v].persons[*p]).collect();
        let points: Vec<Vec<Vector3<f64>>> = states.iter().map(|s| s.points(body)).collect::<Result<_>>()?;
        let roots: Vec<Rotation> = states.iter().map(|s| s.theta[0]).collect();
        let (_, transforms) = rigid_align_init(&points, &roots)?;
        let residuals = points
            .iter()
            .zip(&transforms)
            .map(|(p, t)| {
                let se: f64 = p.iter().zip(&points[0]).map(|(x, r)| (t.apply(x) - r).norm_squared()).sum();
                (se / p.len() as f64).sqrt()
            })
            .collect();
        if members.len() > 1 {
            let shape = fuse_gaussian(&states, NodeName::Shape)?;
            let expression = fuse_gaussian(&states, NodeName::Expression)?;
            let clamped_shape = states.iter().find(|s| s.clamped.contains(&NodeName::Shape)).map(|s| s.beta.clone());
            let clamped_pose = states.iter().find(|s| s.clamped.contains(&NodeName::Pose));
            let pose_fs: Option<Vec<Vec<Matrix3<f64>>>> = states.iter().map(|s| pose_matrices(s)).collect();
            // Local bones are parent-relative and hence viewpoint independent;
            // each view keeps its own global orientation.
            let fused_locals = match (clamped_pose, pose_fs) {
                (None, Some(fs)) if fs[0].len() > 1 => {
                    let local_terms: Vec<(Rotation, Vec<Matrix3<f64>>)> =
                        fs.iter().map(|f| (Rotation::identity(), f[1..].to_vec())).collect();
                    Some(fuse_pose_multiview(&local_terms)?)
                }
                _ => None,
            };
            for (v, p) in &members {
                let s = &mut out[*v][*p];
                match (&clamped_shape, &shape) {
                    (Some(b), _) => s.beta = b.clone(),
                    (None, Some(g)) => {
                        s.beta = g.mode();
                        s.distributions.insert(NodeName::Shape, NodeDistribution::Gaussian(g.clone()));
                    }
                    _ => {}
                }
                if let Some(g) = &expression {
                    s.gamma = g.mode();
                    s.distributions.insert(NodeName::Expression, NodeDistribution::Gaussian(g.clone()));
                }
                if let Some(locals) = &fused_locals {
                    s.theta[1..].copy_from_slice(locals);
                }
            }
        }
        people.push(FusedPerson { members, transforms, residuals });
    }
    Ok(MultiViewResult { views: out, people })
}
