//! Simplified articulated body and pinhole camera.
//!
//! The body is a kinematic tree whose root is the head (joint 0). Each joint
//! carries a local rotation; a joint's position is its parent's position plus
//! the parent's world rotation applied to a shape-dependent rest offset. Body
//! points are the joints plus two interpolated points on every bone.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::so3::Rotation;

pub const DEFAULT_JOINTS: usize = 53;
pub const SHAPE_DIM: usize = 11;
pub const EXPRESSION_DIM: usize = 10;
/// Isotropic scale coefficient of the first shape component.
pub const SCALE_PER_UNIT: f64 = 0.1;
const BONE_FRACTIONS: [f64; 2] = [1.0 / 3.0, 2.0 / 3.0];
const MIN_DEPTH: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinematicBody {
    /// Parent index per joint, `-1` for the root. Parents precede children.
    pub parents: Vec<i64>,
    /// `basis[j][k]` is a 3-vector; the rest offset of joint `j` is
    /// `basis[j][0] + sum_k basis[j][k + 1] * beta[k]`.
    pub basis: Vec<Vec<[f64; 3]>>,
}

/// Core humanoid skeleton in a camera-style frame (y down, z forward),
/// listed as (parent, offset in metres).
const CORE: [(i64, [f64; 3]); 22] = [
    (-1, [0.0, 0.0, 0.0]),    // head
    (0, [0.0, 0.15, 0.0]),    // neck
    (1, [0.0, 0.15, 0.0]),    // chest
    (2, [0.0, 0.15, 0.0]),    // spine
    (3, [0.0, 0.15, 0.0]),    // lower spine
    (4, [0.0, 0.12, 0.0]),    // pelvis
    (5, [0.10, 0.05, 0.0]),   // left hip
    (6, [0.0, 0.42, 0.0]),    // left knee
    (7, [0.0, 0.40, 0.0]),    // left ankle
    (8, [0.0, 0.05, 0.12]),   // left foot
    (5, [-0.10, 0.05, 0.0]),  // right hip
    (10, [0.0, 0.42, 0.0]),   // right knee
    (11, [0.0, 0.40, 0.0]),   // right ankle
    (12, [0.0, 0.05, 0.12]),  // right foot
    (2, [0.08, 0.0, 0.0]),    // left collar
    (14, [0.12, 0.02, 0.0]),  // left shoulder
    (15, [0.28, 0.0, 0.0]),   // left elbow
    (16, [0.25, 0.0, 0.0]),   // left wrist
    (2, [-0.08, 0.0, 0.0]),   // right collar
    (18, [-0.12, 0.02, 0.0]), // right shoulder
    (19, [-0.28, 0.0, 0.0]),  // right elbow
    (20, [-0.25, 0.0, 0.0]),  // right wrist
];

impl KinematicBody {
    /// The default 53-joint body: the 22-joint core plus two-segment
    /// fingers, facial points and toes drawn from a fixed seed.
    pub fn standard() -> Self {
        Self::with_joints(DEFAULT_JOINTS)
    }

    /// A body with `joints` joints (at least 2). Bodies smaller than the core
    /// use a prefix of it; larger ones append seeded extremity leaves.
    pub fn with_joints(joints: usize) -> Self {
        let joints = joints.max(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_B0D1);
        let mut nodes: Vec<(i64, [f64; 3])> = CORE.iter().take(joints).cloned().collect();
        // Extremity attachments cycle over wrists, head and feet.
        let anchors: [(usize, [f64; 3]); 4] = [
            (17, [1.0, 0.0, 0.0]),
            (21, [-1.0, 0.0, 0.0]),
            (0, [0.0, -0.3, 1.0]),
            (9, [0.0, 0.0, 1.0]),
        ];
        let mut a = 0usize;
        while nodes.len() < joints {
            let (anchor, dir) = anchors[a % anchors.len()];
            a += 1;
            let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-0.4..0.4);
            let d = Vector3::new(dir[0] + jitter(&mut rng), dir[1] + jitter(&mut rng), dir[2] + jitter(&mut rng)).normalize();
            let len = rng.random_range(0.03..0.06);
            let first = nodes.len();
            nodes.push((anchor as i64, (d * len).into()));
            // fingers get a second segment
            if anchor != 0 && nodes.len() < joints {
                nodes.push((first as i64, (d * len * 0.8).into()));
            }
        }
        let mut basis = Vec::with_capacity(joints);
        for (j, (_, base)) in nodes.iter().enumerate() {
            let b = Vector3::from(*base);
            let mut row = vec![*base, (b * SCALE_PER_UNIT).into()];
            let cap = 0.05 / ((SHAPE_DIM - 1) as f64).sqrt() * b.norm();
            for _ in 1..SHAPE_DIM {
                let v = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                let v = if j == 0 { Vector3::zeros() } else { v.normalize() * cap * rng.random::<f64>() };
                row.push(v.into());
            }
            basis.push(row);
        }
        KinematicBody {
            parents: nodes.iter().map(|n| n.0).collect(),
            basis,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.parents.len();
        if j == 0 || self.parents[0] != -1 {
            return Err(Error::InvalidGraph("body root must be joint 0".into()));
        }
        for (i, &p) in self.parents.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= i {
                return Err(Error::InvalidGraph(format!("joint {i} has parent {p}")));
            }
        }
        if self.basis.len() != j {
            return Err(Error::DimensionMismatch { expected: j, got: self.basis.len() });
        }
        let width = self.basis[0].len();
        if width < 1 || self.basis.iter().any(|r| r.len() != width) {
            return Err(Error::Format("ragged body basis".into()));
        }
        Ok(())
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn shape_dim(&self) -> usize {
        self.basis.first().map(|r| r.len() - 1).unwrap_or(0)
    }

    pub fn bone_count(&self) -> usize {
        self.joint_count() - 1
    }

    pub fn point_count(&self) -> usize {
        self.joint_count() + BONE_FRACTIONS.len() * self.bone_count()
    }

    pub fn rest_offset(&self, joint: usize, beta: &[f64]) -> Vector3<f64> {
        let row = &self.basis[joint];
        let mut o = Vector3::from(row[0]);
        for (k, b) in beta.iter().enumerate() {
            o += Vector3::from(row[k + 1]) * *b;
        }
        o
    }

    pub fn bone_lengths(&self, beta: &[f64]) -> Vec<f64> {
        (1..self.joint_count()).map(|j| self.rest_offset(j, beta).norm()).collect()
    }

    fn check(&self, theta: usize, beta: usize) -> Result<()> {
        if theta != self.joint_count() {
            return Err(Error::DimensionMismatch { expected: self.joint_count(), got: theta });
        }
        if beta != self.shape_dim() {
            return Err(Error::DimensionMismatch { expected: self.shape_dim(), got: beta });
        }
        Ok(())
    }

    /// Forward kinematics on matrices, keeping what the backward pass needs.
    pub fn pose_matrices(&self, theta: &[Matrix3<f64>], beta: &[f64], t: &Vector3<f64>) -> Result<PosedBody> {
        self.check(theta.len(), beta.len())?;
        let j = self.joint_count();
        let mut world = Vec::with_capacity(j);
        let mut joints = Vec::with_capacity(j);
        let mut offsets = Vec::with_capacity(j);
        world.push(theta[0]);
        joints.push(*t);
        offsets.push(Vector3::zeros());
        for i in 1..j {
            let p = self.parents[i] as usize;
            let o = self.rest_offset(i, beta);
            joints.push(joints[p] + world[p] * o);
            world.push(world[p] * theta[i]);
            offsets.push(o);
        }
        let mut points = joints.clone();
        for i in 1..j {
            let p = self.parents[i] as usize;
            for a in BONE_FRACTIONS {
                points.push(joints[p] + (joints[i] - joints[p]) * a);
            }
        }
        Ok(PosedBody { points, world, offsets })
    }

    pub fn points_from_matrices(&self, theta: &[Matrix3<f64>], beta: &[f64], t: &Vector3<f64>) -> Result<Vec<Vector3<f64>>> {
        Ok(self.pose_matrices(theta, beta, t)?.points)
    }
}

/// Output of [`KinematicBody::pose_matrices`].
#[derive(Clone, Debug)]
pub struct PosedBody {
    /// Joints first, then two points per bone in joint order.
    pub points: Vec<Vector3<f64>>,
    world: Vec<Matrix3<f64>>,
    offsets: Vec<Vector3<f64>>,
}

#[derive(Clone, Debug)]
pub struct KinematicGrad {
    pub theta: Vec<Matrix3<f64>>,
    pub beta: Vec<f64>,
    pub t: Vector3<f64>,
}

impl PosedBody {
    pub fn joints(&self, count: usize) -> &[Vector3<f64>] {
        &self.points[..count]
    }

    /// Reverse pass given `dL/dpoint` for every body point. Local rotations
    /// are treated as unconstrained 3x3 matrices.
    pub fn backward(&self, body: &KinematicBody, theta: &[Matrix3<f64>], grad_points: &[Vector3<f64>]) -> KinematicGrad {
        let j = body.joint_count();
        let mut g_joint: Vec<Vector3<f64>> = grad_points[..j].to_vec();
        let mut k = j;
        for i in 1..j {
            let p = body.parents[i] as usize;
            for a in BONE_FRACTIONS {
                let g = grad_points[k];
                g_joint[p] += g * (1.0 - a);
                g_joint[i] += g * a;
                k += 1;
            }
        }
        let mut g_world = vec![Matrix3::zeros(); j];
        let mut g_theta = vec![Matrix3::zeros(); j];
        let mut g_beta = vec![0.0; body.shape_dim()];
        for i in (1..j).rev() {
            let p = body.parents[i] as usize;
            // world[i] = world[p] * theta[i]
            let gw = g_world[i];
            g_theta[i] = self.world[p].transpose() * gw;
            g_world[p] += gw * theta[i].transpose();
            // joint[i] = joint[p] + world[p] * offset[i]
            let gi = g_joint[i];
            g_joint[p] += gi;
            g_world[p] += gi * self.offsets[i].transpose();
            let g_off = self.world[p].transpose() * gi;
            for (kk, gb) in g_beta.iter_mut().enumerate() {
                *gb += Vector3::from(body.basis[i][kk + 1]).dot(&g_off);
            }
        }
        g_theta[0] = g_world[0];
        KinematicGrad { theta: g_theta, beta: g_beta, t: g_joint[0] }
    }
}

pub fn forward_kinematics(body: &KinematicBody, theta: &[Rotation], beta: &[f64], t: &Vector3<f64>) -> Result<Vec<Vector3<f64>>> {
    let m: Vec<Matrix3<f64>> = theta.iter().map(|r| r.matrix()).collect();
    body.points_from_matrices(&m, beta, t)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub f: f64,
    pub p: [f64; 2],
    pub image_size: [u32; 2],
}

impl CameraIntrinsics {
    pub fn new(f: f64, p: [f64; 2], image_size: [u32; 2]) -> Result<Self> {
        let k = CameraIntrinsics { f, p, image_size };
        k.validate()?;
        Ok(k)
    }

    /// Principal point at the image centre and the focal length giving the
    /// requested horizontal field of view.
    pub fn from_horizontal_fov(fov_deg: f64, image_size: [u32; 2]) -> Self {
        let w = image_size[0] as f64;
        CameraIntrinsics {
            f: 0.5 * w / (0.5 * fov_deg.to_radians()).tan(),
            p: [0.5 * w, 0.5 * image_size[1] as f64],
            image_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [w, h] = [self.image_size[0] as f64, self.image_size[1] as f64];
        if !(self.f > 0.0 && self.f.is_finite()) {
            return Err(Error::ParamOutOfRange(format!("focal length {}", self.f)));
        }
        if !(0.0..=w).contains(&self.p[0]) || !(0.0..=h).contains(&self.p[1]) {
            return Err(Error::ParamOutOfRange(format!("principal point {:?}", self.p)));
        }
        Ok(())
    }

    pub fn horizontal_fov_deg(&self) -> f64 {
        (2.0 * (0.5 * self.image_size[0] as f64 / self.f).atan()).to_degrees()
    }

    pub fn diagonal(&self) -> f64 {
        let [w, h] = [self.image_size[0] as f64, self.image_size[1] as f64];
        (w * w + h * h).sqrt()
    }

    /// Unit viewing ray through pixel `c`.
    pub fn ray(&self, c: [f64; 2]) -> Vector3<f64> {
        Vector3::new((c[0] - self.p[0]) / self.f, (c[1] - self.p[1]) / self.f, 1.0).normalize()
    }
}

pub fn project(k: &CameraIntrinsics, x: &Vector3<f64>) -> Result<Vector2<f64>> {
    if x.z <= MIN_DEPTH {
        return Err(Error::BehindCamera(x.z));
    }
    Ok(Vector2::new(k.f * x.x / x.z + k.p[0], k.f * x.y / x.z + k.p[1]))
}

pub fn backproject(k: &CameraIntrinsics, c: &Vector2<f64>, d: f64) -> Result<Vector3<f64>> {
    if !(d > 0.0) {
        return Err(Error::NonPositiveDepth(d));
    }
    Ok(Vector3::new((c.x - k.p[0]) * d / k.f, (c.y - k.p[1]) * d / k.f, d))
}
