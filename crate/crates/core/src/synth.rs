//! Synthetic scenes and observations.
//!
//! People are posed stand-in bodies seen by one or more pinhole cameras. Each
//! head cell carries a feature vector computed from a 2D descriptor of the
//! projected body (offset in the cell, apparent size, joint layout normalized
//! by apparent size) through a fixed random projection. Depth, focal length
//! and isotropic body scale therefore reach the features only through their
//! joint 2D effect.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::body::{forward_kinematics, project, CameraIntrinsics, KinematicBody, SCALE_PER_UNIT};
use crate::error::{Error, Result};
use crate::inference::RigidTransform;
use crate::so3::Rotation;

pub const DATASET_FORMAT: &str = "bnhmr-dataset";
pub const DATASET_VERSION: u32 = 1;
const PROJECTION_SEED: u64 = 0xFEA7_0001;
const GLOBAL_SEED: u64 = 0xFEA7_0002;
const DESCRIPTOR_JOINTS: usize = 20;
pub const DESCRIPTOR_DIM: usize = 4 + 3 * DESCRIPTOR_JOINTS;
const MAX_ATTEMPTS: usize = 100;
/// Reference apparent size (pixels) and spread used to normalize the log-size descriptor.
const REFERENCE_EXTENT: f64 = 120.0;
const LOG_EXTENT_SPREAD: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthPerson {
    pub id: usize,
    /// Grid cell `[u, v]` containing the head.
    pub cell: [usize; 2],
    pub center2d: [f64; 2],
    pub encoded_depth: f64,
    pub t: [f64; 3],
    pub theta: Vec<Rotation>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub visibility: f64,
}

impl GroundTruthPerson {
    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObservation {
    pub scene_id: u64,
    pub view_id: usize,
    /// Feature grid size `[w, h]`.
    pub grid: [usize; 2],
    /// Row-major per-cell features, index `v * w + u`.
    pub patch_features: Vec<Vec<f64>>,
    pub global_feature: Vec<f64>,
    pub gt_intrinsics: CameraIntrinsics,
    pub gt: Vec<GroundTruthPerson>,
}

impl SceneObservation {
    pub fn cell_size(&self) -> f64 {
        self.gt_intrinsics.image_size[0] as f64 / self.grid[0] as f64
    }

    pub fn cell_center(&self, cell: [usize; 2]) -> [f64; 2] {
        cell_center(cell, self.cell_size())
    }

    pub fn patch(&self, cell: [usize; 2]) -> &[f64] {
        &self.patch_features[cell[1] * self.grid[0] + cell[0]]
    }
}

pub fn cell_center(cell: [usize; 2], cell_size: f64) -> [f64; 2] {
    [(cell[0] as f64 + 0.5) * cell_size, (cell[1] as f64 + 0.5) * cell_size]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AmbiguityProfile {
    /// Standard normal shape, depth uniform in the frustum.
    BedlamLike,
    /// Heavy-tailed first shape component.
    Diverse,
    /// Depth chosen so that the apparent size is log-uniform: scale and distance
    /// are traded against each other.
    SizeDistance,
    /// No feature noise and full visibility.
    Noiseless,
}

impl AmbiguityProfile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bedlam-like" => Ok(Self::BedlamLike),
            "diverse" => Ok(Self::Diverse),
            "size-distance" => Ok(Self::SizeDistance),
            "noiseless" => Ok(Self::Noiseless),
            _ => Err(Error::Config(format!("unknown ambiguity profile `{s}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::BedlamLike => "bedlam-like",
            Self::Diverse => "diverse",
            Self::SizeDistance => "size-distance",
            Self::Noiseless => "noiseless",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_size: [u32; 2],
    pub grid: [usize; 2],
    pub feature_dim: usize,
    pub global_dim: usize,
    pub joints: usize,
    pub shape_dim: usize,
    pub expression_dim: usize,
    /// Base feature noise standard deviation.
    pub feature_noise: f64,
    /// Extra noise at zero visibility.
    pub occlusion_noise: f64,
    pub log_focal_mean: f64,
    pub log_focal_std: f64,
    /// Depth range (metres) for profiles without the size constraint.
    pub depth_range: [f64; 2],
    /// Apparent-size range (pixels) for the size-distance profile.
    pub extent_range: [f64; 2],
    /// Tangent-space standard deviation (radians) of limb bone rotations;
    /// spine bones use a third of it and extremities half.
    pub bone_spread: f64,
    /// Angular spacing of the camera ring (degrees).
    pub ring_step_deg: f64,
    /// Fraction of the focal-length signal in the global feature.
    pub global_focal_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: [384, 384],
            grid: [8, 8],
            feature_dim: 64,
            global_dim: 16,
            joints: crate::body::DEFAULT_JOINTS,
            shape_dim: crate::body::SHAPE_DIM,
            expression_dim: crate::body::EXPRESSION_DIM,
            feature_noise: 0.02,
            occlusion_noise: 0.3,
            log_focal_mean: 1000f64.ln(),
            log_focal_std: 0.3,
            depth_range: [8.0, 20.0],
            extent_range: [90.0, 150.0],
            bone_spread: 0.3,
            ring_step_deg: 20.0,
            global_focal_noise: 0.75,
        }
    }
}

/// Per-bone prior spread: spine and neck bones stay close to the rest pose,
/// limbs vary most.
fn bone_spread(joint: usize, limb: f64) -> f64 {
    match joint {
        1..=5 => limb / 3.0,
        6..=21 => limb,
        _ => limb / 2.0,
    }
}

impl SynthConfig {
    pub fn cell_size(&self) -> f64 {
        self.image_size[0] as f64 / self.grid[0] as f64
    }

    fn validate(&self) -> Result<()> {
        if self.grid[0] == 0 || self.grid[1] == 0 || self.feature_dim == 0 {
            return Err(Error::Config("grid and feature dimensions must be positive".into()));
        }
        if self.image_size[0] as usize % self.grid[0] != 0 || self.image_size[1] as usize % self.grid[1] != 0 {
            return Err(Error::Config("image size must be a multiple of the grid".into()));
        }
        if (self.image_size[0] as f64 / self.grid[0] as f64) != (self.image_size[1] as f64 / self.grid[1] as f64) {
            return Err(Error::Config("cells must be square".into()));
        }
        Ok(())
    }
}

/// A person in the world frame (the frame of camera 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldPerson {
    pub id: usize,
    pub head: [f64; 3],
    /// Head orientation in the world frame followed by local bone rotations.
    pub theta: Vec<Rotation>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneCamera {
    pub intrinsics: CameraIntrinsics,
    /// World-to-camera transform.
    pub extrinsics: RigidTransform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub seed: u64,
    pub profile: AmbiguityProfile,
    pub people: Vec<WorldPerson>,
    pub cameras: Vec<SceneCamera>,
    pub views: Vec<SceneObservation>,
}

/// Fixed random maps from descriptors to features.
#[derive(Clone, Debug)]
pub struct FeatureMaps {
    pub patch: DMatrix<f64>,
    pub global: DMatrix<f64>,
}

impl FeatureMaps {
    pub fn new(feature_dim: usize, global_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
        let s = 1.0 / (DESCRIPTOR_DIM as f64).sqrt() * 2.0;
        let patch = DMatrix::from_fn(feature_dim, DESCRIPTOR_DIM, |_, _| s * rng.sample::<f64, _>(StandardNormal));
        let mut rng = ChaCha8Rng::seed_from_u64(GLOBAL_SEED);
        let global = DMatrix::from_fn(global_dim, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        FeatureMaps { patch, global }
    }
}

/// Rest-pose height of a body with shape `beta` (head to lowest joint).
pub fn body_height(body: &KinematicBody, beta: &[f64]) -> Result<f64> {
    let theta = vec![Rotation::identity(); body.joint_count()];
    let p = forward_kinematics(body, &theta, beta, &Vector3::zeros())?;
    let (lo, hi) = p.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x.y), hi.max(x.y)));
    Ok(hi - lo)
}

/// Depth ratio keeping the apparent size fixed when the first shape component
/// moves from `beta0` to `beta0 + delta`.
pub fn size_distance_scale(beta0: f64, delta: f64) -> f64 {
    (1.0 + SCALE_PER_UNIT * (beta0 + delta)) / (1.0 + SCALE_PER_UNIT * beta0)
}

/// Appearance descriptor of one person in one view: visibility, head offset
/// in the cell, log apparent size and the first joints relative to the head
/// in units of apparent size. The third coordinate of each joint is its depth
/// offset from the head on the same scale, a scale-free ordering cue that
/// tells front from back.
pub fn person_descriptor(
    k: &CameraIntrinsics,
    points: &[Vector3<f64>],
    joints: usize,
    head_px: &Vector2<f64>,
    cell: [usize; 2],
    cell_size: f64,
    extent: f64,
    visibility: f64,
) -> Result<Vec<f64>> {
    let cc = cell_center(cell, cell_size);
    let mut d = vec![0.0; DESCRIPTOR_DIM];
    d[0] = visibility;
    d[1] = (head_px.x - cc[0]) / cell_size;
    d[2] = (head_px.y - cc[1]) / cell_size;
    d[3] = (extent / REFERENCE_EXTENT).ln() / LOG_EXTENT_SPREAD;
    let head_z = points[0].z;
    for j in 0..joints.min(DESCRIPTOR_JOINTS) {
        let p = project(k, &points[j])?;
        d[4 + 3 * j] = (p.x - head_px.x) / extent;
        d[5 + 3 * j] = (p.y - head_px.y) / extent;
        d[6 + 3 * j] = k.f * (points[j].z - head_z) / (head_z * extent);
    }
    Ok(d)
}

fn sample_beta0<R: Rng + ?Sized>(profile: AmbiguityProfile, rng: &mut R) -> f64 {
    match profile {
        AmbiguityProfile::Diverse => StudentT::<f64>::new(3.0).expect("valid dof").sample(rng).clamp(-5.0, 5.0),
        _ => rng.sample(StandardNormal),
    }
}

fn tangent_rotation<R: Rng + ?Sized>(std: f64, rng: &mut R) -> Rotation {
    let v = Vector3::new(rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)) * std;
    Rotation::from_scaled_axis(&v)
}

fn ring_camera<R: Rng + ?Sized>(view: usize, centre: &Vector3<f64>, step_deg: f64, rng: &mut R) -> RigidTransform {
    if view == 0 {
        return RigidTransform::identity();
    }
    let rank = view.div_ceil(2) as f64;
    let sign = if view % 2 == 1 { 1.0 } else { -1.0 };
    let yaw = (sign * rank * step_deg + rng.random_range(-0.2..0.2) * step_deg).to_radians();
    let radius = centre.z * rng.random_range(0.9..1.1);
    let height = rng.random_range(-0.5..0.5);
    let tilt = rng.random_range(-0.03..0.03);
    let r = Rotation::rot_x(tilt).compose(&Rotation::rot_y(yaw));
    // x_cam = R (x - centre) + (0, height, radius)
    let t = Vector3::new(0.0, height, radius) - r.rotate(centre);
    RigidTransform { rotation: r, translation: [t.x, t.y, t.z] }
}

struct Placement {
    person: WorldPerson,
    heads: Vec<(Vector2<f64>, [usize; 2])>,
}

/// Generates one scene. `n_people` and `n_views` must lie in `1..=8`.
pub fn generate_scene(
    seed: u64,
    n_people: usize,
    n_views: usize,
    profile: AmbiguityProfile,
    config: &SynthConfig,
) -> Result<Scene> {
    if !(1..=8).contains(&n_people) || !(1..=8).contains(&n_views) {
        return Err(Error::Config(format!("need 1..=8 people and views, got {n_people} and {n_views}")));
    }
    config.validate()?;
    let body = KinematicBody::with_joints(config.joints);
    if body.shape_dim() != config.shape_dim {
        return Err(Error::Config("shape dimension must match the body".into()));
    }
    let maps = FeatureMaps::new(config.feature_dim, config.global_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.image_size;
    let (w, h) = (size[0] as f64, size[1] as f64);
    let cs = config.cell_size();

    let cameras_k: Vec<CameraIntrinsics> = (0..n_views)
        .map(|_| {
            let lf = config.log_focal_mean + config.log_focal_std * rng.sample::<f64, _>(StandardNormal);
            CameraIntrinsics { f: lf.exp(), p: [0.5 * w, 0.5 * h], image_size: size }
        })
        .collect();
    let typical_depth = match profile {
        AmbiguityProfile::SizeDistance => {
            let e = (config.extent_range[0] * config.extent_range[1]).sqrt();
            cameras_k[0].f * body_height(&body, &vec![0.0; config.shape_dim])? / e
        }
        _ => 0.5 * (config.depth_range[0] + config.depth_range[1]),
    };
    let centre = Vector3::new(0.0, 0.0, typical_depth);
    let extrinsics: Vec<RigidTransform> = (0..n_views).map(|v| ring_camera(v, &centre, config.ring_step_deg, &mut rng)).collect();

    let mut placed: Vec<Placement> = Vec::with_capacity(n_people);
    for id in 0..n_people {
        let mut attempt = 0;
        let p = loop {
            attempt += 1;
            if attempt > MAX_ATTEMPTS {
                return Err(Error::PlacementFailure(MAX_ATTEMPTS));
            }
            let mut beta: Vec<f64> = (0..config.shape_dim).map(|_| rng.sample(StandardNormal)).collect();
            beta[0] = sample_beta0(profile, &mut rng);
            let gamma: Vec<f64> = (0..config.expression_dim).map(|_| rng.sample(StandardNormal)).collect();
            let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let root = Rotation::rot_y(yaw).compose(&tangent_rotation(0.1, &mut rng));
            let mut theta = vec![root];
            theta.extend((1..config.joints).map(|j| tangent_rotation(bone_spread(j, config.bone_spread), &mut rng)));
            let k0 = &cameras_k[0];
            let c = Vector2::new(rng.random_range(0.05 * w..0.95 * w), rng.random_range(0.05 * h..0.6 * h));
            let depth = match profile {
                AmbiguityProfile::SizeDistance => {
                    let [lo, hi] = config.extent_range;
                    let e = (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp();
                    k0.f * body_height(&body, &beta)? / e
                }
                _ => rng.random_range(config.depth_range[0]..config.depth_range[1]),
            };
            let head = crate::body::backproject(k0, &c, depth)?;
            let person = WorldPerson { id, head: [head.x, head.y, head.z], theta, beta, gamma };
            let mut heads = Vec::with_capacity(n_views);
            let mut ok = true;
            for (k, x) in cameras_k.iter().zip(&extrinsics) {
                let hc = x.apply(&head);
                if hc.z < 1.0 {
                    ok = false;
                    break;
                }
                let px = project(k, &hc)?;
                if !(px.x >= 0.0 && px.x < w && px.y >= 0.0 && px.y < h) {
                    ok = false;
                    break;
                }
                heads.push((px, [(px.x / cs) as usize, (px.y / cs) as usize]));
            }
            let clash = placed.iter().any(|q| q.heads.iter().zip(&heads).any(|(a, b)| a.1 == b.1));
            if ok && !clash {
                break Placement { person, heads };
            }
        };
        placed.push(p);
    }

    let visibilities: Vec<Vec<f64>> = (0..n_views)
        .map(|_| {
            (0..n_people)
                .map(|_| if profile == AmbiguityProfile::Noiseless { 1.0 } else { rng.random_range(0.3..1.0) })
                .collect()
        })
        .collect();
    let mut views = Vec::with_capacity(n_views);
    for v in 0..n_views {
        let k = cameras_k[v];
        let x = &extrinsics[v];
        let mut gt = Vec::with_capacity(n_people);
        for (pi, p) in placed.iter().enumerate() {
            let person = &p.person;
            let (px, cell) = p.heads[v];
            let mut theta = person.theta.clone();
            theta[0] = x.rotation.compose(&person.theta[0]);
            let t = x.apply(&Vector3::from(person.head));
            gt.push(GroundTruthPerson {
                id: person.id,
                cell,
                center2d: [px.x, px.y],
                encoded_depth: (t.z / k.f).ln(),
                t: [t.x, t.y, t.z],
                theta,
                beta: person.beta.clone(),
                gamma: person.gamma.clone(),
                visibility: visibilities[v][pi],
            });
        }
        let (patch_features, global_feature) = render_features(&gt, &k, profile, config, &maps, &body, &mut rng)?;
        views.push(SceneObservation {
            scene_id: seed,
            view_id: v,
            grid: config.grid,
            patch_features,
            global_feature,
            gt_intrinsics: k,
            gt,
        });
    }
    Ok(Scene {
        scene_id: seed,
        seed,
        profile,
        people: placed.into_iter().map(|p| p.person).collect(),
        cameras: cameras_k.into_iter().zip(extrinsics).map(|(intrinsics, extrinsics)| SceneCamera { intrinsics, extrinsics }).collect(),
        views,
    })
}

/// Patch and global features of one view: per-person descriptors at the
/// head cells mapped through the fixed projections, plus sensor noise that
/// grows with occlusion.
fn render_features<R: Rng + ?Sized>(
    gt: &[GroundTruthPerson],
    k: &CameraIntrinsics,
    profile: AmbiguityProfile,
    config: &SynthConfig,
    maps: &FeatureMaps,
    body: &KinematicBody,
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let noise = if profile == AmbiguityProfile::Noiseless { 0.0 } else { config.feature_noise };
    let occlusion = if profile == AmbiguityProfile::Noiseless { 0.0 } else { config.occlusion_noise };
    let cs = config.cell_size();
    let ncell = config.grid[0] * config.grid[1];
    let mut descriptors = vec![vec![0.0; DESCRIPTOR_DIM]; ncell];
    let mut extra = vec![0.0; ncell];
    for g in gt {
        let t = g.translation();
        let points = forward_kinematics(body, &g.theta, &g.beta, &t)?;
        let extent = k.f * body_height(body, &g.beta)? / t.z;
        let idx = g.cell[1] * config.grid[0] + g.cell[0];
        let px = Vector2::new(g.center2d[0], g.center2d[1]);
        descriptors[idx] = person_descriptor(k, &points, config.joints, &px, g.cell, cs, extent, g.visibility)?;
        extra[idx] = occlusion * (1.0 - g.visibility);
    }
    let mut patch_features = Vec::with_capacity(ncell);
    for (d, e) in descriptors.iter().zip(&extra) {
        let f = &maps.patch * DVector::from_column_slice(d);
        let sd = noise + e;
        patch_features.push(f.iter().map(|x| x + sd * rng.sample::<f64, _>(StandardNormal)).collect());
    }
    let z = (k.f.ln() - config.log_focal_mean) / config.log_focal_std;
    let latent = z + config.global_focal_noise * rng.sample::<f64, _>(StandardNormal);
    let global_feature = maps.global.iter().map(|g| g * latent + noise * rng.sample::<f64, _>(StandardNormal)).collect();
    Ok((patch_features, global_feature))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub scenes: usize,
    pub views: usize,
    pub min_people: usize,
    pub max_people: usize,
    pub seed: u64,
    pub profile: AmbiguityProfile,
    pub synth: SynthConfig,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            scenes: 256,
            views: 1,
            min_people: 1,
            max_people: 4,
            seed: 0,
            profile: AmbiguityProfile::BedlamLike,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub count: usize,
    pub seeds: Vec<u64>,
    pub profile: AmbiguityProfile,
    pub spec: DatasetSpec,
    pub files: Vec<String>,
    /// SHA-256 over the scene files in order.
    pub content_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        if spec.scenes == 0 || spec.min_people == 0 || spec.min_people > spec.max_people {
            return Err(Error::Config("need at least one scene and 1 <= min_people <= max_people".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut scenes = Vec::with_capacity(spec.scenes);
        for _ in 0..spec.scenes {
            let seed = rng.random::<u64>();
            let n = rng.random_range(spec.min_people..=spec.max_people);
            scenes.push(generate_scene(seed, n, spec.views, spec.profile, &spec.synth)?);
        }
        Ok(Dataset { spec: spec.clone(), scenes })
    }

    /// All views of all scenes, in scene then view order.
    pub fn observations(&self) -> Vec<&SceneObservation> {
        self.scenes.iter().flat_map(|s| s.views.iter()).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut hasher = Sha256::new();
        let mut files = Vec::with_capacity(self.scenes.len());
        for (i, s) in self.scenes.iter().enumerate() {
            let name = format!("scene_{i:05}.json");
            let path = dir.join(&name);
            let bytes = serde_json::to_vec(s).map_err(|e| Error::json(&path, e))?;
            hasher.update(&bytes);
            std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            files.push(name);
        }
        let manifest = Manifest {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            count: self.scenes.len(),
            seeds: self.scenes.iter().map(|s| s.seed).collect(),
            profile: self.spec.profile,
            spec: self.spec.clone(),
            files,
            content_hash: hex::encode(hasher.finalize()),
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if manifest.format != DATASET_FORMAT || manifest.version != DATASET_VERSION {
            return Err(Error::Format(format!("{}: unsupported dataset {} v{}", path.display(), manifest.format, manifest.version)));
        }
        let mut scenes = Vec::with_capacity(manifest.count);
        let mut hasher = Sha256::new();
        for name in &manifest.files {
            let p: PathBuf = dir.join(name);
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            hasher.update(&bytes);
            scenes.push(serde_json::from_slice(&bytes).map_err(|e| Error::json(&p, e))?);
        }
        if hex::encode(hasher.finalize()) != manifest.content_hash {
            return Err(Error::Format(format!("{}: content hash mismatch", dir.display())));
        }
        Ok(Dataset { spec: manifest.spec, scenes })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub scenes: usize,
    pub people: usize,
    pub people_per_scene_mean: f64,
    pub people_per_scene_min: usize,
    pub people_per_scene_max: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub depth_mean: f64,
    pub beta0_mean: f64,
    pub beta0_std: f64,
    pub beta0_excess_kurtosis: f64,
    /// Histogram of the first shape component over `[-5, 5]` in unit bins.
    pub beta0_histogram: Vec<usize>,
    /// Ridge-probe R^2 from head-cell features to log apparent size.
    pub probe_extent_r2: f64,
    /// Ridge-probe R^2 from head-cell features to metric depth.
    pub probe_depth_r2: f64,
}

/// Sample excess kurtosis `m4 / m2^2 - 3`.
pub fn excess_kurtosis(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    m4 / (m2 * m2) - 3.0
}

/// Held-out R^2 of a ridge regression from `x` rows to `y`, trained on the
/// first half and scored on the second.
pub fn ridge_probe_r2(x: &[Vec<f64>], y: &[f64], ridge: f64) -> f64 {
    let n = x.len();
    if n < 4 {
        return f64::NAN;
    }
    let d = x[0].len() + 1;
    let split = n / 2;
    let row = |i: usize| {
        let mut r = x[i].clone();
        r.push(1.0);
        r
    };
    let mut a = DMatrix::<f64>::zeros(d, d);
    let mut b = DVector::<f64>::zeros(d);
    for i in 0..split {
        let r = DVector::from_vec(row(i));
        a += &r * r.transpose();
        b += &r * y[i];
    }
    for k in 0..d - 1 {
        a[(k, k)] += ridge;
    }
    let Some(w) = a.lu().solve(&b) else { return f64::NAN };
    let test: Vec<usize> = (split..n).collect();
    let mean = test.iter().map(|&i| y[i]).sum::<f64>() / test.len() as f64;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for &i in &test {
        let pred = DVector::from_vec(row(i)).dot(&w);
        ss_res += (y[i] - pred).powi(2);
        ss_tot += (y[i] - mean).powi(2);
    }
    1.0 - ss_res / ss_tot
}

pub fn dataset_stats(dataset: &Dataset) -> Result<DatasetStats> {
    if dataset.scenes.is_empty() {
        return Err(Error::EmptyList);
    }
    let counts: Vec<usize> = dataset.scenes.iter().map(|s| s.people.len()).collect();
    let beta0: Vec<f64> = dataset.scenes.iter().flat_map(|s| s.people.iter().map(|p| p.beta[0])).collect();
    let mut depths = Vec::new();
    let mut feats = Vec::new();
    let mut log_extent = Vec::new();
    let body = KinematicBody::with_joints(dataset.spec.synth.joints);
    for s in &dataset.scenes {
        for obs in &s.views {
            for p in &obs.gt {
                depths.push(p.t[2]);
                feats.push(obs.patch(p.cell).to_vec());
                log_extent.push((obs.gt_intrinsics.f * body_height(&body, &p.beta)? / p.t[2]).ln());
            }
        }
    }
    let n = beta0.len() as f64;
    let mean = beta0.iter().sum::<f64>() / n;
    let std = (beta0.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut histogram = vec![0usize; 10];
    for b in &beta0 {
        let i = ((b + 5.0).floor() as i64).clamp(0, 9) as usize;
        histogram[i] += 1;
    }
    Ok(DatasetStats {
        scenes: dataset.scenes.len(),
        people: beta0.len(),
        people_per_scene_mean: counts.iter().sum::<usize>() as f64 / counts.len() as f64,
        people_per_scene_min: *counts.iter().min().expect("nonempty"),
        people_per_scene_max: *counts.iter().max().expect("nonempty"),
        depth_min: depths.iter().cloned().fold(f64::INFINITY, f64::min),
        depth_max: depths.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        depth_mean: depths.iter().sum::<f64>() / depths.len() as f64,
        beta0_mean: mean,
        beta0_std: std,
        beta0_excess_kurtosis: excess_kurtosis(&beta0),
        beta0_histogram: histogram,
        probe_extent_r2: ridge_probe_r2(&feats, &log_extent, 1e-3),
        probe_depth_r2: ridge_probe_r2(&feats, &depths, 1e-3),
    })
}
