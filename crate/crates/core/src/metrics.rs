//! Evaluation metrics on body points: per-point and per-joint errors with and
//! without Procrustes alignment, absolute position error, PCK and the rank
//! correlation between likelihood and error.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::assign_rectangular;
use crate::so3::{sorted_svd, special_procrustes, Rotation};

pub const DEFAULT_PCK_THRESHOLD_MM: f64 = 150.0;

/// `x -> scale * rotation * x + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub rotation: Rotation,
    pub scale: f64,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation.rotate(x) + self.translation
    }
}

fn centroid(p: &[Vector3<f64>]) -> Vector3<f64> {
    p.iter().fold(Vector3::zeros(), |a, b| a + b) / p.len() as f64
}

/// Least-squares similarity (or rigid, without scale) transform taking `src`
/// onto `dst`.
pub fn similarity_align(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> Result<SimilarityTransform> {
    if src.len() != dst.len() {
        return Err(Error::DimensionMismatch { expected: dst.len(), got: src.len() });
    }
    if src.len() < 3 {
        return Err(Error::DegeneratePointSet(format!("{} points", src.len())));
    }
    let (cs, cd) = (centroid(src), centroid(dst));
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (d - cd) * (s - cs).transpose();
        spread += (s - cs) * (s - cs).transpose();
    }
    let (_, sv, _) = sorted_svd(&spread)?;
    if !(sv[1] > 1e-12 * sv[0].max(1e-300)) {
        return Err(Error::DegeneratePointSet("points are collinear".into()));
    }
    let rotation =
        special_procrustes(&h).map_err(|_| Error::DegeneratePointSet("rank-deficient cross-covariance".into()))?;
    let scale = if with_scale { (rotation.matrix().transpose() * h).trace() / spread.trace() } else { 1.0 };
    let translation = cd - scale * rotation.rotate(&cs);
    Ok(SimilarityTransform { rotation, scale, translation })
}

/// `pred` after the optimal similarity (or rigid) alignment onto `gt`.
pub fn procrustes_align(pred: &[Vector3<f64>], gt: &[Vector3<f64>], with_scale: bool) -> Result<Vec<Vector3<f64>>> {
    let t = similarity_align(pred, gt, with_scale)?;
    Ok(pred.iter().map(|x| t.apply(x)).collect())
}

/// Mean Euclidean distance between corresponding points.
pub fn mean_distance(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).sum::<f64>() / a.len() as f64
}

pub fn rms_distance(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum::<f64>() / a.len() as f64).sqrt()
}

/// Spearman rank correlation (average ranks for ties). `None` for fewer than
/// two samples or a constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// One person's body points in the camera frame. The first `joints` points
/// are the joint positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonPoints {
    pub points: Vec<Vector3<f64>>,
    pub translation: Vector3<f64>,
    /// Joint log-density of the prediction under the model, if known.
    pub log_density: Option<f64>,
}

impl PersonPoints {
    fn centred(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(|p| p - self.translation).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalScene {
    pub scene: u64,
    pub view: usize,
    pub predictions: Vec<PersonPoints>,
    pub ground_truth: Vec<PersonPoints>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub joints: usize,
    pub pck_threshold_mm: f64,
    /// Include scale in the Procrustes alignment.
    pub pa_with_scale: bool,
    pub match_rule: MatchRule,
}

/// Cost used to pair ground-truth persons with predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    /// Minimal Procrustes-aligned joint error.
    #[default]
    PaPje,
    /// Minimal angle between the head rays from the camera centre, i.e. 2D
    /// head-keypoint distance independent of the intrinsics.
    HeadRay,
}

impl EvalConfig {
    pub fn new(joints: usize) -> Self {
        EvalConfig { joints, pck_threshold_mm: DEFAULT_PCK_THRESHOLD_MM, pa_with_scale: true, match_rule: MatchRule::PaPje }
    }
}

/// Errors in millimetres for one ground-truth person.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonRecord {
    pub scene: u64,
    pub view: usize,
    pub gt_index: usize,
    pub pred_index: Option<usize>,
    pub pve: Option<f64>,
    pub pa_pve: Option<f64>,
    pub pje: Option<f64>,
    pub pa_pje: Option<f64>,
    pub pe: Option<f64>,
    /// Fraction of joints within the PCK threshold (0 for a miss).
    pub pck: f64,
    pub log_density: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub persons: usize,
    pub matched: usize,
    pub pve: f64,
    pub pa_pve: f64,
    pub pje: f64,
    pub pa_pje: f64,
    pub pe: f64,
    pub pck_threshold_mm: f64,
    pub pck_matched: f64,
    pub pck_all: f64,
    /// Spearman correlation between negative log-density and PVE over
    /// matched persons with a known density.
    pub likelihood_error_corr: Option<f64>,
    pub records: Vec<PersonRecord>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "persons,matched,pve_mm,pa_pve_mm,pje_mm,pa_pje_mm,pe_mm,pck_matched,pck_all,likelihood_error_corr";

    pub fn csv_fields(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.persons,
            self.matched,
            self.pve,
            self.pa_pve,
            self.pje,
            self.pa_pje,
            self.pe,
            self.pck_matched,
            self.pck_all,
            self.likelihood_error_corr.map(|r| format!("{r:.6}")).unwrap_or_default()
        )
    }

    /// Mean PVE over the matched persons of each scene, all views pooled.
    pub fn per_scene_pve(&self) -> Vec<(u64, f64)> {
        let mut acc: std::collections::BTreeMap<u64, (f64, usize)> = Default::default();
        for r in &self.records {
            if let Some(p) = r.pve {
                let e = acc.entry(r.scene).or_default();
                e.0 += p;
                e.1 += 1;
            }
        }
        acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }
}

fn pck_fraction(pred: &[Vector3<f64>], gt: &[Vector3<f64>], threshold_m: f64) -> f64 {
    pred.iter().zip(gt).filter(|(a, b)| (*a - *b).norm() <= threshold_m).count() as f64 / pred.len() as f64
}

fn mean(x: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = x.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

struct Scored {
    pve: f64,
    pa_pve: f64,
    pje: f64,
    pa_pje: f64,
    pe: f64,
    pck: f64,
    head_angle: f64,
}

fn ray_angle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

fn score(pred: &PersonPoints, gt: &PersonPoints, config: &EvalConfig) -> Result<Scored> {
    if pred.points.len() != gt.points.len() {
        return Err(Error::DimensionMismatch { expected: gt.points.len(), got: pred.points.len() });
    }
    let j = config.joints.min(gt.points.len());
    let (pc, gc) = (pred.centred(), gt.centred());
    let pa = procrustes_align(&pc, &gc, config.pa_with_scale)?;
    let pa_j = procrustes_align(&pc[..j], &gc[..j], config.pa_with_scale)?;
    Ok(Scored {
        pve: 1e3 * mean_distance(&pc, &gc),
        pa_pve: 1e3 * mean_distance(&pa, &gc),
        pje: 1e3 * mean_distance(&pc[..j], &gc[..j]),
        pa_pje: 1e3 * mean_distance(&pa_j, &gc[..j]),
        pe: 1e3 * (pred.translation - gt.translation).norm(),
        pck: pck_fraction(&pc[..j], &gc[..j], config.pck_threshold_mm * 1e-3),
        head_angle: ray_angle(&pred.translation, &gt.translation),
    })
}

/// Matches every ground-truth person to at most one prediction of the same
/// view under the configured rule and aggregates the errors. Ground-truth persons
/// without a prediction count as misses in PCK-All.
pub fn evaluate(scenes: &[EvalScene], config: &EvalConfig) -> Result<EvalReport> {
    let mut records = Vec::new();
    for s in scenes {
        let mut scored: Vec<Vec<Scored>> = Vec::with_capacity(s.ground_truth.len());
        for g in &s.ground_truth {
            scored.push(s.predictions.iter().map(|p| score(p, g, config)).collect::<Result<_>>()?);
        }
        let assignment = if s.predictions.is_empty() {
            vec![None; s.ground_truth.len()]
        } else {
            let cost: Vec<Vec<f64>> = scored
                .iter()
                .map(|r| {
                    r.iter()
                        .map(|x| match config.match_rule {
                            MatchRule::PaPje => x.pa_pje,
                            MatchRule::HeadRay => x.head_angle,
                        })
                        .collect()
                })
                .collect();
            let worst = cost.iter().flatten().cloned().fold(0.0, f64::max);
            assign_rectangular(&cost, 2.0 * worst + 1.0)?
        };
        for (gi, m) in assignment.iter().enumerate() {
            let rec = match m {
                Some(pi) => {
                    let x = &scored[gi][*pi];
                    PersonRecord {
                        scene: s.scene,
                        view: s.view,
                        gt_index: gi,
                        pred_index: Some(*pi),
                        pve: Some(x.pve),
                        pa_pve: Some(x.pa_pve),
                        pje: Some(x.pje),
                        pa_pje: Some(x.pa_pje),
                        pe: Some(x.pe),
                        pck: x.pck,
                        log_density: s.predictions[*pi].log_density,
                    }
                }
                None => PersonRecord {
                    scene: s.scene,
                    view: s.view,
                    gt_index: gi,
                    pred_index: None,
                    pve: None,
                    pa_pve: None,
                    pje: None,
                    pa_pje: None,
                    pe: None,
                    pck: 0.0,
                    log_density: None,
                },
            };
            records.push(rec);
        }
    }
    let matched: Vec<&PersonRecord> = records.iter().filter(|r| r.pred_index.is_some()).collect();
    let with_density: Vec<&&PersonRecord> = matched.iter().filter(|r| r.log_density.is_some()).collect();
    let nll: Vec<f64> = with_density.iter().map(|r| -r.log_density.unwrap_or(0.0)).collect();
    let err: Vec<f64> = with_density.iter().map(|r| r.pve.unwrap_or(0.0)).collect();
    Ok(EvalReport {
        persons: records.len(),
        matched: matched.len(),
        pve: mean(matched.iter().filter_map(|r| r.pve)),
        pa_pve: mean(matched.iter().filter_map(|r| r.pa_pve)),
        pje: mean(matched.iter().filter_map(|r| r.pje)),
        pa_pje: mean(matched.iter().filter_map(|r| r.pa_pje)),
        pe: mean(matched.iter().filter_map(|r| r.pe)),
        pck_threshold_mm: config.pck_threshold_mm,
        pck_matched: mean(matched.iter().map(|r| r.pck)),
        pck_all: mean(records.iter().map(|r| r.pck)),
        likelihood_error_corr: spearman(&nll, &err),
        records,
    })
}
