//! Matrix Fisher distributions on SO(3), `p(R) = c(F) exp(tr(F^T R))`.
//!
//! `c(F)` is taken with respect to the unit-mass Haar measure (so `c(0) = 1`)
//! and evaluated by equal-weight integration over an [`So3Grid`].

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::so3::{sorted_svd, Rotation, So3Grid};

pub const DEFAULT_LAMBDA_SCALE: f64 = 2.0;
pub const MAX_PARAM_NORM: f64 = 50.0;
const REJECTION_MIN_ACCEPTANCE: f64 = 1e-4;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Regression-friendly decomposition `F = R O diag(lambda * sigmoid(Lambda)) O^T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixFisherParams {
    pub mode: Rotation,
    pub dispersion_rotation: Rotation,
    pub lambda_raw: [f64; 3],
    pub lambda_scale: f64,
}

impl MatrixFisherParams {
    pub fn new(mode: Rotation, dispersion_rotation: Rotation, lambda_raw: [f64; 3]) -> Self {
        MatrixFisherParams {
            mode,
            dispersion_rotation,
            lambda_raw,
            lambda_scale: DEFAULT_LAMBDA_SCALE,
        }
    }

    pub fn concentrations(&self) -> [f64; 3] {
        self.lambda_raw.map(|l| self.lambda_scale * sigmoid(l))
    }

    pub fn assembled(&self) -> Matrix3<f64> {
        assemble(
            &self.mode.matrix(),
            &self.dispersion_rotation.matrix(),
            &self.concentrations(),
        )
    }

    pub fn distribution(&self) -> MatrixFisher {
        MatrixFisher::new(self.assembled())
    }
}

pub(crate) fn assemble(r: &Matrix3<f64>, o: &Matrix3<f64>, d: &[f64; 3]) -> Matrix3<f64> {
    r * o * Matrix3::from_diagonal(&Vector3::from(*d)) * o.transpose()
}

/// A matrix Fisher distribution given directly by its parameter matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixFisher {
    /// Row-major parameter matrix.
    #[serde(with = "row_major")]
    pub f: Matrix3<f64>,
}

mod row_major {
    use nalgebra::Matrix3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix3<f64>, s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<f64> = (0..3).flat_map(|i| (0..3).map(move |j| m[(i, j)])).collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix3<f64>, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        if v.len() != 9 {
            return Err(serde::de::Error::custom("expected 9 entries"));
        }
        Ok(Matrix3::from_row_slice(&v))
    }
}

impl MatrixFisher {
    pub fn new(f: Matrix3<f64>) -> Self {
        MatrixFisher { f }
    }

    pub fn mode(&self) -> Result<Rotation> {
        crate::so3::special_procrustes(&self.f)
    }

    /// Proper singular value decomposition `F = U diag(s) V^T` with `U, V` in SO(3).
    pub fn proper_svd(&self) -> Result<(Matrix3<f64>, Vector3<f64>, Matrix3<f64>)> {
        let (mut u, mut s, mut v) = sorted_svd(&self.f)?;
        if u.determinant() < 0.0 {
            u.column_mut(2).neg_mut();
            s[2] = -s[2];
        }
        if v.determinant() < 0.0 {
            v.column_mut(2).neg_mut();
            s[2] = -s[2];
        }
        Ok((u, s, v))
    }

    pub fn proper_singular_values(&self) -> Result<[f64; 3]> {
        let (_, s, _) = self.proper_svd()?;
        Ok([s[0], s[1], s[2]])
    }

    pub fn log_density(&self, r: &Rotation, norm: &FisherNormalizer) -> Result<f64> {
        Ok(norm.ln_normalizer(&self.f)? + (self.f.transpose() * r.matrix()).trace())
    }
}

/// The grid is pulled back by this rotation before integrating, so that the
/// peak of a diagonal parameter lands in the regular equatorial belt of the
/// sphere partition rather than at its pole.
fn integration_frame() -> Rotation {
    Rotation::rot_y(std::f64::consts::FRAC_PI_2)
}

#[derive(Clone, Copy, Debug)]
struct NormalizerEntry {
    ln_c: f64,
    mean_diag: [f64; 3],
}

/// Grid-integrated normalization constant with memoization keyed by the
/// quantized proper singular values.
///
/// Values are returned from a first-order expansion around the quantized key,
/// so the result is a smooth-enough function of `F` for finite differences
/// and does not depend on whether the cache happened to be warm.
pub struct FisherNormalizer {
    grid: Arc<So3Grid>,
    squares: Vec<[f64; 4]>,
    quantum: f64,
    capacity: usize,
    cache: RwLock<HashMap<[i64; 3], NormalizerEntry>>,
}

impl std::fmt::Debug for FisherNormalizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FisherNormalizer")
            .field("level", &self.grid.level)
            .field("quantum", &self.quantum)
            .finish()
    }
}

impl FisherNormalizer {
    pub const DEFAULT_QUANTUM: f64 = 1e-4;
    const DEFAULT_CAPACITY: usize = 1 << 20;

    pub fn new(grid: Arc<So3Grid>) -> Self {
        Self::with_quantum(grid, Self::DEFAULT_QUANTUM)
    }

    /// `quantum = 0` disables caching and integrates every query exactly.
    pub fn with_quantum(grid: Arc<So3Grid>, quantum: f64) -> Self {
        let frame = integration_frame().inverse();
        let squares = grid
            .rotations
            .iter()
            .map(|r| frame.compose(r).wxyz().map(|c| c * c))
            .collect();
        FisherNormalizer {
            grid,
            squares,
            quantum,
            capacity: Self::DEFAULT_CAPACITY,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn at_level(level: u32) -> Result<Self> {
        Ok(Self::new(So3Grid::cached(level)?))
    }

    pub fn grid(&self) -> &Arc<So3Grid> {
        &self.grid
    }

    pub fn level(&self) -> u32 {
        self.grid.level
    }

    pub fn cache_len(&self) -> usize {
        self.cache.read().map(|c| c.len()).unwrap_or(0)
    }

    /// Exact grid integration for `F = diag(s)`: returns `ln c` and the
    /// diagonal of `E[R]`.
    fn integrate_diag(&self, s: [f64; 3]) -> NormalizerEntry {
        // tr(diag(s) R) as a quadratic form in the quaternion (w, x, y, z).
        let b = [
            s[0] + s[1] + s[2],
            s[0] - s[1] - s[2],
            -s[0] + s[1] - s[2],
            -s[0] - s[1] + s[2],
        ];
        let shift = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut moments = [0.0; 4];
        for q in &self.squares {
            let e = (b[0] * q[0] + b[1] * q[1] + b[2] * q[2] + b[3] * q[3] - shift).exp();
            total += e;
            moments[0] += e * q[0];
            moments[1] += e * q[1];
            moments[2] += e * q[2];
            moments[3] += e * q[3];
        }
        let m = moments.map(|v| v / total);
        let n = self.squares.len() as f64;
        NormalizerEntry {
            ln_c: -(shift + (total / n).ln()),
            mean_diag: [
                m[0] + m[1] - m[2] - m[3],
                m[0] - m[1] + m[2] - m[3],
                m[0] - m[1] - m[2] + m[3],
            ],
        }
    }

    /// `(ln c, diag E[R])` for a diagonal parameter with entries `s`
    /// (proper singular values, any order).
    pub fn diag_stats(&self, s: [f64; 3]) -> (f64, [f64; 3]) {
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap_or(std::cmp::Ordering::Equal));
        let sorted = order.map(|i| s[i]);
        if self.quantum <= 0.0 {
            let e = self.integrate_diag(sorted);
            let mut mean = [0.0; 3];
            for (slot, &src) in order.iter().enumerate() {
                mean[src] = e.mean_diag[slot];
            }
            return (e.ln_c, mean);
        }
        let key = sorted.map(|v| (v / self.quantum).round() as i64);
        let cached = self.cache.read().ok().and_then(|c| c.get(&key).copied());
        let entry = match cached {
            Some(e) => e,
            None => {
                let centre = key.map(|k| k as f64 * self.quantum);
                let e = self.integrate_diag(centre);
                if let Ok(mut c) = self.cache.write() {
                    if c.len() >= self.capacity {
                        c.clear();
                    }
                    c.entry(key).or_insert(e);
                }
                e
            }
        };
        let mut ln_c = entry.ln_c;
        let mut mean = [0.0; 3];
        for (slot, &src) in order.iter().enumerate() {
            let centre = key[slot] as f64 * self.quantum;
            ln_c -= entry.mean_diag[slot] * (sorted[slot] - centre);
            mean[src] = entry.mean_diag[slot];
        }
        (ln_c, mean)
    }

    fn check_norm(f: &Matrix3<f64>) -> Result<()> {
        let n = f.norm();
        if !n.is_finite() || n > MAX_PARAM_NORM {
            return Err(Error::ParamOutOfRange(format!(
                "matrix Fisher parameter norm {n:.3} exceeds {MAX_PARAM_NORM}"
            )));
        }
        Ok(())
    }

    pub fn ln_normalizer(&self, f: &Matrix3<f64>) -> Result<f64> {
        Self::check_norm(f)?;
        if f.iter().all(|v| *v == 0.0) {
            return Ok(0.0);
        }
        let s = MatrixFisher::new(*f).proper_singular_values()?;
        Ok(self.diag_stats(s).0)
    }

    /// `c(F) = 1 / mean_grid exp(tr(F^T R))`.
    pub fn normalizer(&self, f: &Matrix3<f64>) -> Result<f64> {
        Ok(self.ln_normalizer(f)?.exp())
    }

    /// `E_F[R]` estimated on the grid.
    pub fn mean_rotation(&self, f: &Matrix3<f64>) -> Result<Matrix3<f64>> {
        Self::check_norm(f)?;
        if f.iter().all(|v| *v == 0.0) {
            return Ok(Matrix3::zeros());
        }
        let (u, s, v) = MatrixFisher::new(*f).proper_svd()?;
        let (_, mean) = self.diag_stats([s[0], s[1], s[2]]);
        Ok(u * Matrix3::from_diagonal(&Vector3::from(mean)) * v.transpose())
    }

    /// Direct (uncached) grid evaluation of `ln c(F)` for arbitrary `F`.
    pub fn ln_normalizer_direct(&self, f: &Matrix3<f64>) -> Result<f64> {
        Self::check_norm(f)?;
        let ft = f.transpose() * integration_frame().inverse().matrix();
        let traces: Vec<f64> = self
            .grid
            .rotations
            .iter()
            .map(|r| (ft * r.matrix()).trace())
            .collect();
        let shift = traces.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = traces.iter().map(|t| (t - shift).exp()).sum();
        Ok(-(shift + (total / traces.len() as f64).ln()))
    }
}

pub fn fisher_normalizer(f: &Matrix3<f64>, grid: &So3Grid) -> Result<f64> {
    let norm = FisherNormalizer::with_quantum(Arc::new(grid.clone()), 0.0);
    norm.normalizer(f)
}

pub fn fisher_log_density(
    params: &MatrixFisherParams,
    r: &Rotation,
    norm: &FisherNormalizer,
) -> Result<f64> {
    params.distribution().log_density(r, norm)
}

/// Mode of the parametrized distribution. When all concentrations vanish the
/// density is uniform; the regressed mode is still returned by convention.
pub fn fisher_mode(params: &MatrixFisherParams) -> Rotation {
    params.mode
}

/// `d log p / dF = R_gt - E_F[R]`.
pub fn fisher_log_density_grad(
    params: &MatrixFisherParams,
    r_gt: &Rotation,
    norm: &FisherNormalizer,
) -> Result<Matrix3<f64>> {
    let f = params.assembled();
    Ok(r_gt.matrix() - norm.mean_rotation(&f)?)
}

/// Log-density of the decomposed parametrization together with its gradients
/// with respect to the mode matrix, the dispersion rotation matrix and the raw
/// concentrations. The matrices are treated as free 3x3 inputs of `F = R O D O^T`.
#[derive(Clone, Debug)]
pub struct FisherParamGrad {
    pub log_density: f64,
    pub grad_mode: Matrix3<f64>,
    pub grad_dispersion: Matrix3<f64>,
    pub grad_lambda_raw: [f64; 3],
}

pub fn fisher_param_log_density_grad(
    mode: &Matrix3<f64>,
    dispersion: &Matrix3<f64>,
    lambda_raw: &[f64; 3],
    lambda_scale: f64,
    r_gt: &Matrix3<f64>,
    norm: &FisherNormalizer,
) -> FisherParamGrad {
    let sig = lambda_raw.map(sigmoid);
    let d = sig.map(|s| lambda_scale * s);
    let (ln_c, mean) = norm.diag_stats(d);
    let c = mode.transpose() * r_gt;
    let a = dispersion.transpose() * c * dispersion;
    let mut log_density = ln_c;
    let mut grad_lambda_raw = [0.0; 3];
    for k in 0..3 {
        log_density += d[k] * a[(k, k)];
        grad_lambda_raw[k] = (a[(k, k)] - mean[k]) * lambda_scale * sig[k] * (1.0 - sig[k]);
    }
    let dm = Matrix3::from_diagonal(&Vector3::from(d));
    let b = dispersion * dm * dispersion.transpose();
    FisherParamGrad {
        log_density,
        grad_mode: r_gt * b.transpose(),
        grad_dispersion: (c + c.transpose()) * dispersion * dm,
        grad_lambda_raw,
    }
}

impl MatrixFisher {
    /// I.i.d. samples. Rejection sampling against the mode envelope with
    /// Haar proposals; when the acceptance rate would drop below 1e-4 the
    /// sampler switches to grid-categorical draws with within-cell jitter.
    pub fn sample(&self, norm: &FisherNormalizer, seed: u64, n: usize) -> Result<Vec<Rotation>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (u, s, v) = if self.f.iter().all(|x| *x == 0.0) {
            (Matrix3::identity(), Vector3::zeros(), Matrix3::identity())
        } else {
            self.proper_svd()?
        };
        let sd = [s[0], s[1], s[2]];
        let envelope = sd[0] + sd[1] + sd[2];
        let (ln_c, _) = norm.diag_stats(sd);
        let acceptance = (-envelope - ln_c).exp();
        let to_frame = |r: &Matrix3<f64>| Rotation::from_matrix(&(u * r * v.transpose()));
        let mut out = Vec::with_capacity(n);
        if acceptance >= REJECTION_MIN_ACCEPTANCE {
            while out.len() < n {
                let r = Rotation::random(&mut rng).matrix();
                let t = sd[0] * r[(0, 0)] + sd[1] * r[(1, 1)] + sd[2] * r[(2, 2)];
                if rng.random::<f64>() < (t - envelope).exp() {
                    out.push(to_frame(&r));
                }
            }
        } else {
            let grid = norm.grid();
            let logits: Vec<f64> = grid
                .rotations
                .iter()
                .map(|r| {
                    let m = r.matrix();
                    sd[0] * m[(0, 0)] + sd[1] * m[(1, 1)] + sd[2] * m[(2, 2)]
                })
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut cumulative = Vec::with_capacity(logits.len());
            let mut acc = 0.0;
            for l in &logits {
                acc += (l - top).exp();
                cumulative.push(acc);
            }
            for _ in 0..n {
                let u01: f64 = rng.random::<f64>() * acc;
                let idx = cumulative.partition_point(|c| *c < u01).min(cumulative.len() - 1);
                let r = grid.cells()[idx].sample_within(&mut rng).matrix();
                out.push(to_frame(&r));
            }
        }
        Ok(out)
    }
}

pub fn fisher_sample(
    params: &MatrixFisherParams,
    norm: &FisherNormalizer,
    rng_seed: u64,
    n: usize,
) -> Result<Vec<Rotation>> {
    params.distribution().sample(norm, rng_seed, n)
}

/// Samples with an explicit RNG (used for ancestral sampling).
pub(crate) fn sample_with_rng<R: Rng + ?Sized>(
    dist: &MatrixFisher,
    norm: &FisherNormalizer,
    rng: &mut R,
) -> Result<Rotation> {
    let seed = rng.random::<u64>();
    Ok(dist.sample(norm, seed, 1)?[0])
}
