//! Rotations, the special Procrustes projection and deterministic SO(3) grids.
//!
//! A [`Rotation`] is stored as a unit quaternion in canonical sign (non-negative
//! scalar part, ties broken by the first non-zero component being positive), so
//! that `q` and `-q` compare and serialize identically.
//!
//! [`So3Grid`] is a layered Hopf-fibration grid: HEALPix pixel centres
//! (`12 * 4^level` equal-area cells on S^2) crossed with `6 * 2^level` evenly
//! spaced fibre angles, giving `72 * 8^level` rotations with equal Haar cells.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::{Arc, OnceLock};

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_GRID_LEVEL: u32 = 4;

const GRID_MAGIC: &[u8; 4] = b"SO3G";
const GRID_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug)]
pub struct Rotation {
    q: UnitQuaternion<f64>,
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation {
            q: UnitQuaternion::identity(),
        }
    }

    /// Builds a rotation from quaternion components in `w, x, y, z` order.
    /// The input is normalized.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Self {
        let raw = Quaternion::new(w, x, y, z);
        let q = if (raw.norm_squared() - 1.0).abs() <= 4.0 * f64::EPSILON {
            UnitQuaternion::new_unchecked(raw)
        } else {
            UnitQuaternion::from_quaternion(raw)
        };
        Self::from_unit_quaternion(q)
    }

    pub fn from_unit_quaternion(q: UnitQuaternion<f64>) -> Self {
        Rotation {
            q: canonical_sign(q),
        }
    }

    /// Converts an orthonormal matrix with positive determinant. No
    /// projection is performed; use [`special_procrustes`] for arbitrary input.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let r = Rotation3::from_matrix_unchecked(*m);
        Self::from_unit_quaternion(UnitQuaternion::from_rotation_matrix(&r))
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::identity();
        }
        let unit = nalgebra::Unit::new_unchecked(axis / n);
        Self::from_unit_quaternion(UnitQuaternion::from_axis_angle(&unit, angle))
    }

    pub fn from_scaled_axis(v: &Vector3<f64>) -> Self {
        Self::from_unit_quaternion(UnitQuaternion::from_scaled_axis(*v))
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::x(), angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::y(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), angle)
    }

    /// Haar-uniform random rotation (normalized Gaussian quaternion).
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        loop {
            let w: f64 = rng.sample(StandardNormal);
            let x: f64 = rng.sample(StandardNormal);
            let y: f64 = rng.sample(StandardNormal);
            let z: f64 = rng.sample(StandardNormal);
            let n2 = w * w + x * x + y * y + z * z;
            if n2 > 1e-12 {
                return Self::from_wxyz(w, x, y, z);
            }
        }
    }

    /// Quaternion components `[w, x, y, z]` in canonical sign.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.q.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn unit_quaternion(&self) -> UnitQuaternion<f64> {
        self.q
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.q.to_rotation_matrix().into_inner()
    }

    pub fn inverse(&self) -> Self {
        Self::from_unit_quaternion(self.q.inverse())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Self::from_unit_quaternion(self.q * other.q)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.q * v
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let [w, x, y, z] = self.wxyz();
        2.0 * (x * x + y * y + z * z).sqrt().atan2(w.abs())
    }

    pub fn scaled_axis(&self) -> Vector3<f64> {
        self.q.scaled_axis()
    }
}

impl PartialEq for Rotation {
    fn eq(&self, other: &Self) -> bool {
        self.wxyz() == other.wxyz()
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        self.compose(&rhs)
    }
}

impl Serialize for Rotation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.wxyz().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Rotation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [w, x, y, z] = <[f64; 4]>::deserialize(d)?;
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n < 1e-12 {
            return Err(serde::de::Error::custom("quaternion must be finite and non-zero"));
        }
        Ok(Rotation::from_wxyz(w, x, y, z))
    }
}

fn canonical_sign(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let c = q.quaternion().coords; // [x, y, z, w]
    let ordered = [c[3], c[0], c[1], c[2]];
    let flip = match ordered.iter().find(|v| **v != 0.0) {
        Some(v) => *v < 0.0,
        None => false,
    };
    if flip {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

/// Geodesic distance in radians, `arccos((tr(A^T B) - 1) / 2)` evaluated in the
/// numerically stable quaternion form.
pub fn geodesic_distance(a: &Rotation, b: &Rotation) -> f64 {
    a.inverse().compose(b).angle()
}

/// Result of projecting a 3x3 matrix onto SO(3), retaining the factors needed to
/// differentiate through the projection.
#[derive(Clone, Debug)]
pub struct ProcrustesFactor {
    pub rotation: Matrix3<f64>,
    u: Matrix3<f64>,
    v: Matrix3<f64>,
    /// Proper singular values: the smallest carries the sign of `det(U V^T)`.
    pub proper_singular_values: Vector3<f64>,
}

impl ProcrustesFactor {
    pub fn new(m: &Matrix3<f64>) -> Result<Self> {
        let (u, s, v) = sorted_svd(m)?;
        let mut v = v;
        let mut s = s;
        if s[0] <= 0.0 || s[1] <= 1e-12 * s[0] {
            return Err(Error::DegenerateInput(format!(
                "matrix rank <= 1 (singular values {:.3e}, {:.3e}, {:.3e})",
                s[0], s[1], s[2]
            )));
        }
        if (u * v.transpose()).determinant() < 0.0 {
            v.column_mut(2).neg_mut();
            s[2] = -s[2];
        }
        Ok(ProcrustesFactor {
            rotation: u * v.transpose(),
            u,
            v,
            proper_singular_values: s,
        })
    }

    /// Pulls a gradient with respect to the projected rotation back to the
    /// input matrix. Pairs of singular values summing to zero (the
    /// non-unique case) contribute nothing.
    pub fn backward(&self, grad_rotation: &Matrix3<f64>) -> Matrix3<f64> {
        let h = self.u.transpose() * grad_rotation * self.v;
        let s = &self.proper_singular_values;
        let mut k = Matrix3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    continue;
                }
                let denom = s[i] + s[j];
                if denom.abs() > 1e-12 {
                    k[(i, j)] = (h[(i, j)] - h[(j, i)]) / denom;
                }
            }
        }
        self.u * k * self.v.transpose()
    }
}

/// SVD with singular values sorted in descending order.
pub(crate) fn sorted_svd(
    m: &Matrix3<f64>,
) -> Result<(Matrix3<f64>, Vector3<f64>, Matrix3<f64>)> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::DegenerateInput("non-finite matrix".into()));
    }
    let svd = m.svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].partial_cmp(&sv[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut us = Matrix3::zeros();
    let mut vs = Matrix3::zeros();
    let mut ss = Vector3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        us.set_column(dst, &u.column(src));
        vs.set_column(dst, &vt.row(src).transpose());
        ss[dst] = sv[src];
    }
    Ok((us, ss, vs))
}

/// `argmax_{R in SO(3)} tr(M^T R)`.
pub fn special_procrustes(m: &Matrix3<f64>) -> Result<Rotation> {
    let f = ProcrustesFactor::new(m)?;
    Ok(Rotation::from_matrix(&f.rotation))
}

/// Geometry of one grid cell in Hopf coordinates, used for within-cell sampling.
#[derive(Clone, Copy, Debug)]
pub struct HopfCell {
    pub z: f64,
    pub phi: f64,
    pub dz: f64,
    pub dphi: f64,
    pub psi: f64,
    pub dpsi: f64,
}

impl HopfCell {
    /// Rotation at the given Hopf coordinates (`z = cos(theta)` on the S^2 base).
    pub fn rotation_at(z: f64, phi: f64, psi: f64) -> Rotation {
        let theta = z.clamp(-1.0, 1.0).acos();
        let (ct, st) = ((theta / 2.0).cos(), (theta / 2.0).sin());
        Rotation::from_wxyz(
            ct * (psi / 2.0).cos(),
            ct * (psi / 2.0).sin(),
            st * (phi + psi / 2.0).cos(),
            st * (phi + psi / 2.0).sin(),
        )
    }

    /// Uniform draw from the equal-area box around the cell centre.
    pub fn sample_within<R: Rng + ?Sized>(&self, rng: &mut R) -> Rotation {
        let z = (self.z + (rng.random::<f64>() - 0.5) * self.dz).clamp(-1.0, 1.0);
        let phi = self.phi + (rng.random::<f64>() - 0.5) * self.dphi;
        let psi = self.psi + (rng.random::<f64>() - 0.5) * self.dpsi;
        Self::rotation_at(z, phi, psi)
    }
}

#[derive(Clone, Debug)]
pub struct So3Grid {
    pub level: u32,
    pub rotations: Vec<Rotation>,
    pub cell_weight: f64,
    cells: Vec<HopfCell>,
}

impl So3Grid {
    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }

    pub fn cells(&self) -> &[HopfCell] {
        &self.cells
    }

    /// Looser analytic bound on the cell radius used by the dispersion check.
    pub fn nominal_cell_radius(level: u32) -> f64 {
        PI / (2.0 * f64::from(1u32 << level))
    }

    /// Memoized grid; concurrent first calls block until one writer finishes.
    pub fn cached(level: u32) -> Result<Arc<So3Grid>> {
        static GRIDS: [OnceLock<Arc<So3Grid>>; 5] = [
            OnceLock::new(),
            OnceLock::new(),
            OnceLock::new(),
            OnceLock::new(),
            OnceLock::new(),
        ];
        if level > MAX_GRID_LEVEL {
            return Err(Error::LevelOutOfRange(level));
        }
        Ok(GRIDS[level as usize]
            .get_or_init(|| Arc::new(build_grid(level).expect("level checked")))
            .clone())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(GRID_MAGIC)?;
        w.write_all(&GRID_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.level.to_le_bytes())?;
        w.write_all(&(self.rotations.len() as u64).to_le_bytes())?;
        for r in &self.rotations {
            for c in r.wxyz() {
                w.write_all(&c.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a grid cache file. The stored rotations must match the grid this
    /// crate builds for the stored level.
    pub fn read_from<R: Read>(mut r: R) -> Result<So3Grid> {
        let mut magic = [0u8; 4];
        let mut u32buf = [0u8; 4];
        let mut u64buf = [0u8; 8];
        let io = |e| Error::Format(format!("grid file: {e}"));
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != GRID_MAGIC {
            return Err(Error::Format("grid file: bad magic".into()));
        }
        r.read_exact(&mut u32buf).map_err(io)?;
        let version = u32::from_le_bytes(u32buf);
        if version != GRID_FORMAT_VERSION {
            return Err(Error::Format(format!("grid file: unsupported version {version}")));
        }
        r.read_exact(&mut u32buf).map_err(io)?;
        let level = u32::from_le_bytes(u32buf);
        r.read_exact(&mut u64buf).map_err(io)?;
        let count = u64::from_le_bytes(u64buf) as usize;
        let reference = build_grid(level)?;
        if count != reference.len() {
            return Err(Error::Format(format!(
                "grid file: count {count} does not match level {level}"
            )));
        }
        let mut rotations = Vec::with_capacity(count);
        let mut f64buf = [0u8; 8];
        for expected in &reference.rotations {
            let mut q = [0.0; 4];
            for c in q.iter_mut() {
                r.read_exact(&mut f64buf).map_err(io)?;
                *c = f64::from_le_bytes(f64buf);
            }
            let rot = Rotation::from_wxyz(q[0], q[1], q[2], q[3]);
            if geodesic_distance(&rot, expected) > 1e-9 {
                return Err(Error::Format("grid file: rotations do not match level".into()));
            }
            rotations.push(rot);
        }
        Ok(So3Grid {
            level,
            rotations,
            cell_weight: reference.cell_weight,
            cells: reference.cells,
        })
    }
}

/// HEALPix ring-scheme pixel centres as `(z, phi, dphi)`.
fn healpix_centers(nside: usize) -> Vec<(f64, f64, f64)> {
    let n = nside as f64;
    let mut out = Vec::with_capacity(12 * nside * nside);
    for ring in 1..4 * nside {
        let (z, count, shift) = if ring < nside {
            let i = ring as f64;
            (1.0 - i * i / (3.0 * n * n), 4 * ring, 0.5)
        } else if ring <= 3 * nside {
            let i = ring as f64;
            let s = ((ring - nside + 1) % 2) as f64;
            (4.0 / 3.0 - 2.0 * i / (3.0 * n), 4 * nside, s / 2.0)
        } else {
            let ip = (4 * nside - ring) as f64;
            (-(1.0 - ip * ip / (3.0 * n * n)), 4 * (4 * nside - ring), 0.5)
        };
        let dphi = 2.0 * PI / count as f64;
        for j in 1..=count {
            out.push((z, dphi * (j as f64 - shift), dphi));
        }
    }
    out
}

pub fn build_grid(level: u32) -> Result<So3Grid> {
    if level > MAX_GRID_LEVEL {
        return Err(Error::LevelOutOfRange(level));
    }
    let nside = 1usize << level;
    let npsi = 6 * nside;
    let pixels = healpix_centers(nside);
    let npix = pixels.len();
    let dpsi = 2.0 * PI / npsi as f64;
    let mut rotations = Vec::with_capacity(npix * npsi);
    let mut cells = Vec::with_capacity(npix * npsi);
    for &(z, phi, dphi) in &pixels {
        let dz = 4.0 * PI / (npix as f64 * dphi);
        for k in 0..npsi {
            let psi = dpsi * (k as f64 + 0.5);
            rotations.push(HopfCell::rotation_at(z, phi, psi));
            cells.push(HopfCell {
                z,
                phi,
                dz,
                dphi,
                psi,
                dpsi,
            });
        }
    }
    let cell_weight = 1.0 / rotations.len() as f64;
    Ok(So3Grid {
        level,
        rotations,
        cell_weight,
        cells,
    })
}
