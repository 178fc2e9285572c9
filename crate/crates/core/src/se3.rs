//! Rotation and rigid-frame algebra, per-residue frame sets, trajectories,
//! and Kabsch superposition.
//!
//! Rotations are stored as unit quaternions `(w, x, y, z)`; matrices are
//! built on demand.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Angles above `PI - LOG_PI_BRANCH` take the symmetric-matrix axis branch in [`Rotation::log`].
const LOG_PI_BRANCH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub const fn identity() -> Self {
        Self { w: 1.0, x: 0.0, y: 0.0, z: 0.0 }
    }

    /// Builds a rotation from any non-zero quaternion, normalizing it.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n < 1e-300 {
            return Err(Error::InvalidArgument(format!(
                "cannot normalize quaternion ({w}, {x}, {y}, {z})"
            )));
        }
        Ok(Self { w: w / n, x: x / n, y: y / n, z: z / n })
    }

    /// Keeps the stored components when already unit length to 1e-12, so
    /// serialized rotations round-trip bit for bit; normalizes otherwise.
    pub fn from_stored_quaternion(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if (n - 1.0).abs() <= 1e-12 {
            return Ok(Self { w, x, y, z });
        }
        Self::from_quaternion(w, x, y, z)
    }

    /// Wraps a quaternion that is already unit length; renormalizes to absorb rounding.
    pub(crate) fn from_unit_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        Self { w: w / n, x: x / n, y: y / n, z: z / n }
    }

    pub fn quaternion(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn to_matrix(&self) -> Mat3 {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Mat3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Shepperd's method. The input must be a proper rotation matrix.
    pub fn from_matrix(m: &Mat3) -> Self {
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let (w, x, y, z);
        if trace > m[(0, 0)] && trace > m[(1, 1)] && trace > m[(2, 2)] {
            let s = (1.0 + trace).sqrt() * 2.0;
            w = 0.25 * s;
            x = (m[(2, 1)] - m[(1, 2)]) / s;
            y = (m[(0, 2)] - m[(2, 0)]) / s;
            z = (m[(1, 0)] - m[(0, 1)]) / s;
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(2, 1)] - m[(1, 2)]) / s;
            x = 0.25 * s;
            y = (m[(0, 1)] + m[(1, 0)]) / s;
            z = (m[(0, 2)] + m[(2, 0)]) / s;
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(0, 2)] - m[(2, 0)]) / s;
            x = (m[(0, 1)] + m[(1, 0)]) / s;
            y = 0.25 * s;
            z = (m[(1, 2)] + m[(2, 1)]) / s;
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            w = (m[(1, 0)] - m[(0, 1)]) / s;
            x = (m[(0, 2)] + m[(2, 0)]) / s;
            y = (m[(1, 2)] + m[(2, 1)]) / s;
            z = 0.25 * s;
        }
        Self::from_unit_quaternion(w, x, y, z)
    }

    pub fn inverse(&self) -> Self {
        Self { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    pub fn compose(&self, other: &Self) -> Self {
        let (a, b) = (self, other);
        Self::from_unit_quaternion(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        // v + 2w (u x v) + 2 u x (u x v)
        let u = Vec3::new(self.x, self.y, self.z);
        let t = 2.0 * u.cross(v);
        v + self.w * t + u.cross(&t)
    }

    /// Exponential map from an axis-angle vector (radians).
    pub fn exp(v: &Vec3) -> Self {
        let theta = v.norm();
        if theta < 1e-8 {
            let k = 0.5 * (1.0 - theta * theta / 24.0);
            return Self::from_unit_quaternion(1.0 - theta * theta / 8.0, k * v.x, k * v.y, k * v.z);
        }
        let half = 0.5 * theta;
        let k = half.sin() / theta;
        Self::from_unit_quaternion(half.cos(), k * v.x, k * v.y, k * v.z)
    }

    /// Logarithm map to an axis-angle vector with angle in `[0, PI]`.
    ///
    /// Within `1e-6` of `PI` the axis is read from the symmetric part of the
    /// matrix form; the map is discontinuous at `PI` (antipodal axes coincide).
    pub fn log(&self) -> Vec3 {
        let (w, u) = if self.w < 0.0 {
            (-self.w, Vec3::new(-self.x, -self.y, -self.z))
        } else {
            (self.w, Vec3::new(self.x, self.y, self.z))
        };
        let s = u.norm();
        let theta = 2.0 * s.atan2(w);
        if theta > PI - LOG_PI_BRANCH {
            let m = self.to_matrix();
            let sym = (m + m.transpose()) * 0.5;
            let c = theta.cos();
            // sym = cos(t) I + (1 - cos(t)) n n^T
            let nn = (sym - Mat3::identity() * c) / (1.0 - c);
            let mut best = 0;
            for k in 1..3 {
                if nn[(k, k)] > nn[(best, best)] {
                    best = k;
                }
            }
            let mut axis: Vec3 = nn.column(best).into_owned();
            axis /= axis.norm();
            if axis.dot(&u) < 0.0 {
                axis = -axis;
            }
            return axis * theta;
        }
        if s < 1e-12 {
            return u * (2.0 / w);
        }
        u * (theta / s)
    }

    pub fn angle(&self) -> f64 {
        let s = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        2.0 * s.atan2(self.w.abs())
    }

    /// Haar-uniform random rotation.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        loop {
            let q: [f64; 4] = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            if let Ok(r) = Self::from_quaternion(q[0], q[1], q[2], q[3]) {
                return r;
            }
        }
    }

    /// Geodesic distance (rotation angle of `self^-1 other`).
    pub fn distance(&self, other: &Self) -> f64 {
        self.inverse().compose(other).angle()
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        self.compose(&rhs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidFrame {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl RigidFrame {
    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.apply(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self { rotation: inv, translation: -inv.apply(&self.translation) }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation.apply(p) + self.translation
    }
}

/// One trajectory frame: a rigid frame per residue.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    frames: Vec<RigidFrame>,
}

impl FrameSet {
    pub fn new(frames: Vec<RigidFrame>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a frame set needs at least 2 residues, got {}",
                frames.len()
            )));
        }
        Ok(Self { frames })
    }

    pub fn from_parts(translations: &[Vec3], rotations: &[Rotation]) -> Result<Self> {
        if translations.len() != rotations.len() {
            return Err(Error::ResidueMismatch(translations.len(), rotations.len()));
        }
        Self::new(
            translations
                .iter()
                .zip(rotations)
                .map(|(t, r)| RigidFrame::new(*r, *t))
                .collect(),
        )
    }

    pub fn residue_count(&self) -> usize {
        self.frames.len()
    }

    pub fn frames(&self) -> &[RigidFrame] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [RigidFrame] {
        &mut self.frames
    }

    pub fn translations(&self) -> Vec<Vec3> {
        self.frames.iter().map(|f| f.translation).collect()
    }

    pub fn rotations(&self) -> Vec<Rotation> {
        self.frames.iter().map(|f| f.rotation).collect()
    }

    pub fn centroid(&self) -> Vec3 {
        self.frames.iter().map(|f| f.translation).sum::<Vec3>() / self.frames.len() as f64
    }

    /// Applies `g` on the left of every residue frame.
    pub fn transformed(&self, g: &RigidFrame) -> Self {
        Self { frames: self.frames.iter().map(|f| g.compose(f)).collect() }
    }

    /// Translated so the centroid sits at the origin.
    pub fn centered(&self) -> Self {
        let c = self.centroid();
        let g = RigidFrame::new(Rotation::identity(), -c);
        self.transformed(&g)
    }

    /// Flattened translations `[x0, y0, z0, x1, ...]`.
    pub fn flat_coordinates(&self) -> Vec<f64> {
        self.frames
            .iter()
            .flat_map(|f| [f.translation.x, f.translation.y, f.translation.z])
            .collect()
    }
}

/// Physical time between consecutive frames, in ns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Strides {
    Uniform(f64),
    PerFrame(Vec<f64>),
}

impl Strides {
    pub fn stride(&self, index: usize) -> f64 {
        match self {
            Strides::Uniform(dt) => *dt,
            Strides::PerFrame(v) => v[index],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    frames: Vec<FrameSet>,
    strides: Strides,
}

impl Trajectory {
    pub fn new(frames: Vec<FrameSet>, strides: Strides) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidArgument("empty trajectory".into()));
        }
        let n = frames[0].residue_count();
        if let Some(bad) = frames.iter().find(|f| f.residue_count() != n) {
            return Err(Error::ResidueMismatch(n, bad.residue_count()));
        }
        match &strides {
            Strides::Uniform(dt) => {
                if !(*dt > 0.0) {
                    return Err(Error::InvalidArgument(format!("stride must be positive, got {dt}")));
                }
            }
            Strides::PerFrame(v) => {
                if v.len() + 1 != frames.len() {
                    return Err(Error::InvalidArgument(format!(
                        "{} frames need {} strides, got {}",
                        frames.len(),
                        frames.len() - 1,
                        v.len()
                    )));
                }
                if let Some(dt) = v.iter().find(|dt| !(**dt > 0.0)) {
                    return Err(Error::InvalidArgument(format!("stride must be positive, got {dt}")));
                }
            }
        }
        Ok(Self { frames, strides })
    }

    pub fn uniform(frames: Vec<FrameSet>, stride_ns: f64) -> Result<Self> {
        Self::new(frames, Strides::Uniform(stride_ns))
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn residue_count(&self) -> usize {
        self.frames[0].residue_count()
    }

    pub fn frames(&self) -> &[FrameSet] {
        &self.frames
    }

    pub fn frame(&self, index: usize) -> &FrameSet {
        &self.frames[index]
    }

    pub fn strides(&self) -> &Strides {
        &self.strides
    }

    /// Frames `start, start + step, ...` (`count` of them) with the matching stride.
    pub fn subsample(&self, start: usize, step: usize, count: usize) -> Result<Self> {
        if step == 0 || count == 0 || start + (count - 1) * step >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot take {count} frames from {start} every {step} out of {}",
                self.len()
            )));
        }
        let frames: Vec<FrameSet> =
            (0..count).map(|k| self.frames[start + k * step].clone()).collect();
        let strides = match &self.strides {
            Strides::Uniform(dt) => Strides::Uniform(dt * step as f64),
            Strides::PerFrame(v) => Strides::PerFrame(
                (0..count.saturating_sub(1))
                    .map(|k| v[start + k * step..start + (k + 1) * step].iter().sum())
                    .collect(),
            ),
        };
        Self::new(frames, strides)
    }

    /// Matrix of flattened translations, one row per frame.
    pub fn coordinate_rows(&self) -> Vec<Vec<f64>> {
        self.frames.iter().map(FrameSet::flat_coordinates).collect()
    }

    pub fn transformed(&self, g: &RigidFrame) -> Self {
        Self {
            frames: self.frames.iter().map(|f| f.transformed(g)).collect(),
            strides: self.strides.clone(),
        }
    }
}

/// Optimal rigid superposition of one point set onto another.
#[derive(Debug, Clone, Copy)]
pub struct Superposition {
    /// Maps mobile coordinates onto the reference.
    pub transform: RigidFrame,
    pub rmsd: f64,
    /// Set when the point sets are too small or collinear for a unique
    /// rotation; the transform is then the identity.
    pub degenerate: bool,
}

fn centroid_of(points: &[Vec3]) -> Vec3 {
    points.iter().sum::<Vec3>() / points.len() as f64
}

fn is_degenerate(points: &[Vec3], c: &Vec3) -> bool {
    if points.len() < 3 {
        return true;
    }
    let mut cov = Mat3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigenvalues();
    let mut ev = [eig[0], eig[1], eig[2]];
    ev.sort_by(|a, b| b.total_cmp(a));
    ev[0] <= 0.0 || ev[1] <= 1e-18 * ev[0].max(1.0)
}

fn raw_rmsd(a: &[Vec3], b: &[Vec3]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(p, q)| (p - q).norm_squared()).sum();
    (s / a.len() as f64).sqrt()
}

/// Kabsch superposition of `mobile` onto `reference`.
pub fn superpose(mobile: &[Vec3], reference: &[Vec3]) -> Result<Superposition> {
    if mobile.len() != reference.len() {
        return Err(Error::ResidueMismatch(mobile.len(), reference.len()));
    }
    if mobile.is_empty() {
        return Err(Error::InvalidArgument("empty point set".into()));
    }
    let pc = centroid_of(mobile);
    let qc = centroid_of(reference);
    if is_degenerate(mobile, &pc) || is_degenerate(reference, &qc) {
        return Ok(Superposition {
            transform: RigidFrame::identity(),
            rmsd: raw_rmsd(mobile, reference),
            degenerate: true,
        });
    }
    let mut h = Mat3::zeros();
    for (p, q) in mobile.iter().zip(reference) {
        h += (p - pc) * (q - qc).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let fix = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    let r = v * fix * u.transpose();
    let rotation = Rotation::from_matrix(&r);
    let translation = qc - rotation.apply(&pc);
    let transform = RigidFrame::new(rotation, translation);
    let moved: Vec<Vec3> = mobile.iter().map(|p| transform.apply(p)).collect();
    Ok(Superposition { transform, rmsd: raw_rmsd(&moved, reference), degenerate: false })
}

#[derive(Debug, Clone)]
pub struct AlignedTrajectory {
    pub trajectory: Trajectory,
    pub transform: RigidFrame,
    pub degenerate: bool,
}

/// Superposes the first frame's translations onto `reference` and applies
/// that single transform to every frame.
pub fn kabsch_align(mobile: &Trajectory, reference: &FrameSet) -> Result<AlignedTrajectory> {
    let sup = superpose(&mobile.frame(0).translations(), &reference.translations())?;
    Ok(AlignedTrajectory {
        trajectory: mobile.transformed(&sup.transform),
        transform: sup.transform,
        degenerate: sup.degenerate,
    })
}

/// Root mean squared deviation of translations, in Å.
pub fn rmsd(a: &FrameSet, b: &FrameSet) -> Result<f64> {
    if a.residue_count() != b.residue_count() {
        return Err(Error::ResidueMismatch(a.residue_count(), b.residue_count()));
    }
    Ok(raw_rmsd(&a.translations(), &b.translations()))
}
