//! Poses, rotations, normalization and positional encoding.
//!
//! Orientation is stored as Euler angles `(θz, θx, θy)` composed as intrinsic
//! Z-X-Y: `R = Rz(θz) · Rx(θx) · Ry(θy)`. The camera body frame has `+x`
//! forward, `+y` left and `+z` up, so an SE(2) heading is the yaw `θz`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Unit, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("pose component {index} = {value} is outside [-1, 1]")]
    Unnormalized { index: usize, value: f64 },
    #[error("encoding depth must be at least 1")]
    InvalidDepth,
    #[error("matrix is not a rotation (deviation {0:e})")]
    NotARotation(f64),
    #[error("position {axis} = {value} is outside the scene bounds [{min}, {max}]")]
    OutsideBounds { axis: char, value: f64, min: f64, max: f64 },
    #[error("expected a {expected}-vector, got {got} values")]
    Length { expected: usize, got: usize },
}

/// Pose dimensionality: planar `(x, y, θ)` or full `(x, y, z, θz, θx, θy)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseDim {
    Se2,
    Se3,
}

impl PoseDim {
    pub fn dim(self) -> usize {
        match self {
            PoseDim::Se2 => 3,
            PoseDim::Se3 => 6,
        }
    }

    /// Number of position components in the pose vector.
    pub fn position_dims(self) -> usize {
        match self {
            PoseDim::Se2 => 2,
            PoseDim::Se3 => 3,
        }
    }

    pub fn from_dim(d: usize) -> Option<Self> {
        match d {
            3 => Some(PoseDim::Se2),
            6 => Some(PoseDim::Se3),
            _ => None,
        }
    }

    /// Whether component `i` of the pose vector is an angle.
    pub fn is_angle(self, i: usize) -> bool {
        i >= self.position_dims()
    }
}

/// Wrap an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a - 2.0 * PI * ((a + PI) / (2.0 * PI)).floor();
    if r >= PI {
        r -= 2.0 * PI;
    }
    if r < -PI {
        r += 2.0 * PI;
    }
    r
}

/// Camera pose. SE(2) poses keep `z = θx = θy = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub position: [f64; 3],
    /// `(θz, θx, θy)` in radians, each in `[-π, π)`.
    pub orientation: [f64; 3],
    pub dim: PoseDim,
}

impl Pose {
    pub fn se2(x: f64, y: f64, heading: f64) -> Self {
        Self { position: [x, y, 0.0], orientation: [wrap_angle(heading), 0.0, 0.0], dim: PoseDim::Se2 }
    }

    pub fn se3(position: [f64; 3], theta_z: f64, theta_x: f64, theta_y: f64) -> Self {
        Self {
            position,
            orientation: [wrap_angle(theta_z), wrap_angle(theta_x), wrap_angle(theta_y)],
            dim: PoseDim::Se3,
        }
    }

    /// Full pose from a position and rotation, projected onto `dim`.
    pub fn from_rotation(position: [f64; 3], r: &RotationMatrix, dim: PoseDim) -> Self {
        let (angles, _) = r.to_euler();
        match dim {
            PoseDim::Se2 => Self::se2(position[0], position[1], angles[0]),
            PoseDim::Se3 => Self::se3(position, angles[0], angles[1], angles[2]),
        }
    }

    pub fn heading(&self) -> f64 {
        self.orientation[0]
    }

    pub fn rotation(&self) -> RotationMatrix {
        let [z, x, y] = self.orientation;
        RotationMatrix::from_euler(z, x, y)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        match self.dim {
            PoseDim::Se2 => vec![self.position[0], self.position[1], self.orientation[0]],
            PoseDim::Se3 => {
                let [x, y, z] = self.position;
                let [a, b, c] = self.orientation;
                vec![x, y, z, a, b, c]
            }
        }
    }

    pub fn from_vec(dim: PoseDim, v: &[f64]) -> Result<Self, GeometryError> {
        if v.len() != dim.dim() {
            return Err(GeometryError::Length { expected: dim.dim(), got: v.len() });
        }
        Ok(match dim {
            PoseDim::Se2 => Self::se2(v[0], v[1], v[2]),
            PoseDim::Se3 => Self::se3([v[0], v[1], v[2]], v[3], v[4], v[5]),
        })
    }

    pub fn translation_error(&self, other: &Pose) -> f64 {
        let d: f64 = (0..3).map(|i| (self.position[i] - other.position[i]).powi(2)).sum();
        d.sqrt()
    }

    /// Geodesic rotation error in radians.
    pub fn rotation_error(&self, other: &Pose) -> f64 {
        self.rotation().angle_to(&other.rotation())
    }
}

/// 3×3 rotation matrix (`RᵀR = I`, `det R = 1`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationMatrix(pub Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn rot_z(a: f64) -> Self {
        let (s, c) = a.sin_cos();
        Self(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn rot_x(a: f64) -> Self {
        let (s, c) = a.sin_cos();
        Self(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    pub fn rot_y(a: f64) -> Self {
        let (s, c) = a.sin_cos();
        Self(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    /// `Rz(θz) · Rx(θx) · Ry(θy)`.
    pub fn from_euler(theta_z: f64, theta_x: f64, theta_y: f64) -> Self {
        Self(Self::rot_z(theta_z).0 * Self::rot_x(theta_x).0 * Self::rot_y(theta_y).0)
    }

    /// Inverse of [`from_euler`](Self::from_euler). The flag is set at gimbal
    /// lock (`|cos θx| < 1e-7`), where `θy = 0` is chosen.
    pub fn to_euler(&self) -> ([f64; 3], bool) {
        let m = &self.0;
        let sx = m[(2, 1)].clamp(-1.0, 1.0);
        let theta_x = sx.asin();
        if theta_x.cos().abs() < 1e-7 {
            let theta_z = m[(1, 0)].atan2(m[(0, 0)]);
            return ([wrap_angle(theta_z), theta_x, 0.0], true);
        }
        let theta_z = (-m[(0, 1)]).atan2(m[(1, 1)]);
        let theta_y = (-m[(2, 0)]).atan2(m[(2, 2)]);
        ([wrap_angle(theta_z), wrap_angle(theta_x), wrap_angle(theta_y)], false)
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn mul(&self, other: &Self) -> Self {
        Self(self.0 * other.0)
    }

    /// Largest deviation from `RᵀR = I` and `det R = 1`.
    pub fn deviation(&self) -> f64 {
        let orth = (self.0.transpose() * self.0 - Matrix3::identity()).abs().max();
        orth.max((self.0.determinant() - 1.0).abs())
    }

    pub fn validate(&self, tol: f64) -> Result<(), GeometryError> {
        let d = self.deviation();
        if d.is_finite() && d <= tol {
            Ok(())
        } else {
            Err(GeometryError::NotARotation(d))
        }
    }

    /// Rotation angle of `M = self · otherᵀ`, without validation. Equal to
    /// `acos((tr M − 1) / 2)` clamped to `[0, π]`, evaluated as
    /// `atan2(|vee(M − Mᵀ)| / 2, (tr M − 1) / 2)`: `M` is exactly symmetric when
    /// both sides are the same matrix, so the angle is then exactly 0.
    pub fn angle_to(&self, other: &Self) -> f64 {
        let m = self.0 * other.0.transpose();
        let v = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
        (v.norm() / 2.0).atan2((m.trace() - 1.0) / 2.0)
    }

    /// Rotation about a unit axis (Rodrigues).
    pub fn from_axis_angle(axis: &Unit<Vector3<f64>>, angle: f64) -> Self {
        Self(*nalgebra::Rotation3::from_axis_angle(axis, angle).matrix())
    }
}

/// Geodesic distance `acos((tr(M_pred · M_gtᵀ) − 1) / 2)` in `[0, π]`.
pub fn geodesic_distance(pred: &RotationMatrix, gt: &RotationMatrix) -> Result<f64, GeometryError> {
    pred.validate(1e-6)?;
    gt.validate(1e-6)?;
    Ok(pred.angle_to(gt))
}

/// Rotation drawn uniformly (Haar measure) from the ball of rotations within
/// `max_angle` of the identity: uniform axis, angle density ∝ `1 − cos θ`.
pub fn random_rotation(max_angle: f64, rng: &mut impl Rng) -> RotationMatrix {
    let max_angle = max_angle.clamp(0.0, PI);
    if max_angle == 0.0 {
        return RotationMatrix::identity();
    }
    let axis = loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        if v.norm() > 1e-12 {
            break Unit::new_normalize(v);
        }
    };
    let peak = 1.0 - max_angle.cos();
    let angle = loop {
        let a = rng.random_range(0.0..=max_angle);
        if rng.random::<f64>() * peak <= 1.0 - a.cos() {
            break a;
        }
    };
    RotationMatrix::from_axis_angle(&axis, angle)
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn center(&self) -> [f64; 3] {
        std::array::from_fn(|i| 0.5 * (self.min[i] + self.max[i]))
    }

    pub fn extents(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.max[i] - self.min[i])
    }

    pub fn contains(&self, p: [f64; 3], tol: f64) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - tol && p[i] <= self.max[i] + tol)
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        (0..3).all(|i| other.min[i] >= self.min[i] && other.max[i] <= self.max[i])
    }

    pub fn diagonal(&self) -> f64 {
        self.extents().iter().map(|e| e * e).sum::<f64>().sqrt()
    }

    /// Diagonal of the xy footprint.
    pub fn diagonal_xy(&self) -> f64 {
        let e = self.extents();
        (e[0] * e[0] + e[1] * e[1]).sqrt()
    }
}

/// Map a pose to `[-1, 1]` per component: positions affinely over `bounds`,
/// angles divided by π.
pub fn normalize_pose(pose: &Pose, bounds: &Aabb) -> Result<Vec<f64>, GeometryError> {
    const AXES: [char; 3] = ['x', 'y', 'z'];
    let dim = pose.dim;
    let v = pose.to_vec();
    let mut out = Vec::with_capacity(v.len());
    for (i, &value) in v.iter().enumerate() {
        if dim.is_angle(i) {
            out.push(wrap_angle(value) / PI);
        } else {
            let (lo, hi) = (bounds.min[i], bounds.max[i]);
            if value < lo - 1e-6 || value > hi + 1e-6 {
                return Err(GeometryError::OutsideBounds { axis: AXES[i], value, min: lo, max: hi });
            }
            out.push(2.0 * (value - lo) / (hi - lo) - 1.0);
        }
    }
    Ok(out)
}

/// Inverse of [`normalize_pose`]. Accepts values outside `[-1, 1]`.
pub fn denormalize_pose(normalized: &[f64], dim: PoseDim, bounds: &Aabb) -> Result<Pose, GeometryError> {
    if normalized.len() != dim.dim() {
        return Err(GeometryError::Length { expected: dim.dim(), got: normalized.len() });
    }
    let v: Vec<f64> = normalized
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if dim.is_angle(i) {
                wrap_angle(p * PI)
            } else {
                let (lo, hi) = (bounds.min[i], bounds.max[i]);
                lo + (p + 1.0) * 0.5 * (hi - lo)
            }
        })
        .collect();
    Pose::from_vec(dim, &v)
}

/// Positional-encoded pose `[γ(p₁) ‖ … ‖ γ(p_d) ‖ p]`, length `2dL + d`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPose(pub Vec<f64>);

impl EncodedPose {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The raw normalized pose at the end of the vector.
    pub fn tail(&self, dim: PoseDim) -> &[f64] {
        &self.0[self.0.len() - dim.dim()..]
    }
}

pub fn encoded_len(dim: usize, depth: usize) -> usize {
    2 * dim * depth + dim
}

/// Per scalar `p`: `sin(2⁰πp), cos(2⁰πp), …, sin(2^{L−1}πp), cos(2^{L−1}πp)`;
/// all scalars' encodings are concatenated and the raw pose appended.
pub fn positional_encode(normalized: &[f64], depth: usize) -> Result<EncodedPose, GeometryError> {
    if depth == 0 {
        return Err(GeometryError::InvalidDepth);
    }
    let mut out = Vec::with_capacity(encoded_len(normalized.len(), depth));
    for (index, &p) in normalized.iter().enumerate() {
        if !(p.abs() <= 1.0 + 1e-9) {
            return Err(GeometryError::Unnormalized { index, value: p });
        }
        let mut freq = PI;
        for _ in 0..depth {
            let (s, c) = (freq * p).sin_cos();
            out.push(s);
            out.push(c);
            freq *= 2.0;
        }
    }
    out.extend_from_slice(normalized);
    Ok(EncodedPose(out))
}
