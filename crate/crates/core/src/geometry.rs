//! Points, point clouds and rigid transforms.
//!
//! All coordinates are micrometers. Nothing in this crate converts units.

use nalgebra::{Matrix3, Rotation3, Vector3};
use thiserror::Error;

pub type Point3 = nalgebra::Point3<f64>;

/// Tolerance used when validating rotation matrices.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("rotation is not orthogonal (max |RᵀR - I| = {0:e})")]
    NotOrthogonal(f64),
    #[error("rotation has determinant {0}, expected +1")]
    NotProper(f64),
    #[error("transform has a non-finite entry")]
    NonFiniteTransform,
}

/// Ordered collection of points. Order is meaningful and preserved by every
/// operation that does not explicitly drop points.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self, GeometryError> {
        if let Some(index) = points.iter().position(|p| !is_finite(p)) {
            return Err(GeometryError::NonFinite { index });
        }
        Ok(Self { points })
    }

    /// Wraps points already known to be finite (derived from a valid cloud
    /// by finite arithmetic).
    pub(crate) fn from_trusted(points: Vec<Point3>) -> Self {
        debug_assert!(points.iter().all(is_finite));
        Self { points }
    }

    #[cfg(test)]
    pub(crate) fn from_trusted_unchecked_for_test(points: Vec<Point3>) -> Self {
        Self { points }
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point3> {
        self.points.iter()
    }

    /// Arithmetic mean of the points, `None` for an empty cloud.
    pub fn centroid(&self) -> Option<Point3> {
        centroid(&self.points)
    }

    /// Axis-aligned bounding box as (min, max).
    pub fn bounding_box(&self) -> Option<(Point3, Point3)> {
        bounding_box(&self.points)
    }

    /// Subset of the cloud at the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud::from_trusted(indices.iter().map(|&i| self.points[i]).collect())
    }
}

impl<'a> IntoIterator for &'a PointCloud {
    type Item = &'a Point3;
    type IntoIter = std::slice::Iter<'a, Point3>;
    fn into_iter(self) -> Self::IntoIter {
        self.points.iter()
    }
}

pub(crate) fn is_finite(p: &Point3) -> bool {
    p.x.is_finite() && p.y.is_finite() && p.z.is_finite()
}

pub fn centroid(points: &[Point3]) -> Option<Point3> {
    if points.is_empty() {
        return None;
    }
    let sum = points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords);
    Some(Point3::from(sum / points.len() as f64))
}

pub fn bounding_box(points: &[Point3]) -> Option<(Point3, Point3)> {
    let first = *points.first()?;
    Some(points.iter().fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p))))
}

/// Principal axes of a point set, sorted by decreasing variance.
/// Returns the eigenvalues and the matrix whose columns are the axes.
pub fn principal_axes(points: &[Point3]) -> Option<(Vector3<f64>, Matrix3<f64>)> {
    let c = centroid(points)?;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    cov /= points.len() as f64;
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = Vector3::new(eig.eigenvalues[order[0]], eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    let axes = Matrix3::from_columns(&[
        eig.eigenvectors.column(order[0]).into_owned(),
        eig.eigenvectors.column(order[1]).into_owned(),
        eig.eigenvectors.column(order[2]).into_owned(),
    ]);
    Some((values, axes))
}

/// Proper rigid motion `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    /// Validates that `rotation` is orthogonal with determinant +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFiniteTransform);
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if ortho > ROTATION_TOL {
            return Err(GeometryError::NotOrthogonal(ortho));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::NotProper(det));
        }
        Ok(Self { rotation, translation })
    }

    /// For rotations produced by a construction that is proper by design.
    pub(crate) fn from_parts_trusted(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation }
    }

    /// Rotation by `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let axis = nalgebra::Unit::new_normalize(*axis);
        Self { rotation: Rotation3::from_axis_angle(&axis, angle).into_inner(), translation: Vector3::zeros() }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Rotation angle in radians, in [0, π].
    pub fn angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Frobenius norm of the rotation difference plus Euclidean norm of the
    /// translation difference.
    pub fn distance(&self, other: &RigidTransform) -> f64 {
        (self.rotation - other.rotation).norm() + (self.translation - other.translation).norm()
    }

    /// Row-major 3×4 matrix `[R | t]`.
    pub fn to_rows(&self) -> [[f64; 4]; 3] {
        let mut rows = [[0.0; 4]; 3];
        for (r, row) in rows.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().take(3).enumerate() {
                *v = self.rotation[(r, c)];
            }
            row[3] = self.translation[r];
        }
        rows
    }

    pub fn from_rows(rows: &[[f64; 4]; 3]) -> Result<Self, GeometryError> {
        let rotation = Matrix3::from_fn(|r, c| rows[r][c]);
        let translation = Vector3::new(rows[0][3], rows[1][3], rows[2][3]);
        Self::new(rotation, translation)
    }
}

/// Applies `t` to every point, preserving order.
pub fn apply_transform(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    PointCloud::from_trusted(cloud.iter().map(|p| t.apply(p)).collect())
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

/// Rotation about the z axis, i.e. in the xy plane.
pub fn rotation_xy(angle: f64) -> RigidTransform {
    let (s, c) = angle.sin_cos();
    RigidTransform { rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0), translation: Vector3::zeros() }
}
