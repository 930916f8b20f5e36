//! Rigid transforms in SE(3) and closed-form rigid least squares.
//!
//! Composition convention: `a.compose(&b)` applies `b` first, then `a`.

use nalgebra::{Matrix3, Matrix4, Point3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Orthogonality / determinant tolerance for a valid rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

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
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, rejecting non-finite entries and rotations outside
    /// SO(3) by more than [`ROTATION_TOLERANCE`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("transform", "non-finite entry"));
        }
        let t = Self {
            rotation,
            translation,
        };
        if t.orthogonality_error() > ROTATION_TOLERANCE {
            return Err(Error::invalid(
                "rotation",
                format!(
                    "not in SO(3): |RᵀR - I| = {:.3e}, det = {:.12}",
                    t.orthogonality_error(),
                    rotation.determinant()
                ),
            ));
        }
        Ok(t)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation of `angle` radians about `axis` (normalized internally), then translation.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = match Unit::try_new(*axis, 1e-300) {
            Some(axis) => *Rotation3::from_axis_angle(&axis, angle).matrix(),
            None => Matrix3::identity(),
        };
        Self {
            rotation,
            translation,
        }
    }

    /// Exponential map of a twist `(omega, v)`: rotation `exp([omega]x)` and
    /// translation `v` (the first-order SE(3) parameterization used by the
    /// local solver).
    pub fn from_twist(omega: &Vector3<f64>, v: &Vector3<f64>) -> Self {
        Self {
            rotation: *Rotation3::new(*omega).matrix(),
            translation: *v,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self ∘ other`: `other` is applied first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
        .renormalized_if_drifted()
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
        .renormalized_if_drifted()
    }

    /// Max-abs entry of `RᵀR - I`, combined with `|det R - 1|`.
    pub fn orthogonality_error(&self) -> f64 {
        let gram = self.rotation.transpose() * self.rotation - Matrix3::identity();
        let ortho = gram.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        ortho.max((self.rotation.determinant() - 1.0).abs())
    }

    pub fn is_valid(&self) -> bool {
        self.orthogonality_error() <= ROTATION_TOLERANCE
    }

    /// Projects the rotation back onto SO(3) (polar decomposition).
    pub fn reorthonormalized(&self) -> RigidTransform {
        Self {
            rotation: nearest_rotation(&self.rotation),
            translation: self.translation,
        }
    }

    fn renormalized_if_drifted(self) -> Self {
        if self.orthogonality_error() > ROTATION_TOLERANCE {
            self.reorthonormalized()
        } else {
            self
        }
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major 4×4 homogeneous matrix.
    pub fn to_rows(&self) -> [[f64; 4]; 4] {
        let m = self.to_homogeneous();
        let mut rows = [[0.0; 4]; 4];
        for (r, row) in rows.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = m[(r, c)];
            }
        }
        rows
    }

    pub fn from_rows(rows: &[[f64; 4]; 4]) -> Result<Self> {
        let bottom = rows[3];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::invalid(
                "transform",
                format!("last row must be [0, 0, 0, 1], got {bottom:?}"),
            ));
        }
        let rotation = Matrix3::from_fn(|r, c| rows[r][c]);
        let translation = Vector3::new(rows[0][3], rows[1][3], rows[2][3]);
        Self::new(rotation, translation)
    }
}

impl Serialize for RigidTransform {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = <[[f64; 4]; 4]>::deserialize(deserializer)?;
        RigidTransform::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Closest rotation to `m` in the Frobenius sense.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let d = (u * v_t).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t
}

/// Weighted rigid least squares: the `T` minimizing `Σ wᵢ ‖T(srcᵢ) − dstᵢ‖²`,
/// solved by weighted centroid subtraction and SVD of the 3×3
/// cross-covariance with the reflection fix.
///
/// Fails with fewer than three pairs, mismatched lengths, non-positive total
/// weight, or collinear/coincident source geometry.
pub fn fit_rigid(
    src: &[Point3<f64>],
    dst: &[Point3<f64>],
    weights: Option<&[f64]>,
) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} source points vs {} target points",
            src.len(),
            dst.len()
        )));
    }
    if let Some(w) = weights {
        if w.len() != src.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for {} pairs",
                w.len(),
                src.len()
            )));
        }
        if w.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("weights", "must be finite and non-negative"));
        }
    }
    if src.len() < 3 {
        return Err(Error::NotEnoughPoints {
            needed: 3,
            available: src.len(),
        });
    }
    let weight = |i: usize| weights.map_or(1.0, |w| w[i]);
    let total: f64 = (0..src.len()).map(weight).sum();
    if total <= 0.0 {
        return Err(Error::invalid("weights", "total weight is zero"));
    }

    let mut src_mean = Vector3::zeros();
    let mut dst_mean = Vector3::zeros();
    for i in 0..src.len() {
        src_mean += src[i].coords * weight(i);
        dst_mean += dst[i].coords * weight(i);
    }
    src_mean /= total;
    dst_mean /= total;

    let mut cov = Matrix3::zeros();
    for i in 0..src.len() {
        let a = src[i].coords - src_mean;
        let b = dst[i].coords - dst_mean;
        cov += a * b.transpose() * weight(i);
    }

    let svd = cov.svd(true, true);
    let mut sv = svd.singular_values;
    sv.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if sv[0] <= f64::EPSILON || sv[1] <= 1e-12 * sv[0] {
        return Err(Error::Degenerate(
            "correspondences are collinear or coincident".into(),
        ));
    }
    let u = svd.u.expect("svd u");
    let v = svd.v_t.expect("svd v_t").transpose();
    let d = (v * u.transpose()).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let translation = dst_mean - rotation * src_mean;
    Ok(RigidTransform {
        rotation,
        translation,
    }
    .renormalized_if_drifted())
}
