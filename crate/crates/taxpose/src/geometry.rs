//! SE(3) transforms, point-cloud primitives, random sampling, and error
//! metrics.

use crate::error::{Error, Result};
use crate::mat3::{self, Mat3};
use crate::scalar::Scalar;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// A 3D point or translation.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3<S: Scalar> {
    pub x: S,
    pub y: S,
    pub z: S,
}

impl<S: Scalar> Vec3<S> {
    pub fn new(x: S, y: S, z: S) -> Self {
        Vec3 { x, y, z }
    }

    pub fn zero() -> Self {
        Vec3::new(S::zero(), S::zero(), S::zero())
    }

    pub fn from_array(a: [S; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [S; 3] {
        [self.x, self.y, self.z]
    }

    pub fn add(self, o: Self) -> Self {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Self) -> Self {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(self, s: S) -> Self {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(self, o: Self) -> S {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Vec3::from_array(mat3::v_cross(self.to_array(), o.to_array()))
    }

    pub fn norm_sq(self) -> S {
        self.dot(self)
    }

    pub fn norm(self) -> S {
        self.norm_sq().sqrt()
    }

    pub fn normalized(self) -> Result<Self> {
        let n = self.norm();
        if n <= S::zero() {
            return Err(Error::DegenerateGeometry("cannot normalize zero vector"));
        }
        Ok(self.scale(S::one() / n))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Validation tolerance for rotation invariants: 1e-9 in 64-bit, scaled by
/// machine epsilon for narrower scalars.
fn rotation_tol<S: Scalar>() -> S {
    let base = S::of(1e-9);
    let scaled = S::epsilon() * S::of(100.0);
    if scaled > base {
        scaled
    } else {
        base
    }
}

/// A proper rotation: orthonormal with determinant +1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationMatrix<S: Scalar> {
    m: Mat3<S>,
}

impl<S: Scalar> RotationMatrix<S> {
    pub fn identity() -> Self {
        RotationMatrix {
            m: mat3::m_identity(()),
        }
    }

    /// Validates orthonormality and `det = +1` before accepting the matrix.
    pub fn from_matrix(m: Mat3<S>) -> Result<Self> {
        let tol = rotation_tol::<S>();
        let rtr = mat3::m_mul(&mat3::m_transpose(&m), &m);
        let eye: Mat3<S> = mat3::m_identity(());
        let mut err = S::zero();
        for r in 0..3 {
            for c in 0..3 {
                if !m[r][c].is_finite() {
                    return Err(Error::NonFinite("rotation matrix"));
                }
                let d = (rtr[r][c] - eye[r][c]).abs();
                if d > err {
                    err = d;
                }
            }
        }
        if err > tol {
            return Err(Error::invalid(
                "rotation matrix",
                format!("R^T R deviates from identity by {:e}", err.to_f64_lossy()),
            ));
        }
        let det = mat3::m_det(&m);
        if (det - S::one()).abs() > tol {
            return Err(Error::invalid(
                "rotation matrix",
                format!("det = {det}, expected +1"),
            ));
        }
        Ok(RotationMatrix { m })
    }

    /// For internally constructed matrices known to be proper rotations.
    pub(crate) fn from_matrix_unchecked(m: Mat3<S>) -> Self {
        RotationMatrix { m }
    }

    /// Rodrigues formula; the axis need not be normalized.
    pub fn from_axis_angle(axis: Vec3<S>, angle: S) -> Result<Self> {
        let a = axis.normalized()?.to_array();
        let c = angle.cos();
        let s = angle.sin();
        let t = S::one() - c;
        let (x, y, z) = (a[0], a[1], a[2]);
        let m = [
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ];
        Ok(RotationMatrix { m })
    }

    pub fn matrix(&self) -> &Mat3<S> {
        &self.m
    }

    pub fn transpose(&self) -> Self {
        RotationMatrix {
            m: mat3::m_transpose(&self.m),
        }
    }

    pub fn mul(&self, o: &Self) -> Self {
        RotationMatrix {
            m: mat3::m_mul(&self.m, &o.m),
        }
    }

    pub fn mul_vec(&self, v: Vec3<S>) -> Vec3<S> {
        Vec3::from_array(mat3::m_mul_vec(&self.m, v.to_array()))
    }

    pub fn det(&self) -> S {
        mat3::m_det(&self.m)
    }

    /// Frobenius norm of the difference, used by the equivariance audit.
    pub fn frobenius_distance(&self, o: &Self) -> S {
        let mut acc = S::zero();
        for r in 0..3 {
            for c in 0..3 {
                let d = self.m[r][c] - o.m[r][c];
                acc = acc + d * d;
            }
        }
        acc.sqrt()
    }
}

impl<S: Scalar + Serialize> Serialize for RotationMatrix<S> {
    fn serialize<Ser: serde::Serializer>(&self, s: Ser) -> std::result::Result<Ser::Ok, Ser::Error> {
        self.m.serialize(s)
    }
}

impl<'de, S: Scalar + Deserialize<'de>> Deserialize<'de> for RotationMatrix<S> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = Mat3::<S>::deserialize(d)?;
        RotationMatrix::from_matrix(m).map_err(serde::de::Error::custom)
    }
}

/// An SE(3) element: rotation followed by translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform<S: Scalar> {
    pub rotation: RotationMatrix<S>,
    pub translation: Vec3<S>,
}

impl<S: Scalar> RigidTransform<S> {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: RotationMatrix::identity(),
            translation: Vec3::zero(),
        }
    }

    pub fn new(rotation: RotationMatrix<S>, translation: Vec3<S>) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vec3<S>) -> Self {
        RigidTransform {
            rotation: RotationMatrix::identity(),
            translation: t,
        }
    }

    /// `result` applies `b` first, then `a`: `result * p = a * (b * p)`.
    pub fn compose(&self, b: &Self) -> Self {
        RigidTransform {
            rotation: self.rotation.mul(&b.rotation),
            translation: self.rotation.mul_vec(b.translation).add(self.translation),
        }
    }

    /// Inverse rotation is `R^T`, inverse translation is `-R^T t`.
    pub fn invert(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidTransform {
            translation: rt.mul_vec(self.translation).scale(-S::one()),
            rotation: rt,
        }
    }

    pub fn apply_point(&self, p: Vec3<S>) -> Vec3<S> {
        self.rotation.mul_vec(p).add(self.translation)
    }

    /// `T^-1 p` computed directly as `R^T (p - t)`, without forming the
    /// inverse transform.
    pub fn apply_inverse_point(&self, p: Vec3<S>) -> Vec3<S> {
        Vec3::from_array(mat3::m_tmul_vec(
            self.rotation.matrix(),
            p.sub(self.translation).to_array(),
        ))
    }

    /// Pointwise `R p + t`, preserving order and length.
    pub fn apply(&self, cloud: &PointCloud<S>) -> PointCloud<S> {
        PointCloud::from_vec_unchecked(
            cloud.points().iter().map(|&p| self.apply_point(p)).collect(),
        )
    }

    /// Pointwise `R^T (p - t)`.
    pub fn apply_inverse(&self, cloud: &PointCloud<S>) -> PointCloud<S> {
        PointCloud::from_vec_unchecked(
            cloud
                .points()
                .iter()
                .map(|&p| self.apply_inverse_point(p))
                .collect(),
        )
    }
}

/// An ordered, non-empty list of 3D points for one segmented object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud<S: Scalar> {
    points: Vec<Vec3<S>>,
}

impl<S: Scalar> PointCloud<S> {
    pub fn new(points: Vec<Vec3<S>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud", "must contain at least one point"));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("point cloud"));
        }
        Ok(PointCloud { points })
    }

    pub(crate) fn from_vec_unchecked(points: Vec<Vec3<S>>) -> Self {
        debug_assert!(!points.is_empty());
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3<S>] {
        &self.points
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Vec3<S>> {
        self.points.iter()
    }

    /// Largest pairwise distance; used to scale translations and thresholds.
    pub fn diameter(&self) -> S {
        let mut best = S::zero();
        for (i, a) in self.points.iter().enumerate() {
            for b in &self.points[i + 1..] {
                let d = a.sub(*b).norm();
                if d > best {
                    best = d;
                }
            }
        }
        best
    }
}

/// Mean of the points.
pub fn centroid<S: Scalar>(cloud: &PointCloud<S>) -> Vec3<S> {
    let mut acc = Vec3::zero();
    for p in cloud.iter() {
        acc = acc.add(*p);
    }
    acc.scale(S::one() / S::from_usize(cloud.len()).expect("cloud size fits scalar"))
}

/// Returns the zero-mean cloud plus the removed mean.
pub fn center<S: Scalar>(cloud: &PointCloud<S>) -> (PointCloud<S>, Vec3<S>) {
    let mean = centroid(cloud);
    let centered = cloud.iter().map(|p| p.sub(mean)).collect();
    (PointCloud::from_vec_unchecked(centered), mean)
}

/// Uniformly distributed rotation via a normalized 4D Gaussian quaternion.
///
/// Sampling happens in f64 and is cast afterwards, so a given seed yields
/// the same rotation (up to rounding) for every scalar type.
pub fn random_rotation<S: Scalar, R: Rng + ?Sized>(rng: &mut R) -> RotationMatrix<S> {
    loop {
        let q: [f64; 4] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if n < 1e-6 {
            continue;
        }
        let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        let m = [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ];
        let mut out = [[S::zero(); 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                out[r][c] = S::of(m[r][c]);
            }
        }
        return RotationMatrix::from_matrix_unchecked(out);
    }
}

/// Geodesic SO(3) error: `E_R = arccos((tr(pred^T gt) - 1) / 2) / 2`.
///
/// The halving is part of the metric definition here and is kept as is.
/// The arccos argument is clamped to `[-1, 1]` against rounding overshoot.
pub fn rotation_geodesic_error<S: Scalar>(
    pred: &RotationMatrix<S>,
    gt: &RotationMatrix<S>,
) -> S {
    let prod = mat3::m_mul(&mat3::m_transpose(pred.matrix()), gt.matrix());
    let tr = mat3::m_trace(&prod);
    let mut cosine = (tr - S::one()) / S::of(2.0);
    if cosine > S::one() {
        cosine = S::one();
    }
    if cosine < -S::one() {
        cosine = -S::one();
    }
    cosine.acos() / S::of(2.0)
}

/// Euclidean distance between two translations.
pub fn translation_error<S: Scalar>(pred: Vec3<S>, gt: Vec3<S>) -> S {
    pred.sub(gt).norm()
}

/// Full (unhalved) rotation angle between two rotations, computed from the
/// Frobenius distance: `||R1 - R2||_F = 2 sqrt(2) sin(theta / 2)`.
///
/// Unlike the arccos trace form, this keeps full precision for small
/// angles, so it is the right tool for exactness assertions.
pub fn rotation_angle_between<S: Scalar>(a: &RotationMatrix<S>, b: &RotationMatrix<S>) -> S {
    let frob = a.frobenius_distance(b);
    let mut half_sin = frob / (S::of(2.0) * S::of(2.0).sqrt());
    if half_sin > S::one() {
        half_sin = S::one();
    }
    S::of(2.0) * half_sin.asin()
}
