//! PCA-based symmetry-breaking labels for rotationally symmetric objects.
//!
//! Each point gets a scalar in `[-1, 1]`: the dot product of its unit
//! offset from the centroid with the normal of a bisecting plane. The
//! plane normal comes from the principal axes and a reference direction
//! (gripper location at training time, a random perpendicular at
//! inference). The labels are appended to the per-point embeddings.

use crate::error::{Error, Result};
use crate::geometry::{centroid, PointCloud, Vec3};
use crate::mat3::{jacobi_eigen_sym3, Mat3};
use crate::model::FeatureMatrix;
use crate::scalar::Scalar;

/// Per-point symmetry labels, each in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetryLabels<S: Scalar> {
    pub labels: Vec<S>,
}

/// Orthonormal principal axes sorted by descending explained variance.
#[derive(Clone, Debug, PartialEq)]
pub struct PrincipalAxes<S: Scalar> {
    pub axes: [Vec3<S>; 3],
    pub variances: [S; 3],
}

/// Principal component analysis of the centered covariance with a
/// deterministic sign convention: the first component of each axis larger
/// than `1e-12` in magnitude is made positive.
pub fn pca<S: Scalar>(cloud: &PointCloud<S>) -> Result<PrincipalAxes<S>> {
    if cloud.len() < 3 {
        return Err(Error::DegenerateGeometry("pca needs at least three points"));
    }
    let mean = centroid(cloud);
    let inv_n = S::one() / S::from_usize(cloud.len()).unwrap();
    let mut cov: Mat3<S> = [[S::zero(); 3]; 3];
    for p in cloud.iter() {
        let d = p.sub(mean).to_array();
        for r in 0..3 {
            for c in 0..3 {
                cov[r][c] = cov[r][c] + d[r] * d[c] * inv_n;
            }
        }
    }
    if cov.iter().flatten().all(|&x| x.abs() < S::of(1e-24)) {
        return Err(Error::DegenerateGeometry("all points coincident"));
    }
    let (evals, evecs) = jacobi_eigen_sym3(&cov);
    let mut axes = [Vec3::zero(); 3];
    let mut variances = [S::zero(); 3];
    for k in 0..3 {
        let mut axis = Vec3::new(evecs[0][k], evecs[1][k], evecs[2][k]);
        for comp in [axis.x, axis.y, axis.z] {
            if comp.abs() > S::of(1e-12) {
                if comp < S::zero() {
                    axis = axis.scale(-S::one());
                }
                break;
            }
        }
        axes[k] = axis;
        variances[k] = if evals[k] > S::zero() { evals[k] } else { S::zero() };
    }
    Ok(PrincipalAxes { axes, variances })
}

fn clamp_unit<S: Scalar>(x: S) -> S {
    if x > S::one() {
        S::one()
    } else if x < -S::one() {
        -S::one()
    } else {
        x
    }
}

/// Labels as dot products of unit centroid offsets with plane normal `s`.
fn labels_against<S: Scalar>(cloud: &PointCloud<S>, s: Vec3<S>) -> Result<SymmetryLabels<S>> {
    let mean = centroid(cloud);
    let mut labels = Vec::with_capacity(cloud.len());
    for (index, p) in cloud.iter().enumerate() {
        let offset = p.sub(mean);
        let norm = offset.norm();
        if norm < S::of(1e-12) {
            return Err(Error::CentroidCoincidence { index });
        }
        labels.push(clamp_unit(s.dot(offset.scale(S::one() / norm))));
    }
    Ok(SymmetryLabels { labels })
}

/// Gripper labels: the bisecting plane normal is the first principal axis
/// (the axis of actuation through the centroid).
pub fn gripper_labels<S: Scalar>(cloud: &PointCloud<S>) -> Result<SymmetryLabels<S>> {
    let axes = pca(cloud)?;
    labels_against(cloud, axes.axes[0])
}

/// Bottle labels: the rotational symmetry axis is the largest principal
/// component; the plane normal is `normalize(v_rot x reference)`, splitting
/// the bottle into left and right halves.
pub fn bottle_labels<S: Scalar>(
    cloud: &PointCloud<S>,
    reference_dir: Vec3<S>,
) -> Result<SymmetryLabels<S>> {
    let axes = pca(cloud)?;
    let v_rot = axes.axes[0];
    let reference = reference_dir
        .normalized()
        .map_err(|_| Error::DegenerateGeometry("zero reference direction"))?;
    let cross = v_rot.cross(reference);
    let norm = cross.norm();
    if norm < S::of(1e-9) {
        return Err(Error::ParallelReference);
    }
    labels_against(cloud, cross.scale(S::one() / norm))
}

/// Bowl labels: the rotational symmetry axis is the smallest principal
/// component; the plane normal is the reference direction orthogonalized
/// against it, splitting the bowl into near and far halves.
pub fn bowl_labels<S: Scalar>(
    cloud: &PointCloud<S>,
    reference_dir: Vec3<S>,
) -> Result<SymmetryLabels<S>> {
    let axes = pca(cloud)?;
    let v_rot = axes.axes[2];
    let reference = reference_dir
        .normalized()
        .map_err(|_| Error::DegenerateGeometry("zero reference direction"))?;
    let ortho = reference.sub(v_rot.scale(reference.dot(v_rot)));
    let norm = ortho.norm();
    if norm < S::of(1e-9) {
        return Err(Error::ParallelReference);
    }
    labels_against(cloud, ortho.scale(S::one() / norm))
}

/// Appends the labels as a `d+1`-th feature column.
pub fn augment_features<S: Scalar>(
    phi: &FeatureMatrix<S>,
    labels: &SymmetryLabels<S>,
) -> Result<FeatureMatrix<S>> {
    if phi.rows() != labels.labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} feature rows vs {} labels",
            phi.rows(),
            labels.labels.len()
        )));
    }
    let rows: Vec<Vec<S>> = phi
        .iter_rows()
        .zip(&labels.labels)
        .map(|(row, &l)| {
            let mut r = row.to_vec();
            r.push(l);
            r
        })
        .collect();
    FeatureMatrix::from_rows(rows)
}
