//! Weighted, bidirectional Procrustes solver.
//!
//! Solves for the single rigid transform `T` minimizing
//!
//! ```text
//! J(T) = sum_i wa_i ||T pa_i - va_i||^2  +  sum_j wb_j ||T^-1 pb_j - vb_j||^2
//! ```
//!
//! Because `T` is rigid the second term equals `||pb_j - T vb_j||^2`, so both
//! sides stack into one weighted alignment problem with sources `{pa, vb}`
//! and targets `{va, pb}`. Each group is centered with respect to its
//! weights, the rotation comes from the SVD of the weighted cross-covariance
//! with the reflection fix `diag(1, 1, det(UV^T))`, and the per-side
//! translations are mixed by point counts.
//!
//! The solve is written against [`Real`], so running it on tape variables
//! yields gradients with respect to every point and weight.

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform, RotationMatrix, Vec3};
use crate::mat3::{self, Mat3, V3};
use crate::scalar::{Real, Scalar};

/// Relative threshold: the rotation is ambiguous when the second singular
/// value of the weighted cross-covariance falls below this fraction of the
/// first.
const RANK_RATIO: f64 = 1e-12;

/// Dense correspondences for both objects plus importance weights.
///
/// `target_a` holds the goal positions for `source_a`'s points under `T`;
/// `target_b` holds the goal positions for `source_b`'s points under `T^-1`.
#[derive(Clone, Debug)]
pub struct CorrespondenceSet<S: Scalar> {
    pub source_a: PointCloud<S>,
    pub target_a: PointCloud<S>,
    pub source_b: PointCloud<S>,
    pub target_b: PointCloud<S>,
    pub weights_a: Vec<S>,
    pub weights_b: Vec<S>,
}

impl<S: Scalar> CorrespondenceSet<S> {
    pub fn new(
        source_a: PointCloud<S>,
        target_a: PointCloud<S>,
        source_b: PointCloud<S>,
        target_b: PointCloud<S>,
        weights_a: Vec<S>,
        weights_b: Vec<S>,
    ) -> Result<Self> {
        if source_a.len() != target_a.len() || source_a.len() != weights_a.len() {
            return Err(Error::LengthMismatch(format!(
                "side A: {} sources, {} targets, {} weights",
                source_a.len(),
                target_a.len(),
                weights_a.len()
            )));
        }
        if source_b.len() != target_b.len() || source_b.len() != weights_b.len() {
            return Err(Error::LengthMismatch(format!(
                "side B: {} sources, {} targets, {} weights",
                source_b.len(),
                target_b.len(),
                weights_b.len()
            )));
        }
        for w in weights_a.iter().chain(&weights_b) {
            if !w.is_finite() || *w < S::zero() {
                return Err(Error::invalid("weights", "must be finite and non-negative"));
            }
        }
        let sum = |ws: &[S]| ws.iter().fold(S::zero(), |a, w| a + *w);
        if !(sum(&weights_a) > S::zero()) || !(sum(&weights_b) > S::zero()) {
            return Err(Error::invalid("weights", "each side must have positive sum"));
        }
        Ok(CorrespondenceSet {
            source_a,
            target_a,
            source_b,
            target_b,
            weights_a,
            weights_b,
        })
    }

    /// Uniform weights `1/N` on both sides.
    pub fn with_uniform_weights(
        source_a: PointCloud<S>,
        target_a: PointCloud<S>,
        source_b: PointCloud<S>,
        target_b: PointCloud<S>,
    ) -> Result<Self> {
        let wa = vec![S::one() / S::from_usize(source_a.len()).unwrap(); source_a.len()];
        let wb = vec![S::one() / S::from_usize(source_b.len()).unwrap(); source_b.len()];
        Self::new(source_a, target_a, source_b, target_b, wa, wb)
    }
}

/// Full SVD of a 3x3 matrix with descending singular values.
#[derive(Clone, Copy, Debug)]
pub struct Svd3Result<S: Scalar> {
    pub u: Mat3<S>,
    pub sigma: [S; 3],
    pub v: Mat3<S>,
}

/// Full 3x3 SVD: `m = u * diag(sigma) * v^T`, sigma descending.
pub fn svd3<S: Scalar>(m: &Mat3<S>) -> Svd3Result<S> {
    let parts = mat3::svd3_values(m);
    Svd3Result {
        u: parts.u,
        sigma: parts.sigma,
        v: parts.v,
    }
}

/// Result of a Procrustes solve.
#[derive(Clone, Copy, Debug)]
pub struct ProcrustesSolution<S: Scalar> {
    pub transform: RigidTransform<S>,
    /// Value of the bidirectional weighted objective at the solution.
    pub objective: S,
    /// True when the weighted cross-covariance was near-singular (rank 2).
    pub rank_flag: bool,
}

/// Borrowed generic view of a correspondence problem.
pub struct CorrView<'a, T> {
    pub source_a: &'a [V3<T>],
    pub target_a: &'a [V3<T>],
    pub source_b: &'a [V3<T>],
    pub target_b: &'a [V3<T>],
    pub weights_a: &'a [T],
    pub weights_b: &'a [T],
}

/// Rotation, translation and objective in generic scalar form.
pub struct SolutionParts<T> {
    pub rotation: Mat3<T>,
    pub translation: V3<T>,
    pub objective: T,
    pub rank_flag: bool,
}

fn weighted_mean<T: Real>(ctx: T::Ctx, points: &[V3<T>], weights: &[T], wsum: T) -> V3<T> {
    let mut acc = [T::lit(ctx, 0.0); 3];
    for k in 0..3 {
        let col: Vec<T> = points.iter().map(|p| p[k]).collect();
        acc[k] = T::dot(ctx, &col, weights) / wsum;
    }
    acc
}

/// `h += sum_i w_i * (dst_i - m_dst)(src_i - m_src)^T`
fn accumulate_covariance<T: Real>(
    ctx: T::Ctx,
    h: &mut Mat3<T>,
    src: &[V3<T>],
    dst: &[V3<T>],
    weights: &[T],
    m_src: V3<T>,
    m_dst: V3<T>,
) {
    for r in 0..3 {
        let wd: Vec<T> = dst
            .iter()
            .zip(weights)
            .map(|(d, w)| (d[r] - m_dst[r]) * *w)
            .collect();
        for c in 0..3 {
            let s: Vec<T> = src.iter().map(|p| p[c] - m_src[c]).collect();
            h[r][c] = h[r][c] + T::dot(ctx, &wd, &s);
        }
    }
}

fn objective_at<T: Real>(ctx: T::Ctx, c: &CorrView<'_, T>, rot: &Mat3<T>, t: V3<T>) -> T {
    let mut terms: Vec<T> = Vec::with_capacity(c.source_a.len() + c.source_b.len());
    for ((p, v), w) in c.source_a.iter().zip(c.target_a).zip(c.weights_a) {
        let moved = mat3::v_add(mat3::m_mul_vec(rot, *p), t);
        terms.push(*w * mat3::v_norm_sq(mat3::v_sub(moved, *v)));
    }
    for ((p, v), w) in c.source_b.iter().zip(c.target_b).zip(c.weights_b) {
        let back = mat3::m_tmul_vec(rot, mat3::v_sub(*p, t));
        terms.push(*w * mat3::v_norm_sq(mat3::v_sub(back, *v)));
    }
    T::sum(ctx, &terms)
}

/// Count-based translation mixing `t = (Na/N) t_a + (Nb/N) t_b`.
fn mix_translations<T: Real>(ctx: T::Ctx, t_a: V3<T>, t_b: V3<T>, na: usize, nb: usize) -> V3<T> {
    let n = (na + nb) as f64;
    let ca = T::lit(ctx, na as f64 / n);
    let cb = T::lit(ctx, nb as f64 / n);
    mat3::v_add(mat3::v_scale(ca, t_a), mat3::v_scale(cb, t_b))
}

/// Generic weighted solve; see the module docs for the construction.
pub fn solve_weighted_parts<T: Real>(ctx: T::Ctx, c: &CorrView<'_, T>) -> Result<SolutionParts<T>> {
    let sum_a = T::sum(ctx, c.weights_a);
    let sum_b = T::sum(ctx, c.weights_b);

    // Stacked problem: sources {source_a, target_b}, targets {target_a, source_b}.
    let m_src_a = weighted_mean(ctx, c.source_a, c.weights_a, sum_a);
    let m_dst_a = weighted_mean(ctx, c.target_a, c.weights_a, sum_a);
    let m_src_b = weighted_mean(ctx, c.target_b, c.weights_b, sum_b);
    let m_dst_b = weighted_mean(ctx, c.source_b, c.weights_b, sum_b);

    let zero = T::lit(ctx, 0.0);
    let mut h: Mat3<T> = [[zero; 3]; 3];
    accumulate_covariance(ctx, &mut h, c.source_a, c.target_a, c.weights_a, m_src_a, m_dst_a);
    accumulate_covariance(ctx, &mut h, c.target_b, c.source_b, c.weights_b, m_src_b, m_dst_b);

    let svd = T::svd3(ctx, &h)?;
    let s0 = svd.sigma[0].value();
    let s1 = svd.sigma[1].value();
    let s2 = svd.sigma[2].value();
    let ratio = <T::Repr as Scalar>::of(RANK_RATIO);
    let zero_repr = <T::Repr as num_traits::Zero>::zero();
    if !(s0 > zero_repr) || s1 < ratio * s0 {
        return Err(Error::DegenerateCorrespondences);
    }
    let rank_flag = s2 < ratio * s0;

    // R = U * diag(1, 1, det(UV^T)) * V^T; det(R) = +1 by construction.
    let det = mat3::m_det(&svd.u) * mat3::m_det(&svd.v);
    let mut u_fixed = svd.u;
    for r in 0..3 {
        u_fixed[r][2] = u_fixed[r][2] * det;
    }
    let rotation = mat3::m_mul(&u_fixed, &mat3::m_transpose(&svd.v));

    let t_a = mat3::v_sub(m_dst_a, mat3::m_mul_vec(&rotation, m_src_a));
    let t_b = mat3::v_sub(m_dst_b, mat3::m_mul_vec(&rotation, m_src_b));
    let translation = mix_translations(ctx, t_a, t_b, c.source_a.len(), c.source_b.len());

    let objective = objective_at(ctx, c, &rotation, translation);
    Ok(SolutionParts {
        rotation,
        translation,
        objective,
        rank_flag,
    })
}

/// Generic translation-only solve: the rotation is pinned to identity.
pub fn solve_translation_only_parts<T: Real>(ctx: T::Ctx, c: &CorrView<'_, T>) -> SolutionParts<T> {
    let sum_a = T::sum(ctx, c.weights_a);
    let sum_b = T::sum(ctx, c.weights_b);
    let t_a = mat3::v_sub(
        weighted_mean(ctx, c.target_a, c.weights_a, sum_a),
        weighted_mean(ctx, c.source_a, c.weights_a, sum_a),
    );
    let t_b = mat3::v_sub(
        weighted_mean(ctx, c.source_b, c.weights_b, sum_b),
        weighted_mean(ctx, c.target_b, c.weights_b, sum_b),
    );
    let translation = mix_translations(ctx, t_a, t_b, c.source_a.len(), c.source_b.len());
    let rotation = mat3::m_identity::<T>(ctx);
    let objective = objective_at(ctx, c, &rotation, translation);
    SolutionParts {
        rotation,
        translation,
        objective,
        rank_flag: false,
    }
}

fn cloud_to_arrays<S: Scalar>(cloud: &PointCloud<S>) -> Vec<V3<S>> {
    cloud.iter().map(|p| p.to_array()).collect()
}

fn solution_from_parts<S: Scalar>(parts: SolutionParts<S>) -> ProcrustesSolution<S> {
    let rotation = RotationMatrix::from_matrix_unchecked(parts.rotation);
    debug_assert!(
        RotationMatrix::from_matrix(*rotation.matrix()).is_ok(),
        "solver produced an invalid rotation"
    );
    ProcrustesSolution {
        transform: RigidTransform::new(rotation, Vec3::from_array(parts.translation)),
        objective: parts.objective,
        rank_flag: parts.rank_flag,
    }
}

/// Solves the bidirectional weighted alignment problem.
///
/// Errors with [`Error::DegenerateCorrespondences`] when the weighted
/// cross-covariance has rank < 2; never returns a reflection.
pub fn solve_weighted<S: Scalar>(c: &CorrespondenceSet<S>) -> Result<ProcrustesSolution<S>> {
    let sa = cloud_to_arrays(&c.source_a);
    let ta = cloud_to_arrays(&c.target_a);
    let sb = cloud_to_arrays(&c.source_b);
    let tb = cloud_to_arrays(&c.target_b);
    let view = CorrView {
        source_a: &sa,
        target_a: &ta,
        source_b: &sb,
        target_b: &tb,
        weights_a: &c.weights_a,
        weights_b: &c.weights_b,
    };
    solve_weighted_parts::<S>((), &view).map(solution_from_parts)
}

/// Optimal translation with the rotation pinned to identity.
pub fn solve_translation_only<S: Scalar>(c: &CorrespondenceSet<S>) -> ProcrustesSolution<S> {
    let sa = cloud_to_arrays(&c.source_a);
    let ta = cloud_to_arrays(&c.target_a);
    let sb = cloud_to_arrays(&c.source_b);
    let tb = cloud_to_arrays(&c.target_b);
    let view = CorrView {
        source_a: &sa,
        target_a: &ta,
        source_b: &sb,
        target_b: &tb,
        weights_a: &c.weights_a,
        weights_b: &c.weights_b,
    };
    solution_from_parts(solve_translation_only_parts::<S>((), &view))
}

/// Upstream gradient of a scalar loss with respect to the transform.
#[derive(Clone, Copy, Debug)]
pub struct TransformGradient<S: Scalar> {
    pub rotation: Mat3<S>,
    pub translation: [S; 3],
}

/// Gradients of a scalar loss with respect to every solver input.
#[derive(Clone, Debug)]
pub struct CorrespondenceGradients<S: Scalar> {
    pub source_a: Vec<[S; 3]>,
    pub target_a: Vec<[S; 3]>,
    pub source_b: Vec<[S; 3]>,
    pub target_b: Vec<[S; 3]>,
    pub weights_a: Vec<S>,
    pub weights_b: Vec<S>,
}

enum GradMode {
    Weighted,
    TranslationOnly,
}

fn gradient_impl<S: Scalar>(
    c: &CorrespondenceSet<S>,
    upstream: &TransformGradient<S>,
    mode: GradMode,
) -> Result<CorrespondenceGradients<S>> {
    use crate::autodiff::{Tape, Var};

    let tape = Tape::<S>::new();
    let lift_cloud = |cloud: &PointCloud<S>| -> Vec<V3<Var<'_, S>>> {
        cloud
            .iter()
            .map(|p| [tape.leaf(p.x), tape.leaf(p.y), tape.leaf(p.z)])
            .collect()
    };
    let sa = lift_cloud(&c.source_a);
    let ta = lift_cloud(&c.target_a);
    let sb = lift_cloud(&c.source_b);
    let tb = lift_cloud(&c.target_b);
    let wa: Vec<Var<'_, S>> = c.weights_a.iter().map(|&w| tape.leaf(w)).collect();
    let wb: Vec<Var<'_, S>> = c.weights_b.iter().map(|&w| tape.leaf(w)).collect();

    let view = CorrView {
        source_a: &sa,
        target_a: &ta,
        source_b: &sb,
        target_b: &tb,
        weights_a: &wa,
        weights_b: &wb,
    };
    let parts = match mode {
        GradMode::Weighted => solve_weighted_parts::<Var<'_, S>>(&tape, &view)?,
        GradMode::TranslationOnly => solve_translation_only_parts::<Var<'_, S>>(&tape, &view),
    };

    let mut seeds = Vec::with_capacity(12);
    for r in 0..3 {
        for col in 0..3 {
            seeds.push((parts.rotation[r][col], upstream.rotation[r][col]));
        }
    }
    for k in 0..3 {
        seeds.push((parts.translation[k], upstream.translation[k]));
    }
    let grads = tape.backward_seeded(&seeds);

    let grad_cloud = |vars: &[V3<Var<'_, S>>]| -> Vec<[S; 3]> {
        vars.iter()
            .map(|p| [grads.get(p[0]), grads.get(p[1]), grads.get(p[2])])
            .collect()
    };
    Ok(CorrespondenceGradients {
        source_a: grad_cloud(&sa),
        target_a: grad_cloud(&ta),
        source_b: grad_cloud(&sb),
        target_b: grad_cloud(&tb),
        weights_a: wa.iter().map(|&v| grads.get(v)).collect(),
        weights_b: wb.iter().map(|&v| grads.get(v)).collect(),
    })
}

/// Gradients of `sum(upstream .* transform)` through the weighted solve,
/// with respect to all points and weights.
///
/// Errors with [`Error::NearDegenerateSpectrum`] when squared singular
/// values of the cross-covariance are too close for the SVD differential;
/// callers may retry with jittered inputs.
pub fn procrustes_gradient<S: Scalar>(
    c: &CorrespondenceSet<S>,
    upstream: &TransformGradient<S>,
) -> Result<CorrespondenceGradients<S>> {
    gradient_impl(c, upstream, GradMode::Weighted)
}

/// Gradient of the translation-only solve.
pub fn translation_only_gradient<S: Scalar>(
    c: &CorrespondenceSet<S>,
    upstream: &TransformGradient<S>,
) -> CorrespondenceGradients<S> {
    gradient_impl(c, upstream, GradMode::TranslationOnly)
        .expect("translation-only path has no SVD")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{self, random_rotation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud<f64> {
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform<f64> {
        RigidTransform::new(
            random_rotation(rng),
            Vec3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ),
        )
    }

    fn random_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(0.5..1.5)).collect()
    }

    /// Independent evaluation of the bidirectional objective at an
    /// arbitrary linear map (rows) + translation. Used as the oracle.
    fn objective_oracle(
        c: &CorrespondenceSet<f64>,
        rot: &Mat3<f64>,
        t: [f64; 3],
    ) -> f64 {
        let mut acc = 0.0;
        for ((p, v), w) in c.source_a.iter().zip(c.target_a.iter()).zip(&c.weights_a) {
            let p = p.to_array();
            let moved = [
                rot[0][0] * p[0] + rot[0][1] * p[1] + rot[0][2] * p[2] + t[0],
                rot[1][0] * p[0] + rot[1][1] * p[1] + rot[1][2] * p[2] + t[1],
                rot[2][0] * p[0] + rot[2][1] * p[1] + rot[2][2] * p[2] + t[2],
            ];
            let v = v.to_array();
            acc += w
                * ((moved[0] - v[0]).powi(2)
                    + (moved[1] - v[1]).powi(2)
                    + (moved[2] - v[2]).powi(2));
        }
        // inverse of an orthogonal map is its transpose
        for ((p, v), w) in c.source_b.iter().zip(c.target_b.iter()).zip(&c.weights_b) {
            let d = [p.x - t[0], p.y - t[1], p.z - t[2]];
            let back = [
                rot[0][0] * d[0] + rot[1][0] * d[1] + rot[2][0] * d[2],
                rot[0][1] * d[0] + rot[1][1] * d[1] + rot[2][1] * d[2],
                rot[0][2] * d[0] + rot[1][2] * d[1] + rot[2][2] * d[2],
            ];
            let v = v.to_array();
            acc += w
                * ((back[0] - v[0]).powi(2)
                    + (back[1] - v[1]).powi(2)
                    + (back[2] - v[2]).powi(2));
        }
        acc
    }

    fn consistent_set(
        rng: &mut ChaCha8Rng,
        t_star: &RigidTransform<f64>,
        na: usize,
        nb: usize,
    ) -> CorrespondenceSet<f64> {
        let pa = random_cloud(rng, na);
        let pb = random_cloud(rng, nb);
        let va = t_star.apply(&pa);
        let vb = t_star.invert().apply(&pb);
        let wa = random_weights(rng, na);
        let wb = random_weights(rng, nb);
        CorrespondenceSet::new(pa, va, pb, vb, wa, wb).unwrap()
    }

    #[test]
    fn svd3_op_examples() {
        let eye: Mat3<f64> = crate::mat3::m_identity(());
        assert_eq!(svd3(&eye).sigma, [1.0, 1.0, 1.0]);
        let d: Mat3<f64> = [[3.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]];
        let r = svd3(&d);
        assert!((r.sigma[0] - 3.0).abs() < 1e-14);
        assert!((r.sigma[1] - 2.0).abs() < 1e-14);
        assert!((r.sigma[2] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn identity_when_targets_equal_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pa = random_cloud(&mut rng, 12);
        let pb = random_cloud(&mut rng, 9);
        let c = CorrespondenceSet::new(
            pa.clone(),
            pa.clone(),
            pb.clone(),
            pb.clone(),
            random_weights(&mut rng, 12),
            random_weights(&mut rng, 9),
        )
        .unwrap();
        let sol = solve_weighted(&c).unwrap();
        assert!(
            sol.transform
                .rotation
                .frobenius_distance(&RotationMatrix::identity())
                < 1e-10
        );
        assert!(sol.transform.translation.norm() < 1e-10);
        assert!(sol.objective >= 0.0 && sol.objective < 1e-18);
    }

    #[test]
    fn exact_recovery_of_constructing_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..200 {
            let t_star = random_transform(&mut rng);
            let c = consistent_set(&mut rng, &t_star, 8, 11);
            let sol = solve_weighted(&c).unwrap();
            let angle =
                geometry::rotation_angle_between(&sol.transform.rotation, &t_star.rotation);
            let terr =
                geometry::translation_error(sol.transform.translation, t_star.translation);
            assert!(angle < 1e-9, "rotation error {angle}");
            assert!(terr < 1e-9, "translation error {terr}");
        }
    }

    #[test]
    fn reflection_inputs_still_yield_proper_rotation() {
        // Targets are mirrored sources: the best orthogonal map is the
        // reflection diag(1,1,-1), which the solver must refuse.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let pa = random_cloud(&mut rng, 10);
        let pb = random_cloud(&mut rng, 7);
        let mirror = |p: &Vec3<f64>| Vec3::new(p.x, p.y, -p.z);
        let va = PointCloud::new(pa.iter().map(mirror).collect()).unwrap();
        let vb = PointCloud::new(pb.iter().map(mirror).collect()).unwrap();
        let c = CorrespondenceSet::with_uniform_weights(pa, va, pb, vb).unwrap();
        let sol = solve_weighted(&c).unwrap();
        assert!((sol.transform.rotation.det() - 1.0).abs() < 1e-10);

        // The (unreachable) reflection fits these correspondences exactly,
        // so its objective is strictly smaller.
        let refl = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        let j_reflection = objective_oracle(&c, &refl, [0.0; 3]);
        assert!(j_reflection < 1e-20);
        assert!(sol.objective > 1e-3, "objective {}", sol.objective);
        assert!(
            (sol.objective - objective_oracle(&c, sol.transform.rotation.matrix(), sol.transform.translation.to_array())).abs() < 1e-10
        );
    }

    #[test]
    fn collinear_clouds_are_degenerate() {
        let line: Vec<Vec3<f64>> = (0..6)
            .map(|i| Vec3::new(i as f64 * 0.2, 0.0, 0.0))
            .collect();
        let pa = PointCloud::new(line.clone()).unwrap();
        let pb = PointCloud::new(line).unwrap();
        let c = CorrespondenceSet::with_uniform_weights(pa.clone(), pa.clone(), pb.clone(), pb)
            .unwrap();
        match solve_weighted(&c) {
            Err(Error::DegenerateCorrespondences) => {}
            other => panic!("expected DegenerateCorrespondences, got {other:?}"),
        }
    }

    #[test]
    fn weight_scaling_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..20 {
            let t_star = random_transform(&mut rng);
            let mut c = consistent_set(&mut rng, &t_star, 7, 7);
            // perturb targets so the fit is not exact
            let noisy: Vec<Vec3<f64>> = c
                .target_a
                .iter()
                .map(|p| Vec3::new(p.x + rng.gen_range(-0.05..0.05), p.y, p.z))
                .collect();
            c.target_a = PointCloud::new(noisy).unwrap();

            let sol = solve_weighted(&c).unwrap();
            let scale = rng.gen_range(0.1..40.0);
            let scaled = CorrespondenceSet::new(
                c.source_a.clone(),
                c.target_a.clone(),
                c.source_b.clone(),
                c.target_b.clone(),
                c.weights_a.iter().map(|w| w * scale).collect(),
                c.weights_b.iter().map(|w| w * scale).collect(),
            )
            .unwrap();
            let sol2 = solve_weighted(&scaled).unwrap();
            assert!(sol.transform.rotation.frobenius_distance(&sol2.transform.rotation) < 1e-10);
            assert!(
                sol.transform
                    .translation
                    .sub(sol2.transform.translation)
                    .norm()
                    < 1e-10
            );
        }
    }

    #[test]
    fn local_optimality_spot_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let t_star = random_transform(&mut rng);
        let mut c = consistent_set(&mut rng, &t_star, 10, 10);
        // tiny noise keeps the solution interior but non-trivial
        let noisy: Vec<Vec3<f64>> = c
            .target_a
            .iter()
            .map(|p| {
                Vec3::new(
                    p.x + rng.gen_range(-1e-6..1e-6),
                    p.y + rng.gen_range(-1e-6..1e-6),
                    p.z + rng.gen_range(-1e-6..1e-6),
                )
            })
            .collect();
        c.target_a = PointCloud::new(noisy).unwrap();
        let sol = solve_weighted(&c).unwrap();

        for _ in 0..20 {
            let axis = Vec3::new(
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if axis.norm() < 0.1 {
                continue;
            }
            let dr = RotationMatrix::from_axis_angle(axis, 1e-3).unwrap();
            let dt = Vec3::new(
                rng.gen_range(-1e-3..1e-3),
                rng.gen_range(-1e-3..1e-3),
                rng.gen_range(-1e-3..1e-3),
            );
            let perturbed = RigidTransform::new(dr, dt).compose(&sol.transform);
            let j = objective_oracle(
                &c,
                perturbed.rotation.matrix(),
                perturbed.translation.to_array(),
            );
            assert!(
                j >= sol.objective - 1e-15,
                "perturbation decreased objective: {} < {}",
                j,
                sol.objective
            );
        }
    }

    #[test]
    fn translation_only_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let pa = random_cloud(&mut rng, 6);
        let pb = random_cloud(&mut rng, 6);
        let offset = Vec3::new(1.0, 2.0, 3.0);

        // targets offset by +o on side A and -o on side B recover o exactly
        let va = RigidTransform::from_translation(offset).apply(&pa);
        let vb = RigidTransform::from_translation(offset.scale(-1.0)).apply(&pb);
        let c = CorrespondenceSet::with_uniform_weights(pa.clone(), va, pb.clone(), vb).unwrap();
        let sol = solve_translation_only(&c);
        assert_eq!(sol.transform.rotation, RotationMatrix::identity());
        assert!(sol.transform.translation.sub(offset).norm() < 1e-12);

        // zero offset
        let c0 = CorrespondenceSet::with_uniform_weights(
            pa.clone(),
            pa.clone(),
            pb.clone(),
            pb.clone(),
        )
        .unwrap();
        assert!(solve_translation_only(&c0).transform.translation.norm() < 1e-15);

        // offset on side A only with Na = Nb halves via the count mixing
        let o = Vec3::new(-0.4, 0.7, 0.1);
        let va = RigidTransform::from_translation(o).apply(&pa);
        let c1 = CorrespondenceSet::with_uniform_weights(pa.clone(), va, pb.clone(), pb.clone())
            .unwrap();
        let sol = solve_translation_only(&c1);
        assert!(sol.transform.translation.sub(o.scale(0.5)).norm() < 1e-12);
    }

    #[test]
    fn gradient_zero_upstream_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let t_star = random_transform(&mut rng);
        let c = consistent_set(&mut rng, &t_star, 5, 5);
        let zero = TransformGradient {
            rotation: [[0.0; 3]; 3],
            translation: [0.0; 3],
        };
        let g = procrustes_gradient(&c, &zero).unwrap();
        let total: f64 = g
            .source_a
            .iter()
            .chain(&g.target_a)
            .chain(&g.source_b)
            .chain(&g.target_b)
            .flatten()
            .map(|v| v.abs())
            .chain(g.weights_a.iter().map(|v| v.abs()))
            .chain(g.weights_b.iter().map(|v| v.abs()))
            .sum();
        assert_eq!(total, 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let t_star = random_transform(&mut rng);
        let mut c = consistent_set(&mut rng, &t_star, 5, 6);
        // make the instance inconsistent so gradients are generic
        let noisy: Vec<Vec3<f64>> = c
            .target_a
            .iter()
            .map(|p| {
                Vec3::new(
                    p.x + rng.gen_range(-0.1..0.1),
                    p.y + rng.gen_range(-0.1..0.1),
                    p.z + rng.gen_range(-0.1..0.1),
                )
            })
            .collect();
        c.target_a = PointCloud::new(noisy).unwrap();

        let mut upstream = TransformGradient {
            rotation: [[0.0; 3]; 3],
            translation: [0.0; 3],
        };
        for r in 0..3 {
            for col in 0..3 {
                upstream.rotation[r][col] = rng.gen_range(-1.0..1.0);
            }
            upstream.translation[r] = rng.gen_range(-1.0..1.0);
        }

        let loss = |c: &CorrespondenceSet<f64>| -> f64 {
            let sol = solve_weighted(c).unwrap();
            let mut acc = 0.0;
            for r in 0..3 {
                for col in 0..3 {
                    acc += upstream.rotation[r][col] * sol.transform.rotation.matrix()[r][col];
                }
                acc += upstream.translation[r] * sol.transform.translation.to_array()[r];
            }
            acc
        };

        let analytic = procrustes_gradient(&c, &upstream).unwrap();

        let h = 1e-5;
        let rel = |a: f64, f: f64| (a - f).abs() / a.abs().max(f.abs()).max(1e-6);
        let mut max_rel: f64 = 0.0;

        // every coordinate of every cloud
        let clouds: [(&Vec<[f64; 3]>, fn(&mut CorrespondenceSet<f64>) -> &mut PointCloud<f64>); 4] = [
            (&analytic.source_a, |c| &mut c.source_a),
            (&analytic.target_a, |c| &mut c.target_a),
            (&analytic.source_b, |c| &mut c.source_b),
            (&analytic.target_b, |c| &mut c.target_b),
        ];
        for (grads, field) in clouds {
            for i in 0..grads.len() {
                for k in 0..3 {
                    let mut chi = c.clone();
                    let mut clo = c.clone();
                    {
                        let cloud = field(&mut chi);
                        let mut pts = cloud.points().to_vec();
                        let mut a = pts[i].to_array();
                        a[k] += h;
                        pts[i] = Vec3::from_array(a);
                        *cloud = PointCloud::new(pts).unwrap();
                    }
                    {
                        let cloud = field(&mut clo);
                        let mut pts = cloud.points().to_vec();
                        let mut a = pts[i].to_array();
                        a[k] -= h;
                        pts[i] = Vec3::from_array(a);
                        *cloud = PointCloud::new(pts).unwrap();
                    }
                    let fd = (loss(&chi) - loss(&clo)) / (2.0 * h);
                    max_rel = max_rel.max(rel(grads[i][k], fd));
                }
            }
        }
        // weights
        for side in 0..2 {
            let (grads, n) = if side == 0 {
                (&analytic.weights_a, c.weights_a.len())
            } else {
                (&analytic.weights_b, c.weights_b.len())
            };
            for i in 0..n {
                let mut chi = c.clone();
                let mut clo = c.clone();
                if side == 0 {
                    chi.weights_a[i] += h;
                    clo.weights_a[i] -= h;
                } else {
                    chi.weights_b[i] += h;
                    clo.weights_b[i] -= h;
                }
                let fd = (loss(&chi) - loss(&clo)) / (2.0 * h);
                max_rel = max_rel.max(rel(grads[i], fd));
            }
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn translation_only_gradient_matches_hand_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let pa = random_cloud(&mut rng, 4);
        let pb = random_cloud(&mut rng, 6);
        let wa = random_weights(&mut rng, 4);
        let wb = random_weights(&mut rng, 6);
        let c = CorrespondenceSet::new(
            pa.clone(),
            random_cloud(&mut rng, 4),
            pb,
            random_cloud(&mut rng, 6),
            wa.clone(),
            wb.clone(),
        )
        .unwrap();

        // d t_x / d target_a[i]_x = (Na/N) * w_i / sum(w_a)
        let upstream = TransformGradient {
            rotation: [[0.0; 3]; 3],
            translation: [1.0, 0.0, 0.0],
        };
        let g = translation_only_gradient(&c, &upstream);
        let na = 4.0;
        let n = 10.0;
        let wsum: f64 = wa.iter().sum();
        for i in 0..4 {
            let expected = na / n * wa[i] / wsum;
            assert!((g.target_a[i][0] - expected).abs() < 1e-12);
            assert_eq!(g.target_a[i][1], 0.0);
        }
        // side B enters negatively through -wmean(target_b)
        let wsum_b: f64 = wb.iter().sum();
        for j in 0..6 {
            let expected = -(6.0 / n) * wb[j] / wsum_b;
            assert!((g.target_b[j][0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn near_degenerate_spectrum_errors_in_gradient() {
        let pa = PointCloud::new(vec![
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(-1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, -1.0, 0.0),
        ])
        .unwrap();
        let pb = PointCloud::new(vec![Vec3::new(0.0, 0.0, 0.3), Vec3::new(0.0, 0.0, -0.3)])
            .unwrap();
        let c = CorrespondenceSet::with_uniform_weights(pa.clone(), pa.clone(), pb.clone(), pb)
            .unwrap();
        // the solve itself succeeds
        solve_weighted(&c).unwrap();
        let upstream = TransformGradient {
            rotation: [[1.0; 3]; 3],
            translation: [1.0; 3],
        };
        match procrustes_gradient(&c, &upstream) {
            Err(Error::NearDegenerateSpectrum { .. }) => {}
            other => panic!("expected NearDegenerateSpectrum, got {other:?}"),
        }
    }
}
