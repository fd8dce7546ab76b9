//! Supervision losses and end-to-end parameter gradients.
//!
//! Three losses supervise training: a point displacement loss comparing the
//! action of the predicted and ground-truth transforms, a direct
//! correspondence loss on the corrected virtual points, and a consistency
//! loss that replaces the ground truth with the predicted transform (and so
//! needs no ground truth at all). Each squared-norm term is a per-point
//! mean, keeping magnitudes comparable across cloud sizes.

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform};
use crate::mat3::{self, Mat3, V3};
use crate::model::{
    cloud_arrays, forward_parts, CrossPoseEstimate, ForwardOptions, ForwardParts, LiftedModel,
    TaxPoseModel,
};
use crate::scalar::{Real, Scalar};
use serde::{Deserialize, Serialize};

/// Weights of the combined loss `disp + lambda_cons * cons + lambda_corr * corr`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights<S: Scalar> {
    pub lambda_cons: S,
    pub lambda_corr: S,
}

impl<S: Scalar> Default for LossWeights<S> {
    fn default() -> Self {
        LossWeights {
            lambda_cons: S::of(0.1),
            lambda_corr: S::of(1.0),
        }
    }
}

impl<S: Scalar> LossWeights<S> {
    pub fn new(lambda_cons: S, lambda_corr: S) -> Result<Self> {
        if lambda_cons < S::zero() || lambda_corr < S::zero() {
            return Err(Error::invalid("loss weights", "must be non-negative"));
        }
        Ok(LossWeights {
            lambda_cons,
            lambda_corr,
        })
    }
}

/// Per-term loss values and their weighted total.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown<S: Scalar> {
    pub disp: S,
    pub corr: S,
    pub cons: S,
    pub total: S,
}

impl<S: Scalar> LossBreakdown<S> {
    /// `total = disp + lambda_cons * cons + lambda_corr * corr`.
    pub fn combine(w: &LossWeights<S>, disp: S, corr: S, cons: S) -> Self {
        Self::combine_opts(w, disp, corr, cons, true)
    }

    /// Like [`Self::combine`]; with `include_disp = false` the displacement
    /// value is still reported but excluded from the total (loss ablations).
    pub fn combine_opts(w: &LossWeights<S>, disp: S, corr: S, cons: S, include_disp: bool) -> Self {
        let base = if include_disp { disp } else { S::zero() };
        LossBreakdown {
            disp,
            corr,
            cons,
            total: base + w.lambda_cons * cons + w.lambda_corr * corr,
        }
    }
}

// ---------------------------------------------------------------------------
// Generic loss terms over Real (shared by evaluation and differentiation).
// ---------------------------------------------------------------------------

/// `R p + t` for a constant point.
fn apply_rt<T: Real>(ctx: T::Ctx, rot: &Mat3<T>, t: V3<T>, p: V3<T::Repr>) -> V3<T> {
    [
        T::dot_const(ctx, &rot[0], &p) + t[0],
        T::dot_const(ctx, &rot[1], &p) + t[1],
        T::dot_const(ctx, &rot[2], &p) + t[2],
    ]
}

/// `R^T (p - t)` for a constant point.
fn apply_inv_rt<T: Real>(ctx: T::Ctx, rot: &Mat3<T>, t: V3<T>, p: V3<T::Repr>) -> V3<T> {
    let d = [
        T::lift(ctx, p[0]) - t[0],
        T::lift(ctx, p[1]) - t[1],
        T::lift(ctx, p[2]) - t[2],
    ];
    mat3::m_tmul_vec(rot, d)
}

fn mean_sq<T: Real>(ctx: T::Ctx, diffs: &[V3<T>]) -> T {
    let terms: Vec<T> = diffs.iter().map(|d| mat3::v_norm_sq(*d)).collect();
    T::sum(ctx, &terms) * T::lit(ctx, 1.0 / diffs.len() as f64)
}

struct GtTargets<S> {
    /// `T_gt p_i` for every action point.
    fwd_a: Vec<V3<S>>,
    /// `T_gt^-1 p_j` for every anchor point.
    inv_b: Vec<V3<S>>,
}

fn gt_targets<S: Scalar>(t_gt: &RigidTransform<S>, a: &[V3<S>], b: &[V3<S>]) -> GtTargets<S> {
    // apply_point / apply_inverse_point use the same arithmetic as the
    // generic apply_rt / apply_inv_rt, so a perfect prediction cancels
    // bit for bit.
    GtTargets {
        fwd_a: a
            .iter()
            .map(|p| {
                t_gt.apply_point(crate::geometry::Vec3::from_array(*p))
                    .to_array()
            })
            .collect(),
        inv_b: b
            .iter()
            .map(|p| {
                t_gt.apply_inverse_point(crate::geometry::Vec3::from_array(*p))
                    .to_array()
            })
            .collect(),
    }
}

fn disp_term<T: Real>(
    ctx: T::Ctx,
    rot: &Mat3<T>,
    t: V3<T>,
    cloud_a: &[V3<T::Repr>],
    cloud_b: &[V3<T::Repr>],
    gt: &GtTargets<T::Repr>,
) -> T {
    let diffs_a: Vec<V3<T>> = cloud_a
        .iter()
        .zip(&gt.fwd_a)
        .map(|(p, g)| {
            let moved = apply_rt(ctx, rot, t, *p);
            [
                moved[0] - T::lift(ctx, g[0]),
                moved[1] - T::lift(ctx, g[1]),
                moved[2] - T::lift(ctx, g[2]),
            ]
        })
        .collect();
    let diffs_b: Vec<V3<T>> = cloud_b
        .iter()
        .zip(&gt.inv_b)
        .map(|(p, g)| {
            let back = apply_inv_rt(ctx, rot, t, *p);
            [
                back[0] - T::lift(ctx, g[0]),
                back[1] - T::lift(ctx, g[1]),
                back[2] - T::lift(ctx, g[2]),
            ]
        })
        .collect();
    mean_sq(ctx, &diffs_a) + mean_sq(ctx, &diffs_b)
}

fn corr_term<T: Real>(
    ctx: T::Ctx,
    corrected_a: &[V3<T>],
    corrected_b: &[V3<T>],
    gt: &GtTargets<T::Repr>,
) -> T {
    let diffs_a: Vec<V3<T>> = corrected_a
        .iter()
        .zip(&gt.fwd_a)
        .map(|(v, g)| {
            [
                v[0] - T::lift(ctx, g[0]),
                v[1] - T::lift(ctx, g[1]),
                v[2] - T::lift(ctx, g[2]),
            ]
        })
        .collect();
    let diffs_b: Vec<V3<T>> = corrected_b
        .iter()
        .zip(&gt.inv_b)
        .map(|(v, g)| {
            [
                v[0] - T::lift(ctx, g[0]),
                v[1] - T::lift(ctx, g[1]),
                v[2] - T::lift(ctx, g[2]),
            ]
        })
        .collect();
    mean_sq(ctx, &diffs_a) + mean_sq(ctx, &diffs_b)
}

fn cons_term<T: Real>(
    ctx: T::Ctx,
    rot: &Mat3<T>,
    t: V3<T>,
    corrected_a: &[V3<T>],
    corrected_b: &[V3<T>],
    cloud_a: &[V3<T::Repr>],
    cloud_b: &[V3<T::Repr>],
) -> T {
    let diffs_a: Vec<V3<T>> = corrected_a
        .iter()
        .zip(cloud_a)
        .map(|(v, p)| mat3::v_sub(*v, apply_rt(ctx, rot, t, *p)))
        .collect();
    let diffs_b: Vec<V3<T>> = corrected_b
        .iter()
        .zip(cloud_b)
        .map(|(v, p)| mat3::v_sub(*v, apply_inv_rt(ctx, rot, t, *p)))
        .collect();
    mean_sq(ctx, &diffs_a) + mean_sq(ctx, &diffs_b)
}

// ---------------------------------------------------------------------------
// Public loss operations on concrete estimates.
// ---------------------------------------------------------------------------

/// Mean squared displacement between the predicted and ground-truth
/// transforms acting on both clouds (forward on A, inverse on B).
pub fn point_displacement_loss<S: Scalar>(
    t_pred: &RigidTransform<S>,
    t_gt: &RigidTransform<S>,
    p_a: &PointCloud<S>,
    p_b: &PointCloud<S>,
) -> S {
    let a = cloud_arrays(p_a);
    let b = cloud_arrays(p_b);
    let gt = gt_targets(t_gt, &a, &b);
    disp_term::<S>(
        (),
        t_pred.rotation.matrix(),
        t_pred.translation.to_array(),
        &a,
        &b,
        &gt,
    )
}

/// Mean squared distance of the corrected virtual points from the
/// ground-truth goal positions.
pub fn direct_correspondence_loss<S: Scalar>(
    est: &CrossPoseEstimate<S>,
    t_gt: &RigidTransform<S>,
    p_a: &PointCloud<S>,
    p_b: &PointCloud<S>,
) -> Result<S> {
    if est.corrected_a.len() != p_a.len() || est.corrected_b.len() != p_b.len() {
        return Err(Error::LengthMismatch(
            "corrected clouds do not match the inputs".into(),
        ));
    }
    let a = cloud_arrays(p_a);
    let b = cloud_arrays(p_b);
    let gt = gt_targets(t_gt, &a, &b);
    Ok(corr_term::<S>(
        (),
        &cloud_arrays(&est.corrected_a),
        &cloud_arrays(&est.corrected_b),
        &gt,
    ))
}

/// Like the correspondence loss but against the predicted transform; needs
/// no ground truth.
pub fn consistency_loss<S: Scalar>(
    est: &CrossPoseEstimate<S>,
    p_a: &PointCloud<S>,
    p_b: &PointCloud<S>,
) -> S {
    cons_term::<S>(
        (),
        est.transform.rotation.matrix(),
        est.transform.translation.to_array(),
        &cloud_arrays(&est.corrected_a),
        &cloud_arrays(&est.corrected_b),
        &cloud_arrays(p_a),
        &cloud_arrays(p_b),
    )
}

/// Evaluates all three losses and their weighted total.
pub fn combined_loss<S: Scalar>(
    w: &LossWeights<S>,
    est: &CrossPoseEstimate<S>,
    t_gt: &RigidTransform<S>,
    p_a: &PointCloud<S>,
    p_b: &PointCloud<S>,
) -> Result<LossBreakdown<S>> {
    let disp = point_displacement_loss(&est.transform, t_gt, p_a, p_b);
    let corr = direct_correspondence_loss(est, t_gt, p_a, p_b)?;
    let cons = consistency_loss(est, p_a, p_b);
    Ok(LossBreakdown::combine(w, disp, corr, cons))
}

// ---------------------------------------------------------------------------
// End-to-end gradient.
// ---------------------------------------------------------------------------

/// Gradient of the combined loss with respect to every model parameter.
#[derive(Clone, Debug)]
pub struct LossGradient<S: Scalar> {
    /// Flat gradients in [`TaxPoseModel::flatten`] order.
    pub gradients: Vec<S>,
    pub breakdown: LossBreakdown<S>,
}

/// Reverse-mode gradients of the combined loss through the encoders,
/// attention, residuals, importance weights and the Procrustes solve.
///
/// Without a ground-truth transform only the consistency term contributes
/// (its value needs no supervision); the displacement and correspondence
/// terms are reported as zero.
pub fn loss_gradient<S: Scalar>(
    model: &TaxPoseModel<S>,
    p_a: &PointCloud<S>,
    p_b: &PointCloud<S>,
    goal: Option<&[S]>,
    t_gt: Option<&RigidTransform<S>>,
    w: &LossWeights<S>,
) -> Result<LossGradient<S>> {
    loss_gradient_opts(model, p_a, p_b, goal, t_gt, w, true)
}

/// [`loss_gradient`] with the displacement term optionally excluded from
/// the optimized total (loss ablations).
pub fn loss_gradient_opts<S: Scalar>(
    model: &TaxPoseModel<S>,
    p_a: &PointCloud<S>,
    p_b: &PointCloud<S>,
    goal: Option<&[S]>,
    t_gt: Option<&RigidTransform<S>>,
    w: &LossWeights<S>,
    include_disp: bool,
) -> Result<LossGradient<S>> {
    loss_gradient_mode(
        model,
        p_a,
        p_b,
        goal,
        t_gt,
        w,
        include_disp,
        crate::autodiff::SvdGradMode::Strict,
    )
}

/// Training-loop entry point: like [`loss_gradient_opts`] but with a
/// selectable SVD differential mode. The clamped mode keeps gradients
/// bounded on the tightly clustered spectra of freshly initialized models
/// and is identical to the strict differential once the spectrum separates.
#[allow(clippy::too_many_arguments)]
pub fn loss_gradient_mode<S: Scalar>(
    model: &TaxPoseModel<S>,
    p_a: &PointCloud<S>,
    p_b: &PointCloud<S>,
    goal: Option<&[S]>,
    t_gt: Option<&RigidTransform<S>>,
    w: &LossWeights<S>,
    include_disp: bool,
    mode: crate::autodiff::SvdGradMode,
) -> Result<LossGradient<S>> {
    use crate::autodiff::{Tape, Var};

    let tape = Tape::<S>::new();
    tape.set_svd_mode(mode);
    let lifted = LiftedModel::<Var<'_, S>>::from_model(model, |p| tape.leaf(p));
    let a = cloud_arrays(p_a);
    let b = cloud_arrays(p_b);
    let parts: ForwardParts<Var<'_, S>> =
        forward_parts(&tape, &lifted, &a, &b, goal, &ForwardOptions::default())?;

    let rot = &parts.solution.rotation;
    let t = parts.solution.translation;

    let zero = tape.constant(S::zero());
    let (disp, corr) = match t_gt {
        Some(gt_transform) => {
            let gt = gt_targets(gt_transform, &a, &b);
            (
                disp_term(&tape, rot, t, &a, &b, &gt),
                corr_term(&tape, &parts.corrected_a, &parts.corrected_b, &gt),
            )
        }
        None => (zero, zero),
    };
    let cons = cons_term(
        &tape,
        rot,
        t,
        &parts.corrected_a,
        &parts.corrected_b,
        &a,
        &b,
    );

    let lc = tape.constant(w.lambda_cons);
    let lr = tape.constant(w.lambda_corr);
    let base = if include_disp { disp } else { zero };
    let total = base + lc * cons + lr * corr;

    let grads = tape.backward(total);
    let gradients: Vec<S> = lifted.param_vars().iter().map(|&v| grads.get(v)).collect();

    Ok(LossGradient {
        gradients,
        breakdown: LossBreakdown {
            disp: disp.val(),
            corr: corr.val(),
            cons: cons.val(),
            total: total.val(),
        },
    })
}
