//! SE(3)-invariance pretraining of encoders with a geometrically weighted
//! InfoNCE loss.
//!
//! An encoder is shown the same cloud twice, once in canonical pose and
//! once under a random rigid transform, and the contrastive loss pulls the
//! matched per-point features together while the geometric weighting
//! softens negatives that are spatially close to the positive.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{random_rotation, PointCloud, RigidTransform, Vec3};
use crate::model::{encoder_inputs, FeatureMatrix, LiftedMlp, Mlp};
use crate::scalar::{Real, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Configuration of one pretraining run.
#[derive(Clone, Debug)]
pub struct PretrainConfig<S: Scalar> {
    /// Sharpness of the geometric weighting (`lambda` in `tanh(lambda d)`).
    pub lambda_geo: S,
    pub steps: usize,
    pub learning_rate: S,
    pub seed: u64,
    pub shapes: Vec<PointCloud<S>>,
}

impl<S: Scalar> PretrainConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_geo > S::zero()) {
            return Err(Error::invalid("pretrain config", "lambda_geo must be > 0"));
        }
        if self.steps == 0 {
            return Err(Error::invalid("pretrain config", "steps must be >= 1"));
        }
        if self.shapes.is_empty() {
            return Err(Error::invalid("pretrain config", "no shapes"));
        }
        Ok(())
    }
}

/// Pairwise geometric weights: `d_ii = 1`,
/// `d_ij = tanh(lambda ||p_i - p_j||) / mu` with `mu` the largest
/// off-diagonal `tanh` so the farthest pair gets weight exactly 1.
pub fn geometric_weight_matrix<S: Scalar>(
    cloud: &PointCloud<S>,
    lambda_geo: S,
) -> Result<Vec<Vec<S>>> {
    let n = cloud.len();
    if n < 2 {
        return Err(Error::DegenerateGeometry(
            "geometric weights need at least two points",
        ));
    }
    let pts = cloud.points();
    let mut raw = vec![vec![S::zero(); n]; n];
    let mut mu = S::zero();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let t = (lambda_geo * pts[i].sub(pts[j]).norm()).tanh();
            raw[i][j] = t;
            if t > mu {
                mu = t;
            }
        }
    }
    if !(mu > S::zero()) {
        return Err(Error::DegenerateGeometry("all pairwise distances are zero"));
    }
    for (i, row) in raw.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = if i == j { S::one() } else { *v / mu };
        }
    }
    Ok(raw)
}

/// Generic weighted InfoNCE:
/// `L = -sum_i log[ exp(phi_i . psi_i) / sum_j exp(d_ij (phi_i . psi_j)) ]`,
/// evaluated with a stable log-sum-exp.
fn weighted_infonce_terms<T: Real>(
    ctx: T::Ctx,
    phi: &[Vec<T>],
    psi: &[Vec<T>],
    d: &[Vec<T::Repr>],
) -> T {
    let n = phi.len();
    let mut losses = Vec::with_capacity(n);
    for i in 0..n {
        let logits: Vec<T> = (0..n)
            .map(|j| {
                let dotted = T::dot(ctx, &phi[i], &psi[j]);
                dotted * T::lift(ctx, d[i][j])
            })
            .collect();
        // log-sum-exp with a detached max shift
        let mut max = logits[0].value();
        for l in &logits[1..] {
            if l.value() > max {
                max = l.value();
            }
        }
        let shift = T::lift(ctx, max);
        let exps: Vec<T> = logits.iter().map(|&l| (l - shift).exp()).collect();
        let log_denom = T::sum(ctx, &exps).ln() + shift;
        let positive = T::dot(ctx, &phi[i], &psi[i]);
        losses.push(log_denom - positive);
    }
    T::sum(ctx, &losses)
}

/// Concrete weighted InfoNCE over feature matrices.
pub fn weighted_infonce<S: Scalar>(
    phi: &FeatureMatrix<S>,
    psi: &FeatureMatrix<S>,
    d: &[Vec<S>],
) -> Result<S> {
    if phi.rows() != psi.rows() || phi.cols() != psi.cols() || d.len() != phi.rows() {
        return Err(Error::LengthMismatch(
            "InfoNCE inputs must share shapes".into(),
        ));
    }
    let phi_rows: Vec<Vec<S>> = phi.iter_rows().map(|r| r.to_vec()).collect();
    let psi_rows: Vec<Vec<S>> = psi.iter_rows().map(|r| r.to_vec()).collect();
    Ok(weighted_infonce_terms::<S>((), &phi_rows, &psi_rows, d))
}

fn encoder_features<S: Scalar>(encoder: &Mlp<S>, cloud: &PointCloud<S>) -> Vec<Vec<S>> {
    let arrays: Vec<[S; 3]> = cloud.iter().map(|p| p.to_array()).collect();
    let lifted = LiftedMlp::<S>::from(encoder, &mut |w| w);
    encoder_inputs(&arrays, None, true)
        .iter()
        .map(|row| lifted.encode_row((), row))
        .collect()
}

/// Mean matched-pair feature distance of an encoder under fresh random
/// rigid transforms; the quantity pretraining drives down.
pub fn rotation_invariance_gap<S: Scalar>(
    encoder: &Mlp<S>,
    shapes: &[PointCloud<S>],
    trials: usize,
    rng: &mut ChaCha8Rng,
) -> S {
    let mut acc = S::zero();
    let mut count = 0usize;
    for _ in 0..trials {
        let shape = &shapes[rng.gen_range(0..shapes.len())];
        let t = random_se3(rng, S::of(1.0));
        let moved = t.apply(shape);
        let phi = encoder_features(encoder, shape);
        let psi = encoder_features(encoder, &moved);
        for (f, g) in phi.iter().zip(&psi) {
            let mut d = S::zero();
            for (a, b) in f.iter().zip(g) {
                d = d + (*a - *b) * (*a - *b);
            }
            acc = acc + d.sqrt();
            count += 1;
        }
    }
    acc / S::from_usize(count).unwrap()
}

fn random_se3<S: Scalar>(rng: &mut ChaCha8Rng, scale: S) -> RigidTransform<S> {
    let rotation = random_rotation(rng);
    let translation = Vec3::new(
        S::of(rng.gen_range(-1.0..1.0)) * scale,
        S::of(rng.gen_range(-1.0..1.0)) * scale,
        S::of(rng.gen_range(-1.0..1.0)) * scale,
    );
    RigidTransform::new(rotation, translation)
}

/// Outcome of a pretraining run.
#[derive(Clone, Debug)]
pub struct PretrainReport<S: Scalar> {
    /// Raw per-step loss values.
    pub loss_trace: Vec<S>,
    /// Monotone (cumulative-minimum) smoothing of the trace.
    pub smoothed_trace: Vec<S>,
    pub invariance_before: S,
    pub invariance_after: S,
}

/// Momentum-free gradient descent on the weighted InfoNCE over random
/// shapes and random rigid transforms. Deterministic given the seed.
pub fn pretrain_encoder<S: Scalar>(
    cfg: &PretrainConfig<S>,
    encoder: &mut Mlp<S>,
) -> Result<PretrainReport<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f0f);
    let invariance_before = rotation_invariance_gap(encoder, &cfg.shapes, 5, &mut eval_rng);

    let mut flat = {
        let mut out = Vec::new();
        encoder.push_params(&mut out);
        out
    };
    let mut loss_trace = Vec::with_capacity(cfg.steps);

    for _ in 0..cfg.steps {
        let shape = &cfg.shapes[rng.gen_range(0..cfg.shapes.len())];
        let t = random_se3(&mut rng, S::of(1.0));
        let moved = t.apply(shape);
        let d = geometric_weight_matrix(shape, cfg.lambda_geo)?;

        let tape = Tape::<S>::new();
        let mut params: Vec<Var<'_, S>> = Vec::with_capacity(flat.len());
        let lifted = LiftedMlp::<Var<'_, S>>::from(encoder, &mut |w| {
            let v = tape.leaf(w);
            params.push(v);
            v
        });
        let arrays: Vec<[S; 3]> = shape.iter().map(|p| p.to_array()).collect();
        let arrays_t: Vec<[S; 3]> = moved.iter().map(|p| p.to_array()).collect();
        let phi: Vec<Vec<Var<'_, S>>> = encoder_inputs(&arrays, None, true)
            .iter()
            .map(|row| lifted.encode_row(&tape, row))
            .collect();
        let psi: Vec<Vec<Var<'_, S>>> = encoder_inputs(&arrays_t, None, true)
            .iter()
            .map(|row| lifted.encode_row(&tape, row))
            .collect();
        let loss = weighted_infonce_terms(&tape, &phi, &psi, &d);
        if !loss.val().is_finite() {
            return Err(Error::NonFinite("pretraining loss"));
        }
        loss_trace.push(loss.val());

        let grads = tape.backward(loss);
        for (w, v) in flat.iter_mut().zip(&params) {
            *w = *w - cfg.learning_rate * grads.get(*v);
        }
        encoder.load(&mut flat.iter().copied());
    }

    let invariance_after = rotation_invariance_gap(encoder, &cfg.shapes, 5, &mut eval_rng);
    let mut smoothed_trace = Vec::with_capacity(loss_trace.len());
    let mut best = S::infinity();
    for &l in &loss_trace {
        if l < best {
            best = l;
        }
        smoothed_trace.push(best);
    }
    Ok(PretrainReport {
        loss_trace,
        smoothed_trace,
        invariance_before,
        invariance_after,
    })
}
