//! Optimization loop tying the model, losses, tasks and pretraining
//! together, plus the ablation runner.

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform, Vec3};
use crate::losses::{loss_gradient_mode, LossBreakdown, LossWeights};
use crate::model::{ModelConfig, TaxPoseModel, WeightVariant};
use crate::pretrain::{pretrain_encoder, PretrainConfig};
use crate::scalar::Scalar;
use crate::tasks::{
    evaluate, make_demo, make_eval_cases, pretrain_corpus, sample_training_pair, DemoPair,
    EvalReport, EvalThresholds, RotationMode, TaskSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Full training configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound(
    serialize = "S: Serialize + Clone",
    deserialize = "S: serde::de::DeserializeOwned"
))]
pub struct TrainConfig<S: Scalar> {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: S,
    pub beta1: S,
    pub beta2: S,
    pub epsilon: S,
    pub loss_weights: LossWeights<S>,
    /// Displacement term included in the optimized total (off for the
    /// `no_disp` / `scaled_combo` ablations; the value is still traced).
    pub include_disp: bool,
    pub seed: u64,
    pub model: ModelConfig,
    /// Checkpoint whose encoders seed this run.
    pub pretrained_encoder: Option<PathBuf>,
    pub n_demos: usize,
    /// Translation sampling range as a multiple of the anchor diameter.
    pub translation_scale_factor: f64,
    pub rotation_mode: RotationMode,
    /// Evaluate on held-out cases every this many steps (0 disables).
    pub eval_every: usize,
    pub eval_cases: usize,
}

impl<S: Scalar> Default for TrainConfig<S> {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 2,
            learning_rate: S::of(1e-3),
            beta1: S::of(0.9),
            beta2: S::of(0.999),
            epsilon: S::of(1e-8),
            loss_weights: LossWeights::default(),
            include_disp: true,
            seed: 0,
            model: ModelConfig::default(),
            pretrained_encoder: None,
            n_demos: 10,
            translation_scale_factor: 1.0,
            rotation_mode: RotationMode::Full,
            eval_every: 0,
            eval_cases: 50,
        }
    }
}

impl<S: Scalar> TrainConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("train config", "steps must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train config", "batch_size must be >= 1"));
        }
        if self.n_demos == 0 {
            return Err(Error::invalid("train config", "n_demos must be >= 1"));
        }
        Ok(())
    }
}

/// Adaptive moment estimation state; serializes bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(
    serialize = "S: Serialize + Clone",
    deserialize = "S: serde::de::DeserializeOwned"
))]
pub struct AdamState<S: Scalar> {
    pub step: u64,
    pub m: Vec<S>,
    pub v: Vec<S>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![S::zero(); n_params],
            v: vec![S::zero(); n_params],
        }
    }
}

/// One optimizer step; a pure function of `(params, grads, state)`.
pub fn adam_step<S: Scalar>(
    params: &mut [S],
    grads: &[S],
    state: &mut AdamState<S>,
    lr: S,
    beta1: S,
    beta2: S,
    epsilon: S,
) {
    debug_assert_eq!(params.len(), grads.len());
    state.step += 1;
    let t = S::from_u64(state.step).unwrap();
    let bc1 = S::one() - beta1.powf(t);
    let bc2 = S::one() - beta2.powf(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = beta1 * *m + (S::one() - beta1) * *g;
        *v = beta2 * *v + (S::one() - beta2) * *g * *g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + epsilon);
    }
}

/// What a model is trained for.
#[derive(Clone, Debug)]
pub enum TrainGoal {
    /// One model for a single named goal.
    Specific(String),
    /// One goal-conditioned model across the whole goal set.
    GoalConditioned,
}

/// One row of the metrics trace.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceRow<S: Scalar> {
    pub step: usize,
    pub disp: S,
    pub corr: S,
    pub cons: S,
    pub total: S,
    pub eval_rotation: Option<S>,
    pub eval_translation: Option<S>,
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome<S: Scalar> {
    pub model: TaxPoseModel<S>,
    pub trace: Vec<TraceRow<S>>,
    /// Translation sampling range in world units used during the run.
    pub translation_scale: f64,
}

fn jitter_cloud<S: Scalar>(cloud: &PointCloud<S>, rng: &mut ChaCha8Rng, scale: f64) -> PointCloud<S> {
    PointCloud::new(
        cloud
            .iter()
            .map(|p| {
                Vec3::new(
                    p.x + S::of(rng.gen_range(-scale..scale)),
                    p.y + S::of(rng.gen_range(-scale..scale)),
                    p.z + S::of(rng.gen_range(-scale..scale)),
                )
            })
            .collect(),
    )
    .expect("jittered cloud stays valid")
}

/// Gradient of one sample. Training uses the clamped SVD differential:
/// freshly initialized models produce tightly clustered spectra for which
/// the strict cross terms blow up, while the clamped form is identical once
/// the spectrum separates. A rank-deficient solve is still retried with
/// deterministic jitter before the error propagates.
#[allow(clippy::too_many_arguments)]
fn sample_gradient<S: Scalar>(
    model: &TaxPoseModel<S>,
    posed_a: &PointCloud<S>,
    posed_b: &PointCloud<S>,
    goal: Option<&[S]>,
    t_gt: &RigidTransform<S>,
    w: &LossWeights<S>,
    include_disp: bool,
    rng: &mut ChaCha8Rng,
) -> Result<crate::losses::LossGradient<S>> {
    use crate::autodiff::SvdGradMode;
    let mut a = posed_a.clone();
    let mut b = posed_b.clone();
    for attempt in 0..4 {
        match loss_gradient_mode(
            model,
            &a,
            &b,
            goal,
            Some(t_gt),
            w,
            include_disp,
            SvdGradMode::Clamped,
        ) {
            Err(Error::DegenerateCorrespondences) if attempt < 3 => {
                a = jitter_cloud(posed_a, rng, 1e-4);
                b = jitter_cloud(posed_b, rng, 1e-4);
            }
            other => return other,
        }
    }
    unreachable!("loop always returns");
}

/// Trains a model on demonstrations of `spec`. Deterministic given the
/// seed; aborts with a diagnostic step index on a non-finite loss.
pub fn train<S: Scalar>(
    cfg: &TrainConfig<S>,
    spec: &TaskSpec<S>,
    goal: &TrainGoal,
) -> Result<TrainOutcome<S>> {
    train_from(cfg, spec, goal, None)
}

/// [`train`] starting from a supplied model (pretrained encoders or an
/// ablation twin) instead of a fresh initialization.
pub fn train_from<S: Scalar>(
    cfg: &TrainConfig<S>,
    spec: &TaskSpec<S>,
    goal: &TrainGoal,
    initial: Option<TaxPoseModel<S>>,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    spec.validate()?;

    let goal_names: Vec<String> = match goal {
        TrainGoal::Specific(g) => {
            spec.goal_index(g)?;
            vec![g.clone()]
        }
        TrainGoal::GoalConditioned => spec.goal_set.clone(),
    };
    let goal_conditioned = matches!(goal, TrainGoal::GoalConditioned);

    let mut model_cfg = cfg.model.clone();
    model_cfg.goal_context_dim = if goal_conditioned { spec.goal_set.len() } else { 0 };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = match initial {
        Some(m) => m,
        None => TaxPoseModel::init(&model_cfg, &mut rng),
    };

    // demonstrations: n_demos per goal
    let mut demos: Vec<(usize, DemoPair<S>)> = Vec::new();
    for (gi, g) in goal_names.iter().enumerate() {
        for _ in 0..cfg.n_demos {
            demos.push((gi, make_demo(spec, g, rng.gen())?));
        }
    }
    let translation_scale =
        cfg.translation_scale_factor * demos[0].1.cloud_b.diameter().to_f64_lossy();

    let mut params = model.flatten();
    let mut adam = AdamState::new(params.len());
    let mut trace = Vec::with_capacity(cfg.steps);

    let eval_seed = rng.gen::<u64>();
    let anchor_diameter = demos[0].1.cloud_b.diameter();
    let thresholds = EvalThresholds::for_anchor_diameter(anchor_diameter);

    for step in 0..cfg.steps {
        let mut grad_acc = vec![S::zero(); params.len()];
        let mut breakdown = LossBreakdown::<S>::default();
        for _ in 0..cfg.batch_size {
            let (gi, demo) = &demos[rng.gen_range(0..demos.len())];
            let sample = sample_training_pair(demo, translation_scale, cfg.rotation_mode, rng.gen());
            let onehot: Option<Vec<S>> = if goal_conditioned {
                Some(spec.goal_one_hot(&goal_names[*gi])?)
            } else {
                None
            };
            let g = sample_gradient(
                &model,
                &sample.posed_a,
                &sample.posed_b,
                onehot.as_deref(),
                &sample.t_gt,
                &cfg.loss_weights,
                cfg.include_disp,
                &mut rng,
            )?;
            for (acc, gi) in grad_acc.iter_mut().zip(&g.gradients) {
                *acc = *acc + *gi;
            }
            breakdown.disp = breakdown.disp + g.breakdown.disp;
            breakdown.corr = breakdown.corr + g.breakdown.corr;
            breakdown.cons = breakdown.cons + g.breakdown.cons;
            breakdown.total = breakdown.total + g.breakdown.total;
        }
        let inv_batch = S::one() / S::from_usize(cfg.batch_size).unwrap();
        for g in grad_acc.iter_mut() {
            *g = *g * inv_batch;
        }
        breakdown.disp = breakdown.disp * inv_batch;
        breakdown.corr = breakdown.corr * inv_batch;
        breakdown.cons = breakdown.cons * inv_batch;
        breakdown.total = breakdown.total * inv_batch;

        if !breakdown.total.is_finite() {
            return Err(Error::invalid(
                "training",
                format!("non-finite loss at step {step}"),
            ));
        }

        adam_step(
            &mut params,
            &grad_acc,
            &mut adam,
            cfg.learning_rate,
            cfg.beta1,
            cfg.beta2,
            cfg.epsilon,
        );
        model.load_flat(&params)?;

        let (eval_rotation, eval_translation) =
            if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
                let cases = make_eval_cases(
                    spec,
                    match goal {
                        TrainGoal::Specific(g) => Some(g.as_str()),
                        TrainGoal::GoalConditioned => None,
                    },
                    cfg.eval_cases,
                    translation_scale,
                    cfg.rotation_mode,
                    goal_conditioned,
                    eval_seed,
                )?;
                let report = evaluate(&model, &cases, &thresholds)?;
                (
                    Some(report.mean_rotation_error),
                    Some(report.mean_translation_error),
                )
            } else {
                (None, None)
            };

        trace.push(TraceRow {
            step,
            disp: breakdown.disp,
            corr: breakdown.corr,
            cons: breakdown.cons,
            total: breakdown.total,
            eval_rotation,
            eval_translation,
        });
    }

    Ok(TrainOutcome {
        model,
        trace,
        translation_scale,
    })
}

// ---------------------------------------------------------------------------
// Ablations.
// ---------------------------------------------------------------------------

/// The ablation axes reproducible from the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoDisp,
    NoCorr,
    NoCons,
    ScaledCombo,
    NoResidual,
    UnweightedSvd,
    DotProduct,
    MlpCross,
    DimSmall,
    NoPretrain,
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "no_disp" => Ablation::NoDisp,
            "no_corr" => Ablation::NoCorr,
            "no_cons" => Ablation::NoCons,
            "scaled_combo" => Ablation::ScaledCombo,
            "no_residual" => Ablation::NoResidual,
            "unweighted_svd" => Ablation::UnweightedSvd,
            "dot_product" => Ablation::DotProduct,
            "mlp_cross" => Ablation::MlpCross,
            "dim_small" => Ablation::DimSmall,
            "no_pretrain" => Ablation::NoPretrain,
            other => return Err(Error::invalid("ablation", other.to_string())),
        })
    }
}

/// Applies one ablation to a base configuration.
pub fn ablated_config<S: Scalar>(base: &TrainConfig<S>, which: Ablation) -> TrainConfig<S> {
    let mut cfg = base.clone();
    match which {
        Ablation::NoDisp => cfg.include_disp = false,
        Ablation::NoCorr => cfg.loss_weights.lambda_corr = S::zero(),
        Ablation::NoCons => cfg.loss_weights.lambda_cons = S::zero(),
        Ablation::ScaledCombo => {
            // the displacement weight moves onto the consistency term
            cfg.include_disp = false;
            cfg.loss_weights.lambda_cons = S::of(1.1);
            cfg.loss_weights.lambda_corr = S::of(1.0);
        }
        Ablation::NoResidual => cfg.model.residuals_enabled = false,
        Ablation::UnweightedSvd => cfg.model.weighted_svd_enabled = false,
        Ablation::DotProduct => cfg.model.weight_variant = WeightVariant::DotProduct,
        Ablation::MlpCross => cfg.model.weight_variant = WeightVariant::MlpCross,
        Ablation::DimSmall => cfg.model.embed_dim = 16,
        Ablation::NoPretrain => cfg.pretrained_encoder = None,
    }
    cfg
}

/// Side-by-side result of a base and an ablated run with shared seeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound(
    serialize = "S: Serialize + Clone",
    deserialize = "S: serde::de::DeserializeOwned"
))]
pub struct AblationReport<S: Scalar> {
    pub which: Ablation,
    pub base: EvalReport<S>,
    pub ablated: EvalReport<S>,
}

/// Trains the base and the ablated configuration with shared seeds and
/// evaluates both on the same held-out cases.
///
/// For `no_pretrain`, the base run starts from encoders pretrained on the
/// procedural corpus and the ablated run from scratch.
pub fn run_ablation<S: Scalar>(
    base_cfg: &TrainConfig<S>,
    spec: &TaskSpec<S>,
    goal: &TrainGoal,
    which: Ablation,
    eval_count: usize,
) -> Result<AblationReport<S>> {
    let ablated_cfg = ablated_config(base_cfg, which);

    let base_initial = if which == Ablation::NoPretrain {
        Some(pretrained_model(base_cfg, spec, goal)?)
    } else {
        None
    };
    let base_run = train_from(base_cfg, spec, goal, base_initial)?;
    let ablated_run = train(&ablated_cfg, spec, goal)?;

    let goal_conditioned = matches!(goal, TrainGoal::GoalConditioned);
    let cases = make_eval_cases(
        spec,
        match goal {
            TrainGoal::Specific(g) => Some(g.as_str()),
            TrainGoal::GoalConditioned => None,
        },
        eval_count,
        base_run.translation_scale,
        base_cfg.rotation_mode,
        goal_conditioned,
        base_cfg.seed ^ 0xe7a1,
    )?;
    let anchor = make_demo(spec, &spec.goal_set[0], 0)?.cloud_b;
    let thresholds = EvalThresholds::for_anchor_diameter(anchor.diameter());
    Ok(AblationReport {
        which,
        base: evaluate(&base_run.model, &cases, &thresholds)?,
        ablated: evaluate(&ablated_run.model, &cases, &thresholds)?,
    })
}

/// A fresh model whose encoders are pretrained on the procedural corpus.
pub fn pretrained_model<S: Scalar>(
    cfg: &TrainConfig<S>,
    spec: &TaskSpec<S>,
    goal: &TrainGoal,
) -> Result<TaxPoseModel<S>> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.goal_context_dim = match goal {
        TrainGoal::GoalConditioned => spec.goal_set.len(),
        TrainGoal::Specific(_) => 0,
    };
    if model_cfg.goal_context_dim != 0 {
        return Err(Error::invalid(
            "pretraining",
            "pretrained encoders require goal_context_dim = 0",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = TaxPoseModel::init(&model_cfg, &mut rng);
    let shapes = pretrain_corpus(16, cfg.seed ^ 0xc0_7b05);
    let pre_cfg = PretrainConfig {
        lambda_geo: S::of(10.0),
        steps: 300,
        learning_rate: S::of(2e-3),
        seed: cfg.seed ^ 0x9e3779b9,
        shapes,
    };
    pretrain_encoder(&pre_cfg, &mut model.encoder_a)?;
    let mut pre_cfg_b = pre_cfg;
    pre_cfg_b.seed ^= 0x517c_c1b7;
    pretrain_encoder(&pre_cfg_b, &mut model.encoder_b)?;
    Ok(model)
}
