// scratch probes for the desk-scale training target
use taxpose::autodiff::SvdGradMode;
use taxpose::losses::{combined_loss, loss_gradient_mode, LossWeights};
use taxpose::model::{forward, ModelConfig, TaxPoseModel};
use taxpose::tasks::{builtin_task, make_demo, make_eval_cases, evaluate, sample_training_pair, EvalThresholds, RotationMode};
use taxpose::train::{adam_step, train, AdamState, TrainConfig, TrainGoal};
use taxpose::geometry::rotation_geodesic_error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn overfit_single_sample() {
    let spec = builtin_task::<f64>("peg-in-ring").unwrap();
    let demo = make_demo(&spec, "through", 3).unwrap();
    let sample = sample_training_pair(&demo, 0.7, RotationMode::Full, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model: TaxPoseModel<f64> = TaxPoseModel::init(&ModelConfig::default(), &mut rng);
    let w = LossWeights::default();
    let mut params = model.flatten();
    let mut adam = AdamState::new(params.len());
    for step in 0..400 {
        let g = loss_gradient_mode(
            &model, &sample.posed_a, &sample.posed_b, None, Some(&sample.t_gt), &w, true,
            SvdGradMode::Clamped,
        ).unwrap();
        adam_step(&mut params, &g.gradients, &mut adam, 1e-3, 0.9, 0.999, 1e-8);
        model.load_flat(&params).unwrap();
        if step % 50 == 0 || step == 399 {
            let est = forward(&model, &sample.posed_a, &sample.posed_b, None).unwrap();
            let b = combined_loss(&w, &est, &sample.t_gt, &sample.posed_a, &sample.posed_b).unwrap();
            let er = rotation_geodesic_error(&est.transform.rotation, &sample.t_gt.rotation);
            println!("overfit step {step}: total {:.5} disp {:.5} corr {:.5} E_R {:.2} deg",
                b.total, b.disp, b.corr, er.to_degrees());
        }
    }
}

fn train_vs_resample_gap() {
    use taxpose::tasks::EvalCase;
    let spec = builtin_task::<f64>("peg-in-ring").unwrap();
    let mut cfg = TrainConfig::<f64>::default();
    cfg.steps = 1500;
    cfg.batch_size = 2;
    cfg.seed = 0;
    cfg.rotation_mode = RotationMode::YawOnly;
    let out = train(&cfg, &spec, &TrainGoal::Specific("through".into())).unwrap();
    let thresholds = EvalThresholds::for_anchor_diameter(0.7);

    // (a) fresh poses of the TRAINING demo clouds
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cfg_model = cfg.model.clone();
    cfg_model.goal_context_dim = 0;
    let _ = TaxPoseModel::<f64>::init(&cfg_model, &mut rng); // consume init stream like train()
    let train_demos: Vec<_> = (0..cfg.n_demos)
        .map(|_| make_demo(&spec, "through", rng.gen::<u64>()).unwrap())
        .collect();
    let train_cases: Vec<EvalCase<f64>> = (0..50)
        .map(|k| EvalCase {
            sample: sample_training_pair(&train_demos[k % 10], out.translation_scale, RotationMode::YawOnly, 777 + k as u64),
            goal: "through".into(),
            goal_onehot: None,
        })
        .collect();
    let r_train = evaluate(&out.model, &train_cases, &thresholds).unwrap();
    println!(
        "fresh poses of TRAIN clouds: mean E_R {:.2} deg, E_t {:.3}",
        r_train.mean_rotation_error.to_degrees(),
        r_train.mean_translation_error
    );

    // (b) fresh clouds entirely
    let fresh = make_eval_cases(&spec, Some("through"), 50, out.translation_scale, RotationMode::YawOnly, false, 424242).unwrap();
    let r_fresh = evaluate(&out.model, &fresh, &thresholds).unwrap();
    println!(
        "fresh clouds:                mean E_R {:.2} deg, E_t {:.3}",
        r_fresh.mean_rotation_error.to_degrees(),
        r_fresh.mean_translation_error
    );
}

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "overfit".into());
    match mode.as_str() {
        "overfit" => overfit_single_sample(),
        "gap" => train_vs_resample_gap(),
        "train" => {
            let seed: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0);
            let steps: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(2000);
            let batch: usize = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(2);
            let lr: f64 = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
            let rot: String = std::env::args().nth(6).unwrap_or_else(|| "full".into());
            let rotation_mode = match rot.as_str() {
                "yaw" => RotationMode::YawOnly,
                _ => RotationMode::Full,
            };
            let loss_mode = std::env::args().nth(7).unwrap_or_else(|| "all".into());
            let spec = builtin_task::<f64>("peg-in-ring").unwrap();
            let mut cfg = TrainConfig::<f64>::default();
            cfg.steps = steps;
            cfg.batch_size = batch;
            cfg.learning_rate = lr;
            cfg.seed = seed;
            cfg.eval_every = 250;
            cfg.eval_cases = 30;
            cfg.rotation_mode = rotation_mode;
            if loss_mode == "corr" {
                cfg.include_disp = false;
                cfg.loss_weights.lambda_cons = 0.0;
            }
            let t0 = std::time::Instant::now();
            let out = train(&cfg, &spec, &TrainGoal::Specific("through".into())).unwrap();
            let train_time = t0.elapsed();
            for row in out.trace.iter().filter(|r| r.eval_rotation.is_some()) {
                println!(
                    "step {:5}  total {:.4}  disp {:.4} corr {:.4} cons {:.4}  eval E_R {:.2} deg  E_t {:.4}",
                    row.step, row.total, row.disp, row.corr, row.cons,
                    row.eval_rotation.unwrap().to_degrees(), row.eval_translation.unwrap()
                );
            }
            let cases = make_eval_cases(&spec, Some("through"), 100, out.translation_scale, rotation_mode, false, 424242).unwrap();
            let anchor_diam = 0.7_f64;
            let thresholds = EvalThresholds::for_anchor_diameter(anchor_diam);
            let report = evaluate(&out.model, &cases, &thresholds).unwrap();
            println!(
                "seed {seed} ({rot}): held-out mean E_R {:.3} deg, mean E_t {:.4} ({:.2}% diam), success {:.2}, failures {}, {:?}",
                report.mean_rotation_error.to_degrees(),
                report.mean_translation_error,
                100.0 * report.mean_translation_error / anchor_diam,
                report.success_rate,
                report.solver_failures,
                train_time
            );
        }
        other => eprintln!("unknown probe {other}"),
    }
}

// (appended) distinguishes pose generalization from resample generalization
