use expo_core::alpha_search::{run_search, Outcome, TraceRecorder};
use expo_core::synthetic_lab::{
    directional_derivative, extrapolate_theta, interpolate_theta, make_world, make_world_with,
    run_experiment, train, train_with_trajectory, true_reward, DataOrder, Experiment, LabObjective,
    LabSettings, Optimizer, OptimizerState, TrainConfig, WorldConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn quick_settings() -> LabSettings {
    let mut s = LabSettings::default();
    s.train.steps = 200;
    s
}

#[test]
fn experiments_are_bit_reproducible() {
    let seeds = [4, 5, 6];
    for exp in Experiment::ALL {
        let a = run_experiment(exp, &seeds, &quick_settings()).unwrap();
        let b = run_experiment(exp, &seeds, &quick_settings()).unwrap();
        assert_eq!(a, b, "{exp}");
        assert_eq!(a.to_csv(), b.to_csv());
    }
}

#[test]
fn world_matches_its_configuration() {
    let w = make_world(16, 3, 500, 0.2, 7).unwrap();
    assert_eq!(w.r_star.len(), 16);
    assert_eq!(w.pairs.len(), 500);
    assert_eq!(w.pools.len(), WorldConfig::default().prompts * 3);
    assert_eq!(w.theta0[w.spurious], -1.0);
    let again = make_world_with(w.config, 7).unwrap();
    assert_eq!(again.pairs, w.pairs);
    assert!(make_world(16, 3, 500, 0.2, 8).unwrap().pairs != w.pairs);
}

#[test]
fn optimizer_steps_match_hand_computation() {
    let theta = [0.7, -1.2];
    let grad = [0.4, -0.1];
    let lr = 0.05;

    let mut t = theta;
    OptimizerState::new(2).apply(&Optimizer::adagrad(), lr, &mut t, &grad);
    for i in 0..2 {
        let want = theta[i] - lr * grad[i] / (grad[i].abs() + 1e-10);
        assert!((t[i] - want).abs() <= 1e-12);
    }

    let mut t = theta;
    OptimizerState::new(2).apply(&Optimizer::rmsprop(), lr, &mut t, &grad);
    for i in 0..2 {
        let want = theta[i] - lr * grad[i] / ((0.01 * grad[i] * grad[i]).sqrt() + 1e-8);
        assert!((t[i] - want).abs() <= 1e-12);
    }

    let mut t = theta;
    OptimizerState::new(2).apply(&Optimizer::adamw(), lr, &mut t, &grad);
    for i in 0..2 {
        let decayed = theta[i] * (1.0 - lr * 0.01);
        let want = decayed - lr * grad[i] / (grad[i].abs() + 1e-8);
        assert!((t[i] - want).abs() <= 1e-12);
    }
}

#[test]
fn trajectory_ends_at_trained_parameters() {
    let w = make_world(32, 4, 2000, 0.1, 3).unwrap();
    let cfg = TrainConfig {
        steps: 50,
        ..TrainConfig::default()
    };
    let plain = train(&w, &w.theta0, &cfg).unwrap();
    let traced = train_with_trajectory(&w, &w.theta0, &cfg).unwrap();
    assert_eq!(traced.trajectory.len(), 51);
    assert_eq!(traced.trajectory[0], w.theta0);
    assert_eq!(traced.trajectory.last().unwrap(), &plain.theta);
    assert_eq!(traced.theta, plain.theta);
}

#[test]
fn first_order_gain_after_training() {
    for seed in 0..5 {
        let w = make_world(32, 4, 2000, 0.1, seed).unwrap();
        let theta1 = train(&w, &w.theta0, &TrainConfig::default()).unwrap().theta;
        let delta: Vec<f64> = theta1.iter().zip(&w.theta0).map(|(a, b)| a - b).collect();
        assert!(true_reward(&w, &theta1) > true_reward(&w, &w.theta0));
        assert!(directional_derivative(&w, &w.theta0, &delta, 1e-4) > 0.0);
        let nudged = extrapolate_theta(&w.theta0, &theta1, 0.05);
        assert!(
            true_reward(&w, &nudged) > true_reward(&w, &theta1),
            "seed {seed}"
        );
    }
}

#[test]
fn interpolation_and_extrapolation_share_one_line() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    for _ in 0..50 {
        let alpha: f64 = rng.random_range(0.0..5.0);
        let x = extrapolate_theta(&a, &b, alpha);
        let y = interpolate_theta(&a, &b, 1.0 + alpha);
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() <= 1e-12);
        }
    }
}

#[test]
fn bias_sorted_training_needs_less_extrapolation() {
    let settings = LabSettings::default();
    let mut smaller = 0;
    for seed in 0..5 {
        let w = make_world(32, 4, 2000, 0.1, seed).unwrap();
        let alpha_for = |order| {
            let cfg = TrainConfig {
                steps: 100,
                order,
                ..settings.train
            };
            let theta1 = train(&w, &w.theta0, &cfg).unwrap().theta;
            let obj = LabObjective {
                world: &w,
                theta0: &w.theta0,
                theta1: &theta1,
            };
            match run_search(TraceRecorder::new(&obj, settings.search))
                .unwrap()
                .outcome
            {
                Some(Outcome::Optimal { alpha, .. }) => alpha,
                _ => 0.0,
            }
        };
        if alpha_for(DataOrder::BiasSortedDescending) < alpha_for(DataOrder::Shuffled { seed }) {
            smaller += 1;
        }
    }
    assert!(smaller >= 3, "{smaller}/5");
}
