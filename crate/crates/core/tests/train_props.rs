use proptest::prelude::*;
use unit_scaling::opslib::ResidualScheme;
use unit_scaling::rng::Rng;
use unit_scaling::tensor::Tensor;
use unit_scaling::train::{
    adam_equivalence_check, adam_step, adam_trajectory_deviation, build_unit_ffn, flop_overhead, lr_compensation,
    random_two_layer, sgd_reparam_check, train_loop, DataConfig, ModelConfig, NormPlacement, OptimState,
    OptimizerConfig, ParamKind, PrecisionConfig, Role, TrainConfig, TrainError,
};

fn small_run(unit: bool, seed: u64) -> TrainConfig {
    let mut model = ModelConfig::new(8, 16, 2, 16, unit);
    model.norm = NormPlacement::None;
    TrainConfig {
        model,
        data: DataConfig::Mixture { input_dim: 4, classes: 3, clusters: 6, spread: 2.0, noise: 0.5, label_noise: 0.0 },
        optimizer: OptimizerConfig::sgd(0.05),
        precision: PrecisionConfig::fp32(),
        steps: 15,
        seed,
        stats_every: 0,
        lr_compensation: false,
        loss_normalizer: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn loss_scaling_is_linear(unit in any::<bool>(), seed in 0u64..1000, k in -10i32..=11) {
        // Powers of two keep the scale and unscale exact.
        let plain = train_loop(&small_run(unit, seed)).unwrap();
        let mut cfg = small_run(unit, seed);
        cfg.precision = PrecisionConfig::fp32().with_loss_scale(2f64.powi(k));
        let scaled = train_loop(&cfg).unwrap();
        for (a, b) in plain.params.iter().zip(&scaled.params) {
            prop_assert!(a.sub(b).unwrap().max_abs() <= 1e-10);
        }
    }

    #[test]
    fn loss_scaling_with_arbitrary_factor(seed in 0u64..1000, c in 1.0f64..4096.0) {
        let plain = train_loop(&small_run(false, seed)).unwrap();
        let mut cfg = small_run(false, seed);
        cfg.precision.loss_scale = c;
        let scaled = train_loop(&cfg).unwrap();
        for (a, b) in plain.params.iter().zip(&scaled.params) {
            prop_assert!(a.sub(b).unwrap().max_abs() <= 1e-10);
        }
    }

    #[test]
    fn adam_ignores_gradient_rescaling(seed in any::<u64>(), k in -20.0f64..20.0) {
        let c = k.exp2();
        let mut rng = Rng::new(seed);
        let mut a = vec![Tensor::randn_with(&[4, 3], 1.0, &mut rng)];
        let mut b = a.clone();
        let mut sa = OptimState::new(OptimizerConfig::adam(0.01), &a);
        let mut sb = OptimState::new(OptimizerConfig::adam(0.01), &b);
        for _ in 0..5 {
            let g = Tensor::randn_with(&[4, 3], 1.0, &mut rng);
            adam_step(&mut a, std::slice::from_ref(&g), &mut sa).unwrap();
            adam_step(&mut b, &[g.scale(c)], &mut sb).unwrap();
        }
        prop_assert!(a[0].sub(&b[0]).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn sgd_and_adam_reparameterisation(seed in 0u64..10_000) {
        let g = random_two_layer(6, 5, 7, 3, &mut Rng::new(seed));
        let sgd = sgd_reparam_check(&g, 30, 0.01, seed).unwrap();
        prop_assert!(sgd < 1e-8, "{}", sgd);
        let adam = adam_equivalence_check(&g, 30, OptimizerConfig::adam(0.01), seed).unwrap();
        prop_assert!(adam < 1e-8, "{}", adam);
    }
}

#[test]
fn adam_matches_reference() {
    let (lr, b1, b2, eps) = (0.02, 0.8, 0.95, 1e-6);
    let mut rng = Rng::new(3);
    let mut p = vec![Tensor::randn_with(&[7], 1.0, &mut rng)];
    let mut state = OptimState::new(OptimizerConfig::Adam { lr, beta1: b1, beta2: b2, eps }, &p);
    let mut theta = p[0].data().to_vec();
    let (mut m, mut v) = (vec![0.0; 7], vec![0.0; 7]);
    for t in 1..=20 {
        let g = Tensor::randn_with(&[7], 1.0, &mut rng);
        adam_step(&mut p, std::slice::from_ref(&g), &mut state).unwrap();
        for i in 0..7 {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            theta[i] -= lr * mh / (vh.sqrt() + eps);
            assert!((p[0].data()[i] - theta[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn adam_epsilon_breaks_equivalence() {
    let g = random_two_layer(6, 5, 7, 3, &mut Rng::new(8));
    let with_eps = OptimizerConfig::Adam { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
    assert!(matches!(adam_equivalence_check(&g, 10, with_eps, 1), Err(TrainError::NonZeroEpsilon(_))));
    // Measurable, not large: the gap shows ε = 0 is really required.
    let d = adam_trajectory_deviation(&g, 100, with_eps, 1).unwrap();
    assert!(d > 1e-12, "{d}");
}

#[test]
fn unit_init_stds_over_seeds() {
    let (hidden, batch) = (128, 64);
    let model = build_unit_ffn(hidden, 512, 3, ResidualScheme::Fixed { tau: 0.5 }, true, batch).unwrap();
    for seed in 0..10u64 {
        let params = model.init_params(seed);
        let mut rng = Rng::stream(seed, 1);
        let x = Tensor::randn_with(&[batch, hidden], 1.0, &mut rng);
        let labels = Tensor::from_vec((0..batch).map(|_| rng.below(hidden) as f64).collect());
        let pass = model.run(&params, &x, &labels, 1.0, None, true).unwrap();
        for r in pass.records.iter().filter(|r| r.role != Role::Param) {
            let sd = r.tensor.stats().unwrap().std;
            assert!((0.5..=2.0).contains(&sd), "seed {seed} {}: {sd}", r.name);
        }
    }
}

#[test]
fn baseline_gradients_shrink_with_depth() {
    let (hidden, batch) = (64, 32);
    let grad_std = |depth: usize| {
        let mut cfg = ModelConfig::new(hidden, 256, depth, batch, false);
        cfg.norm = NormPlacement::None;
        cfg.residual = false;
        cfg.classes = Some(hidden);
        cfg.init_std = Some(0.02);
        let model = unit_scaling::train::ToyModel::build(&cfg).unwrap();
        let params = model.init_params(0);
        let mut rng = Rng::new(1);
        let x = Tensor::randn_with(&[batch, hidden], 1.0, &mut rng);
        let labels = Tensor::from_vec((0..batch).map(|_| rng.below(hidden) as f64).collect());
        let pass = model.run(&params, &x, &labels, 1.0, None, false).unwrap();
        pass.param_grads[0].stats().unwrap().std
    };
    let (shallow, deep) = (grad_std(1), grad_std(4));
    assert!(deep < 1e-3 * shallow, "{shallow} vs {deep}");
}

#[test]
fn lr_compensation_examples() {
    let model = build_unit_ffn(16, 32, 2, ResidualScheme::Fixed { tau: 0.5 }, true, 4).unwrap();
    let m = lr_compensation(&model.params, 1024);
    for (p, k) in model.params.iter().zip(&m) {
        let want = if p.kind == ParamKind::NonProjection { 1.0 / 32.0 } else { 1.0 };
        assert_eq!(*k, want, "{}", p.name);
    }
    assert!(lr_compensation(&model.params, 1).iter().all(|k| *k == 1.0));
}

#[test]
fn flop_overhead_examples() {
    assert_eq!(flop_overhead(1024, 4.0).unwrap(), 0.001953125);
    assert_eq!(flop_overhead(512, 4.0).unwrap(), 0.00390625);
    assert_eq!(flop_overhead(512, 0.0).unwrap(), 0.0);
    assert!(flop_overhead(0, 4.0).is_err());
}

#[test]
fn divergence_terminates_with_report() {
    let mut cfg = small_run(false, 0);
    cfg.optimizer = OptimizerConfig::sgd(1e300);
    cfg.steps = 500;
    match train_loop(&cfg) {
        Err(TrainError::Diverged { step, report }) => {
            assert_eq!(report.losses.len(), step + 1);
            let tail = &report.losses[report.losses.len() - 20..];
            assert!(tail.iter().all(|r| !r.loss.is_finite()));
        }
        other => panic!("expected divergence, got {:?}", other.map(|r| r.final_loss)),
    }
}
