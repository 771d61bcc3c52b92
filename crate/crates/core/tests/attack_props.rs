use acbi_core::attacks::{acbi_init, fab_attack, pgd_attack, random_start, run_with_restarts, AttackConfig, Init, Method};
use acbi_core::geometry::{BoundarySet, RegionLabel, DEFAULT_TIE_TOL};
use acbi_core::{Architecture, Classifier};
use proptest::prelude::*;

fn mlp(seed: u64) -> (Classifier, BoundarySet) {
    let c = Classifier::from_architecture(
        &Architecture::Mlp {
            input_dim: 6,
            hidden: vec![10],
            repr_dim: 2,
            num_classes: 4,
        },
        seed,
    )
    .unwrap();
    let bs = BoundarySet::from_classifier(&c).unwrap();
    (c, bs)
}

fn in_ball(p: &[f64], x: &[f64], eps: f64) -> bool {
    p.iter()
        .zip(x)
        .all(|(a, b)| (0.0..=1.0).contains(a) && (a - b).abs() <= eps + 1e-12)
}

fn config(eps: f64, seed: u64) -> AttackConfig {
    AttackConfig {
        epsilon: eps,
        alpha: eps / 4.0,
        restarts: 2,
        n_init: 3,
        n_attack: 8,
        record_trace: true,
        seed,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_method_stays_in_the_feasible_box(
        x in prop::collection::vec(0.0..=1.0f64, 6), eps in 0.0..0.5f64, seed in 0u64..1000, model in 0u64..4,
    ) {
        let (c, bs) = mlp(model);
        let y = c.predict(&x).unwrap();
        let cfg = config(eps, seed);
        let start = random_start(&x, eps, seed);
        prop_assert!(in_ball(&start, &x, eps));
        let init = acbi_init(&c, &bs, &x, &start, y, &cfg).unwrap();
        prop_assert!(in_ball(&init, &x, eps));
        for out in [
            pgd_attack(&c, &bs, &x, y, &cfg, &init).unwrap(),
            fab_attack(&c, &bs, &x, y, &cfg, &init).unwrap(),
        ] {
            prop_assert!(in_ball(&out.adversarial, &x, eps));
            prop_assert!(out.restarts[0].gradient_evals <= cfg.n_attack);
        }
        for method in [Method::Pgd, Method::Fab] {
            for init in [Init::Ri, Init::Acbi, Init::None] {
                let out = run_with_restarts(&c, &bs, &x, y, &cfg, method, init).unwrap();
                prop_assert!(in_ball(&out.adversarial, &x, eps));
                for r in &out.restarts {
                    prop_assert!(r.gradient_evals <= cfg.total_budget());
                }
            }
        }
    }

    #[test]
    fn success_means_left_the_true_region(
        x in prop::collection::vec(0.0..=1.0f64, 6), seed in 0u64..1000, model in 0u64..4,
    ) {
        let (c, bs) = mlp(model);
        let y = c.predict(&x).unwrap();
        let cfg = config(0.3, seed);
        for method in [Method::Pgd, Method::Fab] {
            let out = run_with_restarts(&c, &bs, &x, y, &cfg, method, Init::Acbi).unwrap();
            let v = c.representation(&out.adversarial).unwrap();
            let left = bs.region_of(&v, DEFAULT_TIE_TOL).unwrap() != RegionLabel::Class(y);
            prop_assert_eq!(out.success, c.predict(&out.adversarial).unwrap() != y);
            if out.success {
                prop_assert!(left);
            }
        }
    }

    #[test]
    fn zero_init_steps_reduce_to_random_start(
        x in prop::collection::vec(0.0..=1.0f64, 6), seed in 0u64..1000, model in 0u64..4,
    ) {
        let (c, bs) = mlp(model);
        let y = c.predict(&x).unwrap();
        let cfg = AttackConfig { restarts: 1, n_init: 0, n_attack: 10, ..config(0.2, seed) };
        for method in [Method::Pgd, Method::Fab] {
            let a = run_with_restarts(&c, &bs, &x, y, &cfg, method, Init::Acbi).unwrap();
            let b = run_with_restarts(&c, &bs, &x, y, &cfg, method, Init::Ri).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn restarts_are_deterministic(
        x in prop::collection::vec(0.0..=1.0f64, 6), seed in 0u64..1000,
    ) {
        let (c, bs) = mlp(1);
        let y = c.predict(&x).unwrap();
        let cfg = AttackConfig { exhaust_restarts: true, ..config(0.15, seed) };
        let a = run_with_restarts(&c, &bs, &x, y, &cfg, Method::Pgd, Init::Acbi).unwrap();
        let b = run_with_restarts(&c, &bs, &x, y, &cfg, Method::Pgd, Init::Acbi).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.restarts.len(), cfg.restarts);
        for (r, rec) in a.restarts.iter().enumerate() {
            prop_assert_eq!(rec.seed, seed + r as u64);
        }
        if let Some(best) = a.best_restart {
            let total = |i: usize| a.restarts[i].iterations_to_success.map(|t| t + a.restarts[i].init_steps);
            for i in 0..a.restarts.len() {
                if let Some(t) = total(i) {
                    prop_assert!(total(best).unwrap() <= t);
                }
            }
        }
    }
}

#[test]
fn misclassified_input_is_an_immediate_success() {
    let (c, bs) = mlp(0);
    let x = vec![0.5; 6];
    let y = (c.predict(&x).unwrap() + 1) % 4;
    let out = run_with_restarts(&c, &bs, &x, y, &AttackConfig::default(), Method::Fab, Init::Acbi).unwrap();
    assert!(out.success && !out.clean_correct);
    assert!(out.restarts.is_empty());
    assert_eq!(out.adversarial, x);
}

#[test]
fn linear_pgd_meets_the_step_bound() {
    // K = 2, boundary at distance 0.07 along x_0 in L-infinity
    let c = Classifier::linear(vec![2.0, 0.0, 0.0, 0.0], vec![-0.8, 0.0]).unwrap();
    let bs = BoundarySet::from_classifier(&c).unwrap();
    for alpha in [0.005, 0.01, 0.03] {
        let cfg = AttackConfig {
            epsilon: 0.1,
            alpha,
            n_attack: 50,
            ..Default::default()
        };
        let x = [0.47, 0.5];
        let out = pgd_attack(&c, &bs, &x, 0, &cfg, &x).unwrap();
        let bound = (0.07_f64 / alpha - 1e-9).ceil() as usize;
        assert!(out.iterations_to_success().unwrap() <= bound, "alpha {alpha}");
    }
}
